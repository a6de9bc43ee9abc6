#pragma once

// Parameter, storage and adapter-path compute counts. Everything is exact
// unsigned integer arithmetic; ratios are kept as reduced fractions.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

namespace elorax {

struct DeployConfig {
  std::uint64_t d = 1;        // adapter count
  std::uint64_t r = 1;        // LoRA rank
  std::uint64_t k = 1;        // components per site
  std::uint64_t l = 1;        // adapted sites per model
  std::uint64_t m = 1;        // per-site output dim
  std::uint64_t n = 1;        // per-site input dim
  std::uint64_t coeff_r = 1;  // width of alpha
  std::uint64_t bytes_per_scalar = 4;

  /// Throws InvalidArgument unless every count is >= 1.
  void validate() const;

  nlohmann::json to_json() const;
  static DeployConfig from_json(const nlohmann::json& j);
  static DeployConfig load(const std::filesystem::path& path);
};

/// num/den in lowest terms, den > 0.
struct Ratio {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  static Ratio of(std::uint64_t num, std::uint64_t den);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  /// "96" or "1179648/12288"-style reduced text.
  std::string str() const;
  /// Strict comparison by cross multiplication.
  bool operator<(const Ratio& other) const;
  bool operator==(const Ratio& other) const = default;
};

struct ParamCounts {
  std::uint64_t lora = 0;
  std::uint64_t elorax = 0;
  Ratio ratio;  // lora / elorax
};

/// lora = l*r*(m+n); elorax = l*coeff_r*2K.
ParamCounts trainable_params(const DeployConfig& cfg);

struct StorageCounts {
  std::uint64_t lora_scalars = 0;
  std::uint64_t elorax_scalars = 0;
  std::uint64_t lora_bytes = 0;
  std::uint64_t elorax_bytes = 0;
  Ratio ratio;  // lora / elorax
  /// Smallest d with elorax_scalars < lora_scalars; empty when K*coeff_r >= r*n.
  std::optional<std::uint64_t> breakeven_d;
  bool no_breakeven = false;
};

/// lora = 2*d*r*l*n (m treated as n); elorax = 2*K*l*(d*coeff_r + n).
StorageCounts storage_footprint(const DeployConfig& cfg);

struct MacCounts {
  std::uint64_t lora = 0;
  std::uint64_t elorax = 0;
};

/// Multiply-accumulates of the adapter path only, times `batch` samples.
/// lora = l*r*(m+n); elorax = l*(K*n + 2*K*coeff_r + K*m).
MacCounts adapter_flops_delta(const DeployConfig& cfg, std::uint64_t batch = 1);

struct AccountReport {
  DeployConfig config;
  ParamCounts params;
  StorageCounts storage;
  MacCounts macs;
};

AccountReport account(const DeployConfig& cfg, std::uint64_t batch = 1);
nlohmann::json to_json(const AccountReport& report);
/// Plain-text table, integers with thousands separators.
std::string format_table(const AccountReport& report);
std::string group_thousands(std::uint64_t value);

}  // namespace elorax
