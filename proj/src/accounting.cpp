#include "elorax/accounting.hpp"

#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "elorax/error.hpp"

namespace elorax {

using nlohmann::json;

namespace {

std::uint64_t mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out = 0;
  if (__builtin_mul_overflow(a, b, &out)) throw Error(ErrorKind::OutOfRange, "count overflows 64 bits");
  return out;
}

std::uint64_t add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out = 0;
  if (__builtin_add_overflow(a, b, &out)) throw Error(ErrorKind::OutOfRange, "count overflows 64 bits");
  return out;
}

template <typename... Ts>
std::uint64_t product(std::uint64_t first, Ts... rest) {
  std::uint64_t out = first;
  ((out = mul(out, rest)), ...);
  return out;
}

}  // namespace

void DeployConfig::validate() const {
  const std::pair<const char*, std::uint64_t> fields[] = {{"d", d}, {"r", r}, {"k", k}, {"l", l}, {"m", m},
                                                         {"n", n}, {"coeff_r", coeff_r},
                                                         {"bytes_per_scalar", bytes_per_scalar}};
  for (const auto& [name, value] : fields)
    if (value < 1) throw Error(ErrorKind::InvalidArgument, std::string(name) + " must be >= 1");
}

json DeployConfig::to_json() const {
  return {{"d", d}, {"r", r}, {"k", k}, {"l", l}, {"m", m}, {"n", n}, {"coeff_r", coeff_r},
          {"bytes_per_scalar", bytes_per_scalar}};
}

DeployConfig DeployConfig::from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::MalformedManifest, "deploy config must be a JSON object");
  static const std::set<std::string> known = {"d", "r", "k", "l", "m", "n", "coeff_r", "bytes_per_scalar"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw Error(ErrorKind::MalformedManifest, "unknown deploy key \"" + key + "\"");

  DeployConfig c;
  auto read = [&](const char* key, std::uint64_t& field, bool required) {
    if (!j.contains(key)) {
      if (required) throw Error(ErrorKind::MalformedManifest, std::string("deploy config lacks \"") + key + "\"");
      return;
    }
    const json& v = j.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw Error(ErrorKind::MalformedManifest, std::string(key) + " must be a non-negative integer");
    field = v.get<std::uint64_t>();
  };
  read("r", c.r, true);
  read("k", c.k, true);
  read("l", c.l, true);
  read("n", c.n, true);
  read("d", c.d, false);
  read("m", c.m, false);
  if (!j.contains("m")) c.m = c.n;
  read("coeff_r", c.coeff_r, false);
  read("bytes_per_scalar", c.bytes_per_scalar, false);
  c.validate();
  return c;
}

DeployConfig DeployConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedManifest, path.string() + ": " + e.what());
  }
  return from_json(j);
}

Ratio Ratio::of(std::uint64_t num, std::uint64_t den) {
  if (den == 0) throw Error(ErrorKind::InvalidArgument, "ratio with zero denominator");
  const std::uint64_t g = std::gcd(num, den);
  return g == 0 ? Ratio{0, 1} : Ratio{num / g, den / g};
}

std::string Ratio::str() const {
  return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
}

bool Ratio::operator<(const Ratio& other) const {
  return static_cast<unsigned __int128>(num) * other.den < static_cast<unsigned __int128>(other.num) * den;
}

ParamCounts trainable_params(const DeployConfig& cfg) {
  cfg.validate();
  ParamCounts out;
  out.lora = product(cfg.l, cfg.r, add(cfg.m, cfg.n));
  out.elorax = product(cfg.l, cfg.coeff_r, 2, cfg.k);
  out.ratio = Ratio::of(out.lora, out.elorax);
  return out;
}

StorageCounts storage_footprint(const DeployConfig& cfg) {
  cfg.validate();
  StorageCounts out;
  out.lora_scalars = product(2, cfg.d, cfg.r, cfg.l, cfg.n);
  out.elorax_scalars = product(2, cfg.k, cfg.l, add(mul(cfg.d, cfg.coeff_r), cfg.n));
  out.lora_bytes = mul(out.lora_scalars, cfg.bytes_per_scalar);
  out.elorax_bytes = mul(out.elorax_scalars, cfg.bytes_per_scalar);
  out.ratio = Ratio::of(out.lora_scalars, out.elorax_scalars);

  // elorax < lora  <=>  d * (r*n - K*coeff_r) > K*n
  const std::uint64_t per_adapter_lora = mul(cfg.r, cfg.n);
  const std::uint64_t per_adapter_elorax = mul(cfg.k, cfg.coeff_r);
  if (per_adapter_elorax >= per_adapter_lora) {
    out.no_breakeven = true;
  } else {
    out.breakeven_d = mul(cfg.k, cfg.n) / (per_adapter_lora - per_adapter_elorax) + 1;
  }
  return out;
}

MacCounts adapter_flops_delta(const DeployConfig& cfg, std::uint64_t batch) {
  cfg.validate();
  MacCounts out;
  out.lora = product(cfg.l, cfg.r, add(cfg.m, cfg.n), batch);
  const std::uint64_t per_site =
      add(add(mul(cfg.k, cfg.n), product(2, cfg.k, cfg.coeff_r)), mul(cfg.k, cfg.m));
  out.elorax = product(cfg.l, per_site, batch);
  return out;
}

AccountReport account(const DeployConfig& cfg, std::uint64_t batch) {
  return {cfg, trainable_params(cfg), storage_footprint(cfg), adapter_flops_delta(cfg, batch)};
}

json to_json(const AccountReport& report) {
  const auto ratio = [](const Ratio& r) { return json{{"num", r.num}, {"den", r.den}, {"value", r.value()}}; };
  json storage = {{"lora_scalars", report.storage.lora_scalars},
                  {"elorax_scalars", report.storage.elorax_scalars},
                  {"lora_bytes", report.storage.lora_bytes},
                  {"elorax_bytes", report.storage.elorax_bytes},
                  {"ratio", ratio(report.storage.ratio)},
                  {"no_breakeven", report.storage.no_breakeven}};
  storage["breakeven_d"] = report.storage.breakeven_d ? json(*report.storage.breakeven_d) : json(nullptr);
  return {{"format_version", 1},
          {"config", report.config.to_json()},
          {"trainable_params",
           {{"lora", report.params.lora}, {"elorax", report.params.elorax}, {"ratio", ratio(report.params.ratio)}}},
          {"storage", storage},
          {"adapter_macs", {{"lora", report.macs.lora}, {"elorax", report.macs.elorax}}}};
}

std::string group_thousands(std::uint64_t value) {
  std::string digits = std::to_string(value);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out.push_back(',');
    out.push_back(digits[i]);
  }
  return out;
}

std::string format_table(const AccountReport& report) {
  std::ostringstream os;
  const auto row = [&](const std::string& label, std::uint64_t lora, std::uint64_t elorax, const std::string& ratio) {
    os << label << "\t" << group_thousands(lora) << "\t" << group_thousands(elorax) << "\t" << ratio << "\n";
  };
  os << "quantity\tlora\telorax\tratio\n";
  row("trainable_params", report.params.lora, report.params.elorax, report.params.ratio.str());
  row("storage_scalars", report.storage.lora_scalars, report.storage.elorax_scalars, report.storage.ratio.str());
  row("storage_bytes", report.storage.lora_bytes, report.storage.elorax_bytes, report.storage.ratio.str());
  row("adapter_macs", report.macs.lora, report.macs.elorax,
      Ratio::of(report.macs.lora, report.macs.elorax).str());
  os << "breakeven_d\t"
     << (report.storage.breakeven_d ? group_thousands(*report.storage.breakeven_d) : std::string("none"))
     << "\n";
  return os.str();
}

}  // namespace elorax
