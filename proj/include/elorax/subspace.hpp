#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "elorax/adapter_store.hpp"
#include "elorax/linalg.hpp"

namespace elorax {

enum class SvdMode : std::uint8_t { Exact, Randomized };

std::string_view to_string(SvdMode mode);
SvdMode parse_svd_mode(std::string_view text);

/// How many data components to keep per site.
struct KPolicy {
  enum class Kind : std::uint8_t { FixedK, VarianceThreshold };

  Kind kind = Kind::VarianceThreshold;
  std::size_t k = 0;
  double threshold = 0.75;

  static KPolicy fixed(std::size_t k);
  /// Smallest K whose cumulative explained variance reaches `tau` in (0, 1].
  static KPolicy variance(double tau);
};

/// Principal subspace of one (site, role). Rows of `components` are the
/// retained directions: first `k_data` from the SVD, then `k_pseudo`
/// augmentation rows.
struct SiteSubspace {
  SiteId site;
  Eigen::Index ambient_dim = 0;
  Vector mean;
  RowMatrix components;
  /// Every data singular value computed at extraction, not only the kept ones.
  Vector singular_values;
  /// Energy of the centered stack not covered by `singular_values`; zero for
  /// exact SVD, the Frobenius remainder for randomized SVD.
  double tail_energy = 0.0;
  Eigen::Index k_data = 0;
  Eigen::Index k_pseudo = 0;
  std::uint64_t seed = 0;
  SvdMode svd_mode = SvdMode::Exact;

  bool degenerate = false;   // centered stack was numerically zero
  bool k_capped = false;     // requested K exceeded the numerical rank
  bool orthonormal = true;   // false only for the unorthogonalized baseline

  Eigen::Index k_total() const { return components.rows(); }

  bool operator==(const SiteSubspace& other) const;
};

struct RandomizedSvdOptions {
  std::size_t oversample = 10;
  std::size_t power_iters = 2;
};

struct ExtractOptions {
  SvdMode mode = SvdMode::Exact;
  std::uint64_t seed = 0;
  RandomizedSvdOptions randomized;
};

SiteSubspace extract_subspace(const SiteMatrix& stacked, const KPolicy& policy,
                              const ExtractOptions& options = {});

/// Fraction of centered-stack energy captured by the first k data components.
double explained_variance(const SiteSubspace& subspace, Eigen::Index k);

/// Cumulative explained variance for every stored singular value.
std::vector<double> explained_variance_curve(const SiteSubspace& subspace);

using VectorSampler = std::function<Vector(Eigen::Index dim)>;

inline constexpr double kRejectRelativeNorm = 1e-8;
inline constexpr int kMaxPseudoRetries = 16;

/// Appends up to `p` pseudo components: Gaussian draws orthogonalized
/// against every existing row. Throws AugmentationExhausted when a slot
/// cannot be filled within the retry budget.
SiteSubspace augment_pseudo(const SiteSubspace& subspace, std::size_t p, std::uint64_t seed);
SiteSubspace augment_pseudo(const SiteSubspace& subspace, std::size_t p, std::uint64_t seed,
                            const VectorSampler& sampler);

/// Baseline for the low-resource comparison: appends normalized Gaussian
/// rows without orthogonalizing them. The result is flagged non-orthonormal.
SiteSubspace augment_unorthogonalized(const SiteSubspace& subspace, std::size_t p, std::uint64_t seed);

/// Orthonormal basis of k random directions, zero mean.
SiteSubspace make_random_subspace(Eigen::Index ambient_dim, std::size_t k, std::uint64_t seed);

struct RandomizedSvdResult {
  Vector singular_values;
  RowMatrix right_vectors;  // one row per singular value
  bool rank_deficient = false;
};

/// Range finder with a seeded Gaussian test matrix and `power_iters` rounds
/// of subspace iteration (re-orthonormalized each half step).
RandomizedSvdResult randomized_svd(const RowMatrix& matrix, std::size_t k, std::size_t oversample,
                                   std::size_t power_iters, std::uint64_t seed);

// ---- subspace bundle ---------------------------------------------------

struct SubspaceBundle {
  std::map<SiteId, SiteSubspace> sites;
  std::vector<std::string> source_adapter_ids;
  std::uint64_t seed = 0;
  SvdMode svd_mode = SvdMode::Exact;

  bool operator==(const SubspaceBundle&) const = default;
};

Container to_container(const SubspaceBundle& bundle);
SubspaceBundle subspace_bundle_from_container(const Container& container);

void save_subspace_bundle(const SubspaceBundle& bundle, const std::filesystem::path& dir);
SubspaceBundle load_subspace_bundle(const std::filesystem::path& dir);

/// Content hash of the encoded bundle; coefficient bundles reference it.
std::string subspace_hash(const SubspaceBundle& bundle);

}  // namespace elorax
