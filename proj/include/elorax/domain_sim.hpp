#pragma once

// Synthetic task domains: every task is a linear map whose ground truth
// W*_i = C_i * basis (+ an optional component orthogonal to the shared
// basis), so subspace recovery, zero-shot fits and coefficient training can
// be checked against exact answers.

#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "elorax/adapt.hpp"
#include "elorax/subspace.hpp"

namespace elorax {

struct DomainSpec {
  Eigen::Index m = 8;        // output dim
  Eigen::Index n = 16;       // input dim
  Eigen::Index d = 5;        // task count
  Eigen::Index k_true = 2;   // dimension of the shared row space
  Eigen::Index r = 2;        // adapter rank
  Eigen::Index s_t = 64;     // samples per task
  double noise_sigma = 0.0;
  double offspan_fraction = 0.0;  // energy fraction of W* outside the shared row space
  double input_norm_bound = std::numeric_limits<double>::infinity();  // ||X_i||_F <= M
  double base_scale = 0.0;   // scale of the frozen base W0
  double bias = 0.0;         // constant added to every target
  std::uint64_t seed = 0;

  /// Throws SpecInfeasible.
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static DomainSpec from_json(const nlohmann::json& j);
};

struct SyntheticDomain {
  DomainSpec spec;
  RowMatrix shared_basis;           // k_true x n, orthonormal rows
  std::vector<RowMatrix> mixing;    // C_i, m x k_true
  std::vector<LinearTask> tasks;
};

SyntheticDomain generate_domain(const DomainSpec& spec);

/// Fresh samples for task `index` (same W*, W0), e.g. to vary s_t.
LinearTask sample_task_data(const SyntheticDomain& domain, std::size_t index, Eigen::Index samples,
                            std::uint64_t seed);

struct TaskAdapter {
  SiteMatrix b;  // m x r
  SiteMatrix a;  // r x n
  bool ill_conditioned = false;
  double ridge_used = 0.0;
};

inline constexpr double kMaxCondition = 1e12;

/// Ridge least squares for W (after removing W0), truncated to rank r by SVD
/// and split as B = U sqrt(S), A = sqrt(S) V^T. Directions with singular value
/// below 1e-12 * sigma_1 are dropped (zero rows/columns).
TaskAdapter solve_task_adapter(const LinearTask& task, std::size_t r, double ridge);

/// Unrestricted least-squares solution for W (the update on top of W0).
RowMatrix least_squares_update(const LinearTask& task);

struct MetricRow {
  std::string protocol;
  std::size_t task_id = 0;
  std::string method;
  Eigen::Index k = 0;
  std::size_t params = 0;
  double loss = 0.0;
  double residual = std::numeric_limits<double>::quiet_NaN();
  double angle = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
};

struct SimMetrics {
  std::vector<MetricRow> rows;
  std::vector<std::string> notes;

  /// First row matching (method, task_id); throws OutOfRange.
  const MetricRow& find(const std::string& method, std::size_t task_id) const;
};

struct ProtocolOptions {
  double ridge = 0.0;
  bool train = true;  // leave-one-out: also train coefficients per fold
};

/// For each task: subspace from the other tasks' adapters, then a zero-shot
/// analytic fit of the held-out adapter and coefficient training from scratch.
SimMetrics run_leave_one_out(const SyntheticDomain& domain, const KPolicy& policy, std::size_t r,
                             const TrainConfig& cfg, const ProtocolOptions& options = {});

/// Subspace from the first `n_available` adapters, compared on the last task
/// across three equal-budget arms: random subspace, data + unorthogonalized
/// random rows, data + pseudo components.
SimMetrics run_low_resource(const SyntheticDomain& domain, std::size_t n_available, std::size_t p,
                            std::size_t k, std::size_t r, const TrainConfig& cfg,
                            const ProtocolOptions& options = {});

struct TrendRow {
  Eigen::Index k = 0;
  Eigen::Index samples = 0;
  double offspan_fraction = 0.0;
  double mean_error = 0.0;
  std::vector<double> errors;  // per seed, in input order
};

/// Held-out error ||W* - W_E||_F^2 where W_E is the least-squares fit
/// restricted to the top-K row space of the other tasks' adapters.
std::vector<TrendRow> trend_curves(const DomainSpec& spec, const std::vector<Eigen::Index>& k_list,
                                   const std::vector<Eigen::Index>& s_list,
                                   const std::vector<std::uint64_t>& seeds, double ridge = 0.0);

void write_metrics_csv(const SimMetrics& metrics, std::ostream& out);
nlohmann::json metrics_to_json(const SimMetrics& metrics, const DomainSpec& spec);
void write_trend_csv(const std::vector<TrendRow>& rows, std::ostream& out);

}  // namespace elorax
