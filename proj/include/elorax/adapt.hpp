#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <vector>

#include "elorax/error.hpp"
#include "elorax/projection.hpp"
#include "elorax/subspace.hpp"

namespace elorax {

struct Scheduler {
  enum class Kind : std::uint8_t { Constant, LinearDecay, ReduceOnPlateau };

  Kind kind = Kind::ReduceOnPlateau;
  double factor = 0.5;
  std::size_t patience = 5;
  double min_lr = 1e-6;
};

struct TrainConfig {
  double learning_rate = 0.1;
  std::size_t max_epochs = 100;
  std::size_t batch_size = 0;  // 0 = full batch
  Scheduler scheduler;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  double init_scale = 1e-3;

  void validate() const;
};

/// Linear regression task Y = X (W0 + W*)^T + noise. Rows of X are samples.
struct LinearTask {
  RowMatrix x;  // s_t x n
  RowMatrix y;  // s_t x m
  std::optional<RowMatrix> w_star;  // m x n
  RowMatrix w0;                     // m x n, frozen

  Eigen::Index samples() const { return x.rows(); }
  Eigen::Index in_dim() const { return x.cols(); }
  Eigen::Index out_dim() const { return y.cols(); }
};

/// One entry per epoch; entry 0 is the state before any update.
struct LossTrace {
  std::vector<double> loss;
  std::vector<double> lr;
  std::vector<double> seconds;

  bool operator==(const LossTrace& other) const { return loss == other.loss && lr == other.lr; }
};

void write_trace_csv(const LossTrace& trace, std::ostream& out);

class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, LossTrace trace)
      : Error(ErrorKind::Diverged, what), trace_(std::move(trace)) {}
  const LossTrace& trace() const noexcept { return trace_; }

 private:
  LossTrace trace_;
};

/// x_batch (W0 + delta)^T, one prediction row per input row.
RowMatrix forward(const LinearTask& task, const RowMatrix& delta, const RowMatrix& x_batch);

/// Mean squared error over all s_t x m outputs.
double task_mse(const LinearTask& task, const RowMatrix& delta);

struct CoefficientGradient {
  RowMatrix alpha_a;
  RowMatrix alpha_b;
};

/// mse(forward(compose_update(alpha))) + weight_decay/2 * (|alpha_A|^2 + |alpha_B|^2),
/// with coefficients taken without the subspace means.
double coefficient_objective(const LinearTask& task, const SiteSubspace& sub_a, const SiteSubspace& sub_b,
                             const RowMatrix& alpha_a, const RowMatrix& alpha_b, double weight_decay);

CoefficientGradient coefficient_gradient(const LinearTask& task, const SiteSubspace& sub_a,
                                         const SiteSubspace& sub_b, const RowMatrix& alpha_a,
                                         const RowMatrix& alpha_b, double weight_decay);

struct CoefficientTrainResult {
  CoefficientSet coefficients;  // sites sub_a.site and sub_b.site
  LossTrace trace;
  std::size_t trainable_params = 0;
  RowMatrix delta;  // final composed update
};

/// Gradient descent on alpha_A (K_A x r) and alpha_B (K_B x r) with the
/// components frozen. Throws DivergedError past 1e6x the initial loss.
CoefficientTrainResult train_coefficients(const LinearTask& task, const SiteSubspace& sub_a,
                                          const SiteSubspace& sub_b, std::size_t r, const TrainConfig& cfg);

struct LoraTrainResult {
  SiteMatrix b;  // m x r, starts at zero
  SiteMatrix a;  // r x n, starts Gaussian
  LossTrace trace;
  std::size_t trainable_params = 0;
};

LoraTrainResult train_lora(const LinearTask& task, std::size_t r, const TrainConfig& cfg);

struct ConvergenceRow {
  std::size_t trace_index = 0;
  std::optional<std::size_t> crossing_epoch;
  /// baseline crossing / this crossing; empty when either never crosses.
  std::optional<double> speedup;
};

std::vector<ConvergenceRow> compare_convergence(const std::vector<LossTrace>& traces, double threshold,
                                                std::size_t baseline = 0);

}  // namespace elorax
