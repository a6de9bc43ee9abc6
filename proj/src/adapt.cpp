#include "elorax/adapt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "elorax/csv.hpp"

namespace elorax {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorKind::InvalidArgument, "learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw Error(ErrorKind::InvalidArgument, "weight_decay must be >= 0");
  if (scheduler.kind == Scheduler::Kind::ReduceOnPlateau) {
    if (!(scheduler.factor > 0.0 && scheduler.factor < 1.0))
      throw Error(ErrorKind::InvalidArgument, "plateau factor must lie in (0, 1)");
    if (!(scheduler.min_lr >= 0.0)) throw Error(ErrorKind::InvalidArgument, "min_lr must be >= 0");
  }
  if (!std::isfinite(init_scale)) throw Error(ErrorKind::InvalidArgument, "init_scale must be finite");
}

void write_trace_csv(const LossTrace& trace, std::ostream& out) {
  out << "epoch,loss,lr,seconds\n";
  for (std::size_t i = 0; i < trace.loss.size(); ++i)
    out << i << ',' << format_double(trace.loss[i]) << ',' << format_double(trace.lr[i]) << ','
        << format_double(trace.seconds[i]) << '\n';
}

namespace {

void check_task(const LinearTask& task, Eigen::Index m, Eigen::Index n) {
  if (task.y.rows() != task.x.rows())
    throw Error(ErrorKind::DimMismatch, "X and Y disagree on the sample count");
  if (task.w0.rows() != task.out_dim() || task.w0.cols() != task.in_dim())
    throw Error(ErrorKind::DimMismatch, "W0 must be m x n");
  if (m != task.out_dim() || n != task.in_dim())
    throw Error(ErrorKind::DimMismatch, "update is " + std::to_string(m) + "x" + std::to_string(n) +
                                            " but the task is " + std::to_string(task.out_dim()) + "x" +
                                            std::to_string(task.in_dim()));
}

// dL/d(delta) for the mean squared error over a batch: (2 / (b m)) R^T X.
RowMatrix delta_gradient(const RowMatrix& weight, const RowMatrix& xb, const RowMatrix& yb) {
  const RowMatrix residual = xb * weight.transpose() - yb;
  const double scale = 2.0 / static_cast<double>(residual.rows() * residual.cols());
  return scale * (residual.transpose() * xb);
}

SiteCoefficients bare_coefficients(const SiteSubspace& s, const RowMatrix& alpha) {
  SiteCoefficients c;
  c.site = s.site;
  c.alpha = alpha;
  c.include_mean = false;
  return c;
}

RowMatrix coefficient_delta(const SiteSubspace& sub_a, const SiteSubspace& sub_b, const RowMatrix& alpha_a,
                            const RowMatrix& alpha_b) {
  return compose_update(sub_a, bare_coefficients(sub_a, alpha_a), sub_b, bare_coefficients(sub_b, alpha_b));
}

// Plain (mini-batch) gradient descent shared by both trainers. `grad` maps a
// batch to one gradient per parameter; `loss` evaluates the full-data MSE.
template <typename GradFn, typename LossFn>
LossTrace run_descent(const std::vector<RowMatrix*>& params, const LinearTask& task, const TrainConfig& cfg,
                      GradFn&& grad, LossFn&& loss) {
  cfg.validate();
  LossTrace trace;
  double lr = cfg.learning_rate;
  const double initial = loss();
  trace.loss.push_back(initial);
  trace.lr.push_back(lr);
  trace.seconds.push_back(0.0);
  if (!std::isfinite(initial)) throw DivergedError("initial loss is not finite", trace);

  const auto samples = static_cast<std::size_t>(task.samples());
  const bool full_batch = cfg.batch_size == 0 || cfg.batch_size >= samples;
  std::vector<Eigen::Index> order(samples);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Rng shuffle_rng(derive_seed(cfg.seed, 0x5eed));

  double best = initial;
  std::size_t bad_epochs = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    if (cfg.scheduler.kind == Scheduler::Kind::LinearDecay)
      lr = cfg.learning_rate * (1.0 - static_cast<double>(epoch) / static_cast<double>(cfg.max_epochs));

    const auto apply = [&](const std::vector<RowMatrix>& g) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (cfg.weight_decay > 0.0)
          *params[i] -= lr * (g[i] + cfg.weight_decay * *params[i]);
        else
          *params[i] -= lr * g[i];
      }
    };
    if (full_batch) {
      apply(grad(task.x, task.y));
    } else {
      for (std::size_t i = samples; i > 1; --i)
        std::swap(order[i - 1], order[shuffle_rng.below(i)]);
      for (std::size_t begin = 0; begin < samples; begin += cfg.batch_size) {
        const std::size_t end = std::min(samples, begin + cfg.batch_size);
        RowMatrix xb(static_cast<Eigen::Index>(end - begin), task.x.cols());
        RowMatrix yb(static_cast<Eigen::Index>(end - begin), task.y.cols());
        for (std::size_t k = begin; k < end; ++k) {
          xb.row(static_cast<Eigen::Index>(k - begin)) = task.x.row(order[k]);
          yb.row(static_cast<Eigen::Index>(k - begin)) = task.y.row(order[k]);
        }
        apply(grad(xb, yb));
      }
    }

    const double value = loss();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trace.loss.push_back(value);
    trace.lr.push_back(lr);
    trace.seconds.push_back(secs);
    if (!std::isfinite(value) || (initial > 0.0 && value > 1e6 * initial))
      throw DivergedError("loss " + format_double(value) + " at epoch " + std::to_string(epoch + 1) +
                              " exceeds 1e6x the initial " + format_double(initial),
                          trace);

    if (cfg.scheduler.kind == Scheduler::Kind::ReduceOnPlateau) {
      if (value < best * (1.0 - 1e-4)) {
        best = value;
        bad_epochs = 0;
      } else if (++bad_epochs > cfg.scheduler.patience) {
        lr = std::max(lr * cfg.scheduler.factor, cfg.scheduler.min_lr);
        bad_epochs = 0;
      }
    }
  }
  return trace;
}

}  // namespace

RowMatrix forward(const LinearTask& task, const RowMatrix& delta, const RowMatrix& x_batch) {
  check_task(task, delta.rows(), delta.cols());
  if (x_batch.cols() != task.in_dim()) throw Error(ErrorKind::DimMismatch, "x_batch has the wrong width");
  return x_batch * (task.w0 + delta).transpose();
}

double task_mse(const LinearTask& task, const RowMatrix& delta) {
  const RowMatrix residual = forward(task, delta, task.x) - task.y;
  return residual.squaredNorm() / static_cast<double>(residual.size());
}

double coefficient_objective(const LinearTask& task, const SiteSubspace& sub_a, const SiteSubspace& sub_b,
                             const RowMatrix& alpha_a, const RowMatrix& alpha_b, double weight_decay) {
  const double mse = task_mse(task, coefficient_delta(sub_a, sub_b, alpha_a, alpha_b));
  return mse + 0.5 * weight_decay * (alpha_a.squaredNorm() + alpha_b.squaredNorm());
}

namespace {

CoefficientGradient batch_coefficient_gradient(const LinearTask& task, const SiteSubspace& sub_a,
                                               const SiteSubspace& sub_b, const RowMatrix& alpha_a,
                                               const RowMatrix& alpha_b, const RowMatrix& xb,
                                               const RowMatrix& yb) {
  const RowMatrix a_hat = alpha_a.transpose() * sub_a.components;  // r x n
  const RowMatrix b_hat = sub_b.components.transpose() * alpha_b;  // m x r
  const RowMatrix g = delta_gradient(task.w0 + b_hat * a_hat, xb, yb);  // m x n
  CoefficientGradient out;
  out.alpha_b = sub_b.components * (g * a_hat.transpose());           // K_B x r
  out.alpha_a = sub_a.components * (b_hat.transpose() * g).transpose();  // K_A x r
  return out;
}

}  // namespace

CoefficientGradient coefficient_gradient(const LinearTask& task, const SiteSubspace& sub_a,
                                         const SiteSubspace& sub_b, const RowMatrix& alpha_a,
                                         const RowMatrix& alpha_b, double weight_decay) {
  check_task(task, sub_b.ambient_dim, sub_a.ambient_dim);
  CoefficientGradient g = batch_coefficient_gradient(task, sub_a, sub_b, alpha_a, alpha_b, task.x, task.y);
  g.alpha_a += weight_decay * alpha_a;
  g.alpha_b += weight_decay * alpha_b;
  return g;
}

CoefficientTrainResult train_coefficients(const LinearTask& task, const SiteSubspace& sub_a,
                                          const SiteSubspace& sub_b, std::size_t r, const TrainConfig& cfg) {
  if (r < 1) throw Error(ErrorKind::InvalidArgument, "coefficient width r must be >= 1");
  check_task(task, sub_b.ambient_dim, sub_a.ambient_dim);

  Rng rng(cfg.seed);
  const auto width = static_cast<Eigen::Index>(r);
  RowMatrix alpha_a = cfg.init_scale * gaussian_matrix(sub_a.k_total(), width, rng);
  RowMatrix alpha_b = cfg.init_scale * gaussian_matrix(sub_b.k_total(), width, rng);

  CoefficientTrainResult out;
  out.trainable_params = r * static_cast<std::size_t>(sub_a.k_total() + sub_b.k_total());
  out.trace = run_descent(
      {&alpha_a, &alpha_b}, task, cfg,
      [&](const RowMatrix& xb, const RowMatrix& yb) {
        CoefficientGradient g = batch_coefficient_gradient(task, sub_a, sub_b, alpha_a, alpha_b, xb, yb);
        return std::vector<RowMatrix>{std::move(g.alpha_a), std::move(g.alpha_b)};
      },
      [&] { return task_mse(task, coefficient_delta(sub_a, sub_b, alpha_a, alpha_b)); });

  out.delta = coefficient_delta(sub_a, sub_b, alpha_a, alpha_b);
  out.coefficients.adapter_id = "trained";
  out.coefficients.sites[sub_a.site] = bare_coefficients(sub_a, alpha_a);
  out.coefficients.sites[sub_b.site] = bare_coefficients(sub_b, alpha_b);
  return out;
}

LoraTrainResult train_lora(const LinearTask& task, std::size_t r, const TrainConfig& cfg) {
  if (r < 1) throw Error(ErrorKind::InvalidArgument, "rank r must be >= 1");
  const Eigen::Index m = task.out_dim();
  const Eigen::Index n = task.in_dim();
  check_task(task, m, n);

  Rng rng(cfg.seed);
  const auto width = static_cast<Eigen::Index>(r);
  RowMatrix b = RowMatrix::Zero(m, width);
  RowMatrix a = gaussian_matrix(width, n, rng) / std::sqrt(static_cast<double>(n));

  LoraTrainResult out;
  out.trainable_params = r * static_cast<std::size_t>(m + n);
  out.trace = run_descent(
      {&b, &a}, task, cfg,
      [&](const RowMatrix& xb, const RowMatrix& yb) {
        const RowMatrix g = delta_gradient(task.w0 + b * a, xb, yb);
        return std::vector<RowMatrix>{g * a.transpose(), b.transpose() * g};
      },
      [&] { return task_mse(task, b * a); });
  out.b = SiteMatrix(std::move(b), DType::F64);
  out.a = SiteMatrix(std::move(a), DType::F64);
  return out;
}

std::vector<ConvergenceRow> compare_convergence(const std::vector<LossTrace>& traces, double threshold,
                                                std::size_t baseline) {
  std::vector<ConvergenceRow> rows;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    ConvergenceRow row;
    row.trace_index = i;
    const auto& loss = traces[i].loss;
    for (std::size_t e = 0; e < loss.size(); ++e) {
      if (loss[e] <= threshold) {
        row.crossing_epoch = e;
        break;
      }
    }
    rows.push_back(row);
  }
  if (baseline < rows.size() && rows[baseline].crossing_epoch) {
    const auto base = static_cast<double>(*rows[baseline].crossing_epoch);
    for (auto& row : rows) {
      if (!row.crossing_epoch) continue;
      const auto mine = static_cast<double>(*row.crossing_epoch);
      if (mine == 0.0)
        row.speedup = base == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
      else
        row.speedup = base / mine;
    }
  }
  return rows;
}

}  // namespace elorax
