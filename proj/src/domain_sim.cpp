#include "elorax/domain_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>

#include "elorax/csv.hpp"
#include "elorax/error.hpp"
#include "elorax/linalg.hpp"
#include "elorax/projection.hpp"
#include "elorax/rng.hpp"

namespace elorax {

using nlohmann::json;

namespace {

[[noreturn]] void infeasible(const std::string& what) { throw Error(ErrorKind::SpecInfeasible, what); }

const SiteId kSiteA{"delta", Role::A};
const SiteId kSiteB{"delta", Role::B};

RowMatrix orthonormal_rows(Eigen::Index k, Eigen::Index dim, Rng& rng) {
  const RowMatrix g = gaussian_matrix(dim, k, rng);
  Eigen::HouseholderQR<RowMatrix> qr(g);
  const RowMatrix q = qr.householderQ() * RowMatrix::Identity(dim, k);
  return q.transpose();
}

void draw_samples(LinearTask& task, const DomainSpec& spec, Eigen::Index samples, Rng& rng) {
  task.x = gaussian_matrix(samples, spec.n, rng);
  const double norm = task.x.norm();
  if (norm > spec.input_norm_bound) task.x *= spec.input_norm_bound / norm;
  task.y = task.x * (task.w0 + *task.w_star).transpose();
  if (spec.noise_sigma > 0.0) task.y += spec.noise_sigma * gaussian_matrix(samples, spec.m, rng);
  if (spec.bias != 0.0) task.y.array() += spec.bias;
}

AdapterBundle as_bundle(const TaskAdapter& adapter, std::size_t index) {
  AdapterBundle b;
  b.adapter_id = "task" + std::to_string(index);
  b.base_model_id = "synthetic";
  b.rank_hint = static_cast<std::uint64_t>(adapter.a.rows());
  b.sites.emplace(kSiteA, adapter.a);
  b.sites.emplace(kSiteB, adapter.b);
  return b;
}

SiteSubspace extract_from(const std::vector<AdapterBundle>& bundles, const SiteId& site, const KPolicy& policy,
                          std::uint64_t seed) {
  SiteSubspace s = extract_subspace(stack_site(bundles, site), policy, {SvdMode::Exact, seed, {}});
  s.site = site;
  return s;
}

double angle_to_basis(const SiteSubspace& sub_a, const RowMatrix& basis) {
  const Eigen::Index k = std::min(sub_a.k_data, basis.rows());
  if (k == 0) return std::numbers::pi / 2;
  return largest_principal_angle(sub_a.components.topRows(k), basis);
}

std::vector<TaskAdapter> solve_all(const SyntheticDomain& domain, std::size_t r, double ridge) {
  std::vector<TaskAdapter> out;
  out.reserve(domain.tasks.size());
  for (const auto& t : domain.tasks) out.push_back(solve_task_adapter(t, r, ridge));
  return out;
}

void note_caps(SimMetrics& metrics, std::size_t task, const SiteSubspace& a, const SiteSubspace& b) {
  for (const SiteSubspace* s : {&a, &b}) {
    if (s->degenerate)
      metrics.notes.push_back("task " + std::to_string(task) + ": " + to_string(s->site) +
                              " stack degenerate, K=0");
    else if (s->k_capped)
      metrics.notes.push_back("task " + std::to_string(task) + ": " + to_string(s->site) +
                              " K capped at numerical rank " + std::to_string(s->k_data));
  }
}

json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string csv_value(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

}  // namespace

// ---- spec --------------------------------------------------------------

void DomainSpec::validate() const {
  if (m < 1 || n < 1 || d < 1 || k_true < 1 || r < 1 || s_t < 1)
    infeasible("m, n, d, k_true, r and s_t must all be >= 1");
  if (k_true > n) infeasible("k_true=" + std::to_string(k_true) + " exceeds n=" + std::to_string(n));
  if (k_true > d * r)
    infeasible("k_true=" + std::to_string(k_true) + " exceeds the aggregate adapter rank d*r=" +
               std::to_string(d * r));
  if (!(offspan_fraction >= 0.0 && offspan_fraction <= 1.0))
    infeasible("offspan_fraction must lie in [0, 1], got " + format_double(offspan_fraction));
  if (offspan_fraction > 0.0 && k_true == n) infeasible("offspan_fraction > 0 needs k_true < n");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) infeasible("noise_sigma must be finite and >= 0");
  if (!(input_norm_bound > 0.0)) infeasible("input_norm_bound must be > 0");
  if (!std::isfinite(base_scale) || !std::isfinite(bias)) infeasible("base_scale and bias must be finite");
}

json DomainSpec::to_json() const {
  json j = {{"m", m},
            {"n", n},
            {"d", d},
            {"k_true", k_true},
            {"r", r},
            {"s_t", s_t},
            {"noise_sigma", noise_sigma},
            {"offspan_fraction", offspan_fraction},
            {"base_scale", base_scale},
            {"bias", bias},
            {"seed", seed}};
  j["input_norm_bound"] = nullable(input_norm_bound);
  return j;
}

DomainSpec DomainSpec::from_json(const json& j) {
  if (!j.is_object()) infeasible("domain config must be a JSON object");
  static const std::set<std::string> known = {"m",     "n",     "d",    "k_true", "r", "s_t", "noise_sigma",
                                              "offspan_fraction", "input_norm_bound", "base_scale", "bias",
                                              "seed"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) infeasible("unknown domain key \"" + key + "\"");

  DomainSpec s;
  try {
    auto count = [&](const char* key, Eigen::Index& field) {
      if (!j.contains(key)) return;
      if (!j.at(key).is_number_integer()) infeasible(std::string(key) + " must be an integer");
      field = static_cast<Eigen::Index>(j.at(key).get<std::int64_t>());
    };
    auto real = [&](const char* key, double& field) {
      if (j.contains(key) && !j.at(key).is_null()) field = j.at(key).get<double>();
    };
    count("m", s.m);
    count("n", s.n);
    count("d", s.d);
    count("k_true", s.k_true);
    count("r", s.r);
    count("s_t", s.s_t);
    real("noise_sigma", s.noise_sigma);
    real("offspan_fraction", s.offspan_fraction);
    real("input_norm_bound", s.input_norm_bound);
    real("base_scale", s.base_scale);
    real("bias", s.bias);
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    infeasible(std::string("domain config: ") + e.what());
  }
  s.validate();
  return s;
}

// ---- generation --------------------------------------------------------

SyntheticDomain generate_domain(const DomainSpec& spec) {
  spec.validate();
  SyntheticDomain dom;
  dom.spec = spec;

  Rng rng(spec.seed);
  dom.shared_basis = orthonormal_rows(spec.k_true, spec.n, rng);
  RowMatrix w0 = RowMatrix::Zero(spec.m, spec.n);
  if (spec.base_scale != 0.0)
    w0 = spec.base_scale / std::sqrt(static_cast<double>(spec.n)) * gaussian_matrix(spec.m, spec.n, rng);

  const RowMatrix complement =
      RowMatrix::Identity(spec.n, spec.n) - dom.shared_basis.transpose() * dom.shared_basis;
  const double f = spec.offspan_fraction;

  for (Eigen::Index i = 0; i < spec.d; ++i) {
    Rng task_rng(derive_seed(spec.seed, static_cast<std::uint64_t>(i) + 1));
    RowMatrix c = gaussian_matrix(spec.m, spec.k_true, task_rng);
    RowMatrix w = c * dom.shared_basis;
    if (f > 0.0) {
      RowMatrix off = gaussian_matrix(spec.m, spec.n, task_rng) * complement;
      const double scale = w.norm() / off.norm();
      w = std::sqrt(1.0 - f) * w + std::sqrt(f) * scale * off;
    }
    LinearTask task;
    task.w0 = w0;
    task.w_star = std::move(w);
    draw_samples(task, spec, spec.s_t, task_rng);
    dom.mixing.push_back(std::move(c));
    dom.tasks.push_back(std::move(task));
  }
  return dom;
}

LinearTask sample_task_data(const SyntheticDomain& domain, std::size_t index, Eigen::Index samples,
                            std::uint64_t seed) {
  if (index >= domain.tasks.size()) throw Error(ErrorKind::OutOfRange, "task index out of range");
  if (samples < 1) throw Error(ErrorKind::InvalidArgument, "samples must be >= 1");
  LinearTask task;
  task.w0 = domain.tasks[index].w0;
  task.w_star = domain.tasks[index].w_star;
  Rng rng(derive_seed(seed, index));
  draw_samples(task, domain.spec, samples, rng);
  return task;
}

// ---- closed-form adapters ----------------------------------------------

namespace {

struct RidgeSolution {
  RowMatrix w;  // m x n
  bool ill_conditioned = false;
  double ridge = 0.0;
};

RidgeSolution ridge_solve(const LinearTask& task, double ridge) {
  if (task.samples() < 1) throw Error(ErrorKind::InvalidArgument, "task has no samples");
  if (!(ridge >= 0.0)) throw Error(ErrorKind::InvalidArgument, "ridge must be >= 0");
  const RowMatrix target = task.y - task.x * task.w0.transpose();  // s x m
  const RowMatrix gram = task.x.transpose() * task.x;               // n x n
  Eigen::SelfAdjointEigenSolver<RowMatrix> eig(gram);
  const Vector e = eig.eigenvalues().cwiseMax(0.0);
  const double e_max = e.maxCoeff();

  RidgeSolution out;
  out.ridge = ridge;
  const double lo = e.minCoeff() + ridge;
  if (lo <= 0.0 || (e_max + ridge) / lo > kMaxCondition) {
    out.ill_conditioned = true;
    out.ridge = std::max(ridge, (e_max > 0.0 ? e_max : 1.0) / kMaxCondition);
  }
  const RowMatrix& q = eig.eigenvectors();
  const Vector inv = (e.array() + out.ridge).inverse().matrix();
  const RowMatrix rhs = q.transpose() * (task.x.transpose() * target);  // n x m
  out.w = (q * (inv.asDiagonal() * rhs)).transpose();
  return out;
}

}  // namespace

RowMatrix least_squares_update(const LinearTask& task) { return ridge_solve(task, 0.0).w; }

TaskAdapter solve_task_adapter(const LinearTask& task, std::size_t r, double ridge) {
  if (r == 0) throw Error(ErrorKind::InvalidArgument, "adapter rank must be >= 1");
  const RidgeSolution sol = ridge_solve(task, ridge);
  const Eigen::Index m = sol.w.rows();
  const Eigen::Index n = sol.w.cols();

  Eigen::JacobiSVD<RowMatrix> svd(sol.w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const Eigen::Index rank = static_cast<Eigen::Index>(r);
  const Eigen::Index keep = std::min<Eigen::Index>(rank, s.size());

  RowMatrix a = RowMatrix::Zero(rank, n);
  RowMatrix b = RowMatrix::Zero(m, rank);
  const double floor = s.size() > 0 ? 1e-12 * s(0) : 0.0;
  for (Eigen::Index i = 0; i < keep; ++i) {
    if (s(i) <= floor || s(i) == 0.0) break;
    const double root = std::sqrt(s(i));
    a.row(i) = root * svd.matrixV().col(i).transpose();
    b.col(i) = root * svd.matrixU().col(i);
  }
  const Vector signs = sign_normalize_rows(a);
  for (Eigen::Index i = 0; i < rank; ++i) b.col(i) *= signs(i);

  TaskAdapter out{SiteMatrix(std::move(b), DType::F64), SiteMatrix(std::move(a), DType::F64),
                  sol.ill_conditioned, sol.ridge};
  return out;
}

// ---- protocols ---------------------------------------------------------

const MetricRow& SimMetrics::find(const std::string& method, std::size_t task_id) const {
  for (const auto& row : rows)
    if (row.method == method && row.task_id == task_id) return row;
  throw Error(ErrorKind::OutOfRange, "no metric row for " + method + " on task " + std::to_string(task_id));
}

SimMetrics run_leave_one_out(const SyntheticDomain& domain, const KPolicy& policy, std::size_t r,
                             const TrainConfig& cfg, const ProtocolOptions& options) {
  const std::size_t d = domain.tasks.size();
  if (d < 2) throw Error(ErrorKind::InvalidArgument, "leave-one-out needs at least two tasks");
  const auto adapters = solve_all(domain, r, options.ridge);
  const Eigen::Index m = domain.spec.m;
  const Eigen::Index n = domain.spec.n;

  SimMetrics metrics;
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<AdapterBundle> others;
    for (std::size_t i = 0; i < d; ++i)
      if (i != j) others.push_back(as_bundle(adapters[i], i));
    const SiteSubspace sub_a = extract_from(others, kSiteA, policy, cfg.seed);
    const SiteSubspace sub_b = extract_from(others, kSiteB, policy, cfg.seed);
    note_caps(metrics, j, sub_a, sub_b);

    const LinearTask& task = domain.tasks[j];
    const double angle = angle_to_basis(sub_a, domain.shared_basis);
    const std::uint64_t fold_seed = derive_seed(cfg.seed, j);
    const Eigen::Index k = sub_a.k_total();

    const SiteCoefficients ca = fit_coefficients(sub_a, adapters[j].a, true);
    const SiteCoefficients cb = fit_coefficients(sub_b, adapters[j].b, true);
    const RowMatrix zs = compose_update(sub_a, ca, sub_b, cb);
    metrics.rows.push_back({"loo", j, "zero_shot", k, 0, task_mse(task, zs),
                            std::hypot(ca.residual_fro, cb.residual_fro), angle, fold_seed});

    const RowMatrix lora = adapters[j].b.values * adapters[j].a.values;
    metrics.rows.push_back({"loo", j, "lora_closed_form", k, r * static_cast<std::size_t>(m + n),
                            task_mse(task, lora), std::numeric_limits<double>::quiet_NaN(),
                            std::numeric_limits<double>::quiet_NaN(), fold_seed});

    if (options.train) {
      TrainConfig fold_cfg = cfg;
      fold_cfg.seed = fold_seed;
      const auto trained = train_coefficients(task, sub_a, sub_b, r, fold_cfg);
      metrics.rows.push_back({"loo", j, "trained", k, trained.trainable_params, trained.trace.loss.back(),
                              std::numeric_limits<double>::quiet_NaN(), angle, fold_seed});
    }
  }
  return metrics;
}

SimMetrics run_low_resource(const SyntheticDomain& domain, std::size_t n_available, std::size_t p,
                            std::size_t k, std::size_t r, const TrainConfig& cfg,
                            const ProtocolOptions& options) {
  const std::size_t d = domain.tasks.size();
  if (n_available < 1 || n_available >= d)
    throw Error(ErrorKind::InvalidArgument, "n_available must lie in [1, d)");
  if (k < 1) throw Error(ErrorKind::InvalidArgument, "k must be >= 1");

  std::vector<AdapterBundle> sources;
  for (std::size_t i = 0; i < n_available; ++i)
    sources.push_back(as_bundle(solve_task_adapter(domain.tasks[i], r, options.ridge), i));
  const std::size_t held_out = d - 1;
  const LinearTask& task = domain.tasks[held_out];

  SimMetrics metrics;
  const SiteSubspace data_a = extract_from(sources, kSiteA, KPolicy::fixed(k), cfg.seed);
  const SiteSubspace data_b = extract_from(sources, kSiteB, KPolicy::fixed(k), cfg.seed);
  note_caps(metrics, held_out, data_a, data_b);

  auto extra = [&](const SiteSubspace& s) {
    return std::min<std::size_t>(p, static_cast<std::size_t>(s.ambient_dim - s.k_data));
  };
  const std::size_t pa = extra(data_a);
  const std::size_t pb = extra(data_b);
  const std::uint64_t seed_a = derive_seed(cfg.seed, 0xa);
  const std::uint64_t seed_b = derive_seed(cfg.seed, 0xb);

  struct Arm {
    const char* name;
    SiteSubspace a;
    SiteSubspace b;
  };
  std::vector<Arm> arms;
  {
    SiteSubspace ra = make_random_subspace(data_a.ambient_dim, static_cast<std::size_t>(data_a.k_data) + pa, seed_a);
    SiteSubspace rb = make_random_subspace(data_b.ambient_dim, static_cast<std::size_t>(data_b.k_data) + pb, seed_b);
    ra.site = kSiteA;
    rb.site = kSiteB;
    arms.push_back({"random", std::move(ra), std::move(rb)});
  }
  arms.push_back({"data_plus_random", augment_unorthogonalized(data_a, pa, seed_a),
                  augment_unorthogonalized(data_b, pb, seed_b)});
  arms.push_back({"data_plus_pseudo", augment_pseudo(data_a, pa, seed_a), augment_pseudo(data_b, pb, seed_b)});

  for (const auto& arm : arms) {
    const auto trained = train_coefficients(task, arm.a, arm.b, r, cfg);
    const double angle = arm.a.orthonormal ? angle_to_basis(arm.a, domain.shared_basis)
                                           : std::numeric_limits<double>::quiet_NaN();
    metrics.rows.push_back({"lowres", held_out, arm.name, arm.a.k_total(), trained.trainable_params,
                            trained.trace.loss.back(), std::numeric_limits<double>::quiet_NaN(), angle, cfg.seed});
  }

  const RowMatrix optimum = least_squares_update(task);
  metrics.rows.push_back({"lowres", held_out, "optimum", 0,
                          static_cast<std::size_t>(domain.spec.m * domain.spec.n), task_mse(task, optimum),
                          std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                          cfg.seed});
  return metrics;
}

std::vector<TrendRow> trend_curves(const DomainSpec& spec, const std::vector<Eigen::Index>& k_list,
                                   const std::vector<Eigen::Index>& s_list,
                                   const std::vector<std::uint64_t>& seeds, double ridge) {
  if (k_list.empty() || s_list.empty() || seeds.empty())
    throw Error(ErrorKind::InvalidArgument, "trend lists must be non-empty");
  if (spec.d < 2) throw Error(ErrorKind::SpecInfeasible, "trend curves need d >= 2");

  std::vector<TrendRow> rows;
  for (Eigen::Index k : k_list)
    for (Eigen::Index s : s_list) rows.push_back({k, s, spec.offspan_fraction, 0.0, {}});

  for (std::uint64_t seed : seeds) {
    DomainSpec seeded = spec;
    seeded.seed = seed;
    const SyntheticDomain dom = generate_domain(seeded);
    const std::size_t held_out = dom.tasks.size() - 1;
    std::vector<AdapterBundle> sources;
    for (std::size_t i = 0; i < held_out; ++i)
      sources.push_back(as_bundle(solve_task_adapter(dom.tasks[i], static_cast<std::size_t>(spec.r), ridge), i));
    const SiteMatrix stacked = stack_site(sources, kSiteA);
    const RowMatrix& w_star = *dom.tasks[held_out].w_star;

    std::size_t row = 0;
    for (Eigen::Index k : k_list) {
      if (k < 1) throw Error(ErrorKind::InvalidArgument, "K must be >= 1");
      const SiteSubspace sub = extract_subspace(stacked, KPolicy::fixed(static_cast<std::size_t>(k)),
                                                {SvdMode::Exact, seed, {}});
      const RowMatrix& v = sub.components;  // K x n
      for (Eigen::Index s : s_list) {
        const LinearTask task = sample_task_data(dom, held_out, s, derive_seed(seed, static_cast<std::uint64_t>(s)));
        RowMatrix w_e = RowMatrix::Zero(spec.m, spec.n);
        if (v.rows() > 0) {
          const RowMatrix z = task.x * v.transpose();  // s x K
          const RowMatrix target = task.y - task.x * task.w0.transpose();
          const RowMatrix coef_t = z.colPivHouseholderQr().solve(target);  // K x m
          w_e = coef_t.transpose() * v;
        }
        rows[row++].errors.push_back((w_star - w_e).squaredNorm());
      }
    }
  }
  for (auto& r : rows) {
    double sum = 0.0;
    for (double e : r.errors) sum += e;
    r.mean_error = sum / static_cast<double>(r.errors.size());
  }
  return rows;
}

// ---- output ------------------------------------------------------------

void write_metrics_csv(const SimMetrics& metrics, std::ostream& out) {
  out << "protocol,task_id,method,K,params,loss,residual,angle,seed\n";
  for (const auto& r : metrics.rows)
    out << r.protocol << ',' << r.task_id << ',' << r.method << ',' << r.k << ',' << r.params << ','
        << csv_value(r.loss) << ',' << csv_value(r.residual) << ',' << csv_value(r.angle) << ',' << r.seed
        << '\n';
}

json metrics_to_json(const SimMetrics& metrics, const DomainSpec& spec) {
  json rows = json::array();
  for (const auto& r : metrics.rows)
    rows.push_back({{"protocol", r.protocol},
                    {"task_id", r.task_id},
                    {"method", r.method},
                    {"K", r.k},
                    {"params", r.params},
                    {"loss", nullable(r.loss)},
                    {"residual", nullable(r.residual)},
                    {"angle", nullable(r.angle)},
                    {"seed", r.seed}});
  return {{"format_version", 1}, {"domain", spec.to_json()}, {"rows", rows}, {"notes", metrics.notes}};
}

void write_trend_csv(const std::vector<TrendRow>& rows, std::ostream& out) {
  out << "K,s_t,offspan_fraction,mean_error,seeds\n";
  for (const auto& r : rows)
    out << r.k << ',' << r.samples << ',' << format_double(r.offspan_fraction) << ','
        << format_double(r.mean_error) << ',' << r.errors.size() << '\n';
}

}  // namespace elorax
