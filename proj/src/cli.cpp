#include "elorax/cli.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <optional>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "elorax/accounting.hpp"
#include "elorax/adapt.hpp"
#include "elorax/adapter_store.hpp"
#include "elorax/csv.hpp"
#include "elorax/domain_sim.hpp"
#include "elorax/error.hpp"
#include "elorax/projection.hpp"
#include "elorax/subspace.hpp"

namespace elorax {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ELORAX_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) n = std::min<std::size_t>(n, v);
  }
  return n;
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  // Report the lowest failing index so failures do not depend on scheduling.
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool quiet = false;
  std::string out;
};

struct Io {
  std::ostream& out;
  std::ostream& err;
  const Globals& g;

  void progress(const std::string& line) const {
    if (!g.quiet) err << line << '\n';
  }
};

fs::path require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw Error(ErrorKind::InvalidArgument, std::string(what) + " needs --out");
  return g.out;
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  return f;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedManifest, path.string() + ": " + e.what());
  }
}

std::vector<AdapterBundle> load_all(const std::vector<std::string>& dirs) {
  std::vector<AdapterBundle> out;
  for (const auto& d : dirs) out.push_back(load_adapter_bundle(d));
  return out;
}

void write_variance_csv(const SubspaceBundle& bundle, std::ostream& out) {
  out << "site_name,role,k,singular_value,cum_variance\n";
  for (const auto& [site, s] : bundle.sites) {
    const auto curve = explained_variance_curve(s);
    for (std::size_t i = 0; i < curve.size(); ++i)
      out << site.name << ',' << to_string(site.role) << ',' << (i + 1) << ','
          << format_double(s.singular_values(static_cast<Eigen::Index>(i))) << ',' << format_double(curve[i])
          << '\n';
  }
}

// ---- extract / augment -------------------------------------------------

struct ExtractArgs {
  std::vector<std::string> adapters;
  std::optional<std::size_t> k;
  std::optional<double> variance;
  std::size_t pseudo = 0;
  std::string svd = "exact";
};

int cmd_extract(const ExtractArgs& a, const Io& io) {
  if (a.adapters.empty()) throw Error(ErrorKind::InvalidArgument, "extract needs at least one --adapters entry");
  if (a.k.has_value() == a.variance.has_value())
    throw Error(ErrorKind::InvalidArgument, "extract needs exactly one of --k or --variance");
  const fs::path out = require_out(io.g, "extract");
  const KPolicy policy = a.k ? KPolicy::fixed(*a.k) : KPolicy::variance(*a.variance);
  const SvdMode mode = parse_svd_mode(a.svd);

  const auto bundles = load_all(a.adapters);
  const SiteCatalog catalog = validate_collection(bundles);
  for (const auto& w : catalog.warnings) io.progress("warning: " + w);

  std::vector<SiteId> sites;
  for (const auto& [site, _] : catalog.sites) sites.push_back(site);
  std::vector<SiteSubspace> results(sites.size());
  parallel_for(sites.size(), [&](std::size_t i) {
    const std::uint64_t site_seed = derive_seed(io.g.seed, i);
    SiteSubspace s = extract_subspace(stack_site(bundles, sites[i]), policy, {mode, site_seed, {}});
    s.site = sites[i];
    if (a.pseudo > 0 && !s.degenerate) s = augment_pseudo(s, a.pseudo, derive_seed(site_seed, 1));
    results[i] = std::move(s);
  });

  SubspaceBundle bundle;
  bundle.seed = io.g.seed;
  bundle.svd_mode = mode;
  for (const auto& b : bundles) bundle.source_adapter_ids.push_back(b.adapter_id);
  bool any_usable = false;
  for (auto& s : results) {
    if (s.degenerate) io.progress("warning: " + to_string(s.site) + " stack is degenerate");
    if (s.k_capped) io.progress("warning: " + to_string(s.site) + " K capped at " + std::to_string(s.k_data));
    any_usable = any_usable || !s.degenerate;
    bundle.sites.emplace(s.site, std::move(s));
  }
  if (!any_usable) throw Error(ErrorKind::DegenerateStack, "every site stack is degenerate");

  save_subspace_bundle(bundle, out);
  auto csv = open_output(out / "explained_variance.csv");
  write_variance_csv(bundle, csv);
  io.progress("wrote " + out.string());
  return kExitOk;
}

int cmd_augment(const std::string& subspace_dir, std::size_t pseudo, const Io& io) {
  const fs::path out = require_out(io.g, "augment");
  SubspaceBundle bundle = load_subspace_bundle(subspace_dir);
  std::size_t i = 0;
  for (auto& [site, s] : bundle.sites) s = augment_pseudo(s, pseudo, derive_seed(io.g.seed, i++));
  save_subspace_bundle(bundle, out);
  io.progress("wrote " + out.string());
  return kExitOk;
}

// ---- project / reconstruct / report ------------------------------------

int cmd_project(const std::string& subspace_dir, const std::string& adapter_dir, bool include_mean,
                const std::string& report, const Io& io) {
  const fs::path out = require_out(io.g, "project");
  const SubspaceBundle bundle = load_subspace_bundle(subspace_dir);
  const AdapterBundle adapter = load_adapter_bundle(adapter_dir);
  const CoefficientSet coeffs = project_adapter(bundle, adapter, include_mean);
  save_coefficient_set(coeffs, out);
  if (!report.empty()) {
    auto csv = open_output(report);
    csv << "site_name,role,adapter_id,fro_residual\n";
    for (const auto& [site, c] : coeffs.sites)
      csv << site.name << ',' << to_string(site.role) << ',' << coeffs.adapter_id << ','
          << format_double(c.residual_fro) << '\n';
  }
  io.progress("wrote " + out.string());
  return kExitOk;
}

int cmd_reconstruct(const std::string& subspace_dir, const std::string& coeff_dir, const std::string& base_model,
                    const Io& io) {
  const fs::path out = require_out(io.g, "reconstruct");
  const SubspaceBundle bundle = load_subspace_bundle(subspace_dir);
  const CoefficientSet coeffs = load_coefficient_set(coeff_dir);
  save_adapter_bundle(reconstruct_adapter(bundle, coeffs, base_model), out);
  io.progress("wrote " + out.string());
  return kExitOk;
}

int cmd_report(const std::string& subspace_dir, const std::vector<std::string>& adapters, const std::string& out_dir,
               const Io& io) {
  const fs::path dir = out_dir.empty() ? require_out(io.g, "report") : fs::path(out_dir);
  const SubspaceBundle bundle = load_subspace_bundle(subspace_dir);
  {
    auto csv = open_output(dir / "explained_variance.csv");
    write_variance_csv(bundle, csv);
  }
  if (!adapters.empty()) {
    const auto rows = reconstruction_report(bundle.sites, load_all(adapters));
    auto csv = open_output(dir / "reconstruction.csv");
    write_reconstruction_csv(rows, csv);
  }
  io.progress("wrote " + dir.string());
  return kExitOk;
}

// ---- account -----------------------------------------------------------

int cmd_account(const std::string& config, std::uint64_t batch, const Io& io) {
  const AccountReport report = account(DeployConfig::load(config), batch);
  io.out << format_table(report);
  if (!io.g.out.empty()) {
    auto f = open_output(io.g.out);
    f << to_json(report).dump(2) << '\n';
  }
  return kExitOk;
}

// ---- simulate ----------------------------------------------------------

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorKind::MalformedManifest, where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw Error(ErrorKind::MalformedManifest, "unknown key \"" + key + "\" in " + where);
}

TrainConfig train_config_from_json(const json& j, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  if (j.is_null()) return cfg;
  reject_unknown(j, {"learning_rate", "max_epochs", "batch_size", "weight_decay", "init_scale", "scheduler"}, "train");
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.init_scale = j.value("init_scale", cfg.init_scale);
  if (j.contains("scheduler")) {
    const json& s = j.at("scheduler");
    reject_unknown(s, {"kind", "factor", "patience", "min_lr"}, "scheduler");
    const std::string kind = s.value("kind", std::string("plateau"));
    if (kind == "constant") cfg.scheduler.kind = Scheduler::Kind::Constant;
    else if (kind == "linear") cfg.scheduler.kind = Scheduler::Kind::LinearDecay;
    else if (kind == "plateau") cfg.scheduler.kind = Scheduler::Kind::ReduceOnPlateau;
    else throw Error(ErrorKind::MalformedManifest, "unknown scheduler \"" + kind + "\"");
    cfg.scheduler.factor = s.value("factor", cfg.scheduler.factor);
    cfg.scheduler.patience = s.value("patience", cfg.scheduler.patience);
    cfg.scheduler.min_lr = s.value("min_lr", cfg.scheduler.min_lr);
  }
  cfg.validate();
  return cfg;
}

KPolicy policy_from_json(const json& j) {
  if (j.contains("k") && j.contains("variance"))
    throw Error(ErrorKind::MalformedManifest, "give either k or variance, not both");
  if (j.contains("k")) return KPolicy::fixed(j.at("k").get<std::size_t>());
  return KPolicy::variance(j.value("variance", 0.75));
}

int cmd_simulate(const std::string& config_path, const std::string& protocol, const Io& io) {
  const fs::path out = require_out(io.g, "simulate");
  const json config = read_json(config_path);
  reject_unknown(config, {"domain", "train", "loo", "lowres", "trends"}, "simulate config");
  if (!config.contains("domain")) throw Error(ErrorKind::MalformedManifest, "simulate config lacks \"domain\"");

  try {
    DomainSpec spec = DomainSpec::from_json(config.at("domain"));
    const TrainConfig cfg = train_config_from_json(config.value("train", json()), io.g.seed);
    const auto section = [&](const char* key) { return config.contains(key) ? config.at(key) : json::object(); };
    const fs::path json_path = out / "metrics.json";

    if (protocol == "trends") {
      const json t = section("trends");
      reject_unknown(t, {"k_list", "s_list", "seeds", "ridge"}, "trends");
      const auto k_list = t.value("k_list", std::vector<Eigen::Index>{spec.k_true - 1, spec.k_true});
      const auto s_list = t.value("s_list", std::vector<Eigen::Index>{64, 1024});
      std::vector<std::uint64_t> seeds = t.value("seeds", std::vector<std::uint64_t>{});
      if (seeds.empty())
        for (std::uint64_t i = 0; i < 20; ++i) seeds.push_back(derive_seed(io.g.seed, i));
      io.progress("trends: " + std::to_string(seeds.size()) + " seeds");
      const auto rows = trend_curves(spec, k_list, s_list, seeds, t.value("ridge", 0.0));
      {
        auto csv = open_output(out / "trends.csv");
        write_trend_csv(rows, csv);
      }
      json arr = json::array();
      for (const auto& r : rows)
        arr.push_back({{"K", r.k}, {"s_t", r.samples}, {"mean_error", r.mean_error}, {"errors", r.errors}});
      auto f = open_output(json_path);
      f << json{{"format_version", 1}, {"domain", spec.to_json()}, {"trends", arr}}.dump(2) << '\n';
    } else {
      SimMetrics metrics;
      const SyntheticDomain domain = generate_domain(spec);
      if (protocol == "loo") {
        const json l = section("loo");
        reject_unknown(l, {"k", "variance", "r", "train", "ridge"}, "loo");
        io.progress("leave-one-out over " + std::to_string(spec.d) + " tasks");
        metrics = run_leave_one_out(domain, policy_from_json(l), l.value("r", static_cast<std::size_t>(spec.r)), cfg,
                                    {l.value("ridge", 0.0), l.value("train", true)});
      } else if (protocol == "lowres") {
        const json l = section("lowres");
        reject_unknown(l, {"n_available", "p", "k", "r", "ridge"}, "lowres");
        io.progress("low-resource comparison on task " + std::to_string(spec.d - 1));
        metrics = run_low_resource(domain, l.value("n_available", std::size_t{1}), l.value("p", std::size_t{0}),
                                   l.value("k", std::size_t{1}), l.value("r", static_cast<std::size_t>(spec.r)), cfg,
                                   {l.value("ridge", 0.0), true});
      } else {
        throw Error(ErrorKind::InvalidArgument, "unknown protocol \"" + protocol + "\"");
      }
      for (const auto& n : metrics.notes) io.progress("note: " + n);
      {
        auto csv = open_output(out / "metrics.csv");
        write_metrics_csv(metrics, csv);
      }
      auto f = open_output(json_path);
      f << metrics_to_json(metrics, spec).dump(2) << '\n';
    }
    io.out << json_path.string() << '\n';
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedManifest, std::string("simulate config: ") + e.what());
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shared principal subspaces for low-rank adapters", "elorax"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Base seed");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");
  app.add_option("--out", g.out, "Output path");

  ExtractArgs ex;
  std::size_t ex_k = 0;
  double ex_var = 0.0;
  auto* extract = app.add_subcommand("extract", "Build a subspace bundle from adapters");
  extract->add_option("--adapters", ex.adapters, "Adapter bundle directories")->expected(1, -1);
  auto* k_opt = extract->add_option("--k", ex_k, "Components per site");
  auto* v_opt = extract->add_option("--variance", ex_var, "Explained-variance threshold");
  k_opt->excludes(v_opt);
  extract->add_option("--pseudo", ex.pseudo, "Pseudo components per site");
  extract->add_option("--svd", ex.svd, "exact|randomized")->check(CLI::IsMember({"exact", "randomized"}));

  std::string aug_subspace;
  std::size_t aug_pseudo = 0;
  auto* augment = app.add_subcommand("augment", "Append pseudo components to a subspace bundle");
  augment->add_option("--subspace", aug_subspace)->required();
  augment->add_option("--pseudo", aug_pseudo)->required();

  std::string pr_subspace, pr_adapter, pr_report;
  bool pr_mean = true;
  auto* project = app.add_subcommand("project", "Fit coefficients of an adapter");
  project->add_option("--subspace", pr_subspace)->required();
  project->add_option("--adapter", pr_adapter)->required();
  project->add_flag("--include-mean,!--no-include-mean", pr_mean, "Subtract the subspace mean (default on)");
  project->add_option("--report", pr_report, "Residual CSV path");

  std::string rc_subspace, rc_coeffs, rc_base = "unknown";
  auto* recon = app.add_subcommand("reconstruct", "Rebuild an adapter from coefficients");
  recon->add_option("--subspace", rc_subspace)->required();
  recon->add_option("--coeffs", rc_coeffs)->required();
  recon->add_option("--base-model", rc_base);

  std::string rp_subspace, rp_dir;
  std::vector<std::string> rp_adapters;
  auto* report = app.add_subcommand("report", "Explained-variance and reconstruction CSVs");
  report->add_option("--subspace", rp_subspace)->required();
  report->add_option("--adapters", rp_adapters)->expected(1, -1);
  report->add_option("--out-dir", rp_dir);

  std::string ac_config;
  std::uint64_t ac_batch = 1;
  auto* acct = app.add_subcommand("account", "Parameter, storage and compute counts");
  acct->add_option("--config", ac_config)->required();
  acct->add_option("--batch", ac_batch);

  std::string sim_config, sim_protocol = "loo";
  auto* simulate = app.add_subcommand("simulate", "Run a synthetic-domain protocol");
  simulate->add_option("--config", sim_config)->required();
  simulate->add_option("--protocol", sim_protocol)->check(CLI::IsMember({"loo", "lowres", "trends"}));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitInput;
  }

  const Io io{out, err, g};
  try {
    if (*extract) {
      if (*k_opt) ex.k = ex_k;
      if (*v_opt) ex.variance = ex_var;
      if (ex.adapters.empty()) {
        err << "error: extract needs --adapters\n" << extract->help();
        return kExitInput;
      }
      return cmd_extract(ex, io);
    }
    if (*augment) return cmd_augment(aug_subspace, aug_pseudo, io);
    if (*project) return cmd_project(pr_subspace, pr_adapter, pr_mean, pr_report, io);
    if (*recon) return cmd_reconstruct(rc_subspace, rc_coeffs, rc_base, io);
    if (*report) return cmd_report(rp_subspace, rp_adapters, rp_dir, io);
    if (*acct) return cmd_account(ac_config, ac_batch, io);
    if (*simulate) return cmd_simulate(sim_config, sim_protocol, io);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return is_numerical(e.kind()) ? kExitNumerical : kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitInput;
}

}  // namespace elorax
