#include <cstdlib>
#include <sstream>

#include <doctest.h>
#include <json.hpp>

#include "elorax/adapter_store.hpp"
#include "elorax/cli.hpp"
#include "elorax/error.hpp"
#include "elorax/projection.hpp"
#include "elorax/subspace.hpp"
#include "support.hpp"

using namespace elorax;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Two adapters whose stacked A rows are [[1,0],[0,0],[0,0],[0,1]].
void write_fixture(const fs::path& root) {
  const std::vector<RowMatrix> a = {(RowMatrix(2, 2) << 1, 0, 0, 0).finished(),
                                    (RowMatrix(2, 2) << 0, 0, 0, 1).finished()};
  const std::vector<RowMatrix> b = {(RowMatrix(3, 2) << 1, 0, 0, 2, 0, 0).finished(),
                                    (RowMatrix(3, 2) << 0, 1, 1, 0, 0, 3).finished()};
  for (std::size_t i = 0; i < 2; ++i) {
    AdapterBundle bundle;
    bundle.adapter_id = "a" + std::to_string(i + 1);
    bundle.base_model_id = "toy";
    bundle.rank_hint = 2;
    bundle.sites.emplace(SiteId{"q", Role::A}, SiteMatrix(a[i]));
    bundle.sites.emplace(SiteId{"q", Role::B}, SiteMatrix(b[i]));
    save_adapter_bundle(bundle, root / bundle.adapter_id);
  }
}

std::string config_path(const char* name) { return (fs::path(ELORAX_CONFIG_DIR) / name).string(); }

}  // namespace

TEST_CASE("exit codes for malformed invocations") {
  CHECK(run({}).code == kExitInput);
  CHECK(run({"frobnicate"}).code == kExitInput);
  CHECK(run({"extract", "--k", "1", "--out", "x"}).code == kExitInput);
  const Result r = run({"account", "--config", config_path("glue.json"), "--bogus"});
  CHECK(r.code == kExitInput);
  CHECK(r.err.find("bogus") != std::string::npos);
  CHECK(run({"--help"}).code == kExitOk);
  CHECK(run({"account", "--config", "/nonexistent/cfg.json"}).code == kExitInput);
}

TEST_CASE("extract on the two-adapter fixture") {
  testing::TempDir tmp;
  write_fixture(tmp.path());
  const std::string a1 = (tmp.path() / "a1").string(), a2 = (tmp.path() / "a2").string();
  const fs::path sub = tmp.path() / "sub";
  const Result r = run({"extract", "--adapters", a1, a2, "--k", "1", "--out", sub.string(), "--quiet"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.err.empty());
  const SubspaceBundle bundle = load_subspace_bundle(sub);
  for (const auto& [site, s] : bundle.sites) CHECK(s.k_data == 1);
  const std::string csv = testing::slurp(sub / "explained_variance.csv");
  CHECK(csv.rfind("site_name,role,k,singular_value,cum_variance\n", 0) == 0);
  const std::string row_prefix = "\nq,A,1,";
  const auto at = csv.find(row_prefix);
  REQUIRE(at != std::string::npos);
  const std::string row = csv.substr(at + row_prefix.size(), csv.find('\n', at + 1) - at - row_prefix.size());
  CHECK(std::stod(row.substr(0, row.find(','))) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(std::stod(row.substr(row.find(',') + 1)) - 0.6667) <= 1e-4);

  SUBCASE("repeat runs are byte-identical") {
    const fs::path again = tmp.path() / "again";
    REQUIRE(run({"extract", "--adapters", a1, a2, "--k", "1", "--out", again.string()}).code == kExitOk);
    for (const char* f : {"manifest.json", "weights.bin", "explained_variance.csv"})
      CHECK(testing::slurp(sub / f) == testing::slurp(again / f));
  }
  SUBCASE("identical rows on every site are a numerical failure") {
    AdapterBundle flat;
    flat.adapter_id = "flat";
    flat.sites.emplace(SiteId{"q", Role::A}, SiteMatrix((RowMatrix(2, 2) << 1, 1, 1, 1).finished()));
    flat.sites.emplace(SiteId{"q", Role::B}, SiteMatrix((RowMatrix(3, 2) << 1, 1, 2, 2, 3, 3).finished()));
    const fs::path f = tmp.path() / "flat";
    save_adapter_bundle(flat, f);
    CHECK(run({"extract", "--adapters", f.string(), f.string(), "--k", "1", "--out", (tmp.path() / "deg").string()}).code ==
          kExitNumerical);
  }
  SUBCASE("--k and --variance are exclusive") {
    CHECK(run({"extract", "--adapters", a1, a2, "--k", "1", "--variance", "0.5", "--out", "x"}).code == kExitInput);
  }
  SUBCASE("malformed adapter manifest") {
    testing::spit(tmp.path() / "a2" / "manifest.json", "{\"format_version\": 1, \"tensors\": 7}");
    CHECK(run({"extract", "--adapters", a1, a2, "--k", "1", "--out", "x"}).code == kExitInput);
  }
  SUBCASE("truncated weights file") {
    testing::spit(tmp.path() / "a2" / "weights.bin", "abc");
    CHECK(run({"extract", "--adapters", a1, a2, "--k", "1", "--out", "x"}).code == kExitInput);
  }
}

TEST_CASE("project, reconstruct and project again") {
  testing::TempDir tmp;
  write_fixture(tmp.path());
  const std::string a1 = (tmp.path() / "a1").string(), a2 = (tmp.path() / "a2").string();
  const std::string sub = (tmp.path() / "sub").string();
  REQUIRE(run({"extract", "--adapters", a1, a2, "--k", "1", "--out", sub}).code == kExitOk);
  const std::string c1 = (tmp.path() / "c1").string(), c2 = (tmp.path() / "c2").string();
  const std::string rec = (tmp.path() / "rec").string();
  const std::string report = (tmp.path() / "res.csv").string();
  REQUIRE(run({"project", "--subspace", sub, "--adapter", a1, "--out", c1, "--report", report}).code == kExitOk);
  CHECK(testing::slurp(report).rfind("site_name,role,adapter_id,fro_residual\n", 0) == 0);
  REQUIRE(run({"reconstruct", "--subspace", sub, "--coeffs", c1, "--out", rec}).code == kExitOk);
  REQUIRE(run({"project", "--subspace", sub, "--adapter", rec, "--out", c2}).code == kExitOk);
  const CoefficientSet first = load_coefficient_set(c1);
  const CoefficientSet second = load_coefficient_set(c2);
  REQUIRE(first.sites.size() == second.sites.size());
  for (const auto& [site, c] : first.sites) {
    const RowMatrix diff = c.alpha - second.sites.at(site).alpha;
    CHECK(diff.cwiseAbs().maxCoeff() <= 1e-6);
  }

  SUBCASE("stale coefficients are rejected") {
    const std::string other = (tmp.path() / "other").string();
    REQUIRE(run({"extract", "--adapters", a1, a2, "--variance", "1.0", "--out", other}).code == kExitOk);
    const Result r = run({"reconstruct", "--subspace", other, "--coeffs", c1, "--out", rec});
    CHECK(r.code == kExitInput);
    CHECK(r.err.find("hash") != std::string::npos);
  }
  SUBCASE("report writes both CSVs") {
    const fs::path dir = tmp.path() / "rep";
    REQUIRE(run({"report", "--subspace", sub, "--adapters", a1, a2, "--out-dir", dir.string()}).code == kExitOk);
    CHECK(fs::exists(dir / "explained_variance.csv"));
    CHECK(fs::exists(dir / "reconstruction.csv"));
  }
  SUBCASE("augment appends pseudo components") {
    const std::string aug = (tmp.path() / "aug").string();
    REQUIRE(run({"augment", "--subspace", sub, "--pseudo", "1", "--out", aug}).code == kExitOk);
    const SubspaceBundle b = load_subspace_bundle(aug);
    CHECK(b.sites.at(SiteId{"q", Role::A}).k_pseudo == 1);
    CHECK(b.sites.at(SiteId{"q", Role::A}).k_total() == 2);
  }
  SUBCASE("missing coefficient directory") {
    CHECK(run({"reconstruct", "--subspace", sub, "--coeffs", (tmp.path() / "nope").string(), "--out", rec}).code ==
          kExitInput);
  }
}

TEST_CASE("account prints the GLUE table") {
  testing::TempDir tmp;
  const fs::path json_out = tmp.path() / "acct.json";
  const Result r = run({"account", "--config", config_path("glue.json"), "--out", json_out.string()});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("1,179,648") != std::string::npos);
  CHECK(r.out.find("12,288") != std::string::npos);
  CHECK(r.out.find("\t96\n") != std::string::npos);
  const auto j = nlohmann::json::parse(testing::slurp(json_out));
  CHECK(j.at("format_version") == 1);
}

TEST_CASE("simulate the bundled leave-one-out config") {
  testing::TempDir tmp;
  const fs::path out = tmp.path() / "loo";
  const Result r = run({"simulate", "--config", config_path("loo_small.json"), "--out", out.string()});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out == (out / "metrics.json").string() + "\n");
  CHECK_FALSE(r.err.empty());
  const auto j = nlohmann::json::parse(testing::slurp(out / "metrics.json"));
  CHECK(j.at("format_version") == 1);
  int folds = 0;
  for (const auto& row : j.at("rows")) {
    if (row.at("method") != "zero_shot") continue;
    ++folds;
    CHECK(row.at("loss").get<double>() <= 1e-8);
  }
  CHECK(folds == 5);
  CHECK(testing::slurp(out / "metrics.csv").rfind("protocol,task_id,method,K,", 0) == 0);

  SUBCASE("--quiet keeps only the result path") {
    const Result q = run({"simulate", "--config", config_path("loo_small.json"), "--out", out.string(), "--quiet"});
    CHECK(q.code == kExitOk);
    CHECK(q.err.empty());
    CHECK(q.out == (out / "metrics.json").string() + "\n");
  }
  SUBCASE("infeasible domain") {
    const fs::path cfg = tmp.path() / "bad.json";
    testing::spit(cfg, R"({"domain": {"d": 5, "offspan_fraction": 2}})");
    CHECK(run({"simulate", "--config", cfg.string(), "--out", out.string()}).code == kExitInput);
  }
  SUBCASE("unparsable config") {
    const fs::path cfg = tmp.path() / "bad.json";
    testing::spit(cfg, "{\"domain\": ");
    CHECK(run({"simulate", "--config", cfg.string(), "--out", out.string()}).code == kExitInput);
  }
  SUBCASE("divergent training is a numerical failure") {
    const fs::path cfg = tmp.path() / "hot.json";
    testing::spit(cfg, R"({"domain": {"m": 6, "n": 10, "d": 3, "s_t": 40, "seed": 1},
                           "train": {"learning_rate": 500, "max_epochs": 50, "scheduler": {"kind": "constant"}}})");
    CHECK(run({"simulate", "--config", cfg.string(), "--out", out.string()}).code == kExitNumerical);
  }
}

TEST_CASE("the installed binary honours the exit-code contract") {
  const std::string bin = ELORAX_BINARY;
  CHECK(std::system((bin + " > /dev/null 2>&1").c_str()) != 0);
  const int code = std::system((bin + " extract --k 1 --out /tmp/x > /dev/null 2>&1").c_str());
  REQUIRE(WIFEXITED(code));
  CHECK(WEXITSTATUS(code) == kExitInput);
  const int ok = std::system((bin + " account --config " + config_path("glue.json") + " > /dev/null").c_str());
  REQUIRE(WIFEXITED(ok));
  CHECK(WEXITSTATUS(ok) == kExitOk);
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<int> hits(257, 0);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(8, [](std::size_t i) {
                    if (i == 3) throw Error(ErrorKind::InvalidArgument, "boom");
                  }),
                  Error);
  CHECK(worker_count() >= 1);
}
