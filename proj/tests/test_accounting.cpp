#include <doctest.h>

#include "elorax/accounting.hpp"
#include "elorax/error.hpp"
#include "support.hpp"

using namespace elorax;

namespace {

DeployConfig glue() {
  DeployConfig c;
  c.d = 5;
  c.l = 24;
  c.m = 768;
  c.n = 768;
  c.r = 32;
  c.k = 32;
  c.coeff_r = 8;
  return c;
}

DeployConfig storage_example() {
  DeployConfig c;
  c.d = 100;
  c.r = 8;
  c.l = 12;
  c.n = 768;
  c.m = 768;
  c.k = 16;
  c.coeff_r = 1;
  return c;
}

// Smallest d with elorax < lora by scanning upward.
std::optional<std::uint64_t> scan_breakeven(DeployConfig c, std::uint64_t limit) {
  for (std::uint64_t d = 1; d <= limit; ++d) {
    c.d = d;
    const StorageCounts s = storage_footprint(c);
    if (s.elorax_scalars < s.lora_scalars) return d;
  }
  return std::nullopt;
}

}  // namespace

TEST_CASE("GLUE trainable parameters") {
  const ParamCounts p = trainable_params(glue());
  CHECK(p.lora == 1179648);
  CHECK(p.elorax == 12288);
  CHECK(p.ratio == Ratio{96, 1});
  CHECK(p.ratio.str() == "96");
}

TEST_CASE("minimal config has two trainable scalars") {
  DeployConfig c;
  CHECK(trainable_params(c).elorax == 2);
}

TEST_CASE("parameter ratio is linear in r") {
  DeployConfig c = glue();
  c.r = 1;
  const Ratio base = trainable_params(c).ratio;
  for (std::uint64_t r : {1, 2, 4, 8}) {
    c.r = r;
    CHECK(trainable_params(c).ratio == Ratio::of(base.num * r, base.den));
  }
}

TEST_CASE("elorax parameter count ignores m and n") {
  DeployConfig c = glue();
  const auto fixed = trainable_params(c).elorax;
  for (std::uint64_t dim : {1, 7, 64, 4096}) {
    c.m = dim;
    c.n = dim + 3;
    CHECK(trainable_params(c).elorax == fixed);
  }
}

TEST_CASE("storage example") {
  const StorageCounts s = storage_footprint(storage_example());
  CHECK(s.lora_scalars == 14745600);
  CHECK(s.elorax_scalars == 333312);
  CHECK(s.ratio == Ratio::of(14745600, 333312));
  CHECK(s.ratio.value() == doctest::Approx(44.2390).epsilon(1e-4));
  REQUIRE(s.breakeven_d.has_value());
  CHECK(*s.breakeven_d == 3);
  CHECK(s.lora_bytes == 4 * s.lora_scalars);
}

TEST_CASE("single adapter with K = r cannot win") {
  DeployConfig c = storage_example();
  c.d = 1;
  c.k = c.r;
  c.coeff_r = c.r;
  const StorageCounts s = storage_footprint(c);
  CHECK(s.elorax_scalars >= s.lora_scalars);
  CHECK(s.ratio < Ratio{1, 1});
}

TEST_CASE("no breakeven when K*coeff_r >= r*n") {
  DeployConfig c;
  c.r = 1;
  c.n = 4;
  c.m = 4;
  c.k = 2;
  c.coeff_r = 2;
  const StorageCounts s = storage_footprint(c);
  CHECK(s.no_breakeven);
  CHECK_FALSE(s.breakeven_d.has_value());
  CHECK_FALSE(scan_breakeven(c, 10000).has_value());
}

TEST_CASE("closed-form breakeven matches a scan over random configs") {
  elorax::Rng rng(17);
  int checked = 0;
  while (checked < 200) {
    DeployConfig c;
    c.r = 1 + rng.below(16);
    c.n = 1 + rng.below(64);
    c.m = c.n;
    c.k = 1 + rng.below(32);
    c.coeff_r = 1 + rng.below(8);
    c.l = 1 + rng.below(4);
    if (c.k * c.coeff_r >= c.r * c.n) continue;
    ++checked;
    const auto closed = storage_footprint(c).breakeven_d;
    REQUIRE(closed.has_value());
    CHECK(scan_breakeven(c, *closed + 10) == closed);
  }
}

TEST_CASE("storage ratio strictly increases in d") {
  DeployConfig c = storage_example();
  Ratio prev{0, 1};
  for (std::uint64_t d = 1; d <= 200; ++d) {
    c.d = d;
    const Ratio r = storage_footprint(c).ratio;
    CHECK(prev < r);
    prev = r;
  }
}

TEST_CASE("adapter MACs") {
  const MacCounts g = adapter_flops_delta(glue());
  CHECK(g.lora == 1179648);
  // 24 * (32*768 + 2*32*8 + 32*768)
  CHECK(g.elorax == 1191936);

  DeployConfig half = glue();
  half.k = 16;
  CHECK(adapter_flops_delta(half).elorax == 595968);
  CHECK(adapter_flops_delta(half).elorax < adapter_flops_delta(half).lora);

  DeployConfig one = glue();
  one.k = 1;
  CHECK(adapter_flops_delta(one).elorax == one.l * (one.n + 2 * one.coeff_r + one.m));

  DeployConfig square;
  square.r = square.k = square.coeff_r = 4;
  square.m = square.n = 4;
  square.l = 3;
  const MacCounts s = adapter_flops_delta(square);
  CHECK(s.elorax - s.lora == square.l * 2 * square.k * square.coeff_r);
  CHECK(adapter_flops_delta(glue(), 8).lora == 8 * g.lora);
}

TEST_CASE("config parsing") {
  const DeployConfig c = DeployConfig::from_json(nlohmann::json{{"r", 32}, {"k", 32}, {"l", 24}, {"n", 768}, {"coeff_r", 8}});
  CHECK(c.m == 768);
  CHECK(c.d == 1);
  CHECK_THROWS_AS(DeployConfig::from_json(nlohmann::json{{"r", 0}, {"k", 1}, {"l", 1}, {"n", 1}}), Error);
  CHECK_THROWS_AS(DeployConfig::from_json(nlohmann::json{{"r", 1}, {"k", 1}, {"l", 1}, {"n", 1}, {"q", 1}}), Error);
  CHECK_THROWS_AS(DeployConfig::from_json(nlohmann::json{{"r", -1}, {"k", 1}, {"l", 1}, {"n", 1}}), Error);
  CHECK_THROWS_AS(DeployConfig::from_json(nlohmann::json{{"r", 1.5}, {"k", 1}, {"l", 1}, {"n", 1}}), Error);
}

TEST_CASE("overflow is reported, not wrapped") {
  DeployConfig c;
  c.l = c.r = c.m = c.n = std::uint64_t{1} << 40;
  CHECK_THROWS_AS(trainable_params(c), Error);
}

TEST_CASE("table uses grouped integers") {
  const std::string t = format_table(account(glue()));
  CHECK(t.find("1,179,648") != std::string::npos);
  CHECK(t.find("12,288") != std::string::npos);
  CHECK(t.find("\t96\n") != std::string::npos);
  CHECK(group_thousands(0) == "0");
  CHECK(group_thousands(999) == "999");
  CHECK(group_thousands(1000) == "1,000");
  CHECK(to_json(account(glue())).at("format_version") == 1);
}
