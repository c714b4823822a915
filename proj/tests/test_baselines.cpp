#include <catch_amalgamated.hpp>

#include "moex/baselines.hpp"

using namespace moex;
using Catch::Approx;

namespace {

ExecutionDataset make_data(double budget, double balance, int days = 4) {
  SyntheticMarketConfig mc;
  mc.days = days;
  mc.n_assets = 6;
  auto d = generate_synthetic_market(mc);
  OrderGenConfig oc;
  oc.cash_budget_factor = budget;
  oc.direction_balance = balance;
  oc.sets_per_day = 3;
  auto sets = generate_order_sets(d, oc);
  return {std::move(d), std::move(sets)};
}

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

TEST_CASE("twap_schedule: even split summing exactly to the amount") {
  REQUIRE(twap_schedule(240.0, 240) == std::vector<double>(240, 1.0));
  const auto s = twap_schedule(7.0, 3);
  REQUIRE(s[0] == Approx(7.0 / 3.0));
  REQUIRE(s[2] == Approx(7.0 / 3.0));
  REQUIRE(sum(s) == 7.0);
  Rng rng = make_rng(1, 2, 3);
  for (int i = 0; i < 200; ++i) {
    const double m = uniform(rng, 1.0, 1e6);
    const int minutes = 1 + static_cast<int>(uniform01(rng) * 300);
    const auto v = twap_schedule(m, minutes);
    double acc = 0.0;
    for (double x : v) acc += x;
    REQUIRE(acc == m);
  }
  REQUIRE_THROWS_AS(twap_schedule(1.0, 0), Error);
}

TEST_CASE("vwap_schedule: uniform equals TWAP, point mass, validation") {
  REQUIRE(vwap_schedule(7.0, uniform_profile(3)) == twap_schedule(7.0, 3));
  VolumeProfile point{{0.0, 0.0, 1.0, 0.0}};
  REQUIRE(vwap_schedule(5.0, point) == std::vector<double>{0.0, 0.0, 5.0, 0.0});
  REQUIRE_THROWS_AS(vwap_schedule(1.0, VolumeProfile{{0.5, 0.6}}), Error);
  REQUIRE_THROWS_AS(vwap_schedule(1.0, VolumeProfile{{1.5, -0.5}}), Error);
}

TEST_CASE("estimate_volume_profile: valid and reflects the intraday shape") {
  auto data = make_data(1.0, 0.5, 10);
  const auto p = estimate_volume_profile(data.days);
  REQUIRE_NOTHROW(validate(p));
  REQUIRE(p.fractions.size() == 240);
  double s = 0.0;
  for (double f : p.fractions) s += f;
  REQUIRE(s == Approx(1.0).margin(1e-12));
  REQUIRE_THROWS_AS(estimate_volume_profile({}), Error);
}

TEST_CASE("VWAP on a day whose volume matches the profile hits the volume-weighted price") {
  TradingDayData day{"2021-03-01", 8, {}};
  const std::vector<double> vol{5, 1, 1, 3, 2, 2, 1, 5};
  const std::vector<double> px{10, 11, 12, 11, 10, 9, 10, 12};
  double vtot = 0.0, vwap = 0.0;
  for (int m = 0; m < 8; ++m) {
    day.assets["A"].push_back({"A", m, px[static_cast<std::size_t>(m)], vol[static_cast<std::size_t>(m)]});
    vtot += vol[static_cast<std::size_t>(m)];
    vwap += vol[static_cast<std::size_t>(m)] * px[static_cast<std::size_t>(m)];
  }
  vwap /= vtot;
  BaselineParams params;
  params.profile = estimate_volume_profile({day});
  EnvConfig env;
  env.timesteps = 4;
  const auto out = run_baseline_episode(BaselineKind::VWAP, params, env, {day.date, {{"A", 1, 3.0}}, 0.0}, day);
  REQUIRE(*out.orders[0].aep == Approx(vwap).epsilon(1e-14));
}

TEST_CASE("ac_schedule: TWAP limit, front-loading, inventory shape") {
  ACParams flat;
  flat.risk_aversion = 0.0;
  const auto v = ac_schedule(80.0, flat, 8);
  for (double x : v) REQUIRE(x == Approx(10.0).epsilon(1e-12));
  REQUIRE(sum(v) == Approx(80.0).epsilon(1e-15));

  ACParams urgent;
  urgent.risk_aversion = 1.0;
  const auto u = ac_schedule(100.0, urgent, 13);
  for (std::size_t j = 1; j < u.size(); ++j) REQUIRE(u[j] < u[j - 1]);
  REQUIRE(sum(u) == Approx(100.0).epsilon(1e-14));

  const auto x = ac_inventory(100.0, urgent, 13);
  REQUIRE(x.front() == 100.0);
  REQUIRE(x.back() == 0.0);
  for (std::size_t j = 1; j < x.size(); ++j) {
    REQUIRE(x[j] < x[j - 1]);
    REQUIRE(x[j] >= 0.0);
  }

  // Closed form against the hyperbolic identity at j = 1.
  const double k = ac_kappa(urgent);
  REQUIRE(x[1] == Approx(100.0 * std::sinh(12 * k) / std::sinh(13 * k)).epsilon(1e-14));
  ACParams bad;
  bad.temporary_impact = 0.0;
  REQUIRE_THROWS_AS(ac_schedule(1.0, bad, 8), Error);
}

TEST_CASE("minute_plan: every baseline covers the amount exactly") {
  BaselineParams params;
  params.profile = uniform_profile(240);
  params.ac.risk_aversion = 1e-2;
  for (auto kind : {BaselineKind::TWAP, BaselineKind::VWAP, BaselineKind::AC}) {
    const auto plan = minute_plan(kind, 1234.5, 240, 13, params);
    REQUIRE(plan.size() == 240);
    REQUIRE(sum(plan) == Approx(1234.5).epsilon(1e-14));
  }
  REQUIRE(baseline_from_string("vwap") == BaselineKind::VWAP);
  REQUIRE_THROWS_AS(baseline_from_string("pov"), Error);
}

TEST_CASE("TWAP through the environment: EG = 0 whenever no cash cutoff intervenes") {
  EnvConfig env;
  for (int T : {8, 13}) {
    env.timesteps = T;
    auto liq = make_data(1.0, 1.0);
    auto report = evaluate_baseline(BaselineKind::TWAP, {}, liq, env);
    for (const auto& o : report.orders) REQUIRE(std::abs(*o.eg_bp) * 1e-4 <= 1e-9);
    REQUIRE(report.toc_pct == 0.0);

    auto mixed = make_data(1.0, 0.5);
    for (const auto& set : mixed.order_sets) {
      const auto out = run_baseline_episode(BaselineKind::TWAP, {}, env, set, mixed.day_for(set));
      if (out.zero_cash_steps > 0) continue;
      for (const auto& o : out.orders) REQUIRE(std::abs(*o.eg_bp) * 1e-4 <= 1e-9);
    }
  }
}

TEST_CASE("baselines fulfil every order under a generous budget and hit the cash wall under a tight one") {
  EnvConfig env;
  BaselineParams params;
  auto loose = make_data(1.0, 0.5);
  params.profile = estimate_volume_profile(loose.days);
  for (auto kind : {BaselineKind::TWAP, BaselineKind::VWAP, BaselineKind::AC}) {
    auto r = evaluate_baseline(kind, params, loose, env);
    for (const auto& o : r.orders)
      if (o.fulfilled) REQUIRE(o.executed == Approx(o.amount).epsilon(1e-12));
  }
  auto tight = make_data(0.0, 0.5);
  for (auto& set : tight.order_sets) set.initial_cash = 0.0;
  auto r = evaluate_baseline(BaselineKind::TWAP, params, tight, env);
  REQUIRE(r.toc_pct > 0.0);
}

TEST_CASE("evaluate_baseline: worker count does not change results") {
  auto data = make_data(0.3, 0.5);
  EnvConfig env;
  auto a = evaluate_baseline(BaselineKind::AC, {}, data, env, 1);
  auto b = evaluate_baseline(BaselineKind::AC, {}, data, env, 3);
  REQUIRE(to_json(a) == to_json(b));
}
