#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "moex/baselines.hpp"
#include "moex/evaluation.hpp"

using namespace moex;
using Catch::Approx;

namespace {

ExecutionDataset data_with(double budget, double balance) {
  SyntheticMarketConfig mc;
  mc.days = 3;
  mc.n_assets = 6;
  auto d = generate_synthetic_market(mc);
  OrderGenConfig oc;
  oc.cash_budget_factor = budget;
  oc.direction_balance = balance;
  oc.sets_per_day = 2;
  auto sets = generate_order_sets(d, oc);
  return {std::move(d), std::move(sets)};
}

PolicyConfig small(int K) {
  PolicyConfig p;
  p.rnn_hidden = 6;
  p.fc_hidden = 8;
  p.rounds_K = K;
  p.init_seed = 12;
  return p;
}

EpisodeOutcome outcome_with_zero_steps(int zero, int T) {
  EpisodeOutcome e;
  e.timesteps = T;
  e.zero_cash_steps = zero;
  return e;
}

}  // namespace

TEST_CASE("execution_gain: zero, sign by direction, antisymmetry") {
  REQUIRE(execution_gain(10.0, 10.0, 1) == 0.0);
  REQUIRE(execution_gain(10.1, 10.0, 1) == Approx(100.0).epsilon(1e-12));
  REQUIRE(execution_gain(10.1, 10.0, -1) == Approx(-100.0).epsilon(1e-12));
  REQUIRE(execution_gain(9.3, 10.0, 1) == -execution_gain(9.3, 10.0, -1));
  REQUIRE_THROWS_AS(execution_gain(1.0, 0.0, 1), Error);
}

TEST_CASE("arr_from_eg: table values, zero, monotone") {
  REQUIRE(arr_from_eg(21.63) == Approx(5.56).margin(0.03));
  REQUIRE(arr_from_eg(8.11) == Approx(2.05).margin(0.03));
  REQUIRE(arr_from_eg(0.0) == 0.0);
  double prev = arr_from_eg(-50.0);
  for (double eg = -49.0; eg <= 50.0; eg += 1.0) {
    const double a = arr_from_eg(eg);
    REQUIRE(a > prev);
    prev = a;
  }
}

TEST_CASE("pos and glr") {
  REQUIRE(pos({2, 4, -1, -3}) == 0.5);
  REQUIRE(*glr({2, 4, -1, -3}) == Approx(1.5));
  REQUIRE(pos({1, 2, 3}) == 1.0);
  REQUIRE_FALSE(glr({1, 2, 3}).has_value());
  REQUIRE(*glr({-2.5, 1.0, 2.5, -1.0}) == Approx(1.0));
  REQUIRE_THROWS_AS(pos({}), Error);
}

TEST_CASE("toc: zero, 2 of 8 steps, all-liquidation sets") {
  REQUIRE(toc({outcome_with_zero_steps(0, 8), outcome_with_zero_steps(0, 8)}) == 0.0);
  REQUIRE(toc({outcome_with_zero_steps(2, 8), outcome_with_zero_steps(2, 8)}) == 25.0);
  auto liq = data_with(1.0, 1.0);
  Policy p(small(2));
  EnvConfig env;
  EvalOptions opt;
  REQUIRE(evaluate_policy(p, liq, env, opt).toc_pct == 0.0);
}

TEST_CASE("aggregate: EG variants, violation rate, counts") {
  EpisodeOutcome e;
  e.timesteps = 8;
  e.zero_cash_steps = 1;
  e.violation = true;
  OrderResult a, b, c;
  a.eg_bp = 4.0;
  b.eg_bp = -2.0;
  b.fulfilled = false;
  c.fulfilled = false;  // never executed, no EG
  e.orders = {a, b, c};
  const auto r = aggregate({e}, "abc");
  REQUIRE(r.eg_bp == 1.0);
  REQUIRE(r.eg_bp_fulfilled == 4.0);
  REQUIRE(r.violation_rate == Approx(2.0 / 3.0));
  REQUIRE(r.order_count == 3);
  REQUIRE(r.toc_pct == 12.5);
  REQUIRE(r.config_digest == "abc");
  REQUIRE(r.pos == 0.5);
  REQUIRE(*r.glr == 2.0);
}

TEST_CASE("evaluate_policy: deterministic, accounts for every order, worker independent") {
  auto data = data_with(0.3, 0.5);
  Policy p(small(3));
  EnvConfig env;
  EvalOptions opt;
  const auto r1 = evaluate_policy(p, data, env, opt);
  const auto r2 = evaluate_policy(p, data, env, opt);
  opt.workers = 3;
  const auto r3 = evaluate_policy(p, data, env, opt);
  REQUIRE(to_json(r1) == to_json(r2));
  REQUIRE(to_json(r1) == to_json(r3));
  std::size_t orders = 0;
  for (const auto& s : data.order_sets) orders += s.orders.size();
  REQUIRE(r1.order_count == orders);
  REQUIRE(r1.episode_count == data.order_sets.size());
  REQUIRE(r1.pos >= 0.0);
  REQUIRE(r1.pos <= 1.0);
  REQUIRE(r1.toc_pct >= 0.0);
  REQUIRE(r1.toc_pct <= 100.0);
}

TEST_CASE("evaluate_policy from a checkpoint: action grid mismatch is an error") {
  const auto dir = std::filesystem::temp_directory_path() / "moex_eval_ckpt";
  std::filesystem::remove_all(dir);
  Policy p(small(2));
  save_policy(p, dir);
  auto data = data_with(1.0, 0.5);
  EnvConfig env;
  REQUIRE(to_json(evaluate_policy(dir, data, env)) == to_json(evaluate_policy(p, data, env)));
  env.action_fractions = {0.0, 0.5, 1.0};
  REQUIRE_THROWS_AS(evaluate_policy(dir, data, env), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluate_rounds: K rows, last row equals evaluate_policy") {
  auto data = data_with(0.3, 0.5);
  Policy p(small(3));
  EnvConfig env;
  const auto rw = evaluate_rounds(p, data, env);
  REQUIRE(rw.rounds.size() == 3);
  REQUIRE(to_json(rw.rounds.back()) == to_json(evaluate_policy(p, data, env)));
  REQUIRE_THROWS_AS(evaluate_rounds(Policy(small(1)), data, env), Error);
}

TEST_CASE("round_convergence: length K-1, zero for identical intentions") {
  auto data = data_with(0.3, 0.5);
  EnvConfig env;
  const auto d = round_convergence(Policy(small(4)), data, env);
  REQUIRE(d.size() == 3);
  for (double x : d) {
    REQUIRE(x >= 0.0);
    REQUIRE(x <= 1.0);
  }
  // A constant decision head repeats the same intention in every round.
  Policy fixed(small(3));
  fixed.params().get("decision.fc3.w").value.setZero();
  fixed.params().get("decision.fc3.b").value << 0.0, 0.0, 1.0, 0.0, 0.0;
  for (double x : round_convergence(fixed, data, env)) REQUIRE(x == 0.0);
}

TEST_CASE("TWAP through evaluation on feasible liquidation sets: EG 0, TOC 0") {
  auto liq = data_with(1.0, 1.0);
  const auto r = evaluate_baseline(BaselineKind::TWAP, {}, liq, EnvConfig{});
  REQUIRE(std::abs(r.eg_bp) * 1e-4 <= 1e-9);
  REQUIRE(r.toc_pct == 0.0);
  REQUIRE(r.violation_rate == 0.0);
}

TEST_CASE("write_report: fixed summary columns and per-order rows") {
  const auto dir = std::filesystem::temp_directory_path() / "moex_report_test";
  std::filesystem::remove_all(dir);
  auto data = data_with(1.0, 0.5);
  const auto r = evaluate_baseline(BaselineKind::TWAP, {}, data, EnvConfig{});
  write_report(dir, r);
  std::ifstream summary(dir / "summary.csv");
  std::string header, row;
  std::getline(summary, header);
  std::getline(summary, row);
  REQUIRE(header == "eg_bp,arr_pct,pos,glr,toc_pct,violation_rate");
  REQUIRE(std::count(row.begin(), row.end(), ',') == 5);
  std::ifstream orders(dir / "orders.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(orders, l);) ++lines;
  REQUIRE(lines == r.order_count + 1);
  std::ifstream js(dir / "summary.json");
  REQUIRE(nlohmann::json::parse(js).at("orders").get<std::size_t>() == r.order_count);
  std::filesystem::remove_all(dir);
}
