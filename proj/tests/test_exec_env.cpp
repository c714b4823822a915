#include <catch_amalgamated.hpp>

#include <sstream>

#include "moex/exec_env.hpp"
#include "moex/market_data.hpp"

using namespace moex;
using Catch::Approx;

namespace {

TradingDayData flat_day(const std::map<std::string, double>& prices, int minutes = 240, double volume = 1000.0) {
  TradingDayData d{"2021-03-01", minutes, {}};
  for (const auto& [asset, p] : prices) {
    std::vector<MinuteBar> bars;
    for (int m = 0; m < minutes; ++m) bars.push_back({asset, m, p, volume});
    d.assets.emplace(asset, std::move(bars));
  }
  return d;
}

struct RandomCase {
  TradingDayData day;
  OrderSet set;
};

RandomCase random_case(std::uint64_t seed, double budget_factor) {
  SyntheticMarketConfig mc;
  mc.days = 1;
  mc.n_assets = 6;
  mc.rng_seed = seed;
  auto days = generate_synthetic_market(mc);
  OrderGenConfig oc;
  oc.cash_budget_factor = budget_factor;
  oc.rng_seed = seed;
  return {days[0], generate_order_sets(days, oc)[0]};
}

std::vector<std::size_t> random_actions(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> a(n);
  for (auto& x : a) x = std::min(static_cast<std::size_t>(uniform01(rng) * static_cast<double>(k)), k - 1);
  return a;
}

}  // namespace

TEST_CASE("EnvConfig validation") {
  EnvConfig c;
  REQUIRE_NOTHROW(validate(c));
  c.action_fractions = {0.0, 0.5};
  REQUIRE_THROWS_AS(validate(c), Error);
  c.action_fractions = {0.0, 0.5, 0.5, 1.0};
  REQUIRE_THROWS_AS(validate(c), Error);
  c = EnvConfig{};
  c.timesteps = 0;
  REQUIRE_THROWS_AS(validate(c), Error);
}

TEST_CASE("reset: observations, zero-cash liquidation set, missing asset") {
  auto day = flat_day({{"A", 10.0}, {"B", 20.0}});
  ExecutionEnv env(EnvConfig{});
  OrderSet set{day.date, {{"A", 1, 100.0}, {"B", -1, 50.0}}, 5000.0};
  auto obs = env.reset(set, day);
  REQUIRE(obs.size() == 2);
  REQUIRE(obs[0].elapsed_fraction == Approx(1.0 / 8));
  REQUIRE(obs[0].market_prices.empty());
  REQUIRE(obs[0].cash_history == std::vector<double>{1.0});

  OrderSet liq{day.date, {{"A", 1, 100.0}}, 0.0};
  REQUIRE_NOTHROW(env.reset(liq, day));
  REQUIRE(env.observations()[0].cash_history == std::vector<double>{0.0});

  OrderSet missing{day.date, {{"Z", 1, 100.0}}, 0.0};
  REQUIRE_THROWS_AS(env.reset(missing, day), Error);
}

TEST_CASE("legal_fraction: clipping, final step, exhausted order") {
  auto day = flat_day({{"A", 10.0}});
  EnvConfig cfg;
  cfg.timesteps = 4;
  ExecutionEnv env(cfg);
  env.reset({day.date, {{"A", 1, 100.0}}, 0.0}, day);
  env.step_fractions(std::vector<double>{0.75});
  REQUIRE(env.legal_fraction(0, 0.5) == Approx(0.25));
  env.step_fractions(std::vector<double>{0.25});
  REQUIRE(env.legal_fraction(0, 0.5) == 0.0);
  env.step_fractions(std::vector<double>{0.0});
  REQUIRE(env.current_step() == 4);
  REQUIRE(env.legal_fraction(0, 1.0) == 0.0);

  env.reset({day.date, {{"A", 1, 100.0}}, 0.0}, day);
  env.step_fractions(std::vector<double>{0.75});
  env.step_fractions(std::vector<double>{0.0});
  env.step_fractions(std::vector<double>{0.0});
  for (double p : {0.0, 0.3, 1.0}) REQUIRE(env.legal_fraction(0, p) == Approx(0.25));
}

TEST_CASE("apply_cash_constraint: spec examples") {
  {
    std::vector<double> q{10.0}, p{20.0};
    std::vector<int> d{-1};
    auto r = apply_cash_constraint(q, p, d, 100.0);
    REQUIRE(r.scale == Approx(0.5));
    REQUIRE(r.executed_volumes[0] == Approx(5.0));
    REQUIRE(r.cash_after == 0.0);
    REQUIRE(r.conflict);
  }
  {
    std::vector<double> q{10.0, 30.0}, p{10.0, 10.0};
    std::vector<int> d{1, -1};
    auto r = apply_cash_constraint(q, p, d, 100.0);
    REQUIRE(r.scale == Approx(2.0 / 3.0));
    REQUIRE(r.executed_volumes[0] == 10.0);
    REQUIRE(r.executed_volumes[1] == Approx(20.0));
    REQUIRE(r.cash_after == 0.0);
    REQUIRE(r.conflict);
  }
  {
    std::vector<double> q{10.0, 0.0}, p{10.0, 10.0};
    std::vector<int> d{1, -1};
    auto r = apply_cash_constraint(q, p, d, 0.0);
    REQUIRE(r.executed_volumes == q);
    REQUIRE_FALSE(r.conflict);
    REQUIRE(r.cash_after == 100.0);
  }
}

TEST_CASE("step: reward example R_e = 0.005, R_a = -0.000625") {
  // First-step price 1.02, the rest chosen so the day average is 1.
  TradingDayData day = flat_day({{"A", 1.0}}, 8);
  day.assets["A"][0].price = 1.02;
  for (int m = 1; m < 8; ++m) day.assets["A"][static_cast<std::size_t>(m)].price = (8.0 - 1.02) / 7.0;
  ExecutionEnv env(EnvConfig{});
  env.reset({day.date, {{"A", 1, 100.0}}, 0.0}, day);
  REQUIRE(env.average_price(0) == Approx(1.0).epsilon(1e-15));
  auto r = env.step(std::vector<std::size_t>{1});
  REQUIRE(r.executed_fractions[0] == Approx(0.25));
  REQUIRE(r.reward_parts[0].execution == Approx(0.005).epsilon(1e-12));
  REQUIRE(r.reward_parts[0].impact == Approx(-0.000625).epsilon(1e-12));
  REQUIRE(r.reward_parts[0].cash == 0.0);
}

TEST_CASE("step: all-zero actions with positive cash give zero shared reward") {
  auto day = flat_day({{"A", 10.0}, {"B", 20.0}});
  ExecutionEnv env(EnvConfig{});
  env.reset({day.date, {{"A", 1, 100.0}, {"B", -1, 50.0}}, 5000.0}, day);
  auto r = env.step(std::vector<std::size_t>{0, 0});
  REQUIRE(r.shared_reward == 0.0);
  REQUIRE(r.cash_after == 5000.0);
}

TEST_CASE("step: exhausting cash charges every agent sigma, and recovery can fire it again") {
  auto day = flat_day({{"A", 10.0}, {"B", 10.0}});
  EnvConfig cfg;
  ExecutionEnv env(cfg);
  env.reset({day.date, {{"A", -1, 100.0}, {"B", 1, 100.0}}, 500.0}, day);
  auto r1 = env.step(std::vector<std::size_t>{4, 0});  // wants 1000, has 500
  REQUIRE(r1.cash_conflict);
  REQUIRE(r1.cash_after == 0.0);
  REQUIRE(r1.executed_fractions[0] == Approx(0.5));
  for (const auto& p : r1.reward_parts) REQUIRE(p.cash == Approx(-1.0 / 30.0));
  REQUIRE(r1.shared_reward * 2 == Approx(r1.agent_rewards[0] + r1.agent_rewards[1]));

  auto r2 = env.step(std::vector<std::size_t>{0, 0});  // stays at zero: no new penalty
  for (const auto& p : r2.reward_parts) REQUIRE(p.cash == 0.0);
  auto r3 = env.step(std::vector<std::size_t>{0, 1});  // liquidation refills cash
  REQUIRE(r3.cash_after == Approx(250.0));
  auto r4 = env.step(std::vector<std::size_t>{4, 0});
  REQUIRE(r4.cash_after == 0.0);
  for (const auto& p : r4.reward_parts) REQUIRE(p.cash == Approx(-1.0 / 30.0));
}

TEST_CASE("step: final-step cutoff records a fulfillment violation") {
  auto day = flat_day({{"A", 10.0}});
  EnvConfig cfg;
  cfg.timesteps = 2;
  ExecutionEnv env(cfg);
  env.reset({day.date, {{"A", -1, 100.0}}, 600.0}, day);
  env.step(std::vector<std::size_t>{0});
  auto r = env.step(std::vector<std::size_t>{0});
  REQUIRE(r.done);
  REQUIRE(r.fulfillment_violation);
  REQUIRE(env.executed_total(0) == Approx(60.0));
  REQUIRE(*env.episode_aep(0) == Approx(10.0));
  REQUIRE_THROWS_AS(env.step(std::vector<std::size_t>{0}), Error);
}

TEST_CASE("step: execution price is the mean of the step's minute prices") {
  TradingDayData day = flat_day({{"A", 1.0}}, 16);
  for (int m = 0; m < 16; ++m) day.assets["A"][static_cast<std::size_t>(m)].price = 1.0 + m;
  EnvConfig cfg;
  cfg.timesteps = 8;
  ExecutionEnv env(cfg);
  env.reset({day.date, {{"A", 1, 10.0}}, 0.0}, day);
  auto r = env.step(std::vector<std::size_t>{2});
  REQUIRE(r.execution_prices[0] == Approx(1.5));
  REQUIRE(env.step_begin(2) == 2);
  REQUIRE(env.step_end(8) == 16);
}

TEST_CASE("episode_aep: weighted mean, single price, empty") {
  TradingDayData day = flat_day({{"A", 10.0}}, 4);
  for (int m = 2; m < 4; ++m) day.assets["A"][static_cast<std::size_t>(m)].price = 20.0;
  EnvConfig cfg;
  cfg.timesteps = 2;
  ExecutionEnv env(cfg);
  env.reset({day.date, {{"A", 1, 4.0}}, 0.0}, day);
  env.step(std::vector<std::size_t>{1});  // 1 unit at 10
  env.step(std::vector<std::size_t>{0});  // remaining 3 at 20
  REQUIRE(*env.episode_aep(0) == Approx(17.5).epsilon(1e-15));

  env.reset({day.date, {{"A", -1, 4.0}}, 0.0}, day);
  env.step(std::vector<std::size_t>{0});
  env.step(std::vector<std::size_t>{0});
  REQUIRE_FALSE(env.episode_aep(0).has_value());
}

TEST_CASE("episode_aep: minute-level TWAP over the whole day hits the day average exactly") {
  auto rc = random_case(5, 1.0);
  EnvConfig cfg;
  cfg.timesteps = 240;
  ExecutionEnv env(cfg);
  OrderSet liq{rc.set.date, {{rc.set.orders[0].asset_id, 1, 240.0}}, 0.0};
  env.reset(liq, rc.day);
  for (int t = 1; t <= 240; ++t) env.step_fractions(std::vector<double>{1.0 / 240.0});
  REQUIRE(*env.episode_aep(0) == Approx(env.average_price(0)).epsilon(1e-13));
}

TEST_CASE("invariants over random episodes: cash, ledger replay, fulfillment, decomposition") {
  Rng rng = make_rng(42, 0, 0);
  int episodes = 0, conflicts = 0;
  double worst_ledger = 0.0, worst_fill = 0.0;
  for (std::uint64_t seed = 1; seed <= 40; ++seed)
    for (double factor : {1.0, 0.3, 0.0}) {
      auto rc = random_case(seed, factor);
      for (int timesteps : {8, 13}) {
        EnvConfig cfg;
        cfg.timesteps = timesteps;
        ExecutionEnv env(cfg);
        env.reset(rc.set, rc.day);
        while (!env.done()) {
          auto r = env.step(random_actions(rng, env.agent_count(), cfg.action_count()));
          conflicts += r.cash_conflict;
          double total = 0.0;
          for (double x : r.agent_rewards) total += x;
          REQUIRE(r.shared_reward * static_cast<double>(env.agent_count()) == Approx(total).margin(1e-15));
        }
        ++episodes;
        const auto& bal = env.ledger().balance_history;
        for (double c : bal) REQUIRE(c >= 0.0);
        for (std::size_t t = 1; t < bal.size(); ++t) {
          double c = bal[t - 1];
          for (std::size_t i = 0; i < env.agent_count(); ++i)
            c += env.direction(i) * env.execution_prices(i)[t - 1] * env.executed_volumes(i)[t - 1];
          const double scale = std::max(std::abs(bal[t - 1]), 1.0);
          worst_ledger = std::max(worst_ledger, std::abs(c - bal[t]) / scale);
        }
        if (!env.fulfillment_violation())
          for (std::size_t i = 0; i < env.agent_count(); ++i)
            worst_fill = std::max(worst_fill, std::abs(env.executed_total(i) - env.amount(i)) / env.amount(i));
      }
    }
  REQUIRE(episodes == 240);
  REQUIRE(conflicts > 0);
  REQUIRE(worst_ledger <= 1e-9);
  REQUIRE(worst_fill <= 1e-15);
}

TEST_CASE("anti-symmetry: flipping directions negates every R_e") {
  auto rc = random_case(9, 1.0);
  OrderSet flipped = rc.set;
  for (auto& o : flipped.orders) o.direction = -o.direction;
  rc.set.initial_cash = flipped.initial_cash = 1e12;
  EnvConfig cfg;
  ExecutionEnv a(cfg), b(cfg);
  a.reset(rc.set, rc.day);
  b.reset(flipped, rc.day);
  Rng rng = make_rng(3, 0, 0);
  while (!a.done()) {
    auto act = random_actions(rng, a.agent_count(), cfg.action_count());
    auto ra = a.step(act), rb = b.step(act);
    for (std::size_t i = 0; i < a.agent_count(); ++i) REQUIRE(ra.reward_parts[i].execution == -rb.reward_parts[i].execution);
  }
}

TEST_CASE("no lookahead: perturbing minutes from the current step on leaves observations unchanged") {
  auto rc = random_case(11, 1.0);
  EnvConfig cfg;
  Rng rng = make_rng(4, 0, 0);
  for (int stop = 1; stop <= cfg.timesteps; ++stop) {
    ExecutionEnv a(cfg);
    a.reset(rc.set, rc.day);
    std::vector<std::vector<std::size_t>> acts;
    for (int t = 1; t < stop; ++t) acts.push_back(random_actions(rng, a.agent_count(), cfg.action_count()));
    for (const auto& x : acts) a.step(x);
    const int first = a.step_begin(stop);

    TradingDayData perturbed = rc.day;
    for (auto& [asset, bars] : perturbed.assets)
      for (std::size_t m = static_cast<std::size_t>(first); m < bars.size(); ++m) {
        bars[m].price *= 1.5;
        bars[m].volume *= 3.0;
      }
    ExecutionEnv b(cfg);
    b.reset(rc.set, perturbed);
    for (const auto& x : acts) b.step(x);
    const auto oa = a.observations(), ob = b.observations();
    for (std::size_t i = 0; i < oa.size(); ++i) {
      REQUIRE(oa[i].market_prices == ob[i].market_prices);
      REQUIRE(oa[i].market_volumes == ob[i].market_volumes);
      REQUIRE(oa[i].elapsed_fraction == ob[i].elapsed_fraction);
      REQUIRE(oa[i].direction == ob[i].direction);
      REQUIRE(oa[i].traded_volume_history.size() == ob[i].traded_volume_history.size());
      REQUIRE(oa[i].cash_history.size() == ob[i].cash_history.size());
    }
  }
}

TEST_CASE("step_schedule: clipped totals and volume-weighted minute price") {
  TradingDayData day = flat_day({{"A", 10.0}}, 8);
  day.assets["A"][1].price = 20.0;
  EnvConfig cfg;
  cfg.timesteps = 4;
  ExecutionEnv env(cfg);
  env.reset({day.date, {{"A", 1, 10.0}}, 0.0}, day);
  auto r = env.step_schedule({{1.0, 3.0}});
  REQUIRE(r.execution_prices[0] == Approx(17.5));
  REQUIRE(r.executed_fractions[0] == Approx(0.4));
  r = env.step_schedule({{50.0, 50.0}});
  REQUIRE(r.executed_fractions[0] == Approx(0.6));
  REQUIRE(env.remaining_volume(0) == 0.0);
  REQUIRE_THROWS_AS(env.step_schedule({{1.0}}), Error);
  REQUIRE_THROWS_AS(env.step_schedule({{-1.0, 1.0}}), Error);
}

TEST_CASE("trace: one JSON line per step") {
  auto rc = random_case(2, 1.0);
  ExecutionEnv env(EnvConfig{});
  env.set_tracing(true);
  env.reset(rc.set, rc.day);
  while (!env.done()) env.step(std::vector<std::size_t>(env.agent_count(), 2));
  std::ostringstream out;
  env.write_trace_jsonl(out);
  std::istringstream in(out.str());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    REQUIRE(j.at("step").get<int>() == ++n);
    REQUIRE(j.contains("obs_digest"));
    REQUIRE(j.at("executed_fractions").size() == env.agent_count());
  }
  REQUIRE(n == 8);
}
