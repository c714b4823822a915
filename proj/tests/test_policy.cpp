#include <catch_amalgamated.hpp>

#include <filesystem>

#include "moex/exec_env.hpp"
#include "moex/market_data.hpp"
#include "moex/policy.hpp"

using namespace moex;
using Catch::Approx;

namespace {

PolicyConfig small(Channel c, int K = 3) {
  PolicyConfig p;
  p.rnn_hidden = 6;
  p.fc_hidden = 8;
  p.rounds_K = K;
  p.channel = c;
  p.init_seed = 5;
  return p;
}

/// Observations after `steps` random steps on a synthetic day with `n` orders.
std::vector<AgentObservation> observations(int n, int steps, std::uint64_t seed = 1) {
  SyntheticMarketConfig mc;
  mc.days = 1;
  mc.n_assets = std::max(n, 4);
  mc.rng_seed = seed;
  auto days = generate_synthetic_market(mc);
  OrderGenConfig oc;
  oc.orders_per_day = n;
  auto set = generate_order_sets(days, oc)[0];
  ExecutionEnv env(EnvConfig{});
  env.reset(set, days[0]);
  Rng rng = make_rng(seed, 9, 0);
  for (int t = 0; t < steps; ++t) {
    std::vector<std::size_t> a(static_cast<std::size_t>(n));
    for (auto& x : a) x = static_cast<std::size_t>(uniform01(rng) * 4.99);
    env.step(a);
  }
  return env.observations();
}

nn::Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng = make_rng(seed, 1, 2);
  nn::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -1.0, 1.0);
  return m;
}

nn::Matrix permute_rows(const nn::Matrix& m, const std::vector<int>& perm) {
  nn::Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(perm[i]);
  return out;
}

std::vector<nn::Tensor*> params_with_prefix(Policy& p, const std::string& prefix) {
  std::vector<nn::Tensor*> out;
  for (std::size_t i = 0; i < p.params().size(); ++i)
    if (p.params().at(i).name.rfind(prefix, 0) == 0) out.push_back(&p.params().at(i).tensor);
  return out;
}

}  // namespace

TEST_CASE("PolicyConfig: JSON round trip and validation") {
  PolicyConfig c = small(Channel::Attention, 2);
  c.intention_feedback = false;
  auto back = nlohmann::json(c).get<PolicyConfig>();
  REQUIRE(nlohmann::json(back) == nlohmann::json(c));
  REQUIRE(channel_from_string("broadcast") == Channel::Broadcast);
  REQUIRE_THROWS_AS(channel_from_string("gnn"), Error);
  c.rounds_K = 0;
  REQUIRE_THROWS_AS(validate(c), Error);
  c = small(Channel::Attention);
  c.n_heads = 3;
  REQUIRE_THROWS_AS(validate(c), Error);
  REQUIRE(small(Channel::None, 3).effective_rounds() == 1);
}

TEST_CASE("extract: sharing, empty history, carry equivalence") {
  Policy p(small(Channel::Broadcast));
  auto obs = observations(3, 3);
  obs[2] = obs[0];
  nn::Matrix h = p.extract(obs);
  REQUIRE(h.rows() == 3);
  REQUIRE(h.cols() == 8);
  REQUIRE(h.row(0) == h.row(2));

  auto first = observations(3, 0);
  REQUIRE(first[0].market_prices.empty());
  nn::Matrix h1 = p.extract(first);
  REQUIRE(h1.allFinite());

  RecurrentState carry;
  for (int t = 0; t < 5; ++t) {
    auto o = observations(2, t, 4);
    REQUIRE(p.extract(o, &carry).isApprox(p.extract(o), 1e-13));
  }
}

TEST_CASE("communicate_round: n = 0 error, n = 1 Broadcast sees a zero mean") {
  Policy p(small(Channel::Broadcast));
  REQUIRE_THROWS_AS(p.communicate_round(nn::Matrix(0, 8), {}), Error);
  nn::Matrix h = random_matrix(1, 8, 3);
  nn::Matrix out = p.communicate_round(h, {2});

  // Reference: relu(fc_out([relu(fc_enc([h || onehot])) || 0])).
  nn::Matrix x(1, 13);
  x << h, p.onehot({2});
  const auto& pe = p.params();
  nn::Matrix e = (x * pe.get("channel.enc.w").value + pe.get("channel.enc.b").value).cwiseMax(0.0);
  nn::Matrix y(1, 16);
  y << e, nn::Matrix::Zero(1, 8);
  nn::Matrix ref = (y * pe.get("channel.out.w").value + pe.get("channel.out.b").value).cwiseMax(0.0);
  REQUIRE(out.isApprox(ref, 1e-14));
}

TEST_CASE("communicate_round: permutation equivariance for both channels") {
  const std::vector<int> perm{2, 0, 3, 1};
  for (Channel c : {Channel::Broadcast, Channel::Attention}) {
    Policy p(small(c));
    nn::Matrix h = random_matrix(4, 8, 7);
    std::vector<int> a{0, 3, 1, 4}, pa(4);
    for (std::size_t i = 0; i < 4; ++i) pa[i] = a[static_cast<std::size_t>(perm[i])];
    nn::Matrix out = p.communicate_round(h, a);
    nn::Matrix pout = p.communicate_round(permute_rows(h, perm), pa);
    REQUIRE(pout.isApprox(permute_rows(out, perm), 1e-13));
  }
}

TEST_CASE("communicate_round: None ignores other agents; both channels mix them") {
  nn::Matrix h = random_matrix(3, 8, 11);
  nn::Matrix h2 = h;
  h2.row(1) += random_matrix(1, 8, 12);
  h2.row(2) *= -2.0;
  {
    Policy p(small(Channel::None));
    REQUIRE(p.communicate_round(h, {0, 1, 2}).row(0) == p.communicate_round(h2, {0, 4, 3}).row(0));
  }
  for (Channel c : {Channel::Broadcast, Channel::Attention}) {
    Policy p(small(c));
    REQUIRE_FALSE(p.communicate_round(h, {0, 1, 2}).row(0).isApprox(p.communicate_round(h2, {0, 1, 2}).row(0), 1e-9));
  }
}

TEST_CASE("intention feedback: disabled means previous actions are ignored") {
  nn::Matrix h = random_matrix(3, 8, 13);
  PolicyConfig c = small(Channel::Broadcast);
  Policy with(c);
  REQUIRE_FALSE(with.communicate_round(h, {0, 0, 0}).isApprox(with.communicate_round(h, {4, 2, 1}), 1e-9));
  c.intention_feedback = false;
  Policy without(c);
  REQUIRE(without.communicate_round(h, {0, 0, 0}) == without.communicate_round(h, {4, 2, 1}));
}

TEST_CASE("decide: probabilities, deterministic argmax, Monte Carlo sampling") {
  Policy p(small(Channel::Broadcast));
  nn::Matrix probs = p.decide(random_matrix(5, 8, 17));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    REQUIRE(probs.row(i).sum() == Approx(1.0).epsilon(1e-14));
    REQUIRE(probs.row(i).minCoeff() > 0.0);
  }
  REQUIRE(p.decide(random_matrix(5, 8, 17)) == probs);

  nn::RowVector q(5);
  q << 0.1, 0.2, 0.3, 0.15, 0.25;
  Rng rng = make_rng(99, 0, 0);
  const int draws = 100000;
  std::vector<int> counts(5, 0);
  for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(Policy::sample_index(q, rng))];
  for (int j = 0; j < 5; ++j) {
    const double mean = draws * q(j);
    const double sd = std::sqrt(draws * q(j) * (1.0 - q(j)));
    REQUIRE(std::abs(counts[static_cast<std::size_t>(j)] - mean) <= 3.0 * sd);
  }
}

TEST_CASE("forward_timestep: shapes, dummy action, reproducibility") {
  auto obs = observations(4, 2);
  Policy p(small(Channel::Broadcast, 3));
  Rng r1 = make_rng(3, 0, 0), r2 = make_rng(3, 0, 0);
  auto t1 = p.forward_timestep(obs, ActMode::Sample, &r1);
  auto t2 = p.forward_timestep(obs, ActMode::Sample, &r2);
  REQUIRE(t1.rounds() == 3);
  REQUIRE(t1.actions.size() == 4);
  REQUIRE(t1.hidden.size() == 4);
  REQUIRE(t1.log_probs.size() == 3);
  REQUIRE(t1.actions[0] == std::vector<int>(4, 0));
  REQUIRE(t1.actions == t2.actions);
  REQUIRE(t1.final_actions() == t1.actions[3]);
  for (const auto& lp : t1.log_probs)
    for (double x : lp) REQUIRE(std::isfinite(x));
  REQUIRE_THROWS_AS(p.forward_timestep(obs, ActMode::Sample), Error);

  Policy none(small(Channel::None, 3));
  auto t3 = none.forward_timestep(obs, ActMode::Greedy);
  REQUIRE(t3.rounds() == 1);
}

TEST_CASE("forward_timestep: K = 1 None equals an independent per-agent policy") {
  auto obs = observations(3, 4);
  Policy p(small(Channel::None, 1));
  auto joint = p.forward_timestep(obs, ActMode::Greedy);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    auto solo = p.forward_timestep({obs[i]}, ActMode::Greedy);
    REQUIRE(solo.final_actions()[0] == joint.final_actions()[i]);
    REQUIRE(solo.probs[0].row(0).isApprox(joint.probs[0].row(static_cast<Eigen::Index>(i)), 1e-14));
  }
}

TEST_CASE("forward_timestep: permutation equivariance and any number of agents") {
  auto obs = observations(4, 3);
  const std::vector<int> perm{3, 1, 0, 2};
  std::vector<AgentObservation> pobs;
  for (int i : perm) pobs.push_back(obs[static_cast<std::size_t>(i)]);
  for (Channel c : {Channel::Broadcast, Channel::Attention}) {
    Policy p(small(c));
    auto a = p.forward_timestep(obs, ActMode::Greedy);
    auto b = p.forward_timestep(pobs, ActMode::Greedy);
    for (int k = 0; k < 3; ++k) REQUIRE(b.probs[static_cast<std::size_t>(k)].isApprox(permute_rows(a.probs[static_cast<std::size_t>(k)], perm), 1e-12));
    for (int n : {1, 2, 5, 7}) {
      auto t = p.forward_timestep(observations(n, 2), ActMode::Greedy);
      REQUIRE(t.final_actions().size() == static_cast<std::size_t>(n));
    }
  }
}

TEST_CASE("parameter count does not depend on agents or rounds") {
  const auto base = Policy(small(Channel::Broadcast, 1)).params().scalar_count();
  REQUIRE(Policy(small(Channel::Broadcast, 5)).params().scalar_count() == base);
}

TEST_CASE("estimate_q: permutation invariance, errors, non-degeneracy") {
  Policy p(small(Channel::Broadcast));
  nn::Matrix h0 = random_matrix(3, 8, 21);
  const std::vector<int> a{1, 4, 2};
  const std::vector<double> l{0.25, 1.0, 0.5};
  const double q = p.estimate_q(h0, a, l);
  REQUIRE(p.estimate_q(permute_rows(h0, {2, 0, 1}), {2, 1, 4}, {0.5, 0.25, 1.0}) == Approx(q).epsilon(1e-14));
  REQUIRE_THROWS_AS(p.estimate_q(nn::Matrix(0, 8), {}, {}), Error);
  std::set<double> values;
  for (int x = 0; x < 5; ++x)
    for (int y = 0; y < 5; ++y) values.insert(p.estimate_q(h0.topRows(2), {x, y}, {0.25 * x, 0.25 * y}));
  REQUIRE(values.size() >= 20);
}

TEST_CASE("finite differences: decision head, channels and Q-hat") {
  for (Channel c : {Channel::Broadcast, Channel::Attention}) {
    Policy p(small(c));
    nn::Matrix h = random_matrix(3, 8, 31);
    auto build = [&](nn::Graph& g) {
      ParamBinder b(g, p.params());
      nn::Var x = p.communicate(b, g.constant(h), p.onehot({0, 2, 4}), 3);
      nn::Var lp = nn::log_softmax(p.decision_logits(b, x));
      return nn::sum(nn::mul(lp, g.constant(random_matrix(3, 5, 32))));
    };
    auto params = params_with_prefix(p, "channel.");
    for (auto* t : params_with_prefix(p, "decision.")) params.push_back(t);
    auto rep = nn::finite_diff_check(build, params);
    INFO("max relative error " << rep.max_relative_error);
    REQUIRE(rep.passed);
  }
  Policy p(small(Channel::Broadcast));
  nn::Matrix h0 = random_matrix(6, 8, 41);
  nn::Matrix feats = p.action_features({0, 1, 2, 3, 4, 1}, {0.0, 0.25, 0.5, 0.75, 1.0, 0.25});
  auto build = [&](nn::Graph& g) {
    ParamBinder b(g, p.params());
    return nn::sum(nn::square(p.q_value(b, g.constant(h0), feats, 3)));
  };
  auto rep = nn::finite_diff_check(build, params_with_prefix(p, "q."));
  INFO("max relative error " << rep.max_relative_error);
  REQUIRE(rep.passed);
}

TEST_CASE("finite differences: extractor through the GRU") {
  Policy p(small(Channel::Broadcast));
  auto obs = observations(2, 1);
  const auto minutes = obs[0].market_prices.size();
  nn::Matrix s(2, kStaticFeatures);
  for (Eigen::Index i = 0; i < 2; ++i) static_features(obs[static_cast<std::size_t>(i)], s.row(i).data());
  auto build = [&](nn::Graph& g) {
    ParamBinder b(g, p.params());
    nn::Var h = g.constant(nn::Matrix::Zero(2, 6));
    nn::Matrix x(2, kMinuteFeatures);
    for (std::size_t m = 0; m < std::min<std::size_t>(minutes, 6); ++m) {
      for (Eigen::Index i = 0; i < 2; ++i) minute_features(obs[static_cast<std::size_t>(i)], m, x.row(i).data());
      h = nn::gru_cell(g.constant(x), h, p.gru(b));
    }
    return nn::sum(nn::square(p.extractor_head(b, h, g.constant(s))));
  };
  auto rep = nn::finite_diff_check(build, params_with_prefix(p, "extractor."));
  INFO("max relative error " << rep.max_relative_error);
  REQUIRE(rep.passed);
}

TEST_CASE("save_policy / load_policy round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "moex_policy_rt";
  std::filesystem::remove_all(dir);
  Policy p(small(Channel::Attention));
  save_policy(p, dir);
  Policy q = load_policy(dir);
  REQUIRE(nlohmann::json(q.config()) == nlohmann::json(p.config()));
  auto obs = observations(3, 2);
  REQUIRE(q.forward_timestep(obs, ActMode::Greedy).probs.back() == p.forward_timestep(obs, ActMode::Greedy).probs.back());
  REQUIRE_THROWS_AS(load_policy(dir / "missing"), Error);
  std::filesystem::remove_all(dir);
}
