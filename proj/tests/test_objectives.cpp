#include <catch2/catch_amalgamated.hpp>

#include <ftlab/objectives.hpp>
#include <ftlab/tabular_policy.hpp>

#include "support/oracles.hpp"

using namespace ftlab;

namespace {

Trajectory make_traj(std::vector<int> prompt, std::vector<int> response, int reward = 1) {
  Trajectory t;
  t.prompt = std::move(prompt);
  t.response = std::move(response);
  t.reward = reward;
  return t;
}

// Binary-vocab policy with a hand-set head row; context order 1 so the row
// after each token is also directly settable.
TabularSoftmaxPolicy binary_policy(double p_head0, double p_after0_0) {
  TabularSoftmaxPolicy policy(TabularConfig{2, 1, 8});
  const std::size_t root = policy.context_id({}, {});
  policy.logit(root, 0) = std::log(p_head0);
  policy.logit(root, 1) = std::log(1.0 - p_head0);
  const std::size_t after0 = policy.context_id({}, std::vector<int>{0});
  policy.logit(after0, 0) = std::log(p_after0_0);
  policy.logit(after0, 1) = std::log(1.0 - p_after0_0);
  return policy;
}

std::vector<Trajectory> gradcheck_batch() {
  return {make_traj({1, 0}, {2, 1}), make_traj({0}, {1, 1, 2}), make_traj({2}, {0})};
}

}  // namespace

TEST_CASE("sft loss reproduces hand arithmetic", "[objectives]") {
  // Uniform 4-token vocab: every token costs log 4, a 2-token response 2 log 4.
  TabularSoftmaxPolicy policy(TabularConfig{4, 1, 8});
  const std::vector<Trajectory> batch = {make_traj({0}, {1, 2})};
  const LossReport r = sft_loss(policy, batch);
  CHECK(r.loss == Catch::Approx(2.0 * std::log(4.0)).margin(1e-12));
  REQUIRE(r.per_seq_weight.size() == 1);
  CHECK(r.per_seq_weight[0] == Catch::Approx(1.0 / 16.0).margin(1e-15));
  CHECK(r.kl_term == 0.0);
}

TEST_CASE("dft loss reproduces hand arithmetic at both weight levels", "[objectives]") {
  // p(0 | root) = 0.5, p(0 | after 0) = 0.5: response {0, 0} has
  // per-token probs {0.5, 0.5} and sequence prob 0.25.
  const TabularSoftmaxPolicy policy = binary_policy(0.5, 0.5);
  const std::vector<Trajectory> batch = {make_traj({}, {0, 0})};

  SECTION("token weights") {
    const LossReport r = dft_loss(policy, batch, WeightLevel::token);
    // Two tokens, each contributing -0.5 * log 0.5.
    CHECK(r.loss == Catch::Approx(std::log(2.0)).margin(1e-12));
    REQUIRE(r.per_token_weight.size() == 1);
    REQUIRE(r.per_token_weight[0].size() == 2);
    CHECK(r.per_token_weight[0][0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(r.per_token_weight[0][1] == Catch::Approx(0.5).margin(1e-15));
  }
  SECTION("sequence weight") {
    const LossReport r = dft_loss(policy, batch, WeightLevel::sequence);
    // -0.25 * log 0.25 = 0.25 * 2 log 2 ~= 0.34657.
    CHECK(r.loss == Catch::Approx(0.25 * 2.0 * std::log(2.0)).margin(1e-12));
    REQUIRE(r.per_seq_weight.size() == 1);
    CHECK(r.per_seq_weight[0] == Catch::Approx(0.25).margin(1e-15));
  }
}

TEST_CASE("objectives reject unfiltered batches", "[objectives]") {
  const TabularSoftmaxPolicy policy = binary_policy(0.5, 0.5);
  const std::vector<Trajectory> batch = {make_traj({}, {0}, /*reward=*/0)};
  CHECK_THROWS_AS(sft_loss(policy, batch), ContractError);
  CHECK_THROWS_AS(dft_loss(policy, batch, WeightLevel::token), ContractError);
  CHECK_THROWS_AS(sft_loss(policy, std::vector<Trajectory>{}), ContractError);
}

TEST_CASE("sft gradient matches finite differences", "[objectives]") {
  auto policy = TabularSoftmaxPolicy::random(TabularConfig{3, 1, 8}, 0.6, 17);
  const std::vector<Trajectory> batch = gradcheck_batch();
  const LossReport r = sft_loss(policy, batch);
  const std::vector<double> fd = oracles::finite_difference(
      policy, [&] { return sft_loss(policy, batch).loss; }, 1e-5);
  CHECK(oracles::inf_norm_rel_error(r.grad, fd) < 1e-6);
}

TEST_CASE("dft gradient treats weights as constants", "[objectives]") {
  auto policy = TabularSoftmaxPolicy::random(TabularConfig{3, 1, 8}, 0.8, 29);
  const std::vector<Trajectory> batch = gradcheck_batch();

  for (const WeightLevel level : {WeightLevel::token, WeightLevel::sequence}) {
    const LossReport r = dft_loss(policy, batch, level);

    // The correct oracle differentiates the surrogate whose weights are
    // captured once at the center point and never move with the parameters.
    const std::vector<std::vector<double>> frozen = [&] {
      std::vector<std::vector<double>> w;
      for (const Trajectory& t : batch) w.push_back(token_weights(policy, t, level));
      return w;
    }();
    const auto surrogate = [&] {
      double total = 0.0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const LogProb lp = log_prob(policy, batch[i]);
        for (std::size_t t = 0; t < lp.per_token.size(); ++t)
          total -= frozen[i][t] * lp.per_token[t];
      }
      return total / static_cast<double>(batch.size());
    };
    const std::vector<double> fd = oracles::finite_difference(policy, surrogate, 1e-5);
    CHECK(oracles::inf_norm_rel_error(r.grad, fd) < 1e-6);

    // And it must NOT match the fully-differentiated gradient, which picks up
    // an extra (1 + log p) factor through the weight itself.
    if (level == WeightLevel::sequence) {
      const std::vector<double> full = oracles::full_diff_dft_gradient(policy, batch);
      CHECK(oracles::inf_norm_rel_error(r.grad, full) > 1e-3);
    }
  }
}

TEST_CASE("sft and dft gradients are parallel when all weights are equal", "[objectives]") {
  // Uniform policy: every response of the same length gets the same weight,
  // so the dft gradient is a positive rescaling of the sft gradient.
  TabularSoftmaxPolicy policy(TabularConfig{3, 1, 8});
  const std::vector<Trajectory> batch = {make_traj({0}, {1, 2}), make_traj({1}, {2, 0})};
  const LossReport s = sft_loss(policy, batch);
  const LossReport d = dft_loss(policy, batch, WeightLevel::token);
  CHECK(oracles::cosine_similarity(s.grad, d.grad) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("exact kl over enumerated states matches hand arithmetic", "[objectives]") {
  // Single state, Q = (0.75, 0.25) vs P = (0.5, 0.5).
  const TabularSoftmaxPolicy q = binary_policy(0.75, 0.5);
  const TabularSoftmaxPolicy p = binary_policy(0.5, 0.5);
  const std::vector<KlState> states = {{{}, {}}};

  const double reverse = kl_divergence(q, p, states, KlDirection::reverse);
  const double forward = kl_divergence(q, p, states, KlDirection::forward);
  const double expect_rev =
      0.75 * std::log(0.75 / 0.5) + 0.25 * std::log(0.25 / 0.5);
  const double expect_fwd =
      0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  CHECK(reverse == Catch::Approx(expect_rev).margin(1e-12));
  CHECK(forward == Catch::Approx(expect_fwd).margin(1e-12));
  CHECK(kl_divergence(q, q, states, KlDirection::reverse) ==
        Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("collect_states covers every teacher-forced prefix", "[objectives]") {
  const std::vector<Trajectory> batch = {make_traj({1}, {0, 2}), make_traj({}, {1})};
  const std::vector<KlState> states = collect_states(batch);
  REQUIRE(states.size() == 3);
  CHECK(states[0].prefix.empty());
  CHECK(states[1].prefix == std::vector<int>{0});
  CHECK(states[2].prefix.empty());
  CHECK(states[2].prompt.empty());
}

TEST_CASE("asft gradient matches finite differences of the penalized surrogate",
          "[objectives]") {
  auto policy = TabularSoftmaxPolicy::random(TabularConfig{3, 1, 8}, 0.7, 31);
  const auto anchor = clone_frozen(TabularSoftmaxPolicy::random(
      TabularConfig{3, 1, 8}, 0.7, 32));
  const std::vector<Trajectory> batch = gradcheck_batch();
  const std::vector<KlState> states = collect_states(batch);

  for (const KlDirection dir : {KlDirection::reverse, KlDirection::forward}) {
    const KlConfig kl{dir, 0.05, anchor.get()};
    const LossReport r = asft_loss(policy, batch, WeightLevel::token, kl);

    const std::vector<std::vector<double>> frozen = [&] {
      std::vector<std::vector<double>> w;
      for (const Trajectory& t : batch)
        w.push_back(token_weights(policy, t, WeightLevel::token));
      return w;
    }();
    const auto surrogate = [&] {
      double total = 0.0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const LogProb lp = log_prob(policy, batch[i]);
        for (std::size_t t = 0; t < lp.per_token.size(); ++t)
          total -= frozen[i][t] * lp.per_token[t];
      }
      total /= static_cast<double>(batch.size());
      return total + 0.05 * kl_divergence(policy, *anchor, states, dir);
    };
    const std::vector<double> fd = oracles::finite_difference(policy, surrogate, 1e-5);
    CHECK(oracles::inf_norm_rel_error(r.grad, fd) < 1e-6);
  }
}

TEST_CASE("asft at lambda zero is bit-identical to dft", "[objectives]") {
  auto policy = TabularSoftmaxPolicy::random(TabularConfig{3, 1, 8}, 0.9, 51);
  const auto anchor = clone_frozen(policy);
  const std::vector<Trajectory> batch = gradcheck_batch();

  const KlConfig kl{KlDirection::reverse, 0.0, anchor.get()};
  const LossReport a = asft_loss(policy, batch, WeightLevel::token, kl);
  const LossReport d = dft_loss(policy, batch, WeightLevel::token);
  CHECK(a.loss == d.loss);
  CHECK(a.grad == d.grad);
  CHECK(a.kl_term == 0.0);
}

TEST_CASE("asft penalty is affine in lambda", "[objectives]") {
  auto policy = TabularSoftmaxPolicy::random(TabularConfig{3, 1, 8}, 0.9, 52);
  const auto anchor = clone_frozen(TabularSoftmaxPolicy::random(
      TabularConfig{3, 1, 8}, 0.9, 53));
  const std::vector<Trajectory> batch = gradcheck_batch();

  const KlConfig k05{KlDirection::reverse, 0.05, anchor.get()};
  const KlConfig k10{KlDirection::reverse, 0.10, anchor.get()};
  const LossReport d = dft_loss(policy, batch, WeightLevel::token);
  const LossReport a05 = asft_loss(policy, batch, WeightLevel::token, k05);
  const LossReport a10 = asft_loss(policy, batch, WeightLevel::token, k10);

  CHECK(a05.kl_term == Catch::Approx(a10.kl_term).margin(1e-15));
  CHECK(a05.loss - d.loss == Catch::Approx(0.05 * a05.kl_term).margin(1e-12));
  CHECK(a10.loss - d.loss == Catch::Approx(0.10 * a10.kl_term).margin(1e-12));
  // Penalty gradient doubles with lambda.
  for (std::size_t i = 0; i < d.grad.size(); ++i) {
    const double p05 = a05.grad[i] - d.grad[i];
    const double p10 = a10.grad[i] - d.grad[i];
    CHECK(p10 == Catch::Approx(2.0 * p05).margin(1e-12));
  }
}

TEST_CASE("asft penalty vanishes when the policy sits on its anchor", "[objectives]") {
  auto policy = TabularSoftmaxPolicy::random(TabularConfig{3, 1, 8}, 0.7, 61);
  const auto anchor = clone_frozen(policy);
  const std::vector<Trajectory> batch = gradcheck_batch();

  const KlConfig kl{KlDirection::reverse, 0.05, anchor.get()};
  const LossReport a = asft_loss(policy, batch, WeightLevel::token, kl);
  const LossReport d = dft_loss(policy, batch, WeightLevel::token);
  CHECK(a.kl_term == Catch::Approx(0.0).margin(1e-15));
  for (std::size_t i = 0; i < d.grad.size(); ++i)
    CHECK(a.grad[i] == Catch::Approx(d.grad[i]).margin(1e-12));
}

TEST_CASE("asft requires a sane penalty configuration", "[objectives]") {
  auto policy = TabularSoftmaxPolicy::random(TabularConfig{3, 1, 8}, 0.7, 62);
  const auto anchor = clone_frozen(policy);
  const std::vector<Trajectory> batch = gradcheck_batch();
  CHECK_THROWS_AS(
      asft_loss(policy, batch, WeightLevel::token,
                KlConfig{KlDirection::reverse, -0.1, anchor.get()}),
      ConfigError);
  CHECK_THROWS_AS(asft_loss(policy, batch, WeightLevel::token,
                            KlConfig{KlDirection::reverse, 0.05, nullptr}),
                  ConfigError);
}

TEST_CASE("sft_kl matches sft plus the scaled penalty", "[objectives]") {
  auto policy = TabularSoftmaxPolicy::random(TabularConfig{3, 1, 8}, 0.7, 63);
  const auto anchor = clone_frozen(TabularSoftmaxPolicy::random(
      TabularConfig{3, 1, 8}, 0.7, 64));
  const std::vector<Trajectory> batch = gradcheck_batch();
  const std::vector<KlState> states = collect_states(batch);

  const KlConfig kl{KlDirection::reverse, 0.05, anchor.get()};
  const LossReport r = sft_kl_loss(policy, batch, kl);
  const LossReport s = sft_loss(policy, batch);
  const double penalty = kl_divergence(policy, *anchor, states, KlDirection::reverse);
  CHECK(r.kl_term == Catch::Approx(penalty).margin(1e-12));
  CHECK(r.loss == Catch::Approx(s.loss + 0.05 * penalty).margin(1e-12));

  const auto surrogate = [&] {
    return sft_loss(policy, batch).loss +
           0.05 * kl_divergence(policy, *anchor, states, KlDirection::reverse);
  };
  const std::vector<double> fd = oracles::finite_difference(policy, surrogate, 1e-5);
  CHECK(oracles::inf_norm_rel_error(r.grad, fd) < 1e-6);
}

TEST_CASE("token_weights reports the weights the losses consume", "[objectives]") {
  const TabularSoftmaxPolicy policy = binary_policy(0.5, 0.25);
  const Trajectory traj = make_traj({}, {0, 0});
  const std::vector<double> tok = token_weights(policy, traj, WeightLevel::token);
  REQUIRE(tok.size() == 2);
  CHECK(tok[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(tok[1] == Catch::Approx(0.25).margin(1e-15));
  const std::vector<double> seq = token_weights(policy, traj, WeightLevel::sequence);
  REQUIRE(seq.size() == 2);
  CHECK(seq[0] == Catch::Approx(0.125).margin(1e-15));
  CHECK(seq[1] == Catch::Approx(0.125).margin(1e-15));
}

TEST_CASE("implicit reward is the inverse sequence probability", "[objectives]") {
  const TabularSoftmaxPolicy policy = binary_policy(0.5, 0.5);
  const Trajectory traj = make_traj({}, {0, 0});
  const ImplicitReward r = implicit_sft_reward(policy, traj);
  CHECK(r.value == Catch::Approx(4.0).margin(1e-12));
  CHECK_FALSE(r.clamped);

  // A long improbable response trips the underflow floor and flags it.
  TabularSoftmaxPolicy skew(TabularConfig{2, 1, 2048});
  const std::size_t root = skew.context_id({}, {});
  const std::size_t after0 = skew.context_id({}, std::vector<int>{0});
  for (const std::size_t ctx : {root, after0}) {
    skew.logit(ctx, 0) = std::log(1e-9);
    skew.logit(ctx, 1) = std::log(1.0 - 1e-9);
  }
  Trajectory long_traj;
  long_traj.response.assign(40, 0);
  long_traj.reward = 1;
  const ImplicitReward clamped = implicit_sft_reward(skew, long_traj);
  CHECK(clamped.clamped);
  CHECK(clamped.value == Catch::Approx(std::exp(700.0)).epsilon(1e-12));
}

TEST_CASE("loss reports surface underflow clamps", "[objectives]") {
  TabularSoftmaxPolicy skew(TabularConfig{2, 1, 2048});
  const std::size_t root = skew.context_id({}, {});
  const std::size_t after0 = skew.context_id({}, std::vector<int>{0});
  for (const std::size_t ctx : {root, after0}) {
    skew.logit(ctx, 0) = std::log(1e-9);
    skew.logit(ctx, 1) = std::log(1.0 - 1e-9);
  }
  Trajectory long_traj;
  long_traj.response.assign(40, 0);
  long_traj.reward = 1;
  const LossReport r = dft_loss(skew, std::vector<Trajectory>{long_traj},
                                WeightLevel::sequence);
  CHECK(r.underflow_clamps >= 1);
  CHECK(r.per_seq_weight[0] == std::exp(-700.0));
}
