#pragma once

// Finite-difference validation of the objective gradients. The analytic
// gradient claims to differentiate the weight-frozen surrogate, so the
// oracle here rebuilds that surrogate by straight-line recomputation: weights
// are captured once at the center parameters and the perturbed evaluations
// combine them with fresh log-probs (plus the fully-differentiated KL term,
// which has no frozen part). Agreement is measured as the infinity-norm
// relative error max_i |a_i - f_i| / max(||a||_inf, ||f||_inf).

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <ftlab/objectives.hpp>
#include <ftlab/policy.hpp>
#include <ftlab/tabular_policy.hpp>
#include <ftlab/tiny_autoregressor.hpp>

namespace ftlab {

namespace detail {

// Loss of the frozen-weight surrogate at the policy's current parameters.
// frozen_token_weights[i][t] multiplies log pi(y_t); the KL part, if any, is
// recomputed exactly (it is differentiated through, not frozen).
inline double surrogate_loss(const Policy& policy, std::span<const Trajectory> batch,
                             const std::vector<std::vector<double>>& frozen_token_weights,
                             const KlConfig& kl) {
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const LogProb lp = log_prob(policy, batch[i]);
    for (std::size_t t = 0; t < lp.per_token.size(); ++t)
      loss += -frozen_token_weights[i][t] * lp.per_token[t];
  }
  loss /= static_cast<double>(batch.size());
  if (kl.lambda > 0.0) {
    const std::vector<KlState> states = collect_states(batch);
    loss += kl.lambda * kl_divergence(policy, *kl.anchor, states, kl.direction);
  }
  return loss;
}

// Central finite difference over every parameter; restores the policy.
inline std::vector<double> finite_difference(Policy& policy,
                                             const std::function<double()>& eval, double eps) {
  std::vector<double> params = params_of(policy);
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + eps;
    policy.set_params(params);
    const double up = eval();
    params[i] = saved - eps;
    policy.set_params(params);
    const double down = eval();
    params[i] = saved;
    grad[i] = (up - down) / (2.0 * eps);
  }
  policy.set_params(params);
  return grad;
}

inline double inf_norm_rel_error(std::span<const double> a, std::span<const double> b) {
  double scale = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return scale == 0.0 ? diff : diff / scale;
}

// The multiplier each response token carries in the frozen surrogate.
inline std::vector<std::vector<double>> freeze_weights(const Policy& policy,
                                                       std::span<const Trajectory> batch,
                                                       Objective objective, WeightLevel level) {
  std::vector<std::vector<double>> frozen;
  for (const Trajectory& traj : batch) {
    if (objective == Objective::sft || objective == Objective::sft_kl)
      frozen.emplace_back(traj.response.size(), 1.0);
    else
      frozen.push_back(token_weights(policy, traj, level));
  }
  return frozen;
}

}  // namespace detail

struct GradCheckCase {
  std::string policy;     // "tabular" or "tiny-ar"
  std::string objective;  // loss under test, with level and direction
  double worst_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  bool pass = true;
};

struct GradCheckOptions {
  std::string policy = "all";  // "tabular", "tiny-ar" or "all"
  int trials = 3;
  std::uint64_t seed = 0;
  // Test fixture: corrupts one analytic gradient component so the breach
  // path can be exercised deliberately.
  bool negative_control = false;
};

namespace detail {

inline Trajectory random_trajectory(DeterministicRng& rng, int vocab, int max_prompt,
                                    int max_response) {
  Trajectory t;
  const int np = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_prompt + 1)));
  const int nr = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_response)));
  for (int i = 0; i < np; ++i)
    t.prompt.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab))));
  for (int i = 0; i < nr; ++i)
    t.response.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab))));
  return t;
}

struct GradCheckCaseSpec {
  Objective objective;
  WeightLevel level;
  KlDirection direction;
  double lambda;
  const char* name;
};

inline const GradCheckCaseSpec* gradcheck_cases(std::size_t& count) {
  static const GradCheckCaseSpec specs[] = {
      {Objective::sft, WeightLevel::token, KlDirection::reverse, 0.0, "sft"},
      {Objective::dft, WeightLevel::token, KlDirection::reverse, 0.0, "dft/token"},
      {Objective::dft, WeightLevel::sequence, KlDirection::reverse, 0.0, "dft/sequence"},
      {Objective::asft, WeightLevel::token, KlDirection::reverse, 0.05, "asft/token/reverse"},
      {Objective::asft, WeightLevel::sequence, KlDirection::forward, 0.1,
       "asft/sequence/forward"},
      {Objective::sft_kl, WeightLevel::token, KlDirection::reverse, 0.05, "sft_kl/reverse"},
  };
  count = sizeof specs / sizeof specs[0];
  return specs;
}

inline GradCheckCase run_case(Policy& policy, const Policy& anchor, const char* policy_name,
                              const GradCheckCaseSpec& spec, int trials, double eps,
                              double tolerance, DeterministicRng& rng, bool negative_control) {
  GradCheckCase result;
  result.policy = policy_name;
  result.objective = spec.name;
  result.tolerance = tolerance;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<Trajectory> batch;
    const int n = 2 + static_cast<int>(rng.below(2));
    for (int i = 0; i < n; ++i)
      batch.push_back(random_trajectory(rng, policy.vocab_size(), 2, 3));

    KlConfig kl{spec.direction, spec.lambda, &anchor};
    LossReport rep;
    switch (spec.objective) {
      case Objective::sft: rep = sft_loss(policy, batch); break;
      case Objective::dft: rep = dft_loss(policy, batch, spec.level); break;
      case Objective::asft: rep = asft_loss(policy, batch, spec.level, kl); break;
      case Objective::sft_kl: rep = sft_kl_loss(policy, batch, kl); break;
    }
    if (negative_control) {
      std::size_t worst = 0;
      for (std::size_t i = 0; i < rep.grad.size(); ++i)
        if (std::abs(rep.grad[i]) > std::abs(rep.grad[worst])) worst = i;
      rep.grad[worst] += 1e-3;
    }

    const auto frozen = freeze_weights(policy, batch, spec.objective, spec.level);
    const std::vector<double> fd = finite_difference(
        policy, [&] { return surrogate_loss(policy, batch, frozen, kl); }, eps);
    result.worst_rel_err = std::max(result.worst_rel_err, inf_norm_rel_error(rep.grad, fd));
  }
  result.pass = result.worst_rel_err < tolerance;
  return result;
}

}  // namespace detail

inline GradCheckReport run_gradcheck(const GradCheckOptions& opt) {
  if (opt.trials < 1) throw ConfigError("gradcheck trials must be >= 1");
  if (opt.policy != "all" && opt.policy != "tabular" && opt.policy != "tiny-ar")
    throw ConfigError("gradcheck.policy must be tabular, tiny-ar or all, got \"" + opt.policy +
                      "\"");
  GradCheckReport report;
  std::size_t case_count = 0;
  const detail::GradCheckCaseSpec* specs = detail::gradcheck_cases(case_count);

  if (opt.policy == "all" || opt.policy == "tabular") {
    DeterministicRng rng(DeterministicRng::mix(opt.seed, 11));
    TabularConfig cfg{/*vocab_size=*/5, /*order=*/1, /*max_len=*/8};
    for (std::size_t c = 0; c < case_count; ++c) {
      TabularSoftmaxPolicy policy =
          TabularSoftmaxPolicy::random(cfg, 0.5, DeterministicRng::mix(opt.seed, 100 + c));
      const std::unique_ptr<Policy> anchor =
          TabularSoftmaxPolicy::random(cfg, 0.5, DeterministicRng::mix(opt.seed, 200 + c))
              .clone();
      report.cases.push_back(detail::run_case(policy, *anchor, "tabular", specs[c], opt.trials,
                                              1e-5, 1e-6, rng, opt.negative_control));
    }
  }
  if (opt.policy == "all" || opt.policy == "tiny-ar") {
    DeterministicRng rng(DeterministicRng::mix(opt.seed, 12));
    TinyArConfig cfg;
    cfg.vocab_size = 6;
    cfg.max_len = 10;
    cfg.dim = 6;
    cfg.hidden = 10;
    cfg.layers = 2;
    cfg.init_scale = 0.25;
    for (std::size_t c = 0; c < case_count; ++c) {
      cfg.init_seed = DeterministicRng::mix(opt.seed, 300 + c);
      TinyAutoregressor policy(cfg);
      TinyArConfig anchor_cfg = cfg;
      anchor_cfg.init_seed = DeterministicRng::mix(opt.seed, 400 + c);
      const TinyAutoregressor anchor(anchor_cfg);
      report.cases.push_back(detail::run_case(policy, anchor, "tiny-ar", specs[c], opt.trials,
                                              1e-4, 1e-4, rng, opt.negative_control));
    }
  }
  for (const GradCheckCase& c : report.cases) report.pass = report.pass && c.pass;
  return report;
}

}  // namespace ftlab
