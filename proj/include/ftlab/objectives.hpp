#pragma once

// Reward-weighted fine-tuning objectives over a batch of positive
// trajectories, all with mean-over-batch reduction:
//
//   sft:  -E[ log pi(y|x) ]
//   dft:  -E[ sg[w] * log pi(y|x) ]   w = pi(y|x) (sequence level) or the
//                                     per-token probability (token level)
//   asft: dft + lambda * KL(pi || anchor), KL averaged over the batch's
//         teacher-forced states
//   sft + KL: same penalty added to sft (ablation baseline)
//
// sg[.] is a stop-gradient: weights are computed from the live policy during
// the forward pass, then enter the backward pass as constants. This falls out
// of the traversal design, where visitor-computed weights are plain doubles.
// Weights are recomputed on every call, so successive calls on a moving
// policy re-freeze them at the current parameters.

#include <span>
#include <string>
#include <vector>

#include <ftlab/policy.hpp>

namespace ftlab {

enum class Objective { sft, dft, asft, sft_kl };
enum class WeightLevel { sequence, token };
enum class KlDirection { reverse, forward };

inline const char* to_string(Objective o) {
  switch (o) {
    case Objective::sft: return "sft";
    case Objective::dft: return "dft";
    case Objective::asft: return "asft";
    case Objective::sft_kl: return "sft_kl";
  }
  return "?";
}
inline const char* to_string(WeightLevel l) {
  return l == WeightLevel::sequence ? "sequence" : "token";
}
inline const char* to_string(KlDirection d) {
  return d == KlDirection::reverse ? "reverse" : "forward";
}

struct KlConfig {
  KlDirection direction = KlDirection::reverse;
  double lambda = 0.0;             // penalty strength, >= 0
  const Policy* anchor = nullptr;  // frozen reference; required when lambda > 0
};

struct LossReport {
  double loss = 0.0;
  std::vector<double> per_seq_weight;                 // sequence probability per item
  std::vector<std::vector<double>> per_token_weight;  // filled at token level
  std::vector<double> grad;                           // dLoss/dparams, flat order
  double kl_term = 0.0;  // mean per-state KL; loss includes lambda * kl_term
  long underflow_clamps = 0;
};

// One teacher-forced prediction point: the policy state after consuming
// prompt + prefix.
struct KlState {
  std::vector<int> prompt;
  std::vector<int> prefix;
};

inline std::vector<KlState> collect_states(std::span<const Trajectory> batch) {
  std::vector<KlState> states;
  for (const Trajectory& traj : batch)
    for (std::size_t t = 0; t < traj.response.size(); ++t)
      states.push_back({traj.prompt,
                        std::vector<int>(traj.response.begin(),
                                         traj.response.begin() + static_cast<long>(t))});
  return states;
}

// Exact KL between full next-token distributions, averaged over states.
// Reverse means KL(q || p) with q the live policy, the mode-seeking penalty
// used for anchoring; forward means KL(p || q).
inline double kl_divergence(const Policy& q, const Policy& p, std::span<const KlState> states,
                            KlDirection direction) {
  if (q.vocab_size() != p.vocab_size())
    throw ContractError("KL requires both policies to share a vocabulary");
  if (states.empty()) throw ContractError("KL requires at least one state");
  const std::size_t vocab = static_cast<std::size_t>(q.vocab_size());
  std::vector<double> lq(vocab), lp(vocab);
  double total = 0.0;
  for (const KlState& s : states) {
    q.step_log_probs(s.prompt, s.prefix, lq);
    p.step_log_probs(s.prompt, s.prefix, lp);
    double kl = 0.0;
    if (direction == KlDirection::reverse) {
      for (std::size_t j = 0; j < vocab; ++j) kl += std::exp(lq[j]) * (lq[j] - lp[j]);
    } else {
      for (std::size_t j = 0; j < vocab; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
    }
    total += kl;
  }
  return total / static_cast<double>(states.size());
}

namespace detail {

inline void require_positive_batch(std::span<const Trajectory> batch, const char* objective) {
  if (batch.empty()) throw ContractError(std::string(objective) + " requires a non-empty batch");
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch[i].reward != 1)
      throw ContractError(std::string(objective) + " accepts only reward-1 items; item " +
                          std::to_string(i) + " has reward " + std::to_string(batch[i].reward));
}

// Adds lambda * mean-state KL(policy vs anchor) to an existing report: value
// into loss, gradient into grad. Exact over the full vocabulary at every
// teacher-forced state of the batch.
inline void add_kl_penalty(LossReport& rep, const Policy& policy,
                           std::span<const Trajectory> batch, const KlConfig& kl) {
  if (kl.anchor == nullptr)
    throw ConfigError("lambda > 0 requires an anchor policy");
  if (policy.vocab_size() != kl.anchor->vocab_size())
    throw ContractError("KL requires both policies to share a vocabulary");
  std::size_t state_count = 0;
  for (const Trajectory& traj : batch) state_count += traj.response.size();
  const double scale = kl.lambda / static_cast<double>(state_count);

  const std::size_t vocab = static_cast<std::size_t>(policy.vocab_size());
  std::vector<double> anchor_row(vocab);
  double kl_total = 0.0;
  for (const Trajectory& traj : batch) {
    policy.traverse_response(
        traj,
        [&](int t, std::span<const double> lq, std::span<double> g) {
          const std::span<const int> prefix(traj.response.data(), static_cast<std::size_t>(t));
          kl.anchor->step_log_probs(traj.prompt, prefix, anchor_row);
          if (kl.direction == KlDirection::reverse) {
            // d/dlq_j of sum q (lq - lp) is q_j (lq_j - lp_j + 1)
            for (std::size_t j = 0; j < vocab; ++j) {
              const double qj = std::exp(lq[j]);
              const double aj = lq[j] - anchor_row[j];
              kl_total += qj * aj;
              g[j] += scale * qj * (aj + 1.0);
            }
          } else {
            // d/dlq_j of sum p (lp - lq) is -p_j
            for (std::size_t j = 0; j < vocab; ++j) {
              const double pj = std::exp(anchor_row[j]);
              kl_total += pj * (anchor_row[j] - lq[j]);
              g[j] += scale * -pj;
            }
          }
        },
        rep.grad);
  }
  rep.kl_term = kl_total / static_cast<double>(state_count);
  rep.loss += kl.lambda * rep.kl_term;
}

}  // namespace detail

inline LossReport sft_loss(const Policy& policy, std::span<const Trajectory> batch) {
  detail::require_positive_batch(batch, "sft_loss");
  const long clamps_before = underflow_clamp_count();
  LossReport rep;
  rep.grad.assign(policy.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Trajectory& traj : batch) {
    double total = 0.0;
    policy.traverse_response(
        traj,
        [&](int t, std::span<const double> lp, std::span<double> g) {
          const std::size_t y = static_cast<std::size_t>(traj.response[t]);
          total += lp[y];
          g[y] += -inv_n;
        },
        rep.grad);
    rep.loss += -inv_n * total;
    rep.per_seq_weight.push_back(clamped_prob(total));
  }
  rep.underflow_clamps = underflow_clamp_count() - clamps_before;
  return rep;
}

inline LossReport dft_loss(const Policy& policy, std::span<const Trajectory> batch,
                           WeightLevel level) {
  detail::require_positive_batch(batch, "dft_loss");
  const long clamps_before = underflow_clamp_count();
  LossReport rep;
  rep.grad.assign(policy.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Trajectory& traj : batch) {
    if (level == WeightLevel::token) {
      std::vector<double> weights;
      double total = 0.0;
      double item_loss = 0.0;
      policy.traverse_response(
          traj,
          [&](int t, std::span<const double> lp, std::span<double> g) {
            const std::size_t y = static_cast<std::size_t>(traj.response[t]);
            const double w = std::exp(lp[y]);  // frozen here: w is a plain double
            weights.push_back(w);
            total += lp[y];
            item_loss += -w * lp[y];
            g[y] += -inv_n * w;
          },
          rep.grad);
      rep.loss += inv_n * item_loss;
      rep.per_seq_weight.push_back(clamped_prob(total));
      rep.per_token_weight.push_back(std::move(weights));
    } else {
      // Sequence level needs the full sequence probability before any
      // gradient row is written, hence the evaluation pass first.
      const double total = log_prob(policy, traj).total;
      const double w = clamped_prob(total);
      policy.traverse_response(
          traj,
          [&](int t, std::span<const double>, std::span<double> g) {
            g[static_cast<std::size_t>(traj.response[t])] += -inv_n * w;
          },
          rep.grad);
      rep.loss += -inv_n * w * total;
      rep.per_seq_weight.push_back(w);
    }
  }
  rep.underflow_clamps = underflow_clamp_count() - clamps_before;
  return rep;
}

// asft = dft + lambda * KL(policy || anchor). With lambda == 0 the dft report
// is returned untouched, so the two objectives agree bit for bit.
inline LossReport asft_loss(const Policy& policy, std::span<const Trajectory> batch,
                            WeightLevel level, const KlConfig& kl) {
  if (kl.lambda < 0.0 || !std::isfinite(kl.lambda))
    throw ConfigError("lambda must be finite and >= 0");
  LossReport rep = dft_loss(policy, batch, level);
  if (kl.lambda == 0.0) return rep;
  detail::add_kl_penalty(rep, policy, batch, kl);
  return rep;
}

// sft + lambda * KL: the regularized-baseline ablation.
inline LossReport sft_kl_loss(const Policy& policy, std::span<const Trajectory> batch,
                              const KlConfig& kl) {
  if (kl.lambda < 0.0 || !std::isfinite(kl.lambda))
    throw ConfigError("lambda must be finite and >= 0");
  LossReport rep = sft_loss(policy, batch);
  if (kl.lambda == 0.0) return rep;
  detail::add_kl_penalty(rep, policy, batch, kl);
  return rep;
}

// The multiplier each response token receives in the given objective level:
// its own conditional probability at token level, the whole sequence
// probability (repeated) at sequence level.
inline std::vector<double> token_weights(const Policy& policy, const Trajectory& traj,
                                         WeightLevel level) {
  const LogProb lp = log_prob(policy, traj);
  std::vector<double> out;
  out.reserve(lp.per_token.size());
  if (level == WeightLevel::token) {
    for (double v : lp.per_token) out.push_back(std::exp(v));
  } else {
    const double w = clamped_prob(lp.total);
    out.assign(lp.per_token.size(), w);
  }
  return out;
}

struct ImplicitReward {
  double value = 0.0;
  bool clamped = false;  // sequence probability hit the exp(-700) floor
};

// The reward a trajectory would need under the importance-weighted RL view
// for SFT's gradient to match: 1 / pi(y|x). Diverges as the policy loses
// mass on the demonstration, which is the instability dft removes.
inline ImplicitReward implicit_sft_reward(const Policy& policy, const Trajectory& traj) {
  const double total = log_prob(policy, traj).total;
  ImplicitReward r;
  r.clamped = total < kLogProbFloor;
  r.value = 1.0 / clamped_prob(total);
  return r;
}

}  // namespace ftlab
