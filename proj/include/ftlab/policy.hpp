#pragma once

// Autoregressive policy interface. All probability work happens in log space;
// the only exp() calls are at well-defined boundaries (sequence weights,
// sampling) where underflow is floored and counted.
//
// The central primitive is traverse_response: a teacher-forced pass over a
// trajectory's response that exposes, for each response position, the policy's
// log-probability row over the vocabulary. When a gradient buffer is supplied
// the visitor writes dLoss/d(log-prob row) in place and the policy backprops
// those rows into its flat parameter vector. Losses built this way inherit
// exact stop-gradient semantics: any weight the visitor computes from the row
// is a plain double, invisible to the backward pass.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include <ftlab/corpus.hpp>
#include <ftlab/errors.hpp>
#include <ftlab/rng.hpp>

namespace ftlab {

inline constexpr std::size_t kDefaultEnumCap = 1'000'000;

// Floor applied when a sequence log-probability is exponentiated.
inline constexpr double kLogProbFloor = -700.0;

namespace detail {

inline std::atomic<long>& underflow_counter() {
  static std::atomic<long> n{0};
  return n;
}

}  // namespace detail

inline long underflow_clamp_count() { return detail::underflow_counter().load(); }
inline void reset_underflow_clamps() { detail::underflow_counter().store(0); }

// exp(seq_log_prob) with the documented floor; increments the diagnostic
// counter when the floor engages.
inline double clamped_prob(double seq_log_prob) {
  if (seq_log_prob < kLogProbFloor) {
    detail::underflow_counter().fetch_add(1);
    seq_log_prob = kLogProbFloor;
  }
  return std::exp(seq_log_prob);
}

// Visitor for one response position: (t, log-prob row, dLoss/dlogprob row).
// The gradient row is empty on evaluation-only traversals; otherwise it
// arrives zeroed and the visitor adds its contribution.
using StepVisitor =
    std::function<void(int t, std::span<const double> log_probs, std::span<double> d_log_probs)>;

class Policy {
 public:
  virtual ~Policy() = default;

  virtual int vocab_size() const = 0;
  virtual int max_len() const = 0;  // bound on |prompt| + |response|
  virtual std::size_t param_count() const = 0;

  // Flat parameter access in the canonical order named by param_order_version().
  virtual void get_params(std::span<double> out) const = 0;
  virtual void set_params(std::span<const double> in) = 0;

  virtual std::string kind() const = 0;
  virtual std::string param_order_version() const = 0;
  virtual nlohmann::json config_json() const = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;

  // Writes log pi(token | prompt, prefix) for every token into out
  // (vocab_size entries, a normalized log-distribution).
  virtual void step_log_probs(std::span<const int> prompt, std::span<const int> prefix,
                              std::span<double> out) const = 0;

  // Teacher-forced traversal of traj.response. grad must be empty or
  // param_count() long; gradients accumulate (+=) into it.
  virtual void traverse_response(const Trajectory& traj, const StepVisitor& visit,
                                 std::span<double> grad) const = 0;

 protected:
  void check_lengths(std::size_t prompt_len, std::size_t response_len) const {
    if (prompt_len + response_len > static_cast<std::size_t>(max_len()))
      throw LengthError("trajectory length " + std::to_string(prompt_len + response_len) +
                        " exceeds max_len " + std::to_string(max_len()));
  }
  void check_tokens(std::span<const int> ids) const {
    for (int id : ids)
      if (id < 0 || id >= vocab_size())
        throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(vocab_size()));
  }
};

namespace detail {

// In-place log-softmax with the max subtracted first; summation order is
// fixed (ascending index) so repeated calls are bit-identical.
inline void log_softmax(std::span<double> logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  for (double& v : logits) v -= lse;
}

// Converts dLoss/dlogprob into dLoss/dlogit for a log-softmax row:
// dz_j = g_j - q_j * sum_i g_i.
inline void dlogprob_to_dlogit(std::span<const double> log_probs, std::span<double> g) {
  double total = 0.0;
  for (double v : g) total += v;
  for (std::size_t j = 0; j < g.size(); ++j) g[j] -= std::exp(log_probs[j]) * total;
}

}  // namespace detail

struct LogProb {
  std::vector<double> per_token;
  double total = 0.0;  // sum of per_token in ascending position order
};

inline LogProb log_prob(const Policy& policy, const Trajectory& traj) {
  LogProb out;
  out.per_token.resize(traj.response.size());
  policy.traverse_response(
      traj,
      [&](int t, std::span<const double> lp, std::span<double>) {
        out.per_token[static_cast<std::size_t>(t)] = lp[static_cast<std::size_t>(traj.response[t])];
      },
      {});
  for (double v : out.per_token) out.total += v;
  return out;
}

// Gradient of log pi(response | prompt) with respect to the flat parameters.
inline std::vector<double> grad_log_prob(const Policy& policy, const Trajectory& traj) {
  std::vector<double> grad(policy.param_count(), 0.0);
  policy.traverse_response(
      traj,
      [&](int t, std::span<const double>, std::span<double> g) {
        g[static_cast<std::size_t>(traj.response[t])] += 1.0;
      },
      grad);
  return grad;
}

inline std::vector<double> params_of(const Policy& policy) {
  std::vector<double> p(policy.param_count());
  policy.get_params(p);
  return p;
}

// All length-len responses in lexicographic token order with their sequence
// log-probabilities. Throws EnumerationCapError if vocab^len exceeds cap.
inline std::vector<std::pair<std::vector<int>, double>> enumerate_responses(
    const Policy& policy, std::span<const int> prompt, int len,
    std::size_t cap = kDefaultEnumCap) {
  if (len <= 0) throw ContractError("enumeration requires a positive response length");
  const int vocab = policy.vocab_size();
  double space = 1.0;
  for (int i = 0; i < len; ++i) {
    space *= vocab;
    if (space > static_cast<double>(cap))
      throw EnumerationCapError("response space " + std::to_string(vocab) + "^" +
                                std::to_string(len) + " exceeds enumeration cap " +
                                std::to_string(cap));
  }
  std::vector<std::pair<std::vector<int>, double>> out;
  out.reserve(static_cast<std::size_t>(space));
  std::vector<int> prefix;
  std::vector<double> row(static_cast<std::size_t>(vocab));
  // Depth-first in token order shares each prefix's row across its subtree,
  // which also yields lexicographic output order.
  auto walk = [&](auto&& self, double acc) -> void {
    policy.step_log_probs(prompt, prefix, row);
    for (int tok = 0; tok < vocab; ++tok) {
      const double lp = acc + row[static_cast<std::size_t>(tok)];
      if (static_cast<int>(prefix.size()) + 1 == len) {
        std::vector<int> full = prefix;
        full.push_back(tok);
        out.emplace_back(std::move(full), lp);
      } else {
        prefix.push_back(tok);
        const std::vector<double> saved = row;  // row is clobbered by recursion
        self(self, lp);
        row = saved;
        prefix.pop_back();
      }
    }
  };
  walk(walk, 0.0);
  return out;
}

inline std::vector<int> sample_response(const Policy& policy, std::span<const int> prompt, int len,
                                        DeterministicRng& rng) {
  if (len <= 0) throw ContractError("sampling requires a positive response length");
  const int vocab = policy.vocab_size();
  std::vector<int> response;
  std::vector<double> row(static_cast<std::size_t>(vocab));
  for (int t = 0; t < len; ++t) {
    policy.step_log_probs(prompt, response, row);
    const double u = rng.uniform();
    double cum = 0.0;
    int pick = vocab - 1;  // guards against cum falling short of 1 by rounding
    for (int tok = 0; tok < vocab; ++tok) {
      cum += std::exp(row[static_cast<std::size_t>(tok)]);
      if (u < cum) {
        pick = tok;
        break;
      }
    }
    response.push_back(pick);
  }
  return response;
}

inline std::vector<int> sample_response(const Policy& policy, std::span<const int> prompt, int len,
                                        std::uint64_t seed) {
  DeterministicRng rng(seed);
  return sample_response(policy, prompt, len, rng);
}

// Deep snapshot whose parameters no optimizer aliases; used as the KL anchor
// and as the reference policy for drift diagnostics.
inline std::unique_ptr<Policy> clone_frozen(const Policy& policy) { return policy.clone(); }

}  // namespace ftlab
