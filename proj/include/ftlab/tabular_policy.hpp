#pragma once

// Exact softmax policy over truncated histories: one logit row per context,
// where a context is the last `order` tokens of prompt + generated prefix
// (a padding code marks positions before the start). Gradients are closed
// form, which makes this the reference implementation for finite-difference
// checks of everything built on top.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <ftlab/policy.hpp>

namespace ftlab {

struct TabularConfig {
  int vocab_size = 0;
  int order = 2;     // history length; 0 means a single global context
  int max_len = 32;  // bound on |prompt| + |response|
};

class TabularSoftmaxPolicy final : public Policy {
 public:
  static constexpr std::size_t kMaxTableEntries = std::size_t{1} << 24;

  explicit TabularSoftmaxPolicy(const TabularConfig& config) : config_(config) {
    if (config.vocab_size <= 0) throw ConfigError("tabular policy needs vocab_size >= 1");
    if (config.order < 0) throw ConfigError("tabular policy needs order >= 0");
    if (config.max_len <= 0) throw ConfigError("tabular policy needs max_len >= 1");
    double contexts = 1.0;
    for (int i = 0; i < config.order; ++i) contexts *= config.vocab_size + 1;
    if (contexts * config.vocab_size > static_cast<double>(kMaxTableEntries))
      throw ConfigError("tabular table (vocab_size+1)^order * vocab_size exceeds " +
                        std::to_string(kMaxTableEntries) + " entries");
    contexts_ = static_cast<std::size_t>(contexts);
    logits_.assign(contexts_ * static_cast<std::size_t>(config.vocab_size), 0.0);
  }

  static TabularSoftmaxPolicy random(const TabularConfig& config, double scale,
                                     std::uint64_t seed) {
    TabularSoftmaxPolicy p(config);
    DeterministicRng rng(seed);
    for (double& v : p.logits_) v = scale * rng.normal();
    return p;
  }

  int vocab_size() const override { return config_.vocab_size; }
  int max_len() const override { return config_.max_len; }
  int order() const { return config_.order; }
  std::size_t context_count() const { return contexts_; }
  std::size_t param_count() const override { return logits_.size(); }

  void get_params(std::span<double> out) const override {
    if (out.size() != logits_.size()) throw ContractError("parameter buffer size mismatch");
    std::copy(logits_.begin(), logits_.end(), out.begin());
  }
  void set_params(std::span<const double> in) override {
    if (in.size() != logits_.size()) throw ContractError("parameter buffer size mismatch");
    std::copy(in.begin(), in.end(), logits_.begin());
  }

  std::string kind() const override { return "tabular"; }
  std::string param_order_version() const override { return "tabular-v1"; }

  nlohmann::json config_json() const override {
    return {{"vocab_size", config_.vocab_size},
            {"order", config_.order},
            {"max_len", config_.max_len}};
  }

  std::unique_ptr<Policy> clone() const override {
    return std::make_unique<TabularSoftmaxPolicy>(*this);
  }

  // Context id of the history ending at (prompt, prefix). Token t contributes
  // code t+1, padding contributes 0; the most recent token is the low digit.
  std::size_t context_id(std::span<const int> prompt, std::span<const int> prefix) const {
    std::size_t id = 0;
    std::size_t weight = 1;
    const std::size_t base = static_cast<std::size_t>(config_.vocab_size) + 1;
    const std::size_t total = prompt.size() + prefix.size();
    for (int i = 0; i < config_.order; ++i) {
      std::size_t code = 0;
      if (static_cast<std::size_t>(i) < total) {
        const std::size_t pos = total - 1 - static_cast<std::size_t>(i);
        const int tok = pos < prompt.size() ? prompt[pos] : prefix[pos - prompt.size()];
        code = static_cast<std::size_t>(tok) + 1;
      }
      id += code * weight;
      weight *= base;
    }
    return id;
  }

  // Direct logit access for hand-built fixtures and tests.
  double& logit(std::size_t context, int token) {
    return logits_[context * static_cast<std::size_t>(config_.vocab_size) +
                   static_cast<std::size_t>(token)];
  }

  void step_log_probs(std::span<const int> prompt, std::span<const int> prefix,
                      std::span<double> out) const override {
    check_tokens(prompt);
    check_tokens(prefix);
    check_lengths(prompt.size(), prefix.size() + 1);
    if (out.size() != static_cast<std::size_t>(config_.vocab_size))
      throw ContractError("log-prob buffer size mismatch");
    fill_row(context_id(prompt, prefix), out);
  }

  void traverse_response(const Trajectory& traj, const StepVisitor& visit,
                         std::span<double> grad) const override {
    check_tokens(traj.prompt);
    check_tokens(traj.response);
    check_lengths(traj.prompt.size(), traj.response.size());
    if (traj.response.empty()) throw ContractError("response must be non-empty");
    const bool with_grad = !grad.empty();
    if (with_grad && grad.size() != logits_.size())
      throw ContractError("gradient buffer size mismatch");

    const std::size_t vocab = static_cast<std::size_t>(config_.vocab_size);
    std::vector<double> row(vocab);
    std::vector<double> g(with_grad ? vocab : 0);
    for (int t = 0; t < static_cast<int>(traj.response.size()); ++t) {
      const std::span<const int> prefix(traj.response.data(), static_cast<std::size_t>(t));
      const std::size_t ctx = context_id(traj.prompt, prefix);
      fill_row(ctx, row);
      if (!with_grad) {
        visit(t, row, {});
        continue;
      }
      std::fill(g.begin(), g.end(), 0.0);
      visit(t, row, g);
      detail::dlogprob_to_dlogit(row, g);
      for (std::size_t j = 0; j < vocab; ++j) grad[ctx * vocab + j] += g[j];
    }
  }

 private:
  void fill_row(std::size_t context, std::span<double> out) const {
    const std::size_t vocab = static_cast<std::size_t>(config_.vocab_size);
    const double* src = logits_.data() + context * vocab;
    std::copy(src, src + vocab, out.begin());
    detail::log_softmax(out);
  }

  TabularConfig config_;
  std::size_t contexts_ = 0;
  std::vector<double> logits_;
};

}  // namespace ftlab
