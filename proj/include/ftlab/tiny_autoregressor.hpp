#pragma once

// Small autoregressive network for stress-testing the training objectives on
// a policy with shared parameters. Per sequence position j (position 0 is a
// BOS marker):
//
//   e_j   = tok_emb[z_j] + pos_emb[j]          (bos_emb for the marker)
//   layer: c_j = mean(a_0..a_j)                (causal context, includes self)
//          u_j = tanh(W_in a_j + W_ctx c_j + b)
//          a'_j = a_j + W_out u_j              (residual)
//   row_j = log_softmax(W_head a^L_j + b_head)
//
// The cumulative mean is the only cross-position path, so position j depends
// exactly on tokens z_0..z_j. tanh keeps the map smooth for finite-difference
// validation. All parameters live in one flat vector in the order documented
// by param_order_version().

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <ftlab/policy.hpp>

namespace ftlab {

struct TinyArConfig {
  int vocab_size = 0;
  int max_len = 32;
  int dim = 32;
  int hidden = 64;
  int layers = 2;
  double init_scale = 0.1;
  std::uint64_t init_seed = 1;
};

class TinyAutoregressor final : public Policy {
 public:
  explicit TinyAutoregressor(const TinyArConfig& config) : config_(config) {
    if (config.vocab_size <= 0) throw ConfigError("tiny-ar needs vocab_size >= 1");
    if (config.max_len <= 1) throw ConfigError("tiny-ar needs max_len >= 2");
    if (config.dim <= 0 || config.hidden <= 0 || config.layers <= 0)
      throw ConfigError("tiny-ar needs positive dim, hidden and layers");
    const std::size_t V = static_cast<std::size_t>(config.vocab_size);
    const std::size_t d = static_cast<std::size_t>(config.dim);
    const std::size_t h = static_cast<std::size_t>(config.hidden);
    const std::size_t L = static_cast<std::size_t>(config.layers);
    const std::size_t P = static_cast<std::size_t>(config.max_len);
    off_tok_ = 0;
    off_bos_ = off_tok_ + V * d;
    off_pos_ = off_bos_ + d;
    off_layers_ = off_pos_ + P * d;
    layer_stride_ = h * d + h * d + h + d * h;  // W_in, W_ctx, b, W_out
    off_head_w_ = off_layers_ + L * layer_stride_;
    off_head_b_ = off_head_w_ + V * d;
    params_.assign(off_head_b_ + V, 0.0);

    DeterministicRng rng(config.init_seed);
    // Weights and embeddings are gaussian; biases stay zero.
    auto fill = [&](std::size_t off, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) params_[off + i] = config.init_scale * rng.normal();
    };
    fill(off_tok_, V * d);
    fill(off_bos_, d);
    fill(off_pos_, P * d);
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t base = off_layers_ + l * layer_stride_;
      fill(base, h * d);          // W_in
      fill(base + h * d, h * d);  // W_ctx
      fill(base + 2 * h * d + h, d * h);  // W_out; bias in between stays zero
    }
    fill(off_head_w_, V * d);
  }

  int vocab_size() const override { return config_.vocab_size; }
  int max_len() const override { return config_.max_len; }
  std::size_t param_count() const override { return params_.size(); }

  void get_params(std::span<double> out) const override {
    if (out.size() != params_.size()) throw ContractError("parameter buffer size mismatch");
    std::copy(params_.begin(), params_.end(), out.begin());
  }
  void set_params(std::span<const double> in) override {
    if (in.size() != params_.size()) throw ContractError("parameter buffer size mismatch");
    std::copy(in.begin(), in.end(), params_.begin());
  }

  std::string kind() const override { return "tiny-ar"; }
  std::string param_order_version() const override { return "tiny-ar-v1"; }

  nlohmann::json config_json() const override {
    return {{"vocab_size", config_.vocab_size}, {"max_len", config_.max_len},
            {"dim", config_.dim},               {"hidden", config_.hidden},
            {"layers", config_.layers},         {"init_scale", config_.init_scale},
            {"init_seed", config_.init_seed}};
  }

  std::unique_ptr<Policy> clone() const override {
    return std::make_unique<TinyAutoregressor>(*this);
  }

  void step_log_probs(std::span<const int> prompt, std::span<const int> prefix,
                      std::span<double> out) const override {
    check_tokens(prompt);
    check_tokens(prefix);
    check_lengths(prompt.size(), prefix.size() + 1);
    if (out.size() != static_cast<std::size_t>(config_.vocab_size))
      throw ContractError("log-prob buffer size mismatch");
    std::vector<int> body(prompt.begin(), prompt.end());
    body.insert(body.end(), prefix.begin(), prefix.end());
    Cache cache;
    forward(body, cache);
    logits_at(cache, cache.m - 1, out);
  }

  void traverse_response(const Trajectory& traj, const StepVisitor& visit,
                         std::span<double> grad) const override {
    check_tokens(traj.prompt);
    check_tokens(traj.response);
    check_lengths(traj.prompt.size(), traj.response.size());
    if (traj.response.empty()) throw ContractError("response must be non-empty");
    const bool with_grad = !grad.empty();
    if (with_grad && grad.size() != params_.size())
      throw ContractError("gradient buffer size mismatch");

    const std::size_t V = static_cast<std::size_t>(config_.vocab_size);
    const std::size_t T = traj.response.size();
    // Positions 0..|prompt|+T-1 cover every teacher-forced prediction; the
    // final response token is never fed back in.
    std::vector<int> body(traj.prompt.begin(), traj.prompt.end());
    body.insert(body.end(), traj.response.begin(), traj.response.end() - 1);
    Cache cache;
    forward(body, cache);

    std::vector<double> row(V);
    std::vector<double> g(with_grad ? V : 0);
    std::vector<double> dlogits(with_grad ? static_cast<std::size_t>(cache.m) * V : 0, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t j = traj.prompt.size() + t;  // row index in the cache
      logits_at(cache, static_cast<int>(j), row);
      if (!with_grad) {
        visit(static_cast<int>(t), row, {});
        continue;
      }
      std::fill(g.begin(), g.end(), 0.0);
      visit(static_cast<int>(t), row, g);
      detail::dlogprob_to_dlogit(row, g);
      for (std::size_t k = 0; k < V; ++k) dlogits[j * V + k] += g[k];
    }
    if (with_grad) backward(cache, dlogits, grad);
  }

 private:
  // Cached forward state; layer_in[l] is the input to layer l and
  // layer_in[layers] the final activations, each m x dim row-major.
  struct Cache {
    int m = 0;
    std::vector<int> z;  // -1 marks the BOS position
    std::vector<std::vector<double>> layer_in;
    std::vector<std::vector<double>> ctx;  // per layer, m x dim
    std::vector<std::vector<double>> act;  // per layer, m x hidden
  };

  const double* w(std::size_t off) const { return params_.data() + off; }

  std::size_t layer_off(std::size_t l) const { return off_layers_ + l * layer_stride_; }
  std::size_t w_in_off(std::size_t l) const { return layer_off(l); }
  std::size_t w_ctx_off(std::size_t l) const {
    const std::size_t hd = static_cast<std::size_t>(config_.hidden) * config_.dim;
    return layer_off(l) + hd;
  }
  std::size_t bias_off(std::size_t l) const {
    const std::size_t hd = static_cast<std::size_t>(config_.hidden) * config_.dim;
    return layer_off(l) + 2 * hd;
  }
  std::size_t w_out_off(std::size_t l) const {
    return bias_off(l) + static_cast<std::size_t>(config_.hidden);
  }

  // body = prompt + already-generated tokens; the BOS marker is prepended here.
  void forward(std::span<const int> body, Cache& cache) const {
    const std::size_t d = static_cast<std::size_t>(config_.dim);
    const std::size_t h = static_cast<std::size_t>(config_.hidden);
    const std::size_t L = static_cast<std::size_t>(config_.layers);
    const std::size_t m = body.size() + 1;
    cache.m = static_cast<int>(m);
    cache.z.assign(m, -1);
    for (std::size_t j = 1; j < m; ++j) cache.z[j] = body[j - 1];

    cache.layer_in.assign(L + 1, std::vector<double>(m * d, 0.0));
    cache.ctx.assign(L, std::vector<double>(m * d, 0.0));
    cache.act.assign(L, std::vector<double>(m * h, 0.0));

    std::vector<double>& emb = cache.layer_in[0];
    for (std::size_t j = 0; j < m; ++j) {
      const double* tok = cache.z[j] < 0
                              ? w(off_bos_)
                              : w(off_tok_ + static_cast<std::size_t>(cache.z[j]) * d);
      const double* pos = w(off_pos_ + j * d);
      for (std::size_t i = 0; i < d; ++i) emb[j * d + i] = tok[i] + pos[i];
    }

    std::vector<double> run(d);
    for (std::size_t l = 0; l < L; ++l) {
      const std::vector<double>& a = cache.layer_in[l];
      std::vector<double>& c = cache.ctx[l];
      std::vector<double>& u = cache.act[l];
      std::vector<double>& next = cache.layer_in[l + 1];
      const double* w_in = w(w_in_off(l));
      const double* w_ctx = w(w_ctx_off(l));
      const double* bias = w(bias_off(l));
      const double* w_out = w(w_out_off(l));

      std::fill(run.begin(), run.end(), 0.0);
      for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < d; ++i) {
          run[i] += a[j * d + i];
          c[j * d + i] = run[i] / static_cast<double>(j + 1);
        }
        for (std::size_t k = 0; k < h; ++k) {
          double s = bias[k];
          const double* wi = w_in + k * d;
          const double* wc = w_ctx + k * d;
          for (std::size_t i = 0; i < d; ++i)
            s += wi[i] * a[j * d + i] + wc[i] * c[j * d + i];
          u[j * h + k] = std::tanh(s);
        }
        for (std::size_t i = 0; i < d; ++i) {
          double s = a[j * d + i];
          const double* wo = w_out + i * h;
          for (std::size_t k = 0; k < h; ++k) s += wo[k] * u[j * h + k];
          next[j * d + i] = s;
        }
      }
    }
  }

  void logits_at(const Cache& cache, int j, std::span<double> out) const {
    const std::size_t V = static_cast<std::size_t>(config_.vocab_size);
    const std::size_t d = static_cast<std::size_t>(config_.dim);
    const double* a = cache.layer_in.back().data() + static_cast<std::size_t>(j) * d;
    const double* head = w(off_head_w_);
    const double* head_b = w(off_head_b_);
    for (std::size_t v = 0; v < V; ++v) {
      double s = head_b[v];
      const double* hw = head + v * d;
      for (std::size_t i = 0; i < d; ++i) s += hw[i] * a[i];
      out[v] = s;
    }
    detail::log_softmax(out);
  }

  // dlogits is m x vocab row-major; grad accumulates (+=) in parameter order.
  void backward(const Cache& cache, std::span<const double> dlogits,
                std::span<double> grad) const {
    const std::size_t V = static_cast<std::size_t>(config_.vocab_size);
    const std::size_t d = static_cast<std::size_t>(config_.dim);
    const std::size_t h = static_cast<std::size_t>(config_.hidden);
    const std::size_t L = static_cast<std::size_t>(config_.layers);
    const std::size_t m = static_cast<std::size_t>(cache.m);

    // Head.
    std::vector<double> da(m * d, 0.0);
    const double* head = w(off_head_w_);
    for (std::size_t j = 0; j < m; ++j) {
      const double* a = cache.layer_in.back().data() + j * d;
      for (std::size_t v = 0; v < V; ++v) {
        const double gv = dlogits[j * V + v];
        if (gv == 0.0) continue;
        grad[off_head_b_ + v] += gv;
        double* gw = grad.data() + off_head_w_ + v * d;
        const double* hw = head + v * d;
        for (std::size_t i = 0; i < d; ++i) {
          gw[i] += gv * a[i];
          da[j * d + i] += gv * hw[i];
        }
      }
    }

    // Layers in reverse. The cumulative-mean term sends gradient from every
    // position j to all positions s <= j, accumulated as a suffix sum.
    std::vector<double> dpre(m * h);
    std::vector<double> dc(m * d);
    std::vector<double> da_in(m * d);
    std::vector<double> suffix(d);
    for (std::size_t l = L; l-- > 0;) {
      const std::vector<double>& a = cache.layer_in[l];
      const std::vector<double>& c = cache.ctx[l];
      const std::vector<double>& u = cache.act[l];
      const double* w_in = w(w_in_off(l));
      const double* w_ctx = w(w_ctx_off(l));
      const double* w_out = w(w_out_off(l));
      double* g_w_in = grad.data() + w_in_off(l);
      double* g_w_ctx = grad.data() + w_ctx_off(l);
      double* g_bias = grad.data() + bias_off(l);
      double* g_w_out = grad.data() + w_out_off(l);

      std::fill(dc.begin(), dc.end(), 0.0);
      std::copy(da.begin(), da.end(), da_in.begin());  // residual path
      for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t k = 0; k < h; ++k) {
          double s = 0.0;
          for (std::size_t i = 0; i < d; ++i) s += w_out[i * h + k] * da[j * d + i];
          const double uj = u[j * h + k];
          dpre[j * h + k] = s * (1.0 - uj * uj);
        }
        for (std::size_t i = 0; i < d; ++i) {
          const double dai = da[j * d + i];
          double* go = g_w_out + i * h;
          for (std::size_t k = 0; k < h; ++k) go[k] += dai * u[j * h + k];
        }
        for (std::size_t k = 0; k < h; ++k) {
          const double gp = dpre[j * h + k];
          if (gp == 0.0) continue;
          g_bias[k] += gp;
          double* gi = g_w_in + k * d;
          double* gc = g_w_ctx + k * d;
          const double* wi = w_in + k * d;
          const double* wc = w_ctx + k * d;
          for (std::size_t i = 0; i < d; ++i) {
            gi[i] += gp * a[j * d + i];
            gc[i] += gp * c[j * d + i];
            da_in[j * d + i] += gp * wi[i];
            dc[j * d + i] += gp * wc[i];
          }
        }
      }
      std::fill(suffix.begin(), suffix.end(), 0.0);
      for (std::size_t j = m; j-- > 0;) {
        for (std::size_t i = 0; i < d; ++i) {
          suffix[i] += dc[j * d + i] / static_cast<double>(j + 1);
          da_in[j * d + i] += suffix[i];
        }
      }
      std::swap(da, da_in);
    }

    // Embeddings.
    for (std::size_t j = 0; j < m; ++j) {
      double* tok = cache.z[j] < 0
                        ? grad.data() + off_bos_
                        : grad.data() + off_tok_ + static_cast<std::size_t>(cache.z[j]) * d;
      double* pos = grad.data() + off_pos_ + j * d;
      for (std::size_t i = 0; i < d; ++i) {
        tok[i] += da[j * d + i];
        pos[i] += da[j * d + i];
      }
    }
  }

  TinyArConfig config_;
  std::size_t off_tok_ = 0, off_bos_ = 0, off_pos_ = 0, off_layers_ = 0;
  std::size_t layer_stride_ = 0, off_head_w_ = 0, off_head_b_ = 0;
  std::vector<double> params_;
};

}  // namespace ftlab
