#pragma once

// Training loop for the tiny policies. Everything is deterministic given
// (config, corpus, initial policy): the held-out split, batch order, and
// optimizer state derive from independent streams of the config seed, so a
// rerun reproduces the metrics stream bit for bit.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <ftlab/bounds.hpp>
#include <ftlab/objectives.hpp>
#include <ftlab/policy.hpp>

namespace ftlab {

enum class Schedule { constant, cosine };
enum class OptimizerKind { gd, adamw };

inline const char* to_string(Schedule s) {
  return s == Schedule::constant ? "constant" : "cosine";
}
inline const char* to_string(OptimizerKind o) { return o == OptimizerKind::gd ? "gd" : "adamw"; }

struct TrainConfig {
  Objective objective = Objective::sft;
  WeightLevel level = WeightLevel::token;  // dft/asft weighting; also drift-weight level
  double lambda = 0.0;
  KlDirection kl_direction = KlDirection::reverse;
  OptimizerKind optimizer = OptimizerKind::gd;
  double lr = 0.1;
  double warmup_ratio = 0.1;
  Schedule schedule = Schedule::cosine;
  int batch_size = 8;
  int epochs = 1;
  std::uint64_t seed = 0;
  int eval_every = 10;
  double eval_fraction = 0.1;  // held-out share of the positive records
  std::size_t enum_cap = kDefaultEnumCap;
  std::size_t mc_samples = 100000;  // c_ref fallback when the cap is exceeded
};

struct RunRecord {
  long step = 0;
  double loss = 0.0;
  double kl_from_base = 0.0;
  double var_p = 0.0;
  double ess = 0.0;
  double b_sft = 0.0;
  double b_dft = 0.0;
  double gap = 0.0;
  double eval_logprob = 0.0;
};

struct DivergenceInfo {
  long step = 0;
  std::string reason;
};

struct TrainResult {
  std::unique_ptr<Policy> policy;  // final parameters, or last finite state on divergence
  std::unique_ptr<Policy> anchor;  // frozen copy of the initial policy
  std::vector<RunRecord> records;
  std::optional<DivergenceInfo> divergence;
  double c_ref = 0.0;
  long total_steps = 0;
  std::size_t train_size = 0;
  std::size_t heldout_size = 0;
};

// Normalizes and validates; sft and dft take no KL term, so a stray lambda is
// coerced to zero rather than silently applied.
inline TrainConfig validate_train_config(const TrainConfig& config) {
  TrainConfig c = config;
  if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) throw ConfigError("lr must be finite and >= 0");
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda))
    throw ConfigError("lambda must be finite and >= 0");
  if (!(c.warmup_ratio >= 0.0 && c.warmup_ratio < 1.0))
    throw ConfigError("warmup_ratio must lie in [0, 1)");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (c.eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (!(c.eval_fraction >= 0.0 && c.eval_fraction < 1.0))
    throw ConfigError("eval_fraction must lie in [0, 1)");
  if (c.objective == Objective::sft || c.objective == Objective::dft) c.lambda = 0.0;
  return c;
}

// Learning rate for 1-based step: linear warmup to lr over
// floor(warmup_ratio * total) steps, then the schedule takes over; cosine
// reaches exactly zero at the final step.
inline double lr_at(const TrainConfig& config, long step, long total_steps) {
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (step < 1 || step > total_steps) throw ContractError("step outside [1, total_steps]");
  const long warmup = static_cast<long>(config.warmup_ratio * static_cast<double>(total_steps));
  if (warmup >= total_steps) throw ConfigError("warmup covers every step; nothing to decay");
  if (step <= warmup)
    return config.lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (config.schedule == Schedule::constant) return config.lr;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  const double pi = 3.14159265358979323846;
  return config.lr * 0.5 * (1.0 + std::cos(pi * progress));
}

namespace detail {

struct AdamState {
  std::vector<double> m, v;
  // Fixed constants: beta1 0.9, beta2 0.999, eps 1e-8, no weight decay.
  void step(std::span<double> params, std::span<const double> grad, double lr, long t) {
    if (m.empty()) {
      m.assign(params.size(), 0.0);
      v.assign(params.size(), 0.0);
    }
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
};

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline double mean_seq_logprob(const Policy& policy, std::span<const Trajectory> items) {
  double total = 0.0;
  for (const Trajectory& t : items) total += log_prob(policy, t).total;
  return total / static_cast<double>(items.size());
}

}  // namespace detail

inline TrainResult train(const TrainConfig& raw_config, const Corpus& corpus,
                         const Policy& init) {
  const TrainConfig config = validate_train_config(raw_config);
  const Corpus positives = filter_positive(corpus);
  if (positives.items.empty()) throw ContractError("training requires positive records");

  // Seeded held-out split; training preserves corpus order after the draw.
  std::vector<std::size_t> order(positives.items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  DeterministicRng split_rng(DeterministicRng::mix(config.seed, 1));
  split_rng.shuffle(order);
  const std::size_t held_n =
      static_cast<std::size_t>(config.eval_fraction * static_cast<double>(order.size()));
  std::vector<bool> held(positives.items.size(), false);
  for (std::size_t i = 0; i < held_n; ++i) held[order[i]] = true;
  std::vector<Trajectory> train_items, heldout_items;
  for (std::size_t i = 0; i < positives.items.size(); ++i)
    (held[i] ? heldout_items : train_items).push_back(positives.items[i]);
  if (train_items.empty()) throw ConfigError("eval_fraction leaves no training records");

  TrainResult result;
  result.anchor = clone_frozen(init);
  result.policy = init.clone();
  result.train_size = train_items.size();
  result.heldout_size = heldout_items.size();
  // The held-out slice falls back to the train slice when the corpus is too
  // small to spare records.
  const std::span<const Trajectory> eval_items =
      heldout_items.empty() ? std::span<const Trajectory>(train_items)
                            : std::span<const Trajectory>(heldout_items);

  Corpus train_corpus = positives;
  train_corpus.items = train_items;
  BoundOptions bopt;
  bopt.enum_cap = config.enum_cap;
  bopt.mc_samples = config.mc_samples;
  bopt.mc_seed = DeterministicRng::mix(config.seed, 3);
  result.c_ref = estimate_c_ref(*result.anchor, train_corpus, bopt).value;

  const long steps_per_epoch =
      static_cast<long>((train_items.size() + static_cast<std::size_t>(config.batch_size) - 1) /
                        static_cast<std::size_t>(config.batch_size));
  result.total_steps = steps_per_epoch * config.epochs;
  lr_at(config, 1, result.total_steps);  // validates warmup against total up front

  KlConfig kl;
  kl.direction = config.kl_direction;
  kl.lambda = config.lambda;
  kl.anchor = result.anchor.get();

  DeterministicRng batch_rng(DeterministicRng::mix(config.seed, 2));
  detail::AdamState adam;
  std::vector<double> params = params_of(*result.policy);
  std::vector<std::size_t> perm(train_items.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::vector<Trajectory> batch;

  auto record_at = [&](long step, double loss) {
    RunRecord rec;
    rec.step = step;
    rec.loss = loss;
    const DriftMetrics dm =
        drift_metrics(*result.policy, *result.anchor, train_items, config.level);
    rec.kl_from_base = dm.kl_from_base;
    rec.var_p = dm.var_p;
    rec.ess = dm.ess;
    std::vector<double> lps;
    lps.reserve(train_items.size());
    for (const Trajectory& t : train_items) lps.push_back(log_prob(*result.policy, t).total);
    const BoundStats bs = bound_stats(result.c_ref, lps);
    rec.b_sft = bs.b_sft;
    rec.b_dft = bs.b_dft;
    rec.gap = bs.gap;
    rec.eval_logprob = detail::mean_seq_logprob(*result.policy, eval_items);
    result.records.push_back(rec);
  };

  long step = 0;
  for (int epoch = 0; epoch < config.epochs && !result.divergence; ++epoch) {
    batch_rng.shuffle(perm);
    for (std::size_t start = 0; start < perm.size() && !result.divergence;
         start += static_cast<std::size_t>(config.batch_size)) {
      ++step;
      batch.clear();
      const std::size_t stop =
          std::min(perm.size(), start + static_cast<std::size_t>(config.batch_size));
      for (std::size_t i = start; i < stop; ++i) batch.push_back(train_items[perm[i]]);

      LossReport rep;
      switch (config.objective) {
        case Objective::sft: rep = sft_loss(*result.policy, batch); break;
        case Objective::dft: rep = dft_loss(*result.policy, batch, config.level); break;
        case Objective::asft: rep = asft_loss(*result.policy, batch, config.level, kl); break;
        case Objective::sft_kl: rep = sft_kl_loss(*result.policy, batch, kl); break;
      }
      if (!std::isfinite(rep.loss) || !detail::all_finite(rep.grad)) {
        // Parameters have not been touched this step; they are the last
        // finite state and stay in place.
        result.divergence = DivergenceInfo{step, "non-finite loss or gradient at step " +
                                                     std::to_string(step)};
        break;
      }

      const double lr = lr_at(config, step, result.total_steps);
      std::vector<double> prev = params;
      if (config.optimizer == OptimizerKind::gd) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * rep.grad[i];
      } else {
        adam.step(params, rep.grad, lr, step);
      }
      if (!detail::all_finite(params)) {
        params = prev;  // roll back to the last finite parameters
        result.divergence =
            DivergenceInfo{step, "non-finite parameters after update at step " +
                                     std::to_string(step)};
        break;
      }
      result.policy->set_params(params);

      if (step % config.eval_every == 0 || step == result.total_steps)
        record_at(step, rep.loss);
    }
  }
  if (result.divergence && (result.records.empty() || result.records.back().step != step))
    record_at(step, std::numeric_limits<double>::quiet_NaN());
  return result;
}

// Metrics serialization: one row per record, doubles printed with
// std::to_chars shortest form so parsing returns the identical bits.
inline constexpr const char* kMetricsHeader =
    "step,loss,kl_from_base,var_p,ess,b_sft,b_dft,gap,eval_logprob";

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

}  // namespace detail

inline std::string metrics_csv(std::span<const RunRecord> records) {
  std::string out = kMetricsHeader;
  out += '\n';
  for (const RunRecord& r : records) {
    out += std::to_string(r.step);
    for (double v : {r.loss, r.kl_from_base, r.var_p, r.ess, r.b_sft, r.b_dft, r.gap,
                     r.eval_logprob}) {
      out += ',';
      detail::append_double(out, v);
    }
    out += '\n';
  }
  return out;
}

inline std::vector<RunRecord> parse_metrics_csv(const std::string& text,
                                                const std::string& source) {
  std::vector<RunRecord> records;
  std::size_t pos = 0;
  long line_no = 0;
  auto next_line = [&](std::string& line) {
    if (pos >= text.size()) return false;
    const std::size_t nl = text.find('\n', pos);
    line = text.substr(pos, nl == std::string::npos ? nl : nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    ++line_no;
    return true;
  };
  std::string line;
  if (!next_line(line) || line != kMetricsHeader)
    throw ParseError(source, 1, "expected metrics header \"" + std::string(kMetricsHeader) + "\"");
  while (next_line(line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string::npos ? comma : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != 9)
      throw ParseError(source, line_no,
                       "expected 9 fields, got " + std::to_string(fields.size()));
    RunRecord r;
    const auto step_res =
        std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), r.step);
    if (step_res.ec != std::errc{} || step_res.ptr != fields[0].data() + fields[0].size())
      throw ParseError(source, line_no, "bad step value \"" + fields[0] + "\"");
    double* slots[] = {&r.loss, &r.kl_from_base, &r.var_p, &r.ess,
                       &r.b_sft, &r.b_dft, &r.gap, &r.eval_logprob};
    for (std::size_t f = 0; f < 8; ++f) {
      const std::string& s = fields[f + 1];
      const auto res = std::from_chars(s.data(), s.data() + s.size(), *slots[f]);
      if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw ParseError(source, line_no, "bad numeric value \"" + s + "\"");
    }
    records.push_back(r);
  }
  return records;
}

// Aligned comparison runs: identical data path and schedule, differing only
// in objective, lambda, KL direction, or weight level.
struct DriftRun {
  std::string label;
  TrainConfig config;
  TrainResult result;
};

struct DriftReport {
  std::vector<DriftRun> runs;
};

inline std::string drift_label(const TrainConfig& c) {
  std::string label = to_string(c.objective);
  if (c.objective == Objective::asft || c.objective == Objective::sft_kl) {
    std::string lam = std::to_string(c.lambda);
    while (lam.size() > 1 && lam.back() == '0') lam.pop_back();
    if (!lam.empty() && lam.back() == '.') lam.pop_back();
    label += "(lambda=" + lam + ")";
  }
  return label;
}

inline DriftReport drift_experiment(const Corpus& corpus, const Policy& init,
                                    std::span<const TrainConfig> configs) {
  if (configs.size() < 2) throw ConfigError("a drift experiment compares at least two runs");
  for (std::size_t i = 1; i < configs.size(); ++i) {
    const TrainConfig& a = configs[0];
    const TrainConfig& b = configs[i];
    if (a.seed != b.seed || a.lr != b.lr || a.warmup_ratio != b.warmup_ratio ||
        a.schedule != b.schedule || a.batch_size != b.batch_size || a.epochs != b.epochs ||
        a.eval_every != b.eval_every || a.eval_fraction != b.eval_fraction ||
        a.optimizer != b.optimizer)
      throw ConfigError("drift runs must share seed, schedule and data settings; config " +
                        std::to_string(i) + " diverges");
  }
  DriftReport report;
  for (const TrainConfig& c : configs) {
    DriftRun run;
    run.label = drift_label(c);
    run.config = c;
    run.result = train(c, corpus, init);
    report.runs.push_back(std::move(run));
  }
  return report;
}

}  // namespace ftlab
