#pragma once

// Closed-form analysis on enumerable trajectory spaces. With binary rewards
// the RL objective J = E_{x~rho, y~pi}[R] is the policy mass on the positive
// set, computable exactly at desk scale. The weighted losses correspond to
// lower bounds on J:
//
//   b_sft = c_ref * E[log X]              X = pi(y|x) over positive records
//   b_dft = c_ref * E[X log X] / E[X]     (stop-gradient weighting)
//
// and their gap obeys  b_dft - b_sft = (c_ref / E[X]) * Cov(X, log X),
// non-negative because X and log X are comonotone, zero iff X is constant.
// These are the optimization surrogates (additive constants dropped); the
// report also carries the constants-restored bounds b_sft_full / b_dft_full,
// each individually a true lower bound on J.
//
// Conventions, fixed here for every op in this header: rho is uniform over
// the corpus's distinct prompts in first-appearance order; record-level
// expectations are uniform over positive records (duplicates keep their
// multiplicity); trajectory-set sums (J, c_ref) deduplicate records; within
// each prompt all response lengths must agree so responses live in one
// enumerable space.

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <ftlab/objectives.hpp>
#include <ftlab/policy.hpp>

namespace ftlab {

struct BoundOptions {
  std::size_t enum_cap = kDefaultEnumCap;
  std::size_t mc_samples = 100000;  // c_ref fallback budget; 0 is a config error
  std::uint64_t mc_seed = 0;
};

struct BoundReport {
  double j_exact = 0.0;
  double b_sft = 0.0;
  double b_dft = 0.0;
  double gap = 0.0;  // b_dft - b_sft
  double c_ref = 0.0;
  double e_x = 0.0;
  double e_logx = 0.0;
  double e_xlogx = 0.0;
  double cov_x_logx = 0.0;
  double var_x = 0.0;
  double b_sft_full = 0.0;  // c_ref * (1 + E_ref[log pi - log ref])
  double b_dft_full = 0.0;  // 1 + log c_ref + log E_ref[X] - E_ref[X log ref]/E_ref[X]
};

struct BoundStats {
  double e_x = 0.0, e_logx = 0.0, e_xlogx = 0.0;
  double cov_x_logx = 0.0, var_x = 0.0;
  double b_sft = 0.0, b_dft = 0.0, gap = 0.0;
};

struct CRefEstimate {
  double value = 0.0;
  double std_error = 0.0;
  bool exact = false;
};

struct IsEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

struct DriftMetrics {
  double kl_from_base = 0.0;
  double var_p = 0.0;
  double ess = 0.0;
  double min_weight = 0.0;
  double max_weight = 0.0;
};

struct LogInequality {
  double lhs = 0.0;    // u
  double rhs = 0.0;    // 1 + log u
  double slack = 0.0;  // u - 1 - log u, >= 0, zero iff u == 1
};

// u >= 1 + log u on u > 0. The drift analysis rests on this: it turns
// importance ratios into log-likelihood bounds.
inline LogInequality log_inequality_check(double u) {
  if (!(u > 0.0)) throw DomainError("log inequality requires u > 0");
  LogInequality r;
  r.lhs = u;
  r.rhs = 1.0 + std::log(u);
  r.slack = r.lhs - r.rhs;
  return r;
}

// Surrogate bound statistics from the positive records' sequence
// log-probabilities. The exp floor is applied to log X as well so that
// X == exp(log X) holds exactly even for clamped records. Moments use the
// two-pass form, which keeps Cov and Var non-cancelling and Var >= 0.
inline BoundStats bound_stats(double c_ref, std::span<const double> positive_log_probs) {
  if (positive_log_probs.empty())
    throw ContractError("bound statistics require at least one positive record");
  const std::size_t n = positive_log_probs.size();
  std::vector<double> x(n), logx(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = clamped_prob(positive_log_probs[i]);
    logx[i] = std::max(positive_log_probs[i], kLogProbFloor);
  }
  BoundStats s;
  for (std::size_t i = 0; i < n; ++i) {
    s.e_x += x[i];
    s.e_logx += logx[i];
    s.e_xlogx += x[i] * logx[i];
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  s.e_x *= inv_n;
  s.e_logx *= inv_n;
  s.e_xlogx *= inv_n;
  for (std::size_t i = 0; i < n; ++i) {
    s.cov_x_logx += (x[i] - s.e_x) * (logx[i] - s.e_logx);
    s.var_x += (x[i] - s.e_x) * (x[i] - s.e_x);
  }
  s.cov_x_logx *= inv_n;
  s.var_x *= inv_n;
  s.b_sft = c_ref * s.e_logx;
  s.b_dft = c_ref * s.e_xlogx / s.e_x;
  s.gap = s.b_dft - s.b_sft;
  return s;
}

inline double bound_sft(double c_ref, std::span<const double> positive_log_probs) {
  return bound_stats(c_ref, positive_log_probs).b_sft;
}

inline double bound_dft(double c_ref, std::span<const double> positive_log_probs) {
  return bound_stats(c_ref, positive_log_probs).b_dft;
}

namespace detail {

// Positive-set geometry shared by the closed-form ops.
struct PositiveSets {
  std::vector<std::vector<int>> prompts;  // distinct, first-appearance order, full corpus
  std::vector<int> len_of_prompt;         // shared response length per prompt
  std::vector<Trajectory> records;        // positive records, corpus order
  std::vector<std::size_t> prompt_of_record;
  // Deduplicated positive trajectories with multiplicities.
  std::vector<Trajectory> unique;
  std::vector<std::size_t> unique_prompt;
  std::vector<std::size_t> unique_count;
};

inline PositiveSets analyze_corpus(const Corpus& corpus) {
  PositiveSets ps;
  std::map<std::vector<int>, std::size_t> prompt_ids;
  for (const Trajectory& t : corpus.items) {
    auto [it, inserted] = prompt_ids.try_emplace(t.prompt, ps.prompts.size());
    if (inserted) {
      ps.prompts.push_back(t.prompt);
      ps.len_of_prompt.push_back(static_cast<int>(t.response.size()));
    } else if (ps.len_of_prompt[it->second] != static_cast<int>(t.response.size())) {
      throw ContractError(
          "closed-form ops require one response length per prompt; prompt with length " +
          std::to_string(ps.len_of_prompt[it->second]) + " also has a length-" +
          std::to_string(t.response.size()) + " response");
    }
  }
  std::map<std::pair<std::size_t, std::vector<int>>, std::size_t> seen;
  for (const Trajectory& t : corpus.items) {
    if (t.reward != 1) continue;
    const std::size_t pid = prompt_ids.at(t.prompt);
    ps.records.push_back(t);
    ps.prompt_of_record.push_back(pid);
    auto [it, inserted] = seen.try_emplace({pid, t.response}, ps.unique.size());
    if (inserted) {
      ps.unique.push_back(t);
      ps.unique_prompt.push_back(pid);
      ps.unique_count.push_back(1);
    } else {
      ++ps.unique_count[it->second];
    }
  }
  if (ps.records.empty()) throw ContractError("corpus has no positive records");
  return ps;
}

inline void check_enumerable(int vocab, int len, std::size_t cap) {
  double space = 1.0;
  for (int i = 0; i < len; ++i) {
    space *= vocab;
    if (space > static_cast<double>(cap))
      throw EnumerationCapError("response space " + std::to_string(vocab) + "^" +
                                std::to_string(len) + " exceeds enumeration cap " +
                                std::to_string(cap) +
                                "; use the sampling estimator instead");
  }
}

}  // namespace detail

// J(theta): expected reward with prompts from rho and responses from the
// policy. Rewards vanish off the positive set, so the enumerable-space sum
// collapses to the policy's mass on the deduplicated positive trajectories.
inline double exact_rl_objective(const Policy& policy, const Corpus& corpus,
                                 std::size_t enum_cap = kDefaultEnumCap) {
  const detail::PositiveSets ps = detail::analyze_corpus(corpus);
  for (std::size_t p = 0; p < ps.prompts.size(); ++p)
    detail::check_enumerable(policy.vocab_size(), ps.len_of_prompt[p], enum_cap);
  const double rho = 1.0 / static_cast<double>(ps.prompts.size());
  double j = 0.0;
  for (std::size_t u = 0; u < ps.unique.size(); ++u)
    j += rho * clamped_prob(log_prob(policy, ps.unique[u]).total);
  return j;
}

// c_ref = P_ref(tau in D+): exact by direct summation when every prompt's
// response space fits the cap (std_error 0), otherwise Monte Carlo with the
// configured budget.
inline CRefEstimate estimate_c_ref(const Policy& ref, const Corpus& corpus,
                                   const BoundOptions& opt = {}) {
  const detail::PositiveSets ps = detail::analyze_corpus(corpus);
  bool enumerable = true;
  for (std::size_t p = 0; p < ps.prompts.size() && enumerable; ++p) {
    try {
      detail::check_enumerable(ref.vocab_size(), ps.len_of_prompt[p], opt.enum_cap);
    } catch (const EnumerationCapError&) {
      enumerable = false;
    }
  }
  CRefEstimate est;
  if (enumerable) {
    const double rho = 1.0 / static_cast<double>(ps.prompts.size());
    for (std::size_t u = 0; u < ps.unique.size(); ++u)
      est.value += rho * clamped_prob(log_prob(ref, ps.unique[u]).total);
    est.exact = true;
    return est;
  }
  if (opt.mc_samples == 0)
    throw ConfigError("response space exceeds the enumeration cap and mc_samples is 0");
  // Bernoulli mean of 1[sampled trajectory lands in D+].
  std::map<std::pair<std::size_t, std::vector<int>>, bool> positive;
  for (std::size_t u = 0; u < ps.unique.size(); ++u)
    positive[{ps.unique_prompt[u], ps.unique[u].response}] = true;
  DeterministicRng rng(opt.mc_seed);
  double hits = 0.0;
  for (std::size_t s = 0; s < opt.mc_samples; ++s) {
    const std::size_t p = static_cast<std::size_t>(rng.below(ps.prompts.size()));
    const std::vector<int> y = sample_response(ref, ps.prompts[p], ps.len_of_prompt[p], rng);
    if (positive.count({p, y})) hits += 1.0;
  }
  const double n = static_cast<double>(opt.mc_samples);
  est.value = hits / n;
  est.std_error = std::sqrt(est.value * (1.0 - est.value) / n);
  est.exact = false;
  return est;
}

namespace detail {

inline void check_report_invariants(const BoundReport& r) {
  if (!(r.j_exact >= r.b_dft - 1e-9))
    throw IdentityViolation("j_exact fell below b_dft", r.b_dft - r.j_exact);
  if (!(r.b_dft >= r.b_sft - 1e-12))
    throw IdentityViolation("b_dft fell below b_sft", r.b_sft - r.b_dft);
  const double residual = r.gap - (r.c_ref / r.e_x) * r.cov_x_logx;
  if (!(std::abs(residual) < 1e-10))
    throw IdentityViolation("gap does not match (c_ref/E[X]) * Cov(X, log X)", residual);
  if (r.var_x <= 1e-12 && !(std::abs(r.gap) <= 1e-10))
    throw IdentityViolation("gap must vanish when X is constant", r.gap);
}

}  // namespace detail

// Tag selecting the empirical reference: ref-conditional-on-D+ taken to be
// the empirical distribution of positive records, which makes c_ref exactly 1.
struct EmpiricalRef {};

namespace detail {

// ref_joint_log[u]: log of the reference trajectory measure on unique record
// u (prompt factor included). c_ref = sum of its exp over unique records.
inline BoundReport build_report(const Policy& policy, const Corpus& corpus,
                                std::span<const double> ref_joint_log, double c_ref,
                                std::size_t enum_cap) {
  const PositiveSets ps = analyze_corpus(corpus);
  BoundReport r;
  r.c_ref = c_ref;
  r.j_exact = exact_rl_objective(policy, corpus, enum_cap);

  std::vector<double> record_lps;
  record_lps.reserve(ps.records.size());
  for (const Trajectory& t : ps.records) record_lps.push_back(log_prob(policy, t).total);
  const BoundStats s = bound_stats(c_ref, record_lps);
  r.b_sft = s.b_sft;
  r.b_dft = s.b_dft;
  r.gap = s.gap;
  r.e_x = s.e_x;
  r.e_logx = s.e_logx;
  r.e_xlogx = s.e_xlogx;
  r.cov_x_logx = s.cov_x_logx;
  r.var_x = s.var_x;

  // Constants-restored bounds over the deduplicated set, weighted by the
  // reference conditional on D+. The prompt factor log rho cancels between
  // log pi_theta(tau) and the reference measure in both derivations.
  const double rho = 1.0 / static_cast<double>(ps.prompts.size());
  double e_gap = 0.0;     // E_ref[log pi - log ref_joint + log rho]
  double e_x_ref = 0.0;   // E_ref[X]
  double e_xref = 0.0;    // E_ref[X * log ref_cond]
  for (std::size_t u = 0; u < ps.unique.size(); ++u) {
    const double w = std::exp(ref_joint_log[u]) / c_ref;
    const double lp = std::max(log_prob(policy, ps.unique[u]).total, kLogProbFloor);
    const double log_ref_cond = ref_joint_log[u] - std::log(rho);
    e_gap += w * (lp - log_ref_cond);
    e_x_ref += w * std::exp(lp);
    e_xref += w * std::exp(lp) * log_ref_cond;
  }
  r.b_sft_full = c_ref * (1.0 + e_gap);
  r.b_dft_full = 1.0 + std::log(c_ref) + std::log(e_x_ref) - e_xref / e_x_ref;

  check_report_invariants(r);
  return r;
}

}  // namespace detail

inline BoundReport bound_report(const Policy& policy, const Policy& ref, const Corpus& corpus,
                                const BoundOptions& opt = {}) {
  if (policy.vocab_size() != ref.vocab_size())
    throw ContractError("bound report requires policy and reference to share a vocabulary");
  const detail::PositiveSets ps = detail::analyze_corpus(corpus);
  const double rho = 1.0 / static_cast<double>(ps.prompts.size());
  std::vector<double> ref_joint_log(ps.unique.size());
  double c_ref = 0.0;
  for (std::size_t u = 0; u < ps.unique.size(); ++u) {
    ref_joint_log[u] =
        std::log(rho) + std::max(log_prob(ref, ps.unique[u]).total, kLogProbFloor);
    c_ref += std::exp(ref_joint_log[u]);
  }
  return detail::build_report(policy, corpus, ref_joint_log, c_ref, opt.enum_cap);
}

inline BoundReport bound_report(const Policy& policy, EmpiricalRef, const Corpus& corpus,
                                const BoundOptions& opt = {}) {
  const detail::PositiveSets ps = detail::analyze_corpus(corpus);
  const double n = static_cast<double>(ps.records.size());
  std::vector<double> ref_joint_log(ps.unique.size());
  for (std::size_t u = 0; u < ps.unique.size(); ++u)
    ref_joint_log[u] = std::log(static_cast<double>(ps.unique_count[u]) / n);
  // The empirical measure puts all its mass on D+, so c_ref is exactly 1.
  return detail::build_report(policy, corpus, ref_joint_log, 1.0, opt.enum_cap);
}

// Policy-movement diagnostics against the frozen base. Weights are the
// objective's multipliers at the given level; ess = (sum w)^2 / sum w^2 is
// the usual importance-sampling effective sample size in [1, n], equal to n
// exactly when the weights are equal (short-circuited to keep that exact).
inline DriftMetrics drift_metrics(const Policy& policy, const Policy& base,
                                  std::span<const Trajectory> batch, WeightLevel level) {
  if (batch.empty()) throw ContractError("drift metrics require a non-empty batch");
  std::vector<double> weights;
  for (const Trajectory& t : batch) {
    if (level == WeightLevel::sequence) {
      weights.push_back(clamped_prob(log_prob(policy, t).total));
    } else {
      const LogProb lp = log_prob(policy, t);
      for (double v : lp.per_token) weights.push_back(std::exp(v));
    }
  }
  DriftMetrics m;
  const std::vector<KlState> states = collect_states(batch);
  m.kl_from_base = kl_divergence(policy, base, states, KlDirection::reverse);
  double sum = 0.0, sum_sq = 0.0;
  m.min_weight = weights[0];
  m.max_weight = weights[0];
  for (double w : weights) {
    sum += w;
    sum_sq += w * w;
    m.min_weight = std::min(m.min_weight, w);
    m.max_weight = std::max(m.max_weight, w);
  }
  const double n = static_cast<double>(weights.size());
  const double mean = sum / n;
  for (double w : weights) m.var_p += (w - mean) * (w - mean);
  m.var_p /= n;
  m.ess = m.min_weight == m.max_weight ? n : sum * sum / sum_sq;
  return m;
}

// Self-normalized importance-sampling estimate of J using the reference as
// proposal: sum(w R) / sum(w) with w = pi_theta / pi_ref, computed with the
// max log-weight factored out so the normalization cannot overflow. The
// standard error is the delta-method one: sqrt(sum w_hat^2 (R - mu)^2) with
// w_hat the normalized weights.
inline IsEstimate is_estimate_j(const Policy& policy, const Policy& ref, const Corpus& corpus,
                                std::size_t samples, std::uint64_t seed) {
  if (samples == 0) throw ConfigError("is_estimate_j requires samples > 0");
  if (policy.vocab_size() != ref.vocab_size())
    throw ContractError("importance sampling requires a shared vocabulary");
  const detail::PositiveSets ps = detail::analyze_corpus(corpus);
  std::map<std::pair<std::size_t, std::vector<int>>, bool> positive;
  for (std::size_t u = 0; u < ps.unique.size(); ++u)
    positive[{ps.unique_prompt[u], ps.unique[u].response}] = true;

  DeterministicRng rng(seed);
  std::vector<double> log_w(samples);
  std::vector<double> reward(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t p = static_cast<std::size_t>(rng.below(ps.prompts.size()));
    Trajectory t;
    t.prompt = ps.prompts[p];
    t.response = sample_response(ref, ps.prompts[p], ps.len_of_prompt[p], rng);
    const double lp_policy = std::max(log_prob(policy, t).total, kLogProbFloor);
    const double lp_ref = std::max(log_prob(ref, t).total, kLogProbFloor);
    log_w[s] = lp_policy - lp_ref;
    reward[s] = positive.count({p, t.response}) ? 1.0 : 0.0;
  }
  double max_lw = log_w[0];
  for (double v : log_w) max_lw = std::max(max_lw, v);
  double sum_w = 0.0, sum_wr = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const double w = std::exp(log_w[s] - max_lw);
    sum_w += w;
    sum_wr += w * reward[s];
  }
  IsEstimate est;
  est.samples = samples;
  est.value = sum_wr / sum_w;
  double se_sq = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const double w_hat = std::exp(log_w[s] - max_lw) / sum_w;
    se_sq += w_hat * w_hat * (reward[s] - est.value) * (reward[s] - est.value);
  }
  est.std_error = std::sqrt(se_sq);
  return est;
}

// Property check behind the tightness theorem: on many random instances the
// gap must equal (c_ref / E[X]) * Cov(X, log X) to within 1e-10, with the
// ordering and constant-X corollaries intact. Returns the worst residual.
inline double verify_cov_identity(std::size_t instances, std::uint64_t seed) {
  if (instances == 0) throw ConfigError("verify_cov_identity requires instances > 0");
  DeterministicRng rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    // Sizes 2..64, probabilities uniform in (0, 1]. Every seventh instance is
    // constant to exercise the equality corollary.
    const std::size_t n = 2 + static_cast<std::size_t>(rng.below(63));
    const double c_ref = 0.05 + 0.95 * rng.uniform();
    std::vector<double> lps(n);
    if (i % 7 == 3) {
      const double v = std::log(1.0 - rng.uniform());
      std::fill(lps.begin(), lps.end(), v);
    } else {
      for (double& v : lps) v = std::log(1.0 - rng.uniform());
    }
    const BoundStats s = bound_stats(c_ref, lps);
    const double residual = std::abs(s.gap - (c_ref / s.e_x) * s.cov_x_logx);
    worst = std::max(worst, residual);
    if (!(residual < 1e-10))
      throw IdentityViolation("covariance identity residual too large", residual);
    if (!(s.gap >= -1e-12))
      throw IdentityViolation("negative tightness gap", s.gap);
    if (!(s.b_dft >= s.b_sft - 1e-12))
      throw IdentityViolation("b_dft fell below b_sft", s.b_sft - s.b_dft);
    if (i % 7 == 3 && !(std::abs(s.gap) <= 1e-10))
      throw IdentityViolation("gap must vanish when X is constant", s.gap);
  }
  return worst;
}

}  // namespace ftlab
