#pragma once

// Command implementations behind the CLI binary. Each command takes a parsed
// config file plus the few flag overrides (output path, seed), does its work,
// and returns a process exit code, so the whole surface is testable in
// process without spawning.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include <ftlab/bounds.hpp>
#include <ftlab/checkpoint.hpp>
#include <ftlab/config.hpp>
#include <ftlab/corpus.hpp>
#include <ftlab/gradcheck.hpp>
#include <ftlab/trainer.hpp>

namespace ftlab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;      // unexpected failure
inline constexpr int kExitConfig = 2;     // bad or contradictory configuration
inline constexpr int kExitData = 3;       // bad input data or violated precondition
inline constexpr int kExitDiverged = 4;   // training hit non-finite values
inline constexpr int kExitIdentity = 5;   // closed-form identity failed
inline constexpr int kExitTolerance = 6;  // gradient check breached tolerance

struct CliOverrides {
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
};

namespace detail {

inline std::string fmt(double v) {
  std::string s;
  append_double(s, v);
  return s;
}

inline int run_command(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IdentityViolation& e) {
    std::cerr << "identity violation: " << e.what() << " (residual " << fmt(e.residual)
              << ")\n";
    return kExitIdentity;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ContractError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
}

inline Corpus load_corpus_from_config(const KeyValueConfig& cfg) {
  LoadOptions opt;
  const std::string kind = cfg.get_string("corpus.tokenizer", "char");
  if (kind == "char")
    opt.kind = TokenizerKind::chars;
  else if (kind == "whitespace")
    opt.kind = TokenizerKind::whitespace;
  else
    throw ConfigError("corpus.tokenizer must be char or whitespace, got \"" + kind + "\"");
  opt.alphabet_path = cfg.get_string("corpus.alphabet", "");
  opt.sidecar_path = cfg.get_string("corpus.vocab_sidecar", "");
  return load_corpus(cfg.get_string("corpus.path"), opt);
}

inline std::unique_ptr<Policy> build_policy_from_config(const KeyValueConfig& cfg,
                                                        int vocab_size) {
  if (cfg.has("policy.init")) {
    for (const char* key : {"policy.order", "policy.max_len", "policy.dim", "policy.hidden",
                            "policy.layers", "policy.init_scale", "policy.init_seed"})
      if (cfg.has(key))
        throw ConfigError(std::string("policy.init supersedes \"") + key + "\"");
    std::unique_ptr<Policy> policy = load_policy(cfg.get_string("policy.init"));
    if (cfg.has("policy.type") && cfg.get_string("policy.type") != policy->kind())
      throw ConfigError("policy.type \"" + cfg.get_string("policy.type") +
                        "\" does not match checkpoint kind \"" + policy->kind() + "\"");
    if (policy->vocab_size() != vocab_size)
      throw DataError("checkpoint vocabulary size " + std::to_string(policy->vocab_size()) +
                      " does not match corpus vocabulary size " + std::to_string(vocab_size));
    return policy;
  }
  const std::string type = cfg.get_string("policy.type");
  if (type == "tabular") {
    for (const char* key : {"policy.dim", "policy.hidden", "policy.layers"})
      if (cfg.has(key)) throw ConfigError(std::string("\"") + key + "\" applies only to tiny-ar");
    TabularConfig c;
    c.vocab_size = vocab_size;
    c.order = static_cast<int>(cfg.get_int("policy.order", 2));
    c.max_len = static_cast<int>(cfg.get_int("policy.max_len", 32));
    const double scale = cfg.get_double("policy.init_scale", 0.0);
    const std::uint64_t seed = cfg.get_u64("policy.init_seed", 1);
    if (scale == 0.0) return std::make_unique<TabularSoftmaxPolicy>(c);
    return TabularSoftmaxPolicy::random(c, scale, seed).clone();
  }
  if (type == "tiny-ar") {
    if (cfg.has("policy.order")) throw ConfigError("\"policy.order\" applies only to tabular");
    TinyArConfig c;
    c.vocab_size = vocab_size;
    c.max_len = static_cast<int>(cfg.get_int("policy.max_len", 32));
    c.dim = static_cast<int>(cfg.get_int("policy.dim", 32));
    c.hidden = static_cast<int>(cfg.get_int("policy.hidden", 64));
    c.layers = static_cast<int>(cfg.get_int("policy.layers", 2));
    c.init_scale = cfg.get_double("policy.init_scale", 0.1);
    c.init_seed = cfg.get_u64("policy.init_seed", 1);
    return std::make_unique<TinyAutoregressor>(c);
  }
  throw ConfigError("policy.type must be tabular or tiny-ar, got \"" + type + "\"");
}

inline Objective parse_objective(const std::string& v) {
  if (v == "sft") return Objective::sft;
  if (v == "dft") return Objective::dft;
  if (v == "asft") return Objective::asft;
  if (v == "sft_kl") return Objective::sft_kl;
  throw ConfigError("train.objective must be sft, dft, asft or sft_kl, got \"" + v + "\"");
}
inline WeightLevel parse_level(const std::string& v) {
  if (v == "token") return WeightLevel::token;
  if (v == "sequence") return WeightLevel::sequence;
  throw ConfigError("level must be token or sequence, got \"" + v + "\"");
}
inline KlDirection parse_direction(const std::string& v) {
  if (v == "reverse") return KlDirection::reverse;
  if (v == "forward") return KlDirection::forward;
  throw ConfigError("kl_direction must be reverse or forward, got \"" + v + "\"");
}
inline Schedule parse_schedule(const std::string& v) {
  if (v == "constant") return Schedule::constant;
  if (v == "cosine") return Schedule::cosine;
  throw ConfigError("train.schedule must be constant or cosine, got \"" + v + "\"");
}
inline OptimizerKind parse_optimizer(const std::string& v) {
  if (v == "gd") return OptimizerKind::gd;
  if (v == "adamw") return OptimizerKind::adamw;
  throw ConfigError("train.optimizer must be gd or adamw, got \"" + v + "\"");
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

inline constexpr const char* kCorpusKeys[] = {"corpus.path", "corpus.tokenizer",
                                              "corpus.alphabet", "corpus.vocab_sidecar"};
inline constexpr const char* kPolicyKeys[] = {
    "policy.init",   "policy.type",   "policy.order",      "policy.max_len", "policy.dim",
    "policy.hidden", "policy.layers", "policy.init_scale", "policy.init_seed"};

inline TrainConfig train_config_from(const KeyValueConfig& cfg,
                                     const CliOverrides& overrides = {}) {
  TrainConfig tc;
  tc.objective = parse_objective(cfg.get_string("train.objective"));
  tc.level = parse_level(cfg.get_string("train.level", "token"));
  tc.lambda = cfg.get_double("train.lambda", 0.0);
  tc.kl_direction = parse_direction(cfg.get_string("train.kl_direction", "reverse"));
  tc.optimizer = parse_optimizer(cfg.get_string("train.optimizer", "gd"));
  tc.lr = cfg.get_double("train.lr", 0.1);
  tc.warmup_ratio = cfg.get_double("train.warmup_ratio", 0.1);
  tc.schedule = parse_schedule(cfg.get_string("train.schedule", "cosine"));
  tc.batch_size = static_cast<int>(cfg.get_int("train.batch_size", 8));
  tc.epochs = static_cast<int>(cfg.get_int("train.epochs", 1));
  tc.seed = overrides.seed.value_or(cfg.get_u64("train.seed", 0));
  tc.eval_every = static_cast<int>(cfg.get_int("train.eval_every", 10));
  tc.eval_fraction = cfg.get_double("train.eval_fraction", 0.1);
  tc.enum_cap = static_cast<std::size_t>(cfg.get_u64("run.enum_cap", kDefaultEnumCap));
  tc.mc_samples = static_cast<std::size_t>(cfg.get_u64("run.mc_samples", 100000));
  return tc;
}

}  // namespace detail

inline int cmd_train(const std::string& config_path, const CliOverrides& overrides = {}) {
  return detail::run_command([&]() -> int {
    const KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
    std::vector<const char*> allowed = {
        "train.objective",  "train.level",      "train.lambda",     "train.kl_direction",
        "train.optimizer",  "train.lr",         "train.warmup_ratio", "train.schedule",
        "train.batch_size", "train.epochs",     "train.seed",       "train.eval_every",
        "train.eval_fraction", "run.out_dir",   "run.enum_cap",     "run.mc_samples"};
    for (const char* k : detail::kCorpusKeys) allowed.push_back(k);
    for (const char* k : detail::kPolicyKeys) allowed.push_back(k);
    cfg.check_allowed(allowed);

    const Corpus corpus = detail::load_corpus_from_config(cfg);
    const std::unique_ptr<Policy> init = detail::build_policy_from_config(cfg, corpus.vocab_size);

    const TrainConfig tc = detail::train_config_from(cfg, overrides);
    const TrainConfig normalized = validate_train_config(tc);
    const bool lambda_coerced = normalized.lambda != tc.lambda;

    const std::string out_dir = overrides.out_dir.value_or(cfg.get_string("run.out_dir"));
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path out(out_dir);

    const TrainResult result = train(normalized, corpus, *init);

    // Effective-config snapshot: the input keys with overrides and
    // normalization applied, so the run is reproducible from this file alone.
    std::map<std::string, std::string> snapshot = cfg.entries();
    snapshot["train.seed"] = std::to_string(normalized.seed);
    snapshot["train.lambda"] = detail::fmt(normalized.lambda);
    snapshot["run.out_dir"] = out_dir;
    std::string snapshot_text;
    for (const auto& [key, value] : snapshot)
      snapshot_text += key + " = " + value + "\n";
    detail::write_text_file(out / "config.snapshot.cfg", snapshot_text);

    save_policy(*result.anchor, (out / "policy_init.json").string());
    save_policy(*result.policy, (out / "policy_final.json").string());
    detail::write_text_file(out / "metrics.csv", metrics_csv(result.records));

    nlohmann::json run_json = {
        {"status", result.divergence ? "diverged" : "completed"},
        {"label", drift_label(normalized)},
        {"objective", to_string(normalized.objective)},
        {"level", to_string(normalized.level)},
        {"lambda", normalized.lambda},
        {"lambda_coerced", lambda_coerced},
        {"seed", normalized.seed},
        {"c_ref", result.c_ref},
        {"total_steps", result.total_steps},
        {"train_size", result.train_size},
        {"heldout_size", result.heldout_size},
    };
    if (result.divergence)
      run_json["divergence"] = {{"step", result.divergence->step},
                                {"reason", result.divergence->reason}};
    detail::write_text_file(out / "run.json", run_json.dump(2) + "\n");

    if (result.divergence) {
      std::cerr << "training diverged: " << result.divergence->reason
                << "; last finite checkpoint written to " << (out / "policy_final.json").string()
                << "\n";
      return kExitDiverged;
    }
    const RunRecord& last = result.records.back();
    std::cout << "completed " << result.total_steps << " steps; final loss "
              << detail::fmt(last.loss) << ", kl_from_base " << detail::fmt(last.kl_from_base)
              << ", eval_logprob " << detail::fmt(last.eval_logprob) << "\n"
              << "run directory: " << out_dir << "\n";
    return kExitOk;
  });
}

inline int cmd_bounds(const std::string& config_path, const CliOverrides& overrides = {}) {
  return detail::run_command([&]() -> int {
    const KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
    std::vector<const char*> allowed = {"bounds.reference", "run.out_dir", "run.enum_cap"};
    for (const char* k : detail::kCorpusKeys) allowed.push_back(k);
    for (const char* k : detail::kPolicyKeys) allowed.push_back(k);
    cfg.check_allowed(allowed);

    const Corpus corpus = detail::load_corpus_from_config(cfg);
    const std::unique_ptr<Policy> policy = detail::build_policy_from_config(cfg, corpus.vocab_size);
    BoundOptions opt;
    opt.enum_cap = static_cast<std::size_t>(cfg.get_u64("run.enum_cap", kDefaultEnumCap));

    const std::string reference = cfg.get_string("bounds.reference");
    BoundReport report;
    if (reference == "empirical") {
      report = bound_report(*policy, EmpiricalRef{}, corpus, opt);
    } else {
      const std::unique_ptr<Policy> ref = load_policy(reference);
      if (ref->vocab_size() != corpus.vocab_size)
        throw DataError("reference vocabulary size " + std::to_string(ref->vocab_size()) +
                        " does not match corpus vocabulary size " +
                        std::to_string(corpus.vocab_size));
      report = bound_report(*policy, *ref, corpus, opt);
    }

    const std::pair<const char*, double> fields[] = {
        {"j_exact", report.j_exact},       {"b_sft", report.b_sft},
        {"b_dft", report.b_dft},           {"gap", report.gap},
        {"c_ref", report.c_ref},           {"e_x", report.e_x},
        {"e_logx", report.e_logx},         {"e_xlogx", report.e_xlogx},
        {"cov_x_logx", report.cov_x_logx}, {"var_x", report.var_x},
        {"b_sft_full", report.b_sft_full}, {"b_dft_full", report.b_dft_full},
    };
    std::string text;
    for (const auto& [name, value] : fields) text += std::string(name) + " = " + detail::fmt(value) + "\n";
    std::cout << text;

    std::string out_dir = overrides.out_dir.value_or(cfg.get_string("run.out_dir", ""));
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      nlohmann::json doc;
      for (const auto& [name, value] : fields) doc[name] = value;
      detail::write_text_file(std::filesystem::path(out_dir) / "bound_report.json",
                              doc.dump(2) + "\n");
    }
    return kExitOk;
  });
}

inline int cmd_gradcheck(const std::string& config_path, const CliOverrides& overrides = {}) {
  return detail::run_command([&]() -> int {
    const KeyValueConfig cfg = KeyValueConfig::parse_file(config_path);
    const char* allowed[] = {"gradcheck.policy", "gradcheck.trials", "gradcheck.seed",
                             "gradcheck.negative_control", "run.out_dir"};
    cfg.check_allowed(allowed);

    GradCheckOptions opt;
    opt.policy = cfg.get_string("gradcheck.policy", "all");
    opt.trials = static_cast<int>(cfg.get_int("gradcheck.trials", 3));
    opt.seed = overrides.seed.value_or(cfg.get_u64("gradcheck.seed", 0));
    opt.negative_control = cfg.get_bool("gradcheck.negative_control", false);
    if (opt.negative_control)
      std::cout << "negative control: one analytic gradient component is deliberately broken\n";

    const GradCheckReport report = run_gradcheck(opt);
    std::cout << "policy    objective               worst_rel_err  tolerance  status\n";
    for (const GradCheckCase& c : report.cases) {
      std::string row = c.policy;
      row.resize(10, ' ');
      std::string obj = c.objective;
      obj.resize(24, ' ');
      std::cout << row << obj << detail::fmt(c.worst_rel_err) << "  " << detail::fmt(c.tolerance)
                << "  " << (c.pass ? "ok" : "FAIL") << "\n";
    }

    const std::string out_dir = overrides.out_dir.value_or(cfg.get_string("run.out_dir", ""));
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      nlohmann::json doc = nlohmann::json::array();
      for (const GradCheckCase& c : report.cases)
        doc.push_back({{"policy", c.policy},
                       {"objective", c.objective},
                       {"worst_rel_err", c.worst_rel_err},
                       {"tolerance", c.tolerance},
                       {"pass", c.pass}});
      detail::write_text_file(std::filesystem::path(out_dir) / "gradcheck.json",
                              doc.dump(2) + "\n");
    }
    if (!report.pass) {
      std::cerr << "gradient check breached tolerance\n";
      return kExitTolerance;
    }
    return kExitOk;
  });
}

inline int cmd_drift_report(const std::vector<std::string>& run_dirs,
                            const std::string& out_dir) {
  return detail::run_command([&]() -> int {
    if (run_dirs.empty()) throw ConfigError("drift-report needs at least one run directory");

    struct LoadedRun {
      std::string label;
      std::vector<RunRecord> records;
    };
    std::vector<LoadedRun> runs;
    for (const std::string& dir : run_dirs) {
      const std::filesystem::path p(dir);
      std::ifstream metrics(p / "metrics.csv");
      if (!metrics) throw DataError("cannot open " + (p / "metrics.csv").string());
      std::string text((std::istreambuf_iterator<char>(metrics)),
                       std::istreambuf_iterator<char>());
      LoadedRun run;
      run.records = parse_metrics_csv(text, (p / "metrics.csv").string());
      if (run.records.empty())
        throw DataError((p / "metrics.csv").string() + " has no data rows");
      std::ifstream rj(p / "run.json");
      if (!rj) throw DataError("cannot open " + (p / "run.json").string());
      nlohmann::json doc;
      try {
        rj >> doc;
      } catch (const nlohmann::json::exception& e) {
        throw DataError((p / "run.json").string() + " is not valid JSON: " + e.what());
      }
      run.label = doc.value("label", dir);
      runs.push_back(std::move(run));
    }

    // Aligned comparison: every run must have recorded the same step sequence.
    for (std::size_t r = 1; r < runs.size(); ++r) {
      if (runs[r].records.size() != runs[0].records.size())
        throw DataError("runs do not align: " + runs[r].label + " has " +
                        std::to_string(runs[r].records.size()) + " rows, " + runs[0].label +
                        " has " + std::to_string(runs[0].records.size()));
      for (std::size_t i = 0; i < runs[r].records.size(); ++i)
        if (runs[r].records[i].step != runs[0].records[i].step)
          throw DataError("runs do not align at row " + std::to_string(i + 1) + ": step " +
                          std::to_string(runs[r].records[i].step) + " vs " +
                          std::to_string(runs[0].records[i].step));
    }

    std::string summary =
        "run                        final_step  final_loss     final_kl       final_ess      "
        "final_eval_logprob  max_var_p\n";
    for (const LoadedRun& run : runs) {
      const RunRecord& last = run.records.back();
      double max_var = 0.0;
      for (const RunRecord& r : run.records) max_var = std::max(max_var, r.var_p);
      std::string label = run.label;
      label.resize(std::max<std::size_t>(label.size(), 27), ' ');
      // Six significant digits keep the columns aligned; long.csv carries the
      // full-precision values.
      auto cell = [](double v, std::size_t width) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        std::string s(buf);
        s.resize(std::max(s.size() + 2, width), ' ');
        return s;
      };
      std::string step_cell = std::to_string(last.step);
      step_cell.resize(std::max<std::size_t>(step_cell.size(), 12), ' ');
      char var_buf[32];
      std::snprintf(var_buf, sizeof var_buf, "%.6g", max_var);
      summary += label + step_cell + cell(last.loss, 15) + cell(last.kl_from_base, 15) +
                 cell(last.ess, 15) + cell(last.eval_logprob, 20) + var_buf + "\n";
    }
    if (runs.size() > 1) {
      const auto lowest_kl = std::min_element(
          runs.begin(), runs.end(), [](const LoadedRun& a, const LoadedRun& b) {
            return a.records.back().kl_from_base < b.records.back().kl_from_base;
          });
      const auto best_eval = std::max_element(
          runs.begin(), runs.end(), [](const LoadedRun& a, const LoadedRun& b) {
            return a.records.back().eval_logprob < b.records.back().eval_logprob;
          });
      summary += "lowest final kl_from_base: " + lowest_kl->label + "\n";
      summary += "highest final eval_logprob: " + best_eval->label + "\n";
    }
    std::cout << summary;

    // Long format: one (run, step, metric, value) row per metric per record.
    std::string long_csv = "run,step,metric,value\n";
    for (const LoadedRun& run : runs) {
      for (const RunRecord& r : run.records) {
        const std::pair<const char*, double> metrics[] = {
            {"loss", r.loss},   {"kl_from_base", r.kl_from_base},
            {"var_p", r.var_p}, {"ess", r.ess},
            {"b_sft", r.b_sft}, {"b_dft", r.b_dft},
            {"gap", r.gap},     {"eval_logprob", r.eval_logprob},
        };
        for (const auto& [name, value] : metrics) {
          long_csv += run.label + "," + std::to_string(r.step) + "," + name + ",";
          long_csv += detail::fmt(value) + "\n";
        }
      }
    }
    std::filesystem::create_directories(out_dir);
    detail::write_text_file(std::filesystem::path(out_dir) / "summary.txt", summary);
    detail::write_text_file(std::filesystem::path(out_dir) / "long.csv", long_csv);
    return kExitOk;
  });
}

}  // namespace ftlab
