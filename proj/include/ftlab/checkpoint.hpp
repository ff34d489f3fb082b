#pragma once

// Policy checkpoints: a self-describing JSON file holding the policy kind,
// its construction config, and the flat parameter vector in the canonical
// order. Finite doubles round-trip bit-exactly through the JSON layer, so a
// save/load cycle reproduces the policy exactly; non-finite parameters are
// rejected at save time because JSON cannot represent them.

#include <fstream>
#include <memory>
#include <string>

#include <json.hpp>

#include <ftlab/policy.hpp>
#include <ftlab/tabular_policy.hpp>
#include <ftlab/tiny_autoregressor.hpp>

namespace ftlab {

inline constexpr const char* kCheckpointFormat = "ftlab-policy-v1";

inline void save_policy(const Policy& policy, const std::string& path) {
  std::vector<double> params = params_of(policy);
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!std::isfinite(params[i]))
      throw CheckpointError("parameter " + std::to_string(i) + " is not finite; refusing to save");
  nlohmann::json doc = {{"format", kCheckpointFormat},
                        {"kind", policy.kind()},
                        {"param_order", policy.param_order_version()},
                        {"config", policy.config_json()},
                        {"params", params}};
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out << doc.dump(2) << '\n';
}

inline std::unique_ptr<Policy> load_policy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != kCheckpointFormat)
    throw CheckpointError("checkpoint " + path + " has unknown format");
  const std::string kind = doc.value("kind", "");
  const nlohmann::json& cfg = doc.at("config");

  std::unique_ptr<Policy> policy;
  try {
    if (kind == "tabular") {
      TabularConfig c;
      c.vocab_size = cfg.at("vocab_size").get<int>();
      c.order = cfg.at("order").get<int>();
      c.max_len = cfg.at("max_len").get<int>();
      policy = std::make_unique<TabularSoftmaxPolicy>(c);
    } else if (kind == "tiny-ar") {
      TinyArConfig c;
      c.vocab_size = cfg.at("vocab_size").get<int>();
      c.max_len = cfg.at("max_len").get<int>();
      c.dim = cfg.at("dim").get<int>();
      c.hidden = cfg.at("hidden").get<int>();
      c.layers = cfg.at("layers").get<int>();
      c.init_scale = cfg.at("init_scale").get<double>();
      c.init_seed = cfg.at("init_seed").get<std::uint64_t>();
      policy = std::make_unique<TinyAutoregressor>(c);
    } else {
      throw CheckpointError("checkpoint " + path + " has unknown policy kind \"" + kind + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint " + path + " has a malformed config: " + e.what());
  }

  if (doc.value("param_order", "") != policy->param_order_version())
    throw CheckpointError("checkpoint " + path + " parameter order \"" +
                          doc.value("param_order", "") + "\" does not match \"" +
                          policy->param_order_version() + "\"");
  std::vector<double> params;
  try {
    params = doc.at("params").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint " + path + " has malformed params: " + e.what());
  }
  if (params.size() != policy->param_count())
    throw CheckpointError("checkpoint " + path + " holds " + std::to_string(params.size()) +
                          " params, policy expects " + std::to_string(policy->param_count()));
  policy->set_params(params);
  return policy;
}

}  // namespace ftlab
