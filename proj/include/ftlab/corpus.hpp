#pragma once

// Demonstration corpora. Records arrive as JSON lines with string fields
// "prompt" and "response" plus an integer "reward" in {0, 1}; tokenization
// is deterministic and round-trips exactly, so token ids are a faithful
// encoding of the original text.

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include <ftlab/errors.hpp>

namespace ftlab {

enum class TokenizerKind { chars, whitespace };

inline const char* to_string(TokenizerKind k) {
  return k == TokenizerKind::chars ? "char" : "whitespace";
}

struct Trajectory {
  std::vector<int> prompt;
  std::vector<int> response;  // non-empty
  int reward = 1;             // 0 or 1
};

// Bidirectional token <-> id map. Ids are dense and equal to the token's
// 0-based position in the vocabulary file (one token per line).
class Tokenizer {
 public:
  Tokenizer() = default;

  static Tokenizer from_tokens(std::vector<std::string> tokens, TokenizerKind kind) {
    Tokenizer t;
    t.kind_ = kind;
    t.id_to_token_ = std::move(tokens);
    for (std::size_t i = 0; i < t.id_to_token_.size(); ++i) {
      const std::string& tok = t.id_to_token_[i];
      if (kind == TokenizerKind::chars && tok.size() != 1)
        throw ConfigError("char vocabulary entries must be single characters, got \"" + tok + "\"");
      if (!t.token_to_id_.emplace(tok, static_cast<int>(i)).second)
        throw ConfigError("duplicate vocabulary entry \"" + tok + "\"");
    }
    return t;
  }

  static Tokenizer from_vocab_file(const std::string& path, TokenizerKind kind) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    // Whitespace vocabularies may hold a legitimate empty token (from runs of
    // spaces), so only char alphabets forgive trailing blank lines.
    if (kind == TokenizerKind::chars)
      while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
    if (tokens.empty()) throw DataError("vocabulary file " + path + " is empty");
    return from_tokens(std::move(tokens), kind);
  }

  void save_vocab_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary file " + path);
    for (const std::string& tok : id_to_token_) out << tok << '\n';
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    if (text.empty()) return ids;
    if (kind_ == TokenizerKind::chars) {
      ids.reserve(text.size());
      for (char c : text) ids.push_back(id_of(std::string(1, c)));
    } else {
      // Split on single spaces keeping empty fields, so that decode with a
      // single-space joiner reproduces the original text byte for byte.
      std::size_t start = 0;
      while (true) {
        const std::size_t sep = text.find(' ', start);
        const std::string piece = text.substr(start, sep == std::string::npos ? sep : sep - start);
        ids.push_back(id_of(piece));
        if (sep == std::string::npos) break;
        start = sep + 1;
      }
    }
    return ids;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const int id = ids[i];
      if (id < 0 || id >= vocab_size())
        throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
      if (kind_ == TokenizerKind::whitespace && i > 0) out += ' ';
      out += id_to_token_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
  TokenizerKind kind() const { return kind_; }
  const std::vector<std::string>& tokens() const { return id_to_token_; }
  bool contains(const std::string& tok) const { return token_to_id_.count(tok) != 0; }

 private:
  int id_of(const std::string& tok) const {
    const auto it = token_to_id_.find(tok);
    if (it == token_to_id_.end())
      throw VocabularyError("symbol \"" + tok + "\" not in vocabulary");
    return it->second;
  }

  TokenizerKind kind_ = TokenizerKind::chars;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

struct Corpus {
  std::vector<Trajectory> items;
  int vocab_size = 0;
  TokenizerKind tokenizer_kind = TokenizerKind::chars;
  Tokenizer tokenizer;
};

struct LoadOptions {
  TokenizerKind kind = TokenizerKind::chars;
  std::string alphabet_path;  // required for char tokenization
  std::string sidecar_path;   // whitespace vocab location; default "<corpus>.vocab"
};

namespace detail {

// Tokens in order of first appearance across (prompt, response) pairs.
inline std::vector<std::string> collect_whitespace_vocab(
    const std::vector<std::pair<std::string, std::string>>& texts) {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> seen;
  auto add = [&](const std::string& text) {
    if (text.empty()) return;
    std::size_t start = 0;
    while (true) {
      const std::size_t sep = text.find(' ', start);
      const std::string piece = text.substr(start, sep == std::string::npos ? sep : sep - start);
      if (seen.emplace(piece, 1).second) tokens.push_back(piece);
      if (sep == std::string::npos) break;
      start = sep + 1;
    }
  };
  for (const auto& [prompt, response] : texts) {
    add(prompt);
    add(response);
  }
  return tokens;
}

}  // namespace detail

// Loads a JSONL corpus. Unknown fields are ignored; a reward outside {0, 1},
// a missing field, or an empty response is a ParseError carrying the line
// number. For whitespace tokenization the vocabulary sidecar is written on
// first load and is authoritative afterwards.
inline Corpus load_corpus(const std::string& path, const LoadOptions& opt) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus " + path);

  std::vector<std::pair<std::string, std::string>> texts;
  std::vector<int> rewards;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path, line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!rec.is_object()) throw ParseError(path, line_no, "record is not a JSON object");
    if (!rec.contains("prompt") || !rec["prompt"].is_string())
      throw ParseError(path, line_no, "missing string field \"prompt\"");
    if (!rec.contains("response") || !rec["response"].is_string())
      throw ParseError(path, line_no, "missing string field \"response\"");
    if (!rec.contains("reward") || !rec["reward"].is_number_integer())
      throw ParseError(path, line_no, "missing integer field \"reward\"");
    const auto reward = rec["reward"].get<long>();
    if (reward != 0 && reward != 1)
      throw ParseError(path, line_no, "reward must be 0 or 1, got " + std::to_string(reward));
    const auto response = rec["response"].get<std::string>();
    if (response.empty()) throw ParseError(path, line_no, "response must be non-empty");
    texts.emplace_back(rec["prompt"].get<std::string>(), response);
    rewards.push_back(static_cast<int>(reward));
  }
  if (texts.empty()) throw DataError("corpus " + path + " has no records");

  Corpus corpus;
  corpus.tokenizer_kind = opt.kind;
  if (opt.kind == TokenizerKind::chars) {
    if (opt.alphabet_path.empty())
      throw ConfigError("char tokenization requires an alphabet file");
    corpus.tokenizer = Tokenizer::from_vocab_file(opt.alphabet_path, TokenizerKind::chars);
  } else {
    const std::string sidecar =
        opt.sidecar_path.empty() ? path + ".vocab" : opt.sidecar_path;
    if (std::filesystem::exists(sidecar)) {
      corpus.tokenizer = Tokenizer::from_vocab_file(sidecar, TokenizerKind::whitespace);
    } else {
      corpus.tokenizer =
          Tokenizer::from_tokens(detail::collect_whitespace_vocab(texts), TokenizerKind::whitespace);
      corpus.tokenizer.save_vocab_file(sidecar);
    }
  }
  corpus.vocab_size = corpus.tokenizer.vocab_size();

  for (std::size_t i = 0; i < texts.size(); ++i) {
    Trajectory t;
    t.prompt = corpus.tokenizer.encode(texts[i].first);
    t.response = corpus.tokenizer.encode(texts[i].second);
    t.reward = rewards[i];
    corpus.items.push_back(std::move(t));
  }
  return corpus;
}

// Keeps reward-1 records in their original order. Idempotent.
inline Corpus filter_positive(const Corpus& corpus) {
  Corpus out = corpus;
  out.items.clear();
  for (const Trajectory& t : corpus.items)
    if (t.reward == 1) out.items.push_back(t);
  return out;
}

}  // namespace ftlab
