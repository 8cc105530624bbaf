#include "bllm/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "bllm/error.hpp"

namespace bllm {
namespace {

bool is_word(unsigned char c) { return std::isalpha(c) || c == '_' || c == '\'' || c >= 0x80; }
bool is_digit(unsigned char c) { return std::isdigit(c) != 0; }

bool numeric(const std::string& t) {
  return !t.empty() && std::all_of(t.begin(), t.end(), [](unsigned char c) { return is_digit(c); });
}

bool attach_left(const std::string& t) {
  return t == "," || t == "." || t == "?" || t == "!" || t == ")" || t == ";" || t == ":";
}

bool word_token(const std::string& t) { return !t.empty() && is_word(static_cast<unsigned char>(t[0])); }

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    if (is_word(c)) {
      while (j < text.size() && is_word(static_cast<unsigned char>(text[j]))) ++j;
    } else if (is_digit(c)) {
      while (j < text.size() && is_digit(static_cast<unsigned char>(text[j]))) ++j;
    }
    out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    bool space = i > 0;
    if (space && attach_left(t)) space = false;
    // hyphen inside a word; a minus sign elsewhere keeps its leading space
    if (space && t == "-" && word_token(tokens[i - 1])) space = false;
    if (space) {
      const std::string& prev = tokens[i - 1];
      if (prev == "(" || prev == "-") space = false;
      // decimal point inside a number
      if (prev == "." && numeric(t) && i >= 2 && numeric(tokens[i - 2])) space = false;
    }
    if (space) out.push_back(' ');
    out += t;
  }
  return out;
}

Vocabulary::Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"} { index(); }

void Vocabulary::index() {
  ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], i).second) {
      throw ValidationError("vocabulary", "duplicate token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    for (auto& tok : tokenize(text)) ++counts[tok];
  }
  Vocabulary v;
  for (std::size_t i = 0; i < kReserved; ++i) counts.erase(v.tokens_[i]);
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t room = max_size > kReserved ? max_size - kReserved : 0;
  if (ranked.size() > room) ranked.resize(room);
  std::vector<std::string> kept;
  for (auto& [tok, n] : ranked) kept.push_back(tok);
  std::sort(kept.begin(), kept.end());
  v.tokens_.insert(v.tokens_.end(), kept.begin(), kept.end());
  v.index();
  return v;
}

std::size_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::size_t> out;
  for (const auto& tok : tokenize(text)) out.push_back(id(tok));
  return out;
}

std::string Vocabulary::decode(std::span<const std::size_t> ids) const {
  std::vector<std::string> toks;
  for (std::size_t id : ids) {
    if (id == kEos) break;
    if (id < kReserved && id != kUnk) continue;
    toks.push_back(token(id));
  }
  return detokenize(toks);
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out.push_back('\n');
  }
  return out;
}

Vocabulary Vocabulary::deserialize(std::string_view text) {
  Vocabulary v;
  v.tokens_.clear();
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) throw LoadError("vocabulary text must end with a newline");
    v.tokens_.emplace_back(text.substr(pos, end - pos));
    pos = end + 1;
  }
  Vocabulary reference;
  if (v.tokens_.size() < kReserved ||
      !std::equal(reference.tokens_.begin(), reference.tokens_.end(), v.tokens_.begin())) {
    throw LoadError("vocabulary is missing the reserved tokens");
  }
  v.index();
  return v;
}

}  // namespace bllm
