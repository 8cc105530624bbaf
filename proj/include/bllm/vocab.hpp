#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bllm {

// Word-level split: letter runs, digit runs, and single punctuation marks.
// "-12.5" -> "-", "12", ".", "5".
std::vector<std::string> tokenize(std::string_view text);
std::string detokenize(std::span<const std::string> tokens);

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kBos = 1;
  static constexpr std::size_t kEos = 2;
  static constexpr std::size_t kSep = 3;
  static constexpr std::size_t kUnk = 4;
  static constexpr std::size_t kReserved = 5;

  Vocabulary();

  // Reserved tokens first, then corpus tokens by descending frequency (ties
  // lexicographic) until max_size; the kept tokens are then sorted.
  static Vocabulary build(std::span<const std::string> texts, std::size_t max_size = 512);

  std::size_t size() const { return tokens_.size(); }
  std::size_t id(std::string_view token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }

  std::vector<std::size_t> encode(std::string_view text) const;
  // Stops at EOS; reserved ids other than UNK are skipped.
  std::string decode(std::span<const std::size_t> ids) const;

  std::string serialize() const;
  static Vocabulary deserialize(std::string_view text);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void index();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

}  // namespace bllm
