#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bllm/matrix.hpp"

namespace bllm {

// Flat container of named matrices.
//
//   "BLLM"  u32 version  u32 entry_count
//   per entry: u32 name_len, name bytes, u64 rows, u64 cols,
//              rows*cols little-endian IEEE-754 float64
//
// All integers little-endian. Entries keep insertion order.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void put(std::string name, Matrix value);
  void put_text(std::string name, std::string_view text);

  const Matrix* find(std::string_view name) const;
  const Matrix& at(std::string_view name) const;
  std::optional<std::string> text(std::string_view name) const;

  const std::vector<std::pair<std::string, Matrix>>& entries() const { return entries_; }

  std::string encode() const;
  static Checkpoint decode(std::string_view bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, Matrix>> entries_;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

}  // namespace bllm
