#include "bllm/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

#include "bllm/error.hpp"

namespace bllm {
namespace {

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>(u & 0xffU));
    u = static_cast<U>(u >> 8);
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw LoadError("checkpoint truncated at byte " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(std::string name, Matrix value) {
  for (auto& [n, m] : entries_) {
    if (n == name) {
      m = std::move(value);
      return;
    }
  }
  entries_.emplace_back(std::move(name), std::move(value));
}

void Checkpoint::put_text(std::string name, std::string_view text) {
  std::vector<double> bytes;
  bytes.reserve(text.size());
  for (unsigned char c : text) bytes.push_back(static_cast<double>(c));
  put(std::move(name), Matrix(1, text.size(), std::move(bytes)));
}

const Matrix* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, m] : entries_) {
    if (n == name) return &m;
  }
  return nullptr;
}

const Matrix& Checkpoint::at(std::string_view name) const {
  const Matrix* m = find(name);
  if (m == nullptr) throw LoadError("checkpoint has no entry '" + std::string(name) + "'");
  return *m;
}

std::optional<std::string> Checkpoint::text(std::string_view name) const {
  const Matrix* m = find(name);
  if (m == nullptr) return std::nullopt;
  std::string out;
  out.reserve(m->size());
  for (double v : m->data()) out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  return out;
}

std::string Checkpoint::encode() const {
  std::string out = "BLLM";
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, m] : entries_) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint64_t>(out, m.rows());
    put_le<std::uint64_t>(out, m.cols());
    for (double v : m.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint Checkpoint::decode(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4) != "BLLM") throw LoadError("not a BLLM checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = in.get<std::uint32_t>();
    std::string name(in.take(name_len));
    const auto rows = in.get<std::uint64_t>();
    const auto cols = in.get<std::uint64_t>();
    if (cols != 0 && rows > (bytes.size() / 8) / cols) {
      throw LoadError("checkpoint entry '" + name + "' claims an impossible shape");
    }
    std::vector<double> data(rows * cols);
    for (double& v : data) v = std::bit_cast<double>(in.get<std::uint64_t>());
    ckpt.entries_.emplace_back(std::move(name), Matrix(rows, cols, std::move(data)));
  }
  if (!in.done()) throw LoadError("trailing bytes after last checkpoint entry");
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file(path, encode()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return decode(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("short write to " + path.string());
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest.data(), &len) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

}  // namespace bllm
