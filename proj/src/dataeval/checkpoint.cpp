#include "reg4rec/dataeval/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "reg4rec/error.hpp"

namespace reg4rec::dataeval {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t crc_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw Error("checksum-failed", "checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

const numerics::Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw Error("incompatible-checkpoint", "missing tensor '" + name + "'");
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.magic.size() != 4) throw Error("invalid-checkpoint", "magic must be 4 bytes");
  std::string out = ckpt.magic;
  put_u32(out, kCheckpointVersion);
  const auto meta = ckpt.meta.dump();
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(out, d);
  }
  for (const auto& [name, t] : ckpt.tensors)
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  put_u32(out, crc_of(out.data(), out.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& expected_magic) {
  if (bytes.size() < 4) throw Error("checksum-failed", "checkpoint truncated");
  if (bytes.compare(0, 4, expected_magic) != 0)
    throw Error("incompatible-checkpoint", "expected magic '" + expected_magic + "'");
  if (bytes.size() < 12) throw Error("checksum-failed", "checkpoint truncated");
  {
    Reader head(bytes, 8);
    (void)head.str(4);
    const auto version = head.uint(4);
    if (version != kCheckpointVersion)
      throw Error("incompatible-checkpoint", "version " + std::to_string(version) + " (supported: " +
                                                 std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - 4;
  Reader tail(bytes, bytes.size());
  (void)tail.str(body);
  const auto stored_crc = static_cast<std::uint32_t>(tail.uint(4));
  if (crc_of(bytes.data(), body) != stored_crc) throw Error("checksum-failed", "checkpoint crc mismatch");

  Reader r(bytes, body);
  Checkpoint ckpt;
  ckpt.magic = r.str(4);
  (void)r.uint(4);
  const auto meta_len = r.uint(4);
  ckpt.meta = nlohmann::json::parse(r.str(meta_len));
  const auto n = r.uint(4);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> table;
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name = r.str(r.uint(4));
    const auto rank = r.uint(4);
    std::vector<std::size_t> shape;
    for (std::uint64_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.uint(8)));
    table.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& [name, shape] : table) {
    std::vector<double> values(numerics::shape_product(shape));
    for (auto& v : values) v = std::bit_cast<double>(r.uint(8));
    ckpt.tensors.emplace_back(name, numerics::Tensor(shape, std::move(values)));
  }
  if (r.pos() != body) throw Error("checksum-failed", "trailing bytes in checkpoint");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io-error", "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("io-error", "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io-error", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), expected_magic);
}

}  // namespace reg4rec::dataeval
