#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "reg4rec/numerics/tensor.hpp"

namespace reg4rec::dataeval {

// Binary checkpoint layout (all integers little-endian):
//
//   magic        4 bytes ("MPQ1", "SEQ1", ...)
//   version      u32
//   meta_len     u32, followed by meta_len bytes of JSON
//   n_tensors    u32
//   shape table  per tensor: u32 name_len, name bytes, u32 rank, u64 dims[rank]
//   blobs        per tensor, in table order: f64 values
//   crc32        u32 over every preceding byte
struct Checkpoint {
  std::string magic;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, numerics::Tensor>> tensors;

  const numerics::Tensor& tensor(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws "incompatible-checkpoint" on a magic/version mismatch and
// "checksum-failed" on truncated or corrupted data.
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& expected_magic);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_magic);

}  // namespace reg4rec::dataeval
