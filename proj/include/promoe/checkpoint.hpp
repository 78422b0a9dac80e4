#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "promoe/array.hpp"

namespace promoe {

/// Binary checkpoint container, all integers little-endian:
///
///   magic      8 bytes  "PROMOECK"
///   version    u32      (currently 1)
///   step       u64
///   config     u64 length + UTF-8 JSON text
///   count      u64 number of tensors
///   per tensor:
///     name     u32 length + bytes
///     dtype    u8       0 = float32, 1 = float64, 2 = uint64
///     rank     u32, then rank x u64 dims
///     data     numel * sizeof(dtype) bytes, little-endian IEEE 754 / two's complement
///
/// Tensors are written in name order, so identical contents give identical files.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  using Tensor = std::variant<Array<float>, Array<double>, Array<std::uint64_t>>;

  std::uint64_t step = 0;
  std::string config_json;
  std::map<std::string, Tensor> tensors;

  const Array<float>& f32(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
/// IoError on unreadable files, bad magic, unsupported version or truncation.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace promoe
