#pragma once

// Binary checkpoint: every parameter array of the model plus the run config.
//
//   "COPSCKPT"  u32 version  u64 meta_len  meta (JSON text)
//   u32 count, then per array: u32 name_len, name, u8 dtype (1 = f64),
//   u32 ndim, u64 dims[ndim], little-endian row-major payload
//   u32 crc32 of everything above

#include "cops/model.hpp"

#include <cstdint>
#include <string>

namespace cops {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes to a temporary sibling file and renames it into place.
void save_checkpoint(CopsModel& model, const std::string& path);

/// Rejects bad magic, version mismatch, checksum failure, missing or mis-shaped
/// arrays. Nothing is returned unless the whole file validates.
CopsModel load_checkpoint(const std::string& path);

}  // namespace cops
