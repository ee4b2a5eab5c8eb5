#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "msign/numlin.hpp"

namespace msign {

// Versioned binary container of named dense matrices (row-major doubles).
//   magic "MSGNCKPT", u32 version, u32 entry count, then per entry:
//   u32 name length, name bytes, u64 rows, u64 cols, rows*cols doubles.
// Integers are little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

using MatrixBundle = std::map<std::string, Mat>;

void write_bundle(const std::string& path, const MatrixBundle& bundle);
MatrixBundle read_bundle(const std::string& path);

// Stable content hash (FNV-1a 64) used for cache keys.
std::uint64_t fnv1a64(const std::string& bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t hash_matrix(const Mat& m, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace msign
