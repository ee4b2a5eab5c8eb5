#include "msign/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace msign {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'G', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error("checkpoint " + path + ": truncated");
  return v;
}

}  // namespace

void write_bundle(const std::string& path, const MatrixBundle& bundle) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp);
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(bundle.size()));
    for (const auto& [name, m] : bundle) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
      put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(os, m(i, j));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("checkpoint: cannot move " + tmp + " into place");
}

MatrixBundle read_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw std::runtime_error("checkpoint " + path + ": bad magic");
  auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint " + path + ": unsupported version " +
                             std::to_string(version));
  auto n = get<std::uint32_t>(is, path);
  MatrixBundle out;
  for (std::uint32_t k = 0; k < n; ++k) {
    auto len = get<std::uint32_t>(is, path);
    if (len > 4096) throw std::runtime_error("checkpoint " + path + ": corrupt entry name");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("checkpoint " + path + ": truncated");
    auto rows = get<std::uint64_t>(is, path);
    auto cols = get<std::uint64_t>(is, path);
    if (rows * cols > (1ULL << 32)) throw std::runtime_error("checkpoint " + path + ": corrupt shape");
    Mat m(rows, cols);
    for (std::uint64_t i = 0; i < rows; ++i)
      for (std::uint64_t j = 0; j < cols; ++j) m(i, j) = get<double>(is, path);
    out.emplace(std::move(name), std::move(m));
  }
  return out;
}

std::uint64_t fnv1a64(const std::string& bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_matrix(const Mat& m, std::uint64_t h) {
  std::string buf(sizeof(double) * static_cast<size_t>(m.size()) + 16, '\0');
  std::int64_t r = m.rows(), c = m.cols();
  std::memcpy(buf.data(), &r, 8);
  std::memcpy(buf.data() + 8, &c, 8);
  size_t off = 16;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j, off += 8) {
      double v = m(i, j);
      std::memcpy(buf.data() + off, &v, 8);
    }
  return fnv1a64(buf, h);
}

std::string hex64(std::uint64_t v) {
  char b[17];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
  return b;
}

}  // namespace msign
