#include "msign/cache.hpp"

#include <filesystem>
#include <iostream>

#include "msign/checkpoint.hpp"

namespace msign {

namespace fs = std::filesystem;

namespace {

Mat encode_u64(std::uint64_t v) {
  Mat m(1, 4);
  for (int k = 0; k < 4; ++k) m(0, k) = static_cast<double>((v >> (16 * k)) & 0xffff);
  return m;
}

std::uint64_t decode_u64(const Mat& m) {
  std::uint64_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint64_t>(m(0, k)) << (16 * k);
  return v;
}

std::uint64_t content_hash(const MatrixBundle& b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, m] : b) {
    if (name == "content_hash") continue;
    h = fnv1a64(name, h);
    h = hash_matrix(m, h);
  }
  return h;
}

MatrixBundle pack(const std::vector<PriorConditioner>& pcs, std::uint64_t key) {
  MatrixBundle b;
  b["key"] = encode_u64(key);
  b["scales"] = Mat::Constant(1, 1, static_cast<double>(pcs.size()));
  for (size_t l = 1; l < pcs.size(); ++l) {
    const auto& pc = pcs[l];
    std::string p = "pc" + std::to_string(l + 1) + ".";
    b[p + "pool"] = pc.pool;
    b[p + "u_c"] = pc.u_c;
    b[p + "w"] = pc.w;
    b[p + "a_tilde"] = pc.a_tilde;
    b[p + "inv_z_map"] = pc.inv_z_map;
    b[p + "sigma_c"] = pc.sigma_c.mat();
    Mat s(1, 2);
    s << pc.log_pdet_w, pc.log_det_inverse;
    b[p + "scalars"] = s;
  }
  b["content_hash"] = encode_u64(content_hash(b));
  return b;
}

std::vector<PriorConditioner> unpack(const MatrixBundle& b) {
  int n = static_cast<int>(b.at("scales")(0, 0));
  std::vector<PriorConditioner> pcs(n);
  for (int l = 1; l < n; ++l) {
    std::string p = "pc" + std::to_string(l + 1) + ".";
    PriorConditioner& pc = pcs[l];
    pc.pool = b.at(p + "pool");
    pc.u_c = b.at(p + "u_c");
    pc.w = b.at(p + "w");
    pc.a_tilde = b.at(p + "a_tilde");
    pc.inv_z_map = b.at(p + "inv_z_map");
    pc.sigma_c = SymMatrix(b.at(p + "sigma_c"));
    pc.log_pdet_w = b.at(p + "scalars")(0, 0);
    pc.log_det_inverse = b.at(p + "scalars")(0, 1);
    pc.dim = static_cast<int>(pc.pool.cols());
    pc.coarse_dim = static_cast<int>(pc.pool.rows());
  }
  return pcs;
}

}  // namespace

std::vector<PriorConditioner> build_conditioners(const PosteriorProblem& problem) {
  std::vector<PriorConditioner> pcs(problem.scales());
  for (int l = 2; l <= problem.scales(); ++l)
    pcs[l - 1] = build_conditioner(problem.prior(l), problem.scale(l).ops);
  return pcs;
}

CacheResult ensure_cache(const PosteriorProblem& problem, const std::string& dir,
                         const std::string& key_text) {
  const std::uint64_t key = fnv1a64(key_text);
  CacheResult r;
  fs::create_directories(dir);
  r.path = (fs::path(dir) / (problem.name() + "-" + hex64(key) + ".cache")).string();
  if (fs::exists(r.path)) {
    try {
      MatrixBundle b = read_bundle(r.path);
      if (decode_u64(b.at("key")) == key &&
          decode_u64(b.at("content_hash")) == content_hash(b) &&
          static_cast<int>(b.at("scales")(0, 0)) == problem.scales()) {
        r.conditioners = unpack(b);
        r.hit = true;
        return r;
      }
    } catch (const std::exception& e) {
      std::cerr << "cache " << r.path << " unreadable (" << e.what() << ")\n";
    }
    r.rebuilt_after_mismatch = true;
  }
  r.conditioners = build_conditioners(problem);
  write_bundle(r.path, pack(r.conditioners, key));
  return r;
}

}  // namespace msign
