#include "msign/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "msign/random.hpp"

namespace msign {

MarginalSummary marginal_projection(const SampleBatch& batch, const Vec& direction, int bins,
                                    double lo, double hi) {
  if (direction.size() != batch.dim())
    throw std::invalid_argument("marginal_projection: direction dimension mismatch");
  if (std::abs(direction.norm() - 1.0) > 1e-8)
    throw std::invalid_argument("marginal_projection: direction must be normalized");
  MarginalSummary m;
  m.projections = batch.samples * direction;
  const int n = static_cast<int>(m.projections.size());
  if (!(hi > lo)) {
    double a = m.projections.maxCoeff(), b = -m.projections.minCoeff();
    hi = std::max(a, b);
    lo = -hi;
    if (hi == 0.0) hi = 1.0, lo = -1.0;
  }
  m.edges = Vec::LinSpaced(bins + 1, lo, hi);
  m.counts = Vec::Zero(bins);
  double w = (hi - lo) / bins;
  for (int i = 0; i < n; ++i) {
    int b = static_cast<int>(std::floor((m.projections(i) - lo) / w));
    if (b == bins && m.projections(i) <= hi) b = bins - 1;
    if (b >= 0 && b < bins) m.counts(b) += 1.0;
  }
  double mu = m.projections.mean();
  double sd = std::sqrt((m.projections.array() - mu).square().sum() / std::max(n - 1, 1));
  m.bandwidth = 1.06 * sd * std::pow(static_cast<double>(n), -0.2);
  if (m.bandwidth <= 0.0) m.bandwidth = 1e-3;
  m.kde = Vec::Zero(bins);
  const double norm = 1.0 / (n * m.bandwidth * std::sqrt(2.0 * std::acos(-1.0)));
  for (int b = 0; b < bins; ++b) {
    double c = 0.5 * (m.edges(b) + m.edges(b + 1));
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      double u = (c - m.projections(i)) / m.bandwidth;
      s += std::exp(-0.5 * u * u);
    }
    m.kde(b) = s * norm;
  }
  return m;
}

std::string marginal_csv(const MarginalSummary& m) {
  std::string out = "bin_lo,bin_hi,count,kde\n";
  char buf[160];
  for (int b = 0; b < m.counts.size(); ++b) {
    std::snprintf(buf, sizeof buf, "%.8e,%.8e,%d,%.8e\n", m.edges(b), m.edges(b + 1),
                  static_cast<int>(m.counts(b)), m.kde(b));
    out += buf;
  }
  return out;
}

double dip_statistic(std::vector<double> xs) {
  const int n = static_cast<int>(xs.size());
  if (n < 1) throw std::invalid_argument("dip: empty sample");
  std::sort(xs.begin(), xs.end());
  // 1-based working arrays.
  std::vector<double> x(n + 1);
  for (int i = 0; i < n; ++i) x[i + 1] = xs[i];
  std::vector<int> gcm(n + 2), lcm(n + 2), mn(n + 2), mj(n + 2);
  int low = 1, high = n;
  double dip = 1.0;
  if (n < 2 || x[n] == x[1]) return dip / (2.0 * n);

  mn[1] = 1;
  for (int j = 2; j <= n; ++j) {
    mn[j] = j - 1;
    while (true) {
      int mnj = mn[j], mnmnj = mn[mnj];
      if (mnj == 1 || (x[j] - x[mnj]) * (mnj - mnmnj) < (x[mnj] - x[mnmnj]) * (j - mnj)) break;
      mn[j] = mnmnj;
    }
  }
  mj[n] = n;
  for (int k = n - 1; k >= 1; --k) {
    mj[k] = k + 1;
    while (true) {
      int mjk = mj[k], mjmjk = mj[mjk];
      if (mjk == n || (x[k] - x[mjk]) * (mjmjk - mjk) > (x[mjk] - x[mjmjk]) * (mjk - k)) break;
      mj[k] = mjmjk;
    }
  }

  while (true) {
    int i = 1;
    gcm[1] = high;
    for (i = 1; gcm[i] > low; ++i) gcm[i + 1] = mn[gcm[i]];
    int ig = i, l_gcm = i;
    int ix = ig - 1;
    lcm[1] = low;
    for (i = 1; lcm[i] < high; ++i) lcm[i + 1] = mj[lcm[i]];
    int ih = i, l_lcm = i;
    int iv = 2;

    double d = 0.0;
    if (l_gcm != 2 || l_lcm != 2) {
      do {
        double dx;
        int gcmix = gcm[ix], lcmiv = lcm[iv];
        if (gcmix > lcmiv) {
          int gcmi1 = gcm[ix + 1];
          dx = (lcmiv - gcmi1 + 1) -
               (x[lcmiv] - x[gcmi1]) * (gcmix - gcmi1) / (x[gcmix] - x[gcmi1]);
          ++iv;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv - 1;
          }
        } else {
          int lcmiv1 = lcm[iv - 1];
          double dxx = x[gcmix] - x[lcmiv1];
          dx = (dxx == 0.0 ? 0.0 : dxx * (lcmiv - lcmiv1) / (x[lcmiv] - x[lcmiv1])) -
               (gcmix - lcmiv1 - 1);
          --ix;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv;
          }
        }
        if (ix < 1) ix = 1;
        if (iv > l_lcm) iv = l_lcm;
      } while (gcm[ix] != lcm[iv]);
    } else {
      d = 1.0;
    }
    if (d < dip) break;

    double dip_l = 0.0;
    for (int j = ig; j < l_gcm; ++j) {
      double max_t = 1.0;
      int jb = gcm[j + 1], je = gcm[j];
      if (je - jb > 1 && x[je] != x[jb]) {
        double C = (je - jb) / (x[je] - x[jb]);
        for (int jj = jb; jj <= je; ++jj) {
          double t = (jj - jb + 1) - (x[jj] - x[jb]) * C;
          if (max_t < t) max_t = t;
        }
      }
      if (dip_l < max_t) dip_l = max_t;
    }
    double dip_u = 0.0;
    for (int j = ih; j < l_lcm; ++j) {
      double max_t = 1.0;
      int jb = lcm[j], je = lcm[j + 1];
      if (je - jb > 1 && x[je] != x[jb]) {
        double C = (je - jb) / (x[je] - x[jb]);
        for (int jj = jb; jj <= je; ++jj) {
          double t = (x[jj] - x[jb]) * C - (jj - jb - 1);
          if (max_t < t) max_t = t;
        }
      }
      if (dip_u < max_t) dip_u = max_t;
    }
    double dipnew = std::max(dip_u, dip_l);
    if (dip < dipnew) dip = dipnew;
    if (low == gcm[ig] && high == lcm[ih]) break;
    low = gcm[ig];
    high = lcm[ih];
  }
  return dip / (2.0 * n);
}

DipTest dip_test(const Vec& x, double level, int null_draws, std::uint64_t seed) {
  DipTest r;
  const int n = static_cast<int>(x.size());
  r.dip = dip_statistic(std::vector<double>(x.data(), x.data() + n));
  RandomStream rs(seed);
  std::vector<double> null(null_draws);
  std::vector<double> u(n);
  for (int k = 0; k < null_draws; ++k) {
    for (int i = 0; i < n; ++i) u[i] = rs.uniform();
    null[k] = dip_statistic(u);
  }
  std::sort(null.begin(), null.end());
  int idx = std::min(null_draws - 1, static_cast<int>(std::ceil((1.0 - level) * null_draws)) - 1);
  r.critical = null[std::max(idx, 0)];
  r.bimodal = r.dip > r.critical;
  return r;
}

double kolmogorov_survival(double lambda) {
  if (lambda < 1e-3) return 1.0;
  double s = 0.0, sign = 1.0;
  for (int j = 1; j <= 200; ++j) {
    double term = sign * 2.0 * std::exp(-2.0 * j * j * lambda * lambda);
    s += term;
    if (std::abs(term) < 1e-16) break;
    sign = -sign;
  }
  return std::clamp(s, 0.0, 1.0);
}

KsResult ks_test(const Vec& x, const std::function<double(double)>& cdf) {
  std::vector<double> v(x.data(), x.data() + x.size());
  std::sort(v.begin(), v.end());
  const int n = static_cast<int>(v.size());
  double d = 0.0;
  for (int i = 0; i < n; ++i) {
    double f = cdf(v[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  KsResult r;
  r.statistic = d;
  double sn = std::sqrt(static_cast<double>(n));
  r.p_value = kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d);
  return r;
}

RmseReport rmse_report(const SampleBatch& batch, const OracleMoments& oracle) {
  const int n = batch.count();
  const int k = static_cast<int>(oracle.basis.cols());
  if (oracle.basis.rows() != batch.dim()) throw std::invalid_argument("rmse_report: dimension mismatch");
  Mat p = batch.samples * oracle.basis;
  Vec m = p.colwise().mean();
  Mat c = p.rowwise() - m.transpose();
  Mat cov = (c.transpose() * c) / std::max(n - 1, 1);
  RmseReport r;
  Vec true_sd = oracle.cov.diagonal().cwiseSqrt();
  Vec sd = cov.diagonal().cwiseSqrt();
  r.mean_rmse = std::sqrt((m - oracle.mean).squaredNorm() / k);
  r.std_rmse = std::sqrt((sd - true_sd).squaredNorm() / k);
  double acc = 0.0;
  int pairs = 0;
  for (int i = 0; i < k; ++i)
    for (int j = i + 1; j < k; ++j) {
      double rc = (sd(i) > 0 && sd(j) > 0) ? cov(i, j) / (sd(i) * sd(j)) : 0.0;
      double tc = oracle.cov(i, j) / (true_sd(i) * true_sd(j));
      acc += (rc - tc) * (rc - tc);
      ++pairs;
    }
  r.corr_rmse = pairs ? std::sqrt(acc / pairs) : 0.0;
  return r;
}

ModeBalance mode_balance(const SampleBatch& batch, int k, int restarts, std::uint64_t seed) {
  const int n = batch.count();
  const int d = batch.dim();
  if (n < 2 * k) throw std::invalid_argument("mode_balance: too few samples");
  Vec mu = batch.samples.colwise().mean();
  Mat c = batch.samples.rowwise() - mu.transpose();
  Mat cov = (c.transpose() * c) / (n - 1);
  EigenDecomp e = sym_eig(SymMatrix(0.5 * (cov + cov.transpose())));
  if (!(e.values(0) > 1e-14)) throw NumericalError("mode_balance: degenerate sample variance");
  const int q = std::min(2, d);
  Mat pcs = e.vectors.leftCols(q);
  Mat y = c * pcs;  // n x q

  RandomStream rs(seed);
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_lab(n);
  Mat best_cent;
  std::vector<int> lab(n);
  for (int r = 0; r < restarts; ++r) {
    // k-means++ seeding
    Mat cent(k, q);
    cent.row(0) = y.row(static_cast<int>(rs.next_u64() % n));
    Vec dist(n);
    for (int j = 1; j < k; ++j) {
      for (int i = 0; i < n; ++i) {
        double b = std::numeric_limits<double>::infinity();
        for (int m = 0; m < j; ++m) b = std::min(b, (y.row(i) - cent.row(m)).squaredNorm());
        dist(i) = b;
      }
      double tot = dist.sum(), u = rs.uniform() * tot, acc = 0.0;
      int pick = n - 1;
      for (int i = 0; i < n; ++i) {
        acc += dist(i);
        if (acc >= u) {
          pick = i;
          break;
        }
      }
      cent.row(j) = y.row(pick);
    }
    double inertia = 0.0;
    for (int it = 0; it < 300; ++it) {
      bool changed = false;
      inertia = 0.0;
      for (int i = 0; i < n; ++i) {
        int bl = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int m = 0; m < k; ++m) {
          double dd = (y.row(i) - cent.row(m)).squaredNorm();
          if (dd < bd) bd = dd, bl = m;
        }
        if (it == 0 || lab[i] != bl) changed = true;
        lab[i] = bl;
        inertia += bd;
      }
      if (!changed) break;
      Mat nc = Mat::Zero(k, q);
      Vec cnt = Vec::Zero(k);
      for (int i = 0; i < n; ++i) {
        nc.row(lab[i]) += y.row(i);
        cnt(lab[i]) += 1;
      }
      for (int m = 0; m < k; ++m)
        if (cnt(m) > 0) cent.row(m) = nc.row(m) / cnt(m);
    }
    if (inertia < best) {
      best = inertia;
      best_lab = lab;
      best_cent = cent;
    }
  }
  // Order clusters by first principal coordinate.
  std::vector<int> order(k);
  for (int m = 0; m < k; ++m) order[m] = m;
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return best_cent(a, 0) < best_cent(b, 0); });
  std::vector<int> rank(k);
  for (int m = 0; m < k; ++m) rank[order[m]] = m;

  ModeBalance res;
  res.inertia = best;
  res.proportions = Vec::Zero(k);
  res.means = Mat::Zero(k, d);
  for (int i = 0; i < n; ++i) {
    int m = rank[best_lab[i]];
    res.proportions(m) += 1.0;
    res.means.row(m) += batch.samples.row(i);
  }
  for (int m = 0; m < k; ++m)
    if (res.proportions(m) > 0) res.means.row(m) /= res.proportions(m);
  res.proportions /= n;
  double spread = std::sqrt(cov.trace());
  double sep = k >= 2 ? (res.means.row(0) - res.means.row(k - 1)).norm() : 0.0;
  res.collapsed = res.proportions.minCoeff() < 0.02 || sep < 0.1 * spread;
  return res;
}

std::string JeffreysReport::line() const {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.2f\xC2\xB1%.2f", value, se);
  return buf;
}

JeffreysReport jeffreys_between(const DensityModel& model, const LogTarget& target,
                                const ProposalDensity& proposal, RandomStream& p_stream,
                                RandomStream& q_stream, int batch) {
  ObjectiveEstimate e = jeffreys_value(model, target, proposal, p_stream, q_stream, batch);
  return {e.value, e.se};
}

std::string batch_csv(const SampleBatch& b) {
  std::string out = "index";
  for (int k = 0; k < b.dim(); ++k) out += ",x" + std::to_string(k);
  out += "\n";
  char buf[40];
  for (int i = 0; i < b.count(); ++i) {
    out += std::to_string(i);
    for (int k = 0; k < b.dim(); ++k) {
      std::snprintf(buf, sizeof buf, ",%.12e", b.samples(i, k));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

SampleBatch batch_from_csv(const std::string& text, const std::string& provenance) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("csv: empty input");
  int cols = static_cast<int>(std::count(line.begin(), line.end(), ','));
  bool indexed = line.rfind("index", 0) == 0;
  int d = indexed ? cols : cols + 1;
  std::vector<double> vals;
  int rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    int c = 0;
    while (std::getline(ls, cell, ',')) {
      if (!(indexed && c == 0)) vals.push_back(std::stod(cell));
      ++c;
    }
    if (c != cols + 1) throw std::invalid_argument("csv: ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  SampleBatch b;
  b.provenance = provenance;
  b.samples.resize(rows, d);
  for (int i = 0; i < rows; ++i)
    for (int k = 0; k < d; ++k) b.samples(i, k) = vals[static_cast<size_t>(i) * d + k];
  return b;
}

}  // namespace msign
