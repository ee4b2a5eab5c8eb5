#include "msign/objectives.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace msign {

Baseline parse_baseline(const std::string& s) {
  if (s == "none") return Baseline::None;
  if (s == "mean") return Baseline::Mean;
  throw std::invalid_argument("unknown baseline '" + s + "'");
}

double tree_sum(const double* v, int n) {
  if (n <= 0) return 0.0;
  if (n <= 8) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += v[i];
    return s;
  }
  int h = n / 2;
  return tree_sum(v, h) + tree_sum(v + h, n - h);
}

namespace {

double vsum(const Vec& v) { return tree_sum(v.data(), static_cast<int>(v.size())); }

double mean(const Vec& v) { return vsum(v) / static_cast<double>(v.size()); }

double sample_se(const Vec& v) {
  const int n = static_cast<int>(v.size());
  if (n < 2) return 0.0;
  double m = mean(v);
  Vec d = (v.array() - m).square();
  return std::sqrt(vsum(d) / (n - 1) / n);
}

Vec coefficients(const Vec& lp, const Vec& lq, Baseline b) {
  Vec c = lp - lq;
  if (b == Baseline::None) return c.array() + 1.0;
  return c.array() - mean(c);
}

// Sum_i c_i * rows_i in fixed order.
Vec weighted_rows(const Mat& rows, const Vec& c) {
  Vec g = Vec::Zero(rows.cols());
  for (int i = 0; i < rows.rows(); ++i) g += c(i) * rows.row(i).transpose();
  return g;
}

void check_terms(const JeffreysTerms& t, bool proposal_side) {
  if (t.p_logp.size() != t.p_logq.size() || t.p_logp.size() < 1)
    throw std::invalid_argument("objective: p-side terms mismatched or empty");
  if (proposal_side &&
      (t.s_logq.size() != t.s_logp.size() || t.s_logq.size() != t.s_logprop.size() ||
       t.s_logq.size() < 1))
    throw std::invalid_argument("objective: proposal-side terms mismatched or empty");
}

}  // namespace

ImportanceWeights normalized_weights(const Vec& log_w) {
  ImportanceWeights r;
  r.max_log_weight = log_w.maxCoeff();
  if (!std::isfinite(r.max_log_weight)) {
    std::ostringstream os;
    os << "importance weights: all weights zero or invalid, max log-weight " << r.max_log_weight;
    throw NumericalError(os.str());
  }
  Vec e = (log_w.array() - r.max_log_weight).exp();
  double s = vsum(e);
  r.w = e / s;
  Vec w2 = r.w.array().square();
  r.ess = 1.0 / vsum(w2);
  return r;
}

ObjectiveEstimate kl_from_terms(const JeffreysTerms& t, bool with_gradient, Baseline baseline) {
  check_terms(t, false);
  ObjectiveEstimate e;
  e.batch = static_cast<int>(t.p_logp.size());
  Vec d = t.p_logp - t.p_logq;
  e.kl_pq = mean(d);
  e.value = e.kl_pq;
  e.se = sample_se(d);
  e.ess = e.batch;
  if (with_gradient) {
    Vec c = coefficients(t.p_logp, t.p_logq, baseline);
    e.gradient = weighted_rows(t.p_grad, c) / static_cast<double>(e.batch);
  }
  return e;
}

ObjectiveEstimate jeffreys_from_terms(const JeffreysTerms& t, bool with_gradient,
                                      Baseline baseline) {
  check_terms(t, true);
  ObjectiveEstimate e = kl_from_terms(t, with_gradient, baseline);
  ImportanceWeights iw = normalized_weights(t.s_logq - t.s_logprop);
  Vec f = t.s_logq - t.s_logp;
  Vec wf = iw.w.array() * f.array();
  e.kl_qp = vsum(wf);
  Vec r2 = iw.w.array().square() * (f.array() - e.kl_qp).square();
  double se2 = std::sqrt(vsum(r2));
  e.se = std::sqrt(e.se * e.se + se2 * se2);
  e.value = e.kl_pq + e.kl_qp;
  e.ess = iw.ess;
  if (with_gradient) e.gradient -= weighted_rows(t.s_grad, iw.w);
  return e;
}

namespace {

void fill_p_side(const DensityModel& model, const LogTarget& target, RandomStream& ps, int batch,
                 bool grad, JeffreysTerms& t) {
  SampleBatch b = model.sample(ps, batch);
  t.p_logp.resize(batch);
  t.p_logq.resize(batch);
  if (grad) t.p_grad.resize(batch, model.num_params());
  for (int i = 0; i < batch; ++i) {
    Vec x = b.samples.row(i).transpose();
    if (grad) {
      Vec g;
      t.p_logp(i) = model.log_density(x, &g);
      t.p_grad.row(i) = g.transpose();
    } else {
      t.p_logp(i) = b.log_p(i);
    }
    t.p_logq(i) = target(x);
  }
}

void fill_s_side(const DensityModel& model, const LogTarget& target,
                 const ProposalDensity& proposal, RandomStream& qs, int batch, bool grad,
                 JeffreysTerms& t) {
  SampleBatch b = proposal.sample(qs, batch);
  t.s_logq.resize(batch);
  t.s_logp.resize(batch);
  t.s_logprop = b.log_p;
  if (grad) t.s_grad.resize(batch, model.num_params());
  for (int i = 0; i < batch; ++i) {
    Vec x = b.samples.row(i).transpose();
    t.s_logq(i) = target(x);
    if (grad) {
      Vec g;
      t.s_logp(i) = model.log_density(x, &g);
      t.s_grad.row(i) = g.transpose();
    } else {
      t.s_logp(i) = model.log_density(x);
    }
  }
}

}  // namespace

ObjectiveEstimate jeffreys_value(const DensityModel& model, const LogTarget& target,
                                 const ProposalDensity& proposal, RandomStream& p_stream,
                                 RandomStream& q_stream, int batch) {
  JeffreysTerms t;
  fill_p_side(model, target, p_stream, batch, false, t);
  fill_s_side(model, target, proposal, q_stream, batch, false, t);
  return jeffreys_from_terms(t, false);
}

ObjectiveEstimate jeffreys_grad(const DensityModel& model, const LogTarget& target,
                                const ProposalDensity& proposal, RandomStream& p_stream,
                                RandomStream& q_stream, int batch, Baseline baseline) {
  JeffreysTerms t;
  fill_p_side(model, target, p_stream, batch, true, t);
  fill_s_side(model, target, proposal, q_stream, batch, true, t);
  ObjectiveEstimate e = jeffreys_from_terms(t, true, baseline);
  if (e.ess < 0.05 * batch)
    std::cerr << "warning: proposal ESS " << e.ess << " below 5% of batch " << batch << "\n";
  return e;
}

ObjectiveEstimate kl_grad(const DensityModel& model, const LogTarget& target,
                          RandomStream& p_stream, int batch, Baseline baseline) {
  JeffreysTerms t;
  fill_p_side(model, target, p_stream, batch, true, t);
  return kl_from_terms(t, true, baseline);
}

FrozenBatch freeze_batch(const DensityModel& model, const LogTarget& target,
                         const ProposalDensity& proposal, RandomStream& p_stream,
                         RandomStream& q_stream, int batch) {
  FrozenBatch fb;
  SampleBatch pb = model.sample(p_stream, batch);
  fb.p_samples = pb.samples;
  fb.p_logref.resize(batch);
  fb.p_logq.resize(batch);
  for (int i = 0; i < batch; ++i) {
    Vec x = pb.samples.row(i).transpose();
    fb.p_logref(i) = model.log_density(x);
    fb.p_logq(i) = target(x);
  }
  SampleBatch sb = proposal.sample(q_stream, batch);
  fb.s_samples = sb.samples;
  fb.s_logprop = sb.log_p;
  fb.s_logq.resize(batch);
  for (int i = 0; i < batch; ++i) fb.s_logq(i) = target(sb.samples.row(i).transpose());
  return fb;
}

double frozen_value(const DensityModel& model, const FrozenBatch& fb) {
  const int n = static_cast<int>(fb.p_samples.rows());
  Vec a(n);
  for (int i = 0; i < n; ++i) {
    double lp = model.log_density(fb.p_samples.row(i).transpose());
    a(i) = std::exp(lp - fb.p_logref(i)) * (lp - fb.p_logq(i));
  }
  const int m = static_cast<int>(fb.s_samples.rows());
  Vec f(m);
  for (int i = 0; i < m; ++i) f(i) = fb.s_logq(i) - model.log_density(fb.s_samples.row(i).transpose());
  ImportanceWeights iw = normalized_weights(fb.s_logq - fb.s_logprop);
  Vec wf = iw.w.array() * f.array();
  return mean(a) + vsum(wf);
}

ObjectiveEstimate frozen_grad(const DensityModel& model, const FrozenBatch& fb, Baseline baseline) {
  JeffreysTerms t;
  const int n = static_cast<int>(fb.p_samples.rows()), m = static_cast<int>(fb.s_samples.rows());
  t.p_logq = fb.p_logq;
  t.p_logp.resize(n);
  t.p_grad.resize(n, model.num_params());
  for (int i = 0; i < n; ++i) {
    Vec g;
    t.p_logp(i) = model.log_density(fb.p_samples.row(i).transpose(), &g);
    t.p_grad.row(i) = g.transpose();
  }
  t.s_logq = fb.s_logq;
  t.s_logprop = fb.s_logprop;
  t.s_logp.resize(m);
  t.s_grad.resize(m, model.num_params());
  for (int i = 0; i < m; ++i) {
    Vec g;
    t.s_logp(i) = model.log_density(fb.s_samples.row(i).transpose(), &g);
    t.s_grad.row(i) = g.transpose();
  }
  return jeffreys_from_terms(t, true, baseline);
}

namespace {

double log_mix(double x, double m1, double m2, double s) {
  static const double l2pi = std::log(2.0 * std::acos(-1.0));
  double a = -0.5 * (x - m1) * (x - m1) / (s * s);
  double b = -0.5 * (x - m2) * (x - m2) / (s * s);
  double m = std::max(a, b);
  return m + std::log(0.5 * std::exp(a - m) + 0.5 * std::exp(b - m)) - std::log(s) - 0.5 * l2pi;
}

double integrate(const std::function<double(double)>& f, double lo, double hi, double tol) {
  double err = 0.0;
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, lo, hi, 15, tol, &err);
}

}  // namespace

double MixtureLandscape::kl_pq(double t1, double t2) const {
  auto f = [&](double x) {
    double lp = log_mix(x, t1, t2, sigma);
    return std::exp(lp) * (lp - log_mix(x, mu1, mu2, sigma));
  };
  return integrate(f, lo, hi, tol);
}

double MixtureLandscape::kl_qp(double t1, double t2) const {
  auto f = [&](double x) {
    double lq = log_mix(x, mu1, mu2, sigma);
    return std::exp(lq) * (lq - log_mix(x, t1, t2, sigma));
  };
  return integrate(f, lo, hi, tol);
}

std::vector<LandscapeRow> landscape_grid(const MixtureLandscape& m, double lo, double hi, int n) {
  std::vector<LandscapeRow> rows;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double t1 = lo + (hi - lo) * i / (n - 1);
      double t2 = lo + (hi - lo) * j / (n - 1);
      double a = m.kl_pq(t1, t2), b = m.kl_qp(t1, t2);
      rows.push_back({t1, t2, a, b, a + b});
    }
  return rows;
}

std::string landscape_csv(const std::vector<LandscapeRow>& rows) {
  std::string out = "theta1,theta2,kl_pq,kl_qp,jeffreys\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.12e,%.12e,%.12e\n", r.t1, r.t2, r.kl_pq, r.kl_qp,
                  r.jeffreys);
    out += buf;
  }
  return out;
}

}  // namespace msign
