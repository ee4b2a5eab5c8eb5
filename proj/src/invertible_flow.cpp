#include "msign/invertible_flow.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "msign/random.hpp"

namespace msign {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

int coupling_size(int h, int w) { return w * h + w + w * w + w + 2 * h * w + 2 * h; }

void check_finite(const Vec& v, size_t block) {
  if (!v.allFinite()) {
    std::ostringstream os;
    os << "flow: non-finite value after block " << block;
    throw NumericalError(os.str());
  }
}

int spec_dim(const FlowSpec& spec) { return spec.side > 0 ? spec.side * spec.side : spec.dim; }
int spec_channels(const FlowSpec& spec) { return spec.side > 0 ? 4 : spec.dim; }

}  // namespace

int FlowStack::param_count(const FlowSpec& spec) {
  const int d = spec_dim(spec), c = spec_channels(spec);
  return spec.depth * (2 * d + c * c + coupling_size(d / 2, spec.hidden));
}

FlowStack FlowStack::init_identity(const FlowSpec& spec) {
  if (spec.side == 0) {
    if (spec.dim < 2 || spec.dim % 2 != 0) throw std::invalid_argument("flow: dim must be even");
  } else if (spec.side < 2 || spec.side % 2 != 0) {
    throw std::invalid_argument("flow: side must be even");
  }
  if (spec.depth < 1) throw std::invalid_argument("flow: depth must be at least 1");
  if (spec.hidden < 1) throw std::invalid_argument("flow: hidden width must be positive");
  FlowStack f;
  f.spec_ = spec;
  f.dim_ = spec_dim(spec);
  f.channels_ = spec_channels(spec);
  f.positions_ = f.dim_ / f.channels_;
  f.half_ = f.dim_ / 2;
  f.chan_index_.resize(f.dim_);
  if (spec.side > 0) {
    const int n = spec.side, m = n / 2;
    for (int bi = 0; bi < m; ++bi)
      for (int bj = 0; bj < m; ++bj)
        for (int c = 0; c < 4; ++c) {
          int a = c / 2, b = c % 2;
          f.chan_index_[(bi * m + bj) * 4 + c] = (2 * bi + a) * n + 2 * bj + b;
        }
  } else {
    for (int i = 0; i < f.dim_; ++i) f.chan_index_[i] = i;
  }
  const int hc = f.channels_ / 2;
  for (int par = 0; par < 2; ++par)
    for (int p = 0; p < f.positions_; ++p)
      for (int c = 0; c < f.channels_; ++c) {
        int group = (c / hc) == par ? 1 : 0;
        f.half_index_[par][group].push_back(f.lattice_index(p, c));
      }

  const int d = f.dim_, h = f.half_, w = spec.hidden;
  int off = 0;
  for (int k = 0; k < spec.depth; ++k) {
    f.blocks_.push_back({BlockKind::ActNorm, off, 2 * d, 0});
    off += 2 * d;
    f.blocks_.push_back({BlockKind::InvLinear, off, f.channels_ * f.channels_, 0});
    off += f.channels_ * f.channels_;
    f.blocks_.push_back({BlockKind::AffineCoupling, off, coupling_size(h, w), k % 2});
    off += coupling_size(h, w);
  }
  f.params_ = Vec::Zero(off);
  RandomStream rs(spec.seed);
  for (const auto& b : f.blocks_) {
    if (b.kind == BlockKind::InvLinear) {
      for (int i = 0; i < f.channels_; ++i) f.params_(b.offset + (f.channels_ + 1) * i) = 1.0;
    } else if (b.kind == BlockKind::AffineCoupling) {
      int o = b.offset;
      for (int i = 0; i < w * h; ++i) f.params_(o + i) = rs.normal() / std::sqrt(double(h));
      o += w * h + w;
      for (int i = 0; i < w * w; ++i) f.params_(o + i) = rs.normal() / std::sqrt(double(w));
    }
  }
  return f;
}

void FlowStack::net_forward(const FlowBlock& b, const Vec& a, NetCache& c) const {
  const int h = half_, w = spec_.hidden;
  const double* p = params_.data() + b.offset;
  CMapRM W1(p, w, h);
  Eigen::Map<const Vec> b1(p + w * h, w);
  CMapRM W2(p + w * h + w, w, w);
  Eigen::Map<const Vec> b2(p + w * h + w + w * w, w);
  CMapRM W3(p + w * h + 2 * w + w * w, 2 * h, w);
  Eigen::Map<const Vec> b3(p + w * h + 2 * w + w * w + 2 * h * w, 2 * h);
  c.a = a;
  c.h1 = (W1 * a + b1).array().tanh();
  c.h2 = (W2 * c.h1 + b2).array().tanh();
  c.out = W3 * c.h2 + b3;
}

Vec FlowStack::net_backward(const FlowBlock& b, const NetCache& c, const Vec& out_adj,
                            Vec& grad) const {
  const int h = half_, w = spec_.hidden;
  const double* p = params_.data() + b.offset;
  double* g = grad.data() + b.offset;
  CMapRM W1(p, w, h);
  CMapRM W2(p + w * h + w, w, w);
  CMapRM W3(p + w * h + 2 * w + w * w, 2 * h, w);
  MapRM gW1(g, w, h);
  Eigen::Map<Vec> gb1(g + w * h, w);
  MapRM gW2(g + w * h + w, w, w);
  Eigen::Map<Vec> gb2(g + w * h + w + w * w, w);
  MapRM gW3(g + w * h + 2 * w + w * w, 2 * h, w);
  Eigen::Map<Vec> gb3(g + w * h + 2 * w + w * w + 2 * h * w, 2 * h);

  gW3.noalias() += out_adj * c.h2.transpose();
  gb3 += out_adj;
  Vec dh2 = W3.transpose() * out_adj;
  Vec dz2 = dh2.array() * (1.0 - c.h2.array().square());
  gW2.noalias() += dz2 * c.h1.transpose();
  gb2 += dz2;
  Vec dh1 = W2.transpose() * dz2;
  Vec dz1 = dh1.array() * (1.0 - c.h1.array().square());
  gW1.noalias() += dz1 * c.a.transpose();
  gb1 += dz1;
  return W1.transpose() * dz1;
}

std::pair<Vec, double> FlowStack::block_forward(const FlowBlock& b, const Vec& v) const {
  const int d = dim_;
  switch (b.kind) {
    case BlockKind::ActNorm: {
      Eigen::Map<const Vec> s(params_.data() + b.offset, d);
      Eigen::Map<const Vec> t(params_.data() + b.offset + d, d);
      Vec y = v.array() * s.array().exp() + t.array();
      return {y, s.sum()};
    }
    case BlockKind::InvLinear: {
      CMapRM M(params_.data() + b.offset, channels_, channels_);
      int sign = 0;
      double ld = log_abs_det(M, &sign);
      if (sign == 0 || ld < std::log(1e-8)) throw NumericalError("inv_linear: |det M| below 1e-8");
      Vec y(d);
      for (int p = 0; p < positions_; ++p) {
        Vec xp(channels_);
        for (int c = 0; c < channels_; ++c) xp(c) = v(lattice_index(p, c));
        Vec yp = M * xp;
        for (int c = 0; c < channels_; ++c) y(lattice_index(p, c)) = yp(c);
      }
      return {y, positions_ * ld};
    }
    case BlockKind::AffineCoupling: {
      const auto& ia = half_index_[b.parity][0];
      const auto& ib = half_index_[b.parity][1];
      const int h = half_;
      Vec a(h);
      for (int i = 0; i < h; ++i) a(i) = v(ia[i]);
      NetCache c;
      net_forward(b, a, c);
      const double sm = spec_.s_max;
      Vec y = v;
      double ld = 0.0;
      for (int i = 0; i < h; ++i) {
        double s = sm * std::tanh(c.out(i) / sm);
        y(ib[i]) = v(ib[i]) * std::exp(s) + c.out(h + i);
        ld += s;
      }
      return {y, ld};
    }
  }
  return {v, 0.0};
}

std::pair<Vec, double> FlowStack::block_inverse(const FlowBlock& b, const Vec& v) const {
  const int d = dim_;
  switch (b.kind) {
    case BlockKind::ActNorm: {
      Eigen::Map<const Vec> s(params_.data() + b.offset, d);
      Eigen::Map<const Vec> t(params_.data() + b.offset + d, d);
      Vec x = (v.array() - t.array()) * (-s.array()).exp();
      return {x, -s.sum()};
    }
    case BlockKind::InvLinear: {
      CMapRM M(params_.data() + b.offset, channels_, channels_);
      int sign = 0;
      double ld = log_abs_det(M, &sign);
      if (sign == 0 || ld < std::log(1e-8)) throw NumericalError("inv_linear: |det M| below 1e-8");
      Mat Mi = Mat(M).inverse();
      Vec x(d);
      for (int p = 0; p < positions_; ++p) {
        Vec yp(channels_);
        for (int c = 0; c < channels_; ++c) yp(c) = v(lattice_index(p, c));
        Vec xp = Mi * yp;
        for (int c = 0; c < channels_; ++c) x(lattice_index(p, c)) = xp(c);
      }
      return {x, -positions_ * ld};
    }
    case BlockKind::AffineCoupling: {
      const auto& ia = half_index_[b.parity][0];
      const auto& ib = half_index_[b.parity][1];
      const int h = half_;
      Vec a(h);
      for (int i = 0; i < h; ++i) a(i) = v(ia[i]);
      NetCache c;
      net_forward(b, a, c);
      const double sm = spec_.s_max;
      Vec x = v;
      double ld = 0.0;
      for (int i = 0; i < h; ++i) {
        double s = sm * std::tanh(c.out(i) / sm);
        x(ib[i]) = (v(ib[i]) - c.out(h + i)) * std::exp(-s);
        ld -= s;
      }
      return {x, ld};
    }
  }
  return {v, 0.0};
}

Vec FlowStack::block_backward_forward(const FlowBlock& b, const Vec& in, const Vec& out_adj,
                                      double ld_adj, Vec& grad) const {
  const int d = dim_;
  switch (b.kind) {
    case BlockKind::ActNorm: {
      Eigen::Map<const Vec> s(params_.data() + b.offset, d);
      Vec es = s.array().exp();
      Vec in_adj = out_adj.array() * es.array();
      grad.segment(b.offset, d).array() += in_adj.array() * in.array() + ld_adj;
      grad.segment(b.offset + d, d) += out_adj;
      return in_adj;
    }
    case BlockKind::InvLinear: {
      CMapRM M(params_.data() + b.offset, channels_, channels_);
      MapRM gM(grad.data() + b.offset, channels_, channels_);
      Mat Mit = Mat(M).inverse().transpose();
      Vec in_adj(d);
      for (int p = 0; p < positions_; ++p) {
        Vec xp(channels_), gp(channels_);
        for (int c = 0; c < channels_; ++c) {
          xp(c) = in(lattice_index(p, c));
          gp(c) = out_adj(lattice_index(p, c));
        }
        gM += gp * xp.transpose();
        Vec ip = M.transpose() * gp;
        for (int c = 0; c < channels_; ++c) in_adj(lattice_index(p, c)) = ip(c);
      }
      gM += ld_adj * positions_ * Mit;
      return in_adj;
    }
    case BlockKind::AffineCoupling: {
      const auto& ia = half_index_[b.parity][0];
      const auto& ib = half_index_[b.parity][1];
      const int h = half_;
      Vec a(h);
      for (int i = 0; i < h; ++i) a(i) = in(ia[i]);
      NetCache c;
      net_forward(b, a, c);
      const double sm = spec_.s_max;
      Vec in_adj = out_adj;
      Vec net_adj(2 * h);
      for (int i = 0; i < h; ++i) {
        double th = std::tanh(c.out(i) / sm);
        double es = std::exp(sm * th);
        double gy = out_adj(ib[i]);
        in_adj(ib[i]) = gy * es;
        double gs = gy * in(ib[i]) * es + ld_adj;
        net_adj(i) = gs * (1.0 - th * th);
        net_adj(h + i) = gy;
      }
      Vec ga = net_backward(b, c, net_adj, grad);
      for (int i = 0; i < h; ++i) in_adj(ia[i]) += ga(i);
      return in_adj;
    }
  }
  return out_adj;
}

Vec FlowStack::block_backward_inverse(const FlowBlock& b, const Vec& in, const Vec& out_adj,
                                      double ld_adj, Vec& grad) const {
  const int d = dim_;
  switch (b.kind) {
    case BlockKind::ActNorm: {
      Eigen::Map<const Vec> s(params_.data() + b.offset, d);
      Eigen::Map<const Vec> t(params_.data() + b.offset + d, d);
      Vec ems = (-s.array()).exp();
      Vec out = (in.array() - t.array()) * ems.array();
      Vec in_adj = out_adj.array() * ems.array();
      grad.segment(b.offset, d).array() += -out_adj.array() * out.array() - ld_adj;
      grad.segment(b.offset + d, d) -= in_adj;
      return in_adj;
    }
    case BlockKind::InvLinear: {
      CMapRM M(params_.data() + b.offset, channels_, channels_);
      MapRM gM(grad.data() + b.offset, channels_, channels_);
      Mat Mi = Mat(M).inverse();
      Mat Mit = Mi.transpose();
      Vec in_adj(d);
      for (int p = 0; p < positions_; ++p) {
        Vec yp(channels_), gp(channels_);
        for (int c = 0; c < channels_; ++c) {
          yp(c) = in(lattice_index(p, c));
          gp(c) = out_adj(lattice_index(p, c));
        }
        Vec xp = Mi * yp;
        Vec ip = Mit * gp;
        gM -= ip * xp.transpose();
        for (int c = 0; c < channels_; ++c) in_adj(lattice_index(p, c)) = ip(c);
      }
      gM -= ld_adj * positions_ * Mit;
      return in_adj;
    }
    case BlockKind::AffineCoupling: {
      const auto& ia = half_index_[b.parity][0];
      const auto& ib = half_index_[b.parity][1];
      const int h = half_;
      Vec a(h);
      for (int i = 0; i < h; ++i) a(i) = in(ia[i]);
      NetCache c;
      net_forward(b, a, c);
      const double sm = spec_.s_max;
      Vec in_adj = out_adj;
      Vec net_adj(2 * h);
      for (int i = 0; i < h; ++i) {
        double th = std::tanh(c.out(i) / sm);
        double ems = std::exp(-sm * th);
        double xb = (in(ib[i]) - c.out(h + i)) * ems;
        double gx = out_adj(ib[i]);
        in_adj(ib[i]) = gx * ems;
        double gs = -gx * xb - ld_adj;
        net_adj(i) = gs * (1.0 - th * th);
        net_adj(h + i) = -gx * ems;
      }
      Vec ga = net_backward(b, c, net_adj, grad);
      for (int i = 0; i < h; ++i) in_adj(ia[i]) += ga(i);
      return in_adj;
    }
  }
  return out_adj;
}

std::pair<Vec, double> FlowStack::forward(const Vec& v, Tape* tape) const {
  if (v.size() != dim_) throw std::invalid_argument("flow_forward: dimension mismatch");
  if (tape) {
    *tape = Tape{};
    tape->direction = Tape::Direction::Forward;
    tape->owner = this;
  }
  Vec cur = v;
  double ld = 0.0;
  for (size_t k = 0; k < blocks_.size(); ++k) {
    if (tape) tape->inputs.push_back(cur);
    auto [y, l] = block_forward(blocks_[k], cur);
    check_finite(y, k);
    cur = std::move(y);
    ld += l;
  }
  if (tape) tape->recorded = true;
  return {cur, ld};
}

std::pair<Vec, double> FlowStack::inverse(const Vec& v, Tape* tape) const {
  if (v.size() != dim_) throw std::invalid_argument("flow_inverse: dimension mismatch");
  if (tape) {
    *tape = Tape{};
    tape->direction = Tape::Direction::Inverse;
    tape->owner = this;
  }
  Vec cur = v;
  double ld = 0.0;
  for (size_t k = blocks_.size(); k-- > 0;) {
    if (tape) tape->inputs.push_back(cur);
    auto [x, l] = block_inverse(blocks_[k], cur);
    check_finite(x, k);
    cur = std::move(x);
    ld += l;
  }
  if (tape) tape->recorded = true;
  return {cur, ld};
}

Vec FlowStack::backward(Tape& tape, const Vec& out_adjoint, double logdet_seed,
                        Vec* in_adjoint) const {
  if (!tape.recorded) throw std::logic_error("grad_params: tape holds no completed pass");
  if (tape.consumed) throw std::logic_error("grad_params: tape already consumed");
  if (tape.owner != this) throw std::logic_error("grad_params: tape recorded by another stack");
  tape.consumed = true;
  Vec grad = Vec::Zero(params_.size());
  Vec adj = out_adjoint;
  const size_t nb = blocks_.size();
  for (size_t r = nb; r-- > 0;) {
    const Vec& in = tape.inputs[r];
    if (tape.direction == Tape::Direction::Forward) {
      adj = block_backward_forward(blocks_[r], in, adj, logdet_seed, grad);
    } else {
      // inputs[r] belongs to block nb - 1 - r
      adj = block_backward_inverse(blocks_[nb - 1 - r], in, adj, logdet_seed, grad);
    }
  }
  tape.inputs.clear();
  if (in_adjoint) *in_adjoint = adj;
  return grad;
}

FlowStack init_identity(const FlowSpec& spec) { return FlowStack::init_identity(spec); }

std::pair<Vec, double> flow_forward(const FlowStack& f, const Vec& v, Tape* tape) {
  return f.forward(v, tape);
}

std::pair<Vec, double> flow_inverse(const FlowStack& f, const Vec& v, Tape* tape) {
  return f.inverse(v, tape);
}

Vec grad_params(Tape& tape, const Vec& upstream, double logdet_seed, Vec* in_adjoint) {
  if (!tape.owner) throw std::logic_error("grad_params: empty tape");
  return tape.owner->backward(tape, upstream, logdet_seed, in_adjoint);
}

}  // namespace msign
