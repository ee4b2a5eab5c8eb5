#include "msign/msign_model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace msign {

double std_normal_log_density(const Vec& z) {
  static const double l2pi = std::log(2.0 * std::acos(-1.0));
  return -0.5 * z.squaredNorm() - 0.5 * static_cast<double>(z.size()) * l2pi;
}

MsignModel::MsignModel(const std::vector<int>& sides, std::vector<PriorConditioner> conditioners,
                       const FlowSpec& flow_template)
    : pcs_(std::move(conditioners)) {
  if (sides.empty()) throw std::invalid_argument("MsignModel: no scales");
  if (pcs_.size() != sides.size())
    throw std::invalid_argument("MsignModel: need one conditioner slot per scale");
  for (size_t l = 0; l < sides.size(); ++l) {
    FlowSpec fs = flow_template;
    fs.side = sides[l];
    fs.seed = splitmix64(flow_template.seed + 0x1000 * (l + 1));
    flows_.push_back(FlowStack::init_identity(fs));
    if (l > 0) {
      const auto& pc = pcs_[l];
      if (pc.dim != sides[l] * sides[l] || pc.coarse_dim != sides[l - 1] * sides[l - 1])
        throw std::invalid_argument("MsignModel: conditioner shape mismatch at scale " +
                                    std::to_string(l + 1));
    }
  }
}

void MsignModel::set_active_scale(int l) {
  if (l < 1 || l > scales()) throw std::out_of_range("MsignModel: scale out of range");
  active_ = l;
}

int MsignModel::resolve(int l) const {
  int r = l == 0 ? active_ : l;
  if (r < 1 || r > scales()) throw std::out_of_range("MsignModel: scale out of range");
  return r;
}

int MsignModel::param_offset(int l) const {
  int off = 0;
  for (int k = 1; k < l; ++k) off += flows_[k - 1].total_params();
  return off;
}

int MsignModel::param_count(int l) const { return param_offset(l + 1); }

Vec MsignModel::get_params(int l) const {
  Vec p(param_count(l));
  for (int k = 1; k <= l; ++k)
    p.segment(param_offset(k), flows_[k - 1].total_params()) = flows_[k - 1].params();
  return p;
}

void MsignModel::set_params(int l, const Vec& p) {
  if (p.size() != param_count(l)) throw std::invalid_argument("set_params: size mismatch");
  for (int k = 1; k <= l; ++k)
    flows_[k - 1].params() = p.segment(param_offset(k), flows_[k - 1].total_params());
}

Vec MsignModel::transform(const Vec& z, int l, double* log_p) const {
  l = resolve(l);
  if (z.size() != dim(l)) throw std::invalid_argument("transform: dimension mismatch");
  double lp = std_normal_log_density(z);
  auto [x, ld] = flows_[0].forward(z.head(dim(1)));
  lp -= ld;
  int off = dim(1);
  for (int k = 2; k <= l; ++k) {
    const auto& pc = pcs_[k - 1];
    Vec xt = pc_forward(pc, x, z.segment(off, pc.z_dim()));
    off += pc.z_dim();
    lp += pc.log_det_inverse;
    auto [xk, ldk] = flows_[k - 1].forward(xt);
    lp -= ldk;
    if (!xk.allFinite()) throw NumericalError("sample: non-finite value at scale " + std::to_string(k));
    x = std::move(xk);
  }
  if (log_p) *log_p = lp;
  return x;
}

Vec MsignModel::inverse_transform(const Vec& x, int l) const {
  l = resolve(l);
  if (x.size() != dim(l)) throw std::invalid_argument("inverse_transform: dimension mismatch");
  Vec z(dim(l));
  Vec cur = x;
  int end = dim(l);
  for (int k = l; k >= 2; --k) {
    Vec xt = flows_[k - 1].inverse(cur).first;
    auto [xc, zk] = pc_inverse(pcs_[k - 1], xt);
    end -= static_cast<int>(zk.size());
    z.segment(end, zk.size()) = zk;
    cur = std::move(xc);
  }
  z.head(dim(1)) = flows_[0].inverse(cur).first;
  return z;
}

SampleBatch MsignModel::sample(RandomStream& stream, int count, double temperature, int l) const {
  l = resolve(l);
  SampleBatch b;
  b.scale = l;
  b.provenance = "msign";
  b.samples.resize(count, dim(l));
  b.log_p.resize(count);
  for (int i = 0; i < count; ++i) {
    Vec z = stream.normal_vec(dim(l)) * temperature;
    double lp = 0.0;
    b.samples.row(i) = transform(z, l, &lp).transpose();
    b.log_p(i) = lp;
  }
  return b;
}

double MsignModel::log_density(const Vec& x, int l, Vec* grad) const {
  l = resolve(l);
  if (x.size() != dim(l)) {
    std::ostringstream os;
    os << "log_density: dimension " << x.size() << " does not match scale " << l << " ("
       << dim(l) << ")";
    throw std::invalid_argument(os.str());
  }
  std::vector<Tape> tapes(grad ? l : 0);
  std::vector<Vec> zs(l + 1);
  double lp = 0.0;
  Vec cur = x;
  for (int k = l; k >= 2; --k) {
    auto [xt, ld] = flows_[k - 1].inverse(cur, grad ? &tapes[k - 1] : nullptr);
    lp += ld;
    auto [xc, zk] = pc_inverse(pcs_[k - 1], xt);
    lp += std_normal_log_density(zk) + pcs_[k - 1].log_det_inverse;
    zs[k] = std::move(zk);
    cur = std::move(xc);
  }
  auto [z1, ld1] = flows_[0].inverse(cur, grad ? &tapes[0] : nullptr);
  lp += ld1 + std_normal_log_density(z1);
  if (!grad) return lp;

  grad->setZero(param_count(l));
  Vec adj;
  Vec g1 = flows_[0].backward(tapes[0], -z1, 1.0, &adj);
  grad->segment(param_offset(1), g1.size()) = g1;
  for (int k = 2; k <= l; ++k) {
    const auto& pc = pcs_[k - 1];
    Vec xt_adj = pc.pool.transpose() * adj - pc.inv_z_map.transpose() * zs[k];
    Vec gk = flows_[k - 1].backward(tapes[k - 1], xt_adj, 1.0, &adj);
    grad->segment(param_offset(k), gk.size()) = gk;
  }
  return lp;
}

StageProposal::StageProposal(const MsignModel& model, int l) : l_(l) {
  if (l < 2 || l > model.scales())
    throw std::out_of_range("proposal: scale must be in 2..L");
  if (model.trained_through() < l - 1) {
    std::ostringstream os;
    os << "proposal: stage " << l - 1 << " not trained";
    throw std::logic_error(os.str());
  }
  snapshot_ = std::make_shared<const MsignModel>(model);
  pc_ = model.conditioner(l);
}

SampleBatch StageProposal::sample(RandomStream& stream, int count) const {
  SampleBatch coarse = snapshot_->sample(stream, count, 1.0, l_ - 1);
  SampleBatch b;
  b.scale = l_;
  b.provenance = "proposal";
  b.samples.resize(count, pc_.dim);
  b.log_p.resize(count);
  for (int i = 0; i < count; ++i) {
    Vec z = stream.normal_vec(pc_.z_dim());
    b.samples.row(i) = pc_forward(pc_, coarse.samples.row(i).transpose(), z).transpose();
    b.log_p(i) = coarse.log_p(i) + std_normal_log_density(z) + pc_.log_det_inverse;
  }
  return b;
}

double StageProposal::log_density(const Vec& x) const {
  auto [xc, z] = pc_inverse(pc_, x);
  return snapshot_->log_density(xc, l_ - 1) + std_normal_log_density(z) + pc_.log_det_inverse;
}

StageProposal proposal_density_and_sampler(const MsignModel& model, int l) {
  return StageProposal(model, l);
}

}  // namespace msign
