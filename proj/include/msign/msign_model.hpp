#pragma once

#include <memory>
#include <vector>

#include "msign/invertible_flow.hpp"
#include "msign/lattice_prior.hpp"
#include "msign/prior_conditioning.hpp"
#include "msign/random.hpp"

namespace msign {

// Density with trainable parameters, as seen by the objectives.
class DensityModel {
 public:
  virtual ~DensityModel() = default;
  virtual int dim() const = 0;
  virtual int num_params() const = 0;
  // Draws with log_p filled.
  virtual SampleBatch sample(RandomStream& stream, int count) const = 0;
  // log p(x); gradient wrt parameters at fixed x when grad is non-null.
  virtual double log_density(const Vec& x, Vec* grad = nullptr) const = 0;
};

// Sampler with an exact log-density and no trainable parameters.
class ProposalDensity {
 public:
  virtual ~ProposalDensity() = default;
  virtual int dim() const = 0;
  virtual SampleBatch sample(RandomStream& stream, int count) const = 0;
  virtual double log_density(const Vec& x) const = 0;
};

// Scales are numbered 1..L (coarsest first).
class MsignModel {
 public:
  // conditioners[l - 1] links scale l - 1 to scale l; conditioners[0] is unused.
  MsignModel(const std::vector<int>& sides, std::vector<PriorConditioner> conditioners,
             const FlowSpec& flow_template);

  int scales() const { return static_cast<int>(flows_.size()); }
  int side(int l) const { return flows_.at(l - 1).side(); }
  int dim(int l) const { return flows_.at(l - 1).dim(); }
  int active_scale() const { return active_; }
  void set_active_scale(int l);
  // Highest scale whose training finished (0 before the bootstrap).
  int trained_through() const { return trained_; }
  void mark_trained(int l) { trained_ = l; }

  const FlowStack& flow(int l) const { return flows_.at(l - 1); }
  FlowStack& flow(int l) { return flows_.at(l - 1); }
  const PriorConditioner& conditioner(int l) const { return pcs_.at(l - 1); }

  // Flat parameters of flows 1..l, concatenated in scale order.
  int param_count(int l) const;
  Vec get_params(int l) const;
  void set_params(int l, const Vec& p);
  // Offset of flow l inside the flat vector.
  int param_offset(int l) const;

  // x = T(z) at scale l; z has dimension d_l, partitioned (z_1, ..., z_l).
  Vec transform(const Vec& z, int l, double* log_p = nullptr) const;
  Vec inverse_transform(const Vec& x, int l) const;

  // Coarse-to-fine sampling at scale l (0 means active scale).
  SampleBatch sample(RandomStream& stream, int count, double temperature = 1.0, int l = 0) const;

  // Exact log-density at scale l via the inverse pass; gradient wrt
  // get_params(l) when grad is non-null.
  double log_density(const Vec& x, int l = 0, Vec* grad = nullptr) const;

 private:
  std::vector<FlowStack> flows_;
  std::vector<PriorConditioner> pcs_;
  int active_ = 1;
  int trained_ = 0;
  int resolve(int l) const;
};

// Model restricted to one scale, exposed through the DensityModel interface.
class MsignDensity : public DensityModel {
 public:
  MsignDensity(const MsignModel& m, int l) : m_(m), l_(l) {}
  int dim() const override { return m_.dim(l_); }
  int num_params() const override { return m_.param_count(l_); }
  SampleBatch sample(RandomStream& stream, int count) const override {
    return m_.sample(stream, count, 1.0, l_);
  }
  double log_density(const Vec& x, Vec* grad = nullptr) const override {
    return m_.log_density(x, l_, grad);
  }

 private:
  const MsignModel& m_;
  int l_;
};

// q~_l: frozen copy of the model through scale l - 1 concatenated with PC_l.
class StageProposal : public ProposalDensity {
 public:
  StageProposal(const MsignModel& model, int l);
  int dim() const override { return pc_.dim; }
  SampleBatch sample(RandomStream& stream, int count) const override;
  double log_density(const Vec& x) const override;
  int scale() const { return l_; }

 private:
  std::shared_ptr<const MsignModel> snapshot_;
  PriorConditioner pc_;
  int l_;
};

StageProposal proposal_density_and_sampler(const MsignModel& model, int l);

double std_normal_log_density(const Vec& z);

}  // namespace msign
