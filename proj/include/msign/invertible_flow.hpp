#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "msign/numlin.hpp"

namespace msign {

enum class BlockKind { ActNorm, InvLinear, AffineCoupling };

// Parameter layout per block, stored contiguously in FlowStack::params():
//   actnorm          [log_scale(d), shift(d)]                         2d
//   inv_linear       M, C x C channel mixing, row-major                C^2
//   affine_coupling  W1(w x h) b1(w) W2(w x w) b2(w) W3(2h x w) b3(2h)
//                    with h = d/2 and w the hidden width
struct FlowBlock {
  BlockKind kind;
  int offset = 0;
  int size = 0;
  int parity = 0;  // coupling: which channel pair is transformed
};

class FlowStack;

// Block-granular record of one pass; consumed by grad_params.
struct Tape {
  enum class Direction { Forward, Inverse };
  Direction direction = Direction::Forward;
  const FlowStack* owner = nullptr;
  std::vector<Vec> inputs;  // per executed block, in execution order
  bool recorded = false;
  bool consumed = false;
};

// Lattice fields (side > 0) are regrouped 2x2 space-to-depth into C = 4
// channels per position. With side == 0 the flow acts on a plain vector of
// even dimension dim as a single position with C = dim channels.
struct FlowSpec {
  int side = 2;     // lattice side; fields have dimension side^2
  int dim = 0;      // used only when side == 0
  int depth = 4;    // number of (actnorm, inv_linear, coupling) steps
  int hidden = 32;  // coupling net width
  double s_max = 5.0;
  std::uint64_t seed = 0;
};

class FlowStack {
 public:
  static FlowStack init_identity(const FlowSpec& spec);
  static int param_count(const FlowSpec& spec);

  int dim() const { return dim_; }
  int side() const { return spec_.side; }
  int positions() const { return positions_; }
  int channels() const { return channels_; }
  const FlowSpec& spec() const { return spec_; }
  int total_params() const { return static_cast<int>(params_.size()); }
  const Vec& params() const { return params_; }
  Vec& params() { return params_; }
  const std::vector<FlowBlock>& blocks() const { return blocks_; }

  // Vector index of channel c at position p.
  int lattice_index(int p, int c) const { return chan_index_[p * channels_ + c]; }

  std::pair<Vec, double> forward(const Vec& v, Tape* tape = nullptr) const;
  std::pair<Vec, double> inverse(const Vec& v, Tape* tape = nullptr) const;

  // Reverse accumulation through a recorded pass. out_adjoint is the adjoint of
  // the pass output, logdet_seed that of its logdet.
  Vec backward(Tape& tape, const Vec& out_adjoint, double logdet_seed,
               Vec* in_adjoint = nullptr) const;

 private:
  FlowSpec spec_;
  int dim_ = 0;
  int positions_ = 0;
  int channels_ = 4;
  int half_ = 0;
  std::vector<FlowBlock> blocks_;
  std::vector<int> chan_index_;
  std::vector<int> half_index_[2][2];  // [parity][0: conditioner, 1: transformed]
  Vec params_;

  struct NetCache {
    Vec a, h1, h2, out;
  };
  void net_forward(const FlowBlock& b, const Vec& a, NetCache& c) const;
  // Backprop through the coupling net: returns adjoint wrt its input, adds param grads.
  Vec net_backward(const FlowBlock& b, const NetCache& c, const Vec& out_adj, Vec& grad) const;

  std::pair<Vec, double> block_forward(const FlowBlock& b, const Vec& v) const;
  std::pair<Vec, double> block_inverse(const FlowBlock& b, const Vec& v) const;
  Vec block_backward_forward(const FlowBlock& b, const Vec& in, const Vec& out_adj, double ld_adj,
                             Vec& grad) const;
  Vec block_backward_inverse(const FlowBlock& b, const Vec& in, const Vec& out_adj, double ld_adj,
                             Vec& grad) const;
};

FlowStack init_identity(const FlowSpec& spec);
std::pair<Vec, double> flow_forward(const FlowStack& f, const Vec& v, Tape* tape = nullptr);
std::pair<Vec, double> flow_inverse(const FlowStack& f, const Vec& v, Tape* tape = nullptr);
Vec grad_params(Tape& tape, const Vec& upstream, double logdet_seed, Vec* in_adjoint = nullptr);

}  // namespace msign
