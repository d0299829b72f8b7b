// SPDX-License-Identifier: Apache-2.0
//
// Minimal batched neural-network primitives with hand-written backward
// passes, plus Adam and binary checkpoint serialization. Batches are stored
// column-wise: a batch of N vectors of dimension d is a (d x N) matrix.

#pragma once

#include "tfs/types.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace tfs {

// Deterministic standard normal draws (Box-Muller over explicit uniforms).
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : rng_(seed) {}
  double operator()() {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    double u1 = std::max(uni(rng_), 1e-300);
    double u2 = uni(rng_);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }
  std::mt19937_64& raw() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

enum class Act { None, Softplus10, Softplus100, Tanh };

MatX act_forward(Act a, const MatX& z);
MatX act_deriv(Act a, const MatX& z);
MatX act_second_deriv(Act a, const MatX& z);

struct Linear {
  MatX W;   // (out x in)
  MatX b;   // (out x 1)
  MatX gW;  // gradient accumulators, same shapes
  MatX gb;

  int in_dim() const { return static_cast<int>(W.cols()); }
  int out_dim() const { return static_cast<int>(W.rows()); }

  void init(int in, int out, NormalSampler& rng, double w_std);
  void init_zero(int in, int out);
  void zero_grad();

  MatX forward(const MatX& X) const;
  // Accumulates gW/gb and returns the gradient w.r.t. X.
  MatX backward(const MatX& X, const MatX& gY);
};

// A named view of one parameter tensor and its gradient.
struct ParamRef {
  std::string name;
  MatX* value;
  MatX* grad;
  double lr_scale = 1.0;  // per-parameter learning-rate multiplier
};

using ParamList = std::vector<ParamRef>;

void append_linear_params(ParamList& out, const std::string& prefix, Linear& lin);
void zero_grads(const ParamList& params);
std::size_t param_count(const ParamList& params);

class AdamOptimizer {
 public:
  AdamOptimizer(double lr = 5.0e-4, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const ParamList& params);
  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<MatX> m_, v_;
};

// Binary checkpoint: named tensors plus string metadata. Round trips are
// bitwise stable.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::map<std::string, MatX> tensors;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  static Checkpoint from_params(const ParamList& params);
  void restore_params(const ParamList& params) const;
};

// FNV-1a hash of a byte string, hex encoded; used for dataset/skeleton hashes.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace tfs
