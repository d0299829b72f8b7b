// SPDX-License-Identifier: Apache-2.0

#include "tfs/nn.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace tfs {

namespace {

double softplus(double z, double beta) {
  double bz = beta * z;
  if (bz > 30.0) return z;
  return std::log1p(std::exp(bz)) / beta;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double act_beta(Act a) { return a == Act::Softplus100 ? 100.0 : 10.0; }

}  // namespace

MatX act_forward(Act a, const MatX& z) {
  switch (a) {
    case Act::None:
      return z;
    case Act::Tanh:
      return z.array().tanh();
    case Act::Softplus10:
    case Act::Softplus100: {
      double beta = act_beta(a);
      return z.unaryExpr([beta](double v) { return softplus(v, beta); });
    }
  }
  return z;
}

MatX act_deriv(Act a, const MatX& z) {
  switch (a) {
    case Act::None:
      return MatX::Ones(z.rows(), z.cols());
    case Act::Tanh: {
      MatX t = z.array().tanh();
      return 1.0 - t.array().square();
    }
    case Act::Softplus10:
    case Act::Softplus100: {
      double beta = act_beta(a);
      return z.unaryExpr([beta](double v) { return sigmoid(beta * v); });
    }
  }
  return MatX::Ones(z.rows(), z.cols());
}

MatX act_second_deriv(Act a, const MatX& z) {
  switch (a) {
    case Act::None:
      return MatX::Zero(z.rows(), z.cols());
    case Act::Tanh: {
      MatX t = z.array().tanh();
      return -2.0 * t.array() * (1.0 - t.array().square());
    }
    case Act::Softplus10:
    case Act::Softplus100: {
      double beta = act_beta(a);
      return z.unaryExpr([beta](double v) {
        double s = sigmoid(beta * v);
        return beta * s * (1.0 - s);
      });
    }
  }
  return MatX::Zero(z.rows(), z.cols());
}

void Linear::init(int in, int out, NormalSampler& rng, double w_std) {
  W.resize(out, in);
  for (int c = 0; c < in; ++c)
    for (int r = 0; r < out; ++r) W(r, c) = w_std * rng();
  b = MatX::Zero(out, 1);
  zero_grad();
}

void Linear::init_zero(int in, int out) {
  W = MatX::Zero(out, in);
  b = MatX::Zero(out, 1);
  zero_grad();
}

void Linear::zero_grad() {
  gW = MatX::Zero(W.rows(), W.cols());
  gb = MatX::Zero(b.rows(), 1);
}

MatX Linear::forward(const MatX& X) const {
  if (X.rows() != W.cols()) throw InvalidInput("Linear::forward: dimension mismatch");
  return (W * X).colwise() + b.col(0);
}

MatX Linear::backward(const MatX& X, const MatX& gY) {
  gW.noalias() += gY * X.transpose();
  gb.col(0) += gY.rowwise().sum();
  return W.transpose() * gY;
}

void append_linear_params(ParamList& out, const std::string& prefix, Linear& lin) {
  out.push_back({prefix + ".W", &lin.W, &lin.gW});
  out.push_back({prefix + ".b", &lin.b, &lin.gb});
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.grad->setZero();
}

std::size_t param_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.value->size());
  return n;
}

void AdamOptimizer::step(const ParamList& params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(MatX::Zero(p.value->rows(), p.value->cols()));
      v_.push_back(MatX::Zero(p.value->rows(), p.value->cols()));
    }
  }
  if (m_.size() != params.size())
    throw InvalidInput("AdamOptimizer: parameter list changed between steps");
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const MatX& g = *params[i].grad;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i].array().matrix() + (1.0 - beta2_) * g.cwiseProduct(g);
    MatX mhat = m_[i] / bc1;
    MatX vhat = v_[i] / bc2;
    *params[i].value -=
        (lr_ * params[i].lr_scale) *
        mhat.cwiseQuotient((vhat.cwiseSqrt().array() + eps_).matrix());
  }
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string read_str(std::istream& is) {
  std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

constexpr char kMagic[8] = {'T', 'F', 'S', 'C', 'K', 'P', 'T', '1'};

}  // namespace

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("Checkpoint::save: cannot open " + path);
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [k, v] : metadata) {
    write_str(os, k);
    write_str(os, v);
  }
  write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_str(os, name);
    write_u32(os, static_cast<std::uint32_t>(t.rows()));
    write_u32(os, static_cast<std::uint32_t>(t.cols()));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(sizeof(double) * t.size()));
  }
  if (!os) throw NumericalError("Checkpoint::save: write failed for " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput("Checkpoint::load: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw InvalidInput("Checkpoint::load: bad magic in " + path);
  Checkpoint ckpt;
  std::uint32_t n_meta = read_u32(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = read_str(is);
    ckpt.metadata[k] = read_str(is);
  }
  std::uint32_t n_tensors = read_u32(is);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = read_str(is);
    std::uint32_t rows = read_u32(is);
    std::uint32_t cols = read_u32(is);
    MatX t(rows, cols);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * t.size()));
    ckpt.tensors[name] = std::move(t);
  }
  if (!is) throw InvalidInput("Checkpoint::load: truncated file " + path);
  return ckpt;
}

Checkpoint Checkpoint::from_params(const ParamList& params) {
  Checkpoint ckpt;
  for (const auto& p : params) ckpt.tensors[p.name] = *p.value;
  return ckpt;
}

void Checkpoint::restore_params(const ParamList& params) const {
  for (const auto& p : params) {
    auto it = tensors.find(p.name);
    if (it == tensors.end())
      throw InvalidInput("Checkpoint: missing tensor " + p.name);
    if (it->second.rows() != p.value->rows() || it->second.cols() != p.value->cols())
      throw InvalidInput("Checkpoint: shape mismatch for " + p.name);
    *p.value = it->second;
  }
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace tfs
