// Parameter registry and the transformer building blocks used by both
// learning stages: linear maps, layer norm, embeddings, multi-head
// self-attention, pre-norm encoder layers and two-layer MLP heads.

#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pktrack/nn/autograd.hpp"

namespace pktrack::nn {

struct Parameter {
  std::string name;
  std::string group;  // optimizer parameter group
  Tensor tensor;
};

/// Ordered, named set of trainable tensors.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 1) : rng_(seed) {}

  Tensor add(const std::string& name, Mat init, const std::string& group) {
    for (const auto& p : params_)
      if (p.name == name) throw InvalidConfig("duplicate parameter name " + name);
    params_.push_back({name, group, Tensor(std::move(init), true)});
    return params_.back().tensor;
  }
  Tensor glorot(const std::string& name, int in, int out, const std::string& group) {
    const double a = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> u(-a, a);
    return add(name, Mat::NullaryExpr(in, out, [&] { return u(rng_); }), group);
  }
  Tensor normal(const std::string& name, int rows, int cols, double std, const std::string& group) {
    std::normal_distribution<double> n(0.0, std);
    return add(name, Mat::NullaryExpr(rows, cols, [&] { return n(rng_); }), group);
  }
  Tensor zeros(const std::string& name, int rows, int cols, const std::string& group) {
    return add(name, Mat::Zero(rows, cols), group);
  }
  Tensor ones(const std::string& name, int rows, int cols, const std::string& group) {
    return add(name, Mat::Ones(rows, cols), group);
  }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.tensor.value().size());
    return n;
  }

  std::map<std::string, Mat> snapshot() const {
    std::map<std::string, Mat> out;
    for (const auto& p : params_) out[p.name] = p.tensor.value();
    return out;
  }
  /// Overwrites values by name; every stored parameter must be present.
  void load(const std::map<std::string, Mat>& values) {
    for (auto& p : params_) {
      auto it = values.find(p.name);
      if (it == values.end()) throw SchemaError("checkpoint lacks parameter " + p.name);
      if (it->second.rows() != p.tensor.rows() || it->second.cols() != p.tensor.cols())
        throw ShapeError("checkpoint parameter " + p.name + " has the wrong shape");
      p.tensor.mutable_value() = it->second;
    }
  }

 private:
  std::vector<Parameter> params_;
  std::mt19937_64 rng_;
};

struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(ParamStore& s, const std::string& name, int in, int out, const std::string& group)
      : w(s.glorot(name + ".w", in, out, group)), b(s.zeros(name + ".b", 1, out, group)) {}
  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, w), b); }
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore& s, const std::string& name, int dim, const std::string& group)
      : gamma(s.ones(name + ".gamma", 1, dim, group)), beta(s.zeros(name + ".beta", 1, dim, group)) {}
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct Embedding {
  Tensor table;
  Embedding() = default;
  Embedding(ParamStore& s, const std::string& name, int count, int dim, const std::string& group)
      : table(s.normal(name, count, dim, 0.02, group)) {}
  Tensor operator()(const std::vector<int>& index) const { return gather_rows(table, index); }
  int count() const { return static_cast<int>(table.rows()); }
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& s, const std::string& name, int dim, int heads_, const std::string& group)
      : q(s, name + ".q", dim, dim, group),
        k(s, name + ".k", dim, dim, group),
        v(s, name + ".v", dim, dim, group),
        o(s, name + ".o", dim, dim, group),
        heads(heads_) {
    if (heads < 1 || dim % heads != 0) throw InvalidConfig("embed dim must be divisible by heads");
  }

  /// Self-attention over the rows of x; invalid keys are never attended to.
  Tensor operator()(const Tensor& x, const std::vector<bool>& key_valid) const {
    const Tensor qx = q(x), kx = k(x), vx = v(x);
    const int d = static_cast<int>(x.cols()) / heads;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Tensor> outs;
    for (int h = 0; h < heads; ++h) {
      const Tensor qh = slice_cols(qx, h * d, d), kh = slice_cols(kx, h * d, d), vh = slice_cols(vx, h * d, d);
      const Tensor att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_d), key_valid);
      outs.push_back(matmul(att, vh));
    }
    return o(heads == 1 ? outs.front() : concat_cols(outs));
  }
};

/// Pre-norm encoder layer: x + MHA(LN(x)), then x + FF(LN(x)).
struct EncoderLayer {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Linear ff1, ff2;
  EncoderLayer() = default;
  EncoderLayer(ParamStore& s, const std::string& name, int dim, int ff_dim, int heads,
               const std::string& group)
      : ln1(s, name + ".ln1", dim, group),
        ln2(s, name + ".ln2", dim, group),
        attn(s, name + ".attn", dim, heads, group),
        ff1(s, name + ".ff1", dim, ff_dim, group),
        ff2(s, name + ".ff2", ff_dim, dim, group) {}

  Tensor operator()(const Tensor& x, const std::vector<bool>& key_valid) const {
    const Tensor h = add(x, attn(ln1(x), key_valid));
    return add(h, ff2(gelu(ff1(ln2(h)))));
  }
};

struct EncoderConfig {
  int layers = 4;
  int embed_dim = 16;
  int ff_dim = 16;
  int heads = 1;

  void validate() const {
    if (layers < 1 || embed_dim < 1 || ff_dim < 1 || heads < 1)
      throw InvalidConfig("encoder sizes must be positive");
    if (embed_dim % heads != 0) throw InvalidConfig("embed_dim must be divisible by heads");
  }
};

/// Stack of encoder layers followed by a final layer norm.
struct Encoder {
  std::vector<EncoderLayer> layers;
  LayerNorm final_ln;
  Encoder() = default;
  Encoder(ParamStore& s, const std::string& name, const EncoderConfig& cfg, const std::string& group) {
    cfg.validate();
    for (int i = 0; i < cfg.layers; ++i)
      layers.emplace_back(s, name + "." + std::to_string(i), cfg.embed_dim, cfg.ff_dim, cfg.heads, group);
    final_ln = LayerNorm(s, name + ".ln_f", cfg.embed_dim, group);
  }
  Tensor operator()(Tensor x, const std::vector<bool>& key_valid) const {
    for (const auto& l : layers) x = l(x, key_valid);
    return final_ln(x);
  }
};

/// LayerNorm -> Linear -> GELU -> Linear.
struct MlpHead {
  LayerNorm ln;
  Linear fc1, fc2;
  MlpHead() = default;
  MlpHead(ParamStore& s, const std::string& name, int in, int hidden, int out, const std::string& group)
      : ln(s, name + ".ln", in, group), fc1(s, name + ".fc1", in, hidden, group), fc2(s, name + ".fc2", hidden, out, group) {}
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(ln(x)))); }
};

}  // namespace pktrack::nn
