#pragma once

// Tiny pre-norm causal transformer with learned absolute positions, GELU
// feed-forward blocks and an output head tied to the input embedding matrix.
// Inputs are arbitrary d-vectors, so discrete tokens (embedding rows) and
// soft tokens (mixtures of rows) go through the same forward pass.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "softgrpo/autodiff.hpp"
#include "softgrpo/errors.hpp"
#include "softgrpo/rng.hpp"

namespace softgrpo::model {

using autodiff::Graph;
using autodiff::Shape;
using autodiff::Tensor;
using autodiff::Var;

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t embed_dim = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t max_seq_len = 32;
  double hidden_mult = 4.0;

  std::size_t hidden_dim() const {
    return static_cast<std::size_t>(std::lround(hidden_mult * static_cast<double>(embed_dim)));
  }

  void validate() const {
    if (vocab_size < 4) throw ContractError("model: vocab_size must be >= 4");
    if (embed_dim == 0 || num_heads == 0 || num_layers == 0 || max_seq_len == 0)
      throw ContractError("model: extents must be positive");
    if (embed_dim % num_heads != 0) throw ContractError("model: embed_dim must be divisible by num_heads");
    if (!(hidden_mult > 0.0) || hidden_dim() == 0) throw ContractError("model: hidden_mult must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Tensor attn_norm;  // [d]
  Tensor wq, wk, wv, wo;  // [d x d]
  Tensor mlp_norm;  // [d]
  Tensor w_in;   // [d x hidden]
  Tensor w_out;  // [hidden x d]

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct PolicyParams {
  ModelConfig config;
  Tensor embedding;  // [vocab x d], also the output head
  Tensor positions;  // [max_seq_len x d]
  std::vector<LayerParams> layers;
  Tensor final_norm;  // [d]

  // Visits every tensor in manifest order with its stable dotted name.
  template <class F>
  void for_each(F&& f) {
    f(std::string("embedding"), embedding);
    f(std::string("positions"), positions);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LayerParams& L = layers[l];
      f(p + "attn_norm", L.attn_norm);
      f(p + "attn.wq", L.wq);
      f(p + "attn.wk", L.wk);
      f(p + "attn.wv", L.wv);
      f(p + "attn.wo", L.wo);
      f(p + "mlp_norm", L.mlp_norm);
      f(p + "mlp.w_in", L.w_in);
      f(p + "mlp.w_out", L.w_out);
    }
    f(std::string("final_norm"), final_norm);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<PolicyParams*>(this)->for_each(
        [&](const std::string& name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
  }

  std::vector<std::pair<std::string, Shape>> manifest() const {
    std::vector<std::pair<std::string, Shape>> m;
    for_each([&](const std::string& n, const Tensor& t) { m.emplace_back(n, t.shape); });
    return m;
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(num_parameters());
    for_each([&](const std::string&, const Tensor& t) { out.insert(out.end(), t.data.begin(), t.data.end()); });
    return out;
  }

  void assign_flat(std::span<const double> flat) {
    if (flat.size() != num_parameters()) throw DimensionError("assign_flat: wrong parameter count");
    std::size_t off = 0;
    for_each([&](const std::string&, Tensor& t) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.size(), t.data.begin());
      off += t.size();
    });
  }

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

namespace detail {
inline Tensor normal_tensor(Shape shape, double std, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = std * rng.normal();
  return t;
}
inline Tensor ones(std::size_t n) { return Tensor({n}, std::vector<double>(n, 1.0)); }
}  // namespace detail

inline PolicyParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  RngStream rng = RngStream(seed).derive({0x1417});
  const std::size_t V = config.vocab_size, d = config.embed_dim, h = config.hidden_dim();
  constexpr double kStd = 0.02;
  PolicyParams p;
  p.config = config;
  p.embedding = detail::normal_tensor({V, d}, kStd, rng);
  p.positions = detail::normal_tensor({config.max_seq_len, d}, 0.01, rng);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerParams L;
    L.attn_norm = detail::ones(d);
    L.wq = detail::normal_tensor({d, d}, kStd, rng);
    L.wk = detail::normal_tensor({d, d}, kStd, rng);
    L.wv = detail::normal_tensor({d, d}, kStd, rng);
    L.wo = detail::normal_tensor({d, d}, kStd, rng);
    L.mlp_norm = detail::ones(d);
    L.w_in = detail::normal_tensor({d, h}, kStd, rng);
    L.w_out = detail::normal_tensor({h, d}, kStd, rng);
    p.layers.push_back(std::move(L));
  }
  p.final_norm = detail::ones(d);
  return p;
}

// Deep copy meant to stay frozen (pi_old, pi_ref).
inline PolicyParams snapshot(const PolicyParams& params) { return params; }

// Parameters bound as leaves of one Graph. Trainable bindings receive gradients.
struct BoundParams {
  const PolicyParams* source = nullptr;
  Var embedding, positions, final_norm;
  struct Layer {
    Var attn_norm, wq, wk, wv, wo, mlp_norm, w_in, w_out;
  };
  std::vector<Layer> layers;

  const ModelConfig& config() const { return source->config; }

  // Leaves in manifest order, matching PolicyParams::for_each.
  std::vector<Var> leaves() const {
    std::vector<Var> v{embedding, positions};
    for (const Layer& L : layers) v.insert(v.end(), {L.attn_norm, L.wq, L.wk, L.wv, L.wo, L.mlp_norm, L.w_in, L.w_out});
    v.push_back(final_norm);
    return v;
  }
};

inline BoundParams bind(Graph& g, const PolicyParams& p, bool trainable) {
  auto leaf = [&](const Tensor& t) { return trainable ? g.param(t) : g.input(t); };
  BoundParams b;
  b.source = &p;
  b.embedding = leaf(p.embedding);
  b.positions = leaf(p.positions);
  for (const LayerParams& L : p.layers)
    b.layers.push_back({leaf(L.attn_norm), leaf(L.wq), leaf(L.wk), leaf(L.wv), leaf(L.wo), leaf(L.mlp_norm),
                        leaf(L.w_in), leaf(L.w_out)});
  b.final_norm = leaf(p.final_norm);
  return b;
}

inline Var embed_discrete(const BoundParams& b, std::size_t token) { return autodiff::row_gather(b.embedding, token); }

// sum_i weights_i * E[ids_i]
inline Var embed_soft(const BoundParams& b, std::span<const std::size_t> ids, std::span<const double> weights) {
  if (ids.size() != weights.size() || ids.empty()) throw ContractError("embed_soft: ids/weights mismatch");
  double s = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ContractError("embed_soft: negative weight");
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ContractError("embed_soft: weights sum to " + std::to_string(s));
  Graph& g = *b.embedding.graph;
  Var rows = autodiff::gather_rows(b.embedding, ids);
  return autodiff::row_weighted_sum(rows, g.constant(Tensor::vector({weights.begin(), weights.end()})));
}

// Next-token logits for every position of `inputs` ([len x d]); row t only sees inputs 0..t.
inline Var forward_logits(const BoundParams& b, Var inputs) {
  namespace ad = autodiff;
  const ModelConfig& cfg = b.config();
  const Tensor& X = inputs.value();
  if (X.rank() != 2 || X.cols() != cfg.embed_dim)
    throw DimensionError("forward_logits: inputs must be [len x " + std::to_string(cfg.embed_dim) + "]");
  const std::size_t len = X.rows();
  if (len == 0) throw DimensionError("forward_logits: empty sequence");
  if (len > cfg.max_seq_len)
    throw CapacityError("forward_logits: sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  const std::size_t heads = cfg.num_heads, hd = cfg.embed_dim / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Var x = ad::add(inputs, ad::slice_rows(b.positions, 0, len));
  for (const auto& L : b.layers) {
    Var h = ad::rms_norm_rows(x, L.attn_norm);
    Var q = ad::matmul(h, L.wq);
    Var k = ad::matmul(h, L.wk);
    Var v = ad::matmul(h, L.wv);
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      Var qh = ad::slice_cols(q, hh * hd, hd);
      Var kh = ad::slice_cols(k, hh * hd, hd);
      Var vh = ad::slice_cols(v, hh * hd, hd);
      Var att = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), att_scale), true);
      outs.push_back(ad::matmul(att, vh));
    }
    Var o = heads == 1 ? outs[0] : ad::concat_cols(outs);
    x = ad::add(x, ad::matmul(o, L.wo));
    Var m = ad::rms_norm_rows(x, L.mlp_norm);
    x = ad::add(x, ad::matmul(ad::gelu(ad::matmul(m, L.w_in)), L.w_out));
  }
  Var hf = ad::rms_norm_rows(x, b.final_norm);
  return ad::matmul(hf, ad::transpose(b.embedding));
}

// Convenience for inference: plain vectors in, logits tensor out.
inline Tensor forward_logits(const PolicyParams& params, const std::vector<std::vector<double>>& inputs) {
  Graph g(false);
  BoundParams b = bind(g, params, false);
  const std::size_t d = params.config.embed_dim;
  Tensor X({inputs.size(), d});
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].size() != d) throw DimensionError("forward_logits: input vector has wrong dimension");
    std::copy(inputs[i].begin(), inputs[i].end(), &X.data[i * d]);
  }
  return forward_logits(b, g.constant(std::move(X))).value();
}

// Inference-only forward that processes one position at a time and caches
// keys and values. Each step repeats the arithmetic of the full forward pass
// for the new row in the same order, so logits match forward_logits exactly.
class IncrementalForward {
 public:
  explicit IncrementalForward(const PolicyParams& params)
      : p_(params), keys_(params.layers.size()), values_(params.layers.size()) {}

  std::size_t length() const { return len_; }

  // Feeds one d-vector and returns the next-token logits at its position.
  std::vector<double> push(std::span<const double> input) {
    const ModelConfig& cfg = p_.config;
    const std::size_t d = cfg.embed_dim, heads = cfg.num_heads, hd = d / heads, h = cfg.hidden_dim();
    if (input.size() != d) throw DimensionError("IncrementalForward: input has wrong dimension");
    if (len_ + 1 > cfg.max_seq_len)
      throw CapacityError("forward_logits: sequence length " + std::to_string(len_ + 1) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t t = len_;
    std::vector<double> x(d);
    for (std::size_t j = 0; j < d; ++j) x[j] = input[j] + p_.positions.data[t * d + j];

    for (std::size_t l = 0; l < p_.layers.size(); ++l) {
      const LayerParams& L = p_.layers[l];
      const auto hn = rms_norm(x, L.attn_norm);
      auto q = row_matmul(hn, L.wq);
      keys_[l].push_back(row_matmul(hn, L.wk));
      values_[l].push_back(row_matmul(hn, L.wv));
      std::vector<double> o(d, 0.0);
      std::vector<double> att(t + 1);
      for (std::size_t hh = 0; hh < heads; ++hh) {
        const std::size_t off = hh * hd;
        for (std::size_t j = 0; j <= t; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += q[off + c] * keys_[l][j][off + c];
          att[j] = s * att_scale;
        }
        autodiff::detail::softmax_inplace(att);
        for (std::size_t j = 0; j <= t; ++j)
          for (std::size_t c = 0; c < hd; ++c) o[off + c] += att[j] * values_[l][j][off + c];
      }
      const auto proj = row_matmul(o, L.wo);
      for (std::size_t j = 0; j < d; ++j) x[j] = x[j] + proj[j];
      const auto m = rms_norm(x, L.mlp_norm);
      auto a = row_matmul(m, L.w_in);
      for (std::size_t j = 0; j < h; ++j) a[j] = 0.5 * a[j] * (1.0 + std::erf(a[j] * M_SQRT1_2));
      const auto f = row_matmul(a, L.w_out);
      for (std::size_t j = 0; j < d; ++j) x[j] = x[j] + f[j];
    }
    const auto hf = rms_norm(x, p_.final_norm);
    const std::size_t V = cfg.vocab_size;
    std::vector<double> logits(V, 0.0);
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t v = 0; v < V; ++v) logits[v] += hf[c] * p_.embedding.data[v * d + c];
    ++len_;
    return logits;
  }

 private:
  static std::vector<double> rms_norm(const std::vector<double>& x, const Tensor& g, double eps = 1e-6) {
    const std::size_t c = x.size();
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += x[j] * x[j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(c) + eps);
    std::vector<double> out(c);
    for (std::size_t j = 0; j < c; ++j) out[j] = x[j] * inv * g.data[j];
    return out;
  }
  static std::vector<double> row_matmul(const std::vector<double>& a, const Tensor& W) {
    const std::size_t k = W.rows(), n = W.cols();
    std::vector<double> out(n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double ap = a[p];
      const double* w = &W.data[p * n];
      for (std::size_t j = 0; j < n; ++j) out[j] += ap * w[j];
    }
    return out;
  }

  const PolicyParams& p_;
  std::vector<std::vector<std::vector<double>>> keys_, values_;
  std::size_t len_ = 0;
};

}  // namespace softgrpo::model
