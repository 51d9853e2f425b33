#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "softgrpo/errors.hpp"
#include "softgrpo/rng.hpp"

namespace softgrpo::sampling {

// Truncated, renormalized categorical distribution. Ids are ordered by
// descending probability, ties by ascending id.
struct FilteredDist {
  std::vector<std::size_t> retained_ids;
  std::vector<double> probs;

  std::size_t size() const { return retained_ids.size(); }
  friend bool operator==(const FilteredDist&, const FilteredDist&) = default;
};

// softmax(logits / tau)
inline std::vector<double> temperature_scale(std::span<const double> logits, double tau) {
  if (!(tau > 0.0)) throw ContractError("temperature_scale: tau must be > 0, got " + std::to_string(tau));
  if (logits.empty()) throw ContractError("temperature_scale: empty logits");
  std::vector<double> out(logits.begin(), logits.end());
  const double mx = *std::max_element(out.begin(), out.end());
  double s = 0.0;
  for (double& v : out) {
    v = std::exp((v - mx) / tau);
    s += v;
  }
  for (double& v : out) v /= s;
  return out;
}

// Keeps the k most probable tokens, then the shortest descending prefix of
// those whose cumulative (renormalized) mass reaches p, then renormalizes.
inline FilteredDist top_k_top_p_filter(std::span<const double> probs, std::size_t k, double p) {
  if (k < 1) throw ContractError("top_k_top_p_filter: k must be >= 1");
  if (!(p > 0.0 && p <= 1.0)) throw ContractError("top_k_top_p_filter: p must lie in (0, 1]");
  if (probs.empty()) throw ContractError("top_k_top_p_filter: empty distribution");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  order.resize(std::min(k, order.size()));
  while (order.size() > 1 && probs[order.back()] <= 0.0) order.pop_back();

  double kept = 0.0;
  for (std::size_t id : order) kept += probs[id];
  if (!(kept > 0.0)) throw ContractError("top_k_top_p_filter: distribution has no mass");

  std::size_t cut = order.size();
  double cum = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    cum += probs[order[i]] / kept;
    if (cum >= p) {
      cut = i + 1;
      break;
    }
  }
  order.resize(cut);

  FilteredDist out;
  out.retained_ids = order;
  double mass = 0.0;
  for (std::size_t id : order) mass += probs[id];
  for (std::size_t id : order) out.probs.push_back(probs[id] / mass);
  return out;
}

inline FilteredDist top_k_top_p_filter(const FilteredDist& dist, std::size_t k, double p) {
  FilteredDist inner = top_k_top_p_filter(std::span<const double>(dist.probs), k, p);
  for (std::size_t& id : inner.retained_ids) id = dist.retained_ids[id];
  return inner;
}

// Standard Gumbel variate by inverse transform of u in (0, 1).
inline double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

inline std::vector<double> sample_gumbel(RngStream& rng, std::size_t n) {
  if (n < 1) throw ContractError("sample_gumbel: n must be >= 1");
  std::vector<double> eps(n);
  for (double& e : eps) e = gumbel_from_uniform(rng.uniform());
  return eps;
}

struct GumbelSoftmaxSample {
  std::vector<double> perturbed;  // g'_i = log p_i + eps_i
  std::vector<double> weights;    // y'_i = softmax(g' / tau_g)_i
};

inline GumbelSoftmaxSample gumbel_softmax(const FilteredDist& dist, std::span<const double> eps, double tau_g) {
  if (!(tau_g > 0.0)) throw ContractError("gumbel_softmax: tau_g must be > 0");
  if (eps.size() != dist.size()) throw ContractError("gumbel_softmax: noise length differs from retained set");
  GumbelSoftmaxSample s;
  s.perturbed.resize(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (!std::isfinite(eps[i])) throw ContractError("gumbel_softmax: non-finite noise");
    s.perturbed[i] = std::log(dist.probs[i]) + eps[i];
  }
  s.weights.resize(dist.size());
  const double mx = *std::max_element(s.perturbed.begin(), s.perturbed.end());
  double z = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    s.weights[i] = std::exp((s.perturbed[i] - mx) / tau_g);
    z += s.weights[i];
  }
  for (double& w : s.weights) w /= z;
  return s;
}

// argmax_i (log p_i + eps_i); zero-probability entries never win.
inline std::size_t gumbel_argmax(std::span<const double> probs, std::span<const double> eps) {
  if (probs.size() != eps.size()) throw ContractError("gumbel_argmax: length mismatch");
  std::size_t best = probs.size();
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] < 0.0) throw ContractError("gumbel_argmax: negative weight");
    if (probs[i] == 0.0) continue;
    const double v = std::log(probs[i]) + eps[i];
    if (best == probs.size() || v > best_v) {
      best = i;
      best_v = v;
    }
  }
  if (best == probs.size()) throw ContractError("gumbel_argmax: all weights are zero");
  return best;
}

struct DirichletSample {
  std::vector<double> weights;
  std::vector<double> log_weights;
};

// x ~ Dirichlet(alpha * p) over the retained set, via normalized Gamma variates.
inline DirichletSample dirichlet_resample(const FilteredDist& dist, double alpha, RngStream& rng) {
  if (!(alpha > 0.0)) throw ContractError("dirichlet_resample: alpha must be > 0");
  DirichletSample s;
  s.log_weights.resize(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) s.log_weights[i] = rng.log_gamma_variate(alpha * dist.probs[i]);
  const double mx = *std::max_element(s.log_weights.begin(), s.log_weights.end());
  double z = 0.0;
  for (double v : s.log_weights) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  for (double& v : s.log_weights) v -= lz;
  s.weights.resize(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) s.weights[i] = std::exp(s.log_weights[i]);
  return s;
}

// Inverse-CDF draw from one uniform; returns the token id.
inline std::size_t categorical_sample(const FilteredDist& dist, RngStream& rng) {
  if (dist.size() == 0) throw ContractError("categorical_sample: empty distribution");
  const double u = rng.uniform();
  double cum = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    cum += dist.probs[i];
    if (u < cum) return dist.retained_ids[i];
  }
  return dist.retained_ids.back();
}

inline std::vector<double> gaussian_noise(std::size_t d, double sigma, RngStream& rng) {
  if (!(sigma >= 0.0)) throw ContractError("gaussian_noise: sigma must be >= 0");
  std::vector<double> out(d, 0.0);
  if (sigma == 0.0) return out;
  for (double& v : out) v = sigma * rng.normal();
  return out;
}

}  // namespace softgrpo::sampling
