#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "softgrpo/errors.hpp"

namespace softgrpo::optimize {

// Group-normalized advantages (r_g - mean) / (popstd + std_guard).
inline std::vector<double> compute_advantages(std::span<const double> rewards, double std_guard) {
  if (rewards.size() < 2) throw ContractError("compute_advantages: need a group of at least 2");
  if (!(std_guard > 0.0)) throw ContractError("compute_advantages: std_guard must be > 0");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::sqrt(var / n) + std_guard;
  std::vector<double> adv;
  adv.reserve(rewards.size());
  for (double r : rewards) adv.push_back((r - mean) / denom);
  return adv;
}

}  // namespace softgrpo::optimize
