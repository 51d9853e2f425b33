#pragma once

// Evaluation statistics over n attempts per query: Mean@k, Pass@k, Major@k
// and token accounting.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "softgrpo/errors.hpp"

namespace softgrpo::metrics {

struct Attempt {
  std::vector<std::size_t> answer;  // sampled answer ids, EOS included if emitted
  bool correct = false;
  std::size_t think_len = 0;
  std::size_t answer_len = 0;

  std::size_t tokens() const { return think_len + answer_len; }
};

struct QueryResult {
  std::vector<std::size_t> truth;
  std::vector<Attempt> attempts;

  std::size_t num_correct() const {
    std::size_t c = 0;
    for (const auto& a : attempts) c += a.correct ? 1 : 0;
    return c;
  }
};

struct EvalResult {
  std::vector<QueryResult> queries;

  // Attempts per query; throws if queries disagree.
  std::size_t attempts_per_query() const {
    if (queries.empty()) return 0;
    const std::size_t n = queries.front().attempts.size();
    for (const auto& q : queries)
      if (q.attempts.size() != n) throw ContractError("EvalResult: attempt counts differ across queries");
    return n;
  }
};

// C(n, k) when it fits in 64 bits.
inline std::optional<std::uint64_t> binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  unsigned __int128 c = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    c = c * (n - k + i) / i;  // exact: c * (n-k+i) is divisible by i at every step
    if (c > std::numeric_limits<std::uint64_t>::max()) return std::nullopt;
  }
  return static_cast<std::uint64_t>(c);
}

// 1 - C(n-c, k) / C(n, k). Exact integer counts while they fit (so k = 1 gives
// exactly c / n), otherwise the running product prod_{i=n-c+1..n} (1 - k/i).
inline double pass_at_k(std::size_t n, std::size_t c, std::size_t k) {
  if (k == 0 || k > n) throw ContractError("pass_at_k: need 1 <= k <= n, got k=" + std::to_string(k) + " n=" + std::to_string(n));
  if (c > n) throw ContractError("pass_at_k: c > n");
  if (n - c < k) return 1.0;
  const auto total = binomial(n, k);
  const auto none = binomial(n - c, k);
  if (total && none) return static_cast<double>(*total - *none) / static_cast<double>(*total);
  double prod = 1.0;
  for (std::size_t i = n - c + 1; i <= n; ++i)
    prod *= 1.0 - static_cast<double>(k) / static_cast<double>(i);
  return 1.0 - prod;
}

inline double pass_at_k(const EvalResult& r, std::size_t k) {
  const std::size_t n = r.attempts_per_query();
  if (r.queries.empty()) return 0.0;
  double s = 0.0;
  for (const auto& q : r.queries) s += pass_at_k(n, q.num_correct(), k);
  return s / static_cast<double>(r.queries.size());
}

// Mean correct fraction over the first k attempts of every query (k = 0 means all).
inline double mean_at_k(const EvalResult& r, std::size_t k = 0) {
  const std::size_t n = r.attempts_per_query();
  if (n == 0) throw ContractError("mean_at_k: no attempts");
  if (k == 0) k = n;
  if (k > n) throw ContractError("mean_at_k: k > n");
  double s = 0.0;
  for (const auto& q : r.queries) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < k; ++i) c += q.attempts[i].correct ? 1 : 0;
    s += static_cast<double>(c) / static_cast<double>(k);
  }
  return s / static_cast<double>(r.queries.size());
}

// Modal answer among the first k; ties go to the answer that occurred first.
inline const std::vector<std::size_t>& modal_answer(std::span<const std::vector<std::size_t>> answers, std::size_t k) {
  if (k == 0 || k > answers.size()) throw ContractError("major_at_k: need 1 <= k <= n");
  std::size_t best = 0, best_count = 0;
  for (std::size_t i = 0; i < k; ++i) {
    bool seen = false;
    for (std::size_t j = 0; j < i && !seen; ++j) seen = answers[j] == answers[i];
    if (seen) continue;
    std::size_t count = 0;
    for (std::size_t j = i; j < k; ++j) count += answers[j] == answers[i] ? 1 : 0;
    if (count > best_count) {
      best = i;
      best_count = count;
    }
  }
  return answers[best];
}

inline int major_at_k(std::span<const std::vector<std::size_t>> answers, const std::vector<std::size_t>& truth,
                      std::size_t k) {
  return modal_answer(answers, k) == truth ? 1 : 0;
}

// Votes over attempts' answers; `canon` maps an attempt's raw answer to the
// value compared with `truth` (e.g. EOS-cut, PAD-stripped).
template <class Canon>
double major_at_k(const EvalResult& r, std::size_t k, Canon&& canon) {
  if (r.queries.empty()) return 0.0;
  double s = 0.0;
  for (const auto& q : r.queries) {
    std::vector<std::vector<std::size_t>> answers;
    for (const auto& a : q.attempts) answers.push_back(canon(a));
    s += major_at_k(answers, q.truth, k);
  }
  return s / static_cast<double>(r.queries.size());
}

struct TokenStats {
  double mean_tokens = 0.0;
  std::optional<double> mean_tokens_correct;  // absent when nothing was correct
};

inline TokenStats token_stats(const EvalResult& r) {
  double all = 0.0, corr = 0.0;
  std::size_t n = 0, nc = 0;
  for (const auto& q : r.queries)
    for (const auto& a : q.attempts) {
      all += static_cast<double>(a.tokens());
      ++n;
      if (a.correct) {
        corr += static_cast<double>(a.tokens());
        ++nc;
      }
    }
  TokenStats t;
  if (n) t.mean_tokens = all / static_cast<double>(n);
  if (nc) t.mean_tokens_correct = corr / static_cast<double>(nc);
  return t;
}

}  // namespace softgrpo::metrics
