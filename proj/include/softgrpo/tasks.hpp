#pragma once

// Synthetic tasks with exact-match verifiable answers.
//
// Vocabulary layout: symbol tokens first (ids 0..num_symbols-1, e.g. the
// digits), then BOS, SEP, EOS, PAD, then unused filler ids up to vocab_size.

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "softgrpo/errors.hpp"
#include "softgrpo/rng.hpp"

namespace softgrpo::tasks {

enum class TaskKind { kModSum, kParity, kReverse };

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::kModSum;
  std::size_t vocab_size = 16;
  std::size_t num_symbols = 10;
  std::size_t query_len = 2;
  std::size_t answer_len = 1;

  std::size_t bos() const { return num_symbols; }
  std::size_t sep() const { return num_symbols + 1; }
  std::size_t eos() const { return num_symbols + 2; }
  std::size_t pad() const { return num_symbols + 3; }

  void validate() const {
    if (vocab_size < num_symbols + 4)
      throw ContractError("task " + name + ": vocab_size " + std::to_string(vocab_size) + " leaves no room for " +
                          std::to_string(num_symbols) + " symbols plus 4 specials");
    if (query_len == 0 || answer_len == 0) throw ContractError("task " + name + ": empty query or answer");
  }
};

struct TaskInstance {
  std::vector<std::size_t> query;
  std::vector<std::size_t> truth;

  friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

// `length` is the bit count for parity and the sequence length for reverse; ignored by modsum.
inline TaskSpec make_task(const std::string& name, std::size_t vocab_size, std::size_t length) {
  TaskSpec s;
  s.name = name;
  s.vocab_size = vocab_size;
  if (name == "modsum") {
    s.kind = TaskKind::kModSum;
    s.num_symbols = 10;
    s.query_len = 2;
    s.answer_len = 1;
  } else if (name == "parity") {
    s.kind = TaskKind::kParity;
    s.num_symbols = 2;
    s.query_len = length;
    s.answer_len = 1;
  } else if (name == "reverse") {
    s.kind = TaskKind::kReverse;
    s.num_symbols = std::min<std::size_t>(10, vocab_size >= 4 ? vocab_size - 4 : 0);
    s.query_len = length;
    s.answer_len = length;
  } else {
    throw ConfigError("unknown task '" + name + "' (expected modsum, parity or reverse)");
  }
  s.validate();
  return s;
}

// Query "a b", truth (a + b) mod 10.
inline TaskInstance modsum_instance(std::size_t a, std::size_t b) { return {{a, b}, {(a + b) % 10}}; }

inline TaskInstance gen_modsum(RngStream& rng, const TaskSpec& spec) {
  if (spec.kind != TaskKind::kModSum || spec.num_symbols < 10) throw ContractError("gen_modsum: spec is not modsum");
  const std::size_t a = rng.below(10), b = rng.below(10);
  return modsum_instance(a, b);
}

inline TaskInstance parity_instance(std::span<const std::size_t> bits) {
  std::size_t x = 0;
  for (std::size_t b : bits) x ^= (b & 1U);
  return {{bits.begin(), bits.end()}, {x}};
}

inline TaskInstance gen_parity(RngStream& rng, const TaskSpec& spec) {
  if (spec.kind != TaskKind::kParity) throw ContractError("gen_parity: spec is not parity");
  std::vector<std::size_t> bits(spec.query_len);
  for (auto& b : bits) b = rng.below(2);
  return parity_instance(bits);
}

inline TaskInstance reverse_instance(std::span<const std::size_t> seq) {
  return {{seq.begin(), seq.end()}, {seq.rbegin(), seq.rend()}};
}

inline TaskInstance gen_reverse(RngStream& rng, const TaskSpec& spec) {
  if (spec.kind != TaskKind::kReverse) throw ContractError("gen_reverse: spec is not reverse");
  std::vector<std::size_t> seq(spec.query_len);
  for (auto& s : seq) s = rng.below(spec.num_symbols);
  return reverse_instance(seq);
}

inline TaskInstance generate(RngStream& rng, const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::kModSum: return gen_modsum(rng, spec);
    case TaskKind::kParity: return gen_parity(rng, spec);
    case TaskKind::kReverse: return gen_reverse(rng, spec);
  }
  throw ContractError("generate: unknown task kind");
}

// 1 iff the answer, cut at its first EOS and stripped of PAD, equals the truth.
// An answer without EOS earns 0.
inline int verify(std::span<const std::size_t> answer, const TaskInstance& instance, const TaskSpec& spec) {
  const auto eos = std::find(answer.begin(), answer.end(), spec.eos());
  if (eos == answer.end()) return 0;
  std::vector<std::size_t> body;
  for (auto it = answer.begin(); it != eos; ++it)
    if (*it != spec.pad()) body.push_back(*it);
  return body == instance.truth ? 1 : 0;
}

// The canonical correct answer sequence: truth followed by EOS.
inline std::vector<std::size_t> reference_answer(const TaskInstance& instance, const TaskSpec& spec) {
  std::vector<std::size_t> a = instance.truth;
  a.push_back(spec.eos());
  return a;
}

}  // namespace softgrpo::tasks
