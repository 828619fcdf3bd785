#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mdcap/diffusion.hpp"
#include "mdcap/model.hpp"
#include "mdcap/rng.hpp"
#include "mdcap/vocab.hpp"

namespace mdcap {

enum class ScoreMethod { kArc, kElboMc, kElboExact, kHeuristic };

const char* method_name(ScoreMethod method);
ScoreMethod parse_method(const std::string& name);

inline constexpr int kElboExactMaxLen = 10;  // 2^N - 1 subsets; cost guard
inline constexpr int kDefaultMcSamples = 1024;

// State of confidence-based iterative decoding after `steps` reveals.
struct DecodeState {
  std::vector<int> tokens;       // mask_id at still-masked positions
  std::vector<uint8_t> revealed;
  int steps = 0;

  int mask_count() const {
    int n = 0;
    for (uint8_t r : revealed) n += r ? 0 : 1;
    return n;
  }
};

struct RevealChoice {
  int position = -1;
  int token = -1;
  double confidence = 0.0;
};

// The reveal rule: among still-masked positions take the one whose best token
// probability is highest (ties: lowest position), and its argmax token
// (ties: lowest id). `probs` holds one softmax row per position.
RevealChoice pick_reveal(const std::vector<std::vector<double>>& probs,
                         const std::vector<uint8_t>& revealed);

namespace detail {
template <typename T>
std::vector<std::vector<double>> softmax_rows(const Tensor<T>& logits) {
  const int rows = logits.dim(0), k = logits.dim(1);
  std::vector<std::vector<double>> out(rows, std::vector<double>(k));
  const T* pl = logits.values().data();
  for (int r = 0; r < rows; ++r) {
    const T* in = pl + int64_t(r) * k;
    double m = in[0];
    for (int j = 1; j < k; ++j) m = std::max(m, double(in[j]));
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      out[r][j] = std::exp(double(in[j]) - m);
      sum += out[r][j];
    }
    for (int j = 0; j < k; ++j) out[r][j] /= sum;
  }
  return out;
}

template <typename T>
double row_log_softmax_at(const Tensor<T>& logits, int row, int index) {
  const int k = logits.dim(logits.rank() - 1);
  const T* in = logits.values().data() + int64_t(row) * k;
  double m = in[0];
  for (int j = 1; j < k; ++j) m = std::max(m, double(in[j]));
  double sum = 0.0;
  for (int j = 0; j < k; ++j) sum += std::exp(double(in[j]) - m);
  return double(in[index]) - m - std::log(sum);
}

inline void check_plain_caption(std::span<const int> caption, const Vocabulary& vocab, const char* op) {
  if (caption.empty()) throw std::invalid_argument(std::string(op) + ": empty caption");
  for (int id : caption)
    if (id == vocab.pad_id() || id == vocab.mask_id())
      throw std::invalid_argument(std::string(op) + ": caption must not contain pad or mask tokens");
}

template <typename T>
void require_mode(const Captioner<T>& model, AttentionMode mode, const char* op) {
  if (model.decoder_config().mode != mode)
    throw std::invalid_argument(std::string(op) + (mode == AttentionMode::kCausal
                                                       ? ": requires a causal-mode model"
                                                       : ": requires a bidirectional-mode model"));
}
}  // namespace detail

// Greedy confidence-based generation: starts fully masked, runs exactly
// `length` iterations, reveals the single highest-confidence position per
// iteration, and never changes a revealed token. Deterministic.
template <typename T>
std::vector<DecodeState> generate_traced(Captioner<T>& model, const Image& image, int length,
                                         const Vocabulary& vocab) {
  detail::require_mode(model, AttentionMode::kBidirectional, "generate");
  if (length < 0 || length > model.decoder_config().max_len)
    throw std::invalid_argument("generate: length must lie in [0, max_len]");
  NoGradGuard ng;
  std::vector<DecodeState> trace;
  DecodeState state;
  state.tokens.assign(length, vocab.mask_id());
  state.revealed.assign(length, 0);
  trace.push_back(state);
  if (length == 0) return trace;
  auto visual = model.encode(image);
  auto kv = model.precompute_cross_kv(visual);
  DecodeOptions<T> opt;
  opt.kv = &kv;
  for (int step = 0; step < length; ++step) {
    auto logits = model.decode(state.tokens, 1, length, visual, {}, opt);
    const auto probs = detail::softmax_rows(logits);
    const RevealChoice choice = pick_reveal(probs, state.revealed);
    state.tokens[choice.position] = choice.token;
    state.revealed[choice.position] = 1;
    state.steps = step + 1;
    trace.push_back(state);
  }
  return trace;
}

template <typename T>
std::vector<int> generate(Captioner<T>& model, const Image& image, int length, const Vocabulary& vocab) {
  return generate_traced(model, image, length, vocab).back().tokens;
}

// Autoregressive log-likelihood: sum_i log p(c_i | bos, c_<i, visual).
template <typename T>
double arc_loglik(Captioner<T>& model, std::span<const int> caption, const Image& image,
                  const Vocabulary& vocab) {
  detail::require_mode(model, AttentionMode::kCausal, "arc_loglik");
  detail::check_plain_caption(caption, vocab, "arc_loglik");
  const int n = static_cast<int>(caption.size());
  if (n + 1 > model.decoder_config().max_len)
    throw std::invalid_argument("arc_loglik: caption too long for the model window");
  NoGradGuard ng;
  std::vector<int> seq(n);
  seq[0] = vocab.bos_id();
  for (int i = 0; i + 1 < n; ++i) seq[i + 1] = caption[i];
  auto visual = model.encode(image);
  auto logits = model.decode(seq, 1, n, visual, {});
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += detail::row_log_softmax_at(logits, i, caption[i]);
  return total;
}

// Monte-Carlo estimate of the masked-diffusion likelihood bound, with the
// estimator's standard error. Masking configurations are drawn from the
// forward corruption law at t ~ U[0,1); per-sample statistics are grouped by
// the realized mask count n, averaged per group, and summed over n.
struct ElboEstimate {
  double value = 0.0;
  double std_error = 0.0;
  int samples = 0;
};

template <typename T>
ElboEstimate elbo_mc(Captioner<T>& model, std::span<const int> caption, const Image& image,
                     const Vocabulary& vocab, int samples, Rng& rng) {
  detail::require_mode(model, AttentionMode::kBidirectional, "elbo_mc");
  detail::check_plain_caption(caption, vocab, "elbo_mc");
  if (samples <= 0) throw std::invalid_argument("elbo_mc: sample count must be positive");
  const int n = static_cast<int>(caption.size());
  if (n > model.decoder_config().max_len)
    throw std::invalid_argument("elbo_mc: caption too long for the model window");
  NoGradGuard ng;
  auto visual = model.encode(image);
  auto kv = model.precompute_cross_kv(visual);
  DecodeOptions<T> opt;
  opt.kv = &kv;

  std::vector<double> group_sum(n + 1, 0.0), group_sumsq(n + 1, 0.0);
  std::vector<int> group_count(n + 1, 0);

  constexpr int kChunk = 256;
  std::vector<int> tokens;
  std::vector<std::vector<uint8_t>> masks;
  for (int done = 0; done < samples;) {
    const int chunk = std::min(kChunk, samples - done);
    tokens.assign(size_t(chunk) * n, 0);
    masks.assign(chunk, {});
    for (int c = 0; c < chunk; ++c) {
      const double t = rng.uniform();
      const MaskedCaption mc = corrupt(caption, vocab, t, rng);
      std::copy(mc.tokens.begin(), mc.tokens.end(), tokens.begin() + size_t(c) * n);
      masks[c] = mc.masked;
    }
    auto logits = model.decode(tokens, chunk, n, visual, {}, opt);
    for (int c = 0; c < chunk; ++c) {
      int masked = 0;
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        if (!masks[c][i]) continue;
        ++masked;
        acc += detail::row_log_softmax_at(logits, c * n + i, caption[i]);
      }
      if (masked == 0) continue;  // contributes to no n >= 1 group
      const double x = acc / masked;
      group_sum[masked] += x;
      group_sumsq[masked] += x * x;
      group_count[masked] += 1;
    }
    done += chunk;
  }

  ElboEstimate est;
  est.samples = samples;
  double var_of_estimate = 0.0;
  for (int g = 1; g <= n; ++g) {
    if (group_count[g] == 0) continue;
    const double mean = group_sum[g] / group_count[g];
    est.value += mean;
    if (group_count[g] >= 2) {
      const double var =
          (group_sumsq[g] - group_count[g] * mean * mean) / (group_count[g] - 1);
      var_of_estimate += std::max(var, 0.0) / group_count[g];
    }
  }
  est.std_error = std::sqrt(var_of_estimate);
  return est;
}

// Exact evaluation of the same bound by enumerating every non-empty masking
// subset. Guarded to captions of at most kElboExactMaxLen tokens.
template <typename T>
double elbo_exact(Captioner<T>& model, std::span<const int> caption, const Image& image,
                  const Vocabulary& vocab) {
  detail::require_mode(model, AttentionMode::kBidirectional, "elbo_exact");
  detail::check_plain_caption(caption, vocab, "elbo_exact");
  const int n = static_cast<int>(caption.size());
  if (n > kElboExactMaxLen)
    throw std::invalid_argument("elbo_exact: caption length " + std::to_string(n) +
                                " exceeds the N <= " + std::to_string(kElboExactMaxLen) +
                                " enumeration cap");
  NoGradGuard ng;
  auto visual = model.encode(image);
  auto kv = model.precompute_cross_kv(visual);
  DecodeOptions<T> opt;
  opt.kv = &kv;

  // binomial coefficients C(n, k)
  std::vector<double> choose(n + 1, 1.0);
  for (int k = 1; k <= n; ++k) choose[k] = choose[k - 1] * (n - k + 1) / k;

  std::vector<double> sum_by_count(n + 1, 0.0);
  const uint32_t total = (1u << n) - 1;
  constexpr int kChunk = 256;
  std::vector<int> tokens;
  std::vector<uint32_t> subset_ids;
  for (uint32_t first = 1; first <= total;) {
    const int chunk = static_cast<int>(std::min<uint32_t>(kChunk, total - first + 1));
    tokens.assign(size_t(chunk) * n, 0);
    subset_ids.resize(chunk);
    for (int c = 0; c < chunk; ++c) {
      const uint32_t subset = first + c;
      subset_ids[c] = subset;
      for (int i = 0; i < n; ++i)
        tokens[size_t(c) * n + i] = (subset >> i) & 1u ? vocab.mask_id() : caption[i];
    }
    auto logits = model.decode(tokens, chunk, n, visual, {}, opt);
    for (int c = 0; c < chunk; ++c) {
      const uint32_t subset = subset_ids[c];
      const int count = std::popcount(subset);
      double acc = 0.0;
      for (int i = 0; i < n; ++i)
        if ((subset >> i) & 1u) acc += detail::row_log_softmax_at(logits, c * n + i, caption[i]);
      sum_by_count[count] += acc / count;
    }
    first += chunk;
  }
  double bound = 0.0;
  for (int k = 1; k <= n; ++k) bound += sum_by_count[k] / choose[k];
  return bound;
}

// Confidence-ordered teacher-forced score: N reveals from a fully masked
// sequence, each recording the log-likelihood of the ground-truth token at
// the most confident masked position before substituting it. Deterministic.
template <typename T>
double heuristic_score(Captioner<T>& model, std::span<const int> caption, const Image& image,
                       const Vocabulary& vocab) {
  detail::require_mode(model, AttentionMode::kBidirectional, "heuristic_score");
  detail::check_plain_caption(caption, vocab, "heuristic_score");
  const int n = static_cast<int>(caption.size());
  if (n > model.decoder_config().max_len)
    throw std::invalid_argument("heuristic_score: caption too long for the model window");
  NoGradGuard ng;
  auto visual = model.encode(image);
  auto kv = model.precompute_cross_kv(visual);
  DecodeOptions<T> opt;
  opt.kv = &kv;
  std::vector<int> tokens(n, vocab.mask_id());
  std::vector<uint8_t> revealed(n, 0);
  double total = 0.0;
  for (int step = 0; step < n; ++step) {
    auto logits = model.decode(tokens, 1, n, visual, {}, opt);
    const auto probs = detail::softmax_rows(logits);
    const RevealChoice choice = pick_reveal(probs, revealed);
    total += detail::row_log_softmax_at(logits, choice.position, caption[choice.position]);
    tokens[choice.position] = caption[choice.position];
    revealed[choice.position] = 1;
  }
  return total;
}

struct MatchResult {
  int best = 0;
  std::vector<double> scores;
};

// Scores every candidate with the chosen method and returns the argmax; ties
// resolve to the lowest index.
template <typename T>
MatchResult match_captions(Captioner<T>& model, const Image& image,
                           const std::vector<std::vector<int>>& candidates, const Vocabulary& vocab,
                           ScoreMethod method, int mc_samples, Rng& rng) {
  if (candidates.empty()) throw std::invalid_argument("match_captions: empty candidate list");
  MatchResult result;
  for (const auto& cand : candidates) {
    double score = 0.0;
    switch (method) {
      case ScoreMethod::kArc:
        score = arc_loglik(model, cand, image, vocab);
        break;
      case ScoreMethod::kElboMc:
        score = elbo_mc(model, cand, image, vocab, mc_samples, rng).value;
        break;
      case ScoreMethod::kElboExact:
        score = elbo_exact(model, cand, image, vocab);
        break;
      case ScoreMethod::kHeuristic:
        score = heuristic_score(model, cand, image, vocab);
        break;
    }
    result.scores.push_back(score);
  }
  for (size_t i = 1; i < result.scores.size(); ++i)
    if (result.scores[i] > result.scores[result.best]) result.best = static_cast<int>(i);
  return result;
}

}  // namespace mdcap
