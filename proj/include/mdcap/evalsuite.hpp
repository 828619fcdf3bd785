#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "mdcap/inference.hpp"
#include "mdcap/model.hpp"
#include "mdcap/parallel.hpp"
#include "mdcap/synthdata.hpp"

namespace mdcap {

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct Split {
  std::vector<int> train;
  std::vector<int> test;
};

// Seeded permutation split; the same (count, fraction, seed) always produces
// the same index sets.
Split make_split(int count, double train_fraction, uint64_t seed);

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeConfig {
  int epochs = 10;
  int batch_size = 64;
  double lr = 0.1;
  double train_fraction = 0.8;
  uint64_t seed = 0;
};

struct ProbeResult {
  double accuracy = 0.0;
  int train_count = 0;
  int test_count = 0;
};

// Trains a softmax classifier on frozen pooled features with plain SGD.
// The classifier math runs in 64-bit regardless of the feature source, so a
// fixed seed reproduces the accuracy bit-exactly.
ProbeResult linear_probe_features(const std::vector<std::vector<double>>& features,
                                  const std::vector<int>& labels, int classes, const ProbeConfig& cfg);

template <typename T>
std::vector<std::vector<double>> gap_features(Captioner<T>& model, const Corpus& corpus) {
  std::vector<std::vector<double>> features(corpus.records.size());
  parallel_for(static_cast<int>(corpus.records.size()), [&](int i) {
    NoGradGuard ng;
    const auto pooled = pool_gap(model.encode(corpus.records[i].image));
    features[i].assign(pooled.begin(), pooled.end());
  });
  return features;
}

template <typename T>
ProbeResult linear_probe(Captioner<T>& model, const Corpus& corpus, const ProbeConfig& cfg) {
  std::vector<int> labels;
  labels.reserve(corpus.records.size());
  for (const auto& rec : corpus.records) labels.push_back(rec.label);
  return linear_probe_features(gap_features(model, corpus), labels, kProbeClasses, cfg);
}

// ---------------------------------------------------------------------------
// Masked-prediction accuracy
// ---------------------------------------------------------------------------

struct MaskedAccuracyPoint {
  double t = 0.0;
  double accuracy = 0.0;
  int masked = 0;
};

// Corrupts held-out captions at each grid time and measures argmax accuracy
// at the masked positions; zero_visual repeats the measurement with the
// cross-attention contribution forced to zero (the text-shortcut probe).
template <typename T>
std::vector<MaskedAccuracyPoint> masked_accuracy(Captioner<T>& model, const Corpus& corpus,
                                                 std::span<const int> indices,
                                                 std::span<const double> t_grid, bool zero_visual,
                                                 uint64_t seed) {
  detail::require_mode(model, AttentionMode::kBidirectional, "masked_accuracy");
  std::vector<MaskedAccuracyPoint> out;
  const Vocabulary& vocab = corpus.vocab;
  for (size_t ti = 0; ti < t_grid.size(); ++ti) {
    const double t = t_grid[ti];
    std::vector<int> correct(indices.size(), 0), total(indices.size(), 0);
    parallel_for(static_cast<int>(indices.size()), [&](int i) {
      NoGradGuard ng;
      const Record& rec = corpus.records[indices[i]];
      Rng rng = Rng::stream(seed, Rng::kEval, ti * 1000003ull + static_cast<uint64_t>(i));
      const MaskedCaption mc = corrupt(rec.caption, vocab, t, rng);
      if (mc.masked_count() == 0) return;
      std::vector<uint8_t> nonpad(rec.caption.size());
      for (size_t j = 0; j < rec.caption.size(); ++j) nonpad[j] = rec.caption[j] != vocab.pad_id();
      auto visual = model.encode(rec.image);
      DecodeOptions<T> opt;
      opt.zero_cross = zero_visual;
      auto logits = model.decode(mc.tokens, 1, static_cast<int>(mc.tokens.size()), visual, nonpad, opt);
      const int k = logits.dim(1);
      for (size_t j = 0; j < rec.caption.size(); ++j) {
        if (!mc.masked[j]) continue;
        const T* row = logits.values().data() + int64_t(j) * k;
        int arg = 0;
        for (int c = 1; c < k; ++c)
          if (row[c] > row[arg]) arg = c;
        total[i] += 1;
        correct[i] += arg == rec.caption[j] ? 1 : 0;
      }
    });
    MaskedAccuracyPoint point;
    point.t = t;
    int c = 0, n = 0;
    for (size_t i = 0; i < indices.size(); ++i) {
      c += correct[i];
      n += total[i];
    }
    point.masked = n;
    point.accuracy = n ? static_cast<double>(c) / n : 0.0;
    out.push_back(point);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Compositionality (caption matching against hard negatives)
// ---------------------------------------------------------------------------

struct CompResult {
  struct PerType {
    int correct = 0;
    int total = 0;
    std::vector<int> record_ids;      // evaluated records, in order
    std::vector<uint8_t> decisions;   // 1 when the true caption won
    double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
  };
  std::map<NegativeKind, PerType> by_type;
};

// Runs true-vs-negative matching per record and negative type. Candidates are
// passed without padding; the true caption is candidate 0, so ties favour it.
template <typename T>
CompResult compositionality_eval(Captioner<T>& model, const Corpus& corpus,
                                 std::span<const int> indices, ScoreMethod method, int mc_samples,
                                 int max_pairs_per_type, uint64_t seed) {
  const Vocabulary& vocab = corpus.vocab;
  struct Task {
    int record = 0;
    NegativeKind kind;
  };
  std::vector<Task> tasks;
  std::map<NegativeKind, int> budget;
  for (int idx : indices) {
    const Record& rec = corpus.records[idx];
    for (const auto& [kind, neg] : rec.negs) {
      if (budget[kind] >= max_pairs_per_type) continue;
      budget[kind] += 1;
      tasks.push_back({idx, kind});
    }
  }
  std::vector<uint8_t> wins(tasks.size(), 0);
  parallel_for(static_cast<int>(tasks.size()), [&](int ti) {
    NoGradGuard ng;
    const Task& task = tasks[ti];
    const Record& rec = corpus.records[task.record];
    std::vector<int> truth, neg;
    for (int id : rec.caption)
      if (id != vocab.pad_id()) truth.push_back(id);
    for (int id : rec.negs.at(task.kind))
      if (id != vocab.pad_id()) neg.push_back(id);
    Rng rng = Rng::stream(seed, Rng::kMonteCarlo, static_cast<uint64_t>(ti));
    const MatchResult match = match_captions(model, rec.image, {truth, neg}, vocab, method, mc_samples, rng);
    wins[ti] = match.best == 0 ? 1 : 0;
  });
  CompResult result;
  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    auto& bucket = result.by_type[tasks[ti].kind];
    bucket.total += 1;
    bucket.correct += wins[ti];
    bucket.record_ids.push_back(tasks[ti].record);
    bucket.decisions.push_back(wins[ti]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Caption metrics
// ---------------------------------------------------------------------------

struct CaptionMetrics {
  bool exact = false;
  double token_f1 = 0.0;
};

// Exact sequence match plus bag-of-tokens F1. Inputs must have pads stripped;
// an empty reference is an error.
CaptionMetrics caption_metrics(std::span<const int> predicted, std::span<const int> reference);

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct EvalReport {
  std::vector<std::pair<std::string, double>> metrics;

  void add(const std::string& name, double value) { metrics.emplace_back(name, value); }
  std::string to_csv() const;
  std::string to_text() const;
};

}  // namespace mdcap
