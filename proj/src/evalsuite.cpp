#include "mdcap/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mdcap {

Split make_split(int count, double train_fraction, uint64_t seed) {
  if (count <= 0) throw std::invalid_argument("make_split: count must be positive");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("make_split: train fraction must lie in (0, 1)");
  std::vector<int> perm(count);
  for (int i = 0; i < count; ++i) perm[i] = i;
  Rng rng = Rng::stream(seed, Rng::kProbe, 0);
  for (int i = count - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform_below(i + 1));
    std::swap(perm[i], perm[j]);
  }
  const int train_n = static_cast<int>(train_fraction * count);
  Split split;
  split.train.assign(perm.begin(), perm.begin() + train_n);
  split.test.assign(perm.begin() + train_n, perm.end());
  return split;
}

ProbeResult linear_probe_features(const std::vector<std::vector<double>>& features,
                                  const std::vector<int>& labels, int classes, const ProbeConfig& cfg) {
  if (features.size() != labels.size() || features.empty())
    throw std::invalid_argument("linear_probe: features and labels disagree");
  const int dim = static_cast<int>(features[0].size());
  const Split split = make_split(static_cast<int>(features.size()), cfg.train_fraction, cfg.seed);
  auto distinct = [&](const std::vector<int>& idx) {
    std::set<int> seen;
    for (int i : idx) seen.insert(labels[i]);
    return seen.size();
  };
  if (distinct(split.train) < 2 || distinct(split.test) < 2)
    throw std::invalid_argument("linear_probe: degenerate single-class split");

  std::vector<double> w(size_t(dim) * classes, 0.0), b(classes, 0.0);
  std::vector<int> order = split.train;
  std::vector<double> logits(classes), gw(size_t(dim) * classes), gb(classes);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = Rng::stream(cfg.seed, Rng::kProbe, 1 + epoch);
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_below(i + 1));
      std::swap(order[i], order[j]);
    }
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (size_t s = start; s < end; ++s) {
        const auto& x = features[order[s]];
        const int y = labels[order[s]];
        for (int c = 0; c < classes; ++c) {
          double acc = b[c];
          for (int d = 0; d < dim; ++d) acc += w[size_t(d) * classes + c] * x[d];
          logits[c] = acc;
        }
        const double m = *std::max_element(logits.begin(), logits.end());
        double sum = 0.0;
        for (int c = 0; c < classes; ++c) {
          logits[c] = std::exp(logits[c] - m);
          sum += logits[c];
        }
        for (int c = 0; c < classes; ++c) {
          const double p = logits[c] / sum - (c == y ? 1.0 : 0.0);
          gb[c] += p;
          for (int d = 0; d < dim; ++d) gw[size_t(d) * classes + c] += p * x[d];
        }
      }
      const double scale = cfg.lr / static_cast<double>(end - start);
      for (size_t i = 0; i < gw.size(); ++i) w[i] -= scale * gw[i];
      for (int c = 0; c < classes; ++c) b[c] -= scale * gb[c];
    }
  }

  int correct = 0;
  for (int i : split.test) {
    const auto& x = features[i];
    int arg = 0;
    double best = -1e300;
    for (int c = 0; c < classes; ++c) {
      double acc = b[c];
      for (int d = 0; d < dim; ++d) acc += w[size_t(d) * classes + c] * x[d];
      if (acc > best) {
        best = acc;
        arg = c;
      }
    }
    correct += arg == labels[i] ? 1 : 0;
  }
  ProbeResult result;
  result.train_count = static_cast<int>(split.train.size());
  result.test_count = static_cast<int>(split.test.size());
  result.accuracy = static_cast<double>(correct) / split.test.size();
  return result;
}

CaptionMetrics caption_metrics(std::span<const int> predicted, std::span<const int> reference) {
  if (reference.empty()) throw std::invalid_argument("caption_metrics: empty reference");
  CaptionMetrics out;
  out.exact = predicted.size() == reference.size() &&
              std::equal(predicted.begin(), predicted.end(), reference.begin());
  std::map<int, int> want;
  for (int id : reference) want[id] += 1;
  int overlap = 0;
  for (int id : predicted) {
    auto it = want.find(id);
    if (it != want.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  const double denom = static_cast<double>(predicted.size() + reference.size());
  out.token_f1 = denom > 0 ? 2.0 * overlap / denom : 0.0;
  return out;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "metric,value\n";
  for (const auto& [name, value] : metrics) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    out << name << ',' << buf << '\n';
  }
  return out.str();
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  size_t width = 0;
  for (const auto& [name, value] : metrics) width = std::max(width, name.size());
  for (const auto& [name, value] : metrics) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", value);
    out << name << std::string(width - name.size() + 2, ' ') << buf << '\n';
  }
  return out.str();
}

}  // namespace mdcap
