#include "mdcap/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mdcap {

void NoiseSchedule::validate() const {
  if (!(omega_lower >= 0.0 && omega_lower <= 1.0) || !(omega_upper >= 0.0 && omega_upper <= 1.0))
    throw std::invalid_argument("noise schedule window must lie in [0, 1]");
  if (omega_lower > omega_upper)
    throw std::invalid_argument("noise schedule window must satisfy omega_lower <= omega_upper");
}

double alpha(const NoiseSchedule& sched, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("alpha: t must lie in [0, 1]");
  switch (sched.family) {
    case NoiseSchedule::Family::kLinear:
      return 1.0 - t;
  }
  throw std::logic_error("unknown schedule family");
}

double loss_weight(const NoiseSchedule& sched, double t) {
  if (!(t > 0.0)) throw std::domain_error("loss_weight: t must be > 0");
  if (t > 1.0) throw std::domain_error("loss_weight: t must lie in (0, 1]");
  switch (sched.family) {
    case NoiseSchedule::Family::kLinear:
      return 1.0 / t;
  }
  throw std::logic_error("unknown schedule family");
}

double sample_time(const NoiseSchedule& sched, Rng& rng) {
  sched.validate();
  if (sched.omega_lower == sched.omega_upper) return sched.omega_lower;
  return rng.uniform(sched.omega_lower, sched.omega_upper);
}

KeepMaskDist forward_kernel(const NoiseSchedule& sched, bool state_is_mask, double r, double t) {
  if (!(r < t)) throw std::domain_error("forward_kernel: requires r < t");
  if (state_is_mask) return {0.0, 1.0};  // absorbing
  const double ratio = alpha(sched, t) / alpha(sched, r);
  return {ratio, 1.0 - ratio};
}

PosteriorDist posterior(const NoiseSchedule& sched, bool xt_is_mask, double r, double t) {
  if (!(r < t)) throw std::domain_error("posterior: requires r < t");
  if (!xt_is_mask) return {1.0, 0.0};  // point mass on x_t
  const double ar = alpha(sched, r);
  const double at = alpha(sched, t);
  const double denom = 1.0 - at;
  return {(ar - at) / denom, (1.0 - ar) / denom};
}

MaskedCaption corrupt(std::span<const int> tokens, const Vocabulary& vocab, double t, Rng& rng) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("corrupt: t must lie in [0, 1]");
  MaskedCaption out;
  out.t = t;
  out.tokens.assign(tokens.begin(), tokens.end());
  out.masked.assign(tokens.size(), 0);
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == vocab.mask_id())
      throw std::invalid_argument("corrupt: input caption already contains the mask token");
    if (tokens[i] == vocab.pad_id()) continue;
    if (rng.uniform() < t) {
      out.masked[i] = 1;
      out.originals.push_back(tokens[i]);
      out.tokens[i] = vocab.mask_id();
    }
  }
  return out;
}

double log_softmax_at(std::span<const double> logits, int index) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - m);
  return logits[index] - m - std::log(sum);
}

double mdc_loss(const std::vector<std::vector<double>>& masked_logits, std::span<const int> targets,
                const NoiseSchedule& sched, double t) {
  if (masked_logits.size() != targets.size())
    throw std::invalid_argument("mdc_loss: one logit row per masked position required");
  if (masked_logits.empty()) return 0.0;
  double nll = 0.0;
  for (size_t i = 0; i < targets.size(); ++i) {
    nll -= log_softmax_at(masked_logits[i], targets[i]);
  }
  return loss_weight(sched, t) * nll / static_cast<double>(targets.size());
}

}  // namespace mdcap
