#pragma once

#include <span>
#include <vector>

#include "mdcap/rng.hpp"
#include "mdcap/vocab.hpp"

namespace mdcap {

// Noise schedule of the absorbing-state forward process. alpha(t) is the
// probability a token survives unmasked at time t; the linear family uses
// alpha(t) = 1 - t. Training times are drawn uniformly from the window
// [omega_lower, omega_upper]; a degenerate window (lower == upper) pins t.
struct NoiseSchedule {
  enum class Family { kLinear };

  double omega_lower = 0.5;
  double omega_upper = 1.0;
  Family family = Family::kLinear;

  void validate() const;
};

// Survival probability alpha(t), t in [0, 1].
double alpha(const NoiseSchedule& sched, double t);

// Per-token loss weight |alpha'(t)| / (1 - alpha(t)) = 1/t for the linear
// family. The negative sign of the schedule derivative is absorbed into the
// negative-log-likelihood convention of the loss.
double loss_weight(const NoiseSchedule& sched, double t);

// Uniform draw from the schedule window.
double sample_time(const NoiseSchedule& sched, Rng& rng);

// Distribution over {keep current token, transition to mask}.
struct KeepMaskDist {
  double keep = 0.0;
  double mask = 0.0;
};

// Forward transition q(x_t | x_r) for r < t. A masked state is absorbing; an
// unmasked token keeps its value with probability alpha(t)/alpha(r).
KeepMaskDist forward_kernel(const NoiseSchedule& sched, bool state_is_mask, double r, double t);

// Distribution over {original token x_0, mask}.
struct PosteriorDist {
  double original = 0.0;
  double mask = 0.0;
};

// Posterior q(x_r | x_t, x_0) for r < t. If x_t is unmasked the posterior is
// a point mass on x_t (== x_0); otherwise the token is revealed with
// probability (alpha(r) - alpha(t)) / (1 - alpha(t)).
PosteriorDist posterior(const NoiseSchedule& sched, bool xt_is_mask, double r, double t);

// A caption after forward corruption at time t.
struct MaskedCaption {
  std::vector<int> tokens;       // mask_id substituted at masked positions
  std::vector<uint8_t> masked;   // per-position indicator
  double t = 0.0;
  std::vector<int> originals;    // original ids at masked positions, in order

  int masked_count() const { return static_cast<int>(originals.size()); }
};

// Masks each non-pad position independently with probability t. Pad positions
// are never masked and never recorded as supervision targets. The input must
// not already contain mask_id.
MaskedCaption corrupt(std::span<const int> tokens, const Vocabulary& vocab, double t, Rng& rng);

// Weighted cross-entropy of the masked positions: loss_weight(t) times the
// mean negative log-likelihood of the original tokens under the per-position
// logits. Zero masked positions contribute a loss of exactly zero.
double mdc_loss(const std::vector<std::vector<double>>& masked_logits, std::span<const int> targets,
                const NoiseSchedule& sched, double t);

// log(softmax(logits)[index]) with max subtraction.
double log_softmax_at(std::span<const double> logits, int index);

}  // namespace mdcap
