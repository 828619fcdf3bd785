#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mdcap/diffusion.hpp"
#include "mdcap/synthdata.hpp"

using namespace mdcap;

namespace {
const NoiseSchedule kFull{0.0, 1.0};

std::vector<int> toy_caption(const Vocabulary& v, int words) {
  std::vector<int> ids;
  for (int i = 0; i < words; ++i) ids.push_back(v.id_of(i % 2 ? "red" : "circle"));
  return pad_to_slots(ids, v);
}
}  // namespace

TEST_CASE("alpha boundaries and interior") {
  CHECK(alpha(kFull, 0.0) == 1.0);
  CHECK(alpha(kFull, 1.0) == 0.0);
  CHECK(alpha(kFull, 0.3) == doctest::Approx(0.7).epsilon(1e-12));
  CHECK_THROWS_AS(alpha(kFull, -0.01), std::domain_error);
  CHECK_THROWS_AS(alpha(kFull, 1.01), std::domain_error);
}

TEST_CASE("alpha is strictly decreasing") {
  double prev = alpha(kFull, 0.0);
  for (int i = 1; i <= 100; ++i) {
    const double cur = alpha(kFull, i / 100.0);
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("loss weight is 1/t") {
  CHECK(loss_weight(kFull, 0.5) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(loss_weight(kFull, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(loss_weight(kFull, 0.25) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK_THROWS_AS(loss_weight(kFull, 0.0), std::domain_error);
}

TEST_CASE("sample_time honors the window") {
  NoiseSchedule sched{0.5, 1.0};
  Rng rng = Rng::stream(11, Rng::kTimeSample, 0);
  for (int i = 0; i < 1000; ++i) {
    const double t = sample_time(sched, rng);
    REQUIRE(t >= 0.5);
    REQUIRE(t <= 1.0);
  }
  // degenerate window pins t
  NoiseSchedule pinned{1.0, 1.0};
  CHECK(sample_time(pinned, rng) == 1.0);
}

TEST_CASE("sample_time matches the uniform mean") {
  const int n = 100000;
  for (auto [lo, hi, want] : {std::tuple{0.0, 1.0, 0.5}, std::tuple{0.3, 0.8, 0.55}}) {
    NoiseSchedule sched{lo, hi};
    Rng rng = Rng::stream(13, Rng::kTimeSample, static_cast<uint64_t>(lo * 100));
    double sum = 0;
    for (int i = 0; i < n; ++i) sum += sample_time(sched, rng);
    CHECK(sum / n == doctest::Approx(want).epsilon(0.0).scale(0.0).epsilon(0.02));
  }
}

TEST_CASE("corrupt boundary times") {
  const Vocabulary v = caption_vocabulary();
  const auto caption = toy_caption(v, 12);
  Rng rng = Rng::stream(3, Rng::kCorruption, 0);

  const MaskedCaption all = corrupt(caption, v, 1.0, rng);
  const MaskedCaption none = corrupt(caption, v, 0.0, rng);
  for (size_t i = 0; i < caption.size(); ++i) {
    if (caption[i] == v.pad_id()) {
      CHECK(!all.masked[i]);
      CHECK(all.tokens[i] == v.pad_id());
    } else {
      CHECK(all.masked[i]);
      CHECK(all.tokens[i] == v.mask_id());
    }
    CHECK(!none.masked[i]);
    CHECK(none.tokens[i] == caption[i]);
  }
  CHECK(all.masked_count() == 12);
  CHECK(none.masked_count() == 0);
}

TEST_CASE("corrupt rejects captions that already contain the mask") {
  const Vocabulary v = caption_vocabulary();
  std::vector<int> bad = {v.mask_id(), v.id_of("red")};
  Rng rng(1);
  CHECK_THROWS_AS(corrupt(bad, v, 0.5, rng), std::invalid_argument);
}

TEST_CASE("corrupt masking rate concentrates at t") {
  const Vocabulary v = caption_vocabulary();
  const auto caption = toy_caption(v, 12);
  Rng rng = Rng::stream(17, Rng::kCorruption, 0);
  const int trials = 10000;
  int masked = 0;
  for (int i = 0; i < trials; ++i) masked += corrupt(caption, v, 0.5, rng).masked_count();
  const double n = 12.0 * trials;
  const double rate = masked / n;
  const double sigma = std::sqrt(0.5 * 0.5 / n);
  CHECK(std::abs(rate - 0.5) <= 3 * sigma);
}

TEST_CASE("masking marginal equals t across the grid") {
  const Vocabulary v = caption_vocabulary();
  const auto caption = toy_caption(v, 12);
  for (int k = 1; k <= 9; ++k) {
    const double t = k / 10.0;
    Rng rng = Rng::stream(19, Rng::kCorruption, k);
    const int trials = 10000;
    int masked = 0;
    for (int i = 0; i < trials; ++i) masked += corrupt(caption, v, t, rng).masked_count();
    const double n = 12.0 * trials;
    const double sigma = std::sqrt(t * (1 - t) / n);
    CHECK(std::abs(masked / n - t) <= 3 * sigma + 1e-9);
  }
}

TEST_CASE("forward kernel cases") {
  const auto absorbed = forward_kernel(kFull, true, 0.2, 0.6);
  CHECK(absorbed.keep == 0.0);
  CHECK(absorbed.mask == 1.0);

  const auto from_zero = forward_kernel(kFull, false, 0.0, 0.4);
  CHECK(from_zero.keep == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(from_zero.mask == doctest::Approx(0.4).epsilon(1e-12));

  const auto mid = forward_kernel(kFull, false, 0.2, 0.6);
  CHECK(mid.keep == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS_AS(forward_kernel(kFull, false, 0.6, 0.6), std::domain_error);
  CHECK_THROWS_AS(forward_kernel(kFull, false, 0.7, 0.6), std::domain_error);
}

TEST_CASE("forward kernel composes (Markov consistency)") {
  for (int i = 1; i < 20; ++i)
    for (int j = i + 1; j <= 20; ++j) {
      const double r = i / 20.0;
      const double t = j / 20.0;
      const double direct = forward_kernel(kFull, false, 0.0, t).keep;
      const double composed =
          forward_kernel(kFull, false, 0.0, r).keep * forward_kernel(kFull, false, r, t).keep;
      CHECK(std::abs(direct - composed) <= 1e-12);
    }
}

TEST_CASE("absorbing: sampled chains never leave the mask state") {
  Rng rng = Rng::stream(23, Rng::kCorruption, 99);
  for (int chain = 0; chain < 2000; ++chain) {
    bool masked = false;
    double r = 0.0;
    for (int step = 1; step <= 8; ++step) {
      const double t = step / 8.0;
      const auto dist = forward_kernel(kFull, masked, r, t);
      if (masked) REQUIRE(dist.mask == 1.0);
      masked = rng.uniform() < dist.mask;
      r = t;
      if (masked) {
        // replay the rest of the chain; the state must stay masked
        for (int rest = step + 1; rest <= 8; ++rest)
          REQUIRE(forward_kernel(kFull, true, (rest - 1) / 8.0, rest / 8.0).mask == 1.0);
        break;
      }
    }
  }
}

TEST_CASE("posterior cases") {
  const auto point = posterior(kFull, false, 0.2, 0.7);
  CHECK(point.original == 1.0);
  CHECK(point.mask == 0.0);

  const auto certain = posterior(kFull, true, 0.0, 0.7);
  CHECK(certain.original == doctest::Approx(1.0).epsilon(1e-12));

  const auto half = posterior(kFull, true, 0.5, 1.0);
  CHECK(half.original == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(half.mask == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS_AS(posterior(kFull, true, 0.7, 0.7), std::domain_error);
}

TEST_CASE("posterior normalizes on a grid") {
  for (int i = 0; i < 40; ++i)
    for (int j = i + 1; j <= 40; ++j) {
      const double r = i / 40.0;
      const double t = j / 40.0;
      for (bool is_mask : {false, true}) {
        const auto d = posterior(kFull, is_mask, r, t);
        CHECK(std::abs(d.original + d.mask - 1.0) <= 1e-12);
        CHECK(d.original >= -1e-12);
        CHECK(d.mask >= -1e-12);
      }
    }
}

TEST_CASE("mdc_loss on hand-built logits") {
  // perfect prediction
  std::vector<std::vector<double>> confident{{50.0, 0.0, 0.0, 0.0}};
  std::vector<int> target0{0};
  CHECK(mdc_loss(confident, target0, kFull, 0.5) == doctest::Approx(0.0).scale(1).epsilon(1e-12));

  // uniform logits over K=32 at t=1
  std::vector<std::vector<double>> uniform{std::vector<double>(32, 0.0)};
  std::vector<int> target7{7};
  CHECK(mdc_loss(uniform, target7, kFull, 1.0) == doctest::Approx(std::log(32.0)).epsilon(1e-12));

  // two masked positions with per-token NLLs a and b at t = 0.5
  std::vector<std::vector<double>> rows{{2.0, 0.0, -1.0}, {0.0, 1.0, 3.0}};
  std::vector<int> targets{1, 0};
  const double a = -log_softmax_at(std::vector<double>{2.0, 0.0, -1.0}, 1);
  const double b = -log_softmax_at(std::vector<double>{0.0, 1.0, 3.0}, 0);
  CHECK(mdc_loss(rows, targets, kFull, 0.5) == doctest::Approx(2.0 * (a + b) / 2.0).epsilon(1e-12));

  // zero masked positions contribute exactly zero
  CHECK(mdc_loss({}, {}, kFull, 0.5) == 0.0);
}

TEST_CASE("mdc_loss at t=1 on a fully masked caption is plain mean cross-entropy") {
  Rng rng(77);
  std::vector<std::vector<double>> rows;
  std::vector<int> targets;
  for (int i = 0; i < 9; ++i) {
    std::vector<double> row(12);
    for (auto& x : row) x = rng.normal();
    rows.push_back(row);
    targets.push_back(static_cast<int>(rng.uniform_below(12)));
  }
  double mean_ce = 0.0;
  for (int i = 0; i < 9; ++i) mean_ce -= log_softmax_at(rows[i], targets[i]);
  mean_ce /= 9.0;
  CHECK(mdc_loss(rows, targets, kFull, 1.0) == doctest::Approx(mean_ce).epsilon(1e-12));
}

TEST_CASE("schedule validation") {
  const NoiseSchedule below{-0.1, 0.5};
  const NoiseSchedule inverted{0.8, 0.5};
  const NoiseSchedule pinned{0.5, 0.5};
  const NoiseSchedule full{0.0, 1.0};
  CHECK_THROWS_AS(below.validate(), std::invalid_argument);
  CHECK_THROWS_AS(inverted.validate(), std::invalid_argument);
  CHECK_NOTHROW(pinned.validate());
  CHECK_NOTHROW(full.validate());
}
