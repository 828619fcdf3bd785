#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "mdcap/checkpoint.hpp"
#include "mdcap/model.hpp"
#include "mdcap/rng.hpp"
#include "mdcap/synthdata.hpp"

using namespace mdcap;

namespace {

EncoderConfig enc_cfg() { return {}; }

DecoderConfig dec_cfg(AttentionMode mode = AttentionMode::kBidirectional) {
  DecoderConfig dec;
  dec.vocab_size = caption_vocabulary().size();
  dec.mode = mode;
  return dec;
}

Image random_image(uint64_t seed) {
  Rng rng(seed);
  Image img;
  img.height = img.width = 32;
  img.rgb.resize(32 * 32 * 3);
  for (auto& px : img.rgb) px = static_cast<uint8_t>(rng.uniform_below(256));
  return img;
}

}  // namespace

TEST_CASE("encode shape and determinism") {
  Captioner<float> model(enc_cfg(), dec_cfg(), 7);
  Image zero;
  zero.height = zero.width = 32;
  zero.rgb.assign(32 * 32 * 3, 0);
  NoGradGuard ng;
  auto a = model.encode(zero);
  auto b = model.encode(zero);
  CHECK(a.shape() == Shape{64, 64});
  for (int64_t i = 0; i < a.size(); ++i) {
    REQUIRE(std::isfinite(a.values()[i]));
    REQUIRE(a.values()[i] == b.values()[i]);
  }
}

TEST_CASE("encoder reacts to a one-patch change") {
  Captioner<float> model(enc_cfg(), dec_cfg(), 7);
  Image img = random_image(5);
  Image tweaked = img;
  // flip one pixel inside patch (0,0)
  tweaked.rgb[0] = tweaked.rgb[0] ^ 0x80;
  NoGradGuard ng;
  auto a = model.encode(img);
  auto b = model.encode(tweaked);
  bool differs = false;
  for (int64_t i = 0; i < a.size(); ++i) differs = differs || a.values()[i] != b.values()[i];
  CHECK(differs);
}

TEST_CASE("decode shape, determinism, and time-independence of the surface") {
  Captioner<float> model(enc_cfg(), dec_cfg(), 3);
  const Vocabulary vocab = caption_vocabulary();
  Image img = random_image(8);
  std::vector<int> tokens(16, vocab.mask_id());
  tokens[3] = vocab.id_of("red");
  NoGradGuard ng;
  auto visual = model.encode(img);
  auto l1 = model.decode(tokens, 1, 16, visual, {});
  auto l2 = model.decode(tokens, 1, 16, visual, {});
  CHECK(l1.shape() == Shape{16, vocab.size()});
  for (int64_t i = 0; i < l1.size(); ++i) REQUIRE(l1.values()[i] == l2.values()[i]);
}

TEST_CASE("causal mode: exact causality under token perturbation") {
  Captioner<float> model(enc_cfg(), dec_cfg(AttentionMode::kCausal), 11);
  const Vocabulary vocab = caption_vocabulary();
  Image img = random_image(21);
  Rng rng(33);
  NoGradGuard ng;
  auto visual = model.encode(img);
  const int n = 12;
  const int k = vocab.size();
  std::vector<int> tokens(n);
  for (auto& t : tokens) t = static_cast<int>(rng.uniform_below(k));
  auto base = model.decode(tokens, 1, n, visual, {});
  for (int j = 1; j < n; ++j) {
    auto perturbed = tokens;
    perturbed[j] = (perturbed[j] + 1 + static_cast<int>(rng.uniform_below(k - 1))) % k;
    auto out = model.decode(perturbed, 1, n, visual, {});
    for (int i = 0; i <= j; ++i)
      for (int c = 0; c < k; ++c)
        REQUIRE(out.values()[size_t(i) * k + c] == base.values()[size_t(i) * k + c]);
    bool later_changed = false;
    for (int i = j + 1; i < n && !later_changed; ++i)
      for (int c = 0; c < k; ++c)
        if (out.values()[size_t(i) * k + c] != base.values()[size_t(i) * k + c]) {
          later_changed = true;
          break;
        }
    if (j + 1 < n) CHECK(later_changed);
  }
}

TEST_CASE("bidirectional mode: a perturbed token changes other positions") {
  Captioner<float> model(enc_cfg(), dec_cfg(), 11);
  const Vocabulary vocab = caption_vocabulary();
  Image img = random_image(22);
  NoGradGuard ng;
  auto visual = model.encode(img);
  const int n = 8;
  std::vector<int> tokens(n, vocab.id_of("a"));
  auto base = model.decode(tokens, 1, n, visual, {});
  auto perturbed = tokens;
  perturbed[5] = vocab.id_of("red");
  auto out = model.decode(perturbed, 1, n, visual, {});
  bool changed_elsewhere = false;
  const int k = vocab.size();
  for (int i = 0; i < n; ++i) {
    if (i == 5) continue;
    for (int c = 0; c < k; ++c)
      if (out.values()[size_t(i) * k + c] != base.values()[size_t(i) * k + c]) changed_elsewhere = true;
  }
  CHECK(changed_elsewhere);
}

TEST_CASE("zeroing the cross-attention output changes the logits") {
  Captioner<float> model(enc_cfg(), dec_cfg(), 13);
  const Vocabulary vocab = caption_vocabulary();
  Image img = random_image(9);
  NoGradGuard ng;
  auto visual = model.encode(img);
  std::vector<int> tokens(10, vocab.mask_id());
  auto normal = model.decode(tokens, 1, 10, visual, {});
  DecodeOptions<float> opt;
  opt.zero_cross = true;
  auto blind = model.decode(tokens, 1, 10, visual, {}, opt);
  bool differs = false;
  for (int64_t i = 0; i < normal.size(); ++i)
    differs = differs || normal.values()[i] != blind.values()[i];
  CHECK(differs);
}

TEST_CASE("cached cross keys/values reproduce the plain forward bit-exactly") {
  Captioner<float> model(enc_cfg(), dec_cfg(), 17);
  const Vocabulary vocab = caption_vocabulary();
  Image img = random_image(10);
  NoGradGuard ng;
  auto visual = model.encode(img);
  auto kv = model.precompute_cross_kv(visual);
  std::vector<int> tokens(6, vocab.mask_id());
  tokens[2] = vocab.id_of("blue");
  auto plain = model.decode(tokens, 1, 6, visual, {});
  DecodeOptions<float> opt;
  opt.kv = &kv;
  auto cached = model.decode(tokens, 1, 6, visual, {}, opt);
  for (int64_t i = 0; i < plain.size(); ++i) REQUIRE(plain.values()[i] == cached.values()[i]);
}

TEST_CASE("batched decode matches per-row decode") {
  Captioner<float> model(enc_cfg(), dec_cfg(), 19);
  const Vocabulary vocab = caption_vocabulary();
  Image img = random_image(12);
  NoGradGuard ng;
  auto visual = model.encode(img);
  const int n = 5;
  std::vector<int> row0 = {4, 8, 12, 5, 6};
  std::vector<int> row1(n, vocab.mask_id());
  std::vector<int> both = row0;
  both.insert(both.end(), row1.begin(), row1.end());
  auto batched = model.decode(both, 2, n, visual, {});
  auto a = model.decode(row0, 1, n, visual, {});
  auto b = model.decode(row1, 1, n, visual, {});
  const int k = vocab.size();
  for (int i = 0; i < n * k; ++i) {
    REQUIRE(batched.values()[i] == a.values()[i]);
    REQUIRE(batched.values()[size_t(n) * k + i] == b.values()[i]);
  }
}

TEST_CASE("token id validation") {
  Captioner<float> model(enc_cfg(), dec_cfg(), 23);
  Image img = random_image(13);
  NoGradGuard ng;
  auto visual = model.encode(img);
  std::vector<int> bad = {0, 1, 9999};
  CHECK_THROWS_AS((void)model.decode(bad, 1, 3, visual, {}), std::invalid_argument);
}

TEST_CASE("pool_gap") {
  auto same = Tensor<float>::from_values({3, 2}, {1, 2, 1, 2, 1, 2});
  auto pooled = pool_gap(same);
  CHECK(pooled[0] == doctest::Approx(1.0));
  CHECK(pooled[1] == doctest::Approx(2.0));

  auto two = Tensor<float>::from_values({2, 2}, {1, 5, 3, 9});
  auto mean2 = pool_gap(two);
  CHECK(mean2[0] == doctest::Approx(2.0));
  CHECK(mean2[1] == doctest::Approx(7.0));

  auto swapped = Tensor<float>::from_values({2, 2}, {3, 9, 1, 5});
  auto mean_swapped = pool_gap(swapped);
  CHECK(mean2[0] == mean_swapped[0]);
  CHECK(mean2[1] == mean_swapped[1]);
}

TEST_CASE("parameter init is seed-deterministic and finite") {
  Captioner<float> a(enc_cfg(), dec_cfg(), 42);
  Captioner<float> b(enc_cfg(), dec_cfg(), 42);
  Captioner<float> c(enc_cfg(), dec_cfg(), 43);
  CHECK(a.params().all_finite());
  bool differs = false;
  const auto& ea = a.params().entries();
  const auto& eb = b.params().entries();
  const auto& ec = c.params().entries();
  for (size_t i = 0; i < ea.size(); ++i) {
    REQUIRE(ea[i].tensor.values() == eb[i].tensor.values());
    differs = differs || ea[i].tensor.values() != ec[i].tensor.values();
  }
  CHECK(differs);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  namespace fs = std::filesystem;
  Captioner<float> model(enc_cfg(), dec_cfg(), 31);
  Checkpoint ck;
  ck.set_meta("kind", "unit-test");
  ck.set_meta("note", "round trip");
  for (const auto& e : model.params().entries())
    ck.add<float>(e.name, e.tensor.shape(), std::span<const float>(e.tensor.values()));
  std::vector<double> moments = {0.5, -1.25, 3e-17, 1e300};
  ck.add<double>("opt.m", {4}, std::span<const double>(moments));

  const auto path = fs::temp_directory_path() / "mdcap_ckpt_test.bin";
  ck.save(path.string());
  const Checkpoint back = Checkpoint::load(path.string());
  fs::remove(path);

  REQUIRE(back.tensors.size() == ck.tensors.size());
  CHECK(*back.find_meta("kind") == "unit-test");
  for (size_t i = 0; i < ck.tensors.size(); ++i) {
    REQUIRE(back.tensors[i].name == ck.tensors[i].name);
    REQUIRE(back.tensors[i].dtype == ck.tensors[i].dtype);
    REQUIRE(back.tensors[i].shape == ck.tensors[i].shape);
    REQUIRE(back.tensors[i].bytes == ck.tensors[i].bytes);
  }
  const auto m = back.values<double>(*back.find("opt.m"));
  CHECK(m == moments);
}
