#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdcap/rng.hpp"
#include "mdcap/tensor.hpp"

namespace mdcap {

enum class AttentionMode { kBidirectional, kCausal };

struct EncoderConfig {
  int image_size = 32;
  int patch_size = 4;
  int dim = 64;
  int layers = 4;
  int heads = 4;
  int mlp_ratio = 2;

  int patches_per_side() const { return image_size / patch_size; }
  int patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return patch_size * patch_size * 3; }
  void validate() const {
    if (image_size % patch_size != 0)
      throw std::invalid_argument("encoder: image size must be divisible by patch size");
    if (dim % heads != 0) throw std::invalid_argument("encoder: dim must be divisible by heads");
  }
};

struct DecoderConfig {
  int vocab_size = 0;
  int max_len = 16;
  int dim = 64;
  int layers = 4;
  int heads = 4;
  int mlp_ratio = 2;
  AttentionMode mode = AttentionMode::kBidirectional;

  void validate() const {
    if (vocab_size <= 0) throw std::invalid_argument("decoder: vocab size must be positive");
    if (dim % heads != 0) throw std::invalid_argument("decoder: dim must be divisible by heads");
  }
};

struct Image {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> rgb;  // H*W*3, row-major
};

// Ordered collection of named parameter tensors. Entry order is fixed by
// construction and doubles as checkpoint manifest order and optimizer layout.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  enum class Init { kZero, kOne, kTruncNormal };

  Tensor<T>& add(const std::string& name, Shape shape, Init init, Rng& rng) {
    for (const auto& e : entries_)
      if (e.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
    switch (init) {
      case Init::kZero:
        break;
      case Init::kOne:
        std::fill(t.values().begin(), t.values().end(), T(1));
        break;
      case Init::kTruncNormal:
        for (auto& v : t.values()) v = static_cast<T>(rng.truncated_normal(0.02, 0.04));
        break;
    }
    entries_.push_back({name, t});
    return entries_.back().tensor;
  }

  Tensor<T>& get(const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return e.tensor;
    throw std::invalid_argument("unknown parameter: " + name);
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  void copy_values_from(const ParamStore& other) {
    if (other.entries_.size() != entries_.size())
      throw std::invalid_argument("parameter stores differ in entry count");
    for (size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name ||
          entries_[i].tensor.shape() != other.entries_[i].tensor.shape())
        throw std::invalid_argument("parameter stores differ at entry " + entries_[i].name);
      entries_[i].tensor.values() = other.entries_[i].tensor.values();
    }
  }

  void gather_values(T* out) const {
    for (const auto& e : entries_) {
      const auto& v = e.tensor.values();
      std::copy(v.begin(), v.end(), out);
      out += v.size();
    }
  }

  void set_values(const T* in) {
    for (auto& e : entries_) {
      auto& v = e.tensor.values();
      std::copy(in, in + v.size(), v.begin());
      in += v.size();
    }
  }

  void gather_grads(T* out) {
    for (auto& e : entries_) {
      auto& g = e.tensor.grad();
      std::copy(g.begin(), g.end(), out);
      out += g.size();
    }
  }

  bool all_finite() const {
    for (const auto& e : entries_)
      for (T v : e.tensor.values())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  std::vector<Entry> entries_;
};

// Flattens an image into per-patch pixel rows, values scaled to [0, 1].
template <typename T>
Tensor<T> patchify(const Image& img, const EncoderConfig& cfg) {
  if (img.height != cfg.image_size || img.width != cfg.image_size ||
      img.rgb.size() != static_cast<size_t>(cfg.image_size) * cfg.image_size * 3)
    throw std::invalid_argument("patchify: image dimensions do not match encoder config");
  const int side = cfg.patches_per_side();
  const int p = cfg.patch_size;
  auto out = Tensor<T>::zeros({cfg.patches(), cfg.patch_dim()});
  T* po = out.values().data();
  for (int py = 0; py < side; ++py)
    for (int px = 0; px < side; ++px) {
      T* row = po + int64_t(py * side + px) * cfg.patch_dim();
      int k = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int c = 0; c < 3; ++c)
            row[k++] = T(img.rgb[((py * p + y) * cfg.image_size + (px * p + x)) * 3 + c]) / T(255);
    }
  return out;
}

// Per-layer cross-attention keys/values precomputed from one visual sequence,
// shaped (heads, M, head_dim). Reusable across many decode calls; only valid
// under NoGradGuard since the cached tensors are constants.
template <typename T>
struct CrossKV {
  std::vector<Tensor<T>> k;
  std::vector<Tensor<T>> v;
};

template <typename T>
struct DecodeOptions {
  bool zero_cross = false;        // force the cross-attention output to zero
  const CrossKV<T>* kv = nullptr; // optional cache for a shared image
};

// The captioner h = (encoder, decoder). The encoder turns an image into a
// sequence of M visual features; the decoder predicts per-position vocabulary
// logits from token ids and the visual sequence via cross-attention. The
// decoder takes no time input; masking time enters only through the loss.
template <typename T>
class Captioner {
 public:
  Captioner(EncoderConfig enc, DecoderConfig dec, uint64_t init_seed) : enc_(enc), dec_(dec) {
    enc_.validate();
    dec_.validate();
    build_params(init_seed);
  }

  const EncoderConfig& encoder_config() const { return enc_; }
  const DecoderConfig& decoder_config() const { return dec_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // (M, dim) visual features for one image.
  Tensor<T> encode(const Image& img) {
    auto x = patchify<T>(img, enc_);
    x = add(matmul(x, p("enc.patch.w")), p("enc.patch.b"));
    x = add(x, p("enc.pos"));
    const int m = enc_.patches();
    for (int l = 0; l < enc_.layers; ++l) {
      const std::string pre = "enc." + std::to_string(l) + ".";
      x = add(x, self_attention(layer_norm(x, p(pre + "ln1.g"), p(pre + "ln1.b")), pre + "attn.", 1, m,
                                enc_.heads, nullptr));
      x = add(x, mlp(layer_norm(x, p(pre + "ln2.g"), p(pre + "ln2.b")), pre + "mlp."));
    }
    return layer_norm(x, p("enc.final_ln.g"), p("enc.final_ln.b"));
  }

  // Logits (batch*seq_len, K) for a flat batch of token sequences that share
  // one visual feature sequence. `nonpad` marks positions that may be
  // attended to as keys; it applies to every row of the batch.
  Tensor<T> decode(std::span<const int> tokens, int batch, int seq_len, Tensor<T> visual,
                   std::span<const uint8_t> nonpad, const DecodeOptions<T>& opt = {}) {
    if (static_cast<int>(tokens.size()) != batch * seq_len)
      throw std::invalid_argument("decode: token count does not match batch * seq_len");
    if (seq_len > dec_.max_len) throw std::invalid_argument("decode: sequence longer than max_len");
    for (int id : tokens)
      if (id < 0 || id >= dec_.vocab_size)
        throw std::invalid_argument("decode: token id " + std::to_string(id) + " outside vocabulary");
    std::vector<int> pos_ids(size_t(batch) * seq_len);
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < seq_len; ++i) pos_ids[size_t(b) * seq_len + i] = i;
    auto x = add(embedding(p("dec.tok"), std::vector<int>(tokens.begin(), tokens.end())),
                 embedding(p("dec.pos"), std::move(pos_ids)));
    auto mask = self_mask(batch, seq_len, nonpad);
    for (int l = 0; l < dec_.layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".";
      x = add(x, self_attention(layer_norm(x, p(pre + "ln1.g"), p(pre + "ln1.b")), pre + "self.", batch,
                                seq_len, dec_.heads, &mask));
      auto c = cross_attention(layer_norm(x, p(pre + "ln2.g"), p(pre + "ln2.b")), pre + "cross.", batch,
                               seq_len, visual, l, opt);
      if (opt.zero_cross) c = scale(c, T(0));
      x = add(x, c);
      x = add(x, mlp(layer_norm(x, p(pre + "ln3.g"), p(pre + "ln3.b")), pre + "mlp."));
    }
    x = layer_norm(x, p("dec.final_ln.g"), p("dec.final_ln.b"));
    return add(matmul(x, p("dec.head.w")), p("dec.head.b"));
  }

  // Precomputes per-layer cross-attention keys/values for one visual
  // sequence. Call under NoGradGuard.
  CrossKV<T> precompute_cross_kv(Tensor<T> visual) {
    if (grad_enabled()) throw std::logic_error("precompute_cross_kv requires NoGradGuard");
    CrossKV<T> kv;
    for (int l = 0; l < dec_.layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".cross.";
      kv.k.push_back(heads_first(add(matmul(visual, p(pre + "wk")), p(pre + "bk")), dec_.heads));
      kv.v.push_back(heads_first(add(matmul(visual, p(pre + "wv")), p(pre + "bv")), dec_.heads));
    }
    return kv;
  }

 private:
  Tensor<T>& p(const std::string& name) { return params_.get(name); }

  // (rows, dim) -> (heads, rows, head_dim)
  Tensor<T> heads_first(Tensor<T> x, int heads) {
    const int rows = x.dim(0);
    const int hd = x.dim(1) / heads;
    return reshape(permute(reshape(x, {rows, heads, hd}), {1, 0, 2}), {heads, rows, hd});
  }

  // (batch*rows, dim) -> (batch*heads, rows, head_dim)
  Tensor<T> split_heads(Tensor<T> x, int batch, int rows, int heads) {
    const int hd = x.dim(1) / heads;
    return reshape(permute(reshape(x, {batch, rows, heads, hd}), {0, 2, 1, 3}), {batch * heads, rows, hd});
  }

  Tensor<T> merge_heads(Tensor<T> x, int batch, int rows, int heads) {
    const int hd = x.dim(2);
    return reshape(permute(reshape(x, {batch, heads, rows, hd}), {0, 2, 1, 3}), {batch * rows, heads * hd});
  }

  std::shared_ptr<std::vector<uint8_t>> self_mask(int batch, int n, std::span<const uint8_t> nonpad) {
    auto mask = std::make_shared<std::vector<uint8_t>>(size_t(batch) * dec_.heads * n * n, 1);
    const bool causal = dec_.mode == AttentionMode::kCausal;
    const bool all_real = nonpad.empty();
    for (int q = 0; q < n; ++q)
      for (int k = 0; k < n; ++k) {
        const bool key_ok = all_real || nonpad[k] || k == q;
        const bool order_ok = !causal || k <= q;
        if (key_ok && order_ok) continue;
        for (int bh = 0; bh < batch * dec_.heads; ++bh) (*mask)[(size_t(bh) * n + q) * n + k] = 0;
      }
    return mask;
  }

  Tensor<T> self_attention(Tensor<T> x, const std::string& pre, int batch, int rows, int heads,
                           const std::shared_ptr<std::vector<uint8_t>>* mask) {
    const int hd = x.dim(1) / heads;
    auto q = split_heads(add(matmul(x, p(pre + "wq")), p(pre + "bq")), batch, rows, heads);
    auto k = split_heads(add(matmul(x, p(pre + "wk")), p(pre + "bk")), batch, rows, heads);
    auto v = split_heads(add(matmul(x, p(pre + "wv")), p(pre + "bv")), batch, rows, heads);
    auto scores = matmul(scale(q, T(1) / std::sqrt(T(hd))), permute(k, {0, 2, 1}));
    if (mask) scores = apply_attention_mask(scores, *mask);
    auto out = merge_heads(matmul(softmax(scores), v), batch, rows, heads);
    return add(matmul(out, p(pre + "wo")), p(pre + "bo"));
  }

  Tensor<T> cross_attention(Tensor<T> x, const std::string& pre, int batch, int rows, Tensor<T> visual,
                            int layer, const DecodeOptions<T>& opt) {
    const int heads = dec_.heads;
    const int hd = dec_.dim / heads;
    auto q = split_heads(add(matmul(x, p(pre + "wq")), p(pre + "bq")), batch, rows, heads);
    Tensor<T> k, v;
    if (opt.kv) {
      k = opt.kv->k[layer];
      v = opt.kv->v[layer];
    } else {
      k = heads_first(add(matmul(visual, p(pre + "wk")), p(pre + "bk")), heads);
      v = heads_first(add(matmul(visual, p(pre + "wv")), p(pre + "bv")), heads);
    }
    auto scores = matmul(scale(q, T(1) / std::sqrt(T(hd))), permute(k, {0, 2, 1}));
    auto out = merge_heads(matmul(softmax(scores), v), batch, rows, heads);
    return add(matmul(out, p(pre + "wo")), p(pre + "bo"));
  }

  Tensor<T> mlp(Tensor<T> x, const std::string& pre) {
    auto h = gelu(add(matmul(x, p(pre + "w1")), p(pre + "b1")));
    return add(matmul(h, p(pre + "w2")), p(pre + "b2"));
  }

  void build_params(uint64_t seed) {
    using Init = typename ParamStore<T>::Init;
    int stream = 0;
    auto rng_for = [&]() { return Rng::stream(seed, Rng::kParamInit, stream++); };
    auto add_tn = [&](const std::string& name, Shape shape) {
      Rng r = rng_for();
      params_.add(name, std::move(shape), Init::kTruncNormal, r);
    };
    auto add_zero = [&](const std::string& name, Shape shape) {
      Rng r = rng_for();
      params_.add(name, std::move(shape), Init::kZero, r);
    };
    auto add_one = [&](const std::string& name, Shape shape) {
      Rng r = rng_for();
      params_.add(name, std::move(shape), Init::kOne, r);
    };
    auto add_ln = [&](const std::string& name, int dim) {
      add_one(name + ".g", {dim});
      add_zero(name + ".b", {dim});
    };

    // encoder
    add_tn("enc.patch.w", {enc_.patch_dim(), enc_.dim});
    add_zero("enc.patch.b", {enc_.dim});
    add_tn("enc.pos", {enc_.patches(), enc_.dim});
    for (int l = 0; l < enc_.layers; ++l) {
      const std::string pre = "enc." + std::to_string(l) + ".";
      add_ln(pre + "ln1", enc_.dim);
      for (const char* nm : {"wq", "wk", "wv", "wo"}) add_tn(pre + "attn." + nm, {enc_.dim, enc_.dim});
      for (const char* nm : {"bq", "bk", "bv", "bo"}) add_zero(pre + "attn." + nm, {enc_.dim});
      add_ln(pre + "ln2", enc_.dim);
      add_tn(pre + "mlp.w1", {enc_.dim, enc_.dim * enc_.mlp_ratio});
      add_zero(pre + "mlp.b1", {enc_.dim * enc_.mlp_ratio});
      add_tn(pre + "mlp.w2", {enc_.dim * enc_.mlp_ratio, enc_.dim});
      add_zero(pre + "mlp.b2", {enc_.dim});
    }
    add_ln("enc.final_ln", enc_.dim);

    // decoder
    add_tn("dec.tok", {dec_.vocab_size, dec_.dim});
    add_tn("dec.pos", {dec_.max_len, dec_.dim});
    for (int l = 0; l < dec_.layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".";
      add_ln(pre + "ln1", dec_.dim);
      for (const char* nm : {"wq", "wk", "wv", "wo"}) add_tn(pre + "self." + nm, {dec_.dim, dec_.dim});
      for (const char* nm : {"bq", "bk", "bv", "bo"}) add_zero(pre + "self." + nm, {dec_.dim});
      add_ln(pre + "ln2", dec_.dim);
      for (const char* nm : {"wq", "wk", "wv", "wo"}) add_tn(pre + "cross." + nm, {dec_.dim, dec_.dim});
      for (const char* nm : {"bq", "bk", "bv", "bo"}) add_zero(pre + "cross." + nm, {dec_.dim});
      add_ln(pre + "ln3", dec_.dim);
      add_tn(pre + "mlp.w1", {dec_.dim, dec_.dim * dec_.mlp_ratio});
      add_zero(pre + "mlp.b1", {dec_.dim * dec_.mlp_ratio});
      add_tn(pre + "mlp.w2", {dec_.dim * dec_.mlp_ratio, dec_.dim});
      add_zero(pre + "mlp.b2", {dec_.dim});
    }
    add_ln("dec.final_ln", dec_.dim);
    add_tn("dec.head.w", {dec_.dim, dec_.vocab_size});
    add_zero("dec.head.b", {dec_.vocab_size});
  }

  EncoderConfig enc_;
  DecoderConfig dec_;
  ParamStore<T> params_;
};

// Global average pool over the feature sequence: (M, d) -> (d).
template <typename T>
std::vector<T> pool_gap(const Tensor<T>& visual) {
  if (visual.rank() != 2 || visual.dim(0) < 1)
    throw std::invalid_argument("pool_gap: expects (M, d) with M >= 1, got " + shape_str(visual.shape()));
  const int m = visual.dim(0), d = visual.dim(1);
  std::vector<T> out(d, T(0));
  const T* pv = visual.values().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) out[j] += pv[int64_t(i) * d + j];
  for (int j = 0; j < d; ++j) out[j] /= T(m);
  return out;
}

}  // namespace mdcap
