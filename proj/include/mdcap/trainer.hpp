#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mdcap/checkpoint.hpp"
#include "mdcap/diffusion.hpp"
#include "mdcap/model.hpp"
#include "mdcap/parallel.hpp"
#include "mdcap/synthdata.hpp"

namespace mdcap {

enum class Objective { kMdc, kArc, kBert, kParallel, kCmlm };

// Training times below this floor keep their corruption behaviour but have
// their 1/t loss weight clamped, so windows that touch t = 0 stay finite.
inline constexpr double kTimeWeightFloor = 1e-3;

struct TrainConfig {
  Objective objective = Objective::kMdc;
  double bert_ratio = 0.15;  // meaningful for the bert objective only
  double omega_lower = 0.5;
  double omega_upper = 1.0;
  int batch_size = 32;
  int steps = 5000;
  double base_lr = 3e-4;
  int warmup_steps = 200;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  uint64_t seed = 0;
  int checkpoint_every = 1000;
  double grad_clip = 0.0;  // 0 disables clipping
  std::string dtype = "f32";

  // model dimensions
  int embed_dim = 64;
  int enc_layers = 4;
  int dec_layers = 4;
  int heads = 4;
  int patch_size = 4;
  int mlp_ratio = 2;

  void validate() const;
  NoiseSchedule schedule() const { return {omega_lower, omega_upper}; }
  std::string objective_string() const;
  std::string canonical_text() const;  // every key, one per line
  uint64_t hash() const;

  static std::pair<Objective, double> parse_objective(const std::string& text);
  static TrainConfig parse_text(const std::string& text);
  static TrainConfig parse_file(const std::string& path);

  EncoderConfig encoder_config() const;
  DecoderConfig decoder_config(int vocab_size) const;
};

// Warmup ramp followed by a half cosine to zero.
double cosine_lr(int64_t step, const TrainConfig& cfg);

template <typename T>
struct AdamWState {
  std::vector<T> m;
  std::vector<T> v;
  int64_t step = 0;  // completed updates
};

// Decoupled-weight-decay Adam on flat parameter/gradient arrays. decay_mask
// marks the entries that receive weight decay.
template <typename T>
void adamw_update(AdamWState<T>& state, std::span<T> params, std::span<const T> grads, double lr,
                  const TrainConfig& cfg, std::span<const uint8_t> decay_mask) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adamw_update: mismatched array lengths");
  const double b1 = cfg.beta1, b2 = cfg.beta2, wd = cfg.weight_decay;
  const double t = static_cast<double>(++state.step);
  const double bc1 = 1.0 - std::pow(b1, t);
  const double bc2 = 1.0 - std::pow(b2, t);
  constexpr double eps = 1e-8;
  for (size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    const double m = b1 * static_cast<double>(state.m[i]) + (1.0 - b1) * g;
    const double v = b2 * static_cast<double>(state.v[i]) + (1.0 - b2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    double update = (m / bc1) / (std::sqrt(v / bc2) + eps);
    if (decay_mask[i]) update += wd * static_cast<double>(params[i]);
    params[i] = static_cast<T>(static_cast<double>(params[i]) - lr * update);
  }
}

// Loss graph for one example; `supervised` counts the positions contributing
// to the mean. `valid == false` marks examples with nothing to supervise.
template <typename T>
struct ExampleLoss {
  Tensor<T> loss;
  int supervised = 0;
  bool valid = false;
};

// Mean cross-entropy over the rows whose target is >= 0, scaled by `weight`.
template <typename T>
ExampleLoss<T> weighted_masked_ce(Tensor<T> logits, std::vector<int> targets, double weight) {
  int supervised = 0;
  for (int t : targets) supervised += t >= 0 ? 1 : 0;
  if (supervised == 0) return {};
  auto nll = cross_entropy(logits, std::move(targets));
  ExampleLoss<T> out;
  out.loss = scale(sum(nll), static_cast<T>(weight / supervised));
  out.supervised = supervised;
  out.valid = true;
  return out;
}

// Per-example objective losses. Corruption draws come from `rng`; `t` is the
// pre-sampled diffusion time for the mdc/cmlm objectives.
template <typename T>
ExampleLoss<T> mdc_example_loss(Captioner<T>& model, const Vocabulary& vocab, const Record& rec,
                                double t, Rng& rng, bool weighted) {
  const MaskedCaption mc = corrupt(rec.caption, vocab, t, rng);
  if (mc.masked_count() == 0) return {};
  std::vector<int> targets(rec.caption.size(), -1);
  for (size_t i = 0; i < rec.caption.size(); ++i)
    if (mc.masked[i]) targets[i] = rec.caption[i];
  std::vector<uint8_t> nonpad(rec.caption.size());
  for (size_t i = 0; i < rec.caption.size(); ++i) nonpad[i] = rec.caption[i] != vocab.pad_id();
  auto visual = model.encode(rec.image);
  auto logits = model.decode(mc.tokens, 1, static_cast<int>(mc.tokens.size()), visual, nonpad);
  const double w = weighted ? 1.0 / std::max(t, kTimeWeightFloor) : 1.0;
  return weighted_masked_ce(logits, std::move(targets), w);
}

template <typename T>
ExampleLoss<T> bert_example_loss(Captioner<T>& model, const Vocabulary& vocab, const Record& rec,
                                 double ratio, Rng& rng) {
  std::vector<int> maskable;
  for (size_t i = 0; i < rec.caption.size(); ++i)
    if (rec.caption[i] != vocab.pad_id()) maskable.push_back(static_cast<int>(i));
  // round-half-up count of masked positions, sampled without replacement
  const int want = static_cast<int>(std::floor(ratio * maskable.size() + 0.5));
  if (want == 0) return {};
  for (int i = 0; i < want; ++i) {
    const int j = i + static_cast<int>(rng.uniform_below(maskable.size() - i));
    std::swap(maskable[i], maskable[j]);
  }
  std::vector<int> tokens = rec.caption;
  std::vector<int> targets(rec.caption.size(), -1);
  for (int i = 0; i < want; ++i) {
    const int pos = maskable[i];
    targets[pos] = rec.caption[pos];
    tokens[pos] = vocab.mask_id();
  }
  std::vector<uint8_t> nonpad(rec.caption.size());
  for (size_t i = 0; i < rec.caption.size(); ++i) nonpad[i] = rec.caption[i] != vocab.pad_id();
  auto visual = model.encode(rec.image);
  auto logits = model.decode(tokens, 1, static_cast<int>(tokens.size()), visual, nonpad);
  return weighted_masked_ce(logits, std::move(targets), 1.0);
}

// Teacher forcing: inputs [bos, w1..wL, eos, pads...], each position predicts
// its successor, supervised up to and including eos.
template <typename T>
ExampleLoss<T> arc_example_loss(Captioner<T>& model, const Vocabulary& vocab, const Record& rec) {
  std::vector<int> seq;
  seq.push_back(vocab.bos_id());
  for (int id : rec.caption)
    if (id != vocab.pad_id()) seq.push_back(id);
  seq.push_back(vocab.eos_id());
  const int n = model.decoder_config().max_len;
  if (static_cast<int>(seq.size()) > n)
    throw std::invalid_argument("arc: caption with bos/eos exceeds max_len");
  const int real = static_cast<int>(seq.size());
  seq.resize(n, vocab.pad_id());
  std::vector<int> targets(n, -1);
  for (int i = 0; i + 1 < real; ++i) targets[i] = seq[i + 1];
  std::vector<uint8_t> nonpad(n);
  for (int i = 0; i < n; ++i) nonpad[i] = i < real;
  auto visual = model.encode(rec.image);
  auto logits = model.decode(seq, 1, n, visual, nonpad);
  return weighted_masked_ce(logits, std::move(targets), 1.0);
}

// Thrown when a training step produces a non-finite loss or parameter.
struct TrainAbort : std::runtime_error {
  explicit TrainAbort(const std::string& what) : std::runtime_error(what) {}
};

template <typename T>
class Trainer {
 public:
  struct StepInfo {
    int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    int valid_examples = 0;
  };

  Trainer(TrainConfig cfg, const Corpus& corpus, std::vector<int> train_indices)
      : cfg_(cfg), corpus_(&corpus), indices_(std::move(train_indices)) {
    cfg_.validate();
    if (indices_.empty()) throw std::invalid_argument("trainer: empty training split");
    DecoderConfig dec = cfg_.decoder_config(corpus.vocab.size());
    model_ = std::make_unique<Captioner<T>>(cfg_.encoder_config(), dec, cfg_.seed);
    const int64_t p = model_->params().total_size();
    opt_.m.assign(p, T(0));
    opt_.v.assign(p, T(0));
    decay_mask_.resize(p);
    size_t off = 0;
    for (const auto& e : model_->params().entries()) {
      const uint8_t decay = e.tensor.rank() >= 2 ? 1 : 0;
      std::fill_n(decay_mask_.begin() + off, e.tensor.size(), decay);
      off += e.tensor.size();
    }
  }

  const TrainConfig& config() const { return cfg_; }
  Captioner<T>& model() { return *model_; }
  int64_t completed_steps() const { return opt_.step; }

  // Executes one optimizer step (step index = completed_steps()).
  StepInfo run_step() {
    const int64_t s = opt_.step;
    const int b = cfg_.batch_size;
    const double lr = cosine_lr(s, cfg_);
    const NoiseSchedule sched = cfg_.schedule();

    std::vector<int> batch(b);
    {
      Rng rng = Rng::stream(cfg_.seed, Rng::kBatchSampler, s);
      for (int i = 0; i < b; ++i) batch[i] = indices_[rng.uniform_below(indices_.size())];
    }
    std::vector<double> times(b, 1.0);
    if (cfg_.objective == Objective::kMdc || cfg_.objective == Objective::kCmlm) {
      Rng rng = Rng::stream(cfg_.seed, Rng::kTimeSample, s);
      for (int i = 0; i < b; ++i) times[i] = sample_time(sched, rng);
    }

    ensure_workspace();
    const int workers = std::max(1, std::min(worker_count(), b));
    for (int w = 0; w < workers; ++w) replicas_[w]->params().copy_values_from(model_->params());
    std::vector<double> losses(b, 0.0);
    std::vector<uint8_t> valid(b, 0);
    const int64_t p = model_->params().total_size();
    parallel_for(b, [&](int i) {
      Captioner<T>& replica = *replicas_[i % workers];
      Rng rng = Rng::stream(cfg_.seed, Rng::kCorruption, uint64_t(s) * b + i);
      const Record& rec = corpus_->records[batch[i]];
      ExampleLoss<T> ex = example_loss(replica, rec, times[i], rng);
      T* slot = grads_.data() + int64_t(i) * p;
      if (!ex.valid) {
        std::fill(slot, slot + p, T(0));
        return;
      }
      replica.params().zero_grads();
      backward(ex.loss);
      replica.params().gather_grads(slot);
      losses[i] = static_cast<double>(ex.loss.item());
      valid[i] = 1;
    });

    int n_valid = 0;
    double loss_sum = 0.0;
    for (int i = 0; i < b; ++i)
      if (valid[i]) {
        ++n_valid;
        loss_sum += losses[i];
      }
    const double batch_loss = n_valid ? loss_sum / n_valid : 0.0;
    if (!std::isfinite(batch_loss))
      throw TrainAbort("non-finite loss at step " + std::to_string(s) + "\nconfig:\n" + cfg_.canonical_text());

    if (n_valid > 0) {
      std::vector<T>& g = master_grad_;
      std::fill(g.begin(), g.end(), T(0));
      for (int i = 0; i < b; ++i) {
        if (!valid[i]) continue;
        const T* slot = grads_.data() + int64_t(i) * p;
        for (int64_t j = 0; j < p; ++j) g[j] += slot[j];
      }
      const T inv = T(1) / T(n_valid);
      for (int64_t j = 0; j < p; ++j) g[j] *= inv;
      if (cfg_.grad_clip > 0.0) {
        double norm2 = 0.0;
        for (int64_t j = 0; j < p; ++j) norm2 += double(g[j]) * double(g[j]);
        const double norm = std::sqrt(norm2);
        if (norm > cfg_.grad_clip) {
          const T sc = static_cast<T>(cfg_.grad_clip / norm);
          for (int64_t j = 0; j < p; ++j) g[j] *= sc;
        }
      }
      master_values_.resize(p);
      model_->params().gather_values(master_values_.data());
      adamw_update<T>(opt_, master_values_, g, lr, cfg_, decay_mask_);
      model_->params().set_values(master_values_.data());
    } else {
      ++opt_.step;  // a fully skipped batch still advances the schedule
    }
    if (!model_->params().all_finite())
      throw TrainAbort("non-finite parameter after step " + std::to_string(s) + "\nconfig:\n" +
                       cfg_.canonical_text());
    return {s, lr, batch_loss, n_valid};
  }

  Checkpoint make_checkpoint() const {
    Checkpoint ck;
    ck.set_meta("kind", "mdcap-train-state");
    ck.set_meta("version", "1");
    ck.set_meta("objective", cfg_.objective_string());
    ck.set_meta("dtype", cfg_.dtype);
    ck.set_meta("step", std::to_string(opt_.step));
    ck.set_meta("config_hash", std::to_string(cfg_.hash()));
    ck.set_meta("vocab_hash", std::to_string(corpus_->vocab.hash()));
    ck.set_meta("vocab_size", std::to_string(corpus_->vocab.size()));
    ck.set_meta("seed", std::to_string(cfg_.seed));
    ck.set_meta("embed_dim", std::to_string(cfg_.embed_dim));
    ck.set_meta("enc_layers", std::to_string(cfg_.enc_layers));
    ck.set_meta("dec_layers", std::to_string(cfg_.dec_layers));
    ck.set_meta("heads", std::to_string(cfg_.heads));
    ck.set_meta("patch_size", std::to_string(cfg_.patch_size));
    ck.set_meta("mlp_ratio", std::to_string(cfg_.mlp_ratio));
    for (const auto& e : model_->params().entries())
      ck.add<T>(e.name, e.tensor.shape(), std::span<const T>(e.tensor.values()));
    ck.add<T>("opt.m", {static_cast<int>(opt_.m.size())}, std::span<const T>(opt_.m));
    ck.add<T>("opt.v", {static_cast<int>(opt_.v.size())}, std::span<const T>(opt_.v));
    return ck;
  }

  void load_state(const Checkpoint& ck) {
    for (auto& e : model_->params().entries()) {
      const auto* blob = ck.find(e.name);
      if (!blob) throw std::runtime_error("checkpoint is missing tensor " + e.name);
      auto vals = ck.values<T>(*blob);
      if (vals.size() != e.tensor.values().size())
        throw std::runtime_error("checkpoint tensor " + e.name + " has the wrong size");
      e.tensor.values() = std::move(vals);
    }
    const auto* m = ck.find("opt.m");
    const auto* v = ck.find("opt.v");
    if (!m || !v) throw std::runtime_error("checkpoint is missing optimizer moments");
    opt_.m = ck.values<T>(*m);
    opt_.v = ck.values<T>(*v);
    if (const std::string* s = ck.find_meta("step")) opt_.step = std::stoll(*s);
  }

 private:
  ExampleLoss<T> example_loss(Captioner<T>& model, const Record& rec, double t, Rng& rng) {
    switch (cfg_.objective) {
      case Objective::kMdc:
        return mdc_example_loss(model, corpus_->vocab, rec, t, rng, /*weighted=*/true);
      case Objective::kCmlm:
        return mdc_example_loss(model, corpus_->vocab, rec, t, rng, /*weighted=*/false);
      case Objective::kBert:
        return bert_example_loss(model, corpus_->vocab, rec, cfg_.bert_ratio, rng);
      case Objective::kParallel:
        return bert_example_loss(model, corpus_->vocab, rec, 1.0, rng);
      case Objective::kArc:
        return arc_example_loss(model, corpus_->vocab, rec);
    }
    throw std::logic_error("unknown objective");
  }

  void ensure_workspace() {
    const int64_t p = model_->params().total_size();
    grads_.resize(int64_t(cfg_.batch_size) * p);
    master_grad_.resize(p);
    const int workers = std::max(1, std::min(worker_count(), cfg_.batch_size));
    while (static_cast<int>(replicas_.size()) < workers)
      replicas_.push_back(std::make_unique<Captioner<T>>(model_->encoder_config(),
                                                         model_->decoder_config(), cfg_.seed));
  }

  TrainConfig cfg_;
  const Corpus* corpus_;
  std::vector<int> indices_;
  std::unique_ptr<Captioner<T>> model_;
  std::vector<std::unique_ptr<Captioner<T>>> replicas_;
  AdamWState<T> opt_;
  std::vector<uint8_t> decay_mask_;
  std::vector<T> grads_;
  std::vector<T> master_grad_;
  std::vector<T> master_values_;
};

// Rebuilds a captioner from a checkpoint written by Trainer::make_checkpoint.
template <typename T>
Captioner<T> load_captioner(const Checkpoint& ck) {
  auto meta_int = [&](const char* key) {
    const std::string* v = ck.find_meta(key);
    if (!v) throw std::runtime_error(std::string("checkpoint is missing meta key ") + key);
    return std::stoi(*v);
  };
  const std::string* dtype = ck.find_meta("dtype");
  const char* want = sizeof(T) == 4 ? "f32" : "f64";
  if (!dtype || *dtype != want)
    throw std::runtime_error("checkpoint dtype is " + (dtype ? *dtype : std::string("missing")) +
                             ", wanted " + want);
  TrainConfig cfg;
  cfg.embed_dim = meta_int("embed_dim");
  cfg.enc_layers = meta_int("enc_layers");
  cfg.dec_layers = meta_int("dec_layers");
  cfg.heads = meta_int("heads");
  cfg.patch_size = meta_int("patch_size");
  cfg.mlp_ratio = meta_int("mlp_ratio");
  const std::string* obj = ck.find_meta("objective");
  if (obj) cfg.objective = TrainConfig::parse_objective(*obj).first;
  Captioner<T> model(cfg.encoder_config(), cfg.decoder_config(meta_int("vocab_size")), 0);
  for (auto& e : model.params().entries()) {
    const auto* blob = ck.find(e.name);
    if (!blob) throw std::runtime_error("checkpoint is missing tensor " + e.name);
    auto vals = ck.values<T>(*blob);
    if (vals.size() != e.tensor.values().size())
      throw std::runtime_error("checkpoint tensor " + e.name + " has the wrong size");
    e.tensor.values() = std::move(vals);
  }
  return model;
}

}  // namespace mdcap
