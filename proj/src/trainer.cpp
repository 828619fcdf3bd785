#include "mdcap/trainer.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace mdcap {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (objective == Objective::kBert && !(bert_ratio > 0.0 && bert_ratio <= 1.0))
    throw std::invalid_argument("bert ratio must lie in (0, 1]");
  schedule().validate();
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (steps <= 0) throw std::invalid_argument("steps must be positive");
  if (warmup_steps < 0 || warmup_steps > steps)
    throw std::invalid_argument("warmup_steps must lie in [0, steps]");
  if (dtype != "f32" && dtype != "f64") throw std::invalid_argument("dtype must be f32 or f64");
  encoder_config().validate();
  if (checkpoint_every <= 0) throw std::invalid_argument("checkpoint_every must be positive");
}

std::string TrainConfig::objective_string() const {
  switch (objective) {
    case Objective::kMdc: return "mdc";
    case Objective::kArc: return "arc";
    case Objective::kBert: return "bert:" + format_double(bert_ratio);
    case Objective::kParallel: return "parallel";
    case Objective::kCmlm: return "cmlm";
  }
  throw std::logic_error("unknown objective");
}

std::pair<Objective, double> TrainConfig::parse_objective(const std::string& text) {
  if (text == "mdc") return {Objective::kMdc, 0.0};
  if (text == "arc") return {Objective::kArc, 0.0};
  if (text == "parallel") return {Objective::kParallel, 0.0};
  if (text == "cmlm") return {Objective::kCmlm, 0.0};
  if (text.rfind("bert:", 0) == 0) {
    try {
      const double ratio = std::stod(text.substr(5));
      return {Objective::kBert, ratio};
    } catch (const std::exception&) {
      // falls through to the error below
    }
  }
  throw std::invalid_argument("invalid objective '" + text +
                              "'; valid forms: mdc | arc | bert:<ratio> | parallel | cmlm");
}

std::string TrainConfig::canonical_text() const {
  std::ostringstream out;
  out << "objective=" << objective_string() << "\n";
  out << "omega_lower=" << format_double(omega_lower) << "\n";
  out << "omega_upper=" << format_double(omega_upper) << "\n";
  out << "batch_size=" << batch_size << "\n";
  out << "steps=" << steps << "\n";
  out << "base_lr=" << format_double(base_lr) << "\n";
  out << "warmup_steps=" << warmup_steps << "\n";
  out << "weight_decay=" << format_double(weight_decay) << "\n";
  out << "beta1=" << format_double(beta1) << "\n";
  out << "beta2=" << format_double(beta2) << "\n";
  out << "seed=" << seed << "\n";
  out << "checkpoint_every=" << checkpoint_every << "\n";
  out << "grad_clip=" << format_double(grad_clip) << "\n";
  out << "dtype=" << dtype << "\n";
  out << "embed_dim=" << embed_dim << "\n";
  out << "enc_layers=" << enc_layers << "\n";
  out << "dec_layers=" << dec_layers << "\n";
  out << "heads=" << heads << "\n";
  out << "patch_size=" << patch_size << "\n";
  out << "mlp_ratio=" << mlp_ratio << "\n";
  return out.str();
}

uint64_t TrainConfig::hash() const { return fnv1a(canonical_text()); }

TrainConfig TrainConfig::parse_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash_pos = line.find('#'); hash_pos != std::string::npos) line.resize(hash_pos);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r'))
      line.pop_back();
    size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + " is not key=value: " + line);
    const std::string key = line.substr(start, eq - start);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "objective") {
        auto [obj, ratio] = parse_objective(value);
        cfg.objective = obj;
        if (obj == Objective::kBert) cfg.bert_ratio = ratio;
      } else if (key == "omega_lower") cfg.omega_lower = std::stod(value);
      else if (key == "omega_upper") cfg.omega_upper = std::stod(value);
      else if (key == "batch_size") cfg.batch_size = std::stoi(value);
      else if (key == "steps") cfg.steps = std::stoi(value);
      else if (key == "base_lr") cfg.base_lr = std::stod(value);
      else if (key == "warmup_steps") cfg.warmup_steps = std::stoi(value);
      else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
      else if (key == "beta1") cfg.beta1 = std::stod(value);
      else if (key == "beta2") cfg.beta2 = std::stod(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoi(value);
      else if (key == "grad_clip") cfg.grad_clip = std::stod(value);
      else if (key == "dtype") cfg.dtype = value;
      else if (key == "embed_dim") cfg.embed_dim = std::stoi(value);
      else if (key == "enc_layers") cfg.enc_layers = std::stoi(value);
      else if (key == "dec_layers") cfg.dec_layers = std::stoi(value);
      else if (key == "heads") cfg.heads = std::stoi(value);
      else if (key == "patch_size") cfg.patch_size = std::stoi(value);
      else if (key == "mlp_ratio") cfg.mlp_ratio = std::stoi(value);
      else throw std::invalid_argument("unknown config key '" + key + "'");
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str());
}

EncoderConfig TrainConfig::encoder_config() const {
  EncoderConfig enc;
  enc.image_size = kImageSize;
  enc.patch_size = patch_size;
  enc.dim = embed_dim;
  enc.layers = enc_layers;
  enc.heads = heads;
  enc.mlp_ratio = mlp_ratio;
  return enc;
}

DecoderConfig TrainConfig::decoder_config(int vocab_size) const {
  DecoderConfig dec;
  dec.vocab_size = vocab_size;
  dec.max_len = kCaptionSlots;
  dec.dim = embed_dim;
  dec.layers = dec_layers;
  dec.heads = heads;
  dec.mlp_ratio = mlp_ratio;
  dec.mode = objective == Objective::kArc ? AttentionMode::kCausal : AttentionMode::kBidirectional;
  return dec;
}

double cosine_lr(int64_t step, const TrainConfig& cfg) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.base_lr * static_cast<double>(step) / cfg.warmup_steps;
  const int64_t span = cfg.steps - cfg.warmup_steps;
  if (span <= 0) return cfg.base_lr;
  const double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));
}

}  // namespace mdcap
