#include "mdcap/vocab.hpp"

#include <sstream>
#include <stdexcept>

#include "mdcap/rng.hpp"

namespace mdcap {

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < 4) throw std::invalid_argument("vocabulary needs the four special tokens");
  for (int i = 0; i < static_cast<int>(words_.size()); ++i) {
    auto [it, inserted] = ids_.emplace(words_[i], i);
    if (!inserted) throw std::invalid_argument("duplicate vocabulary word: " + words_[i]);
  }
  pad_id_ = id_of(kPad);
  mask_id_ = id_of(kMask);
  bos_id_ = id_of(kBos);
  eos_id_ = id_of(kEos);
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocabulary id out of range: " + std::to_string(id));
  return words_[id];
}

int Vocabulary::id_of(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw std::invalid_argument("word not in vocabulary: " + word);
  return it->second;
}

bool Vocabulary::contains(const std::string& word) const { return ids_.count(word) != 0; }

std::vector<int> Vocabulary::encode(const std::vector<std::string>& words) const {
  std::vector<int> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(id_of(w));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids, bool strip_pad) const {
  std::string out;
  for (int id : ids) {
    if (strip_pad && id == pad_id_) continue;
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

std::string Vocabulary::to_sidecar() const {
  std::string out;
  for (const auto& w : words_) {
    out += w;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::from_sidecar(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary(std::move(words));
}

uint64_t Vocabulary::hash() const { return fnv1a(to_sidecar()); }

}  // namespace mdcap
