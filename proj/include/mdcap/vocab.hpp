#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mdcap {

// Closed word-level vocabulary. Ids 0..3 are the special tokens; the rest is
// the fixed caption word table. [MASK] is the absorbing state of the forward
// process; [BOS]/[EOS] are only used by the autoregressive objective.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  int size() const { return static_cast<int>(words_.size()); }
  int pad_id() const { return pad_id_; }
  int mask_id() const { return mask_id_; }
  int bos_id() const { return bos_id_; }
  int eos_id() const { return eos_id_; }

  const std::string& word(int id) const;
  int id_of(const std::string& word) const;  // throws on unknown word
  bool contains(const std::string& word) const;

  std::vector<int> encode(const std::vector<std::string>& words) const;
  std::string decode(std::span<const int> ids, bool strip_pad = true) const;

  // One word per line, in id order.
  std::string to_sidecar() const;
  static Vocabulary from_sidecar(const std::string& text);

  uint64_t hash() const;

  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kMask = "<mask>";
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEos = "<eos>";

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  int pad_id_ = 0;
  int mask_id_ = 1;
  int bos_id_ = 2;
  int eos_id_ = 3;
};

}  // namespace mdcap
