#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mdcap/model.hpp"
#include "mdcap/rng.hpp"
#include "mdcap/vocab.hpp"

namespace mdcap {

// A latent synthetic world: one to three colored shapes on a 2x2 cell grid.
// Images, captions, hard negatives and the probe label all derive from it.
struct Scene {
  struct Object {
    int shape = 0;  // circle, square, triangle, cross
    int color = 0;  // red, green, blue, yellow
    int cell = 0;   // row-major cell on the 2x2 grid
  };
  std::vector<Object> objects;  // sorted by cell, no duplicates
  uint64_t seed = 0;
};

inline constexpr int kGridSide = 2;
inline constexpr int kCells = kGridSide * kGridSide;
inline constexpr int kImageSize = 32;
inline constexpr int kCaptionSlots = 16;
inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 4;
inline constexpr int kProbeClasses = kNumShapes * kNumColors;
inline constexpr const char* kGrammarVersion = "g1";

const char* shape_name(int shape);
const char* color_name(int color);

// Uniform scene: object count in {1,2,3}, distinct cells, uniform attributes.
Scene gen_scene(Rng& rng);
Scene scene_from_seed(uint64_t seed);

// Deterministic rasterization: filled shapes on a dark background, no
// anti-aliasing, integer-only pixel tests.
Image render(const Scene& scene);

// The fixed caption vocabulary (specials + grammar words).
Vocabulary caption_vocabulary();

// Deterministic caption words for a scene. The surface pattern varies with
// the scene seed, but every pattern lists the objects' color and shape words
// in cell order, so the attribute multiset is recoverable from the text.
std::vector<std::string> caption_words(const Scene& scene);

// Tokenized caption, padded to kCaptionSlots.
std::vector<int> caption_of(const Scene& scene, const Vocabulary& vocab);

enum class NegativeKind { kSwap, kReplace, kShuffle };
const char* negative_name(NegativeKind kind);

// Hard negatives, padded. swap exchanges the first two objects' color words
// (their shape words when colors coincide) and is absent when no exchange
// changes the caption; replace substitutes one attribute word; shuffle applies
// a non-identity permutation of the caption words.
std::map<NegativeKind, std::vector<int>> negatives(const Scene& scene, const Vocabulary& vocab);

// Class of the object in the first occupied cell: shape * kNumColors + color.
int probe_label(const Scene& scene);

std::vector<int> pad_to_slots(std::vector<int> ids, const Vocabulary& vocab);
int real_length(std::span<const int> ids, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

struct Record {
  uint64_t seed = 0;
  Image image;
  std::vector<int> caption;  // padded to kCaptionSlots
  std::map<NegativeKind, std::vector<int>> negs;
  int label = 0;
};

struct Corpus {
  Vocabulary vocab;
  std::vector<Record> records;
  uint64_t master_seed = 0;

  static Corpus generate(int count, uint64_t master_seed);

  // Directory layout: corpus.txt (one record per line, integers only),
  // vocab.txt (one word per line), manifest.txt (key=value).
  void save(const std::string& dir) const;
  static Corpus load(const std::string& dir);

  std::string manifest_text() const;
};

Record make_record(uint64_t scene_seed, const Vocabulary& vocab);

}  // namespace mdcap
