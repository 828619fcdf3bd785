#include "mdcap/synthdata.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace mdcap {

namespace {

constexpr uint8_t kBackground[3] = {16, 16, 24};
constexpr uint8_t kColorRgb[kNumColors][3] = {
    {220, 40, 40},   // red
    {40, 200, 40},   // green
    {40, 80, 230},   // blue
    {235, 220, 50},  // yellow
};
constexpr const char* kShapeNames[kNumShapes] = {"circle", "square", "triangle", "cross"};
constexpr const char* kColorNames[kNumColors] = {"red", "green", "blue", "yellow"};
constexpr int kCellSize = kImageSize / kGridSide;

// Pixel-inclusion tests on the 16x16 cell, exact integer arithmetic.
bool shape_covers(int shape, int x, int y) {
  switch (shape) {
    case 0: {  // circle around the half-pixel center (7.5, 7.5)
      const int dx = 2 * x - 15;
      const int dy = 2 * y - 15;
      return dx * dx + dy * dy <= 144;
    }
    case 1:  // square
      return x >= 3 && x <= 12 && y >= 3 && y <= 12;
    case 2: {  // upward triangle
      const int dx = 2 * x - 15;
      return y >= 2 && y <= 13 && (dx < 0 ? -dx : dx) <= y;
    }
    case 3:  // cross
      return (x >= 6 && x <= 9 && y >= 2 && y <= 13) || (y >= 6 && y <= 9 && x >= 2 && x <= 13);
  }
  throw std::logic_error("unknown shape id");
}

// Sub-stream purposes hung off a scene seed.
enum SceneStream : uint64_t { kPatternChoice = 1, kReplaceChoice = 2, kShuffleChoice = 3 };

std::vector<std::string> object_phrase(const Scene::Object& o) {
  return {"a", kColorNames[o.color], kShapeNames[o.shape]};
}

// Relation between consecutive row-major objects.
const char* relation_word(const Scene::Object& first, const Scene::Object& second) {
  const int row_a = first.cell / kGridSide;
  const int row_b = second.cell / kGridSide;
  return row_a == row_b ? "beside" : "above";
}

void append(std::vector<std::string>& out, std::initializer_list<const char*> words) {
  for (const char* w : words) out.emplace_back(w);
}

}  // namespace

const char* shape_name(int shape) {
  if (shape < 0 || shape >= kNumShapes) throw std::out_of_range("shape id out of range");
  return kShapeNames[shape];
}

const char* color_name(int color) {
  if (color < 0 || color >= kNumColors) throw std::out_of_range("color id out of range");
  return kColorNames[color];
}

Scene gen_scene(Rng& rng) {
  Scene scene;
  const int count = 1 + static_cast<int>(rng.uniform_below(3));
  // partial Fisher-Yates over the four cells
  int cells[kCells] = {0, 1, 2, 3};
  for (int i = 0; i < count; ++i) {
    const int j = i + static_cast<int>(rng.uniform_below(kCells - i));
    std::swap(cells[i], cells[j]);
  }
  for (int i = 0; i < count; ++i) {
    Scene::Object o;
    o.cell = cells[i];
    o.shape = static_cast<int>(rng.uniform_below(kNumShapes));
    o.color = static_cast<int>(rng.uniform_below(kNumColors));
    scene.objects.push_back(o);
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const Scene::Object& a, const Scene::Object& b) { return a.cell < b.cell; });
  return scene;
}

Scene scene_from_seed(uint64_t seed) {
  Rng rng(seed);
  Scene scene = gen_scene(rng);
  scene.seed = seed;
  return scene;
}

Image render(const Scene& scene) {
  Image img;
  img.height = img.width = kImageSize;
  img.rgb.assign(size_t(kImageSize) * kImageSize * 3, 0);
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x)
      for (int c = 0; c < 3; ++c) img.rgb[(size_t(y) * kImageSize + x) * 3 + c] = kBackground[c];
  for (const auto& o : scene.objects) {
    const int cy = (o.cell / kGridSide) * kCellSize;
    const int cx = (o.cell % kGridSide) * kCellSize;
    for (int y = 0; y < kCellSize; ++y)
      for (int x = 0; x < kCellSize; ++x) {
        if (!shape_covers(o.shape, x, y)) continue;
        for (int c = 0; c < 3; ++c)
          img.rgb[(size_t(cy + y) * kImageSize + (cx + x)) * 3 + c] = kColorRgb[o.color][c];
      }
  }
  return img;
}

Vocabulary caption_vocabulary() {
  return Vocabulary({
      Vocabulary::kPad, Vocabulary::kMask, Vocabulary::kBos, Vocabulary::kEos,
      "a", ".", "above", "beside",
      "red", "green", "blue", "yellow",
      "circle", "square", "triangle", "cross",
      "there", "is", "the", "image", "shows", "and",
      "picture", "has", "one", "object",
      "sits", "in", "top", "bottom", "left", "right", "corner",
      "are", "this", "scene",
  });
}

std::vector<std::string> caption_words(const Scene& scene) {
  if (scene.objects.empty() || scene.objects.size() > 3)
    throw std::invalid_argument("scene must hold 1 to 3 objects");
  Rng rng = Rng::stream(scene.seed, kPatternChoice);
  std::vector<std::string> w;
  const auto& objs = scene.objects;
  if (objs.size() == 1) {
    const auto& o = objs[0];
    switch (rng.uniform_below(5)) {
      case 0:
        append(w, {"a", kColorNames[o.color], kShapeNames[o.shape], "."});
        break;
      case 1:
        append(w, {"there", "is", "a", kColorNames[o.color], kShapeNames[o.shape], "."});
        break;
      case 2:
        append(w, {"the", "image", "shows", "a", kColorNames[o.color], kShapeNames[o.shape], "."});
        break;
      case 3:
        append(w, {"the", "picture", "has", "one", "object", "a", kColorNames[o.color],
                   kShapeNames[o.shape], "."});
        break;
      case 4:
        append(w, {"a", kColorNames[o.color], kShapeNames[o.shape], "sits", "in", "the",
                   o.cell / kGridSide == 0 ? "top" : "bottom", o.cell % kGridSide == 0 ? "left" : "right",
                   "corner", "."});
        break;
    }
  } else if (objs.size() == 2) {
    const char* rel = relation_word(objs[0], objs[1]);
    auto p0 = object_phrase(objs[0]);
    auto p1 = object_phrase(objs[1]);
    switch (rng.uniform_below(4)) {
      case 0:
        w = p0;
        w.push_back(rel);
        w.insert(w.end(), p1.begin(), p1.end());
        w.push_back(".");
        break;
      case 1:
        append(w, {"there", "is"});
        w.insert(w.end(), p0.begin(), p0.end());
        w.push_back(rel);
        w.insert(w.end(), p1.begin(), p1.end());
        w.push_back(".");
        break;
      case 2:
        append(w, {"the", "image", "shows"});
        w.insert(w.end(), p0.begin(), p0.end());
        w.push_back("and");
        w.insert(w.end(), p1.begin(), p1.end());
        w.push_back(".");
        break;
      case 3:
        w = p0;
        w.push_back("and");
        w.insert(w.end(), p1.begin(), p1.end());
        append(w, {"are", "in", "this", "scene", "."});
        break;
    }
  } else {
    for (size_t i = 0; i < objs.size(); ++i) {
      auto p = object_phrase(objs[i]);
      w.insert(w.end(), p.begin(), p.end());
      if (i + 1 < objs.size()) w.push_back(relation_word(objs[i], objs[i + 1]));
    }
    w.push_back(".");
  }
  return w;
}

std::vector<int> pad_to_slots(std::vector<int> ids, const Vocabulary& vocab) {
  if (static_cast<int>(ids.size()) > kCaptionSlots)
    throw std::invalid_argument("caption longer than the slot window");
  ids.resize(kCaptionSlots, vocab.pad_id());
  return ids;
}

int real_length(std::span<const int> ids, const Vocabulary& vocab) {
  int n = 0;
  for (int id : ids)
    if (id != vocab.pad_id()) ++n;
  return n;
}

std::vector<int> caption_of(const Scene& scene, const Vocabulary& vocab) {
  return pad_to_slots(vocab.encode(caption_words(scene)), vocab);
}

const char* negative_name(NegativeKind kind) {
  switch (kind) {
    case NegativeKind::kSwap: return "swap";
    case NegativeKind::kReplace: return "replace";
    case NegativeKind::kShuffle: return "shuffle";
  }
  throw std::logic_error("unknown negative kind");
}

namespace {

bool is_color_word(const Vocabulary& vocab, int id) {
  for (int c = 0; c < kNumColors; ++c)
    if (vocab.id_of(kColorNames[c]) == id) return true;
  return false;
}

bool is_shape_word(const Vocabulary& vocab, int id) {
  for (int s = 0; s < kNumShapes; ++s)
    if (vocab.id_of(kShapeNames[s]) == id) return true;
  return false;
}

}  // namespace

std::map<NegativeKind, std::vector<int>> negatives(const Scene& scene, const Vocabulary& vocab) {
  std::map<NegativeKind, std::vector<int>> out;
  const std::vector<std::string> words = caption_words(scene);
  std::vector<int> ids = vocab.encode(words);

  // swap: exchange attribute words of the first two mentioned objects
  if (scene.objects.size() >= 2) {
    std::vector<size_t> colors, shapes;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (is_color_word(vocab, ids[i])) colors.push_back(i);
      if (is_shape_word(vocab, ids[i])) shapes.push_back(i);
    }
    std::vector<int> swapped = ids;
    if (ids[colors[0]] != ids[colors[1]])
      std::swap(swapped[colors[0]], swapped[colors[1]]);
    else if (ids[shapes[0]] != ids[shapes[1]])
      std::swap(swapped[shapes[0]], swapped[shapes[1]]);
    if (swapped != ids) out[NegativeKind::kSwap] = pad_to_slots(swapped, vocab);
  }

  // replace: one attribute word substituted with a different valid value
  {
    Rng rng = Rng::stream(scene.seed, kReplaceChoice);
    const int obj = static_cast<int>(rng.uniform_below(scene.objects.size()));
    const bool replace_color = rng.uniform_below(2) == 0;
    std::vector<int> replaced = ids;
    int seen = -1;
    for (size_t i = 0; i < ids.size(); ++i) {
      const bool hit = replace_color ? is_color_word(vocab, ids[i]) : is_shape_word(vocab, ids[i]);
      if (hit && ++seen == obj) {
        const int old = replace_color ? scene.objects[obj].color : scene.objects[obj].shape;
        const int next = (old + 1 + static_cast<int>(rng.uniform_below(3))) %
                         (replace_color ? kNumColors : kNumShapes);
        replaced[i] = vocab.id_of(replace_color ? kColorNames[next] : kShapeNames[next]);
        break;
      }
    }
    out[NegativeKind::kReplace] = pad_to_slots(replaced, vocab);
  }

  // shuffle: non-identity permutation whose output differs from the caption
  {
    Rng rng = Rng::stream(scene.seed, kShuffleChoice);
    std::vector<int> shuffled;
    do {
      shuffled = ids;
      for (size_t i = shuffled.size() - 1; i > 0; --i) {
        const size_t j = rng.uniform_below(i + 1);
        std::swap(shuffled[i], shuffled[j]);
      }
    } while (shuffled == ids);
    out[NegativeKind::kShuffle] = pad_to_slots(shuffled, vocab);
  }
  return out;
}

int probe_label(const Scene& scene) {
  if (scene.objects.empty()) throw std::invalid_argument("scene has no objects");
  const auto& o = scene.objects.front();  // objects are sorted by cell
  return o.shape * kNumColors + o.color;
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

Record make_record(uint64_t scene_seed, const Vocabulary& vocab) {
  const Scene scene = scene_from_seed(scene_seed);
  Record rec;
  rec.seed = scene_seed;
  rec.image = render(scene);
  rec.caption = caption_of(scene, vocab);
  rec.negs = negatives(scene, vocab);
  rec.label = probe_label(scene);
  return rec;
}

Corpus Corpus::generate(int count, uint64_t master_seed) {
  if (count < 0) throw std::invalid_argument("corpus count must be >= 0");
  Corpus corpus;
  corpus.vocab = caption_vocabulary();
  corpus.master_seed = master_seed;
  corpus.records.reserve(count);
  for (int i = 0; i < count; ++i) {
    const uint64_t seed = Rng::stream(master_seed, Rng::kScene, i).next_u64();
    corpus.records.push_back(make_record(seed, corpus.vocab));
  }
  return corpus;
}

namespace {

void write_ids(std::ostream& out, std::span<const int> ids) {
  for (size_t i = 0; i < ids.size(); ++i) out << (i ? " " : "") << ids[i];
}

std::vector<int> parse_ids(const std::string& field) {
  std::vector<int> ids;
  std::istringstream in(field);
  int v;
  while (in >> v) ids.push_back(v);
  return ids;
}

}  // namespace

std::string Corpus::manifest_text() const {
  std::ostringstream out;
  out << "format=mdcap-corpus-v1\n";
  out << "grammar=" << kGrammarVersion << "\n";
  out << "count=" << records.size() << "\n";
  out << "master_seed=" << master_seed << "\n";
  out << "vocab_hash=" << vocab.hash() << "\n";
  out << "caption_slots=" << kCaptionSlots << "\n";
  out << "image_size=" << kImageSize << "\n";
  return out.str();
}

void Corpus::save(const std::string& dir) const {
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "corpus.txt", std::ios::binary | std::ios::trunc);
    for (const auto& rec : records) {
      out << rec.seed << " |";
      for (uint8_t px : rec.image.rgb) out << ' ' << int(px);
      out << " | ";
      write_ids(out, rec.caption);
      for (NegativeKind kind : {NegativeKind::kSwap, NegativeKind::kReplace, NegativeKind::kShuffle}) {
        out << " |";
        auto it = rec.negs.find(kind);
        if (it != rec.negs.end()) {
          out << ' ';
          write_ids(out, it->second);
        }
      }
      out << " | " << rec.label << "\n";
    }
    if (!out) throw std::runtime_error("failed writing corpus to " + dir);
  }
  {
    std::ofstream out(fs::path(dir) / "vocab.txt", std::ios::binary | std::ios::trunc);
    out << vocab.to_sidecar();
  }
  {
    std::ofstream out(fs::path(dir) / "manifest.txt", std::ios::binary | std::ios::trunc);
    out << manifest_text();
  }
}

Corpus Corpus::load(const std::string& dir) {
  Corpus corpus;
  {
    std::ifstream in(fs::path(dir) / "vocab.txt", std::ios::binary);
    if (!in) throw std::runtime_error("missing vocab.txt in " + dir);
    std::stringstream buf;
    buf << in.rdbuf();
    corpus.vocab = Vocabulary::from_sidecar(buf.str());
  }
  {
    std::ifstream in(fs::path(dir) / "manifest.txt", std::ios::binary);
    if (!in) throw std::runtime_error("missing manifest.txt in " + dir);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      if (key == "master_seed") corpus.master_seed = std::stoull(value);
      if (key == "format" && value != "mdcap-corpus-v1")
        throw std::runtime_error("unsupported corpus format: " + value);
    }
  }
  std::ifstream in(fs::path(dir) / "corpus.txt", std::ios::binary);
  if (!in) throw std::runtime_error("missing corpus.txt in " + dir);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    for (;;) {
      const size_t bar = line.find('|', start);
      fields.push_back(line.substr(start, bar == std::string::npos ? bar : bar - start));
      if (bar == std::string::npos) break;
      start = bar + 1;
    }
    if (fields.size() != 7) throw std::runtime_error("malformed corpus line (expected 7 fields)");
    Record rec;
    rec.seed = std::stoull(fields[0]);
    const std::vector<int> pixels = parse_ids(fields[1]);
    if (pixels.size() != size_t(kImageSize) * kImageSize * 3)
      throw std::runtime_error("malformed corpus line (pixel count)");
    rec.image.height = rec.image.width = kImageSize;
    rec.image.rgb.reserve(pixels.size());
    for (int v : pixels) {
      if (v < 0 || v > 255) throw std::runtime_error("pixel value out of range");
      rec.image.rgb.push_back(static_cast<uint8_t>(v));
    }
    rec.caption = parse_ids(fields[2]);
    if (rec.caption.size() != kCaptionSlots) throw std::runtime_error("malformed caption field");
    int k = 3;
    for (NegativeKind kind : {NegativeKind::kSwap, NegativeKind::kReplace, NegativeKind::kShuffle}) {
      auto ids = parse_ids(fields[k++]);
      if (!ids.empty()) rec.negs[kind] = std::move(ids);
    }
    rec.label = std::stoi(fields[6]);
    corpus.records.push_back(std::move(rec));
  }
  return corpus;
}

}  // namespace mdcap
