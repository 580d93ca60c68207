#include "malsf/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace malsf {

namespace {
constexpr const char* kShapeWords[kNumShapes] = {"circle", "square", "triangle"};
constexpr const char* kColorWords[kNumColors] = {"red",    "green",  "blue", "yellow",
                                                 "purple", "orange", "cyan", "pink"};
constexpr std::array<uint8_t, 3> kColorRgb[kNumColors] = {
    {220, 40, 40}, {40, 200, 60}, {50, 80, 230},  {235, 220, 50},
    {160, 60, 200}, {245, 140, 30}, {40, 210, 210}, {245, 120, 180}};
constexpr std::array<uint8_t, 3> kBackground = {25, 25, 28};

constexpr const char* kGeneratorVersion = "malsf-synth-1";
}  // namespace

const char* shape_word(int shape) { return kShapeWords[shape]; }
const char* color_word(int color) { return kColorWords[color]; }
std::array<uint8_t, 3> color_rgb(int color) { return kColorRgb[color]; }

const char* manip_kind_name(ManipKind k) {
  switch (k) {
    case ManipKind::none: return "none";
    case ManipKind::fs: return "fs";
    case ManipKind::fa: return "fa";
    case ManipKind::ts: return "ts";
    case ManipKind::ta: return "ta";
  }
  return "none";
}

ManipKind manip_kind_from(const std::string& name) {
  if (name == "none") return ManipKind::none;
  if (name == "fs") return ManipKind::fs;
  if (name == "fa") return ManipKind::fa;
  if (name == "ts") return ManipKind::ts;
  if (name == "ta") return ManipKind::ta;
  throw std::invalid_argument("unknown manipulation kind: " + name);
}

bool manip_is_image(ManipKind k) { return k == ManipKind::fs || k == ManipKind::fa; }
bool manip_is_text(ManipKind k) { return k == ManipKind::ts || k == ManipKind::ta; }

SceneSpec random_scene(uint64_t seed) {
  Rng rng(seed);
  SceneSpec scene;
  scene.rng_seed = seed;
  const int k = 2 + static_cast<int>(rng.below(3));  // 2..4 objects
  std::vector<int> cells(kSceneLattice * kSceneLattice);
  std::iota(cells.begin(), cells.end(), 0);
  rng.shuffle(cells);
  cells.resize(static_cast<size_t>(k));
  std::sort(cells.begin(), cells.end());  // reading order fixes caption order
  for (int cell : cells) {
    SceneObject obj;
    obj.cell = cell;
    obj.shape = static_cast<int>(rng.below(kNumShapes));
    obj.color = static_cast<int>(rng.below(kNumColors));
    scene.objects.push_back(obj);
    scene.phrases.push_back({obj.color, obj.shape});
  }
  return scene;
}

std::string scene_caption(const SceneSpec& scene) {
  std::ostringstream os;
  for (size_t i = 0; i < scene.phrases.size(); ++i) {
    if (i) os << " and ";
    os << "a " << kColorWords[scene.phrases[i][0]] << " " << kShapeWords[scene.phrases[i][1]];
  }
  return os.str();
}

namespace {

bool shape_covers(int shape, int y, int x) {
  // cell-local coordinates in [0, kSceneCell)
  switch (shape) {
    case 0: {  // circle: touches all four cell edges
      const double dy = y - 3.5, dx = x - 3.5;
      return dy * dy + dx * dx <= 12.5;
    }
    case 1:  // square fills the cell
      return true;
    case 2:  // triangle: apex on the top edge, base along the bottom
      return std::fabs(x - 3.5) <= (y + 1) * 0.5;
    default:
      return false;
  }
}

}  // namespace

MaskBitmap render_object_mask(const SceneObject& obj) {
  MaskBitmap m = MaskBitmap::zeros(kSceneImage, kSceneImage);
  const int r0 = (obj.cell / kSceneLattice) * kSceneCell;
  const int c0 = (obj.cell % kSceneLattice) * kSceneCell;
  for (int y = 0; y < kSceneCell; ++y)
    for (int x = 0; x < kSceneCell; ++x)
      if (shape_covers(obj.shape, y, x)) m.at(r0 + y, c0 + x) = 1;
  return m;
}

Image render_scene(const SceneSpec& scene) {
  Image img = Image::filled(kSceneImage, kSceneImage, kBackground[0], kBackground[1],
                            kBackground[2]);
  for (const auto& obj : scene.objects) {
    const auto rgb = kColorRgb[obj.color];
    const MaskBitmap m = render_object_mask(obj);
    for (int y = 0; y < kSceneImage; ++y)
      for (int x = 0; x < kSceneImage; ++x)
        if (m.at(y, x)) {
          img.at(y, x, 0) = rgb[0];
          img.at(y, x, 1) = rgb[1];
          img.at(y, x, 2) = rgb[2];
        }
  }
  return img;
}

namespace {

std::vector<int> caption_token_diff(const std::string& before, const std::string& after,
                                    int l_max) {
  const Vocab& vocab = Vocab::synthetic();
  const TokenSeq a = tokenize(before, vocab, l_max);
  const TokenSeq b = tokenize(after, vocab, l_max);
  std::vector<int> changed;
  for (int i = 0; i < l_max; ++i) {
    if (a.ids[static_cast<size_t>(i)] != b.ids[static_cast<size_t>(i)]) changed.push_back(i);
  }
  return changed;
}

}  // namespace

EditRecord apply_manipulation(SceneSpec& scene, const ManipSpec& manip, Rng& rng) {
  if (manip.kind == ManipKind::none) {
    throw std::invalid_argument("apply_manipulation: kind none has no edit");
  }
  if (manip.target < 0 || manip.target >= static_cast<int>(scene.objects.size())) {
    throw std::invalid_argument("apply_manipulation: target " + std::to_string(manip.target) +
                                " out of " + std::to_string(scene.objects.size()) + " objects");
  }
  const size_t t = static_cast<size_t>(manip.target);
  EditRecord rec;
  rec.kind = manip.kind;
  rec.target = manip.target;
  const std::string before = scene_caption(scene);

  switch (manip.kind) {
    case ManipKind::fs: {
      auto& obj = scene.objects[t];
      obj.shape = (obj.shape + 1 + static_cast<int>(rng.below(kNumShapes - 1))) % kNumShapes;
      rec.bbox = mask_bbox_normalized(render_object_mask(obj));
      break;
    }
    case ManipKind::fa: {
      auto& obj = scene.objects[t];
      obj.color = (obj.color + 1 + static_cast<int>(rng.below(kNumColors - 1))) % kNumColors;
      rec.bbox = mask_bbox_normalized(render_object_mask(obj));
      break;
    }
    case ManipKind::ts: {
      // replace the whole noun phrase with a different (color, shape) pair
      auto& ph = scene.phrases[t];
      const int cur = ph[0] * kNumShapes + ph[1];
      const int total = kNumColors * kNumShapes;
      const int next = (cur + 1 + static_cast<int>(rng.below(total - 1))) % total;
      ph = {next / kNumShapes, next % kNumShapes};
      break;
    }
    case ManipKind::ta: {
      auto& ph = scene.phrases[t];
      ph[0] = (ph[0] + 1 + static_cast<int>(rng.below(kNumColors - 1))) % kNumColors;
      break;
    }
    case ManipKind::none:
      break;
  }
  if (manip_is_text(manip.kind)) {
    // 64 comfortably exceeds any caption; positions are l_max-independent
    rec.changed_tokens = caption_token_diff(before, scene_caption(scene), 64);
  }
  return rec;
}

Sample generate_sample(uint64_t seed, const std::vector<ManipKind>& kinds, PairSource parser,
                       int l_max) {
  int image_edits = 0, text_edits = 0;
  for (ManipKind k : kinds) {
    image_edits += manip_is_image(k);
    text_edits += manip_is_text(k);
  }
  if (image_edits > 1 || text_edits > 1) {
    throw std::invalid_argument("generate_sample: at most one edit per modality");
  }

  SceneSpec scene = random_scene(derive_seed(seed, 0));
  const std::string original_caption = scene_caption(scene);
  Rng manip_rng(derive_seed(seed, 1));

  GroundTruth gt;
  gt.y_tg.assign(static_cast<size_t>(l_max), 0);
  for (ManipKind kind : kinds) {
    if (kind == ManipKind::none) continue;
    ManipSpec spec;
    spec.kind = kind;
    spec.target = static_cast<int>(manip_rng.below(scene.objects.size()));
    const EditRecord rec = apply_manipulation(scene, spec, manip_rng);
    gt.y_b = 1;
    switch (kind) {
      case ManipKind::fs: gt.y_m[0] = 1; break;
      case ManipKind::fa: gt.y_m[1] = 1; break;
      case ManipKind::ts: gt.y_m[2] = 1; break;
      case ManipKind::ta: gt.y_m[3] = 1; break;
      case ManipKind::none: break;
    }
    if (manip_is_image(kind)) gt.y_ig = rec.bbox;
  }
  const std::string caption = scene_caption(scene);
  for (int pos : caption_token_diff(original_caption, caption, l_max)) {
    gt.y_tg[static_cast<size_t>(pos)] = 1;
  }

  Sample s;
  s.image = render_scene(scene);
  s.caption = caption;
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    SamplePair pair;
    pair.mask = render_object_mask(scene.objects[i]);
    if (parser == PairSource::caption_anchored) {
      // labels are copied verbatim from the (possibly manipulated) caption
      pair.label = std::string(kColorWords[scene.phrases[i][0]]) + " " +
                   kShapeWords[scene.phrases[i][1]];
    } else {
      // open-vocabulary labels describe what is actually rendered
      pair.label = std::string(kColorWords[scene.objects[i].color]) + " " +
                   kShapeWords[scene.objects[i].shape];
    }
    pair.source = parser;
    s.pairs.push_back(std::move(pair));
  }
  s.gt = gt;
  return s;
}

DataGenConfig DataGenConfig::defaults() {
  DataGenConfig c;
  const std::vector<std::string> kinds{"none", "fs", "fa", "ts", "ta"};
  for (const auto& k : kinds) {
    c.splits["train"][k] = 1000;
    c.splits["val"][k] = 50;
    c.splits["test"][k] = 100;
  }
  return c;
}

std::string DataGenConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["parser"] = pair_source_name(parser);
  j["l_max"] = l_max;
  j["splits"] = splits;
  return j.dump(2);
}

DataGenConfig DataGenConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  DataGenConfig c;
  if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
  if (j.contains("parser")) c.parser = pair_source_from(j["parser"].get<std::string>());
  if (j.contains("l_max")) c.l_max = j["l_max"].get<int>();
  if (j.contains("splits")) {
    c.splits = j["splits"].get<std::map<std::string, std::map<std::string, int>>>();
  } else {
    c.splits = defaults().splits;
  }
  return c;
}

std::string DatasetManifest::to_json() const {
  nlohmann::json j;
  j["generator_version"] = generator_version;
  j["config_hash"] = config_hash;
  j["config"] = nlohmann::json::parse(config_json);
  j["split_counts"] = split_counts;
  return j.dump(2);
}

namespace {

std::vector<ManipKind> parse_kind_list(const std::string& name) {
  std::vector<ManipKind> kinds;
  size_t start = 0;
  while (start <= name.size()) {
    const size_t plus = name.find('+', start);
    const std::string part = name.substr(start, plus == std::string::npos ? std::string::npos
                                                                          : plus - start);
    kinds.push_back(manip_kind_from(part));
    if (plus == std::string::npos) break;
    start = plus + 1;
  }
  return kinds;
}

// Disjoint seed ranges per split keep records independent across files.
uint64_t split_base(const std::string& split) {
  if (split == "train") return 0;
  if (split == "val") return 1'000'000;
  if (split == "test") return 2'000'000;
  uint64_t h = 3'000'000;
  for (char c : split) h += static_cast<unsigned char>(c) * 4099ULL;
  return h * 1'000'000ULL;
}

}  // namespace

DatasetManifest generate_dataset(const DataGenConfig& config, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.generator_version = kGeneratorVersion;
  manifest.config_json = config.to_json();
  manifest.config_hash = crc32_of(manifest.config_json);

  const Vocab& vocab = Vocab::synthetic();
  for (const auto& [split, counts] : config.splits) {
    std::vector<Sample> samples;
    uint64_t index = split_base(split);
    for (const auto& [kind_name, count] : counts) {
      if (count < 0) throw std::invalid_argument("negative count for kind " + kind_name);
      const auto kinds = parse_kind_list(kind_name);
      for (int i = 0; i < count; ++i, ++index) {
        Sample s = generate_sample(derive_seed(config.seed, index), kinds, config.parser,
                                   config.l_max);
        std::ostringstream id;
        id << split << "-" << kind_name << "-" << i;
        s.id = id.str();
        auto violations = validate_sample(s, vocab, config.l_max);
        if (!violations.empty()) {
          throw std::logic_error("generator produced invalid sample " + s.id + ": " +
                                 violations.front());
        }
        samples.push_back(std::move(s));
      }
      manifest.split_counts[split][kind_name] = count;
    }
    write_dataset(out_dir + "/" + split + ".jsonl", samples);
  }
  write_file_atomic(out_dir + "/manifest.json", manifest.to_json());
  return manifest;
}

}  // namespace malsf
