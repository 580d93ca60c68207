#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "malsf/dataset_io.hpp"
#include "malsf/rng.hpp"

namespace malsf {

// Scene geometry: a 4x4 lattice of 8x8-pixel cells on a 32x32 canvas, each
// object occupying exactly one cell. Shapes are drawn so their tight pixel
// bbox spans the full cell.
constexpr int kSceneImage = 32;
constexpr int kSceneCell = 8;
constexpr int kSceneLattice = 4;

constexpr int kNumShapes = 3;  // circle, square, triangle
constexpr int kNumColors = 8;

const char* shape_word(int shape);
const char* color_word(int color);
std::array<uint8_t, 3> color_rgb(int color);

struct SceneObject {
  int shape = 0;
  int color = 0;
  int cell = 0;  // row-major cell index on the lattice
};

struct SceneSpec {
  uint64_t rng_seed = 0;
  int caption_template = 0;
  std::vector<SceneObject> objects;  // reading order (row, col)
  // Caption wording per object as (color id, shape id); text manipulations
  // edit these without touching the rendered objects.
  std::vector<std::array<int, 2>> phrases;
};

enum class ManipKind { none, fs, fa, ts, ta };

const char* manip_kind_name(ManipKind k);
ManipKind manip_kind_from(const std::string& name);
bool manip_is_image(ManipKind k);
bool manip_is_text(ManipKind k);

struct ManipSpec {
  ManipKind kind = ManipKind::none;
  int target = 0;
};

struct EditRecord {
  ManipKind kind = ManipKind::none;
  int target = 0;
  std::array<double, 4> bbox{};     // post-edit object bbox (image kinds)
  std::vector<int> changed_tokens;  // caption positions edited (text kinds)
};

SceneSpec random_scene(uint64_t seed);
std::string scene_caption(const SceneSpec& scene);
Image render_scene(const SceneSpec& scene);
MaskBitmap render_object_mask(const SceneObject& obj);

// Applies exactly one edit in place and reports what changed. Throws on a
// kind/target mismatch (none-kind or out-of-range target).
EditRecord apply_manipulation(SceneSpec& scene, const ManipSpec& manip, Rng& rng);

// Deterministic in (seed, manips, parser). Manips may pair one image-kind
// with one text-kind edit; targets drawn from the manipulation stream when
// spec.target is negative.
Sample generate_sample(uint64_t seed, const std::vector<ManipKind>& kinds, PairSource parser,
                       int l_max = 16);

struct DataGenConfig {
  uint64_t seed = 7;
  PairSource parser = PairSource::open_vocab;
  int l_max = 16;
  // split name -> manipulation kind (or "+"-joined pair) -> record count
  std::map<std::string, std::map<std::string, int>> splits;

  static DataGenConfig defaults();
  std::string to_json() const;
  static DataGenConfig from_json(const std::string& text);
};

struct DatasetManifest {
  std::string generator_version;
  uint32_t config_hash = 0;
  std::string config_json;
  std::map<std::string, std::map<std::string, int>> split_counts;

  std::string to_json() const;
};

// Writes <split>.jsonl files plus manifest.json under out_dir; byte-stable
// for a fixed config.
DatasetManifest generate_dataset(const DataGenConfig& config, const std::string& out_dir);

}  // namespace malsf
