#pragma once

#include <memory>
#include <optional>

#include "malsf/dataset_io.hpp"
#include "malsf/fusion.hpp"
#include "malsf/losses.hpp"

namespace malsf {

// Which local semantics feed the verification streams (rows of the
// modality ablation).
enum class LocalSemantics { none, labels_only, masks_only, pairs };

// Which query-driven verification streams run.
enum class StreamMode { bidirectional, image_query_only, text_query_only };

const char* local_semantics_name(LocalSemantics v);
LocalSemantics local_semantics_from(const std::string& name);
const char* stream_mode_name(StreamMode v);
StreamMode stream_mode_from(const std::string& name);

struct AblationConfig {
  LocalSemantics local = LocalSemantics::pairs;
  StreamMode streams = StreamMode::bidirectional;
  bool gate_weights = true;
  bool shallow_fusion = true;  // attention-based shallow stage
  bool deep_fusion = true;     // learned-token deep stage

  bool operator==(const AblationConfig&) const = default;
};

struct ModelConfig {
  int d_model = 32;
  int n_heads = 4;
  int text_layers = 2;
  int image_layers = 2;
  int patch = 4;
  int image_size = 32;
  int l_max = 16;
  int n_max_pairs = 4;
  int stream_depth = 2;
  int vocab_size = 16;
  AblationConfig ablation;

  int grid_cells() const { return (image_size / patch) * (image_size / patch); }
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Attention maps captured during one forward pass for inspection dumps.
struct InspectTrace {
  std::vector<AttnTrace> img_ctx_attn;  // final-block cross-attention per context
  std::vector<AttnTrace> cap_ctx_attn;
  AttnTrace binary_attn;   // summary-level weights over [global, pairs...]
  AttnTrace spatial_attn;  // grounding-token attention over image positions
};

struct ModelOutput {
  Predictions preds;
  std::vector<int> live_pairs;   // indices of sample pairs that entered the model
  std::vector<double> gate_v;    // per live pair; empty when gating is off
  std::vector<double> gate_l;
};

struct SampleLoss {
  Tensor total;
  std::optional<double> bcls, mcls, ig, tg;
};

enum class TaskMode { dgm4, mfnd };
const char* task_mode_name(TaskMode m);
TaskMode task_mode_from(const std::string& name);

// Plain-number view of one sample's predictions, for metric computation.
struct EvalRow {
  double p_fake = 0.0;
  std::optional<std::array<double, 4>> type_probs;
  bool has_image_type = false, has_text_type = false;
  std::optional<std::array<double, 4>> bbox;
  std::optional<std::vector<int>> token_flags;
  std::vector<uint8_t> token_mask;
};

// The full detector: encoders, gated bidirectional verification, shallow and
// deep aggregation, prediction heads. Read-only after construction; forward
// passes over distinct samples may run concurrently on separate graphs.
class MalsfModel {
 public:
  MalsfModel(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }

  ModelOutput forward(const Sample& sample, InspectTrace* trace = nullptr) const;
  SampleLoss loss(const Sample& sample, const LossWeights& w, TaskMode mode) const;
  EvalRow evaluate_sample(const Sample& sample) const;

  std::vector<NamedParam> named_params();
  int64_t param_count();
  void zero_grads();

  TextEncoder& text_encoder() { return *text_enc_; }
  const TextEncoder& text_encoder() const { return *text_enc_; }
  VisualEncoder& visual_encoder() { return *vis_enc_; }
  const VerificationStream* image_query_stream() const { return t_v_ ? &*t_v_ : nullptr; }
  const VerificationStream* text_query_stream() const { return t_l_ ? &*t_l_ : nullptr; }
  const ShallowFusion* shallow() const { return shallow_ ? &*shallow_ : nullptr; }
  const DeepFusion* deep() const { return deep_ ? &*deep_ : nullptr; }
  Heads& heads() { return heads_; }

  // Names prefixed "text." follow the text-branch learning rate.
  static bool is_text_branch_param(const std::string& name);

 private:
  ModelConfig cfg_;
  uint64_t seed_;
  const Vocab* vocab_;
  std::optional<TextEncoder> text_enc_;
  std::optional<VisualEncoder> vis_enc_;
  std::optional<GateProjections> gates_;
  std::optional<VerificationStream> t_v_;  // image as query
  std::optional<VerificationStream> t_l_;  // text as query
  std::optional<ShallowFusion> shallow_;
  std::optional<DeepFusion> deep_;
  Heads heads_;
};

EvalRow summarize_predictions(const Predictions& preds, const std::vector<uint8_t>& token_mask);

}  // namespace malsf
