#pragma once

#include <optional>
#include <string>
#include <vector>

#include "malsf/checkpoint.hpp"
#include "malsf/metrics.hpp"
#include "malsf/model.hpp"

namespace malsf {

struct TrainConfig {
  ModelConfig model;
  TaskMode task = TaskMode::dgm4;
  double lr_peak_text = 1e-5;
  double lr_peak_image = 5e-5;
  double lr_floor = 6e-7;
  int warmup_epochs = 10;
  int total_epochs = 30;  // desk default; the full 60-epoch schedule is a flag away
  double weight_decay = 0.02;
  LossWeights loss_weights;
  int batch_size = 16;
  uint64_t seed = 42;
  int threads = 0;  // 0 = hardware concurrency

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// Decoupled-weight-decay Adam over the model parameters, with separate
// learning rates for the text branch and everything else.
class AdamW {
 public:
  explicit AdamW(std::vector<NamedParam> params, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);

  // One update over all parameters; throws on NaN gradients, naming the
  // parameter. Parameters without accumulated gradients step with grad 0.
  void step(double lr_text, double lr_image, double weight_decay);
  int64_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  std::vector<NamedParam> params_;
  std::vector<Moments> state_;
  std::vector<uint8_t> text_branch_;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// Linear warmup to the two peaks over warmup_epochs/total_epochs, then
// cosine decay to lr_floor. epoch_frac in [0,1] covers the whole run.
std::pair<double, double> lr_at(double epoch_frac, const TrainConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double lr_text = 0.0, lr_image = 0.0;
  double train_loss = 0.0;
  std::optional<double> mean_bcls, mean_mcls, mean_ig, mean_tg;
  MetricReport val;
};

struct RunManifest {
  std::string code_version;
  std::string config_json;
  uint32_t config_hash = 0;
  uint32_t dataset_manifest_hash = 0;
  std::vector<EpochLog> epochs;
  int best_epoch = -1;
  std::optional<double> best_val_acc;

  std::string to_json() const;
};

struct TrainResult {
  RunManifest manifest;
  std::string best_checkpoint;
  std::string final_checkpoint;
  std::string manifest_path;
};

// Deterministic given (cfg, dataset bytes): fixed init order, fixed epoch
// shuffles, per-sample graphs merged in sample order. Keeps the best-val
// checkpoint alongside the final one; aborts on NaN with the last
// epoch-end parameters saved.
TrainResult train(const TrainConfig& cfg, const std::string& data_dir,
                  const std::string& out_dir);

// Full metric report over a labeled sample set. dgm4 mode fills the
// 12-metric layout; mfnd mode fills accuracy plus per-class blocks.
MetricReport evaluate(const MalsfModel& model, const std::vector<Sample>& samples,
                      TaskMode mode, int threads = 0);

// Pure metric computation from already-summarized rows (lets tests inject
// oracle predictions).
MetricReport compute_report(const std::vector<EvalRow>& rows,
                            const std::vector<GroundTruth>& gts, TaskMode mode);

struct InspectResult {
  std::string json_path;
  std::string pgm_path;
};

// Serializes gate weights, summary-fusion weights, per-context attention
// and predictions for one sample; renders the spatial attention map as a
// portable graymap.
InspectResult inspect(const MalsfModel& model, const Sample& sample,
                      const std::string& out_dir);

std::vector<Sample> load_split(const std::string& data_dir, const std::string& split,
                               const Vocab& vocab, int l_max, bool strict = true);

}  // namespace malsf
