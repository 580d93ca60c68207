#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace malsf {

// Undefined metrics stay absent (serialized as null), never zero.
struct MfndClassMetrics {
  std::optional<double> precision, recall, f1;
};

struct MetricReport {
  // binary classification
  std::optional<double> auc, eer, acc;
  // multi-label classification
  std::optional<double> of1, cf1, map;
  // image grounding
  std::optional<double> iou_mean, iou50, iou75;
  // text grounding
  std::optional<double> precision, recall, f1;
  // per-class block for the binary-only task layout
  std::optional<MfndClassMetrics> fake_class, real_class;

  std::string to_json() const;          // key-sorted, deterministic
  std::string to_table() const;         // grouped column layout
  static MetricReport from_json(const std::string& text);
};

struct BinaryMetrics {
  std::optional<double> auc, eer;
  double acc = 0.0;
};

// scores are (positive-class probability, label). AUC counts ties as half
// wins; EER sweeps the distinct scores as thresholds, breaking ties toward
// the lower threshold, and reports (FPR+FNR)/2 there. Accuracy thresholds
// at 0.5 (argmax over the two classes).
BinaryMetrics binary_metrics(const std::vector<std::pair<double, int>>& scores);

// Independent O(P*N) oracle used to cross-check the ranking implementation.
double auc_pairwise(const std::vector<std::pair<double, int>>& scores);

struct MultilabelMetrics {
  std::optional<double> of1, cf1, map;
};

// preds are per-class probabilities thresholded at 0.5 (>= is positive).
// CF1 skips classes with neither truth nor predictions; mAP averages
// information-retrieval AP over classes that have positives.
MultilabelMetrics multilabel_metrics(const std::vector<std::array<double, 4>>& preds,
                                     const std::vector<std::array<int, 4>>& gts);

struct GroundingMetrics {
  std::optional<double> iou_mean, iou50, iou75;
};

// Evaluated over samples with a nonzero ground-truth box only.
GroundingMetrics grounding_metrics(const std::vector<std::array<double, 4>>& pred_boxes,
                                   const std::vector<std::array<double, 4>>& gt_boxes);

struct TokenMetrics {
  std::optional<double> precision, recall, f1;
};

// Micro-averaged over non-pad token positions of all samples.
TokenMetrics token_metrics(const std::vector<std::vector<int>>& pred_flags,
                           const std::vector<std::vector<int>>& gt_flags,
                           const std::vector<std::vector<uint8_t>>& pad_masks);

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

}  // namespace malsf
