#include "malsf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace malsf {

namespace {

using json = nlohmann::json;

json opt_json(const std::optional<double>& v) {
  if (v) return *v;
  return nullptr;
}

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<double>();
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "--";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

}  // namespace

std::string MetricReport::to_json() const {
  json j;
  j["auc"] = opt_json(auc);
  j["eer"] = opt_json(eer);
  j["acc"] = opt_json(acc);
  j["of1"] = opt_json(of1);
  j["cf1"] = opt_json(cf1);
  j["map"] = opt_json(map);
  j["iou_mean"] = opt_json(iou_mean);
  j["iou50"] = opt_json(iou50);
  j["iou75"] = opt_json(iou75);
  j["precision"] = opt_json(precision);
  j["recall"] = opt_json(recall);
  j["f1"] = opt_json(f1);
  if (fake_class || real_class) {
    auto cls = [](const std::optional<MfndClassMetrics>& c) -> json {
      if (!c) return nullptr;
      json o;
      o["precision"] = opt_json(c->precision);
      o["recall"] = opt_json(c->recall);
      o["f1"] = opt_json(c->f1);
      return o;
    };
    j["fake_class"] = cls(fake_class);
    j["real_class"] = cls(real_class);
  }
  return j.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
  json j = json::parse(text);
  MetricReport r;
  r.auc = opt_from(j, "auc");
  r.eer = opt_from(j, "eer");
  r.acc = opt_from(j, "acc");
  r.of1 = opt_from(j, "of1");
  r.cf1 = opt_from(j, "cf1");
  r.map = opt_from(j, "map");
  r.iou_mean = opt_from(j, "iou_mean");
  r.iou50 = opt_from(j, "iou50");
  r.iou75 = opt_from(j, "iou75");
  r.precision = opt_from(j, "precision");
  r.recall = opt_from(j, "recall");
  r.f1 = opt_from(j, "f1");
  auto cls = [](const json& o) -> std::optional<MfndClassMetrics> {
    if (o.is_null()) return std::nullopt;
    MfndClassMetrics c;
    c.precision = opt_from(o, "precision");
    c.recall = opt_from(o, "recall");
    c.f1 = opt_from(o, "f1");
    return c;
  };
  if (j.contains("fake_class")) r.fake_class = cls(j["fake_class"]);
  if (j.contains("real_class")) r.real_class = cls(j["real_class"]);
  return r;
}

std::string MetricReport::to_table() const {
  std::ostringstream os;
  os << "| Binary Cls              | Multi-Label Cls         | Image Grounding              "
        "| Text Grounding          |\n";
  os << "| AUC     EER     ACC     | OF1     CF1     mAP     | IoU_mean IoU_50   IoU_75     "
        "| Prec    Recall  F1      |\n";
  os << "| " << fmt(auc) << "  " << fmt(eer) << "  " << fmt(acc) << "  | " << fmt(of1) << "  "
     << fmt(cf1) << "  " << fmt(map) << "  | " << fmt(iou_mean) << "   " << fmt(iou50) << "   "
     << fmt(iou75) << "     | " << fmt(precision) << "  " << fmt(recall) << "  " << fmt(f1)
     << "  |";
  return os.str();
}

double auc_pairwise(const std::vector<std::pair<double, int>>& scores) {
  int64_t wins2 = 0;  // counts doubled so ties add 1
  int64_t pos = 0, neg = 0;
  for (const auto& [sp, lp] : scores) {
    if (lp != 1) continue;
    ++pos;
    for (const auto& [sn, ln] : scores) {
      if (ln != 0) continue;
      if (sp > sn) wins2 += 2;
      else if (sp == sn) wins2 += 1;
    }
  }
  for (const auto& [s, l] : scores) neg += (l == 0);
  if (pos == 0 || neg == 0) throw std::invalid_argument("auc: both classes required");
  return static_cast<double>(wins2) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

BinaryMetrics binary_metrics(const std::vector<std::pair<double, int>>& scores) {
  BinaryMetrics m;
  if (scores.empty()) throw std::invalid_argument("binary_metrics: empty input");
  int64_t pos = 0, neg = 0, correct = 0;
  for (const auto& [s, l] : scores) {
    (l == 1 ? pos : neg) += 1;
    const int pred = s > 0.5 ? 1 : 0;  // argmax over two classes; ties go to real
    correct += (pred == l);
  }
  m.acc = static_cast<double>(correct) / static_cast<double>(scores.size());
  if (pos == 0 || neg == 0) return m;  // AUC/EER undefined on one class

  // AUC via average ranks (Mann-Whitney); ties contribute half wins. The
  // exhaustive pairwise count is kept as an independent oracle in tests.
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[static_cast<size_t>(a)].first <
                                              scores[static_cast<size_t>(b)].first; });
  std::vector<double> rank(scores.size(), 0.0);
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() &&
           scores[static_cast<size_t>(order[j + 1])].first ==
               scores[static_cast<size_t>(order[i])].first) {
      ++j;
    }
    const double avg_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t t = i; t <= j; ++t) rank[static_cast<size_t>(order[t])] = avg_rank;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (size_t t = 0; t < scores.size(); ++t) {
    if (scores[t].second == 1) rank_sum_pos += rank[t];
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  m.auc = (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n);

  // EER sweep over distinct thresholds (predict positive iff score >= t),
  // plus a sentinel above the max where nothing is positive.
  std::vector<double> thresholds;
  for (const auto& [s, l] : scores) thresholds.push_back(s);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.push_back(thresholds.back() + 1.0);

  double best_gap = std::numeric_limits<double>::infinity();
  double best_eer = 0.0;
  for (double t : thresholds) {
    int64_t fp = 0, fn = 0;
    for (const auto& [s, l] : scores) {
      const int pred = s >= t ? 1 : 0;
      fp += (pred == 1 && l == 0);
      fn += (pred == 0 && l == 1);
    }
    const double fpr = static_cast<double>(fp) / n;
    const double fnr = static_cast<double>(fn) / p;
    const double gap = std::fabs(fpr - fnr);
    if (gap < best_gap) {  // strict: ties keep the lower threshold
      best_gap = gap;
      best_eer = (fpr + fnr) / 2.0;
    }
  }
  m.eer = best_eer;
  return m;
}

MultilabelMetrics multilabel_metrics(const std::vector<std::array<double, 4>>& preds,
                                     const std::vector<std::array<int, 4>>& gts) {
  if (preds.empty() || preds.size() != gts.size()) {
    throw std::invalid_argument("multilabel_metrics: bad input sizes");
  }
  MultilabelMetrics m;
  const size_t n = preds.size();

  int64_t tp_all = 0, fp_all = 0, fn_all = 0;
  std::vector<double> class_f1;
  std::vector<double> class_ap;
  for (int c = 0; c < 4; ++c) {
    int64_t tp = 0, fp = 0, fn = 0, gt_pos = 0;
    for (size_t s = 0; s < n; ++s) {
      const int pred = preds[s][static_cast<size_t>(c)] >= 0.5 ? 1 : 0;
      const int gt = gts[s][static_cast<size_t>(c)];
      gt_pos += gt;
      tp += (pred && gt);
      fp += (pred && !gt);
      fn += (!pred && gt);
    }
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
    if (gt_pos == 0 && tp + fp == 0) continue;  // untouched empty class: excluded
    const double denom = 2.0 * tp + fp + fn;
    class_f1.push_back(denom > 0.0 ? 2.0 * tp / denom : 0.0);

    if (gt_pos > 0) {
      // information-retrieval AP: precision at each positive, averaged;
      // ties broken by stable (input) order
      std::vector<int> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return preds[static_cast<size_t>(a)][static_cast<size_t>(c)] >
               preds[static_cast<size_t>(b)][static_cast<size_t>(c)];
      });
      int64_t hits = 0;
      double ap = 0.0;
      for (size_t r = 0; r < n; ++r) {
        if (gts[static_cast<size_t>(order[r])][static_cast<size_t>(c)]) {
          ++hits;
          ap += static_cast<double>(hits) / static_cast<double>(r + 1);
        }
      }
      class_ap.push_back(ap / static_cast<double>(gt_pos));
    }
  }

  const double of1_denom = 2.0 * tp_all + fp_all + fn_all;
  if (tp_all + fp_all + fn_all > 0) {
    m.of1 = of1_denom > 0.0 ? 2.0 * tp_all / of1_denom : 0.0;
  } else {
    m.of1 = std::nullopt;  // no positives anywhere, nothing predicted
  }
  if (!class_f1.empty()) {
    m.cf1 = std::accumulate(class_f1.begin(), class_f1.end(), 0.0) /
            static_cast<double>(class_f1.size());
  }
  if (!class_ap.empty()) {
    m.map = std::accumulate(class_ap.begin(), class_ap.end(), 0.0) /
            static_cast<double>(class_ap.size());
  }
  return m;
}

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

GroundingMetrics grounding_metrics(const std::vector<std::array<double, 4>>& pred_boxes,
                                   const std::vector<std::array<double, 4>>& gt_boxes) {
  if (pred_boxes.size() != gt_boxes.size()) {
    throw std::invalid_argument("grounding_metrics: size mismatch");
  }
  GroundingMetrics m;
  if (pred_boxes.empty()) return m;
  double total = 0.0;
  int64_t ge50 = 0, ge75 = 0;
  for (size_t i = 0; i < pred_boxes.size(); ++i) {
    const double iou = box_iou(pred_boxes[i], gt_boxes[i]);
    total += iou;
    ge50 += (iou >= 0.5);
    ge75 += (iou >= 0.75);
  }
  const double n = static_cast<double>(pred_boxes.size());
  m.iou_mean = total / n;
  m.iou50 = static_cast<double>(ge50) / n;
  m.iou75 = static_cast<double>(ge75) / n;
  return m;
}

TokenMetrics token_metrics(const std::vector<std::vector<int>>& pred_flags,
                           const std::vector<std::vector<int>>& gt_flags,
                           const std::vector<std::vector<uint8_t>>& pad_masks) {
  if (pred_flags.size() != gt_flags.size() || pred_flags.size() != pad_masks.size()) {
    throw std::invalid_argument("token_metrics: size mismatch");
  }
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t s = 0; s < pred_flags.size(); ++s) {
    const auto& pred = pred_flags[s];
    const auto& gt = gt_flags[s];
    const auto& mask = pad_masks[s];
    if (pred.size() != gt.size() || pred.size() != mask.size()) {
      throw std::invalid_argument("token_metrics: per-sample length mismatch");
    }
    for (size_t i = 0; i < pred.size(); ++i) {
      if (!mask[i]) continue;
      tp += (pred[i] == 1 && gt[i] == 1);
      fp += (pred[i] == 1 && gt[i] == 0);
      fn += (pred[i] == 0 && gt[i] == 1);
    }
  }
  TokenMetrics m;
  if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (m.precision && m.recall) {
    const double p = *m.precision, r = *m.recall;
    m.f1 = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  } else if (tp + fn > 0) {
    m.f1 = 0.0;  // truth has positives but nothing (or nothing relevant) predicted
  }
  return m;
}

}  // namespace malsf
