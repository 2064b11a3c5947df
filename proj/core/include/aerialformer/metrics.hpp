#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aerialformer/dataset.hpp"

namespace aerialformer::metrics {

struct ClassCounts {
  Index tp = 0;
  Index tn = 0;
  Index fp = 0;
  Index fn = 0;
  Index total() const { return tp + tn + fp + fn; }
};

/// One-vs-rest counts per class over every non-ignored pixel seen so far.
class Confusion {
 public:
  explicit Confusion(Index num_classes, std::uint8_t ignore_index = kIgnoreLabel);

  /// Adds one (pred, gt) pair. Pred ids must lie in [0, L); gt ids in
  /// [0, L) or the ignore label. DataError names the pixel otherwise.
  void add(const LabelMap& pred, const LabelMap& gt, const std::string& source = "prediction");

  Index num_classes() const { return static_cast<Index>(counts_.size()); }
  const std::vector<ClassCounts>& counts() const { return counts_; }
  const ClassCounts& operator[](Index c) const { return counts_[static_cast<std::size_t>(c)]; }
  Index evaluated() const { return evaluated_; }
  Index correct() const { return correct_; }

 private:
  std::vector<ClassCounts> counts_;
  std::uint8_t ignore_;
  Index evaluated_ = 0;
  Index correct_ = 0;
};

Confusion confusion(const LabelMap& pred, const LabelMap& gt, Index num_classes,
                    std::uint8_t ignore_index = kIgnoreLabel);

struct ClassMetrics {
  ClassCounts counts;
  std::optional<double> iou;  ///< unset when TP + FP + FN == 0
  std::optional<double> acc;  ///< unset when no pixel was evaluated
  std::optional<double> f1;   ///< unset when 2TP + FP + FN == 0
};

struct MetricsReport {
  std::vector<ClassMetrics> classes;
  std::optional<double> miou;  ///< means over classes with a defined value
  std::optional<double> oa;    ///< mean of per-class Acc (true negatives included)
  std::optional<double> mf1;
  std::optional<double> pixel_accuracy;  ///< correct / evaluated pixels
  Index pixels = 0;
  std::vector<Index> undefined_classes;  ///< absent from both prediction and ground truth
};

MetricsReport compute_metrics(const Confusion& confusion);

nlohmann::json to_json(const MetricsReport& report, const std::vector<std::string>& class_names = {},
                       bool with_pixel_accuracy = false);
/// Fixed-width table, one row per class plus a mean row.
std::string format_table(const MetricsReport& report, const std::vector<std::string>& class_names = {},
                         bool with_pixel_accuracy = false);

}  // namespace aerialformer::metrics
