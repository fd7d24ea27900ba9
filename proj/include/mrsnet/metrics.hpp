#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mrsnet/data_model.hpp"

namespace mrsnet {

struct EvalRecord {
  std::string sample_id;
  std::int64_t intersection = 0;
  std::int64_t union_ = 0;
  double iou = 0.0;
  AnnotationType annotation_type = AnnotationType::single;
};

// Both masks empty -> iou 1 with zero counts; gt empty, pred not -> 0.
EvalRecord sample_iou(const BinaryMask& pred, const BinaryMask& gt, std::string sample_id = {},
                      AnnotationType type = AnnotationType::single);

inline const std::vector<double> kTableThresholds{0.7, 0.8, 0.9};

// "P@0.7" style key.
std::string precision_key(double threshold);

/// Dataset-level scores, all in percent (unrounded; rounding happens on output).
struct MetricReport {
  std::size_t samples = 0;
  std::int64_t total_intersection = 0;  // over samples with union > 0
  std::int64_t total_union = 0;
  std::vector<std::pair<double, double>> precision;  // (threshold, percent)
  double oiou = 0.0;
  double miou = 0.0;

  double precision_at(double threshold) const;
  // (name, value) pairs: P@t for every threshold, then oIoU, mIoU.
  std::vector<std::pair<std::string, double>> columns() const;
  nlohmann::ordered_json to_json() const;  // table columns in order, rounded to 2 decimals
};

MetricReport aggregate(const std::vector<EvalRecord>& records,
                       const std::vector<double>& thresholds = kTableThresholds);

double round2(double v);

// Rows = methods, column groups = splits (e.g. val, test), each with P@t..., oIoU, mIoU.
std::string format_comparison_table(const std::vector<std::pair<std::string, std::map<std::string, MetricReport>>>& rows,
                                    const std::vector<std::string>& splits = {"val", "test"});

struct AblationRow {
  bool use_psr = true;
  bool use_csr = true;
  MetricReport report;
  std::string checkpoint;
};

std::string format_ablation_table(const std::vector<AblationRow>& rows);
nlohmann::ordered_json ablation_to_json(const std::vector<AblationRow>& rows);

}  // namespace mrsnet
