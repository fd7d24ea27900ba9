#include "mrsnet/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "mrsnet/errors.hpp"

namespace mrsnet {

EvalRecord sample_iou(const BinaryMask& pred, const BinaryMask& gt, std::string sample_id, AnnotationType type) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ShapeError("prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  EvalRecord r;
  r.sample_id = std::move(sample_id);
  r.annotation_type = type;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    r.intersection += p && g;
    r.union_ += p || g;
  }
  r.iou = r.union_ == 0 ? 1.0 : static_cast<double>(r.intersection) / static_cast<double>(r.union_);
  return r;
}

std::string precision_key(double threshold) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "P@%g", threshold);
  return buf;
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

double MetricReport::precision_at(double threshold) const {
  for (const auto& [t, v] : precision)
    if (t == threshold) return v;
  throw ConfigError("report has no " + precision_key(threshold));
}

std::vector<std::pair<std::string, double>> MetricReport::columns() const {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [t, v] : precision) out.emplace_back(precision_key(t), v);
  out.emplace_back("oIoU", oiou);
  out.emplace_back("mIoU", miou);
  return out;
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : columns()) j[k] = round2(v);
  return j;
}

MetricReport aggregate(const std::vector<EvalRecord>& records, const std::vector<double>& thresholds) {
  if (records.empty()) throw ValidationError("cannot aggregate an empty record list");
  MetricReport r;
  r.samples = records.size();
  double iou_sum = 0.0;
  for (const auto& e : records) {
    if (e.intersection < 0 || e.intersection > e.union_) throw ValidationError("record " + e.sample_id + " has intersection > union");
    iou_sum += e.iou;
    if (e.union_ > 0) {
      r.total_intersection += e.intersection;
      r.total_union += e.union_;
    }
  }
  const double n = static_cast<double>(records.size());
  r.miou = 100.0 * iou_sum / n;
  // Every sample both-empty: nothing was mis-segmented.
  r.oiou = r.total_union == 0 ? 100.0
                              : 100.0 * static_cast<double>(r.total_intersection) / static_cast<double>(r.total_union);
  for (double t : thresholds) {
    std::size_t hits = 0;
    for (const auto& e : records) hits += e.iou >= t;
    r.precision.emplace_back(t, 100.0 * static_cast<double>(hits) / n);
  }
  return r;
}

namespace {

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", round2(v));
  return buf;
}

// Width in code points, so the check marks align.
std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

std::string pad(const std::string& s, std::size_t width, bool left = false) {
  const auto w = display_width(s);
  if (w >= width) return s;
  return left ? s + std::string(width - w, ' ') : std::string(width - w, ' ') + s;
}

}  // namespace

std::string format_comparison_table(
    const std::vector<std::pair<std::string, std::map<std::string, MetricReport>>>& rows,
    const std::vector<std::string>& splits) {
  std::vector<std::string> names;
  for (double t : kTableThresholds) names.push_back(precision_key(t));
  names.push_back("oIoU");
  names.push_back("mIoU");
  const std::size_t cell = 7;
  std::size_t label = 6;
  for (const auto& [method, _] : rows) label = std::max(label, method.size());
  const std::size_t group = names.size() * (cell + 1) - 1;

  std::ostringstream out;
  out << pad("Method", label, true);
  for (const auto& s : splits) {
    const std::size_t left = (group - s.size()) / 2;
    out << " | " << std::string(left, ' ') << s << std::string(group - s.size() - left, ' ');
  }
  out << '\n' << std::string(label, ' ');
  for (std::size_t g = 0; g < splits.size(); ++g) {
    out << " |";
    for (const auto& n : names) out << ' ' << pad(n, cell);
  }
  out << '\n';
  for (const auto& [method, by_split] : rows) {
    out << pad(method, label, true);
    for (const auto& s : splits) {
      out << " |";
      auto it = by_split.find(s);
      for (const auto& n : names) {
        std::string v = "-";
        if (it != by_split.end())
          for (const auto& [k, x] : it->second.columns())
            if (k == n) v = fixed2(x);
        out << ' ' << pad(v, cell);
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::vector<std::string> names{"PSR", "CSR"};
  for (double t : kTableThresholds) names.push_back(precision_key(t));
  names.push_back("oIoU");
  names.push_back("mIoU");
  const std::size_t cell = 7;
  std::ostringstream out;
  for (std::size_t i = 0; i < names.size(); ++i) out << (i ? " " : "") << pad(names[i], cell);
  out << '\n';
  for (const auto& row : rows) {
    out << pad(row.use_psr ? "✓" : "×", cell) << ' ' << pad(row.use_csr ? "✓" : "×", cell);
    for (const auto& [k, v] : row.report.columns()) out << ' ' << pad(fixed2(v), cell);
    out << '\n';
  }
  return out.str();
}

nlohmann::ordered_json ablation_to_json(const std::vector<AblationRow>& rows) {
  auto j = nlohmann::ordered_json::array();
  for (const auto& row : rows) {
    nlohmann::ordered_json r;
    r["use_psr"] = row.use_psr;
    r["use_csr"] = row.use_csr;
    r["metrics"] = row.report.to_json();
    r["checkpoint"] = row.checkpoint;
    j.push_back(std::move(r));
  }
  return j;
}

}  // namespace mrsnet
