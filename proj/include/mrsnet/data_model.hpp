#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mrsnet/tensor.hpp"

namespace mrsnet {

enum class Language { en, zh };
enum class AnnotationType { single, multi, non_object };
enum class DescriptionDimension { size, spatial, color, category_relation, motion, association };

std::string to_string(Language v);
std::string to_string(AnnotationType v);
std::string to_string(DescriptionDimension v);
Language parse_language(const std::string& s);
AnnotationType parse_annotation_type(const std::string& s);
DescriptionDimension parse_dimension(const std::string& s);

/// Ordered list of exactly 32 unique lowercase category tokens.
class CategoryTaxonomy {
 public:
  static constexpr std::size_t kSize = 32;

  explicit CategoryTaxonomy(std::vector<std::string> names);
  static const CategoryTaxonomy& standard();

  const std::vector<std::string>& names() const { return names_; }
  bool contains(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

 private:
  std::vector<std::string> names_;
};

struct Expression {
  std::string text;
  Language language = Language::en;
  std::vector<DescriptionDimension> dimensions;  // optional metadata
};

struct BinaryMask {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> data;  // row-major, values 0/1

  BinaryMask() = default;
  BinaryMask(std::int64_t h, std::int64_t w) : height(h), width(w), data(static_cast<std::size_t>(h * w), 0) {}

  std::uint8_t& at(std::int64_t y, std::int64_t x) { return data[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t at(std::int64_t y, std::int64_t x) const { return data[static_cast<std::size_t>(y * width + x)]; }
  std::int64_t count() const;
  bool empty() const { return count() == 0; }

  // (1, 1, H, W) tensor of 0/1 values.
  Tensor to_tensor() const;
  // Threshold a (.., H, W) tensor holding one map: value > threshold -> 1.
  static BinaryMask from_tensor(const Tensor& t, double threshold = 0.5);
};

/// Manifest entry; pixel data is read on demand.
struct SampleRecord {
  std::string id;
  std::string image_path;  // relative to the dataset root
  std::string mask_path;
  Expression expression;
  AnnotationType annotation_type = AnnotationType::single;
  std::string category;
  std::string region = "default";
  std::int64_t height = 0;
  std::int64_t width = 0;
};

struct ReferringSample {
  std::string image_id;
  Tensor image;  // (3, H, W), RGB in [0, 1]
  Expression expression;
  BinaryMask mask;
  AnnotationType annotation_type = AnnotationType::single;
  std::string region = "default";
  std::string category;
};

class DatasetIndex {
 public:
  DatasetIndex() = default;
  DatasetIndex(std::filesystem::path root, std::vector<SampleRecord> records, std::filesystem::path manifest = {});

  const std::filesystem::path& root() const { return root_; }
  const std::filesystem::path& manifest() const { return manifest_; }
  const std::vector<SampleRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  std::size_t image_count() const;

  const SampleRecord& record(const std::string& id) const;
  ReferringSample load(const SampleRecord& r) const;
  ReferringSample load(const std::string& id) const { return load(record(id)); }

  bool has_split(const std::string& name) const { return splits_.count(name) > 0; }
  const std::vector<std::string>& split(const std::string& name) const;
  const std::map<std::string, std::vector<std::string>>& splits() const { return splits_; }
  // Replaces all splits; they must partition the sample ids.
  void set_splits(std::map<std::string, std::vector<std::string>> splits);

 private:
  std::filesystem::path root_;
  std::filesystem::path manifest_;
  std::vector<SampleRecord> records_;
  std::map<std::string, std::size_t> by_id_;
  std::map<std::string, std::vector<std::string>> splits_;
};

// Manifest path is resolved relative to root when not absolute.
DatasetIndex load_dataset(const std::filesystem::path& root, const std::filesystem::path& manifest);

using SplitRatios = std::array<double, 3>;
inline const std::array<const char*, 3> kSplitNames{"train", "val", "test"};

// Per-region shuffle and largest-remainder allocation into train/val/test.
DatasetIndex stratified_split(const DatasetIndex& index, const SplitRatios& ratios, std::uint64_t seed);
std::array<std::int64_t, 3> largest_remainder(std::int64_t n, const SplitRatios& ratios);

nlohmann::json splits_to_json(const DatasetIndex& index);
void apply_splits_json(DatasetIndex& index, const nlohmann::json& j);

// Nearest-neighbour mask / bilinear image resize.
ReferringSample resize_sample(const ReferringSample& s, std::int64_t height, std::int64_t width);

struct SyntheticOptions {
  std::size_t samples = 8;
  std::size_t non_object = 0;  // trailing samples with an empty target
  std::int64_t size = 128;
  std::uint64_t seed = 0;
  std::vector<std::string> regions{"default"};
  double min_extent = 0.35;  // shape side as a fraction of the image side
  double max_extent = 0.6;
};

// Writes images, masks and manifest.json under dir; returns the manifest path.
std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticOptions& options);

}  // namespace mrsnet
