#include "mrsnet/data_model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mrsnet/errors.hpp"

namespace mrsnet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Language v) { return v == Language::en ? "en" : "zh"; }

std::string to_string(AnnotationType v) {
  switch (v) {
    case AnnotationType::single: return "single";
    case AnnotationType::multi: return "multi";
    case AnnotationType::non_object: return "non_object";
  }
  return "?";
}

namespace {
const std::array<const char*, 6> kDimensionNames{"size", "spatial", "color", "category_relation", "motion",
                                                 "association"};
}  // namespace

std::string to_string(DescriptionDimension v) { return kDimensionNames[static_cast<std::size_t>(v)]; }

Language parse_language(const std::string& s) {
  if (s == "en") return Language::en;
  if (s == "zh") return Language::zh;
  throw ValidationError("unknown language tag \"" + s + "\"");
}

AnnotationType parse_annotation_type(const std::string& s) {
  if (s == "single") return AnnotationType::single;
  if (s == "multi") return AnnotationType::multi;
  if (s == "non_object") return AnnotationType::non_object;
  throw ValidationError("unknown annotation type \"" + s + "\"");
}

DescriptionDimension parse_dimension(const std::string& s) {
  for (std::size_t i = 0; i < kDimensionNames.size(); ++i)
    if (s == kDimensionNames[i]) return static_cast<DescriptionDimension>(i);
  throw ValidationError("unknown description dimension \"" + s + "\"");
}

CategoryTaxonomy::CategoryTaxonomy(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.size() != kSize)
    throw ValidationError("category list must have " + std::to_string(kSize) + " entries, got " +
                          std::to_string(names_.size()));
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw ValidationError("empty category name");
    for (unsigned char c : n)
      if (std::isupper(c) || std::isspace(c)) throw ValidationError("category \"" + n + "\" is not a lowercase token");
    if (!seen.insert(n).second) throw ValidationError("duplicate category \"" + n + "\"");
  }
}

const CategoryTaxonomy& CategoryTaxonomy::standard() {
  static const CategoryTaxonomy taxonomy({
      "car",           "ship",          "train",          "airplane",         "bridge",
      "road",          "road_intersection", "building",   "airport_runway",   "lake",
      "river",         "grassland",     "open_area",      "ocean",            "basketball_court",
      "ground_track_field", "soccer_field", "tennis_court", "wind_turbine",    "power_line_tower",
      "storage_tank",  "construction_tower", "parking_lot", "dam",            "chimney",
      "container",     "badminton_court", "baseball_diamond", "golf_course",  "swimming_pool",
      "harbor",        "overpass",
  });
  return taxonomy;
}

bool CategoryTaxonomy::contains(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t CategoryTaxonomy::index_of(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ValidationError("unknown category \"" + name + "\"");
  return static_cast<std::size_t>(it - names_.begin());
}

std::int64_t BinaryMask::count() const {
  return std::accumulate(data.begin(), data.end(), std::int64_t{0});
}

Tensor BinaryMask::to_tensor() const {
  Tensor t({1, 1, height, width});
  auto d = t.data_mut();
  for (std::size_t i = 0; i < data.size(); ++i) d[i] = data[i];
  return t;
}

BinaryMask BinaryMask::from_tensor(const Tensor& t, double threshold) {
  if (t.rank() < 2 || t.numel() != t.dim(-2) * t.dim(-1))
    throw ShapeError("mask tensor must hold a single map, got " + shape_str(t.shape()));
  BinaryMask m(t.dim(-2), t.dim(-1));
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) m.data[i] = d[i] > threshold ? 1 : 0;
  return m;
}

DatasetIndex::DatasetIndex(fs::path root, std::vector<SampleRecord> records, fs::path manifest)
    : root_(std::move(root)), manifest_(std::move(manifest)), records_(std::move(records)) {
  for (std::size_t i = 0; i < records_.size(); ++i)
    if (!by_id_.emplace(records_[i].id, i).second)
      throw ValidationError("duplicate sample id \"" + records_[i].id + "\"");
}

std::size_t DatasetIndex::image_count() const {
  std::set<std::string> images;
  for (const auto& r : records_) images.insert(r.image_path);
  return images.size();
}

const SampleRecord& DatasetIndex::record(const std::string& id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) throw ValidationError("unknown sample id \"" + id + "\"");
  return records_[it->second];
}

const std::vector<std::string>& DatasetIndex::split(const std::string& name) const {
  auto it = splits_.find(name);
  if (it == splits_.end()) throw ConfigError("dataset has no split \"" + name + "\"");
  return it->second;
}

void DatasetIndex::set_splits(std::map<std::string, std::vector<std::string>> splits) {
  std::set<std::string> seen;
  for (const auto& [name, ids] : splits)
    for (const auto& id : ids) {
      record(id);
      if (!seen.insert(id).second) throw ValidationError("sample \"" + id + "\" appears in more than one split");
    }
  if (seen.size() != records_.size())
    throw ValidationError("splits cover " + std::to_string(seen.size()) + " of " + std::to_string(records_.size()) +
                          " samples");
  splits_ = std::move(splits);
}

namespace {

cv::Mat read_mask(const fs::path& path, const std::string& sample) {
  if (!fs::exists(path)) throw LoadError("sample " + sample + ": mask file not found: " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw LoadError("sample " + sample + ": cannot decode mask " + path.string());
  if (m.channels() != 1 || m.depth() != CV_8U)
    throw ValidationError("sample " + sample + ": mask must be 8-bit single-channel, " + path.string());
  return m;
}

BinaryMask binarize(const cv::Mat& m) {
  BinaryMask mask(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) mask.at(y, x) = row[x] > 127 ? 1 : 0;
  }
  return mask;
}

cv::Mat read_image(const fs::path& path, const std::string& sample) {
  if (!fs::exists(path)) throw LoadError("sample " + sample + ": image file not found: " + path.string());
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw LoadError("sample " + sample + ": cannot decode image " + path.string());
  return img;
}

}  // namespace

ReferringSample DatasetIndex::load(const SampleRecord& r) const {
  ReferringSample s;
  s.image_id = r.id;
  s.expression = r.expression;
  s.annotation_type = r.annotation_type;
  s.region = r.region;
  s.category = r.category;
  const cv::Mat img = read_image(root_ / r.image_path, r.id);
  s.mask = binarize(read_mask(root_ / r.mask_path, r.id));
  if (img.rows != s.mask.height || img.cols != s.mask.width)
    throw ValidationError("sample " + r.id + ": mask shape does not match image shape");
  s.image = Tensor({3, img.rows, img.cols});
  auto d = s.image.data_mut();
  const std::int64_t plane = static_cast<std::int64_t>(img.rows) * img.cols;
  for (int y = 0; y < img.rows; ++y) {
    const auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.cols; ++x)
      for (int c = 0; c < 3; ++c) d[c * plane + y * img.cols + x] = row[x][2 - c] / 255.0;  // BGR -> RGB
  }
  return s;
}

DatasetIndex load_dataset(const fs::path& root, const fs::path& manifest) {
  const fs::path manifest_path = manifest.is_absolute() ? manifest : root / manifest;
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("cannot open manifest " + manifest_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw LoadError("manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.contains("categories") || !j.contains("samples") || !j["samples"].is_array())
    throw ValidationError("manifest needs \"categories\" and \"samples\"");
  const CategoryTaxonomy taxonomy(j["categories"].get<std::vector<std::string>>());
  const fs::path base = root.empty() ? manifest_path.parent_path() : root;

  std::unordered_map<std::string, std::pair<int, int>> image_shapes;
  std::unordered_map<std::string, int> per_image;
  std::vector<SampleRecord> records;
  records.reserve(j["samples"].size());
  for (std::size_t i = 0; i < j["samples"].size(); ++i) {
    const auto& e = j["samples"][i];
    SampleRecord r;
    try {
      r.image_path = e.at("image").get<std::string>();
      r.mask_path = e.at("mask").get<std::string>();
      r.expression.text = e.at("text").get<std::string>();
      r.expression.language = parse_language(e.value("lang", std::string("en")));
      for (const auto& d : e.value("dimensions", std::vector<std::string>{}))
        r.expression.dimensions.push_back(parse_dimension(d));
      r.annotation_type = parse_annotation_type(e.at("type").get<std::string>());
      r.category = e.at("category").get<std::string>();
      r.region = e.value("region", std::string("default"));
    } catch (const json::exception& ex) {
      throw ValidationError("manifest sample " + std::to_string(i) + ": " + ex.what());
    }
    const int k = per_image[r.image_path]++;
    r.id = e.value("id", r.image_path + "#" + std::to_string(k));
    if (r.expression.text.empty()) throw ValidationError("sample " + r.id + ": empty expression");
    if (r.region.empty()) r.region = "default";
    if (!taxonomy.contains(r.category))
      throw ValidationError("sample " + r.id + ": unknown category \"" + r.category + "\"");

    const cv::Mat mask = read_mask(base / r.mask_path, r.id);
    auto shape = image_shapes.find(r.image_path);
    if (shape == image_shapes.end()) {
      const cv::Mat img = read_image(base / r.image_path, r.id);
      shape = image_shapes.emplace(r.image_path, std::make_pair(img.rows, img.cols)).first;
    }
    if (shape->second.first != mask.rows || shape->second.second != mask.cols)
      throw ValidationError("sample " + r.id + ": mask " + std::to_string(mask.rows) + "x" +
                            std::to_string(mask.cols) + " does not match image " +
                            std::to_string(shape->second.first) + "x" + std::to_string(shape->second.second));
    const bool empty = cv::countNonZero(mask > 127) == 0;
    if (empty != (r.annotation_type == AnnotationType::non_object))
      throw ValidationError("sample " + r.id + ": annotation type " + to_string(r.annotation_type) +
                            (empty ? " with an empty mask" : " with a non-empty mask"));
    r.height = mask.rows;
    r.width = mask.cols;
    records.push_back(std::move(r));
  }
  return DatasetIndex(fs::absolute(base), std::move(records), fs::absolute(manifest_path));
}

std::array<std::int64_t, 3> largest_remainder(std::int64_t n, const SplitRatios& ratios) {
  std::array<std::int64_t, 3> counts{};
  std::array<double, 3> rema{};
  std::int64_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double quota = static_cast<double>(n) * ratios[k];
    // Tolerance absorbs representation error such as 10 * 0.7.
    counts[k] = static_cast<std::int64_t>(std::floor(quota + 1e-9));
    rema[k] = quota - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rema[a] > rema[b]; });
  for (int i = 0; assigned < n; i = (i + 1) % 3, ++assigned) ++counts[order[i]];
  return counts;
}

DatasetIndex stratified_split(const DatasetIndex& index, const SplitRatios& ratios, std::uint64_t seed) {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");

  std::map<std::string, std::vector<std::string>> by_region;
  for (const auto& r : index.records()) by_region[r.region].push_back(r.id);

  std::mt19937_64 rng(seed);
  std::map<std::string, std::vector<std::string>> splits;
  for (const char* name : kSplitNames) splits[name];
  for (auto& [region, ids] : by_region) {
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng() % i]);
    const auto counts = largest_remainder(static_cast<std::int64_t>(ids.size()), ratios);
    std::size_t pos = 0;
    for (int k = 0; k < 3; ++k)
      for (std::int64_t c = 0; c < counts[k]; ++c) splits[kSplitNames[k]].push_back(ids[pos++]);
  }
  DatasetIndex out = index;
  out.set_splits(std::move(splits));
  return out;
}

json splits_to_json(const DatasetIndex& index) {
  json j = json::object();
  for (const auto& [name, ids] : index.splits()) j[name] = ids;
  return j;
}

void apply_splits_json(DatasetIndex& index, const json& j) {
  std::map<std::string, std::vector<std::string>> splits;
  const json& body = j.contains("splits") ? j["splits"] : j;
  for (const auto& [name, ids] : body.items()) splits[name] = ids.get<std::vector<std::string>>();
  index.set_splits(std::move(splits));
}

ReferringSample resize_sample(const ReferringSample& s, std::int64_t height, std::int64_t width) {
  if (s.mask.height == height && s.mask.width == width) return s;
  ReferringSample out = s;
  const int h0 = static_cast<int>(s.mask.height), w0 = static_cast<int>(s.mask.width);
  const cv::Size target(static_cast<int>(width), static_cast<int>(height));
  out.image = Tensor({3, height, width});
  auto dst = out.image.data_mut();
  const auto src = s.image.data();
  for (int c = 0; c < 3; ++c) {
    cv::Mat plane(h0, w0, CV_64F, const_cast<double*>(src.data()) + static_cast<std::size_t>(c) * h0 * w0);
    cv::Mat resized;
    cv::resize(plane, resized, target, 0, 0, cv::INTER_LINEAR);
    std::copy(resized.ptr<double>(), resized.ptr<double>() + height * width, dst.begin() + c * height * width);
  }
  cv::Mat m(h0, w0, CV_8U, const_cast<std::uint8_t*>(s.mask.data.data()));
  cv::Mat mr;
  cv::resize(m, mr, target, 0, 0, cv::INTER_NEAREST);
  out.mask = BinaryMask(height, width);
  std::copy(mr.ptr<std::uint8_t>(), mr.ptr<std::uint8_t>() + height * width, out.mask.data.begin());
  return out;
}

namespace {

struct Colour {
  const char* name;
  cv::Scalar bgr;
};

const std::array<Colour, 4> kColours{{{"red", {40, 40, 220}},
                                      {"green", {40, 200, 40}},
                                      {"blue", {220, 60, 30}},
                                      {"yellow", {30, 220, 230}}}};
const std::array<const char*, 2> kShapes{"rectangle", "ellipse"};
const std::array<const char*, 2> kShapeCategory{"building", "storage_tank"};

}  // namespace

fs::path write_synthetic_dataset(const fs::path& dir, const SyntheticOptions& o) {
  if (o.samples == 0 || o.non_object > o.samples) throw ConfigError("synthetic dataset needs samples >= non_object");
  if (o.size < 32) throw ConfigError("synthetic images must be at least 32 px");
  if (o.regions.empty()) throw ConfigError("synthetic dataset needs at least one region");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::mt19937_64 rng(o.seed);
  auto uniform = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  const int n = static_cast<int>(o.size);

  json manifest;
  manifest["categories"] = CategoryTaxonomy::standard().names();
  manifest["samples"] = json::array();
  for (std::size_t i = 0; i < o.samples; ++i) {
    const bool non_object = i >= o.samples - o.non_object;
    cv::Mat img(n, n, CV_8UC3);
    cv::randu(img, cv::Scalar::all(90), cv::Scalar::all(140));
    cv::Mat mask = cv::Mat::zeros(n, n, CV_8U);

    const std::size_t colour = rng() % kColours.size();
    const std::size_t shape = rng() % kShapes.size();
    const int w = static_cast<int>(n * (o.min_extent + (o.max_extent - o.min_extent) * uniform()));
    const int h = static_cast<int>(n * (o.min_extent + (o.max_extent - o.min_extent) * uniform()));
    const int x = static_cast<int>((n - w) * uniform());
    const int y = static_cast<int>((n - h) * uniform());
    const cv::Rect box(x, y, w, h);
    auto draw = [&](cv::Mat& target, const cv::Scalar& value) {
      if (shape == 0)
        cv::rectangle(target, box, value, cv::FILLED);
      else
        cv::ellipse(target, cv::Point(x + w / 2, y + h / 2), cv::Size(w / 2, h / 2), 0, 0, 360, value, cv::FILLED);
    };
    draw(img, kColours[colour].bgr);
    std::string text;
    std::string category = kShapeCategory[shape];
    if (non_object) {
      // Refer to a colour that is not in the image.
      const auto absent = (colour + 1 + rng() % (kColours.size() - 1)) % kColours.size();
      text = std::string("the ") + kColours[absent].name + " " + kShapes[shape];
    } else {
      draw(mask, cv::Scalar(255));
      text = std::string("the ") + kColours[colour].name + " " + kShapes[shape];
    }

    char stem[32];
    std::snprintf(stem, sizeof stem, "syn_%04zu", i);
    const std::string image_rel = std::string("images/") + stem + ".png";
    const std::string mask_rel = std::string("masks/") + stem + "_0.png";
    if (!cv::imwrite((dir / image_rel).string(), img) || !cv::imwrite((dir / mask_rel).string(), mask))
      throw LoadError("cannot write synthetic sample under " + dir.string());
    manifest["samples"].push_back({{"image", image_rel},
                                   {"mask", mask_rel},
                                   {"text", text},
                                   {"lang", "en"},
                                   {"type", non_object ? "non_object" : "single"},
                                   {"category", category},
                                   {"region", o.regions[i % o.regions.size()]}});
  }
  const fs::path path = dir / "manifest.json";
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << manifest.dump(1) << '\n';
  return path;
}

}  // namespace mrsnet
