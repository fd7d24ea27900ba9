#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "json.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("mrsnet_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline void write_png(const std::filesystem::path& path, const cv::Mat& m) {
  std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write " + path.string());
}

// Mask with a filled box at rows [y0, y1) and columns [x0, x1).
inline cv::Mat box_mask(int h, int w, int y0, int y1, int x0, int x1) {
  cv::Mat m = cv::Mat::zeros(h, w, CV_8U);
  if (y1 > y0 && x1 > x0) m(cv::Rect(x0, y0, x1 - x0, y1 - y0)).setTo(255);
  return m;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(1);
}

}  // namespace testing
