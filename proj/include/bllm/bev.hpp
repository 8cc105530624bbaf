#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "bllm/scene.hpp"

namespace bllm {

struct CloudPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double intensity = 0.0;  // [0, 1]
};

struct PointCloud {
  std::vector<CloudPoint> points;
};

// KITTI-style binary: consecutive little-endian float32 (x, y, z, intensity).
PointCloud read_point_cloud(const std::filesystem::path& path);
void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud);

// Metric window rendered top-down with forward (+y) pointing up the image.
struct Viewport {
  double x_min = -25.0;
  double x_max = 25.0;
  double y_min = 0.0;
  double y_max = 100.0;
  double pixels_per_meter = 8.96;

  std::size_t width() const;
  std::size_t height() const;
  void validate() const;
};

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;

  friend bool operator==(const Rgb&, const Rgb&) = default;
  bool is_gray() const { return r == g && g == b; }
};

struct RoleColors {
  Rgb motorway{255, 255, 0};
  Rgb bicycle{255, 165, 0};
  Rgb cross_section{0, 0, 255};
  // Lanes of other types stay inside the grayscale range.
  Rgb other{255, 255, 255};

  Rgb lane(LaneType t) const;
};

class BevImage {
 public:
  BevImage() = default;
  BevImage(std::size_t width, std::size_t height, Viewport viewport = {});

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  const Viewport& viewport() const { return viewport_; }
  const std::vector<std::uint8_t>& pixels() const { return pixels_; }

  Rgb at(std::size_t col, std::size_t row) const;
  void set(std::size_t col, std::size_t row, Rgb c);
  // Bounds-checked write; out-of-image coordinates are ignored.
  void paint(long col, long row, Rgb c);

  friend bool operator==(const BevImage& a, const BevImage& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.pixels_ == b.pixels_;
  }

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  Viewport viewport_;
  std::vector<std::uint8_t> pixels_;
};

struct PixelPoint {
  long col = 0;
  long row = 0;
};

// Continuous pixel coordinates of a metric point for an image of the given size.
double to_col(const Viewport& vp, std::size_t width, double x);
double to_row(const Viewport& vp, std::size_t height, double y);
PixelPoint to_pixel(const Viewport& vp, std::size_t width, std::size_t height, Point2 p);

// Gray level of each cell is the max intensity of its points, scaled to
// [0, 255] and rounded; out-of-view points are dropped.
BevImage rasterize_points(const PointCloud& cloud, const Viewport& vp);

// Integer (Bresenham) segments with a square brush of `width` pixels.
void draw_polyline(BevImage& img, const LanePolyline& line, int width = 2,
                   const RoleColors& colors = {});
void draw_cross_section(BevImage& img, const CrossSection& cs, int width = 2,
                        const RoleColors& colors = {});

BevImage resize_nearest(const BevImage& img, std::size_t width, std::size_t height);

struct RenderOptions {
  Viewport viewport;
  int line_width = 2;
  std::size_t output_size = 448;
  RoleColors colors;
};

// Layering: points, then lanes, then cross-sections; then resize to the
// square model input.
BevImage render_scene(const SceneRecord& scene, const PointCloud& cloud, const RenderOptions& opts);

std::string encode_ppm(const BevImage& img);
BevImage decode_ppm(std::string_view bytes);
void write_ppm(const std::filesystem::path& path, const BevImage& img);
BevImage read_ppm(const std::filesystem::path& path);

}  // namespace bllm
