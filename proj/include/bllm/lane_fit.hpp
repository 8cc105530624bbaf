#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bllm/scene.hpp"

namespace bllm {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0);

  std::uint8_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  std::uint8_t& at(std::size_t row, std::size_t col) { return pixels[row * width + col]; }
  void validate() const;

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

// Labels as gray levels: 0 background, 1..K lane instances.
struct LaneMask {
  GrayImage labels;

  // Throws ValidationError unless the labels present are exactly 0..K.
  void validate() const;
  std::size_t instance_count() const;
};

std::string encode_pgm(const GrayImage& img);
GrayImage decode_pgm(std::string_view bytes);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

GrayImage normalize_minmax(const GrayImage& img);
// Level v maps to floor(255 * cdf(v)).
GrayImage equalize(const GrayImage& img);
// 3x3 Sobel gradient magnitude, replicated borders.
std::vector<double> sobel_magnitude(const GrayImage& img);

struct PreprocessOptions {
  double edge_weight = 0.3;
};

// normalize -> equalize -> add edge_weight * Sobel magnitude (clamped).
GrayImage preprocess(const GrayImage& img, const PreprocessOptions& opts = {});

// One point per (label, row): x = mean column of the label's pixels, y = row.
std::vector<std::vector<Point2>> extract_instances(const LaneMask& mask);

struct LaneCurve {
  int degree = 2;
  std::vector<double> coeffs;  // x = sum_k coeffs[k] * y^k
  double y_min = 0.0;
  double y_max = 0.0;
  double rms = 0.0;

  double x_at(double y) const;
  // Curve of the same shape moved by (dx, dy).
  LaneCurve translated(double dx, double dy) const;
};

// Least squares x(y) via column-pivoted QR of the Vandermonde matrix.
// FitError when points < degree + 1, DegeneracyError when rank-deficient.
LaneCurve fit_lane(std::span<const Point2> points, int degree = 2);

struct LaneScore {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;  // percent, 1 decimal
};

// Lanes matched greedily by mean |dx| over the GT samples; a sample is correct
// iff |x_pred(y) - x_gt| <= tau. Unmatched GT lanes score zero.
LaneScore lane_accuracy(std::span<const LaneCurve> pred, std::span<const std::vector<Point2>> gt, double tau = 20.0);

std::string curves_to_json(std::span<const LaneCurve> curves);
std::vector<LaneCurve> curves_from_json(std::string_view text);
// {"lanes": [[[x, y], ...], ...]}
std::vector<std::vector<Point2>> gt_lanes_from_json(std::string_view text);
std::string gt_lanes_to_json(std::span<const std::vector<Point2>> lanes);

}  // namespace bllm
