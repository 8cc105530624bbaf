#include "bllm/lane_fit.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <tuple>

#include "bllm/checkpoint.hpp"
#include "bllm/error.hpp"
#include "bllm/qa_eval.hpp"

namespace bllm {
namespace {

using nlohmann::json;

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

}  // namespace

GrayImage::GrayImage(std::size_t w, std::size_t h, std::uint8_t fill) : width(w), height(h), pixels(w * h, fill) {}

void GrayImage::validate() const {
  if (pixels.size() != width * height) {
    throw ShapeError("gray image buffer holds " + std::to_string(pixels.size()) + " bytes, expected " +
                     std::to_string(width) + "x" + std::to_string(height));
  }
}

void LaneMask::validate() const {
  labels.validate();
  std::vector<char> seen(256, 0);
  for (auto v : labels.pixels) seen[v] = 1;
  std::size_t top = 0;
  for (std::size_t v = 0; v < seen.size(); ++v) {
    if (seen[v]) top = v;
  }
  for (std::size_t v = 1; v <= top; ++v) {
    if (!seen[v]) throw ValidationError("mask.labels", "label " + std::to_string(v) + " missing below " + std::to_string(top));
  }
}

std::size_t LaneMask::instance_count() const {
  std::uint8_t top = 0;
  for (auto v : labels.pixels) top = std::max(top, v);
  return top;
}

std::string encode_pgm(const GrayImage& img) {
  img.validate();
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

GrayImage decode_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  if (token() != "P5") throw LoadError("not a binary PGM (P5)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw LoadError("malformed PGM header");
  }
  if (maxval == 0 || maxval > 255) throw LoadError("only 8-bit PGM supported");
  ++pos;
  if (bytes.size() < pos || bytes.size() - pos != w * h) throw LoadError("PGM raster size mismatch");
  GrayImage img(w, h);
  for (std::size_t i = 0; i < w * h; ++i) img.pixels[i] = static_cast<std::uint8_t>(bytes[pos + i]);
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) { write_file(path, encode_pgm(img)); }

GrayImage read_pgm(const std::filesystem::path& path) { return decode_pgm(read_file(path)); }

GrayImage normalize_minmax(const GrayImage& img) {
  img.validate();
  GrayImage out = img;
  if (img.pixels.empty()) return out;
  const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
  const unsigned range = static_cast<unsigned>(*hi) - *lo;
  if (range == 0) return out;
  for (auto& p : out.pixels) p = static_cast<std::uint8_t>(((p - *lo) * 255u + range / 2) / range);
  return out;
}

GrayImage equalize(const GrayImage& img) {
  img.validate();
  GrayImage out = img;
  if (img.pixels.empty()) return out;
  std::array<std::uint64_t, 256> hist{};
  for (auto p : img.pixels) hist[p] += 1;
  std::array<std::uint8_t, 256> lut{};
  std::uint64_t cum = 0;
  const std::uint64_t n = img.pixels.size();
  for (std::size_t v = 0; v < 256; ++v) {
    cum += hist[v];
    lut[v] = static_cast<std::uint8_t>(255 * cum / n);
  }
  for (auto& p : out.pixels) p = lut[p];
  return out;
}

std::vector<double> sobel_magnitude(const GrayImage& img) {
  img.validate();
  std::vector<double> out(img.pixels.size(), 0.0);
  if (img.width == 0 || img.height == 0) return out;
  auto px = [&](long r, long c) {
    r = std::clamp(r, 0L, static_cast<long>(img.height) - 1);
    c = std::clamp(c, 0L, static_cast<long>(img.width) - 1);
    return static_cast<double>(img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)));
  };
  for (long r = 0; r < static_cast<long>(img.height); ++r) {
    for (long c = 0; c < static_cast<long>(img.width); ++c) {
      const double gx = (px(r - 1, c + 1) + 2 * px(r, c + 1) + px(r + 1, c + 1)) -
                        (px(r - 1, c - 1) + 2 * px(r, c - 1) + px(r + 1, c - 1));
      const double gy = (px(r + 1, c - 1) + 2 * px(r + 1, c) + px(r + 1, c + 1)) -
                        (px(r - 1, c - 1) + 2 * px(r - 1, c) + px(r - 1, c + 1));
      out[static_cast<std::size_t>(r) * img.width + static_cast<std::size_t>(c)] = std::hypot(gx, gy);
    }
  }
  return out;
}

GrayImage preprocess(const GrayImage& img, const PreprocessOptions& opts) {
  GrayImage eq = equalize(normalize_minmax(img));
  const auto edges = sobel_magnitude(eq);
  for (std::size_t i = 0; i < eq.pixels.size(); ++i) {
    eq.pixels[i] = clamp_byte(static_cast<double>(eq.pixels[i]) + opts.edge_weight * edges[i]);
  }
  return eq;
}

std::vector<std::vector<Point2>> extract_instances(const LaneMask& mask) {
  mask.validate();
  const GrayImage& g = mask.labels;
  const std::size_t k = mask.instance_count();
  std::vector<std::vector<Point2>> out(k);
  std::vector<double> sum(k + 1);
  std::vector<std::size_t> count(k + 1);
  for (std::size_t r = 0; r < g.height; ++r) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t c = 0; c < g.width; ++c) {
      const auto label = g.at(r, c);
      sum[label] += static_cast<double>(c);
      count[label] += 1;
    }
    for (std::size_t label = 1; label <= k; ++label) {
      if (count[label] > 0) out[label - 1].push_back({sum[label] / static_cast<double>(count[label]), static_cast<double>(r)});
    }
  }
  return out;
}

double LaneCurve::x_at(double y) const {
  double x = 0.0;
  for (std::size_t k = coeffs.size(); k-- > 0;) x = x * y + coeffs[k];
  return x;
}

LaneCurve LaneCurve::translated(double dx, double dy) const {
  // x'(y) = x(y - dy) + dx, expanded back to monomials in y.
  LaneCurve out = *this;
  std::fill(out.coeffs.begin(), out.coeffs.end(), 0.0);
  for (int k = 0; k < static_cast<int>(coeffs.size()); ++k) {
    for (int j = 0; j <= k; ++j) {
      out.coeffs[static_cast<std::size_t>(j)] +=
          coeffs[static_cast<std::size_t>(k)] * binomial(k, j) * std::pow(-dy, k - j);
    }
  }
  if (!out.coeffs.empty()) out.coeffs[0] += dx;
  out.y_min += dy;
  out.y_max += dy;
  return out;
}

LaneCurve fit_lane(std::span<const Point2> points, int degree) {
  if (degree < 1) throw FitError("fit_lane: degree must be >= 1");
  const auto terms = static_cast<std::size_t>(degree) + 1;
  if (points.size() < terms) {
    throw FitError("fit_lane: " + std::to_string(points.size()) + " points cannot determine a degree-" +
                   std::to_string(degree) + " polynomial");
  }
  Eigen::MatrixXd a(points.size(), terms);
  Eigen::VectorXd b(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    double p = 1.0;
    for (std::size_t k = 0; k < terms; ++k) {
      a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = p;
      p *= points[i].y;
    }
    b(static_cast<Eigen::Index>(i)) = points[i].x;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < static_cast<Eigen::Index>(terms)) {
    throw DegeneracyError("fit_lane: design matrix has rank " + std::to_string(qr.rank()) + " < " +
                          std::to_string(terms) + " (too few distinct y values)");
  }
  const Eigen::VectorXd c = qr.solve(b);
  LaneCurve curve;
  curve.degree = degree;
  curve.coeffs.assign(c.data(), c.data() + c.size());
  for (double v : curve.coeffs) {
    if (!std::isfinite(v)) throw NumericError("fit_lane: non-finite coefficient");
  }
  const auto [lo, hi] = std::minmax_element(points.begin(), points.end(),
                                            [](const Point2& p, const Point2& q) { return p.y < q.y; });
  curve.y_min = lo->y;
  curve.y_max = hi->y;
  double ss = 0.0;
  for (const auto& p : points) {
    const double r = curve.x_at(p.y) - p.x;
    ss += r * r;
  }
  curve.rms = std::sqrt(ss / static_cast<double>(points.size()));
  return curve;
}

LaneScore lane_accuracy(std::span<const LaneCurve> pred, std::span<const std::vector<Point2>> gt, double tau) {
  std::vector<std::tuple<double, std::size_t, std::size_t>> candidates;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (gt[g].empty()) continue;
    for (std::size_t p = 0; p < pred.size(); ++p) {
      double s = 0.0;
      for (const auto& pt : gt[g]) s += std::abs(pred[p].x_at(pt.y) - pt.x);
      candidates.emplace_back(s / static_cast<double>(gt[g].size()), g, p);
    }
  }
  std::sort(candidates.begin(), candidates.end());
  std::vector<long> match(gt.size(), -1);
  std::vector<char> used(pred.size(), 0);
  for (const auto& [cost, g, p] : candidates) {
    if (match[g] >= 0 || used[p]) continue;
    match[g] = static_cast<long>(p);
    used[p] = 1;
  }
  LaneScore score;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    score.total += gt[g].size();
    if (match[g] < 0) continue;
    const LaneCurve& c = pred[static_cast<std::size_t>(match[g])];
    for (const auto& pt : gt[g]) score.correct += std::abs(c.x_at(pt.y) - pt.x) <= tau ? 1 : 0;
  }
  score.accuracy = percent(score.correct, score.total, 1);
  return score;
}

std::string curves_to_json(std::span<const LaneCurve> curves) {
  json arr = json::array();
  for (const auto& c : curves) {
    arr.push_back({{"degree", c.degree}, {"coeffs", c.coeffs}, {"y_range", {c.y_min, c.y_max}}, {"rms", c.rms}});
  }
  return json{{"lanes", arr}}.dump(2) + "\n";
}

std::vector<LaneCurve> curves_from_json(std::string_view text) {
  std::vector<LaneCurve> out;
  try {
    const json doc = json::parse(text);
    for (const auto& j : doc.at("lanes")) {
      LaneCurve c;
      c.degree = j.at("degree").get<int>();
      c.coeffs = j.at("coeffs").get<std::vector<double>>();
      const auto range = j.at("y_range").get<std::vector<double>>();
      if (range.size() != 2) throw ValidationError("y_range", "expected [y_min, y_max]");
      c.y_min = range[0];
      c.y_max = range[1];
      c.rms = j.value("rms", 0.0);
      if (c.degree < 1 || c.coeffs.size() != static_cast<std::size_t>(c.degree) + 1) {
        throw ValidationError("coeffs", "expected degree + 1 coefficients");
      }
      out.push_back(std::move(c));
    }
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("curves: ") + e.what(), 1, e.byte);
  } catch (const json::exception& e) {
    throw ValidationError("lanes", e.what());
  }
  return out;
}

std::vector<std::vector<Point2>> gt_lanes_from_json(std::string_view text) {
  std::vector<std::vector<Point2>> out;
  try {
    const json doc = json::parse(text);
    for (const auto& lane : doc.at("lanes")) {
      std::vector<Point2> pts;
      for (const auto& p : lane) {
        const auto xy = p.get<std::vector<double>>();
        if (xy.size() != 2) throw ValidationError("lanes", "points must be [x, y]");
        pts.push_back({xy[0], xy[1]});
      }
      out.push_back(std::move(pts));
    }
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("gt lanes: ") + e.what(), 1, e.byte);
  } catch (const json::exception& e) {
    throw ValidationError("lanes", e.what());
  }
  return out;
}

std::string gt_lanes_to_json(std::span<const std::vector<Point2>> lanes) {
  json arr = json::array();
  for (const auto& lane : lanes) {
    json pts = json::array();
    for (const auto& p : lane) pts.push_back({p.x, p.y});
    arr.push_back(pts);
  }
  return json{{"lanes", arr}}.dump() + "\n";
}

}  // namespace bllm
