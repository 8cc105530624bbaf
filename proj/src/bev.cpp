#include "bllm/bev.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cctype>
#include <cstring>
#include <sstream>

#include "bllm/checkpoint.hpp"
#include "bllm/error.hpp"

namespace bllm {
namespace {

// Liang-Barsky clip of (x0,y0)-(x1,y1) against [lo_x, hi_x] x [lo_y, hi_y].
bool clip_segment(double& x0, double& y0, double& x1, double& y1, double lo_x, double hi_x,
                  double lo_y, double hi_y) {
  double t0 = 0.0;
  double t1 = 1.0;
  const double dx = x1 - x0;
  const double dy = y1 - y0;
  const double p[4] = {-dx, dx, -dy, dy};
  const double q[4] = {x0 - lo_x, hi_x - x0, y0 - lo_y, hi_y - y0};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return false;
      continue;
    }
    const double r = q[i] / p[i];
    if (p[i] < 0.0) {
      if (r > t1) return false;
      t0 = std::max(t0, r);
    } else {
      if (r < t0) return false;
      t1 = std::min(t1, r);
    }
  }
  const double nx0 = x0 + t0 * dx, ny0 = y0 + t0 * dy;
  const double nx1 = x0 + t1 * dx, ny1 = y0 + t1 * dy;
  x0 = nx0;
  y0 = ny0;
  x1 = nx1;
  y1 = ny1;
  return true;
}

void stamp(BevImage& img, long col, long row, int width, Rgb color) {
  const long lo = -static_cast<long>((width - 1) / 2);
  const long hi = static_cast<long>(width / 2);
  for (long dr = lo; dr <= hi; ++dr) {
    for (long dc = lo; dc <= hi; ++dc) img.paint(col + dc, row + dr, color);
  }
}

void draw_segment(BevImage& img, Point2 a, Point2 b, int width, Rgb color) {
  const Viewport& vp = img.viewport();
  double x0 = to_col(vp, img.width(), a.x), y0 = to_row(vp, img.height(), a.y);
  double x1 = to_col(vp, img.width(), b.x), y1 = to_row(vp, img.height(), b.y);
  const double pad = static_cast<double>(width) + 2.0;
  if (!clip_segment(x0, y0, x1, y1, -pad, static_cast<double>(img.width()) + pad, -pad,
                    static_cast<double>(img.height()) + pad)) {
    return;
  }
  long c0 = static_cast<long>(std::floor(x0)), r0 = static_cast<long>(std::floor(y0));
  const long c1 = static_cast<long>(std::floor(x1)), r1 = static_cast<long>(std::floor(y1));
  const long dc = std::abs(c1 - c0), dr = -std::abs(r1 - r0);
  const long sc = c0 < c1 ? 1 : -1, sr = r0 < r1 ? 1 : -1;
  long err = dc + dr;
  while (true) {
    stamp(img, c0, r0, width, color);
    if (c0 == c1 && r0 == r1) break;
    const long e2 = 2 * err;
    if (e2 >= dr) {
      err += dr;
      c0 += sc;
    }
    if (e2 <= dc) {
      err += dc;
      r0 += sr;
    }
  }
}

}  // namespace

PointCloud read_point_cloud(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() % 16 != 0) {
    throw LoadError(path.string() + ": point cloud size is not a multiple of 16 bytes");
  }
  PointCloud cloud;
  cloud.points.reserve(bytes.size() / 16);
  for (std::size_t off = 0; off < bytes.size(); off += 16) {
    float v[4];
    for (int k = 0; k < 4; ++k) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) {
        u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + 4 * k + b])) << (8 * b);
      }
      v[k] = std::bit_cast<float>(u);
    }
    cloud.points.push_back({v[0], v[1], v[2], v[3]});
  }
  return cloud;
}

void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  std::string out;
  out.reserve(cloud.points.size() * 16);
  for (const auto& p : cloud.points) {
    for (double d : {p.x, p.y, p.z, p.intensity}) {
      const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(d));
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xffU));
    }
  }
  write_file(path, out);
}

std::size_t Viewport::width() const {
  return static_cast<std::size_t>(std::llround((x_max - x_min) * pixels_per_meter));
}

std::size_t Viewport::height() const {
  return static_cast<std::size_t>(std::llround((y_max - y_min) * pixels_per_meter));
}

void Viewport::validate() const {
  if (!(x_max > x_min) || !(y_max > y_min)) throw ValidationError("viewport", "ranges must be nonempty");
  if (!(pixels_per_meter > 0.0)) throw ValidationError("viewport.pixels_per_meter", "must be > 0");
  if (width() == 0 || height() == 0) throw ValidationError("viewport", "renders to an empty image");
}

Rgb RoleColors::lane(LaneType t) const {
  switch (t) {
    case LaneType::motorway: return motorway;
    case LaneType::bicycle: return bicycle;
    case LaneType::other: return other;
  }
  return other;
}

BevImage::BevImage(std::size_t width, std::size_t height, Viewport viewport)
    : width_(width), height_(height), viewport_(viewport), pixels_(3 * width * height, 0) {}

Rgb BevImage::at(std::size_t col, std::size_t row) const {
  const std::size_t i = 3 * (row * width_ + col);
  return {pixels_[i], pixels_[i + 1], pixels_[i + 2]};
}

void BevImage::set(std::size_t col, std::size_t row, Rgb c) {
  const std::size_t i = 3 * (row * width_ + col);
  pixels_[i] = c.r;
  pixels_[i + 1] = c.g;
  pixels_[i + 2] = c.b;
}

void BevImage::paint(long col, long row, Rgb c) {
  if (col < 0 || row < 0 || col >= static_cast<long>(width_) || row >= static_cast<long>(height_)) return;
  set(static_cast<std::size_t>(col), static_cast<std::size_t>(row), c);
}

double to_col(const Viewport& vp, std::size_t width, double x) {
  return (x - vp.x_min) * static_cast<double>(width) / (vp.x_max - vp.x_min);
}

double to_row(const Viewport& vp, std::size_t height, double y) {
  return (vp.y_max - y) * static_cast<double>(height) / (vp.y_max - vp.y_min);
}

PixelPoint to_pixel(const Viewport& vp, std::size_t width, std::size_t height, Point2 p) {
  return {static_cast<long>(std::floor(to_col(vp, width, p.x))),
          static_cast<long>(std::floor(to_row(vp, height, p.y)))};
}

BevImage rasterize_points(const PointCloud& cloud, const Viewport& vp) {
  vp.validate();
  BevImage img(vp.width(), vp.height(), vp);
  for (const auto& p : cloud.points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.intensity)) continue;
    const auto px = to_pixel(vp, img.width(), img.height(), {p.x, p.y});
    if (px.col < 0 || px.row < 0 || px.col >= static_cast<long>(img.width()) ||
        px.row >= static_cast<long>(img.height())) {
      continue;
    }
    const auto level = static_cast<std::uint8_t>(std::lround(std::clamp(p.intensity, 0.0, 1.0) * 255.0));
    const auto col = static_cast<std::size_t>(px.col);
    const auto row = static_cast<std::size_t>(px.row);
    if (level > img.at(col, row).r) img.set(col, row, {level, level, level});
  }
  return img;
}

void draw_polyline(BevImage& img, const LanePolyline& line, int width, const RoleColors& colors) {
  const Rgb color = colors.lane(line.type);
  for (std::size_t i = 1; i < line.points.size(); ++i) {
    draw_segment(img, line.points[i - 1], line.points[i], width, color);
  }
}

void draw_cross_section(BevImage& img, const CrossSection& cs, int width, const RoleColors& colors) {
  for (std::size_t i = 0; i < 4; ++i) {
    draw_segment(img, cs.vertices[i], cs.vertices[(i + 1) % 4], width, colors.cross_section);
  }
}

BevImage resize_nearest(const BevImage& img, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw ShapeError("resize_nearest: target size must be positive");
  BevImage out(width, height, img.viewport());
  for (std::size_t r = 0; r < height; ++r) {
    const std::size_t sr = r * img.height() / height;
    for (std::size_t c = 0; c < width; ++c) {
      out.set(c, r, img.at(c * img.width() / width, sr));
    }
  }
  return out;
}

BevImage render_scene(const SceneRecord& scene, const PointCloud& cloud, const RenderOptions& opts) {
  BevImage img = rasterize_points(cloud, opts.viewport);
  for (const auto& lane : scene.lanes) draw_polyline(img, lane, opts.line_width, opts.colors);
  for (const auto& cs : scene.cross_sections) draw_cross_section(img, cs, opts.line_width, opts.colors);
  if (img.width() == opts.output_size && img.height() == opts.output_size) return img;
  return resize_nearest(img, opts.output_size, opts.output_size);
}

std::string encode_ppm(const BevImage& img) {
  std::string out = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels().data()), img.pixels().size());
  return out;
}

BevImage decode_ppm(std::string_view bytes) {
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
  if (token() != "P6") throw LoadError("not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw LoadError("malformed PPM header");
  }
  if (maxval != 255) throw LoadError("only 8-bit PPM supported");
  ++pos;  // single whitespace before raster
  if (bytes.size() < pos || bytes.size() - pos != 3 * w * h) throw LoadError("PPM raster size mismatch");
  Viewport vp;
  BevImage img(w, h, vp);
  for (std::size_t i = 0; i < w * h; ++i) {
    img.set(i % w, i / w,
            {static_cast<std::uint8_t>(bytes[pos + 3 * i]), static_cast<std::uint8_t>(bytes[pos + 3 * i + 1]),
             static_cast<std::uint8_t>(bytes[pos + 3 * i + 2])});
  }
  return img;
}

void write_ppm(const std::filesystem::path& path, const BevImage& img) { write_file(path, encode_ppm(img)); }

BevImage read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }

}  // namespace bllm
