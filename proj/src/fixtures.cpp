#include "bllm/fixtures.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <string>

#include "bllm/rng.hpp"

namespace bllm {
namespace {

constexpr std::array<const char*, 4> kDayScenes = {"urban road", "highway", "suburban street", "rural road"};
constexpr std::array<const char*, 2> kNightScenes = {"night urban road", "night highway"};
constexpr std::array<const char*, 2> kPartialReasons = {"worn paint", "road debris"};
constexpr std::array<const char*, 2> kRainReasons = {"heavy rain", "rain glare"};
constexpr std::array<const char*, 2> kDegradedReasons = {"sensor noise", "snow cover"};

double tenth(double v) { return std::round(v * 10.0) / 10.0; }

std::string frame_name(std::uint64_t seed, std::size_t index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "frame_%03llu_%05zu", static_cast<unsigned long long>(seed % 1000), index);
  return buf;
}

}  // namespace

SceneRecord synthetic_scene(std::uint64_t seed, std::size_t index) {
  Rng rng = Rng(seed).derive("scene").derive(index);
  SceneRecord s;
  s.frame_id = frame_name(seed, index);

  const std::size_t condition = index % 5;
  const bool night = condition == 1;
  s.scene_type = night ? kNightScenes[rng.below(kNightScenes.size())] : kDayScenes[rng.below(kDayScenes.size())];
  s.data_quality = condition == 4 || rng.uniform() < 0.2 ? DataQuality::degraded : DataQuality::good;

  VisibilityInfo vis;
  switch (condition) {
    case 0:
    case 1:
      vis.state = Visibility::fully_visible;
      break;
    case 2:
      vis.state = Visibility::partially_visible;
      vis.reason = kPartialReasons[rng.below(kPartialReasons.size())];
      break;
    case 3:
      vis.state = Visibility::invisible;
      vis.reason = kRainReasons[rng.below(kRainReasons.size())];
      break;
    default:
      vis.state = Visibility::invisible;
      vis.reason = kDegradedReasons[rng.below(kDegradedReasons.size())];
      break;
  }
  s.visibility = vis;

  const std::size_t motorway = 1 + rng.below(3);
  const bool bicycle = rng.uniform() < 0.3;
  const double spacing = 3.5;
  const double left = -spacing * static_cast<double>(motorway) / 2.0 + rng.uniform(-1.0, 1.0);
  const double bend = rng.uniform(-4.0, 4.0);
  const double y0 = tenth(rng.uniform(0.0, 10.0));
  const double y1 = tenth(rng.uniform(80.0, 100.0));
  auto lane_at = [&](LaneType type, double x) {
    LanePolyline lane;
    lane.type = type;
    for (double y : {y0, (y0 + y1) / 2.0, y1}) {
      const double t = (y - y0) / (y1 - y0);
      lane.points.push_back({tenth(x + bend * t * t), tenth(y)});
    }
    return lane;
  };
  for (std::size_t k = 0; k < motorway; ++k) {
    s.lanes.push_back(lane_at(LaneType::motorway, left + spacing * static_cast<double>(k)));
  }
  if (bicycle) s.lanes.push_back(lane_at(LaneType::bicycle, left + spacing * static_cast<double>(motorway) + 1.0));

  const double roll = rng.uniform();
  if (roll < 0.5) {
    CrossSection cs;
    cs.kind = roll < 0.35 ? CrossSectionKind::intersection : CrossSectionKind::lane_change_zone;
    const double cy = tenth(rng.uniform(40.0, 70.0));
    const double half = tenth(rng.uniform(4.0, 8.0));
    const double xl = tenth(left - 2.0);
    const double xr = tenth(left + spacing * static_cast<double>(motorway) + 2.0);
    cs.vertices = {Point2{xl, cy - half}, Point2{xr, cy - half}, Point2{xr, cy + half}, Point2{xl, cy + half}};
    s.cross_sections.push_back(cs);
  }
  s.point_cloud = "clouds/" + s.frame_id + ".bin";
  return s;
}

PointCloud synthetic_point_cloud(const SceneRecord& scene, std::uint64_t seed) {
  Rng rng = Rng(seed).derive("cloud").derive(scene.frame_id);
  PointCloud cloud;
  const bool degraded = scene.data_quality == DataQuality::degraded;
  const std::size_t ground = degraded ? 1500 : 3000;
  for (std::size_t i = 0; i < ground; ++i) {
    cloud.points.push_back({rng.uniform(-25.0, 25.0), rng.uniform(0.0, 100.0), 0.0, rng.uniform(0.05, 0.3)});
  }

  double keep = 1.0;
  double intensity = 0.9;
  if (scene.visibility) {
    if (scene.visibility->state == Visibility::partially_visible) keep = 0.45;
    if (scene.visibility->state == Visibility::invisible) {
      keep = 0.1;
      intensity = 0.35;
    }
  }
  for (const auto& lane : scene.lanes) {
    for (std::size_t k = 0; k + 1 < lane.points.size(); ++k) {
      const Point2 a = lane.points[k];
      const Point2 b = lane.points[k + 1];
      const double len = std::hypot(b.x - a.x, b.y - a.y);
      const auto samples = static_cast<std::size_t>(len / 0.25);
      for (std::size_t j = 0; j < samples; ++j) {
        if (rng.uniform() >= keep) continue;
        const double t = static_cast<double>(j) / static_cast<double>(samples);
        const double jitter = degraded ? 0.15 : 0.03;
        cloud.points.push_back({a.x + t * (b.x - a.x) + rng.normal(0.0, jitter), a.y + t * (b.y - a.y), 0.0,
                                std::min(1.0, intensity + rng.uniform(0.0, 0.1))});
      }
    }
  }
  return cloud;
}

FixtureSet synthetic_fixtures(const FixtureOptions& opts) {
  FixtureSet set;
  for (std::size_t i = 0; i < opts.train; ++i) set.train.push_back(synthetic_scene(opts.seed, i));
  for (std::size_t i = 0; i < opts.test; ++i) set.test.push_back(synthetic_scene(opts.seed, opts.train + i));
  return set;
}

FixtureSet write_fixtures(const std::filesystem::path& dir, const FixtureOptions& opts) {
  FixtureSet set = synthetic_fixtures(opts);
  write_corpus(dir, set.train, set.test);
  for (const auto* part : {&set.train, &set.test}) {
    for (const auto& s : *part) write_point_cloud(dir / *s.point_cloud, synthetic_point_cloud(s, opts.seed));
  }
  return set;
}

PointCloud load_scene_cloud(const std::filesystem::path& root, const SceneRecord& scene) {
  if (!scene.point_cloud) return {};
  return read_point_cloud(root / *scene.point_cloud);
}

}  // namespace bllm
