#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace bllm {

// Scene-local metric coordinates: x right, y forward, meters.
struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

enum class LaneType { motorway, bicycle, other };
enum class CrossSectionKind { intersection, lane_change_zone };
enum class DataQuality { good, degraded };
enum class Visibility { fully_visible, partially_visible, invisible };

struct LanePolyline {
  LaneType type = LaneType::other;
  std::vector<Point2> points;

  friend bool operator==(const LanePolyline&, const LanePolyline&) = default;
};

struct CrossSection {
  CrossSectionKind kind = CrossSectionKind::intersection;
  std::array<Point2, 4> vertices{};

  friend bool operator==(const CrossSection&, const CrossSection&) = default;
};

struct VisibilityInfo {
  Visibility state = Visibility::fully_visible;
  std::string reason;  // empty iff fully visible

  friend bool operator==(const VisibilityInfo&, const VisibilityInfo&) = default;
};

struct SceneRecord {
  std::string frame_id;
  std::string scene_type;
  DataQuality data_quality = DataQuality::good;
  std::vector<LanePolyline> lanes;
  std::vector<CrossSection> cross_sections;
  std::optional<std::string> point_cloud;
  std::optional<VisibilityInfo> visibility;

  friend bool operator==(const SceneRecord&, const SceneRecord&) = default;
};

std::string_view to_string(LaneType t);
std::string_view to_string(CrossSectionKind k);
std::string_view to_string(DataQuality q);
std::string_view to_string(Visibility v);

// Unknown lane type names collapse to LaneType::other.
LaneType lane_type_from(std::string_view name);

// Throws ParseError (with line/column) on malformed JSON and ValidationError
// (naming the field) when a record invariant is violated.
SceneRecord parse_scene(std::string_view text);
std::string serialize_scene(const SceneRecord& scene);
void validate_scene(const SceneRecord& scene);

// True iff the four-vertex outline is non-degenerate and non-self-intersecting.
bool is_simple_quad(const std::array<Point2, 4>& v);

struct LaneCensus {
  std::size_t motorway = 0;
  std::size_t bicycle = 0;
  std::size_t other = 0;
  std::size_t total = 0;
};

LaneCensus lane_census(const SceneRecord& scene);

struct CrossSectionPresence {
  bool present = false;
  std::vector<CrossSectionKind> kinds;  // distinct, in enum order
};

CrossSectionPresence has_cross_section(const SceneRecord& scene);

// A directory of <frame_id>.json records plus manifest.json:
//   {"version": 1, "train": [frame ids...], "test": [frame ids...]}
struct Corpus {
  std::filesystem::path root;
  std::vector<SceneRecord> train;
  std::vector<SceneRecord> test;
};

Corpus load_corpus(const std::filesystem::path& dir);
void write_corpus(const std::filesystem::path& dir, const std::vector<SceneRecord>& train,
                  const std::vector<SceneRecord>& test);

}  // namespace bllm
