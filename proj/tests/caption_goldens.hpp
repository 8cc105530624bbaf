#pragma once

#include <string>
#include <vector>

#include "bllm/caption.hpp"
#include "bllm/scene.hpp"

namespace golden {

struct Case {
  std::string name;
  bllm::SceneRecord scene;
  bool visibility = false;
  bool fix_grammar = false;
  std::string expected;
};

inline bllm::SceneRecord scene(std::string type, bllm::DataQuality q = bllm::DataQuality::good) {
  bllm::SceneRecord s;
  s.frame_id = "golden";
  s.scene_type = std::move(type);
  s.data_quality = q;
  return s;
}

inline bllm::LanePolyline lane(bllm::LaneType t, bllm::Point2 a, bllm::Point2 b) { return {t, {a, b}}; }

inline bllm::CrossSection quad(bllm::CrossSectionKind k, double x0, double y0, double x1, double y1) {
  bllm::CrossSection cs;
  cs.kind = k;
  cs.vertices = {bllm::Point2{x0, y0}, bllm::Point2{x1, y0}, bllm::Point2{x1, y1}, bllm::Point2{x0, y1}};
  return cs;
}

inline bllm::SceneRecord with_visibility(bllm::Visibility v, std::string reason) {
  bllm::SceneRecord s = scene("urban road");
  s.visibility = bllm::VisibilityInfo{v, std::move(reason)};
  return s;
}

inline std::vector<Case> cases() {
  using bllm::CrossSectionKind;
  using bllm::DataQuality;
  using bllm::LaneType;
  using bllm::Visibility;
  std::vector<Case> out;

  {
    auto s = scene("urban road");
    s.lanes = {lane(LaneType::motorway, {0, 0}, {0, 80})};
    out.push_back({"single motorway lane", s, false, false,
                   "The scene contains a urban road with good data quality. It includes 1 lanes, specifically a "
                   "motorway lane extending from (0.0, 0.0) to (0.0, 80.0)."});
    out.push_back({"single lane with grammar fix", s, false, true,
                   "The scene contains a urban road with good data quality. It includes 1 lane, specifically a "
                   "motorway lane extending from (0.0, 0.0) to (0.0, 80.0)."});
  }
  out.push_back({"no lanes", scene("highway", DataQuality::degraded), false, false,
                 "The scene contains a highway with degraded data quality. It includes 0 lanes."});
  {
    auto s = scene("suburban street");
    s.lanes = {lane(LaneType::motorway, {-1.75, 0}, {-1.75, 100}), lane(LaneType::bicycle, {3.5, 0}, {3.5, 100})};
    out.push_back({"two lanes", s, false, false,
                   "The scene contains a suburban street with good data quality. It includes 2 lanes, specifically a "
                   "motorway lane extending from (-1.8, 0.0) to (-1.8, 100.0), and a bicycle lane spanning from "
                   "(3.5, 0.0) to (3.5, 100.0)."});
  }
  {
    auto s = scene("rural road", DataQuality::degraded);
    s.lanes = {lane(LaneType::motorway, {-3.5, 2}, {-4.25, 95.5}), lane(LaneType::motorway, {0, 2}, {0.5, 95.5}),
               lane(LaneType::other, {3.5, 2}, {4.0, 95.5})};
    out.push_back({"three lanes with other type", s, false, false,
                   "The scene contains a rural road with degraded data quality. It includes 3 lanes, specifically a "
                   "motorway lane extending from (-3.5, 2.0) to (-4.3, 95.5), a motorway lane spanning from (0.0, "
                   "2.0) to (0.5, 95.5), and a other lane spanning from (3.5, 2.0) to (4.0, 95.5)."});
  }
  {
    auto s = scene("urban road");
    s.lanes = {lane(LaneType::motorway, {0, 0}, {0, 80})};
    s.cross_sections = {quad(CrossSectionKind::intersection, -10, 40, 10, 60)};
    out.push_back({"intersection", s, false, false,
                   "The scene contains a urban road with good data quality. It includes 1 lanes, specifically a "
                   "motorway lane extending from (0.0, 0.0) to (0.0, 80.0). Additionally, a intersection is present "
                   "at the intersection, defined by vertices (-10.0, 40.0), (10.0, 40.0), (10.0, 60.0), and (-10.0, "
                   "60.0)."});
  }
  {
    auto s = scene("highway");
    s.lanes = {lane(LaneType::motorway, {-1.8, 0}, {-1.8, 100}), lane(LaneType::motorway, {1.8, 0}, {1.8, 100})};
    s.cross_sections = {quad(CrossSectionKind::lane_change_zone, -4, 20.5, 4, 35.25)};
    out.push_back({"lane change zone", s, false, false,
                   "The scene contains a highway with good data quality. It includes 2 lanes, specifically a "
                   "motorway lane extending from (-1.8, 0.0) to (-1.8, 100.0), and a motorway lane spanning from "
                   "(1.8, 0.0) to (1.8, 100.0). Additionally, a lane change zone is present at the intersection, "
                   "defined by vertices (-4.0, 20.5), (4.0, 20.5), (4.0, 35.3), and (-4.0, 35.3)."});
  }
  {
    auto s = scene("night urban road");
    s.cross_sections = {quad(CrossSectionKind::intersection, -6, 10, 6, 20),
                        quad(CrossSectionKind::lane_change_zone, -6, 50, 6, 70)};
    out.push_back({"two cross-sections without lanes", s, false, false,
                   "The scene contains a night urban road with good data quality. It includes 0 lanes. "
                   "Additionally, a intersection is present at the intersection, defined by vertices (-6.0, 10.0), "
                   "(6.0, 10.0), (6.0, 20.0), and (-6.0, 20.0). Additionally, a lane change zone is present at the "
                   "intersection, defined by vertices (-6.0, 50.0), (6.0, 50.0), (6.0, 70.0), and (-6.0, 70.0)."});
  }
  {
    auto s = scene("parking lot");
    s.lanes = {lane(LaneType::bicycle, {-0.04, 0.04}, {-0.06, 12.34})};
    out.push_back({"negative zero is printed as zero", s, false, false,
                   "The scene contains a parking lot with good data quality. It includes 1 lanes, specifically a "
                   "bicycle lane extending from (0.0, 0.0) to (-0.1, 12.3)."});
  }
  {
    auto s = scene("urban road");
    s.lanes = {lane(LaneType::bicycle, {-2, 0}, {-2, 50}), lane(LaneType::motorway, {2, 0}, {2, 50})};
    out.push_back({"two lanes with grammar fix keeps plural", s, false, true,
                   "The scene contains a urban road with good data quality. It includes 2 lanes, specifically a "
                   "bicycle lane extending from (-2.0, 0.0) to (-2.0, 50.0), and a motorway lane spanning from (2.0, "
                   "0.0) to (2.0, 50.0)."});
  }

  out.push_back({"fully visible", with_visibility(Visibility::fully_visible, ""), true, false,
                 "Lane lines are fully visible."});
  out.push_back({"invisible in heavy rainfall", with_visibility(Visibility::invisible, "heavy rainfall"), true, false,
                 "Lane lines are invisible due to heavy rainfall."});
  out.push_back({"partially visible from degradation", with_visibility(Visibility::partially_visible, "lane degradation"),
                 true, false, "Lane lines are partially visible due to lane degradation."});
  out.push_back({"invisible from degradation", with_visibility(Visibility::invisible, "lane degradation"), true, false,
                 "Lane lines are invisible due to lane degradation."});
  out.push_back({"invisible in snow", with_visibility(Visibility::invisible, "snow cover"), true, false,
                 "Lane lines are invisible due to snow cover."});
  out.push_back({"invisible from sensor noise", with_visibility(Visibility::invisible, "sensor noise"), true, false,
                 "Lane lines are invisible due to sensor noise."});
  out.push_back({"invisible at night glare", with_visibility(Visibility::invisible, "oncoming headlight glare"), true,
                 false, "Lane lines are invisible due to oncoming headlight glare."});
  out.push_back({"partially visible from debris", with_visibility(Visibility::partially_visible, "road debris"), true,
                 false, "Lane lines are partially visible due to road debris."});
  out.push_back({"partially visible from parked cars",
                 with_visibility(Visibility::partially_visible, "occlusion by parked vehicles"), true, false,
                 "Lane lines are partially visible due to occlusion by parked vehicles."});
  out.push_back({"partially visible in fog", with_visibility(Visibility::partially_visible, "fog"), true, false,
                 "Lane lines are partially visible due to fog."});
  return out;
}

inline std::string render(const Case& c) {
  return c.visibility ? bllm::render_visibility_caption(c.scene)
                      : bllm::render_map_caption(c.scene, bllm::CaptionOptions{c.fix_grammar});
}

}  // namespace golden
