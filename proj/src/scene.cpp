#include "bllm/scene.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

#include "bllm/checkpoint.hpp"
#include "bllm/error.hpp"

namespace bllm {
namespace {

using nlohmann::json;

std::pair<std::size_t, std::size_t> line_column(std::string_view text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

const json& member(const json& obj, const char* key, const std::string& field) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(field, "missing");
  return *it;
}

std::string string_field(const json& obj, const char* key, const std::string& field) {
  const json& v = member(obj, key, field);
  if (!v.is_string()) throw ValidationError(field, "must be a string");
  return v.get<std::string>();
}

Point2 point_from(const json& v, const std::string& field) {
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
    throw ValidationError(field, "each point must be [x, y]");
  }
  return {v[0].get<double>(), v[1].get<double>()};
}

bool finite(Point2 p) { return std::isfinite(p.x) && std::isfinite(p.y); }

double cross(Point2 o, Point2 a, Point2 b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

bool on_segment(Point2 p, Point2 a, Point2 b) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
         p.y <= std::max(a.y, b.y);
}

int sign(double v) { return (v > 0.0) - (v < 0.0); }

// Closed-segment intersection, touching and collinear overlap included.
bool segments_intersect(Point2 a, Point2 b, Point2 c, Point2 d) {
  const int d1 = sign(cross(c, d, a));
  const int d2 = sign(cross(c, d, b));
  const int d3 = sign(cross(a, b, c));
  const int d4 = sign(cross(a, b, d));
  if (d1 * d2 < 0 && d3 * d4 < 0) return true;
  if (d1 == 0 && on_segment(a, c, d)) return true;
  if (d2 == 0 && on_segment(b, c, d)) return true;
  if (d3 == 0 && on_segment(c, a, b)) return true;
  if (d4 == 0 && on_segment(d, a, b)) return true;
  return false;
}

json point_json(Point2 p) { return json::array({p.x, p.y}); }

}  // namespace

std::string_view to_string(LaneType t) {
  switch (t) {
    case LaneType::motorway: return "motorway";
    case LaneType::bicycle: return "bicycle";
    case LaneType::other: return "other";
  }
  return "other";
}

std::string_view to_string(CrossSectionKind k) {
  return k == CrossSectionKind::intersection ? "intersection" : "lane_change_zone";
}

std::string_view to_string(DataQuality q) { return q == DataQuality::good ? "good" : "degraded"; }

std::string_view to_string(Visibility v) {
  switch (v) {
    case Visibility::fully_visible: return "fully_visible";
    case Visibility::partially_visible: return "partially_visible";
    case Visibility::invisible: return "invisible";
  }
  return "fully_visible";
}

LaneType lane_type_from(std::string_view name) {
  if (name == "motorway") return LaneType::motorway;
  if (name == "bicycle") return LaneType::bicycle;
  return LaneType::other;
}

bool is_simple_quad(const std::array<Point2, 4>& v) {
  double area2 = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const Point2 a = v[i];
    const Point2 b = v[(i + 1) % 4];
    if (a == b) return false;
    area2 += a.x * b.y - b.x * a.y;
  }
  if (std::abs(area2) <= 1e-12) return false;
  // Only the two pairs of opposite edges can cross in a quadrilateral.
  if (segments_intersect(v[0], v[1], v[2], v[3])) return false;
  if (segments_intersect(v[1], v[2], v[3], v[0])) return false;
  return true;
}

void validate_scene(const SceneRecord& s) {
  if (s.frame_id.empty()) throw ValidationError("frame_id", "must be nonempty");
  for (const auto& lane : s.lanes) {
    if (lane.points.size() < 2) throw ValidationError("lane.points", "a lane needs at least 2 points");
    for (std::size_t i = 0; i < lane.points.size(); ++i) {
      if (!finite(lane.points[i])) throw ValidationError("lane.points", "coordinates must be finite");
      if (i > 0 && lane.points[i] == lane.points[i - 1]) {
        throw ValidationError("lane.points", "consecutive points must be distinct");
      }
    }
  }
  for (const auto& cs : s.cross_sections) {
    for (Point2 p : cs.vertices) {
      if (!finite(p)) throw ValidationError("cross_section.vertices", "coordinates must be finite");
    }
    if (!is_simple_quad(cs.vertices)) {
      throw ValidationError("cross_section.vertices", "quad is degenerate or self-intersecting");
    }
  }
  if (s.visibility) {
    const bool needs_reason = s.visibility->state != Visibility::fully_visible;
    if (needs_reason && s.visibility->reason.empty()) {
      throw ValidationError("visibility.reason", "required unless lanes are fully visible");
    }
    if (!needs_reason && !s.visibility->reason.empty()) {
      throw ValidationError("visibility.reason", "must be absent when lanes are fully visible");
    }
  }
}

SceneRecord parse_scene(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    auto [line, col] = line_column(text, e.byte);
    throw ParseError("malformed scene record", line, col);
  }
  if (!doc.is_object()) throw ValidationError("scene", "record must be a JSON object");

  SceneRecord s;
  s.frame_id = string_field(doc, "frame_id", "frame_id");
  s.scene_type = string_field(doc, "scene_type", "scene_type");
  const std::string quality = string_field(doc, "data_quality", "data_quality");
  if (quality == "good") {
    s.data_quality = DataQuality::good;
  } else if (quality == "degraded") {
    s.data_quality = DataQuality::degraded;
  } else {
    throw ValidationError("data_quality", "must be 'good' or 'degraded', got '" + quality + "'");
  }

  const json& lanes = member(doc, "lanes", "lanes");
  if (!lanes.is_array()) throw ValidationError("lanes", "must be an array");
  for (const json& l : lanes) {
    if (!l.is_object()) throw ValidationError("lane", "must be an object");
    LanePolyline lane;
    lane.type = lane_type_from(string_field(l, "type", "lane.type"));
    const json& pts = member(l, "points", "lane.points");
    if (!pts.is_array()) throw ValidationError("lane.points", "must be an array");
    for (const json& p : pts) lane.points.push_back(point_from(p, "lane.points"));
    s.lanes.push_back(std::move(lane));
  }

  const json& sections = member(doc, "cross_sections", "cross_sections");
  if (!sections.is_array()) throw ValidationError("cross_sections", "must be an array");
  for (const json& c : sections) {
    if (!c.is_object()) throw ValidationError("cross_section", "must be an object");
    CrossSection cs;
    const std::string kind = string_field(c, "kind", "cross_section.kind");
    if (kind == "intersection") {
      cs.kind = CrossSectionKind::intersection;
    } else if (kind == "lane_change_zone") {
      cs.kind = CrossSectionKind::lane_change_zone;
    } else {
      throw ValidationError("cross_section.kind", "unknown kind '" + kind + "'");
    }
    const json& verts = member(c, "vertices", "cross_section.vertices");
    if (!verts.is_array() || verts.size() != 4) {
      throw ValidationError("cross_section.vertices", "exactly 4 vertices required");
    }
    for (std::size_t i = 0; i < 4; ++i) cs.vertices[i] = point_from(verts[i], "cross_section.vertices");
    s.cross_sections.push_back(cs);
  }

  if (auto it = doc.find("point_cloud"); it != doc.end() && !it->is_null()) {
    if (!it->is_string()) throw ValidationError("point_cloud", "must be a string path");
    s.point_cloud = it->get<std::string>();
  }
  if (auto it = doc.find("visibility"); it != doc.end() && !it->is_null()) {
    if (!it->is_object()) throw ValidationError("visibility", "must be an object");
    VisibilityInfo info;
    const std::string state = string_field(*it, "state", "visibility.state");
    if (state == "fully_visible") {
      info.state = Visibility::fully_visible;
    } else if (state == "partially_visible") {
      info.state = Visibility::partially_visible;
    } else if (state == "invisible") {
      info.state = Visibility::invisible;
    } else {
      throw ValidationError("visibility.state", "unknown state '" + state + "'");
    }
    if (auto r = it->find("reason"); r != it->end() && !r->is_null()) {
      if (!r->is_string()) throw ValidationError("visibility.reason", "must be a string");
      info.reason = r->get<std::string>();
    }
    s.visibility = std::move(info);
  }

  validate_scene(s);
  return s;
}

std::string serialize_scene(const SceneRecord& s) {
  json doc;
  doc["frame_id"] = s.frame_id;
  doc["scene_type"] = s.scene_type;
  doc["data_quality"] = std::string(to_string(s.data_quality));
  doc["lanes"] = json::array();
  for (const auto& lane : s.lanes) {
    json pts = json::array();
    for (Point2 p : lane.points) pts.push_back(point_json(p));
    doc["lanes"].push_back({{"type", std::string(to_string(lane.type))}, {"points", pts}});
  }
  doc["cross_sections"] = json::array();
  for (const auto& cs : s.cross_sections) {
    json verts = json::array();
    for (Point2 p : cs.vertices) verts.push_back(point_json(p));
    doc["cross_sections"].push_back({{"kind", std::string(to_string(cs.kind))}, {"vertices", verts}});
  }
  if (s.point_cloud) doc["point_cloud"] = *s.point_cloud;
  if (s.visibility) {
    json vis = {{"state", std::string(to_string(s.visibility->state))}};
    if (!s.visibility->reason.empty()) vis["reason"] = s.visibility->reason;
    doc["visibility"] = vis;
  }
  return doc.dump(2) + "\n";
}

LaneCensus lane_census(const SceneRecord& s) {
  LaneCensus c;
  for (const auto& lane : s.lanes) {
    switch (lane.type) {
      case LaneType::motorway: ++c.motorway; break;
      case LaneType::bicycle: ++c.bicycle; break;
      case LaneType::other: ++c.other; break;
    }
  }
  c.total = c.motorway + c.bicycle + c.other;
  return c;
}

CrossSectionPresence has_cross_section(const SceneRecord& s) {
  CrossSectionPresence p;
  p.present = !s.cross_sections.empty();
  for (auto kind : {CrossSectionKind::intersection, CrossSectionKind::lane_change_zone}) {
    if (std::any_of(s.cross_sections.begin(), s.cross_sections.end(),
                    [kind](const CrossSection& c) { return c.kind == kind; })) {
      p.kinds.push_back(kind);
    }
  }
  return p;
}

Corpus load_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw LoadError("scene directory not found: " + dir.string());
  const auto manifest_path = dir / "manifest.json";
  const std::string text = read_file(manifest_path);
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    auto [line, col] = line_column(text, e.byte);
    throw ParseError("malformed manifest " + manifest_path.string(), line, col);
  }
  Corpus corpus;
  corpus.root = dir;
  std::set<std::string> seen;
  auto load_split = [&](const char* key, std::vector<SceneRecord>& out) {
    auto it = manifest.find(key);
    if (it == manifest.end()) return;
    if (!it->is_array()) throw ValidationError(std::string("manifest.") + key, "must be an array");
    for (const json& id : *it) {
      if (!id.is_string()) throw ValidationError(std::string("manifest.") + key, "frame ids must be strings");
      const auto path = dir / (id.get<std::string>() + ".json");
      SceneRecord s;
      try {
        s = parse_scene(read_file(path));
      } catch (const ParseError& e) {
        throw ParseError(path.string() + ": malformed scene record", e.line(), e.column());
      } catch (const ValidationError& e) {
        throw ValidationError(e.field(), path.string() + ": " + e.what());
      }
      if (!seen.insert(s.frame_id).second) {
        throw ValidationError("frame_id", "duplicate frame id '" + s.frame_id + "' in corpus");
      }
      out.push_back(std::move(s));
    }
  };
  load_split("train", corpus.train);
  load_split("test", corpus.test);
  return corpus;
}

void write_corpus(const std::filesystem::path& dir, const std::vector<SceneRecord>& train,
                  const std::vector<SceneRecord>& test) {
  std::filesystem::create_directories(dir);
  json manifest = {{"version", 1}, {"train", json::array()}, {"test", json::array()}};
  for (const auto& s : train) {
    write_file(dir / (s.frame_id + ".json"), serialize_scene(s));
    manifest["train"].push_back(s.frame_id);
  }
  for (const auto& s : test) {
    write_file(dir / (s.frame_id + ".json"), serialize_scene(s));
    manifest["test"].push_back(s.frame_id);
  }
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace bllm
