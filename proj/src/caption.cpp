#include "bllm/caption.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "bllm/checkpoint.hpp"
#include "bllm/error.hpp"

namespace bllm {
namespace {

using nlohmann::json;

constexpr std::array<Prompt, 5> kPrompts{{
    {PromptKind::describe, "Describe the lanes and road elements in detail"},
    {PromptKind::LAN, "How many lanes are there?"},
    {PromptKind::INT, "Is there any cross-sections or intersections?"},
    {PromptKind::visibility, "Are the lane lines visible?"},
    {PromptKind::visibility_reason, "If not, what is the reason?"},
}};

std::string_view kind_phrase(CrossSectionKind k) {
  return k == CrossSectionKind::intersection ? "intersection" : "lane change zone";
}

std::string_view visibility_phrase(Visibility v) {
  switch (v) {
    case Visibility::fully_visible: return "fully visible";
    case Visibility::partially_visible: return "partially visible";
    case Visibility::invisible: return "invisible";
  }
  return "fully visible";
}

bool contains(std::string_view haystack, std::string_view needle) {
  std::string lower(haystack);
  for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return lower.find(needle) != std::string::npos;
}

}  // namespace

std::string_view to_string(QaCategory c) {
  switch (c) {
    case QaCategory::LAN: return "LAN";
    case QaCategory::INT: return "INT";
    case QaCategory::QLT: return "QLT";
    case QaCategory::SCN: return "SCN";
    case QaCategory::VIS: return "VIS";
    case QaCategory::VIS_REASON: return "VIS_REASON";
  }
  return "LAN";
}

QaCategory qa_category_from(std::string_view name) {
  for (auto c : {QaCategory::LAN, QaCategory::INT, QaCategory::QLT, QaCategory::SCN, QaCategory::VIS,
                 QaCategory::VIS_REASON}) {
    if (to_string(c) == name) return c;
  }
  throw ValidationError("category", "unknown QA category '" + std::string(name) + "'");
}

bool is_map_category(QaCategory c) {
  return c == QaCategory::LAN || c == QaCategory::INT || c == QaCategory::QLT || c == QaCategory::SCN;
}

std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::day_visible: return "day_visible";
    case Condition::night_visible: return "night_visible";
    case Condition::partial: return "partial";
    case Condition::rain_invisible: return "rain_invisible";
    case Condition::degraded_invisible: return "degraded_invisible";
  }
  return "day_visible";
}

Condition condition_from(std::string_view name) {
  for (auto c : {Condition::day_visible, Condition::night_visible, Condition::partial,
                 Condition::rain_invisible, Condition::degraded_invisible}) {
    if (to_string(c) == name) return c;
  }
  throw ValidationError("condition", "unknown condition '" + std::string(name) + "'");
}

bool uses_reasoning(Condition c) {
  return c == Condition::rain_invisible || c == Condition::degraded_invisible;
}

Condition condition_of(const SceneRecord& s) {
  if (!s.visibility) throw ContractError("frame " + s.frame_id + " has no visibility field");
  switch (s.visibility->state) {
    case Visibility::fully_visible:
      return contains(s.scene_type, "night") ? Condition::night_visible : Condition::day_visible;
    case Visibility::partially_visible:
      return Condition::partial;
    case Visibility::invisible:
      return contains(s.visibility->reason, "rain") ? Condition::rain_invisible
                                                    : Condition::degraded_invisible;
  }
  return Condition::day_visible;
}

std::span<const Prompt> prompt_set() { return kPrompts; }

std::string_view question_for(QaCategory c) {
  switch (c) {
    case QaCategory::LAN: return kPrompts[1].text;
    case QaCategory::INT: return kPrompts[2].text;
    case QaCategory::QLT: return "What is the point cloud data quality?";
    case QaCategory::SCN: return "What type of scene is this?";
    case QaCategory::VIS: return kPrompts[3].text;
    case QaCategory::VIS_REASON: return kPrompts[4].text;
  }
  return kPrompts[1].text;
}

std::string format_coordinate(Point2 p) {
  auto one = [](double v) {
    double r = std::round(v * 10.0) / 10.0;
    if (r == 0.0) r = 0.0;  // no "-0.0"
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", r);
    return std::string(buf);
  };
  return "(" + one(p.x) + ", " + one(p.y) + ")";
}

std::string render_map_caption(const SceneRecord& s, const CaptionOptions& opts) {
  std::ostringstream out;
  const std::size_t total = lane_census(s).total;
  out << "The scene contains a " << s.scene_type << " with " << to_string(s.data_quality)
      << " data quality. It includes " << total
      << ((opts.fix_grammar && total == 1) ? " lane" : " lanes");
  if (!s.lanes.empty()) {
    out << ", specifically ";
    for (std::size_t i = 0; i < s.lanes.size(); ++i) {
      const auto& lane = s.lanes[i];
      if (i > 0) out << (i + 1 == s.lanes.size() ? ", and " : ", ");
      out << "a " << to_string(lane.type) << " lane " << (i == 0 ? "extending" : "spanning")
          << " from " << format_coordinate(lane.points.front()) << " to "
          << format_coordinate(lane.points.back());
    }
  }
  out << ".";
  for (const auto& cs : s.cross_sections) {
    out << " Additionally, a " << kind_phrase(cs.kind)
        << " is present at the intersection, defined by vertices " << format_coordinate(cs.vertices[0])
        << ", " << format_coordinate(cs.vertices[1]) << ", " << format_coordinate(cs.vertices[2])
        << ", and " << format_coordinate(cs.vertices[3]) << ".";
  }
  return out.str();
}

std::string render_visibility_caption(const SceneRecord& s) {
  if (!s.visibility) throw ContractError("frame " + s.frame_id + " has no visibility field");
  if (s.visibility->state == Visibility::fully_visible) return "Lane lines are fully visible.";
  return "Lane lines are " + std::string(visibility_phrase(s.visibility->state)) + " due to " +
         s.visibility->reason + ".";
}

std::string gold_answer(const SceneRecord& s, QaCategory c) {
  switch (c) {
    case QaCategory::LAN:
      return std::to_string(lane_census(s).total);
    case QaCategory::INT: {
      const auto presence = has_cross_section(s);
      if (!presence.present) return "no";
      std::string out = "yes, ";
      for (std::size_t i = 0; i < presence.kinds.size(); ++i) {
        if (i > 0) out += " and ";
        out += kind_phrase(presence.kinds[i]);
      }
      return out;
    }
    case QaCategory::QLT:
      return std::string(to_string(s.data_quality));
    case QaCategory::SCN:
      return s.scene_type;
    case QaCategory::VIS:
      if (!s.visibility) throw ContractError("frame " + s.frame_id + " has no visibility field");
      return std::string(visibility_phrase(s.visibility->state));
    case QaCategory::VIS_REASON:
      if (!s.visibility || s.visibility->reason.empty()) {
        throw ContractError("frame " + s.frame_id + " has no visibility reason");
      }
      return s.visibility->reason;
  }
  return {};
}

std::vector<QASample> build_qa_corpus(std::span<const SceneRecord> scenes, QaStage stage,
                                      const CaptionOptions& opts) {
  std::vector<QASample> out;
  for (const auto& s : scenes) {
    if (stage != QaStage::visibility) {
      const std::string caption = render_map_caption(s, opts);
      for (auto c : {QaCategory::LAN, QaCategory::INT, QaCategory::QLT, QaCategory::SCN}) {
        out.push_back({s.frame_id, c, std::string(question_for(c)), caption, gold_answer(s, c), std::nullopt});
      }
    }
    if (stage != QaStage::map && s.visibility) {
      const Condition cond = condition_of(s);
      out.push_back({s.frame_id, QaCategory::VIS, std::string(question_for(QaCategory::VIS)), "",
                     gold_answer(s, QaCategory::VIS), cond});
      if (s.visibility->state != Visibility::fully_visible) {
        out.push_back({s.frame_id, QaCategory::VIS_REASON, std::string(question_for(QaCategory::VIS_REASON)),
                       "", gold_answer(s, QaCategory::VIS_REASON), cond});
      }
    }
  }
  return out;
}

std::string qa_to_jsonl(std::span<const QASample> samples) {
  std::string out;
  for (const auto& q : samples) {
    json j = {{"frame_id", q.frame_id},
              {"category", std::string(to_string(q.category))},
              {"question", q.question},
              {"annotation", q.annotation},
              {"gold", q.gold}};
    if (q.condition) j["condition"] = std::string(to_string(*q.condition));
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<QASample> qa_from_jsonl(std::string_view text) {
  std::vector<QASample> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("malformed QA record", line_no, e.byte);
    }
    try {
      QASample q;
      q.frame_id = j.at("frame_id").get<std::string>();
      q.category = qa_category_from(j.at("category").get<std::string>());
      q.question = j.at("question").get<std::string>();
      q.annotation = j.value("annotation", std::string());
      q.gold = j.at("gold").get<std::string>();
      if (j.contains("condition") && !j["condition"].is_null()) {
        q.condition = condition_from(j["condition"].get<std::string>());
      }
      if (q.gold.empty()) throw ValidationError("gold", "gold answer must be nonempty");
      out.push_back(std::move(q));
    } catch (const json::exception& e) {
      throw ValidationError("qa", "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_qa(const std::filesystem::path& path, std::span<const QASample> samples) {
  write_file(path, qa_to_jsonl(samples));
}

std::vector<QASample> read_qa(const std::filesystem::path& path) { return qa_from_jsonl(read_file(path)); }

}  // namespace bllm
