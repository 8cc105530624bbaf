#include "bllm/qa_eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <set>
#include <sstream>

#include "bllm/error.hpp"
#include "bllm/trainer.hpp"

namespace bllm {
namespace {

using nlohmann::json;

constexpr std::array<QaCategory, 4> kMapCategories = {QaCategory::LAN, QaCategory::INT, QaCategory::QLT,
                                                      QaCategory::SCN};

bool is_terminal_punct(char c) { return c == '.' || c == '!' || c == '?' || c == ',' || c == ';' || c == ':'; }

std::optional<std::uint64_t> first_integer(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size() && !std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
  if (i == s.size()) return std::nullopt;
  std::uint64_t v = 0;
  for (; i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])); ++i) {
    v = v * 10 + static_cast<std::uint64_t>(s[i] - '0');
  }
  return v;
}

// Leading yes/no synonym replaced by its canonical form.
std::string canonical_polarity(std::string s) {
  static const std::map<std::string, std::string, std::less<>> synonyms = {
      {"yes", "yes"}, {"yeah", "yes"}, {"yep", "yes"},  {"true", "yes"}, {"correct", "yes"},
      {"no", "no"},   {"nope", "no"},  {"false", "no"}, {"none", "no"},
  };
  std::size_t end = 0;
  while (end < s.size() && std::isalpha(static_cast<unsigned char>(s[end]))) ++end;
  auto it = synonyms.find(std::string_view(s).substr(0, end));
  if (it == synonyms.end()) return s;
  return it->second + s.substr(end);
}

CategoryCell cell(std::size_t correct, std::size_t total) {
  return {correct, total, percent(correct, total, 2)};
}

std::string fixed(double v, int decimals) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

json row_json(const VisibilityRow& r) {
  json j = {{"condition", to_string(r.condition)},
            {"total", r.total},
            {"correct_detections", r.correct_detections},
            {"accuracy", r.accuracy},
            {"mode", to_string(r.mode)}};
  j["correct_reasoning"] = r.correct_reasoning ? json(*r.correct_reasoning) : json(nullptr);
  return j;
}

json cell_json(const CategoryCell& c) {
  return {{"correct", c.correct}, {"total", c.total}, {"accuracy", c.accuracy}};
}

}  // namespace

std::string_view to_string(ScoreMode m) { return m == ScoreMode::vision ? "vision" : "reasoning"; }

ScoreMode mode_of(Condition c) { return uses_reasoning(c) ? ScoreMode::reasoning : ScoreMode::vision; }

std::string normalize_answer(std::string_view text) {
  std::string s;
  s.reserve(text.size());
  for (char c : text) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && (is_space(s.back()) || is_terminal_punct(s.back()))) s.pop_back();
  std::size_t start = 0;
  while (start < s.size() && is_space(s[start])) ++start;
  return s.substr(start);
}

bool score_answer(std::string_view pred, std::string_view gold, QaCategory category) {
  const std::string p = normalize_answer(pred);
  const std::string g = normalize_answer(gold);
  if (category == QaCategory::LAN) {
    const auto gi = first_integer(g);
    if (!gi) return p == g;
    const auto pi = first_integer(p);
    return pi && *pi == *gi;
  }
  if (category == QaCategory::INT) return canonical_polarity(p) == canonical_polarity(g);
  return p == g;
}

double percent(std::size_t numerator, std::size_t denominator, int decimals) {
  if (denominator == 0) return 0.0;
  std::uint64_t scale = 1;
  for (int i = 0; i < decimals; ++i) scale *= 10;
  const std::uint64_t num = static_cast<std::uint64_t>(numerator) * 100 * scale;
  const std::uint64_t den = denominator;
  const std::uint64_t rounded = (2 * num + den) / (2 * den);
  return static_cast<double>(rounded) / static_cast<double>(scale);
}

FrameAccuracy frame_accuracy(std::span<const EvalRecord> records) {
  std::map<std::string, std::map<QaCategory, std::pair<std::size_t, bool>>> frames;
  for (const auto& r : records) {
    if (!is_map_category(r.category)) continue;
    auto& slot = frames[r.frame_id][r.category];
    slot.first += 1;
    slot.second = r.correct;
  }
  std::vector<std::string> bad;
  FrameAccuracy out;
  for (const auto& [frame, cats] : frames) {
    bool complete = cats.size() == kMapCategories.size();
    bool all_correct = true;
    for (const auto& [cat, slot] : cats) {
      complete = complete && slot.first == 1;
      all_correct = all_correct && slot.second;
    }
    if (!complete) {
      bad.push_back(frame);
      continue;
    }
    out.frames += 1;
    out.fully_correct += all_correct ? 1 : 0;
  }
  if (!bad.empty()) {
    std::string msg = "frames without exactly one LAN, INT, QLT and SCN record:";
    for (const auto& f : bad) msg += " " + f;
    throw ContractError(msg);
  }
  out.percent = percent(out.fully_correct, out.frames, 2);
  return out;
}

QuestionAccuracy question_accuracy(std::span<const EvalRecord> records) {
  if (records.empty()) throw ContractError("question_accuracy: no records");
  std::map<QaCategory, std::pair<std::size_t, std::size_t>> counts;
  std::size_t correct = 0;
  for (const auto& r : records) {
    auto& c = counts[r.category];
    c.first += r.correct ? 1 : 0;
    c.second += 1;
    correct += r.correct ? 1 : 0;
  }
  QuestionAccuracy out;
  out.overall = cell(correct, records.size());
  for (const auto& [cat, c] : counts) out.per_category[cat] = cell(c.first, c.second);
  return out;
}

VisibilityReport visibility_report(std::span<const ConditionCounts> counts) {
  VisibilityReport report;
  for (const auto& c : counts) {
    VisibilityRow row;
    row.condition = c.condition;
    row.total = c.total;
    row.correct_detections = c.correct_detections;
    row.mode = mode_of(c.condition);
    if (row.mode == ScoreMode::reasoning) {
      row.correct_reasoning = c.correct_reasoning.value_or(0);
      row.accuracy = percent(*row.correct_reasoning, row.total, 1);
    } else {
      row.accuracy = percent(row.correct_detections, row.total, 1);
    }
    report.rows.push_back(row);
  }
  return report;
}

VisibilityReport visibility_report(std::span<const EvalRecord> records) {
  std::map<Condition, ConditionCounts> by_condition;
  for (const auto& r : records) {
    if (!r.condition || is_map_category(r.category)) continue;
    auto& c = by_condition[*r.condition];
    c.condition = *r.condition;
    if (r.category == QaCategory::VIS) {
      c.total += 1;
      c.correct_detections += r.correct ? 1 : 0;
    } else {
      c.correct_reasoning = c.correct_reasoning.value_or(0) + (r.correct ? 1 : 0);
    }
  }
  std::vector<ConditionCounts> counts;
  for (const auto& [cond, c] : by_condition) {
    if (c.total > 0) counts.push_back(c);
  }
  return visibility_report(counts);
}

EvalResult rescore(std::vector<EvalRecord> log) {
  EvalResult result;
  for (auto& r : log) r.correct = score_answer(r.pred, r.gold, r.category);
  result.log = std::move(log);
  std::vector<EvalRecord> map_records;
  for (const auto& r : result.log) {
    if (is_map_category(r.category)) map_records.push_back(r);
  }
  if (!map_records.empty()) {
    result.metrics = MetricsReport{question_accuracy(map_records), frame_accuracy(map_records)};
  }
  result.visibility = visibility_report(std::span<const EvalRecord>(result.log));
  return result;
}

EvalResult eval_run(std::span<const QASample> samples, const Predictor& predict) {
  std::vector<EvalRecord> log;
  log.reserve(samples.size());
  for (const auto& s : samples) {
    EvalRecord r;
    r.frame_id = s.frame_id;
    r.category = s.category;
    r.condition = s.condition;
    r.question = s.question;
    r.gold = s.gold;
    r.pred = predict(s);
    log.push_back(std::move(r));
  }
  return rescore(std::move(log));
}

EvalResult eval_run(MultimodalModel& model, std::span<const QASample> samples, ImageSet& images,
                    bool use_annotation, std::size_t max_new) {
  const Vocabulary& v = model.vocab();
  return eval_run(samples, [&](const QASample& s) {
    const auto ann = use_annotation ? v.encode(s.annotation) : std::vector<std::size_t>{};
    return v.decode(model.generate(images.features(model, s.frame_id), ann, v.encode(s.question), max_new));
  });
}

std::string eval_log_to_jsonl(std::span<const EvalRecord> log) {
  std::string out;
  for (const auto& r : log) {
    json j = {{"frame_id", r.frame_id}, {"category", to_string(r.category)}};
    if (r.condition) {
      j["condition"] = to_string(*r.condition);
      j["mode"] = to_string(mode_of(*r.condition));
    } else {
      j["condition"] = nullptr;
      j["mode"] = nullptr;
    }
    j["question"] = r.question;
    j["gold"] = r.gold;
    j["pred"] = r.pred;
    j["correct"] = r.correct;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<EvalRecord> eval_log_from_jsonl(std::string_view text) {
  std::vector<EvalRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json j;
    try {
      j = json::parse(line);
      EvalRecord r;
      r.frame_id = j.at("frame_id").get<std::string>();
      r.category = qa_category_from(j.at("category").get<std::string>());
      if (j.contains("condition") && !j["condition"].is_null()) {
        r.condition = condition_from(j["condition"].get<std::string>());
      }
      r.question = j.value("question", "");
      r.gold = j.at("gold").get<std::string>();
      r.pred = j.at("pred").get<std::string>();
      r.correct = j.value("correct", false);
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(std::string("eval log: ") + e.what(), line_no, 1);
    }
  }
  return out;
}

std::string report_to_json(const EvalResult& result) {
  json j;
  if (result.metrics) {
    json cats = json::object();
    for (const auto& [cat, c] : result.metrics->questions.per_category) cats[std::string(to_string(cat))] = cell_json(c);
    j["map_qa"] = {{"per_category", cats},
                   {"QNS", cell_json(result.metrics->questions.overall)},
                   {"FRM",
                    {{"frames", result.metrics->frames.frames},
                     {"fully_correct", result.metrics->frames.fully_correct},
                     {"accuracy", result.metrics->frames.percent}}}};
  } else {
    j["map_qa"] = nullptr;
  }
  json rows = json::array();
  for (const auto& r : result.visibility.rows) rows.push_back(row_json(r));
  j["visibility"] = rows;
  j["records"] = result.log.size();
  return j.dump(2) + "\n";
}

std::string report_to_text(const EvalResult& result) {
  std::ostringstream out;
  char buf[160];
  if (result.metrics) {
    const auto& q = result.metrics->questions;
    out << "Map QA\n";
    std::snprintf(buf, sizeof buf, "%-8s %8s %8s %8s %8s %8s %8s\n", "", "LAN", "INT", "QLT", "SCN", "FRM", "QNS");
    out << buf;
    auto acc = [&](QaCategory c) {
      auto it = q.per_category.find(c);
      return it == q.per_category.end() ? std::string("-") : fixed(it->second.accuracy, 2);
    };
    std::snprintf(buf, sizeof buf, "%-8s %8s %8s %8s %8s %8s %8s\n", "model", acc(QaCategory::LAN).c_str(),
                  acc(QaCategory::INT).c_str(), acc(QaCategory::QLT).c_str(), acc(QaCategory::SCN).c_str(),
                  fixed(result.metrics->frames.percent, 2).c_str(), fixed(q.overall.accuracy, 2).c_str());
    out << buf;
  }
  if (!result.visibility.rows.empty()) {
    if (result.metrics) out << "\n";
    out << "Visibility\n";
    std::snprintf(buf, sizeof buf, "%-20s %8s %10s %10s %9s\n", "condition", "total", "detections", "reasoning",
                  "accuracy");
    out << buf;
    for (const auto& r : result.visibility.rows) {
      const std::string reasoning = r.correct_reasoning ? std::to_string(*r.correct_reasoning) : "-";
      const std::string accuracy = fixed(r.accuracy, 1) + (r.mode == ScoreMode::vision ? "*" : "#");
      std::snprintf(buf, sizeof buf, "%-20s %8zu %10zu %10s %9s\n", std::string(to_string(r.condition)).c_str(),
                    r.total, r.correct_detections, reasoning.c_str(), accuracy.c_str());
      out << buf;
    }
    out << "* vision-only detection, # with reasoning\n";
  }
  return out.str();
}

}  // namespace bllm
