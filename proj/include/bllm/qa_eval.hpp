#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bllm/caption.hpp"

namespace bllm {

class MultimodalModel;
class ImageSet;

enum class ScoreMode { vision, reasoning };

std::string_view to_string(ScoreMode m);
ScoreMode mode_of(Condition c);

struct EvalRecord {
  std::string frame_id;
  QaCategory category = QaCategory::LAN;
  std::optional<Condition> condition;
  std::string question;
  std::string gold;
  std::string pred;
  bool correct = false;

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

// Case-folded, trimmed, terminal punctuation removed.
std::string normalize_answer(std::string_view text);
bool score_answer(std::string_view pred, std::string_view gold, QaCategory category);

// 100 * numerator / denominator rounded half-up to `decimals` places, computed
// in integer arithmetic so ties are exact.
double percent(std::size_t numerator, std::size_t denominator, int decimals);

struct CategoryCell {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;  // percent, 2 decimals

  friend bool operator==(const CategoryCell&, const CategoryCell&) = default;
};

struct FrameAccuracy {
  std::size_t frames = 0;
  std::size_t fully_correct = 0;
  double percent = 0.0;  // 2 decimals

  friend bool operator==(const FrameAccuracy&, const FrameAccuracy&) = default;
};

struct QuestionAccuracy {
  CategoryCell overall;
  std::map<QaCategory, CategoryCell> per_category;

  friend bool operator==(const QuestionAccuracy&, const QuestionAccuracy&) = default;
};

// Map-category records only; every frame must carry LAN, INT, QLT and SCN
// exactly once (ContractError listing the offending frames otherwise).
FrameAccuracy frame_accuracy(std::span<const EvalRecord> records);
// Throws ContractError on an empty record set.
QuestionAccuracy question_accuracy(std::span<const EvalRecord> records);

struct MetricsReport {
  QuestionAccuracy questions;
  FrameAccuracy frames;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

struct ConditionCounts {
  Condition condition = Condition::day_visible;
  std::size_t total = 0;
  std::size_t correct_detections = 0;
  std::optional<std::size_t> correct_reasoning;
};

struct VisibilityRow {
  Condition condition = Condition::day_visible;
  std::size_t total = 0;
  std::size_t correct_detections = 0;
  std::optional<std::size_t> correct_reasoning;
  double accuracy = 0.0;  // percent, 1 decimal
  ScoreMode mode = ScoreMode::vision;

  friend bool operator==(const VisibilityRow&, const VisibilityRow&) = default;
};

struct VisibilityReport {
  std::vector<VisibilityRow> rows;

  friend bool operator==(const VisibilityReport&, const VisibilityReport&) = default;
};

VisibilityReport visibility_report(std::span<const ConditionCounts> counts);
// VIS records count detections, VIS_REASON records count reasoning; rows
// appear in condition order for every condition that has VIS records.
VisibilityReport visibility_report(std::span<const EvalRecord> records);

struct EvalResult {
  std::vector<EvalRecord> log;
  std::optional<MetricsReport> metrics;  // absent when there are no map records
  VisibilityReport visibility;
};

using Predictor = std::function<std::string(const QASample&)>;

// Scores and aggregates; `rescore(result.log)` reproduces the same result.
EvalResult eval_run(std::span<const QASample> samples, const Predictor& predict);
EvalResult eval_run(MultimodalModel& model, std::span<const QASample> samples, ImageSet& images,
                    bool use_annotation = false, std::size_t max_new = 16);
EvalResult rescore(std::vector<EvalRecord> log);

std::string eval_log_to_jsonl(std::span<const EvalRecord> log);
std::vector<EvalRecord> eval_log_from_jsonl(std::string_view text);

std::string report_to_json(const EvalResult& result);
// Aligned plain-text tables in the layout of the map-QA and visibility tables.
std::string report_to_text(const EvalResult& result);

}  // namespace bllm
