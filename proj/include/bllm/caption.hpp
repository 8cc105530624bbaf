#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bllm/scene.hpp"

namespace bllm {

enum class QaCategory { LAN, INT, QLT, SCN, VIS, VIS_REASON };

std::string_view to_string(QaCategory c);
QaCategory qa_category_from(std::string_view name);
bool is_map_category(QaCategory c);

// Stratification of the visibility questions.
enum class Condition { day_visible, night_visible, partial, rain_invisible, degraded_invisible };

std::string_view to_string(Condition c);
Condition condition_from(std::string_view name);
bool uses_reasoning(Condition c);
Condition condition_of(const SceneRecord& scene);

enum class PromptKind { describe, LAN, INT, visibility, visibility_reason };

struct Prompt {
  PromptKind kind;
  std::string_view text;
};

// The five task prompts, in fixed order.
std::span<const Prompt> prompt_set();
std::string_view question_for(QaCategory c);

struct CaptionOptions {
  // Pluralize "1 lanes" -> "1 lane".
  bool fix_grammar = false;
};

std::string format_coordinate(Point2 p);
std::string render_map_caption(const SceneRecord& scene, const CaptionOptions& opts = {});
// Throws ContractError when the record carries no visibility field.
std::string render_visibility_caption(const SceneRecord& scene);

struct QASample {
  std::string frame_id;
  QaCategory category = QaCategory::LAN;
  std::string question;
  std::string annotation;  // X_ann; empty when absent
  std::string gold;
  std::optional<Condition> condition;  // visibility samples only

  friend bool operator==(const QASample&, const QASample&) = default;
};

std::string gold_answer(const SceneRecord& scene, QaCategory c);

enum class QaStage { map, visibility, all };

// Map stage: LAN, INT, QLT, SCN per frame (annotation = map caption).
// Visibility stage: VIS per frame with a visibility field, plus VIS_REASON
// when lanes are not fully visible (annotation empty).
std::vector<QASample> build_qa_corpus(std::span<const SceneRecord> scenes, QaStage stage,
                                      const CaptionOptions& opts = {});

std::string qa_to_jsonl(std::span<const QASample> samples);
std::vector<QASample> qa_from_jsonl(std::string_view text);
void write_qa(const std::filesystem::path& path, std::span<const QASample> samples);
std::vector<QASample> read_qa(const std::filesystem::path& path);

}  // namespace bllm
