#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bllm/bev.hpp"
#include "bllm/caption.hpp"
#include "bllm/model.hpp"
#include "bllm/scene.hpp"
#include "bllm/trainer.hpp"
#include "bllm/vocab.hpp"

namespace bllm {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitTrain = 4;
inline constexpr int kExitEval = 5;

// toy: desk-scale learning rate; paper: the published lr and LoRA rank.
enum class Fidelity { toy, paper };

std::string_view to_string(Fidelity f);

struct StageSettings {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double max_lr = 2e-3;
  double warmup_ratio = 0.05;
  double min_lr = 0.0;
  double weight_decay = 0.01;
  std::optional<std::size_t> max_steps;
  bool use_annotation = true;
  std::size_t checkpoint_every = 0;
};

struct EvalSettings {
  bool use_annotation = false;
  std::size_t max_new_tokens = 16;
  std::string split = "test";
};

struct PipelinePaths {
  std::filesystem::path scenes;
  // Root for each record's point_cloud field; defaults to `scenes`.
  std::filesystem::path point_clouds;
  std::filesystem::path output;
};

struct PipelineConfig {
  int version = 1;
  std::uint64_t seed = 7;
  Fidelity fidelity = Fidelity::toy;
  PipelinePaths paths;
  RenderOptions render;
  // vocab_size is derived from the QA corpora and seed from the top level.
  ModelConfig model;
  CaptionOptions caption;
  StageSettings stage1;
  StageSettings stage2;
  EvalSettings eval;

  TrainConfig train_config(int stage) const;
  ModelConfig model_config(std::size_t vocab_size) const;
  // Canonical JSON of the resolved config (absolute paths, defaults filled).
  std::string to_json() const;
};

PipelineConfig default_config(Fidelity fidelity = Fidelity::toy);

// Validates the whole document and throws ConfigError listing every
// violation. Relative paths resolve against base_dir. With require_paths
// false the paths section is optional and existence is not checked.
PipelineConfig parse_config(std::string_view text, const std::filesystem::path& base_dir,
                            bool require_paths = true);
PipelineConfig load_config(const std::filesystem::path& file, bool require_paths = true);

// A failure tagged with the stage it came from and the CLI exit code.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(int exit_code, std::string stage, const std::string& what)
      : std::runtime_error(what), exit_code_(exit_code), stage_(std::move(stage)) {}

  int exit_code() const { return exit_code_; }
  const std::string& stage() const { return stage_; }

 private:
  int exit_code_;
  std::string stage_;
};

// One JSON object per line.
using LogSink = std::function<void(const std::string& line)>;

// Writes {"stage", "event", ...fields} through the sink; fields_json is a
// JSON object whose members are appended (may be empty).
void log_event(const LogSink& sink, std::string_view stage, std::string_view event,
               std::string_view fields_json = "{}");

// Shared building blocks of the subcommands and the pipeline.
BevImage render_frame(const SceneRecord& scene, const std::filesystem::path& cloud_root,
                      const RenderOptions& opts);
// Writes <frame_id>.ppm for every record; returns the written paths.
std::vector<std::filesystem::path> render_frames(std::span<const SceneRecord> scenes,
                                                 const std::filesystem::path& cloud_root,
                                                 const RenderOptions& opts, const std::filesystem::path& out_dir);
ImageSet render_image_set(std::span<const SceneRecord> scenes, const std::filesystem::path& cloud_root,
                          const RenderOptions& opts);
ImageSet load_image_set(const std::filesystem::path& dir, std::span<const QASample> samples);

struct QaFiles {
  std::filesystem::path train_map;
  std::filesystem::path train_vis;
  std::filesystem::path test_map;
  std::filesystem::path test_vis;
  std::filesystem::path vocab;
};

QaFiles qa_files(const std::filesystem::path& dir);
// Vocabulary over annotation, question and gold text of every corpus.
Vocabulary build_vocab(std::span<const std::vector<QASample>> corpora);
// Writes the four QA corpora and the shared vocabulary.
QaFiles write_qa_corpora(const Corpus& corpus, const CaptionOptions& opts, const std::filesystem::path& dir);

// SHA-256 over (relative path, content digest) of every regular file below dir.
std::string tree_digest(const std::filesystem::path& dir);
std::string file_digest(const std::filesystem::path& path);

struct StageOutcome {
  std::string name;
  bool skipped = false;
  double seconds = 0.0;
};

struct PipelineOptions {
  bool force = false;
  LogSink log;
  // Log every n-th training step (the last step is always logged).
  std::size_t log_every = 10;
};

struct PipelineResult {
  std::vector<StageOutcome> stages;
  std::filesystem::path output;
};

// render -> caption -> stage1 -> stage2 -> eval. A stage is skipped when its
// stamp records the same input key and its outputs are unchanged on disk.
PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineOptions& opts = {});

}  // namespace bllm
