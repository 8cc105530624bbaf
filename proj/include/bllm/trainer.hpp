#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bllm/bev.hpp"
#include "bllm/caption.hpp"
#include "bllm/model.hpp"
#include "bllm/optim.hpp"

namespace bllm {

struct StepEvent {
  int stage = 1;
  std::size_t step = 0;
  std::size_t total_steps = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainConfig {
  int stage = 1;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  std::uint64_t seed = 7;
  // total_steps is derived from epochs and corpus size (capped by max_steps).
  LrSchedule schedule{.max_lr = 1e-5, .warmup_ratio = 0.05, .total_steps = 0, .min_lr = 0.0};
  AdamWConfig optimizer;
  std::optional<std::size_t> max_steps;
  // Condition on X_ann during training.
  bool use_annotation = true;
  // Stage 2 starts from this stage-1 checkpoint.
  std::optional<std::filesystem::path> init_checkpoint;
  std::optional<std::filesystem::path> out_dir;
  // Write an intermediate checkpoint every N epochs (0 = final only).
  std::size_t checkpoint_every = 0;
  // Observers; they must not touch the parameters.
  std::function<void(const StepEvent&)> on_step;
  std::function<void(std::size_t epoch)> on_epoch_end;

  static TrainConfig defaults_for_stage(int stage);
};

struct TrainReport {
  int stage = 1;
  std::size_t steps = 0;
  std::vector<double> loss_trace;
  std::vector<double> epoch_token_accuracy;
  double wall_seconds = 0.0;
  std::string checkpoint_path;
  std::string frozen_digest_before;
  std::string frozen_digest_after;

  // Deterministic fields only; wall time is reported separately.
  std::string to_json() const;
};

// Images keyed by frame id, with the frozen visual features cached per model
// config (frozen weights are a function of the config and its seed).
class ImageSet {
 public:
  void add(std::string frame_id, BevImage image);
  bool contains(const std::string& frame_id) const { return images_.count(frame_id) != 0; }
  const BevImage& image(const std::string& frame_id) const;
  const Matrix& features(MultimodalModel& model, const std::string& frame_id);

 private:
  std::map<std::string, BevImage> images_;
  std::map<std::string, Matrix> features_;
  std::string cache_key_;
  Matrix scratch_;
};

struct TokenAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double ratio() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

DecoderInput encode_sample(const MultimodalModel& model, const QASample& sample, bool use_annotation);

// Teacher-forced argmax accuracy over answer tokens plus EOS.
TokenAccuracy answer_token_accuracy(MultimodalModel& model, std::span<const QASample> samples,
                                    ImageSet& images, bool use_annotation);
// Fraction of samples whose greedy generation equals the gold answer text.
double generation_exact_match(MultimodalModel& model, std::span<const QASample> samples,
                              ImageSet& images, bool use_annotation, std::size_t max_new = 16);

// Loss of the whole corpus (mean over answer tokens) with a fresh tape.
double corpus_loss(MultimodalModel& model, std::span<const QASample> samples, ImageSet& images,
                   bool use_annotation);

std::vector<std::string> trainable_names(const MultimodalModel& model);

TrainReport train_stage(MultimodalModel& model, std::span<const QASample> corpus, ImageSet& images,
                        const TrainConfig& cfg, OptimState* optim = nullptr);

// Bit-exact restoration of parameters (and optimizer moments when present).
std::pair<MultimodalModel, OptimState> resume(const std::filesystem::path& checkpoint,
                                              const ModelConfig& config);

}  // namespace bllm
