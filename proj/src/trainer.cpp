#include "bllm/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>

#include "bllm/error.hpp"
#include "bllm/rng.hpp"

namespace bllm {
namespace {

using nlohmann::json;

Var sample_loss(MultimodalModel& model, Tape& t, ImageSet& images, const QASample& s,
                const DecoderInput& in, double normalizer) {
  Var grouped = model.config().train_embeddings
                    ? model.concat4(t, model.encode(t, model.patch_embed(t, images.image(s.frame_id))))
                    : t.constant_ref(images.features(model, s.frame_id));
  return model.loss(t, grouped, in, normalizer);
}

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

TrainConfig TrainConfig::defaults_for_stage(int stage) {
  TrainConfig c;
  c.stage = stage;
  c.epochs = stage == 1 ? 20 : 10;
  c.use_annotation = stage == 1;
  return c;
}

std::string TrainReport::to_json() const {
  json j = {{"stage", stage},
            {"steps", steps},
            {"loss_trace", loss_trace},
            {"epoch_token_accuracy", epoch_token_accuracy},
            {"checkpoint", checkpoint_path},
            {"frozen_digest_before", frozen_digest_before},
            {"frozen_digest_after", frozen_digest_after}};
  return j.dump(2) + "\n";
}

void ImageSet::add(std::string frame_id, BevImage image) {
  features_.erase(frame_id);
  images_.insert_or_assign(std::move(frame_id), std::move(image));
}

const BevImage& ImageSet::image(const std::string& frame_id) const {
  auto it = images_.find(frame_id);
  if (it == images_.end()) throw ContractError("no BEV image for frame '" + frame_id + "'");
  return it->second;
}

const Matrix& ImageSet::features(MultimodalModel& model, const std::string& frame_id) {
  // Trainable embeddings change the features between steps, so nothing is cached.
  if (model.config().train_embeddings) {
    scratch_ = model.grouped_features(image(frame_id));
    return scratch_;
  }
  const std::string key = model.config().to_json();
  if (key != cache_key_) {
    features_.clear();
    cache_key_ = key;
  }
  auto it = features_.find(frame_id);
  if (it == features_.end()) {
    it = features_.emplace(frame_id, model.grouped_features(image(frame_id))).first;
  }
  return it->second;
}

DecoderInput encode_sample(const MultimodalModel& model, const QASample& sample, bool use_annotation) {
  const Vocabulary& v = model.vocab();
  const auto ann = use_annotation ? v.encode(sample.annotation) : std::vector<std::size_t>{};
  const auto q = v.encode(sample.question);
  const auto a = v.encode(sample.gold);
  return assemble_context(model.config().grouped_tokens(), ann, q, a, model.config().max_seq);
}

TokenAccuracy answer_token_accuracy(MultimodalModel& model, std::span<const QASample> samples,
                                    ImageSet& images, bool use_annotation) {
  TokenAccuracy acc;
  for (const auto& s : samples) {
    const DecoderInput in = encode_sample(model, s, use_annotation);
    Tape t;
    Var projected = model.project(t, t.constant_ref(images.features(model, s.frame_id)));
    const Matrix& logits = t.value(model.decoder_logits(t, projected, in.text, in.loss_positions));
    for (std::size_t i = 0; i < in.targets.size(); ++i) {
      acc.correct += argmax(logits.row(i)) == in.targets[i] ? 1 : 0;
      acc.total += 1;
    }
  }
  return acc;
}

double generation_exact_match(MultimodalModel& model, std::span<const QASample> samples,
                              ImageSet& images, bool use_annotation, std::size_t max_new) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    const Vocabulary& v = model.vocab();
    const auto ann = use_annotation ? v.encode(s.annotation) : std::vector<std::size_t>{};
    const auto ids = model.generate(images.features(model, s.frame_id), ann, v.encode(s.question), max_new);
    hits += v.decode(ids) == v.decode(v.encode(s.gold)) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double corpus_loss(MultimodalModel& model, std::span<const QASample> samples, ImageSet& images,
                   bool use_annotation) {
  std::vector<DecoderInput> inputs;
  double tokens = 0.0;
  for (const auto& s : samples) {
    inputs.push_back(encode_sample(model, s, use_annotation));
    tokens += static_cast<double>(inputs.back().targets.size());
  }
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Tape t;
    total += t.value(sample_loss(model, t, images, samples[i], inputs[i], tokens))(0, 0);
  }
  return total;
}

std::vector<std::string> trainable_names(const MultimodalModel& model) {
  std::vector<std::string> out;
  for (const Parameter* p : model.parameters()) {
    if (p->trainable) out.push_back(p->name);
  }
  return out;
}

TrainReport train_stage(MultimodalModel& model, std::span<const QASample> corpus, ImageSet& images,
                        const TrainConfig& cfg, OptimState* optim) {
  if (cfg.stage != 1 && cfg.stage != 2) throw ContractError("train_stage: stage must be 1 or 2");
  if (cfg.batch_size == 0) throw ContractError("train_stage: batch size must be positive");
  if (cfg.stage == 2) {
    if (!cfg.init_checkpoint) throw ContractError("stage 2 requires a stage-1 checkpoint");
    if (!std::filesystem::exists(*cfg.init_checkpoint)) {
      throw ContractError("stage-1 checkpoint not found: " + cfg.init_checkpoint->string());
    }
    const Checkpoint ckpt = Checkpoint::load(*cfg.init_checkpoint);
    if (ckpt.text("meta/stage").value_or("") != "1") {
      throw ContractError(cfg.init_checkpoint->string() + " is not a stage-1 checkpoint");
    }
    model = MultimodalModel::from_checkpoint(ckpt, model.config());
  }
  const auto started = std::chrono::steady_clock::now();

  TrainReport report;
  report.stage = cfg.stage;
  report.frozen_digest_before = model.frozen_digest();

  std::vector<DecoderInput> inputs;
  inputs.reserve(corpus.size());
  for (const auto& s : corpus) {
    if (!images.contains(s.frame_id)) throw ContractError("no BEV image for frame '" + s.frame_id + "'");
    inputs.push_back(encode_sample(model, s, cfg.use_annotation));
  }

  const std::size_t steps_per_epoch = corpus.empty() ? 0 : (corpus.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total_steps = cfg.epochs * steps_per_epoch;
  if (cfg.max_steps) total_steps = std::min(total_steps, *cfg.max_steps);
  if (total_steps > 0 && corpus.empty()) throw ContractError("train_stage: corpus is empty");
  LrSchedule schedule = cfg.schedule;
  schedule.total_steps = total_steps;

  OptimState local;
  OptimState& state = optim != nullptr ? *optim : local;
  state.config = cfg.optimizer;
  auto params = model.trainable_parameters();

  const Rng shuffle_root = Rng(cfg.seed).derive("shuffle");
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffler = shuffle_root.derive(epoch);
    shuffler.shuffle(order);

    TokenAccuracy running;
    for (std::size_t start = 0; start < order.size() && step < total_steps; start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      double tokens = 0.0;
      for (std::size_t i = start; i < end; ++i) tokens += static_cast<double>(inputs[order[i]].targets.size());

      for (Parameter* p : params) p->zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t idx = order[i];
        Tape t;
        Var l = sample_loss(model, t, images, corpus[idx], inputs[idx], tokens);
        batch_loss += t.value(l)(0, 0);
        // logits node sits right before the loss node
        const Matrix& logits = t.value(Var{l.id - 1});
        for (std::size_t k = 0; k < inputs[idx].targets.size(); ++k) {
          running.correct += argmax(logits.row(k)) == inputs[idx].targets[k] ? 1 : 0;
          running.total += 1;
        }
        t.backward(l);
      }
      ++step;
      if (!std::isfinite(batch_loss)) {
        throw NumericError("training aborted: non-finite loss at stage " + std::to_string(cfg.stage) +
                           " step " + std::to_string(step));
      }
      report.loss_trace.push_back(batch_loss);
      const double lr = lr_at(schedule, step);
      adamw_step(params, state, lr);
      if (cfg.on_step) cfg.on_step({cfg.stage, step, total_steps, epoch, batch_loss, lr});
    }
    report.epoch_token_accuracy.push_back(running.ratio());
    if (cfg.on_epoch_end) cfg.on_epoch_end(epoch);

    if (cfg.out_dir && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      Checkpoint ckpt = model.to_checkpoint(&state);
      ckpt.put_text("meta/stage", std::to_string(cfg.stage));
      ckpt.save(*cfg.out_dir / ("stage" + std::to_string(cfg.stage) + "_epoch" + std::to_string(epoch + 1) + ".bllm"));
    }
  }
  report.steps = step;
  report.frozen_digest_after = model.frozen_digest();
  if (cfg.out_dir) {
    Checkpoint ckpt = model.to_checkpoint(&state);
    ckpt.put_text("meta/stage", std::to_string(cfg.stage));
    const auto path = *cfg.out_dir / ("stage" + std::to_string(cfg.stage) + ".bllm");
    ckpt.save(path);
    report.checkpoint_path = path.string();
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

std::pair<MultimodalModel, OptimState> resume(const std::filesystem::path& checkpoint,
                                              const ModelConfig& config) {
  OptimState state;
  MultimodalModel model = MultimodalModel::from_checkpoint(Checkpoint::load(checkpoint), config, &state);
  return {std::move(model), std::move(state)};
}

}  // namespace bllm
