#include "bllm/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>

#include "bllm/checkpoint.hpp"
#include "bllm/error.hpp"
#include "bllm/fixtures.hpp"
#include "bllm/qa_eval.hpp"

namespace bllm {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Fidelity f) { return f == Fidelity::toy ? "toy" : "paper"; }

namespace {

// Collects violations while reading a JSON document with strict keys.
class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  // Reports keys outside `allowed`; false when `obj` is not an object.
  bool object(const json& obj, const std::string& path, std::initializer_list<std::string_view> allowed) {
    if (!obj.is_object()) {
      errors_.push_back(path + " must be an object");
      return false;
    }
    for (const auto& [key, _] : obj.items()) {
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
        errors_.push_back((path.empty() ? "" : path + ".") + key + " is not a recognized key");
      }
    }
    return true;
  }

  // Negative integers read as 0 so the range checks report them.
  void count(const json& obj, const char* key, const std::string& path, std::size_t& out) {
    const json* v = find(obj, key);
    if (v == nullptr) return;
    if (v->is_number_unsigned()) {
      out = v->get<std::size_t>();
    } else if (v->is_number_integer()) {
      out = 0;
    } else {
      errors_.push_back(name(path, key) + " must be an integer");
    }
  }

  void number(const json& obj, const char* key, const std::string& path, double& out) {
    const json* v = find(obj, key);
    if (v == nullptr) return;
    if (v->is_number()) {
      out = v->get<double>();
    } else {
      errors_.push_back(name(path, key) + " must be a number");
    }
  }

  void boolean(const json& obj, const char* key, const std::string& path, bool& out) {
    const json* v = find(obj, key);
    if (v == nullptr) return;
    if (v->is_boolean()) {
      out = v->get<bool>();
    } else {
      errors_.push_back(name(path, key) + " must be true or false");
    }
  }

  void text(const json& obj, const char* key, const std::string& path, std::string& out) {
    const json* v = find(obj, key);
    if (v == nullptr) return;
    if (v->is_string()) {
      out = v->get<std::string>();
    } else {
      errors_.push_back(name(path, key) + " must be a string");
    }
  }

  void fail(std::string message) { errors_.push_back(std::move(message)); }

 private:
  static const json* find(const json& obj, const char* key) {
    if (!obj.is_object()) return nullptr;
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
  }
  static std::string name(const std::string& path, const char* key) {
    return path.empty() ? std::string(key) : path + "." + key;
  }

  std::vector<std::string>& errors_;
};

void read_stage(Reader& r, const json& j, const std::string& path, StageSettings& s,
                std::vector<std::string>& errors) {
  if (!r.object(j, path, {"epochs", "batch_size", "max_lr", "warmup_ratio", "min_lr", "weight_decay", "max_steps",
                          "use_annotation", "checkpoint_every"})) {
    return;
  }
  r.count(j, "epochs", path, s.epochs);
  r.count(j, "batch_size", path, s.batch_size);
  r.number(j, "max_lr", path, s.max_lr);
  r.number(j, "warmup_ratio", path, s.warmup_ratio);
  r.number(j, "min_lr", path, s.min_lr);
  r.number(j, "weight_decay", path, s.weight_decay);
  if (j.contains("max_steps") && !j["max_steps"].is_null()) {
    std::size_t steps = 0;
    r.count(j, "max_steps", path, steps);
    s.max_steps = steps;
  }
  r.boolean(j, "use_annotation", path, s.use_annotation);
  r.count(j, "checkpoint_every", path, s.checkpoint_every);

  if (s.epochs < 1) errors.push_back(path + ".epochs must be ≥ 1");
  if (s.batch_size < 1) errors.push_back(path + ".batch_size must be ≥ 1");
  if (!(s.max_lr > 0.0)) errors.push_back(path + ".max_lr must be > 0");
  if (!(s.warmup_ratio >= 0.0 && s.warmup_ratio < 1.0)) errors.push_back(path + ".warmup_ratio must be in [0, 1)");
  if (!(s.min_lr >= 0.0 && s.min_lr <= s.max_lr)) errors.push_back(path + ".min_lr must be in [0, max_lr]");
  if (!(s.weight_decay >= 0.0)) errors.push_back(path + ".weight_decay must be ≥ 0");
  if (s.max_steps && *s.max_steps < 1) errors.push_back(path + ".max_steps must be ≥ 1");
}

json stage_json(const StageSettings& s) {
  return {{"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"max_lr", s.max_lr},
          {"warmup_ratio", s.warmup_ratio},
          {"min_lr", s.min_lr},
          {"weight_decay", s.weight_decay},
          {"max_steps", s.max_steps ? json(*s.max_steps) : json(nullptr)},
          {"use_annotation", s.use_annotation},
          {"checkpoint_every", s.checkpoint_every}};
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal();
}

}  // namespace

PipelineConfig default_config(Fidelity fidelity) {
  PipelineConfig c;
  c.fidelity = fidelity;
  c.stage2.epochs = 10;
  c.stage2.use_annotation = false;
  if (fidelity == Fidelity::paper) {
    c.stage1.max_lr = 1e-5;
    c.stage2.max_lr = 1e-5;
    c.model.lora_rank = 64;
  }
  return c;
}

TrainConfig PipelineConfig::train_config(int stage) const {
  const StageSettings& s = stage == 1 ? stage1 : stage2;
  TrainConfig t = TrainConfig::defaults_for_stage(stage);
  t.epochs = s.epochs;
  t.batch_size = s.batch_size;
  t.seed = seed;
  t.schedule.max_lr = s.max_lr;
  t.schedule.warmup_ratio = s.warmup_ratio;
  t.schedule.min_lr = s.min_lr;
  t.optimizer.weight_decay = s.weight_decay;
  t.max_steps = s.max_steps;
  t.use_annotation = s.use_annotation;
  t.checkpoint_every = s.checkpoint_every;
  return t;
}

ModelConfig PipelineConfig::model_config(std::size_t vocab_size) const {
  ModelConfig m = model;
  m.vocab_size = vocab_size;
  m.seed = seed;
  return m;
}

std::string PipelineConfig::to_json() const {
  json model_j = json::parse(model.to_json());
  model_j.erase("vocab_size");
  model_j.erase("seed");
  const Viewport& vp = render.viewport;
  json j = {{"version", version},
            {"seed", seed},
            {"fidelity", std::string(bllm::to_string(fidelity))},
            {"paths",
             {{"scenes", paths.scenes.string()},
              {"point_clouds", paths.point_clouds.string()},
              {"output", paths.output.string()}}},
            {"viewport",
             {{"x_min", vp.x_min},
              {"x_max", vp.x_max},
              {"y_min", vp.y_min},
              {"y_max", vp.y_max},
              {"pixels_per_meter", vp.pixels_per_meter},
              {"line_width", render.line_width},
              {"output_size", render.output_size}}},
            {"model", model_j},
            {"caption", {{"fix_grammar", caption.fix_grammar}}},
            {"train", {{"stage1", stage_json(stage1)}, {"stage2", stage_json(stage2)}}},
            {"eval",
             {{"use_annotation", eval.use_annotation},
              {"max_new_tokens", eval.max_new_tokens},
              {"split", eval.split}}}};
  return j.dump(2);
}

PipelineConfig parse_config(std::string_view text, const fs::path& base_dir, bool require_paths) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
  }
  std::vector<std::string> errors;
  Reader r(errors);
  if (!r.object(j, "config", {"version", "seed", "fidelity", "paths", "viewport", "model", "caption", "train", "eval"})) {
    throw ConfigError(errors);
  }

  Fidelity fidelity = Fidelity::toy;
  if (j.contains("fidelity")) {
    std::string f = "toy";
    r.text(j, "fidelity", "", f);
    if (f == "paper") {
      fidelity = Fidelity::paper;
    } else if (f != "toy") {
      errors.push_back("fidelity must be \"toy\" or \"paper\"");
    }
  }
  PipelineConfig c = default_config(fidelity);

  if (!j.contains("version")) {
    errors.push_back("version is required");
  } else {
    std::size_t v = 0;
    r.count(j, "version", "", v);
    if (v != 1) errors.push_back("version must be 1");
  }
  if (j.contains("seed")) {
    std::size_t seed = c.seed;
    r.count(j, "seed", "", seed);
    c.seed = seed;
  }

  if (j.contains("paths")) {
    const json& p = j["paths"];
    if (r.object(p, "paths", {"scenes", "point_clouds", "output"})) {
      std::string scenes, clouds, output;
      r.text(p, "scenes", "paths", scenes);
      r.text(p, "point_clouds", "paths", clouds);
      r.text(p, "output", "paths", output);
      if (!scenes.empty()) c.paths.scenes = resolve(base_dir, scenes);
      if (!output.empty()) c.paths.output = resolve(base_dir, output);
      c.paths.point_clouds = clouds.empty() ? c.paths.scenes : resolve(base_dir, clouds);
    }
  }
  if (require_paths) {
    if (c.paths.scenes.empty()) {
      errors.push_back("paths.scenes is required");
    } else if (!fs::is_directory(c.paths.scenes)) {
      errors.push_back("paths.scenes does not exist: " + c.paths.scenes.string());
    }
    if (c.paths.point_clouds != c.paths.scenes && !fs::is_directory(c.paths.point_clouds)) {
      errors.push_back("paths.point_clouds does not exist: " + c.paths.point_clouds.string());
    }
    if (c.paths.output.empty()) errors.push_back("paths.output is required");
  }

  if (j.contains("viewport")) {
    const json& v = j["viewport"];
    if (r.object(v, "viewport", {"x_min", "x_max", "y_min", "y_max", "pixels_per_meter", "line_width", "output_size"})) {
      Viewport& vp = c.render.viewport;
      r.number(v, "x_min", "viewport", vp.x_min);
      r.number(v, "x_max", "viewport", vp.x_max);
      r.number(v, "y_min", "viewport", vp.y_min);
      r.number(v, "y_max", "viewport", vp.y_max);
      r.number(v, "pixels_per_meter", "viewport", vp.pixels_per_meter);
      std::size_t width = static_cast<std::size_t>(c.render.line_width);
      r.count(v, "line_width", "viewport", width);
      c.render.line_width = static_cast<int>(std::min<std::size_t>(width, 1000));
      r.count(v, "output_size", "viewport", c.render.output_size);
    }
  }
  try {
    c.render.viewport.validate();
  } catch (const ValidationError& e) {
    errors.push_back(e.what());
  }
  if (c.render.line_width < 1) errors.push_back("viewport.line_width must be ≥ 1");

  if (j.contains("model")) {
    const json& m = j["model"];
    if (r.object(m, "model", {"image_size", "patch", "d_bev", "d", "encoder_layers", "encoder_heads", "decoder_layers",
                              "decoder_heads", "mlp_ratio", "max_seq", "lora_rank", "lora_alpha", "train_embeddings"})) {
      ModelConfig& mc = c.model;
      r.count(m, "image_size", "model", mc.image_size);
      r.count(m, "patch", "model", mc.patch);
      r.count(m, "d_bev", "model", mc.d_bev);
      r.count(m, "d", "model", mc.d);
      r.count(m, "encoder_layers", "model", mc.encoder_layers);
      r.count(m, "encoder_heads", "model", mc.encoder_heads);
      r.count(m, "decoder_layers", "model", mc.decoder_layers);
      r.count(m, "decoder_heads", "model", mc.decoder_heads);
      r.count(m, "mlp_ratio", "model", mc.mlp_ratio);
      r.count(m, "max_seq", "model", mc.max_seq);
      r.count(m, "lora_rank", "model", mc.lora_rank);
      r.number(m, "lora_alpha", "model", mc.lora_alpha);
      r.boolean(m, "train_embeddings", "model", mc.train_embeddings);
    }
  }
  for (const auto& v : c.model_config(ModelConfig{}.vocab_size).violations()) errors.push_back(v);
  if (c.render.output_size != c.model.image_size) {
    errors.push_back("viewport.output_size must equal model.image_size");
  }

  if (j.contains("caption")) {
    const json& cap = j["caption"];
    if (r.object(cap, "caption", {"fix_grammar"})) r.boolean(cap, "fix_grammar", "caption", c.caption.fix_grammar);
  }

  if (j.contains("train")) {
    const json& t = j["train"];
    if (r.object(t, "train", {"stage1", "stage2"})) {
      if (t.contains("stage1")) read_stage(r, t["stage1"], "train.stage1", c.stage1, errors);
      if (t.contains("stage2")) read_stage(r, t["stage2"], "train.stage2", c.stage2, errors);
    }
  }

  if (j.contains("eval")) {
    const json& e = j["eval"];
    if (r.object(e, "eval", {"use_annotation", "max_new_tokens", "split"})) {
      r.boolean(e, "use_annotation", "eval", c.eval.use_annotation);
      r.count(e, "max_new_tokens", "eval", c.eval.max_new_tokens);
      r.text(e, "split", "eval", c.eval.split);
    }
  }
  if (c.eval.max_new_tokens < 1) errors.push_back("eval.max_new_tokens must be ≥ 1");
  if (c.eval.split != "train" && c.eval.split != "test") errors.push_back("eval.split must be \"train\" or \"test\"");

  if (!errors.empty()) throw ConfigError(errors);
  return c;
}

PipelineConfig load_config(const fs::path& file, bool require_paths) {
  std::string text;
  try {
    text = read_file(file);
  } catch (const std::exception& e) {
    throw ConfigError({"cannot read config " + file.string() + ": " + e.what()});
  }
  return parse_config(text, fs::absolute(file).parent_path(), require_paths);
}

void log_event(const LogSink& sink, std::string_view stage, std::string_view event, std::string_view fields_json) {
  if (!sink) return;
  json j = {{"stage", stage}, {"event", event}};
  const json fields = json::parse(fields_json);
  for (const auto& [k, v] : fields.items()) j[k] = v;
  sink(j.dump());
}

BevImage render_frame(const SceneRecord& scene, const fs::path& cloud_root, const RenderOptions& opts) {
  return render_scene(scene, load_scene_cloud(cloud_root, scene), opts);
}

std::vector<fs::path> render_frames(std::span<const SceneRecord> scenes, const fs::path& cloud_root,
                                    const RenderOptions& opts, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<fs::path> out;
  for (const auto& s : scenes) {
    const fs::path p = out_dir / (s.frame_id + ".ppm");
    write_ppm(p, render_frame(s, cloud_root, opts));
    out.push_back(p);
  }
  return out;
}

ImageSet render_image_set(std::span<const SceneRecord> scenes, const fs::path& cloud_root, const RenderOptions& opts) {
  ImageSet images;
  for (const auto& s : scenes) images.add(s.frame_id, render_frame(s, cloud_root, opts));
  return images;
}

ImageSet load_image_set(const fs::path& dir, std::span<const QASample> samples) {
  ImageSet images;
  for (const auto& s : samples) {
    if (images.contains(s.frame_id)) continue;
    const fs::path p = dir / (s.frame_id + ".ppm");
    if (!fs::exists(p)) throw LoadError("missing BEV image " + p.string());
    images.add(s.frame_id, read_ppm(p));
  }
  return images;
}

QaFiles qa_files(const fs::path& dir) {
  return {dir / "train_map.jsonl", dir / "train_vis.jsonl", dir / "test_map.jsonl", dir / "test_vis.jsonl",
          dir / "vocab.txt"};
}

Vocabulary build_vocab(std::span<const std::vector<QASample>> corpora) {
  std::vector<std::string> texts;
  for (const auto& corpus : corpora) {
    for (const auto& s : corpus) {
      texts.push_back(s.annotation);
      texts.push_back(s.question);
      texts.push_back(s.gold);
    }
  }
  return Vocabulary::build(texts, 512);
}

QaFiles write_qa_corpora(const Corpus& corpus, const CaptionOptions& opts, const fs::path& dir) {
  fs::create_directories(dir);
  const QaFiles files = qa_files(dir);
  const std::vector<std::vector<QASample>> parts = {
      build_qa_corpus(corpus.train, QaStage::map, opts), build_qa_corpus(corpus.train, QaStage::visibility, opts),
      build_qa_corpus(corpus.test, QaStage::map, opts), build_qa_corpus(corpus.test, QaStage::visibility, opts)};
  write_qa(files.train_map, parts[0]);
  write_qa(files.train_vis, parts[1]);
  write_qa(files.test_map, parts[2]);
  write_qa(files.test_vis, parts[3]);
  write_file(files.vocab, build_vocab(parts).serialize());
  return files;
}

std::string file_digest(const fs::path& path) { return sha256_hex(read_file(path)); }

std::string tree_digest(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    entries.emplace_back(fs::relative(e.path(), dir).generic_string(), file_digest(e.path()));
  }
  std::sort(entries.begin(), entries.end());
  std::string acc;
  for (const auto& [name, digest] : entries) acc += name + "\n" + digest + "\n";
  return sha256_hex(acc);
}

namespace {

struct Stamp {
  std::string key;
  std::map<std::string, std::string> outputs;  // path relative to the output dir -> digest
};

fs::path stamp_path(const fs::path& out, const std::string& stage) { return out / "stamps" / (stage + ".json"); }

bool stamp_current(const fs::path& out, const std::string& stage, const std::string& key) {
  const fs::path p = stamp_path(out, stage);
  if (!fs::exists(p)) return false;
  try {
    const json j = json::parse(read_file(p));
    if (j.at("key").get<std::string>() != key) return false;
    for (const auto& [rel, digest] : j.at("outputs").items()) {
      const fs::path f = out / rel;
      if (!fs::exists(f) || file_digest(f) != digest.get<std::string>()) return false;
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

void write_stamp(const fs::path& out, const std::string& stage, const std::string& key,
                 const std::vector<fs::path>& outputs) {
  json files = json::object();
  for (const auto& f : outputs) files[fs::relative(f, out).generic_string()] = file_digest(f);
  const json j = {{"key", key}, {"outputs", files}};
  fs::create_directories(out / "stamps");
  write_file(stamp_path(out, stage), j.dump(2) + "\n");
}

std::vector<QASample> concat(std::vector<QASample> a, const std::vector<QASample>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

class Runner {
 public:
  Runner(const PipelineConfig& cfg, const PipelineOptions& opts) : cfg_(cfg), opts_(opts), out_(cfg.paths.output) {}

  PipelineResult run() {
    fs::create_directories(out_);
    log_event(opts_.log, "pipeline", "start",
              json({{"output", out_.string()}, {"seed", cfg_.seed}, {"fidelity", to_string(cfg_.fidelity)}}).dump());
    stage("render", [this] { return render_key(); }, [this] { return render(); }, kExitData);
    stage("caption", [this] { return caption_key(); }, [this] { return caption(); }, kExitData);
    stage("stage1", [this] { return train_key(1); }, [this] { return train(1); }, kExitTrain);
    stage("stage2", [this] { return train_key(2); }, [this] { return train(2); }, kExitTrain);
    stage("eval", [this] { return eval_key(); }, [this] { return evaluate(); }, kExitEval);
    log_event(opts_.log, "pipeline", "done");
    result_.output = out_;
    return result_;
  }

 private:
  template <typename KeyFn, typename RunFn>
  void stage(const std::string& name, KeyFn key_fn, RunFn run_fn, int exit_code) {
    const auto started = std::chrono::steady_clock::now();
    StageOutcome outcome{name, false, 0.0};
    try {
      const std::string key = key_fn();
      if (!opts_.force && stamp_current(out_, name, key)) {
        outcome.skipped = true;
        log_event(opts_.log, name, "skip", json({{"reason", "up to date"}}).dump());
      } else {
        log_event(opts_.log, name, "begin");
        const std::vector<fs::path> outputs = run_fn();
        write_stamp(out_, name, key, outputs);
      }
    } catch (const PipelineError&) {
      throw;
    } catch (const std::exception& e) {
      log_event(opts_.log, name, "error", json({{"message", e.what()}}).dump());
      throw PipelineError(exit_code, name, name + ": " + e.what());
    }
    outcome.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (!outcome.skipped) log_event(opts_.log, name, "end", json({{"seconds", outcome.seconds}}).dump());
    result_.stages.push_back(outcome);
  }

  const Corpus& corpus() {
    if (!corpus_) corpus_ = load_corpus(cfg_.paths.scenes);
    return *corpus_;
  }

  std::string render_key() {
    std::string acc = "render\n" + tree_digest(cfg_.paths.scenes) + "\n";
    if (cfg_.paths.point_clouds != cfg_.paths.scenes) acc += tree_digest(cfg_.paths.point_clouds) + "\n";
    const json j = json::parse(cfg_.to_json());
    acc += j["viewport"].dump();
    return sha256_hex(acc);
  }

  std::vector<fs::path> render() {
    const Corpus& c = corpus();
    std::vector<SceneRecord> all = c.train;
    all.insert(all.end(), c.test.begin(), c.test.end());
    auto paths = render_frames(all, cfg_.paths.point_clouds, cfg_.render, out_ / "images");
    log_event(opts_.log, "render", "images", json({{"count", paths.size()}}).dump());
    return paths;
  }

  std::string caption_key() {
    const json j = json::parse(cfg_.to_json());
    return sha256_hex("caption\n" + tree_digest(cfg_.paths.scenes) + "\n" + j["caption"].dump());
  }

  std::vector<fs::path> caption() {
    const QaFiles f = write_qa_corpora(corpus(), cfg_.caption, out_ / "qa");
    return {f.train_map, f.train_vis, f.test_map, f.test_vis, f.vocab};
  }

  std::string train_key(int stage) {
    const QaFiles f = qa_files(out_ / "qa");
    const json j = json::parse(cfg_.to_json());
    std::string acc = "stage" + std::to_string(stage) + "\n" + std::to_string(cfg_.seed) + "\n" + j["model"].dump() +
                      "\n" + j["train"][stage == 1 ? "stage1" : "stage2"].dump() + "\n" + tree_digest(out_ / "images") +
                      "\n" + file_digest(f.vocab) + "\n" + file_digest(stage == 1 ? f.train_map : f.train_vis);
    if (stage == 2) acc += "\n" + file_digest(out_ / "ckpt" / "stage1.bllm");
    return sha256_hex(acc);
  }

  std::vector<fs::path> train(int stage) {
    const QaFiles f = qa_files(out_ / "qa");
    const Vocabulary vocab = Vocabulary::deserialize(read_file(f.vocab));
    const std::vector<QASample> samples = read_qa(stage == 1 ? f.train_map : f.train_vis);
    ImageSet images = load_image_set(out_ / "images", samples);
    MultimodalModel model(cfg_.model_config(vocab.size()), vocab);

    TrainConfig tc = cfg_.train_config(stage);
    tc.out_dir = out_ / "ckpt";
    fs::create_directories(*tc.out_dir);
    if (stage == 2) tc.init_checkpoint = out_ / "ckpt" / "stage1.bllm";
    const std::string name = "stage" + std::to_string(stage);
    tc.on_step = [&](const StepEvent& e) {
      if (e.step % std::max<std::size_t>(opts_.log_every, 1) != 0 && e.step != e.total_steps) return;
      log_event(opts_.log, name, "step",
                json({{"step", e.step}, {"total_steps", e.total_steps}, {"epoch", e.epoch}, {"loss", e.loss},
                      {"lr", e.lr}})
                    .dump());
    };
    TrainReport report = train_stage(model, samples, images, tc);
    const fs::path ckpt = report.checkpoint_path;
    // Relative so reports do not depend on where the output directory lives.
    report.checkpoint_path = fs::relative(ckpt, out_).generic_string();
    if (report.frozen_digest_before != report.frozen_digest_after) {
      throw NumericError(name + ": frozen parameters changed during training");
    }
    fs::create_directories(out_ / "reports");
    const fs::path report_path = out_ / "reports" / ("train_" + name + ".json");
    write_file(report_path, report.to_json() + "\n");
    log_event(opts_.log, name, "summary",
              json({{"steps", report.steps},
                    {"final_loss", report.loss_trace.empty() ? 0.0 : report.loss_trace.back()},
                    {"token_accuracy",
                     report.epoch_token_accuracy.empty() ? 0.0 : report.epoch_token_accuracy.back()},
                    {"frozen_digest", report.frozen_digest_after},
                    {"wall_seconds", report.wall_seconds}})
                  .dump());

    std::vector<fs::path> outputs = {ckpt, report_path};
    for (const auto& e : fs::directory_iterator(out_ / "ckpt")) {
      const std::string fname = e.path().filename().string();
      if (fname.rfind(name + "_epoch", 0) == 0) outputs.push_back(e.path());
    }
    std::sort(outputs.begin(), outputs.end());
    return outputs;
  }

  std::string eval_key() {
    const QaFiles f = qa_files(out_ / "qa");
    const json j = json::parse(cfg_.to_json());
    const bool test = cfg_.eval.split == "test";
    return sha256_hex("eval\n" + j["eval"].dump() + "\n" + file_digest(out_ / "ckpt" / "stage2.bllm") + "\n" +
                      file_digest(test ? f.test_map : f.train_map) + "\n" +
                      file_digest(test ? f.test_vis : f.train_vis) + "\n" + tree_digest(out_ / "images"));
  }

  std::vector<fs::path> evaluate() {
    const QaFiles f = qa_files(out_ / "qa");
    const bool test = cfg_.eval.split == "test";
    const std::vector<QASample> samples =
        concat(read_qa(test ? f.test_map : f.train_map), read_qa(test ? f.test_vis : f.train_vis));
    if (samples.empty()) throw ContractError("no " + cfg_.eval.split + " samples to evaluate");
    ImageSet images = load_image_set(out_ / "images", samples);
    MultimodalModel model = MultimodalModel::from_checkpoint(Checkpoint::load(out_ / "ckpt" / "stage2.bllm"));
    const EvalResult result =
        eval_run(model, samples, images, cfg_.eval.use_annotation, cfg_.eval.max_new_tokens);

    const fs::path dir = out_ / "reports";
    fs::create_directories(dir);
    const std::vector<fs::path> outputs = {dir / "eval.json", dir / "eval.txt", dir / "eval_log.jsonl"};
    write_file(outputs[0], report_to_json(result) + "\n");
    write_file(outputs[1], report_to_text(result));
    write_file(outputs[2], eval_log_to_jsonl(result.log));
    json summary = {{"records", result.log.size()}};
    if (result.metrics) {
      summary["frm"] = result.metrics->frames.percent;
      summary["qns"] = result.metrics->questions.overall.accuracy;
    }
    log_event(opts_.log, "eval", "summary", summary.dump());
    return outputs;
  }

  const PipelineConfig& cfg_;
  const PipelineOptions& opts_;
  fs::path out_;
  std::optional<Corpus> corpus_;
  PipelineResult result_;
};

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineOptions& opts) {
  if (cfg.paths.scenes.empty() || !fs::is_directory(cfg.paths.scenes)) {
    throw PipelineError(kExitConfig, "config", "paths.scenes does not exist: " + cfg.paths.scenes.string());
  }
  if (cfg.paths.output.empty()) throw PipelineError(kExitConfig, "config", "paths.output is required");
  return Runner(cfg, opts).run();
}

}  // namespace bllm
