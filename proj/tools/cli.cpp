#include "cli.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "bllm/checkpoint.hpp"
#include "bllm/det_metrics.hpp"
#include "bllm/error.hpp"
#include "bllm/fixtures.hpp"
#include "bllm/lane_fit.hpp"
#include "bllm/pipeline.hpp"
#include "bllm/qa_eval.hpp"

namespace bllm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::optional<std::size_t> thread_cap(const char* value) {
  if (value == nullptr) return std::nullopt;
  const std::string_view text(value);
  std::size_t n = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), n);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size() || n == 0) {
    throw ConfigError({"BLLM_THREADS must be a positive integer, got \"" + std::string(text) + "\""});
  }
  return n;
}

namespace {

// Exit code for failures that are not config or data errors.
int default_code(const std::string& command) {
  if (command == "train") return kExitTrain;
  if (command == "generate" || command == "eval-qa" || command == "eval-det" || command == "lanescore") {
    return kExitEval;
  }
  return kExitData;
}

std::string fixed(double v, int decimals) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << v;
  return os.str();
}

}  // namespace

Cli::Cli(std::ostream& out, std::ostream& err) : out_(out), err_(err), app_("BEV lane-map multimodal toolkit", "bllm") {
  app_.require_subcommand(1, 1);
  app_.set_help_all_flag("--help-all", "Print help for every subcommand and exit");

  auto* fx = app_.add_subcommand("fixtures", "Write the synthetic scene corpus (records, manifest, point clouds)");
  fx->add_option("--out", a_.out, "Output directory")->required();
  fx->add_option("--train", a_.fixtures_train, "Number of training scenes")->capture_default_str();
  fx->add_option("--test", a_.fixtures_test, "Number of test scenes")->capture_default_str();
  fx->add_option("--seed", a_.fixtures_seed, "Corpus seed")->capture_default_str();

  auto* ra = app_.add_subcommand("rasterize", "Render annotated BEV images (binary PPM, one per frame)");
  ra->add_option("--scenes", a_.scenes, "Scene corpus directory")->required();
  ra->add_option("--clouds", a_.clouds, "Point-cloud root (default: the scenes directory)");
  ra->add_option("--out", a_.out, "Output directory for <frame_id>.ppm")->required();
  ra->add_option("--config", a_.config, "Pipeline config supplying the viewport");
  ra->add_option("--viewport", a_.viewport, "Viewport x_min x_max y_min y_max in meters")->expected(4);
  ra->add_option("--size", a_.size, "Square output size in pixels")->capture_default_str();
  ra->add_option("--line-width", a_.line_width, "Lane line width in pixels before resizing")->capture_default_str();

  auto* ca = app_.add_subcommand("caption", "Build a QA corpus (JSON lines) from scene records");
  ca->add_option("--scenes", a_.scenes, "Scene corpus directory")->required();
  ca->add_option("--out", a_.out, "Output JSONL file")->required();
  ca->add_option("--stage", a_.stage_name, "QA stage")->check(CLI::IsMember({"map", "visibility", "all"}))->capture_default_str();
  ca->add_option("--split", a_.split, "Corpus split")->check(CLI::IsMember({"train", "test", "all"}))->capture_default_str();
  ca->add_flag("--fix-grammar", a_.fix_grammar, "Singularize \"1 lanes\" in captions");
  ca->add_option("--vocab-out", a_.vocab_out, "Also write the vocabulary of this corpus");

  auto* tr = app_.add_subcommand("train", "Run one instruction-tuning stage");
  tr->add_option("--stage", a_.stage, "Training stage (1 map, 2 visibility)")->check(CLI::IsMember({1, 2}))->capture_default_str();
  tr->add_option("--qa", a_.qa, "QA corpus JSONL (repeatable)")->required();
  tr->add_option("--scenes", a_.scenes, "Scene corpus to render images from");
  tr->add_option("--clouds", a_.clouds, "Point-cloud root (default: the scenes directory)");
  tr->add_option("--images", a_.images, "Directory of pre-rendered <frame_id>.ppm images");
  tr->add_option("--config", a_.config, "Pipeline config supplying model, training and viewport settings");
  tr->add_option("--init", a_.init, "Stage-1 checkpoint (required for stage 2)");
  tr->add_option("--vocab", a_.vocab, "Vocabulary file (stage 1; default: built from --qa)");
  tr->add_option("--out", a_.out, "Output directory for the checkpoint and report")->capture_default_str();
  tr->add_option("--log-every", a_.log_every, "Log every n-th step")->capture_default_str();

  auto* ge = app_.add_subcommand("generate", "Greedy answers for a QA corpus (JSON lines)");
  ge->add_option("--ckpt", a_.ckpt, "Model checkpoint")->required();
  ge->add_option("--qa", a_.qa, "QA corpus JSONL (repeatable)")->required();
  ge->add_option("--scenes", a_.scenes, "Scene corpus to render images from");
  ge->add_option("--clouds", a_.clouds, "Point-cloud root (default: the scenes directory)");
  ge->add_option("--images", a_.images, "Directory of pre-rendered <frame_id>.ppm images");
  ge->add_option("--config", a_.config, "Pipeline config supplying the viewport");
  ge->add_option("--out", a_.out, "Output JSONL (default: stdout)");
  ge->add_option("--max-new", a_.max_new, "Maximum generated tokens")->capture_default_str();
  ge->add_flag("--use-annotation", a_.use_annotation, "Condition on the map caption");

  auto* eq = app_.add_subcommand("eval-qa", "Score a checkpoint on QA corpora (FRM, QNS, visibility)");
  eq->add_option("--ckpt", a_.ckpt, "Model checkpoint")->required();
  eq->add_option("--qa", a_.qa, "QA corpus JSONL (repeatable)")->required();
  eq->add_option("--scenes", a_.scenes, "Scene corpus to render images from");
  eq->add_option("--clouds", a_.clouds, "Point-cloud root (default: the scenes directory)");
  eq->add_option("--images", a_.images, "Directory of pre-rendered <frame_id>.ppm images");
  eq->add_option("--config", a_.config, "Pipeline config supplying the viewport");
  eq->add_option("--out", a_.out, "Report JSON")->required();
  eq->add_option("--log", a_.log, "Per-question log JSONL");
  eq->add_option("--text", a_.text, "Plain-text report");
  eq->add_option("--max-new", a_.max_new, "Maximum generated tokens")->capture_default_str();
  eq->add_flag("--use-annotation", a_.use_annotation, "Condition on the map caption");

  auto* ed = app_.add_subcommand("eval-det", "Precision, recall, F1 and mAP@0.5 of detections");
  ed->add_option("--pred", a_.pred, "Predictions JSONL {image_id, class, bbox, score}")->required();
  ed->add_option("--gt", a_.gt, "Ground truth JSONL {image_id, class, bbox}")->required();
  ed->add_option("--out", a_.out, "Report JSON")->required();
  ed->add_option("--score-thresh", a_.score_thresh, "Minimum score for P/R/F1")->capture_default_str();

  auto* lf = app_.add_subcommand("lanefit", "Fit polynomial lanes x(y) to a labeled mask");
  lf->add_option("--mask", a_.mask, "Label mask PGM (0 background, 1..K lanes)")->required();
  lf->add_option("--degree", a_.degree, "Polynomial degree")->check(CLI::Range(1, 5))->capture_default_str();
  lf->add_option("--out", a_.out, "Curves JSON (default: stdout)");

  auto* ls = app_.add_subcommand("lanescore", "Point accuracy of fitted lanes against ground truth");
  ls->add_option("--pred", a_.pred, "Curves JSON")->required();
  ls->add_option("--gt", a_.gt, "Ground-truth lanes JSON")->required();
  ls->add_option("--tau", a_.tau, "Pixel tolerance")->capture_default_str();
  ls->add_option("--out", a_.out, "Score JSON");

  auto* pi = app_.add_subcommand("pipeline", "render, caption, stage 1, stage 2, eval from one config");
  pi->add_option("--config", a_.config, "Pipeline config JSON")->required();
  pi->add_flag("--force", a_.force, "Rerun stages whose outputs are up to date");
  pi->add_option("--log-every", a_.log_every, "Log every n-th training step")->capture_default_str();
}

int Cli::run(std::vector<std::string> args) {
  std::reverse(args.begin(), args.end());
  try {
    app_.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app_.exit(e, out_, err_);
  } catch (const CLI::CallForAllHelp& e) {
    return app_.exit(e, out_, err_);
  } catch (const CLI::ParseError& e) {
    (void)app_.exit(e, out_, err_);
    return kExitConfig;
  }
  std::string command = "cli";
  for (const auto* sub : app_.get_subcommands()) command = sub->get_name();
  const LogSink log = [this](const std::string& line) { err_ << line << '\n' << std::flush; };
  try {
    const auto threads = thread_cap(std::getenv("BLLM_THREADS"));
    if (threads) log_event(log, command, "threads", json({{"cap", *threads}, {"used", 1}}).dump());
    return dispatch();
  } catch (const PipelineError& e) {
    log_event(log, e.stage(), "error", json({{"code", e.exit_code()}, {"message", e.what()}}).dump());
    return e.exit_code();
  } catch (const ConfigError& e) {
    log_event(log, command, "error",
              json({{"code", kExitConfig}, {"message", e.what()}, {"violations", e.violations()}}).dump());
    return kExitConfig;
  } catch (const std::exception& e) {
    const bool data = dynamic_cast<const LoadError*>(&e) != nullptr || dynamic_cast<const ParseError*>(&e) != nullptr ||
                      dynamic_cast<const ValidationError*>(&e) != nullptr ||
                      dynamic_cast<const fs::filesystem_error*>(&e) != nullptr;
    const int code = data ? kExitData : default_code(command);
    log_event(log, command, "error", json({{"code", code}, {"message", e.what()}}).dump());
    return code;
  }
}

namespace {

struct Context {
  const Args& a;
  std::ostream& out;
  LogSink log;

  PipelineConfig config() const {
    PipelineConfig c = a.config.empty() ? default_config() : load_config(a.config, false);
    return c;
  }

  std::vector<QASample> samples() const {
    std::vector<QASample> all;
    for (const auto& path : a.qa) {
      auto part = read_qa(path);
      all.insert(all.end(), part.begin(), part.end());
    }
    if (all.empty()) throw ContractError("the QA corpora are empty");
    return all;
  }

  ImageSet images(std::span<const QASample> samples, const RenderOptions& render) const {
    if (!a.images.empty()) return load_image_set(a.images, samples);
    if (a.scenes.empty()) throw ConfigError({"one of --images or --scenes is required"});
    const Corpus corpus = load_corpus(a.scenes);
    std::set<std::string> wanted;
    for (const auto& s : samples) wanted.insert(s.frame_id);
    std::vector<SceneRecord> scenes;
    for (const auto* split : {&corpus.train, &corpus.test})
      for (const auto& s : *split)
        if (wanted.count(s.frame_id) != 0) scenes.push_back(s);
    ImageSet set = render_image_set(scenes, a.clouds.empty() ? fs::path(a.scenes) : fs::path(a.clouds), render);
    log_event(log, "images", "rendered", json({{"count", scenes.size()}}).dump());
    return set;
  }

  void emit(const std::string& path, const std::string& bytes) const {
    if (path.empty()) {
      out << bytes;
    } else {
      if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
      write_file(path, bytes);
    }
  }
};

int cmd_fixtures(const Context& c) {
  const FixtureSet set = write_fixtures(c.a.out, {c.a.fixtures_train, c.a.fixtures_test, c.a.fixtures_seed});
  c.out << "wrote " << set.train.size() << " train and " << set.test.size() << " test scenes to " << c.a.out << "\n";
  return kExitOk;
}

int cmd_rasterize(const Context& c) {
  RenderOptions opts = c.config().render;
  if (!c.a.viewport.empty()) {
    opts.viewport.x_min = c.a.viewport[0];
    opts.viewport.x_max = c.a.viewport[1];
    opts.viewport.y_min = c.a.viewport[2];
    opts.viewport.y_max = c.a.viewport[3];
  }
  if (c.a.config.empty()) {
    opts.output_size = c.a.size;
    opts.line_width = c.a.line_width;
  }
  std::vector<std::string> errors;
  try {
    opts.viewport.validate();
  } catch (const ValidationError& e) {
    errors.push_back(e.what());
  }
  if (opts.output_size < 1) errors.push_back("--size must be ≥ 1");
  if (opts.line_width < 1) errors.push_back("--line-width must be ≥ 1");
  if (!errors.empty()) throw ConfigError(errors);

  const Corpus corpus = load_corpus(c.a.scenes);
  std::vector<SceneRecord> all = corpus.train;
  all.insert(all.end(), corpus.test.begin(), corpus.test.end());
  const auto paths = render_frames(all, c.a.clouds.empty() ? fs::path(c.a.scenes) : fs::path(c.a.clouds), opts, c.a.out);
  c.out << "rendered " << paths.size() << " images to " << c.a.out << "\n";
  return kExitOk;
}

int cmd_caption(const Context& c) {
  const Corpus corpus = load_corpus(c.a.scenes);
  std::vector<SceneRecord> scenes;
  if (c.a.split != "test") scenes.insert(scenes.end(), corpus.train.begin(), corpus.train.end());
  if (c.a.split != "train") scenes.insert(scenes.end(), corpus.test.begin(), corpus.test.end());
  const QaStage stage =
      c.a.stage_name == "map" ? QaStage::map : (c.a.stage_name == "visibility" ? QaStage::visibility : QaStage::all);
  const auto samples = build_qa_corpus(scenes, stage, {.fix_grammar = c.a.fix_grammar});
  c.emit(c.a.out, qa_to_jsonl(samples));
  if (!c.a.vocab_out.empty()) {
    const std::vector<std::vector<QASample>> parts = {samples};
    c.emit(c.a.vocab_out, build_vocab(parts).serialize());
  }
  c.out << "wrote " << samples.size() << " QA samples from " << scenes.size() << " scenes to " << c.a.out << "\n";
  return kExitOk;
}

int cmd_train(const Context& c) {
  const PipelineConfig cfg = c.config();
  const auto samples = c.samples();
  if (c.a.stage == 2 && c.a.init.empty()) throw ConfigError({"--init is required for stage 2"});

  std::optional<MultimodalModel> model;
  if (c.a.stage == 2) {
    model.emplace(MultimodalModel::from_checkpoint(Checkpoint::load(c.a.init)));
  } else {
    Vocabulary vocab;
    if (c.a.vocab.empty()) {
      const std::vector<std::vector<QASample>> parts = {samples};
      vocab = build_vocab(parts);
    } else {
      vocab = Vocabulary::deserialize(read_file(c.a.vocab));
    }
    model.emplace(cfg.model_config(vocab.size()), vocab);
  }
  ImageSet images = c.images(samples, cfg.render);

  TrainConfig tc = cfg.train_config(c.a.stage);
  tc.out_dir = c.a.out;
  fs::create_directories(c.a.out);
  if (c.a.stage == 2) tc.init_checkpoint = c.a.init;
  const std::string stage = "stage" + std::to_string(c.a.stage);
  const std::size_t every = std::max<std::size_t>(c.a.log_every, 1);
  tc.on_step = [&](const StepEvent& e) {
    if (e.step % every != 0 && e.step != e.total_steps) return;
    log_event(c.log, stage, "step",
              json({{"step", e.step}, {"total_steps", e.total_steps}, {"epoch", e.epoch}, {"loss", e.loss},
                    {"lr", e.lr}})
                  .dump());
  };
  const TrainReport report = train_stage(*model, samples, images, tc);
  if (report.frozen_digest_before != report.frozen_digest_after) {
    throw NumericError("frozen parameters changed during training");
  }
  const fs::path report_path = fs::path(c.a.out) / ("train_" + stage + ".json");
  write_file(report_path, report.to_json() + "\n");
  c.out << stage << ": " << report.steps << " steps, final loss "
        << fixed(report.loss_trace.empty() ? 0.0 : report.loss_trace.back(), 4) << ", checkpoint "
        << report.checkpoint_path << "\n";
  return kExitOk;
}

EvalResult evaluate(const Context& c) {
  const auto samples = c.samples();
  MultimodalModel model = MultimodalModel::from_checkpoint(Checkpoint::load(c.a.ckpt));
  ImageSet images = c.images(samples, c.config().render);
  return eval_run(model, samples, images, c.a.use_annotation, c.a.max_new);
}

int cmd_generate(const Context& c) {
  const EvalResult r = evaluate(c);
  std::string lines;
  for (const auto& rec : r.log) {
    lines += json({{"frame_id", rec.frame_id},
                   {"category", std::string(to_string(rec.category))},
                   {"question", rec.question},
                   {"pred", rec.pred}})
                 .dump() +
             "\n";
  }
  c.emit(c.a.out, lines);
  return kExitOk;
}

int cmd_eval_qa(const Context& c) {
  const EvalResult r = evaluate(c);
  c.emit(c.a.out, report_to_json(r) + "\n");
  if (!c.a.log.empty()) c.emit(c.a.log, eval_log_to_jsonl(r.log));
  const std::string text = report_to_text(r);
  if (!c.a.text.empty()) c.emit(c.a.text, text);
  c.out << text;
  return kExitOk;
}

int cmd_eval_det(const Context& c) {
  const auto preds = detections_from_jsonl(read_file(c.a.pred), true);
  const auto gts = detections_from_jsonl(read_file(c.a.gt), false);
  const DetReport r = evaluate_detections(preds, gts, c.a.score_thresh);
  c.emit(c.a.out, det_report_to_json(r) + "\n");
  c.out << "precision " << fixed(r.overall.precision, 2) << "  recall " << fixed(r.overall.recall, 2) << "  F1 "
        << fixed(r.overall.f1, 2) << "  mAP@0.5 " << fixed(r.map50, 2) << "\n";
  return kExitOk;
}

int cmd_lanefit(const Context& c) {
  const LaneMask mask{read_pgm(c.a.mask)};
  std::vector<LaneCurve> curves;
  for (const auto& points : extract_instances(mask)) curves.push_back(fit_lane(points, c.a.degree));
  c.emit(c.a.out, curves_to_json(curves) + "\n");
  if (!c.a.out.empty()) c.out << "fitted " << curves.size() << " lanes to " << c.a.out << "\n";
  return kExitOk;
}

int cmd_lanescore(const Context& c) {
  const auto pred = curves_from_json(read_file(c.a.pred));
  const auto gt = gt_lanes_from_json(read_file(c.a.gt));
  const LaneScore s = lane_accuracy(pred, gt, c.a.tau);
  const json j = {{"correct", s.correct}, {"total", s.total}, {"accuracy", s.accuracy}, {"tau", c.a.tau}};
  if (!c.a.out.empty()) c.emit(c.a.out, j.dump(2) + "\n");
  c.out << "lane accuracy " << fixed(s.accuracy, 1) << " (" << s.correct << "/" << s.total << ")\n";
  return kExitOk;
}

int cmd_pipeline(const Context& c) {
  const PipelineConfig cfg = load_config(c.a.config);
  PipelineOptions opts;
  opts.force = c.a.force;
  opts.log = c.log;
  opts.log_every = c.a.log_every;
  const PipelineResult r = run_pipeline(cfg, opts);
  for (const auto& s : r.stages) {
    c.out << std::left << std::setw(8) << s.name << (s.skipped ? "skipped (up to date)" : "done in " + fixed(s.seconds, 1) + " s")
          << "\n";
  }
  c.out << "artifacts in " << r.output.string() << "\n";
  return kExitOk;
}

}  // namespace

int Cli::dispatch() {
  const Context c{a_, out_, [this](const std::string& line) { err_ << line << '\n' << std::flush; }};
  const std::string name = app_.get_subcommands().front()->get_name();
  if (name == "fixtures") return cmd_fixtures(c);
  if (name == "rasterize") return cmd_rasterize(c);
  if (name == "caption") return cmd_caption(c);
  if (name == "train") return cmd_train(c);
  if (name == "generate") return cmd_generate(c);
  if (name == "eval-qa") return cmd_eval_qa(c);
  if (name == "eval-det") return cmd_eval_det(c);
  if (name == "lanefit") return cmd_lanefit(c);
  if (name == "lanescore") return cmd_lanescore(c);
  return cmd_pipeline(c);
}

}  // namespace bllm::cli
