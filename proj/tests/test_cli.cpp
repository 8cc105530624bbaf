#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "bllm/checkpoint.hpp"
#include "bllm/det_metrics.hpp"
#include "bllm/error.hpp"
#include "bllm/lane_fit.hpp"
#include "bllm/pipeline.hpp"
#include "cli.hpp"

using namespace bllm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  cli::Cli c(out, err);
  const int code = c.run(std::move(args));
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bllm_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("every subcommand documents all of its flags") {
  std::ostringstream sink;
  cli::Cli probe(sink, sink);
  const auto subs = probe.app().get_subcommands([](const CLI::App*) { return true; });
  CHECK(subs.size() == 10);
  for (const CLI::App* sub : subs) {
    const Run r = run({sub->get_name(), "--help"});
    CHECK(r.code == 0);
    CHECK_MESSAGE(r.out.find(sub->get_description()) != std::string::npos, sub->get_name());
    for (const CLI::Option* opt : sub->get_options()) {
      for (const auto& name : opt->get_lnames()) {
        CHECK_MESSAGE(r.out.find("--" + name) != std::string::npos, std::string(sub->get_name() + " --" + name));
      }
      CHECK_MESSAGE(!opt->get_description().empty(), std::string(sub->get_name() + " " + opt->get_name()));
    }
  }
}

TEST_CASE("usage errors exit with the config code") {
  CHECK(run({}).code == kExitConfig);
  CHECK(run({"no-such-command"}).code == kExitConfig);
  CHECK(run({"fixtures"}).code == kExitConfig);
  CHECK(run({"caption", "--scenes", "x", "--out", "y", "--stage", "bogus"}).code == kExitConfig);
  CHECK(cli::thread_cap(nullptr) == std::nullopt);
  CHECK(cli::thread_cap("3") == std::size_t{3});
  CHECK_THROWS_AS(cli::thread_cap("0"), ConfigError);
  CHECK_THROWS_AS(cli::thread_cap("2x"), ConfigError);
  CHECK_THROWS_AS(cli::thread_cap(""), ConfigError);
}

TEST_CASE("pipeline subcommand reports a missing scenes directory") {
  const fs::path dir = scratch("missing");
  write_file(dir / "cfg.json", R"({"version": 1, "paths": {"scenes": "absent", "output": "out"}})");
  const Run r = run({"pipeline", "--config", (dir / "cfg.json").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find((dir / "absent").string()) != std::string::npos);
  const json line = json::parse(r.err.substr(0, r.err.find('\n')));
  CHECK(line["event"] == "error");
  CHECK(line["code"] == kExitConfig);

  write_file(dir / "bad.json", R"({"version": 1, "paths": {"scenes": "absent", "output": "out"}, "model": {"lora_rank": -1}})");
  const Run bad = run({"pipeline", "--config", (dir / "bad.json").string()});
  CHECK(bad.code == kExitConfig);
  CHECK(bad.err.find("model.lora_rank must be ≥ 1") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("data subcommands chain through files") {
  const fs::path dir = scratch("chain");
  REQUIRE(run({"fixtures", "--out", (dir / "scenes").string(), "--train", "3", "--test", "1"}).code == 0);
  const Run ras = run({"rasterize", "--scenes", (dir / "scenes").string(), "--out", (dir / "img").string()});
  REQUIRE(ras.code == 0);
  CHECK(ras.out.find("rendered 4 images") != std::string::npos);
  CHECK(read_ppm(dir / "img" / "frame_007_00000.ppm").width() == 448);

  const Run small = run({"rasterize", "--scenes", (dir / "scenes").string(), "--out", (dir / "small").string(),
                         "--size", "64", "--viewport", "-10", "10", "0", "40"});
  REQUIRE(small.code == 0);
  CHECK(read_ppm(dir / "small" / "frame_007_00000.ppm").width() == 64);
  CHECK(run({"rasterize", "--scenes", (dir / "scenes").string(), "--out", (dir / "bad").string(), "--viewport", "5",
             "-5", "0", "40"})
            .code == kExitConfig);

  const Run cap = run({"caption", "--scenes", (dir / "scenes").string(), "--out", (dir / "map.jsonl").string(),
                       "--split", "train", "--vocab-out", (dir / "vocab.txt").string()});
  REQUIRE(cap.code == 0);
  CHECK(read_qa(dir / "map.jsonl").size() == 12);
  CHECK(fs::exists(dir / "vocab.txt"));

  CHECK(run({"caption", "--scenes", (dir / "nothing").string(), "--out", (dir / "x.jsonl").string()}).code ==
        kExitData);
  fs::remove_all(dir);
}

TEST_CASE("detection and lane subcommands") {
  const fs::path dir = scratch("det");
  write_file(dir / "gt.jsonl", R"({"image_id": "a", "class": 0, "bbox": [0, 0, 10, 10]}
{"image_id": "a", "class": 1, "bbox": [20, 20, 30, 30]}
)");
  write_file(dir / "pred.jsonl", R"({"image_id": "a", "class": 0, "bbox": [0, 0, 10, 10], "score": 0.9}
{"image_id": "a", "class": 1, "bbox": [50, 50, 60, 60], "score": 0.8}
)");
  const Run det = run({"eval-det", "--pred", (dir / "pred.jsonl").string(), "--gt", (dir / "gt.jsonl").string(),
                       "--out", (dir / "det.json").string()});
  REQUIRE(det.code == 0);
  CHECK(det.out.find("mAP@0.5 50.00") != std::string::npos);
  CHECK(json::parse(read_file(dir / "det.json"))["map50"] == 50.0);
  write_file(dir / "broken.jsonl", "{\"image_id\": \"a\"}\n");
  CHECK(run({"eval-det", "--pred", (dir / "broken.jsonl").string(), "--gt", (dir / "gt.jsonl").string(), "--out",
             (dir / "x.json").string()})
            .code == kExitData);

  GrayImage mask(60, 40, 0);
  std::vector<std::vector<Point2>> gt(2);
  for (std::size_t r = 0; r < 40; ++r) {
    mask.at(r, 10) = 1;
    mask.at(r, 45) = 2;
    gt[0].push_back({10.0, static_cast<double>(r)});
    gt[1].push_back({45.0, static_cast<double>(r)});
  }
  write_pgm(dir / "mask.pgm", mask);
  write_file(dir / "gt.json", gt_lanes_to_json(gt));
  const Run fit = run({"lanefit", "--mask", (dir / "mask.pgm").string(), "--degree", "1", "--out",
                       (dir / "lanes.json").string()});
  REQUIRE(fit.code == 0);
  CHECK(curves_from_json(read_file(dir / "lanes.json")).size() == 2);
  const Run score = run({"lanescore", "--pred", (dir / "lanes.json").string(), "--gt", (dir / "gt.json").string(),
                         "--tau", "20"});
  REQUIRE(score.code == 0);
  CHECK(score.out.find("lane accuracy 100.0 (80/80)") != std::string::npos);
  CHECK(run({"lanefit", "--mask", (dir / "none.pgm").string()}).code == kExitData);
  fs::remove_all(dir);
}

TEST_CASE("train, generate and eval-qa subcommands") {
  const fs::path dir = scratch("train");
  REQUIRE(run({"fixtures", "--out", (dir / "scenes").string(), "--train", "2", "--test", "1"}).code == 0);
  const std::string scenes = (dir / "scenes").string();
  REQUIRE(run({"caption", "--scenes", scenes, "--out", (dir / "map.jsonl").string(), "--split", "train"}).code == 0);
  REQUIRE(run({"caption", "--scenes", scenes, "--out", (dir / "vis.jsonl").string(), "--split", "train", "--stage",
               "visibility"})
              .code == 0);
  write_file(dir / "cfg.json", R"({"version": 1, "model": {"d_bev": 8, "d": 16, "encoder_layers": 1,
    "encoder_heads": 2, "decoder_layers": 1, "decoder_heads": 2, "mlp_ratio": 2, "max_seq": 320, "lora_rank": 2,
    "lora_alpha": 4.0}, "train": {"stage1": {"epochs": 1, "batch_size": 4}, "stage2": {"epochs": 1, "batch_size": 4}}})");
  const std::string cfg = (dir / "cfg.json").string();
  const std::string ck = (dir / "ckpt").string();

  const Run s1 = run({"train", "--stage", "1", "--qa", (dir / "map.jsonl").string(), "--qa",
                      (dir / "vis.jsonl").string(), "--scenes", scenes, "--config", cfg, "--out", ck});
  REQUIRE_MESSAGE(s1.code == 0, s1.err);
  CHECK(fs::exists(dir / "ckpt" / "stage1.bllm"));
  CHECK(s1.err.find("\"event\":\"step\"") != std::string::npos);

  CHECK(run({"train", "--stage", "2", "--qa", (dir / "vis.jsonl").string(), "--scenes", scenes, "--config", cfg,
             "--out", ck})
            .code == kExitConfig);
  const Run s2 = run({"train", "--stage", "2", "--qa", (dir / "vis.jsonl").string(), "--scenes", scenes, "--config",
                      cfg, "--init", (dir / "ckpt" / "stage1.bllm").string(), "--out", ck});
  REQUIRE_MESSAGE(s2.code == 0, s2.err);
  const json report = json::parse(read_file(dir / "ckpt" / "train_stage2.json"));
  CHECK(report["frozen_digest_before"] == report["frozen_digest_after"]);

  const Run gen = run({"generate", "--ckpt", (dir / "ckpt" / "stage2.bllm").string(), "--qa",
                       (dir / "map.jsonl").string(), "--scenes", scenes, "--config", cfg, "--max-new", "4"});
  REQUIRE_MESSAGE(gen.code == 0, gen.err);
  CHECK(std::count(gen.out.begin(), gen.out.end(), '\n') == 8);

  const Run ev = run({"eval-qa", "--ckpt", (dir / "ckpt" / "stage2.bllm").string(), "--qa",
                      (dir / "map.jsonl").string(), "--qa", (dir / "vis.jsonl").string(), "--scenes", scenes,
                      "--config", cfg, "--out", (dir / "eval.json").string(), "--log", (dir / "log.jsonl").string()});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(ev.out.find("FRM") != std::string::npos);
  CHECK(fs::exists(dir / "log.jsonl"));

  CHECK(run({"eval-qa", "--ckpt", (dir / "ckpt" / "missing.bllm").string(), "--qa", (dir / "map.jsonl").string(),
             "--scenes", scenes, "--out", (dir / "e.json").string()})
            .code == kExitData);
  CHECK(run({"train", "--qa", (dir / "map.jsonl").string(), "--config", cfg, "--out", ck}).code == kExitConfig);
  fs::remove_all(dir);
}
