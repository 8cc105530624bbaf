#pragma once

#include <CLI11.hpp>

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace bllm::cli {

// Flag values of every subcommand.
struct Args {
  std::size_t fixtures_train = 8;
  std::size_t fixtures_test = 2;
  std::uint64_t fixtures_seed = 7;

  std::string scenes;
  std::string clouds;
  std::string images;
  std::string out;
  std::string config;
  std::vector<double> viewport;
  std::size_t size = 448;
  int line_width = 2;

  std::string stage_name = "map";
  std::string split = "all";
  bool fix_grammar = false;
  std::string vocab_out;

  int stage = 1;
  std::vector<std::string> qa;
  std::string init;
  std::string vocab;

  std::string ckpt;
  std::size_t max_new = 16;
  bool use_annotation = false;
  std::string log;
  std::string text;

  std::string pred;
  std::string gt;
  double score_thresh = 0.0;

  std::string mask;
  int degree = 2;
  double tau = 20.0;

  bool force = false;
  std::size_t log_every = 10;
};

class Cli {
 public:
  Cli(std::ostream& out, std::ostream& err);
  Cli(const Cli&) = delete;
  Cli& operator=(const Cli&) = delete;

  CLI::App& app() { return app_; }
  // args excludes the program name; returns the process exit code.
  int run(std::vector<std::string> args);

 private:
  int dispatch();

  std::ostream& out_;
  std::ostream& err_;
  CLI::App app_;
  Args a_;
};

// Positive integer from BLLM_THREADS, nullopt when unset; throws ConfigError
// on anything else.
std::optional<std::size_t> thread_cap(const char* value);

}  // namespace bllm::cli
