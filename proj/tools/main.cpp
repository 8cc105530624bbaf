#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) {
  bllm::cli::Cli cli(std::cout, std::cerr);
  return cli.run(std::vector<std::string>(argv + 1, argv + argc));
}
