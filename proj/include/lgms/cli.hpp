#pragma once

#include <string>
#include <vector>

#include "lgms/arch.hpp"
#include "lgms/train.hpp"

namespace lgms::cli {

enum class Command { train, eval, predict, profile, gradcheck, analyze, make_synthetic };

struct RunConfig {
  Command command = Command::train;
  arch::ModelConfig model;
  train::Hyper hyper;
  std::int64_t size = 0;  // resize edge for ingestion / FLOP resolution; 0 = native
  std::string data_dir;
  std::string checkpoint;
  std::string out_dir;
};

// Entry point shared by the binary and the tests. Returns the process exit
// status; failures print a single `error: ...` line to stderr.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

// Every flag name the parser accepts, across all subcommands (for coverage
// checks against --help output).
std::vector<std::string> all_option_names();

}  // namespace lgms::cli
