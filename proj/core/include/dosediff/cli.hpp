#pragma once

#include <string>
#include <vector>

namespace dosediff::io {

// Command-line entry point shared by the dosediff tool and the tests.
// Subcommands: gen-data, pretrain, train, sample, eval, plot-dvh.
// Returns 0 on success; prints a one-line diagnostic and returns nonzero on
// any failure.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);  // args without argv[0]

}  // namespace dosediff::io
