#pragma once

#include <string>
#include <vector>

namespace biasedit::cli {

enum ExitCode : int {
  kOk = 0,
  kInternalError = 1,
  kConfigError = 2,
  kDataError = 3,
  kDivergence = 4,
};

/// Entry point shared by the executable and the tests. argv[0] is the
/// program name.
int run(const std::vector<std::string>& args);

/// Block sets for a sweep position label: "12" → first two blocks,
/// "-21" → last two blocks, "-1" → last block.
std::vector<std::size_t> sweep_blocks(const std::string& position, std::size_t n_blocks);

}  // namespace biasedit::cli
