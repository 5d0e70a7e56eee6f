#pragma once

#include <string>
#include <vector>

namespace fme::cli {

// Exit codes: 0 success, 1 verification failure, 2 usage/config error,
// 3 numerical abort.
int run(const std::vector<std::string>& args);

}  // namespace fme::cli
