#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lift::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 1,  // also checkpoint and format errors
  kNonFiniteLoss = 2,
  kGradcheckFailed = 3,
};

/// Entry point for `liftcli <command> [flags]`. Machine-readable results go to
/// `out` as tab-separated lines; diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lift::cli
