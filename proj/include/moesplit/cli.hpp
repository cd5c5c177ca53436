#pragma once

#include <iosfwd>

namespace moesplit {

/// Entry point of the `moesplit` tool. Returns 0 on success, 1 when a command
/// fails (failed certificate, bad checkpoint, divergence), 2 on usage or
/// configuration errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace moesplit
