#pragma once

#include <ostream>

namespace ircl {

/// Entry point of the `ircl` tool. Returns 0 on success, 2 on usage errors
/// and 1 on runtime errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ircl
