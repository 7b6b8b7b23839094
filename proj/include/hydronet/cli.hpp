#pragma once

namespace hydronet {

/// Entry point for the hydronet command-line tool. Returns the process exit
/// code: 0 on success, 2 on usage/validation errors, 1 on runtime failures.
int run_cli(int argc, char** argv);

}  // namespace hydronet
