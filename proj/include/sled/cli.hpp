#pragma once

namespace sled {

// Parses argv, runs one subcommand, maps exceptions to exit codes:
// 0 success, 1 config error, 2 data error, 3 verification failure.
int run_cli(int argc, char** argv);

}  // namespace sled
