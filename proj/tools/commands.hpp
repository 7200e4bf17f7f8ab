#pragma once

namespace tdaens::cli {

/// Parses the command line, runs one subcommand and returns the process exit
/// code: 0 success, 2 config/usage errors, 3 numeric or training failures.
int run(int argc, char** argv);

}  // namespace tdaens::cli
