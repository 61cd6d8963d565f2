#pragma once

// `dehaze` command-line front end: synth, train, finetune, dehaze, eval,
// ablate. Settings resolve as flags > config file > built-in defaults.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 bad input data,
// 4 I/O failure, 5 internal error, 6 non-finite training loss.

namespace dehaze {

/// Environment variable naming the default output root (a subcommand's
/// default --out is <root>/<subcommand>; "runs" when unset).
inline constexpr const char* kOutputRootEnv = "DEHAZE_OUTPUT_ROOT";

int run_cli(int argc, char** argv);

}  // namespace dehaze
