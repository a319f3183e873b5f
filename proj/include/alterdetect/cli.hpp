#pragma once

#include <ostream>

namespace alterdetect {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitRuntimeError = 3;

/// Entry point of the alterdetect tool. Subcommands: synth, train,
/// calibrate, eval, predict, gridsearch, ablate, compress.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace alterdetect
