#pragma once

#include <string>
#include <vector>

namespace desklm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Parses argv (without the program name), dispatches to the requested stage,
// writes a run manifest beside the outputs, and returns the exit status.
// Usage and config errors yield kExitUsage; runtime failures kExitRuntime.
int dispatch(const std::vector<std::string>& args);

}  // namespace desklm::cli
