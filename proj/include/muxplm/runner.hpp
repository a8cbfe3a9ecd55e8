#pragma once

#include <functional>
#include <string>
#include <vector>

#include "muxplm/config.hpp"

namespace muxplm {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };
using LogFn = std::function<void(LogLevel, const std::string&)>;

// prime, pretrain, finetune, eval, ensemble-eval, bench, pareto, muxology,
// seed-sweep.
const std::vector<std::string>& command_names();

// Runs one pipeline command. Artifacts land under cfg["out_dir"], including
// <command>.manifest.json with the resolved configuration, the seed triple and
// the library version. Returns a JSON summary of the run.
std::string run_command(const std::string& command, const RunConfig& cfg, const LogFn& log = {});

std::string library_version();

}  // namespace muxplm
