#pragma once

#include "diffdti/run_config.hpp"

namespace diffdti {

// Pipeline entry points behind the CLI subcommands. All artifact paths are
// rooted at out_dir. Errors are reported as diffdti::Error.
void cmd_phantom(const RunConfig& cfg);
void cmd_fit(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_sample(const RunConfig& cfg);
void cmd_eval(const RunConfig& cfg);
void cmd_ablate(const RunConfig& cfg);

// Dispatch by subcommand name; unknown name -> usage error.
void run_command(const std::string& name, const RunConfig& cfg);

} // namespace diffdti
