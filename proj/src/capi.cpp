#include "diffdti.h"

#include <exception>
#include <functional>
#include <string>

#include "diffdti/commands.hpp"
#include "diffdti/run_config.hpp"

using diffdti::Error;
using diffdti::RunConfig;

struct dd_config {
    RunConfig cfg;
};

namespace {

thread_local std::string t_last_error;
thread_local std::string t_get_buffer;

dd_status guard(const std::function<void()>& fn) {
    try {
        fn();
        t_last_error.clear();
        return DD_OK;
    } catch (const Error& e) {
        t_last_error = e.what();
        return e.exit_code() == 2 ? DD_ERR_CONFIG : DD_ERR_RUNTIME;
    } catch (const std::exception& e) {
        t_last_error = e.what();
        return DD_ERR_RUNTIME;
    } catch (...) {
        t_last_error = "unknown error";
        return DD_ERR_RUNTIME;
    }
}

} // namespace

extern "C" {

dd_config* dd_config_create(void) { return new dd_config(); }

void dd_config_free(dd_config* cfg) { delete cfg; }

dd_status dd_config_load_file(dd_config* cfg, const char* path) {
    if (!cfg || !path) {
        t_last_error = "null argument";
        return DD_ERR_CONFIG;
    }
    return guard([&] { cfg->cfg.load_file(path); });
}

dd_status dd_config_set(dd_config* cfg, const char* key, const char* value) {
    if (!cfg || !key || !value) {
        t_last_error = "null argument";
        return DD_ERR_CONFIG;
    }
    return guard([&] { cfg->cfg.set(key, value); });
}

const char* dd_config_get(const dd_config* cfg, const char* key) {
    if (!cfg || !key) return nullptr;
    try {
        t_get_buffer = cfg->cfg.get_string(key);
        return t_get_buffer.c_str();
    } catch (...) {
        return nullptr;
    }
}

dd_status dd_run(const char* command, const dd_config* cfg) {
    if (!command || !cfg) {
        t_last_error = "null argument";
        return DD_ERR_CONFIG;
    }
    return guard([&] { diffdti::run_command(command, cfg->cfg); });
}

dd_status dd_run_phantom(const dd_config* cfg) { return dd_run("phantom", cfg); }
dd_status dd_run_fit(const dd_config* cfg) { return dd_run("fit", cfg); }
dd_status dd_run_train(const dd_config* cfg) { return dd_run("train", cfg); }
dd_status dd_run_sample(const dd_config* cfg) { return dd_run("sample", cfg); }
dd_status dd_run_eval(const dd_config* cfg) { return dd_run("eval", cfg); }
dd_status dd_run_ablate(const dd_config* cfg) { return dd_run("ablate", cfg); }

const char* dd_last_error(void) { return t_last_error.c_str(); }

const char* dd_version(void) { return "0.1.0"; }

} // extern "C"
