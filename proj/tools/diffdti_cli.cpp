// diffdti command-line tool. Talks to the core exclusively through the C API.
//
// Usage: diffdti <command> [--config PATH] [--key=value ...]
// Exit codes: 0 success, 1 runtime/data failure, 2 usage or config error.

#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "diffdti.h"

namespace {

void print_usage(FILE* out) {
    std::fprintf(out,
                 "diffdti %s - DTI map synthesis from few DWIs\n"
                 "\n"
                 "usage: diffdti <command> [--config PATH] [--key=value ...]\n"
                 "\n"
                 "commands:\n"
                 "  phantom   generate a synthetic DWI dataset + manifest\n"
                 "  fit       LLS tensor fit; writes reference FA/MD/ColorFA maps\n"
                 "  train     train the conditional score network\n"
                 "  sample    generate DTI maps for the test split\n"
                 "  eval      PSNR/SSIM/NMSE of generated maps vs references\n"
                 "  ablate    sampler hyperparameter sweeps (N, SNR, sigma_max)\n"
                 "\n"
                 "options:\n"
                 "  --config PATH      key=value config file\n"
                 "  --key=value        override any config key (e.g. --out_dir=run1)\n"
                 "  --out DIR          shorthand for --out_dir=DIR\n"
                 "  --seed N           shorthand for --seed=N\n"
                 "  --help             this text\n"
                 "\n"
                 "common keys: out_dir, manifest, checkpoint, target_map, n_directions,\n"
                 "  num_steps, snr, sigma_min, sigma_max, max_steps, batch_size, seed,\n"
                 "  phantom_size, phantom_subjects, pad_size, erode_radius\n",
                 dd_version());
}

// Aliases for ergonomic flags; everything else must be a schema key.
struct Alias {
    const char* flag;
    const char* key;
};
constexpr Alias kAliases[] = {
    {"--out", "out_dir"},         {"--seed", "seed"},
    {"--size", "phantom_size"},   {"--subjects", "phantom_subjects"},
    {"--num-steps", "num_steps"}, {"--snr", "snr"},
    {"--map", "target_map"},      {"--steps", "max_steps"},
};

int fail_usage(const char* msg) {
    std::fprintf(stderr, "diffdti: %s\n", msg);
    std::fprintf(stderr, "run 'diffdti --help' for usage\n");
    return 2;
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        print_usage(stderr);
        return 2;
    }
    const std::string command = argv[1];
    if (command == "--help" || command == "-h" || command == "help") {
        print_usage(stdout);
        return 0;
    }

    dd_config* cfg = dd_config_create();
    int rc = 0;
    for (int i = 2; i < argc && rc == 0; ++i) {
        std::string arg = argv[i];
        if (arg == "--help" || arg == "-h") {
            print_usage(stdout);
            dd_config_free(cfg);
            return 0;
        }
        if (arg == "--config") {
            if (i + 1 >= argc) {
                dd_config_free(cfg);
                return fail_usage("--config needs a path");
            }
            if (dd_config_load_file(cfg, argv[++i]) != DD_OK) {
                std::fprintf(stderr, "diffdti: %s\n", dd_last_error());
                rc = 2;
            }
            continue;
        }

        // --key=value, or an aliased "--flag value" pair
        std::string key, value;
        const size_t eq = arg.find('=');
        if (arg.rfind("--", 0) == 0 && eq != std::string::npos) {
            key = arg.substr(2, eq - 2);
            value = arg.substr(eq + 1);
            for (auto& ch : key)
                if (ch == '-') ch = '_';
        } else {
            bool matched = false;
            for (const auto& alias : kAliases)
                if (arg == alias.flag) {
                    if (i + 1 >= argc) {
                        dd_config_free(cfg);
                        return fail_usage((arg + " needs a value").c_str());
                    }
                    key = alias.key;
                    value = argv[++i];
                    matched = true;
                    break;
                }
            if (!matched) {
                dd_config_free(cfg);
                return fail_usage(("unrecognized argument: " + arg).c_str());
            }
        }
        if (dd_config_set(cfg, key.c_str(), value.c_str()) != DD_OK) {
            std::fprintf(stderr, "diffdti: %s\n", dd_last_error());
            rc = 2;
        }
    }

    if (rc == 0) {
        const dd_status status = dd_run(command.c_str(), cfg);
        if (status != DD_OK) {
            std::fprintf(stderr, "diffdti: %s\n", dd_last_error());
            rc = static_cast<int>(status);
        }
    }
    dd_config_free(cfg);
    return rc;
}
