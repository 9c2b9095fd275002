#include "diffdti/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace diffdti {

namespace {

struct KeySpec {
    const char* key;
    const char* type; // int | float | bool | string | list
    const char* default_value;
};

// The single source of truth for run configuration.
const KeySpec kSchema[] = {
    // paths and data
    {"out_dir", "string", "."},
    {"manifest", "string", ""},
    {"checkpoint", "string", ""},
    {"pad_size", "int", "192"},
    {"erode_radius", "int", "2"},
    {"normalize_percentile", "float", "99"},
    {"normalize_clip", "float", "2.0"},
    {"b_shell", "float", "1000"},
    {"b_tolerance", "float", "50"},
    {"slices_per_subject", "int", "50"},
    // phantom
    {"phantom_size", "int", "64"},
    {"phantom_subjects", "int", "8"},
    {"phantom_test_subjects", "int", "2"},
    {"phantom_slices", "int", "10"},
    {"phantom_regions_min", "int", "3"},
    {"phantom_regions_max", "int", "6"},
    {"phantom_snr", "float", "0"},
    {"phantom_directions", "int", "12"},
    {"phantom_b0_count", "int", "2"},
    // network
    {"target_map", "string", "fa"},
    {"n_directions", "int", "6"},
    {"unet_depth", "int", "4"},
    {"base_channels", "int", "64"},
    {"channel_mult", "list", "1,2,2,2"},
    {"res_blocks", "int", "1"},
    {"gn_groups", "int", "8"},
    {"time_embed_dim", "int", "0"},
    {"fen_patch_size", "int", "16"},
    {"fen_layers", "int", "4"},
    {"fen_heads", "int", "4"},
    {"fen_embed_dim", "int", "256"},
    {"fen_ffn_dim", "int", "0"},
    {"dfb_max_kv_tokens", "int", "256"},
    // SDE / sampler
    {"sigma_min", "float", "0.01"},
    {"sigma_max", "float", "348"},
    {"num_steps", "int", "1000"},
    {"snr", "float", "0.075"},
    {"corrector_steps", "int", "1"},
    {"seed", "int", "0"},
    {"sample_batch", "int", "8"},
    // trainer
    {"learning_rate", "float", "2e-4"},
    {"grad_clip_max_norm", "float", "1.0"},
    {"ema_decay", "float", "0.999"},
    {"batch_size", "int", "8"},
    {"max_steps", "int", "5000"},
    {"checkpoint_every", "int", "1000"},
    {"log_every", "int", "50"},
    {"direction_picker", "string", "random"},
    // eval
    {"eval_masked", "bool", "true"},
    {"ssim_window", "int", "7"},
    // ablation
    {"ablate_n_grid", "list", "200,500,1000,1500,2000"},
    {"ablate_snr_grid", "list", "0.025,0.05,0.075,0.1,0.15"},
    {"ablate_sigma_max_grid", "list", "248,348,448"},
    {"ablate_max_images", "int", "4"},
};

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool parse_double(const std::string& s, double& out) {
    char* end = nullptr;
    out = std::strtod(s.c_str(), &end);
    return end && *end == '\0' && !s.empty();
}

void check_type(const std::string& key, const std::string& type, const std::string& value) {
    if (type == "string") return;
    if (type == "bool") {
        if (value == "true" || value == "false" || value == "0" || value == "1") return;
        fail(ErrorKind::Config, "config: key '" + key + "' expects a bool, got '" + value + "'");
    }
    if (type == "int") {
        double d;
        if (parse_double(value, d) && d == static_cast<double>(static_cast<int64_t>(d))) return;
        fail(ErrorKind::Config, "config: key '" + key + "' expects an integer, got '" + value + "'");
    }
    if (type == "float") {
        double d;
        if (parse_double(value, d)) return;
        fail(ErrorKind::Config, "config: key '" + key + "' expects a number, got '" + value + "'");
    }
    if (type == "list") {
        std::istringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) {
            double d;
            if (!parse_double(trim(item), d))
                fail(ErrorKind::Config,
                     "config: key '" + key + "' expects comma-separated numbers, got '" + value +
                         "'");
        }
        return;
    }
}

} // namespace

const std::map<std::string, std::string>& RunConfig::schema() {
    static const std::map<std::string, std::string> s = [] {
        std::map<std::string, std::string> m;
        for (const auto& spec : kSchema) m[spec.key] = spec.type;
        return m;
    }();
    return s;
}

RunConfig RunConfig::from_file(const std::string& path) {
    RunConfig cfg;
    cfg.load_file(path);
    return cfg;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Config, "cannot open config file: " + path);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            fail(ErrorKind::Config, "config " + path + ": line " + std::to_string(lineno) +
                                        " is not key=value");
        set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const auto& s = schema();
    auto it = s.find(key);
    if (it == s.end()) fail(ErrorKind::Config, "config: unknown key '" + key + "'");
    check_type(key, it->second, value);
    values_[key] = value;
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

std::string RunConfig::get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it != values_.end()) return it->second;
    for (const auto& spec : kSchema)
        if (key == spec.key) return spec.default_value;
    fail(ErrorKind::Config, "config: unknown key '" + key + "'");
}

int64_t RunConfig::get_int(const std::string& key) const {
    return static_cast<int64_t>(get_double(key));
}

double RunConfig::get_double(const std::string& key) const {
    double d;
    const std::string v = get_string(key);
    if (!parse_double(v, d))
        fail(ErrorKind::Config, "config: key '" + key + "' is not numeric: '" + v + "'");
    return d;
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string v = get_string(key);
    return v == "true" || v == "1";
}

std::vector<double> RunConfig::get_list(const std::string& key) const {
    std::vector<double> out;
    std::istringstream ss(get_string(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (trim(item).empty()) continue;
        out.push_back(std::strtod(trim(item).c_str(), nullptr));
    }
    return out;
}

std::map<std::string, std::string> RunConfig::effective() const {
    std::map<std::string, std::string> out;
    for (const auto& spec : kSchema) out[spec.key] = get_string(spec.key);
    return out;
}

} // namespace diffdti
