#pragma once

#include <map>
#include <string>
#include <vector>

#include "diffdti/common.hpp"

namespace diffdti {

// Flat key=value run configuration with a fixed schema; unknown keys are
// rejected. Values are stored as strings and parsed on access.
class RunConfig {
public:
    RunConfig() = default;

    static RunConfig from_file(const std::string& path);
    void load_file(const std::string& path);

    // Validates the key against the schema and the value against its type.
    void set(const std::string& key, const std::string& value);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key) const;
    int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<double> get_list(const std::string& key) const;

    // Every key with its effective value (defaults included), for echoing into
    // checkpoints and reports.
    std::map<std::string, std::string> effective() const;

    // Only the keys that were set explicitly (file or override).
    const std::map<std::string, std::string>& explicitly_set() const { return values_; }

    static const std::map<std::string, std::string>& schema(); // key -> type name

private:
    std::map<std::string, std::string> values_;
};

} // namespace diffdti
