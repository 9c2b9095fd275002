#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "diffdti/nn/tensor.hpp"

namespace diffdti {

// Self-describing archive of named arrays plus string/scalar entries. Used for
// checkpoints: config echo, parameters, EMA shadow, optimizer state, step.
struct Archive {
    std::map<std::string, nn::Tensor> tensors;
    std::map<std::string, std::string> strings;
    std::map<std::string, uint64_t> scalars;

    void save(const std::string& path) const;
    static Archive load(const std::string& path);

    const nn::Tensor& tensor(const std::string& name) const;
    const std::string& str(const std::string& name) const;
    uint64_t scalar(const std::string& name) const;
    bool has_tensor(const std::string& name) const { return tensors.count(name) > 0; }
};

} // namespace diffdti
