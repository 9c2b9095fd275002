#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "diffdti/checkpoint.hpp"
#include "diffdti/dti_maps.hpp"
#include "diffdti/gradient_table.hpp"
#include "diffdti/nn/fefm.hpp"
#include "diffdti/sde.hpp"

namespace diffdti {

struct TrainConfig {
    double learning_rate = 2e-4;
    double grad_clip_max_norm = 1.0;
    double ema_decay = 0.999;
    int batch_size = 8;
    int max_steps = 5000;
    uint64_t seed = 0;
    MapType target_map = MapType::FA;
    int n_directions = 6;
    int checkpoint_every = 1000;
    int log_every = 50;

    void validate() const;
};

// One training example: target map x0 (C_x channels) and conditioning stack y
// (b0 + n DWIs), both [1, C, H, W].
struct TrainPair {
    nn::Tensor x0;
    nn::Tensor y;
};

using Dataset = std::vector<TrainPair>;

// shadow' = decay * shadow + (1 - decay) * params
void ema_update(const nn::Tensor& params, nn::Tensor& shadow, double decay);

// Adam with bias correction; state is checkpointable.
struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    uint64_t step = 0;
    std::vector<nn::Tensor> m, v;

    void init(const nn::ParamList& params);
    void update(const nn::ParamList& params, double lr);
};

struct EmaState {
    double decay = 0.999;
    std::vector<nn::Tensor> shadow;

    void init(const nn::ParamList& params);
    void update(const nn::ParamList& params);
    // Copy shadow values into the parameter tensors (for inference).
    void apply_to(const nn::ParamList& params) const;
};

// Direction subset selection for conditioning with n < available directions.
enum class DirectionPicker { Random, MinCondition };

std::vector<int> pick_directions(const GradientTable& table, int n, DirectionPicker picker,
                                 uint64_t seed);

// Builds per-slice (x0, y) pairs from a normalized, padded study stack and its
// reference map. y_stack holds b0 followed by the selected DWIs.
Dataset make_pairs(const std::vector<nn::Tensor>& y_slices,
                   const std::vector<nn::Tensor>& x0_slices);

struct TrainStats {
    uint64_t steps = 0;
    double first_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> loss_history;
    std::vector<double> grad_norm_history; // post-clip
};

struct TrainHooks {
    // Called after each optimization step with (step, loss, pre-clip norm,
    // post-clip norm).
    std::function<void(uint64_t, double, double, double)> on_step;
};

class Trainer {
public:
    Trainer(nn::FefmNetwork& net, const TrainConfig& config, const SdeSchedule& schedule);

    // Runs max_steps optimization steps (continuing from the restored step if
    // resume() was called). Checkpoints are written through save_checkpoint.
    TrainStats train(const Dataset& dataset, const std::string& checkpoint_dir = "",
                     const std::string& log_path = "", const TrainHooks& hooks = {});

    // One optimization step on an explicit batch; exposed for tests.
    double train_step(const nn::Tensor& x0, const nn::Tensor& y, uint64_t step_index,
                      double* grad_norm_out = nullptr, double* clipped_norm_out = nullptr);

    Archive make_checkpoint(const std::map<std::string, std::string>& config_echo = {}) const;
    void restore(const Archive& archive);

    uint64_t current_step() const { return step_; }
    const EmaState& ema() const { return ema_; }
    EmaState& ema() { return ema_; }

private:
    nn::FefmNetwork& net_;
    TrainConfig cfg_;
    SdeSchedule schedule_;
    Adam adam_;
    EmaState ema_;
    uint64_t step_ = 0;
};

} // namespace diffdti
