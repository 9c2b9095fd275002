#pragma once

#include <functional>

#include "diffdti/nn/tensor.hpp"
#include "diffdti/rng.hpp"

namespace diffdti {

// Geometric noise schedule of the variance-exploding SDE:
// sigma(t) = sigma_min * (sigma_max / sigma_min)^t, t in [0, 1].
struct SdeSchedule {
    double sigma_min = 0.01;
    double sigma_max = 348.0;
    int num_steps = 1000; // N

    void validate() const;
};

double sigma_at(const SdeSchedule& schedule, double t);

// Forward perturbation kernel: x_t = x0 + sigma(t) * noise.
nn::Tensor perturb(const nn::Tensor& x0, double t, const nn::Tensor& noise,
                   const SdeSchedule& schedule);

// Score of the perturbation kernel: -(x_t - x0) / sigma(t)^2.
nn::Tensor score_target(const nn::Tensor& x_t, const nn::Tensor& x0, double t,
                        const SdeSchedule& schedule);

// Conditional score estimator interface: s(x_t, y, t) with one t per batch row.
using ScoreFn = std::function<nn::Tensor(const nn::Tensor& x_t, const nn::Tensor& y,
                                         const std::vector<double>& t)>;

inline constexpr double kTrainTimeEps = 1e-5; // lower end of the t draw

// Monte-Carlo denoising score-matching loss over one batch with
// lambda(t) = sigma(t)^2:
//   mean_b sigma_b^2 * mean_elem (s(x_t, y, t) + (x_t - x0)/sigma_b^2)^2.
double dsm_loss(const ScoreFn& score, const nn::Tensor& x0, const nn::Tensor& y,
                const SdeSchedule& schedule, Rng& rng, double t_eps = kTrainTimeEps,
                std::vector<double>* t_drawn = nullptr);

// Same draw protocol, but also yields d loss / d score for backpropagation.
struct DsmBatch {
    double loss = 0.0;
    nn::Tensor x_t;
    std::vector<double> t;
    nn::Tensor gscore;               // valid given the score evaluated at x_t
    nn::Tensor score;                // network output, kept for diagnostics
};

DsmBatch dsm_loss_batch(const ScoreFn& score, const nn::Tensor& x0, const nn::Tensor& y,
                        const SdeSchedule& schedule, Rng& rng, double t_eps = kTrainTimeEps);

struct SamplerConfig {
    SdeSchedule schedule;
    double snr = 0.075;          // corrector signal-to-noise ratio r
    int corrector_steps = 1;     // Langevin steps per iteration
    uint64_t rng_seed = 0;

    void validate() const;
};

// Predictor-corrector reverse sampler. Starts from x_N ~ N(0, sigma_max^2 I)
// and runs N iterations; each applies corrector_steps Langevin updates with
// step size eps = 2 (r ||z|| / ||s||)^2 at the current level, then one
// reverse-diffusion predictor step down the schedule. The final predictor
// mean is returned without added noise. Deterministic in rng_seed.
nn::Tensor pc_sample(const ScoreFn& score, const nn::Tensor& y, int x_channels,
                     const SamplerConfig& config);

} // namespace diffdti
