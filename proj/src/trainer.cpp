#include "diffdti/trainer.hpp"

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace diffdti {

using nn::Tensor;

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) fail(ErrorKind::Config, "train: learning_rate must be > 0");
    if (!(grad_clip_max_norm > 0.0))
        fail(ErrorKind::Config, "train: grad_clip_max_norm must be > 0");
    if (!(ema_decay > 0.0) || !(ema_decay < 1.0))
        fail(ErrorKind::Config, "train: ema_decay must be in (0,1)");
    if (batch_size < 1) fail(ErrorKind::Config, "train: batch_size must be >= 1");
    if (max_steps < 0) fail(ErrorKind::Config, "train: max_steps must be >= 0");
    // conditioning is defined for one b0 plus at most six DWIs
    if (n_directions < 1 || n_directions > 6)
        fail(ErrorKind::Config, "train: n_directions must be in [1, 6]");
}

void ema_update(const Tensor& params, Tensor& shadow, double decay) {
    params.require_shape(shadow, "ema_update");
    for (size_t i = 0; i < shadow.v.size(); ++i)
        shadow.v[i] = decay * shadow.v[i] + (1.0 - decay) * params.v[i];
}

void Adam::init(const nn::ParamList& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const auto& p : params) {
        m.push_back(Tensor::zeros_like(*p.value));
        v.push_back(Tensor::zeros_like(*p.value));
    }
}

void Adam::update(const nn::ParamList& params, double lr) {
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& value = *params[i].value;
        const Tensor& grad = *params[i].grad;
        for (size_t k = 0; k < value.v.size(); ++k) {
            const double g = grad.v[k];
            m[i].v[k] = beta1 * m[i].v[k] + (1.0 - beta1) * g;
            v[i].v[k] = beta2 * v[i].v[k] + (1.0 - beta2) * g * g;
            const double mhat = m[i].v[k] / bc1;
            const double vhat = v[i].v[k] / bc2;
            value.v[k] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

void EmaState::init(const nn::ParamList& params) {
    shadow.clear();
    for (const auto& p : params) shadow.push_back(*p.value);
}

void EmaState::update(const nn::ParamList& params) {
    for (size_t i = 0; i < params.size(); ++i) ema_update(*params[i].value, shadow[i], decay);
}

void EmaState::apply_to(const nn::ParamList& params) const {
    for (size_t i = 0; i < params.size(); ++i) *params[i].value = shadow[i];
}

std::vector<int> pick_directions(const GradientTable& table, int n, DirectionPicker picker,
                                 uint64_t seed) {
    std::vector<int> dwi_idx;
    for (size_t i = 0; i < table.size(); ++i)
        if (!table.is_b0(i)) dwi_idx.push_back(static_cast<int>(i));
    if (static_cast<int>(dwi_idx.size()) < n)
        fail(ErrorKind::Data, "direction picker: study has " + std::to_string(dwi_idx.size()) +
                                  " DWIs, need " + std::to_string(n));

    auto draw_subset = [&](Rng& rng) {
        std::vector<int> pool = dwi_idx;
        std::vector<int> subset;
        for (int k = 0; k < n; ++k) {
            const size_t j = rng.uniform_index(pool.size());
            subset.push_back(pool[j]);
            pool.erase(pool.begin() + static_cast<long>(j));
        }
        std::sort(subset.begin(), subset.end());
        return subset;
    };

    Rng rng(seed);
    if (picker == DirectionPicker::Random) return draw_subset(rng);

    // Condition-number heuristic (comparison picker): best of many random
    // subsets by the spread of nonzero singular values of the tensor design.
    auto subset_cond = [&](const std::vector<int>& subset) {
        Eigen::MatrixXd design(n, 6);
        for (int r = 0; r < n; ++r) {
            const Vec3& g = table.directions[subset[static_cast<size_t>(r)]];
            design(r, 0) = g[0] * g[0];
            design(r, 1) = g[1] * g[1];
            design(r, 2) = g[2] * g[2];
            design(r, 3) = 2 * g[0] * g[1];
            design(r, 4) = 2 * g[0] * g[2];
            design(r, 5) = 2 * g[1] * g[2];
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(design);
        const auto& sv = svd.singularValues();
        double smallest = sv(0);
        for (int i = 0; i < sv.size(); ++i)
            if (sv(i) > 1e-12) smallest = sv(i);
        return smallest > 0.0 ? sv(0) / smallest : 1e300;
    };

    std::vector<int> best;
    double best_cond = 1e300;
    const int trials = 200;
    for (int trial = 0; trial < trials; ++trial) {
        std::vector<int> subset = draw_subset(rng);
        const double cond = subset_cond(subset);
        if (cond < best_cond) {
            best_cond = cond;
            best = subset;
        }
    }
    return best;
}

Dataset make_pairs(const std::vector<Tensor>& y_slices, const std::vector<Tensor>& x0_slices) {
    if (y_slices.size() != x0_slices.size())
        fail(ErrorKind::Data, "make_pairs: " + std::to_string(y_slices.size()) + " y slices vs " +
                                  std::to_string(x0_slices.size()) + " x0 slices");
    Dataset ds;
    ds.reserve(y_slices.size());
    for (size_t i = 0; i < y_slices.size(); ++i) ds.push_back({x0_slices[i], y_slices[i]});
    return ds;
}

Trainer::Trainer(nn::FefmNetwork& net, const TrainConfig& config, const SdeSchedule& schedule)
    : net_(net), cfg_(config), schedule_(schedule) {
    cfg_.validate();
    schedule_.validate();
    adam_.init(net_.params());
    ema_.decay = cfg_.ema_decay;
    ema_.init(net_.params());
}

double Trainer::train_step(const Tensor& x0, const Tensor& y, uint64_t step_index,
                           double* grad_norm_out, double* clipped_norm_out) {
    // All stochasticity for this step comes from a stream keyed by (seed, step),
    // which makes checkpoint resume exact.
    Rng step_rng = Rng(cfg_.seed).fork(step_index);

    net_.zero_grad();
    auto score = [this](const Tensor& x_t, const Tensor& cond, const std::vector<double>& t) {
        return net_.forward(x_t, cond, t);
    };
    DsmBatch batch;
    try {
        batch = dsm_loss_batch(score, x0, y, schedule_, step_rng);
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Numeric)
            fail(ErrorKind::Numeric,
                 "train: aborting at step " + std::to_string(step_index) + ": " + e.what());
        throw;
    }
    net_.backward(batch.gscore);

    // global-norm clipping
    double norm_sq = 0.0;
    for (const auto& p : net_.params())
        for (double g : p.grad->v) norm_sq += g * g;
    const double norm = std::sqrt(norm_sq);
    double scale = 1.0;
    if (norm > cfg_.grad_clip_max_norm) scale = cfg_.grad_clip_max_norm / norm;
    if (scale != 1.0)
        for (const auto& p : net_.params())
            for (double& g : p.grad->v) g *= scale;
    if (grad_norm_out) *grad_norm_out = norm;
    if (clipped_norm_out) *clipped_norm_out = norm * scale;

    adam_.update(net_.params(), cfg_.learning_rate);
    ema_.update(net_.params());
    return batch.loss;
}

TrainStats Trainer::train(const Dataset& dataset, const std::string& checkpoint_dir,
                          const std::string& log_path, const TrainHooks& hooks) {
    if (dataset.empty()) fail(ErrorKind::Data, "train: dataset is empty");
    const Tensor& probe = dataset.front().x0;
    if (probe.c != net_.config().x_channels)
        fail(ErrorKind::Config, "train: dataset x0 has " + std::to_string(probe.c) +
                                    " channels, network expects " +
                                    std::to_string(net_.config().x_channels));
    if (dataset.front().y.c != net_.config().cond_channels)
        fail(ErrorKind::Config, "train: dataset y has " + std::to_string(dataset.front().y.c) +
                                    " channels, network expects " +
                                    std::to_string(net_.config().cond_channels));

    std::ofstream log;
    if (!log_path.empty()) {
        const bool fresh = !std::filesystem::exists(log_path);
        log.open(log_path, std::ios::app);
        if (fresh) log << "step,loss,grad_norm,wall_time\n";
    }
    const auto t0 = std::chrono::steady_clock::now();

    TrainStats stats;
    const int H = probe.h, W = probe.w;
    const int cx = probe.c, cy = dataset.front().y.c;
    const uint64_t last = step_ + static_cast<uint64_t>(cfg_.max_steps);
    while (step_ < last) {
        const uint64_t step = step_ + 1;
        Rng pick_rng = Rng(cfg_.seed).fork(step).fork(0x9a7a);
        Tensor x0(cfg_.batch_size, cx, H, W);
        Tensor y(cfg_.batch_size, cy, H, W);
        for (int b = 0; b < cfg_.batch_size; ++b) {
            const size_t idx = pick_rng.uniform_index(dataset.size());
            std::copy(dataset[idx].x0.v.begin(), dataset[idx].x0.v.end(), x0.sample(b));
            std::copy(dataset[idx].y.v.begin(), dataset[idx].y.v.end(), y.sample(b));
        }
        double norm = 0.0, clipped = 0.0;
        const double loss = train_step(x0, y, step, &norm, &clipped);
        step_ = step;

        if (stats.steps == 0) stats.first_loss = loss;
        stats.final_loss = loss;
        ++stats.steps;
        stats.loss_history.push_back(loss);
        stats.grad_norm_history.push_back(clipped);

        if (log.is_open() && (step % static_cast<uint64_t>(cfg_.log_every) == 0 || step == last)) {
            const double wall =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log << step << "," << loss << "," << clipped << "," << wall << "\n";
            log.flush();
        }
        if (hooks.on_step) hooks.on_step(step, loss, norm, clipped);

        if (!checkpoint_dir.empty() && cfg_.checkpoint_every > 0 &&
            step % static_cast<uint64_t>(cfg_.checkpoint_every) == 0) {
            make_checkpoint().save(checkpoint_dir + "/ckpt_" + std::to_string(step) + ".ddt");
        }
    }
    return stats;
}

Archive Trainer::make_checkpoint(const std::map<std::string, std::string>& config_echo) const {
    Archive a;
    for (const auto& [key, value] : config_echo) a.strings["config/" + key] = value;
    const auto& params = net_.params();
    for (size_t i = 0; i < params.size(); ++i) {
        a.tensors["param/" + params[i].name] = *params[i].value;
        a.tensors["ema/" + params[i].name] = ema_.shadow[i];
        a.tensors["adam/m/" + params[i].name] = adam_.m[i];
        a.tensors["adam/v/" + params[i].name] = adam_.v[i];
    }
    a.scalars["trainer/step"] = step_;
    a.scalars["adam/step"] = adam_.step;
    a.scalars["trainer/seed"] = cfg_.seed;
    return a;
}

void Trainer::restore(const Archive& archive) {
    auto& params = net_.params();
    for (size_t i = 0; i < params.size(); ++i) {
        const std::string& name = params[i].name;
        params[i].value->require_shape(archive.tensor("param/" + name), "restore");
        *params[i].value = archive.tensor("param/" + name);
        ema_.shadow[i] = archive.tensor("ema/" + name);
        adam_.m[i] = archive.tensor("adam/m/" + name);
        adam_.v[i] = archive.tensor("adam/v/" + name);
    }
    step_ = archive.scalar("trainer/step");
    adam_.step = archive.scalar("adam/step");
}

} // namespace diffdti
