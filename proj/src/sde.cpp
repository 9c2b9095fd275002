#include "diffdti/sde.hpp"

#include <cmath>

namespace diffdti {

using nn::Tensor;

void SdeSchedule::validate() const {
    if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
        fail(ErrorKind::Config, "sde schedule: need 0 < sigma_min < sigma_max");
    if (num_steps < 1) fail(ErrorKind::Config, "sde schedule: num_steps must be >= 1");
}

double sigma_at(const SdeSchedule& schedule, double t) {
    schedule.validate();
    if (t < 0.0 || t > 1.0)
        fail(ErrorKind::Data, "sigma_at: t=" + std::to_string(t) + " outside [0,1]");
    return schedule.sigma_min * std::pow(schedule.sigma_max / schedule.sigma_min, t);
}

Tensor perturb(const Tensor& x0, double t, const Tensor& noise, const SdeSchedule& schedule) {
    x0.require_shape(noise, "perturb");
    const double sigma = sigma_at(schedule, t);
    Tensor x_t = x0;
    for (size_t i = 0; i < x_t.v.size(); ++i) x_t.v[i] += sigma * noise.v[i];
    return x_t;
}

Tensor score_target(const Tensor& x_t, const Tensor& x0, double t, const SdeSchedule& schedule) {
    x_t.require_shape(x0, "score_target");
    const double sigma = sigma_at(schedule, t);
    const double inv_var = 1.0 / (sigma * sigma);
    Tensor s = x_t;
    for (size_t i = 0; i < s.v.size(); ++i) s.v[i] = -(x_t.v[i] - x0.v[i]) * inv_var;
    return s;
}

namespace {

// Shared draw protocol: one t per element, fresh Gaussian noise, x_t = x0 + sigma z.
struct Draw {
    Tensor x_t;
    Tensor noise;
    std::vector<double> t;
    std::vector<double> sigma;
};

Draw draw_batch(const Tensor& x0, const SdeSchedule& schedule, Rng& rng, double t_eps) {
    if (x0.n < 1) fail(ErrorKind::Data, "dsm_loss: empty batch");
    schedule.validate();
    Draw d;
    d.t.resize(x0.n);
    d.sigma.resize(x0.n);
    d.noise = Tensor::zeros_like(x0);
    d.x_t = x0;
    const size_t plane = x0.size() / x0.n;
    for (int b = 0; b < x0.n; ++b) {
        d.t[b] = rng.uniform(t_eps, 1.0);
        d.sigma[b] = schedule.sigma_min * std::pow(schedule.sigma_max / schedule.sigma_min, d.t[b]);
        double* z = d.noise.sample(b);
        double* xt = d.x_t.sample(b);
        for (size_t i = 0; i < plane; ++i) {
            z[i] = rng.gauss();
            xt[i] += d.sigma[b] * z[i];
        }
    }
    return d;
}

} // namespace

double dsm_loss(const ScoreFn& score, const Tensor& x0, const Tensor& y,
                const SdeSchedule& schedule, Rng& rng, double t_eps,
                std::vector<double>* t_drawn) {
    DsmBatch batch = dsm_loss_batch(score, x0, y, schedule, rng, t_eps);
    if (t_drawn) *t_drawn = batch.t;
    return batch.loss;
}

DsmBatch dsm_loss_batch(const ScoreFn& score, const Tensor& x0, const Tensor& y,
                        const SdeSchedule& schedule, Rng& rng, double t_eps) {
    Draw d = draw_batch(x0, schedule, rng, t_eps);
    DsmBatch out;
    out.x_t = d.x_t;
    out.t = d.t;
    out.score = score(d.x_t, y, d.t);
    out.score.require_shape(x0, "dsm_loss: score output");

    const size_t plane = x0.size() / x0.n;
    out.gscore = Tensor::zeros_like(x0);
    double loss = 0.0;
    for (int b = 0; b < x0.n; ++b) {
        const double sigma = d.sigma[b];
        const double lambda = sigma * sigma;
        const double* s = out.score.sample(b);
        const double* z = d.noise.sample(b);
        double* g = out.gscore.sample(b);
        double acc = 0.0;
        for (size_t i = 0; i < plane; ++i) {
            // (x_t - x0)/sigma^2 = z/sigma
            const double r = s[i] + z[i] / sigma;
            acc += r * r;
            g[i] = 2.0 * lambda * r / (static_cast<double>(plane) * x0.n);
        }
        const double term = lambda * acc / static_cast<double>(plane);
        if (!std::isfinite(term))
            fail(ErrorKind::Numeric,
                 "dsm_loss: non-finite loss at t=" + std::to_string(d.t[b]));
        loss += term;
    }
    out.loss = loss / x0.n;
    return out;
}

void SamplerConfig::validate() const {
    schedule.validate();
    if (!(snr > 0.0)) fail(ErrorKind::Config, "sampler: snr must be > 0");
    if (corrector_steps < 0) fail(ErrorKind::Config, "sampler: corrector_steps must be >= 0");
}

namespace {

double tensor_norm(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.v) acc += v * v;
    return std::sqrt(acc);
}

void check_state(const Tensor& x, int iteration) {
    for (double v : x.v)
        if (!std::isfinite(v))
            fail(ErrorKind::Numeric,
                 "pc_sample: state diverged (non-finite) at iteration " + std::to_string(iteration));
}

} // namespace

Tensor pc_sample(const ScoreFn& score, const Tensor& y, int x_channels,
                 const SamplerConfig& config) {
    config.validate();
    const SdeSchedule& sched = config.schedule;
    const int N = sched.num_steps;
    Rng rng(config.rng_seed);

    Tensor x(y.n, x_channels, y.h, y.w);
    for (auto& v : x.v) v = sched.sigma_max * rng.gauss();

    Tensor z = Tensor::zeros_like(x);
    std::vector<double> t_vec(static_cast<size_t>(y.n));

    auto sigma_of = [&](int i) {
        return sched.sigma_min *
               std::pow(sched.sigma_max / sched.sigma_min, static_cast<double>(i) / N);
    };

    for (int i = N; i >= 1; --i) {
        const double t_i = static_cast<double>(i) / N;
        std::fill(t_vec.begin(), t_vec.end(), t_i);
        const double sig_i = sigma_of(i);
        const double sig_prev = sigma_of(i - 1);

        // corrector: Langevin refinement at the current level
        for (int c = 0; c < config.corrector_steps; ++c) {
            Tensor s = score(x, y, t_vec);
            check_state(s, i);
            for (auto& v : z.v) v = rng.gauss();
            const double s_norm = tensor_norm(s);
            const double z_norm = tensor_norm(z);
            if (s_norm > 0.0) {
                const double ratio = config.snr * z_norm / s_norm;
                const double eps = 2.0 * ratio * ratio;
                const double root = std::sqrt(2.0 * eps);
                for (size_t k = 0; k < x.v.size(); ++k) x.v[k] += eps * s.v[k] + root * z.v[k];
            }
            check_state(x, i);
        }

        // predictor: reverse diffusion from sigma_i to sigma_{i-1}
        Tensor s = score(x, y, t_vec);
        check_state(s, i);
        const double beta = sig_i * sig_i - sig_prev * sig_prev;
        for (size_t k = 0; k < x.v.size(); ++k) x.v[k] += beta * s.v[k];
        if (i > 1) {
            const double root = std::sqrt(beta);
            for (auto& v : x.v) v += root * rng.gauss();
        }
        check_state(x, i);
    }
    return x;
}

} // namespace diffdti
