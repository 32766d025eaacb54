#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cda/core/rng.hpp"
#include "cda/core/tensor.hpp"
#include "cda/data/iap.hpp"
#include "cda/diffusion/schedule.hpp"

namespace cda {

struct StepOutOfRange : std::runtime_error {
    explicit StepOutOfRange(const std::string& msg) : std::runtime_error("StepOutOfRange: " + msg) {}
};

struct CounterfactualRequest {
    ConditioningVector c_new;
    int steps = 50;       // forward-noising endpoint, in [0, T]
    double guidance = 3;  // w
    uint64_t seed = 0;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) z, elementwise.
template <class T>
Tensor<T> forward_noise(const Tensor<T>& x0, int t, const Tensor<T>& z,
                        const NoiseSchedule& schedule) {
    if (!x0.same_shape(z)) throw ShapeMismatch("forward_noise: x0 " + x0.shape_str() + " vs z " + z.shape_str());
    if (t < 0 || t > schedule.T) throw StepOutOfRange("t=" + std::to_string(t));
    const T a = T(schedule.sqrt_alpha_bar(t));
    const T b = T(schedule.sqrt_one_minus_alpha_bar(t));
    Tensor<T> out = x0;
    for (long i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * z[i];
    return out;
}

// eps_tilde = (1 - w) eps_uncond + w eps_cond. Written exactly in this form;
// it equals eps_u + w (eps_c - eps_u).
template <class T>
Tensor<T> cfg_epsilon(const Tensor<T>& eps_uncond, const Tensor<T>& eps_cond, double w) {
    if (!eps_uncond.same_shape(eps_cond))
        throw ShapeMismatch("cfg_epsilon: " + eps_uncond.shape_str() + " vs " + eps_cond.shape_str());
    Tensor<T> out = eps_uncond;
    const T wu = T(1.0 - w), wc = T(w);
    for (long i = 0; i < out.size(); ++i) out[i] = wu * eps_uncond[i] + wc * eps_cond[i];
    return out;
}

// x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_tilde)/sqrt(alpha_t) + sigma_t z.
// The caller passes z = 0 on the final step (t == 1).
template <class T>
Tensor<T> ddpm_reverse_step(const Tensor<T>& x_t, const Tensor<T>& eps_tilde, int t,
                            const Tensor<T>& z, const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.T) throw StepOutOfRange("t=" + std::to_string(t));
    if (!x_t.same_shape(eps_tilde) || !x_t.same_shape(z))
        throw ShapeMismatch("ddpm_reverse_step shapes");
    const double alpha_t = schedule.alpha[size_t(t)];
    const T inv_sqrt_alpha = T(1.0 / std::sqrt(alpha_t));
    const T eps_coeff = T((1.0 - alpha_t) / schedule.sqrt_one_minus_alpha_bar(t));
    const T sig = T(schedule.sigma[size_t(t)]);
    Tensor<T> out = x_t;
    for (long i = 0; i < out.size(); ++i)
        out[i] = inv_sqrt_alpha * (x_t[i] - eps_coeff * eps_tilde[i]) + sig * z[i];
    return out;
}

// Batched denoiser interface used during sampling: predicted noise for a
// batch [N,H,W,1] given per-item step indices and conditioning vectors (the
// all-zeros token selects the unconditional branch).
template <class T>
using DenoiserFn = std::function<Tensor<T>(const Tensor<T>& x, const std::vector<int>& t,
                                           const std::vector<ConditioningVector>& c)>;

// Partial noising then CFG-guided reverse diffusion under new conditioning:
// each item is noised to t = steps with one fresh draw, then stepped back to
// t = 0 mixing the unconditional (zero-token) and conditional predictions.
// Noise streams are derived per item so results do not depend on how items
// are grouped into batches; z = 0 on the final step. steps == 0 returns the
// input bit-identically.
template <class T>
Tensor<T> counterfactual_edit_batch(const Tensor<T>& x0,
                                    const std::vector<ConditioningVector>& c_new, int steps,
                                    double guidance, const std::vector<uint64_t>& item_seeds,
                                    const DenoiserFn<T>& denoiser, const NoiseSchedule& schedule) {
    if (steps < 0 || steps > schedule.T) throw StepOutOfRange("steps=" + std::to_string(steps));
    const long n = x0.dim(0);
    if ((long)c_new.size() != n || (long)item_seeds.size() != n)
        throw ShapeMismatch("counterfactual_edit_batch: conditioning/seed count != batch size");
    if (steps == 0) return x0;
    const long item = x0.size() / n;

    std::vector<Rng> streams;
    streams.reserve(size_t(n));
    for (long i = 0; i < n; ++i)
        streams.push_back(derive_rng(item_seeds[size_t(i)], "counterfactual_edit"));

    Tensor<T> z(x0.shape());
    auto draw_z = [&]() {
        for (long i = 0; i < n; ++i) {
            T* zi = z.data() + i * item;
            Rng& r = streams[size_t(i)];
            for (long k = 0; k < item; ++k) zi[k] = T(r.normal());
        }
    };
    draw_z();
    Tensor<T> x = forward_noise(x0, steps, z, schedule);

    std::vector<int> t_batch(size_t(n), 0);
    std::vector<ConditioningVector> uncond(size_t(n),
                                           ConditioningVector(c_new[0].size(), 0.0f));
    for (int t = steps; t >= 1; --t) {
        std::fill(t_batch.begin(), t_batch.end(), t);
        Tensor<T> eps_u = denoiser(x, t_batch, uncond);
        Tensor<T> eps_c = denoiser(x, t_batch, c_new);
        Tensor<T> eps = cfg_epsilon(eps_u, eps_c, guidance);
        if (t > 1)
            draw_z();
        else
            z.zero();
        x = ddpm_reverse_step(x, eps, t, z, schedule);
    }
    return x;
}

// Single-image form mirroring the request type.
template <class T>
Tensor<T> counterfactual_edit(const Tensor<T>& x0_hw, const CounterfactualRequest& request,
                              const DenoiserFn<T>& denoiser, const NoiseSchedule& schedule) {
    Tensor<T> batched = x0_hw.reshaped({1, x0_hw.dim(0), x0_hw.dim(1), 1});
    Tensor<T> out = counterfactual_edit_batch(batched, {request.c_new}, request.steps,
                                              request.guidance, {request.seed}, denoiser, schedule);
    return out.reshaped({x0_hw.dim(0), x0_hw.dim(1)});
}

// Whole-vector conditional dropout: with probability p the conditioning
// collapses to the unconditional all-zeros token.
inline ConditioningVector conditional_dropout(const ConditioningVector& c, double p, Rng& rng) {
    if (p <= 0.0) return c;
    if (rng.uniform() < p) return ConditioningVector(c.size(), 0.0f);
    return c;
}

}  // namespace cda
