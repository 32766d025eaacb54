#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cda/core/rng.hpp"

#include "json.hpp"

namespace cda {

struct InvalidScheduleParams : std::runtime_error {
    explicit InvalidScheduleParams(const std::string& msg)
        : std::runtime_error("InvalidScheduleParams: " + msg) {}
};

enum class VarianceChoice { Beta, PosteriorBeta };

inline std::string variance_name(VarianceChoice v) {
    return v == VarianceChoice::Beta ? "beta" : "posterior_beta";
}
inline VarianceChoice variance_from_name(const std::string& s) {
    if (s == "beta") return VarianceChoice::Beta;
    if (s == "posterior_beta") return VarianceChoice::PosteriorBeta;
    throw InvalidScheduleParams("unknown variance choice: " + s);
}

// Per-step diffusion quantities, double precision throughout. alpha_bar is
// indexed 0..T with alpha_bar[0] == 1 exactly; beta/alpha/sigma are indexed
// 1..T (slot 0 unused).
struct NoiseSchedule {
    int T = 0;
    double offset = 0.0;
    VarianceChoice variance = VarianceChoice::Beta;
    std::vector<double> beta;       // size T+1, [0] unused
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // size T+1, cumulative product form (closed form)
    std::vector<double> sigma;      // size T+1, [0] unused

    double sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar[size_t(t)]); }
    double sqrt_one_minus_alpha_bar(int t) const { return std::sqrt(1.0 - alpha_bar[size_t(t)]); }
};

// Squared-cosine alpha-bar: f(t) = cos^2(((t/T + offset)/(1 + offset)) * pi/2),
// alpha_bar_t = f(t)/f(0); beta_t = 1 - alpha_bar_t/alpha_bar_{t-1}, clipped
// at 0.999.
inline double cosine_alpha_bar(int t, int T, double offset) {
    const double half_pi = 1.5707963267948966192313216916398;
    double u = ((double(t) / double(T)) + offset) / (1.0 + offset);
    double c = std::cos(u * half_pi);
    return c * c;
}

inline NoiseSchedule build_cosine_schedule(int T = 1000, double offset = 0.008,
                                           VarianceChoice variance = VarianceChoice::Beta) {
    if (T < 2) throw InvalidScheduleParams("T must be >= 2");
    if (!(offset > 0.0)) throw InvalidScheduleParams("offset must be > 0");
    NoiseSchedule s;
    s.T = T;
    s.offset = offset;
    s.variance = variance;
    s.alpha_bar.resize(size_t(T) + 1);
    s.beta.assign(size_t(T) + 1, 0.0);
    s.alpha.assign(size_t(T) + 1, 1.0);
    s.sigma.assign(size_t(T) + 1, 0.0);
    const double f0 = cosine_alpha_bar(0, T, offset);
    for (int t = 0; t <= T; ++t) s.alpha_bar[size_t(t)] = cosine_alpha_bar(t, T, offset) / f0;
    for (int t = 1; t <= T; ++t) {
        double b = 1.0 - s.alpha_bar[size_t(t)] / s.alpha_bar[size_t(t) - 1];
        b = std::min(b, 0.999);
        s.beta[size_t(t)] = b;
        s.alpha[size_t(t)] = 1.0 - b;
        double var;
        if (variance == VarianceChoice::Beta) {
            var = b;
        } else {
            // posterior variance beta_tilde = (1 - abar_{t-1})/(1 - abar_t) * beta
            double denom = 1.0 - s.alpha_bar[size_t(t)];
            var = denom > 0.0 ? (1.0 - s.alpha_bar[size_t(t) - 1]) / denom * b : 0.0;
        }
        s.sigma[size_t(t)] = std::sqrt(var);
    }
    return s;
}

// Serialized with the full beta array so two implementations can be compared
// bit-for-bit.
inline nlohmann::json schedule_to_json(const NoiseSchedule& s) {
    std::vector<double> beta(s.beta.begin() + 1, s.beta.end());
    return {{"T", s.T},
            {"offset", s.offset},
            {"variance", variance_name(s.variance)},
            {"beta", beta}};
}

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
    NoiseSchedule s = build_cosine_schedule(j.at("T").get<int>(), j.at("offset").get<double>(),
                                            variance_from_name(j.at("variance").get<std::string>()));
    auto beta = j.at("beta").get<std::vector<double>>();
    if ((int)beta.size() != s.T)
        throw InvalidScheduleParams("beta array length != T");
    for (int t = 1; t <= s.T; ++t)
        if (beta[size_t(t) - 1] != s.beta[size_t(t)])
            throw InvalidScheduleParams("beta array disagrees with (T, offset) at t=" +
                                        std::to_string(t));
    return s;
}

inline uint64_t schedule_hash(const NoiseSchedule& s) {
    return fnv1a64(schedule_to_json(s).dump());
}

}  // namespace cda
