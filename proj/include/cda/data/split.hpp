#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cda/core/rng.hpp"
#include "cda/data/manifest.hpp"

namespace cda {

struct TooFewPatients : std::runtime_error {
    explicit TooFewPatients(const std::string& msg) : std::runtime_error("TooFewPatients: " + msg) {}
};
struct InvalidRatios : std::runtime_error {
    explicit InvalidRatios(const std::string& msg) : std::runtime_error("InvalidRatios: " + msg) {}
};

namespace detail {

// Each patient is summarized by its most frequent IAP combination
// (ties -> lexicographically smallest key); patients are the atomic unit.
inline std::map<std::string, std::string> dominant_combo_per_patient(const DatasetManifest& m) {
    std::map<std::string, std::map<std::string, int>> counts;
    for (const auto& e : m.slices) counts[e.patient_id][e.iap.combo_key()] += 1;
    std::map<std::string, std::string> dominant;
    for (const auto& [pid, combos] : counts) {
        const std::string* best = nullptr;
        int best_n = -1;
        for (const auto& [key, n] : combos)
            if (n > best_n) {
                best = &key;
                best_n = n;
            }
        dominant[pid] = *best;
    }
    return dominant;
}

}  // namespace detail

// Iterative stratification over patients keyed by dominant IAP combination.
// Combos are consumed rarest-first; within a combo, each patient goes to the
// split whose per-combo deficit is largest, ties broken by global deficit,
// then by split order. Deterministic given seed.
inline DatasetManifest stratified_patient_split(const DatasetManifest& manifest,
                                                std::array<double, 3> ratios, uint64_t seed) {
    double rsum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(rsum - 1.0) > 1e-9)
        throw InvalidRatios("ratios must sum to 1 (got " + std::to_string(rsum) + ")");
    for (double r : ratios)
        if (r < 0.0) throw InvalidRatios("ratios must be non-negative");

    auto dominant = detail::dominant_combo_per_patient(manifest);
    const long n_patients = (long)dominant.size();
    int active_splits = 0;
    for (double r : ratios)
        if (r > 0.0) ++active_splits;
    if (n_patients < active_splits)
        throw TooFewPatients(std::to_string(n_patients) + " patients for " +
                             std::to_string(active_splits) + " non-empty splits");

    // combo key -> patient ids, seeded shuffle within each combo
    std::map<std::string, std::vector<std::string>> groups;
    for (const auto& [pid, key] : dominant) groups[key].push_back(pid);
    Rng rng = derive_rng(seed, "stratified_split");
    for (auto& [key, pids] : groups) {
        std::sort(pids.begin(), pids.end());
        for (size_t i = pids.size(); i > 1; --i)
            std::swap(pids[i - 1], pids[rng.uniform_int(i)]);
    }

    // rarest combo first; ties by key for determinism
    std::vector<const std::string*> combo_order;
    for (const auto& [key, pids] : groups) combo_order.push_back(&key);
    std::stable_sort(combo_order.begin(), combo_order.end(),
                     [&](const std::string* a, const std::string* b) {
                         size_t na = groups[*a].size(), nb = groups[*b].size();
                         return na != nb ? na < nb : *a < *b;
                     });

    std::array<double, 3> global_target{};
    std::array<long, 3> global_count{};
    for (int s = 0; s < 3; ++s) global_target[size_t(s)] = ratios[size_t(s)] * double(n_patients);

    std::map<std::string, Split> assignment;
    for (const std::string* key : combo_order) {
        const auto& pids = groups[*key];
        std::array<double, 3> combo_target{};
        std::array<long, 3> combo_count{};
        for (int s = 0; s < 3; ++s)
            combo_target[size_t(s)] = ratios[size_t(s)] * double(pids.size());
        for (const auto& pid : pids) {
            int best = -1;
            for (int s = 0; s < 3; ++s) {
                if (ratios[size_t(s)] <= 0.0) continue;
                if (best < 0) {
                    best = s;
                    continue;
                }
                double ds = combo_target[size_t(s)] - double(combo_count[size_t(s)]);
                double db = combo_target[size_t(best)] - double(combo_count[size_t(best)]);
                if (ds > db + 1e-12) {
                    best = s;
                } else if (std::abs(ds - db) <= 1e-12) {
                    double gs = global_target[size_t(s)] - double(global_count[size_t(s)]);
                    double gb = global_target[size_t(best)] - double(global_count[size_t(best)]);
                    if (gs > gb + 1e-12) best = s;
                }
            }
            assignment[pid] = Split(best);
            combo_count[size_t(best)] += 1;
            global_count[size_t(best)] += 1;
        }
    }

    for (int s = 0; s < 3; ++s)
        if (ratios[size_t(s)] > 0.0 && global_count[size_t(s)] == 0)
            throw TooFewPatients("split '" + split_name(Split(s)) + "' would be empty");

    DatasetManifest out = manifest;
    for (auto& e : out.slices) e.split = assignment.at(e.patient_id);
    out.check_patient_disjoint();
    return out;
}

}  // namespace cda
