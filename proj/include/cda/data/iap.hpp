#pragma once

#include <algorithm>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "cda/core/rng.hpp"

#include "json.hpp"

namespace cda {

struct SchemaMismatch : std::runtime_error {
    explicit SchemaMismatch(const std::string& msg) : std::runtime_error("SchemaMismatch: " + msg) {}
};
struct UnconditionalVector : std::runtime_error {
    explicit UnconditionalVector(const std::string& msg)
        : std::runtime_error("UnconditionalVector: " + msg) {}
};
struct InvalidSchema : std::runtime_error {
    explicit InvalidSchema(const std::string& msg) : std::runtime_error("InvalidSchema: " + msg) {}
};

struct CategoricalVar {
    std::string name;
    std::vector<std::string> labels;  // C_k >= 2 labels
};

struct ContinuousVar {
    std::string name;
    std::string unit;
    double min_value = 0.0;  // must be > 0 so value/max leaves a gap above 0
    double max_value = 0.0;
};

// Acquisition-parameter schema. Categorical one-hot blocks come first in the
// encoded vector, in schema order, followed by one entry per continuous
// variable normalized by its max so 0 stays reserved as the unconditional value.
struct IAPSchema {
    std::vector<CategoricalVar> categorical;
    std::vector<ContinuousVar> continuous;

    int num_categorical() const { return (int)categorical.size(); }
    int num_continuous() const { return (int)continuous.size(); }

    // Sum C_k + M.
    int encoded_width() const {
        int w = num_continuous();
        for (const auto& c : categorical) w += (int)c.labels.size();
        return w;
    }

    void validate() const {
        if (categorical.empty()) throw InvalidSchema("K must be >= 1");
        if (continuous.empty()) throw InvalidSchema("M must be >= 1");
        for (const auto& c : categorical)
            if (c.labels.size() < 2) throw InvalidSchema("categorical '" + c.name + "' needs C_k >= 2");
        for (const auto& c : continuous) {
            if (!(c.min_value > 0.0))
                throw InvalidSchema("continuous '" + c.name + "' needs min_value > 0");
            if (!(c.max_value > c.min_value))
                throw InvalidSchema("continuous '" + c.name + "' needs max_value > min_value");
        }
    }
};

struct IAPRecord {
    std::vector<int> category_ids;     // one per categorical variable
    std::vector<double> values;        // one per continuous variable, raw units

    bool operator==(const IAPRecord& o) const = default;

    void validate_against(const IAPSchema& schema) const {
        if (category_ids.size() != schema.categorical.size() ||
            values.size() != schema.continuous.size())
            throw SchemaMismatch("record field counts do not match schema");
        for (size_t k = 0; k < category_ids.size(); ++k)
            if (category_ids[k] < 0 || category_ids[k] >= (int)schema.categorical[k].labels.size())
                throw SchemaMismatch("category id out of range for '" + schema.categorical[k].name + "'");
        for (size_t m = 0; m < values.size(); ++m) {
            const auto& v = schema.continuous[m];
            if (values[m] < v.min_value || values[m] > v.max_value)
                throw SchemaMismatch("value out of range for '" + v.name + "'");
        }
    }

    // Stable key identifying the IAP combination (continuous values printed
    // to 6 significant digits so protocol-style discrete values compare equal).
    std::string combo_key() const {
        std::string key;
        for (int id : category_ids) key += std::to_string(id) + "|";
        char buf[40];
        for (double v : values) {
            std::snprintf(buf, sizeof buf, "%.6g|", v);
            key += buf;
        }
        return key;
    }
};

using ConditioningVector = std::vector<float>;

// One-hot blocks in schema order, then value/max entries.
inline ConditioningVector encode_iap(const IAPRecord& record, const IAPSchema& schema) {
    record.validate_against(schema);
    ConditioningVector vec(size_t(schema.encoded_width()), 0.0f);
    size_t off = 0;
    for (size_t k = 0; k < schema.categorical.size(); ++k) {
        vec[off + size_t(record.category_ids[k])] = 1.0f;
        off += schema.categorical[k].labels.size();
    }
    for (size_t m = 0; m < schema.continuous.size(); ++m)
        vec[off + m] = float(record.values[m] / schema.continuous[m].max_value);
    return vec;
}

inline ConditioningVector unconditional_token(const IAPSchema& schema) {
    return ConditioningVector(size_t(schema.encoded_width()), 0.0f);
}

inline bool is_unconditional(const ConditioningVector& v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return x == 0.0f; });
}

inline IAPRecord decode_iap(const ConditioningVector& vec, const IAPSchema& schema) {
    if ((int)vec.size() != schema.encoded_width())
        throw SchemaMismatch("vector length " + std::to_string(vec.size()) + " != schema width " +
                             std::to_string(schema.encoded_width()));
    IAPRecord rec;
    size_t off = 0;
    for (const auto& cat : schema.categorical) {
        auto first = vec.begin() + long(off);
        auto last = first + long(cat.labels.size());
        auto it = std::max_element(first, last);
        if (*it == 0.0f) throw UnconditionalVector("all-zero block for '" + cat.name + "'");
        rec.category_ids.push_back(int(it - first));
        off += cat.labels.size();
    }
    for (const auto& cont : schema.continuous) rec.values.push_back(double(vec[off++]) * cont.max_value);
    return rec;
}

inline IAPRecord random_record(const IAPSchema& schema, Rng& rng) {
    IAPRecord rec;
    for (const auto& c : schema.categorical)
        rec.category_ids.push_back(int(rng.uniform_int(c.labels.size())));
    for (const auto& c : schema.continuous)
        rec.values.push_back(rng.uniform(c.min_value, c.max_value));
    return rec;
}

// --- JSON serialization ---

inline nlohmann::json schema_to_json(const IAPSchema& s) {
    nlohmann::json j;
    j["categorical"] = nlohmann::json::array();
    for (const auto& c : s.categorical)
        j["categorical"].push_back({{"name", c.name}, {"labels", c.labels}});
    j["continuous"] = nlohmann::json::array();
    for (const auto& c : s.continuous)
        j["continuous"].push_back(
            {{"name", c.name}, {"unit", c.unit}, {"min", c.min_value}, {"max", c.max_value}});
    return j;
}

inline IAPSchema schema_from_json(const nlohmann::json& j) {
    IAPSchema s;
    for (const auto& c : j.at("categorical"))
        s.categorical.push_back({c.at("name").get<std::string>(),
                                 c.at("labels").get<std::vector<std::string>>()});
    for (const auto& c : j.at("continuous"))
        s.continuous.push_back({c.at("name").get<std::string>(), c.value("unit", std::string{}),
                                c.at("min").get<double>(), c.at("max").get<double>()});
    s.validate();
    return s;
}

inline uint64_t schema_hash(const IAPSchema& s) { return fnv1a64(schema_to_json(s).dump()); }

inline nlohmann::json record_to_json(const IAPRecord& r) {
    return {{"categorical", r.category_ids}, {"continuous", r.values}};
}

inline IAPRecord record_from_json(const nlohmann::json& j) {
    IAPRecord r;
    r.category_ids = j.at("categorical").get<std::vector<int>>();
    r.values = j.at("continuous").get<std::vector<double>>();
    return r;
}

}  // namespace cda
