#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cda/data/iap.hpp"
#include "cda/data/image.hpp"
#include "cda/io/cdaf.hpp"
#include "cda/io/png.hpp"

namespace cda {

enum class Split { Train, Val, Test, Unassigned };

inline std::string split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        default: return "unassigned";
    }
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    if (s == "unassigned") return Split::Unassigned;
    throw std::runtime_error("unknown split tag: " + s);
}

struct SliceEntry {
    std::string image_path;  // relative to the manifest's directory
    std::string patient_id;
    int slice_index = 0;
    IAPRecord iap;
    std::string mask_path;   // empty when absent
    Split split = Split::Unassigned;
    // 16-bit PNG images store float = raw/65535*scale + offset. cdaf stores
    // floats directly and ignores these.
    double offset = 0.0;
    double scale = 1.0;
};

struct DatasetManifest {
    IAPSchema schema;
    std::string provenance;  // "synthetic" | "ingested"
    bool normalized = false; // whether stored images are already percentile-normalized
    std::vector<SliceEntry> slices;
    std::string root_dir;    // directory the relative paths resolve against

    std::vector<const SliceEntry*> in_split(Split s) const {
        std::vector<const SliceEntry*> out;
        for (const auto& e : slices)
            if (e.split == s) out.push_back(&e);
        return out;
    }

    std::set<std::string> patients() const {
        std::set<std::string> p;
        for (const auto& e : slices) p.insert(e.patient_id);
        return p;
    }

    // Patient-level disjointness across split tags.
    void check_patient_disjoint() const {
        std::map<std::string, Split> seen;
        for (const auto& e : slices) {
            auto [it, inserted] = seen.emplace(e.patient_id, e.split);
            if (!inserted && it->second != e.split)
                throw std::runtime_error("patient " + e.patient_id + " appears in two splits");
        }
    }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["schema"] = schema_to_json(m.schema);
    j["provenance"] = m.provenance;
    j["normalized"] = m.normalized;
    j["slices"] = nlohmann::json::array();
    for (const auto& e : m.slices) {
        nlohmann::json je{{"image", e.image_path},
                          {"patient_id", e.patient_id},
                          {"slice_index", e.slice_index},
                          {"iap", record_to_json(e.iap)},
                          {"split", split_name(e.split)}};
        if (!e.mask_path.empty()) je["mask"] = e.mask_path;
        if (e.offset != 0.0 || e.scale != 1.0) {
            je["offset"] = e.offset;
            je["scale"] = e.scale;
        }
        j["slices"].push_back(std::move(je));
    }
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, std::string root_dir) {
    DatasetManifest m;
    m.schema = schema_from_json(j.at("schema"));
    m.provenance = j.at("provenance").get<std::string>();
    m.normalized = j.value("normalized", false);
    m.root_dir = std::move(root_dir);
    for (const auto& je : j.at("slices")) {
        SliceEntry e;
        e.image_path = je.at("image").get<std::string>();
        e.patient_id = je.at("patient_id").get<std::string>();
        e.slice_index = je.at("slice_index").get<int>();
        e.iap = record_from_json(je.at("iap"));
        e.split = split_from_name(je.at("split").get<std::string>());
        e.mask_path = je.value("mask", std::string{});
        e.offset = je.value("offset", 0.0);
        e.scale = je.value("scale", 1.0);
        m.slices.push_back(std::move(e));
    }
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open manifest for write: " + path);
    f << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path);
    nlohmann::json j;
    f >> j;
    return manifest_from_json(j, std::filesystem::path(path).parent_path().string());
}

inline ImageSlice load_slice(const DatasetManifest& m, const SliceEntry& e) {
    ImageSlice img;
    img.patient_id = e.patient_id;
    img.slice_index = e.slice_index;
    std::string path = (std::filesystem::path(m.root_dir) / e.image_path).string();
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".cdaf") {
        img.pixels = read_cdaf(path, img.height, img.width);
    } else {
        auto raw = read_png_gray16(path, img.height, img.width);
        img.pixels.resize(raw.size());
        for (size_t i = 0; i < raw.size(); ++i)
            img.pixels[i] = float(double(raw[i]) / 65535.0 * e.scale + e.offset);
    }
    img.normalized = m.normalized;
    return img;
}

inline SegMask load_mask(const DatasetManifest& m, const SliceEntry& e) {
    if (e.mask_path.empty()) throw IoError("slice has no mask: " + e.image_path);
    std::string path = (std::filesystem::path(m.root_dir) / e.mask_path).string();
    SegMask mask;
    mask.labels = read_png_gray8(path, mask.height, mask.width);
    return mask;
}

}  // namespace cda
