#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "cda/data/image.hpp"

namespace cda {

struct VolumeTooShallow : std::runtime_error {
    explicit VolumeTooShallow(const std::string& msg)
        : std::runtime_error("VolumeTooShallow: " + msg) {}
};

struct Volume {
    std::vector<float> voxels;  // depth * height * width, slice-major
    int depth = 0, height = 0, width = 0;

    const float* slice(int z) const { return &voxels[size_t(z) * height * width]; }
};

// Drops `discard` slices at each end, resizes the rest to target
// resolution (bilinear), then percentile-normalizes each slice.
inline std::vector<ImageSlice> ingest_volume(const Volume& volume, const std::string& patient_id,
                                             int discard = 20, int target_size = 224) {
    if (volume.depth <= 2 * discard)
        throw VolumeTooShallow("depth " + std::to_string(volume.depth) + " <= 2*" +
                               std::to_string(discard));
    std::vector<ImageSlice> out;
    for (int z = discard; z < volume.depth - discard; ++z) {
        ImageSlice s;
        s.height = volume.height;
        s.width = volume.width;
        s.patient_id = patient_id;
        s.slice_index = z;
        s.pixels.assign(volume.slice(z), volume.slice(z) + size_t(volume.height) * volume.width);
        if (s.height != target_size || s.width != target_size)
            s = resize_slice(s, target_size, target_size);
        out.push_back(normalize_intensity(s));
    }
    return out;
}

}  // namespace cda
