#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cda {

struct DegenerateImage : std::runtime_error {
    explicit DegenerateImage(const std::string& msg) : std::runtime_error("DegenerateImage: " + msg) {}
};

// One 2D grayscale slice. Pixels stay unclipped; `normalized` flags whether
// percentile normalization has been applied.
struct ImageSlice {
    std::vector<float> pixels;  // row-major H*W
    int height = 0;
    int width = 0;
    std::string patient_id;
    int slice_index = 0;
    bool normalized = false;

    float& at(int y, int x) { return pixels[size_t(y) * width + x]; }
    float at(int y, int x) const { return pixels[size_t(y) * width + x]; }
    long size() const { return (long)pixels.size(); }
};

// Per-pixel tissue labels: 0 background, 1 fat, 2 FGT.
struct SegMask {
    std::vector<uint8_t> labels;
    int height = 0;
    int width = 0;

    uint8_t& at(int y, int x) { return labels[size_t(y) * width + x]; }
    uint8_t at(int y, int x) const { return labels[size_t(y) * width + x]; }
};

inline constexpr int kLabelBackground = 0;
inline constexpr int kLabelFat = 1;
inline constexpr int kLabelFgt = 2;
inline constexpr int kNumLabels = 3;

// Rank percentile with linear interpolation between order statistics:
// position p/100*(n-1) on the sorted values. q in [0, 100].
inline double percentile(std::vector<float> values, double q) {
    if (values.empty()) throw DegenerateImage("percentile of empty set");
    std::sort(values.begin(), values.end());
    double pos = q / 100.0 * double(values.size() - 1);
    size_t lo = size_t(pos);
    size_t hi = std::min(lo + 1, values.size() - 1);
    double frac = pos - double(lo);
    return double(values[lo]) * (1.0 - frac) + double(values[hi]) * frac;
}

// Affine map v -> (v - P_low)/(P_high - P_low), no clipping. After this the
// low percentile measures 0 and the high percentile measures 1.
inline ImageSlice normalize_intensity(const ImageSlice& image, double p_low = 10.0,
                                      double p_high = 99.0) {
    double lo = percentile(image.pixels, p_low);
    double hi = percentile(image.pixels, p_high);
    if (!(hi > lo))
        throw DegenerateImage("P" + std::to_string(int(p_low)) + " == P" +
                              std::to_string(int(p_high)) + " (constant or near-constant image)");
    ImageSlice out = image;
    const float offset = float(lo);
    const float scale = float(1.0 / (hi - lo));
    for (auto& v : out.pixels) v = (v - offset) * scale;
    out.normalized = true;
    return out;
}

// Bilinear resampling with the pixel-center convention:
// src = (dst + 0.5) * (src_size/dst_size) - 0.5, edges clamped.
inline std::vector<float> bilinear_resize(const std::vector<float>& src, int sh, int sw, int dh,
                                          int dw) {
    std::vector<float> dst(size_t(dh) * dw);
    const double sy = double(sh) / dh;
    const double sx = double(sw) / dw;
    for (int y = 0; y < dh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = int(std::floor(fy));
        double wy = fy - y0;
        int y0c = std::clamp(y0, 0, sh - 1);
        int y1c = std::clamp(y0 + 1, 0, sh - 1);
        for (int x = 0; x < dw; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = int(std::floor(fx));
            double wx = fx - x0;
            int x0c = std::clamp(x0, 0, sw - 1);
            int x1c = std::clamp(x0 + 1, 0, sw - 1);
            double top = double(src[size_t(y0c) * sw + x0c]) * (1 - wx) +
                         double(src[size_t(y0c) * sw + x1c]) * wx;
            double bot = double(src[size_t(y1c) * sw + x0c]) * (1 - wx) +
                         double(src[size_t(y1c) * sw + x1c]) * wx;
            dst[size_t(y) * dw + x] = float(top * (1 - wy) + bot * wy);
        }
    }
    return dst;
}

inline ImageSlice resize_slice(const ImageSlice& img, int dh, int dw) {
    ImageSlice out = img;
    out.pixels = bilinear_resize(img.pixels, img.height, img.width, dh, dw);
    out.height = dh;
    out.width = dw;
    return out;
}

inline bool all_finite(const std::vector<float>& v) {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace cda
