#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cda/core/rng.hpp"
#include "cda/data/image.hpp"
#include "cda/data/manifest.hpp"

namespace cda {

struct InvalidConfig : std::runtime_error {
    explicit InvalidConfig(const std::string& msg) : std::runtime_error("InvalidConfig: " + msg) {}
};

// Rendering model, kept analytically simple so class separability can be
// predicted from the config alone:
//   base:      background 0, fat and FGT at fixed base intensities
//   contrast:  I -> anchor + c*(I - anchor) inside the breast, c linear in
//              continuous var `contrast_var` over [contrast_lo, contrast_hi]
//   gamma:     I -> I^gamma, gamma chosen by categorical 0 (the "manufacturer")
//   bias:      I += a*(x/W - 0.5), a chosen by categorical 1 when present
//   noise:     I += sigma*N(0,1), sigma linear in var `noise_var`
// Anatomy depends only on (seed, patient, slice); appearance only on the IAP.
struct PhantomRendering {
    double fat_intensity = 0.55;
    double fgt_intensity = 0.85;
    double contrast_anchor = 0.7;
    std::vector<double> gamma_per_category{0.45, 1.0, 2.2};
    std::vector<double> bias_amplitude_per_category{0.0, 0.12};
    int contrast_var = 0;
    double contrast_lo = 0.9, contrast_hi = 1.1;
    int noise_var = 1;
    double noise_lo = 0.01, noise_hi = 0.05;
};

struct PhantomConfig {
    int n_patients = 50;
    int slices_per_patient = 40;
    int image_size = 64;
    IAPSchema schema;
    PhantomRendering rendering;
    // Candidate protocol values per continuous variable; patients draw from
    // these so IAP combinations form a discrete, stratifiable set.
    std::vector<std::vector<double>> protocol_values;

    void validate() const {
        if (n_patients <= 0 || slices_per_patient <= 0 || image_size <= 0)
            throw InvalidConfig("sizes must be positive");
        if (schema.categorical.empty() || schema.continuous.empty())
            throw InvalidConfig("schema must not be empty");
        schema.validate();
        if (rendering.gamma_per_category.size() != schema.categorical[0].labels.size())
            throw InvalidConfig("gamma_per_category must match categorical 0 arity");
        if (schema.categorical.size() > 1 &&
            rendering.bias_amplitude_per_category.size() != schema.categorical[1].labels.size())
            throw InvalidConfig("bias_amplitude_per_category must match categorical 1 arity");
        if (protocol_values.size() != schema.continuous.size())
            throw InvalidConfig("protocol_values must cover every continuous variable");
        for (size_t m = 0; m < protocol_values.size(); ++m) {
            if (protocol_values[m].empty()) throw InvalidConfig("empty protocol value list");
            for (double v : protocol_values[m])
                if (v < schema.continuous[m].min_value || v > schema.continuous[m].max_value)
                    throw InvalidConfig("protocol value outside schema range for '" +
                                        schema.continuous[m].name + "'");
        }
    }
};

// Built-in desk-scale schema: one gamma-style categorical, one bias-style
// categorical, and two protocol-valued continuous variables.
inline IAPSchema default_phantom_schema() {
    IAPSchema s;
    s.categorical.push_back({"manufacturer", {"vendorA", "vendorB", "vendorC"}});
    s.categorical.push_back({"scan_options", {"none", "ramp"}});
    s.continuous.push_back({"flip_angle", "deg", 7.0, 12.0});
    s.continuous.push_back({"echo_time", "ms", 1.25, 2.756});
    return s;
}

inline PhantomConfig default_phantom_config() {
    PhantomConfig c;
    c.schema = default_phantom_schema();
    c.protocol_values = {{7.0, 9.5, 12.0}, {1.25, 2.0, 2.756}};
    return c;
}

struct PhantomAnatomy {
    double cx, cy;          // ellipse center, normalized [0,1] coords
    double ax, ay;          // ellipse semi-axes, normalized
    struct Blob {
        double u, v, r;     // center in ellipse-normalized coords, radius
    };
    std::vector<Blob> blobs;
    double z_base;          // per-patient phase for the through-slice profile
};

inline PhantomAnatomy make_patient_anatomy(const PhantomConfig& cfg, uint64_t seed, int patient) {
    Rng rng = derive_rng(seed, "phantom_anatomy", uint64_t(patient));
    PhantomAnatomy a;
    a.cx = rng.uniform(0.42, 0.58);
    a.cy = rng.uniform(0.45, 0.60);
    a.ax = rng.uniform(0.26, 0.36);
    a.ay = rng.uniform(0.20, 0.30);
    int n_blobs = 3 + int(rng.uniform_int(4));
    for (int b = 0; b < n_blobs; ++b) {
        PhantomAnatomy::Blob blob;
        double ang = rng.uniform(0.0, 6.283185307179586);
        double rad = rng.uniform(0.0, 0.55);
        blob.u = rad * std::cos(ang);
        blob.v = rad * std::sin(ang);
        blob.r = rng.uniform(0.12, 0.28);
        a.blobs.push_back(blob);
    }
    a.z_base = rng.uniform(0.0, 1.0);
    (void)cfg;
    return a;
}

// Mask from anatomy alone; identical for every IAP by construction.
inline SegMask phantom_mask(const PhantomConfig& cfg, const PhantomAnatomy& a, int slice_idx) {
    const int n = cfg.image_size;
    // breast shrinks toward the ends of the synthetic volume
    double zf = double(slice_idx + 0.5) / double(cfg.slices_per_patient);
    double zscale = 0.8 + 0.2 * std::sin(3.141592653589793 * (0.15 + 0.7 * zf) + 0.3 * a.z_base);
    double ax = a.ax * zscale, ay = a.ay * zscale;
    SegMask mask;
    mask.height = mask.width = n;
    mask.labels.assign(size_t(n) * n, uint8_t(kLabelBackground));
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            double px = (x + 0.5) / n, py = (y + 0.5) / n;
            double eu = (px - a.cx) / ax, ev = (py - a.cy) / ay;
            double d2 = eu * eu + ev * ev;
            if (d2 > 1.0) continue;
            double field = 0.0;
            for (const auto& b : a.blobs) {
                double du = eu - b.u, dv = ev - b.v;
                field += std::exp(-(du * du + dv * dv) / (2.0 * b.r * b.r));
            }
            mask.at(y, x) = field > 0.62 ? uint8_t(kLabelFgt) : uint8_t(kLabelFat);
        }
    }
    return mask;
}

inline double contrast_scale_for(const PhantomConfig& cfg, const IAPRecord& rec) {
    const auto& r = cfg.rendering;
    const auto& var = cfg.schema.continuous[size_t(r.contrast_var)];
    double t = (rec.values[size_t(r.contrast_var)] - var.min_value) / (var.max_value - var.min_value);
    return r.contrast_lo + (r.contrast_hi - r.contrast_lo) * t;
}

inline double noise_sigma_for(const PhantomConfig& cfg, const IAPRecord& rec) {
    const auto& r = cfg.rendering;
    const auto& var = cfg.schema.continuous[size_t(r.noise_var)];
    double t = (rec.values[size_t(r.noise_var)] - var.min_value) / (var.max_value - var.min_value);
    return r.noise_lo + (r.noise_hi - r.noise_lo) * t;
}

// Expected rendered intensity of a tissue under a record, noise and bias
// aside. Tests derive separability thresholds from this.
inline double rendered_tissue_mean(const PhantomConfig& cfg, const IAPRecord& rec,
                                   double base_intensity) {
    const auto& r = cfg.rendering;
    double c = contrast_scale_for(cfg, rec);
    double pre = r.contrast_anchor + c * (base_intensity - r.contrast_anchor);
    return std::pow(pre, r.gamma_per_category[size_t(rec.category_ids[0])]);
}

inline ImageSlice render_phantom_slice(const PhantomConfig& cfg, const PhantomAnatomy& a,
                                       const SegMask& mask, const IAPRecord& rec, Rng& noise_rng) {
    const int n = cfg.image_size;
    const auto& r = cfg.rendering;
    ImageSlice img;
    img.height = img.width = n;
    img.pixels.assign(size_t(n) * n, 0.0f);
    double gamma = r.gamma_per_category[size_t(rec.category_ids[0])];
    double bias_amp = cfg.schema.categorical.size() > 1
                          ? r.bias_amplitude_per_category[size_t(rec.category_ids[1])]
                          : 0.0;
    double c = contrast_scale_for(cfg, rec);
    double sigma = noise_sigma_for(cfg, rec);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            double v = 0.0;
            uint8_t lab = mask.at(y, x);
            if (lab != kLabelBackground) {
                double base = lab == kLabelFgt ? r.fgt_intensity : r.fat_intensity;
                v = r.contrast_anchor + c * (base - r.contrast_anchor);
                v = std::pow(v, gamma);
            }
            v += bias_amp * ((x + 0.5) / n - 0.5);
            v += sigma * noise_rng.normal();
            img.at(y, x) = float(v);
        }
    }
    (void)a;
    return img;
}

inline IAPRecord assign_patient_iap(const PhantomConfig& cfg, uint64_t seed, int patient) {
    IAPRecord rec;
    // categoricals round-robin for exact balance; continuous from protocol values
    int c0 = int(cfg.schema.categorical[0].labels.size());
    rec.category_ids.push_back(patient % c0);
    for (size_t k = 1; k < cfg.schema.categorical.size(); ++k) {
        int ck = int(cfg.schema.categorical[k].labels.size());
        rec.category_ids.push_back((patient / c0) % ck);
    }
    Rng rng = derive_rng(seed, "phantom_iap", uint64_t(patient));
    for (const auto& vals : cfg.protocol_values)
        rec.values.push_back(vals[rng.uniform_int(vals.size())]);
    return rec;
}

// Writes images (cdaf), masks (8-bit png) and the manifest under out_dir.
// Images are raw rendered intensities; normalization happens at load time.
inline DatasetManifest generate_phantom_dataset(const PhantomConfig& cfg, uint64_t seed,
                                                const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");

    DatasetManifest m;
    m.schema = cfg.schema;
    m.provenance = "synthetic";
    m.root_dir = out_dir;

    char name[64];
    for (int p = 0; p < cfg.n_patients; ++p) {
        PhantomAnatomy anatomy = make_patient_anatomy(cfg, seed, p);
        IAPRecord rec = assign_patient_iap(cfg, seed, p);
        std::snprintf(name, sizeof name, "p%04d", p);
        std::string pid = name;
        for (int s = 0; s < cfg.slices_per_patient; ++s) {
            SegMask mask = phantom_mask(cfg, anatomy, s);
            Rng noise = derive_rng(seed, "phantom_noise", uint64_t(p) * 1000000u + uint64_t(s));
            ImageSlice img = render_phantom_slice(cfg, anatomy, mask, rec, noise);

            std::snprintf(name, sizeof name, "images/%s_s%03d.cdaf", pid.c_str(), s);
            std::string img_rel = name;
            std::snprintf(name, sizeof name, "masks/%s_s%03d.png", pid.c_str(), s);
            std::string mask_rel = name;
            write_cdaf((fs::path(out_dir) / img_rel).string(), img.pixels, img.height, img.width);
            write_png_gray8((fs::path(out_dir) / mask_rel).string(), mask.labels, mask.height,
                            mask.width);

            SliceEntry e;
            e.image_path = img_rel;
            e.patient_id = pid;
            e.slice_index = s;
            e.iap = rec;
            e.mask_path = mask_rel;
            m.slices.push_back(std::move(e));
        }
    }
    return m;
}

}  // namespace cda
