#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mome/binio.hpp"
#include "mome/config.hpp"
#include "mome/parallel.hpp"
#include "mome/rng.hpp"
#include "mome/tensor.hpp"

namespace mome {

// One synthetic "patient": per-modality content volumes (smaller than the
// model canvas so padding has somewhere to move), a binary label, and
// subgroup tags. Voxels are kept on the f32 grid so dataset files round-trip
// bit-exactly.
struct StudyRecord {
    std::string study_id;
    std::map<std::string, Tensor> volumes;
    int label = 0;  // 0 benign, 1 malignant
    std::map<std::string, std::string> tags;

    bool operator==(const StudyRecord& o) const {
        if (study_id != o.study_id || label != o.label || tags != o.tags) return false;
        if (volumes.size() != o.volumes.size()) return false;
        for (const auto& [name, vol] : volumes) {
            auto it = o.volumes.find(name);
            if (it == o.volumes.end() || it->second.shape() != vol.shape() || it->second.values() != vol.values())
                return false;
        }
        return true;
    }
};

using Dataset = std::vector<StudyRecord>;

// ---------------------------------------------------------------------------
// Preprocessing (data independent)
// ---------------------------------------------------------------------------

// (x - mean) / std per channel over all voxels; zero-variance channels map to
// zeros.
inline Tensor standardize(const Tensor& volume) {
    if (volume.rank() < 2 || volume.numel() / volume.dim(volume.rank() - 1) < 2)
        throw ConfigError("standardize needs at least two voxels per channel, got " + shape_str(volume.shape()));
    const std::size_t c = volume.dim(volume.rank() - 1);
    const std::size_t n = volume.numel() / c;
    Tensor out(volume.shape());
    const double* px = volume.ptr();
    double* po = out.mutable_ptr();
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += px[i * c + ch];
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double d = px[i * c + ch] - mean[ch];
            var[ch] += d * d;
        }
    for (std::size_t ch = 0; ch < c; ++ch) var[ch] = std::sqrt(var[ch] / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            po[i * c + ch] = var[ch] == 0.0 ? 0.0 : (px[i * c + ch] - mean[ch]) / var[ch];
    return out;
}

// Copies the volume into a zero canvas of the target spatial dims at the
// given offset; channels pass through.
inline Tensor pad_to(const Tensor& volume, const std::array<std::size_t, 3>& target,
                     const std::array<std::size_t, 3>& offset) {
    if (volume.rank() != 4) throw ConfigError("pad_to expects [DxHxWxC], got " + shape_str(volume.shape()));
    for (int a = 0; a < 3; ++a)
        if (offset[a] + volume.dim(a) > target[a])
            throw DataError("pad_to: volume " + shape_str(volume.shape()) + " at offset " + std::to_string(offset[a]) +
                            " overflows target axis " + std::to_string(a) + " (" + std::to_string(target[a]) + ")");
    const std::size_t c = volume.dim(3);
    Tensor out(Shape{target[0], target[1], target[2], c});
    const double* pv = volume.ptr();
    double* po = out.mutable_ptr();
    const std::size_t vd = volume.dim(0), vh = volume.dim(1), vw = volume.dim(2);
    for (std::size_t z = 0; z < vd; ++z)
        for (std::size_t y = 0; y < vh; ++y) {
            const std::size_t src = (z * vh + y) * vw * c;
            const std::size_t dst = (((z + offset[0]) * target[1] + (y + offset[1])) * target[2] + offset[2]) * c;
            std::memcpy(po + dst, pv + src, vw * c * sizeof(double));
        }
    return out;
}

inline std::array<std::size_t, 3> centered_offset(const Tensor& volume, const std::array<std::size_t, 3>& target) {
    return {(target[0] - volume.dim(0)) / 2, (target[1] - volume.dim(1)) / 2, (target[2] - volume.dim(2)) / 2};
}

// First-order (linear) resampling of the trailing time axis onto target_t
// uniformly spaced points spanning the original range; endpoints preserved.
inline Tensor interp_phases(const Tensor& dce, std::size_t target_t) {
    if (target_t < 1) throw ConfigError("interp_phases: target phase count must be >= 1");
    const std::size_t t = dce.dim(dce.rank() - 1);
    if (t < 2) throw ConfigError("interp_phases needs at least 2 source phases, got " + std::to_string(t));
    Shape out_shape = dce.shape();
    out_shape.back() = target_t;
    Tensor out(out_shape);
    const std::size_t voxels = dce.numel() / t;
    const double* px = dce.ptr();
    double* po = out.mutable_ptr();
    for (std::size_t j = 0; j < target_t; ++j) {
        const double pos = target_t == 1 ? 0.0
                                         : static_cast<double>(j) * static_cast<double>(t - 1) /
                                               static_cast<double>(target_t - 1);
        const std::size_t lo = std::min<std::size_t>(static_cast<std::size_t>(pos), t - 2);
        const double w = pos - static_cast<double>(lo);
        for (std::size_t v = 0; v < voxels; ++v)
            po[v * target_t + j] = px[v * t + lo] * (1.0 - w) + px[v * t + lo + 1] * w;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic study generation
// ---------------------------------------------------------------------------

namespace detail {

// DCE temporal profiles across the phase axis: malignant lesions wash out
// after an early peak, benign lesions keep rising.
inline double dce_profile(bool malignant, std::size_t phase, std::size_t phases) {
    static constexpr std::array<double, 6> kMalignant{0.60, 1.00, 0.90, 0.75, 0.62, 0.50};
    static constexpr std::array<double, 6> kBenign{0.15, 0.30, 0.45, 0.60, 0.75, 0.90};
    const auto& p = malignant ? kMalignant : kBenign;
    if (phases == p.size()) return p[phase];
    const double pos = phases == 1 ? 0.0
                                   : static_cast<double>(phase) * static_cast<double>(p.size() - 1) /
                                         static_cast<double>(phases - 1);
    const std::size_t lo = std::min<std::size_t>(static_cast<std::size_t>(pos), p.size() - 2);
    const double w = pos - static_cast<double>(lo);
    return p[lo] * (1.0 - w) + p[lo + 1] * w;
}

inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

inline std::array<std::size_t, 3> content_dims(const ModalityDesc& m, const GenConfig& cfg) {
    std::array<std::size_t, 3> dims{m.depth, m.height, m.width};
    for (auto& d : dims) {
        if (d <= cfg.content_margin)
            throw ConfigError("gen: content margin " + std::to_string(cfg.content_margin) +
                              " leaves no voxels for modality " + m.name);
        d -= cfg.content_margin;
    }
    return dims;
}

// Each study plants one ellipsoidal lesion shared across modalities.
// Malignant lesions carry the full per-modality amplitude and a wash-out DCE
// profile; benign lesions half the amplitude and a persistent profile.
inline Dataset generate(const GenConfig& cfg, const std::vector<ModalityDesc>& modalities) {
    cfg.validate();
    if (modalities.empty()) throw ConfigError("gen: no modalities configured");
    Dataset out(cfg.n_studies);
    parallel_for(cfg.n_studies, [&](std::size_t idx) {
        Rng rng = Rng::derive(cfg.seed, idx);
        StudyRecord rec;
        rec.study_id = "study-" + std::to_string(idx);
        rec.label = rng.bernoulli(cfg.class_prevalence) ? 1 : 0;
        rec.tags["site"] = rng.bernoulli(0.5) ? "A" : "B";
        rec.tags["field_strength"] = rng.bernoulli(0.5) ? "1.5T" : "3.0T";
        const std::uint64_t age = rng.uniform_int(3);
        rec.tags["age_bin"] = age == 0 ? "<40" : (age == 1 ? "40-60" : ">60");

        double radius[3], center_frac[3];
        for (int a = 0; a < 3; ++a)
            radius[a] = static_cast<double>(cfg.lesion_radius_min) +
                        rng.uniform() * static_cast<double>(cfg.lesion_radius_max - cfg.lesion_radius_min);
        for (int a = 0; a < 3; ++a) center_frac[a] = rng.uniform(0.3, 0.7);

        double site_shift = 0.0;
        if (auto it = cfg.site_effects.find(rec.tags["site"]); it != cfg.site_effects.end()) site_shift = it->second;

        const bool malignant = rec.label == 1;
        const double class_scale = malignant ? 1.0 : 0.5;
        for (const ModalityDesc& m : modalities) {
            const auto dims = content_dims(m, cfg);
            double amp = 0.0;
            if (auto it = cfg.modality_signal.find(m.name); it != cfg.modality_signal.end()) amp = it->second;
            Tensor vol(Shape{dims[0], dims[1], dims[2], m.channels});
            double c[3], r[3];
            for (int a = 0; a < 3; ++a) {
                c[a] = center_frac[a] * static_cast<double>(dims[a] - 1);
                r[a] = std::max(1.0, std::min(radius[a], static_cast<double>(dims[a]) / 2.0));
            }
            double* pv = vol.mutable_ptr();
            std::size_t i = 0;
            for (std::size_t z = 0; z < dims[0]; ++z)
                for (std::size_t y = 0; y < dims[1]; ++y)
                    for (std::size_t x = 0; x < dims[2]; ++x) {
                        const double dz = (static_cast<double>(z) - c[0]) / r[0];
                        const double dy = (static_cast<double>(y) - c[1]) / r[1];
                        const double dx = (static_cast<double>(x) - c[2]) / r[2];
                        const bool inside = dz * dz + dy * dy + dx * dx <= 1.0;
                        for (std::size_t ch = 0; ch < m.channels; ++ch) {
                            double v = site_shift + cfg.noise_sigma * rng.normal();
                            if (inside) {
                                const double profile =
                                    m.channels > 1 ? detail::dce_profile(malignant, ch, m.channels) : 1.0;
                                v += amp * class_scale * profile;
                            }
                            pv[i++] = detail::quantize_f32(v);
                        }
                    }
            rec.volumes[m.name] = std::move(vol);
        }
        out[idx] = std::move(rec);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Dataset file format ("MDS1")
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kDatasetVersion = 1;

inline void save_dataset(const std::string& path, const Dataset& records) {
    auto out = open_output(path);
    ByteWriter w(out);
    w.bytes("MDS1", 4);
    w.u16(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const StudyRecord& rec : records) {
        w.str(rec.study_id);
        w.u8(static_cast<std::uint8_t>(rec.label));
        w.u32(static_cast<std::uint32_t>(rec.tags.size()));
        for (const auto& [k, v] : rec.tags) {
            w.str(k);
            w.str(v);
        }
        w.u32(static_cast<std::uint32_t>(rec.volumes.size()));
        for (const auto& [name, vol] : rec.volumes) {
            w.str(name);
            w.u32(static_cast<std::uint32_t>(vol.rank()));
            for (std::size_t d : vol.shape()) w.u32(static_cast<std::uint32_t>(d));
            for (double v : vol.values()) w.f32(static_cast<float>(v));
        }
    }
    if (!out) throw DataError("write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    auto in = open_input(path);
    ByteReader r(in, path);
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::string(magic, 4) != "MDS1") r.fail("bad magic, expected MDS1");
    const std::uint16_t version = r.u16("version");
    if (version != kDatasetVersion) r.fail("unsupported dataset version " + std::to_string(version));
    const std::uint32_t count = r.u32("record count");
    Dataset out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        StudyRecord rec;
        rec.study_id = r.str("study id");
        rec.label = r.u8("label");
        if (rec.label > 1) r.fail("label out of range for " + rec.study_id);
        const std::uint32_t ntags = r.u32("tag count");
        if (ntags > 1024) r.fail("implausible tag count");
        for (std::uint32_t t = 0; t < ntags; ++t) {
            std::string k = r.str("tag key");
            rec.tags[k] = r.str("tag value");
        }
        const std::uint32_t nmod = r.u32("modality count");
        if (nmod > 64) r.fail("implausible modality count");
        for (std::uint32_t m = 0; m < nmod; ++m) {
            const std::string name = r.str("modality name");
            const std::uint32_t rank = r.u32("volume rank");
            if (rank > 8) r.fail("implausible volume rank for " + name);
            Shape shape(rank);
            std::size_t n = 1;
            for (auto& d : shape) {
                d = r.u32("volume dim");
                n *= d;
            }
            if (n > (1u << 28)) r.fail("implausible volume size for " + name);
            std::vector<double> data(n);
            for (double& v : data) v = static_cast<double>(r.f32("voxel data"));
            rec.volumes[name] = Tensor(std::move(shape), std::move(data));
        }
        out.push_back(std::move(rec));
    }
    r.expect_eof();
    return out;
}

}  // namespace mome
