#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "random.hpp"
#include "tensor.hpp"

namespace brasyn {

// ---------------------------------------------------------------------------
// Modalities and label conventions
// ---------------------------------------------------------------------------

enum class Modality : int { T1 = 0, T2 = 1, FLAIR = 2, T1ce = 3 };

inline constexpr std::array<Modality, 4> kModalities{Modality::T1, Modality::T2,
                                                     Modality::FLAIR, Modality::T1ce};

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::T1: return "t1";
        case Modality::T2: return "t2";
        case Modality::FLAIR: return "flair";
        case Modality::T1ce: return "t1ce";
    }
    return "?";
}

inline Modality parse_modality(std::string s) {
    for (auto& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
    for (Modality m : kModalities)
        if (s == modality_name(m)) return m;
    BRASYN_CHECK(false, "unknown modality '", s, "'");
    return Modality::T1;
}

// Label integers: 0 background, 1 necrotic core, 2 edema, 3 enhancing tumor.
enum class Region : int { WT = 0, TC = 1, ET = 2 };

inline const char* region_name(Region r) {
    switch (r) {
        case Region::WT: return "WT";
        case Region::TC: return "TC";
        case Region::ET: return "ET";
    }
    return "?";
}

inline constexpr std::array<Region, 3> kRegions{Region::WT, Region::TC, Region::ET};

// ---------------------------------------------------------------------------
// Core data types
// ---------------------------------------------------------------------------

using Mask = Tensor<std::uint8_t>;

// One modality's 3D scalar field (D x H x W) with mm spacing. The brain mask
// is derived from the raw (pre-normalization) data, where background is
// exactly zero, and is carried through intensity transforms unchanged.
struct Volume {
    Tensor<float> data;                      // D x H x W
    std::array<double, 3> spacing{1, 1, 1};  // mm per axis (d, h, w)
    Modality modality = Modality::T1;
    Mask mask;                               // 1 = brain voxel
    std::map<std::string, double> meta;      // e.g. conditioned intensity

    Volume() = default;
    Volume(Tensor<float> d, Modality m, std::array<double, 3> sp = {1, 1, 1})
        : data(std::move(d)), spacing(sp), modality(m) {
        BRASYN_CHECK(data.ndim() == 3, "volume: need D x H x W data");
        derive_mask();
    }

    void derive_mask() {
        mask = Mask(data.shape());
        for (std::size_t i = 0; i < data.size(); ++i)
            mask[i] = data[i] != 0.0f ? 1 : 0;
    }

    std::size_t depth() const { return data.dim(0); }
    std::size_t height() const { return data.dim(1); }
    std::size_t width() const { return data.dim(2); }

    std::size_t brain_voxel_count() const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < mask.size(); ++i) n += mask[i];
        return n;
    }
};

struct LabelMap {
    Tensor<std::uint8_t> data; // values in {0,1,2,3}

    LabelMap() = default;
    explicit LabelMap(Tensor<std::uint8_t> d) : data(std::move(d)) {
        BRASYN_CHECK(data.ndim() == 3, "label map: need D x H x W data");
    }
};

inline constexpr std::uint8_t kLabelBackground = 0;
inline constexpr std::uint8_t kLabelNecrotic = 1;
inline constexpr std::uint8_t kLabelEdema = 2;
inline constexpr std::uint8_t kLabelEnhancing = 3;

struct MultiModalStudy {
    std::map<Modality, Volume> volumes;
    std::optional<LabelMap> labels;
    std::string case_id;

    bool has(Modality m) const { return volumes.count(m) != 0; }

    const Volume& at(Modality m) const {
        auto it = volumes.find(m);
        BRASYN_CHECK(it != volumes.end(), "study ", case_id, ": missing modality ",
                     modality_name(m));
        return it->second;
    }

    // All present volumes (and labels) must agree on shape and spacing.
    void validate() const {
        BRASYN_CHECK(!volumes.empty(), "study ", case_id, ": no volumes");
        const Volume* ref = &volumes.begin()->second;
        for (const auto& [m, v] : volumes) {
            BRASYN_CHECK(v.data.shape() == ref->data.shape(),
                         "study ", case_id, ": shape mismatch on ", modality_name(m));
            BRASYN_CHECK(v.spacing == ref->spacing,
                         "study ", case_id, ": spacing mismatch on ", modality_name(m));
        }
        if (labels)
            BRASYN_CHECK(labels->data.shape() == ref->data.shape(),
                         "study ", case_id, ": label shape mismatch");
    }

    Shape shape() const {
        BRASYN_CHECK(!volumes.empty(), "study ", case_id, ": no volumes");
        return volumes.begin()->second.data.shape();
    }

    std::vector<Modality> present() const {
        std::vector<Modality> out;
        for (Modality m : kModalities)
            if (has(m)) out.push_back(m);
        return out;
    }
};

struct AxialSlice {
    Tensor<float> data; // H x W
    std::size_t index = 0;
    std::size_t brain_pixel_count = 0;
};

// Aligned per-index slices across modalities, plus the label slice when the
// study has labels.
struct SliceTuple {
    std::size_t index = 0;
    std::map<Modality, AxialSlice> slices;
    std::optional<Tensor<std::uint8_t>> label; // H x W
};

struct Patch {
    Tensor<float> data; // size^3
    std::array<std::size_t, 3> origin{0, 0, 0};
};

struct PatchSet {
    std::map<Modality, Patch> patches;
    std::optional<Tensor<std::uint8_t>> label; // size^3
    std::array<std::size_t, 3> origin{0, 0, 0};
};

// ---------------------------------------------------------------------------
// Preprocessing operations (pure: input -> new output)
// ---------------------------------------------------------------------------

// Affine map sending the volume's min to lo and max to hi.
inline Volume linear_rescale(const Volume& vol, float lo, float hi) {
    BRASYN_CHECK(hi > lo, "linear_rescale: need hi > lo");
    BRASYN_CHECK(vol.data.size() > 0, "linear_rescale: empty volume");
    const float mn = vol.data.min(), mx = vol.data.max();
    BRASYN_CHECK(mx > mn, "degenerate intensity range");
    const double scale = double(hi - lo) / (double(mx) - double(mn));
    Volume out = vol;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = float(lo + (double(vol.data[i]) - double(mn)) * scale);
    return out; // mask untouched: still the raw-data brain mask
}

// Standardize over the brain mask (mean 0, population std 1); background
// voxels stay exactly 0.
inline Volume znorm_nonzero(const Volume& vol) {
    double sum = 0, sum2 = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < vol.data.size(); ++i)
        if (vol.mask[i]) {
            sum += vol.data[i];
            sum2 += double(vol.data[i]) * double(vol.data[i]);
            ++n;
        }
    BRASYN_CHECK(n >= 2, "znorm_nonzero: need at least 2 brain voxels");
    const double mean = sum / double(n);
    const double var = sum2 / double(n) - mean * mean;
    BRASYN_CHECK(var > 0, "znorm_nonzero: zero variance among brain voxels");
    const double inv_std = 1.0 / std::sqrt(var);
    Volume out = vol;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = vol.mask[i] ? float((double(vol.data[i]) - mean) * inv_std) : 0.0f;
    return out;
}

inline AxialSlice take_slice(const Volume& vol, std::size_t d) {
    BRASYN_CHECK(d < vol.depth(), "take_slice: index out of range");
    const std::size_t H = vol.height(), W = vol.width();
    AxialSlice s;
    s.index = d;
    s.data = Tensor<float>(Shape{H, W});
    std::size_t brain = 0;
    const std::size_t off = d * H * W;
    for (std::size_t i = 0; i < H * W; ++i) {
        s.data[i] = vol.data[off + i];
        brain += vol.mask[off + i];
    }
    s.brain_pixel_count = brain;
    return s;
}

// Keep only indices whose brain pixel count on the reference modality (first
// present, in T1/T2/FLAIR/T1ce order) reaches the threshold.
inline std::vector<SliceTuple> extract_axial_slices(const MultiModalStudy& study,
                                                    std::size_t min_brain_pixels) {
    study.validate();
    const auto present = study.present();
    BRASYN_CHECK(!present.empty(), "extract_axial_slices: empty study");
    const Volume& ref = study.at(present.front());
    const std::size_t D = ref.depth(), H = ref.height(), W = ref.width();

    std::vector<SliceTuple> out;
    for (std::size_t d = 0; d < D; ++d) {
        std::size_t brain = 0;
        const std::size_t off = d * H * W;
        for (std::size_t i = 0; i < H * W; ++i) brain += ref.mask[off + i];
        if (brain < min_brain_pixels) continue;

        SliceTuple t;
        t.index = d;
        for (Modality m : present) t.slices[m] = take_slice(study.at(m), d);
        if (study.labels) {
            Tensor<std::uint8_t> lab(Shape{H, W});
            for (std::size_t i = 0; i < H * W; ++i)
                lab[i] = study.labels->data[off + i];
            t.label = std::move(lab);
        }
        out.push_back(std::move(t));
    }
    return out;
}

// Stack ordered 2D slices into a volume (D = slice count).
inline Volume stack_slices(const std::vector<Tensor<float>>& slices,
                           Modality modality = Modality::T1,
                           std::array<double, 3> spacing = {1, 1, 1}) {
    BRASYN_CHECK(!slices.empty(), "stack_slices: empty slice list");
    const Shape& s0 = slices.front().shape();
    BRASYN_CHECK(s0.size() == 2, "stack_slices: slices must be 2-d");
    const std::size_t H = s0[0], W = s0[1];
    Tensor<float> data(Shape{slices.size(), H, W});
    for (std::size_t d = 0; d < slices.size(); ++d) {
        BRASYN_CHECK(slices[d].shape() == s0, "stack_slices: shape mismatch at slice ", d);
        std::copy(slices[d].data(), slices[d].data() + H * W, data.data() + d * H * W);
    }
    return Volume(std::move(data), modality, spacing);
}

namespace detail {

// Zero-pad a 3D array so every axis reaches at least `size`, centring the
// original content.
template <class T>
Tensor<T> pad_to_min_size(const Tensor<T>& in, std::size_t size) {
    Shape s = in.shape();
    Shape os = s;
    std::array<std::size_t, 3> lo{0, 0, 0};
    bool need = false;
    for (std::size_t a = 0; a < 3; ++a)
        if (s[a] < size) {
            os[a] = size;
            lo[a] = (size - s[a]) / 2;
            need = true;
        }
    if (!need) return in;
    Tensor<T> out(os, T(0));
    for (std::size_t d = 0; d < s[0]; ++d)
        for (std::size_t h = 0; h < s[1]; ++h) {
            const T* src = in.data() + (d * s[1] + h) * s[2];
            T* dst = out.data() +
                     ((d + lo[0]) * os[1] + (h + lo[1])) * os[2] + lo[2];
            std::copy(src, src + s[2], dst);
        }
    return out;
}

// Origin for an aligned cube crop, biased toward the label bounding box with
// probability tumor_bias (used by the trainers so tumor voxels stay in play).
inline std::array<std::size_t, 3> biased_crop_origin(const Shape& dims,
                                                     std::size_t size,
                                                     const Tensor<std::uint8_t>& labels,
                                                     Rng& rng, double tumor_bias) {
    std::array<std::size_t, 3> lo{dims[0], dims[1], dims[2]}, hi{0, 0, 0};
    bool any = false;
    const std::size_t H = dims[1], W = dims[2];
    for (std::size_t d = 0; d < dims[0]; ++d)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w)
                if (labels[(d * H + h) * W + w]) {
                    any = true;
                    lo = {std::min(lo[0], d), std::min(lo[1], h), std::min(lo[2], w)};
                    hi = {std::max(hi[0], d), std::max(hi[1], h), std::max(hi[2], w)};
                }
    std::array<std::size_t, 3> origin{};
    const bool biased = any && rng.uniform() < tumor_bias;
    for (std::size_t a = 0; a < 3; ++a) {
        BRASYN_CHECK(dims[a] >= size, "biased_crop_origin: volume smaller than patch");
        const std::size_t max_o = dims[a] - size;
        std::size_t o_lo = 0, o_hi = max_o;
        if (biased) {
            o_lo = lo[a] >= size - 1 ? lo[a] - (size - 1) : 0;
            o_hi = std::min(max_o, hi[a]);
            if (o_lo > o_hi) o_lo = o_hi;
        }
        origin[a] = std::size_t(rng.uniform_int(std::int64_t(o_lo), std::int64_t(o_hi)));
    }
    return origin;
}

template <class T>
Tensor<T> crop_cube(const Tensor<T>& in, std::array<std::size_t, 3> origin,
                    std::size_t size) {
    const Shape& s = in.shape();
    Tensor<T> out(Shape{size, size, size});
    for (std::size_t d = 0; d < size; ++d)
        for (std::size_t h = 0; h < size; ++h) {
            const T* src = in.data() +
                           ((origin[0] + d) * s[1] + (origin[1] + h)) * s[2] + origin[2];
            std::copy(src, src + size, out.data() + (d * size + h) * size);
        }
    return out;
}

} // namespace detail

// One origin for every modality and the label map; deterministic per seed.
// Volumes smaller than `size` are zero-padded symmetrically first.
inline PatchSet random_crop_patch(const MultiModalStudy& study, std::size_t size,
                                  std::uint64_t rng_seed) {
    BRASYN_CHECK(size > 0, "random_crop_patch: size must be positive");
    study.validate();
    const auto present = study.present();
    BRASYN_CHECK(!present.empty(), "random_crop_patch: empty study");

    Shape s = study.shape();
    Shape padded = s;
    for (std::size_t a = 0; a < 3; ++a) padded[a] = std::max(padded[a], size);

    Rng rng(rng_seed);
    std::array<std::size_t, 3> origin{};
    for (std::size_t a = 0; a < 3; ++a)
        origin[a] = std::size_t(rng.uniform_int(0, std::int64_t(padded[a] - size)));

    PatchSet out;
    out.origin = origin;
    for (Modality m : present) {
        const Volume& v = study.at(m);
        Patch p;
        p.origin = origin;
        p.data = detail::crop_cube(detail::pad_to_min_size(v.data, size), origin, size);
        out.patches[m] = std::move(p);
    }
    if (study.labels)
        out.label = detail::crop_cube(detail::pad_to_min_size(study.labels->data, size),
                                      origin, size);
    return out;
}

// Nested tumor regions: ET = {3}, TC = {1,3}, WT = {1,2,3}.
inline std::map<Region, Mask> compose_regions(const LabelMap& labels) {
    std::map<Region, Mask> out;
    for (Region r : kRegions) out[r] = Mask(labels.data.shape());
    for (std::size_t i = 0; i < labels.data.size(); ++i) {
        const std::uint8_t v = labels.data[i];
        BRASYN_CHECK(v <= 3, "compose_regions: unknown label value ", int(v));
        if (v == 0) continue;
        out[Region::WT][i] = 1;
        if (v == kLabelNecrotic || v == kLabelEnhancing) out[Region::TC][i] = 1;
        if (v == kLabelEnhancing) out[Region::ET][i] = 1;
    }
    return out;
}

// Slice-filter threshold: the reference count is defined at 240x240 and
// scales with slice area so small phantoms keep usable slices.
inline std::size_t scaled_slice_threshold(std::size_t base_at_240, std::size_t H,
                                          std::size_t W) {
    const double scale = double(H) * double(W) / (240.0 * 240.0);
    return std::size_t(double(base_at_240) * scale + 0.5);
}

} // namespace brasyn
