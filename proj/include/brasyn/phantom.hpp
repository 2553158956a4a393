#pragma once

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "volume.hpp"

namespace brasyn {

// ---------------------------------------------------------------------------
// Deterministic multi-modal brain phantom. A smooth scalar tissue field t in
// [0,1] encodes composition (CSF low, gray mid, white high); each modality is
// a strictly monotone piecewise-linear map of t through per-class anchor
// intensities, followed by a per-case, per-modality contrast exponent. The
// exponent is what gives per-volume median intensities their spread and what
// makes the target modality's brightness genuinely unknown at synthesis time.
// Tumors are nested deformed spheres (necrotic core / enhancing rim / edema)
// with modality-specific contrast offsets. Background is exactly zero.
// ---------------------------------------------------------------------------

// Tissue-field anchor positions (fixed) and per-modality anchor intensities.
inline constexpr double kTissueCsf = 0.12;
inline constexpr double kTissueGray = 0.40;
inline constexpr double kTissueWhite = 0.75;

struct ModalityAnchors {
    double csf, gray, white;
};

struct TumorContrast {
    double edema, necrotic, enhancing; // additive offsets in map space
};

struct PhantomSpec {
    std::array<std::size_t, 3> shape{64, 64, 64};
    std::uint64_t rng_seed = 0;

    // strictly monotone per modality (all increasing or all decreasing)
    std::map<Modality, ModalityAnchors> anchors{
        {Modality::T1, {0.18, 0.38, 0.72}},
        {Modality::T2, {0.85, 0.55, 0.25}},
        {Modality::FLAIR, {0.82, 0.62, 0.40}},
        {Modality::T1ce, {0.15, 0.35, 0.68}},
    };
    std::map<Modality, TumorContrast> tumor_contrast{
        {Modality::T1, {-0.10, -0.22, 0.10}},
        {Modality::T2, {0.28, 0.30, 0.05}},
        {Modality::FLAIR, {0.35, 0.12, 0.10}},
        {Modality::T1ce, {-0.08, -0.25, 0.45}},
    };

    int tumor_count = 1;
    double tumor_radius_min = 0.16; // fraction of the smallest semi-axis
    double tumor_radius_max = 0.26;
    double gamma_min = 0.75, gamma_max = 1.30; // per-case contrast exponent
    double noise_std = 0.02;
    double smoothness = 1.0; // larger = smoother tissue perturbation
    bool with_tumor = true;
};

// Analytic per-case parameters, exposed for tests and debugging.
struct PhantomInternals {
    Tensor<float> tissue; // the t field (0 outside the brain)
    std::map<Modality, double> gamma;
    std::map<Modality, double> gain;
};

namespace phantom_detail {

inline double smoothstep(double x, double lo, double hi) {
    const double u = std::clamp((x - lo) / (hi - lo), 0.0, 1.0);
    return u * u * (3 - 2 * u);
}

// Strictly monotone piecewise-linear map through the anchor points, defined
// on t in [0,1]. End values extend the anchor trend.
struct MonotoneMap {
    std::array<double, 5> t{0.0, kTissueCsf, kTissueGray, kTissueWhite, 1.0};
    std::array<double, 5> v{};

    explicit MonotoneMap(const ModalityAnchors& a) {
        v[1] = a.csf;
        v[2] = a.gray;
        v[3] = a.white;
        const double slope_lo = (v[2] - v[1]) / (t[2] - t[1]);
        const double slope_hi = (v[3] - v[2]) / (t[3] - t[2]);
        v[0] = v[1] - slope_lo * (t[1] - t[0]);
        v[4] = v[3] + slope_hi * (t[4] - t[3]);
        for (int i = 0; i + 1 < 5; ++i)
            BRASYN_CHECK((v[i + 1] - v[i]) * (v[2] - v[1]) > 0,
                         "phantom anchors must be strictly monotone");
    }

    double forward(double x) const {
        x = std::clamp(x, 0.0, 1.0);
        int seg = 0;
        while (seg < 3 && x > t[seg + 1]) ++seg;
        const double u = (x - t[seg]) / (t[seg + 1] - t[seg]);
        return v[seg] + u * (v[seg + 1] - v[seg]);
    }

    double inverse(double y) const {
        const bool inc = v[4] > v[0];
        int seg = 0;
        while (seg < 3 && (inc ? y > v[seg + 1] : y < v[seg + 1])) ++seg;
        const double u = (y - v[seg]) / (v[seg + 1] - v[seg]);
        return t[seg] + u * (t[seg + 1] - t[seg]);
    }
};

// Low-frequency pseudo-random field: a handful of cosine modes.
struct SmoothField {
    struct Mode {
        double kx, ky, kz, phase, amp;
    };
    std::vector<Mode> modes;

    SmoothField(Rng& rng, int n, double wavelength_vox, double amp) {
        for (int i = 0; i < n; ++i) {
            const double f = 2 * std::numbers::pi / wavelength_vox;
            modes.push_back({rng.uniform(0.4, 1.0) * f, rng.uniform(0.4, 1.0) * f,
                             rng.uniform(0.4, 1.0) * f,
                             rng.uniform(0.0, 2 * std::numbers::pi),
                             amp * rng.uniform(0.5, 1.0) / double(n)});
        }
    }

    double operator()(double x, double y, double z) const {
        double s = 0;
        for (const auto& m : modes)
            s += m.amp * std::cos(m.kx * x + m.ky * y + m.kz * z + m.phase);
        return s;
    }
};

struct TumorGeom {
    std::array<double, 3> center; // voxel coords (d,h,w)
    double r_wt, r_tc, r_nec;     // voxel radii, nested
    SmoothField wobble;
};

} // namespace phantom_detail

inline MultiModalStudy generate_phantom(const PhantomSpec& spec,
                                        PhantomInternals* internals = nullptr) {
    using namespace phantom_detail;
    const auto [D, H, W] = spec.shape;
    BRASYN_CHECK(D >= 8 && H >= 8 && W >= 8, "phantom: volume too small");
    Rng rng(spec.rng_seed);

    // Brain ellipsoid
    const double cd = D / 2.0 + rng.uniform(-1.5, 1.5);
    const double ch = H / 2.0 + rng.uniform(-1.5, 1.5);
    const double cw = W / 2.0 + rng.uniform(-1.5, 1.5);
    const double ad = 0.38 * D * rng.uniform(0.92, 1.05);
    const double ah = 0.42 * H * rng.uniform(0.92, 1.05);
    const double aw = 0.40 * W * rng.uniform(0.92, 1.05);
    const double min_semi = std::min({ad, ah, aw});

    SmoothField perturb(rng, 6, 18.0 * spec.smoothness, 0.45);

    // Per-case per-modality contrast exponent and gain (independent draws so
    // the target modality carries information the others cannot supply).
    std::map<Modality, double> gamma, gain;
    for (Modality m : kModalities) {
        gamma[m] = rng.uniform(spec.gamma_min, spec.gamma_max);
        gain[m] = rng.uniform(0.85, 1.15);
    }

    // Tumors
    std::vector<TumorGeom> tumors;
    if (spec.with_tumor) {
        BRASYN_CHECK(spec.tumor_radius_max < 0.6,
                     "phantom: tumor cannot fit inside the brain");
        for (int ti = 0; ti < spec.tumor_count; ++ti) {
            bool placed = false;
            for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
                const double r_wt =
                    rng.uniform(spec.tumor_radius_min, spec.tumor_radius_max) * min_semi;
                // normalized offset from the brain centre, leaving room for r_wt
                const double od = rng.uniform(-0.45, 0.45);
                const double oh = rng.uniform(-0.45, 0.45);
                const double ow = rng.uniform(-0.45, 0.45);
                const double rho = std::sqrt(od * od + oh * oh + ow * ow);
                if (rho + (r_wt * 1.25) / min_semi > 0.88) continue;
                TumorGeom g{{cd + od * ad, ch + oh * ah, cw + ow * aw},
                            r_wt,
                            0.62 * r_wt,
                            0.34 * r_wt,
                            SmoothField(rng, 3, 2.6 * r_wt, 0.12)};
                bool overlap = false;
                for (const auto& other : tumors) {
                    const double dd = g.center[0] - other.center[0];
                    const double dh = g.center[1] - other.center[1];
                    const double dw = g.center[2] - other.center[2];
                    if (std::sqrt(dd * dd + dh * dh + dw * dw) <
                        1.3 * (g.r_wt + other.r_wt))
                        overlap = true;
                }
                if (!overlap) {
                    tumors.push_back(std::move(g));
                    placed = true;
                }
            }
            BRASYN_CHECK(placed, "phantom: tumor cannot fit (seed ", spec.rng_seed, ")");
        }
    }

    std::map<Modality, MonotoneMap> maps;
    for (Modality m : kModalities) maps.emplace(m, MonotoneMap(spec.anchors.at(m)));

    Tensor<float> tissue(Shape{D, H, W});
    Tensor<std::uint8_t> labels(Shape{D, H, W});
    std::map<Modality, Tensor<float>> vols;
    for (Modality m : kModalities) vols.emplace(m, Tensor<float>(Shape{D, H, W}));

    // Separate noise stream per modality keeps draws aligned across code paths.
    std::map<Modality, Rng> noise_rng;
    for (Modality m : kModalities)
        noise_rng.emplace(m, rng.fork(17 + std::uint64_t(m)));

    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
                const std::size_t idx = (d * H + h) * W + w;
                const double nd = (double(d) - cd) / ad;
                const double nh = (double(h) - ch) / ah;
                const double nw = (double(w) - cw) / aw;
                const double rho2 = nd * nd + nh * nh + nw * nw;
                if (rho2 > 1.0) continue; // background stays exactly 0

                const double rho = std::sqrt(rho2);
                const double u = 1.0 - rho; // 0 at surface, 1 at centre
                // gray near the surface, white deeper, CSF ventricle at centre
                double t = 0.25 + 0.55 * smoothstep(u, 0.12, 0.55) -
                           0.68 * smoothstep(u, 0.78, 0.96);
                t += perturb(double(d), double(h), double(w)) *
                     0.5 * smoothstep(u, 0.02, 0.25); // keep the rim stable
                t = std::clamp(t, 0.02, 0.98);
                tissue[idx] = float(t);

                // nested tumor labels + smooth contrast blends
                double blend_ed = 0, blend_nec = 0, blend_enh = 0;
                std::uint8_t lab = 0;
                for (const auto& g : tumors) {
                    const double dd = double(d) - g.center[0];
                    const double dh = double(h) - g.center[1];
                    const double dw = double(w) - g.center[2];
                    double q = std::sqrt(dd * dd + dh * dh + dw * dw);
                    q *= 1.0 + g.wobble(double(d), double(h), double(w));
                    if (q < g.r_nec)
                        lab = kLabelNecrotic;
                    else if (q < g.r_tc)
                        lab = kLabelEnhancing;
                    else if (q < g.r_wt)
                        lab = kLabelEdema;
                    const double soft = 1.2; // voxels of soft edge
                    blend_ed = std::max(blend_ed, 1.0 - smoothstep(q, g.r_wt - soft, g.r_wt + soft));
                    blend_nec = std::max(blend_nec, 1.0 - smoothstep(q, g.r_nec - soft, g.r_nec + soft));
                    blend_enh = std::max(
                        blend_enh, (1.0 - smoothstep(q, g.r_tc - soft, g.r_tc + soft)) *
                                       smoothstep(q, g.r_nec - soft, g.r_nec + soft));
                }
                labels[idx] = lab;

                for (Modality m : kModalities) {
                    const auto& tc = spec.tumor_contrast.at(m);
                    double v = maps.at(m).forward(t);
                    v += blend_ed * tc.edema + blend_nec * tc.necrotic +
                         blend_enh * tc.enhancing;
                    v = std::max(v, 0.02);
                    v = std::pow(v, gamma.at(m)) * gain.at(m);
                    if (spec.noise_std > 0)
                        v += noise_rng.at(m).normal(0.0, spec.noise_std);
                    vols.at(m)[idx] = float(std::max(v, 0.005)); // brain stays non-zero
                }
            }

    MultiModalStudy study;
    study.case_id = "phantom_" + std::to_string(spec.rng_seed);
    for (Modality m : kModalities)
        study.volumes.emplace(m, Volume(std::move(vols.at(m)), m));
    study.labels = LabelMap(std::move(labels));
    study.validate();

    if (internals) {
        internals->tissue = std::move(tissue);
        internals->gamma = gamma;
        internals->gain = gain;
    }
    return study;
}

// Analytic inverse used by the learnability sanity check: recover the tissue
// field from one noise-free modality given the case parameters.
inline double invert_modality_value(const PhantomSpec& spec, Modality m, double gamma,
                                    double gain, double value) {
    phantom_detail::MonotoneMap map(spec.anchors.at(m));
    const double v = std::pow(value / gain, 1.0 / gamma);
    return map.inverse(v);
}

struct CorpusEntry {
    std::string case_id;
    std::uint64_t seed = 0;
    std::size_t wt_voxels = 0, tc_voxels = 0, et_voxels = 0;
};

// n studies with seeds base_seed .. base_seed+n-1.
inline std::vector<MultiModalStudy> generate_corpus(std::size_t n,
                                                    std::uint64_t base_seed,
                                                    PhantomSpec spec,
                                                    std::vector<CorpusEntry>* manifest = nullptr) {
    BRASYN_CHECK(n >= 1, "generate_corpus: n must be >= 1");
    std::vector<MultiModalStudy> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        spec.rng_seed = base_seed + i;
        out.push_back(generate_phantom(spec));
        if (manifest) {
            CorpusEntry e;
            e.case_id = out.back().case_id;
            e.seed = spec.rng_seed;
            auto regions = compose_regions(*out.back().labels);
            for (std::size_t j = 0; j < regions[Region::WT].size(); ++j) {
                e.wt_voxels += regions[Region::WT][j];
                e.tc_voxels += regions[Region::TC][j];
                e.et_voxels += regions[Region::ET][j];
            }
            manifest->push_back(std::move(e));
        }
    }
    return out;
}

} // namespace brasyn
