#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "volume.hpp"

namespace brasyn::metrics {

// HD95 sentinel when exactly one mask is empty (community convention).
inline constexpr double kHd95Sentinel = 373.1287;

// ---------------------------------------------------------------------------
// SSIM with a uniform cubic window (clipped at borders),
// C1 = (0.01 L)^2, C2 = (0.03 L)^2. Window statistics come from summed-
// volume tables in double precision.
// ---------------------------------------------------------------------------

namespace detail {

// Summed-volume table with a leading zero plane per axis: sat has dims
// (D+1, H+1, W+1) and sat(d,h,w) = sum over the box [0,d) x [0,h) x [0,w).
class Sat {
public:
    Sat(const Tensor<float>& a, const Tensor<float>& b, int mode)
        : D_(a.dim(0)), H_(a.dim(1)), W_(a.dim(2)),
          data_((D_ + 1) * (H_ + 1) * (W_ + 1), 0.0) {
        for (std::size_t d = 0; d < D_; ++d)
            for (std::size_t h = 0; h < H_; ++h) {
                const std::size_t row = (d * H_ + h) * W_;
                double run = 0;
                for (std::size_t w = 0; w < W_; ++w) {
                    const double av = a[row + w];
                    const double bv = b[row + w];
                    double v = 0;
                    switch (mode) {
                        case 0: v = av; break;          // sum a
                        case 1: v = bv; break;          // sum b
                        case 2: v = av * av; break;     // sum a^2
                        case 3: v = bv * bv; break;     // sum b^2
                        case 4: v = av * bv; break;     // sum ab
                    }
                    run += v;
                    at(d + 1, h + 1, w + 1) =
                        run + at(d, h + 1, w + 1) + at(d + 1, h, w + 1) -
                        at(d, h, w + 1);
                }
            }
    }

    // inclusive-exclusive box sum over [d0,d1) x [h0,h1) x [w0,w1)
    double box(std::size_t d0, std::size_t d1, std::size_t h0, std::size_t h1,
               std::size_t w0, std::size_t w1) const {
        return at(d1, h1, w1) - at(d0, h1, w1) - at(d1, h0, w1) - at(d1, h1, w0) +
               at(d0, h0, w1) + at(d0, h1, w0) + at(d1, h0, w0) - at(d0, h0, w0);
    }

private:
    double& at(std::size_t d, std::size_t h, std::size_t w) {
        return data_[(d * (H_ + 1) + h) * (W_ + 1) + w];
    }
    double at(std::size_t d, std::size_t h, std::size_t w) const {
        return data_[(d * (H_ + 1) + h) * (W_ + 1) + w];
    }
    std::size_t D_, H_, W_;
    std::vector<double> data_;
};

} // namespace detail

// Per-voxel SSIM field between two same-shape volumes.
inline Tensor<float> ssim_map(const Tensor<float>& a, const Tensor<float>& b,
                              int window = 7, double L = 2.0) {
    BRASYN_CHECK(a.shape() == b.shape(), "ssim_map: shape mismatch ",
                 shape_str(a.shape()), " vs ", shape_str(b.shape()));
    BRASYN_CHECK(a.ndim() == 3, "ssim_map: need 3-d volumes");
    BRASYN_CHECK(L > 0, "ssim_map: dynamic range L must be positive");
    BRASYN_CHECK(window >= 1 && window % 2 == 1, "ssim_map: window must be odd");

    const std::size_t D = a.dim(0), H = a.dim(1), W = a.dim(2);
    const int r = window / 2;
    const double c1 = (0.01 * L) * (0.01 * L);
    const double c2 = (0.03 * L) * (0.03 * L);

    detail::Sat sa(a, b, 0), sb(a, b, 1), saa(a, b, 2), sbb(a, b, 3), sab(a, b, 4);

    Tensor<float> out(a.shape());
    for (std::size_t d = 0; d < D; ++d) {
        const std::size_t d0 = std::size_t(std::max<long>(0, long(d) - r));
        const std::size_t d1 = std::min(D, d + std::size_t(r) + 1);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t h0 = std::size_t(std::max<long>(0, long(h) - r));
            const std::size_t h1 = std::min(H, h + std::size_t(r) + 1);
            for (std::size_t w = 0; w < W; ++w) {
                const std::size_t w0 = std::size_t(std::max<long>(0, long(w) - r));
                const std::size_t w1 = std::min(W, w + std::size_t(r) + 1);
                const double n = double((d1 - d0) * (h1 - h0) * (w1 - w0));
                const double mu_a = sa.box(d0, d1, h0, h1, w0, w1) / n;
                const double mu_b = sb.box(d0, d1, h0, h1, w0, w1) / n;
                // not clamped: for a==b the rounding errors cancel exactly
                const double va = saa.box(d0, d1, h0, h1, w0, w1) / n - mu_a * mu_a;
                const double vb = sbb.box(d0, d1, h0, h1, w0, w1) / n - mu_b * mu_b;
                const double cov = sab.box(d0, d1, h0, h1, w0, w1) / n - mu_a * mu_b;
                const double ssim = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                                    ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
                out[(d * H + h) * W + w] = float(ssim);
            }
        }
    }
    return out;
}

// Mean of the SSIM map over a mask.
inline double ssim_region(const Tensor<float>& map, const Mask& mask) {
    BRASYN_CHECK(map.shape() == mask.shape(), "ssim_region: shape mismatch");
    double s = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < map.size(); ++i)
        if (mask[i]) {
            s += map[i];
            ++n;
        }
    BRASYN_CHECK(n > 0, "ssim_region: empty mask");
    return s / double(n);
}

inline double ssim_mean(const Tensor<float>& a, const Tensor<float>& b,
                        int window = 7, double L = 2.0) {
    return ssim_map(a, b, window, L).mean();
}

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

inline double dice(const Mask& pred, const Mask& gt) {
    BRASYN_CHECK(pred.shape() == gt.shape(), "dice: shape mismatch");
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        inter += (p && g);
        a += p;
        b += g;
    }
    if (a + b == 0) return 1.0; // both empty
    return 2.0 * double(inter) / double(a + b);
}

// ---------------------------------------------------------------------------
// HD95: 95th percentile of symmetric surface-to-surface nearest distances.
// Surfaces are foreground voxels with a 6-connected background neighbour
// (out-of-volume counts as background). Distances come from an exact
// anisotropic Euclidean distance transform (per-axis lower envelopes).
// ---------------------------------------------------------------------------

namespace detail {

inline Mask surface_voxels(const Mask& m) {
    const std::size_t D = m.dim(0), H = m.dim(1), W = m.dim(2);
    Mask out(m.shape());
    auto fg = [&](long d, long h, long w) {
        if (d < 0 || d >= long(D) || h < 0 || h >= long(H) || w < 0 || w >= long(W))
            return false;
        return m[(std::size_t(d) * H + std::size_t(h)) * W + std::size_t(w)] != 0;
    };
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
                const std::size_t i = (d * H + h) * W + w;
                if (!m[i]) continue;
                const long dd = long(d), hh = long(h), ww = long(w);
                if (!fg(dd - 1, hh, ww) || !fg(dd + 1, hh, ww) || !fg(dd, hh - 1, ww) ||
                    !fg(dd, hh + 1, ww) || !fg(dd, hh, ww - 1) || !fg(dd, hh, ww + 1))
                    out[i] = 1;
            }
    return out;
}

// 1-d squared-distance transform (lower envelope of parabolas), with grid
// step `step` in mm. f holds squared distances; overwritten with the result.
inline void edt_1d(std::vector<double>& f, double step) {
    const std::size_t n = f.size();
    static thread_local std::vector<int> v;
    static thread_local std::vector<double> z, d;
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    d.assign(n, 0.0);
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    const double s2 = step * step;
    for (int q = 1; q < int(n); ++q) {
        double s;
        while (true) {
            const int p = v[k];
            s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
            if (s > z[k]) break;
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < int(n); ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = step * (q - v[k]);
        d[q] = dq * dq + f[v[k]];
    }
    std::copy(d.begin(), d.end(), f.begin());
}

// Exact squared EDT to the set bits of `seed`, anisotropic spacing (d,h,w).
inline std::vector<double> edt_sq(const Mask& seed, std::array<double, 3> spacing) {
    const std::size_t D = seed.dim(0), H = seed.dim(1), W = seed.dim(2);
    // large finite stand-in for infinity: keeps the envelope arithmetic
    // NaN-free on seedless scan lines
    const double inf = 1e300;
    std::vector<double> g(D * H * W);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = seed[i] ? 0.0 : inf;

    std::vector<double> line;
    // along W
    line.resize(W);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t h = 0; h < H; ++h) {
            double* row = g.data() + (d * H + h) * W;
            std::copy(row, row + W, line.begin());
            edt_1d(line, spacing[2]);
            std::copy(line.begin(), line.end(), row);
        }
    // along H
    line.resize(H);
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t w = 0; w < W; ++w) {
            for (std::size_t h = 0; h < H; ++h) line[h] = g[(d * H + h) * W + w];
            edt_1d(line, spacing[1]);
            for (std::size_t h = 0; h < H; ++h) g[(d * H + h) * W + w] = line[h];
        }
    // along D
    line.resize(D);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
            for (std::size_t d = 0; d < D; ++d) line[d] = g[(d * H + h) * W + w];
            edt_1d(line, spacing[0]);
            for (std::size_t d = 0; d < D; ++d) g[(d * H + h) * W + w] = line[d];
        }
    return g;
}

// Linear-interpolation percentile of an unsorted sample, q in [0,1].
inline double percentile_linear(std::vector<double> xs, double q) {
    BRASYN_CHECK(!xs.empty(), "percentile of empty sample");
    std::sort(xs.begin(), xs.end());
    const double pos = q * double(xs.size() - 1);
    const std::size_t lo = std::size_t(pos);
    const double frac = pos - double(lo);
    if (lo + 1 >= xs.size()) return xs.back();
    return xs[lo] * (1.0 - frac) + xs[lo + 1] * frac;
}

} // namespace detail

inline double hd95(const Mask& pred, const Mask& gt,
                   std::array<double, 3> spacing = {1, 1, 1}) {
    BRASYN_CHECK(pred.shape() == gt.shape(), "hd95: shape mismatch");
    std::size_t np = 0, ng = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        np += pred[i] != 0;
        ng += gt[i] != 0;
    }
    if (np == 0 && ng == 0) return 0.0;
    if (np == 0 || ng == 0) return kHd95Sentinel;

    const Mask sp = detail::surface_voxels(pred);
    const Mask sg = detail::surface_voxels(gt);
    const auto dt_to_g = detail::edt_sq(sg, spacing);
    const auto dt_to_p = detail::edt_sq(sp, spacing);

    std::vector<double> dists;
    for (std::size_t i = 0; i < sp.size(); ++i)
        if (sp[i]) dists.push_back(std::sqrt(dt_to_g[i]));
    for (std::size_t i = 0; i < sg.size(); ++i)
        if (sg[i]) dists.push_back(std::sqrt(dt_to_p[i]));
    return detail::percentile_linear(std::move(dists), 0.95);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MetricReport {
    std::string case_id;
    Modality target = Modality::T1;
    std::string stage; // "stage1" or "refined"
    double ssim_whole = 0, ssim_tumor = 0, ssim_healthy = 0;
    std::map<Region, double> dice;
    std::map<Region, double> hd95;
};

inline const std::vector<std::string>& metric_columns() {
    static const std::vector<std::string> cols{
        "case_id", "target",  "stage",   "ssim_whole", "ssim_tumor", "ssim_healthy",
        "dice_wt", "dice_tc", "dice_et", "hd95_wt",    "hd95_tc",    "hd95_et"};
    return cols;
}

inline std::string format_double(double v) { return format_fixed(v); }

inline void write_metric_csv(const std::filesystem::path& path,
                             std::vector<MetricReport> reports) {
    // deterministic order regardless of evaluation order
    std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) {
        if (a.case_id != b.case_id) return a.case_id < b.case_id;
        if (a.target != b.target) return int(a.target) < int(b.target);
        return a.stage < b.stage;
    });
    std::ofstream f(path);
    BRASYN_CHECK(f.good(), "metrics: cannot open for write: ", path.string());
    const auto& cols = metric_columns();
    for (std::size_t i = 0; i < cols.size(); ++i)
        f << cols[i] << (i + 1 < cols.size() ? ',' : '\n');
    for (const auto& r : reports) {
        f << r.case_id << ',' << modality_name(r.target) << ',' << r.stage << ','
          << format_double(r.ssim_whole) << ',' << format_double(r.ssim_tumor) << ','
          << format_double(r.ssim_healthy);
        for (Region reg : kRegions) f << ',' << format_double(r.dice.at(reg));
        for (Region reg : kRegions) f << ',' << format_double(r.hd95.at(reg));
        f << '\n';
    }
    BRASYN_CHECK(f.good(), "metrics: write failed: ", path.string());
}

struct SummaryStats {
    double mean = 0, std = 0, median = 0, q25 = 0, q75 = 0;
};

inline SummaryStats summarize(const std::vector<double>& xs) {
    BRASYN_CHECK(!xs.empty(), "summarize: empty sample");
    SummaryStats s;
    for (double x : xs) s.mean += x;
    s.mean /= double(xs.size());
    for (double x : xs) s.std += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(s.std / double(xs.size()));
    s.median = detail::percentile_linear(xs, 0.50);
    s.q25 = detail::percentile_linear(xs, 0.25);
    s.q75 = detail::percentile_linear(xs, 0.75);
    return s;
}

} // namespace brasyn::metrics
