#include <catch2/catch_amalgamated.hpp>

#include <numbers>

#include <brasyn/metrics.hpp>

#include "testing.hpp"

using namespace brasyn;
using Catch::Matchers::WithinAbs;

namespace {

Mask mask_from_bits(Shape shape, const std::vector<std::size_t>& on) {
    Mask m(std::move(shape));
    for (auto i : on) m[i] = 1;
    return m;
}

// Independent oracle: all-pairs surface distances + linear-interp percentile.
double hd95_oracle(const Mask& a, const Mask& b, std::array<double, 3> sp) {
    const std::size_t D = a.dim(0), H = a.dim(1), W = a.dim(2);
    auto surface = [&](const Mask& m) {
        std::vector<std::array<long, 3>> out;
        for (long d = 0; d < long(D); ++d)
            for (long h = 0; h < long(H); ++h)
                for (long w = 0; w < long(W); ++w) {
                    if (!m[(std::size_t(d) * H + std::size_t(h)) * W + std::size_t(w)])
                        continue;
                    bool surf = false;
                    const long nb[6][3] = {{d - 1, h, w}, {d + 1, h, w}, {d, h - 1, w},
                                           {d, h + 1, w}, {d, h, w - 1}, {d, h, w + 1}};
                    for (auto& n : nb) {
                        if (n[0] < 0 || n[0] >= long(D) || n[1] < 0 || n[1] >= long(H) ||
                            n[2] < 0 || n[2] >= long(W)) {
                            surf = true;
                        } else if (!m[(std::size_t(n[0]) * H + std::size_t(n[1])) * W +
                                      std::size_t(n[2])]) {
                            surf = true;
                        }
                    }
                    if (surf) out.push_back({d, h, w});
                }
        return out;
    };
    auto sa = surface(a), sb = surface(b);
    if (sa.empty() && sb.empty()) return 0.0;
    if (sa.empty() || sb.empty()) return metrics::kHd95Sentinel;
    auto nearest = [&](const std::array<long, 3>& p,
                       const std::vector<std::array<long, 3>>& set) {
        double best = 1e300;
        for (const auto& q : set) {
            const double dd = (p[0] - q[0]) * sp[0];
            const double dh = (p[1] - q[1]) * sp[1];
            const double dw = (p[2] - q[2]) * sp[2];
            best = std::min(best, dd * dd + dh * dh + dw * dw);
        }
        return std::sqrt(best);
    };
    std::vector<double> dists;
    for (const auto& p : sa) dists.push_back(nearest(p, sb));
    for (const auto& p : sb) dists.push_back(nearest(p, sa));
    std::sort(dists.begin(), dists.end());
    const double pos = 0.95 * double(dists.size() - 1);
    const std::size_t lo = std::size_t(pos);
    const double frac = pos - double(lo);
    if (lo + 1 >= dists.size()) return dists.back();
    return dists[lo] * (1 - frac) + dists[lo + 1] * frac;
}

double dice_oracle(const Mask& a, const Mask& b) {
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] && b[i]) ++inter;
        if (a[i]) ++na;
        if (b[i]) ++nb;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(inter) / double(na + nb);
}

} // namespace

TEST_CASE("ssim of identical volumes is exactly one") {
    Rng rng(1);
    Tensor<float> a = Tensor<float>::randn({6, 7, 8}, rng, 0.5f, 0.2f);
    auto map = metrics::ssim_map(a, a, 7, 2.0);
    for (std::size_t i = 0; i < map.size(); ++i)
        REQUIRE_THAT(double(map[i]), WithinAbs(1.0, 1e-12));
}

TEST_CASE("ssim of constant volumes matches the closed form") {
    const double p = 0.4, q = 0.7, L = 2.0;
    Tensor<float> a = Tensor<float>::full({5, 5, 5}, float(p));
    Tensor<float> b = Tensor<float>::full({5, 5, 5}, float(q));
    auto map = metrics::ssim_map(a, b, 7, L);
    const double c1 = (0.01 * L) * (0.01 * L);
    const double want = (2 * p * q + c1) / (p * p + q * q + c1);
    for (std::size_t i = 0; i < map.size(); ++i)
        REQUIRE_THAT(double(map[i]), WithinAbs(want, 1e-7));
}

TEST_CASE("ssim of anti-correlated zero-mean fields is non-positive") {
    // period-7 sinusoid: every full 7-wide window sums to zero
    const std::size_t n = 21;
    Tensor<float> a(Shape{n, n, n});
    for (std::size_t d = 0; d < n; ++d)
        for (std::size_t h = 0; h < n; ++h)
            for (std::size_t w = 0; w < n; ++w)
                a[(d * n + h) * n + w] =
                    0.5f * float(std::sin(2 * std::numbers::pi * (double(w) + 0.5) / 7.0));
    Tensor<float> b(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) b[i] = -a[i];
    auto map = metrics::ssim_map(a, b, 7, 1.0);
    for (std::size_t d = 3; d + 3 < n; ++d)
        for (std::size_t h = 3; h + 3 < n; ++h)
            for (std::size_t w = 3; w + 3 < n; ++w)
                REQUIRE(map[(d * n + h) * n + w] <= 0.0f);
}

TEST_CASE("ssim is symmetric and bounded by one") {
    Rng rng(2);
    Tensor<float> a = Tensor<float>::randn({5, 6, 6}, rng, 0.4f);
    Tensor<float> b = Tensor<float>::randn({5, 6, 6}, rng, 0.4f);
    auto ab = metrics::ssim_map(a, b, 5, 2.0);
    auto ba = metrics::ssim_map(b, a, 5, 2.0);
    for (std::size_t i = 0; i < ab.size(); ++i) {
        REQUIRE_THAT(double(ab[i]), WithinAbs(double(ba[i]), 1e-9));
        REQUIRE(ab[i] <= 1.0f + 1e-7f);
    }
    CHECK_THROWS(metrics::ssim_map(a, Tensor<float>(Shape{5, 6, 7}), 5, 2.0));
}

TEST_CASE("ssim_region: whole-domain mask, identity, partition decomposition") {
    Rng rng(3);
    Tensor<float> a = Tensor<float>::randn({5, 5, 5}, rng, 0.4f);
    Tensor<float> b = Tensor<float>::randn({5, 5, 5}, rng, 0.4f);
    auto map = metrics::ssim_map(a, b, 5, 2.0);

    Mask all(a.shape());
    all.fill(1);
    CHECK_THAT(metrics::ssim_region(map, all), WithinAbs(map.mean(), 1e-9));

    auto self = metrics::ssim_map(a, a, 5, 2.0);
    Mask some = mask_from_bits(a.shape(), {0, 7, 31, 99});
    CHECK_THAT(metrics::ssim_region(self, some), WithinAbs(1.0, 1e-9));

    // |T| s_T + |H| s_H == N s_whole for any partition {T, H}
    Mask t(a.shape()), h(a.shape());
    std::size_t nt = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = rng.uniform() < 0.4;
        h[i] = 1 - t[i];
        nt += t[i];
    }
    const double st = metrics::ssim_region(map, t);
    const double sh = metrics::ssim_region(map, h);
    const double sw = map.mean();
    const double lhs = double(nt) * st + double(t.size() - nt) * sh;
    CHECK_THAT(lhs, WithinAbs(double(t.size()) * sw, 1e-6));

    Mask empty(a.shape());
    CHECK_THROWS(metrics::ssim_region(map, empty));
}

TEST_CASE("dice: identities, disjoint, half overlap, conventions") {
    Shape s{3, 3, 3};
    auto a = mask_from_bits(s, {0, 1, 2, 3});
    CHECK(metrics::dice(a, a) == 1.0);
    auto b = mask_from_bits(s, {10, 11, 12, 13});
    CHECK(metrics::dice(a, b) == 0.0);
    auto c = mask_from_bits(s, {2, 3, 4, 5}); // overlap {2,3}
    CHECK_THAT(metrics::dice(a, c), WithinAbs(0.5, 1e-12));
    Mask e1(s), e2(s);
    CHECK(metrics::dice(e1, e2) == 1.0); // both empty
    CHECK(metrics::dice(e1, a) == 0.0);
}

TEST_CASE("dice is symmetric with range [0,1] on random masks") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Mask a(Shape{4, 4, 4}), b(Shape{4, 4, 4});
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = rng.uniform() < 0.35;
            b[i] = rng.uniform() < 0.35;
        }
        const double ab = metrics::dice(a, b);
        CHECK(ab == metrics::dice(b, a));
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
    }
}

TEST_CASE("hd95: pointwise examples and sentinels") {
    Shape s{1, 1, 8};
    auto a = mask_from_bits(s, {0});
    auto b = mask_from_bits(s, {3});
    CHECK_THAT(metrics::hd95(a, b, {1, 1, 1}), WithinAbs(3.0, 1e-9));
    CHECK_THAT(metrics::hd95(a, a, {1, 1, 1}), WithinAbs(0.0, 1e-12));

    Mask empty(s);
    CHECK(metrics::hd95(empty, empty) == 0.0);
    CHECK(metrics::hd95(empty, a) == metrics::kHd95Sentinel);
    CHECK(metrics::hd95(a, empty) == metrics::kHd95Sentinel);
}

TEST_CASE("hd95 is symmetric and scales linearly with spacing") {
    Rng rng(6);
    Mask a(Shape{5, 6, 6}), b(Shape{5, 6, 6});
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = rng.uniform() < 0.2;
        b[i] = rng.uniform() < 0.2;
    }
    const double ab = metrics::hd95(a, b, {1, 1, 1});
    CHECK_THAT(metrics::hd95(b, a, {1, 1, 1}), WithinAbs(ab, 1e-9));
    CHECK_THAT(metrics::hd95(a, b, {2, 2, 2}), WithinAbs(2 * ab, 1e-9));
}

TEST_CASE("dice and hd95 match brute-force oracles on 3x3 plane masks") {
    // masks live on the z=1 plane of a 3^3 volume; sample of the 2^9 x 2^9 grid
    Rng rng(7);
    const std::array<double, 3> sp{1.0, 1.25, 0.75};
    for (int trial = 0; trial < 2000; ++trial) {
        const std::uint32_t pa = std::uint32_t(rng.uniform_int(0, 511));
        const std::uint32_t pb = std::uint32_t(rng.uniform_int(0, 511));
        Mask a(Shape{3, 3, 3}), b(Shape{3, 3, 3});
        for (int bit = 0; bit < 9; ++bit) {
            const std::size_t idx = (1 * 3 + std::size_t(bit / 3)) * 3 + std::size_t(bit % 3);
            a[idx] = (pa >> bit) & 1;
            b[idx] = (pb >> bit) & 1;
        }
        REQUIRE_THAT(metrics::dice(a, b), WithinAbs(dice_oracle(a, b), 1e-12));
        REQUIRE_THAT(metrics::hd95(a, b, sp), WithinAbs(hd95_oracle(a, b, sp), 1e-9));
    }
}

TEST_CASE("summary statistics") {
    std::vector<double> xs{1, 2, 3, 4, 5};
    auto s = metrics::summarize(xs);
    CHECK_THAT(s.mean, WithinAbs(3.0, 1e-12));
    CHECK_THAT(s.median, WithinAbs(3.0, 1e-12));
    CHECK_THAT(s.q25, WithinAbs(2.0, 1e-12));
    CHECK_THAT(s.q75, WithinAbs(4.0, 1e-12));
    CHECK_THAT(s.std, WithinAbs(std::sqrt(2.0), 1e-12));
}

TEST_CASE("metric csv is sorted by case id") {
    namespace fs = std::filesystem;
    const auto path = fs::temp_directory_path() / "brasyn_metrics_test.csv";
    std::vector<metrics::MetricReport> reports(2);
    reports[0].case_id = "case_b";
    reports[1].case_id = "case_a";
    for (auto& r : reports) {
        r.stage = "stage1";
        for (Region reg : kRegions) {
            r.dice[reg] = 0.5;
            r.hd95[reg] = 1.0;
        }
    }
    metrics::write_metric_csv(path, reports);
    std::ifstream f(path);
    std::string header, first;
    std::getline(f, header);
    std::getline(f, first);
    CHECK(header.rfind("case_id,target,stage", 0) == 0);
    CHECK(first.rfind("case_a", 0) == 0);
    fs::remove(path);
}
