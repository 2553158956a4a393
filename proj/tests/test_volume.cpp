#include <catch2/catch_amalgamated.hpp>

#include <brasyn/volume.hpp>

#include "testing.hpp"

using namespace brasyn;
using Catch::Matchers::WithinAbs;

namespace {

Volume make_volume(Shape shape, const std::vector<float>& vals,
                   Modality m = Modality::T1) {
    return Volume(Tensor<float>(std::move(shape), vals), m);
}

Volume random_brain_volume(std::uint64_t seed, Shape shape = {6, 8, 8}) {
    Rng rng(seed);
    Tensor<float> data(shape);
    for (std::size_t i = 0; i < data.size(); ++i)
        data[i] = rng.uniform() < 0.3 ? 0.0f : float(rng.uniform(0.1, 2.0));
    return Volume(std::move(data), Modality::T1);
}

} // namespace

TEST_CASE("linear_rescale maps min/max to lo/hi affinely") {
    // values spanning [0,100]; 50 sits at the affine midpoint
    auto v = make_volume({1, 1, 3}, {0.0f, 50.0f, 100.0f});
    auto r = linear_rescale(v, -1.0f, 1.0f);
    CHECK_THAT(r.data[0], WithinAbs(-1.0, 1e-7)); // min -> lo
    CHECK_THAT(r.data[1], WithinAbs(0.0, 1e-7));
    CHECK_THAT(r.data[2], WithinAbs(1.0, 1e-7));

    auto v2 = make_volume({1, 1, 5}, {0, 1, 2, 3, 4});
    auto r2 = linear_rescale(v2, -1.0f, 1.0f);
    const float want[5] = {-1.0f, -0.5f, 0.0f, 0.5f, 1.0f};
    for (std::size_t i = 0; i < 5; ++i) CHECK_THAT(r2.data[i], WithinAbs(want[i], 1e-7));

    // input untouched
    CHECK(v2.data[1] == 1.0f);
}

TEST_CASE("linear_rescale rejects constant volumes") {
    auto v = make_volume({1, 1, 4}, {2, 2, 2, 2});
    CHECK_THROWS_WITH(linear_rescale(v, -1, 1),
                      Catch::Matchers::ContainsSubstring("degenerate intensity range"));
}

TEST_CASE("linear_rescale is monotone") {
    auto v = random_brain_volume(3);
    auto r = linear_rescale(v, -1, 1);
    for (std::size_t i = 0; i < v.data.size(); ++i)
        for (std::size_t j = 0; j < v.data.size(); j += 7)
            if (v.data[i] <= v.data[j]) CHECK(r.data[i] <= r.data[j]);
}

TEST_CASE("znorm_nonzero standardizes the brain and keeps zeros") {
    auto v = make_volume({1, 2, 2}, {1.0f, 0.0f, 3.0f, 0.0f});
    auto z = znorm_nonzero(v);
    CHECK_THAT(z.data[0], WithinAbs(-1.0, 1e-6));
    CHECK(z.data[1] == 0.0f);
    CHECK_THAT(z.data[2], WithinAbs(1.0, 1e-6));
    CHECK(z.data[3] == 0.0f);

    // direct arithmetic: {2,4,6} -> (x-4)/1.63299
    auto v3 = make_volume({1, 1, 3}, {2, 4, 6});
    auto z3 = znorm_nonzero(v3);
    CHECK_THAT(z3.data[0], WithinAbs(-1.2247448, 1e-5));
    CHECK_THAT(z3.data[1], WithinAbs(0.0, 1e-6));
    CHECK_THAT(z3.data[2], WithinAbs(1.2247448, 1e-5));
}

TEST_CASE("znorm_nonzero is idempotent on standardized input") {
    auto v = random_brain_volume(4);
    auto z1 = znorm_nonzero(v);
    auto z2 = znorm_nonzero(z1);
    for (std::size_t i = 0; i < z1.data.size(); ++i)
        CHECK_THAT(z2.data[i], WithinAbs(z1.data[i], 1e-6));
}

TEST_CASE("znorm_nonzero post-stats on random volumes") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        auto v = random_brain_volume(seed);
        auto z = znorm_nonzero(v);
        double s = 0, s2 = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < z.data.size(); ++i) {
            if (v.mask[i]) {
                s += z.data[i];
                s2 += double(z.data[i]) * z.data[i];
                ++n;
            } else {
                CHECK(z.data[i] == 0.0f); // bit-exact zero
            }
        }
        const double mean = s / double(n);
        const double std_ = std::sqrt(s2 / double(n) - mean * mean);
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(std_ - 1.0) < 1e-6);
    }
}

TEST_CASE("znorm_nonzero error paths") {
    auto v = make_volume({1, 1, 3}, {5, 0, 0});
    CHECK_THROWS(znorm_nonzero(v)); // single brain voxel
    auto c = make_volume({1, 1, 3}, {5, 5, 5});
    CHECK_THROWS(znorm_nonzero(c)); // zero variance
}

namespace {

// study with controllable per-slice brain pixel counts on T1
MultiModalStudy study_with_counts(const std::vector<std::size_t>& counts,
                                  std::size_t H = 50, std::size_t W = 50) {
    MultiModalStudy s;
    s.case_id = "counts";
    const std::size_t D = counts.size();
    for (Modality m : {Modality::T1, Modality::T2}) {
        Tensor<float> data(Shape{D, H, W});
        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t i = 0; i < counts[d]; ++i)
                data[d * H * W + i] = 1.0f + float(m) + float(i % 7) * 0.125f;
        s.volumes.emplace(m, Volume(std::move(data), m));
    }
    return s;
}

} // namespace

TEST_CASE("extract_axial_slices applies the strict 'fewer than' threshold") {
    auto s = study_with_counts({1999, 2000, 2500});
    auto tuples = extract_axial_slices(s, 2000);
    REQUIRE(tuples.size() == 2);
    CHECK(tuples[0].index == 1); // 1,999 excluded; 2,000 included
    CHECK(tuples[1].index == 2);
    CHECK(tuples[0].slices.at(Modality::T1).brain_pixel_count == 2000);
    // aligned across modalities by index
    CHECK(tuples[0].slices.at(Modality::T2).index == 1);
}

TEST_CASE("extract_axial_slices on an all-zero volume yields nothing") {
    MultiModalStudy s;
    s.case_id = "zero";
    s.volumes.emplace(Modality::T1, Volume(Tensor<float>(Shape{4, 8, 8}), Modality::T1));
    CHECK(extract_axial_slices(s, 1).empty());
}

TEST_CASE("stack_slices shape contract and errors") {
    std::vector<Tensor<float>> slices(3, Tensor<float>(Shape{4, 4}, 1.0f));
    auto v = stack_slices(slices);
    CHECK(v.data.shape() == Shape{3, 4, 4});

    CHECK_THROWS(stack_slices({}));
    slices.push_back(Tensor<float>(Shape{4, 5}));
    CHECK_THROWS(stack_slices(slices));
}

TEST_CASE("extract then stack at threshold zero is the identity") {
    auto v = random_brain_volume(21, {5, 6, 6});
    MultiModalStudy s;
    s.case_id = "rt";
    s.volumes.emplace(Modality::T1, v);
    auto tuples = extract_axial_slices(s, 0);
    REQUIRE(tuples.size() == v.depth());
    std::vector<Tensor<float>> slices;
    for (auto& t : tuples) slices.push_back(t.slices.at(Modality::T1).data);
    auto back = stack_slices(slices, Modality::T1);
    REQUIRE(back.data.shape() == v.data.shape());
    for (std::size_t i = 0; i < v.data.size(); ++i) CHECK(back.data[i] == v.data[i]);
}

TEST_CASE("random_crop_patch bounds, determinism, forced crop") {
    Rng rng(30);
    MultiModalStudy s;
    s.case_id = "crop";
    for (Modality m : kModalities)
        s.volumes.emplace(m, Volume(Tensor<float>::randn({64, 64, 64}, rng, 1.0f, 3.0f), m));
    s.labels = LabelMap(Tensor<std::uint8_t>(Shape{64, 64, 64}));

    auto p = random_crop_patch(s, 32, 7);
    for (Modality m : kModalities)
        CHECK(p.patches.at(m).data.shape() == Shape{32, 32, 32});
    for (int a = 0; a < 3; ++a) CHECK(p.origin[a] <= 32);
    REQUIRE(p.label.has_value());

    auto p2 = random_crop_patch(s, 32, 7);
    CHECK(p2.origin == p.origin); // same seed, same origin
    auto p3 = random_crop_patch(s, 32, 8);
    // same origin used for every modality: patch content matches manual crop
    const auto& t1 = s.at(Modality::T1).data;
    const auto& o = p3.origin;
    CHECK(p3.patches.at(Modality::T1).data.at(0, 0, 0) ==
          t1.at(o[0], o[1], o[2]));

    auto full = random_crop_patch(s, 64, 9);
    CHECK(full.origin == std::array<std::size_t, 3>{0, 0, 0});
    for (std::size_t i = 0; i < t1.size(); ++i)
        CHECK(full.patches.at(Modality::T1).data[i] == t1[i]);

    CHECK_THROWS(random_crop_patch(s, 0, 1));
}

TEST_CASE("random_crop_patch zero-pads volumes smaller than the patch") {
    Rng rng(31);
    MultiModalStudy s;
    s.case_id = "small";
    s.volumes.emplace(Modality::T1,
                      Volume(Tensor<float>::randn({8, 8, 8}, rng, 1.0f, 5.0f), Modality::T1));
    auto p = random_crop_patch(s, 16, 3);
    CHECK(p.patches.at(Modality::T1).data.shape() == Shape{16, 16, 16});
    // centred content: corner of the padded cube is zero padding
    CHECK(p.patches.at(Modality::T1).data.at(0, 0, 0) == 0.0f);
}

TEST_CASE("compose_regions implements the BraTS nesting") {
    Tensor<std::uint8_t> lab(Shape{1, 2, 2});
    lab[0] = 0;
    lab[1] = 1;
    lab[2] = 2;
    lab[3] = 3;
    auto regions = compose_regions(LabelMap(lab));

    // voxel labeled 2 (edema): WT only
    CHECK(regions[Region::WT][2] == 1);
    CHECK(regions[Region::TC][2] == 0);
    CHECK(regions[Region::ET][2] == 0);
    // voxel labeled 3: all three
    CHECK(regions[Region::WT][3] == 1);
    CHECK(regions[Region::TC][3] == 1);
    CHECK(regions[Region::ET][3] == 1);
    // necrotic core: WT+TC
    CHECK(regions[Region::TC][1] == 1);
    CHECK(regions[Region::ET][1] == 0);

    auto empty = compose_regions(LabelMap(Tensor<std::uint8_t>(Shape{2, 2, 2})));
    for (Region r : kRegions)
        for (std::size_t i = 0; i < 8; ++i) CHECK(empty[r][i] == 0);

    Tensor<std::uint8_t> bad(Shape{1, 1, 1});
    bad[0] = 4;
    CHECK_THROWS(compose_regions(LabelMap(bad)));
}

TEST_CASE("compose_regions nesting holds on random label maps") {
    Rng rng(40);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<std::uint8_t> lab(Shape{4, 5, 5});
        for (std::size_t i = 0; i < lab.size(); ++i)
            lab[i] = std::uint8_t(rng.uniform_int(0, 3));
        auto regions = compose_regions(LabelMap(lab));
        for (std::size_t i = 0; i < lab.size(); ++i) {
            CHECK(regions[Region::ET][i] <= regions[Region::TC][i]);
            CHECK(regions[Region::TC][i] <= regions[Region::WT][i]);
        }
    }
}

TEST_CASE("slice threshold scales with slice area") {
    CHECK(scaled_slice_threshold(2000, 240, 240) == 2000);
    CHECK(scaled_slice_threshold(2000, 64, 64) == 142); // 2000 * 64^2 / 240^2
}
