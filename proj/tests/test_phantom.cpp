#include <catch2/catch_amalgamated.hpp>

#include <brasyn/intensity.hpp>
#include <brasyn/phantom.hpp>

using namespace brasyn;

TEST_CASE("generate_phantom is deterministic per seed") {
    PhantomSpec spec;
    spec.shape = {32, 32, 32};
    spec.rng_seed = 11;
    auto a = generate_phantom(spec);
    auto b = generate_phantom(spec);
    for (Modality m : kModalities) {
        const auto& va = a.at(m).data;
        const auto& vb = b.at(m).data;
        REQUIRE(va.shape() == vb.shape());
        for (std::size_t i = 0; i < va.size(); ++i) REQUIRE(va[i] == vb[i]);
    }
    for (std::size_t i = 0; i < a.labels->data.size(); ++i)
        REQUIRE(a.labels->data[i] == b.labels->data[i]);

    spec.rng_seed = 12;
    auto c = generate_phantom(spec);
    bool differs = false;
    for (std::size_t i = 0; i < c.at(Modality::T1).data.size(); ++i)
        if (c.at(Modality::T1).data[i] != a.at(Modality::T1).data[i]) differs = true;
    CHECK(differs);
}

TEST_CASE("phantom labels nest and background is exactly zero") {
    PhantomSpec spec;
    spec.shape = {48, 48, 48};
    spec.rng_seed = 21;
    auto s = generate_phantom(spec);

    auto regions = compose_regions(*s.labels);
    std::size_t wt = 0, tc = 0, et = 0;
    for (std::size_t i = 0; i < regions[Region::WT].size(); ++i) {
        CHECK(regions[Region::ET][i] <= regions[Region::TC][i]);
        CHECK(regions[Region::TC][i] <= regions[Region::WT][i]);
        wt += regions[Region::WT][i];
        tc += regions[Region::TC][i];
        et += regions[Region::ET][i];
    }
    CHECK(wt > tc);
    CHECK(tc > et);
    CHECK(et > 0);

    const auto& t1 = s.at(Modality::T1);
    for (std::size_t i = 0; i < t1.data.size(); ++i) {
        for (Modality m : kModalities) {
            if (t1.mask[i] == 0) CHECK(s.at(m).data[i] == 0.0f);
        }
        // labels only inside the brain
        if (s.labels->data[i] != 0) CHECK(t1.mask[i] == 1);
    }
    // all modalities share the brain mask
    for (Modality m : kModalities)
        for (std::size_t i = 0; i < t1.mask.size(); ++i)
            CHECK(s.at(m).mask[i] == t1.mask[i]);
}

TEST_CASE("phantom modality maps are invertible on tissue (noise-free)") {
    PhantomSpec spec;
    spec.shape = {32, 32, 32};
    spec.rng_seed = 31;
    spec.noise_std = 0.0;
    spec.with_tumor = false;
    PhantomInternals internals;
    auto s = generate_phantom(spec, &internals);

    for (Modality m : kModalities) {
        const auto& v = s.at(m);
        double max_err = 0;
        for (std::size_t i = 0; i < v.data.size(); ++i) {
            if (!v.mask[i]) continue;
            const double t = invert_modality_value(spec, m, internals.gamma.at(m),
                                                   internals.gain.at(m), v.data[i]);
            max_err = std::max(max_err, std::abs(t - double(internals.tissue[i])));
        }
        CHECK(max_err < 1e-3);
    }
}

TEST_CASE("oversized tumors are rejected") {
    PhantomSpec spec;
    spec.shape = {32, 32, 32};
    spec.tumor_radius_min = 0.65;
    spec.tumor_radius_max = 0.70;
    CHECK_THROWS_WITH(generate_phantom(spec),
                      Catch::Matchers::ContainsSubstring("tumor cannot fit"));
}

TEST_CASE("generate_corpus produces distinct cases with manifest") {
    PhantomSpec spec;
    spec.shape = {32, 32, 32};
    std::vector<CorpusEntry> manifest;
    auto corpus = generate_corpus(8, 100, spec, &manifest);
    REQUIRE(corpus.size() == 8);
    REQUIRE(manifest.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(manifest[i].seed == 100 + i);
        CHECK(manifest[i].wt_voxels >= manifest[i].tc_voxels);
        CHECK(manifest[i].tc_voxels >= manifest[i].et_voxels);
        for (std::size_t j = i + 1; j < 8; ++j)
            CHECK(manifest[i].case_id != manifest[j].case_id);
    }

    // disjoint seed ranges give disjoint datasets
    auto other = generate_corpus(2, 200, spec);
    bool differs = false;
    const auto& a = corpus[0].at(Modality::T2).data;
    const auto& b = other[0].at(Modality::T2).data;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) differs = true;
    CHECK(differs);
}

TEST_CASE("per-volume medians vary across the corpus (priors are fittable)") {
    PhantomSpec spec;
    spec.shape = {32, 32, 32};
    auto corpus = generate_corpus(16, 500, spec);
    for (Modality m : kModalities) {
        std::vector<Volume> rescaled;
        for (const auto& s : corpus)
            rescaled.push_back(linear_rescale(s.at(m), -1.0f, 1.0f));
        auto prior = fit_prior(rescaled, m);
        CHECK(prior.n_samples == 16);
        CHECK(prior.std > 1e-3); // non-degenerate spread of medians
    }
}
