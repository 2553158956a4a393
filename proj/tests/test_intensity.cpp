#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>

#include <brasyn/intensity.hpp>

using namespace brasyn;
using Catch::Matchers::WithinAbs;

namespace {

// volume whose brain voxels take exactly the given values
Volume brain_values(std::vector<float> vals, std::size_t pad_zeros = 3) {
    std::vector<float> data = vals;
    for (std::size_t i = 0; i < pad_zeros; ++i) data.push_back(0.0f);
    return Volume(Tensor<float>(Shape{1, 1, data.size()}, data), Modality::T1);
}

} // namespace

TEST_CASE("median_brain_intensity: odd, even, constant") {
    CHECK_THAT(median_brain_intensity(brain_values({0.1f, 0.2f, 0.3f, 0.4f, 0.5f})),
               WithinAbs(0.3, 1e-7));
    CHECK_THAT(median_brain_intensity(brain_values({0.2f, 0.4f})), WithinAbs(0.3, 1e-7));
    CHECK_THAT(median_brain_intensity(brain_values({0.7f, 0.7f, 0.7f})),
               WithinAbs(0.7, 1e-7));
}

TEST_CASE("median_brain_intensity ignores voxel order and background zeros") {
    std::vector<float> vals{0.9f, 0.1f, 0.5f, 0.3f, 0.7f};
    const double ref = median_brain_intensity(brain_values(vals, 0));
    std::reverse(vals.begin(), vals.end());
    CHECK_THAT(median_brain_intensity(brain_values(vals, 10)), WithinAbs(ref, 1e-9));
}

TEST_CASE("median_brain_intensity on empty mask fails") {
    Volume v(Tensor<float>(Shape{1, 1, 4}), Modality::T1);
    CHECK_THROWS(median_brain_intensity(v));
}

TEST_CASE("fit_prior: constant and two-sample oracles") {
    std::vector<Volume> vols;
    for (int i = 0; i < 3; ++i) vols.push_back(brain_values({0.4f, 0.4f, 0.4f}));
    auto p = fit_prior(vols, Modality::T1);
    CHECK_THAT(p.mean, WithinAbs(0.4, 1e-6));
    CHECK_THAT(p.std, WithinAbs(0.0, 1e-9));
    CHECK(p.n_samples == 3);

    // medians {0.3, 0.5}: mean 0.4, population std 0.1
    std::vector<Volume> two{brain_values({0.3f, 0.3f}), brain_values({0.5f, 0.5f})};
    auto q = fit_prior(two, Modality::T1);
    CHECK_THAT(q.mean, WithinAbs(0.4, 1e-6));
    CHECK_THAT(q.std, WithinAbs(0.1, 1e-6));

    CHECK_THROWS(fit_prior({brain_values({0.1f, 0.2f})}, Modality::T1));
    // volumes of other modalities are ignored
    CHECK_THROWS(fit_prior(two, Modality::T2));
}

TEST_CASE("fit_prior recovers the generating normal within tolerance") {
    // the T1 prior reported for real training data, used as generating truth
    const double mu = 0.4332, sigma = 0.1003;
    Rng rng(777);
    std::vector<Volume> vols;
    vols.reserve(10000);
    for (int i = 0; i < 10000; ++i) {
        const float m = float(rng.normal(mu, sigma));
        vols.push_back(brain_values({m, m, m}, 1));
    }
    auto p = fit_prior(vols, Modality::T1);
    CHECK(std::abs(p.mean - mu) / mu < 0.02);
    CHECK(std::abs(p.std - sigma) / sigma < 0.05);
}

TEST_CASE("sample_target_intensity strategies") {
    IntensityPrior prior{Modality::T1, 0.4332, 0.1003, 1251};

    // Mean: deterministic, seed-independent
    CHECK(sample_target_intensity(prior, SamplingStrategy::Mean, std::nullopt, 1) == 0.4332);
    for (std::uint64_t seed : {2u, 3u, 99u})
        CHECK(sample_target_intensity(prior, SamplingStrategy::Mean, std::nullopt, seed) ==
              0.4332);

    // Clip2Sigma: stays within [mean-2s, mean+2s] over many draws
    const double lo = 0.4332 - 2 * 0.1003, hi = 0.4332 + 2 * 0.1003;
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
        const double v =
            sample_target_intensity(prior, SamplingStrategy::Clip2Sigma, std::nullopt, seed);
        REQUIRE(v >= lo);
        REQUIRE(v <= hi);
    }
    CHECK_THAT(lo, WithinAbs(0.2326, 1e-4));
    CHECK_THAT(hi, WithinAbs(0.6338, 1e-4));

    // degenerate sigma collapses to the mean
    IntensityPrior flat{Modality::T2, 0.25, 0.0, 10};
    CHECK(sample_target_intensity(flat, SamplingStrategy::Clip2Sigma, std::nullopt, 5) ==
          0.25);

    CHECK(sample_target_intensity(prior, SamplingStrategy::GroundTruth, 0.31, 1) == 0.31);
    CHECK_THROWS(
        sample_target_intensity(prior, SamplingStrategy::GroundTruth, std::nullopt, 1));
}

TEST_CASE("priors persist through the text format") {
    namespace fs = std::filesystem;
    const auto path = fs::temp_directory_path() / "brasyn_priors_test.txt";
    std::vector<IntensityPrior> priors{
        {Modality::T1, 0.4332, 0.1003, 1251},
        {Modality::T2, 0.2498, 0.0626, 1251},
        {Modality::FLAIR, 0.3034, 0.1017, 1251},
        {Modality::T1ce, 0.2404, 0.0623, 1251},
    };
    write_priors(path, priors);
    auto back = read_priors(path);
    REQUIRE(back.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(back[i].modality == priors[i].modality);
        CHECK(back[i].mean == priors[i].mean);
        CHECK(back[i].std == priors[i].std);
        CHECK(back[i].n_samples == priors[i].n_samples);
    }
    CHECK(find_prior(back, Modality::FLAIR).mean == 0.3034);
    fs::remove(path);
}

TEST_CASE("condition encoding: determinism, one-hot, injectivity") {
    Rng rng(50);
    nn::ParamStore<float> ps;
    ConditionEncoder<float> enc(ps, "cond", 64, 32, rng);

    auto a = enc.encode({Modality::T1, 0.4332});
    auto b = enc.encode({Modality::T1, 0.4332});
    REQUIRE(a.embedding.size() == 32);
    for (std::size_t i = 0; i < 32; ++i) CHECK(a.embedding[i] == b.embedding[i]);

    // one-hot differs in exactly two positions between modalities
    auto fa = enc.features({Modality::T1, 0.2}, true);
    auto fb = enc.features({Modality::T2, 0.2}, true);
    int diff = 0;
    for (std::size_t i = 0; i < 4; ++i) diff += fa[i] != fb[i];
    CHECK(diff == 2);
    CHECK(a.modality_onehot[0] == 1.0f);
    CHECK(a.modality_onehot[1] + a.modality_onehot[2] + a.modality_onehot[3] == 0.0f);

    // distinct intensities produce distinct embeddings on random init
    auto e1 = enc.encode({Modality::T1, 0.2});
    auto e2 = enc.encode({Modality::T1, 0.6});
    double dist = 0;
    for (std::size_t i = 0; i < 32; ++i)
        dist += double(e1.embedding[i] - e2.embedding[i]) *
                double(e1.embedding[i] - e2.embedding[i]);
    CHECK(dist > 1e-8);

    // distinct modalities at fixed intensity too
    auto e3 = enc.encode({Modality::T2, 0.2});
    double dist2 = 0;
    for (std::size_t i = 0; i < 32; ++i)
        dist2 += double(e1.embedding[i] - e3.embedding[i]) *
                 double(e1.embedding[i] - e3.embedding[i]);
    CHECK(dist2 > 1e-8);

    // with intensity conditioning off the intensity no longer matters
    auto o1 = enc.encode({Modality::T1, 0.2}, false);
    auto o2 = enc.encode({Modality::T1, 0.6}, false);
    for (std::size_t i = 0; i < 32; ++i) CHECK(o1.embedding[i] == o2.embedding[i]);
}
