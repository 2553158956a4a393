#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <vector>

#include "nn.hpp"
#include "volume.hpp"

namespace brasyn {

// ---------------------------------------------------------------------------
// Median brain intensity and per-modality priors. The median is taken over
// brain-mask voxels of the stage-1-normalized ([-1,1]) volume; callers hand
// in volumes already on that scale (the CLI rescales before fitting).
// ---------------------------------------------------------------------------

inline double median_brain_intensity(const Volume& vol) {
    std::vector<float> brain;
    brain.reserve(vol.data.size() / 4);
    for (std::size_t i = 0; i < vol.data.size(); ++i)
        if (vol.mask[i]) brain.push_back(vol.data[i]);
    BRASYN_CHECK(!brain.empty(), "median_brain_intensity: empty brain mask");
    const std::size_t n = brain.size();
    const std::size_t mid = n / 2;
    std::nth_element(brain.begin(), brain.begin() + mid, brain.end());
    const double hi = brain[mid];
    if (n % 2 == 1) return hi;
    std::nth_element(brain.begin(), brain.begin() + (mid - 1), brain.begin() + mid);
    return (double(brain[mid - 1]) + hi) / 2.0;
}

struct IntensityPrior {
    Modality modality = Modality::T1;
    double mean = 0;
    double std = 0; // population std
    std::size_t n_samples = 0;
};

inline IntensityPrior fit_prior(const std::vector<Volume>& volumes, Modality modality) {
    std::vector<double> medians;
    for (const auto& v : volumes)
        if (v.modality == modality) medians.push_back(median_brain_intensity(v));
    BRASYN_CHECK(medians.size() >= 2, "fit_prior: need at least 2 volumes of ",
                 modality_name(modality), ", got ", medians.size());
    double mean = 0;
    for (double m : medians) mean += m;
    mean /= double(medians.size());
    double var = 0;
    for (double m : medians) var += (m - mean) * (m - mean);
    var /= double(medians.size());
    return IntensityPrior{modality, mean, std::sqrt(var), medians.size()};
}

enum class SamplingStrategy { Mean, Clip2Sigma, GroundTruth };

inline const char* strategy_name(SamplingStrategy s) {
    switch (s) {
        case SamplingStrategy::Mean: return "mean";
        case SamplingStrategy::Clip2Sigma: return "clip2sigma";
        case SamplingStrategy::GroundTruth: return "gt";
    }
    return "?";
}

inline SamplingStrategy parse_strategy(std::string s) {
    for (auto& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
    if (s == "mean") return SamplingStrategy::Mean;
    if (s == "clip2sigma" || s == "2sigma") return SamplingStrategy::Clip2Sigma;
    if (s == "gt" || s == "groundtruth") return SamplingStrategy::GroundTruth;
    BRASYN_CHECK(false, "unknown sampling strategy '", s, "'");
    return SamplingStrategy::Mean;
}

inline double sample_target_intensity(const IntensityPrior& prior,
                                      SamplingStrategy strategy,
                                      std::optional<double> gt,
                                      std::uint64_t rng_seed) {
    switch (strategy) {
        case SamplingStrategy::Mean:
            return prior.mean;
        case SamplingStrategy::Clip2Sigma: {
            Rng rng(rng_seed);
            const double draw = rng.normal(prior.mean, prior.std);
            return std::clamp(draw, prior.mean - 2 * prior.std,
                              prior.mean + 2 * prior.std);
        }
        case SamplingStrategy::GroundTruth:
            BRASYN_CHECK(gt.has_value(),
                         "sample_target_intensity: GroundTruth strategy needs gt");
            return *gt;
    }
    return prior.mean;
}

// ---------------------------------------------------------------------------
// Prior persistence: one text record per modality.
// ---------------------------------------------------------------------------

inline void write_priors(const std::filesystem::path& path,
                         const std::vector<IntensityPrior>& priors) {
    std::ofstream f(path);
    BRASYN_CHECK(f.good(), "priors: cannot open for write: ", path.string());
    f << "# modality mean std n_samples  (median space: linear [-1,1])\n";
    f.precision(17);
    for (const auto& p : priors)
        f << modality_name(p.modality) << ' ' << p.mean << ' ' << p.std << ' '
          << p.n_samples << '\n';
    BRASYN_CHECK(f.good(), "priors: write failed: ", path.string());
}

inline std::vector<IntensityPrior> read_priors(const std::filesystem::path& path) {
    std::ifstream f(path);
    BRASYN_CHECK(f.good(), "priors: cannot open: ", path.string());
    std::vector<IntensityPrior> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream iss(line);
        std::string mod;
        IntensityPrior p;
        iss >> mod >> p.mean >> p.std >> p.n_samples;
        BRASYN_CHECK(bool(iss), "priors: malformed line '", line, "'");
        p.modality = parse_modality(mod);
        out.push_back(p);
    }
    return out;
}

inline const IntensityPrior& find_prior(const std::vector<IntensityPrior>& priors,
                                        Modality m) {
    for (const auto& p : priors)
        if (p.modality == m) return p;
    BRASYN_CHECK(false, "no prior for modality ", modality_name(m));
    return priors.front();
}

// ---------------------------------------------------------------------------
// Joint modality + intensity condition code. The scalar intensity enters as
// sinusoidal features, concatenated with the modality one-hot and linearly
// projected to the conditioning width.
// ---------------------------------------------------------------------------

struct ConditionInput {
    Modality modality = Modality::T1;
    double intensity = 0;
};

template <class T>
struct ConditionCode {
    std::array<T, 4> modality_onehot{};
    double intensity = 0;
    Tensor<T> embedding; // [width]
};

template <class T>
struct ConditionEncoder {
    std::size_t sin_width = 64;
    std::size_t embed_width = 64;
    nn::LinearLayer<T> proj;

    ConditionEncoder() = default;
    ConditionEncoder(nn::ParamStore<T>& ps, const std::string& name,
                     std::size_t sin_width_, std::size_t embed_width_, Rng& rng)
        : sin_width(sin_width_), embed_width(embed_width_),
          proj(ps, name + ".proj", 4 + sin_width_, embed_width_, rng) {}

    // Raw (graph-free) feature row: [onehot(4) | sin/cos features].
    Tensor<T> features(const ConditionInput& in, bool use_intensity) const {
        Tensor<T> f(Shape{4 + sin_width});
        f[std::size_t(in.modality)] = T(1);
        const std::size_t half = sin_width / 2;
        for (std::size_t i = 0; i < half; ++i) {
            // geometric frequencies pi .. 32*pi over the [-1,1] intensity scale
            const double omega =
                std::numbers::pi * std::pow(32.0, double(i) / double(half - 1));
            const double x = use_intensity ? in.intensity : 0.0;
            f[4 + 2 * i] = T(std::sin(omega * x));
            f[4 + 2 * i + 1] = T(std::cos(omega * x));
        }
        return f;
    }

    // Batched, tape-connected embedding [N, embed_width].
    nn::Var<T> encode_batch(const std::vector<ConditionInput>& ins,
                            bool use_intensity = true) const {
        Tensor<T> f(Shape{ins.size(), 4 + sin_width});
        for (std::size_t n = 0; n < ins.size(); ++n) {
            Tensor<T> row = features(ins[n], use_intensity);
            std::copy(row.data(), row.data() + row.size(),
                      f.data() + n * (4 + sin_width));
        }
        return proj(ad::constant(std::move(f)));
    }

    ConditionCode<T> encode(const ConditionInput& in, bool use_intensity = true) const {
        ad::NoGradGuard off;
        auto emb = encode_batch({in}, use_intensity);
        ConditionCode<T> code;
        code.modality_onehot[std::size_t(in.modality)] = T(1);
        code.intensity = in.intensity;
        code.embedding = emb->value.reshaped({embed_width});
        return code;
    }
};

} // namespace brasyn
