#pragma once

#include <filesystem>

#include "checkpoint.hpp"
#include "losses.hpp"
#include "optim.hpp"
#include "unet3d.hpp"
#include "volume.hpp"

namespace brasyn {

// ---------------------------------------------------------------------------
// Small frozen 3D segmenter standing in for an external tumor-segmentation
// model: 4 input channels (one per modality, z-normalized), 4-class softmax
// output. Deliberately small so the Dice signal stays cheap.
// ---------------------------------------------------------------------------

struct ProxyConfig {
    std::size_t width = 16; // <= 32
    std::size_t depth = 2;
};

struct SegmentResult {
    LabelMap labels;
    Tensor<float> probs; // [4, D, H, W]
};

template <class T>
struct ProxySegmenter {
    ProxyConfig cfg;
    nn::ParamStore<T> params;
    nn::UNet3d<T> unet;
    bool frozen = false;

    ProxySegmenter(ProxyConfig cfg_, std::uint64_t seed) : cfg(cfg_) {
        BRASYN_CHECK(cfg.width <= 32, "proxy: width must stay small (<= 32)");
        Rng rng(seed);
        unet = nn::UNet3d<T>(params, "proxy", 4, cfg.width, cfg.depth, 4, rng);
    }

    nn::Var<T> logits(const nn::Var<T>& x) const { return unet(x); }

    void freeze() {
        params.freeze();
        frozen = true;
    }

    double checksum() const { return params.checksum(); }

    // channels: all four modalities (real or synthesized), z-normalized.
    SegmentResult segment(const std::map<Modality, Tensor<float>>& channels) const {
        for (Modality m : kModalities)
            BRASYN_CHECK(channels.count(m), "segment: missing channel ",
                         modality_name(m));
        const Shape& s = channels.at(Modality::T1).shape();
        BRASYN_CHECK(s.size() == 3, "segment: channels must be 3-d volumes");
        Tensor<T> input(Shape{1, 4, s[0], s[1], s[2]});
        const std::size_t V = shape_numel(s);
        for (Modality m : kModalities) {
            BRASYN_CHECK(channels.at(m).shape() == s, "segment: channel shape mismatch");
            const auto& src = channels.at(m);
            T* dst = input.data() + std::size_t(m) * V;
            for (std::size_t i = 0; i < V; ++i) dst[i] = T(src[i]);
        }

        ad::NoGradGuard off;
        auto probs = nn::softmax_channels(logits(ad::constant(std::move(input))));

        SegmentResult out;
        out.probs = Tensor<float>(Shape{4, s[0], s[1], s[2]});
        for (std::size_t i = 0; i < out.probs.size(); ++i)
            out.probs[i] = float(probs->value[i]);
        Tensor<std::uint8_t> lab(s);
        for (std::size_t v = 0; v < V; ++v) {
            int best = 0;
            float bp = out.probs[v];
            for (int c = 1; c < 4; ++c) {
                const float p = out.probs[std::size_t(c) * V + v];
                if (p > bp) {
                    bp = p;
                    best = c;
                }
            }
            lab[v] = std::uint8_t(best);
        }
        out.labels = LabelMap(std::move(lab));
        return out;
    }
};

// Class-weighted voxel cross-entropy (background down-weighted).
template <class T>
nn::Var<T> voxel_cross_entropy(const nn::Var<T>& probs, const Tensor<std::uint8_t>& labels,
                               std::array<double, 4> class_weights = {0.2, 1, 1, 1}) {
    const auto& ps = probs->value.shape();
    BRASYN_CHECK(ps.size() == 5 && ps[1] == 4, "voxel_ce: probs must be [N,4,D,H,W]");
    const std::size_t N = ps[0];
    const std::size_t V = labels.size() / N;

    nn::Var<T> total;
    double weight_mass = 0;
    for (int c = 0; c < 4; ++c) {
        Tensor<T> mask(Shape{N, 1, ps[2], ps[3], ps[4]});
        std::size_t count = 0;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) {
                mask[i] = T(1);
                ++count;
            }
        if (count == 0) continue;
        weight_mass += class_weights[std::size_t(c)] * double(count);
        auto pc = nn::select_channel(probs, std::size_t(c));
        auto logp = ad::log(ad::add_scalar(pc, T(1e-7)));
        auto s = ad::sum_all(ad::mul(logp, ad::constant(std::move(mask))));
        auto term = ad::scale(s, T(-class_weights[std::size_t(c)]));
        total = total ? ad::add(total, term) : term;
    }
    BRASYN_CHECK(weight_mass > 0, "voxel_ce: no labelled voxels");
    return ad::scale(total, T(1.0 / weight_mass));
}

struct ProxyTrainLog {
    std::vector<double> epoch_loss;
    double heldout_soft_dice = 0;
};


// Per-study soft Dice of the (eval-mode) segmenter against the ground-truth
// labels, averaged over WT/TC/ET. Channels must be z-normalized.
template <class T>
double proxy_soft_dice(const ProxySegmenter<T>& seg,
                       const std::map<Modality, Tensor<float>>& channels,
                       const LabelMap& labels) {
    auto res = seg.segment(channels);
    const std::size_t V = labels.data.size();
    auto regions = compose_regions(labels);
    double total = 0;
    int r = 0;
    for (Region reg : kRegions) {
        double inter = 0, psum = 0, gsum = 0;
        for (std::size_t v = 0; v < V; ++v) {
            double p = 0;
            if (reg == Region::WT)
                p = res.probs[V + v] + res.probs[2 * V + v] + res.probs[3 * V + v];
            else if (reg == Region::TC)
                p = res.probs[V + v] + res.probs[3 * V + v];
            else
                p = res.probs[3 * V + v];
            const double g = regions[reg][v];
            inter += p * g;
            psum += p;
            gsum += g;
        }
        total += (2 * inter + 1.0) / (psum + gsum + 1.0);
        ++r;
    }
    return total / 3.0;
}

// Train on labelled studies (z-normalized in place here), freeze, return.
template <class T>
ProxySegmenter<T> train_proxy(const std::vector<const MultiModalStudy*>& train_set,
                              const std::vector<const MultiModalStudy*>& heldout,
                              ProxyConfig cfg, std::size_t epochs,
                              std::size_t steps_per_epoch, std::size_t batch,
                              std::size_t patch, std::uint64_t rng_seed,
                              ProxyTrainLog* log = nullptr) {
    BRASYN_CHECK(!train_set.empty(), "train_proxy: empty training set");
    for (const auto* s : train_set)
        BRASYN_CHECK(s->labels.has_value(), "train_proxy: study ", s->case_id,
                     " has no labels");

    // z-normalized channel cache
    struct Prepared {
        std::map<Modality, Volume> vols;
        const MultiModalStudy* study;
    };
    auto prepare = [](const MultiModalStudy& s) {
        Prepared p;
        p.study = &s;
        for (Modality m : kModalities) p.vols.emplace(m, znorm_nonzero(s.at(m)));
        return p;
    };
    std::vector<Prepared> prep;
    for (const auto* s : train_set) prep.push_back(prepare(*s));

    ProxySegmenter<T> seg(cfg, rng_seed);
    nn::Adam<T> opt(seg.params.trainable(), T(1e-3));
    Rng rng(rng_seed + 0x5e9);

    const std::size_t V = patch * patch * patch;
    if (log) log->epoch_loss.clear();
    for (std::size_t ep = 0; ep < epochs; ++ep) {
        double ep_loss = 0;
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            Tensor<T> input(Shape{batch, 4, patch, patch, patch});
            Tensor<std::uint8_t> labels(Shape{batch, patch, patch, patch});
            for (std::size_t b = 0; b < batch; ++b) {
                const auto& pr = prep[std::size_t(rng.uniform_int(0, std::int64_t(prep.size()) - 1))];
                const Shape dims = pr.study->shape();
                auto origin = brasyn::detail::biased_crop_origin(
                    dims, patch, pr.study->labels->data, rng, 0.7);
                for (Modality m : kModalities) {
                    auto cube = brasyn::detail::crop_cube(pr.vols.at(m).data, origin, patch);
                    T* dst = input.data() + (b * 4 + std::size_t(m)) * V;
                    for (std::size_t i = 0; i < V; ++i) dst[i] = T(cube[i]);
                }
                auto lab = brasyn::detail::crop_cube(pr.study->labels->data, origin, patch);
                std::copy(lab.data(), lab.data() + V, labels.data() + b * V);
            }
            opt.zero_grad();
            auto probs = nn::softmax_channels(seg.logits(ad::constant(std::move(input))));
            auto loss = ad::add(voxel_cross_entropy(probs, labels),
                                nn::soft_dice_region_loss<T>(probs, labels));
            ad::backward(loss);
            opt.step();
            ep_loss += double(loss->value[0]);
        }
        if (log) log->epoch_loss.push_back(ep_loss / double(steps_per_epoch));
    }

    seg.freeze();
    if (log && !heldout.empty()) {
        double dice = 0;
        for (const auto* s : heldout) {
            auto p = prepare(*s);
            std::map<Modality, Tensor<float>> channels;
            for (Modality m : kModalities) channels.emplace(m, p.vols.at(m).data);
            dice += proxy_soft_dice(seg, channels, *s->labels);
        }
        log->heldout_soft_dice = dice / double(heldout.size());
    }
    return seg;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

template <class T>
void save_proxy(const std::filesystem::path& path, const ProxySegmenter<T>& seg) {
    ckpt::Archive a;
    a.meta["kind"] = "proxy_segmenter";
    a.meta["frozen"] = seg.frozen;
    a.meta["config"]["width"] = seg.cfg.width;
    a.meta["config"]["depth"] = seg.cfg.depth;
    ckpt::put_params(a, seg.params);
    a.save(path);
}

template <class T>
ProxySegmenter<T> load_proxy(const std::filesystem::path& path) {
    auto a = ckpt::Archive::load(path);
    BRASYN_CHECK(a.meta.at("kind") == "proxy_segmenter", "not a proxy checkpoint");
    ProxyConfig cfg;
    cfg.width = a.meta.at("config").at("width").get<std::size_t>();
    cfg.depth = a.meta.at("config").at("depth").get<std::size_t>();
    ProxySegmenter<T> seg(cfg, 0);
    ckpt::get_params(a, seg.params);
    if (a.meta.at("frozen").get<bool>()) seg.freeze();
    return seg;
}

} // namespace brasyn
