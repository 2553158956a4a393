#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <vector>

#include "checkpoint.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "optim.hpp"
#include "segproxy.hpp"
#include "unet3d.hpp"
#include "volume.hpp"

namespace brasyn {

// ---------------------------------------------------------------------------
// Stage 2: the Refiner. Modality-specific 3D U-Net encoders produce full-
// resolution feature fields; the synthesized stream is refined against each
// available modality in a fixed order through element-wise cross-attention
//   Attention = exp(-|Q - K|) (.) V,   F' = F + Attention,  F'' = F' + FF(F')
// with Q from the layer-normed synthesized stream and K,V from the layer-
// normed available stream via per-slot linear projections. A small conv
// decoder turns the refined features into a residual added onto the input;
// the final 1x1 conv starts at zero, so refinement starts from identity.
// ---------------------------------------------------------------------------

struct RefinerConfig {
    std::size_t channels = 64;
    std::size_t unet_depth = 3;
    std::size_t ff_expansion = 2;
    std::array<Modality, 4> modality_order{Modality::T1, Modality::T2, Modality::FLAIR,
                                           Modality::T1ce};
    std::size_t patch_size = 128;

    void validate() const {
        BRASYN_CHECK(channels >= 1 && unet_depth >= 1 && ff_expansion >= 1,
                     "refiner config: all sizes must be positive");
        std::array<bool, 4> seen{};
        for (Modality m : modality_order) seen[std::size_t(m)] = true;
        for (bool s : seen) BRASYN_CHECK(s, "refiner config: modality_order must be a permutation");
    }
};

template <class T>
struct FeatureField {
    nn::Var<T> data; // [N, C, D, H, W]
    Modality source = Modality::T1;
    bool synthesized = false;
};

// Eq. (3) core on raw tensors: exp(-|q-k|) (.) v. Exposed separately so the
// mechanics can be pinned down in isolation.
template <class T>
nn::Var<T> elementwise_attention_core(const nn::Var<T>& q, const nn::Var<T>& k,
                                      const nn::Var<T>& v) {
    return ad::mul(ad::exp(ad::neg(ad::abs(ad::sub(q, k)))), v);
}

struct RefineResult {
    Volume refined;
    double residual_l2 = 0; // ||refined - input||, from the decoded residual
};

template <class T>
struct Refiner {
    RefinerConfig cfg;
    nn::ParamStore<T> params;
    std::array<nn::UNet3d<T>, 4> enc;
    nn::LayerNormChannelsLayer<T> ln_q, ln_kv;
    nn::Conv3dLayer<T> proj_q;                     // shared across steps
    std::array<nn::Conv3dLayer<T>, 4> proj_k, proj_v; // one pair per source slot
    nn::Conv3dLayer<T> ff1, ff2;
    std::array<nn::Conv3dLayer<T>, 3> dec;
    nn::Conv3dLayer<T> dec_out; // 1x1, zero-initialized

    explicit Refiner(RefinerConfig cfg_, std::uint64_t seed) : cfg(cfg_) {
        cfg.validate();
        Rng rng(seed);
        const std::size_t C = cfg.channels;
        for (Modality m : kModalities) {
            const auto i = std::size_t(m);
            enc[i] = nn::UNet3d<T>(params, std::string("enc.") + modality_name(m), 1, C,
                                   cfg.unet_depth, C, rng);
        }
        ln_q = nn::LayerNormChannelsLayer<T>(params, "attn.ln_q", C);
        ln_kv = nn::LayerNormChannelsLayer<T>(params, "attn.ln_kv", C);
        proj_q = nn::Conv3dLayer<T>(params, "attn.q", C, C, 1, 1, 0, rng);
        for (Modality m : kModalities) {
            const auto i = std::size_t(m);
            proj_k[i] = nn::Conv3dLayer<T>(params, std::string("attn.k.") + modality_name(m),
                                           C, C, 1, 1, 0, rng);
            proj_v[i] = nn::Conv3dLayer<T>(params, std::string("attn.v.") + modality_name(m),
                                           C, C, 1, 1, 0, rng);
        }
        ff1 = nn::Conv3dLayer<T>(params, "attn.ff1", C, cfg.ff_expansion * C, 1, 1, 0, rng);
        ff2 = nn::Conv3dLayer<T>(params, "attn.ff2", cfg.ff_expansion * C, C, 1, 1, 0, rng);
        for (std::size_t i = 0; i < 3; ++i)
            dec[i] = nn::Conv3dLayer<T>(params, "dec.c" + std::to_string(i), C, C, 3, 1, 1, rng);
        dec_out = nn::Conv3dLayer<T>(params, "dec.out", C, 1, 1, 1, 0, rng);
        dec_out.w->value.fill(T(0)); // identity at initialization
        dec_out.b->value.fill(T(0));
    }

    // ---- encoders (Eqs. 1-2) ----

    nn::Var<T> encode_tensor(const nn::Var<T>& x, Modality m) const {
        const auto& s = x->value.shape();
        BRASYN_CHECK(s.size() == 5 && s[1] == 1, "encode: need [N,1,D,H,W] input");
        enc[std::size_t(m)].check_dims(s);
        return enc[std::size_t(m)](x);
    }

    FeatureField<T> encode(const Volume& patch, Modality m, bool synthesized) const {
        BRASYN_CHECK(patch.modality == m, "encode: ", modality_name(patch.modality),
                     " patch routed to the ", modality_name(m), " encoder");
        const Shape& s = patch.data.shape();
        Tensor<T> t(Shape{1, 1, s[0], s[1], s[2]});
        for (std::size_t i = 0; i < patch.data.size(); ++i) t[i] = T(patch.data[i]);
        FeatureField<T> f;
        f.data = encode_tensor(ad::constant(std::move(t)), m);
        f.source = m;
        f.synthesized = synthesized;
        return f;
    }

    // ---- element-wise cross-attention (Eqs. 3-5) ----

    nn::Var<T> attention_step(const nn::Var<T>& f_syn, const nn::Var<T>& f_avail,
                              Modality slot) const {
        BRASYN_CHECK(f_syn->value.same_shape(f_avail->value),
                     "attention: feature shape mismatch");
        auto q = proj_q(ln_q(f_syn));
        auto kv = ln_kv(f_avail);
        auto k = proj_k[std::size_t(slot)](kv);
        auto v = proj_v[std::size_t(slot)](kv);
        auto f1 = ad::add(f_syn, elementwise_attention_core(q, k, v)); // Eq. 4
        auto f2 = ad::add(f1, ff2(nn::leaky_relu(ff1(f1))));           // Eq. 5
        return f2;
    }

    FeatureField<T> elementwise_cross_attention(const FeatureField<T>& f_syn,
                                                const FeatureField<T>& f_avail) const {
        BRASYN_CHECK(f_syn.synthesized, "cross-attention: query stream must be the "
                                        "synthesized feature");
        FeatureField<T> out;
        out.data = attention_step(f_syn.data, f_avail.data, f_avail.source);
        out.source = f_syn.source;
        out.synthesized = true;
        return out;
    }

    // ---- full refinement on tape (training path) ----

    nn::Var<T> refine_var(const nn::Var<T>& syn, Modality target,
                          const std::map<Modality, nn::Var<T>>& available,
                          nn::Var<T>* residual_out = nullptr) const {
        BRASYN_CHECK(!available.count(target), "refine: target present in available set");
        BRASYN_CHECK(available.size() >= 1 && available.size() <= 3,
                     "refine: need 1-3 available modalities");
        auto f = encode_tensor(syn, target);
        // sequential fusion in the configured prefixed order, skipping the target
        for (Modality m : cfg.modality_order) {
            auto it = available.find(m);
            if (it == available.end()) continue;
            BRASYN_CHECK(it->second->value.same_shape(syn->value),
                         "refine: available patch shape mismatch on ", modality_name(m));
            auto fa = encode_tensor(it->second, m);
            f = attention_step(f, fa, m);
        }
        auto h = f;
        for (const auto& c : dec) h = nn::leaky_relu(c(h));
        auto residual = dec_out(h);
        if (residual_out) *residual_out = residual;
        return ad::add(syn, residual);
    }

    // ---- eval-mode refinement of a whole volume or patch ----

    RefineResult refine(const Volume& syn,
                        const std::map<Modality, const Volume*>& available) const {
        BRASYN_CHECK(!available.count(syn.modality),
                     "refine: synthesized modality present in available set");
        BRASYN_CHECK(!available.empty(), "refine: empty available set");
        const Shape& s = syn.data.shape();
        for (const auto& [m, v] : available)
            BRASYN_CHECK(v->data.shape() == s, "refine: shape mismatch on ",
                         modality_name(m));

        ad::NoGradGuard off;
        Tensor<T> t(Shape{1, 1, s[0], s[1], s[2]});
        for (std::size_t i = 0; i < syn.data.size(); ++i) t[i] = T(syn.data[i]);
        std::map<Modality, nn::Var<T>> vars;
        for (const auto& [m, v] : available) {
            Tensor<T> tv(Shape{1, 1, s[0], s[1], s[2]});
            for (std::size_t i = 0; i < v->data.size(); ++i) tv[i] = T(v->data[i]);
            vars.emplace(m, ad::constant(std::move(tv)));
        }
        nn::Var<T> residual;
        auto out = refine_var(ad::constant(std::move(t)), syn.modality, vars, &residual);

        RefineResult res;
        res.refined = syn; // copies spacing, modality, meta, mask
        double r2 = 0;
        for (std::size_t i = 0; i < syn.data.size(); ++i) {
            // residual confined to the brain so background stays exactly zero
            const double r = syn.mask[i] ? double(residual->value[i]) : 0.0;
            res.refined.data[i] = float(double(syn.data[i]) + r);
            r2 += r * r;
        }
        res.residual_l2 = std::sqrt(r2);
        return res;
    }
};

// ---------------------------------------------------------------------------
// Loss: L_total = l1 * (1 - SSIM) + l2 * soft-Dice through the frozen proxy
// segmenter (gradients reach `refined` through the segmenter, never its
// parameters).
// ---------------------------------------------------------------------------

struct RefinerLossBreakdown {
    double ssim_loss = 0, dice_loss = 0, total = 0;
    double dice_wt = 0, dice_tc = 0, dice_et = 0;
};

template <class T>
nn::Var<T> combine_refiner_loss(double lambda1, double lambda2, const nn::Var<T>& ssim_term,
                                const nn::Var<T>& dice_term,
                                RefinerLossBreakdown* bd = nullptr) {
    auto total = ad::add(ad::scale(ssim_term, T(lambda1)), ad::scale(dice_term, T(lambda2)));
    if (bd) {
        bd->ssim_loss = double(ssim_term->value[0]);
        bd->dice_loss = double(dice_term->value[0]);
        bd->total = double(total->value[0]);
    }
    return total;
}

template <class T>
nn::Var<T> refiner_loss(const nn::Var<T>& refined, const Tensor<T>& target,
                        const Tensor<std::uint8_t>& labels,
                        const std::map<Modality, Tensor<T>>& context, Modality target_m,
                        const ProxySegmenter<T>& segmenter, double lambda1,
                        double lambda2, RefinerLossBreakdown* bd = nullptr) {
    const auto& rs = refined->value.shape();
    BRASYN_CHECK(rs.size() == 5 && rs[1] == 1, "refiner_loss: refined must be [N,1,D,H,W]");
    BRASYN_CHECK(refined->value.same_shape(target), "refiner_loss: target shape mismatch");
    BRASYN_CHECK(labels.size() * 1 == rs[0] * rs[2] * rs[3] * rs[4],
                 "refiner_loss: missing or mis-shaped labels");
    BRASYN_CHECK(segmenter.frozen, "refiner_loss: segmenter must be frozen");

    // SSIM on the z-normalized scale; L is the target patch's dynamic range
    double L = double(target.max()) - double(target.min());
    if (L <= 0) L = 1.0;
    auto ssim_term = nn::ssim_loss(refined, ad::constant(Tensor<T>(target)), 7, L);

    // 4-channel segmenter input: refined replaces the missing modality
    nn::Var<T> seg_in;
    for (Modality m : kModalities) {
        nn::Var<T> chan;
        if (m == target_m) {
            chan = refined;
        } else {
            auto it = context.find(m);
            BRASYN_CHECK(it != context.end(), "refiner_loss: missing context channel ",
                         modality_name(m));
            BRASYN_CHECK(it->second.shape() == refined->value.shape(),
                         "refiner_loss: context shape mismatch");
            chan = ad::constant(Tensor<T>(it->second));
        }
        seg_in = seg_in ? nn::concat_channels(seg_in, chan) : chan;
    }
    auto probs = nn::softmax_channels(segmenter.logits(seg_in));
    nn::SoftDiceBreakdown<T> dice_bd;
    auto dice_term = nn::soft_dice_region_loss<T>(probs, labels, T(1), &dice_bd);

    auto total = combine_refiner_loss(lambda1, lambda2, ssim_term, dice_term, bd);
    if (bd) {
        bd->dice_wt = dice_bd.wt;
        bd->dice_tc = dice_bd.tc;
        bd->dice_et = dice_bd.et;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// One training case: real study (z-normalized), its designated-missing
// modality, and the stage-1 synthesized volume for it (z-normalized).
struct RefinerCase {
    std::string case_id;
    Modality target = Modality::T1;
    std::map<Modality, Volume> znormed; // all four real modalities
    Volume synth_znormed;               // stage-1 output for `target`
    const LabelMap* labels = nullptr;
};

struct RefinerTrainConfig {
    std::size_t epochs = 100;
    std::size_t batch = 4;
    std::size_t steps_per_epoch = 8;
    std::size_t patch = 32;
    double lr = 1e-3;
    double lambda1 = 1.0, lambda2 = 1.0;
    std::uint64_t seed = 0;
    std::filesystem::path checkpoint_dir;
};

struct RefinerStepLog {
    std::size_t epoch = 0, step = 0;
    RefinerLossBreakdown loss;
};

struct RefinerTrainResult {
    std::vector<RefinerStepLog> curve;
    std::vector<double> val_dice_per_epoch;
    double first_step_total = 0;
    std::size_t checkpoints_written = 0;
};

template <class T>
void save_refiner(const std::filesystem::path& path, const Refiner<T>& model,
                  std::size_t epoch = 0, const std::string& rng_state = "0") {
    ckpt::Archive a;
    a.meta["kind"] = "refiner";
    a.meta["epoch"] = epoch;
    a.meta["rng_state"] = rng_state;
    auto& c = a.meta["config"];
    c["channels"] = model.cfg.channels;
    c["unet_depth"] = model.cfg.unet_depth;
    c["ff_expansion"] = model.cfg.ff_expansion;
    c["patch_size"] = model.cfg.patch_size;
    auto order = nlohmann::json::array();
    for (Modality m : model.cfg.modality_order) order.push_back(modality_name(m));
    c["modality_order"] = order;
    ckpt::put_params(a, model.params);
    a.save(path);
}

template <class T>
Refiner<T> load_refiner(const std::filesystem::path& path) {
    auto a = ckpt::Archive::load(path);
    BRASYN_CHECK(a.meta.at("kind") == "refiner", "not a refiner checkpoint");
    const auto& c = a.meta.at("config");
    RefinerConfig cfg;
    cfg.channels = c.at("channels").get<std::size_t>();
    cfg.unet_depth = c.at("unet_depth").get<std::size_t>();
    cfg.ff_expansion = c.at("ff_expansion").get<std::size_t>();
    cfg.patch_size = c.at("patch_size").get<std::size_t>();
    const auto& order = c.at("modality_order");
    for (std::size_t i = 0; i < 4; ++i)
        cfg.modality_order[i] = parse_modality(order.at(i).get<std::string>());
    Refiner<T> model(cfg, 0);
    ckpt::get_params(a, model.params);
    return model;
}

template <class T>
RefinerTrainResult train_refiner(Refiner<T>& model, const ProxySegmenter<T>& segmenter,
                                 const std::vector<RefinerCase>& train_cases,
                                 const std::vector<RefinerCase>& val_cases,
                                 const RefinerTrainConfig& tc) {
    BRASYN_CHECK(!train_cases.empty(), "train_refiner: empty dataset");
    BRASYN_CHECK(segmenter.frozen, "train_refiner: segmenter must be frozen");
    for (const auto& c : train_cases)
        BRASYN_CHECK(c.labels != nullptr, "train_refiner: case ", c.case_id,
                     " lacks labels");

    nn::Adam<T> opt(model.params.trainable(), T(tc.lr));
    Rng rng(tc.seed ^ 0x3ef1);
    const std::size_t P = tc.patch;
    const std::size_t V = P * P * P;

    // distinct designated-missing modalities present in the dataset
    std::vector<Modality> targets_present;
    for (Modality m : kModalities)
        for (const auto& c : train_cases)
            if (c.target == m) {
                targets_present.push_back(m);
                break;
            }

    RefinerTrainResult result;
    for (std::size_t ep = 0; ep < tc.epochs; ++ep) {
        for (std::size_t step = 0; step < tc.steps_per_epoch; ++step) {
            Tensor<T> syn(Shape{tc.batch, 1, P, P, P});
            Tensor<T> target(Shape{tc.batch, 1, P, P, P});
            Tensor<std::uint8_t> labels(Shape{tc.batch, P, P, P});
            std::map<Modality, Tensor<T>> context;
            // one designated-missing modality per step; the batch shares it
            const Modality target_m = targets_present[std::size_t(
                rng.uniform_int(0, std::int64_t(targets_present.size()) - 1))];
            for (Modality m : kModalities)
                if (m != target_m)
                    context.emplace(m, Tensor<T>(Shape{tc.batch, 1, P, P, P}));

            std::vector<std::size_t> eligible;
            for (std::size_t i = 0; i < train_cases.size(); ++i)
                if (train_cases[i].target == target_m) eligible.push_back(i);

            for (std::size_t b = 0; b < tc.batch; ++b) {
                const auto& cse = train_cases[eligible[std::size_t(
                    rng.uniform_int(0, std::int64_t(eligible.size()) - 1))]];
                const Shape dims = cse.synth_znormed.data.shape();
                auto origin =
                    detail::biased_crop_origin(dims, P, cse.labels->data, rng, 0.75);

                auto put = [&](const Tensor<float>& vol, Tensor<T>& dst) {
                    auto cube = detail::crop_cube(vol, origin, P);
                    for (std::size_t i = 0; i < V; ++i) dst[b * V + i] = T(cube[i]);
                };
                put(cse.synth_znormed.data, syn);
                put(cse.znormed.at(target_m).data, target);
                for (Modality m : kModalities)
                    if (m != target_m) put(cse.znormed.at(m).data, context.at(m));
                auto lab = detail::crop_cube(cse.labels->data, origin, P);
                std::copy(lab.data(), lab.data() + V, labels.data() + b * V);
            }

            opt.zero_grad();
            std::map<Modality, nn::Var<T>> avail_vars;
            for (auto& [m, t] : context) avail_vars.emplace(m, ad::constant(Tensor<T>(t)));
            auto refined = model.refine_var(ad::constant(std::move(syn)), target_m,
                                            avail_vars);
            RefinerLossBreakdown bd;
            auto loss = refiner_loss(refined, target, labels, context, target_m,
                                     segmenter, tc.lambda1, tc.lambda2, &bd);
            ad::backward(loss);
            opt.step();
            result.curve.push_back({ep, step, bd});
            if (ep == 0 && step == 0) result.first_step_total = bd.total;
        }

        if (!val_cases.empty()) {
            // deterministic centre crops; hard Dice of the proxy on refined patches
            double dice_sum = 0;
            std::size_t n = 0;
            for (const auto& cse : val_cases) {
                const Shape dims = cse.synth_znormed.data.shape();
                std::array<std::size_t, 3> origin{(dims[0] - P) / 2, (dims[1] - P) / 2,
                                                  (dims[2] - P) / 2};
                std::map<Modality, const Volume*> avail;
                Volume syn_patch(detail::crop_cube(cse.synth_znormed.data, origin, P),
                                 cse.target);
                std::map<Modality, Volume> patches;
                for (Modality m : kModalities)
                    if (m != cse.target)
                        patches.emplace(m, Volume(detail::crop_cube(cse.znormed.at(m).data,
                                                                    origin, P),
                                                  m));
                for (auto& [m, v] : patches) avail.emplace(m, &v);
                auto res = model.refine(syn_patch, avail);
                std::map<Modality, Tensor<float>> channels;
                for (Modality m : kModalities)
                    channels.emplace(m, m == cse.target
                                            ? res.refined.data
                                            : patches.at(m).data);
                auto seg = segmenter.segment(channels);
                auto pred = compose_regions(seg.labels);
                auto gt = compose_regions(LabelMap(
                    detail::crop_cube(cse.labels->data, origin, P)));
                for (Region r : kRegions) dice_sum += metrics::dice(pred[r], gt[r]);
                n += 3;
            }
            result.val_dice_per_epoch.push_back(dice_sum / double(n));
        }

        if (!tc.checkpoint_dir.empty()) {
            save_refiner(tc.checkpoint_dir /
                             ("refiner_epoch_" + std::to_string(ep + 1) + ".ckpt"),
                         model, ep + 1, rng.state_str());
            ++result.checkpoints_written;
        }
    }
    return result;
}

inline void write_refiner_curve(const std::filesystem::path& path,
                                const std::vector<RefinerStepLog>& curve) {
    std::ofstream f(path);
    BRASYN_CHECK(f.good(), "curve: cannot open for write: ", path.string());
    f << "epoch,step,total,ssim_loss,dice_loss,dice_wt,dice_tc,dice_et\n";
    for (const auto& s : curve)
        f << s.epoch << ',' << s.step << ',' << format_fixed(s.loss.total) << ','
          << format_fixed(s.loss.ssim_loss) << ',' << format_fixed(s.loss.dice_loss)
          << ',' << format_fixed(s.loss.dice_wt) << ',' << format_fixed(s.loss.dice_tc)
          << ',' << format_fixed(s.loss.dice_et) << '\n';
}

} // namespace brasyn
