#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <vector>

#include "checkpoint.hpp"
#include "intensity.hpp"
#include "losses.hpp"
#include "optim.hpp"
#include "volume.hpp"

namespace brasyn {

// ---------------------------------------------------------------------------
// Stage 1: conditional 2D slice synthesis. Per-modality encoders feed a
// channel-attention fusion into a common latent space; the modality infuser
// (residual blocks modulated by the joint modality+intensity condition)
// maps it to the target latent space; a transposed-conv decoder emits the
// slice. A least-squares discriminator with a 4-way modality head supplies
// the adversarial and classification terms.
// ---------------------------------------------------------------------------

struct Stage1Config {
    std::size_t base_channels = 32;   // first encoder stage runs at base/2
    std::size_t latent_channels = 64;
    std::size_t infuser_blocks = 4;
    std::size_t embedding_width = 64;
    std::size_t sin_width = 64;
    std::size_t slice_h = 64, slice_w = 64;
    std::size_t disc_channels = 32;
    bool intensity_encoding = true;

    void validate() const {
        BRASYN_CHECK(base_channels >= 2 && latent_channels >= 1 && infuser_blocks >= 1 &&
                         embedding_width >= 1 && sin_width >= 2,
                     "stage1 config: all sizes must be positive");
        BRASYN_CHECK(slice_h % 4 == 0 && slice_w % 4 == 0,
                     "stage1 config: slice size must be divisible by 2^2 downsamplings");
    }
};

struct Stage1LossWeights {
    // alpha..eta for rec, sim, cyc, adv, cls, ssim, ssim_tumor
    double alpha = 10, beta = 1, gamma = 1, delta = 0.25, epsilon = 0.25, zeta = 5,
           eta = 5;

    std::array<double, 7> vec() const {
        return {alpha, beta, gamma, delta, epsilon, zeta, eta};
    }
    void validate() const {
        for (double v : vec()) BRASYN_CHECK(v >= 0, "loss weights must be non-negative");
    }
};

struct Stage1LossBreakdown {
    double rec = 0, sim = 0, cyc = 0, adv = 0, cls = 0, ssim = 0, ssim_tumor = 0;
    double total = 0;

    std::array<double, 7> vec() const {
        return {rec, sim, cyc, adv, cls, ssim, ssim_tumor};
    }
};

// total = sum_i weight_i * term_i (the linearity the tests pin down)
inline double combine_loss_value(const Stage1LossWeights& w,
                                 const std::array<double, 7>& terms) {
    const auto wv = w.vec();
    double total = 0;
    for (int i = 0; i < 7; ++i) total += wv[std::size_t(i)] * terms[std::size_t(i)];
    return total;
}

template <class T>
struct Stage1LossTerms {
    nn::Var<T> rec, sim, cyc, adv, cls, ssim, ssim_tumor;

    std::array<nn::Var<T>, 7> vec() const {
        return {rec, sim, cyc, adv, cls, ssim, ssim_tumor};
    }
};

template <class T>
nn::Var<T> generator_loss(const Stage1LossWeights& w, const Stage1LossTerms<T>& terms,
                          Stage1LossBreakdown* breakdown = nullptr) {
    w.validate();
    const auto wv = w.vec();
    const auto tv = terms.vec();
    nn::Var<T> total;
    for (int i = 0; i < 7; ++i) {
        BRASYN_CHECK(tv[std::size_t(i)] != nullptr, "generator_loss: missing term ", i);
        auto weighted = ad::scale(tv[std::size_t(i)], T(wv[std::size_t(i)]));
        total = total ? ad::add(total, weighted) : weighted;
    }
    if (breakdown) {
        breakdown->rec = double(terms.rec->value[0]);
        breakdown->sim = double(terms.sim->value[0]);
        breakdown->cyc = double(terms.cyc->value[0]);
        breakdown->adv = double(terms.adv->value[0]);
        breakdown->cls = double(terms.cls->value[0]);
        breakdown->ssim = double(terms.ssim->value[0]);
        breakdown->ssim_tumor = double(terms.ssim_tumor->value[0]);
        breakdown->total = double(total->value[0]);
    }
    return total;
}

template <class T>
struct Stage1Model {
    Stage1Config cfg;
    nn::ParamStore<T> gen_params, disc_params;
    ConditionEncoder<T> cond;

    // per-modality encoders
    std::array<nn::Conv2dLayer<T>, 4> enc0, enc1, enc2;
    // channel-attention fusion (per-modality bounded logits over channels)
    std::array<nn::LinearLayer<T>, 4> att_a, att_b;
    struct InfuserBlock {
        nn::Conv2dLayer<T> conv1, conv2;
        nn::LinearLayer<T> to_gamma, to_beta;
    };
    std::vector<InfuserBlock> infuser;
    nn::ConvT2dLayer<T> dec0, dec1;
    nn::Conv2dLayer<T> dec2;
    // discriminator
    nn::Conv2dLayer<T> d0, d1, d2, d_rf;
    nn::LinearLayer<T> d_cls;

    explicit Stage1Model(Stage1Config cfg_, std::uint64_t seed) : cfg(cfg_) {
        cfg.validate();
        Rng rng(seed);
        const std::size_t B = cfg.base_channels, L = cfg.latent_channels;
        cond = ConditionEncoder<T>(gen_params, "cond", cfg.sin_width,
                                   cfg.embedding_width, rng);
        for (Modality m : kModalities) {
            const auto i = std::size_t(m);
            const std::string p = std::string("enc.") + modality_name(m);
            enc0[i] = nn::Conv2dLayer<T>(gen_params, p + ".c0", 1, B / 2, 3, 1, 1, rng);
            enc1[i] = nn::Conv2dLayer<T>(gen_params, p + ".c1", B / 2, B, 3, 2, 1, rng);
            enc2[i] = nn::Conv2dLayer<T>(gen_params, p + ".c2", B, L, 3, 2, 1, rng);
            att_a[i] = nn::LinearLayer<T>(gen_params, p + ".att_a", L, std::max<std::size_t>(L / 2, 1), rng);
            att_b[i] = nn::LinearLayer<T>(gen_params, p + ".att_b", std::max<std::size_t>(L / 2, 1), L, rng);
        }
        for (std::size_t k = 0; k < cfg.infuser_blocks; ++k) {
            const std::string p = "infuser.b" + std::to_string(k);
            InfuserBlock blk;
            blk.conv1 = nn::Conv2dLayer<T>(gen_params, p + ".conv1", L, L, 3, 1, 1, rng);
            blk.conv2 = nn::Conv2dLayer<T>(gen_params, p + ".conv2", L, L, 3, 1, 1, rng);
            blk.to_gamma = nn::LinearLayer<T>(gen_params, p + ".gamma", cfg.embedding_width, L, rng);
            blk.to_beta = nn::LinearLayer<T>(gen_params, p + ".beta", cfg.embedding_width, L, rng);
            // identity modulation at start: gamma = 1 + f(c), f initialised to 0
            blk.to_gamma.w->value.fill(T(0));
            blk.to_beta.w->value.fill(T(0));
            infuser.push_back(std::move(blk));
        }
        dec0 = nn::ConvT2dLayer<T>(gen_params, "dec.t0", L, B, 4, 2, 1, rng);
        dec1 = nn::ConvT2dLayer<T>(gen_params, "dec.t1", B, B / 2, 4, 2, 1, rng);
        dec2 = nn::Conv2dLayer<T>(gen_params, "dec.out", B / 2, 1, 3, 1, 1, rng);

        const std::size_t DB = cfg.disc_channels;
        d0 = nn::Conv2dLayer<T>(disc_params, "disc.c0", 1, DB, 4, 2, 1, rng);
        d1 = nn::Conv2dLayer<T>(disc_params, "disc.c1", DB, 2 * DB, 4, 2, 1, rng);
        d2 = nn::Conv2dLayer<T>(disc_params, "disc.c2", 2 * DB, 4 * DB, 4, 2, 1, rng);
        d_rf = nn::Conv2dLayer<T>(disc_params, "disc.rf", 4 * DB, 1, 3, 1, 1, rng);
        d_cls = nn::LinearLayer<T>(disc_params, "disc.cls", 4 * DB, 4, rng);
    }

    nn::Var<T> encode_modality(const nn::Var<T>& x, Modality m) const {
        const auto i = std::size_t(m);
        auto h = nn::leaky_relu(enc0[i](x));
        h = nn::leaky_relu(enc1[i](h));
        return nn::leaky_relu(enc2[i](h));
    }

    // Channel-attention-weighted sum over the available modalities; the
    // softmax runs over whichever modalities are present, renormalizing
    // automatically when some are missing. Iteration order is fixed.
    nn::Var<T> encode_fused(const std::map<Modality, nn::Var<T>>& slices) const {
        BRASYN_CHECK(!slices.empty(), "encode_fused: empty available set");
        std::vector<nn::Var<T>> feats, logits;
        for (Modality m : kModalities) {
            auto it = slices.find(m);
            if (it == slices.end()) continue;
            auto f = encode_modality(it->second, m);
            auto pooled = nn::global_avg_pool(f); // [N, L]
            const auto i = std::size_t(m);
            auto a = ad::tanh(att_b[i](nn::relu(att_a[i](pooled)))); // bounded logits
            feats.push_back(f);
            logits.push_back(a);
        }
        // per-channel softmax over present modalities
        std::vector<nn::Var<T>> exps;
        nn::Var<T> denom;
        for (auto& l : logits) {
            auto e = ad::exp(l);
            exps.push_back(e);
            denom = denom ? ad::add(denom, e) : e;
        }
        nn::Var<T> fused;
        Tensor<T> zero_beta(logits.front()->value.shape());
        auto zb = ad::constant(std::move(zero_beta));
        for (std::size_t k = 0; k < feats.size(); ++k) {
            auto w = ad::div(exps[k], denom); // [N, L]
            auto scaled = nn::film(feats[k], w, zb);
            fused = fused ? ad::add(fused, scaled) : scaled;
        }
        return fused;
    }

    nn::Var<T> infuse(const nn::Var<T>& h0, const nn::Var<T>& emb) const {
        auto h = h0;
        for (const auto& blk : infuser) {
            auto gamma = ad::add_scalar(blk.to_gamma(emb), T(1));
            auto beta = blk.to_beta(emb);
            auto t = blk.conv1(h);
            t = nn::film(t, gamma, beta);
            t = nn::leaky_relu(t);
            t = blk.conv2(t);
            h = ad::add(h, t);
        }
        return h;
    }

    nn::Var<T> decode(const nn::Var<T>& h) const {
        auto d = nn::leaky_relu(dec0(h));
        d = nn::leaky_relu(dec1(d));
        return ad::tanh(dec2(d));
    }

    struct GenOut {
        nn::Var<T> synth;          // [N,1,H,W] in (-1,1)
        nn::Var<T> fused_common;   // common-space feature of the available set
    };

    GenOut generate(const std::map<Modality, nn::Var<T>>& available,
                    const std::vector<ConditionInput>& conds) const {
        auto fused = encode_fused(available);
        auto emb = cond.encode_batch(conds, cfg.intensity_encoding);
        auto target_latent = infuse(fused, emb);
        return GenOut{decode(target_latent), fused};
    }

    struct DiscOut {
        nn::Var<T> rf;  // [N,1,h,w] least-squares real/fake map
        nn::Var<T> cls; // [N,4] modality logits
    };

    DiscOut discriminate(const nn::Var<T>& slice) const {
        auto h = nn::leaky_relu(d0(slice));
        h = nn::leaky_relu(d1(h));
        h = nn::leaky_relu(d2(h));
        return DiscOut{d_rf(h), d_cls(nn::global_avg_pool(h))};
    }
};

// ---------------------------------------------------------------------------
// The spec-level slice op: eval-mode synthesis of one missing-modality slice.
// ---------------------------------------------------------------------------

template <class T>
Tensor<float> synthesize_slice(const Stage1Model<T>& model,
                               const std::map<Modality, Tensor<float>>& available,
                               Modality target, double intensity) {
    BRASYN_CHECK(!available.count(target),
                 "synthesize_slice: target modality present in inputs");
    BRASYN_CHECK(available.size() >= 1 && available.size() <= 3,
                 "synthesize_slice: need 1-3 available modalities");
    const Shape* ref = nullptr;
    for (const auto& [m, s] : available) {
        BRASYN_CHECK(s.ndim() == 2, "synthesize_slice: slices must be 2-d");
        if (!ref) ref = &s.shape();
        BRASYN_CHECK(s.shape() == *ref, "synthesize_slice: slice shape mismatch");
    }
    const std::size_t H = (*ref)[0], W = (*ref)[1];
    BRASYN_CHECK(H % 4 == 0 && W % 4 == 0,
                 "synthesize_slice: slice dims must be divisible by 4");

    ad::NoGradGuard off;
    std::map<Modality, nn::Var<T>> vars;
    for (const auto& [m, s] : available) {
        Tensor<T> t(Shape{1, 1, H, W});
        for (std::size_t i = 0; i < s.size(); ++i) t[i] = T(s[i]);
        vars.emplace(m, ad::constant(std::move(t)));
    }
    auto out = model.generate(vars, {{target, intensity}});
    Tensor<float> slice(Shape{H, W});
    for (std::size_t i = 0; i < slice.size(); ++i)
        slice[i] = float(out.synth->value[i]);
    return slice;
}

// ---------------------------------------------------------------------------
// Training dataset: aligned slice tuples after the brain-pixel filter, on the
// stage-1 [-1,1] scale, with WT tumor masks and per-volume medians for the
// ground-truth intensity condition.
// ---------------------------------------------------------------------------

struct SliceRecord {
    std::string case_id;
    std::size_t slice_index = 0;
    std::map<Modality, Tensor<float>> slices; // [-1,1]
    Tensor<std::uint8_t> tumor_mask;          // WT on this slice
    std::map<Modality, double> volume_median; // per-case, per-modality
};

inline std::vector<SliceRecord> build_slice_dataset(
    const std::vector<const MultiModalStudy*>& studies, std::size_t min_brain_pixels) {
    std::vector<SliceRecord> out;
    for (const auto* study : studies) {
        MultiModalStudy rescaled;
        rescaled.case_id = study->case_id;
        rescaled.labels = study->labels;
        std::map<Modality, double> medians;
        for (Modality m : kModalities) {
            Volume r = linear_rescale(study->at(m), -1.0f, 1.0f);
            medians[m] = median_brain_intensity(r);
            rescaled.volumes.emplace(m, std::move(r));
        }
        for (auto& tup : extract_axial_slices(rescaled, min_brain_pixels)) {
            SliceRecord rec;
            rec.case_id = study->case_id;
            rec.slice_index = tup.index;
            for (Modality m : kModalities)
                rec.slices.emplace(m, std::move(tup.slices.at(m).data));
            const Shape hw = rec.slices.at(Modality::T1).shape();
            rec.tumor_mask = Tensor<std::uint8_t>(hw);
            if (tup.label)
                for (std::size_t i = 0; i < rec.tumor_mask.size(); ++i)
                    rec.tumor_mask[i] = (*tup.label)[i] >= 1;
            rec.volume_median = medians;
            out.push_back(std::move(rec));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trainer (least-squares GAN, modality classification on the discriminator)
// ---------------------------------------------------------------------------

struct Stage1TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch = 8;
    std::size_t steps_per_epoch = 0; // 0: one pass over the dataset
    double lr = 2e-4;
    std::uint64_t seed = 0;
    std::filesystem::path checkpoint_dir; // empty: no checkpoints
};

struct Stage1StepLog {
    std::size_t epoch = 0, step = 0;
    double d_loss = 0;
    Stage1LossBreakdown g;
};

struct Stage1TrainResult {
    std::vector<Stage1StepLog> curve;
    double first_step_total = 0;
    std::size_t checkpoints_written = 0;
};

template <class T>
void save_stage1(const std::filesystem::path& path, const Stage1Model<T>& model,
                 std::size_t epoch = 0, const std::string& rng_state = "0") {
    ckpt::Archive a;
    a.meta["kind"] = "stage1";
    a.meta["epoch"] = epoch;
    a.meta["rng_state"] = rng_state;
    auto& c = a.meta["config"];
    c["base_channels"] = model.cfg.base_channels;
    c["latent_channels"] = model.cfg.latent_channels;
    c["infuser_blocks"] = model.cfg.infuser_blocks;
    c["embedding_width"] = model.cfg.embedding_width;
    c["sin_width"] = model.cfg.sin_width;
    c["slice_h"] = model.cfg.slice_h;
    c["slice_w"] = model.cfg.slice_w;
    c["disc_channels"] = model.cfg.disc_channels;
    c["intensity_encoding"] = model.cfg.intensity_encoding;
    ckpt::put_params(a, model.gen_params, "gen/");
    ckpt::put_params(a, model.disc_params, "disc/");
    a.save(path);
}

template <class T>
Stage1Model<T> load_stage1(const std::filesystem::path& path) {
    auto a = ckpt::Archive::load(path);
    BRASYN_CHECK(a.meta.at("kind") == "stage1", "not a stage1 checkpoint");
    const auto& c = a.meta.at("config");
    Stage1Config cfg;
    cfg.base_channels = c.at("base_channels").get<std::size_t>();
    cfg.latent_channels = c.at("latent_channels").get<std::size_t>();
    cfg.infuser_blocks = c.at("infuser_blocks").get<std::size_t>();
    cfg.embedding_width = c.at("embedding_width").get<std::size_t>();
    cfg.sin_width = c.at("sin_width").get<std::size_t>();
    cfg.slice_h = c.at("slice_h").get<std::size_t>();
    cfg.slice_w = c.at("slice_w").get<std::size_t>();
    cfg.disc_channels = c.at("disc_channels").get<std::size_t>();
    cfg.intensity_encoding = c.at("intensity_encoding").get<bool>();
    Stage1Model<T> model(cfg, 0);
    ckpt::get_params(a, model.gen_params, "gen/");
    ckpt::get_params(a, model.disc_params, "disc/");
    return model;
}

template <class T>
Stage1TrainResult train_stage1(Stage1Model<T>& model,
                               const std::vector<SliceRecord>& dataset,
                               const Stage1LossWeights& weights,
                               const Stage1TrainConfig& tc) {
    BRASYN_CHECK(!dataset.empty(), "train_stage1: empty dataset");
    weights.validate();
    const std::size_t H = dataset.front().slices.at(Modality::T1).dim(0);
    const std::size_t W = dataset.front().slices.at(Modality::T1).dim(1);

    nn::Adam<T> opt_g(model.gen_params.trainable(), T(tc.lr), T(0.5), T(0.999));
    nn::Adam<T> opt_d(model.disc_params.trainable(), T(tc.lr), T(0.5), T(0.999));
    Rng rng(tc.seed ^ 0xb1a5e5);

    const std::size_t steps =
        tc.steps_per_epoch ? tc.steps_per_epoch
                           : std::max<std::size_t>(1, dataset.size() / tc.batch);

    Stage1TrainResult result;
    for (std::size_t ep = 0; ep < tc.epochs; ++ep) {
        for (std::size_t step = 0; step < steps; ++step) {
            // ---- assemble batch ----
            // one target modality per step, masked from the inputs; the
            // cycle term re-synthesizes one randomly chosen input modality
            const Modality step_target = kModalities[std::size_t(rng.uniform_int(0, 3))];
            Modality cyc_source = step_target;
            while (cyc_source == step_target)
                cyc_source = kModalities[std::size_t(rng.uniform_int(0, 3))];

            struct Sample {
                const SliceRecord* rec;
            };
            std::vector<Sample> batch;
            for (std::size_t b = 0; b < tc.batch; ++b)
                batch.push_back({&dataset[std::size_t(
                    rng.uniform_int(0, std::int64_t(dataset.size()) - 1))]});

            auto batch_slices = [&](auto pick) {
                // pick(sample) -> const Tensor<float>& (H x W)
                Tensor<T> t(Shape{tc.batch, 1, H, W});
                for (std::size_t b = 0; b < tc.batch; ++b) {
                    const Tensor<float>& s = pick(batch[b]);
                    for (std::size_t i = 0; i < H * W; ++i)
                        t[b * H * W + i] = T(s[i]);
                }
                return ad::constant(std::move(t));
            };

            std::map<Modality, nn::Var<T>> available;
            for (Modality m : kModalities) {
                if (m == step_target) continue;
                available.emplace(m, batch_slices([m](const Sample& s) -> const Tensor<float>& {
                                      return s.rec->slices.at(m);
                                  }));
            }
            auto real_target = batch_slices([step_target](const Sample& s) -> const Tensor<float>& {
                return s.rec->slices.at(step_target);
            });

            std::vector<ConditionInput> conds;
            std::vector<int> target_ids;
            for (const auto& s : batch) {
                conds.push_back({step_target, s.rec->volume_median.at(step_target)});
                target_ids.push_back(int(step_target));
            }

            // ---- discriminator step ----
            Tensor<T> fake_detached;
            {
                ad::NoGradGuard off;
                fake_detached = model.generate(available, conds).synth->value;
            }
            opt_d.zero_grad();
            {
                auto d_real = model.discriminate(real_target);
                auto d_fake = model.discriminate(ad::constant(Tensor<T>(fake_detached)));
                auto loss_rf = ad::scale(
                    ad::add(ad::mean_all(ad::square(ad::add_scalar(d_real.rf, T(-1)))),
                            ad::mean_all(ad::square(d_fake.rf))),
                    T(0.5));
                auto loss_cls = nn::cross_entropy_logits(d_real.cls, target_ids);
                auto d_loss = ad::add(loss_rf, loss_cls);
                ad::backward(d_loss);
                opt_d.step();
                result.curve.push_back({ep, step, double(d_loss->value[0]), {}});
            }

            // ---- generator step ----
            opt_g.zero_grad();
            auto gen = model.generate(available, conds);

            Stage1LossTerms<T> terms;
            terms.rec = nn::l1_loss(gen.synth, real_target);

            {
                // teacher: common feature of the full set including the real
                // target; no gradient flows into the teacher pass
                std::map<Modality, nn::Var<T>> full;
                for (Modality m : kModalities) {
                    if (m == step_target)
                        full.emplace(m, ad::constant(Tensor<T>(real_target->value)));
                    else
                        full.emplace(m, available.at(m));
                }
                Tensor<T> teacher;
                {
                    ad::NoGradGuard off;
                    teacher = model.encode_fused(full)->value;
                }
                terms.sim = nn::cosine_dissimilarity(gen.fused_common,
                                                     ad::constant(std::move(teacher)));
            }

            {
                // cycle: re-synthesize one input modality from the fake slice
                const Modality src = cyc_source;
                std::map<Modality, nn::Var<T>> cyc_in;
                cyc_in.emplace(step_target, gen.synth);
                std::vector<ConditionInput> cyc_conds;
                for (const auto& s : batch)
                    cyc_conds.push_back({src, s.rec->volume_median.at(src)});
                auto re = model.generate(cyc_in, cyc_conds);
                auto real_src = batch_slices([src](const Sample& s) -> const Tensor<float>& {
                    return s.rec->slices.at(src);
                });
                terms.cyc = nn::l1_loss(re.synth, real_src);
            }

            {
                auto d_fake = model.discriminate(gen.synth);
                terms.adv = ad::mean_all(ad::square(ad::add_scalar(d_fake.rf, T(-1))));
                terms.cls = nn::cross_entropy_logits(d_fake.cls, target_ids);
            }

            terms.ssim = nn::ssim_loss(gen.synth, real_target, 7, 2.0);
            {
                Tensor<T> mask(Shape{tc.batch, 1, H, W});
                for (std::size_t b = 0; b < tc.batch; ++b)
                    for (std::size_t i = 0; i < H * W; ++i)
                        mask[b * H * W + i] = T(batch[b].rec->tumor_mask[i]);
                terms.ssim_tumor =
                    nn::masked_ssim_loss(gen.synth, real_target, mask, 7, 2.0);
            }

            auto& log = result.curve.back();
            auto g_loss = generator_loss(weights, terms, &log.g);
            ad::backward(g_loss);
            opt_g.step();

            if (ep == 0 && step == 0) result.first_step_total = log.g.total;
        }
        if (!tc.checkpoint_dir.empty()) {
            save_stage1(tc.checkpoint_dir /
                            ("stage1_epoch_" + std::to_string(ep + 1) + ".ckpt"),
                        model, ep + 1, rng.state_str());
            ++result.checkpoints_written;
        }
    }
    return result;
}

inline void write_stage1_curve(const std::filesystem::path& path,
                               const std::vector<Stage1StepLog>& curve) {
    std::ofstream f(path);
    BRASYN_CHECK(f.good(), "curve: cannot open for write: ", path.string());
    f << "epoch,step,d_loss,g_total,rec,sim,cyc,adv,cls,ssim,ssim_tumor\n";
    for (const auto& s : curve) {
        f << s.epoch << ',' << s.step << ',' << format_fixed(s.d_loss) << ','
          << format_fixed(s.g.total) << ',' << format_fixed(s.g.rec) << ','
          << format_fixed(s.g.sim) << ',' << format_fixed(s.g.cyc) << ','
          << format_fixed(s.g.adv) << ',' << format_fixed(s.g.cls) << ','
          << format_fixed(s.g.ssim) << ',' << format_fixed(s.g.ssim_tumor) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Volume synthesis: one sampled intensity for the whole stack.
// ---------------------------------------------------------------------------

template <class T>
Volume synthesize_volume(const Stage1Model<T>& model, const MultiModalStudy& study,
                         Modality target, const IntensityPrior* prior,
                         SamplingStrategy strategy, std::uint64_t rng_seed) {
    study.validate();
    std::vector<Modality> available;
    for (Modality m : kModalities)
        if (m != target && study.has(m)) available.push_back(m);
    BRASYN_CHECK(!available.empty(), "synthesize_volume: no available modalities");

    std::map<Modality, Volume> rescaled;
    for (Modality m : available)
        rescaled.emplace(m, linear_rescale(study.at(m), -1.0f, 1.0f));

    double intensity = 0;
    if (strategy == SamplingStrategy::GroundTruth) {
        BRASYN_CHECK(study.has(target),
                     "synthesize_volume: GroundTruth strategy needs the withheld target");
        intensity = median_brain_intensity(linear_rescale(study.at(target), -1.0f, 1.0f));
    } else {
        BRASYN_CHECK(prior != nullptr, "synthesize_volume: no prior for target ",
                     modality_name(target), " and strategy ", strategy_name(strategy));
        intensity = sample_target_intensity(*prior, strategy, std::nullopt, rng_seed);
    }

    const Shape dims = study.shape();
    const std::size_t D = dims[0], H = dims[1], W = dims[2];

    ad::NoGradGuard off;
    Tensor<float> out(dims);
    const std::size_t chunk = 8;
    for (std::size_t d0 = 0; d0 < D; d0 += chunk) {
        const std::size_t n = std::min(chunk, D - d0);
        std::map<Modality, nn::Var<T>> slices;
        for (Modality m : available) {
            Tensor<T> t(Shape{n, 1, H, W});
            const auto& vol = rescaled.at(m).data;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < H * W; ++i)
                    t[b * H * W + i] = T(vol[(d0 + b) * H * W + i]);
            slices.emplace(m, ad::constant(std::move(t)));
        }
        std::vector<ConditionInput> conds(n, ConditionInput{target, intensity});
        auto gen = model.generate(slices, conds);
        // store on a [0,1] scale, masked by the union of available brains so
        // background stays exactly zero
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < H * W; ++i) {
                bool brain = false;
                for (Modality m : available)
                    brain |= study.at(m).mask[(d0 + b) * H * W + i] != 0;
                const double v = (double(gen.synth->value[b * H * W + i]) + 1.0) / 2.0;
                out[(d0 + b) * H * W + i] = brain ? float(std::max(v, 1e-6)) : 0.0f;
            }
    }

    Volume result(std::move(out), target, study.volumes.begin()->second.spacing);
    result.meta["conditioned_intensity"] = intensity;
    result.meta["strategy"] = double(int(strategy));
    return result;
}

} // namespace brasyn
