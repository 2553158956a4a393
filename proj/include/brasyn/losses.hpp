#pragma once

#include "nn.hpp"
#include "volume.hpp"

namespace brasyn::nn {

// ---------------------------------------------------------------------------
// Differentiable losses shared by the stage-1 generator, the Refiner, and the
// proxy segmenter. The SSIM here runs on the autodiff tape (uniform window
// via local_mean); the metrics module keeps its own independent
// implementation for evaluation.
// ---------------------------------------------------------------------------

template <class T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
    return ad::mean_all(ad::abs(ad::sub(a, b)));
}

// Per-voxel SSIM map of [N,C,spatial...] pairs, uniform clipped window.
template <class T>
Var<T> ssim_map_ad(const Var<T>& a, const Var<T>& b, int window = 7, double L = 2.0) {
    BRASYN_CHECK(a->value.same_shape(b->value), "ssim_map_ad: shape mismatch");
    const T c1 = T((0.01 * L) * (0.01 * L));
    const T c2 = T((0.03 * L) * (0.03 * L));

    auto mu_a = local_mean(a, window);
    auto mu_b = local_mean(b, window);
    auto mu_aa = ad::mul(mu_a, mu_a);
    auto mu_bb = ad::mul(mu_b, mu_b);
    auto mu_ab = ad::mul(mu_a, mu_b);
    auto var_a = ad::sub(local_mean(ad::mul(a, a), window), mu_aa);
    auto var_b = ad::sub(local_mean(ad::mul(b, b), window), mu_bb);
    auto cov = ad::sub(local_mean(ad::mul(a, b), window), mu_ab);

    auto num = ad::mul(ad::add_scalar(ad::scale(mu_ab, T(2)), c1),
                       ad::add_scalar(ad::scale(cov, T(2)), c2));
    auto den = ad::mul(ad::add_scalar(ad::add(mu_aa, mu_bb), c1),
                       ad::add_scalar(ad::add(var_a, var_b), c2));
    return ad::div(num, den);
}

// 1 - mean SSIM.
template <class T>
Var<T> ssim_loss(const Var<T>& a, const Var<T>& b, int window = 7, double L = 2.0) {
    return ad::add_scalar(ad::neg(ad::mean_all(ssim_map_ad(a, b, window, L))), T(1));
}

// Mean over samples of (1 - masked mean of the SSIM map); samples with an
// empty mask contribute 0.
template <class T>
Var<T> masked_ssim_loss(const Var<T>& a, const Var<T>& b,
                        const Tensor<T>& mask /* same shape, {0,1} */,
                        int window = 7, double L = 2.0) {
    BRASYN_CHECK(a->value.same_shape(mask), "masked_ssim_loss: mask shape mismatch");
    const std::size_t N = a->value.dim(0);
    auto map = ssim_map_ad(a, b, window, L);
    auto masked = ad::mul(map, ad::constant(Tensor<T>(mask)));
    auto sums = sum_per_sample(masked); // [N]

    Tensor<T> counts(Shape{N});
    {
        const std::size_t V = mask.size() / N;
        for (std::size_t n = 0; n < N; ++n) {
            double c = 0;
            for (std::size_t v = 0; v < V; ++v) c += double(mask[n * V + v]);
            counts[n] = T(c);
        }
    }
    Tensor<T> safe_counts(Shape{N});
    Tensor<T> nonempty(Shape{N});
    for (std::size_t n = 0; n < N; ++n) {
        safe_counts[n] = counts[n] > T(0) ? counts[n] : T(1);
        nonempty[n] = counts[n] > T(0) ? T(1) : T(0);
    }
    auto means = ad::div(sums, ad::constant(std::move(safe_counts))); // [N]
    auto per_sample = ad::mul(ad::constant(std::move(nonempty)),
                              ad::add_scalar(ad::neg(means), T(1)));
    return ad::mean_all(per_sample);
}

// Mean over samples of (1 - cosine similarity) between flattened features.
template <class T>
Var<T> cosine_dissimilarity(const Var<T>& a, const Var<T>& b, T eps = T(1e-8)) {
    BRASYN_CHECK(a->value.same_shape(b->value), "cosine_dissimilarity: shape mismatch");
    auto dot = sum_per_sample(ad::mul(a, b));
    auto na = ad::sqrt(ad::add_scalar(sum_per_sample(ad::mul(a, a)), eps));
    auto nb = ad::sqrt(ad::add_scalar(sum_per_sample(ad::mul(b, b)), eps));
    auto cos = ad::div(dot, ad::mul(na, nb));
    return ad::mean_all(ad::add_scalar(ad::neg(cos), T(1)));
}

// ---------------------------------------------------------------------------
// Soft Dice over the nested tumor regions. probs: [N,4,D,H,W] class
// probabilities (background, necrotic, edema, enhancing); labels: [N,D,H,W].
// Region probabilities are sums of class probabilities (WT = 1+2+3,
// TC = 1+3, ET = 3); loss = 1 - mean soft Dice over samples and regions.
// ---------------------------------------------------------------------------

template <class T>
struct SoftDiceBreakdown {
    double wt = 0, tc = 0, et = 0; // per-region soft dice (not loss)
};

template <class T>
Var<T> soft_dice_region_loss(const Var<T>& probs, const Tensor<std::uint8_t>& labels,
                             T smooth = T(1), SoftDiceBreakdown<T>* breakdown = nullptr) {
    const auto& ps = probs->value.shape();
    BRASYN_CHECK(ps.size() == 5 && ps[1] == 4, "soft_dice: probs must be [N,4,D,H,W]");
    const std::size_t N = ps[0];
    BRASYN_CHECK(labels.size() * 4 == probs->value.size(), "soft_dice: label shape mismatch");

    auto p1 = select_channel(probs, 1);
    auto p2 = select_channel(probs, 2);
    auto p3 = select_channel(probs, 3);
    std::array<Var<T>, 3> region_prob{ad::add(ad::add(p1, p2), p3), // WT
                                      ad::add(p1, p3),              // TC
                                      p3};                          // ET

    const std::size_t V = labels.size() / N;
    Var<T> total;
    double dice_sum[3] = {0, 0, 0};
    for (int r = 0; r < 3; ++r) {
        Tensor<T> gt(Shape{N, 1, ps[2], ps[3], ps[4]});
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const std::uint8_t v = labels[i];
            bool in = false;
            if (r == 0) in = v >= 1;
            else if (r == 1) in = v == 1 || v == 3;
            else in = v == 3;
            gt[i] = in ? T(1) : T(0);
        }
        Tensor<T> gt_sums(Shape{N});
        for (std::size_t n = 0; n < N; ++n) {
            double s = 0;
            for (std::size_t v = 0; v < V; ++v) s += double(gt[n * V + v]);
            gt_sums[n] = T(s);
        }
        auto gtc = ad::constant(std::move(gt));
        auto inter = sum_per_sample(ad::mul(region_prob[r], gtc)); // [N]
        auto psum = sum_per_sample(region_prob[r]);
        auto num = ad::add_scalar(ad::scale(inter, T(2)), smooth);
        auto den = ad::add_scalar(ad::add(psum, ad::constant(std::move(gt_sums))), smooth);
        auto dice = ad::div(num, den);
        if (breakdown) {
            double m = 0;
            for (std::size_t n = 0; n < N; ++n) m += double(dice->value[n]);
            dice_sum[r] = m / double(N);
        }
        auto loss_r = ad::mean_all(ad::add_scalar(ad::neg(dice), T(1)));
        total = r == 0 ? loss_r : ad::add(total, loss_r);
    }
    if (breakdown) {
        breakdown->wt = dice_sum[0];
        breakdown->tc = dice_sum[1];
        breakdown->et = dice_sum[2];
    }
    return ad::scale(total, T(1) / T(3));
}

} // namespace brasyn::nn
