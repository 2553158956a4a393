#pragma once

#include <vector>

#include "nn.hpp"

namespace brasyn::nn {

// Simple 3D U-Net with a constant channel width: stride-2 convolutions down,
// nearest-neighbour upsampling with skip concatenation up, resolution-
// preserving end to end. Used both as the Refiner's per-modality feature
// encoder and (with a 1x1 output head) as the proxy segmenter backbone.
template <class T>
struct UNet3d {
    std::size_t cin = 1, width = 16, depth = 2, cout = 16;
    Conv3dLayer<T> in_conv;
    std::vector<Conv3dLayer<T>> down_a, down_b; // stride-2 + refine per level
    std::vector<Conv3dLayer<T>> up_a, up_b;     // post-concat + refine per level
    Conv3dLayer<T> out_conv;                    // 1x1 head

    UNet3d() = default;
    UNet3d(ParamStore<T>& ps, const std::string& name, std::size_t cin_,
           std::size_t width_, std::size_t depth_, std::size_t cout_, Rng& rng)
        : cin(cin_), width(width_), depth(depth_), cout(cout_) {
        BRASYN_CHECK(depth >= 1, "unet3d: depth must be >= 1");
        in_conv = Conv3dLayer<T>(ps, name + ".in", cin, width, 3, 1, 1, rng);
        for (std::size_t l = 0; l < depth; ++l) {
            down_a.emplace_back(ps, name + ".down" + std::to_string(l) + "a", width,
                                width, 3, 2, 1, rng);
            down_b.emplace_back(ps, name + ".down" + std::to_string(l) + "b", width,
                                width, 3, 1, 1, rng);
        }
        for (std::size_t l = 0; l < depth; ++l) {
            up_a.emplace_back(ps, name + ".up" + std::to_string(l) + "a", 2 * width,
                              width, 3, 1, 1, rng);
            up_b.emplace_back(ps, name + ".up" + std::to_string(l) + "b", width,
                              width, 3, 1, 1, rng);
        }
        out_conv = Conv3dLayer<T>(ps, name + ".out", width, cout, 1, 1, 0, rng);
    }

    void check_dims(const Shape& s) const {
        const std::size_t div = std::size_t(1) << depth;
        for (std::size_t a = 2; a < s.size(); ++a)
            BRASYN_CHECK(s[a] % div == 0, "unet3d: spatial dim ", s[a],
                         " not divisible by 2^depth = ", div);
    }

    // x: [N, cin, D, H, W] -> [N, cout, D, H, W]
    Var<T> operator()(const Var<T>& x) const {
        check_dims(x->value.shape());
        std::vector<Var<T>> skips;
        auto h = leaky_relu(in_conv(x));
        for (std::size_t l = 0; l < depth; ++l) {
            skips.push_back(h);
            h = leaky_relu(down_a[l](h));
            h = leaky_relu(down_b[l](h));
        }
        for (std::size_t l = depth; l-- > 0;) {
            h = upsample_nearest(h, 2);
            h = concat_channels(h, skips[l]);
            h = leaky_relu(up_a[l](h));
            h = leaky_relu(up_b[l](h));
        }
        return out_conv(h);
    }
};

} // namespace brasyn::nn
