#pragma once

// Lossless stand-in for an image autoencoder: factor-2 space-to-depth.
// Channel layout of a latent: c_out = c_in * 4 + dy * 2 + dx.

#include <optional>

#include "duel/image.hpp"
#include "duel/tensor.hpp"

namespace duel {

inline constexpr int kLatentChannels = 12;

/// c x h x w latent of one frame.
using Latent = Tensor<float>;

/// F frames of latents stacked as [F,c,h,w] plus the diffusion index they sit at.
struct LatentClip {
    Tensor<float> frames;
    int timestep = 0;

    std::int64_t frame_count() const { return frames.rank() ? frames.dim(0) : 0; }
};

template <typename T>
Tensor<T> encode(const Tensor<T>& image) {
    require(image.rank() == 3 && image.dim(0) == 3, ErrorKind::shape,
            "encode expects 3xHxW, got " + shape_str(image.shape()));
    const std::int64_t h = image.dim(1), w = image.dim(2);
    require(h % 2 == 0 && w % 2 == 0, ErrorKind::shape,
            "encode needs even dimensions, got " + std::to_string(h) + "x" + std::to_string(w));
    const std::int64_t lh = h / 2, lw = w / 2;
    Tensor<T> out({12, lh, lw});
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                out.at(c * 4 + (y % 2) * 2 + (x % 2), y / 2, x / 2) = image.at(c, y, x);
    return out;
}

template <typename T>
Tensor<T> decode(const Tensor<T>& latent) {
    require(latent.rank() == 3 && latent.dim(0) == 12, ErrorKind::shape,
            "decode expects 12xhxw, got " + shape_str(latent.shape()));
    const std::int64_t lh = latent.dim(1), lw = latent.dim(2);
    Tensor<T> out({3, 2 * lh, 2 * lw});
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < 2 * lh; ++y)
            for (std::int64_t x = 0; x < 2 * lw; ++x)
                out.at(c, y, x) = latent.at(c * 4 + (y % 2) * 2 + (x % 2), y / 2, x / 2);
    return out;
}

/// Encodes each frame of a list into one [F,12,h,w] tensor.
inline Tensor<float> encode_frames(const std::vector<Image>& frames) {
    std::vector<Tensor<float>> parts;
    for (const auto& f : frames) {
        Tensor<float> z = encode(f);
        parts.push_back(std::move(z).reshaped({1, z.dim(0), z.dim(1), z.dim(2)}));
    }
    return concat0(parts);
}

inline std::vector<Image> decode_frames(const Tensor<float>& latents) {
    std::vector<Image> out;
    for (std::int64_t f = 0; f < latents.dim(0); ++f) {
        Tensor<float> z = latents.slice0(f, f + 1);
        out.push_back(decode(std::move(z).reshaped({latents.dim(1), latents.dim(2), latents.dim(3)})));
    }
    return out;
}

/// Background condition: a given image, or pure white when absent.
inline Latent background_latent(const std::optional<Image>& bg, int height, int width) {
    if (!bg) return encode(Image({3, height, width}, 1.0f));
    require(bg->rank() == 3 && bg->dim(1) == height && bg->dim(2) == width, ErrorKind::shape,
            "background is " + shape_str(bg->shape()) + ", expected 3x" + std::to_string(height) + "x" +
                std::to_string(width));
    return encode(*bg);
}

}  // namespace duel
