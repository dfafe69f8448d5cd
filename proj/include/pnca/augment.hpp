#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "pnca/image.hpp"
#include "pnca/rng.hpp"

namespace pnca {

enum class RotationMode { none, quarter, continuous };

RotationMode parse_rotation_mode(const std::string& name);

struct AugmentConfig {
    double pad_fraction = 0.125;
    int crop_size = 0;  // 0: no crop
    double jitter_threshold = 0.4;
    RotationMode rotation_mode = RotationMode::quarter;
    double flip_prob = 0.5;
    std::array<float, 3> channel_mean{0.0f, 0.0f, 0.0f};
    std::array<float, 3> channel_std{1.0f, 1.0f, 1.0f};
    int resize_target = 0;  // 0: no resize
};

/// Pads each side by floor(fraction * side) pixels, mirroring about the
/// border without repeating the edge pixel.
Image reflect_pad(const Image& img, double fraction);

/// Crops to size x size at a uniformly random valid position. The vertical
/// offset is drawn before the horizontal one.
Image random_crop(const Image& img, int size, Rng& rng);

Image center_crop(const Image& img, int size);

/// Bilinear resize to target x target, half-pixel-center convention.
Image resize_bilinear(const Image& img, int target);

/// Horizontal flip with probability flip_prob, then rotation per mode
/// (quarter: uniform multiple of 90 degrees; continuous: uniform angle in
/// [-180,180) with bilinear resampling, zero fill outside).
Image random_flip_rotate(const Image& img, Rng& rng, RotationMode mode,
                         double flip_prob = 0.5);

Image flip_horizontal(const Image& img);
Image rotate_quarter(const Image& img, int quarter_turns);
Image rotate_continuous(const Image& img, double degrees);

// Individual photometric ops; identity factors are exact identities.
Image apply_brightness(const Image& img, float factor);
Image apply_contrast(const Image& img, float factor);
Image apply_saturation(const Image& img, float factor);
Image apply_hue(const Image& img, float turns);

/// Brightness/contrast/saturation factors drawn from U[1-t, 1+t] and a hue
/// shift from U[-t, t] turns, applied in a random per-sample order, clamping
/// to [0,1] after each step.
Image color_jitter(const Image& img, double threshold, Rng& rng);

/// (img - mean) / std per channel; result is not clamped.
Image channel_normalize(const Image& img, const std::array<float, 3>& mean,
                        const std::array<float, 3>& std);

/// Training pipeline: resize -> reflect pad -> random crop -> flip/rotate ->
/// color jitter -> channel normalize. Draws only from `rng`; derive it with
/// Rng::for_stream(run_seed, epoch, sample_index) for replayable epochs.
Image augment_train_sample(const Image& img, const AugmentConfig& cfg, Rng& rng);

/// Evaluation pipeline: resize (if configured), center crop (only when the
/// image exceeds crop_size), channel normalize. No randomness, no padding.
Image eval_transform(const Image& img, const AugmentConfig& cfg);

}  // namespace pnca
