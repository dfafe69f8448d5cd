#include "pnca/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pnca/errors.hpp"

namespace pnca {

namespace {

constexpr float kLumaR = 0.299f, kLumaG = 0.587f, kLumaB = 0.114f;

inline float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

// mirror index into [0, n) about the borders, edge pixel excluded
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = std::abs(i) % period;
    return i < n ? i : period - i;
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    const float mx = std::max({r, g, b});
    const float mn = std::min({r, g, b});
    const float d = mx - mn;
    v = mx;
    s = mx == 0.0f ? 0.0f : d / mx;
    if (d == 0.0f) {
        h = 0.0f;
        return;
    }
    if (mx == r)
        h = (g - b) / d;
    else if (mx == g)
        h = 2.0f + (b - r) / d;
    else
        h = 4.0f + (r - g) / d;
    h /= 6.0f;
    if (h < 0.0f) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    if (s == 0.0f) {
        r = g = b = v;
        return;
    }
    h = h - std::floor(h);
    const float hh = h * 6.0f;
    const int i = std::min(5, static_cast<int>(hh));
    const float f = hh - i;
    const float p = v * (1.0f - s);
    const float q = v * (1.0f - s * f);
    const float t = v * (1.0f - s * (1.0f - f));
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

}  // namespace

RotationMode parse_rotation_mode(const std::string& name) {
    if (name == "none") return RotationMode::none;
    if (name == "quarter") return RotationMode::quarter;
    if (name == "continuous") return RotationMode::continuous;
    throw ConfigError("unknown rotation mode '" + name + "'");
}

Image reflect_pad(const Image& img, double fraction) {
    if (fraction < 0.0) throw ConfigError("reflect_pad: negative fraction");
    const int py = static_cast<int>(std::floor(fraction * img.height));
    const int px = static_cast<int>(std::floor(fraction * img.width));
    if (py >= img.height || px >= img.width)
        throw ConfigError("reflect_pad: pad " + std::to_string(py) + "/" + std::to_string(px) +
                          " not smaller than image " + std::to_string(img.height) + "x" +
                          std::to_string(img.width));
    if (py == 0 && px == 0) return img;
    Image out(img.height + 2 * py, img.width + 2 * px);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < out.height; ++y) {
            const int sy = reflect_index(y - py, img.height);
            for (int x = 0; x < out.width; ++x)
                out.at(c, y, x) = img.at(c, sy, reflect_index(x - px, img.width));
        }
    return out;
}

namespace {

Image crop_at(const Image& img, int oy, int ox, int size) {
    Image out(size, size);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) out.at(c, y, x) = img.at(c, oy + y, ox + x);
    return out;
}

}  // namespace

Image random_crop(const Image& img, int size, Rng& rng) {
    if (size < 1 || size > img.height || size > img.width)
        throw ConfigError("random_crop: size " + std::to_string(size) + " invalid for image " +
                          std::to_string(img.height) + "x" + std::to_string(img.width));
    const int oy = static_cast<int>(rng.uniform_int(img.height - size + 1));
    const int ox = static_cast<int>(rng.uniform_int(img.width - size + 1));
    return crop_at(img, oy, ox, size);
}

Image center_crop(const Image& img, int size) {
    if (size < 1 || size > img.height || size > img.width)
        throw ConfigError("center_crop: size " + std::to_string(size) + " invalid for image " +
                          std::to_string(img.height) + "x" + std::to_string(img.width));
    return crop_at(img, (img.height - size) / 2, (img.width - size) / 2, size);
}

Image resize_bilinear(const Image& img, int target) {
    if (target < 1) throw ConfigError("resize_bilinear: target must be >= 1");
    if (target == img.height && target == img.width) return img;
    Image out(target, target);
    const float sy_scale = static_cast<float>(img.height) / target;
    const float sx_scale = static_cast<float>(img.width) / target;
    for (int y = 0; y < target; ++y) {
        float sy = (y + 0.5f) * sy_scale - 0.5f;
        sy = std::max(0.0f, std::min(sy, static_cast<float>(img.height - 1)));
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const float fy = sy - y0;
        for (int x = 0; x < target; ++x) {
            float sx = (x + 0.5f) * sx_scale - 0.5f;
            sx = std::max(0.0f, std::min(sx, static_cast<float>(img.width - 1)));
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const float fx = sx - x0;
            for (int c = 0; c < 3; ++c) {
                // lerp form keeps constants exactly constant
                const float top = img.at(c, y0, x0) + fx * (img.at(c, y0, x1) - img.at(c, y0, x0));
                const float bot = img.at(c, y1, x0) + fx * (img.at(c, y1, x1) - img.at(c, y1, x0));
                out.at(c, y, x) = top + fy * (bot - top);
            }
        }
    }
    return out;
}

Image flip_horizontal(const Image& img) {
    Image out(img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

Image rotate_quarter(const Image& img, int quarter_turns) {
    const int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return img;
    if (img.height != img.width)
        throw ConfigError("rotate_quarter requires a square image, got " +
                          std::to_string(img.height) + "x" + std::to_string(img.width));
    const int n = img.height;
    Image out(n, n);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                int sy = y, sx = x;
                switch (k) {  // counter-clockwise source lookup
                    case 1: sy = x; sx = n - 1 - y; break;
                    case 2: sy = n - 1 - y; sx = n - 1 - x; break;
                    case 3: sy = n - 1 - x; sx = y; break;
                }
                out.at(c, y, x) = img.at(c, sy, sx);
            }
    return out;
}

Image rotate_continuous(const Image& img, double degrees) {
    const double rad = degrees * (3.14159265358979323846 / 180.0);
    const float cs = static_cast<float>(std::cos(rad)), sn = static_cast<float>(std::sin(rad));
    const float cy = (img.height - 1) * 0.5f, cx = (img.width - 1) * 0.5f;
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const float dy = y - cy, dx = x - cx;
            const float sy = cs * dy - sn * dx + cy;
            const float sx = sn * dy + cs * dx + cx;
            const int y0 = static_cast<int>(std::floor(sy));
            const int x0 = static_cast<int>(std::floor(sx));
            const float fy = sy - y0, fx = sx - x0;
            for (int c = 0; c < 3; ++c) {
                auto sample = [&](int yy, int xx) -> float {
                    if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) return 0.0f;
                    return img.at(c, yy, xx);
                };
                const float top = sample(y0, x0) + fx * (sample(y0, x0 + 1) - sample(y0, x0));
                const float bot =
                    sample(y0 + 1, x0) + fx * (sample(y0 + 1, x0 + 1) - sample(y0 + 1, x0));
                out.at(c, y, x) = top + fy * (bot - top);
            }
        }
    return out;
}

Image random_flip_rotate(const Image& img, Rng& rng, RotationMode mode, double flip_prob) {
    const bool flip = rng.bernoulli(flip_prob);
    Image out = flip ? flip_horizontal(img) : img;
    switch (mode) {
        case RotationMode::none: break;
        case RotationMode::quarter: {
            if (img.height != img.width)
                throw ConfigError("quarter rotation requires square images");
            const int k = static_cast<int>(rng.uniform_int(4));
            out = rotate_quarter(out, k);
            break;
        }
        case RotationMode::continuous: {
            const double angle = rng.uniform(-180.0, 180.0);
            out = rotate_continuous(out, angle);
            break;
        }
    }
    return out;
}

Image apply_brightness(const Image& img, float factor) {
    if (factor == 1.0f) return img;
    Image out = img;
    for (auto& v : out.data) v = clamp01(v * factor);
    return out;
}

Image apply_contrast(const Image& img, float factor) {
    if (factor == 1.0f) return img;
    double acc = 0.0;
    const std::size_t n = img.pixel_count();
    for (std::size_t i = 0; i < n; ++i)
        acc += kLumaR * img.data[i] + kLumaG * img.data[n + i] + kLumaB * img.data[2 * n + i];
    const float gray = static_cast<float>(acc / n);
    Image out = img;
    for (auto& v : out.data) v = clamp01(factor * v + (1.0f - factor) * gray);
    return out;
}

Image apply_saturation(const Image& img, float factor) {
    if (factor == 1.0f) return img;
    Image out = img;
    const std::size_t n = img.pixel_count();
    for (std::size_t i = 0; i < n; ++i) {
        const float gray =
            kLumaR * img.data[i] + kLumaG * img.data[n + i] + kLumaB * img.data[2 * n + i];
        out.data[i] = clamp01(factor * img.data[i] + (1.0f - factor) * gray);
        out.data[n + i] = clamp01(factor * img.data[n + i] + (1.0f - factor) * gray);
        out.data[2 * n + i] = clamp01(factor * img.data[2 * n + i] + (1.0f - factor) * gray);
    }
    return out;
}

Image apply_hue(const Image& img, float turns) {
    if (turns == 0.0f) return img;
    Image out = img;
    const std::size_t n = img.pixel_count();
    for (std::size_t i = 0; i < n; ++i) {
        float h, s, v;
        rgb_to_hsv(img.data[i], img.data[n + i], img.data[2 * n + i], h, s, v);
        float r, g, b;
        hsv_to_rgb(h + turns, s, v, r, g, b);
        out.data[i] = clamp01(r);
        out.data[n + i] = clamp01(g);
        out.data[2 * n + i] = clamp01(b);
    }
    return out;
}

Image color_jitter(const Image& img, double threshold, Rng& rng) {
    if (threshold < 0.0 || threshold >= 1.0)
        throw ConfigError("color_jitter: threshold must be in [0,1)");
    // draw everything up front so stream consumption is order-independent
    std::array<int, 4> order{0, 1, 2, 3};
    rng.shuffle(order.begin(), order.end());
    const float brightness = static_cast<float>(rng.uniform(1.0 - threshold, 1.0 + threshold));
    const float contrast = static_cast<float>(rng.uniform(1.0 - threshold, 1.0 + threshold));
    const float saturation = static_cast<float>(rng.uniform(1.0 - threshold, 1.0 + threshold));
    const float hue = static_cast<float>(rng.uniform(-threshold, threshold));
    if (threshold == 0.0) return img;

    Image out = img;
    for (int op : order) {
        switch (op) {
            case 0: out = apply_brightness(out, brightness); break;
            case 1: out = apply_contrast(out, contrast); break;
            case 2: out = apply_saturation(out, saturation); break;
            case 3: out = apply_hue(out, hue); break;
        }
    }
    return out;
}

Image channel_normalize(const Image& img, const std::array<float, 3>& mean,
                        const std::array<float, 3>& std) {
    for (float s : std)
        if (!(s > 0.0f))
            throw ConfigError("channel_normalize: std must be positive, got " +
                              std::to_string(s));
    Image out = img;
    const std::size_t n = img.pixel_count();
    for (int c = 0; c < 3; ++c) {
        const float m = mean[c], inv = 1.0f / std[c];
        for (std::size_t i = 0; i < n; ++i)
            out.data[c * n + i] = (img.data[c * n + i] - m) * inv;
    }
    return out;
}

Image augment_train_sample(const Image& img, const AugmentConfig& cfg, Rng& rng) {
    Image out = img;
    if (cfg.resize_target > 0) out = resize_bilinear(out, cfg.resize_target);
    if (cfg.pad_fraction > 0.0) out = reflect_pad(out, cfg.pad_fraction);
    if (cfg.crop_size > 0) out = random_crop(out, cfg.crop_size, rng);
    out = random_flip_rotate(out, rng, cfg.rotation_mode, cfg.flip_prob);
    out = color_jitter(out, cfg.jitter_threshold, rng);
    return channel_normalize(out, cfg.channel_mean, cfg.channel_std);
}

Image eval_transform(const Image& img, const AugmentConfig& cfg) {
    Image out = img;
    if (cfg.resize_target > 0) out = resize_bilinear(out, cfg.resize_target);
    if (cfg.crop_size > 0 && (out.height > cfg.crop_size || out.width > cfg.crop_size))
        out = center_crop(out, cfg.crop_size);
    return channel_normalize(out, cfg.channel_mean, cfg.channel_std);
}

}  // namespace pnca
