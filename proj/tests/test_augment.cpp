#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "pnca/augment.hpp"
#include "pnca/errors.hpp"
#include "pnca/rng.hpp"

using namespace pnca;

namespace {

Image random_image(Rng& rng, int h, int w) {
    Image img(h, w);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

bool same_pixels(const Image& a, const Image& b) {
    return a.height == b.height && a.width == b.width && a.data == b.data;
}

}  // namespace

TEST_CASE("reflect_pad: paper sizes and identity") {
    Image a(150, 150);
    CHECK(reflect_pad(a, 0.125).height == 186);
    CHECK(reflect_pad(a, 0.125).width == 186);
    Image b(96, 96);
    CHECK(reflect_pad(b, 0.125).height == 120);

    Rng rng(1);
    Image c = random_image(rng, 20, 20);
    CHECK(same_pixels(reflect_pad(c, 0.0), c));
    CHECK_THROWS_AS(reflect_pad(Image(4, 4), 1.0), ConfigError);
}

TEST_CASE("reflect_pad: mirror excludes the edge pixel") {
    // row [a, b, c] padded by 1 becomes [b, a, b, c, b]
    Image img(1, 3);
    img.at(0, 0, 0) = 0.1f;
    img.at(0, 0, 1) = 0.2f;
    img.at(0, 0, 2) = 0.3f;
    Image padded = reflect_pad(img, 0.4);  // floor(0.4*3)=1 vertical... height 1 -> pad 0
    CHECK(padded.height == 1);             // floor(0.4*1) = 0
    CHECK(padded.width == 5);
    CHECK(padded.at(0, 0, 0) == 0.2f);
    CHECK(padded.at(0, 0, 1) == 0.1f);
    CHECK(padded.at(0, 0, 2) == 0.2f);
    CHECK(padded.at(0, 0, 3) == 0.3f);
    CHECK(padded.at(0, 0, 4) == 0.2f);
}

TEST_CASE("random_crop: identity at full size, determinism, bounds") {
    Rng rng(2);
    Image img = random_image(rng, 12, 12);
    Rng r1(77);
    CHECK(same_pixels(random_crop(img, 12, r1), img));

    Rng r2(123), r3(123);
    Image c1 = random_crop(img, 8, r2);
    Image c2 = random_crop(img, 8, r3);
    CHECK(same_pixels(c1, c2));
    CHECK_THROWS_AS(random_crop(img, 13, r2), ConfigError);
}

TEST_CASE("random_crop: offsets uniform over valid positions (chi-square)") {
    // 186 -> 150 crop: 37 valid offsets per axis; encode the offset in pixel 0
    Image img(186, 186);
    for (int y = 0; y < 186; ++y)
        for (int x = 0; x < 186; ++x) {
            img.at(0, y, x) = static_cast<float>(y);
            img.at(1, y, x) = static_cast<float>(x);
        }
    const int kDraws = 10000, kPositions = 37;
    std::vector<int> ycount(kPositions, 0), xcount(kPositions, 0);
    Rng rng(2025);
    for (int i = 0; i < kDraws; ++i) {
        Image c = random_crop(img, 150, rng);
        ycount[static_cast<int>(c.at(0, 0, 0))]++;
        xcount[static_cast<int>(c.at(1, 0, 0))]++;
    }
    const double expected = static_cast<double>(kDraws) / kPositions;
    auto chi2 = [&](const std::vector<int>& counts) {
        double s = 0;
        for (int n : counts) s += (n - expected) * (n - expected) / expected;
        return s;
    };
    // chi-square 99th percentile at 36 dof
    const double kThreshold = 58.619;
    CHECK(chi2(ycount) < kThreshold);
    CHECK(chi2(xcount) < kThreshold);
}

TEST_CASE("resize_bilinear: constants, monotone ramps, up-down exactness") {
    Image constant(10, 10, 0.37f);
    Image resized = resize_bilinear(constant, 7);
    CHECK(resized.height == 7);
    for (float v : resized.data) CHECK(v == 0.37f);

    // horizontal ramp stays monotone per row through 1000 -> 514
    Image ramp(40, 1000);
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 1000; ++x)
            for (int c = 0; c < 3; ++c) ramp.at(c, y, x) = static_cast<float>(x) / 999.0f;
    Image small = resize_bilinear(ramp, 514);
    for (int y = 0; y < 514; ++y)
        for (int x = 1; x < 514; ++x) CHECK(small.at(0, y, x) >= small.at(0, y, x - 1));

    Image up = resize_bilinear(constant, 23);
    Image down = resize_bilinear(up, 10);
    CHECK(same_pixels(down, constant));

    CHECK_THROWS_AS(resize_bilinear(constant, 0), ConfigError);
}

TEST_CASE("flip/rotate group identities") {
    Rng rng(3);
    Image img = random_image(rng, 9, 9);
    CHECK(same_pixels(flip_horizontal(flip_horizontal(img)), img));

    Image r = img;
    for (int i = 0; i < 4; ++i) r = rotate_quarter(r, 1);
    CHECK(same_pixels(r, img));
    CHECK(same_pixels(rotate_quarter(img, 4), img));

    // rotation permutes pixels: multiset preserved exactly
    Image rot = rotate_quarter(img, 1);
    auto a = img.data, b = rot.data;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);

    Image rect(4, 6);
    CHECK_THROWS_AS(rotate_quarter(rect, 1), ConfigError);
}

TEST_CASE("color_jitter: threshold 0 is the identity") {
    Rng rng(4);
    Image img = random_image(rng, 8, 8);
    Rng jr(99);
    CHECK(same_pixels(color_jitter(img, 0.0, jr), img));
    CHECK_THROWS_AS(color_jitter(img, 1.0, jr), ConfigError);
}

TEST_CASE("photometric ops: identity factors are exact") {
    Rng rng(5);
    Image img = random_image(rng, 6, 6);
    CHECK(same_pixels(apply_brightness(img, 1.0f), img));
    CHECK(same_pixels(apply_contrast(img, 1.0f), img));
    CHECK(same_pixels(apply_saturation(img, 1.0f), img));
    CHECK(same_pixels(apply_hue(img, 0.0f), img));
}

TEST_CASE("photometric ops: grayscale is a fixed point of saturation and hue") {
    Rng rng(6);
    Image gray(5, 5);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
            const float v = static_cast<float>(rng.uniform());
            gray.at(0, y, x) = gray.at(1, y, x) = gray.at(2, y, x) = v;
        }
    Image sat = apply_saturation(gray, 1.37f);
    for (std::size_t i = 0; i < gray.data.size(); ++i)
        CHECK(sat.data[i] == doctest::Approx(gray.data[i]).epsilon(1e-6));
    Image hue = apply_hue(gray, 0.33f);
    for (std::size_t i = 0; i < gray.data.size(); ++i)
        CHECK(hue.data[i] == doctest::Approx(gray.data[i]).epsilon(1e-6));
}

TEST_CASE("photometric outputs stay in [0,1]") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Image img = random_image(rng, 10, 10);
        Rng jr(1000 + trial);
        Image out = color_jitter(img, 0.4, jr);
        for (float v : out.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("channel_normalize: identities and round trips") {
    Rng rng(8);
    Image img = random_image(rng, 7, 7);
    Image id = channel_normalize(img, {0, 0, 0}, {1, 1, 1});
    CHECK(same_pixels(id, img));

    Image constant(5, 5, 0.5f);
    Image zeroed = channel_normalize(constant, {0.5f, 0.5f, 0.5f}, {1, 1, 1});
    for (float v : zeroed.data) CHECK(v == 0.0f);

    CHECK_THROWS_AS(channel_normalize(img, {0, 0, 0}, {1, 0, 1}), ConfigError);
}

TEST_CASE("pipeline: reproducible under (seed, epoch, index) streams") {
    Rng rng(9);
    Image img = random_image(rng, 40, 40);
    AugmentConfig cfg;
    cfg.crop_size = 32;
    cfg.channel_mean = {0.5f, 0.5f, 0.5f};
    cfg.channel_std = {0.25f, 0.25f, 0.25f};

    Rng s1 = Rng::for_stream(42, 3, 17);
    Rng s2 = Rng::for_stream(42, 3, 17);
    Image a = augment_train_sample(img, cfg, s1);
    Image b = augment_train_sample(img, cfg, s2);
    CHECK(same_pixels(a, b));

    Rng s3 = Rng::for_stream(42, 3, 18);
    Image c = augment_train_sample(img, cfg, s3);
    CHECK_FALSE(same_pixels(a, c));

    CHECK(a.height == 32);
    CHECK(a.width == 32);
}

TEST_CASE("eval path: resize + center crop + normalize only, no randomness") {
    Rng rng(10);
    Image img = random_image(rng, 40, 40);
    AugmentConfig cfg;
    cfg.crop_size = 32;
    cfg.jitter_threshold = 0.4;  // must not apply on the eval path
    Image a = eval_transform(img, cfg);
    Image b = eval_transform(img, cfg);
    CHECK(same_pixels(a, b));
    CHECK(a.height == 32);

    // center crop only when larger than crop size
    Image small_img = random_image(rng, 32, 32);
    Image c = eval_transform(small_img, cfg);
    CHECK(c.height == 32);
}
