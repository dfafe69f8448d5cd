#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "pnca/losses.hpp"
#include "pnca/optim.hpp"

using namespace pnca;

namespace {

// Direct 64-bit evaluation of the training-loop loss expression
//   -log( exp(-d(a^,p^)) / sum_z exp(-d(a^,z^)) )
// used as the oracle for the stable d_pos + logsumexp implementation.
double direct_proxy_loss(const std::vector<double>& alpha, int label,
                         const std::vector<std::vector<double>>& proxies, bool squared) {
    auto normalize = [](std::vector<double> v) {
        double n = 0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        for (double& x : v) x /= n;
        return v;
    };
    auto dist = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return squared ? s : std::sqrt(s);
    };
    auto ah = normalize(alpha);
    double denom = 0;
    for (int c = 0; c < static_cast<int>(proxies.size()); ++c) {
        if (c == label) continue;
        denom += std::exp(-dist(ah, normalize(proxies[c])));
    }
    const double num = std::exp(-dist(ah, normalize(proxies[label])));
    return -std::log(num / denom);
}

ProxySet<double> make_proxies(const std::vector<std::vector<double>>& rows) {
    std::vector<double> flat;
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    return ProxySet<double>{TensorD::from(std::move(flat), {rows.size(), rows[0].size()}, true)};
}

}  // namespace

TEST_CASE("proxy_assign: splits by class id") {
    auto ps = make_proxies({{1, 0}, {-1, 0}});
    auto [pos, neg] = proxy_assign(0, ps);
    CHECK(pos.data() == std::vector<double>{1, 0});
    CHECK(neg.shape() == Shape{1, 2});
    CHECK(neg.data() == std::vector<double>{-1, 0});

    Rng rng(5);
    std::vector<std::vector<double>> rows;
    for (int c = 0; c < 24; ++c) rows.push_back({double(c), rng.uniform(), rng.uniform()});
    auto ps24 = make_proxies(rows);
    auto [p7, n7] = proxy_assign(7, ps24);
    CHECK(p7.data()[0] == 7.0);
    CHECK(n7.shape() == Shape{23, 3});
    for (std::size_t r = 0; r < 23; ++r) CHECK(n7.data()[r * 3] != 7.0);
    // order stable: class ids ascending with 7 removed
    CHECK(n7.data()[6 * 3] == 6.0);
    CHECK(n7.data()[7 * 3] == 8.0);

    CHECK_THROWS_AS(proxy_assign(24, ps24), ContractError);
    CHECK_THROWS_AS(proxy_assign(-1, ps24), ContractError);
}

TEST_CASE("proxynca_loss: hand-derived oracle values") {
    // d_pos=0, d_neg=2 -> 0 + ln(e^-2) = -2
    auto ps = make_proxies({{1, 0}, {-1, 0}});
    auto alpha = TensorD::from({2, 0}, {1, 2}, true);
    auto l1 = proxynca_loss(alpha, {0}, ps);
    CHECK(std::fabs(l1.value.item() - (-2.0)) < 1e-9);

    // symmetric: d_pos = d_neg = sqrt(2) -> loss 0
    auto alpha2 = TensorD::from({0, 1}, {1, 2}, true);
    auto l2 = proxynca_loss(alpha2, {0}, ps);
    CHECK(std::fabs(l2.value.item()) < 1e-9);

    // C=3: l = ln 2 - sqrt(2)
    auto ps3 = make_proxies({{1, 0}, {0, 1}, {0, -1}});
    auto alpha3 = TensorD::from({1, 0}, {1, 2}, true);
    auto l3 = proxynca_loss(alpha3, {0}, ps3);
    CHECK(std::fabs(l3.value.item() - (std::log(2.0) - std::sqrt(2.0))) < 1e-9);
    CHECK(l3.value.item() == doctest::Approx(-0.7210665).epsilon(1e-6));
}

TEST_CASE("proxynca_loss: degenerate and contract errors") {
    auto ps1 = ProxySet<double>{TensorD::from({1, 0}, {1, 2}, true)};
    auto alpha = TensorD::from({1, 0}, {1, 2}, true);
    CHECK_THROWS_AS(proxynca_loss(alpha, {0}, ps1), DegenerateTaskError);

    auto ps = make_proxies({{1, 0}, {-1, 0}});
    CHECK_THROWS_AS(proxynca_loss(TensorD::from({0, 0}, {1, 2}, true), {0}, ps),
                    DegenerateInputError);
    auto ps_zero = make_proxies({{0, 0}, {-1, 0}});
    CHECK_THROWS_AS(proxynca_loss(alpha, {0}, ps_zero), DegenerateInputError);
    CHECK_THROWS_AS(proxynca_loss(alpha, {2}, ps), ContractError);
    CHECK_THROWS_AS(init_proxies<double>(1, 8, 0), DegenerateTaskError);
}

TEST_CASE("proxynca_loss: stable form equals direct formula on random inputs") {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        const int C = 2 + static_cast<int>(rng.uniform_int(8));
        const int D = 2 + static_cast<int>(rng.uniform_int(6));
        const bool squared = rng.bernoulli(0.5);
        std::vector<std::vector<double>> rows(C, std::vector<double>(D));
        for (auto& r : rows)
            for (auto& x : r) x = rng.uniform(-1, 1) + (std::fabs(x) < 0.05 ? 0.1 : 0.0);
        std::vector<double> a(D);
        for (auto& x : a) x = rng.uniform(-1, 1);
        double an = 0;
        for (double x : a) an += x * x;
        if (std::sqrt(an) < 0.1) a[0] += 0.5;
        const int label = static_cast<int>(rng.uniform_int(C));

        auto ps = make_proxies(rows);
        auto alpha = TensorD::from(a, {1, static_cast<std::size_t>(D)}, true);
        auto got = proxynca_loss(alpha, {label}, ps, {squared}).value.item();
        const double want = direct_proxy_loss(a, label, rows, squared);
        CHECK(std::fabs(got - want) < 1e-9);
    }
}

TEST_CASE("proxynca_loss: value is mean of per-example and scale invariant") {
    Rng rng(11);
    const int B = 5, C = 4, D = 8;
    std::vector<std::vector<double>> rows(C, std::vector<double>(D));
    for (auto& r : rows)
        for (auto& x : r) x = rng.normal();
    auto ps = make_proxies(rows);
    std::vector<double> a(B * D);
    for (auto& x : a) x = rng.normal();
    std::vector<int> labels = {0, 1, 2, 3, 1};

    auto alpha = TensorD::from(a, {B, D}, true);
    auto lv = proxynca_loss(alpha, labels, ps);
    double m = 0;
    for (double x : lv.per_example.data()) m += x;
    m /= B;
    CHECK(std::fabs(lv.value.item() - m) < 1e-6);

    // rescaling one embedding by c>0 leaves the loss unchanged
    auto a2 = a;
    for (int j = 0; j < D; ++j) a2[2 * D + j] *= 37.5;
    auto lv2 = proxynca_loss(TensorD::from(a2, {B, D}, true), labels, ps);
    CHECK(std::fabs(lv2.value.item() - lv.value.item()) < 1e-9);
}

TEST_CASE("proxynca_loss: gradients vs finite differences, embeddings and proxies") {
    Rng rng(4242);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t B = 1 + rng.uniform_int(4);
        const std::size_t C = 2 + rng.uniform_int(6);
        const std::size_t D = 2 + rng.uniform_int(6);
        const bool squared = trial % 3 == 0;
        std::vector<int> labels(B);
        for (auto& l : labels) l = static_cast<int>(rng.uniform_int(C));

        auto alpha = gradcheck::random_tensor_away_from_zero(rng, {B, D});
        auto prox = gradcheck::random_tensor_away_from_zero(rng, {C, D});
        auto rep = gradcheck::check(
            [labels, squared](const std::vector<TensorD>& in) {
                ProxySet<double> ps{in[1]};
                return proxynca_loss(in[0], labels, ps, {squared}).value;
            },
            {alpha, prox});
        CHECK(rep.max_rel_err <= 1e-5);
    }
}

TEST_CASE("proxynca_loss: descent on a 3-class toy problem") {
    Rng rng(300);
    const int B = 12, C = 3, D = 4;
    std::vector<double> a(B * D);
    for (auto& x : a) x = rng.normal();
    std::vector<int> labels(B);
    for (int i = 0; i < B; ++i) labels[i] = i % C;

    auto alpha = TensorD::from(a, {B, D}, true);
    auto ps = init_proxies<double>(C, D, 123);
    int decreases = 0;
    double prev = 0;
    const double lr = 0.05;
    for (int step = 0; step < 200; ++step) {
        alpha.zero_grad();
        ps.proxies.zero_grad();
        auto lv = proxynca_loss(alpha, labels, ps);
        const double cur = lv.value.item();
        if (step > 0 && cur < prev) ++decreases;
        prev = cur;
        backward(lv.value);
        for (std::size_t j = 0; j < alpha.size(); ++j)
            alpha.data_mut()[j] -= lr * alpha.grad()[j];
        for (std::size_t j = 0; j < ps.proxies.size(); ++j)
            ps.proxies.data_mut()[j] -= lr * ps.proxies.grad()[j];
        for (double v : ps.proxies.data()) CHECK(std::isfinite(v));
    }
    CHECK(decreases >= 189);  // >= 95% of 199 transitions
}

TEST_CASE("proxynca_loss: attraction and repulsion when optimizing embeddings only") {
    Rng rng(301);
    const int B = 8, C = 4, D = 6;
    std::vector<double> a(B * D);
    for (auto& x : a) x = rng.normal();
    std::vector<int> labels(B);
    for (int i = 0; i < B; ++i) labels[i] = i % C;
    auto ps = init_proxies<double>(C, D, 9);

    auto measure = [&](const std::vector<double>& emb) {
        NoGradGuard ng;
        auto ah = normalize_rows(TensorD::from(emb, {B, D}));
        auto ph = normalize_rows(ps.proxies);
        auto dm = pairwise_distance(ah, ph);
        double dpos = 0, dneg = 0;
        for (int i = 0; i < B; ++i) {
            dpos += dm.data()[i * C + labels[i]];
            double mn = 1e30;
            for (int c = 0; c < C; ++c)
                if (c != labels[i]) mn = std::min(mn, dm.data()[i * C + c]);
            dneg += mn;
        }
        return std::make_pair(dpos / B, dneg / B);
    };

    auto [pos0, neg0] = measure(a);
    auto alpha = TensorD::from(a, {B, D}, true);
    for (int step = 0; step < 300; ++step) {
        alpha.zero_grad();
        auto lv = proxynca_loss(alpha, labels, ps);
        backward(lv.value);
        for (std::size_t j = 0; j < alpha.size(); ++j)
            alpha.data_mut()[j] -= 0.05 * alpha.grad()[j];
    }
    auto [pos1, neg1] = measure(alpha.data());
    CHECK(pos1 < pos0);
    CHECK(neg1 > neg0);
}

TEST_CASE("cross_entropy_loss: closed-form values") {
    auto z8 = TensorD::zeros({1, 8}, true);
    CHECK(cross_entropy_loss(z8, {3}).value.item() == doctest::Approx(std::log(8.0)).epsilon(1e-9));

    auto easy = TensorD::from({10, 0}, {1, 2}, true);
    CHECK(cross_entropy_loss(easy, {0}).value.item() ==
          doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-9));
    CHECK(cross_entropy_loss(easy, {0}).value.item() == doctest::Approx(4.5399e-5).epsilon(1e-3));

    auto wrong = TensorD::from({0, 10}, {1, 2}, true);
    CHECK(cross_entropy_loss(wrong, {0}).value.item() ==
          doctest::Approx(10.0 + std::log1p(std::exp(-10.0))).epsilon(1e-9));

    CHECK_THROWS_AS(cross_entropy_loss(easy, {2}), ContractError);
    CHECK_THROWS_AS(cross_entropy_loss(easy, {-1}), ContractError);
}

TEST_CASE("cross_entropy_loss: gradients vs finite differences") {
    Rng rng(616);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t B = 1 + rng.uniform_int(5), C = 2 + rng.uniform_int(6);
        std::vector<int> labels(B);
        for (auto& l : labels) l = static_cast<int>(rng.uniform_int(C));
        auto logits = gradcheck::random_tensor(rng, {B, C}, true, -4.0, 4.0);
        auto rep = gradcheck::check(
            [labels](const std::vector<TensorD>& in) {
                return cross_entropy_loss(in[0], labels).value;
            },
            {logits});
        CHECK(rep.max_rel_err <= 1e-5);
    }
}

TEST_CASE("init_proxies: determinism, shape, row-norm scale") {
    auto a = init_proxies<float>(24, 64, 77);
    auto b = init_proxies<float>(24, 64, 77);
    CHECK(a.proxies.data() == b.proxies.data());
    CHECK(a.proxies.shape() == Shape{24, 64});
    for (float v : a.proxies.data()) CHECK(std::isfinite(v));

    auto c = init_proxies<float>(24, 64, 78);
    CHECK(a.proxies.data() != c.proxies.data());

    // mean row norm over many draws is ~1 when sigma = 1/sqrt(D)
    const int D = 64;
    double norm_sum = 0;
    int rows = 0;
    for (int seed = 0; seed < 100; ++seed) {
        auto ps = init_proxies<double>(100, D, 1000 + seed);
        for (int r = 0; r < 100; ++r) {
            double sq = 0;
            for (int j = 0; j < D; ++j) {
                double v = ps.proxies.data()[r * D + j];
                sq += v * v;
            }
            norm_sum += std::sqrt(sq);
            ++rows;
        }
    }
    const double mean_norm = norm_sum / rows;  // 10^4 rows
    CHECK(mean_norm > 0.9);
    CHECK(mean_norm < 1.1);
}
