#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "pnca/errors.hpp"
#include "pnca/rng.hpp"
#include "pnca/tensor.hpp"

namespace pnca {

/// One trainable proxy vector per class, rows indexed by class id.
template <typename S>
struct ProxySet {
    Tensor<S> proxies;  // [C x D], requires_grad

    int num_classes() const { return static_cast<int>(proxies.dim(0)); }
    int dim() const { return static_cast<int>(proxies.dim(1)); }
};

/// Rows drawn i.i.d. from N(0, 1/D) so expected row norm is ~1, matching the
/// scale of normalized embeddings.
template <typename S>
ProxySet<S> init_proxies(int num_classes, int dim, std::uint64_t seed) {
    if (num_classes < 2)
        throw DegenerateTaskError("init_proxies: need at least 2 classes, got " +
                                  std::to_string(num_classes));
    if (dim < 1) throw ContractError("init_proxies: dim must be >= 1");
    Rng rng = Rng::for_stream(seed, 0x70726f78ULL);  // proxy stream
    const double sigma = 1.0 / std::sqrt(static_cast<double>(dim));
    std::vector<S> data(static_cast<std::size_t>(num_classes) * dim);
    for (auto& v : data) v = static_cast<S>(rng.normal(0.0, sigma));
    return ProxySet<S>{Tensor<S>::from(std::move(data),
                                       {static_cast<std::size_t>(num_classes),
                                        static_cast<std::size_t>(dim)},
                                       /*requires_grad=*/true)};
}

/// Splits the proxy matrix into the positive row for `label` and the stacked
/// remaining rows (stable class-id order). Returns plain copies.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> proxy_assign(int label, const ProxySet<S>& proxies) {
    const int c = proxies.num_classes();
    const int d = proxies.dim();
    if (label < 0 || label >= c)
        throw ContractError("proxy_assign: label " + std::to_string(label) +
                            " out of range [0," + std::to_string(c) + ")");
    const auto& src = proxies.proxies.data();
    std::vector<S> pos(src.begin() + static_cast<std::size_t>(label) * d,
                       src.begin() + static_cast<std::size_t>(label + 1) * d);
    std::vector<S> neg;
    neg.reserve(static_cast<std::size_t>(c - 1) * d);
    for (int r = 0; r < c; ++r) {
        if (r == label) continue;
        neg.insert(neg.end(), src.begin() + static_cast<std::size_t>(r) * d,
                   src.begin() + static_cast<std::size_t>(r + 1) * d);
    }
    return {Tensor<S>::from(std::move(pos), {static_cast<std::size_t>(d)}),
            Tensor<S>::from(std::move(neg),
                            {static_cast<std::size_t>(c - 1), static_cast<std::size_t>(d)})};
}

/// Batch loss: scalar value plus the per-example vector it averages.
template <typename S>
struct LossValue {
    Tensor<S> value;        // scalar, mean over batch
    Tensor<S> per_example;  // [B]
};

struct ProxyLossOptions {
    bool squared_distance = false;  // squared-Euclidean variant of the reference method
};

/// Proxy loss over a batch of embeddings. Per example, with hat denoting L2
/// normalization and d Euclidean distance:
///     l_i = d(a_i, p_label) + log sum_{z != label} exp(-d(a_i, p_z))
/// which equals -log( exp(-d_pos) / sum exp(-d_neg) ). The denominator
/// excludes the positive class, so the loss can be negative. Gradients flow
/// to both the embeddings and the proxies.
template <typename S>
LossValue<S> proxynca_loss(const Tensor<S>& embeddings, const std::vector<int>& labels,
                           const ProxySet<S>& proxies, const ProxyLossOptions& opts = {}) {
    if (embeddings.rank() != 2)
        throw DimensionError("proxynca_loss: embeddings must be [B x D], got " +
                             shape_str(embeddings.shape()));
    const int c = proxies.num_classes();
    if (c < 2)
        throw DegenerateTaskError("proxynca_loss: need at least 2 classes (no negatives with C=" +
                                  std::to_string(c) + ")");
    if (embeddings.dim(1) != static_cast<std::size_t>(proxies.dim()))
        throw DimensionError("proxynca_loss: embedding dim " + shape_str(embeddings.shape()) +
                             " vs proxies " + shape_str(proxies.proxies.shape()));
    if (labels.size() != embeddings.dim(0))
        throw ContractError("proxynca_loss: label count != batch size");
    for (int l : labels)
        if (l < 0 || l >= c)
            throw ContractError("proxynca_loss: label " + std::to_string(l) + " out of range [0," +
                                std::to_string(c) + ")");

    Tensor<S> a_hat = normalize_rows(embeddings);
    Tensor<S> p_hat = normalize_rows(proxies.proxies);
    Tensor<S> dist = pairwise_distance(a_hat, p_hat, opts.squared_distance);  // [B x C]
    Tensor<S> d_pos = pick_columns(dist, labels);                             // [B]
    Tensor<S> neg_lse = logsumexp_rows_excluding(scale(dist, S(-1)), labels); // [B]
    Tensor<S> per_example = add(d_pos, neg_lse);
    return {mean(per_example), per_example};
}

/// Standard cross entropy over logits, max-shift stable, mean over the batch.
template <typename S>
LossValue<S> cross_entropy_loss(const Tensor<S>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw DimensionError("cross_entropy_loss: logits must be [B x C], got " +
                             shape_str(logits.shape()));
    Tensor<S> per_example = softmax_cross_entropy_rows(logits, labels);
    return {mean(per_example), per_example};
}

}  // namespace pnca
