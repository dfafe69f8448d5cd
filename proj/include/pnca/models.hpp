#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pnca/losses.hpp"
#include "pnca/tensor.hpp"

namespace pnca {

/// Residual CNN shape: a 3x3 stem (no pooling after it), then stages of
/// residual blocks. A stage's first block applies the stage stride and
/// switches to the stage width; remaining blocks are identity-shaped.
struct StageSpec {
    int width = 8;
    int blocks = 1;
    int stride = 1;

    bool operator==(const StageSpec&) const = default;
};

struct ArchDescriptor {
    int stem_width = 8;
    std::vector<StageSpec> stages;

    bool operator==(const ArchDescriptor&) const = default;

    /// Descriptor grammar: "stem<W>:<width>x<blocks>[s<stride>],..."
    /// e.g. "stem8:8x1,16x1s2". Stride defaults to 1 for the first stage
    /// and 2 afterwards.
    std::string to_string() const;
    static ArchDescriptor parse(const std::string& text);

    static ArchDescriptor tiny();       // stem8: 8x1, 16x1s2
    static ArchDescriptor resnet34();   // stem64: 64x3, 128x4s2, 256x6s2, 512x3s2

    void validate() const;  // throws ConfigError
};

/// Feature extractor M. Parameters are named float tensors with
/// requires_grad set; forward returns [B x feature_width] after global
/// average pooling, so the output width does not depend on input size.
class Backbone {
public:
    Backbone(ArchDescriptor arch, std::uint64_t seed);

    Tensor<float> forward(const Tensor<float>& x) const;
    int feature_width() const;
    const ArchDescriptor& arch() const { return arch_; }

    const std::vector<std::pair<std::string, Tensor<float>>>& named_params() const {
        return named_params_;
    }
    std::vector<Tensor<float>> params() const;

    /// Overwrites parameters by name; throws CheckpointError on any missing
    /// name or shape mismatch.
    void load_params(const std::vector<std::pair<std::string, Tensor<float>>>& source);

private:
    struct BlockParams {
        Tensor<float> conv1, gain1, bias1;
        Tensor<float> conv2, gain2, bias2;
        Tensor<float> skip_conv, skip_gain, skip_bias;  // undefined when identity skip
        int stride = 1;
        bool has_projection = false;
    };
    ArchDescriptor arch_;
    Tensor<float> stem_conv_, stem_gain_, stem_bias_;
    std::vector<std::vector<BlockParams>> stages_;
    std::vector<std::pair<std::string, Tensor<float>>> named_params_;
};

enum class HeadKind { embedding, classifier };

/// Detachable head: E (bias-free linear into the metric space) or a linear
/// classifier with bias.
struct Head {
    HeadKind kind = HeadKind::embedding;
    Tensor<float> weight;  // [F x D] or [F x C]
    Tensor<float> bias;    // classifier only

    static Head embedding(int feature_width, int dim, std::uint64_t seed);
    static Head classifier(int feature_width, int classes, std::uint64_t seed);

    Tensor<float> forward(const Tensor<float>& features) const;
    int out_dim() const { return static_cast<int>(weight.dim(1)); }
    std::vector<std::pair<std::string, Tensor<float>>> named_params() const;
    std::vector<Tensor<float>> params() const;
};

/// alpha = E(M(x)); embeddings are not normalized here, the loss does that.
Tensor<float> forward_embed(const Backbone& backbone, const Head& head, const Tensor<float>& x);

struct Provenance {
    std::string method;  // "classification" | "proxynca" | "random"
    std::uint64_t seed = 0;
    int epochs = 0;
};

/// Serializable parameter set. File layout (all little-endian):
///   magic "PNCA" | version u32 | arch string (u32 len + bytes)
///   | provenance: method (u32 len + bytes), seed u64, epochs u32
///   | tensor count u64 | records of
///     (name u32 len + bytes, dtype u8 (0=f32), rank u32, extents u64...,
///      payload raw f32)
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;
    std::uint32_t version = kVersion;
    ArchDescriptor arch;
    Provenance provenance;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>* find(const std::string& name) const;
};

Checkpoint make_checkpoint(const Backbone& backbone, const Head& head,
                           const std::optional<ProxySet<float>>& proxies,
                           const Provenance& provenance);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

struct HeadSpec {
    HeadKind kind = HeadKind::classifier;
    int out_dim = 0;  // embedding dim or class count
};

/// The transfer step: keep the backbone weights from the checkpoint, discard
/// its head and proxies, attach a freshly initialized head. If expected_arch
/// is given it must match the checkpoint's.
std::pair<Backbone, Head> transfer_strip(const Checkpoint& ckpt, const HeadSpec& new_head,
                                         std::uint64_t seed,
                                         const std::optional<ArchDescriptor>& expected_arch = {});

/// Rebuilds backbone + head (+ proxies if stored) exactly as checkpointed.
struct AssembledModel {
    Backbone backbone;
    Head head;
    std::optional<ProxySet<float>> proxies;
};
AssembledModel assemble_from_checkpoint(const Checkpoint& ckpt);

}  // namespace pnca
