#include "pnca/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pnca/errors.hpp"
#include "pnca/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace pnca {

// ---------------------------------------------------------------------------
// arch descriptor

void ArchDescriptor::validate() const {
    if (stem_width < 1) throw ConfigError("arch: stem width must be >= 1");
    if (stages.empty()) throw ConfigError("arch: need at least one stage");
    for (const auto& s : stages) {
        if (s.width < 1) throw ConfigError("arch: stage width must be >= 1");
        if (s.blocks < 1) throw ConfigError("arch: stage blocks must be >= 1");
        if (s.stride < 1 || s.stride > 4) throw ConfigError("arch: stage stride must be in 1..4");
    }
}

std::string ArchDescriptor::to_string() const {
    std::ostringstream os;
    os << "stem" << stem_width << ":";
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (i) os << ",";
        os << stages[i].width << "x" << stages[i].blocks;
        const int default_stride = (i == 0) ? 1 : 2;
        if (stages[i].stride != default_stride) os << "s" << stages[i].stride;
    }
    return os.str();
}

ArchDescriptor ArchDescriptor::parse(const std::string& text) {
    ArchDescriptor arch;
    arch.stages.clear();
    const auto colon = text.find(':');
    if (text.rfind("stem", 0) != 0 || colon == std::string::npos)
        throw ConfigError("arch descriptor must look like 'stem8:8x1,16x1s2', got '" + text + "'");
    try {
        arch.stem_width = std::stoi(text.substr(4, colon - 4));
        std::stringstream body(text.substr(colon + 1));
        std::string part;
        while (std::getline(body, part, ',')) {
            StageSpec spec;
            const auto x = part.find('x');
            if (x == std::string::npos) throw ConfigError("bad stage '" + part + "'");
            spec.width = std::stoi(part.substr(0, x));
            const auto s = part.find('s', x + 1);
            if (s == std::string::npos) {
                spec.blocks = std::stoi(part.substr(x + 1));
                spec.stride = arch.stages.empty() ? 1 : 2;
            } else {
                spec.blocks = std::stoi(part.substr(x + 1, s - x - 1));
                spec.stride = std::stoi(part.substr(s + 1));
            }
            arch.stages.push_back(spec);
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        throw ConfigError("cannot parse arch descriptor '" + text + "'");
    }
    arch.validate();
    return arch;
}

ArchDescriptor ArchDescriptor::tiny() {
    return ArchDescriptor{8, {{8, 1, 1}, {16, 1, 2}}};
}

ArchDescriptor ArchDescriptor::resnet34() {
    return ArchDescriptor{64, {{64, 3, 1}, {128, 4, 2}, {256, 6, 2}, {512, 3, 2}}};
}

// ---------------------------------------------------------------------------
// init helpers

namespace {

Tensor<float> he_conv(Rng& rng, int out_ch, int in_ch, int k) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
    std::vector<float> data(static_cast<std::size_t>(out_ch) * in_ch * k * k);
    for (auto& v : data) v = static_cast<float>(rng.normal(0.0, stddev));
    return Tensor<float>::from(std::move(data),
                               {static_cast<std::size_t>(out_ch), static_cast<std::size_t>(in_ch),
                                static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
                               true);
}

// Heads sit on unnormalized pooled features whose scale is unbounded after
// training, so they start small to keep fresh logits out of softmax
// saturation when reattached to a trained backbone.
Tensor<float> head_linear(Rng& rng, int in_dim, int out_dim, double stddev) {
    std::vector<float> data(static_cast<std::size_t>(in_dim) * out_dim);
    for (auto& v : data) v = static_cast<float>(rng.normal(0.0, stddev));
    return Tensor<float>::from(
        std::move(data), {static_cast<std::size_t>(in_dim), static_cast<std::size_t>(out_dim)},
        true);
}

Tensor<float> affine_gain(int ch) {
    return Tensor<float>::filled({static_cast<std::size_t>(ch)}, 1.0f, true);
}
Tensor<float> affine_bias(int ch) {
    return Tensor<float>::zeros({static_cast<std::size_t>(ch)}, true);
}

}  // namespace

// ---------------------------------------------------------------------------
// backbone

Backbone::Backbone(ArchDescriptor arch, std::uint64_t seed) : arch_(std::move(arch)) {
    arch_.validate();
    Rng rng = Rng::for_stream(seed, 0xBAC800ULL);

    auto reg = [&](const std::string& name, const Tensor<float>& t) {
        named_params_.emplace_back(name, t);
    };

    stem_conv_ = he_conv(rng, arch_.stem_width, 3, 3);
    stem_gain_ = affine_gain(arch_.stem_width);
    stem_bias_ = affine_bias(arch_.stem_width);
    reg("stem.conv.w", stem_conv_);
    reg("stem.affine.g", stem_gain_);
    reg("stem.affine.b", stem_bias_);

    int in_width = arch_.stem_width;
    for (std::size_t s = 0; s < arch_.stages.size(); ++s) {
        const auto& spec = arch_.stages[s];
        std::vector<BlockParams> blocks;
        for (int b = 0; b < spec.blocks; ++b) {
            BlockParams bp;
            bp.stride = (b == 0) ? spec.stride : 1;
            const int in_ch = (b == 0) ? in_width : spec.width;
            bp.conv1 = he_conv(rng, spec.width, in_ch, 3);
            bp.gain1 = affine_gain(spec.width);
            bp.bias1 = affine_bias(spec.width);
            bp.conv2 = he_conv(rng, spec.width, spec.width, 3);
            bp.gain2 = affine_gain(spec.width);
            bp.bias2 = affine_bias(spec.width);
            bp.has_projection = (bp.stride != 1 || in_ch != spec.width);
            const std::string prefix =
                "s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
            reg(prefix + "conv1.w", bp.conv1);
            reg(prefix + "aff1.g", bp.gain1);
            reg(prefix + "aff1.b", bp.bias1);
            reg(prefix + "conv2.w", bp.conv2);
            reg(prefix + "aff2.g", bp.gain2);
            reg(prefix + "aff2.b", bp.bias2);
            if (bp.has_projection) {
                bp.skip_conv = he_conv(rng, spec.width, in_ch, 1);
                bp.skip_gain = affine_gain(spec.width);
                bp.skip_bias = affine_bias(spec.width);
                reg(prefix + "skip.w", bp.skip_conv);
                reg(prefix + "skip.g", bp.skip_gain);
                reg(prefix + "skip.b", bp.skip_bias);
            }
            blocks.push_back(std::move(bp));
        }
        stages_.push_back(std::move(blocks));
        in_width = spec.width;
    }
}

int Backbone::feature_width() const { return arch_.stages.back().width; }

Tensor<float> Backbone::forward(const Tensor<float>& x) const {
    if (x.rank() != 4 || x.dim(1) != 3)
        throw DimensionError("backbone expects input [B x 3 x H x W], got " +
                             shape_str(x.shape()));
    Tensor<float> h = relu(channel_affine(conv2d(x, stem_conv_, 1, 1), stem_gain_, stem_bias_));
    for (const auto& stage : stages_) {
        for (const auto& bp : stage) {
            Tensor<float> z = relu(channel_affine(
                conv2d(h, bp.conv1, static_cast<std::size_t>(bp.stride), 1), bp.gain1, bp.bias1));
            z = channel_affine(conv2d(z, bp.conv2, 1, 1), bp.gain2, bp.bias2);
            Tensor<float> skip =
                bp.has_projection
                    ? channel_affine(conv2d(h, bp.skip_conv, static_cast<std::size_t>(bp.stride), 0),
                                     bp.skip_gain, bp.skip_bias)
                    : h;
            h = relu(add(z, skip));
        }
    }
    return global_avg_pool(h);
}

std::vector<Tensor<float>> Backbone::params() const {
    std::vector<Tensor<float>> out;
    out.reserve(named_params_.size());
    for (const auto& [name, t] : named_params_) out.push_back(t);
    return out;
}

void Backbone::load_params(const std::vector<std::pair<std::string, Tensor<float>>>& source) {
    for (auto& [name, param] : named_params_) {
        const Tensor<float>* src = nullptr;
        for (const auto& [sname, st] : source)
            if (sname == name) {
                src = &st;
                break;
            }
        if (!src) throw CheckpointError("checkpoint is missing backbone parameter '" + name + "'");
        if (src->shape() != param.shape())
            throw CheckpointError("checkpoint parameter '" + name + "' has shape " +
                                  shape_str(src->shape()) + ", expected " +
                                  shape_str(param.shape()));
        param.data_mut() = src->data();
    }
}

// ---------------------------------------------------------------------------
// heads

Head Head::embedding(int feature_width, int dim, std::uint64_t seed) {
    if (feature_width < 1 || dim < 1) throw ConfigError("embedding head: bad dimensions");
    Rng rng = Rng::for_stream(seed, 0x3EADULL);
    Head h;
    h.kind = HeadKind::embedding;
    // scale cancels under L2 normalization in the loss; only direction matters
    h.weight = head_linear(rng, feature_width, dim, std::sqrt(1.0 / feature_width));
    return h;
}

Head Head::classifier(int feature_width, int classes, std::uint64_t seed) {
    if (feature_width < 1 || classes < 2) throw ConfigError("classifier head: bad dimensions");
    Rng rng = Rng::for_stream(seed, 0xC1FULL);
    Head h;
    h.kind = HeadKind::classifier;
    h.weight = head_linear(rng, feature_width, classes, 0.01);
    h.bias = Tensor<float>::zeros({static_cast<std::size_t>(classes)}, true);
    return h;
}

Tensor<float> Head::forward(const Tensor<float>& features) const {
    if (features.rank() != 2 || features.dim(1) != weight.dim(0))
        throw DimensionError("head: features " + shape_str(features.shape()) +
                             " incompatible with weight " + shape_str(weight.shape()));
    Tensor<float> out = matmul(features, weight);
    if (kind == HeadKind::classifier) out = add_row_bias(out, bias);
    return out;
}

std::vector<std::pair<std::string, Tensor<float>>> Head::named_params() const {
    if (kind == HeadKind::embedding) return {{"head.embed.w", weight}};
    return {{"head.fc.w", weight}, {"head.fc.b", bias}};
}

std::vector<Tensor<float>> Head::params() const {
    std::vector<Tensor<float>> out{weight};
    if (kind == HeadKind::classifier) out.push_back(bias);
    return out;
}

Tensor<float> forward_embed(const Backbone& backbone, const Head& head, const Tensor<float>& x) {
    if (head.kind != HeadKind::embedding)
        throw ContractError("forward_embed requires an embedding head");
    return head.forward(backbone.forward(x));
}

// ---------------------------------------------------------------------------
// checkpoint io

const Tensor<float>* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

Checkpoint make_checkpoint(const Backbone& backbone, const Head& head,
                           const std::optional<ProxySet<float>>& proxies,
                           const Provenance& provenance) {
    Checkpoint ckpt;
    ckpt.arch = backbone.arch();
    ckpt.provenance = provenance;
    ckpt.tensors = backbone.named_params();
    for (const auto& [name, t] : head.named_params()) ckpt.tensors.emplace_back(name, t);
    if (proxies) ckpt.tensors.emplace_back("proxies", proxies->proxies);
    return ckpt;
}

namespace {

constexpr char kMagic[4] = {'P', 'N', 'C', 'A'};

template <typename T>
void write_pod(std::ostream& os, T value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
    T value;
    is.read(reinterpret_cast<char*>(&value), sizeof value);
    if (!is) throw CheckpointError("truncated checkpoint file: " + path);
    return value;
}

void write_string(std::ostream& os, const std::string& s) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, const std::string& path) {
    const auto len = read_pod<std::uint32_t>(is, path);
    if (len > (1u << 20)) throw CheckpointError("implausible string length in " + path);
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw CheckpointError("truncated checkpoint file: " + path);
    return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, ckpt.version);
    write_string(os, ckpt.arch.to_string());
    write_string(os, ckpt.provenance.method);
    write_pod<std::uint64_t>(os, ckpt.provenance.seed);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.provenance.epochs));
    write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        write_string(os, name);
        write_pod<std::uint8_t>(os, 0);  // dtype: f32
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d)
            write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(t.dim(d)));
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!os) throw CheckpointError("write failed for checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError("bad checkpoint magic in " + path);
    Checkpoint ckpt;
    ckpt.version = read_pod<std::uint32_t>(is, path);
    if (ckpt.version != Checkpoint::kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(ckpt.version) +
                              " in " + path + " (expected " +
                              std::to_string(Checkpoint::kVersion) + ")");
    ckpt.arch = ArchDescriptor::parse(read_string(is, path));
    ckpt.provenance.method = read_string(is, path);
    ckpt.provenance.seed = read_pod<std::uint64_t>(is, path);
    ckpt.provenance.epochs = static_cast<int>(read_pod<std::uint32_t>(is, path));
    const auto count = read_pod<std::uint64_t>(is, path);
    if (count > (1u << 20)) throw CheckpointError("implausible tensor count in " + path);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = read_string(is, path);
        const auto dtype = read_pod<std::uint8_t>(is, path);
        if (dtype != 0)
            throw CheckpointError("unsupported dtype tag " + std::to_string(dtype) + " in " + path);
        const auto rank = read_pod<std::uint32_t>(is, path);
        if (rank > 8) throw CheckpointError("implausible tensor rank in " + path);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(is, path));
        const std::size_t numel = shape_numel(shape);
        if (numel > (std::size_t(1) << 31))
            throw CheckpointError("implausible tensor size in " + path);
        std::vector<float> data(numel);
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        if (!is) throw CheckpointError("truncated checkpoint file: " + path);
        ckpt.tensors.emplace_back(name, Tensor<float>::from(std::move(data), std::move(shape)));
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// transfer

std::pair<Backbone, Head> transfer_strip(const Checkpoint& ckpt, const HeadSpec& new_head,
                                         std::uint64_t seed,
                                         const std::optional<ArchDescriptor>& expected_arch) {
    if (expected_arch && !(*expected_arch == ckpt.arch))
        throw CheckpointError("incompatible checkpoint: arch '" + ckpt.arch.to_string() +
                              "' does not match requested '" + expected_arch->to_string() + "'");
    Backbone backbone(ckpt.arch, seed);
    backbone.load_params(ckpt.tensors);
    Head head = (new_head.kind == HeadKind::embedding)
                    ? Head::embedding(backbone.feature_width(), new_head.out_dim, seed)
                    : Head::classifier(backbone.feature_width(), new_head.out_dim, seed);
    return {std::move(backbone), std::move(head)};
}

AssembledModel assemble_from_checkpoint(const Checkpoint& ckpt) {
    Backbone backbone(ckpt.arch, ckpt.provenance.seed);
    backbone.load_params(ckpt.tensors);

    const Tensor<float>* embed_w = ckpt.find("head.embed.w");
    const Tensor<float>* fc_w = ckpt.find("head.fc.w");
    Head head;
    if (embed_w) {
        head.kind = HeadKind::embedding;
        head.weight = Tensor<float>::from(embed_w->data(), embed_w->shape(), true);
    } else if (fc_w) {
        const Tensor<float>* fc_b = ckpt.find("head.fc.b");
        if (!fc_b) throw CheckpointError("checkpoint has head.fc.w but no head.fc.b");
        head.kind = HeadKind::classifier;
        head.weight = Tensor<float>::from(fc_w->data(), fc_w->shape(), true);
        head.bias = Tensor<float>::from(fc_b->data(), fc_b->shape(), true);
    } else {
        throw CheckpointError("checkpoint has no head tensors");
    }

    std::optional<ProxySet<float>> proxies;
    if (const Tensor<float>* p = ckpt.find("proxies"))
        proxies = ProxySet<float>{Tensor<float>::from(p->data(), p->shape(), true)};
    return {std::move(backbone), std::move(head), std::move(proxies)};
}

}  // namespace pnca
