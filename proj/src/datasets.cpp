#include "pnca/datasets.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "pnca/errors.hpp"
#include "pnca/rng.hpp"

namespace fs = std::filesystem;

namespace pnca {

std::vector<std::size_t> PatchDataset::class_histogram() const {
    std::vector<std::size_t> hist(class_names.size(), 0);
    for (const auto& it : items) {
        if (it.label < 0 || it.label >= static_cast<int>(hist.size()))
            throw ContractError("dataset item with label outside class range");
        ++hist[static_cast<std::size_t>(it.label)];
    }
    return hist;
}

std::size_t PatchDataset::min_class_count() const {
    auto hist = class_histogram();
    if (hist.empty()) return 0;
    return *std::min_element(hist.begin(), hist.end());
}

PatchDataset load_folder(const std::string& root) {
    if (!fs::exists(root) || !fs::is_directory(root))
        throw IngestError("dataset root does not exist: " + root);

    std::vector<std::string> class_dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) class_dirs.push_back(entry.path().filename().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw IngestError("no class subdirectories under " + root);

    PatchDataset ds;
    ds.class_names = class_dirs;
    ds.provenance = "folder(" + root + ")";
    for (int label = 0; label < static_cast<int>(class_dirs.size()); ++label) {
        const fs::path dir = fs::path(root) / class_dirs[static_cast<std::size_t>(label)];
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (!entry.is_regular_file()) continue;
            std::string ext = entry.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(),
                           [](unsigned char ch) { return std::tolower(ch); });
            if (ext == ".png") files.push_back(entry.path().string());
        }
        std::sort(files.begin(), files.end());
        if (files.empty())
            throw IngestError("class directory has no PNG files: " + dir.string());
        for (const auto& f : files) ds.items.push_back({read_png(f), label, f});
    }
    return ds;
}

namespace {

// fixed tint wheel; hue in [0,1)
std::array<float, 3> tint_for_hue(double hue) {
    constexpr double tau = 6.283185307179586;
    auto chan = [&](double shift) {
        return static_cast<float>(0.62 + 0.38 * std::sin(tau * hue + shift));
    };
    return {chan(0.0), chan(tau / 3.0), chan(2.0 * tau / 3.0)};
}

}  // namespace

PatchDataset generate_synthetic(int classes, int per_class, int size, std::uint64_t seed) {
    if (classes < 2) throw ContractError("generate_synthetic: need at least 2 classes");
    if (per_class < 1) throw ContractError("generate_synthetic: per_class must be >= 1");
    if (size < 16) throw ContractError("generate_synthetic: size must be >= 16");

    constexpr double pi = 3.14159265358979323846;
    constexpr double golden = 0.61803398874989485;

    PatchDataset ds;
    ds.provenance = "synthetic(seed=" + std::to_string(seed) + ",C=" + std::to_string(classes) +
                    ",n=" + std::to_string(per_class) + ",size=" + std::to_string(size) + ")";
    for (int c = 0; c < classes; ++c) {
        char name[16];
        std::snprintf(name, sizeof name, "class_%02d", c);
        ds.class_names.emplace_back(name);
    }

    // family-level offsets make different seeds produce disjoint classes
    Rng family_rng = Rng::for_stream(seed, 0xFA311137ULL);
    const double hue_offset = family_rng.uniform();
    const double orient_offset = family_rng.uniform();
    const double freq_offset = family_rng.uniform(0.0, 1.0);

    for (int c = 0; c < classes; ++c) {
        Rng class_rng = Rng::for_stream(seed, 0xC1A55ULL, static_cast<std::uint64_t>(c));
        const int orient_bin = c % 6;
        const int freq_bin = (c / 6) % 4;
        const double theta =
            pi * (orient_bin + 0.2 + 0.6 * class_rng.uniform() + orient_offset) / 6.0;
        // frequencies stay below ~6 cycles per side so stride-2 feature maps
        // of small inputs still resolve them
        const double freq = 1.6 + 1.1 * freq_bin + 0.6 * class_rng.uniform() + 0.4 * freq_offset;
        const double hue = std::fmod(golden * c + hue_offset, 1.0);
        const double sat_jitter = class_rng.uniform();
        const auto tint = tint_for_hue(hue);
        const float tint_blend = static_cast<float>(0.55 + 0.25 * sat_jitter);

        const double ct = std::cos(theta), st = std::sin(theta);
        for (int i = 0; i < per_class; ++i) {
            Rng img_rng = Rng::for_stream(seed, 0x173EULL, static_cast<std::uint64_t>(c),
                                          static_cast<std::uint64_t>(i));
            const double phase = img_rng.uniform(0.0, 2.0 * pi);
            const double phase2 = img_rng.uniform(0.0, 2.0 * pi);
            Image img(size, size);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double u = (x * ct + y * st) / size;
                    const double v = (-x * st + y * ct) / size;
                    const double lum = 0.55 + 0.24 * std::sin(2.0 * pi * freq * u + phase) +
                                       0.12 * std::sin(2.0 * pi * (0.5 * freq) * v + phase2);
                    for (int ch = 0; ch < 3; ++ch) {
                        const double base =
                            lum * (tint_blend * tint[static_cast<std::size_t>(ch)] +
                                   (1.0f - tint_blend));
                        const double noisy = base + img_rng.normal(0.0, 0.1);
                        img.at(ch, y, x) =
                            static_cast<float>(std::clamp(noisy, 0.0, 1.0));
                    }
                }
            ds.items.push_back({std::move(img), c,
                                "synthetic:" + std::to_string(seed) + "/" + ds.class_names[c] +
                                    "/" + std::to_string(i)});
        }
    }
    return ds;
}

void write_dataset_folder(const PatchDataset& ds, const std::string& root) {
    fs::create_directories(root);
    std::vector<int> counters(ds.class_names.size(), 0);
    for (const auto& name : ds.class_names) fs::create_directories(fs::path(root) / name);
    for (const auto& item : ds.items) {
        char fname[32];
        std::snprintf(fname, sizeof fname, "img_%05d.png",
                      counters[static_cast<std::size_t>(item.label)]++);
        write_png((fs::path(root) / ds.class_names[static_cast<std::size_t>(item.label)] / fname)
                      .string(),
                  item.image);
    }
    nlohmann::json manifest;
    manifest["provenance"] = ds.provenance;
    manifest["class_names"] = ds.class_names;
    auto hist = ds.class_histogram();
    nlohmann::json counts = nlohmann::json::object();
    for (std::size_t c = 0; c < hist.size(); ++c) counts[ds.class_names[c]] = hist[c];
    manifest["per_class_counts"] = counts;
    manifest["total"] = ds.items.size();
    std::ofstream out(fs::path(root) / "manifest.json");
    out << manifest.dump(2) << "\n";
}

PatchDataset subsample_even(const PatchDataset& ds, int n_per_class, std::uint64_t seed) {
    if (n_per_class < 1) throw SamplingError("subsample_even: n_per_class must be >= 1");
    auto hist = ds.class_histogram();
    for (std::size_t c = 0; c < hist.size(); ++c)
        if (hist[c] < static_cast<std::size_t>(n_per_class))
            throw SamplingError("subsample_even: class " + ds.class_names[c] + " has only " +
                                std::to_string(hist[c]) + " items, need " +
                                std::to_string(n_per_class));

    std::vector<std::size_t> chosen;
    for (std::size_t c = 0; c < hist.size(); ++c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < ds.items.size(); ++i)
            if (ds.items[i].label == static_cast<int>(c)) idx.push_back(i);
        Rng rng = Rng::for_stream(seed, 0x5AB5ULL, c);
        rng.shuffle(idx.begin(), idx.end());
        chosen.insert(chosen.end(), idx.begin(), idx.begin() + n_per_class);
    }
    std::sort(chosen.begin(), chosen.end());

    PatchDataset out;
    out.class_names = ds.class_names;
    out.provenance = ds.provenance + "|subsample(n=" + std::to_string(n_per_class) +
                     ",seed=" + std::to_string(seed) + ")";
    out.items.reserve(chosen.size());
    for (std::size_t i : chosen) out.items.push_back(ds.items[i]);
    return out;
}

std::vector<SplitPlan> kfold_split(const PatchDataset& ds, int k, std::uint64_t seed) {
    if (k < 2) throw SplitError("kfold_split: k must be >= 2");
    auto hist = ds.class_histogram();
    for (std::size_t c = 0; c < hist.size(); ++c)
        if (hist[c] < static_cast<std::size_t>(k))
            throw SplitError("kfold_split: class " + ds.class_names[c] + " has " +
                             std::to_string(hist[c]) + " items, fewer than k=" +
                             std::to_string(k));

    // per class: shuffled indices chunked into k pieces, sizes differing by <= 1
    std::vector<std::vector<std::vector<std::size_t>>> chunks(
        hist.size(), std::vector<std::vector<std::size_t>>(static_cast<std::size_t>(k)));
    for (std::size_t c = 0; c < hist.size(); ++c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < ds.items.size(); ++i)
            if (ds.items[i].label == static_cast<int>(c)) idx.push_back(i);
        Rng rng = Rng::for_stream(seed, 0xF01DULL, c);
        rng.shuffle(idx.begin(), idx.end());
        const std::size_t base = idx.size() / static_cast<std::size_t>(k);
        const std::size_t extra = idx.size() % static_cast<std::size_t>(k);
        std::size_t pos = 0;
        for (int f = 0; f < k; ++f) {
            const std::size_t take = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
            chunks[c][static_cast<std::size_t>(f)].assign(idx.begin() + pos,
                                                          idx.begin() + pos + take);
            pos += take;
        }
    }

    std::vector<SplitPlan> plans;
    for (int f = 0; f < k; ++f) {
        SplitPlan plan;
        plan.kind = SplitPlan::Kind::kfold;
        plan.fold_index = f;
        plan.k = k;
        plan.seed = seed;
        for (std::size_t c = 0; c < hist.size(); ++c)
            for (int g = 0; g < k; ++g) {
                auto& dst = (g == f) ? plan.test_indices : plan.train_indices;
                const auto& chunk = chunks[c][static_cast<std::size_t>(g)];
                dst.insert(dst.end(), chunk.begin(), chunk.end());
            }
        std::sort(plan.train_indices.begin(), plan.train_indices.end());
        std::sort(plan.test_indices.begin(), plan.test_indices.end());
        plans.push_back(std::move(plan));
    }
    return plans;
}

SplitPlan holdout_split(const PatchDataset& ds, double test_fraction, std::uint64_t seed) {
    if (test_fraction < 0.0 || test_fraction >= 1.0)
        throw SplitError("holdout_split: test_fraction must be in [0,1)");
    auto hist = ds.class_histogram();
    SplitPlan plan;
    plan.kind = SplitPlan::Kind::holdout;
    plan.seed = seed;
    for (std::size_t c = 0; c < hist.size(); ++c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < ds.items.size(); ++i)
            if (ds.items[i].label == static_cast<int>(c)) idx.push_back(i);
        Rng rng = Rng::for_stream(seed, 0x801DULL, c);
        rng.shuffle(idx.begin(), idx.end());
        const auto n_test = static_cast<std::size_t>(
            std::lround(test_fraction * static_cast<double>(idx.size())));
        for (std::size_t i = 0; i < idx.size(); ++i)
            (i < n_test ? plan.test_indices : plan.train_indices).push_back(idx[i]);
    }
    std::sort(plan.train_indices.begin(), plan.train_indices.end());
    std::sort(plan.test_indices.begin(), plan.test_indices.end());
    return plan;
}

ChannelStats compute_channel_stats(const PatchDataset& ds) {
    std::vector<std::size_t> all(ds.items.size());
    std::iota(all.begin(), all.end(), 0);
    return compute_channel_stats(ds, all);
}

ChannelStats compute_channel_stats(const PatchDataset& ds,
                                   const std::vector<std::size_t>& subset) {
    if (subset.empty()) throw ContractError("compute_channel_stats: empty dataset");
    std::array<double, 3> sum{0, 0, 0};
    std::size_t count = 0;
    for (std::size_t i : subset) {
        const Image& img = ds.items[i].image;
        const std::size_t n = img.pixel_count();
        for (int c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < n; ++p)
                sum[static_cast<std::size_t>(c)] += img.data[static_cast<std::size_t>(c) * n + p];
        count += n;
    }
    ChannelStats stats;
    for (int c = 0; c < 3; ++c)
        stats.mean[static_cast<std::size_t>(c)] =
            static_cast<float>(sum[static_cast<std::size_t>(c)] / static_cast<double>(count));
    std::array<double, 3> sq{0, 0, 0};
    for (std::size_t i : subset) {
        const Image& img = ds.items[i].image;
        const std::size_t n = img.pixel_count();
        for (int c = 0; c < 3; ++c) {
            const double m = stats.mean[static_cast<std::size_t>(c)];
            for (std::size_t p = 0; p < n; ++p) {
                const double d = img.data[static_cast<std::size_t>(c) * n + p] - m;
                sq[static_cast<std::size_t>(c)] += d * d;
            }
        }
    }
    for (int c = 0; c < 3; ++c)
        stats.stddev[static_cast<std::size_t>(c)] = static_cast<float>(
            std::sqrt(sq[static_cast<std::size_t>(c)] / static_cast<double>(count)));
    return stats;
}

}  // namespace pnca
