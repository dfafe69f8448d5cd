#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pnca/image.hpp"

namespace pnca {

struct DatasetItem {
    Image image;
    int label = -1;
    std::string id;  // path for folder datasets, synthetic tag otherwise
};

struct ChannelStats {
    std::array<float, 3> mean{0, 0, 0};
    std::array<float, 3> stddev{1, 1, 1};
};

/// Labeled patches with dense class ids 0..C-1.
struct PatchDataset {
    std::vector<DatasetItem> items;
    std::vector<std::string> class_names;
    std::string provenance;

    int num_classes() const { return static_cast<int>(class_names.size()); }
    std::vector<std::size_t> class_histogram() const;
    std::size_t min_class_count() const;
};

/// Loads `root/<class_name>/*.png`. Class ids follow sorted subdirectory
/// names; items are ordered lexicographically by path.
PatchDataset load_folder(const std::string& root);

/// Procedural texture families: each class has its own sinusoid frequency
/// band, orientation bin and color tint, plus i.i.d. pixel noise (sigma 0.1).
/// Different seeds produce disjoint families.
PatchDataset generate_synthetic(int classes, int per_class, int size, std::uint64_t seed);

/// Writes the folder layout consumed by load_folder plus a manifest.json.
void write_dataset_folder(const PatchDataset& ds, const std::string& root);

/// Exactly n_per_class items per class, uniform without replacement,
/// deterministic per seed. Item order follows the source dataset.
PatchDataset subsample_even(const PatchDataset& ds, int n_per_class, std::uint64_t seed);

struct SplitPlan {
    enum class Kind { kfold, holdout };
    Kind kind = Kind::kfold;
    int fold_index = -1;
    int k = 0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;
};

/// Stratified k-fold plans: per class, a shuffled partition into k chunks
/// whose sizes differ by at most one; plan i tests on chunk i of every class.
std::vector<SplitPlan> kfold_split(const PatchDataset& ds, int k, std::uint64_t seed);

/// Stratified holdout: round(test_fraction * class_count) test items per class.
SplitPlan holdout_split(const PatchDataset& ds, double test_fraction, std::uint64_t seed);

/// Per-channel mean and population standard deviation over all pixels.
/// Pass the training subset when stats must not see evaluation data.
ChannelStats compute_channel_stats(const PatchDataset& ds);
ChannelStats compute_channel_stats(const PatchDataset& ds, const std::vector<std::size_t>& subset);

}  // namespace pnca
