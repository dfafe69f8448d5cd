#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pnca/augment.hpp"
#include "pnca/datasets.hpp"
#include "pnca/models.hpp"
#include "pnca/optim.hpp"

namespace pnca {

/// Everything one training task needs. CLI flags and config-file keys map
/// onto these fields one to one.
struct RunConfig {
    // data & protocol
    std::string data_dir;
    std::string protocol = "kfold";  // kfold | holdout
    int folds = 10;
    double holdout_test_fraction = 0.25;
    std::uint64_t split_seed = 20240606;  // pins the holdout test set across run seeds
    int n_c = 0;                          // per-class training budget; 0 = all available
    double r_pct = -1.0;                  // alternative knob, converted to n_c when >= 0

    // model
    std::string arch = "stem8:8x1,16x1";
    int embed_dim = 64;

    // task
    std::string method = "classification";  // pretrain: classification | proxynca
    std::string init = "random";            // finetune: "random" | checkpoint path
    std::string finetune_loss = "xent";     // xent | proxynca

    // optimization
    int epochs = 100;
    int batch_size = 32;
    double base_lr = 1e-4;
    std::string schedule = "exponential";
    bool per_example_updates = false;  // literal per-example gradient steps
    double proxy_lr_mult = 1.0;
    bool freeze_backbone = false;
    bool squared_distance = false;

    // seeds
    std::uint64_t seed = 1;
    int num_seeds = 10;

    // augmentation
    double pad_fraction = 0.125;
    int crop_size = 0;
    double jitter = 0.4;
    std::string rotation = "quarter";
    double flip_prob = 0.5;
    int resize_target = 0;

    // output
    std::string out_dir = "out";
    std::string ckpt_out;
    int threads = 0;  // 0 = hardware concurrency

    Schedule make_schedule() const;
    AugmentConfig make_augment(const ChannelStats& stats) const;
    ArchDescriptor parsed_arch() const;
};

struct EpochStat {
    double mean_loss = 0.0;
    double lr = 0.0;
    double train_accuracy = 0.0;
};

struct RunRecord {
    std::string run_id;
    std::string task;            // pretrain | finetune
    std::string method;          // classification/proxynca, or init label for finetune
    std::string finetune_loss;   // xent | proxynca (finetune only)
    std::uint64_t seed = 0;
    int fold = -1;
    int n_c = 0;
    double r_pct = -1.0;
    int epochs_configured = 0;
    std::vector<EpochStat> epochs;
    double final_test_accuracy = -1.0;  // in [0,1]; -1 when not applicable/aborted
    double wall_seconds = 0.0;
    std::string abort_reason;
    std::string group_signature;  // configs that must agree within a report group
    std::vector<std::size_t> train_class_histogram;
    nlohmann::json config;
};

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

void save_run_record(const RunRecord& record, const std::string& runs_dir);
RunRecord load_run_record(const std::string& path);

enum class EvalMode { classifier, nearest_proxy };
EvalMode parse_eval_mode(const std::string& name);

struct PretrainResult {
    Checkpoint checkpoint;
    RunRecord record;
};

/// Trains backbone + head (classifier for "classification", embedding +
/// proxies for "proxynca") on the full dataset and returns the checkpoint.
/// Writes cfg.ckpt_out and a run record under cfg.out_dir when set.
PretrainResult pretrain(const PatchDataset& ds, const RunConfig& cfg);

/// Runs the scarce-data protocol: per seed (and per fold under kfold),
/// subsample n_c per class, train from cfg.init, evaluate, persist one
/// RunRecord per run under <out_dir>/runs. Aborted runs carry abort_reason.
std::vector<RunRecord> finetune(const PatchDataset& ds, const RunConfig& cfg);

/// Accuracy of a checkpointed model over a dataset. classifier: argmax of
/// logits; nearest_proxy: smallest distance between the normalized embedding
/// and normalized proxies. Ties resolve to the lowest class id.
double evaluate(const Checkpoint& ckpt, const PatchDataset& ds, EvalMode mode);

// ---------------------------------------------------------------------------
// reporting

struct ReportRow {
    int n_c = 0;
    double r_pct = -1.0;
    std::string method;
    int runs = 0;
    double mean_pct = 0.0;
    double std_pct = 0.0;  // sample std; 0 for a single run
};

struct ExperimentReport {
    std::vector<ReportRow> rows;
    std::string csv;
    std::string text;
    std::string svg;
};

ExperimentReport make_report(const std::string& runs_dir);
void write_report_files(const ExperimentReport& report, const std::string& out_dir);

// ---------------------------------------------------------------------------
// end-to-end trend reproduction (synthesize -> pretrain x2 -> finetune x3 -> report)

struct TrendPoint {
    double mean_pct = 0.0;
    double std_pct = 0.0;
    int runs = 0;
};

struct TrendSummary {
    // method ("random" | "classification" | "proxynca") -> n_c -> stats
    std::map<std::string, std::map<int, TrendPoint>> by_method;
    std::vector<int> n_c_grid;
    int target_classes = 0;
    int seeds_per_cell = 0;
    double wall_seconds = 0.0;
    std::string out_dir;
};

TrendSummary reproduce_trend(const std::string& out_dir, int threads = 0);

}  // namespace pnca
