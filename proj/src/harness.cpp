#include "pnca/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "pnca/errors.hpp"
#include "pnca/losses.hpp"
#include "pnca/rng.hpp"

namespace fs = std::filesystem;

namespace pnca {

// ---------------------------------------------------------------------------
// RunConfig helpers

Schedule RunConfig::make_schedule() const {
    Schedule s;
    s.kind = parse_schedule_kind(schedule);
    s.base_lr = base_lr;
    return s;
}

AugmentConfig RunConfig::make_augment(const ChannelStats& stats) const {
    AugmentConfig aug;
    aug.pad_fraction = pad_fraction;
    aug.crop_size = crop_size;
    aug.jitter_threshold = jitter;
    aug.rotation_mode = parse_rotation_mode(rotation);
    aug.flip_prob = flip_prob;
    aug.resize_target = resize_target;
    aug.channel_mean = stats.mean;
    aug.channel_std = stats.stddev;
    return aug;
}

ArchDescriptor RunConfig::parsed_arch() const { return ArchDescriptor::parse(arch); }

EvalMode parse_eval_mode(const std::string& name) {
    if (name == "classifier") return EvalMode::classifier;
    if (name == "nearest_proxy") return EvalMode::nearest_proxy;
    throw ConfigError("unknown eval mode '" + name + "'");
}

// ---------------------------------------------------------------------------
// RunRecord json

void to_json(nlohmann::json& j, const EpochStat& e) {
    j = nlohmann::json{{"loss", e.mean_loss}, {"lr", e.lr}, {"train_acc", e.train_accuracy}};
}
void from_json(const nlohmann::json& j, EpochStat& e) {
    j.at("loss").get_to(e.mean_loss);
    j.at("lr").get_to(e.lr);
    j.at("train_acc").get_to(e.train_accuracy);
}

void to_json(nlohmann::json& j, const RunRecord& r) {
    j = nlohmann::json{{"run_id", r.run_id},
                       {"task", r.task},
                       {"method", r.method},
                       {"finetune_loss", r.finetune_loss},
                       {"seed", r.seed},
                       {"fold", r.fold},
                       {"n_c", r.n_c},
                       {"r_pct", r.r_pct},
                       {"epochs_configured", r.epochs_configured},
                       {"epochs", r.epochs},
                       {"final_test_accuracy", r.final_test_accuracy},
                       {"wall_seconds", r.wall_seconds},
                       {"abort_reason", r.abort_reason},
                       {"group_signature", r.group_signature},
                       {"train_class_histogram", r.train_class_histogram},
                       {"config", r.config}};
}
void from_json(const nlohmann::json& j, RunRecord& r) {
    j.at("run_id").get_to(r.run_id);
    j.at("task").get_to(r.task);
    j.at("method").get_to(r.method);
    j.at("finetune_loss").get_to(r.finetune_loss);
    j.at("seed").get_to(r.seed);
    j.at("fold").get_to(r.fold);
    j.at("n_c").get_to(r.n_c);
    j.at("r_pct").get_to(r.r_pct);
    j.at("epochs_configured").get_to(r.epochs_configured);
    j.at("epochs").get_to(r.epochs);
    j.at("final_test_accuracy").get_to(r.final_test_accuracy);
    j.at("wall_seconds").get_to(r.wall_seconds);
    j.at("abort_reason").get_to(r.abort_reason);
    j.at("group_signature").get_to(r.group_signature);
    j.at("train_class_histogram").get_to(r.train_class_histogram);
    r.config = j.value("config", nlohmann::json::object());
}

void save_run_record(const RunRecord& record, const std::string& runs_dir) {
    fs::create_directories(runs_dir);
    nlohmann::json j = record;
    std::ofstream out(fs::path(runs_dir) / (record.run_id + ".json"));
    if (!out) throw ConfigError("cannot write run record under " + runs_dir);
    out << j.dump(2) << "\n";
}

RunRecord load_run_record(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ReportError("cannot open run record " + path);
    nlohmann::json j;
    try {
        in >> j;
        return j.get<RunRecord>();
    } catch (const nlohmann::json::exception& e) {
        throw ReportError("malformed run record " + path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// batching and prediction helpers

namespace {

Tensor<float> make_batch(const std::vector<Image>& images) {
    if (images.empty()) throw ContractError("make_batch: empty batch");
    const int h = images[0].height, w = images[0].width;
    for (const auto& img : images)
        if (img.height != h || img.width != w)
            throw ConfigError("batch images disagree in size; check crop/resize configuration");
    const std::size_t stride = images[0].data.size();
    std::vector<float> data(images.size() * stride);
    for (std::size_t i = 0; i < images.size(); ++i)
        std::memcpy(data.data() + i * stride, images[i].data.data(), stride * sizeof(float));
    return Tensor<float>::from(std::move(data),
                               {images.size(), 3, static_cast<std::size_t>(h),
                                static_cast<std::size_t>(w)});
}

// argmax with ties resolved to the lowest class id
std::vector<int> argmax_rows(const std::vector<float>& values, std::size_t rows,
                             std::size_t cols) {
    std::vector<int> out(rows, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        float best = values[r * cols];
        for (std::size_t c = 1; c < cols; ++c)
            if (values[r * cols + c] > best) {
                best = values[r * cols + c];
                out[r] = static_cast<int>(c);
            }
    }
    return out;
}

// nearest normalized proxy, ties to the lowest class id; an (unlikely)
// zero-norm embedding stays unnormalized rather than crashing evaluation
std::vector<int> nearest_proxy_predict(const std::vector<float>& emb, std::size_t rows,
                                       std::size_t dim, const std::vector<float>& proxies,
                                       std::size_t classes) {
    std::vector<float> phat(proxies.size());
    for (std::size_t c = 0; c < classes; ++c) {
        double sq = 0;
        for (std::size_t j = 0; j < dim; ++j) {
            const float v = proxies[c * dim + j];
            sq += static_cast<double>(v) * v;
        }
        const float inv = sq > 1e-24 ? static_cast<float>(1.0 / std::sqrt(sq)) : 1.0f;
        for (std::size_t j = 0; j < dim; ++j) phat[c * dim + j] = proxies[c * dim + j] * inv;
    }
    std::vector<int> out(rows, 0);
    std::vector<float> ahat(dim);
    for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0;
        for (std::size_t j = 0; j < dim; ++j) {
            const float v = emb[r * dim + j];
            sq += static_cast<double>(v) * v;
        }
        const float inv = sq > 1e-24 ? static_cast<float>(1.0 / std::sqrt(sq)) : 1.0f;
        for (std::size_t j = 0; j < dim; ++j) ahat[j] = emb[r * dim + j] * inv;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < classes; ++c) {
            double d = 0;
            for (std::size_t j = 0; j < dim; ++j) {
                const double diff = ahat[j] - phat[c * dim + j];
                d += diff * diff;
            }
            if (d < best) {
                best = d;
                out[r] = static_cast<int>(c);
            }
        }
    }
    return out;
}

struct EvalTarget {
    const Backbone& backbone;
    const Head& head;
    const std::optional<ProxySet<float>>& proxies;
};

double eval_accuracy(const EvalTarget& model, const PatchDataset& ds,
                     const std::vector<std::size_t>& indices, const AugmentConfig& aug,
                     EvalMode mode, int batch_size) {
    if (indices.empty()) throw ContractError("evaluate: empty dataset");
    if (mode == EvalMode::classifier && model.head.kind != HeadKind::classifier)
        throw ContractError("classifier evaluation needs a classifier head");
    if (mode == EvalMode::nearest_proxy) {
        if (model.head.kind != HeadKind::embedding)
            throw ContractError("nearest-proxy evaluation needs an embedding head");
        if (!model.proxies) throw ContractError("nearest-proxy evaluation needs proxies");
    }
    NoGradGuard ng;
    std::size_t correct = 0;
    const std::size_t bs = batch_size > 0 ? static_cast<std::size_t>(batch_size) : 32;
    for (std::size_t start = 0; start < indices.size(); start += bs) {
        const std::size_t stop = std::min(indices.size(), start + bs);
        std::vector<Image> images;
        std::vector<int> labels;
        images.reserve(stop - start);
        for (std::size_t i = start; i < stop; ++i) {
            images.push_back(eval_transform(ds.items[indices[i]].image, aug));
            labels.push_back(ds.items[indices[i]].label);
        }
        Tensor<float> x = make_batch(images);
        Tensor<float> out = model.head.forward(model.backbone.forward(x));
        std::vector<int> pred =
            mode == EvalMode::classifier
                ? argmax_rows(out.data(), out.dim(0), out.dim(1))
                : nearest_proxy_predict(out.data(), out.dim(0), out.dim(1),
                                        model.proxies->proxies.data(),
                                        model.proxies->proxies.dim(0));
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

// ---------------------------------------------------------------------------
// shared training loop

enum class TrainLoss { cross_entropy, proxynca };

struct TrainSetup {
    TrainLoss loss = TrainLoss::cross_entropy;
    int epochs = 1;
    int batch_size = 32;
    Schedule schedule;
    std::uint64_t run_seed = 0;
    AugmentConfig aug;
    bool per_example_updates = false;
    double proxy_lr_mult = 1.0;
    bool freeze_backbone = false;
    bool squared_distance = false;
};

std::vector<EpochStat> train_model(Backbone& backbone, Head& head,
                                   std::optional<ProxySet<float>>& proxies,
                                   const PatchDataset& ds,
                                   const std::vector<std::size_t>& train_idx,
                                   const TrainSetup& setup) {
    if (setup.epochs < 1) throw ConfigError("training needs epochs >= 1");
    if (setup.batch_size < 1) throw ConfigError("training needs batch size >= 1");
    if (train_idx.empty()) throw ContractError("training needs a nonempty train split");

    std::vector<Tensor<float>> model_params;
    if (!setup.freeze_backbone)
        for (auto& p : backbone.params()) model_params.push_back(p);
    for (auto& p : head.params()) model_params.push_back(p);
    Adam<float> model_opt(model_params);
    std::optional<Adam<float>> proxy_opt;
    if (proxies) proxy_opt.emplace(std::vector<Tensor<float>>{proxies->proxies});

    const std::size_t batch =
        setup.per_example_updates ? 1 : static_cast<std::size_t>(setup.batch_size);
    std::vector<EpochStat> stats;
    stats.reserve(static_cast<std::size_t>(setup.epochs));

    for (int epoch = 0; epoch < setup.epochs; ++epoch) {
        const double lr = lr_at(setup.schedule, epoch);
        std::vector<std::size_t> order = train_idx;
        Rng::for_stream(setup.run_seed, 0x0D0EULL, static_cast<std::uint64_t>(epoch))
            .shuffle(order.begin(), order.end());

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t stop = std::min(order.size(), start + batch);
            std::vector<Image> images;
            std::vector<int> labels;
            images.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) {
                const std::size_t idx = order[i];
                Rng rng = Rng::for_stream(setup.run_seed, static_cast<std::uint64_t>(epoch), idx,
                                          0xA1163ULL);
                images.push_back(augment_train_sample(ds.items[idx].image, setup.aug, rng));
                labels.push_back(ds.items[idx].label);
            }
            Tensor<float> x = make_batch(images);

            model_opt.zero_grad();
            if (proxy_opt) proxy_opt->zero_grad();

            double batch_loss;
            std::vector<int> pred;
            if (setup.loss == TrainLoss::cross_entropy) {
                Tensor<float> logits = head.forward(backbone.forward(x));
                LossValue<float> lv = cross_entropy_loss(logits, labels);
                batch_loss = lv.value.item();
                backward(lv.value);
                pred = argmax_rows(logits.data(), logits.dim(0), logits.dim(1));
            } else {
                Tensor<float> emb = forward_embed(backbone, head, x);
                LossValue<float> lv =
                    proxynca_loss(emb, labels, *proxies, {setup.squared_distance});
                batch_loss = lv.value.item();
                backward(lv.value);
                pred = nearest_proxy_predict(emb.data(), emb.dim(0), emb.dim(1),
                                             proxies->proxies.data(), proxies->proxies.dim(0));
            }
            if (!std::isfinite(batch_loss))
                throw OptimError("non-finite training loss at epoch " + std::to_string(epoch));
            model_opt.step(static_cast<float>(lr));
            if (proxy_opt) proxy_opt->step(static_cast<float>(lr * setup.proxy_lr_mult));

            loss_sum += batch_loss * static_cast<double>(stop - start);
            for (std::size_t i = 0; i < pred.size(); ++i)
                if (pred[i] == labels[i]) ++correct;
        }
        stats.push_back({loss_sum / static_cast<double>(order.size()), lr,
                         static_cast<double>(correct) / static_cast<double>(order.size())});
    }
    return stats;
}

void run_jobs(std::size_t count, int threads, const std::function<void(std::size_t)>& job) {
    int t = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
    if (t < 1) t = 1;
    t = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(t), count));
    if (t <= 1) {
        for (std::size_t i = 0; i < count; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < t; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    job(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

std::string group_signature_for(const RunConfig& cfg, const std::string& base_provenance) {
    std::ostringstream os;
    os << "task=finetune|data=" << base_provenance << "|arch=" << cfg.arch
       << "|embed=" << cfg.embed_dim << "|loss=" << cfg.finetune_loss
       << "|epochs=" << cfg.epochs << "|batch=" << cfg.batch_size << "|lr=" << cfg.base_lr
       << "|sched=" << cfg.schedule << "|proto=" << cfg.protocol << "|folds=" << cfg.folds
       << "|testfrac=" << cfg.holdout_test_fraction << "|split=" << cfg.split_seed
       << "|pad=" << cfg.pad_fraction << "|crop=" << cfg.crop_size << "|jit=" << cfg.jitter
       << "|rot=" << cfg.rotation << "|flip=" << cfg.flip_prob << "|rsz=" << cfg.resize_target
       << "|sqd=" << cfg.squared_distance << "|frz=" << cfg.freeze_backbone
       << "|pex=" << cfg.per_example_updates;
    return os.str();
}

nlohmann::json config_snapshot(const RunConfig& cfg) {
    return nlohmann::json{{"arch", cfg.arch},
                          {"embed_dim", cfg.embed_dim},
                          {"epochs", cfg.epochs},
                          {"batch_size", cfg.batch_size},
                          {"base_lr", cfg.base_lr},
                          {"schedule", cfg.schedule},
                          {"protocol", cfg.protocol},
                          {"folds", cfg.folds},
                          {"holdout_test_fraction", cfg.holdout_test_fraction},
                          {"split_seed", cfg.split_seed},
                          {"pad_fraction", cfg.pad_fraction},
                          {"crop_size", cfg.crop_size},
                          {"jitter", cfg.jitter},
                          {"rotation", cfg.rotation},
                          {"flip_prob", cfg.flip_prob},
                          {"resize_target", cfg.resize_target},
                          {"finetune_loss", cfg.finetune_loss},
                          {"init", cfg.init},
                          {"method", cfg.method},
                          {"per_example_updates", cfg.per_example_updates},
                          {"proxy_lr_mult", cfg.proxy_lr_mult},
                          {"freeze_backbone", cfg.freeze_backbone},
                          {"squared_distance", cfg.squared_distance}};
}

std::uint64_t job_seed(std::uint64_t seed, int fold) {
    return detail::splitmix64(detail::splitmix64(seed) ^
                              (0xF01DF01DULL + static_cast<std::uint64_t>(fold + 1)));
}

}  // namespace

// ---------------------------------------------------------------------------
// pretrain

PretrainResult pretrain(const PatchDataset& ds, const RunConfig& cfg) {
    if (cfg.epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("pretrain: batch size must be >= 1");
    if (cfg.method != "classification" && cfg.method != "proxynca")
        throw ConfigError("pretrain: method must be classification or proxynca, got '" +
                          cfg.method + "'");
    const int classes = ds.num_classes();
    if (classes < 2) throw DegenerateTaskError("pretrain: dataset needs at least 2 classes");
    if (ds.items.empty()) throw ContractError("pretrain: empty dataset");

    const auto t0 = std::chrono::steady_clock::now();
    const ChannelStats stats = compute_channel_stats(ds);

    Backbone backbone(cfg.parsed_arch(), cfg.seed);
    Head head = cfg.method == "classification"
                    ? Head::classifier(backbone.feature_width(), classes, cfg.seed)
                    : Head::embedding(backbone.feature_width(), cfg.embed_dim, cfg.seed);
    std::optional<ProxySet<float>> proxies;
    if (cfg.method == "proxynca")
        proxies = init_proxies<float>(classes, cfg.embed_dim, cfg.seed);

    std::vector<std::size_t> all(ds.items.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

    TrainSetup setup;
    setup.loss =
        cfg.method == "classification" ? TrainLoss::cross_entropy : TrainLoss::proxynca;
    setup.epochs = cfg.epochs;
    setup.batch_size = cfg.batch_size;
    setup.schedule = cfg.make_schedule();
    setup.run_seed = cfg.seed;
    setup.aug = cfg.make_augment(stats);
    setup.per_example_updates = cfg.per_example_updates;
    setup.proxy_lr_mult = cfg.proxy_lr_mult;
    setup.squared_distance = cfg.squared_distance;

    RunRecord record;
    record.run_id = "pretrain-" + cfg.method + "-s" + std::to_string(cfg.seed);
    record.task = "pretrain";
    record.method = cfg.method;
    record.seed = cfg.seed;
    record.n_c = static_cast<int>(ds.min_class_count());
    record.epochs_configured = cfg.epochs;
    record.config = config_snapshot(cfg);
    record.group_signature = "task=pretrain|" + cfg.method;
    record.train_class_histogram = ds.class_histogram();

    try {
        record.epochs = train_model(backbone, head, proxies, ds, all, setup);
    } catch (const OptimError& e) {
        record.abort_reason = e.what();
        record.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!cfg.out_dir.empty()) save_run_record(record, cfg.out_dir + "/runs");
        throw;
    }
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    Checkpoint ckpt =
        make_checkpoint(backbone, head, proxies, {cfg.method, cfg.seed, cfg.epochs});
    if (!cfg.ckpt_out.empty()) save_checkpoint(cfg.ckpt_out, ckpt);
    if (!cfg.out_dir.empty()) save_run_record(record, cfg.out_dir + "/runs");
    return {std::move(ckpt), std::move(record)};
}

// ---------------------------------------------------------------------------
// finetune

std::vector<RunRecord> finetune(const PatchDataset& ds, const RunConfig& cfg) {
    if (cfg.epochs < 1) throw ConfigError("finetune: epochs must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("finetune: batch size must be >= 1");
    if (cfg.num_seeds < 1) throw ConfigError("finetune: need at least one seed");
    if (cfg.protocol != "kfold" && cfg.protocol != "holdout")
        throw ConfigError("finetune: protocol must be kfold or holdout, got '" + cfg.protocol +
                          "'");
    if (cfg.finetune_loss != "xent" && cfg.finetune_loss != "proxynca")
        throw ConfigError("finetune: finetune_loss must be xent or proxynca");
    const int classes = ds.num_classes();
    if (classes < 2) throw DegenerateTaskError("finetune: dataset needs at least 2 classes");

    const ArchDescriptor arch = cfg.parsed_arch();

    // resolve the initialization before any training starts
    std::optional<Checkpoint> init_ckpt;
    std::string method_label = "random";
    if (cfg.init != "random") {
        init_ckpt = load_checkpoint(cfg.init);
        if (!(init_ckpt->arch == arch))
            throw ConfigError("incompatible checkpoint: arch '" + init_ckpt->arch.to_string() +
                              "' does not match configured '" + arch.to_string() + "'");
        method_label = init_ckpt->provenance.method.empty() ? "checkpoint"
                                                            : init_ckpt->provenance.method;
    }

    // the holdout test set is fixed across seeds; the kfold protocol
    // subsamples first and then cross-validates inside the scarce pool
    SplitPlan holdout;
    std::size_t pool_class_size = 0;
    if (cfg.protocol == "holdout") {
        holdout = holdout_split(ds, cfg.holdout_test_fraction, cfg.split_seed);
        std::vector<std::size_t> counts(static_cast<std::size_t>(classes), 0);
        for (std::size_t i : holdout.train_indices)
            ++counts[static_cast<std::size_t>(ds.items[i].label)];
        pool_class_size = *std::min_element(counts.begin(), counts.end());
    } else {
        pool_class_size = ds.min_class_count();
    }
    if (pool_class_size == 0) throw ConfigError("finetune: a class has no training items");

    int n_c = cfg.n_c;
    if (cfg.r_pct >= 0.0)
        n_c = static_cast<int>(std::lround(cfg.r_pct / 100.0 *
                                           static_cast<double>(pool_class_size)));
    if (n_c <= 0) n_c = static_cast<int>(pool_class_size);
    if (n_c > static_cast<int>(pool_class_size))
        throw ConfigError("finetune: n_c=" + std::to_string(n_c) +
                          " exceeds available per-class pool of " +
                          std::to_string(pool_class_size));
    if (cfg.protocol == "kfold" && n_c < cfg.folds)
        throw ConfigError("finetune: n_c=" + std::to_string(n_c) + " is smaller than folds=" +
                          std::to_string(cfg.folds) + "; every class needs >= k items");
    const double r_pct = cfg.r_pct >= 0.0
                             ? cfg.r_pct
                             : 100.0 * n_c / static_cast<double>(pool_class_size);

    PatchDataset pool_ds;  // holdout protocol trains from this pool
    if (cfg.protocol == "holdout") {
        pool_ds.class_names = ds.class_names;
        pool_ds.provenance = ds.provenance + "|holdout-pool";
        for (std::size_t i : holdout.train_indices) pool_ds.items.push_back(ds.items[i]);
    }

    struct Job {
        std::uint64_t seed;
        int fold;  // -1 for holdout
    };
    std::vector<Job> jobs;
    for (int s = 0; s < cfg.num_seeds; ++s) {
        const std::uint64_t seed_s = cfg.seed + static_cast<std::uint64_t>(s);
        if (cfg.protocol == "holdout") {
            jobs.push_back({seed_s, -1});
        } else {
            for (int f = 0; f < cfg.folds; ++f) jobs.push_back({seed_s, f});
        }
    }

    const std::string signature = group_signature_for(cfg, ds.provenance);
    const std::string runs_dir = cfg.out_dir + "/runs";
    std::vector<RunRecord> records(jobs.size());

    run_jobs(jobs.size(), cfg.threads, [&](std::size_t ji) {
        const Job job = jobs[ji];
        const auto t0 = std::chrono::steady_clock::now();
        const std::uint64_t rs = job_seed(job.seed, job.fold);

        // assemble this run's train/test items
        PatchDataset train_ds;
        train_ds.class_names = ds.class_names;
        const PatchDataset* eval_ds = nullptr;
        std::vector<std::size_t> eval_idx;
        if (cfg.protocol == "holdout") {
            train_ds = subsample_even(pool_ds, n_c, job.seed);
            eval_ds = &ds;
            eval_idx = holdout.test_indices;
        } else {
            PatchDataset pool = subsample_even(ds, n_c, job.seed);
            auto plans = kfold_split(pool, cfg.folds, job.seed);
            const auto& plan = plans[static_cast<std::size_t>(job.fold)];
            train_ds.provenance = pool.provenance + "|fold" + std::to_string(job.fold);
            for (std::size_t i : plan.train_indices) train_ds.items.push_back(pool.items[i]);
            // keep the fold's test items alive alongside the train split
            for (std::size_t i : plan.test_indices) train_ds.items.push_back(pool.items[i]);
            eval_ds = &train_ds;
            const std::size_t n_train = plan.train_indices.size();
            for (std::size_t i = 0; i < plan.test_indices.size(); ++i)
                eval_idx.push_back(n_train + i);
        }
        const std::size_t n_train_items =
            cfg.protocol == "holdout" ? train_ds.items.size()
                                      : train_ds.items.size() - eval_idx.size();
        std::vector<std::size_t> train_idx(n_train_items);
        for (std::size_t i = 0; i < n_train_items; ++i) train_idx[i] = i;

        // protocol audit: no test item may appear in the train split
        {
            std::unordered_set<std::string> train_ids;
            for (std::size_t i : train_idx) train_ids.insert(train_ds.items[i].id);
            for (std::size_t i : eval_idx)
                if (train_ids.count(eval_ds->items[i].id))
                    throw ContractError("protocol violation: test item '" +
                                        eval_ds->items[i].id + "' found in train split");
        }

        RunRecord rec;
        rec.task = "finetune";
        rec.method = method_label;
        rec.finetune_loss = cfg.finetune_loss;
        rec.seed = job.seed;
        rec.fold = job.fold;
        rec.n_c = n_c;
        rec.r_pct = r_pct;
        rec.epochs_configured = cfg.epochs;
        rec.group_signature = signature;
        rec.config = config_snapshot(cfg);
        rec.run_id = "finetune-" + method_label + "-" + cfg.finetune_loss + "-nc" +
                     std::to_string(n_c) + "-s" + std::to_string(job.seed) +
                     (job.fold >= 0 ? "-f" + std::to_string(job.fold) : "-holdout");
        {
            std::vector<std::size_t> hist(static_cast<std::size_t>(classes), 0);
            for (std::size_t i : train_idx)
                ++hist[static_cast<std::size_t>(train_ds.items[i].label)];
            rec.train_class_histogram = hist;
        }

        const ChannelStats stats = compute_channel_stats(train_ds, train_idx);
        AugmentConfig aug = cfg.make_augment(stats);

        // model init: fresh, or backbone stripped from the checkpoint; the
        // head is newly initialized either way
        const HeadSpec head_spec{cfg.finetune_loss == "xent" ? HeadKind::classifier
                                                             : HeadKind::embedding,
                                 cfg.finetune_loss == "xent" ? classes : cfg.embed_dim};
        std::optional<std::pair<Backbone, Head>> model;
        if (init_ckpt) {
            model.emplace(transfer_strip(*init_ckpt, head_spec, rs, arch));
        } else {
            Backbone fresh(arch, rs);
            Head fresh_head = head_spec.kind == HeadKind::classifier
                                  ? Head::classifier(fresh.feature_width(), classes, rs)
                                  : Head::embedding(fresh.feature_width(), cfg.embed_dim, rs);
            model.emplace(std::move(fresh), std::move(fresh_head));
        }
        Backbone& backbone = model->first;
        Head& head = model->second;
        std::optional<ProxySet<float>> proxies;
        if (cfg.finetune_loss == "proxynca")
            proxies = init_proxies<float>(classes, cfg.embed_dim, rs);

        TrainSetup setup;
        setup.loss = cfg.finetune_loss == "xent" ? TrainLoss::cross_entropy
                                                 : TrainLoss::proxynca;
        setup.epochs = cfg.epochs;
        setup.batch_size = cfg.batch_size;
        setup.schedule = cfg.make_schedule();
        setup.run_seed = rs;
        setup.aug = aug;
        setup.per_example_updates = cfg.per_example_updates;
        setup.proxy_lr_mult = cfg.proxy_lr_mult;
        setup.freeze_backbone = cfg.freeze_backbone;
        setup.squared_distance = cfg.squared_distance;

        try {
            rec.epochs = train_model(backbone, head, proxies, train_ds, train_idx, setup);
            EvalTarget target{backbone, head, proxies};
            rec.final_test_accuracy =
                eval_accuracy(target, *eval_ds, eval_idx, aug,
                              cfg.finetune_loss == "xent" ? EvalMode::classifier
                                                          : EvalMode::nearest_proxy,
                              cfg.batch_size);
        } catch (const OptimError& e) {
            rec.abort_reason = e.what();
        }
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!cfg.out_dir.empty()) save_run_record(rec, runs_dir);
        records[ji] = std::move(rec);
    });

    return records;
}

// ---------------------------------------------------------------------------
// checkpoint-level evaluate

double evaluate(const Checkpoint& ckpt, const PatchDataset& ds, EvalMode mode) {
    if (ds.items.empty()) throw ContractError("evaluate: empty dataset");
    AssembledModel model = assemble_from_checkpoint(ckpt);
    const ChannelStats stats = compute_channel_stats(ds);
    AugmentConfig aug;  // evaluation path: normalization only
    aug.channel_mean = stats.mean;
    aug.channel_std = stats.stddev;
    std::vector<std::size_t> all(ds.items.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    EvalTarget target{model.backbone, model.head, model.proxies};
    return eval_accuracy(target, ds, all, aug, mode, 32);
}

// ---------------------------------------------------------------------------
// trend reproduction

TrendSummary reproduce_trend(const std::string& out_dir, int threads) {
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(out_dir);

    // desk-scale stand-ins: 24 weakly labeled texture groups; a disjoint
    // 8-class target generated from a different seed
    const PatchDataset weak = generate_synthetic(24, 200, 32, 7001);
    const PatchDataset target = generate_synthetic(8, 100, 32, 9001);

    RunConfig base;
    base.arch = "stem8:8x1s2,16x1";
    base.embed_dim = 64;
    base.crop_size = 32;
    base.pad_fraction = 0.125;
    base.jitter = 0.4;
    base.rotation = "quarter";
    base.flip_prob = 0.5;
    base.schedule = "exponential";
    base.out_dir = out_dir;
    base.threads = threads;

    // pretrain both methods on the weak set
    std::vector<std::string> methods{"classification", "proxynca"};
    std::vector<std::string> ckpt_paths(methods.size());
    run_jobs(methods.size(), threads > 0 ? std::min(threads, 2) : 2, [&](std::size_t i) {
        RunConfig cfg = base;
        cfg.method = methods[i];
        cfg.epochs = 30;
        cfg.batch_size = 32;
        cfg.base_lr = 1e-3;
        cfg.seed = 100 + i;
        cfg.threads = 1;
        cfg.ckpt_out = out_dir + "/pretrain_" + methods[i] + ".pnca";
        pretrain(weak, cfg);
        ckpt_paths[i] = cfg.ckpt_out;
    });

    // fine-tune grid: three initializations x three data budgets x five seeds
    const std::vector<int> n_c_grid{4, 8, 16};
    std::vector<std::string> inits{"random", ckpt_paths[0], ckpt_paths[1]};
    for (const std::string& init : inits) {
        for (int n_c : n_c_grid) {
            RunConfig cfg = base;
            cfg.init = init;
            cfg.n_c = n_c;
            cfg.finetune_loss = "xent";
            cfg.protocol = "holdout";
            cfg.holdout_test_fraction = 0.25;
            cfg.split_seed = 424242;
            cfg.epochs = 40;
            cfg.batch_size = 16;
            cfg.base_lr = 1e-3;
            cfg.seed = 1;
            cfg.num_seeds = 5;
            finetune(target, cfg);
        }
    }

    ExperimentReport report = make_report(out_dir + "/runs");
    write_report_files(report, out_dir);

    TrendSummary summary;
    summary.n_c_grid = n_c_grid;
    summary.target_classes = target.num_classes();
    summary.seeds_per_cell = 5;
    summary.out_dir = out_dir;
    for (const auto& row : report.rows)
        summary.by_method[row.method][row.n_c] = {row.mean_pct, row.std_pct, row.runs};
    summary.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return summary;
}

}  // namespace pnca
