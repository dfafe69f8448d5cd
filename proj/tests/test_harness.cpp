#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "pnca/errors.hpp"
#include "pnca/harness.hpp"
#include "pnca/rng.hpp"

using namespace pnca;
namespace fs = std::filesystem;

namespace {

fs::path fresh_out(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("pnca_harness_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

RunConfig small_cfg(const std::string& out_dir) {
    RunConfig cfg;
    cfg.arch = "stem4:4x1,8x1";
    cfg.embed_dim = 8;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.base_lr = 1e-3;
    cfg.crop_size = 16;
    cfg.pad_fraction = 0.125;
    cfg.jitter = 0.2;
    cfg.out_dir = out_dir;
    cfg.threads = 1;
    return cfg;
}

}  // namespace

TEST_CASE("evaluate: constant logits fall back to class 0 (tie-break)") {
    PatchDataset ds = generate_synthetic(3, 6, 16, 21);
    Backbone net(ArchDescriptor::parse("stem4:4x1,8x1"), 1);
    Head head = Head::classifier(net.feature_width(), 3, 1);
    // zero weights and bias: logits identical for every class
    std::fill(head.weight.data_mut().begin(), head.weight.data_mut().end(), 0.0f);
    Checkpoint ckpt = make_checkpoint(net, head, std::nullopt, {"classification", 1, 0});
    const double acc = evaluate(ckpt, ds, EvalMode::classifier);
    CHECK(acc == doctest::Approx(6.0 / 18.0).epsilon(1e-12));  // frequency of class 0
}

TEST_CASE("evaluate: empty dataset is a contract error") {
    Backbone net(ArchDescriptor::parse("stem4:4x1,8x1"), 1);
    Head head = Head::classifier(net.feature_width(), 3, 1);
    Checkpoint ckpt = make_checkpoint(net, head, std::nullopt, {"classification", 1, 0});
    PatchDataset empty;
    empty.class_names = {"a", "b", "c"};
    CHECK_THROWS_AS(evaluate(ckpt, empty, EvalMode::classifier), ContractError);
}

TEST_CASE("evaluate: nearest proxy with class-mean proxies equals centroid oracle") {
    PatchDataset ds = generate_synthetic(4, 10, 16, 33);
    Backbone net(ArchDescriptor::parse("stem4:4x1,8x1"), 9);
    Head head = Head::embedding(net.feature_width(), 8, 9);

    // embeddings of every item under the evaluation transform
    ChannelStats stats = compute_channel_stats(ds);
    AugmentConfig aug;
    aug.channel_mean = stats.mean;
    aug.channel_std = stats.stddev;
    NoGradGuard ng;
    std::vector<std::vector<float>> embs;
    for (const auto& item : ds.items) {
        Image prepped = eval_transform(item.image, aug);
        auto x = Tensor<float>::from(prepped.data, {1, 3, 16, 16});
        embs.push_back(forward_embed(net, head, x).data());
    }

    // proxies := per-class embedding means
    std::vector<float> proxy_data(4 * 8, 0.0f);
    std::vector<int> counts(4, 0);
    for (std::size_t i = 0; i < embs.size(); ++i) {
        const int c = ds.items[i].label;
        ++counts[static_cast<std::size_t>(c)];
        for (int j = 0; j < 8; ++j) proxy_data[static_cast<std::size_t>(c) * 8 + j] += embs[i][j];
    }
    for (int c = 0; c < 4; ++c)
        for (int j = 0; j < 8; ++j)
            proxy_data[static_cast<std::size_t>(c) * 8 + j] /= static_cast<float>(counts[c]);

    ProxySet<float> proxies{Tensor<float>::from(proxy_data, {4, 8}, true)};
    Checkpoint ckpt = make_checkpoint(net, head, proxies, {"proxynca", 9, 0});
    const double acc = evaluate(ckpt, ds, EvalMode::nearest_proxy);

    // brute-force nearest-centroid oracle on normalized vectors
    auto normalize = [](std::vector<float> v) {
        double n = 0;
        for (float x : v) n += static_cast<double>(x) * x;
        const float inv = n > 0 ? static_cast<float>(1.0 / std::sqrt(n)) : 1.0f;
        for (float& x : v) x *= inv;
        return v;
    };
    std::vector<std::vector<float>> centroids;
    for (int c = 0; c < 4; ++c)
        centroids.push_back(normalize(std::vector<float>(
            proxy_data.begin() + c * 8, proxy_data.begin() + (c + 1) * 8)));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < embs.size(); ++i) {
        auto e = normalize(embs[i]);
        int best = 0;
        double best_d = 1e30;
        for (int c = 0; c < 4; ++c) {
            double d = 0;
            for (int j = 0; j < 8; ++j) {
                const double diff = e[static_cast<std::size_t>(j)] -
                                    centroids[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        if (best == ds.items[i].label) ++correct;
    }
    CHECK(acc == doctest::Approx(static_cast<double>(correct) / embs.size()).epsilon(1e-12));
}

TEST_CASE("evaluate: memorizing model scores 1.0 on its train set") {
    PatchDataset ds = generate_synthetic(2, 4, 16, 77);
    RunConfig cfg = small_cfg(fresh_out("memorize").string());
    cfg.method = "classification";
    cfg.epochs = 120;
    cfg.batch_size = 4;
    cfg.base_lr = 3e-3;
    cfg.schedule = "constant";
    cfg.jitter = 0.0;
    cfg.pad_fraction = 0.0;
    cfg.rotation = "none";
    cfg.flip_prob = 0.0;
    cfg.crop_size = 0;
    cfg.out_dir = "";
    PretrainResult result = pretrain(ds, cfg);
    const double acc = evaluate(result.checkpoint, ds, EvalMode::classifier);
    CHECK(acc == 1.0);
}

TEST_CASE("pretrain: validation and training progress") {
    PatchDataset ds = generate_synthetic(4, 10, 16, 55);
    RunConfig cfg = small_cfg(fresh_out("pretrain").string());
    cfg.epochs = 0;
    CHECK_THROWS_AS(pretrain(ds, cfg), ConfigError);
    cfg.epochs = 4;
    cfg.method = "nonsense";
    CHECK_THROWS_AS(pretrain(ds, cfg), ConfigError);

    cfg.method = "proxynca";
    cfg.base_lr = 3e-3;
    PretrainResult result = pretrain(ds, cfg);
    CHECK(result.record.epochs.size() == 4);
    CHECK(result.record.epochs.back().mean_loss < result.record.epochs.front().mean_loss);
    CHECK(result.checkpoint.provenance.method == "proxynca");
    CHECK(result.checkpoint.find("proxies") != nullptr);
    CHECK(fs::exists(fs::path(cfg.out_dir) / "runs" / (result.record.run_id + ".json")));

    cfg.method = "classification";
    PretrainResult cls = pretrain(ds, cfg);
    CHECK(cls.record.epochs.back().mean_loss < cls.record.epochs.front().mean_loss);
    CHECK(cls.checkpoint.find("head.fc.w") != nullptr);
}

TEST_CASE("finetune: kfold cardinality, even train splits, disjointness") {
    PatchDataset ds = generate_synthetic(3, 30, 16, 88);
    RunConfig cfg = small_cfg(fresh_out("ftkfold").string());
    cfg.protocol = "kfold";
    cfg.folds = 2;
    cfg.num_seeds = 2;
    cfg.n_c = 10;
    cfg.epochs = 1;
    auto records = finetune(ds, cfg);
    CHECK(records.size() == 4);  // seeds x folds

    std::set<std::string> ids;
    for (const auto& r : records) {
        ids.insert(r.run_id);
        CHECK(r.abort_reason.empty());
        CHECK(r.final_test_accuracy >= 0.0);
        CHECK(r.final_test_accuracy <= 1.0);
        CHECK(r.n_c == 10);
        CHECK(r.epochs.size() == 1);
        // train split of a fold: n_c minus its fold share, within +/-1 flat
        const auto mx = *std::max_element(r.train_class_histogram.begin(),
                                          r.train_class_histogram.end());
        const auto mn = *std::min_element(r.train_class_histogram.begin(),
                                          r.train_class_histogram.end());
        CHECK(mx - mn <= 1);
        CHECK(fs::exists(fs::path(cfg.out_dir) / "runs" / (r.run_id + ".json")));
    }
    CHECK(ids.size() == 4);
}

TEST_CASE("finetune: holdout protocol gives exactly flat train splits") {
    PatchDataset ds = generate_synthetic(4, 20, 16, 89);
    RunConfig cfg = small_cfg(fresh_out("ftholdout").string());
    cfg.protocol = "holdout";
    cfg.holdout_test_fraction = 0.25;
    cfg.num_seeds = 3;
    cfg.n_c = 4;
    cfg.epochs = 1;
    auto records = finetune(ds, cfg);
    CHECK(records.size() == 3);
    for (const auto& r : records)
        for (auto h : r.train_class_histogram) CHECK(h == 4);
}

TEST_CASE("finetune: config errors precede training") {
    PatchDataset ds = generate_synthetic(3, 12, 16, 90);
    RunConfig cfg = small_cfg(fresh_out("fterrors").string());
    cfg.n_c = 100;  // larger than any class
    CHECK_THROWS_AS(finetune(ds, cfg), ConfigError);

    cfg.n_c = 5;
    cfg.protocol = "kfold";
    cfg.folds = 10;  // n_c < folds
    CHECK_THROWS_AS(finetune(ds, cfg), ConfigError);

    cfg.folds = 2;
    cfg.init = "/nonexistent.pnca";
    CHECK_THROWS_AS(finetune(ds, cfg), CheckpointError);

    // arch mismatch between config and checkpoint
    Backbone other(ArchDescriptor::parse("stem4:4x2,8x1"), 3);
    Head head = Head::classifier(other.feature_width(), 3, 3);
    fs::path ckpt_path = fs::temp_directory_path() / "pnca_mismatch.pnca";
    save_checkpoint(ckpt_path.string(),
                    make_checkpoint(other, head, std::nullopt, {"classification", 3, 1}));
    cfg.init = ckpt_path.string();
    CHECK_THROWS_AS(finetune(ds, cfg), ConfigError);
    fs::remove(ckpt_path);
}

TEST_CASE("finetune: checkpoint init carries the pretraining method label") {
    PatchDataset weak = generate_synthetic(3, 10, 16, 91);
    PatchDataset target = generate_synthetic(3, 12, 16, 92);
    fs::path out = fresh_out("ftlabel");

    RunConfig pre = small_cfg(out.string());
    pre.method = "proxynca";
    pre.epochs = 2;
    pre.ckpt_out = (out / "pre.pnca").string();
    pre.out_dir = "";
    pretrain(weak, pre);

    RunConfig ft = small_cfg((out / "ft").string());
    ft.protocol = "holdout";
    ft.num_seeds = 1;
    ft.n_c = 4;
    ft.init = pre.ckpt_out;
    auto records = finetune(target, ft);
    REQUIRE(records.size() == 1);
    CHECK(records[0].method == "proxynca");
}

TEST_CASE("finetune: proxynca loss mode trains and evaluates by nearest proxy") {
    PatchDataset ds = generate_synthetic(3, 12, 16, 93);
    RunConfig cfg = small_cfg(fresh_out("ftpnca").string());
    cfg.protocol = "holdout";
    cfg.num_seeds = 1;
    cfg.n_c = 6;
    cfg.epochs = 2;
    cfg.finetune_loss = "proxynca";
    auto records = finetune(ds, cfg);
    REQUIRE(records.size() == 1);
    CHECK(records[0].abort_reason.empty());
    CHECK(records[0].final_test_accuracy >= 0.0);
    CHECK(records[0].finetune_loss == "proxynca");
}

TEST_CASE("finetune: end-to-end determinism for identical config and seed") {
    PatchDataset ds = generate_synthetic(3, 12, 16, 94);
    RunConfig cfg = small_cfg(fresh_out("ftdet1").string());
    cfg.protocol = "holdout";
    cfg.num_seeds = 1;
    cfg.n_c = 4;
    cfg.epochs = 2;
    auto r1 = finetune(ds, cfg);
    cfg.out_dir = fresh_out("ftdet2").string();
    auto r2 = finetune(ds, cfg);
    REQUIRE(r1.size() == 1);
    REQUIRE(r2.size() == 1);
    CHECK(r1[0].final_test_accuracy == r2[0].final_test_accuracy);
    CHECK(r1[0].epochs[0].mean_loss == r2[0].epochs[0].mean_loss);
}

TEST_CASE("report: aggregation, formatting, and grouping rules") {
    fs::path out = fresh_out("report");
    const std::string runs = (out / "runs").string();

    auto record = [&](const std::string& id, const std::string& method, int n_c, double acc,
                      const std::string& sig) {
        RunRecord r;
        r.run_id = id;
        r.task = "finetune";
        r.method = method;
        r.finetune_loss = "xent";
        r.seed = 1;
        r.n_c = n_c;
        r.r_pct = 10.0;
        r.final_test_accuracy = acc;
        r.group_signature = sig;
        save_run_record(r, runs);
        return r;
    };

    record("a1", "random", 4, 0.90, "sig1");
    record("a2", "random", 4, 0.92, "sig1");
    record("b1", "classification", 4, 0.95, "sig1");

    ExperimentReport rep = make_report(runs);
    REQUIRE(rep.rows.size() == 2);
    const auto& rnd = rep.rows[1].method == "random" ? rep.rows[1] : rep.rows[0];
    CHECK(rnd.runs == 2);
    CHECK(rnd.mean_pct == doctest::Approx(91.00).epsilon(1e-9));
    CHECK(rnd.std_pct == doctest::Approx(1.4142135).epsilon(1e-4));
    CHECK(rep.text.find("91.00 +/- 1.41") != std::string::npos);

    const auto& cls = rep.rows[0].method == "classification" ? rep.rows[0] : rep.rows[1];
    CHECK(cls.runs == 1);
    CHECK(cls.std_pct == 0.0);  // single run
    CHECK(rep.text.find("95.00 +/- 0.00") != std::string::npos);

    // grouping keys never merge methods
    CHECK(rep.rows[0].method != rep.rows[1].method);

    write_report_files(rep, out.string());
    CHECK(fs::exists(out / "report.csv"));
    CHECK(fs::exists(out / "report.txt"));
    CHECK(fs::exists(out / "curves.svg"));

    // incompatible config inside one group
    record("a3", "random", 4, 0.91, "sig2");
    CHECK_THROWS_AS(make_report(runs), ReportError);

    CHECK_THROWS_AS(make_report((out / "empty").string()), ReportError);
}

TEST_CASE("run record json round trip") {
    RunRecord r;
    r.run_id = "x";
    r.task = "finetune";
    r.method = "random";
    r.finetune_loss = "xent";
    r.seed = 42;
    r.fold = 3;
    r.n_c = 8;
    r.r_pct = 12.5;
    r.epochs_configured = 2;
    r.epochs = {{1.5, 1e-3, 0.25}, {1.2, 9.4e-4, 0.5}};
    r.final_test_accuracy = 0.75;
    r.wall_seconds = 1.25;
    r.group_signature = "sig";
    r.train_class_histogram = {4, 4};
    r.config = {{"epochs", 2}};

    nlohmann::json j = r;
    RunRecord back = j.get<RunRecord>();
    CHECK(back.run_id == r.run_id);
    CHECK(back.epochs.size() == 2);
    CHECK(back.epochs[1].lr == r.epochs[1].lr);
    CHECK(back.final_test_accuracy == r.final_test_accuracy);
    CHECK(back.train_class_histogram == r.train_class_histogram);
}
