// pnca: pretrain on weakly labeled patches (cross-entropy or proxy-based
// metric learning), fine-tune under simulated label scarcity, evaluate, and
// aggregate mean +/- std accuracy reports.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>

#include "pnca/errors.hpp"
#include "pnca/harness.hpp"

namespace {

void add_model_options(CLI::App* cmd, pnca::RunConfig& cfg) {
    cmd->add_option("--arch", cfg.arch, "arch descriptor, e.g. stem8:8x1,16x1s2");
    cmd->add_option("--embed-dim", cfg.embed_dim, "embedding dimension D");
}

void add_train_options(CLI::App* cmd, pnca::RunConfig& cfg) {
    cmd->add_option("--epochs", cfg.epochs, "training epochs");
    cmd->add_option("--batch", cfg.batch_size, "batch size");
    cmd->add_option("--lr", cfg.base_lr, "initial learning rate");
    cmd->add_option("--schedule", cfg.schedule, "exponential | step_drop | constant");
    cmd->add_option("--seed", cfg.seed, "base random seed");
    cmd->add_flag("--per-example-updates", cfg.per_example_updates,
                  "one gradient step per example instead of per batch");
    cmd->add_option("--proxy-lr-mult", cfg.proxy_lr_mult, "proxy learning-rate multiplier");
    cmd->add_flag("--freeze-backbone", cfg.freeze_backbone, "train only the head");
    cmd->add_flag("--squared-distance", cfg.squared_distance,
                  "squared Euclidean distances in the proxy loss");
    cmd->add_option("--threads", cfg.threads, "worker threads (0 = hardware)");
}

void add_augment_options(CLI::App* cmd, pnca::RunConfig& cfg) {
    cmd->add_option("--pad-fraction", cfg.pad_fraction, "reflection padding fraction per side");
    cmd->add_option("--crop", cfg.crop_size, "random crop size (0 = none)");
    cmd->add_option("--jitter", cfg.jitter, "color jitter threshold");
    cmd->add_option("--rotation", cfg.rotation, "none | quarter | continuous");
    cmd->add_option("--flip-prob", cfg.flip_prob, "horizontal flip probability");
    cmd->add_option("--resize", cfg.resize_target, "bilinear resize target (0 = none)");
}

int dispatch(int argc, char** argv) {
    CLI::App app{"deep-metric transfer toolkit for patch classification"};
    app.require_subcommand(1);
    auto add_config_option = [](CLI::App* cmd) {
        cmd->set_config("--config", "",
                        "flat key=value config file; CLI flags take precedence");
    };

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic texture dataset folder");
    add_config_option(synth);
    std::string synth_out = "synthetic";
    int synth_classes = 24, synth_per_class = 200, synth_size = 32;
    std::uint64_t synth_seed = 7001;
    synth->add_option("--out", synth_out, "output folder")->required();
    synth->add_option("--classes", synth_classes, "number of classes");
    synth->add_option("--per-class", synth_per_class, "images per class");
    synth->add_option("--size", synth_size, "image side in pixels (>= 16)");
    synth->add_option("--seed", synth_seed, "texture family seed");

    // stats
    auto* stats = app.add_subcommand("stats", "per-channel mean/std of a dataset folder");
    add_config_option(stats);
    std::string stats_dir;
    stats->add_option("--data", stats_dir, "dataset folder")->required();

    // pretrain
    pnca::RunConfig pre_cfg;
    pre_cfg.epochs = 100;
    auto* pre = app.add_subcommand("pretrain", "train on the weakly labeled dataset");
    add_config_option(pre);
    pre->add_option("--data", pre_cfg.data_dir, "dataset folder")->required();
    pre->add_option("--method", pre_cfg.method, "classification | proxynca");
    pre->add_option("--out", pre_cfg.ckpt_out, "checkpoint output path")->required();
    pre->add_option("--out-dir", pre_cfg.out_dir, "run record directory");
    add_model_options(pre, pre_cfg);
    add_train_options(pre, pre_cfg);
    add_augment_options(pre, pre_cfg);

    // finetune
    pnca::RunConfig ft_cfg;
    ft_cfg.epochs = 200;
    auto* ft = app.add_subcommand("finetune", "fine-tune under simulated label scarcity");
    add_config_option(ft);
    ft->add_option("--data", ft_cfg.data_dir, "target dataset folder")->required();
    ft->add_option("--init", ft_cfg.init, "'random' or a checkpoint path");
    ft->add_option("--finetune-loss", ft_cfg.finetune_loss, "xent | proxynca");
    ft->add_option("--protocol", ft_cfg.protocol, "kfold | holdout");
    ft->add_option("--folds", ft_cfg.folds, "cross-validation folds");
    ft->add_option("--test-fraction", ft_cfg.holdout_test_fraction, "holdout test fraction");
    ft->add_option("--split-seed", ft_cfg.split_seed, "holdout split seed");
    ft->add_option("--n-c", ft_cfg.n_c, "labeled examples per class (0 = all)");
    ft->add_option("--r-pct", ft_cfg.r_pct, "percent of per-class data (overrides --n-c)");
    ft->add_option("--seeds", ft_cfg.num_seeds, "number of repeated trials");
    ft->add_option("--out-dir", ft_cfg.out_dir, "output directory for run records");
    add_model_options(ft, ft_cfg);
    add_train_options(ft, ft_cfg);
    add_augment_options(ft, ft_cfg);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset folder");
    add_config_option(ev);
    std::string ev_ckpt, ev_data, ev_mode = "classifier";
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data", ev_data, "dataset folder")->required();
    ev->add_option("--mode", ev_mode, "classifier | nearest_proxy");

    // report
    auto* rep = app.add_subcommand("report", "aggregate run records into tables and curves");
    add_config_option(rep);
    std::string rep_runs, rep_out;
    rep->add_option("--runs", rep_runs, "directory of run-record JSON files")->required();
    rep->add_option("--out-dir", rep_out, "where to write report.csv/report.txt/curves.svg");

    // reproduce
    auto* repro = app.add_subcommand(
        "reproduce", "synthesize -> pretrain x2 -> finetune x3 inits -> report, end to end");
    add_config_option(repro);
    std::string repro_out = "reproduce_out";
    int repro_threads = 0;
    repro->add_option("--out-dir", repro_out, "output directory");
    repro->add_option("--threads", repro_threads, "worker threads (0 = hardware)");

    CLI11_PARSE(app, argc, argv);

    if (synth->parsed()) {
        pnca::PatchDataset ds =
            pnca::generate_synthetic(synth_classes, synth_per_class, synth_size, synth_seed);
        pnca::write_dataset_folder(ds, synth_out);
        std::cout << "wrote " << ds.items.size() << " images in " << synth_classes
                  << " classes to " << synth_out << "\n";
        return 0;
    }
    if (stats->parsed()) {
        pnca::PatchDataset ds = pnca::load_folder(stats_dir);
        pnca::ChannelStats st = pnca::compute_channel_stats(ds);
        std::printf("mean %.6f %.6f %.6f\n", st.mean[0], st.mean[1], st.mean[2]);
        std::printf("std  %.6f %.6f %.6f\n", st.stddev[0], st.stddev[1], st.stddev[2]);
        return 0;
    }
    if (pre->parsed()) {
        pnca::PatchDataset ds = pnca::load_folder(pre_cfg.data_dir);
        pnca::PretrainResult result = pnca::pretrain(ds, pre_cfg);
        const auto& last = result.record.epochs.back();
        std::cout << "pretrained " << pre_cfg.method << " for " << pre_cfg.epochs
                  << " epochs; final loss " << last.mean_loss << ", train acc "
                  << last.train_accuracy << "\nwrote " << pre_cfg.ckpt_out << "\n";
        return 0;
    }
    if (ft->parsed()) {
        pnca::PatchDataset ds = pnca::load_folder(ft_cfg.data_dir);
        std::vector<pnca::RunRecord> records = pnca::finetune(ds, ft_cfg);
        int aborted = 0;
        double mean = 0;
        int ok = 0;
        for (const auto& r : records) {
            if (!r.abort_reason.empty()) {
                ++aborted;
                continue;
            }
            mean += r.final_test_accuracy;
            ++ok;
        }
        if (ok > 0)
            std::cout << ok << " runs, mean accuracy " << 100.0 * mean / ok << "%\n";
        std::cout << "records under " << ft_cfg.out_dir << "/runs\n";
        if (aborted > 0) {
            std::cerr << aborted << " run(s) aborted\n";
            return 3;
        }
        return 0;
    }
    if (ev->parsed()) {
        pnca::Checkpoint ckpt = pnca::load_checkpoint(ev_ckpt);
        pnca::PatchDataset ds = pnca::load_folder(ev_data);
        const double acc = pnca::evaluate(ckpt, ds, pnca::parse_eval_mode(ev_mode));
        std::printf("accuracy %.4f\n", acc);
        return 0;
    }
    if (rep->parsed()) {
        pnca::ExperimentReport report = pnca::make_report(rep_runs);
        std::cout << report.text;
        if (!rep_out.empty()) {
            pnca::write_report_files(report, rep_out);
            std::cout << "wrote report.csv, report.txt, curves.svg to " << rep_out << "\n";
        }
        return 0;
    }
    if (repro->parsed()) {
        pnca::TrendSummary summary = pnca::reproduce_trend(repro_out, repro_threads);
        std::cout << "trend over n_c " << "{4,8,16}" << " (mean accuracy %):\n";
        for (const auto& [method, points] : summary.by_method) {
            std::cout << "  " << method << ":";
            for (const auto& [nc, p] : points) std::printf(" %d->%.2f", nc, p.mean_pct);
            std::cout << "\n";
        }
        std::printf("wall time %.1f s; outputs under %s\n", summary.wall_seconds,
                    summary.out_dir.c_str());
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const pnca::OptimError& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
