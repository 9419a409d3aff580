#include "icufeat/cohort.hpp"
#include "icufeat/corrext.hpp"
#include "icufeat/csv.hpp"
#include "icufeat/errors.hpp"
#include "icufeat/featuretable.hpp"
#include "icufeat/imgproc.hpp"
#include "icufeat/lungseg.hpp"
#include "icufeat/pathfeat.hpp"
#include "icufeat/report.hpp"
#include "icufeat/rng.hpp"
#include "icufeat/treelab.hpp"

#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using namespace icufeat;

namespace {

bool is_image_file(const fs::path& p) {
    const std::string ext = p.extension().string();
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".PNG";
}

struct ConfigArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::string adapter;
    std::string mode;

    report::PipelineConfig load(std::string* raw_text = nullptr) const {
        if (config_path.empty()) throw ConfigError("--config is required");
        std::string text = read_text_file(config_path);
        if (raw_text) *raw_text = text;
        auto cfg = report::PipelineConfig::load(config_path);
        if (seed) cfg.seed = *seed;
        if (!adapter.empty()) cfg.adapter = adapter;
        if (!mode.empty()) cfg.mode = mode;
        // overrides change the effective config, so the echoed copy must too
        if (raw_text && (seed || !adapter.empty() || !mode.empty())) {
            *raw_text = cfg.to_json().dump(2) + "\n";
        }
        return cfg;
    }
};

void add_config_flags(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.config_path, "pipeline config (JSON)")->required();
    cmd->add_option("--seed", args.seed, "override config seed");
    cmd->add_option("--adapter", args.adapter, "override adapter: stub|real")
        ->check(CLI::IsMember({"stub", "real"}));
    cmd->add_option("--mode", args.mode, "override feature mode: mid|last|gradient")
        ->check(CLI::IsMember({"mid", "last", "gradient"}));
}

int run_config_pipeline(const ConfigArgs& args, bool resume, const std::string& stop_after) {
    std::string raw;
    auto cfg = args.load(&raw);
    report::RunOptions opts;
    opts.resume = resume;
    opts.stop_after = stop_after;
    opts.config_text = raw;
    std::string out = report::run_pipeline(cfg, opts);
    std::cout << "artifacts: " << out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"chest X-ray ICU-severity feature pipeline"};
    app.require_subcommand(1);

    // ingest -----------------------------------------------------------------
    std::string in_manifest, in_images, in_out;
    int in_mult = 10;
    uint64_t in_seed = 7;
    cohort::ManifestColumns in_cols;
    auto* c_ingest = app.add_subcommand("ingest", "select the ICU cohort and augment it");
    c_ingest->add_option("--manifest", in_manifest)->required();
    c_ingest->add_option("--images-dir", in_images);
    c_ingest->add_option("--out", in_out)->required();
    c_ingest->add_option("--multiplier", in_mult);
    c_ingest->add_option("--seed", in_seed);
    c_ingest->add_option("--col-image-id", in_cols.image_id);
    c_ingest->add_option("--col-patient-id", in_cols.patient_id);
    c_ingest->add_option("--col-filename", in_cols.filename);
    c_ingest->add_option("--col-went-icu", in_cols.went_icu);
    c_ingest->add_option("--col-in-icu", in_cols.in_icu);

    // segment-train ----------------------------------------------------------
    std::vector<std::string> st_images, st_masks;
    std::string st_out, st_history;
    lungseg::SegmenterConfig st_cfg;
    auto* c_st = app.add_subcommand("segment-train", "train the lung-field segmenter");
    c_st->add_option("--images", st_images, "image dir (repeatable, paired with --masks)")
        ->required();
    c_st->add_option("--masks", st_masks)->required();
    c_st->add_option("--out", st_out, "checkpoint path")->required();
    c_st->add_option("--size", st_cfg.input_rows, "square input size");
    c_st->add_option("--depth", st_cfg.depth);
    c_st->add_option("--base-channels", st_cfg.base_channels);
    c_st->add_option("--epochs", st_cfg.epochs);
    c_st->add_option("--batch", st_cfg.batch);
    c_st->add_option("--lr", st_cfg.learning_rate);
    c_st->add_option("--seed", st_cfg.seed);
    c_st->add_option("--loss", st_cfg.loss)->check(CLI::IsMember({"dice", "bce+dice"}));
    c_st->add_option("--history", st_history, "write per-epoch stats CSV here");

    // segment ----------------------------------------------------------------
    std::string sg_weights, sg_images, sg_out, sg_bench;
    double sg_threshold = 0.5;
    bool sg_no_cleanup = false;
    std::string sg_gold;
    auto* c_sg = app.add_subcommand("segment", "run the segmenter over a directory");
    c_sg->add_option("--weights", sg_weights)->required();
    c_sg->add_option("--images-dir", sg_images)->required();
    c_sg->add_option("--out", sg_out, "mask output dir")->required();
    c_sg->add_option("--threshold", sg_threshold);
    c_sg->add_flag("--no-cleanup", sg_no_cleanup);
    c_sg->add_option("--gold-masks", sg_gold, "score against gold masks (dice benchmark)");
    c_sg->add_option("--benchmark-csv", sg_bench, "where to write the dice report");

    // preprocess ---------------------------------------------------------------
    std::string pp_images, pp_masks, pp_out;
    double pp_clip = 2.0, pp_margin = 0.03;
    std::vector<int> pp_grid = {8, 8};
    bool pp_no_zero = false;
    std::vector<std::string> pp_order = {"standard", "adaptive"};
    auto* c_pp = app.add_subcommand("preprocess", "equalize (and crop, when masks are given)");
    c_pp->add_option("--images-dir", pp_images)->required();
    c_pp->add_option("--masks-dir", pp_masks, "cleaned masks; enables lung-field cropping");
    c_pp->add_option("--out", pp_out)->required();
    c_pp->add_option("--clip", pp_clip);
    c_pp->add_option("--grid", pp_grid)->expected(2);
    c_pp->add_option("--margin", pp_margin);
    c_pp->add_flag("--no-zero-outside", pp_no_zero);
    c_pp->add_option("--order", pp_order, "equalization steps in order");

    // extract ------------------------------------------------------------------
    std::string ex_index, ex_dir, ex_out_csv, ex_out_schema, ex_mode = "last",
                ex_adapter = "stub", ex_weights;
    uint64_t ex_stub_seed = 20200906;
    auto* c_ex = app.add_subcommand("extract", "build a feature table from processed images");
    c_ex->add_option("--index", ex_index, "cohort index csv (image_id,group_id,class_label,...)")
        ->required();
    c_ex->add_option("--images-dir", ex_dir, "directory of processed images named <id>.png")
        ->required();
    c_ex->add_option("--out", ex_out_csv)->required();
    c_ex->add_option("--schema", ex_out_schema, "defaults to <out>.schema.json");
    c_ex->add_option("--mode", ex_mode)->check(CLI::IsMember({"mid", "last", "gradient"}));
    c_ex->add_option("--adapter", ex_adapter)->check(CLI::IsMember({"stub", "real"}));
    c_ex->add_option("--adapter-weights", ex_weights);
    c_ex->add_option("--stub-seed", ex_stub_seed);

    // fit ----------------------------------------------------------------------
    std::string ft_csv, ft_schema, ft_out;
    int ft_min_leaf = 20, ft_max_depth = 4;
    auto* c_ft = app.add_subcommand("fit", "fit the pruned decision tree");
    c_ft->add_option("--features", ft_csv)->required();
    c_ft->add_option("--schema", ft_schema);
    c_ft->add_option("--out-dir", ft_out)->required();
    c_ft->add_option("--min-leaf", ft_min_leaf);
    c_ft->add_option("--max-depth", ft_max_depth);

    // crossval -------------------------------------------------------------------
    std::string cv_csv, cv_schema, cv_out;
    int cv_min_leaf = 20, cv_max_depth = 4;
    auto* c_cv = app.add_subcommand("crossval", "group-level leave-two-out cross-validation");
    c_cv->add_option("--features", cv_csv)->required();
    c_cv->add_option("--schema", cv_schema);
    c_cv->add_option("--out-dir", cv_out)->required();
    c_cv->add_option("--min-leaf", cv_min_leaf);
    c_cv->add_option("--max-depth", cv_max_depth);

    // config-driven stages --------------------------------------------------------
    ConfigArgs co_args, su_args, pl_args;
    auto* c_co = app.add_subcommand("correlate", "run the pipeline through the correlate stage");
    add_config_flags(c_co, co_args);
    auto* c_su = app.add_subcommand("surface", "run the pipeline through the surface stage");
    add_config_flags(c_su, su_args);

    bool pl_resume = false;
    std::string pl_stop;
    auto* c_pl = app.add_subcommand("pipeline", "run every stage from a config file");
    add_config_flags(c_pl, pl_args);
    c_pl->add_flag("--resume", pl_resume, "reuse checkpoints from a previous run");
    c_pl->add_option("--stop-after", pl_stop, "stop after the named stage");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*c_ingest) {
            auto records = cohort::parse_manifest(in_manifest, in_cols, in_images);
            auto selected = cohort::select_icu_cohort(records);
            fs::create_directories(fs::path(in_out) / "images");
            std::string index =
                "image_id,patient_id,group_id,class_label,augmented,augmentation_of,file\n";
            Rng base(in_seed);
            long total = 0;
            for (const auto& src : selected) {
                const uint64_t rec_seed = base.fork(fnv1a64(src.image_id)).next_u64();
                for (const auto& rec : cohort::augment(src, in_mult, rec_seed)) {
                    std::string fid = rec.image_id;
                    for (char& ch : fid)
                        if (ch == '/' || ch == '\\') ch = '_';
                    fid += ".png";
                    save_image_png(rec.pixels, (fs::path(in_out) / "images" / fid).string());
                    nlohmann::json lin;
                    lin["image_id"] = rec.image_id;
                    lin["group_id"] = rec.group_id;
                    lin["class_label"] = rec.class_label;
                    lin["augmentation_of"] = rec.augmentation_of;
                    nlohmann::json tl = nlohmann::json::object();
                    for (const auto& [k, v] : rec.transform_log) tl[k] = v;
                    lin["transform_log"] = tl;
                    write_text_file((fs::path(in_out) / "images" / (fid + ".json")).string(),
                                    lin.dump(2) + "\n");
                    index += csv_escape(rec.image_id) + "," + csv_escape(rec.patient_id) + "," +
                             csv_escape(rec.group_id) + "," + std::to_string(rec.class_label) +
                             "," + (rec.augmented() ? "1" : "0") + "," +
                             csv_escape(rec.augmentation_of) + ",images/" + fid + "\n";
                    ++total;
                }
            }
            write_text_file((fs::path(in_out) / "index.csv").string(), index);
            std::cout << "wrote " << total << " images to " << in_out << "\n";
        } else if (*c_st) {
            if (st_images.size() != st_masks.size()) {
                throw ConfigError("--images and --masks must be paired");
            }
            st_cfg.input_cols = st_cfg.input_rows;
            std::vector<lungseg::TrainPair> pairs;
            for (size_t i = 0; i < st_images.size(); ++i) {
                auto part = lungseg::load_pair_dirs(st_images[i], st_masks[i],
                                                    "corpus" + std::to_string(i));
                pairs.insert(pairs.end(), std::make_move_iterator(part.begin()),
                             std::make_move_iterator(part.end()));
            }
            auto result = lungseg::train_segmenter(pairs, st_cfg);
            lungseg::save_checkpoint(result.model, st_out, result.best_epoch,
                                     result.best_val_dice);
            if (!st_history.empty()) {
                std::string csv = "epoch,train_loss,val_dice\n";
                for (size_t e = 0; e < result.history.size(); ++e) {
                    csv += std::to_string(e) + "," + format_double(result.history[e].train_loss) +
                           "," + format_double(result.history[e].val_dice) + "\n";
                }
                write_text_file(st_history, csv);
            }
            std::cout << "best val dice " << result.best_val_dice << " at epoch "
                      << result.best_epoch << "; checkpoint: " << st_out << "\n";
        } else if (*c_sg) {
            auto model = lungseg::load_checkpoint(sg_weights);
            fs::create_directories(sg_out);
            std::vector<lungseg::TrainPair> bench;
            for (const auto& entry : fs::directory_iterator(sg_images)) {
                if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
                Image img = load_image(entry.path().string());
                Image prob = lungseg::segment(model, img);
                imgproc::LungMask mask;
                if (sg_no_cleanup) {
                    mask = imgproc::binarize(prob, sg_threshold);
                    mask.cleanup_applied = false;
                } else {
                    mask = imgproc::cleanup_mask(prob, sg_threshold);
                }
                imgproc::save_mask_png(
                    mask, (fs::path(sg_out) / entry.path().filename()).string());
                if (!sg_gold.empty()) {
                    lungseg::TrainPair p;
                    p.name = entry.path().filename().string();
                    p.image = std::move(img);
                    p.mask = imgproc::binarize(
                        load_image((fs::path(sg_gold) / p.name).string()), 0.5);
                    bench.push_back(std::move(p));
                }
            }
            if (!sg_gold.empty()) {
                auto report = lungseg::benchmark_dice(model, bench, sg_threshold, !sg_no_cleanup);
                std::cout << "mean dice " << report.mean << " over " << report.rows.size()
                          << " images\n";
                if (!sg_bench.empty()) write_text_file(sg_bench, lungseg::benchmark_csv(report));
            }
        } else if (*c_pp) {
            fs::create_directories(pp_out);
            for (const auto& entry : fs::directory_iterator(pp_images)) {
                if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
                Image img = load_image(entry.path().string());
                Image cur = img;
                for (const auto& step : pp_order) {
                    if (step == "standard") {
                        cur = imgproc::equalize_standard(cur);
                    } else if (step == "adaptive") {
                        cur = imgproc::equalize_adaptive(cur, pp_clip, {pp_grid[0], pp_grid[1]});
                    } else {
                        throw ConfigError("unknown equalization step '" + step + "'");
                    }
                }
                if (!pp_masks.empty()) {
                    auto mask = imgproc::load_mask_png(
                        (fs::path(pp_masks) / entry.path().filename()).string());
                    auto res = imgproc::crop_to_lung(cur, mask, pp_margin, !pp_no_zero);
                    cur = res.image;
                }
                save_image_png(cur, (fs::path(pp_out) / entry.path().filename()).string());
            }
        } else if (*c_ex) {
            report::PipelineConfig acfg;
            acfg.adapter = ex_adapter;
            acfg.adapter_weights = ex_weights;
            acfg.stub_seed = ex_stub_seed;
            auto adapter = report::make_adapter(acfg);
            auto [arows, acols] = adapter->input_size();

            CsvTable idx = read_csv(ex_index);
            const int c_id = idx.column("image_id"), c_gid = idx.column("group_id"),
                      c_cls = idx.column("class_label"), c_aug = idx.column("augmented"),
                      c_of = idx.column("augmentation_of");
            if (c_id < 0 || c_gid < 0 || c_cls < 0) {
                throw SchemaError("extract index needs image_id, group_id, class_label columns");
            }
            std::vector<cohort::ImageRecord> records;
            for (const auto& r : idx.rows) {
                cohort::ImageRecord rec;
                rec.image_id = r[c_id];
                rec.group_id = r[c_gid];
                rec.class_label = std::stoi(r[c_cls]);
                if (c_of >= 0) rec.augmentation_of = r[c_of];
                if (c_aug >= 0 && r[c_aug] == "1" && rec.augmentation_of.empty()) {
                    rec.augmentation_of = "?";
                }
                std::string fid = rec.image_id;
                for (char& ch : fid)
                    if (ch == '/' || ch == '\\') ch = '_';
                rec.pixels = resize_bilinear(
                    load_image((fs::path(ex_dir) / (fid + ".png")).string()), arows, acols);
                records.push_back(std::move(rec));
            }
            std::vector<std::string> skipped;
            auto table = pathfeat::build_feature_table(records, *adapter, ex_mode, &skipped);
            const std::string schema =
                ex_out_schema.empty() ? ex_out_csv + ".schema.json" : ex_out_schema;
            write_feature_table(table, ex_out_csv, schema);
            for (const auto& s : skipped) std::cerr << "skipped " << s << "\n";
            std::cout << "wrote " << table.rows.size() << " rows x " << table.columns.size()
                      << " features\n";
        } else if (*c_ft) {
            const std::string schema = ft_schema.empty() ? ft_csv + ".schema.json" : ft_schema;
            auto table = read_feature_table(ft_csv, schema).without_flagged();
            auto model = treelab::fit_tree(table, ft_min_leaf, ft_max_depth);
            fs::create_directories(ft_out);
            write_text_file((fs::path(ft_out) / "tree.json").string(),
                            treelab::tree_to_json(model).dump(2) + "\n");
            write_text_file((fs::path(ft_out) / "tree.txt").string(),
                            report::render_tree_text(model));
            write_text_file((fs::path(ft_out) / "tree.dot").string(),
                            report::render_tree_dot(model));
            std::cout << report::render_tree_text(model);
        } else if (*c_cv) {
            const std::string schema = cv_schema.empty() ? cv_csv + ".schema.json" : cv_schema;
            auto table = read_feature_table(cv_csv, schema);
            auto eval = treelab::leave_two_out_cv(table, cv_min_leaf, cv_max_depth);
            fs::create_directories(cv_out);
            write_text_file((fs::path(cv_out) / "eval.json").string(),
                            treelab::eval_to_json(eval).dump(2) + "\n");
            std::cout << "cross-val accuracy " << eval.accuracy << ", f1 " << eval.f1 << " over "
                      << eval.per_fold.size() << " folds\n";
        } else if (*c_co) {
            return run_config_pipeline(co_args, true, "correlate");
        } else if (*c_su) {
            return run_config_pipeline(su_args, true, "surface");
        } else if (*c_pl) {
            return run_config_pipeline(pl_args, pl_resume, pl_stop);
        }
    } catch (const PipelineError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
