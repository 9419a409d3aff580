#include "icufeat/report.hpp"

#include "icufeat/csv.hpp"
#include "icufeat/errors.hpp"
#include "icufeat/lungseg.hpp"
#include "icufeat/rng.hpp"
#include "icufeat/sha256.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace icufeat::report {

// ---------------------------------------------------------------------------
// Config

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
    PipelineConfig c;
    if (j.contains("paths")) {
        const auto& p = j["paths"];
        c.cohort_manifest = p.value("cohort_manifest", "");
        c.images_dir = p.value("images_dir", "");
        c.external_manifest = p.value("external_manifest", "");
        c.external_images_dir = p.value("external_images_dir", "");
        c.weights = p.value("weights", "");
        c.adapter_weights = p.value("adapter_weights", "");
        c.output_dir = p.value("output_dir", "");
        c.lexicon_file = p.value("lexicon", "");
    }
    if (j.contains("columns")) {
        const auto& p = j["columns"];
        c.cohort_columns.image_id = p.value("image_id", "");
        c.cohort_columns.patient_id = p.value("patient_id", c.cohort_columns.patient_id);
        c.cohort_columns.filename = p.value("filename", c.cohort_columns.filename);
        c.cohort_columns.went_icu = p.value("went_icu", c.cohort_columns.went_icu);
        c.cohort_columns.in_icu = p.value("in_icu", c.cohort_columns.in_icu);
        c.cohort_columns.view = p.value("view", c.cohort_columns.view);
    }
    if (j.contains("external_columns")) {
        const auto& p = j["external_columns"];
        c.external_columns.image_id = p.value("image_id", "");
        c.external_columns.filename = p.value("filename", c.external_columns.filename);
        c.external_columns.labels = p.value("labels", c.external_columns.labels);
    }
    if (j.contains("preprocessing")) {
        const auto& p = j["preprocessing"];
        c.equalize_order = p.value("equalize_order", c.equalize_order);
        c.clahe_clip = p.value("clahe_clip", c.clahe_clip);
        if (p.contains("clahe_grid")) {
            c.clahe_grid = {p["clahe_grid"][0].get<int>(), p["clahe_grid"][1].get<int>()};
        }
        c.mask_threshold = p.value("mask_threshold", c.mask_threshold);
        c.cleanup.closing_radius_at_256 =
            p.value("closing_radius", c.cleanup.closing_radius_at_256);
        c.cleanup.min_area_frac = p.value("min_area_frac", c.cleanup.min_area_frac);
        c.cleanup.max_components = p.value("max_components", c.cleanup.max_components);
        c.crop_margin = p.value("crop_margin", c.crop_margin);
        c.zero_outside = p.value("zero_outside", c.zero_outside);
    }
    if (j.contains("augmentation")) {
        const auto& p = j["augmentation"];
        c.augment_multiplier = p.value("multiplier", c.augment_multiplier);
        c.augment.max_rotate_deg = p.value("rotate_deg", c.augment.max_rotate_deg);
        c.augment.max_translate_frac = p.value("translate_frac", c.augment.max_translate_frac);
        c.augment.max_shear_deg = p.value("shear_deg", c.augment.max_shear_deg);
        c.augment.jitter_frac = p.value("jitter_frac", c.augment.jitter_frac);
        c.augment.jitter_grid = p.value("jitter_grid", c.augment.jitter_grid);
    }
    if (j.contains("tree")) {
        c.min_leaf = j["tree"].value("min_leaf", c.min_leaf);
        c.max_depth = j["tree"].value("max_depth", c.max_depth);
    }
    if (j.contains("features")) {
        const auto& p = j["features"];
        c.mode = p.value("mode", c.mode);
        c.adapter = p.value("adapter", c.adapter);
        c.stub_seed = p.value("stub_seed", c.stub_seed);
        c.onnx_input_side = p.value("onnx_input_side", c.onnx_input_side);
        c.onnx_mid_layer = p.value("onnx_mid_layer", c.onnx_mid_layer);
        c.onnx_last_layer = p.value("onnx_last_layer", c.onnx_last_layer);
    }
    if (j.contains("correlate")) {
        const auto& p = j["correlate"];
        c.min_count = p.value("min_count", c.min_count);
        c.ratio_hi = p.value("ratio_hi", c.ratio_hi);
        c.ratio_lo = p.value("ratio_lo", c.ratio_lo);
        c.null_trials = p.value("null_trials", c.null_trials);
    }
    if (j.contains("surface")) {
        c.surface_node = j["surface"].value("node", c.surface_node);
        c.surface_grid = j["surface"].value("grid", c.surface_grid);
    }
    c.seed = j.value("seed", c.seed);
    return c;
}

nlohmann::json PipelineConfig::to_json() const {
    nlohmann::json j;
    j["paths"] = {{"cohort_manifest", cohort_manifest},
                  {"images_dir", images_dir},
                  {"external_manifest", external_manifest},
                  {"external_images_dir", external_images_dir},
                  {"weights", weights},
                  {"adapter_weights", adapter_weights},
                  {"output_dir", output_dir},
                  {"lexicon", lexicon_file}};
    j["columns"] = {{"image_id", cohort_columns.image_id},
                    {"patient_id", cohort_columns.patient_id},
                    {"filename", cohort_columns.filename},
                    {"went_icu", cohort_columns.went_icu},
                    {"in_icu", cohort_columns.in_icu},
                    {"view", cohort_columns.view}};
    j["external_columns"] = {{"image_id", external_columns.image_id},
                             {"filename", external_columns.filename},
                             {"labels", external_columns.labels}};
    j["preprocessing"] = {{"equalize_order", equalize_order},
                          {"clahe_clip", clahe_clip},
                          {"clahe_grid", {clahe_grid.first, clahe_grid.second}},
                          {"mask_threshold", mask_threshold},
                          {"closing_radius", cleanup.closing_radius_at_256},
                          {"min_area_frac", cleanup.min_area_frac},
                          {"max_components", cleanup.max_components},
                          {"crop_margin", crop_margin},
                          {"zero_outside", zero_outside}};
    j["augmentation"] = {{"multiplier", augment_multiplier},
                         {"rotate_deg", augment.max_rotate_deg},
                         {"translate_frac", augment.max_translate_frac},
                         {"shear_deg", augment.max_shear_deg},
                         {"jitter_frac", augment.jitter_frac},
                         {"jitter_grid", augment.jitter_grid}};
    j["tree"] = {{"min_leaf", min_leaf}, {"max_depth", max_depth}};
    j["features"] = {{"mode", mode},
                     {"adapter", adapter},
                     {"stub_seed", stub_seed},
                     {"onnx_input_side", onnx_input_side},
                     {"onnx_mid_layer", onnx_mid_layer},
                     {"onnx_last_layer", onnx_last_layer}};
    j["correlate"] = {{"min_count", min_count},
                      {"ratio_hi", ratio_hi},
                      {"ratio_lo", ratio_lo},
                      {"null_trials", null_trials}};
    j["surface"] = {{"node", surface_node}, {"grid", surface_grid}};
    j["seed"] = seed;
    return j;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    return from_json(j);
}

const std::vector<std::string>& pipeline_stages() {
    static const std::vector<std::string> stages = {"ingest", "equalize", "segment",
                                                    "crop",   "extract",  "fit",
                                                    "crossval", "correlate", "surface"};
    return stages;
}

std::unique_ptr<pathfeat::ExtractorAdapter> make_adapter(const PipelineConfig& cfg) {
    if (cfg.adapter == "stub") {
        return std::make_unique<pathfeat::StubAdapter>(cfg.stub_seed);
    }
    if (cfg.adapter == "real") {
        if (cfg.adapter_weights.empty()) {
            throw ConfigError("adapter 'real' needs paths.adapter_weights (ONNX model)");
        }
        return std::make_unique<pathfeat::OnnxAdapter>(cfg.adapter_weights, cfg.onnx_input_side,
                                                       cfg.onnx_mid_layer, cfg.onnx_last_layer);
    }
    throw ConfigError("unknown adapter '" + cfg.adapter + "' (expected stub or real)");
}

// ---------------------------------------------------------------------------
// Tree rendering

namespace {

std::string leaf_class(const treelab::TreeNode& n) {
    return n.histogram[1] > n.histogram[0] ? "1" : "0";
}

std::string node_label(const treelab::TreeModel& m, int id) {
    const auto& n = m.nodes[id];
    char gini[32];
    std::snprintf(gini, sizeof(gini), "%.3f", n.impurity);
    std::string s = "[" + std::to_string(id) + "] ";
    if (n.is_leaf()) {
        s += "leaf class=" + leaf_class(n);
    } else {
        s += m.feature_names[n.feature] + " <= " + format_double(n.threshold);
    }
    s += "  samples=" + std::to_string(n.samples) + " gini=" + gini + " hist=[" +
         std::to_string(n.histogram[0]) + "," + std::to_string(n.histogram[1]) + "]";
    return s;
}

void render_text(const treelab::TreeModel& m, int id, const std::string& prefix, bool last,
                 bool root, std::string& out) {
    out += prefix;
    if (!root) out += last ? "`-- " : "|-- ";
    out += node_label(m, id) + "\n";
    const auto& n = m.nodes[id];
    if (n.is_leaf()) return;
    const std::string child_prefix = root ? prefix : prefix + (last ? "    " : "|   ");
    render_text(m, n.left, child_prefix, false, false, out);
    render_text(m, n.right, child_prefix, true, false, out);
}

} // namespace

std::string render_tree_text(const treelab::TreeModel& model) {
    std::string out;
    render_text(model, 0, "", true, true, out);
    return out;
}

std::string render_tree_dot(const treelab::TreeModel& model) {
    std::string out = "digraph tree {\n  node [shape=box];\n";
    for (size_t i = 0; i < model.nodes.size(); ++i) {
        const auto& n = model.nodes[i];
        std::string label;
        if (n.is_leaf()) {
            label = "class " + leaf_class(n);
        } else {
            label = model.feature_names[n.feature] + " <= " + format_double(n.threshold);
        }
        label += "\\nsamples=" + std::to_string(n.samples) + "\\nhist=[" +
                 std::to_string(n.histogram[0]) + "," + std::to_string(n.histogram[1]) + "]";
        std::string escaped;
        for (char c : label) {
            if (c == '"') escaped += '\\';
            escaped += c;
        }
        out += "  n" + std::to_string(i) + " [label=\"" + escaped + "\"];\n";
    }
    for (size_t i = 0; i < model.nodes.size(); ++i) {
        const auto& n = model.nodes[i];
        if (n.is_leaf()) continue;
        out += "  n" + std::to_string(i) + " -> n" + std::to_string(n.left) +
               " [label=\"yes\"];\n";
        out += "  n" + std::to_string(i) + " -> n" + std::to_string(n.right) +
               " [label=\"no\"];\n";
    }
    out += "}\n";
    return out;
}

// ---------------------------------------------------------------------------
// Gradient surfaces

SurfaceResult average_gradient_surface(const std::vector<pathfeat::GradientMap>& maps, int grid) {
    if (maps.empty()) throw ParamError("average_gradient_surface: no maps for this class");
    if (grid < 1) throw ParamError("average_gradient_surface: grid must be >= 1");
    for (const auto& m : maps) {
        if (m.node_label != maps.front().node_label) {
            throw DataError("average_gradient_surface: maps mix node labels '" +
                            maps.front().node_label + "' and '" + m.node_label + "'");
        }
    }

    SurfaceResult out;
    out.grid = grid;
    out.map_count = static_cast<long>(maps.size());
    out.matrix.assign(static_cast<size_t>(grid) * grid, 0.0);
    for (const auto& m : maps) {
        ImageD r = resize_bilinear(m.energy, grid, grid);
        double sum = 0;
        for (double v : r.data) sum += v;
        if (sum <= 0) continue;
        const double inv = 1.0 / sum;
        for (size_t i = 0; i < r.data.size(); ++i) {
            out.matrix[i] += r.data[i] * inv;
        }
    }
    const double inv_n = 1.0 / static_cast<double>(maps.size());
    for (double& v : out.matrix) v *= inv_n;
    return out;
}

std::string surface_csv(const SurfaceResult& surface) {
    std::string out;
    for (int r = 0; r < surface.grid; ++r) {
        for (int c = 0; c < surface.grid; ++c) {
            if (c) out += ",";
            out += format_double(surface.at(r, c));
        }
        out += "\n";
    }
    return out;
}

void save_surface_png(const SurfaceResult& surface, const std::string& path) {
    double peak = 0;
    for (double v : surface.matrix) peak = std::max(peak, v);
    Image img(surface.grid, surface.grid);
    for (size_t i = 0; i < surface.matrix.size(); ++i) {
        img.data[i] = peak > 0 ? static_cast<float>(surface.matrix[i] / peak) : 0.f;
    }
    save_image_png(img, path);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

std::string sanitize_id(const std::string& id) {
    std::string out;
    for (char c : id) {
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_')
                   ? c
                   : '_';
    }
    return out.empty() ? "x" : out;
}

struct Ctx {
    const PipelineConfig& cfg;
    fs::path out;
    std::string config_hash;
    bool quiet;

    fs::path dir(const std::string& sub) const {
        fs::path p = out / sub;
        fs::create_directories(p);
        return p;
    }
    void log(const std::string& msg) const {
        if (!quiet) std::cout << msg << "\n";
    }
};

Image equalize_for(const PipelineConfig& cfg, const Image& img) {
    Image cur = img;
    for (const auto& step : cfg.equalize_order) {
        if (step == "standard") {
            cur = imgproc::equalize_standard(cur);
        } else if (step == "adaptive") {
            cur = imgproc::equalize_adaptive(cur, cfg.clahe_clip, cfg.clahe_grid);
        } else {
            throw ConfigError("unknown equalize step '" + step + "'");
        }
    }
    return cur;
}

struct CohortIndexRow {
    std::string image_id, patient_id, group_id, augmentation_of, file;
    int class_label = 0;
    bool augmented = false;
};

std::vector<CohortIndexRow> read_cohort_index(const fs::path& path) {
    CsvTable t = read_csv(path.string());
    std::vector<CohortIndexRow> rows;
    const int c_id = t.column("image_id"), c_pid = t.column("patient_id"),
              c_gid = t.column("group_id"), c_cls = t.column("class_label"),
              c_aug = t.column("augmented"), c_of = t.column("augmentation_of"),
              c_file = t.column("file");
    for (const auto& r : t.rows) {
        CohortIndexRow row;
        row.image_id = r[c_id];
        row.patient_id = r[c_pid];
        row.group_id = r[c_gid];
        row.class_label = std::stoi(r[c_cls]);
        row.augmented = r[c_aug] == "1";
        row.augmentation_of = r[c_of];
        row.file = r[c_file];
        rows.push_back(std::move(row));
    }
    return rows;
}

// returns image_id -> crop file for valid crops, in index order
std::vector<std::pair<std::string, std::string>> read_crop_index(const fs::path& path) {
    CsvTable t = read_csv(path.string());
    std::vector<std::pair<std::string, std::string>> rows;
    const int c_id = t.column("image_id"), c_file = t.column("file");
    for (const auto& r : t.rows) rows.emplace_back(r[c_id], r[c_file]);
    return rows;
}

void stage_ingest(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    if (cfg.cohort_manifest.empty()) throw ConfigError("paths.cohort_manifest is required");
    auto records = cohort::parse_manifest(cfg.cohort_manifest, cfg.cohort_columns, cfg.images_dir);
    auto cohort_set = cohort::select_icu_cohort(records);

    const fs::path images = ctx.dir("cohort/images");
    const fs::path lineage = ctx.dir("cohort/lineage");
    std::string index = "image_id,patient_id,group_id,class_label,augmented,augmentation_of,file\n";

    Rng base(cfg.seed);
    for (const auto& src : cohort_set) {
        const uint64_t rec_seed = base.fork(fnv1a64(src.image_id)).next_u64();
        auto expanded = cohort::augment(src, cfg.augment_multiplier, rec_seed, cfg.augment);
        for (const auto& rec : expanded) {
            const std::string fid = sanitize_id(rec.image_id) + ".png";
            save_image_png(rec.pixels, (images / fid).string());

            nlohmann::json lin;
            lin["image_id"] = rec.image_id;
            lin["group_id"] = rec.group_id;
            lin["class_label"] = rec.class_label;
            lin["augmentation_of"] = rec.augmentation_of;
            nlohmann::json tl = nlohmann::json::object();
            for (const auto& [k, v] : rec.transform_log) tl[k] = v;
            lin["transform_log"] = tl;
            write_text_file((lineage / (sanitize_id(rec.image_id) + ".json")).string(),
                            lin.dump(2) + "\n");

            index += csv_escape(rec.image_id) + "," + csv_escape(rec.patient_id) + "," +
                     csv_escape(rec.group_id) + "," + std::to_string(rec.class_label) + "," +
                     (rec.augmented() ? "1" : "0") + "," + csv_escape(rec.augmentation_of) + "," +
                     "cohort/images/" + fid + "\n";
        }
    }
    write_text_file((ctx.out / "cohort" / "index.csv").string(), index);
}

void stage_equalize(const Ctx& ctx) {
    auto rows = read_cohort_index(ctx.out / "cohort" / "index.csv");
    const fs::path eq = ctx.dir("work/eq");
    std::string index = "image_id,file\n";
    for (const auto& row : rows) {
        Image img = load_image((ctx.out / row.file).string());
        Image out = equalize_for(ctx.cfg, img);
        const std::string fid = sanitize_id(row.image_id) + ".png";
        save_image_png(out, (eq / fid).string());
        index += csv_escape(row.image_id) + ",work/eq/" + fid + "\n";
    }
    write_text_file((ctx.out / "work" / "eq_index.csv").string(), index);
}

void stage_segment(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    if (cfg.weights.empty()) {
        throw ConfigError("segment stage requires paths.weights (segmenter checkpoint)");
    }
    lungseg::Segmenter model = lungseg::load_checkpoint(cfg.weights);

    CsvTable eq = read_csv((ctx.out / "work" / "eq_index.csv").string());
    const fs::path masks = ctx.dir("work/masks");
    std::string index = "image_id,valid,components,file\n";
    for (const auto& r : eq.rows) {
        const std::string& id = r[0];
        Image img = load_image((ctx.out / r[1]).string());
        Image prob = lungseg::segment(model, img);
        try {
            imgproc::LungMask mask = imgproc::cleanup_mask(prob, cfg.mask_threshold, cfg.cleanup);
            const std::string fid = sanitize_id(id) + ".png";
            imgproc::save_mask_png(mask, (masks / fid).string());
            index += csv_escape(id) + ",1," + std::to_string(mask.component_count) +
                     ",work/masks/" + fid + "\n";
        } catch (const EmptyMaskError&) {
            index += csv_escape(id) + ",0,0,\n"; // dropped, matching downstream filtering
        }
    }
    write_text_file((ctx.out / "work" / "mask_index.csv").string(), index);
}

void stage_crop(const Ctx& ctx) {
    CsvTable eq = read_csv((ctx.out / "work" / "eq_index.csv").string());
    std::map<std::string, std::string> eq_file;
    for (const auto& r : eq.rows) eq_file[r[0]] = r[1];

    CsvTable masks = read_csv((ctx.out / "work" / "mask_index.csv").string());
    const fs::path crops = ctx.dir("work/crops");
    std::string index = "image_id,row0,col0,rows,cols,file\n";
    for (const auto& r : masks.rows) {
        if (r[1] != "1") continue;
        const std::string& id = r[0];
        Image img = load_image((ctx.out / eq_file.at(id)).string());
        imgproc::LungMask mask = imgproc::load_mask_png((ctx.out / r[3]).string());
        auto res = imgproc::crop_to_lung(img, mask, ctx.cfg.crop_margin, ctx.cfg.zero_outside);
        const std::string fid = sanitize_id(id) + ".png";
        save_image_png(res.image, (crops / fid).string());
        index += csv_escape(id) + "," + std::to_string(res.box.row0) + "," +
                 std::to_string(res.box.col0) + "," + std::to_string(res.box.rows) + "," +
                 std::to_string(res.box.cols) + ",work/crops/" + fid + "\n";
    }
    write_text_file((ctx.out / "work" / "crop_index.csv").string(), index);
}

std::vector<cohort::ImageRecord> load_crop_records(const Ctx& ctx, int rows, int cols) {
    auto cohort_rows = read_cohort_index(ctx.out / "cohort" / "index.csv");
    std::map<std::string, const CohortIndexRow*> meta;
    for (const auto& r : cohort_rows) meta[r.image_id] = &r;

    std::vector<cohort::ImageRecord> records;
    for (const auto& [id, file] : read_crop_index(ctx.out / "work" / "crop_index.csv")) {
        auto it = meta.find(id);
        if (it == meta.end()) throw DataError("crop index references unknown image " + id);
        const auto* m = it->second;
        cohort::ImageRecord rec;
        rec.image_id = id;
        rec.patient_id = m->patient_id;
        rec.group_id = m->group_id;
        rec.class_label = m->class_label;
        rec.augmentation_of = m->augmentation_of;
        rec.pixels = resize_bilinear(load_image((ctx.out / file).string()), rows, cols);
        records.push_back(std::move(rec));
    }
    return records;
}

void stage_extract(const Ctx& ctx) {
    auto adapter = make_adapter(ctx.cfg);
    auto [rows, cols] = adapter->input_size();
    auto records = load_crop_records(ctx, rows, cols);

    std::vector<std::string> skipped;
    FeatureTable table = pathfeat::build_feature_table(records, *adapter, ctx.cfg.mode, &skipped);

    const fs::path features = ctx.dir("features");
    write_feature_table(table, (features / ("features_" + ctx.cfg.mode + ".csv")).string(),
                        (features / ("features_" + ctx.cfg.mode + ".schema.json")).string());
    std::string sk = "image_id_and_reason\n";
    for (const auto& s : skipped) sk += csv_escape(s) + "\n";
    write_text_file((features / "skipped.csv").string(), sk);
}

FeatureTable load_features(const Ctx& ctx) {
    const fs::path features = ctx.out / "features";
    return read_feature_table((features / ("features_" + ctx.cfg.mode + ".csv")).string(),
                              (features / ("features_" + ctx.cfg.mode + ".schema.json")).string());
}

void write_confusion_csv(const treelab::EvalResult& eval, const std::string& path) {
    std::string out = ",pred_0,pred_1\n";
    out += "true_0," + std::to_string(eval.confusion[0][0]) + "," +
           std::to_string(eval.confusion[0][1]) + "\n";
    out += "true_1," + std::to_string(eval.confusion[1][0]) + "," +
           std::to_string(eval.confusion[1][1]) + "\n";
    write_text_file(path, out);
}

void stage_fit(const Ctx& ctx) {
    FeatureTable table = load_features(ctx).without_flagged();
    treelab::TreeModel model = treelab::fit_tree(table, ctx.cfg.min_leaf, ctx.cfg.max_depth,
                                                 ctx.cfg.seed);
    const fs::path tree = ctx.dir("tree");
    write_text_file((tree / "tree.json").string(), treelab::tree_to_json(model).dump(2) + "\n");
    write_text_file((tree / "tree.txt").string(), render_tree_text(model));
    write_text_file((tree / "tree.dot").string(), render_tree_dot(model));

    std::string rank = "feature,samples\n";
    for (const auto& [name, samples] : treelab::rank_features(model)) {
        rank += csv_escape(name) + "," + std::to_string(samples) + "\n";
    }
    write_text_file((tree / "rank.csv").string(), rank);

    auto fmap = treelab::resolve_feature_map(model, table.columns);
    std::vector<int> preds, labels;
    for (const auto& row : table.rows) {
        preds.push_back(treelab::predict_mapped(model, fmap, row.values));
        labels.push_back(row.class_label);
    }
    treelab::EvalResult eval = treelab::metrics(preds, labels);
    write_text_file((tree / "eval_whole_set.json").string(),
                    treelab::eval_to_json(eval).dump(2) + "\n");
    write_confusion_csv(eval, (tree / "confusion_whole_set.csv").string());
}

void stage_crossval(const Ctx& ctx) {
    FeatureTable table = load_features(ctx);
    treelab::EvalResult eval =
        treelab::leave_two_out_cv(table, ctx.cfg.min_leaf, ctx.cfg.max_depth, ctx.cfg.seed);
    const fs::path cv = ctx.dir("cv");
    write_text_file((cv / "eval.json").string(), treelab::eval_to_json(eval).dump(2) + "\n");
    write_confusion_csv(eval, (cv / "confusion.csv").string());
}

std::set<std::string> load_lexicon(const PipelineConfig& cfg) {
    if (cfg.lexicon_file.empty()) return corrext::default_localization_lexicon();
    std::set<std::string> lex;
    std::string text = read_text_file(cfg.lexicon_file);
    std::string cur;
    for (char c : text + "\n") {
        if (c == '\n' || c == '\r') {
            if (!cur.empty()) lex.insert(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c)) || !cur.empty()) {
            cur += std::tolower(static_cast<unsigned char>(c));
        }
    }
    return lex;
}

void stage_correlate(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    if (cfg.external_manifest.empty()) {
        throw ConfigError("correlate stage requires paths.external_manifest");
    }
    auto adapter = make_adapter(cfg);
    auto [arows, acols] = adapter->input_size();
    lungseg::Segmenter seg = lungseg::load_checkpoint(cfg.weights);
    treelab::TreeModel model = treelab::tree_from_json(
        nlohmann::json::parse(read_text_file((ctx.out / "tree" / "tree.json").string())));

    auto images = corrext::load_external(cfg.external_manifest, cfg.external_columns,
                                         cfg.external_images_dir);

    // same preprocessing the cohort went through
    std::vector<cohort::ImageRecord> records;
    std::map<std::string, const corrext::AnnotatedImage*> by_id;
    for (const auto& img : images) {
        by_id[img.image_id] = &img;
        if (!img.valid) continue;
        try {
            Image eq = equalize_for(cfg, img.pixels);
            Image prob = lungseg::segment(seg, eq);
            imgproc::LungMask mask = imgproc::cleanup_mask(prob, cfg.mask_threshold, cfg.cleanup);
            auto crop = imgproc::crop_to_lung(eq, mask, cfg.crop_margin, cfg.zero_outside);
            cohort::ImageRecord rec;
            rec.image_id = img.image_id;
            rec.group_id = img.image_id;
            rec.class_label = -1;
            rec.pixels = resize_bilinear(crop.image, arows, acols);
            records.push_back(std::move(rec));
        } catch (const EmptyMaskError&) {
            continue; // unsegmentable, dropped
        }
    }

    FeatureTable table = pathfeat::build_feature_table(records, *adapter, cfg.mode);
    corrext::Partition part = corrext::classify_external(model, table);

    const fs::path ext = ctx.dir("external");
    write_feature_table(table, (ext / ("features_" + cfg.mode + ".csv")).string(),
                        (ext / ("features_" + cfg.mode + ".schema.json")).string());

    std::string pcsv = "image_id,predicted_class\n";
    std::vector<corrext::LabelSet> sets0, sets1;
    for (const auto& id : part.class0) {
        pcsv += csv_escape(id) + ",0\n";
        sets0.push_back(by_id.at(id)->labels);
    }
    for (const auto& id : part.class1) {
        pcsv += csv_escape(id) + ",1\n";
        sets1.push_back(by_id.at(id)->labels);
    }
    write_text_file((ext / "partition.csv").string(), pcsv);

    corrext::RatioReport report = corrext::frequency_ratio(sets0, sets1, cfg.min_count);
    report.hi = cfg.ratio_hi;
    report.lo = cfg.ratio_lo;
    write_text_file((ext / "ratio_report.csv").string(), corrext::ratio_report_csv(report));
    write_text_file((ext / "ratio_report.txt").string(),
                    corrext::ratio_report_text(report, load_lexicon(cfg)));

    if (cfg.null_trials > 0) {
        std::vector<corrext::LabelSet> all = sets0;
        all.insert(all.end(), sets1.begin(), sets1.end());
        long labeled = 0;
        for (const auto& s : all) labeled += !s.empty();
        if (labeled >= 200) {
            auto null = corrext::null_hypothesis_check(all, report.n0, report.n1, report,
                                                       ctx.cfg.seed ^ 0x9d5c0u, cfg.null_trials);
            write_text_file((ext / "null_check.csv").string(), corrext::null_check_csv(null));
        } else {
            ctx.log("  null check skipped: only " + std::to_string(labeled) +
                    " labeled images (needs 200)");
        }
    }
}

void stage_surface(const Ctx& ctx) {
    const auto& cfg = ctx.cfg;
    auto adapter = make_adapter(cfg);
    if (!adapter->has(pathfeat::Capability::gradients)) {
        throw CapabilityError("surface stage needs a gradient-capable adapter");
    }
    auto [arows, acols] = adapter->input_size();

    std::string node = cfg.surface_node;
    if (node == "auto" || node.empty()) {
        node = "Effusion";
        const fs::path tree_path = ctx.out / "tree" / "tree.json";
        if (fs::exists(tree_path)) {
            auto model = treelab::tree_from_json(
                nlohmann::json::parse(read_text_file(tree_path.string())));
            if (!model.nodes.empty() && !model.nodes[0].is_leaf()) {
                std::string root = model.feature_names[model.nodes[0].feature];
                const auto slash = root.find('/');
                if (slash != std::string::npos) root = root.substr(0, slash); // gradient columns
                if (root.rfind("mid_", 0) != 0) node = root;
            }
        }
    }
    pathfeat::pathology_index(node); // validates the label

    auto records = load_crop_records(ctx, arows, acols);
    const fs::path dir = ctx.dir("surface");
    for (int cls = 0; cls <= 1; ++cls) {
        std::vector<pathfeat::GradientMap> maps;
        for (const auto& rec : records) {
            if (rec.class_label != cls) continue;
            maps.push_back(pathfeat::gradient_map(*adapter, rec.pixels, node, rec.image_id));
        }
        SurfaceResult surf = average_gradient_surface(maps, cfg.surface_grid);
        const std::string stem = "surface_" + sanitize_id(node) + "_class" + std::to_string(cls);
        write_text_file((dir / (stem + ".csv")).string(), surface_csv(surf));
        save_surface_png(surf, (dir / (stem + ".png")).string());
    }
}

void write_run_manifest(const Ctx& ctx, const std::vector<std::string>& completed) {
    nlohmann::json j;
    j["config_sha256"] = ctx.config_hash;
    j["seed"] = ctx.cfg.seed;
    if (ctx.cfg.adapter == "stub") {
        j["adapter"] = "stub:seed=" + std::to_string(ctx.cfg.stub_seed);
    } else {
        j["adapter"] = ctx.cfg.adapter;
    }
    j["stages_completed"] = completed;

    nlohmann::json files = nlohmann::json::array();
    std::vector<fs::path> paths;
    for (const auto& entry : fs::recursive_directory_iterator(ctx.out)) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), ctx.out);
        if (rel == "run_manifest.json") continue;
        paths.push_back(rel);
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& rel : paths) {
        const std::string ext = rel.extension().string();
        nlohmann::json f;
        f["path"] = rel.generic_string();
        f["kind"] = ext == ".png" ? "image" : "data";
        f["sha256"] = sha256_file_hex((ctx.out / rel).string());
        files.push_back(f);
    }
    j["files"] = files;
    write_text_file((ctx.out / "run_manifest.json").string(), j.dump(2) + "\n");
}

} // namespace

std::string run_pipeline(const PipelineConfig& cfg, const RunOptions& opts) {
    if (cfg.output_dir.empty()) throw ConfigError("paths.output_dir is required");
    if (!opts.stop_after.empty()) {
        const auto& stages = pipeline_stages();
        if (std::find(stages.begin(), stages.end(), opts.stop_after) == stages.end()) {
            throw ConfigError("unknown stage '" + opts.stop_after + "'");
        }
    }

    Ctx ctx{cfg, fs::path(cfg.output_dir), "", opts.quiet};
    fs::create_directories(ctx.out);

    const std::string config_text =
        opts.config_text.empty() ? cfg.to_json().dump(2) + "\n" : opts.config_text;
    ctx.config_hash = sha256_hex(config_text);

    if (!opts.resume) {
        for (const char* sub :
             {"checkpoints", "cohort", "work", "features", "tree", "cv", "external", "surface"}) {
            fs::remove_all(ctx.out / sub);
        }
    }
    write_text_file((ctx.out / "config.json").string(), config_text);
    const fs::path ckpt_dir = ctx.dir("checkpoints");

    auto done_path = [&](const std::string& stage) { return ckpt_dir / (stage + ".json"); };
    auto is_done = [&](const std::string& stage) {
        if (!fs::exists(done_path(stage))) return false;
        try {
            auto j = nlohmann::json::parse(read_text_file(done_path(stage).string()));
            return j.value("config_sha256", "") == ctx.config_hash;
        } catch (...) {
            return false;
        }
    };
    auto mark_done = [&](const std::string& stage) {
        nlohmann::json j = {{"stage", stage}, {"config_sha256", ctx.config_hash}};
        write_text_file(done_path(stage).string(), j.dump(2) + "\n");
    };

    const struct {
        const char* name;
        void (*fn)(const Ctx&);
    } stages[] = {
        {"ingest", stage_ingest},   {"equalize", stage_equalize}, {"segment", stage_segment},
        {"crop", stage_crop},       {"extract", stage_extract},   {"fit", stage_fit},
        {"crossval", stage_crossval}, {"correlate", stage_correlate}, {"surface", stage_surface},
    };

    std::vector<std::string> completed;
    std::string last_ok = "(none)";
    for (const auto& stage : stages) {
        if (opts.resume && is_done(stage.name)) {
            ctx.log(std::string("stage ") + stage.name + ": checkpoint found, skipping");
            completed.push_back(stage.name);
            last_ok = stage.name;
        } else {
            ctx.log(std::string("stage ") + stage.name + ": running");
            try {
                stage.fn(ctx);
            } catch (const PipelineError& e) {
                write_run_manifest(ctx, completed);
                throw PipelineError(std::string("stage ") + stage.name + " failed: " + e.what() +
                                    " (last completed checkpoint: " + last_ok + ")");
            }
            mark_done(stage.name);
            completed.push_back(stage.name);
            last_ok = stage.name;
        }
        if (!opts.stop_after.empty() && opts.stop_after == stage.name) break;
    }

    write_run_manifest(ctx, completed);
    return ctx.out.string();
}

} // namespace icufeat::report
