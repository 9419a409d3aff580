#include "fixtures.hpp"

#include "icufeat/cohort.hpp"
#include "icufeat/csv.hpp"
#include "icufeat/report.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace fixtures {

TempDir::TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() /
           ("icufeat_" + tag + "_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
}

std::string TempDir::sub(const std::string& rel) const {
    fs::path p = path / rel;
    fs::create_directories(p.parent_path());
    return p.string();
}

Image noise_image(int rows, int cols, uint64_t seed, float lo, float hi) {
    Rng rng(seed);
    Image img(rows, cols);
    for (float& v : img.data) v = static_cast<float>(rng.uniform(lo, hi));
    return img;
}

Image gradient_spot_image(int rows, int cols, int spot_row, int spot_col, int spot_size,
                          float amplitude) {
    Image img(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            img.at(r, c) = 0.2f + 0.6f * static_cast<float>(c) / static_cast<float>(cols - 1);
        }
    }
    for (int r = spot_row; r < spot_row + spot_size && r < rows; ++r) {
        for (int c = spot_col; c < spot_col + spot_size && c < cols; ++c) {
            img.at(r, c) += ((r + c) % 2 ? amplitude : -amplitude);
        }
    }
    for (float& v : img.data) v = std::clamp(v, 0.f, 1.f);
    return img;
}

Image blob_prob_map(int rows, int cols, uint64_t seed, int blobs) {
    Rng rng(seed);
    Image img(rows, cols, 0.f);
    for (int b = 0; b < blobs; ++b) {
        const double cy = rng.uniform(0.2, 0.8) * rows;
        const double cx = rng.uniform(0.2, 0.8) * cols;
        const double ry = rng.uniform(0.08, 0.28) * rows;
        const double rx = rng.uniform(0.08, 0.28) * cols;
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                const double dy = (r - cy) / ry, dx = (c - cx) / rx;
                const double d = dy * dy + dx * dx;
                if (d < 1.0) {
                    img.at(r, c) = std::max(img.at(r, c), static_cast<float>(1.0 - 0.3 * d));
                }
            }
        }
    }
    // speckle noise and a few pinholes
    for (int i = 0; i < rows * cols / 100; ++i) {
        const int r = static_cast<int>(rng.next_below(rows));
        const int c = static_cast<int>(rng.next_below(cols));
        img.at(r, c) = static_cast<float>(rng.next_double());
    }
    return img;
}

EllipsePair ellipse_pair(int rows, int cols, uint64_t seed) {
    Rng rng(seed);
    EllipsePair out;
    out.image = Image(rows, cols);
    out.mask = icufeat::imgproc::LungMask(rows, cols);

    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            out.image.at(r, c) =
                static_cast<float>(0.12 + 0.06 * r / rows + rng.uniform(-0.04, 0.04));
        }
    }

    struct E {
        double cy, cx, ry, rx;
    };
    const double jy = rng.uniform(-0.04, 0.04), jx = rng.uniform(-0.03, 0.03);
    E lungs[2] = {
        {(0.48 + jy) * rows, (0.30 + jx) * cols, rng.uniform(0.22, 0.3) * rows,
         rng.uniform(0.12, 0.17) * cols},
        {(0.48 + jy) * rows, (0.70 + jx) * cols, rng.uniform(0.22, 0.3) * rows,
         rng.uniform(0.12, 0.17) * cols},
    };
    for (const auto& e : lungs) {
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                const double dy = (r - e.cy) / e.ry, dx = (c - e.cx) / e.rx;
                const double d = dy * dy + dx * dx;
                if (d <= 1.0) {
                    out.mask.at(r, c) = 1;
                    out.image.at(r, c) = static_cast<float>(
                        0.55 + 0.18 * (1.0 - d) + rng.uniform(-0.05, 0.05));
                }
            }
        }
    }
    // corner marker artifact, outside the lung field
    for (int r = 2; r < rows / 12; ++r) {
        for (int c = 2; c < cols / 8; ++c) out.image.at(r, c) = 0.95f;
    }
    for (float& v : out.image.data) v = std::clamp(v, 0.f, 1.f);
    return out;
}

std::vector<icufeat::lungseg::TrainPair> ellipse_corpus(int n, int rows, int cols, uint64_t seed) {
    std::vector<icufeat::lungseg::TrainPair> pairs;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        auto [image, mask] = ellipse_pair(rows, cols, rng.next_u64());
        icufeat::lungseg::TrainPair p;
        p.image = std::move(image);
        p.mask = std::move(mask);
        p.name = "ellipse_" + std::to_string(i);
        p.source = "synthetic";
        pairs.push_back(std::move(p));
    }
    return pairs;
}

FeatureTable random_table(int rows, int features, uint64_t seed, int quantize,
                          bool random_labels) {
    Rng rng(seed);
    FeatureTable t;
    t.mode = "test";
    for (int f = 0; f < features; ++f) t.columns.push_back("f" + std::to_string(f));
    for (int i = 0; i < rows; ++i) {
        FeatureTable::Row row;
        row.image_id = "img" + std::to_string(i);
        row.group_id = "g" + std::to_string(i);
        row.class_label = random_labels ? static_cast<int>(rng.next_below(2)) : (i % 2);
        for (int f = 0; f < features; ++f) {
            double v = rng.next_double();
            if (quantize > 0) v = std::floor(v * quantize) / quantize;
            row.values.push_back(v);
        }
        t.rows.push_back(std::move(row));
    }
    // both classes must appear
    if (!t.rows.empty()) {
        t.rows[0].class_label = 0;
        t.rows[t.rows.size() - 1].class_label = 1;
    }
    return t;
}

FeatureTable separable_table(int rows_per_class, int features, uint64_t seed) {
    Rng rng(seed);
    FeatureTable t;
    t.mode = "test";
    for (int f = 0; f < features; ++f) t.columns.push_back("f" + std::to_string(f));
    for (int cls = 0; cls <= 1; ++cls) {
        for (int i = 0; i < rows_per_class; ++i) {
            FeatureTable::Row row;
            row.image_id = "c" + std::to_string(cls) + "_" + std::to_string(i);
            row.group_id = row.image_id;
            row.class_label = cls;
            for (int f = 0; f < features; ++f) {
                double v = rng.next_double() * 0.4;
                if (f == 0) v += cls ? 0.6 : 0.0; // wide gap on feature 0
                row.values.push_back(v);
            }
            t.rows.push_back(std::move(row));
        }
    }
    return t;
}

FeatureTable grouped_table(int groups_per_class, int rows_per_group, int features, uint64_t seed,
                           bool separable) {
    Rng rng(seed);
    FeatureTable t;
    t.mode = "test";
    for (int f = 0; f < features; ++f) t.columns.push_back("f" + std::to_string(f));
    for (int cls = 0; cls <= 1; ++cls) {
        for (int g = 0; g < groups_per_class; ++g) {
            const std::string gid = "c" + std::to_string(cls) + "_g" + std::to_string(g);
            for (int k = 0; k < rows_per_group; ++k) {
                FeatureTable::Row row;
                row.image_id = gid + (k == 0 ? "" : "_aug" + std::to_string(k));
                row.group_id = gid;
                row.class_label = cls;
                row.augmented = k != 0;
                for (int f = 0; f < features; ++f) {
                    double v = rng.next_double() * 0.4;
                    if (separable && f == 0) v += cls ? 0.6 : 0.0;
                    row.values.push_back(v);
                }
                t.rows.push_back(std::move(row));
            }
        }
    }
    return t;
}

std::vector<std::vector<std::string>> token_corpus(int n, uint64_t seed) {
    const std::vector<std::pair<std::string, double>> vocab = {
        {"pattern", 0.5},    {"covid", 0.45},      {"pneumonia", 0.3},  {"increased density", 0.3},
        {"unchanged", 0.25}, {"consolidation", 0.2}, {"bilateral", 0.4}, {"peripheral", 0.35},
        {"middle", 0.3},     {"lower", 0.35},      {"upper", 0.25},     {"left", 0.4},
        {"hilar", 0.15},     {"mediastinum", 0.12}, {"normal", 0.3},    {"alveolar", 0.18},
        {"effusion", 0.12},  {"interstitial", 0.2},
    };
    Rng rng(seed);
    std::vector<std::vector<std::string>> out;
    for (int i = 0; i < n; ++i) {
        std::vector<std::string> labels;
        for (const auto& [tok, p] : vocab) {
            if (rng.next_double() < p) labels.push_back(tok);
        }
        out.push_back(std::move(labels));
    }
    return out;
}

std::string write_pipeline_fixture(const TempDir& dir, int cohort_images, int external_images) {
    using icufeat::csv_escape;
    Rng rng(0xf1c5);

    // cohort manifest + images: half will go to ICU (class 1)
    std::string manifest = "patientid,filename,went_icu,in_icu,view\n";
    fs::create_directories(dir.path / "cohort_images");
    for (int i = 0; i < cohort_images; ++i) {
        const std::string fname = "cxr" + std::to_string(i) + ".png";
        auto pair = ellipse_pair(120, 160, rng.next_u64());
        // class-correlated texture so trees have signal: brighten the lower
        // lung field for ICU-bound patients
        const bool icu = i % 2 == 0;
        if (icu) {
            for (int r = pair.image.rows / 2; r < pair.image.rows; ++r) {
                for (int c = 0; c < pair.image.cols; ++c) {
                    if (pair.mask.at(r, c)) {
                        pair.image.at(r, c) = std::min(1.f, pair.image.at(r, c) + 0.18f);
                    }
                }
            }
        }
        icufeat::save_image_png(pair.image, (dir.path / "cohort_images" / fname).string());
        manifest += "p" + std::to_string(i) + "," + fname + "," + (icu ? "Y" : "N") + ",N,PA\n";
    }
    icufeat::write_text_file(dir.sub("cohort_manifest.csv"), manifest);

    // external manifest + images with list-style label cells
    auto tokens = token_corpus(external_images, 0xbeef);
    std::string ext = "filename,labels\n";
    fs::create_directories(dir.path / "external_images");
    for (int i = 0; i < external_images; ++i) {
        const std::string fname = "ext" + std::to_string(i) + ".png";
        auto pair = ellipse_pair(120, 160, rng.next_u64());
        icufeat::save_image_png(pair.image, (dir.path / "external_images" / fname).string());
        std::string cell = "[";
        for (size_t k = 0; k < tokens[i].size(); ++k) {
            if (k) cell += ",";
            cell += "'" + tokens[i][k] + "'";
        }
        cell += "]";
        ext += fname + "," + csv_escape(cell) + "\n";
    }
    icufeat::write_text_file(dir.sub("external_manifest.csv"), ext);

    icufeat::write_text_file(dir.sub("lexicon.txt"),
                             "bilateral\nperipheral\nmiddle\nlower\nupper\nleft\nhilar\n"
                             "mediastinum\n");

    // small segmenter trained on the same distribution
    icufeat::lungseg::SegmenterConfig scfg;
    scfg.input_rows = scfg.input_cols = 64;
    scfg.depth = 2;
    scfg.base_channels = 6;
    scfg.epochs = 8;
    scfg.batch = 4;
    scfg.learning_rate = 2e-3;
    scfg.seed = 11;
    auto corpus = ellipse_corpus(40, 120, 160, 0xabc);
    auto trained = icufeat::lungseg::train_segmenter(corpus, scfg);
    icufeat::lungseg::save_checkpoint(trained.model, dir.sub("segmenter.ckpt"),
                                      trained.best_epoch, trained.best_val_dice);

    nlohmann::json cfg;
    cfg["paths"] = {{"cohort_manifest", dir.sub("cohort_manifest.csv")},
                    {"images_dir", (dir.path / "cohort_images").string()},
                    {"external_manifest", dir.sub("external_manifest.csv")},
                    {"external_images_dir", (dir.path / "external_images").string()},
                    {"weights", dir.sub("segmenter.ckpt")},
                    {"output_dir", (dir.path / "out").string()},
                    {"lexicon", dir.sub("lexicon.txt")}};
    cfg["augmentation"] = {{"multiplier", 3}};
    cfg["tree"] = {{"min_leaf", 5}, {"max_depth", 3}};
    cfg["features"] = {{"mode", "last"}, {"adapter", "stub"}};
    cfg["correlate"] = {{"min_count", 3}, {"null_trials", 0}};
    cfg["surface"] = {{"node", "auto"}, {"grid", 64}};
    cfg["seed"] = 7;
    const std::string cfg_path = dir.sub("config.json");
    icufeat::write_text_file(cfg_path, cfg.dump(2) + "\n");
    return cfg_path;
}

} // namespace fixtures
