#include "icufeat/lungseg.hpp"

#include "icufeat/csv.hpp"
#include "icufeat/errors.hpp"
#include "icufeat/rng.hpp"
#include "unet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <thread>

#include <nlohmann/json.hpp>

namespace icufeat::lungseg {

using detail::Grads;
using detail::Tensor;
using detail::UNet;

Segmenter::Segmenter(const SegmenterConfig& cfg)
    : cfg_(cfg), net_(std::make_unique<UNet>(cfg)) {}

Segmenter::~Segmenter() = default;
Segmenter::Segmenter(Segmenter&&) noexcept = default;
Segmenter& Segmenter::operator=(Segmenter&&) noexcept = default;

Image Segmenter::forward(const Image& input) const { return net_->forward_prob(input); }

double dice(const imgproc::LungMask& a, const imgproc::LungMask& b) {
    if (a.rows != b.rows || a.cols != b.cols) {
        throw DataError("dice: mask shapes differ (" + std::to_string(a.rows) + "x" +
                        std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                        std::to_string(b.cols) + ")");
    }
    long inter = 0, total = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const int av = a.data[i] != 0, bv = b.data[i] != 0;
        inter += av & bv;
        total += av + bv;
    }
    if (total == 0) return 1.0; // both empty
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

namespace {

struct Sample {
    Tensor x;                // 1×H×W
    std::vector<float> gold; // H·W, 0/1
};

Sample make_sample(const TrainPair& pair, int rows, int cols) {
    Sample s;
    Image img = resize_bilinear(pair.image, rows, cols);
    s.x = Tensor(1, rows, cols);
    std::copy(img.data.begin(), img.data.end(), s.x.v.begin());

    Image m(pair.mask.rows, pair.mask.cols);
    for (size_t i = 0; i < m.size(); ++i) m.data[i] = pair.mask.data[i] ? 1.f : 0.f;
    Image mr = resize_nearest(m, rows, cols);
    s.gold.resize(mr.size());
    for (size_t i = 0; i < mr.size(); ++i) s.gold[i] = mr.data[i] > 0.5f ? 1.f : 0.f;
    return s;
}

// loss and d(loss)/d(logit); probabilities computed in place
double loss_and_grad(const std::vector<float>& logits, const std::vector<float>& gold,
                     bool with_bce, Tensor& glogit) {
    const size_t n = logits.size();
    std::vector<float> p(logits);
    detail::sigmoid_inplace(p);

    double sum_pg = 0, sum_p = 0, sum_g = 0;
    for (size_t i = 0; i < n; ++i) {
        sum_pg += static_cast<double>(p[i]) * gold[i];
        sum_p += p[i];
        sum_g += gold[i];
    }
    const double num = 2.0 * sum_pg + 1.0;
    const double den = sum_p + sum_g + 1.0;
    const double dice_loss = 1.0 - num / den;

    double bce = 0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
        const double pi = std::clamp(static_cast<double>(p[i]), 1e-7, 1.0 - 1e-7);
        const double gi = gold[i];
        if (with_bce) bce -= (gi * std::log(pi) + (1.0 - gi) * std::log(1.0 - pi)) * inv_n;
        const double d_dice_dp = (num - 2.0 * gi * den) / (den * den);
        double grad = d_dice_dp * pi * (1.0 - pi);
        if (with_bce) grad += (pi - gi) * inv_n;
        glogit.v[i] = static_cast<float>(grad);
    }
    return dice_loss + bce;
}

double validation_dice(const UNet& net, const std::vector<Sample>& val, int threads) {
    std::vector<double> scores(val.size(), 0.0);
    auto work = [&](int tid) {
        for (size_t i = tid; i < val.size(); i += threads) {
            detail::Workspace ws;
            net.forward(val[i].x, ws);
            std::vector<float> p = ws.logits.v;
            detail::sigmoid_inplace(p);
            long inter = 0, total = 0;
            for (size_t j = 0; j < p.size(); ++j) {
                const int pv = p[j] > 0.5f, gv = val[i].gold[j] > 0.5f;
                inter += pv & gv;
                total += pv + gv;
            }
            scores[i] = total == 0 ? 1.0 : 2.0 * inter / static_cast<double>(total);
        }
    };
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t) pool.emplace_back(work, t);
    work(0);
    for (auto& th : pool) th.join();

    double sum = 0;
    for (double s : scores) sum += s;
    return val.empty() ? 0.0 : sum / static_cast<double>(val.size());
}

} // namespace

TrainResult train_segmenter(const std::vector<TrainPair>& pairs, const SegmenterConfig& cfg) {
    if (pairs.size() < 2) throw ParamError("train_segmenter: need at least 2 pairs");
    if (cfg.epochs < 1) throw ConfigError("train_segmenter: epochs must be >= 1");
    if (cfg.batch < 1) throw ConfigError("train_segmenter: batch must be >= 1");
    for (const auto& p : pairs) {
        if (p.image.rows != p.mask.rows || p.image.cols != p.mask.cols) {
            throw DataError("train pair '" + p.name + "': image " + std::to_string(p.image.rows) +
                            "x" + std::to_string(p.image.cols) + " does not match mask " +
                            std::to_string(p.mask.rows) + "x" + std::to_string(p.mask.cols));
        }
        for (uint8_t v : p.mask.data) {
            if (v > 1) throw DataError("train pair '" + p.name + "': mask is not binary");
        }
    }

    const int threads = cfg.threads > 0
                            ? cfg.threads
                            : std::max(1u, std::thread::hardware_concurrency());

    // stratified train/validation split by source corpus
    std::map<std::string, std::vector<int>> by_source;
    for (size_t i = 0; i < pairs.size(); ++i) by_source[pairs[i].source].push_back(static_cast<int>(i));
    Rng split_rng(cfg.seed ^ 0x517a17u);
    std::vector<int> train_idx, val_idx;
    for (auto& [src, idx] : by_source) {
        deterministic_shuffle(idx, split_rng);
        long nv = std::lround(cfg.val_fraction * static_cast<double>(idx.size()));
        nv = std::clamp<long>(nv, 0, static_cast<long>(idx.size()) - 1);
        for (size_t i = 0; i < idx.size(); ++i) {
            (static_cast<long>(i) < nv ? val_idx : train_idx).push_back(idx[i]);
        }
    }
    if (val_idx.empty() && train_idx.size() > 1) {
        val_idx.push_back(train_idx.back());
        train_idx.pop_back();
    }

    std::vector<Sample> train_set, val_set;
    train_set.reserve(train_idx.size());
    for (int i : train_idx) train_set.push_back(make_sample(pairs[i], cfg.input_rows, cfg.input_cols));
    for (int i : val_idx) val_set.push_back(make_sample(pairs[i], cfg.input_rows, cfg.input_cols));
    if (val_set.empty()) {
        // degenerate single-pair validation fallback: validate on training data
        val_set.push_back(train_set.front());
    }

    Segmenter model(cfg);
    UNet& net = model.net();
    detail::Adam adam(net, cfg.learning_rate);
    const bool with_bce = cfg.loss == "bce+dice";

    TrainResult result{std::move(model), {}, 0, -1.0};
    std::vector<float> best_params = net.export_params();

    Rng epoch_rng(cfg.seed ^ 0xe90c45u);
    std::vector<int> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        deterministic_shuffle(order, epoch_rng);
        double epoch_loss = 0;
        long seen = 0;

        for (size_t start = 0; start < order.size(); start += cfg.batch) {
            const size_t stop = std::min(order.size(), start + cfg.batch);
            const int nb = static_cast<int>(stop - start);

            std::vector<Grads> item_grads(nb);
            std::vector<double> item_loss(nb, 0.0);
            auto work = [&](int tid) {
                detail::Workspace ws;
                for (int b = tid; b < nb; b += threads) {
                    const Sample& s = train_set[order[start + b]];
                    net.forward(s.x, ws);
                    Tensor glogit(1, s.x.h, s.x.w);
                    item_loss[b] = loss_and_grad(ws.logits.v, s.gold, with_bce, glogit);
                    item_grads[b] = net.make_grads();
                    net.backward(ws, glogit, item_grads[b]);
                }
            };
            std::vector<std::thread> pool;
            for (int t = 1; t < std::min(threads, nb); ++t) pool.emplace_back(work, t);
            work(0);
            for (auto& th : pool) th.join();

            // reduce in item order, independent of thread scheduling
            Grads batch_grads = std::move(item_grads[0]);
            for (int b = 1; b < nb; ++b) UNet::add_grads(batch_grads, item_grads[b]);
            adam.step(net, batch_grads, 1.0 / nb);

            for (int b = 0; b < nb; ++b) epoch_loss += item_loss[b];
            seen += nb;
        }

        EpochStats stats;
        stats.train_loss = seen ? epoch_loss / static_cast<double>(seen) : 0.0;
        stats.val_dice = validation_dice(net, val_set, threads);
        result.history.push_back(stats);
        if (stats.val_dice > result.best_val_dice) {
            result.best_val_dice = stats.val_dice;
            result.best_epoch = epoch;
            best_params = net.export_params();
        }
    }

    net.import_params(best_params);
    return result;
}

Image segment(const Segmenter& model, const Image& image) {
    const auto& cfg = model.config();
    Image in = resize_bilinear(image, cfg.input_rows, cfg.input_cols);
    Image prob = model.forward(in);
    return resize_bilinear(prob, image.rows, image.cols);
}

namespace {
constexpr char kCheckpointMagic[] = "ICUSEG1\n";
}

void save_checkpoint(const Segmenter& model, const std::string& path, int best_epoch,
                     double best_val_dice) {
    const auto& cfg = model.config();
    nlohmann::json header;
    header["config"] = {{"input_rows", cfg.input_rows},
                        {"input_cols", cfg.input_cols},
                        {"depth", cfg.depth},
                        {"base_channels", cfg.base_channels},
                        {"loss", cfg.loss},
                        {"seed", cfg.seed}};
    header["best_epoch"] = best_epoch;
    header["best_val_dice"] = best_val_dice;
    const auto params = model.net().export_params();
    header["param_floats"] = params.size();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
    const std::string hj = header.dump();
    const uint32_t len = static_cast<uint32_t>(hj.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(hj.data(), static_cast<std::streamsize>(hj.size()));
    out.write(reinterpret_cast<const char*>(params.data()),
              static_cast<std::streamsize>(params.size() * sizeof(float)));
    if (!out) throw DataError("checkpoint write failed: " + path);
}

Segmenter load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint: " + path);
    char magic[sizeof(kCheckpointMagic) - 1];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw ConfigError("not a segmenter checkpoint: " + path);
    }
    uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string hj(len, '\0');
    in.read(hj.data(), len);
    if (!in) throw ConfigError("truncated checkpoint header: " + path);

    nlohmann::json header = nlohmann::json::parse(hj);
    SegmenterConfig cfg;
    const auto& jc = header.at("config");
    cfg.input_rows = jc.at("input_rows").get<int>();
    cfg.input_cols = jc.at("input_cols").get<int>();
    cfg.depth = jc.at("depth").get<int>();
    cfg.base_channels = jc.at("base_channels").get<int>();
    cfg.loss = jc.value("loss", "bce+dice");
    cfg.seed = jc.value("seed", 0ull);

    Segmenter model(cfg);
    const size_t expected = header.at("param_floats").get<size_t>();
    std::vector<float> params(expected);
    in.read(reinterpret_cast<char*>(params.data()),
            static_cast<std::streamsize>(expected * sizeof(float)));
    if (!in || in.gcount() != static_cast<std::streamsize>(expected * sizeof(float))) {
        throw ConfigError("checkpoint weights truncated: " + path);
    }
    model.net().import_params(params);
    return model;
}

BenchmarkReport benchmark_dice(const Segmenter& model, const std::vector<TrainPair>& corpus,
                               double threshold, bool cleanup) {
    if (corpus.empty()) throw ParamError("benchmark_dice: empty corpus");
    BenchmarkReport report;
    double sum = 0;
    for (const auto& pair : corpus) {
        Image prob = segment(model, pair.image);
        imgproc::LungMask pred;
        if (cleanup) {
            try {
                pred = imgproc::cleanup_mask(prob, threshold);
            } catch (const EmptyMaskError&) {
                pred = imgproc::binarize(prob, threshold);
            }
        } else {
            pred = imgproc::binarize(prob, threshold);
        }
        const double d = dice(pred, pair.mask);
        report.rows.push_back({pair.name, d});
        sum += d;
    }
    report.mean = sum / static_cast<double>(corpus.size());
    return report;
}

std::string benchmark_csv(const BenchmarkReport& report) {
    std::string out = "kind,name,dice\n";
    for (const auto& row : report.rows) {
        out += "image," + csv_escape(row.name) + "," + format_double(row.dice_score) + "\n";
    }
    out += "mean,corpus," + format_double(report.mean) + "\n";
    // published coefficients for context
    const std::pair<const char*, const char*> refs[] = {
        {"Li et al. 2016", "0.964"},          {"Candemir et al. 2013", "0.967"},
        {"Shao et al. 2014", "0.972"},        {"Novikov et al. 2018", "0.974"},
        {"Yang et al. 2017", "0.975"},        {"Hwang & Park 2017", "0.980"},
        {"this architecture (reported)", "0.988"},
    };
    for (const auto& [name, value] : refs) {
        out += std::string("reference,") + csv_escape(name) + "," + value + "\n";
    }
    return out;
}

std::vector<TrainPair> load_pair_dirs(const std::string& images_dir, const std::string& masks_dir,
                                      const std::string& source_tag) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(images_dir)) throw DataError("not a directory: " + images_dir);
    if (!fs::is_directory(masks_dir)) throw DataError("not a directory: " + masks_dir);

    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(images_dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string ext = entry.path().extension().string();
        if (ext != ".png" && ext != ".jpg" && ext != ".jpeg") continue;
        names.push_back(entry.path().filename().string());
    }
    std::sort(names.begin(), names.end());

    std::vector<TrainPair> pairs;
    for (const auto& name : names) {
        const fs::path mask_path = fs::path(masks_dir) / name;
        if (!fs::exists(mask_path)) {
            throw DataError("mask missing for image '" + name + "' in " + masks_dir);
        }
        TrainPair p;
        p.name = name;
        p.source = source_tag;
        p.image = load_image((fs::path(images_dir) / name).string());
        Image m = load_image(mask_path.string());
        p.mask = imgproc::binarize(m, 0.5);
        pairs.push_back(std::move(p));
    }
    if (pairs.empty()) throw DataError("no images found in " + images_dir);
    return pairs;
}

} // namespace icufeat::lungseg
