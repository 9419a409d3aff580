#include <doctest.h>

#include "fixtures.hpp"
#include "icufeat/csv.hpp"
#include "icufeat/errors.hpp"
#include "icufeat/lungseg.hpp"
#include "unet.hpp"

#include <cmath>
#include <fstream>

using namespace icufeat;
using namespace icufeat::lungseg;
using imgproc::LungMask;

namespace {

LungMask square_mask(int rows, int cols, int r0, int c0, int size) {
    LungMask m(rows, cols);
    for (int r = r0; r < r0 + size; ++r)
        for (int c = c0; c < c0 + size; ++c) m.at(r, c) = 1;
    return m;
}

// test-local loss: soft dice (+1 smoothing) plus mean BCE, matching the
// training objective but written independently
double ref_loss(const std::vector<float>& logits, const std::vector<float>& gold) {
    double sp = 0, sg = 0, spg = 0, bce = 0;
    for (size_t i = 0; i < logits.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
        const double pc = std::clamp(p, 1e-7, 1.0 - 1e-7);
        sp += p;
        sg += gold[i];
        spg += p * gold[i];
        bce -= gold[i] * std::log(pc) + (1.0 - gold[i]) * std::log(1.0 - pc);
    }
    bce /= static_cast<double>(logits.size());
    const double dice_loss = 1.0 - (2.0 * spg + 1.0) / (sp + sg + 1.0);
    return dice_loss + bce;
}

void ref_loss_grad(const std::vector<float>& logits, const std::vector<float>& gold,
                   detail::Tensor& glogit) {
    double sp = 0, sg = 0, spg = 0;
    std::vector<double> p(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
        sp += p[i];
        sg += gold[i];
        spg += p[i] * gold[i];
    }
    const double num = 2.0 * spg + 1.0, den = sp + sg + 1.0;
    const double inv_n = 1.0 / static_cast<double>(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        const double d_dice = (num - 2.0 * gold[i] * den) / (den * den);
        glogit.v[i] =
            static_cast<float>(d_dice * p[i] * (1.0 - p[i]) + (p[i] - gold[i]) * inv_n);
    }
}

} // namespace

TEST_CASE("dice worked examples and errors") {
    LungMask a = square_mask(10, 10, 2, 2, 4);
    CHECK(dice(a, a) == 1.0);

    LungMask b = square_mask(10, 10, 7, 7, 2);
    CHECK(dice(a, b) == 0.0);

    // 4-pixel squares overlapping in exactly 2 pixels
    LungMask c = square_mask(10, 10, 2, 2, 2);
    LungMask d = square_mask(10, 10, 2, 3, 2);
    CHECK(dice(c, d) == doctest::Approx(0.5));

    LungMask e1(6, 6), e2(6, 6);
    CHECK(dice(e1, e2) == 1.0); // both empty

    LungMask f(5, 6);
    CHECK_THROWS_AS(dice(e1, f), DataError);
}

TEST_CASE("dice is symmetric on random masks") {
    Rng rng(0xd1ce);
    for (int trial = 0; trial < 50; ++trial) {
        LungMask a(12, 12), b(12, 12);
        for (auto& v : a.data) v = rng.next_below(2);
        for (auto& v : b.data) v = rng.next_below(2);
        CHECK(dice(a, b) == dice(b, a));
        CHECK(dice(a, b) >= 0.0);
        CHECK(dice(a, b) <= 1.0);
    }
}

TEST_CASE("segmenter builds for divisible sizes and rejects the rest") {
    SegmenterConfig cfg;
    cfg.input_rows = cfg.input_cols = 64;
    cfg.depth = 4;
    cfg.base_channels = 2;
    Segmenter model(cfg);
    Image prob = model.forward(Image(64, 64, 0.3f));
    CHECK(prob.rows == 64);
    CHECK(prob.cols == 64);
    for (float v : prob.data) {
        CHECK(v > 0.f);
        CHECK(v < 1.f);
    }

    cfg.input_rows = cfg.input_cols = 250;
    CHECK_THROWS_AS(Segmenter{cfg}, ConfigError);
    cfg.input_rows = cfg.input_cols = 64;
    cfg.depth = 0;
    CHECK_THROWS_AS(Segmenter{cfg}, ConfigError);
    cfg.depth = 2;
    cfg.loss = "hinge";
    CHECK_THROWS_AS(Segmenter{cfg}, ConfigError);
}

TEST_CASE("backprop matches finite differences on a tiny network") {
    SegmenterConfig cfg;
    cfg.input_rows = cfg.input_cols = 16;
    cfg.depth = 1;
    cfg.base_channels = 2;
    cfg.seed = 5;
    detail::UNet net(cfg);

    Rng rng(0x6ead);
    detail::Tensor x(1, 16, 16);
    for (auto& v : x.v) v = static_cast<float>(rng.next_double());
    std::vector<float> gold(x.size());
    for (auto& v : gold) v = static_cast<float>(rng.next_below(2));

    detail::Workspace ws;
    net.forward(x, ws);
    detail::Tensor glogit(1, 16, 16);
    ref_loss_grad(ws.logits.v, gold, glogit);
    auto grads = net.make_grads();
    net.backward(ws, glogit, grads);

    auto loss_now = [&]() {
        detail::Workspace w2;
        net.forward(x, w2);
        return ref_loss(w2.logits.v, gold);
    };

    auto convs = net.convs();
    const float h = 3e-3f;
    int checked = 0;
    for (size_t ci = 0; ci < convs.size(); ++ci) {
        auto probe = [&](std::vector<float>& params, const std::vector<float>& g, size_t j) {
            const float orig = params[j];
            params[j] = orig + h;
            const double up = loss_now();
            params[j] = orig - h;
            const double down = loss_now();
            params[j] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double an = g[j];
            CHECK(std::abs(fd - an) <= 2e-3 + 0.05 * std::abs(fd));
            ++checked;
        };
        probe(convs[ci]->W, grads[ci].gW, 0);
        probe(convs[ci]->W, grads[ci].gW, convs[ci]->W.size() / 2);
        probe(convs[ci]->b, grads[ci].gb, 0);
    }
    CHECK(checked >= 12);
}

TEST_CASE("train smoke: two identical pairs, one epoch") {
    auto pair = fixtures::ellipse_pair(48, 48, 3);
    TrainPair tp;
    tp.image = pair.image;
    tp.mask = pair.mask;
    tp.name = "p0";
    std::vector<TrainPair> pairs = {tp, tp};

    SegmenterConfig cfg;
    cfg.input_rows = cfg.input_cols = 32;
    cfg.depth = 2;
    cfg.base_channels = 4;
    cfg.epochs = 1;
    cfg.batch = 2;
    cfg.seed = 1;
    auto result = train_segmenter(pairs, cfg);
    REQUIRE(result.history.size() == 1);
    CHECK(std::isfinite(result.history[0].val_dice));
    CHECK(std::isfinite(result.history[0].train_loss));
    CHECK(result.best_epoch == 0);
}

TEST_CASE("training loss is non-increasing on the 2-pair memorization task") {
    auto pair = fixtures::ellipse_pair(48, 48, 9);
    TrainPair tp;
    tp.image = pair.image;
    tp.mask = pair.mask;
    tp.name = "memo";
    std::vector<TrainPair> pairs = {tp, tp};

    SegmenterConfig cfg;
    cfg.input_rows = cfg.input_cols = 48;
    cfg.depth = 2;
    cfg.base_channels = 4;
    cfg.epochs = 8;
    cfg.batch = 1;
    cfg.learning_rate = 2e-3;
    cfg.seed = 2;
    auto result = train_segmenter(pairs, cfg);
    REQUIRE(result.history.size() == 8);
    for (size_t e = 1; e < result.history.size(); ++e) {
        CHECK(result.history[e].train_loss <= result.history[e - 1].train_loss * 1.05);
    }
}

TEST_CASE("training is deterministic in the seed") {
    auto pairs = fixtures::ellipse_corpus(6, 48, 48, 0x1111);
    SegmenterConfig cfg;
    cfg.input_rows = cfg.input_cols = 32;
    cfg.depth = 2;
    cfg.base_channels = 4;
    cfg.epochs = 2;
    cfg.batch = 3;
    cfg.seed = 77;
    auto a = train_segmenter(pairs, cfg);
    auto b = train_segmenter(pairs, cfg);
    REQUIRE(a.history.size() == b.history.size());
    for (size_t e = 0; e < a.history.size(); ++e) {
        CHECK(a.history[e].train_loss == b.history[e].train_loss);
        CHECK(a.history[e].val_dice == b.history[e].val_dice);
    }
    CHECK(a.model.net().export_params() == b.model.net().export_params());
}

TEST_CASE("train_segmenter validates pairs") {
    std::vector<TrainPair> one(1);
    one[0].image = Image(32, 32, 0.5f);
    one[0].mask = LungMask(32, 32);
    SegmenterConfig cfg;
    cfg.input_rows = cfg.input_cols = 32;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.epochs = 1;
    CHECK_THROWS_AS(train_segmenter(one, cfg), ParamError);

    std::vector<TrainPair> bad(2);
    bad[0].image = Image(32, 32, 0.5f);
    bad[0].mask = LungMask(32, 32);
    bad[0].name = "ok";
    bad[1].image = Image(32, 32, 0.5f);
    bad[1].mask = LungMask(16, 32);
    bad[1].name = "misaligned";
    CHECK_THROWS_WITH_AS(train_segmenter(bad, cfg), doctest::Contains("misaligned"), DataError);
}

TEST_CASE("segmentation learns the synthetic ellipse task at small scale") {
    auto pairs = fixtures::ellipse_corpus(30, 64, 64, 0x2222);
    SegmenterConfig cfg;
    cfg.input_rows = cfg.input_cols = 64;
    cfg.depth = 2;
    cfg.base_channels = 6;
    cfg.epochs = 8;
    cfg.batch = 4;
    cfg.learning_rate = 2e-3;
    cfg.seed = 3;
    auto result = train_segmenter(pairs, cfg);
    CHECK(result.best_val_dice >= 0.85);
    CHECK(result.best_epoch < cfg.epochs);

    // inference contract on a fresh image from the same distribution
    auto fresh = fixtures::ellipse_pair(96, 80, 0x3333);
    Image prob = segment(result.model, fresh.image);
    CHECK(prob.rows == 96);
    CHECK(prob.cols == 80);
    for (float v : prob.data) {
        CHECK(v >= 0.f);
        CHECK(v <= 1.f);
    }
    Image again = segment(result.model, fresh.image);
    CHECK(again.data == prob.data);

    Image zero(64, 64, 0.f);
    Image zprob = segment(result.model, zero);
    for (float v : zprob.data) {
        CHECK(std::isfinite(v));
        CHECK(v >= 0.f);
        CHECK(v <= 1.f);
    }
}

TEST_CASE("checkpoint round trip preserves behavior and rejects junk") {
    fixtures::TempDir dir("ckpt");
    auto pairs = fixtures::ellipse_corpus(4, 48, 48, 0x4444);
    SegmenterConfig cfg;
    cfg.input_rows = cfg.input_cols = 32;
    cfg.depth = 2;
    cfg.base_channels = 3;
    cfg.epochs = 1;
    cfg.seed = 4;
    auto result = train_segmenter(pairs, cfg);

    const std::string path = dir.sub("model.ckpt");
    save_checkpoint(result.model, path, result.best_epoch, result.best_val_dice);
    Segmenter back = load_checkpoint(path);
    CHECK(back.config().depth == cfg.depth);
    CHECK(back.config().base_channels == cfg.base_channels);

    Image probe = fixtures::noise_image(32, 32, 1);
    CHECK(back.forward(probe).data == result.model.forward(probe).data);

    // truncated weights
    const std::string truncated = dir.sub("trunc.ckpt");
    {
        std::string bytes = read_text_file(path);
        write_text_file(truncated, bytes.substr(0, bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(truncated), ConfigError);

    const std::string junk = dir.sub("junk.ckpt");
    write_text_file(junk, "definitely not a checkpoint");
    CHECK_THROWS_AS(load_checkpoint(junk), ConfigError);
    CHECK_THROWS_AS(load_checkpoint(dir.sub("missing.ckpt")), ConfigError);
}

TEST_CASE("benchmark_dice means and reference footer") {
    auto pairs = fixtures::ellipse_corpus(6, 64, 64, 0x5555);
    SegmenterConfig cfg;
    cfg.input_rows = cfg.input_cols = 64;
    cfg.depth = 2;
    cfg.base_channels = 6;
    cfg.epochs = 6;
    cfg.batch = 3;
    cfg.learning_rate = 2e-3;
    cfg.seed = 6;
    auto result = train_segmenter(pairs, cfg);

    // gold = the model's own cleaned prediction -> dice exactly 1.0
    auto fresh = fixtures::ellipse_pair(64, 64, 0x6666);
    Image prob = segment(result.model, fresh.image);
    LungMask pred = imgproc::cleanup_mask(prob, 0.5);

    TrainPair perfect;
    perfect.name = "perfect";
    perfect.image = fresh.image;
    perfect.mask = pred;

    // second pair built for dice exactly 0.5: keep k = ceil(area/3) predicted
    // pixels and add m = 3k - area outside pixels, so 2k/(area+k+m) = 1/2
    const long area = pred.area();
    const long k = (area + 2) / 3;
    const long m = 3 * k - area;
    LungMask half(pred.rows, pred.cols);
    long kept = 0, added = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        if (pred.data[i] && kept < k) {
            half.data[i] = 1;
            ++kept;
        } else if (!pred.data[i] && added < m) {
            half.data[i] = 1;
            ++added;
        }
    }
    REQUIRE(kept == k);
    REQUIRE(added == m);
    TrainPair halfpair;
    halfpair.name = "half";
    halfpair.image = fresh.image;
    halfpair.mask = half;

    auto report = benchmark_dice(result.model, {perfect, halfpair}, 0.5, true);
    REQUIRE(report.rows.size() == 2);
    CHECK(report.rows[0].dice_score == doctest::Approx(1.0));
    CHECK(report.rows[1].dice_score == doctest::Approx(0.5));
    CHECK(report.mean == doctest::Approx(0.75));

    const std::string csv = benchmark_csv(report);
    CHECK(csv.find("reference,Novikov et al. 2018,0.974") != std::string::npos);
    CHECK(csv.find("reference,Hwang & Park 2017,0.980") != std::string::npos);
    CHECK(csv.find("reference,this architecture (reported),0.988") != std::string::npos);
    CHECK(csv.find("mean,corpus,0.75") != std::string::npos);

    CHECK_THROWS_AS(benchmark_dice(result.model, {}, 0.5, true), ParamError);
}

TEST_CASE("load_pair_dirs pairs by filename and flags gaps") {
    fixtures::TempDir dir("pairs");
    auto p = fixtures::ellipse_pair(32, 32, 0x7777);
    save_image_png(p.image, dir.sub("images/a.png"));
    save_image_png(p.image, dir.sub("images/b.png"));
    Image m(32, 32);
    for (size_t i = 0; i < m.size(); ++i) m.data[i] = p.mask.data[i];
    save_image_png(m, dir.sub("masks/a.png"));
    CHECK_THROWS_WITH_AS(load_pair_dirs(dir.sub("images"), dir.sub("masks")),
                         doctest::Contains("b.png"), DataError);
    save_image_png(m, dir.sub("masks/b.png"));
    auto pairs = load_pair_dirs(dir.sub("images"), dir.sub("masks"), "tag");
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].name == "a.png");
    CHECK(pairs[0].source == "tag");
    CHECK(pairs[0].mask.data == p.mask.data);
}
