#include "unet.hpp"

#include "icufeat/errors.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

namespace icufeat::lungseg::detail {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::MatrixXf;
using MapRow = Eigen::Map<RowMat>;
using MapRowC = Eigen::Map<const RowMat>;
using MapCol = Eigen::Map<ColMat>;

constexpr int kChunk = 16384; // pixels per im2col GEMM slab

// cols(ci*9+ki, p) for pixels [p0,p1), zero padding
void im2col3(const Tensor& x, int p0, int p1, std::vector<float>& cols) {
    const int h = x.h, w = x.w, ic = x.c;
    const int rows = ic * 9;
    for (int p = p0; p < p1; ++p) {
        const int y = p / w, xx = p % w;
        float* col = cols.data() + static_cast<size_t>(p - p0) * rows;
        for (int ci = 0; ci < ic; ++ci) {
            const float* src = x.ch(ci);
            for (int ky = -1; ky <= 1; ++ky) {
                const int yy = y + ky;
                for (int kx = -1; kx <= 1; ++kx) {
                    const int xc = xx + kx;
                    col[ci * 9 + (ky + 1) * 3 + (kx + 1)] =
                        (yy >= 0 && yy < h && xc >= 0 && xc < w) ? src[yy * w + xc] : 0.f;
                }
            }
        }
    }
}

void col2im3_add(const std::vector<float>& cols, int p0, int p1, Tensor& gin) {
    const int h = gin.h, w = gin.w, ic = gin.c;
    const int rows = ic * 9;
    for (int p = p0; p < p1; ++p) {
        const int y = p / w, xx = p % w;
        const float* col = cols.data() + static_cast<size_t>(p - p0) * rows;
        for (int ci = 0; ci < ic; ++ci) {
            float* dst = gin.ch(ci);
            for (int ky = -1; ky <= 1; ++ky) {
                const int yy = y + ky;
                if (yy < 0 || yy >= h) continue;
                for (int kx = -1; kx <= 1; ++kx) {
                    const int xc = xx + kx;
                    if (xc < 0 || xc >= w) continue;
                    dst[yy * w + xc] += col[ci * 9 + (ky + 1) * 3 + (kx + 1)];
                }
            }
        }
    }
}

void relu_from(const Tensor& src, Tensor& dst) {
    dst = src;
    for (float& v : dst.v) v = v > 0.f ? v : 0.f;
}

} // namespace

void Conv::init(int in, int out, int kernel, Rng& rng) {
    in_c = in;
    out_c = out;
    k = kernel;
    const int fan_in = in_c * k * k;
    const double bound = std::sqrt(6.0 / fan_in);
    W.resize(static_cast<size_t>(out_c) * fan_in);
    for (float& w : W) w = static_cast<float>(rng.uniform(-bound, bound));
    b.assign(out_c, 0.f);
}

void Conv::forward(const Tensor& x, Tensor& out, std::vector<float>& scratch) const {
    const int hw = x.h * x.w;
    out = Tensor(out_c, x.h, x.w);
    MapRowC Wm(W.data(), out_c, in_c * k * k);
    MapRow outM(out.v.data(), out_c, hw);

    if (k == 1) {
        MapRowC xM(x.v.data(), in_c, hw);
        outM.noalias() = Wm * xM;
    } else {
        const int rows = in_c * 9;
        scratch.resize(static_cast<size_t>(rows) * std::min(hw, kChunk));
        for (int p0 = 0; p0 < hw; p0 += kChunk) {
            const int p1 = std::min(hw, p0 + kChunk);
            im2col3(x, p0, p1, scratch);
            MapCol colsM(scratch.data(), rows, p1 - p0);
            outM.middleCols(p0, p1 - p0).noalias() = Wm * colsM;
        }
    }
    for (int o = 0; o < out_c; ++o) outM.row(o).array() += b[o];
}

void Conv::backward(const Tensor& x, const Tensor& gout, Tensor* gin, std::vector<float>& gW,
                    std::vector<float>& gb, std::vector<float>& scratch) const {
    const int hw = x.h * x.w;
    MapRowC Wm(W.data(), out_c, in_c * k * k);
    MapRowC goutM(gout.v.data(), out_c, hw);
    MapRow gWm(gW.data(), out_c, in_c * k * k);

    // scalar accumulation: Eigen's vectorized redux orders terms by buffer
    // alignment, which breaks bit-reproducibility across runs
    for (int o = 0; o < out_c; ++o) {
        const float* g = gout.ch(o);
        double acc = 0;
        for (int i = 0; i < hw; ++i) acc += g[i];
        gb[o] += static_cast<float>(acc);
    }

    if (k == 1) {
        MapRowC xM(x.v.data(), in_c, hw);
        gWm.noalias() += goutM * xM.transpose();
        if (gin) {
            *gin = Tensor(in_c, x.h, x.w);
            MapRow ginM(gin->v.data(), in_c, hw);
            ginM.noalias() = Wm.transpose() * goutM;
        }
        return;
    }

    const int rows = in_c * 9;
    scratch.resize(static_cast<size_t>(rows) * std::min(hw, kChunk));
    if (gin) *gin = Tensor(in_c, x.h, x.w); // zeroed
    for (int p0 = 0; p0 < hw; p0 += kChunk) {
        const int p1 = std::min(hw, p0 + kChunk);
        im2col3(x, p0, p1, scratch);
        MapCol colsM(scratch.data(), rows, p1 - p0);
        gWm.noalias() += goutM.middleCols(p0, p1 - p0) * colsM.transpose();
        if (gin) {
            // cols already consumed; reuse the slab for gcols
            colsM.noalias() = Wm.transpose() * goutM.middleCols(p0, p1 - p0);
            col2im3_add(scratch, p0, p1, *gin);
        }
    }
}

void ResBlock::init(int in_c, int out_c, Rng& rng) {
    conv1.init(in_c, out_c, 3, rng);
    conv2.init(out_c, out_c, 3, rng);
    proj.init(in_c, out_c, 1, rng);
}

void ResBlock::forward(const Tensor& x, Tensor& out, BlockWs& ws,
                       std::vector<float>& scratch) const {
    ws.in = x;
    conv1.forward(x, ws.pre1, scratch);
    relu_from(ws.pre1, ws.act1);
    conv2.forward(ws.act1, ws.pre2, scratch);
    Tensor idn;
    proj.forward(x, idn, scratch);
    ws.sum = ws.pre2;
    for (size_t i = 0; i < ws.sum.size(); ++i) ws.sum.v[i] += idn.v[i];
    relu_from(ws.sum, out);
}

void ResBlock::backward(const BlockWs& ws, const Tensor& gout, Tensor& gin, ConvGrad& g1,
                        ConvGrad& g2, ConvGrad& gp, std::vector<float>& scratch) const {
    Tensor gsum = gout;
    for (size_t i = 0; i < gsum.size(); ++i) {
        if (ws.sum.v[i] <= 0.f) gsum.v[i] = 0.f;
    }
    Tensor gact1;
    conv2.backward(ws.act1, gsum, &gact1, g2.gW, g2.gb, scratch);
    for (size_t i = 0; i < gact1.size(); ++i) {
        if (ws.pre1.v[i] <= 0.f) gact1.v[i] = 0.f;
    }
    conv1.backward(ws.in, gact1, &gin, g1.gW, g1.gb, scratch);
    Tensor gproj;
    proj.backward(ws.in, gsum, &gproj, gp.gW, gp.gb, scratch);
    for (size_t i = 0; i < gin.size(); ++i) gin.v[i] += gproj.v[i];
}

namespace {

void maxpool2(const Tensor& x, Tensor& out, std::vector<uint8_t>& arg) {
    out = Tensor(x.c, x.h / 2, x.w / 2);
    arg.assign(out.size(), 0);
    for (int ci = 0; ci < x.c; ++ci) {
        const float* src = x.ch(ci);
        float* dst = out.ch(ci);
        uint8_t* am = arg.data() + static_cast<size_t>(ci) * out.h * out.w;
        for (int y = 0; y < out.h; ++y) {
            for (int xx = 0; xx < out.w; ++xx) {
                float best = -1e30f;
                uint8_t which = 0;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const float v = src[(2 * y + dy) * x.w + 2 * xx + dx];
                        if (v > best) {
                            best = v;
                            which = static_cast<uint8_t>(dy * 2 + dx);
                        }
                    }
                }
                dst[y * out.w + xx] = best;
                am[y * out.w + xx] = which;
            }
        }
    }
}

void maxpool2_backward(const Tensor& gout, const std::vector<uint8_t>& arg, Tensor& gin) {
    // gin pre-sized to the pre-pool shape, zeroed
    for (int ci = 0; ci < gout.c; ++ci) {
        const float* gsrc = gout.ch(ci);
        float* gdst = gin.ch(ci);
        const uint8_t* am = arg.data() + static_cast<size_t>(ci) * gout.h * gout.w;
        for (int y = 0; y < gout.h; ++y) {
            for (int xx = 0; xx < gout.w; ++xx) {
                const uint8_t which = am[y * gout.w + xx];
                const int dy = which / 2, dx = which % 2;
                gdst[(2 * y + dy) * gin.w + 2 * xx + dx] += gsrc[y * gout.w + xx];
            }
        }
    }
}

void upsample2(const Tensor& x, Tensor& out) {
    out = Tensor(x.c, x.h * 2, x.w * 2);
    for (int ci = 0; ci < x.c; ++ci) {
        const float* src = x.ch(ci);
        float* dst = out.ch(ci);
        for (int y = 0; y < out.h; ++y) {
            const float* row = src + (y / 2) * x.w;
            for (int xx = 0; xx < out.w; ++xx) dst[y * out.w + xx] = row[xx / 2];
        }
    }
}

void upsample2_backward(const Tensor& gout, Tensor& gin) {
    gin = Tensor(gout.c, gout.h / 2, gout.w / 2);
    for (int ci = 0; ci < gout.c; ++ci) {
        const float* gsrc = gout.ch(ci);
        float* gdst = gin.ch(ci);
        for (int y = 0; y < gout.h; ++y) {
            for (int xx = 0; xx < gout.w; ++xx) {
                gdst[(y / 2) * gin.w + xx / 2] += gsrc[y * gout.w + xx];
            }
        }
    }
}

void concat(const Tensor& a, const Tensor& b, Tensor& out) {
    out = Tensor(a.c + b.c, a.h, a.w);
    std::copy(a.v.begin(), a.v.end(), out.v.begin());
    std::copy(b.v.begin(), b.v.end(), out.v.begin() + static_cast<long>(a.size()));
}

} // namespace

UNet::UNet(const SegmenterConfig& c) : cfg(c) {
    if (cfg.depth < 1) throw ConfigError("segmenter depth must be >= 1");
    if (cfg.base_channels < 1) throw ConfigError("segmenter base_channels must be >= 1");
    const int div = 1 << cfg.depth;
    if (cfg.input_rows <= 0 || cfg.input_cols <= 0 || cfg.input_rows % div != 0 ||
        cfg.input_cols % div != 0) {
        throw ConfigError("segmenter input size " + std::to_string(cfg.input_rows) + "x" +
                          std::to_string(cfg.input_cols) + " must be divisible by 2^depth = " +
                          std::to_string(div));
    }
    if (cfg.loss != "dice" && cfg.loss != "bce+dice") {
        throw ConfigError("segmenter loss must be 'dice' or 'bce+dice'");
    }

    Rng rng(cfg.seed ^ 0x5e651f0u);
    enc.resize(cfg.depth);
    dec.resize(cfg.depth);
    int in_c = 1;
    for (int i = 0; i < cfg.depth; ++i) {
        const int out_c = cfg.base_channels << i;
        enc[i].init(in_c, out_c, rng);
        in_c = out_c;
    }
    bottleneck.init(cfg.base_channels << (cfg.depth - 1), cfg.base_channels << cfg.depth, rng);
    for (int i = cfg.depth - 1; i >= 0; --i) {
        const int out_c = cfg.base_channels << i;
        dec[i].init(out_c * 3, out_c, rng); // upsampled (2x) + skip (1x) channels
    }
    head.init(cfg.base_channels, 1, 1, rng);
}

std::vector<Conv*> UNet::convs() {
    std::vector<Conv*> out;
    auto add = [&](ResBlock& b) {
        out.push_back(&b.conv1);
        out.push_back(&b.conv2);
        out.push_back(&b.proj);
    };
    for (auto& b : enc) add(b);
    add(bottleneck);
    for (int i = cfg.depth - 1; i >= 0; --i) add(dec[i]);
    out.push_back(&head);
    return out;
}

std::vector<const Conv*> UNet::convs() const {
    auto list = const_cast<UNet*>(this)->convs();
    return {list.begin(), list.end()};
}

size_t UNet::param_floats() const {
    size_t n = 0;
    for (const Conv* c : convs()) n += c->W.size() + c->b.size();
    return n;
}

std::vector<float> UNet::export_params() const {
    std::vector<float> flat;
    flat.reserve(param_floats());
    for (const Conv* c : convs()) {
        flat.insert(flat.end(), c->W.begin(), c->W.end());
        flat.insert(flat.end(), c->b.begin(), c->b.end());
    }
    return flat;
}

void UNet::import_params(const std::vector<float>& flat) {
    if (flat.size() != param_floats()) {
        throw ConfigError("checkpoint holds " + std::to_string(flat.size()) +
                          " weights, model expects " + std::to_string(param_floats()));
    }
    size_t pos = 0;
    for (Conv* c : convs()) {
        std::copy(flat.begin() + pos, flat.begin() + pos + c->W.size(), c->W.begin());
        pos += c->W.size();
        std::copy(flat.begin() + pos, flat.begin() + pos + c->b.size(), c->b.begin());
        pos += c->b.size();
    }
}

void UNet::forward(const Tensor& x, Workspace& ws) const {
    ws.enc.resize(cfg.depth);
    ws.dec.resize(cfg.depth);
    ws.pool_arg.resize(cfg.depth);

    Tensor cur = x;
    for (int i = 0; i < cfg.depth; ++i) {
        Tensor out;
        enc[i].forward(cur, out, ws.enc[i], ws.scratch);
        maxpool2(out, cur, ws.pool_arg[i]);
    }
    Tensor y;
    bottleneck.forward(cur, y, ws.bottleneck, ws.scratch);
    for (int i = cfg.depth - 1; i >= 0; --i) {
        Tensor up;
        upsample2(y, up);
        Tensor skip;
        relu_from(ws.enc[i].sum, skip);
        Tensor cat;
        concat(up, skip, cat);
        dec[i].forward(cat, y, ws.dec[i], ws.scratch);
    }
    ws.head_in = y;
    head.forward(y, ws.logits, ws.scratch);
}

void UNet::backward(Workspace& ws, const Tensor& glogits, Grads& grads) const {
    // grads align with convs(): per block conv1, conv2, proj
    auto& scratch = ws.scratch;
    auto block_grads = [&grads](size_t base) -> std::tuple<ConvGrad&, ConvGrad&, ConvGrad&> {
        return {grads[base], grads[base + 1], grads[base + 2]};
    };
    const size_t enc_base = 0;
    const size_t bott_base = static_cast<size_t>(cfg.depth) * 3;
    const size_t dec_base = bott_base + 3; // dec blocks stored deepest-first
    const size_t head_base = dec_base + static_cast<size_t>(cfg.depth) * 3;

    Tensor gy;
    head.backward(ws.head_in, glogits, &gy, grads[head_base].gW, grads[head_base].gb, scratch);

    std::vector<Tensor> gskip(cfg.depth);
    for (int i = 0; i < cfg.depth; ++i) {
        // dec grads for level i live at dec_base + (depth-1-i)*3
        const size_t base = dec_base + static_cast<size_t>(cfg.depth - 1 - i) * 3;
        auto [g1, g2, gp] = block_grads(base);
        Tensor gcat;
        dec[i].backward(ws.dec[i], gy, gcat, g1, g2, gp, scratch);
        // split: first part is the upsampled path, rest is the skip
        const int up_c = gcat.c - (cfg.base_channels << i);
        Tensor gup(up_c, gcat.h, gcat.w);
        std::copy(gcat.v.begin(), gcat.v.begin() + static_cast<long>(gup.size()), gup.v.begin());
        gskip[i] = Tensor(cfg.base_channels << i, gcat.h, gcat.w);
        std::copy(gcat.v.begin() + static_cast<long>(gup.size()), gcat.v.end(),
                  gskip[i].v.begin());
        upsample2_backward(gup, gy);
    }

    {
        auto [g1, g2, gp] = block_grads(bott_base);
        Tensor gx;
        bottleneck.backward(ws.bottleneck, gy, gx, g1, g2, gp, scratch);
        gy = std::move(gx);
    }

    for (int i = cfg.depth - 1; i >= 0; --i) {
        Tensor ge(ws.enc[i].sum.c, ws.enc[i].sum.h, ws.enc[i].sum.w);
        maxpool2_backward(gy, ws.pool_arg[i], ge);
        for (size_t j = 0; j < ge.size(); ++j) ge.v[j] += gskip[i].v[j];
        auto [g1, g2, gp] = block_grads(enc_base + static_cast<size_t>(i) * 3);
        Tensor gx;
        enc[i].backward(ws.enc[i], ge, gx, g1, g2, gp, scratch);
        gy = std::move(gx);
    }
}

Grads UNet::make_grads() const {
    Grads g;
    for (const Conv* c : convs()) {
        ConvGrad cg;
        cg.gW.assign(c->W.size(), 0.f);
        cg.gb.assign(c->b.size(), 0.f);
        g.push_back(std::move(cg));
    }
    return g;
}

void UNet::add_grads(Grads& acc, const Grads& item) {
    for (size_t i = 0; i < acc.size(); ++i) {
        for (size_t j = 0; j < acc[i].gW.size(); ++j) acc[i].gW[j] += item[i].gW[j];
        for (size_t j = 0; j < acc[i].gb.size(); ++j) acc[i].gb[j] += item[i].gb[j];
    }
}

void sigmoid_inplace(std::vector<float>& v) {
    for (float& z : v) {
        if (z >= 0.f) {
            z = 1.f / (1.f + std::exp(-z));
        } else {
            const float e = std::exp(z);
            z = e / (1.f + e);
        }
    }
}

Image UNet::forward_prob(const Image& input) const {
    if (input.rows != cfg.input_rows || input.cols != cfg.input_cols) {
        throw DataError("segmenter input must be " + std::to_string(cfg.input_rows) + "x" +
                        std::to_string(cfg.input_cols));
    }
    Tensor x(1, input.rows, input.cols);
    std::copy(input.data.begin(), input.data.end(), x.v.begin());
    Workspace ws;
    forward(x, ws);
    sigmoid_inplace(ws.logits.v);
    Image out(input.rows, input.cols);
    std::copy(ws.logits.v.begin(), ws.logits.v.end(), out.data.begin());
    return out;
}

Adam::Adam(const UNet& net, double lr_) : lr(lr_) {
    m = net.make_grads();
    v = net.make_grads();
}

void Adam::step(UNet& net, const Grads& grads, double scale) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    auto convs = net.convs();
    for (size_t i = 0; i < convs.size(); ++i) {
        auto update = [&](std::vector<float>& param, const std::vector<float>& g,
                          std::vector<float>& mm, std::vector<float>& vv) {
            for (size_t j = 0; j < param.size(); ++j) {
                const double gj = static_cast<double>(g[j]) * scale;
                mm[j] = static_cast<float>(beta1 * mm[j] + (1.0 - beta1) * gj);
                vv[j] = static_cast<float>(beta2 * vv[j] + (1.0 - beta2) * gj * gj);
                const double mhat = mm[j] / bc1;
                const double vhat = vv[j] / bc2;
                param[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        };
        update(convs[i]->W, grads[i].gW, m[i].gW, v[i].gW);
        update(convs[i]->b, grads[i].gb, m[i].gb, v[i].gb);
    }
}

} // namespace icufeat::lungseg::detail
