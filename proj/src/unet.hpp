#pragma once

// Internal training/inference machinery for the lung segmenter. im2col +
// GEMM convolutions, explicit backward passes, Adam. Single image per call;
// batch parallelism lives in the training loop.

#include "icufeat/lungseg.hpp"
#include "icufeat/rng.hpp"

#include <vector>

namespace icufeat::lungseg::detail {

struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<float> v; // planar, channel-major

    Tensor() = default;
    Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_) {}
    float* ch(int i) { return v.data() + static_cast<size_t>(i) * h * w; }
    const float* ch(int i) const { return v.data() + static_cast<size_t>(i) * h * w; }
    size_t size() const { return v.size(); }
    void zero() { std::fill(v.begin(), v.end(), 0.f); }
};

struct Conv {
    int in_c = 0, out_c = 0, k = 1; // k in {1,3}, stride 1, pad (k-1)/2
    std::vector<float> W;           // row-major out_c × in_c*k*k
    std::vector<float> b;

    void init(int in, int out, int kernel, Rng& rng);
    void forward(const Tensor& x, Tensor& out, std::vector<float>& scratch) const;
    void backward(const Tensor& x, const Tensor& gout, Tensor* gin, std::vector<float>& gW,
                  std::vector<float>& gb, std::vector<float>& scratch) const;
};

struct ConvGrad {
    std::vector<float> gW, gb;
};

struct BlockWs {
    Tensor in, pre1, act1, pre2, sum;
};

// conv3 -> relu -> conv3, plus a 1x1-projected identity, relu after the add
struct ResBlock {
    Conv conv1, conv2, proj;

    void init(int in_c, int out_c, Rng& rng);
    void forward(const Tensor& x, Tensor& out, BlockWs& ws, std::vector<float>& scratch) const;
    void backward(const BlockWs& ws, const Tensor& gout, Tensor& gin, ConvGrad& g1, ConvGrad& g2,
                  ConvGrad& gp, std::vector<float>& scratch) const;
};

struct Workspace {
    std::vector<BlockWs> enc;
    std::vector<std::vector<uint8_t>> pool_arg;
    BlockWs bottleneck;
    std::vector<BlockWs> dec; // indexed by level
    Tensor head_in;
    Tensor logits;
    std::vector<float> scratch;
};

using Grads = std::vector<ConvGrad>; // aligned with UNet::convs()

struct UNet {
    SegmenterConfig cfg;
    std::vector<ResBlock> enc;
    ResBlock bottleneck;
    std::vector<ResBlock> dec; // indexed by level
    Conv head;

    explicit UNet(const SegmenterConfig& cfg); // validates sizes, seeds weights

    std::vector<Conv*> convs();
    std::vector<const Conv*> convs() const;
    size_t param_floats() const;
    std::vector<float> export_params() const;
    void import_params(const std::vector<float>& flat);

    void forward(const Tensor& x, Workspace& ws) const; // fills ws.logits
    void backward(Workspace& ws, const Tensor& glogits, Grads& grads) const;

    Grads make_grads() const;
    static void add_grads(Grads& acc, const Grads& item);

    Image forward_prob(const Image& input) const; // input at cfg size
};

struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long t = 0;
    Grads m, v;

    explicit Adam(const UNet& net, double lr_);
    void step(UNet& net, const Grads& grads, double scale);
};

void sigmoid_inplace(std::vector<float>& v);

} // namespace icufeat::lungseg::detail
