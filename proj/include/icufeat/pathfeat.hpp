#pragma once

#include "icufeat/cohort.hpp"
#include "icufeat/featuretable.hpp"
#include "icufeat/image.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace icufeat::pathfeat {

/// Fixed output-node labels of the pathology scorer; this order names feature
/// columns everywhere.
const std::array<std::string, 18>& pathology_labels();
int pathology_index(const std::string& label); // throws ParamError listing valid labels

enum class Capability { mid, last, gradients };

/// Contract for a pluggable pathology-scoring backend. Mid features are the
/// 1024 activations of the layer previous to last; last features are the 18
/// pre-sigmoid pathology logits; input_gradient is d(logit)/d(pixel) for one
/// output node at the adapter's input size.
class ExtractorAdapter {
public:
    virtual ~ExtractorAdapter() = default;

    virtual std::pair<int, int> input_size() const = 0; // (rows, cols)
    virtual bool has(Capability cap) const = 0;
    virtual std::string fingerprint() const = 0;

    virtual std::vector<double> extract_mid(const Image& img) const = 0;  // length 1024
    virtual std::vector<double> extract_last(const Image& img) const = 0; // length 18

    /// Signed gradient of the node's pre-sigmoid logit; default for backends
    /// without gradient support.
    virtual Image input_gradient(const Image& img, int node) const;

protected:
    void require_input(const Image& img) const;
};

/// Deterministic, differentiable test backend: fixed seeded random linear
/// projections of the 32×32 block-mean of the input. Carries every
/// capability so the full suite runs without pretrained weights.
class StubAdapter final : public ExtractorAdapter {
public:
    explicit StubAdapter(uint64_t seed = 20200906);

    std::pair<int, int> input_size() const override { return {224, 224}; }
    bool has(Capability) const override { return true; }
    std::string fingerprint() const override;

    std::vector<double> extract_mid(const Image& img) const override;
    std::vector<double> extract_last(const Image& img) const override;
    Image input_gradient(const Image& img, int node) const override;

private:
    uint64_t seed_;
    std::vector<double> w_mid_;  // 1024 x 1024
    std::vector<double> w_last_; // 18 x 1024
};

/// ONNX-backed adapter via the OpenCV dnn runtime. Supplies mid and last
/// features from named layers; input gradients are not available from this
/// backend, so gradient-mode extraction reports a capability error.
class OnnxAdapter final : public ExtractorAdapter {
public:
    OnnxAdapter(const std::string& weights_path, int input_side = 224,
                const std::string& mid_layer = "", const std::string& last_layer = "");
    ~OnnxAdapter() override;

    std::pair<int, int> input_size() const override;
    bool has(Capability cap) const override;
    std::string fingerprint() const override;

    std::vector<double> extract_mid(const Image& img) const override;
    std::vector<double> extract_last(const Image& img) const override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Per-pixel energy of the input gradient for one pathology node, normalized
/// to a probability distribution. A zero-gradient map degenerates to the
/// uniform distribution and is flagged.
struct GradientMap {
    std::string node_label;
    ImageD energy; // non-negative, sums to 1
    std::string image_id;
    bool degenerate = false;
};

GradientMap gradient_map(const ExtractorAdapter& adapter, const Image& img,
                         const std::string& node_label, const std::string& image_id = "");

enum class Cut { left, right, superior, inferior };
const char* cut_name(Cut cut);

struct EntropyFeature {
    std::string node_label;
    Cut cut = Cut::left;
    double value = 0.0; // -sum p ln p over the cut, 0*ln0 = 0
};

/// Shannon entropy of the map restricted to a half-plane. Half-planes split
/// at the midlines; the middle row/column of odd dimensions belongs to
/// superior/left.
EntropyFeature cut_entropy(const GradientMap& map, Cut cut);

/// Total probability mass inside a cut (diagnostic for the partition
/// property left+right = superior+inferior = 1).
double cut_mass(const GradientMap& map, Cut cut);

/// mode "mid" -> 1024 columns, "last" -> 18 pathology columns, "gradient" ->
/// 72 "<pathology>/<cut>" columns. Images are resized to the adapter's input
/// size; rows that fail extraction are skipped and reported via `skipped`.
FeatureTable build_feature_table(const std::vector<cohort::ImageRecord>& records,
                                 const ExtractorAdapter& adapter, const std::string& mode,
                                 std::vector<std::string>* skipped = nullptr);

} // namespace icufeat::pathfeat
