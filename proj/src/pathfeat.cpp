#include "icufeat/pathfeat.hpp"

#include "icufeat/errors.hpp"
#include "icufeat/rng.hpp"

#include <algorithm>
#include <cmath>

namespace icufeat::pathfeat {

const std::array<std::string, 18>& pathology_labels() {
    static const std::array<std::string, 18> labels = {
        "Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Effusion", "Emphysema",
        "Enlarged Cardiomediastinum", "Fibrosis", "Fracture", "Hernia", "Infiltration",
        "Lung Lesion", "Lung Opacity", "Mass", "Nodule", "Pleural Thickening", "Pneumonia",
        "Pneumothorax"};
    return labels;
}

int pathology_index(const std::string& label) {
    const auto& labels = pathology_labels();
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == label) return static_cast<int>(i);
    }
    std::string valid;
    for (const auto& l : labels) {
        if (!valid.empty()) valid += ", ";
        valid += l;
    }
    throw ParamError("unknown pathology label '" + label + "'; valid labels: " + valid);
}

void ExtractorAdapter::require_input(const Image& img) const {
    auto [rows, cols] = input_size();
    if (img.rows != rows || img.cols != cols) {
        throw DataError("adapter expects " + std::to_string(rows) + "x" + std::to_string(cols) +
                        " input, got " + std::to_string(img.rows) + "x" +
                        std::to_string(img.cols));
    }
}

Image ExtractorAdapter::input_gradient(const Image&, int) const {
    throw CapabilityError("adapter '" + fingerprint() + "' does not provide input gradients");
}

// ---------------------------------------------------------------------------
// StubAdapter

namespace {
constexpr int kStubSide = 32;
constexpr int kStubDim = kStubSide * kStubSide; // 1024
constexpr int kBlock = 7;                       // 224 / 32
} // namespace

StubAdapter::StubAdapter(uint64_t seed) : seed_(seed) {
    Rng rng(seed);
    const double scale = 0.05;
    w_mid_.resize(static_cast<size_t>(kStubDim) * kStubDim);
    for (double& w : w_mid_) w = rng.uniform(-scale, scale);
    w_last_.resize(static_cast<size_t>(pathology_labels().size()) * kStubDim);
    for (double& w : w_last_) w = rng.uniform(-scale, scale);
}

std::string StubAdapter::fingerprint() const {
    return "stub:seed=" + std::to_string(seed_);
}

std::vector<double> StubAdapter::extract_mid(const Image& img) const {
    require_input(img);
    Image x = block_mean(img, kBlock);
    std::vector<double> out(kStubDim, 0.0);
    for (int o = 0; o < kStubDim; ++o) {
        double acc = 0;
        const double* w = &w_mid_[static_cast<size_t>(o) * kStubDim];
        for (int i = 0; i < kStubDim; ++i) acc += w[i] * x.data[i];
        out[o] = acc;
    }
    return out;
}

std::vector<double> StubAdapter::extract_last(const Image& img) const {
    require_input(img);
    Image x = block_mean(img, kBlock);
    const int n = static_cast<int>(pathology_labels().size());
    std::vector<double> out(n, 0.0);
    for (int o = 0; o < n; ++o) {
        double acc = 0;
        const double* w = &w_last_[static_cast<size_t>(o) * kStubDim];
        for (int i = 0; i < kStubDim; ++i) acc += w[i] * x.data[i];
        out[o] = acc;
    }
    return out;
}

Image StubAdapter::input_gradient(const Image& img, int node) const {
    require_input(img);
    if (node < 0 || node >= static_cast<int>(pathology_labels().size())) {
        throw ParamError("input_gradient: node index out of range");
    }
    // d logit / d pixel: the block's weight spread over its 7x7 pixels
    Image g(img.rows, img.cols);
    const double* w = &w_last_[static_cast<size_t>(node) * kStubDim];
    const double inv = 1.0 / (kBlock * kBlock);
    for (int r = 0; r < img.rows; ++r) {
        for (int c = 0; c < img.cols; ++c) {
            const int b = (r / kBlock) * kStubSide + (c / kBlock);
            g.at(r, c) = static_cast<float>(w[b] * inv);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Gradient energy maps and cut entropies

GradientMap gradient_map(const ExtractorAdapter& adapter, const Image& img,
                         const std::string& node_label, const std::string& image_id) {
    if (!adapter.has(Capability::gradients)) {
        throw CapabilityError("adapter '" + adapter.fingerprint() +
                              "' has no gradient capability");
    }
    const int node = pathology_index(node_label);
    Image g = adapter.input_gradient(img, node);

    GradientMap map;
    map.node_label = node_label;
    map.image_id = image_id;
    map.energy = ImageD(g.rows, g.cols);

    double total = 0.0;
    for (size_t i = 0; i < g.size(); ++i) {
        const double e = static_cast<double>(g.data[i]) * g.data[i];
        map.energy.data[i] = e;
        total += e;
    }
    if (!(total > 0.0) || !std::isfinite(total)) {
        // degenerate: substitute the uniform distribution and flag the row
        const double u = 1.0 / static_cast<double>(g.size());
        std::fill(map.energy.data.begin(), map.energy.data.end(), u);
        map.degenerate = true;
        return map;
    }
    const double inv = 1.0 / total;
    for (double& e : map.energy.data) e *= inv;
    return map;
}

const char* cut_name(Cut cut) {
    switch (cut) {
        case Cut::left: return "left";
        case Cut::right: return "right";
        case Cut::superior: return "superior";
        case Cut::inferior: return "inferior";
    }
    return "?";
}

namespace {

// [r0,r1) x [c0,c1); the middle row/column of odd dimensions goes to the
// first half
void cut_bounds(const ImageD& map, Cut cut, int& r0, int& r1, int& c0, int& c1) {
    r0 = 0;
    r1 = map.rows;
    c0 = 0;
    c1 = map.cols;
    const int row_split = (map.rows + 1) / 2;
    const int col_split = (map.cols + 1) / 2;
    switch (cut) {
        case Cut::left: c1 = col_split; break;
        case Cut::right: c0 = col_split; break;
        case Cut::superior: r1 = row_split; break;
        case Cut::inferior: r0 = row_split; break;
    }
}

} // namespace

EntropyFeature cut_entropy(const GradientMap& map, Cut cut) {
    int r0, r1, c0, c1;
    cut_bounds(map.energy, cut, r0, r1, c0, c1);
    double e = 0.0;
    for (int r = r0; r < r1; ++r) {
        for (int c = c0; c < c1; ++c) {
            const double p = map.energy.at(r, c);
            if (p > 0.0) e -= p * std::log(p);
        }
    }
    return {map.node_label, cut, e};
}

double cut_mass(const GradientMap& map, Cut cut) {
    int r0, r1, c0, c1;
    cut_bounds(map.energy, cut, r0, r1, c0, c1);
    double m = 0.0;
    for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) m += map.energy.at(r, c);
    return m;
}

// ---------------------------------------------------------------------------
// Feature tables

FeatureTable build_feature_table(const std::vector<cohort::ImageRecord>& records,
                                 const ExtractorAdapter& adapter, const std::string& mode,
                                 std::vector<std::string>* skipped) {
    FeatureTable t;
    t.mode = mode;
    t.adapter_fingerprint = adapter.fingerprint();

    const auto& labels = pathology_labels();
    if (mode == "mid") {
        if (!adapter.has(Capability::mid)) {
            throw CapabilityError("adapter '" + adapter.fingerprint() + "' has no mid capability");
        }
        t.columns.reserve(1024);
        for (int i = 0; i < 1024; ++i) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "mid_%04d", i);
            t.columns.emplace_back(buf);
        }
    } else if (mode == "last") {
        if (!adapter.has(Capability::last)) {
            throw CapabilityError("adapter '" + adapter.fingerprint() + "' has no last capability");
        }
        t.columns.assign(labels.begin(), labels.end());
    } else if (mode == "gradient") {
        if (!adapter.has(Capability::gradients)) {
            throw CapabilityError("adapter '" + adapter.fingerprint() +
                                  "' has no gradient capability");
        }
        for (const auto& label : labels) {
            for (Cut cut : {Cut::left, Cut::right, Cut::superior, Cut::inferior}) {
                t.columns.push_back(label + "/" + cut_name(cut));
            }
        }
    } else {
        throw ParamError("build_feature_table: mode must be mid, last or gradient, got '" +
                         mode + "'");
    }

    auto [rows, cols] = adapter.input_size();
    for (const auto& rec : records) {
        FeatureTable::Row row;
        row.image_id = rec.image_id;
        row.group_id = rec.group_id;
        row.class_label = rec.class_label;
        row.augmented = rec.augmented();
        try {
            Image input = (rec.pixels.rows == rows && rec.pixels.cols == cols)
                              ? rec.pixels
                              : resize_bilinear(rec.pixels, rows, cols);
            if (mode == "mid") {
                row.values = adapter.extract_mid(input);
            } else if (mode == "last") {
                row.values = adapter.extract_last(input);
            } else {
                row.values.reserve(t.columns.size());
                for (const auto& label : labels) {
                    GradientMap map = gradient_map(adapter, input, label, rec.image_id);
                    row.flagged = row.flagged || map.degenerate;
                    for (Cut cut : {Cut::left, Cut::right, Cut::superior, Cut::inferior}) {
                        row.values.push_back(cut_entropy(map, cut).value);
                    }
                }
            }
        } catch (const PipelineError& e) {
            if (skipped) skipped->push_back(rec.image_id + ": " + e.what());
            continue;
        }
        if (row.values.size() != t.columns.size()) {
            throw DataError("adapter returned " + std::to_string(row.values.size()) +
                            " values for mode " + mode + ", expected " +
                            std::to_string(t.columns.size()));
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

} // namespace icufeat::pathfeat
