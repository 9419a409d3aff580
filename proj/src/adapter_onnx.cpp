#include "icufeat/pathfeat.hpp"

#include "icufeat/errors.hpp"
#include "icufeat/sha256.hpp"

#include <filesystem>

#include <opencv2/dnn.hpp>

namespace icufeat::pathfeat {

struct OnnxAdapter::Impl {
    mutable cv::dnn::Net net;
    int side = 224;
    std::string mid_layer;
    std::string last_layer;
    std::string digest;
};

OnnxAdapter::OnnxAdapter(const std::string& weights_path, int input_side,
                         const std::string& mid_layer, const std::string& last_layer)
    : impl_(std::make_unique<Impl>()) {
    if (!std::filesystem::exists(weights_path)) {
        throw ConfigError("pathology model weights not found: " + weights_path);
    }
    try {
        impl_->net = cv::dnn::readNetFromONNX(weights_path);
    } catch (const cv::Exception& e) {
        throw ConfigError("cannot load ONNX model " + weights_path + ": " + e.what());
    }
    impl_->side = input_side;
    impl_->mid_layer = mid_layer;
    impl_->last_layer = last_layer;
    impl_->digest = "onnx:sha256=" + sha256_file_hex(weights_path);
}

OnnxAdapter::~OnnxAdapter() = default;

std::pair<int, int> OnnxAdapter::input_size() const { return {impl_->side, impl_->side}; }

bool OnnxAdapter::has(Capability cap) const {
    switch (cap) {
        case Capability::mid: return !impl_->mid_layer.empty();
        case Capability::last: return true;
        case Capability::gradients: return false; // no autograd in this runtime
    }
    return false;
}

std::string OnnxAdapter::fingerprint() const { return impl_->digest; }

namespace {

std::vector<double> flatten(const cv::Mat& m, size_t expected, const std::string& what) {
    cv::Mat flat = m.reshape(1, 1);
    if (static_cast<size_t>(flat.total()) != expected) {
        throw DataError("ONNX adapter: " + what + " produced " + std::to_string(flat.total()) +
                        " values, expected " + std::to_string(expected));
    }
    std::vector<double> out(expected);
    for (size_t i = 0; i < expected; ++i) out[i] = flat.at<float>(0, static_cast<int>(i));
    return out;
}

} // namespace

std::vector<double> OnnxAdapter::extract_mid(const Image& img) const {
    if (!has(Capability::mid)) {
        throw CapabilityError("ONNX adapter was built without a mid-layer name");
    }
    require_input(img);
    cv::Mat in(img.rows, img.cols, CV_32F, const_cast<float*>(img.data.data()));
    cv::Mat blob = cv::dnn::blobFromImage(in);
    impl_->net.setInput(blob);
    cv::Mat out = impl_->net.forward(impl_->mid_layer);
    return flatten(out, 1024, "mid layer '" + impl_->mid_layer + "'");
}

std::vector<double> OnnxAdapter::extract_last(const Image& img) const {
    require_input(img);
    cv::Mat in(img.rows, img.cols, CV_32F, const_cast<float*>(img.data.data()));
    cv::Mat blob = cv::dnn::blobFromImage(in);
    impl_->net.setInput(blob);
    cv::Mat out = impl_->last_layer.empty() ? impl_->net.forward()
                                            : impl_->net.forward(impl_->last_layer);
    return flatten(out, pathology_labels().size(), "last layer");
}

} // namespace icufeat::pathfeat
