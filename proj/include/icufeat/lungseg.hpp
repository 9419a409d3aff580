#pragma once

#include "icufeat/image.hpp"
#include "icufeat/imgproc.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace icufeat::lungseg {

struct SegmenterConfig {
    int input_rows = 256;
    int input_cols = 256;
    int depth = 4;          // encoder stages; input size must divide by 2^depth
    int base_channels = 16; // channels at the first stage, doubled per stage
    std::string loss = "bce+dice"; // or "dice"
    int epochs = 20;
    int batch = 4;
    double learning_rate = 1e-3;
    uint64_t seed = 0;
    double val_fraction = 0.1; // held out per source corpus
    int threads = 0;           // 0 = hardware concurrency
};

namespace detail {
struct UNet;
}

/// Encoder-decoder segmenter with intra-block residual additions and
/// encoder-to-decoder concatenation skips; single-channel sigmoid output at
/// the configured input size.
class Segmenter {
public:
    explicit Segmenter(const SegmenterConfig& cfg); // throws ConfigError on bad sizes
    ~Segmenter();
    Segmenter(Segmenter&&) noexcept;
    Segmenter& operator=(Segmenter&&) noexcept;

    const SegmenterConfig& config() const { return cfg_; }

    /// Probability map for an input already at the configured size.
    Image forward(const Image& input) const;

    detail::UNet& net() { return *net_; }
    const detail::UNet& net() const { return *net_; }

private:
    SegmenterConfig cfg_;
    std::unique_ptr<detail::UNet> net_;
};

struct TrainPair {
    Image image;
    imgproc::LungMask mask;
    std::string name;
    std::string source; // corpus tag used for the stratified validation split
};

struct EpochStats {
    double train_loss = 0.0;
    double val_dice = 0.0;
};

struct TrainResult {
    Segmenter model; // weights of the best validation epoch
    std::vector<EpochStats> history;
    int best_epoch = 0; // 0-based index into history
    double best_val_dice = 0.0;
};

/// Deterministic given cfg.seed. History holds one entry per epoch; the
/// returned model carries the best-epoch weights.
TrainResult train_segmenter(const std::vector<TrainPair>& pairs, const SegmenterConfig& cfg);

/// 2|a∩b| / (|a|+|b|); two empty masks score 1.0.
double dice(const imgproc::LungMask& a, const imgproc::LungMask& b);

/// Resizes the image to the model's input size and the probability map back
/// to the original dimensions.
Image segment(const Segmenter& model, const Image& image);

/// Single-file checkpoint: magic, JSON config header, raw float32 weights.
void save_checkpoint(const Segmenter& model, const std::string& path, int best_epoch = 0,
                     double best_val_dice = 0.0);
Segmenter load_checkpoint(const std::string& path);

struct BenchmarkRow {
    std::string name;
    double dice_score = 0.0;
};

struct BenchmarkReport {
    std::vector<BenchmarkRow> rows;
    double mean = 0.0;
};

/// Per-image and mean dice of thresholded (optionally cleaned) predictions.
BenchmarkReport benchmark_dice(const Segmenter& model, const std::vector<TrainPair>& corpus,
                               double threshold = 0.5, bool cleanup = true);

/// CSV with kind,name,dice rows: per-image scores, the corpus mean, then
/// published reference coefficients for context.
std::string benchmark_csv(const BenchmarkReport& report);

/// Paired directories with matching filenames.
std::vector<TrainPair> load_pair_dirs(const std::string& images_dir, const std::string& masks_dir,
                                      const std::string& source_tag = "");

} // namespace icufeat::lungseg
