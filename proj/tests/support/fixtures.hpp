#pragma once

#include "icufeat/featuretable.hpp"
#include "icufeat/image.hpp"
#include "icufeat/imgproc.hpp"
#include "icufeat/lungseg.hpp"
#include "icufeat/rng.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fixtures {

using icufeat::FeatureTable;
using icufeat::Image;
using icufeat::Rng;

/// Unique scratch directory under the system temp root; removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag);
    ~TempDir();
    std::string str() const { return path.string(); }
    std::string sub(const std::string& rel) const;
};

Image noise_image(int rows, int cols, uint64_t seed, float lo = 0.f, float hi = 1.f);

/// Horizontal gradient with a faint checker spot, for local-contrast checks.
Image gradient_spot_image(int rows, int cols, int spot_row, int spot_col, int spot_size,
                          float amplitude);

/// Random soft blobs in [0,1], usable as a raw segmentation probability map.
Image blob_prob_map(int rows, int cols, uint64_t seed, int blobs = 4);

/// Synthetic chest-like pair: two bright ellipse "lungs" over a noisy darker
/// background with a corner marker artifact; gold mask = ellipse interiors.
struct EllipsePair {
    Image image;
    icufeat::imgproc::LungMask mask;
};
EllipsePair ellipse_pair(int rows, int cols, uint64_t seed);
std::vector<icufeat::lungseg::TrainPair> ellipse_corpus(int n, int rows, int cols, uint64_t seed);

/// Feature table with uniform random values; duplicate-prone when quantize>0.
FeatureTable random_table(int rows, int features, uint64_t seed, int quantize = 0,
                          bool random_labels = true);

/// Perfectly separable table: feature 0 carries the label with a wide gap.
FeatureTable separable_table(int rows_per_class, int features, uint64_t seed);

/// Grouped table for cross-validation tests: `groups_per_class` groups of
/// `rows_per_group` rows each (first row of each group is the source image).
FeatureTable grouped_table(int groups_per_class, int rows_per_group, int features, uint64_t seed,
                           bool separable);

/// Synthetic annotated label sets drawn from a small vocabulary.
std::vector<std::vector<std::string>> token_corpus(int n, uint64_t seed);

/// Writes a complete miniature pipeline fixture (cohort manifest + images,
/// external manifest + images, lexicon, segmenter checkpoint, config) and
/// returns the config path.
std::string write_pipeline_fixture(const TempDir& dir, int cohort_images = 20,
                                   int external_images = 30);

} // namespace fixtures
