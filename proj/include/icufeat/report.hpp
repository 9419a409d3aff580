#pragma once

#include "icufeat/cohort.hpp"
#include "icufeat/corrext.hpp"
#include "icufeat/imgproc.hpp"
#include "icufeat/pathfeat.hpp"
#include "icufeat/treelab.hpp"

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace icufeat::report {

/// Everything a full run needs; serialized as a single JSON file and echoed
/// verbatim into the output directory.
struct PipelineConfig {
    // paths
    std::string cohort_manifest;
    std::string images_dir;
    std::string external_manifest;
    std::string external_images_dir;
    std::string weights;         // segmenter checkpoint
    std::string adapter_weights; // pathology model (ONNX) for adapter "real"
    std::string output_dir;
    std::string lexicon_file; // optional localization lexicon, one token per line

    cohort::ManifestColumns cohort_columns;
    corrext::ExternalColumns external_columns;

    // preprocessing
    std::vector<std::string> equalize_order = {"standard", "adaptive"};
    double clahe_clip = 2.0;
    std::pair<int, int> clahe_grid = {8, 8};
    double mask_threshold = 0.5;
    imgproc::CleanupParams cleanup;
    double crop_margin = 0.03;
    bool zero_outside = true;

    // augmentation
    int augment_multiplier = 10;
    cohort::AugmentParams augment;

    // tree
    int min_leaf = 20;
    int max_depth = 4;

    // features
    std::string mode = "last";  // mid | last | gradient
    std::string adapter = "stub"; // stub | real
    uint64_t stub_seed = 20200906;
    int onnx_input_side = 224;
    std::string onnx_mid_layer;
    std::string onnx_last_layer;

    // external correlation
    int min_count = 20;
    double ratio_hi = 1.2;
    double ratio_lo = 0.8;
    int null_trials = 200;

    // gradient surface
    std::string surface_node = "auto"; // auto = the fitted tree's root pathology
    int surface_grid = 128;

    uint64_t seed = 7;

    static PipelineConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    static PipelineConfig load(const std::string& path);
};

/// Stage names in execution order: ingest, equalize, segment, crop, extract,
/// fit, crossval, correlate, surface.
const std::vector<std::string>& pipeline_stages();

struct RunOptions {
    bool resume = false;      // skip stages whose checkpoint matches the config
    std::string stop_after;   // run up to and including this stage
    std::string config_text;  // original config bytes, echoed into the run
    bool quiet = false;
};

/// Runs the staged pipeline and writes the artifact manifest. Stage failures
/// abort with the stage name and the last completed checkpoint.
std::string run_pipeline(const PipelineConfig& cfg, const RunOptions& opts = {});

std::string render_tree_text(const treelab::TreeModel& model);
std::string render_tree_dot(const treelab::TreeModel& model);

struct SurfaceResult {
    int grid = 128;
    std::vector<double> matrix; // grid*grid, sums to 1
    long map_count = 0;

    double at(int r, int c) const { return matrix[static_cast<size_t>(r) * grid + c]; }
};

/// Element-wise mean of the maps after resampling to a common grid and
/// renormalizing each to unit mass.
SurfaceResult average_gradient_surface(const std::vector<pathfeat::GradientMap>& maps,
                                       int grid = 128);
std::string surface_csv(const SurfaceResult& surface);
void save_surface_png(const SurfaceResult& surface, const std::string& path);

std::unique_ptr<pathfeat::ExtractorAdapter> make_adapter(const PipelineConfig& cfg);

} // namespace icufeat::report
