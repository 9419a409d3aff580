#pragma once

#include "icufeat/image.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace icufeat::cohort {

enum class TriState { yes, no, unknown };

/// One manifest row. Tri-states are parsed only from the literal tokens
/// Y / N / empty; anything else is rejected rather than guessed.
struct CohortRecord {
    std::string image_id;
    std::string patient_id;
    TriState went_icu = TriState::unknown;
    TriState in_icu = TriState::unknown;
    std::string image_path;
    std::string view; // optional
};

/// One radiograph with its metadata and augmentation lineage.
struct ImageRecord {
    std::string image_id;
    std::string patient_id;
    std::string group_id;   // patient-level grouping key
    int class_label = 0;    // 1 = later admitted to ICU
    Image pixels;
    std::string augmentation_of;                          // empty for sources
    std::vector<std::pair<std::string, double>> transform_log;

    bool augmented() const { return !augmentation_of.empty(); }
};

/// Manifest column names. An empty image_id entry means the filename column
/// doubles as the image id (the common layout has no separate id column).
struct ManifestColumns {
    std::string image_id;
    std::string patient_id = "patientid";
    std::string filename = "filename";
    std::string went_icu = "went_icu";
    std::string in_icu = "in_icu";
    std::string view = "view"; // optional; ignored when absent
};

std::vector<CohortRecord> parse_manifest(const std::string& csv_path,
                                         const ManifestColumns& cols = {},
                                         const std::string& images_dir = "");

using ImageLoader = std::function<Image(const std::string& path)>;

/// Default loader: read the file from disk (PNG/JPEG, RGB collapsed by mean).
ImageLoader file_image_loader();

/// Class 1 = went_icu yes and in_icu no (pre-ICU image of a patient that was
/// eventually admitted); class 0 = went_icu explicitly no. Records with any
/// unknown tri-state or with in_icu = yes are excluded. group_id = patient_id.
std::vector<ImageRecord> select_icu_cohort(const std::vector<CohortRecord>& records,
                                           const ImageLoader& loader = file_image_loader());

/// Gentle affine magnitudes; all draws are uniform and seeded.
struct AugmentParams {
    double max_rotate_deg = 10.0;
    double max_translate_frac = 0.05; // of the image side, per axis
    double max_shear_deg = 5.0;
    double jitter_frac = 0.02;        // piecewise-affine control point jitter
    int jitter_grid = 4;              // control cells per axis
};

/// Returns the original record followed by multiplier-1 augmented copies,
/// each deterministic in (record, seed). Copies keep class_label and
/// group_id and point back to the source via augmentation_of.
std::vector<ImageRecord> augment(const ImageRecord& record, int multiplier, uint64_t seed,
                                 const AugmentParams& params = {});

/// Warp used by augment, exposed for mask co-transforms: bilinear for images,
/// nearest-neighbor when `nearest` is set so binary masks stay binary.
struct WarpSpec {
    double rotate_deg = 0;
    double shear_deg = 0;
    double translate_x_frac = 0;
    double translate_y_frac = 0;
    double jitter_frac = 0;
    int jitter_grid = 4;
    uint64_t jitter_seed = 0;
};
Image warp_image(const Image& src, const WarpSpec& spec, bool nearest = false);

} // namespace icufeat::cohort
