#pragma once

#include "icufeat/image.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace icufeat::imgproc {

/// Binary lung-field mask aligned to an image. Values are strictly 0/1.
struct LungMask {
    int rows = 0;
    int cols = 0;
    std::vector<uint8_t> data;
    bool cleanup_applied = false;
    int component_count = 0;

    LungMask() = default;
    LungMask(int r, int c, uint8_t fill = 0)
        : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    uint8_t& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    uint8_t at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    long area() const;
    bool empty_mask() const { return area() == 0; }
};

/// Global histogram equalization over 256 levels: v -> floor(255 * cdf(v)).
/// The mapping is monotone non-decreasing in input intensity.
Image equalize_standard(const Image& img);

/// Contrast-limited adaptive equalization. Per-tile clipped histograms with
/// bilinear interpolation between tile mappings. tile_grid is (rows, cols)
/// of tiles; a grid finer than the image is a parameter error.
Image equalize_adaptive(const Image& img, double clip_limit, std::pair<int, int> tile_grid);

struct CleanupParams {
    double closing_radius_at_256 = 5.0; // disk radius at 256px, scaled with min(rows,cols)
    double min_area_frac = 0.02;        // components below this fraction are dropped
    int max_components = 2;             // two lungs
};

/// Threshold (value > threshold), morphological closing, interior hole fill,
/// then keep the largest components passing the area filter. Throws
/// EmptyMaskError when nothing survives.
LungMask cleanup_mask(const Image& raw, double threshold, const CleanupParams& params = {});

struct CropBox {
    int row0 = 0, col0 = 0, rows = 0, cols = 0;
};

struct CropResult {
    Image image;
    LungMask mask;
    CropBox box;
};

/// Crop both image and mask to the mask's bounding box expanded by
/// margin_frac of the box size per side (floor/ceil corners, clamped).
/// When zero_outside is set, pixels outside the mask are zeroed.
CropResult crop_to_lung(const Image& image, const LungMask& mask, double margin_frac,
                        bool zero_outside = true);

void save_mask_png(const LungMask& mask, const std::string& path); // 1-bit PNG
LungMask load_mask_png(const std::string& path);

LungMask binarize(const Image& prob, double threshold);

} // namespace icufeat::imgproc
