#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace icufeat {

/// Single-channel float image, values nominally in [0,1], row-major.
struct Image {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Image() = default;
    Image(int r, int c, float fill = 0.f)
        : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    bool empty() const { return data.empty(); }
    size_t size() const { return data.size(); }
};

/// Double-precision plane for probability-like fields (gradient energies,
/// surface averages) whose contracts carry 1e-9 tolerances.
struct ImageD {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    ImageD() = default;
    ImageD(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    bool empty() const { return data.empty(); }
    size_t size() const { return data.size(); }
};

/// Decode PNG/JPEG. Color inputs are collapsed to grayscale by channel mean.
Image load_image(const std::string& path);

/// Encode as 8-bit grayscale PNG, values clamped to [0,1].
void save_image_png(const Image& img, const std::string& path);

Image resize_bilinear(const Image& src, int rows, int cols);
ImageD resize_bilinear(const ImageD& src, int rows, int cols);
Image resize_nearest(const Image& src, int rows, int cols);

/// Bilinear sample at (row y, col x); coordinates clamped to the image (edge
/// replication).
float sample_bilinear(const Image& img, float y, float x);

/// Mean over k×k blocks; rows and cols must be divisible by k.
Image block_mean(const Image& src, int k);

} // namespace icufeat
