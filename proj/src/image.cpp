#include "icufeat/image.hpp"

#include "icufeat/errors.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace icufeat {

Image load_image(const std::string& path) {
    cv::Mat raw = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (raw.empty()) {
        throw DataError("cannot read image: " + path);
    }
    cv::Mat f;
    double scale = 1.0;
    switch (raw.depth()) {
        case CV_8U: scale = 1.0 / 255.0; break;
        case CV_16U: scale = 1.0 / 65535.0; break;
        case CV_32F: scale = 1.0; break;
        default:
            throw DataError("unsupported image depth in " + path);
    }
    raw.convertTo(f, CV_32F, scale);

    Image out(f.rows, f.cols);
    if (f.channels() == 1) {
        for (int r = 0; r < f.rows; ++r) {
            const float* src = f.ptr<float>(r);
            std::copy(src, src + f.cols, out.data.begin() + static_cast<size_t>(r) * f.cols);
        }
    } else {
        const int ch = f.channels();
        for (int r = 0; r < f.rows; ++r) {
            const float* src = f.ptr<float>(r);
            for (int c = 0; c < f.cols; ++c) {
                float sum = 0.f;
                for (int k = 0; k < ch; ++k) sum += src[c * ch + k];
                out.at(r, c) = sum / static_cast<float>(ch);
            }
        }
    }
    return out;
}

void save_image_png(const Image& img, const std::string& path) {
    if (img.empty()) throw DataError("refusing to save empty image: " + path);
    cv::Mat m(img.rows, img.cols, CV_8U);
    for (int r = 0; r < img.rows; ++r) {
        uint8_t* dst = m.ptr<uint8_t>(r);
        for (int c = 0; c < img.cols; ++c) {
            float v = std::clamp(img.at(r, c), 0.f, 1.f);
            dst[c] = static_cast<uint8_t>(std::lround(v * 255.f));
        }
    }
    if (!cv::imwrite(path, m)) {
        throw DataError("cannot write image: " + path);
    }
}

float sample_bilinear(const Image& img, float y, float x) {
    const float yc = std::clamp(y, 0.f, static_cast<float>(img.rows - 1));
    const float xc = std::clamp(x, 0.f, static_cast<float>(img.cols - 1));
    const int y0 = static_cast<int>(yc);
    const int x0 = static_cast<int>(xc);
    const int y1 = std::min(y0 + 1, img.rows - 1);
    const int x1 = std::min(x0 + 1, img.cols - 1);
    const float fy = yc - static_cast<float>(y0);
    const float fx = xc - static_cast<float>(x0);
    const float top = img.at(y0, x0) * (1.f - fx) + img.at(y0, x1) * fx;
    const float bot = img.at(y1, x0) * (1.f - fx) + img.at(y1, x1) * fx;
    return top * (1.f - fy) + bot * fy;
}

Image resize_bilinear(const Image& src, int rows, int cols) {
    if (src.empty() || rows <= 0 || cols <= 0) {
        throw ParamError("resize_bilinear: empty input or non-positive target size");
    }
    if (rows == src.rows && cols == src.cols) return src;
    Image dst(rows, cols);
    const float sy = static_cast<float>(src.rows) / static_cast<float>(rows);
    const float sx = static_cast<float>(src.cols) / static_cast<float>(cols);
    for (int r = 0; r < rows; ++r) {
        const float y = (static_cast<float>(r) + 0.5f) * sy - 0.5f;
        for (int c = 0; c < cols; ++c) {
            const float x = (static_cast<float>(c) + 0.5f) * sx - 0.5f;
            dst.at(r, c) = sample_bilinear(src, y, x);
        }
    }
    return dst;
}

ImageD resize_bilinear(const ImageD& src, int rows, int cols) {
    if (src.empty() || rows <= 0 || cols <= 0) {
        throw ParamError("resize_bilinear: empty input or non-positive target size");
    }
    if (rows == src.rows && cols == src.cols) return src;
    ImageD dst(rows, cols);
    const double sy = static_cast<double>(src.rows) / rows;
    const double sx = static_cast<double>(src.cols) / cols;
    auto sample = [&](double y, double x) {
        const double yc = std::clamp(y, 0.0, static_cast<double>(src.rows - 1));
        const double xc = std::clamp(x, 0.0, static_cast<double>(src.cols - 1));
        const int y0 = static_cast<int>(yc), x0 = static_cast<int>(xc);
        const int y1 = std::min(y0 + 1, src.rows - 1), x1 = std::min(x0 + 1, src.cols - 1);
        const double fy = yc - y0, fx = xc - x0;
        const double top = src.at(y0, x0) * (1 - fx) + src.at(y0, x1) * fx;
        const double bot = src.at(y1, x0) * (1 - fx) + src.at(y1, x1) * fx;
        return top * (1 - fy) + bot * fy;
    };
    for (int r = 0; r < rows; ++r) {
        const double y = (r + 0.5) * sy - 0.5;
        for (int c = 0; c < cols; ++c) {
            dst.at(r, c) = sample(y, (c + 0.5) * sx - 0.5);
        }
    }
    return dst;
}

Image resize_nearest(const Image& src, int rows, int cols) {
    if (src.empty() || rows <= 0 || cols <= 0) {
        throw ParamError("resize_nearest: empty input or non-positive target size");
    }
    if (rows == src.rows && cols == src.cols) return src;
    Image dst(rows, cols);
    const float sy = static_cast<float>(src.rows) / static_cast<float>(rows);
    const float sx = static_cast<float>(src.cols) / static_cast<float>(cols);
    for (int r = 0; r < rows; ++r) {
        int yi = std::min(static_cast<int>((static_cast<float>(r) + 0.5f) * sy), src.rows - 1);
        for (int c = 0; c < cols; ++c) {
            int xi = std::min(static_cast<int>((static_cast<float>(c) + 0.5f) * sx), src.cols - 1);
            dst.at(r, c) = src.at(yi, xi);
        }
    }
    return dst;
}

Image block_mean(const Image& src, int k) {
    if (k <= 0 || src.rows % k != 0 || src.cols % k != 0) {
        throw ParamError("block_mean: image dims must be divisible by block size");
    }
    Image dst(src.rows / k, src.cols / k);
    const double inv = 1.0 / (k * k);
    for (int r = 0; r < dst.rows; ++r) {
        for (int c = 0; c < dst.cols; ++c) {
            double sum = 0.0;
            for (int dy = 0; dy < k; ++dy)
                for (int dx = 0; dx < k; ++dx) sum += src.at(r * k + dy, c * k + dx);
            dst.at(r, c) = static_cast<float>(sum * inv);
        }
    }
    return dst;
}

} // namespace icufeat
