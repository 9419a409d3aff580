#include "icufeat/imgproc.hpp"

#include "icufeat/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <queue>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace icufeat::imgproc {

namespace {

constexpr int kLevels = 256;

int quantize(float v) {
    return std::clamp(static_cast<int>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f)), 0, 255);
}

std::array<int, kLevels> histogram(const Image& img) {
    std::array<int, kLevels> h{};
    for (float v : img.data) h[quantize(v)]++;
    return h;
}

// LUT entry k = floor(255 * cdf(k)) over a (possibly fractional) histogram.
std::array<uint8_t, kLevels> cdf_lut(const std::array<double, kLevels>& hist, double total) {
    std::array<uint8_t, kLevels> lut{};
    double acc = 0;
    for (int k = 0; k < kLevels; ++k) {
        acc += hist[k];
        double v = std::floor(255.0 * acc / total);
        lut[k] = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
    }
    return lut;
}

} // namespace

long LungMask::area() const {
    return std::accumulate(data.begin(), data.end(), 0L,
                           [](long acc, uint8_t v) { return acc + (v != 0); });
}

Image equalize_standard(const Image& img) {
    if (img.empty()) throw ParamError("equalize_standard: empty image");
    auto h = histogram(img);
    std::array<double, kLevels> hd{};
    for (int k = 0; k < kLevels; ++k) hd[k] = h[k];
    auto lut = cdf_lut(hd, static_cast<double>(img.size()));
    Image out(img.rows, img.cols);
    for (size_t i = 0; i < img.size(); ++i) {
        out.data[i] = lut[quantize(img.data[i])] / 255.f;
    }
    return out;
}

Image equalize_adaptive(const Image& img, double clip_limit, std::pair<int, int> tile_grid) {
    if (img.empty()) throw ParamError("equalize_adaptive: empty image");
    if (clip_limit <= 0) throw ParamError("equalize_adaptive: clip_limit must be > 0");
    const int gy = tile_grid.first, gx = tile_grid.second;
    if (gy < 1 || gx < 1) throw ParamError("equalize_adaptive: tile grid must be >= 1x1");
    if (gy > img.rows || gx > img.cols) {
        throw ParamError("equalize_adaptive: tile grid " + std::to_string(gy) + "x" +
                         std::to_string(gx) + " exceeds image " + std::to_string(img.rows) + "x" +
                         std::to_string(img.cols));
    }

    // tile t covers rows [t*H/gy, (t+1)*H/gy)
    auto tile_lo = [](int t, int n, int g) { return static_cast<int>(static_cast<long>(t) * n / g); };

    std::vector<std::array<uint8_t, kLevels>> luts(static_cast<size_t>(gy) * gx);
    std::vector<double> centers_y(gy), centers_x(gx);
    for (int ty = 0; ty < gy; ++ty) {
        const int r0 = tile_lo(ty, img.rows, gy), r1 = tile_lo(ty + 1, img.rows, gy);
        centers_y[ty] = (r0 + r1 - 1) / 2.0;
        for (int tx = 0; tx < gx; ++tx) {
            const int c0 = tile_lo(tx, img.cols, gx), c1 = tile_lo(tx + 1, img.cols, gx);
            centers_x[tx] = (c0 + c1 - 1) / 2.0;
            std::array<double, kLevels> h{};
            for (int r = r0; r < r1; ++r)
                for (int c = c0; c < c1; ++c) h[quantize(img.at(r, c))] += 1.0;
            const double npx = static_cast<double>(r1 - r0) * (c1 - c0);
            // clip and redistribute excess uniformly
            const double clip = std::max(1.0, clip_limit * npx / kLevels);
            double excess = 0;
            for (double& b : h) {
                if (b > clip) {
                    excess += b - clip;
                    b = clip;
                }
            }
            const double add = excess / kLevels;
            for (double& b : h) b += add;
            luts[static_cast<size_t>(ty) * gx + tx] = cdf_lut(h, npx);
        }
    }

    Image out(img.rows, img.cols);
    for (int r = 0; r < img.rows; ++r) {
        // neighbours along y
        int ty1 = 0;
        while (ty1 < gy - 1 && centers_y[ty1 + 1] < r) ++ty1;
        int ty0 = ty1;
        double wy = 0;
        if (r <= centers_y[0]) {
            ty0 = ty1 = 0;
        } else if (r >= centers_y[gy - 1]) {
            ty0 = ty1 = gy - 1;
        } else {
            ty1 = ty0 + 1;
            if (centers_y[ty1] > centers_y[ty0])
                wy = (r - centers_y[ty0]) / (centers_y[ty1] - centers_y[ty0]);
        }
        for (int c = 0; c < img.cols; ++c) {
            int tx1 = 0;
            while (tx1 < gx - 1 && centers_x[tx1 + 1] < c) ++tx1;
            int tx0 = tx1;
            double wx = 0;
            if (c <= centers_x[0]) {
                tx0 = tx1 = 0;
            } else if (c >= centers_x[gx - 1]) {
                tx0 = tx1 = gx - 1;
            } else {
                tx1 = tx0 + 1;
                if (centers_x[tx1] > centers_x[tx0])
                    wx = (c - centers_x[tx0]) / (centers_x[tx1] - centers_x[tx0]);
            }
            const int q = quantize(img.at(r, c));
            auto at = [&](int ty, int tx) {
                return static_cast<double>(luts[static_cast<size_t>(ty) * gx + tx][q]);
            };
            const double top = at(ty0, tx0) * (1 - wx) + at(ty0, tx1) * wx;
            const double bot = at(ty1, tx0) * (1 - wx) + at(ty1, tx1) * wx;
            out.at(r, c) = static_cast<float>((top * (1 - wy) + bot * wy) / 255.0);
        }
    }
    return out;
}

LungMask binarize(const Image& prob, double threshold) {
    LungMask m(prob.rows, prob.cols);
    for (size_t i = 0; i < prob.size(); ++i) m.data[i] = prob.data[i] > threshold ? 1 : 0;
    return m;
}

namespace {

std::vector<std::pair<int, int>> disk_offsets(int radius) {
    std::vector<std::pair<int, int>> off;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dy * dy + dx * dx <= radius * radius) off.emplace_back(dy, dx);
    return off;
}

LungMask dilate(const LungMask& m, const std::vector<std::pair<int, int>>& off) {
    LungMask out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) {
            if (!m.at(r, c)) continue;
            for (auto [dy, dx] : off) {
                int rr = r + dy, cc = c + dx;
                if (rr >= 0 && rr < m.rows && cc >= 0 && cc < m.cols) out.at(rr, cc) = 1;
            }
        }
    }
    return out;
}

LungMask erode(const LungMask& m, const std::vector<std::pair<int, int>>& off) {
    LungMask out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) {
            uint8_t keep = 1;
            for (auto [dy, dx] : off) {
                int rr = r + dy, cc = c + dx;
                // pixels outside the frame count as background
                if (rr < 0 || rr >= m.rows || cc < 0 || cc >= m.cols || !m.at(rr, cc)) {
                    keep = 0;
                    break;
                }
            }
            out.at(r, c) = keep;
        }
    }
    return out;
}

// background regions not reachable from the border are interior holes
void fill_holes(LungMask& m) {
    std::vector<uint8_t> outside(m.data.size(), 0);
    std::queue<std::pair<int, int>> q;
    auto push = [&](int r, int c) {
        size_t i = static_cast<size_t>(r) * m.cols + c;
        if (!m.data[i] && !outside[i]) {
            outside[i] = 1;
            q.emplace(r, c);
        }
    };
    for (int r = 0; r < m.rows; ++r) {
        push(r, 0);
        push(r, m.cols - 1);
    }
    for (int c = 0; c < m.cols; ++c) {
        push(0, c);
        push(m.rows - 1, c);
    }
    while (!q.empty()) {
        auto [r, c] = q.front();
        q.pop();
        if (r > 0) push(r - 1, c);
        if (r + 1 < m.rows) push(r + 1, c);
        if (c > 0) push(r, c - 1);
        if (c + 1 < m.cols) push(r, c + 1);
    }
    for (size_t i = 0; i < m.data.size(); ++i) {
        if (!m.data[i] && !outside[i]) m.data[i] = 1;
    }
}

struct Component {
    long area = 0;
    size_t first_pixel = 0;
    std::vector<size_t> pixels;
};

// 8-connectivity
std::vector<Component> components(const LungMask& m) {
    std::vector<int> label(m.data.size(), -1);
    std::vector<Component> comps;
    std::queue<size_t> q;
    for (size_t start = 0; start < m.data.size(); ++start) {
        if (!m.data[start] || label[start] >= 0) continue;
        int id = static_cast<int>(comps.size());
        comps.push_back({0, start, {}});
        label[start] = id;
        q.push(start);
        while (!q.empty()) {
            size_t i = q.front();
            q.pop();
            comps[id].area++;
            comps[id].pixels.push_back(i);
            int r = static_cast<int>(i / m.cols), c = static_cast<int>(i % m.cols);
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dy && !dx) continue;
                    int rr = r + dy, cc = c + dx;
                    if (rr < 0 || rr >= m.rows || cc < 0 || cc >= m.cols) continue;
                    size_t j = static_cast<size_t>(rr) * m.cols + cc;
                    if (m.data[j] && label[j] < 0) {
                        label[j] = id;
                        q.push(j);
                    }
                }
            }
        }
    }
    return comps;
}

} // namespace

LungMask cleanup_mask(const Image& raw, double threshold, const CleanupParams& params) {
    if (raw.empty()) throw ParamError("cleanup_mask: empty input");
    for (float v : raw.data) {
        if (!(v >= 0.f && v <= 1.f)) throw ParamError("cleanup_mask: values must lie in [0,1]");
    }

    LungMask m = binarize(raw, threshold);

    const int radius = std::max(
        1, static_cast<int>(std::lround(params.closing_radius_at_256 *
                                        std::min(m.rows, m.cols) / 256.0)));
    auto off = disk_offsets(radius);
    m = erode(dilate(m, off), off);

    fill_holes(m);

    auto comps = components(m);
    std::sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) {
        if (a.area != b.area) return a.area > b.area;
        return a.first_pixel < b.first_pixel;
    });
    const long min_area =
        static_cast<long>(std::ceil(params.min_area_frac * m.rows * m.cols));

    LungMask out(m.rows, m.cols);
    int kept = 0;
    for (const auto& comp : comps) {
        if (kept >= params.max_components) break;
        if (comp.area < min_area) break; // sorted by area, nothing later passes
        for (size_t i : comp.pixels) out.data[i] = 1;
        ++kept;
    }
    if (kept == 0) {
        throw EmptyMaskError("mask empty after cleanup (largest component " +
                             std::to_string(comps.empty() ? 0 : comps.front().area) +
                             " px, minimum " + std::to_string(min_area) + ")");
    }
    out.cleanup_applied = true;
    out.component_count = kept;
    return out;
}

CropResult crop_to_lung(const Image& image, const LungMask& mask, double margin_frac,
                        bool zero_outside) {
    if (image.rows != mask.rows || image.cols != mask.cols) {
        throw DataError("crop_to_lung: image and mask shapes differ");
    }
    if (!mask.cleanup_applied) throw ParamError("crop_to_lung: mask must be cleaned up first");

    int rmin = mask.rows, rmax = -1, cmin = mask.cols, cmax = -1;
    for (int r = 0; r < mask.rows; ++r) {
        for (int c = 0; c < mask.cols; ++c) {
            if (!mask.at(r, c)) continue;
            rmin = std::min(rmin, r);
            rmax = std::max(rmax, r);
            cmin = std::min(cmin, c);
            cmax = std::max(cmax, c);
        }
    }
    if (rmax < 0) throw EmptyMaskError("crop_to_lung: mask has no foreground");

    const double mr = margin_frac * (rmax - rmin + 1);
    const double mc = margin_frac * (cmax - cmin + 1);
    const int r0 = std::max(0, static_cast<int>(std::floor(rmin - mr)));
    const int r1 = std::min(mask.rows - 1, static_cast<int>(std::ceil(rmax + mr)));
    const int c0 = std::max(0, static_cast<int>(std::floor(cmin - mc)));
    const int c1 = std::min(mask.cols - 1, static_cast<int>(std::ceil(cmax + mc)));

    CropResult res;
    res.box = {r0, c0, r1 - r0 + 1, c1 - c0 + 1};
    res.image = Image(res.box.rows, res.box.cols);
    res.mask = LungMask(res.box.rows, res.box.cols);
    res.mask.cleanup_applied = mask.cleanup_applied;
    res.mask.component_count = mask.component_count;
    for (int r = 0; r < res.box.rows; ++r) {
        for (int c = 0; c < res.box.cols; ++c) {
            const uint8_t mv = mask.at(r0 + r, c0 + c);
            res.mask.at(r, c) = mv;
            const float iv = image.at(r0 + r, c0 + c);
            res.image.at(r, c) = (zero_outside && !mv) ? 0.f : iv;
        }
    }
    return res;
}

void save_mask_png(const LungMask& mask, const std::string& path) {
    cv::Mat m(mask.rows, mask.cols, CV_8U);
    for (int r = 0; r < mask.rows; ++r) {
        uint8_t* dst = m.ptr<uint8_t>(r);
        for (int c = 0; c < mask.cols; ++c) dst[c] = mask.at(r, c) ? 255 : 0;
    }
    if (!cv::imwrite(path, m, {cv::IMWRITE_PNG_BILEVEL, 1})) {
        throw DataError("cannot write mask: " + path);
    }
}

LungMask load_mask_png(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw DataError("cannot read mask: " + path);
    LungMask out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        const uint8_t* src = m.ptr<uint8_t>(r);
        for (int c = 0; c < m.cols; ++c) out.at(r, c) = src[c] >= 128 ? 1 : 0;
    }
    out.cleanup_applied = true;
    out.component_count = static_cast<int>(components(out).size());
    return out;
}

} // namespace icufeat::imgproc
