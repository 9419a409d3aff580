#include "icufeat/cohort.hpp"

#include "icufeat/csv.hpp"
#include "icufeat/errors.hpp"
#include "icufeat/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace icufeat::cohort {

namespace {

TriState parse_tristate(const std::string& token, size_t row, const std::string& column) {
    if (token == "Y") return TriState::yes;
    if (token == "N") return TriState::no;
    if (token.empty()) return TriState::unknown;
    throw SchemaError("row " + std::to_string(row) + ": column '" + column +
                      "' holds '" + token + "', expected Y, N or empty");
}

std::string trimmed(const std::string& s) {
    size_t b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

} // namespace

std::vector<CohortRecord> parse_manifest(const std::string& csv_path,
                                         const ManifestColumns& cols,
                                         const std::string& images_dir) {
    CsvTable t = read_csv(csv_path);

    std::vector<std::string> required = {cols.patient_id, cols.filename, cols.went_icu, cols.in_icu};
    if (!cols.image_id.empty()) required.push_back(cols.image_id);
    std::string missing;
    for (const auto& name : required) {
        if (t.column(name) < 0) {
            if (!missing.empty()) missing += ", ";
            missing += name;
        }
    }
    if (!missing.empty()) {
        throw SchemaError("manifest " + csv_path + " lacks required column(s): " + missing);
    }

    const int c_pid = t.column(cols.patient_id);
    const int c_file = t.column(cols.filename);
    const int c_went = t.column(cols.went_icu);
    const int c_in = t.column(cols.in_icu);
    const int c_iid = cols.image_id.empty() ? -1 : t.column(cols.image_id);
    const int c_view = t.column(cols.view);

    std::vector<CohortRecord> out;
    out.reserve(t.rows.size());
    for (size_t i = 0; i < t.rows.size(); ++i) {
        const auto& row = t.rows[i];
        const size_t row_no = i + 1; // 1-based, excluding header
        if (row.size() != t.header.size()) {
            throw SchemaError("row " + std::to_string(row_no) + ": expected " +
                              std::to_string(t.header.size()) + " fields, got " +
                              std::to_string(row.size()));
        }
        CohortRecord rec;
        rec.patient_id = trimmed(row[c_pid]);
        std::string filename = trimmed(row[c_file]);
        if (rec.patient_id.empty() || filename.empty()) {
            throw SchemaError("row " + std::to_string(row_no) + ": empty patient id or filename");
        }
        rec.image_id = c_iid >= 0 ? trimmed(row[c_iid]) : filename;
        rec.went_icu = parse_tristate(trimmed(row[c_went]), row_no, cols.went_icu);
        rec.in_icu = parse_tristate(trimmed(row[c_in]), row_no, cols.in_icu);
        rec.image_path = images_dir.empty()
                             ? filename
                             : (std::filesystem::path(images_dir) / filename).string();
        if (c_view >= 0) rec.view = trimmed(row[c_view]);
        out.push_back(std::move(rec));
    }

    // image ids must be unique within a manifest
    std::vector<std::string> ids;
    ids.reserve(out.size());
    for (const auto& r : out) ids.push_back(r.image_id);
    std::sort(ids.begin(), ids.end());
    auto dup = std::adjacent_find(ids.begin(), ids.end());
    if (dup != ids.end()) {
        throw SchemaError("duplicate image id in manifest: " + *dup);
    }
    return out;
}

ImageLoader file_image_loader() {
    return [](const std::string& path) { return load_image(path); };
}

std::vector<ImageRecord> select_icu_cohort(const std::vector<CohortRecord>& records,
                                           const ImageLoader& loader) {
    std::vector<ImageRecord> out;
    long n0 = 0, n1 = 0;
    for (const auto& rec : records) {
        if (rec.went_icu == TriState::unknown || rec.in_icu == TriState::unknown) continue;
        if (rec.in_icu == TriState::yes) continue; // image taken while already in ICU
        int label;
        if (rec.went_icu == TriState::yes) {
            label = 1;
        } else {
            label = 0;
        }
        ImageRecord img;
        img.image_id = rec.image_id;
        img.patient_id = rec.patient_id;
        img.group_id = rec.patient_id;
        img.class_label = label;
        img.pixels = loader(rec.image_path);
        (label == 1 ? n1 : n0) += 1;
        out.push_back(std::move(img));
    }
    if (n0 == 0 || n1 == 0) {
        throw CohortError("cohort selection left an empty class: class0=" + std::to_string(n0) +
                          " class1=" + std::to_string(n1));
    }
    return out;
}

Image warp_image(const Image& src, const WarpSpec& spec, bool nearest) {
    const int rows = src.rows, cols = src.cols;
    const double cy = (rows - 1) / 2.0, cx = (cols - 1) / 2.0;
    const double rad = spec.rotate_deg * M_PI / 180.0;
    const double sh = std::tan(spec.shear_deg * M_PI / 180.0);
    const double ca = std::cos(rad), sa = std::sin(rad);
    // sampling transform about the center: rotation, then horizontal shear
    const double a00 = ca, a01 = -sa;
    const double a10 = sa, a11 = ca;
    const double b00 = a00 + sh * a10, b01 = a01 + sh * a11;
    const double b10 = a10, b11 = a11;
    const double tx = spec.translate_x_frac * cols;
    const double ty = spec.translate_y_frac * rows;

    // piecewise-affine displacement: jittered control grid, bilinear between nodes
    const int g = std::max(1, spec.jitter_grid);
    std::vector<double> dx((g + 1) * (g + 1), 0.0), dy((g + 1) * (g + 1), 0.0);
    if (spec.jitter_frac > 0) {
        Rng rng(spec.jitter_seed);
        for (int i = 0; i < (g + 1) * (g + 1); ++i) {
            dx[i] = rng.uniform(-spec.jitter_frac, spec.jitter_frac) * cols;
            dy[i] = rng.uniform(-spec.jitter_frac, spec.jitter_frac) * rows;
        }
    }
    auto displacement = [&](double y, double x, double& oy, double& ox) {
        if (spec.jitter_frac <= 0) { oy = ox = 0; return; }
        double fy = y / std::max(1, rows - 1) * g;
        double fx = x / std::max(1, cols - 1) * g;
        int iy = std::clamp(static_cast<int>(fy), 0, g - 1);
        int ix = std::clamp(static_cast<int>(fx), 0, g - 1);
        double wy = fy - iy, wx = fx - ix;
        auto node = [&](int r, int c) { return r * (g + 1) + c; };
        ox = dx[node(iy, ix)] * (1 - wy) * (1 - wx) + dx[node(iy, ix + 1)] * (1 - wy) * wx +
             dx[node(iy + 1, ix)] * wy * (1 - wx) + dx[node(iy + 1, ix + 1)] * wy * wx;
        oy = dy[node(iy, ix)] * (1 - wy) * (1 - wx) + dy[node(iy, ix + 1)] * (1 - wy) * wx +
             dy[node(iy + 1, ix)] * wy * (1 - wx) + dy[node(iy + 1, ix + 1)] * wy * wx;
    };

    Image dst(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double oy, ox;
            displacement(r, c, oy, ox);
            const double yr = r - cy, xr = c - cx;
            const double sx = b00 * xr + b01 * yr + cx + tx + ox;
            const double sy = b10 * xr + b11 * yr + cy + ty + oy;
            if (nearest) {
                int yi = std::clamp(static_cast<int>(std::lround(sy)), 0, rows - 1);
                int xi = std::clamp(static_cast<int>(std::lround(sx)), 0, cols - 1);
                dst.at(r, c) = src.at(yi, xi);
            } else {
                dst.at(r, c) = sample_bilinear(src, static_cast<float>(sy), static_cast<float>(sx));
            }
        }
    }
    return dst;
}

std::vector<ImageRecord> augment(const ImageRecord& record, int multiplier, uint64_t seed,
                                 const AugmentParams& params) {
    if (multiplier < 1) throw ParamError("augment: multiplier must be >= 1");
    if (record.pixels.empty()) throw ParamError("augment: record has no pixels");

    std::vector<ImageRecord> out;
    out.reserve(multiplier);
    out.push_back(record);

    Rng rng(seed);
    for (int k = 1; k < multiplier; ++k) {
        WarpSpec spec;
        spec.rotate_deg = rng.uniform(-params.max_rotate_deg, params.max_rotate_deg);
        spec.translate_x_frac = rng.uniform(-params.max_translate_frac, params.max_translate_frac);
        spec.translate_y_frac = rng.uniform(-params.max_translate_frac, params.max_translate_frac);
        spec.shear_deg = rng.uniform(-params.max_shear_deg, params.max_shear_deg);
        spec.jitter_frac = params.jitter_frac;
        spec.jitter_grid = params.jitter_grid;
        spec.jitter_seed = rng.next_u64();

        ImageRecord aug;
        aug.image_id = record.image_id + "_aug" + std::to_string(k);
        aug.patient_id = record.patient_id;
        aug.group_id = record.group_id;
        aug.class_label = record.class_label;
        aug.augmentation_of = record.image_id;
        aug.pixels = warp_image(record.pixels, spec);
        aug.transform_log = {
            {"rotate_deg", spec.rotate_deg},
            {"translate_x_frac", spec.translate_x_frac},
            {"translate_y_frac", spec.translate_y_frac},
            {"shear_deg", spec.shear_deg},
            {"jitter_frac", spec.jitter_frac},
            {"jitter_seed", static_cast<double>(spec.jitter_seed >> 11)},
        };
        out.push_back(std::move(aug));
    }
    return out;
}

} // namespace icufeat::cohort
