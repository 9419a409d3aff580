#include "icufeat/corrext.hpp"

#include "icufeat/csv.hpp"
#include "icufeat/errors.hpp"
#include "icufeat/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

namespace icufeat::corrext {

namespace {

std::string normalize_token(const std::string& raw) {
    size_t b = raw.find_first_not_of(" \t'\"");
    if (b == std::string::npos) return "";
    size_t e = raw.find_last_not_of(" \t'\"");
    std::string t = raw.substr(b, e - b + 1);
    std::transform(t.begin(), t.end(), t.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return t;
}

} // namespace

std::vector<std::string> parse_label_cell(const std::string& cell) {
    std::string body = cell;
    size_t b = body.find_first_not_of(" \t");
    size_t e = body.find_last_not_of(" \t");
    if (b == std::string::npos) return {};
    body = body.substr(b, e - b + 1);
    if (body.size() >= 2 && body.front() == '[' && body.back() == ']') {
        body = body.substr(1, body.size() - 2);
    }

    std::vector<std::string> tokens;
    std::string cur;
    bool quoted = false;
    char quote_ch = 0;
    for (char c : body) {
        if (quoted) {
            if (c == quote_ch) {
                quoted = false;
            }
            cur += c;
        } else if (c == '\'' || c == '"') {
            quoted = true;
            quote_ch = c;
            cur += c;
        } else if (c == ',' || c == ';') {
            tokens.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    tokens.push_back(cur);

    std::vector<std::string> out;
    for (const auto& t : tokens) {
        std::string n = normalize_token(t);
        if (n.empty()) continue;
        if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
    }
    return out;
}

std::vector<AnnotatedImage> load_external(const std::string& csv_path,
                                          const ExternalColumns& cols,
                                          const std::string& images_dir,
                                          const cohort::ImageLoader& loader) {
    CsvTable t = read_csv(csv_path);
    std::string missing;
    for (const std::string& name : {cols.filename, cols.labels}) {
        if (t.column(name) < 0) {
            if (!missing.empty()) missing += ", ";
            missing += name;
        }
    }
    if (!missing.empty()) {
        throw SchemaError("external manifest " + csv_path + " lacks column(s): " + missing);
    }
    const int c_file = t.column(cols.filename);
    const int c_labels = t.column(cols.labels);
    const int c_iid = cols.image_id.empty() ? -1 : t.column(cols.image_id);
    if (!cols.image_id.empty() && c_iid < 0) {
        throw SchemaError("external manifest " + csv_path + " lacks column(s): " + cols.image_id);
    }

    std::vector<AnnotatedImage> out;
    for (const auto& row : t.rows) {
        AnnotatedImage img;
        const std::string filename = row[c_file];
        img.image_id = c_iid >= 0 ? row[c_iid] : filename;
        img.image_path = images_dir.empty()
                             ? filename
                             : (std::filesystem::path(images_dir) / filename).string();
        img.labels = parse_label_cell(row[c_labels]);
        img.has_labels = !img.labels.empty();
        try {
            img.pixels = loader(img.image_path);
        } catch (const PipelineError&) {
            img.valid = false;
        }
        out.push_back(std::move(img));
    }
    return out;
}

Partition classify_external(const treelab::TreeModel& model, const FeatureTable& table) {
    if (!model.mode.empty() && !table.mode.empty() && model.mode != table.mode) {
        throw ConfigError("feature-mode mismatch: tree fitted on '" + model.mode +
                          "' features but table holds '" + table.mode + "'");
    }
    auto fmap = treelab::resolve_feature_map(model, table.columns);
    Partition p;
    for (const auto& row : table.rows) {
        const int pred = treelab::predict_mapped(model, fmap, row.values);
        (pred == 1 ? p.class1 : p.class0).push_back(row.image_id);
    }
    return p;
}

RatioReport frequency_ratio(const std::vector<LabelSet>& class0,
                            const std::vector<LabelSet>& class1, int min_count) {
    if (class0.empty() || class1.empty()) {
        throw ParamError("frequency_ratio: both classes need at least one image");
    }
    RatioReport report;
    report.n0 = static_cast<long>(class0.size());
    report.n1 = static_cast<long>(class1.size());
    report.min_count = min_count;

    // per-image presence, counted once per image
    std::map<std::string, std::pair<long, long>> counts; // token -> (c0, c1)
    auto tally = [&](const std::vector<LabelSet>& sets, bool is_c1) {
        for (const auto& labels : sets) {
            std::set<std::string> uniq(labels.begin(), labels.end());
            for (const auto& tok : uniq) {
                auto& c = counts[tok];
                (is_c1 ? c.second : c.first)++;
            }
        }
    };
    tally(class0, false);
    tally(class1, true);

    for (const auto& [tok, c] : counts) {
        if (c.first < min_count || c.second < min_count) continue;
        RatioRow row;
        row.token = tok;
        row.count_c0 = c.first;
        row.count_c1 = c.second;
        row.ratio = (static_cast<double>(c.second) / report.n1) /
                    (static_cast<double>(c.first) / report.n0);
        report.rows.push_back(row);
    }
    std::sort(report.rows.begin(), report.rows.end(), [](const RatioRow& a, const RatioRow& b) {
        if (a.ratio != b.ratio) return a.ratio > b.ratio;
        return a.token < b.token;
    });
    return report;
}

NullCheckSummary null_hypothesis_check(const std::vector<LabelSet>& all_labelsets, long n0,
                                       long n1, const RatioReport& real, uint64_t seed,
                                       int trials) {
    if (static_cast<long>(all_labelsets.size()) != n0 + n1) {
        throw ParamError("null_hypothesis_check: label sets must cover n0+n1 images");
    }
    if (trials < 1) throw ParamError("null_hypothesis_check: trials must be >= 1");
    long labeled = 0;
    for (const auto& s : all_labelsets) labeled += !s.empty();
    if (labeled < 200) {
        throw ParamError("null_hypothesis_check: needs at least 200 images with tokens, got " +
                         std::to_string(labeled));
    }

    std::map<std::string, std::vector<double>> ratios; // token -> per-trial ratio
    for (const auto& row : real.rows) ratios[row.token] = {};

    std::vector<int> order(all_labelsets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    Rng rng(seed);
    for (int t = 0; t < trials; ++t) {
        Rng trial_rng = rng.fork(static_cast<uint64_t>(t));
        deterministic_shuffle(order, trial_rng);
        std::vector<LabelSet> c0, c1;
        c0.reserve(n0);
        c1.reserve(n1);
        for (long i = 0; i < n0; ++i) c0.push_back(all_labelsets[order[i]]);
        for (long i = n0; i < n0 + n1; ++i) c1.push_back(all_labelsets[order[i]]);
        RatioReport trial = frequency_ratio(c0, c1, real.min_count);
        for (const auto& row : trial.rows) {
            auto it = ratios.find(row.token);
            if (it != ratios.end()) it->second.push_back(row.ratio);
        }
    }

    NullCheckSummary summary;
    summary.trials = trials;
    for (const auto& row : real.rows) {
        auto& r = ratios[row.token];
        if (static_cast<int>(r.size()) != trials) continue; // failed min_count in some trial
        std::sort(r.begin(), r.end());
        NullCheckRow out;
        out.token = row.token;
        out.real = row.ratio;
        double sum = 0;
        for (double v : r) sum += v;
        out.mean = sum / r.size();
        // nearest-rank percentiles
        auto rank = [&](double q) {
            size_t k = static_cast<size_t>(std::ceil(q * r.size()));
            k = std::clamp<size_t>(k, 1, r.size());
            return r[k - 1];
        };
        out.lo = rank(0.025);
        out.hi = rank(0.975);
        out.significant = out.real < out.lo || out.real > out.hi;
        summary.rows.push_back(out);
    }
    return summary;
}

std::string ratio_report_csv(const RatioReport& report) {
    std::string out = "token,count_c1,count_c0,normalized_ratio\n";
    for (const auto& row : report.rows) {
        out += csv_escape(row.token) + "," + std::to_string(row.count_c1) + "," +
               std::to_string(row.count_c0) + "," + format_double(row.ratio) + "\n";
    }
    return out;
}

const std::set<std::string>& default_localization_lexicon() {
    static const std::set<std::string> lex = {"bilateral", "peripheral", "middle", "lower",
                                              "upper",     "left",       "hilar",  "mediastinum"};
    return lex;
}

std::string ratio_report_text(const RatioReport& report,
                              const std::set<std::string>& localization_lexicon) {
    auto section = [&](bool localization) {
        std::string s;
        std::vector<const RatioRow*> over, under;
        for (const auto& row : report.rows) {
            const bool is_loc = localization_lexicon.count(row.token) > 0;
            if (is_loc != localization) continue;
            if (row.ratio > report.hi) over.push_back(&row);
            if (row.ratio < report.lo) under.push_back(&row);
        }
        auto line = [](const RatioRow* r) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.2f", r->ratio);
            return "  '" + r->token + "' (" + std::to_string(r->count_c0 + r->count_c1) + ")  " +
                   buf + "\n";
        };
        for (const auto* r : over) s += line(r);
        if (!over.empty() && !under.empty()) s += "  ...\n";
        for (const auto* r : under) s += line(r);
        if (s.empty()) s = "  (none)\n";
        return s;
    };

    std::string out;
    out += "Normalized frequency ratio (class1/class0), N1=" + std::to_string(report.n1) +
           " N0=" + std::to_string(report.n0) + ", min count " + std::to_string(report.min_count) +
           " per class\n";
    out += "Listed: ratio > " + format_double(report.hi) + " or < " + format_double(report.lo) +
           "\n\n";
    out += "Pathology\n";
    out += section(false);
    out += "\nLocalization\n";
    out += section(true);
    return out;
}

std::string null_check_csv(const NullCheckSummary& summary) {
    std::string out = "token,mean_ratio,lo_2_5,hi_97_5,real_ratio,significant\n";
    for (const auto& row : summary.rows) {
        out += csv_escape(row.token) + "," + format_double(row.mean) + "," +
               format_double(row.lo) + "," + format_double(row.hi) + "," +
               format_double(row.real) + "," + (row.significant ? "1" : "0") + "\n";
    }
    return out;
}

} // namespace icufeat::corrext
