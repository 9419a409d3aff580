#pragma once

#include "icufeat/cohort.hpp"
#include "icufeat/featuretable.hpp"
#include "icufeat/treelab.hpp"

#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace icufeat::corrext {

/// One externally annotated radiograph. Label tokens are trimmed, lowercased
/// and deduplicated per image.
struct AnnotatedImage {
    std::string image_id;
    std::string image_path;
    Image pixels;
    std::vector<std::string> labels;
    bool valid = true;      // image decoded and usable
    bool has_labels = true; // false when the label cell was empty
};

struct ExternalColumns {
    std::string image_id;              // empty = use filename
    std::string filename = "filename";
    std::string labels = "labels";
};

/// Parse "['Pneumonia','bilateral']"-style list cells or plain ;/,-delimited
/// lists into normalized tokens.
std::vector<std::string> parse_label_cell(const std::string& cell);

std::vector<AnnotatedImage> load_external(const std::string& csv_path,
                                          const ExternalColumns& cols = {},
                                          const std::string& images_dir = "",
                                          const cohort::ImageLoader& loader =
                                              cohort::file_image_loader());

/// Predicted-class partition of the external table's rows. The table must
/// carry the same feature mode the tree was fitted on.
struct Partition {
    std::vector<std::string> class0; // image ids
    std::vector<std::string> class1;
};
Partition classify_external(const treelab::TreeModel& model, const FeatureTable& table);

struct RatioRow {
    std::string token;
    long count_c1 = 0;
    long count_c0 = 0;
    double ratio = 0.0; // (count_c1/N1) / (count_c0/N0)
};

/// Per-token normalized frequency ratio between predicted classes. Only
/// tokens with count >= min_count in each class appear; rows are sorted by
/// descending ratio (ties by token).
struct RatioReport {
    std::vector<RatioRow> rows;
    long n0 = 0;
    long n1 = 0;
    int min_count = 20;
    double hi = 1.2;
    double lo = 0.8;
};

using LabelSet = std::vector<std::string>; // deduplicated tokens of one image

RatioReport frequency_ratio(const std::vector<LabelSet>& class0,
                            const std::vector<LabelSet>& class1, int min_count);

struct NullCheckRow {
    std::string token;
    double mean = 0.0;
    double lo = 0.0; // 2.5th percentile over trials
    double hi = 0.0; // 97.5th percentile
    double real = 0.0;
    bool significant = false; // real ratio outside [lo, hi]
};

struct NullCheckSummary {
    std::vector<NullCheckRow> rows;
    int trials = 0;
};

/// Monte-Carlo null model: random partitions of the pooled label sets into
/// the real class sizes. Tokens are reported when they pass min_count in
/// every trial's both sides and in the real partition.
NullCheckSummary null_hypothesis_check(const std::vector<LabelSet>& all_labelsets, long n0,
                                       long n1, const RatioReport& real, uint64_t seed,
                                       int trials);

std::string ratio_report_csv(const RatioReport& report);

/// Two-section text table (pathology / localization) listing tokens with
/// ratio above `hi` or below `lo`; the lexicon decides which tokens count as
/// localization terms.
std::string ratio_report_text(const RatioReport& report,
                              const std::set<std::string>& localization_lexicon);

const std::set<std::string>& default_localization_lexicon();

std::string null_check_csv(const NullCheckSummary& summary);

} // namespace icufeat::corrext
