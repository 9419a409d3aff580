#pragma once

#include <string>
#include <vector>

namespace icufeat {

/// Rows of named scalar features keyed by image id, with the patient-level
/// group id and class label carried through the pipeline.
struct FeatureTable {
    std::string mode; // mid | last | gradient
    std::string adapter_fingerprint;
    std::vector<std::string> columns;

    struct Row {
        std::string image_id;
        std::string group_id;
        int class_label = -1; // -1 = unknown (external corpus)
        bool augmented = false;
        bool flagged = false; // degenerate extraction; excluded from fitting
        std::vector<double> values;
    };
    std::vector<Row> rows;

    int column_index(const std::string& name) const;
    FeatureTable without_flagged() const;
};

/// CSV with fixed leading key columns plus a JSON schema sidecar carrying
/// mode, column names and the adapter fingerprint.
void write_feature_table(const FeatureTable& t, const std::string& csv_path,
                         const std::string& schema_path);
FeatureTable read_feature_table(const std::string& csv_path, const std::string& schema_path);

} // namespace icufeat
