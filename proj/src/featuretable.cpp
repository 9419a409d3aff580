#include "icufeat/featuretable.hpp"

#include "icufeat/csv.hpp"
#include "icufeat/errors.hpp"

#include <charconv>

#include <nlohmann/json.hpp>

namespace icufeat {

int FeatureTable::column_index(const std::string& name) const {
    for (size_t i = 0; i < columns.size(); ++i) {
        if (columns[i] == name) return static_cast<int>(i);
    }
    return -1;
}

FeatureTable FeatureTable::without_flagged() const {
    FeatureTable t;
    t.mode = mode;
    t.adapter_fingerprint = adapter_fingerprint;
    t.columns = columns;
    for (const auto& r : rows) {
        if (!r.flagged) t.rows.push_back(r);
    }
    return t;
}

void write_feature_table(const FeatureTable& t, const std::string& csv_path,
                         const std::string& schema_path) {
    std::string out = "image_id,group_id,class_label,augmented,flagged";
    for (const auto& c : t.columns) out += "," + csv_escape(c);
    out += "\n";
    for (const auto& r : t.rows) {
        out += csv_escape(r.image_id) + "," + csv_escape(r.group_id) + "," +
               std::to_string(r.class_label) + "," + (r.augmented ? "1" : "0") + "," +
               (r.flagged ? "1" : "0");
        for (double v : r.values) out += "," + format_double(v);
        out += "\n";
    }
    write_text_file(csv_path, out);

    nlohmann::json schema;
    schema["mode"] = t.mode;
    schema["adapter_fingerprint"] = t.adapter_fingerprint;
    schema["columns"] = t.columns;
    write_text_file(schema_path, schema.dump(2) + "\n");
}

FeatureTable read_feature_table(const std::string& csv_path, const std::string& schema_path) {
    FeatureTable t;
    auto schema = nlohmann::json::parse(read_text_file(schema_path));
    t.mode = schema.at("mode").get<std::string>();
    t.adapter_fingerprint = schema.value("adapter_fingerprint", "");
    t.columns = schema.at("columns").get<std::vector<std::string>>();

    CsvTable csv = read_csv(csv_path);
    const size_t lead = 5;
    if (csv.header.size() != lead + t.columns.size()) {
        throw SchemaError("feature csv " + csv_path + " does not match its schema sidecar");
    }
    for (size_t i = 0; i < csv.rows.size(); ++i) {
        const auto& raw = csv.rows[i];
        if (raw.size() != csv.header.size()) {
            throw SchemaError("feature csv row " + std::to_string(i + 1) + ": wrong field count");
        }
        FeatureTable::Row r;
        r.image_id = raw[0];
        r.group_id = raw[1];
        r.class_label = std::stoi(raw[2]);
        r.augmented = raw[3] == "1";
        r.flagged = raw[4] == "1";
        r.values.resize(t.columns.size());
        for (size_t j = 0; j < t.columns.size(); ++j) {
            const std::string& s = raw[lead + j];
            auto res = std::from_chars(s.data(), s.data() + s.size(), r.values[j]);
            if (res.ec != std::errc{}) {
                throw SchemaError("feature csv row " + std::to_string(i + 1) +
                                  ": bad number '" + s + "'");
            }
        }
        t.rows.push_back(std::move(r));
    }
    return t;
}

} // namespace icufeat
