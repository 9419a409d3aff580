#pragma once

#include <string>
#include <vector>

namespace icufeat {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Index of a header column, -1 if absent.
    int column(const std::string& name) const;
};

CsvTable parse_csv(const std::string& text);
CsvTable read_csv(const std::string& path);

/// Quote a field if it contains separators, quotes or newlines.
std::string csv_escape(const std::string& field);

/// Shortest round-trip decimal representation, locale independent. All
/// numeric artifact output goes through this so reruns are byte-identical.
std::string format_double(double v);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

} // namespace icufeat
