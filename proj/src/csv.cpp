#include "icufeat/csv.hpp"

#include "icufeat/errors.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace icufeat {

int CsvTable::column(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
}

namespace {

// One record, honoring quoted fields with "" escapes. Returns position after
// the record's line terminator.
size_t parse_record(const std::string& text, size_t pos, std::vector<std::string>& out) {
    out.clear();
    std::string field;
    bool quoted = false;
    while (pos < text.size()) {
        char c = text[pos];
        if (quoted) {
            if (c == '"') {
                if (pos + 1 < text.size() && text[pos + 1] == '"') {
                    field += '"';
                    ++pos;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && pos + 1 < text.size() && text[pos + 1] == '\n') ++pos;
            ++pos;
            out.push_back(std::move(field));
            return pos;
        } else {
            field += c;
        }
        ++pos;
    }
    out.push_back(std::move(field));
    return pos;
}

} // namespace

CsvTable parse_csv(const std::string& text) {
    CsvTable t;
    size_t pos = 0;
    std::vector<std::string> record;
    if (pos < text.size()) {
        pos = parse_record(text, pos, record);
        t.header = record;
    }
    while (pos < text.size()) {
        pos = parse_record(text, pos, record);
        if (record.size() == 1 && record[0].empty()) continue; // blank line
        t.rows.push_back(record);
    }
    return t;
}

CsvTable read_csv(const std::string& path) {
    return parse_csv(read_text_file(path));
}

std::string csv_escape(const std::string& field) {
    bool needs = field.find_first_of(",\"\n\r") != std::string::npos;
    if (!needs) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write file: " + path);
    out << content;
    if (!out) throw DataError("write failed: " + path);
}

} // namespace icufeat
