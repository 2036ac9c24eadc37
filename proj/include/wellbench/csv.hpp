#pragma once

#include <istream>
#include <string>
#include <vector>

namespace wellbench {

// Minimal RFC-4180-style reader: comma-separated, double-quoted fields with
// "" escapes, CRLF/LF line endings, fields may contain embedded newlines.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const;  // -1 when absent
};

CsvTable read_csv(std::istream& in);
CsvTable read_csv_file(const std::string& path);  // throws FormatError

}  // namespace wellbench
