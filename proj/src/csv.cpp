#include "wellbench/csv.hpp"

#include <fstream>

#include "wellbench/errors.hpp"

namespace wellbench {

int CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
}

namespace {

// Parses one record starting at the current stream position. Returns false
// on EOF before any content.
bool read_record(std::istream& in, std::vector<std::string>& fields) {
    fields.clear();
    std::string field;
    bool in_quotes = false;
    bool saw_any = false;
    int c;
    while ((c = in.get()) != EOF) {
        saw_any = true;
        if (in_quotes) {
            if (c == '"') {
                if (in.peek() == '"') {
                    field.push_back('"');
                    in.get();
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(static_cast<char>(c));
            }
        } else if (c == '"') {
            in_quotes = true;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else if (c == '\r') {
            if (in.peek() == '\n') in.get();
            fields.push_back(std::move(field));
            return true;
        } else if (c == '\n') {
            fields.push_back(std::move(field));
            return true;
        } else {
            field.push_back(static_cast<char>(c));
        }
    }
    if (in_quotes) throw FormatError("unterminated quoted field at end of input");
    if (!saw_any) return false;
    fields.push_back(std::move(field));
    return true;
}

void strip_bom(std::string& s) {
    if (s.size() >= 3 && static_cast<unsigned char>(s[0]) == 0xEF &&
        static_cast<unsigned char>(s[1]) == 0xBB &&
        static_cast<unsigned char>(s[2]) == 0xBF) {
        s.erase(0, 3);
    }
}

}  // namespace

CsvTable read_csv(std::istream& in) {
    CsvTable table;
    std::vector<std::string> fields;
    if (!read_record(in, fields)) {
        throw FormatError("empty input: expected a header row");
    }
    if (!fields.empty()) strip_bom(fields.front());
    table.header = fields;
    while (read_record(in, fields)) {
        // Skip fully blank trailing lines.
        if (fields.size() == 1 && fields[0].empty()) continue;
        if (fields.size() != table.header.size()) {
            throw FormatError("row " + std::to_string(table.rows.size() + 1) +
                              " has " + std::to_string(fields.size()) +
                              " fields, header has " +
                              std::to_string(table.header.size()));
        }
        table.rows.push_back(fields);
    }
    return table;
}

CsvTable read_csv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    return read_csv(in);
}

}  // namespace wellbench
