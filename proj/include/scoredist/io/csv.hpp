#pragma once

// Append-only CSV metrics files with a fixed header. Floats are written with
// %.17g so reruns of a deterministic configuration produce byte-identical
// files.

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace scoredist {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class MetricsWriter {
public:
    MetricsWriter(const std::string& path, std::vector<std::string> columns)
        : columns_(std::move(columns)), os_(path) {
        if (!os_) throw std::runtime_error("cannot open metrics file " + path);
        for (std::size_t i = 0; i < columns_.size(); ++i) {
            if (i) os_ << ",";
            os_ << columns_[i];
        }
        os_ << "\n";
        os_.flush();
    }

    void row(const std::vector<double>& values) {
        if (values.size() != columns_.size()) {
            throw std::invalid_argument("metrics row width does not match header");
        }
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (i) os_ << ",";
            os_ << format_double(values[i]);
        }
        os_ << "\n";
        os_.flush();
    }

    const std::vector<std::string>& columns() const { return columns_; }

private:
    std::vector<std::string> columns_;
    std::ofstream os_;
};

struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    std::size_t column_index(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i) {
            if (columns[i] == name) return i;
        }
        throw std::invalid_argument("csv has no column " + name);
    }

    std::vector<double> column(const std::string& name) const {
        const std::size_t idx = column_index(name);
        std::vector<double> out;
        out.reserve(rows.size());
        for (const auto& r : rows) out.push_back(r[idx]);
        return out;
    }
};

inline CsvTable load_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    CsvTable table;
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("empty csv " + path);
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) table.columns.push_back(cell);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::vector<double> row;
        while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
        if (row.size() != table.columns.size()) {
            throw std::runtime_error("ragged csv row in " + path);
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

}  // namespace scoredist
