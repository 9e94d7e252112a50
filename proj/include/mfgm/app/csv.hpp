#pragma once

// Time-series CSV: header `t,x1,...,xK`, one row per sample time, no missing values.

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "mfgm/errors.hpp"
#include "mfgm/time_grid.hpp"

namespace mfgm::app {

/// Shortest decimal string that reads back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    if (res.ec != std::errc{}) throw InvalidArgument("cannot format number");
    return {buf, res.ptr};
}

struct Series {
    TimeGrid grid;
    Eigen::MatrixXd values;  // K x N
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline double parse_number(std::string_view field, std::size_t line, std::size_t column) {
    field = trim(field);
    if (field.empty()) throw ParseError("empty value in column " + std::to_string(column), line);
    if (field.front() == '+') field.remove_prefix(1);
    double v = 0.0;
    const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
        throw ParseError("'" + std::string(field) + "' in column " + std::to_string(column) + " is not a number",
                         line);
    }
    if (!std::isfinite(v)) throw ParseError("non-finite value in column " + std::to_string(column), line);
    return v;
}

}  // namespace detail

inline Series parse_series_csv(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    std::size_t num_states = 0;
    std::vector<double> times;
    std::vector<std::vector<double>> rows;

    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = detail::trim(raw);
        if (line_no == 1 && line.size() >= 3 && line.substr(0, 3) == "\xEF\xBB\xBF") line.remove_prefix(3);
        if (line.empty()) continue;
        const auto fields = detail::split_commas(line);
        if (num_states == 0) {
            if (fields.size() < 2) throw ParseError("header needs a time column and at least one state", line_no);
            if (detail::trim(fields[0]) != "t") throw ParseError("first header column must be 't'", line_no);
            for (std::size_t j = 1; j < fields.size(); ++j) {
                const std::string expected = "x" + std::to_string(j);
                if (detail::trim(fields[j]) != expected) {
                    throw ParseError("header column " + std::to_string(j + 1) + " must be '" + expected + "'",
                                     line_no);
                }
            }
            num_states = fields.size() - 1;
            continue;
        }
        if (fields.size() != num_states + 1) {
            throw ParseError("expected " + std::to_string(num_states + 1) + " values, found " +
                                 std::to_string(fields.size()),
                             line_no);
        }
        times.push_back(detail::parse_number(fields[0], line_no, 1));
        if (times.size() > 1 && !(times.back() > times[times.size() - 2])) {
            throw ParseError("time values must be strictly increasing", line_no);
        }
        std::vector<double> row;
        for (std::size_t j = 1; j < fields.size(); ++j) row.push_back(detail::parse_number(fields[j], line_no, j + 1));
        rows.push_back(std::move(row));
    }
    if (num_states == 0) throw ParseError("missing header", line_no);
    if (rows.size() < 2) throw ParseError("need at least two data rows", line_no);

    Eigen::MatrixXd values(static_cast<Eigen::Index>(num_states), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t t = 0; t < rows.size(); ++t) {
        for (std::size_t k = 0; k < num_states; ++k) {
            values(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(t)) = rows[t][k];
        }
    }
    return {TimeGrid(std::move(times)), std::move(values)};
}

inline Series read_series_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("cannot open data file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return parse_series_csv(buf.str());
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what(), 0);  // e.what() already names the line
    }
}

inline std::string format_series_csv(const TimeGrid& grid, const Eigen::MatrixXd& values) {
    if (static_cast<std::size_t>(values.cols()) != grid.size()) {
        throw DimensionMismatch("series has " + std::to_string(values.cols()) + " columns for " +
                                std::to_string(grid.size()) + " time points");
    }
    std::string out = "t";
    for (Eigen::Index k = 0; k < values.rows(); ++k) out += ",x" + std::to_string(k + 1);
    out += '\n';
    for (std::size_t t = 0; t < grid.size(); ++t) {
        out += format_double(grid[t]);
        for (Eigen::Index k = 0; k < values.rows(); ++k) {
            out += ',';
            out += format_double(values(k, static_cast<Eigen::Index>(t)));
        }
        out += '\n';
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidArgument("cannot write '" + path + "'");
    out << text;
    if (!out) throw InvalidArgument("write to '" + path + "' failed");
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace mfgm::app
