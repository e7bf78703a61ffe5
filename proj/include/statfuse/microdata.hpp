#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "statfuse/common.hpp"

namespace statfuse {

enum class ColumnKind { categorical, continuous, semicontinuous };
enum class ColumnRole { predictor, fusion, weight, replicate_weight, id };

inline std::string to_string(ColumnKind k) {
    switch (k) {
        case ColumnKind::categorical: return "categorical";
        case ColumnKind::continuous: return "continuous";
        case ColumnKind::semicontinuous: return "semicontinuous";
    }
    return "?";
}

inline std::string to_string(ColumnRole r) {
    switch (r) {
        case ColumnRole::predictor: return "predictor";
        case ColumnRole::fusion: return "fusion";
        case ColumnRole::weight: return "weight";
        case ColumnRole::replicate_weight: return "replicate_weight";
        case ColumnRole::id: return "id";
    }
    return "?";
}

inline ColumnKind parse_kind(const std::string& s) {
    if (s == "categorical") return ColumnKind::categorical;
    if (s == "continuous") return ColumnKind::continuous;
    if (s == "semicontinuous") return ColumnKind::semicontinuous;
    throw ContractError("unknown column kind '" + s + "'");
}

inline ColumnRole parse_role(const std::string& s) {
    if (s == "predictor") return ColumnRole::predictor;
    if (s == "fusion") return ColumnRole::fusion;
    if (s == "weight") return ColumnRole::weight;
    if (s == "replicate_weight") return ColumnRole::replicate_weight;
    if (s == "id") return ColumnRole::id;
    throw ContractError("unknown column role '" + s + "'");
}

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::continuous;
    ColumnRole role = ColumnRole::predictor;
    std::vector<std::string> levels;  // categorical only, in declared order

    bool is_categorical() const { return kind == ColumnKind::categorical && role != ColumnRole::id; }

    int level_index(std::string_view level) const {
        for (std::size_t i = 0; i < levels.size(); ++i)
            if (levels[i] == level) return static_cast<int>(i);
        return -1;
    }

    bool operator==(const ColumnSpec&) const = default;
};

using Schema = std::vector<ColumnSpec>;

/// Checks per-column and table-level schema invariants.
inline void validate_schema(const Schema& schema) {
    std::set<std::string> names;
    int weight_columns = 0;
    int id_columns = 0;
    for (const auto& c : schema) {
        if (c.name.empty()) throw ContractError("schema: empty column name");
        if (!names.insert(c.name).second) throw ContractError("schema: duplicate column '" + c.name + "'");
        if (c.role == ColumnRole::weight) ++weight_columns;
        if (c.role == ColumnRole::id) ++id_columns;
        if (c.is_categorical()) {
            if (c.levels.empty()) throw ContractError("schema: categorical column '" + c.name + "' has no levels");
            std::set<std::string> seen(c.levels.begin(), c.levels.end());
            if (seen.size() != c.levels.size())
                throw ContractError("schema: categorical column '" + c.name + "' has duplicate levels");
        }
        if ((c.role == ColumnRole::weight || c.role == ColumnRole::replicate_weight) &&
            c.kind == ColumnKind::categorical)
            throw ContractError("schema: weight column '" + c.name + "' must be numeric");
    }
    if (weight_columns != 1)
        throw ContractError("schema: expected exactly one weight column, found " + std::to_string(weight_columns));
    if (id_columns > 1) throw ContractError("schema: at most one id column is allowed");
}

/// Reads a sidecar schema: one INI section per column, in file order.
///
///     [race]
///     role = predictor
///     kind = categorical
///     levels = White,Black,Asian,Other
inline Schema load_schema(const std::string& path) {
    if (!std::filesystem::exists(path)) throw IoError("schema file not found: " + path);
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(path, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ContractError(std::string("schema parse error: ") + e.what());
    }
    Schema schema;
    for (const auto& [name, section] : tree) {
        ColumnSpec spec;
        spec.name = name;
        spec.role = parse_role(section.get<std::string>("role", "predictor"));
        // id columns hold text; their kind is fixed
        spec.kind = spec.role == ColumnRole::id ? ColumnKind::categorical
                                                : parse_kind(section.get<std::string>("kind", "continuous"));
        spec.levels = split_list(section.get<std::string>("levels", ""));
        schema.push_back(std::move(spec));
    }
    validate_schema(schema);
    return schema;
}

inline void write_schema(const std::string& path, const Schema& schema) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write schema: " + path);
    for (const auto& c : schema) {
        out << '[' << c.name << "]\n";
        out << "role = " << to_string(c.role) << '\n';
        if (c.role != ColumnRole::id) out << "kind = " << to_string(c.kind) << '\n';
        if (c.is_categorical()) out << "levels = " << join(c.levels, ",") << '\n';
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

/// Sidecar convention: `data.csv` pairs with `data.schema`.
inline std::string sidecar_schema_path(const std::string& csv_path) {
    return std::filesystem::path(csv_path).replace_extension(".schema").string();
}

struct Column {
    ColumnSpec spec;
    std::vector<double> values;      // numeric columns
    std::vector<int> codes;          // categorical columns: index into spec.levels
    std::vector<std::string> text;   // id column
};

/// Weighted rectangular table of respondent records. Immutable once built.
class Microdata {
public:
    Microdata() = default;

    /// Builds and validates a table from fully-populated columns.
    Microdata(std::vector<Column> columns) : columns_(std::move(columns)) {
        Schema schema;
        for (const auto& c : columns_) schema.push_back(c.spec);
        validate_schema(schema);
        rows_ = columns_.empty() ? 0 : column_length(columns_.front());
        for (std::size_t i = 0; i < columns_.size(); ++i) {
            const auto& c = columns_[i];
            if (column_length(c) != rows_)
                throw ContractError("column '" + c.spec.name + "' has inconsistent length");
            index_[c.spec.name] = i;
        }
        validate_cells();
    }

    std::size_t rows() const { return rows_; }
    const std::vector<Column>& columns() const { return columns_; }

    Schema schema() const {
        Schema s;
        for (const auto& c : columns_) s.push_back(c.spec);
        return s;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const Column* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &columns_[it->second];
    }

    const Column& column(const std::string& name) const {
        const Column* c = find(name);
        if (!c) throw ContractError("no such column: '" + name + "'");
        return *c;
    }

    const Column& weight_column() const {
        for (const auto& c : columns_)
            if (c.spec.role == ColumnRole::weight) return c;
        throw ContractError("table has no weight column");
    }

    const std::vector<double>& weights() const { return weight_column().values; }

    std::vector<const Column*> replicate_weights() const {
        std::vector<const Column*> out;
        for (const auto& c : columns_)
            if (c.spec.role == ColumnRole::replicate_weight) out.push_back(&c);
        return out;
    }

    const Column* id_column() const {
        for (const auto& c : columns_)
            if (c.spec.role == ColumnRole::id) return &c;
        return nullptr;
    }

    /// Row identifiers; the 1-based row position stands in when no id column exists.
    std::vector<std::string> row_ids() const {
        if (const Column* id = id_column()) return id->text;
        std::vector<std::string> ids(rows_);
        for (std::size_t r = 0; r < rows_; ++r) ids[r] = std::to_string(r + 1);
        return ids;
    }

    std::vector<std::string> names_with_role(ColumnRole role) const {
        std::vector<std::string> out;
        for (const auto& c : columns_)
            if (c.spec.role == role) out.push_back(c.spec.name);
        return out;
    }

    /// Numeric view of a cell: the value for numeric columns, the level code for categoricals.
    double numeric(const Column& c, std::size_t row) const {
        return c.spec.is_categorical() ? static_cast<double>(c.codes[row]) : c.values[row];
    }

    Microdata select_rows(const std::vector<std::size_t>& rows) const {
        std::vector<Column> out;
        out.reserve(columns_.size());
        for (const auto& c : columns_) {
            Column n;
            n.spec = c.spec;
            if (!c.values.empty()) {
                n.values.reserve(rows.size());
                for (auto r : rows) n.values.push_back(c.values[r]);
            }
            if (!c.codes.empty()) {
                n.codes.reserve(rows.size());
                for (auto r : rows) n.codes.push_back(c.codes[r]);
            }
            if (!c.text.empty()) {
                n.text.reserve(rows.size());
                for (auto r : rows) n.text.push_back(c.text[r]);
            }
            out.push_back(std::move(n));
        }
        return Microdata(std::move(out));
    }

    Microdata without_columns(const std::vector<std::string>& drop) const {
        std::vector<Column> out;
        for (const auto& c : columns_)
            if (std::find(drop.begin(), drop.end(), c.spec.name) == drop.end()) out.push_back(c);
        return Microdata(std::move(out));
    }

    /// Content fingerprint over schema and every cell.
    std::string fingerprint() const {
        Fnv1a h;
        for (const auto& c : columns_) {
            h.update(c.spec.name);
            h.update(to_string(c.spec.kind));
            h.update(to_string(c.spec.role));
            for (const auto& l : c.spec.levels) h.update(l);
            for (double v : c.values) h.update(v);
            for (int code : c.codes) h.update(static_cast<double>(code));
            for (const auto& t : c.text) h.update(t);
        }
        return hex64(h.digest());
    }

private:
    static std::size_t column_length(const Column& c) {
        if (c.spec.role == ColumnRole::id) return c.text.size();
        if (c.spec.is_categorical()) return c.codes.size();
        return c.values.size();
    }

    void validate_cells() const {
        for (const auto& c : columns_) {
            for (std::size_t r = 0; r < rows_; ++r) {
                if (c.spec.role == ColumnRole::id) continue;
                if (c.spec.is_categorical()) {
                    const int code = c.codes[r];
                    if (code < 0 || code >= static_cast<int>(c.spec.levels.size()))
                        throw ContractError("row " + std::to_string(r + 1) + ", column '" + c.spec.name +
                                            "': level code out of range");
                    continue;
                }
                const double v = c.values[r];
                if (!std::isfinite(v))
                    throw ContractError("row " + std::to_string(r + 1) + ", column '" + c.spec.name +
                                        "': non-finite value");
                if (c.spec.role == ColumnRole::weight && !(v > 0.0))
                    throw ContractError("row " + std::to_string(r + 1) + ", column '" + c.spec.name +
                                        "': weight must be strictly positive, got " + format_double(v));
                if (c.spec.role == ColumnRole::replicate_weight && v < 0.0)
                    throw ContractError("row " + std::to_string(r + 1) + ", column '" + c.spec.name +
                                        "': replicate weight must be non-negative");
            }
        }
        if (const Column* id = id_column()) {
            std::unordered_set<std::string> seen;
            for (std::size_t r = 0; r < rows_; ++r)
                if (!seen.insert(id->text[r]).second)
                    throw ContractError("row " + std::to_string(r + 1) + ": duplicate id '" + id->text[r] + "'");
        }
    }

    std::vector<Column> columns_;
    std::unordered_map<std::string, std::size_t> index_;
    std::size_t rows_ = 0;
};

inline bool is_missing_token(const std::string& cell) {
    return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan" || cell == ".";
}

/// Parses a CSV with a header row against a declared schema.
inline Microdata load_microdata(const std::string& path, const Schema& schema) {
    validate_schema(schema);
    std::ifstream in(path);
    if (!in) throw IoError("cannot open data file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ContractError(path + ": empty file, expected a header row");
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
    const auto header = parse_csv_line(line);

    std::vector<int> position(schema.size(), -1);
    for (std::size_t i = 0; i < schema.size(); ++i) {
        for (std::size_t h = 0; h < header.size(); ++h)
            if (trim(header[h]) == schema[i].name) position[i] = static_cast<int>(h);
        if (position[i] < 0) throw ContractError(path + ": schema column '" + schema[i].name + "' missing from header");
    }
    for (const auto& h : header) {
        const std::string name = trim(h);
        if (std::none_of(schema.begin(), schema.end(), [&](const ColumnSpec& c) { return c.name == name; }))
            throw ContractError(path + ": header column '" + name + "' is not declared in the schema");
    }

    std::vector<Column> columns(schema.size());
    for (std::size_t i = 0; i < schema.size(); ++i) columns[i].spec = schema[i];

    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        ++row;
        const auto cells = parse_csv_line(line);
        if (cells.size() != header.size())
            throw ContractError(path + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                                " cells, expected " + std::to_string(header.size()));
        for (std::size_t i = 0; i < schema.size(); ++i) {
            const auto& spec = schema[i];
            const std::string cell = trim(cells[position[i]]);
            const auto where = [&] { return path + ": row " + std::to_string(row) + ", column '" + spec.name + "'"; };
            if (is_missing_token(cell)) throw ContractError(where() + ": missing value");
            if (spec.role == ColumnRole::id) {
                columns[i].text.push_back(cell);
            } else if (spec.is_categorical()) {
                const int code = spec.level_index(cell);
                if (code < 0) throw ContractError(where() + ": level '" + cell + "' is not declared");
                columns[i].codes.push_back(code);
            } else {
                double v;
                if (!parse_double(cell, v) || !std::isfinite(v))
                    throw ContractError(where() + ": cannot parse '" + cell + "' as a number");
                columns[i].values.push_back(v);
            }
        }
    }
    if (row == 0) throw ContractError(path + ": no data rows");
    return Microdata(std::move(columns));
}

inline Microdata load_microdata(const std::string& path) { return load_microdata(path, load_schema(sidecar_schema_path(path))); }

inline void write_microdata(const std::string& path, const Microdata& data) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write data file: " + path);
    const auto& cols = data.columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << csv_escape(cols[i].spec.name);
    out << '\n';
    for (std::size_t r = 0; r < data.rows(); ++r) {
        for (std::size_t i = 0; i < cols.size(); ++i) {
            const auto& c = cols[i];
            if (i) out << ',';
            if (c.spec.role == ColumnRole::id) out << csv_escape(c.text[r]);
            else if (c.spec.is_categorical()) out << csv_escape(c.spec.levels[c.codes[r]]);
            else out << format_double(c.values[r]);
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

/// Writes the CSV and its sidecar schema.
inline void save_microdata(const std::string& csv_path, const Microdata& data) {
    write_microdata(csv_path, data);
    write_schema(sidecar_schema_path(csv_path), data.schema());
}

struct CompatibilityReport {
    std::vector<std::string> violations;
    bool ok() const { return violations.empty(); }
};

/// Predictors must agree in kind and ordered levels across both tables;
/// fusion variables must exist in the donor only.
inline CompatibilityReport check_compatibility(const Microdata& donor, const Microdata& recipient,
                                               const std::vector<std::string>& predictors,
                                               const std::vector<std::string>& fusion_variables) {
    CompatibilityReport report;
    for (const auto& name : predictors) {
        const Column* d = donor.find(name);
        const Column* r = recipient.find(name);
        if (!d) report.violations.push_back("predictor '" + name + "' missing from donor");
        if (!r) report.violations.push_back("predictor '" + name + "' missing from recipient");
        if (!d || !r) continue;
        if (d->spec.kind != r->spec.kind) {
            report.violations.push_back("predictor '" + name + "' kind differs: donor " + to_string(d->spec.kind) +
                                        ", recipient " + to_string(r->spec.kind));
            continue;
        }
        if (d->spec.is_categorical()) {
            const std::size_t before = report.violations.size();
            for (const auto& level : d->spec.levels)
                if (r->spec.level_index(level) < 0)
                    report.violations.push_back("predictor '" + name + "': donor level '" + level +
                                                "' absent in recipient");
            for (const auto& level : r->spec.levels)
                if (d->spec.level_index(level) < 0)
                    report.violations.push_back("predictor '" + name + "': recipient level '" + level +
                                                "' absent in donor");
            if (report.violations.size() == before && d->spec.levels != r->spec.levels)
                report.violations.push_back("predictor '" + name + "': level order differs");
        }
    }
    for (const auto& name : fusion_variables) {
        if (!donor.has(name)) report.violations.push_back("fusion variable '" + name + "' missing from donor");
        if (recipient.has(name))
            report.violations.push_back("fusion variable '" + name + "' present in recipient");
    }
    return report;
}

}  // namespace statfuse
