#include "gradfe/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "gradfe/errors.hpp"

namespace gradfe {

const char* to_string(Task task) {
  return task == Task::Classification ? "classification" : "regression";
}

void Dataset::validate() const {
  const std::size_t n = target.size();
  if (n < 10) throw DataError("dataset needs at least 10 rows, got " + std::to_string(n));
  if (columns.empty()) throw DataError("dataset has no feature columns");
  if (names.size() != columns.size()) throw DataError("column name count does not match column count");
  for (std::size_t j = 0; j < columns.size(); ++j) {
    if (columns[j].size() != n) throw DataError("column '" + names[j] + "' has the wrong length");
    for (double v : columns[j])
      if (!std::isfinite(v)) throw DataError("column '" + names[j] + "' contains a non-finite value");
  }
  for (double v : target) {
    if (!std::isfinite(v)) throw DataError("target contains a non-finite value");
    if (task == Task::Classification && v != std::round(v))
      throw DataError("classification target contains a non-integer label");
  }
  if (task == Task::Regression &&
      std::all_of(target.begin(), target.end(), [&](double v) { return v == target.front(); }))
    throw ConstantTarget();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  for (auto& f : fields) {
    const auto b = f.find_first_not_of(" \t\r");
    const auto e = f.find_last_not_of(" \t\r");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return fields;
}

bool is_missing(const std::string& s) {
  if (s.empty() || s == "?") return true;
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  return lower == "na" || lower == "nan" || lower == "null" || lower == "none";
}

std::optional<double> parse_number(const std::string& s) {
  double v = 0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Numeric column, or label codes (sorted distinct strings) when any entry is
// not a number.
Column encode_column(const std::vector<std::string>& raw, bool& encoded) {
  Column out(raw.size());
  encoded = false;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto v = parse_number(raw[i]);
    if (!v) {
      encoded = true;
      break;
    }
    out[i] = *v;
  }
  if (!encoded) return out;
  std::set<std::string> levels(raw.begin(), raw.end());
  std::map<std::string, double> code;
  double next = 0;
  for (const auto& l : levels) code[l] = next++;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = code[raw[i]];
  return out;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

IngestResult parse_csv(std::string_view text, const CsvOptions& options) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV input is empty");
  const auto header = split_csv_line(line);
  auto target_it = std::find(header.begin(), header.end(), options.target);
  if (target_it == header.end()) throw ConfigError("target column '" + options.target + "' not found");
  const auto target_col = static_cast<std::size_t>(target_it - header.begin());

  std::vector<std::vector<std::string>> cells(header.size());
  IngestResult result;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw DataError("line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                      " fields, expected " + std::to_string(header.size()));
    if (std::any_of(fields.begin(), fields.end(), is_missing)) {
      ++result.dropped_rows;
      continue;
    }
    for (std::size_t j = 0; j < fields.size(); ++j) cells[j].push_back(std::move(fields[j]));
  }

  Dataset& ds = result.dataset;
  ds.target_name = options.target;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (j == target_col) continue;
    bool encoded = false;
    ds.columns.push_back(encode_column(cells[j], encoded));
    ds.names.push_back(header[j]);
    if (encoded) result.encoded_columns.push_back(header[j]);
  }

  bool target_encoded = false;
  ds.target = encode_column(cells[target_col], target_encoded);
  switch (options.task) {
    case TaskHint::Classification: ds.task = Task::Classification; break;
    case TaskHint::Regression:
      if (target_encoded) throw DataError("regression target '" + options.target + "' is not numeric");
      ds.task = Task::Regression;
      break;
    case TaskHint::Auto: {
      const bool integral = std::all_of(ds.target.begin(), ds.target.end(),
                                        [](double v) { return v == std::round(v); });
      const std::set<double> distinct(ds.target.begin(), ds.target.end());
      ds.task = target_encoded || (integral && distinct.size() <= options.max_auto_classes)
                    ? Task::Classification
                    : Task::Regression;
      break;
    }
  }
  ds.validate();
  return result;
}

IngestResult load_csv(const std::filesystem::path& path, const CsvOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), options);
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& names,
               const std::vector<Column>& columns, const std::string& target_name, const Column& target) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  for (const auto& n : names) out << quote(n) << ',';
  out << quote(target_name) << '\n';
  for (std::size_t i = 0; i < target.size(); ++i) {
    for (const auto& c : columns) out << format_number(c[i]) << ',';
    out << format_number(target[i]) << '\n';
  }
}

}  // namespace gradfe
