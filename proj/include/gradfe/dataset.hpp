#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "gradfe/feature_dsl.hpp"

namespace gradfe {

enum class Task { Classification, Regression };
enum class TaskHint { Auto, Classification, Regression };

const char* to_string(Task task);

/// Raw feature columns plus a target. Classification targets hold integer
/// class labels stored as doubles.
struct Dataset {
  std::vector<std::string> names;
  std::vector<Column> columns;
  Column target;
  std::string target_name;
  Task task = Task::Regression;

  std::size_t rows() const noexcept { return target.size(); }
  std::size_t features() const noexcept { return columns.size(); }

  /// Throws DataError unless every column has the target's length, n >= 10,
  /// all values are finite and classification labels are integers. A constant
  /// regression target throws ConstantTarget.
  void validate() const;
};

struct CsvOptions {
  std::string target;
  TaskHint task = TaskHint::Auto;
  /// Integer-valued targets with at most this many distinct values are
  /// treated as classification under TaskHint::Auto.
  std::size_t max_auto_classes = 20;
};

struct IngestResult {
  Dataset dataset;
  std::size_t dropped_rows = 0;
  std::vector<std::string> encoded_columns;
};

/// Reads a headed CSV file. Rows with a missing value (empty, "?", "NA",
/// "NaN", "null") are dropped; non-numeric feature columns are label-encoded
/// in sorted order. Throws ConfigError if the target column is absent and
/// DataError for unreadable or unusable files.
IngestResult load_csv(const std::filesystem::path& path, const CsvOptions& options);
IngestResult parse_csv(std::string_view text, const CsvOptions& options);

/// Writes a headed CSV with `columns` followed by the target.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& names,
               const std::vector<Column>& columns, const std::string& target_name, const Column& target);

}  // namespace gradfe
