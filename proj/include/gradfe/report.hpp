#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>

#include "gradfe/evolution.hpp"

namespace gradfe {

nlohmann::json to_json(const SearchConfig& config);

/// Full search report. Wall-clock values and the worker count live under
/// "timings" only, so two runs with the same config and seed differ in that
/// key alone. `run` is
/// echoed verbatim under "run" (dataset path, task hint, ...).
nlohmann::json search_report(const SearchResult& result, const FeatureSpace& space,
                             const nlohmann::json& run = nlohmann::json::object());

/// Report text as written to report.json (two-space indent, trailing newline).
std::string dump_report(const nlohmann::json& report);

/// Raw columns, then one column per selected feature named by its sanitized
/// infix form, then the target.
void write_augmented_csv(const std::filesystem::path& path, const Dataset& data, const FeatureSpace& space,
                         const SearchResult& result);

}  // namespace gradfe
