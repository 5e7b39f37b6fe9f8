#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ual {

/// One instruction/response pair; `uncertainty` is the normalized judge score.
struct Sample {
  std::string id;
  std::string instruction;
  std::string response;
  std::optional<double> uncertainty;

  bool operator==(const Sample&) const = default;
};

using Dataset = std::vector<Sample>;

/// Parses JSON-lines text. Blank lines are skipped. Errors carry the
/// 1-based line number.
Dataset parse_dataset(const std::string& text);
Dataset load_dataset(const std::filesystem::path& path);

/// One compact JSON object per line, fields in the order id, instruction,
/// response, uncertainty (omitted when absent).
std::string serialize_dataset(const Dataset& dataset);
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);

}  // namespace ual
