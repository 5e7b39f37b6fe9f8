#include "ual/dataset.hpp"

#include <json.hpp>

#include <sstream>

#include "ual/error.hpp"
#include "ual/io.hpp"

namespace ual {

using json = nlohmann::ordered_json;

namespace {

Sample sample_from_json(const json& obj) {
  if (!obj.is_object()) throw FormatError("expected a JSON object");
  auto str_field = [&](const char* key) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string()) {
      throw FormatError(std::string("missing or non-string field '") + key + "'");
    }
    return it->get<std::string>();
  };
  Sample s;
  s.id = str_field("id");
  s.instruction = str_field("instruction");
  s.response = str_field("response");
  if (auto it = obj.find("uncertainty"); it != obj.end() && !it->is_null()) {
    if (!it->is_number()) throw FormatError("field 'uncertainty' must be a number");
    s.uncertainty = it->get<double>();
  }
  return s;
}

}  // namespace

Dataset parse_dataset(const std::string& text) {
  Dataset out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.push_back(sample_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& path) {
  try {
    return parse_dataset(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string serialize_dataset(const Dataset& dataset) {
  std::string out;
  for (const auto& s : dataset) {
    json obj;
    obj["id"] = s.id;
    obj["instruction"] = s.instruction;
    obj["response"] = s.response;
    if (s.uncertainty) obj["uncertainty"] = *s.uncertainty;
    out += obj.dump(-1, ' ', false, json::error_handler_t::strict);
    out += '\n';
  }
  return out;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  io::write_file_atomic(path, serialize_dataset(dataset));
}

}  // namespace ual
