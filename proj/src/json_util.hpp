#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "consensus/error.hpp"
#include "consensus/types.hpp"

namespace consensus::detail {

template <typename T>
T required(const Json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) {
    throw Error(ErrorCode::kSchemaError, where + ": missing field '" + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kSchemaError,
                where + ": field '" + key + "' has wrong type");
  }
}

template <typename T>
T optional_field(const Json& j, const char* key, T fallback,
                 const std::string& where) {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) {
    return fallback;
  }
  return required<T>(j, key, where);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes via a sibling temp file and rename so readers never observe a
/// partially written file.
void write_file_atomic(const std::filesystem::path& path,
                       const std::string& contents);

inline Json read_json_file(const std::filesystem::path& path) {
  auto text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorCode::kSchemaError, path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace consensus::detail
