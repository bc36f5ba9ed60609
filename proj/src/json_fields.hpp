#pragma once

// Strict field access for configuration-style JSON objects. Every failure
// throws std::invalid_argument naming the key and where it was expected.

#include <initializer_list>
#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace dmu::json_fields {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known,
                           const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) {
      throw std::invalid_argument("unknown key '" + item.key() + "' in " + where);
    }
  }
}

template <typename T>
T required(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) {
    throw std::invalid_argument("missing required key '" + std::string(key) + "' in " + where);
  }
  const auto& v = j.at(key);
  if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    if (!v.is_number_unsigned()) {
      throw std::invalid_argument("key '" + std::string(key) + "' in " + where +
                                  " must be a non-negative integer");
    }
  }
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument("key '" + std::string(key) + "' in " + where +
                                " has the wrong type");
  }
}

template <typename T>
T optional(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
  return j.contains(key) ? required<T>(j, key, where) : fallback;
}

}  // namespace dmu::json_fields
