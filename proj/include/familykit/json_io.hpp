// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_JSON_IO_HPP
#define FAMILYKIT_JSON_IO_HPP

#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"

#include "familykit/config.hpp"
#include "familykit/error.hpp"

namespace familykit {

using json = nlohmann::json;

/// Rejects keys of `j` outside `allowed`. `where` names the object in the message.
inline void require_known_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw config_error(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw config_error("unknown key '" + key + "' in " + where);
  }
}

/// Reads `j[key]` into `out` when present, wrapping type errors as config errors.
template <typename T>
void read_optional(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw config_error(where + "." + key + ": " + e.what());
  }
}

void to_json(json& j, const FamilyConfig& c);
void from_json(const json& j, FamilyConfig& c);

}  // namespace familykit

#endif  // FAMILYKIT_JSON_IO_HPP
