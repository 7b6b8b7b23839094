#pragma once

#include "hydronet/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <string>
#include <vector>

namespace hydronet {

/// Strict JSON access: every config and manifest reader rejects unknown keys
/// so typos fail loudly instead of silently using defaults.
inline void reject_unknown_keys(const nlohmann::json& obj,
                                const std::vector<std::string>& allowed,
                                const std::string& where) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ValidationError("unknown key '" + key + "' in " + where);
    }
}

inline double json_number(const nlohmann::json& obj, const std::string& key,
                          const std::string& where) {
    if (!obj.contains(key))
        throw ValidationError("missing key '" + key + "' in " + where);
    if (!obj[key].is_number())
        throw ValidationError("key '" + key + "' in " + where + " must be a number");
    return obj[key].get<double>();
}

inline long json_integer(const nlohmann::json& obj, const std::string& key,
                         const std::string& where) {
    if (!obj.contains(key))
        throw ValidationError("missing key '" + key + "' in " + where);
    if (!obj[key].is_number_integer())
        throw ValidationError("key '" + key + "' in " + where + " must be an integer");
    return obj[key].get<long>();
}

inline std::string json_string(const nlohmann::json& obj, const std::string& key,
                               const std::string& where) {
    if (!obj.contains(key))
        throw ValidationError("missing key '" + key + "' in " + where);
    if (!obj[key].is_string())
        throw ValidationError("key '" + key + "' in " + where + " must be a string");
    return obj[key].get<std::string>();
}

}  // namespace hydronet
