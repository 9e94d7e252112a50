#pragma once

// Validator for the JSON Schema keywords used in schema/: type, const, enum, required,
// properties, items, minItems, minimum, exclusiveMinimum.

#include "json.hpp"

#include <string>
#include <vector>

namespace mfgm::testing {

using schema_json = nlohmann::ordered_json;

inline bool has_type(const schema_json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "number") return v.is_number();
    if (t == "integer") return v.is_number_integer();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    return false;
}

inline void check_schema(const schema_json& schema, const schema_json& v, const std::string& path,
                         std::vector<std::string>& errors) {
    if (schema.contains("type")) {
        const auto& t = schema.at("type");
        bool ok = false;
        if (t.is_string()) {
            ok = has_type(v, t.get<std::string>());
        } else {
            for (const auto& alt : t) ok = ok || has_type(v, alt.get<std::string>());
        }
        if (!ok) {
            errors.push_back(path + ": expected type " + t.dump());
            return;
        }
    }
    if (schema.contains("const") && v != schema.at("const")) errors.push_back(path + ": expected " + schema.at("const").dump());
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& e : schema.at("enum")) found = found || e == v;
        if (!found) errors.push_back(path + ": not one of " + schema.at("enum").dump());
    }
    if (v.is_number()) {
        const double x = v.get<double>();
        if (schema.contains("minimum") && x < schema.at("minimum").get<double>()) errors.push_back(path + ": below minimum");
        if (schema.contains("exclusiveMinimum") && x <= schema.at("exclusiveMinimum").get<double>()) {
            errors.push_back(path + ": not above exclusiveMinimum");
        }
    }
    if (v.is_object()) {
        if (schema.contains("required")) {
            for (const auto& key : schema.at("required")) {
                if (!v.contains(key.get<std::string>())) errors.push_back(path + ": missing " + key.get<std::string>());
            }
        }
        if (schema.contains("properties")) {
            for (const auto& [key, sub] : schema.at("properties").items()) {
                if (v.contains(key)) check_schema(sub, v.at(key), path + "." + key, errors);
            }
        }
    }
    if (v.is_array()) {
        if (schema.contains("minItems") && v.size() < schema.at("minItems").get<std::size_t>()) {
            errors.push_back(path + ": too few items");
        }
        if (schema.contains("items")) {
            for (std::size_t i = 0; i < v.size(); ++i) {
                check_schema(schema.at("items"), v.at(i), path + "[" + std::to_string(i) + "]", errors);
            }
        }
    }
}

inline std::vector<std::string> schema_errors(const schema_json& schema, const schema_json& v) {
    std::vector<std::string> errors;
    check_schema(schema, v, "$", errors);
    return errors;
}

}  // namespace mfgm::testing
