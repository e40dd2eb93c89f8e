#pragma once
// Minimal JSON-schema-subset validator (type, required, properties,
// additionalProperties, items, minimum/maximum, enum) plus the embedded
// schema for aggregate.json. The same schema text ships in the repo under
// schemas/; a test pins the two copies together.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace catr::schema {

inline constexpr const char* kAggregateSchema = R"JSON({
  "type": "object",
  "required": ["version", "tau_true", "replications", "failures", "estimators", "diagnostics"],
  "additionalProperties": true,
  "properties": {
    "version": {"type": "integer", "enum": [1]},
    "tau_true": {"type": "number"},
    "replications": {"type": "integer", "minimum": 1},
    "failures": {"type": "integer", "minimum": 0},
    "estimators": {
      "type": "object",
      "required": ["or", "ipw", "aipw"],
      "properties": {
        "or": {
          "type": "object",
          "required": ["mean_abs_bias", "sd", "avg_se", "coverage"],
          "properties": {
            "mean_abs_bias": {"type": "number", "minimum": 0},
            "sd": {"type": "number", "minimum": 0},
            "avg_se": {"type": "number", "minimum": 0},
            "coverage": {"type": "number", "minimum": 0, "maximum": 1}
          }
        },
        "ipw": {
          "type": "object",
          "required": ["mean_abs_bias", "sd", "avg_se", "coverage"],
          "properties": {
            "mean_abs_bias": {"type": "number", "minimum": 0},
            "sd": {"type": "number", "minimum": 0},
            "avg_se": {"type": "number", "minimum": 0},
            "coverage": {"type": "number", "minimum": 0, "maximum": 1}
          }
        },
        "aipw": {
          "type": "object",
          "required": ["mean_abs_bias", "sd", "avg_se", "coverage"],
          "properties": {
            "mean_abs_bias": {"type": "number", "minimum": 0},
            "sd": {"type": "number", "minimum": 0},
            "avg_se": {"type": "number", "minimum": 0},
            "coverage": {"type": "number", "minimum": 0, "maximum": 1}
          }
        }
      }
    },
    "diagnostics": {
      "type": "object",
      "required": ["ess_ratio", "clipping_fraction", "clip_epsilon"],
      "properties": {
        "ess_ratio": {"type": "number", "minimum": 0},
        "clipping_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "clip_epsilon": {"type": "number", "minimum": 0, "maximum": 0.5}
      }
    }
  }
})JSON";

namespace detail {

inline bool type_matches(const nlohmann::json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "integer") return v.is_number_integer() || v.is_number_unsigned();
    if (t == "number") return v.is_number();
    return false;
}

inline void validate_node(const nlohmann::json& value, const nlohmann::json& sch,
                          const std::string& path, std::vector<std::string>& errors) {
    if (sch.contains("type") &&
        !type_matches(value, sch["type"].get<std::string>())) {
        errors.push_back(path + ": expected type " + sch["type"].get<std::string>());
        return;
    }
    if (sch.contains("enum")) {
        bool hit = false;
        for (const auto& opt : sch["enum"])
            if (opt == value) hit = true;
        if (!hit) errors.push_back(path + ": value not in enum");
    }
    if (value.is_number()) {
        const double x = value.get<double>();
        if (sch.contains("minimum") && x < sch["minimum"].get<double>())
            errors.push_back(path + ": below minimum");
        if (sch.contains("maximum") && x > sch["maximum"].get<double>())
            errors.push_back(path + ": above maximum");
    }
    if (value.is_object()) {
        if (sch.contains("required"))
            for (const auto& key : sch["required"])
                if (!value.contains(key.get<std::string>()))
                    errors.push_back(path + ": missing required key '" +
                                     key.get<std::string>() + "'");
        const bool extra_ok =
            !sch.contains("additionalProperties") ||
            sch["additionalProperties"].get<bool>();
        for (auto it = value.begin(); it != value.end(); ++it) {
            if (sch.contains("properties") && sch["properties"].contains(it.key()))
                validate_node(it.value(), sch["properties"][it.key()],
                              path + "/" + it.key(), errors);
            else if (!extra_ok)
                errors.push_back(path + ": unexpected key '" + it.key() + "'");
        }
    }
    if (value.is_array() && sch.contains("items")) {
        int i = 0;
        for (const auto& item : value)
            validate_node(item, sch["items"], path + "[" + std::to_string(i++) + "]",
                          errors);
    }
}

}  // namespace detail

inline std::vector<std::string> validate(const nlohmann::json& value,
                                         const nlohmann::json& schema) {
    std::vector<std::string> errors;
    detail::validate_node(value, schema, "", errors);
    return errors;
}

inline std::vector<std::string> validate_aggregate(const nlohmann::json& value) {
    return validate(value, nlohmann::json::parse(kAggregateSchema));
}

}  // namespace catr::schema
