#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hudd/experiment.hpp"
#include "hudd/report.hpp"

namespace hudd::config {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Published schema (JSON Schema draft 2020-12 subset: type, properties,
// required, additionalProperties, items, minItems, maxItems, minimum,
// maximum, exclusiveMinimum, minLength, $ref into $defs).

inline constexpr std::string_view kSchema = R"json({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "hudd run configuration",
  "type": "object",
  "additionalProperties": false,
  "required": ["name"],
  "properties": {
    "name": {"type": "string", "minLength": 1},
    "runs_dir": {"type": "string", "minLength": 1},
    "data": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "train": {"type": "string", "minLength": 1},
        "test": {"type": "string", "minLength": 1},
        "improvement": {"type": "string", "minLength": 1},
        "labels": {"type": "string"}
      }
    },
    "classes": {"type": "integer", "minimum": 2},
    "generate": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "scene": {"$ref": "#/$defs/scene"},
        "train_size": {"type": "integer", "minimum": 1},
        "test_size": {"type": "integer", "minimum": 1},
        "improvement_size": {"type": "integer", "minimum": 1},
        "train_hard_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "eval_hard_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": {"type": "integer", "minimum": 0}
      }
    },
    "train": {"$ref": "#/$defs/train"},
    "retrain": {"$ref": "#/$defs/train"},
    "selection": {
      "type": "object",
      "additionalProperties": false,
      "properties": {"sf": {"type": "number", "minimum": 0, "maximum": 1}}
    },
    "layers": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    "k_cap": {"type": "integer", "minimum": 2},
    "seed": {"type": "integer", "minimum": 0},
    "jobs": {"type": "integer", "minimum": 1},
    "report": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "tiles": {"type": "integer", "minimum": 1},
        "columns": {"type": "integer", "minimum": 1},
        "scale": {"type": "integer", "minimum": 1, "maximum": 16},
        "params": {"type": "array", "items": {"type": "string", "minLength": 1}},
        "gif": {"type": "boolean"},
        "images_per_minute": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "experiment": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "scene": {"$ref": "#/$defs/scene"},
        "train_hard_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "eval_hard_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "train_size": {"type": "integer", "minimum": 1},
        "test_size": {"type": "integer", "minimum": 1},
        "improvement_size": {"type": "integer", "minimum": 1},
        "train": {"$ref": "#/$defs/train"},
        "retrain": {"$ref": "#/$defs/train"},
        "sf": {"type": "number", "minimum": 0, "maximum": 1},
        "layers": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "k_cap": {"type": "integer", "minimum": 2},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "jobs": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"}
      }
    }
  },
  "$defs": {
    "range": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}},
    "train": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "warm_start": {"type": "boolean"}
      }
    },
    "scene": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "size": {"type": "integer", "minimum": 8},
        "classes": {"type": "integer", "minimum": 2},
        "angle": {"$ref": "#/$defs/range"},
        "length": {"$ref": "#/$defs/range"},
        "occlusion": {"$ref": "#/$defs/range"},
        "brightness": {"$ref": "#/$defs/range"},
        "offset": {"$ref": "#/$defs/range"},
        "noise": {"type": "number", "minimum": 0},
        "hard_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "cause_weights": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number", "minimum": 0}},
        "boundary_band": {"type": "number", "minimum": 0},
        "heavy_occlusion": {"$ref": "#/$defs/range"},
        "low_brightness": {"$ref": "#/$defs/range"}
      }
    }
  }
})json";

inline const json& schema() {
    static const json s = json::parse(kSchema);
    return s;
}

namespace detail {

inline bool type_matches(const json& v, const std::string& type) {
    if (type == "object") return v.is_object();
    if (type == "array") return v.is_array();
    if (type == "string") return v.is_string();
    if (type == "boolean") return v.is_boolean();
    if (type == "integer") return v.is_number_integer();
    if (type == "number") return v.is_number();
    if (type == "null") return v.is_null();
    throw InvalidArgument("schema uses unsupported type '" + type + "'");
}

inline void validate(const json& v, const json& s, const json& root, const std::string& where,
                     std::vector<std::string>& errors) {
    if (s.contains("$ref")) {
        const auto ref = s["$ref"].get<std::string>();
        const std::string prefix = "#/$defs/";
        if (ref.rfind(prefix, 0) != 0) throw InvalidArgument("unsupported $ref " + ref);
        validate(v, root["$defs"][ref.substr(prefix.size())], root, where, errors);
        return;
    }
    if (s.contains("type") && !type_matches(v, s["type"].get<std::string>())) {
        errors.push_back(where + ": expected " + s["type"].get<std::string>());
        return;
    }
    if (v.is_number()) {
        const double x = v.get<double>();
        if (s.contains("minimum") && x < s["minimum"].get<double>())
            errors.push_back(where + ": must be >= " + s["minimum"].dump());
        if (s.contains("maximum") && x > s["maximum"].get<double>())
            errors.push_back(where + ": must be <= " + s["maximum"].dump());
        if (s.contains("exclusiveMinimum") && x <= s["exclusiveMinimum"].get<double>())
            errors.push_back(where + ": must be > " + s["exclusiveMinimum"].dump());
    }
    if (v.is_string() && s.contains("minLength") && v.get<std::string>().size() < s["minLength"].get<std::size_t>())
        errors.push_back(where + ": string too short");
    if (v.is_array()) {
        if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>())
            errors.push_back(where + ": needs at least " + s["minItems"].dump() + " items");
        if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>())
            errors.push_back(where + ": allows at most " + s["maxItems"].dump() + " items");
        if (s.contains("items"))
            for (std::size_t i = 0; i < v.size(); ++i)
                validate(v[i], s["items"], root, where + "[" + std::to_string(i) + "]", errors);
    }
    if (v.is_object()) {
        if (s.contains("required"))
            for (const auto& r : s["required"])
                if (!v.contains(r.get<std::string>())) errors.push_back(where + ": missing required key '" + r.get<std::string>() + "'");
        const json props = s.value("properties", json::object());
        for (const auto& [key, child] : v.items()) {
            if (props.contains(key)) {
                validate(child, props[key], root, where + "." + key, errors);
            } else if (s.contains("additionalProperties") && s["additionalProperties"] == false) {
                errors.push_back(where + ": unknown key '" + key + "'");
            }
        }
    }
}

}  // namespace detail

/// Every violation of the schema, as "$.path: message" strings.
inline std::vector<std::string> schema_errors(const json& doc, const json& s = schema()) {
    std::vector<std::string> errors;
    detail::validate(doc, s, s, "$", errors);
    return errors;
}

// ---------------------------------------------------------------------------

struct DataPaths {
    std::string train = "data/train";
    std::string test = "data/test";
    std::string improvement = "data/improvement";
    std::string labels;  // optional image_id,label CSV for the unsafe images
};

struct GenerateConfig {
    synth::SceneSpec scene;
    std::size_t train_size = 2000;
    std::size_t test_size = 2000;
    std::size_t improvement_size = 3000;
    double train_hard_fraction = 0.04;
    double eval_hard_fraction = 0.35;
    std::uint64_t seed = 0;
};

struct RunConfig {
    std::string name = "default";
    std::string runs_dir = "runs";
    DataPaths data;
    std::size_t classes = 8;
    GenerateConfig generate;
    net::TrainConfig train{10, 0.05, 16, 0, true};
    net::TrainConfig retrain{3, 0.02, 16, 0, true};
    double sf = 0.3;
    std::vector<int> layers;
    std::size_t k_cap = 50;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    report::ReportOptions report;
    experiment::ExperimentConfig experiment;

    std::filesystem::path run_dir() const { return std::filesystem::path(runs_dir) / name; }
};

/// Resolves `p` against `base` unless it is absolute.
inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
    if (p.empty()) return p;
    const std::filesystem::path path(p);
    return (path.is_absolute() ? path : base / path).lexically_normal().string();
}

/// Validates against the schema, then applies every key over the defaults.
/// Relative paths are resolved against `base_dir` (the config file's folder).
inline RunConfig from_json(const json& doc, const std::filesystem::path& base_dir = ".") {
    const auto errors = schema_errors(doc);
    if (!errors.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw InvalidArgument(msg);
    }
    RunConfig c;
    c.name = doc.at("name").get<std::string>();
    if (c.name.find('/') != std::string::npos || c.name == "." || c.name == "..")
        throw InvalidArgument("run name must be a plain directory name");
    c.runs_dir = doc.value("runs_dir", c.runs_dir);
    if (doc.contains("data")) {
        const auto& d = doc["data"];
        c.data.train = d.value("train", c.data.train);
        c.data.test = d.value("test", c.data.test);
        c.data.improvement = d.value("improvement", c.data.improvement);
        c.data.labels = d.value("labels", c.data.labels);
    }
    c.classes = doc.value("classes", c.classes);
    if (doc.contains("generate")) {
        const auto& g = doc["generate"];
        if (g.contains("scene")) c.generate.scene = experiment::scene_from_json(g["scene"]);
        c.generate.train_size = g.value("train_size", c.generate.train_size);
        c.generate.test_size = g.value("test_size", c.generate.test_size);
        c.generate.improvement_size = g.value("improvement_size", c.generate.improvement_size);
        c.generate.train_hard_fraction = g.value("train_hard_fraction", c.generate.train_hard_fraction);
        c.generate.eval_hard_fraction = g.value("eval_hard_fraction", c.generate.eval_hard_fraction);
        c.generate.seed = g.value("seed", c.generate.seed);
    }
    if (c.generate.scene.classes != c.classes && doc.contains("generate") && doc["generate"].contains("scene") &&
        doc["generate"]["scene"].contains("classes")) {
        throw InvalidArgument("generate.scene.classes disagrees with classes");
    }
    c.generate.scene.classes = c.classes;
    if (doc.contains("train")) c.train = experiment::train_from_json(doc["train"], c.train);
    if (doc.contains("retrain")) c.retrain = experiment::train_from_json(doc["retrain"], c.retrain);
    if (doc.contains("selection")) c.sf = doc["selection"].value("sf", c.sf);
    if (doc.contains("layers")) c.layers = doc["layers"].get<std::vector<int>>();
    c.k_cap = doc.value("k_cap", c.k_cap);
    c.seed = doc.value("seed", c.seed);
    c.jobs = doc.value("jobs", c.jobs);
    if (doc.contains("report")) {
        const auto& r = doc["report"];
        c.report.tiles = r.value("tiles", c.report.tiles);
        c.report.columns = r.value("columns", c.report.columns);
        c.report.scale = r.value("scale", c.report.scale);
        if (r.contains("params")) c.report.params = r["params"].get<std::vector<std::string>>();
        c.report.gif = r.value("gif", c.report.gif);
        c.report.images_per_minute = r.value("images_per_minute", c.report.images_per_minute);
    }
    if (doc.contains("experiment")) c.experiment = experiment::experiment_from_json(doc["experiment"]);
    c.runs_dir = resolve(base_dir, c.runs_dir);
    c.data.train = resolve(base_dir, c.data.train);
    c.data.test = resolve(base_dir, c.data.test);
    c.data.improvement = resolve(base_dir, c.data.improvement);
    c.data.labels = resolve(base_dir, c.data.labels);
    if (c.experiment.output_dir.empty()) c.experiment.output_dir = (c.run_dir() / "experiment").string();
    else c.experiment.output_dir = resolve(base_dir, c.experiment.output_dir);
    c.generate.scene.validate();
    c.report.validate();
    return c;
}

inline RunConfig load(const std::string& path) {
    const auto doc = artifacts::read_json(path);
    return from_json(doc, std::filesystem::absolute(path).parent_path());
}

}  // namespace hudd::config
