#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kidforge/common.hpp"

namespace kidforge {

// nlohmann's default object type keeps keys sorted, which makes every dump
// canonical. All serialization in this project relies on that.
using json = nlohmann::json;

enum class AnnotationKind { categorical, cluster };

inline const char* to_string(AnnotationKind k) {
    return k == AnnotationKind::categorical ? "categorical" : "cluster";
}

struct AnnotationDef {
    std::string name;
    AnnotationKind kind = AnnotationKind::categorical;
    // Sorted, normalized, duplicate-free. Empty for cluster annotations:
    // their label space is open (dataset-local strings).
    std::vector<std::string> label_set;

    bool has_label(const std::string& v) const {
        return std::binary_search(label_set.begin(), label_set.end(), v);
    }

    bool operator==(const AnnotationDef&) const = default;
};

struct AnnotationSchema {
    std::vector<AnnotationDef> annotations;

    const AnnotationDef* find(const std::string& name) const {
        for (const auto& a : annotations)
            if (a.name == name) return &a;
        return nullptr;
    }

    const AnnotationDef& require(const std::string& name) const {
        const AnnotationDef* a = find(name);
        if (!a) fail(ErrorKind::config, "annotation '" + name + "' not in schema");
        return *a;
    }

    bool operator==(const AnnotationSchema&) const = default;
};

struct SampleRecord {
    std::string sample_id;
    std::optional<std::string> image;        // path to an image file
    std::optional<std::string> feature_ref;  // path/key of a feature table
    // Only declared annotations may appear. nullopt = value explicitly null.
    std::map<std::string, std::optional<std::string>> annotations;

    std::optional<std::string> label(const std::string& annotation) const {
        auto it = annotations.find(annotation);
        if (it == annotations.end()) return std::nullopt;
        return it->second;
    }

    bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
    std::string dataset_id;
    std::vector<std::string> declared_annotations;  // sorted
    std::uint64_t split_seed = 0;
    std::vector<SampleRecord> samples;

    bool declares(const std::string& annotation) const {
        return std::binary_search(declared_annotations.begin(), declared_annotations.end(),
                                  annotation);
    }

    // Fraction of samples carrying a non-null value for the annotation.
    // Vacuously 1 for an empty dataset.
    double coverage(const std::string& annotation) const {
        if (samples.empty()) return 1.0;
        std::size_t n = 0;
        for (const auto& s : samples)
            if (s.label(annotation)) ++n;
        return static_cast<double>(n) / static_cast<double>(samples.size());
    }

    bool operator==(const DatasetManifest&) const = default;
};

struct Federation {
    AnnotationSchema schema;
    std::vector<DatasetManifest> datasets;

    const DatasetManifest* find(const std::string& dataset_id) const {
        for (const auto& d : datasets)
            if (d.dataset_id == dataset_id) return &d;
        return nullptr;
    }
};

struct Violation {
    std::string dataset_id;
    std::string sample_id;  // empty for dataset-level problems
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;

    bool ok() const { return violations.empty(); }

    std::string to_string() const {
        std::ostringstream out;
        for (const auto& v : violations) {
            out << v.dataset_id;
            if (!v.sample_id.empty()) out << "/" << v.sample_id;
            out << ": " << v.message << "\n";
        }
        return out.str();
    }
};

// ---------------------------------------------------------------------------
// Schema parsing.
//
// Schema files are a single JSON object:
//   {"annotations": [{"name": "color", "kind": "categorical",
//                     "labels": ["black", ...]},
//                    {"name": "make", "kind": "cluster"}]}

inline AnnotationSchema parse_schema_json(const json& j) {
    AnnotationSchema schema;
    if (!j.is_object() || !j.contains("annotations") || !j["annotations"].is_array())
        fail(ErrorKind::parse, "schema: expected object with 'annotations' array");
    for (const auto& ja : j["annotations"]) {
        AnnotationDef def;
        if (!ja.is_object() || !ja.contains("name") || !ja["name"].is_string())
            fail(ErrorKind::parse, "schema: annotation entry needs a string 'name'");
        def.name = std::string(trim(ja["name"].get<std::string>()));
        std::string kind = ja.value("kind", std::string("categorical"));
        if (kind == "categorical")
            def.kind = AnnotationKind::categorical;
        else if (kind == "cluster")
            def.kind = AnnotationKind::cluster;
        else
            fail(ErrorKind::parse, "schema: unknown kind '" + kind + "' for '" + def.name + "'");
        if (ja.contains("labels")) {
            if (!ja["labels"].is_array())
                fail(ErrorKind::parse, "schema: 'labels' must be an array for '" + def.name + "'");
            for (const auto& jl : ja["labels"]) {
                if (!jl.is_string())
                    fail(ErrorKind::parse, "schema: non-string label in '" + def.name + "'");
                def.label_set.push_back(normalize_label(jl.get<std::string>()));
            }
            std::sort(def.label_set.begin(), def.label_set.end());
            def.label_set.erase(std::unique(def.label_set.begin(), def.label_set.end()),
                                def.label_set.end());
        }
        if (def.kind == AnnotationKind::categorical && def.label_set.empty())
            fail(ErrorKind::parse, "schema: categorical '" + def.name + "' needs labels");
        if (def.kind == AnnotationKind::cluster && !def.label_set.empty())
            fail(ErrorKind::parse, "schema: cluster '" + def.name + "' must not fix labels");
        if (schema.find(def.name)) fail(ErrorKind::parse, "schema: duplicate '" + def.name + "'");
        schema.annotations.push_back(std::move(def));
    }
    return schema;
}

inline AnnotationSchema parse_schema(std::istream& in) {
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        fail(ErrorKind::parse, std::string("schema: ") + e.what());
    }
    return parse_schema_json(j);
}

inline AnnotationSchema parse_schema_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open schema file " + path.string());
    return parse_schema(in);
}

inline json schema_to_json(const AnnotationSchema& schema) {
    json out;
    out["annotations"] = json::array();
    for (const auto& a : schema.annotations) {
        json ja;
        ja["name"] = a.name;
        ja["kind"] = to_string(a.kind);
        if (a.kind == AnnotationKind::categorical) ja["labels"] = a.label_set;
        out["annotations"].push_back(ja);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest parsing. Line-delimited JSON: a header object with "dataset_id"
// and "declared_annotations", then one record object per line. Blank lines
// are skipped. A null/absent image, feature_ref or label all mean "absent".
//
// Structural problems (broken JSON, missing sample_id) always throw. Schema
// violations (undeclared key, label outside the label set) throw too unless
// a sink is given, in which case they are recorded and parsing continues;
// that is how `validate` reports everything wrong with a file at once.

namespace detail {

inline void report(std::vector<Violation>* sink, const std::string& dataset_id,
                   const std::string& sample_id, const std::string& message) {
    if (sink)
        sink->push_back({dataset_id, sample_id, message});
    else
        fail(ErrorKind::schema_violation, dataset_id + "/" + sample_id + ": " + message);
}

inline std::optional<std::string> opt_string(const json& j, const char* key, int line) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    if (!it->is_string())
        fail(ErrorKind::parse,
             "manifest line " + std::to_string(line) + ": '" + key + "' must be string or null");
    return it->get<std::string>();
}

}  // namespace detail

inline DatasetManifest parse_manifest(std::istream& in, const AnnotationSchema& schema,
                                      std::vector<Violation>* sink = nullptr) {
    DatasetManifest m;
    std::string line;
    int line_no = 0;
    bool have_header = false;
    std::set<std::string> seen_ids;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view sv = trim(line);
        if (sv.empty() || sv.front() == '#') continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            fail(ErrorKind::parse, "manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.is_object())
            fail(ErrorKind::parse, "manifest line " + std::to_string(line_no) + ": not an object");
        if (!have_header) {
            if (!j.contains("dataset_id") || !j["dataset_id"].is_string())
                fail(ErrorKind::parse, "manifest header needs a string 'dataset_id'");
            m.dataset_id = j["dataset_id"].get<std::string>();
            if (j.contains("declared_annotations")) {
                if (!j["declared_annotations"].is_array())
                    fail(ErrorKind::parse, "manifest header: declared_annotations must be array");
                for (const auto& ja : j["declared_annotations"]) {
                    if (!ja.is_string())
                        fail(ErrorKind::parse, "manifest header: non-string annotation name");
                    std::string name = std::string(trim(ja.get<std::string>()));
                    if (!schema.find(name))
                        detail::report(sink, m.dataset_id, "",
                                       "declared annotation '" + name + "' not in schema");
                    m.declared_annotations.push_back(name);
                }
                std::sort(m.declared_annotations.begin(), m.declared_annotations.end());
                m.declared_annotations.erase(
                    std::unique(m.declared_annotations.begin(), m.declared_annotations.end()),
                    m.declared_annotations.end());
            }
            if (j.contains("split_seed")) {
                if (!j["split_seed"].is_number_unsigned() && !j["split_seed"].is_number_integer())
                    fail(ErrorKind::parse, "manifest header: split_seed must be an integer");
                m.split_seed = j["split_seed"].get<std::uint64_t>();
            }
            have_header = true;
            continue;
        }
        SampleRecord rec;
        if (!j.contains("sample_id") || !j["sample_id"].is_string())
            fail(ErrorKind::parse,
                 "manifest line " + std::to_string(line_no) + ": record needs string 'sample_id'");
        rec.sample_id = j["sample_id"].get<std::string>();
        if (!seen_ids.insert(rec.sample_id).second)
            detail::report(sink, m.dataset_id, rec.sample_id, "duplicate sample_id");
        rec.image = detail::opt_string(j, "image", line_no);
        rec.feature_ref = detail::opt_string(j, "feature_ref", line_no);
        if (j.contains("annotations")) {
            if (!j["annotations"].is_object())
                fail(ErrorKind::parse,
                     "manifest line " + std::to_string(line_no) + ": annotations must be object");
            for (const auto& [key, val] : j["annotations"].items()) {
                if (!m.declares(key))
                    detail::report(sink, m.dataset_id, rec.sample_id,
                                   "annotation '" + key + "' not declared by dataset");
                std::optional<std::string> label;
                if (val.is_null()) {
                    label = std::nullopt;
                } else if (val.is_string()) {
                    label = normalize_label(val.get<std::string>());
                } else {
                    fail(ErrorKind::parse, "manifest line " + std::to_string(line_no) +
                                               ": label for '" + key + "' must be string or null");
                }
                if (label) {
                    const AnnotationDef* def = schema.find(key);
                    if (def && def->kind == AnnotationKind::categorical && !def->has_label(*label))
                        detail::report(sink, m.dataset_id, rec.sample_id,
                                       "label '" + *label + "' outside label set of '" + key + "'");
                }
                rec.annotations[key] = label;
            }
        }
        m.samples.push_back(std::move(rec));
    }
    // An empty file is a valid manifest with zero samples and nothing
    // declared; dataset_id stays empty.
    return m;
}

inline DatasetManifest parse_manifest_file(const std::filesystem::path& path,
                                           const AnnotationSchema& schema,
                                           std::vector<Violation>* sink = nullptr) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open manifest " + path.string());
    return parse_manifest(in, schema, sink);
}

inline void write_manifest(const DatasetManifest& m, std::ostream& out) {
    json header;
    header["dataset_id"] = m.dataset_id;
    header["declared_annotations"] = m.declared_annotations;
    header["split_seed"] = m.split_seed;
    out << header.dump() << "\n";
    for (const auto& s : m.samples) {
        json j;
        j["sample_id"] = s.sample_id;
        j["image"] = s.image ? json(*s.image) : json(nullptr);
        j["feature_ref"] = s.feature_ref ? json(*s.feature_ref) : json(nullptr);
        json ann = json::object();
        for (const auto& [k, v] : s.annotations) ann[k] = v ? json(*v) : json(nullptr);
        j["annotations"] = ann;
        out << j.dump() << "\n";
    }
}

inline void write_manifest_file(const DatasetManifest& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write manifest " + path.string());
    write_manifest(m, out);
}

// ---------------------------------------------------------------------------
// Federation-level validation. Report only; never mutates, never throws on
// content problems.

struct ValidateOptions {
    double min_coverage = 0.95;
    bool check_files = false;  // verify that referenced image paths exist
    std::filesystem::path base_dir = ".";
};

inline ValidationReport validate_federation(const Federation& fed,
                                            const ValidateOptions& opts = {}) {
    ValidationReport report;
    auto add = [&](const std::string& ds, const std::string& id, std::string msg) {
        report.violations.push_back({ds, id, std::move(msg)});
    };
    std::set<std::string> dataset_ids;
    for (const auto& d : fed.datasets) {
        if (!dataset_ids.insert(d.dataset_id).second)
            add(d.dataset_id, "", "duplicate dataset_id in federation");
        for (const auto& name : d.declared_annotations) {
            if (!fed.schema.find(name)) {
                add(d.dataset_id, "", "declared annotation '" + name + "' not in schema");
                continue;
            }
            double cov = d.coverage(name);
            if (cov < opts.min_coverage)
                add(d.dataset_id, "",
                    "coverage " + format_double(cov) + " for declared '" + name +
                        "' below minimum " + format_double(opts.min_coverage));
        }
        std::set<std::string> ids;
        for (const auto& s : d.samples) {
            if (!ids.insert(s.sample_id).second)
                add(d.dataset_id, s.sample_id, "duplicate sample_id");
            if (!s.image && !s.feature_ref)
                add(d.dataset_id, s.sample_id, "sample has neither image nor feature_ref");
            if (opts.check_files && s.image) {
                std::filesystem::path p = opts.base_dir / *s.image;
                if (!std::filesystem::exists(p))
                    add(d.dataset_id, s.sample_id, "image file missing: " + p.string());
            }
            for (const auto& [key, val] : s.annotations) {
                if (!d.declares(key)) {
                    add(d.dataset_id, s.sample_id, "annotation '" + key + "' not declared");
                    continue;
                }
                const AnnotationDef* def = fed.schema.find(key);
                if (def && val && def->kind == AnnotationKind::categorical &&
                    !def->has_label(*val))
                    add(d.dataset_id, s.sample_id,
                        "label '" + *val + "' outside label set of '" + key + "'");
            }
        }
    }
    return report;
}

// Splits a federation into datasets that contain the annotation (sources)
// and datasets with a gap at it. A dataset contains an annotation iff it
// declares it AND at least min_coverage of its samples carry a non-null
// label, so a nominally declared but nearly empty column cannot teach.
// Order within each part follows federation order; the two parts always
// cover the federation exactly.
struct Partition {
    std::vector<DatasetManifest> sources;
    std::vector<DatasetManifest> gaps;
};

inline Partition partition_by_annotation(const Federation& fed, const std::string& annotation,
                                         double min_coverage = 0.95) {
    fed.schema.require(annotation);
    Partition part;
    for (const auto& d : fed.datasets) {
        if (d.declares(annotation) && d.coverage(annotation) >= min_coverage)
            part.sources.push_back(d);
        else
            part.gaps.push_back(d);
    }
    if (part.sources.empty())
        fail(ErrorKind::no_source, "no dataset contains annotation '" + annotation + "'");
    return part;
}

}  // namespace kidforge
