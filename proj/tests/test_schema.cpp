#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "kidforge/schema.hpp"

using namespace kidforge;

namespace {

// Six-dataset federation shaped like a real-world vehicle federation:
// color/type/make declared per dataset in a fixed pattern; color has three
// sources.
const char* kSchemaJson = R"({
  "annotations": [
    {"name": "color", "kind": "categorical",
     "labels": ["black", "white", "red", "blue", "green", "silver"]},
    {"name": "type", "kind": "categorical",
     "labels": ["sedan", "suv", "truck", "van"]},
    {"name": "make", "kind": "cluster"}
  ]
})";

AnnotationSchema fixture_schema() {
    std::istringstream in(kSchemaJson);
    return parse_schema(in);
}

DatasetManifest tiny_dataset(const AnnotationSchema& schema, const std::string& id,
                             const std::vector<std::string>& declared, int n,
                             const std::string& color = "red") {
    std::ostringstream out;
    json header;
    header["dataset_id"] = id;
    header["declared_annotations"] = declared;
    header["split_seed"] = 7;
    out << header.dump() << "\n";
    for (int i = 0; i < n; ++i) {
        json rec;
        rec["sample_id"] = "s" + std::to_string(i);
        rec["feature_ref"] = id + ".ftab";
        json ann = json::object();
        for (const auto& a : declared) {
            if (a == "color") ann[a] = color;
            if (a == "type") ann[a] = "sedan";
            if (a == "make") ann[a] = "ford";
        }
        rec["annotations"] = ann;
        out << rec.dump() << "\n";
    }
    std::istringstream in(out.str());
    return parse_manifest(in, schema);
}

}  // namespace

TEST_CASE("schema parses names, kinds, and sorted label sets") {
    AnnotationSchema s = fixture_schema();
    REQUIRE(s.annotations.size() == 3);
    CHECK(s.annotations[0].name == "color");
    CHECK(s.annotations[0].kind == AnnotationKind::categorical);
    CHECK(s.annotations[0].label_set.front() == "black");
    CHECK(s.annotations[0].has_label("silver"));
    CHECK_FALSE(s.annotations[0].has_label("magenta"));
    CHECK(s.annotations[2].kind == AnnotationKind::cluster);
    CHECK(s.annotations[2].label_set.empty());
}

TEST_CASE("schema rejects bad shapes") {
    auto parse = [](const std::string& text) {
        std::istringstream in(text);
        return parse_schema(in);
    };
    CHECK_THROWS_AS(parse("[]"), Error);
    // Categorical without labels.
    CHECK_THROWS_AS(parse(R"({"annotations":[{"name":"color","kind":"categorical"}]})"), Error);
    // Cluster must not fix labels.
    CHECK_THROWS_AS(
        parse(R"({"annotations":[{"name":"make","kind":"cluster","labels":["ford"]}]})"), Error);
    // Duplicate name.
    CHECK_THROWS_AS(parse(R"({"annotations":[
        {"name":"color","kind":"categorical","labels":["red"]},
        {"name":"color","kind":"categorical","labels":["blue"]}]})"),
                    Error);
    // Unknown kind.
    CHECK_THROWS_AS(parse(R"({"annotations":[{"name":"x","kind":"regression"}]})"), Error);
}

TEST_CASE("schema round-trips through JSON") {
    AnnotationSchema s = fixture_schema();
    json j = schema_to_json(s);
    CHECK(parse_schema_json(j) == s);
}

TEST_CASE("empty manifest file parses to an empty manifest") {
    AnnotationSchema schema = fixture_schema();
    std::istringstream in("");
    DatasetManifest m = parse_manifest(in, schema);
    CHECK(m.samples.empty());
    CHECK(m.declared_annotations.empty());
}

TEST_CASE("two-line manifest reads back field by field") {
    AnnotationSchema schema = fixture_schema();
    std::istringstream in(
        "{\"dataset_id\":\"veh\",\"declared_annotations\":[\"color\",\"type\"],\"split_seed\":3}\n"
        "{\"sample_id\":\"a\",\"image\":\"a.jpg\",\"annotations\":{\"color\":\"Red\",\"type\":\"SUV\"}}\n"
        "\n"
        "# a comment line\n"
        "{\"sample_id\":\"b\",\"feature_ref\":\"t.ftab\",\"annotations\":{\"color\":null,\"type\":\"van\"}}\n");
    DatasetManifest m = parse_manifest(in, schema);
    CHECK(m.dataset_id == "veh");
    CHECK(m.declared_annotations == std::vector<std::string>{"color", "type"});
    CHECK(m.split_seed == 3);
    REQUIRE(m.samples.size() == 2);
    CHECK(m.samples[0].sample_id == "a");
    CHECK(m.samples[0].image == "a.jpg");
    CHECK_FALSE(m.samples[0].feature_ref.has_value());
    // Labels are normalized at parse time.
    CHECK(m.samples[0].label("color") == "red");
    CHECK(m.samples[0].label("type") == "suv");
    CHECK(m.samples[1].feature_ref == "t.ftab");
    CHECK_FALSE(m.samples[1].label("color").has_value());
    CHECK(m.samples[1].label("type") == "van");
}

TEST_CASE("declared annotations mirror what the dataset carries") {
    AnnotationSchema schema = fixture_schema();
    // A dataset with color and type but no make.
    DatasetManifest m = tiny_dataset(schema, "veri_like", {"color", "type"}, 4);
    CHECK(m.declares("color"));
    CHECK(m.declares("type"));
    CHECK_FALSE(m.declares("make"));
}

TEST_CASE("parse errors carry line numbers; violations can be collected") {
    AnnotationSchema schema = fixture_schema();
    SECTION("malformed json") {
        std::istringstream in("{\"dataset_id\":\"d\"}\nnot json\n");
        try {
            parse_manifest(in, schema);
            FAIL("expected parse error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::parse);
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
    }
    SECTION("label outside label set throws without a sink") {
        std::istringstream in(
            "{\"dataset_id\":\"d\",\"declared_annotations\":[\"color\"]}\n"
            "{\"sample_id\":\"a\",\"annotations\":{\"color\":\"magenta\"}}\n");
        CHECK_THROWS_AS(parse_manifest(in, schema), Error);
    }
    SECTION("sink collects violations instead") {
        std::istringstream in(
            "{\"dataset_id\":\"d\",\"declared_annotations\":[\"color\"]}\n"
            "{\"sample_id\":\"a\",\"annotations\":{\"color\":\"magenta\"}}\n"
            "{\"sample_id\":\"a\",\"annotations\":{\"color\":\"red\"}}\n"
            "{\"sample_id\":\"b\",\"annotations\":{\"type\":\"sedan\"}}\n");
        std::vector<Violation> sink;
        DatasetManifest m = parse_manifest(in, schema, &sink);
        CHECK(m.samples.size() == 3);
        REQUIRE(sink.size() == 3);
        CHECK(sink[0].message.find("magenta") != std::string::npos);
        CHECK(sink[1].message.find("duplicate") != std::string::npos);
        CHECK(sink[2].message.find("not declared") != std::string::npos);
    }
}

TEST_CASE("manifest write/parse is a lossless round trip") {
    AnnotationSchema schema = fixture_schema();
    DatasetManifest m = tiny_dataset(schema, "alpha", {"color", "make"}, 5);
    m.samples[2].annotations["color"] = std::nullopt;  // explicit null survives
    std::ostringstream out;
    write_manifest(m, out);
    std::istringstream in(out.str());
    DatasetManifest back = parse_manifest(in, schema);
    CHECK(back == m);

    // Re-serialization of the parsed manifest is byte-identical.
    std::ostringstream out2;
    write_manifest(back, out2);
    CHECK(out2.str() == out.str());
}

TEST_CASE("coverage counts non-null labels, vacuous on empty") {
    AnnotationSchema schema = fixture_schema();
    DatasetManifest empty;
    CHECK(empty.coverage("color") == 1.0);
    DatasetManifest m = tiny_dataset(schema, "d", {"color"}, 10);
    m.samples[0].annotations["color"] = std::nullopt;
    m.samples[1].annotations["color"] = std::nullopt;
    CHECK(m.coverage("color") == Catch::Approx(0.8));
}

TEST_CASE("partition_by_annotation implements the declared + coverage rule") {
    AnnotationSchema schema = fixture_schema();
    Federation fed;
    fed.schema = schema;
    // Shapes: color on 3 datasets, type on 4, make on 3.
    fed.datasets.push_back(tiny_dataset(schema, "vcolors", {"color"}, 8));
    fed.datasets.push_back(tiny_dataset(schema, "veri", {"color", "type"}, 8));
    fed.datasets.push_back(tiny_dataset(schema, "cvehicles", {"color", "type", "make"}, 8));
    fed.datasets.push_back(tiny_dataset(schema, "boxcars", {"type", "make"}, 8));
    fed.datasets.push_back(tiny_dataset(schema, "compcars", {"type", "make"}, 8));
    fed.datasets.push_back(tiny_dataset(schema, "vehicleid", {}, 8));

    Partition color = partition_by_annotation(fed, "color");
    REQUIRE(color.sources.size() == 3);
    CHECK(color.sources[0].dataset_id == "vcolors");
    CHECK(color.sources[1].dataset_id == "veri");
    CHECK(color.sources[2].dataset_id == "cvehicles");
    CHECK(color.gaps.size() == 3);

    // Partition property: |sources| + |gaps| = D for every annotation.
    for (const auto& a : schema.annotations) {
        Partition p = partition_by_annotation(fed, a.name);
        CHECK(p.sources.size() + p.gaps.size() == fed.datasets.size());
    }
}

TEST_CASE("partition: all datasets declaring leaves no gaps; none is an error") {
    AnnotationSchema schema = fixture_schema();
    Federation fed;
    fed.schema = schema;
    fed.datasets.push_back(tiny_dataset(schema, "a", {"color"}, 4));
    fed.datasets.push_back(tiny_dataset(schema, "b", {"color"}, 4));
    Partition p = partition_by_annotation(fed, "color");
    CHECK(p.gaps.empty());
    CHECK_THROWS_AS(partition_by_annotation(fed, "type"), Error);
    try {
        partition_by_annotation(fed, "type");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::no_source);
    }
}

TEST_CASE("partition respects the 95% coverage rule") {
    AnnotationSchema schema = fixture_schema();
    Federation fed;
    fed.schema = schema;
    DatasetManifest low = tiny_dataset(schema, "low", {"color"}, 20);
    for (int i = 0; i < 3; ++i) low.samples[i].annotations["color"] = std::nullopt;  // 85%
    fed.datasets.push_back(low);
    fed.datasets.push_back(tiny_dataset(schema, "full", {"color"}, 20));
    Partition p = partition_by_annotation(fed, "color");
    REQUIRE(p.sources.size() == 1);
    CHECK(p.sources[0].dataset_id == "full");
    CHECK(p.gaps[0].dataset_id == "low");
    // A lower bar admits it.
    Partition loose = partition_by_annotation(fed, "color", 0.8);
    CHECK(loose.sources.size() == 2);
}

TEST_CASE("validate_federation reports problems and is pure") {
    AnnotationSchema schema = fixture_schema();
    Federation fed;
    fed.schema = schema;
    fed.datasets.push_back(tiny_dataset(schema, "a", {"color"}, 4));
    fed.datasets.push_back(tiny_dataset(schema, "b", {"type"}, 4));

    SECTION("valid federation gives an empty report") {
        ValidationReport r = validate_federation(fed);
        CHECK(r.ok());
        CHECK(r.violations.empty());
    }

    SECTION("duplicate sample_id is named") {
        fed.datasets[0].samples.push_back(fed.datasets[0].samples[0]);
        ValidationReport r = validate_federation(fed);
        REQUIRE_FALSE(r.ok());
        bool named = false;
        for (const auto& v : r.violations)
            if (v.sample_id == "s0" && v.message.find("duplicate") != std::string::npos)
                named = true;
        CHECK(named);
    }

    SECTION("duplicate dataset ids flagged") {
        fed.datasets.push_back(fed.datasets[0]);
        ValidationReport r = validate_federation(fed);
        CHECK_FALSE(r.ok());
    }

    SECTION("sample with neither image nor feature_ref flagged") {
        fed.datasets[0].samples[1].feature_ref = std::nullopt;
        ValidationReport r = validate_federation(fed);
        CHECK_FALSE(r.ok());
    }

    SECTION("coverage below the bar flagged") {
        for (int i = 0; i < 2; ++i) fed.datasets[0].samples[i].annotations["color"] = std::nullopt;
        ValidationReport r = validate_federation(fed);
        CHECK_FALSE(r.ok());
    }

    SECTION("validation is pure") {
        fed.datasets[0].samples.push_back(fed.datasets[0].samples[0]);
        ValidationReport r1 = validate_federation(fed);
        ValidationReport r2 = validate_federation(fed);
        CHECK(r1.to_string() == r2.to_string());
    }
}
