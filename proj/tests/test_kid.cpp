#include <catch2/catch_amalgamated.hpp>

#include <sstream>
#include <stdexcept>

#include "kidforge/kid.hpp"

using namespace kidforge;

namespace {

// Fixture federation:
//   d1 declares color + make, fully annotated
//   d2 declares color only        -> make gaps (cluster transfer)
//   d3 declares make only         -> color gaps (team labeling)
// Features are 1-D; positive x means red territory.
struct Fixture {
    Federation fed;
    TableFeatureSource source;
    std::map<std::string, Team> teams;
    ClusterModel cluster;
};

DatasetManifest manifest_from(const AnnotationSchema& schema, const std::string& text) {
    std::istringstream in(text);
    return parse_manifest(in, schema);
}

// Member that votes red for x > 0 and `cold` (blue or green) for x < 0.
Member signed_member(const std::string& id, const std::string& cold) {
    Member m;
    m.member_id = id;
    BaseClassifier clf = zero_classifier({"blue", "green", "red"}, 1);
    int cold_idx = cold == "blue" ? 0 : 1;
    clf.weights(cold_idx, 0) = -1.0;
    clf.weights(1 - cold_idx, 0) = -0.5;
    clf.weights(2, 0) = 1.0;
    m.ensemble.push_back(clf);
    m.center = (FeatureVector(1) << 0.0).finished();
    m.fscore = 1.0;
    return m;
}

Member constant_red(const std::string& id) {
    Member m;
    m.member_id = id;
    BaseClassifier clf = zero_classifier({"blue", "green", "red"}, 1);
    clf.biases[2] = 1.0;
    m.ensemble.push_back(clf);
    m.center = (FeatureVector(1) << 0.0).finished();
    m.fscore = 1.0;
    return m;
}

Fixture make_fixture() {
    Fixture fx;
    std::istringstream schema_in(R"({
        "annotations": [
            {"name": "color", "kind": "categorical", "labels": ["red", "blue", "green"]},
            {"name": "make", "kind": "cluster"}
        ]
    })");
    fx.fed.schema = parse_schema(schema_in);

    fx.fed.datasets.push_back(manifest_from(fx.fed.schema,
        "{\"dataset_id\": \"d1\", \"declared_annotations\": [\"color\", \"make\"], \"split_seed\": 1}\n"
        "{\"sample_id\": \"s0\", \"feature_ref\": \"d1.ftab\", \"annotations\": {\"color\": \"red\", \"make\": \"alpha\"}}\n"
        "{\"sample_id\": \"s1\", \"feature_ref\": \"d1.ftab\", \"annotations\": {\"color\": \"red\", \"make\": \"alpha\"}}\n"
        "{\"sample_id\": \"s2\", \"feature_ref\": \"d1.ftab\", \"annotations\": {\"color\": \"blue\", \"make\": \"beta\"}}\n"
        "{\"sample_id\": \"s3\", \"feature_ref\": \"d1.ftab\", \"annotations\": {\"color\": \"blue\", \"make\": \"beta\"}}\n"));
    fx.fed.datasets.push_back(manifest_from(fx.fed.schema,
        "{\"dataset_id\": \"d2\", \"declared_annotations\": [\"color\"], \"split_seed\": 2}\n"
        "{\"sample_id\": \"s0\", \"feature_ref\": \"d2.ftab\", \"annotations\": {\"color\": \"red\"}}\n"
        "{\"sample_id\": \"s1\", \"feature_ref\": \"d2.ftab\", \"annotations\": {\"color\": \"red\"}}\n"
        "{\"sample_id\": \"s2\", \"feature_ref\": \"d2.ftab\", \"annotations\": {\"color\": \"blue\"}}\n"
        "{\"sample_id\": \"s3\", \"feature_ref\": \"d2.ftab\", \"annotations\": {\"color\": \"red\"}}\n"));
    std::ostringstream d3;
    d3 << "{\"dataset_id\": \"d3\", \"declared_annotations\": [\"make\"], \"split_seed\": 3}\n";
    for (int i = 0; i < 10; ++i)
        d3 << "{\"sample_id\": \"s" << i << "\", \"feature_ref\": \"d3.ftab\", "
           << "\"annotations\": {\"make\": \"gamma\"}}\n";
    fx.fed.datasets.push_back(manifest_from(fx.fed.schema, d3.str()));

    auto add_table = [&](const std::string& ds, const std::vector<double>& xs) {
        FeatureTable t;
        t.dimension = 1;
        for (std::size_t i = 0; i < xs.size(); ++i)
            t.rows["s" + std::to_string(i)] = (FeatureVector(1) << xs[i]).finished();
        fx.source.add_table(ds + ".ftab", std::move(t));
    };
    add_table("d1", {1, 1, -1, -1});
    add_table("d2", {1, 1, -1, 50});
    // d3: seven red-side samples, three cold-side samples that the team
    // splits three ways and therefore abstains on.
    add_table("d3", {1, 1, 1, 1, 1, 1, 1, -1, -1, -1});

    Team color_team;
    color_team.annotation = "color";
    color_team.members.push_back(signed_member("m0", "blue"));
    color_team.members.push_back(signed_member("m1", "green"));
    color_team.members.push_back(constant_red("m2"));
    color_team.priors = Eigen::VectorXd::Constant(3, 1.0 / 3.0);
    color_team.vote_mode = VoteMode::unweighted;
    color_team.threshold_mode = ThresholdMode::dynamic;
    color_team.quality_factors.clear();
    fx.teams["color"] = color_team;

    fx.cluster.tau = 1.0;
    fx.cluster.centroids["d1:alpha"] = (FeatureVector(1) << 1.0).finished();
    fx.cluster.known["d1:alpha"] = "alpha";
    fx.cluster.centroids["d1:beta"] = (FeatureVector(1) << -1.0).finished();
    fx.cluster.known["d1:beta"] = "beta";
    return fx;
}

const KIDRecord& find_record(const KIDManifest& kid, const std::string& gid) {
    for (const auto& r : kid.records)
        if (r.sample_id == gid) return r;
    FAIL("record not found: " + gid);
    throw std::logic_error("unreachable");
}

}  // namespace

TEST_CASE("fully annotated federation builds an all-original KID") {
    Fixture fx = make_fixture();
    // Keep only d1, which has no gaps at all.
    fx.fed.datasets.resize(1);
    KIDManifest kid = build_kid(fx.fed, {}, std::nullopt, fx.source);
    REQUIRE(kid.records.size() == 4);
    for (const auto& rec : kid.records)
        for (const auto& [name, entry] : rec.annotations) {
            CHECK(entry.source == ProvenanceSource::original);
            CHECK(entry.value.has_value());
            CHECK_FALSE(entry.agreement.has_value());
            CHECK_FALSE(entry.team_version.has_value());
        }
    CHECK(kid.provenance_summary.at("color").coverage() == 1.0);
    CHECK(kid.provenance_summary.at("make").original == 4);
    CHECK(kid.records[0].sample_id == "d1/s0");
    CHECK(kid.records[0].source_dataset == "d1");
    CHECK(kid.records[0].feature_ref == "d1.ftab");
}

TEST_CASE("gaps without a labeler are config errors") {
    Fixture fx = make_fixture();
    try {
        build_kid(fx.fed, {}, fx.cluster, fx.source);
        FAIL("expected config error for missing team");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
        CHECK(std::string(e.what()).find("color") != std::string::npos);
    }
    try {
        build_kid(fx.fed, fx.teams, std::nullopt, fx.source);
        FAIL("expected config error for missing cluster model");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
        CHECK(std::string(e.what()).find("make") != std::string::npos);
    }
}

TEST_CASE("KID fills gaps, keeps originals verbatim, and records abstentions") {
    Fixture fx = make_fixture();
    ClusterModel augmented;
    KIDManifest kid = build_kid(fx.fed, fx.teams, fx.cluster, fx.source, 1, &augmented);
    REQUIRE(kid.records.size() == 18);

    // Originals preserved with no decision metadata.
    const KIDRecord& orig = find_record(kid, "d1/s2");
    CHECK(*orig.annotations.at("color").value == "blue");
    CHECK(orig.annotations.at("color").source == ProvenanceSource::original);
    CHECK_FALSE(orig.annotations.at("color").threshold.has_value());
    CHECK(*orig.annotations.at("make").value == "beta");

    // d3 red-side samples get inferred color red with decision metadata.
    const KIDRecord& inf = find_record(kid, "d3/s0");
    REQUIRE(inf.annotations.at("color").value.has_value());
    CHECK(*inf.annotations.at("color").value == "red");
    CHECK(inf.annotations.at("color").source == ProvenanceSource::inferred);
    CHECK(*inf.annotations.at("color").agreement == Catch::Approx(1.0));
    CHECK(*inf.annotations.at("color").threshold == Catch::Approx(0.5));
    CHECK(inf.annotations.at("color").team_version == team_version(fx.teams.at("color")));

    // d3 cold-side samples abstain: blank value, threshold recorded.
    const KIDRecord& abst = find_record(kid, "d3/s7");
    CHECK_FALSE(abst.annotations.at("color").value.has_value());
    CHECK(abst.annotations.at("color").source == ProvenanceSource::abstained);
    CHECK(*abst.annotations.at("color").agreement == Catch::Approx(1.0 / 3.0));
    CHECK(*abst.annotations.at("color").threshold >= 0.5);

    // d2 make gaps: near samples join existing clusters, the far one opens
    // a novel cluster named after itself.
    CHECK(*find_record(kid, "d2/s0").annotations.at("make").value == "d1:alpha");
    CHECK(*find_record(kid, "d2/s2").annotations.at("make").value == "d1:beta");
    const KIDRecord& novel = find_record(kid, "d2/s3");
    CHECK(*novel.annotations.at("make").value == "novel:d2/s3");
    CHECK(novel.annotations.at("make").source == ProvenanceSource::inferred);
    CHECK(novel.annotations.at("make").team_version == cluster_model_version(augmented));
    REQUIRE(augmented.centroids.count("novel:d2/s3") == 1);
    CHECK(augmented.centroids.at("novel:d2/s3")[0] == 50.0);

    // Provenance counts add up.
    const ProvenanceCounts& color = kid.provenance_summary.at("color");
    CHECK(color.original == 8);
    CHECK(color.inferred == 7);
    CHECK(color.abstained == 3);
    CHECK(color.total() == 18);
    CHECK(color.coverage() == Catch::Approx(15.0 / 18.0));
    const ProvenanceCounts& make = kid.provenance_summary.at("make");
    CHECK(make.original == 14);
    CHECK(make.inferred == 4);
    CHECK(make.abstained == 0);

    // Stats agree with the summary and split cleanly per dataset.
    KidStats stats = kid_stats(kid);
    CHECK(stats.per_annotation.at("color").original == color.original);
    CHECK(stats.per_annotation.at("color").abstained == color.abstained);
    CHECK(stats.per_dataset.at("d3").at("color").coverage() == Catch::Approx(0.7));
    CHECK(stats.per_dataset.at("d1").at("color").original == 4);
    long sum = 0;
    for (const auto& [ds, per] : stats.per_dataset) sum += per.at("make").total();
    CHECK(sum == make.total());
    json sj = kid_stats_to_json(stats);
    CHECK(sj.at("annotations").at("color").at("abstained") == 3);
    CHECK(sj.at("datasets").at("d3").at("color").at("coverage") == Catch::Approx(0.7));
}

TEST_CASE("KID export is deterministic and re-parses as a manifest") {
    Fixture fx = make_fixture();
    KIDManifest kid = build_kid(fx.fed, fx.teams, fx.cluster, fx.source);
    kid.build_metadata = {{"seed", 3}, {"config", "deadbeef"}};

    std::ostringstream out1, out2;
    write_kid(kid, out1);
    // A rebuild from the same inputs serializes byte-identically.
    KIDManifest kid2 = build_kid(fx.fed, fx.teams, fx.cluster, fx.source);
    kid2.build_metadata = kid.build_metadata;
    write_kid(kid2, out2);
    CHECK(out1.str() == out2.str());

    std::istringstream back_in(out1.str());
    DatasetManifest back = parse_manifest(back_in, fx.fed.schema);
    CHECK(back.dataset_id == "kid");
    CHECK(back.declares("color"));
    CHECK(back.declares("make"));
    REQUIRE(back.samples.size() == 18);

    // Values survive: originals, inferred labels, cluster ids, blanks.
    auto find = [&](const std::string& gid) -> const SampleRecord& {
        for (const auto& s : back.samples)
            if (s.sample_id == gid) return s;
        FAIL("missing " + gid);
        throw std::logic_error("unreachable");
    };
    CHECK(*find("d1/s0").label("color") == "red");
    CHECK(*find("d3/s0").label("color") == "red");
    CHECK_FALSE(find("d3/s7").label("color").has_value());
    CHECK(*find("d2/s3").label("make") == "novel:d2/s3");
    CHECK(*find("d2/s0").label("make") == "d1:alpha");
    CHECK(find("d1/s1").feature_ref == "d1.ftab");

    // The re-parsed manifest round-trips through the plain writer too.
    std::ostringstream plain1, plain2;
    write_manifest(back, plain1);
    std::istringstream plain_in(plain1.str());
    DatasetManifest back2 = parse_manifest(plain_in, fx.fed.schema);
    write_manifest(back2, plain2);
    CHECK(plain1.str() == plain2.str());
    CHECK(back2.samples.size() == back.samples.size());
}

TEST_CASE("parallel assembly matches sequential output") {
    Fixture fx = make_fixture();
    KIDManifest seq = build_kid(fx.fed, fx.teams, fx.cluster, fx.source, 1);
    KIDManifest par = build_kid(fx.fed, fx.teams, fx.cluster, fx.source, 4);
    std::ostringstream a, b;
    write_kid(seq, a);
    write_kid(par, b);
    CHECK(a.str() == b.str());
}
