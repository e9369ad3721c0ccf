#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "kidforge/expert.hpp"

using namespace kidforge;

namespace {

// Isotropic Gaussian blobs around per-class prototypes, ids in insertion
// order s0000.., labels cycling through the class list.
LabeledSet gaussian_set(const std::string& ds, std::uint64_t seed, int per_class,
                        const std::vector<FeatureVector>& protos,
                        const std::vector<std::string>& labels, double noise) {
    LabeledSet set;
    set.dataset_id = ds;
    set.split_seed = derive_seed(seed, {"split", ds});
    auto rng = make_rng(seed, {"blob", ds});
    const int n = per_class * static_cast<int>(protos.size());
    set.features.resize(n, protos[0].size());
    char buf[16];
    for (int i = 0; i < n; ++i) {
        std::size_t c = static_cast<std::size_t>(i) % protos.size();
        std::snprintf(buf, sizeof buf, "s%04d", i);
        set.ids.emplace_back(buf);
        set.labels.push_back(labels[c]);
        FeatureVector x = protos[c];
        for (Eigen::Index k = 0; k < x.size(); ++k) x[k] += noise * rand_normal(rng);
        set.features.row(i) = x.transpose();
    }
    return set;
}

std::vector<FeatureVector> axis_protos(int classes, int dim, double sep) {
    std::vector<FeatureVector> protos;
    for (int c = 0; c < classes; ++c) {
        FeatureVector p = FeatureVector::Zero(dim);
        p[c] = sep;
        protos.push_back(p);
    }
    return protos;
}

// A classifier that always votes for `winner` regardless of input.
BaseClassifier forced_voter(const std::vector<std::string>& labels, int winner) {
    BaseClassifier clf = zero_classifier(labels, 1);
    clf.biases[winner] = 1.0;
    return clf;
}

Member forced_member(const std::vector<std::string>& labels, const std::vector<int>& winners) {
    Member m;
    m.member_id = "forced";
    for (int w : winners) m.ensemble.push_back(forced_voter(labels, w));
    m.center = FeatureVector::Zero(1);
    return m;
}

}  // namespace

TEST_CASE("well separated blobs train to high test accuracy") {
    auto protos = axis_protos(3, 4, 6.0);
    LabeledSet home = gaussian_set("home", 11, 60, protos, {"a", "b", "c"}, 0.5);
    TrainConfig cfg;
    cfg.max_epochs = 60;
    cfg.seed = 1;
    Member m = train_member(home, {}, cfg);
    REQUIRE(m.ensemble.size() == 5);
    CHECK(m.ensemble.front().class_labels == std::vector<std::string>{"a", "b", "c"});

    SplitIndices si = split_indices(home);
    REQUIRE(si.test.size() > 5);
    LabeledSet test = subset(home, si.test);
    int agree_truth = 0, agree_oracle = 0;
    for (Eigen::Index i = 0; i < test.size(); ++i) {
        FeatureVector x = test.features.row(i).transpose();
        std::string pred = member_predict(m, x).label;
        agree_truth += pred == test.labels[static_cast<std::size_t>(i)];
        // Nearest prototype is the Bayes rule for these blobs.
        int best = 0;
        for (int c = 1; c < 3; ++c)
            if ((x - protos[static_cast<std::size_t>(c)]).squaredNorm() <
                (x - protos[static_cast<std::size_t>(best)]).squaredNorm())
                best = c;
        agree_oracle += pred == std::vector<std::string>{"a", "b", "c"}[static_cast<std::size_t>(best)];
    }
    CHECK(static_cast<double>(agree_truth) / static_cast<double>(test.size()) >= 0.95);
    CHECK(static_cast<double>(agree_oracle) / static_cast<double>(test.size()) >= 0.95);
    CHECK(m.fscore > 0.9);
    CHECK(m.finetune_epochs_run == 0);  // no peers, no fine-tune
    CHECK((m.center - dataset_center([&] {
                          std::vector<FeatureVector> rows;
                          LabeledSet tr = subset(home, si.train);
                          for (Eigen::Index i = 0; i < tr.size(); ++i)
                              rows.push_back(tr.features.row(i).transpose());
                          return rows;
                      }()))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
}

TEST_CASE("training is deterministic in the seed") {
    auto protos = axis_protos(2, 3, 4.0);
    LabeledSet home = gaussian_set("home", 3, 40, protos, {"a", "b"}, 0.6);
    LabeledSet peer = gaussian_set("peer", 4, 40, protos, {"a", "b"}, 0.6);
    TrainConfig cfg;
    cfg.max_epochs = 15;
    cfg.seed = 9;
    Member m1 = train_member(home, {peer}, cfg);
    Member m2 = train_member(home, {peer}, cfg);
    REQUIRE(m1.ensemble.size() == m2.ensemble.size());
    for (std::size_t b = 0; b < m1.ensemble.size(); ++b) {
        CHECK(m1.ensemble[b].weights == m2.ensemble[b].weights);
        CHECK(m1.ensemble[b].biases == m2.ensemble[b].biases);
    }
    CHECK(m1.fscore == m2.fscore);
    CHECK(m1.home_epochs_run == m2.home_epochs_run);

    cfg.seed = 10;
    Member m3 = train_member(home, {peer}, cfg);
    CHECK(m1.ensemble[0].weights != m3.ensemble[0].weights);
}

TEST_CASE("early stopping halts on a non-improving validation signal") {
    auto protos = axis_protos(3, 4, 6.0);
    LabeledSet home = gaussian_set("home", 21, 60, protos, {"a", "b", "c"}, 0.4);
    // Scramble the validation labels so training progress cannot help them.
    SplitIndices si = split_indices(home);
    auto rng = make_rng(77, {"scramble"});
    const std::vector<std::string> names{"a", "b", "c"};
    for (Eigen::Index i : si.val)
        home.labels[static_cast<std::size_t>(i)] = names[rand_index(rng, 3)];
    TrainConfig cfg;
    cfg.max_epochs = 200;
    cfg.patience = 3;
    cfg.seed = 5;
    Member m = train_member(home, {}, cfg);
    CHECK(m.home_epochs_run < cfg.max_epochs);

    cfg.early_stop = false;
    Member fixed = train_member(home, {}, cfg);
    CHECK(fixed.home_epochs_run == cfg.max_epochs);
}

TEST_CASE("single-class home trains and always answers that class") {
    auto protos = axis_protos(1, 3, 2.0);
    LabeledSet home = gaussian_set("solo", 1, 50, protos, {"only"}, 0.5);
    TrainConfig cfg;
    cfg.max_epochs = 10;
    Member m = train_member(home, {}, cfg);
    CHECK(member_predict(m, FeatureVector(FeatureVector::Zero(3))).label == "only");
    CHECK(m.fscore == Catch::Approx(1.0));
}

TEST_CASE("vocabulary class missing from the home training split is an error") {
    auto protos = axis_protos(2, 3, 4.0);
    LabeledSet home = gaussian_set("home", 2, 40, protos, {"a", "a"}, 0.5);
    LabeledSet peer = gaussian_set("peer", 3, 40, protos, {"a", "zz"}, 0.5);
    TrainConfig cfg;
    cfg.max_epochs = 5;
    try {
        train_member(home, {peer}, cfg);
        FAIL("expected missing_class");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::missing_class);
        CHECK(std::string(e.what()).find("zz") != std::string::npos);
    }
}

TEST_CASE("peer dimension mismatch is a shape error") {
    LabeledSet home = gaussian_set("home", 2, 30, axis_protos(2, 3, 4.0), {"a", "b"}, 0.5);
    LabeledSet peer = gaussian_set("peer", 2, 30, axis_protos(2, 5, 4.0), {"a", "b"}, 0.5);
    TrainConfig cfg;
    try {
        train_member(home, {peer}, cfg);
        FAIL("expected shape error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::shape);
    }
}

TEST_CASE("member vote fractions and tie-breaks") {
    const std::vector<std::string> ab{"a", "b"};
    SECTION("unanimous") {
        Member m = forced_member(ab, {0, 0, 0});
        MemberPrediction p = member_predict(m, FeatureVector(FeatureVector::Zero(1)));
        CHECK(p.label == "a");
        CHECK(p.support == Catch::Approx(1.0));
    }
    SECTION("3 of 5") {
        Member m = forced_member(ab, {0, 1, 0, 1, 0});
        MemberPrediction p = member_predict(m, FeatureVector(FeatureVector::Zero(1)));
        CHECK(p.label == "a");
        CHECK(p.support == Catch::Approx(0.6));
    }
    SECTION("classifier-level tie goes to the smaller label") {
        Member m = forced_member(ab, {1, 0});
        MemberPrediction p = member_predict(m, FeatureVector(FeatureVector::Zero(1)));
        CHECK(p.label == "a");
        CHECK(p.support == Catch::Approx(0.5));
    }
    SECTION("view-level tie goes to the smaller label") {
        BaseClassifier clf = zero_classifier(ab, 1);
        clf.weights(0, 0) = 1.0;   // positive input votes a
        clf.weights(1, 0) = -1.0;  // negative input votes b
        ViewSet vs;
        vs.views.push_back((FeatureVector(1) << 1.0).finished());
        vs.views.push_back((FeatureVector(1) << -1.0).finished());
        CHECK(classifier_vote_index(clf, vs) == 0);
        vs.views.push_back((FeatureVector(1) << -1.0).finished());
        CHECK(classifier_vote_index(clf, vs) == 1);
    }
    SECTION("empty view set is a shape error") {
        Member m = forced_member(ab, {0});
        CHECK_THROWS_AS(member_predict(m, ViewSet{}), Error);
    }
    SECTION("all-zero scores predict the first label") {
        BaseClassifier clf = zero_classifier({"a", "b", "c"}, 2);
        CHECK(clf.predict_index((FeatureVector(2) << 3, 4).finished()) == 0);
    }
}

TEST_CASE("macro F1 fixtures") {
    CHECK(macro_f1({"a", "a", "b", "b", "b"}, {"a", "b", "a", "b", "b"}) ==
          Catch::Approx(7.0 / 12.0));
    CHECK(macro_f1({"a", "b", "c"}, {"a", "b", "c"}) == Catch::Approx(1.0));
    CHECK(macro_f1({"a", "b"}, {"b", "a"}) == Catch::Approx(0.0));
    // Classes absent from both truth and prediction do not dilute the mean.
    CHECK(macro_f1({"a", "a"}, {"a", "a"}) == Catch::Approx(1.0));
    CHECK_THROWS_AS(macro_f1({"a"}, {}), Error);
    CHECK_THROWS_AS(macro_f1({}, {}), Error);
}

TEST_CASE("sgd_step reduces the full-batch loss at a small rate") {
    BaseClassifier clf = zero_classifier({"a", "b"}, 2);
    Eigen::MatrixXd X(4, 2);
    X << 1, 0, 2, 1, -1, 0, -2, -1;
    std::vector<int> y{0, 0, 1, 1};
    std::vector<Eigen::Index> batch{0, 1, 2, 3};
    double before = softmax_loss(clf, X, y);
    CHECK(before == Catch::Approx(std::log(2.0)));
    for (int i = 0; i < 50; ++i) {
        sgd_step(clf, X, y, batch, 1e-3);
        double after = softmax_loss(clf, X, y);
        CHECK(after < before + 1e-12);
        before = after;
    }
    CHECK(clf.predict_index((FeatureVector(2) << 1.5, 0.5).finished()) == 0);
    CHECK(clf.predict_index((FeatureVector(2) << -1.5, -0.5).finished()) == 1);
}

TEST_CASE("bag_count controls the ensemble and one bag means no resampling") {
    auto protos = axis_protos(2, 3, 5.0);
    LabeledSet home = gaussian_set("home", 6, 40, protos, {"a", "b"}, 0.4);
    TrainConfig cfg;
    cfg.max_epochs = 8;
    cfg.bag_count = 1;
    cfg.early_stop = false;
    Member one = train_member(home, {}, cfg);
    CHECK(one.ensemble.size() == 1);
    cfg.bag_count = 3;
    Member three = train_member(home, {}, cfg);
    CHECK(three.ensemble.size() == 3);
    // Distinct bootstrap draws give distinct classifiers.
    CHECK(three.ensemble[0].weights != three.ensemble[1].weights);
}

TEST_CASE("fine-tuning on peers can roll back but never loses the baseline") {
    auto protos = axis_protos(2, 3, 6.0);
    LabeledSet home = gaussian_set("home", 8, 50, protos, {"a", "b"}, 0.4);
    // Peer with inverted labels: fine-tuning on it can only hurt, so the
    // rollback snapshot must keep validation accuracy at the pre-fine-tune
    // level measured over home + peer validation splits.
    LabeledSet peer = gaussian_set("peer", 9, 50, protos, {"b", "a"}, 0.4);
    TrainConfig cfg;
    cfg.max_epochs = 30;
    cfg.seed = 2;
    Member m = train_member(home, {peer}, cfg);
    CHECK(m.finetune_epochs_run > 0);
    SplitIndices hs = split_indices(home);
    LabeledSet hval = subset(home, hs.val);
    int ok = 0;
    for (Eigen::Index i = 0; i < hval.size(); ++i)
        ok += member_predict(m, FeatureVector(hval.features.row(i).transpose())).label ==
              hval.labels[static_cast<std::size_t>(i)];
    // The home validation split stays well above chance despite the
    // adversarial peer.
    CHECK(static_cast<double>(ok) / static_cast<double>(hval.size()) > 0.6);
}

TEST_CASE("make_labeled_set sorts by sample id and skips nulls") {
    std::istringstream schema_in(R"({
        "annotations": [{"name": "color", "kind": "categorical", "labels": ["red", "blue"]}]
    })");
    AnnotationSchema schema = parse_schema(schema_in);
    std::istringstream manifest_in(
        "{\"dataset_id\": \"d\", \"declared_annotations\": [\"color\"], \"split_seed\": 3}\n"
        "{\"sample_id\": \"s2\", \"feature_ref\": \"t.ftab\", \"annotations\": {\"color\": \"red\"}}\n"
        "{\"sample_id\": \"s1\", \"feature_ref\": \"t.ftab\", \"annotations\": {\"color\": \"blue\"}}\n"
        "{\"sample_id\": \"s3\", \"feature_ref\": \"t.ftab\", \"annotations\": {\"color\": null}}\n");
    DatasetManifest d = parse_manifest(manifest_in, schema);
    FeatureTable t;
    t.dimension = 2;
    t.rows["s1"] = (FeatureVector(2) << 1, 2).finished();
    t.rows["s2"] = (FeatureVector(2) << 3, 4).finished();
    t.rows["s3"] = (FeatureVector(2) << 5, 6).finished();
    TableFeatureSource src;
    src.add_table("t.ftab", std::move(t));

    LabeledSet set = make_labeled_set(d, "color", src);
    REQUIRE(set.size() == 2);
    CHECK(set.ids == std::vector<std::string>{"s1", "s2"});
    CHECK(set.labels == std::vector<std::string>{"blue", "red"});
    CHECK(set.features(0, 0) == 1.0);
    CHECK(set.features(1, 1) == 4.0);
    CHECK(set.split_seed == 3);
}

TEST_CASE("classifier file round-trips exactly") {
    BaseClassifier clf = zero_classifier({"a", "b", "c"}, 4);
    auto rng = make_rng(13, {"clf"});
    for (Eigen::Index r = 0; r < 3; ++r) {
        for (Eigen::Index c = 0; c < 4; ++c) clf.weights(r, c) = rand_normal(rng) * 3;
        clf.biases[r] = rand_normal(rng);
    }
    std::ostringstream out;
    write_classifier(clf, out);
    std::istringstream in(out.str());
    BaseClassifier back = read_classifier(in);
    CHECK(back.weights == clf.weights);
    CHECK(back.biases == clf.biases);

    std::istringstream bad("2 1\n");
    CHECK_THROWS_AS(read_classifier(bad), Error);
    std::istringstream truncated("2 3\n1 2 3\n");
    CHECK_THROWS_AS(read_classifier(truncated), Error);
}

TEST_CASE("cross_val_fscore matches macro_f1 on a forced member") {
    const std::vector<std::string> ab{"a", "b"};
    Member always_a = forced_member(ab, {0, 0, 0});
    LabeledSet set;
    set.dataset_id = "d";
    set.ids = {"s1", "s2", "s3"};
    set.labels = {"a", "a", "b"};
    set.features = Eigen::MatrixXd::Zero(3, 1);
    double f = cross_val_fscore(always_a, {set});
    CHECK(f == Catch::Approx(macro_f1({"a", "a", "b"}, {"a", "a", "a"})));
    CHECK_THROWS_AS(cross_val_fscore(always_a, {}), Error);
}
