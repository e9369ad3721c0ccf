#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kidforge/common.hpp"
#include "kidforge/expert.hpp"
#include "kidforge/features.hpp"
#include "kidforge/parallel.hpp"
#include "kidforge/schema.hpp"

namespace kidforge {

enum class VoteMode { weighted, unweighted };
enum class ThresholdMode { dynamic, fixed, off };

inline const char* to_string(VoteMode m) {
    return m == VoteMode::weighted ? "weighted" : "unweighted";
}

inline const char* to_string(ThresholdMode m) {
    switch (m) {
        case ThresholdMode::dynamic: return "dynamic";
        case ThresholdMode::fixed: return "fixed";
        case ThresholdMode::off: return "off";
    }
    return "?";
}

inline VoteMode parse_vote_mode(const std::string& s) {
    if (s == "weighted") return VoteMode::weighted;
    if (s == "unweighted") return VoteMode::unweighted;
    fail(ErrorKind::config, "unknown vote mode '" + s + "'");
}

inline ThresholdMode parse_threshold_mode(const std::string& s) {
    if (s == "dynamic") return ThresholdMode::dynamic;
    if (s == "fixed") return ThresholdMode::fixed;
    if (s == "off") return ThresholdMode::off;
    fail(ErrorKind::config, "unknown threshold mode '" + s + "'");
}

// Per-member vote confidence from the sample's distance to each member's
// training-data center:
//     w_j = (1/S) * (1 - l2(x, c_j) / sum_m l2(x, c_m))
// Degenerate cases: S = 1 yields (1.0) (the raw formula gives 0); a sample
// coincident with every center (zero distance sum) yields the equidistant
// value (1/S)(1 - 1/S) for all members. For S >= 2 the weights always sum
// to (S-1)/S and each lies in [0, 1/S].
inline Eigen::VectorXd confidence_weights(const FeatureVector& x,
                                          const std::vector<FeatureVector>& centers) {
    const auto S = static_cast<Eigen::Index>(centers.size());
    if (S == 0) fail(ErrorKind::empty_input, "confidence_weights: no centers");
    for (const auto& c : centers)
        if (c.size() != x.size())
            fail(ErrorKind::shape, "confidence_weights: center dimension mismatch");
    if (S == 1) return Eigen::VectorXd::Ones(1);
    Eigen::VectorXd d(S);
    for (Eigen::Index j = 0; j < S; ++j) d[j] = (x - centers[static_cast<std::size_t>(j)]).norm();
    double total = d.sum();
    Eigen::VectorXd w(S);
    double invS = 1.0 / static_cast<double>(S);
    if (total == 0.0) {
        w.setConstant(invS * (1.0 - invS));
    } else {
        for (Eigen::Index j = 0; j < S; ++j) w[j] = invS * (1.0 - d[j] / total);
    }
    return w;
}

// The equidistant value of the formula above; used for unweighted voting so
// weight sums stay comparable across vote modes.
inline Eigen::VectorXd uniform_confidence_weights(Eigen::Index S) {
    if (S <= 0) fail(ErrorKind::empty_input, "uniform_confidence_weights: S must be >= 1");
    if (S == 1) return Eigen::VectorXd::Ones(1);
    double invS = 1.0 / static_cast<double>(S);
    return Eigen::VectorXd::Constant(S, invS * (1.0 - invS));
}

// CAWPE priors from cross-validation f-scores: q_j = f_j^beta / sum f_m^beta,
// with f floored at 1e-6 so a zero f-score cannot produce a zero prior (and
// thus an infinite KL divergence later).
inline Eigen::VectorXd initial_weights(const Eigen::VectorXd& fscores, double beta) {
    if (fscores.size() == 0) fail(ErrorKind::empty_input, "initial_weights: no f-scores");
    Eigen::VectorXd q(fscores.size());
    for (Eigen::Index j = 0; j < fscores.size(); ++j)
        q[j] = std::pow(std::max(fscores[j], 1e-6), beta);
    return q / q.sum();
}

// Maps the KL divergence between the normalized confidence weights and the
// priors into [0, 0.5):
//     alpha = 0.5 * (1 - exp(-KL(p-hat || q))),   p-hat = w / sum(w)
// Larger divergence -> higher threshold 0.5 + alpha. A zero weight sum
// normalizes to the uniform distribution.
inline double agreement_alpha(const Eigen::VectorXd& w, const Eigen::VectorXd& q) {
    if (w.size() != q.size() || w.size() == 0)
        fail(ErrorKind::shape, "agreement_alpha: weight/prior size mismatch");
    Eigen::VectorXd p(w.size());
    double total = w.sum();
    if (total <= 0.0)
        p.setConstant(1.0 / static_cast<double>(w.size()));
    else
        p = w / total;
    double kl = 0.0;
    for (Eigen::Index j = 0; j < p.size(); ++j) {
        if (p[j] <= 0.0) continue;  // 0 * ln 0 = 0
        if (q[j] <= 0.0) fail(ErrorKind::config, "agreement_alpha: prior must be positive");
        kl += p[j] * std::log(p[j] / q[j]);
    }
    if (kl < 0.0) kl = 0.0;  // numeric guard; KL >= 0 analytically
    return 0.5 * (1.0 - std::exp(-kl));
}

// ---------------------------------------------------------------------------

struct TeamOptions {
    double beta = 4.0;
    VoteMode vote_mode = VoteMode::weighted;
    ThresholdMode threshold_mode = ThresholdMode::dynamic;
    std::vector<int> quality_factors{90, 70, 50};
    double min_coverage = 0.95;
};

struct Team {
    std::string annotation;
    std::vector<Member> members;
    Eigen::VectorXd priors;
    double beta = 4.0;
    VoteMode vote_mode = VoteMode::weighted;
    ThresholdMode threshold_mode = ThresholdMode::dynamic;
    std::vector<int> quality_factors{90, 70, 50};
    TrainConfig config;  // echoed into metadata

    Eigen::Index size() const { return static_cast<Eigen::Index>(members.size()); }

    std::vector<FeatureVector> centers() const {
        std::vector<FeatureVector> out;
        out.reserve(members.size());
        for (const auto& m : members) out.push_back(m.center);
        return out;
    }
};

struct MemberVote {
    std::string member_id;
    std::string label;
    double weight = 0.0;
};

struct LabelDecision {
    std::string sample_id;
    std::optional<std::string> label;  // nullopt = abstained
    double winning_fraction = 0.0;
    double alpha = 0.0;
    double threshold = 0.5;
    std::vector<MemberVote> member_votes;

    bool assigned() const { return label.has_value(); }
};

// One team decision for one sample. Members vote their predicted label;
// votes are tallied with confidence weights (or the uniform equivalent),
// and the winner is assigned iff its weight fraction clears 0.5 + alpha.
// threshold_mode fixed pins alpha at 0; off assigns the arg-max
// unconditionally (the threshold field still reports 0.5).
inline LabelDecision label_sample(const Team& team, const FeatureVector& x, const ViewSet& views,
                                  const std::string& sample_id = {}) {
    if (team.members.empty()) fail(ErrorKind::empty_input, "label_sample: empty team");
    LabelDecision dec;
    dec.sample_id = sample_id;

    Eigen::VectorXd w = team.vote_mode == VoteMode::weighted
                            ? confidence_weights(x, team.centers())
                            : uniform_confidence_weights(team.size());

    std::map<std::string, double> tally;
    for (Eigen::Index j = 0; j < team.size(); ++j) {
        const Member& m = team.members[static_cast<std::size_t>(j)];
        MemberPrediction p = member_predict(m, views);
        tally[p.label] += w[j];
        dec.member_votes.push_back({m.member_id, p.label, w[j]});
    }
    // std::map iterates labels in sorted order, so taking strictly greater
    // tallies implements the lexicographic tie-break.
    const std::string* winner = nullptr;
    double best = -1.0;
    for (const auto& [label, v] : tally) {
        if (v > best) {
            best = v;
            winner = &label;
        }
    }
    double wsum = w.sum();
    dec.winning_fraction = best / wsum;
    dec.alpha =
        team.threshold_mode == ThresholdMode::dynamic ? agreement_alpha(w, team.priors) : 0.0;
    dec.threshold = 0.5 + dec.alpha;

    bool assign = team.threshold_mode == ThresholdMode::off
                      ? true
                      : dec.winning_fraction >= dec.threshold;
    if (assign) dec.label = *winner;

    // Runtime contract checks; cheap enough to keep on in release builds.
    if (!(dec.threshold >= 0.5 && dec.threshold < 1.0))
        fail(ErrorKind::protocol, "label_sample: threshold out of [0.5, 1)");
    if (team.threshold_mode != ThresholdMode::off && dec.assigned() &&
        dec.winning_fraction < dec.threshold)
        fail(ErrorKind::protocol, "label_sample: assigned below threshold");
    return dec;
}

// Labels every sample of the manifest, preserving manifest order. Existing
// annotation values are ignored here; callers decide what to do with them
// (build_kid keeps originals and only fills gaps).
inline std::vector<LabelDecision> label_dataset(const Team& team, const DatasetManifest& d,
                                                FeatureSource& source, int workers = 1) {
    std::vector<LabelDecision> out(d.samples.size());
    parallel_for(d.samples.size(), workers, [&](std::size_t i) {
        const SampleRecord& s = d.samples[i];
        ViewSet views = source.views(d.dataset_id, s, team.quality_factors);
        out[i] = label_sample(team, views.views.front(), views, s.sample_id);
    });
    return out;
}

// Builds the team for one annotation: one member per source dataset, homed
// there with the remaining sources as peers, plus CAWPE priors over the
// member f-scores.
inline Team build_team(const std::string& annotation, const Federation& fed,
                       FeatureSource& source, const TrainConfig& cfg,
                       const TeamOptions& opts = {}, int workers = 1) {
    Partition part = partition_by_annotation(fed, annotation, opts.min_coverage);
    std::vector<LabeledSet> sets;
    sets.reserve(part.sources.size());
    for (const auto& d : part.sources) sets.push_back(make_labeled_set(d, annotation, source));

    Team team;
    team.annotation = annotation;
    team.beta = opts.beta;
    team.vote_mode = opts.vote_mode;
    team.threshold_mode = opts.threshold_mode;
    team.quality_factors = opts.quality_factors;
    team.config = cfg;
    team.members.resize(sets.size());
    parallel_for(sets.size(), workers, [&](std::size_t j) {
        std::vector<LabeledSet> peers;
        for (std::size_t i = 0; i < sets.size(); ++i)
            if (i != j) peers.push_back(sets[i]);
        team.members[j] = train_member(sets[j], peers, cfg);
    });

    Eigen::VectorXd f(static_cast<Eigen::Index>(team.members.size()));
    for (Eigen::Index j = 0; j < f.size(); ++j)
        f[j] = team.members[static_cast<std::size_t>(j)].fscore;
    team.priors = initial_weights(f, team.beta);
    return team;
}

// ---------------------------------------------------------------------------
// Team persistence: a directory with team.json, plus per member a
// member.json and one parameter file per base classifier. team_version
// hashes the exact serialized bytes, so any parameter or config change
// changes the version.

inline std::map<std::string, std::string> serialize_team(const Team& team) {
    std::map<std::string, std::string> files;
    json meta;
    meta["annotation"] = team.annotation;
    meta["beta"] = team.beta;
    meta["vote_mode"] = to_string(team.vote_mode);
    meta["threshold_mode"] = to_string(team.threshold_mode);
    meta["quality_factors"] = team.quality_factors;
    json priors = json::array();
    for (Eigen::Index j = 0; j < team.priors.size(); ++j) priors.push_back(team.priors[j]);
    meta["priors"] = priors;
    json member_ids = json::array();
    for (const auto& m : team.members) member_ids.push_back(m.member_id);
    meta["members"] = member_ids;
    meta["config"] = {{"bag_count", team.config.bag_count},
                      {"max_epochs", team.config.max_epochs},
                      {"learning_rate", team.config.learning_rate},
                      {"finetune_lr_factor", team.config.finetune_lr_factor},
                      {"batch_size", team.config.batch_size},
                      {"patience", team.config.patience},
                      {"min_delta", team.config.min_delta},
                      {"early_stop", team.config.early_stop},
                      {"seed", team.config.seed}};
    files["team.json"] = meta.dump(2) + "\n";

    for (const auto& m : team.members) {
        std::string base = "members/" + m.member_id + "/";
        json mj;
        mj["member_id"] = m.member_id;
        mj["class_labels"] = m.ensemble.front().class_labels;
        json center = json::array();
        for (Eigen::Index i = 0; i < m.center.size(); ++i) center.push_back(m.center[i]);
        mj["center"] = center;
        mj["fscore"] = m.fscore;
        mj["home_epochs_run"] = m.home_epochs_run;
        mj["finetune_epochs_run"] = m.finetune_epochs_run;
        mj["ensemble_size"] = m.ensemble.size();
        files[base + "member.json"] = mj.dump(2) + "\n";
        for (std::size_t b = 0; b < m.ensemble.size(); ++b) {
            std::ostringstream out;
            write_classifier(m.ensemble[b], out);
            files[base + "classifier_" + std::to_string(b) + ".txt"] = out.str();
        }
    }
    return files;
}

inline std::string team_version(const Team& team) {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& [path, bytes] : serialize_team(team)) {
        h = fnv1a64(path, h);
        h = fnv1a64(bytes, h);
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void save_team(const Team& team, const std::filesystem::path& dir) {
    for (const auto& [rel, bytes] : serialize_team(team)) {
        std::filesystem::path p = dir / rel;
        std::filesystem::create_directories(p.parent_path());
        std::ofstream out(p, std::ios::binary);
        if (!out) fail(ErrorKind::io, "cannot write " + p.string());
        out << bytes;
    }
}

inline Team load_team(const std::filesystem::path& dir) {
    std::ifstream meta_in(dir / "team.json");
    if (!meta_in) fail(ErrorKind::io, "cannot open " + (dir / "team.json").string());
    json meta;
    try {
        meta_in >> meta;
    } catch (const json::exception& e) {
        fail(ErrorKind::parse, std::string("team.json: ") + e.what());
    }
    Team team;
    team.annotation = meta.at("annotation").get<std::string>();
    team.beta = meta.at("beta").get<double>();
    team.vote_mode = parse_vote_mode(meta.at("vote_mode").get<std::string>());
    team.threshold_mode = parse_threshold_mode(meta.at("threshold_mode").get<std::string>());
    team.quality_factors = meta.at("quality_factors").get<std::vector<int>>();
    auto priors = meta.at("priors").get<std::vector<double>>();
    team.priors = Eigen::Map<Eigen::VectorXd>(priors.data(), static_cast<Eigen::Index>(priors.size()));
    const json& cfg = meta.at("config");
    team.config.bag_count = cfg.at("bag_count").get<int>();
    team.config.max_epochs = cfg.at("max_epochs").get<int>();
    team.config.learning_rate = cfg.at("learning_rate").get<double>();
    team.config.finetune_lr_factor = cfg.at("finetune_lr_factor").get<double>();
    team.config.batch_size = cfg.at("batch_size").get<int>();
    team.config.patience = cfg.at("patience").get<int>();
    team.config.min_delta = cfg.at("min_delta").get<double>();
    team.config.early_stop = cfg.at("early_stop").get<bool>();
    team.config.seed = cfg.at("seed").get<std::uint64_t>();

    for (const auto& jm : meta.at("members")) {
        std::string id = jm.get<std::string>();
        std::filesystem::path base = dir / "members" / id;
        std::ifstream min(base / "member.json");
        if (!min) fail(ErrorKind::io, "cannot open " + (base / "member.json").string());
        json mj;
        try {
            min >> mj;
        } catch (const json::exception& e) {
            fail(ErrorKind::parse, "member.json (" + id + "): " + e.what());
        }
        Member m;
        m.member_id = mj.at("member_id").get<std::string>();
        auto labels = mj.at("class_labels").get<std::vector<std::string>>();
        auto center = mj.at("center").get<std::vector<double>>();
        m.center = Eigen::Map<Eigen::VectorXd>(center.data(), static_cast<Eigen::Index>(center.size()));
        m.fscore = mj.at("fscore").get<double>();
        m.home_epochs_run = mj.at("home_epochs_run").get<int>();
        m.finetune_epochs_run = mj.at("finetune_epochs_run").get<int>();
        std::size_t n = mj.at("ensemble_size").get<std::size_t>();
        for (std::size_t b = 0; b < n; ++b) {
            std::ifstream cin_(base / ("classifier_" + std::to_string(b) + ".txt"));
            if (!cin_) fail(ErrorKind::io, "missing classifier file for member " + id);
            BaseClassifier clf = read_classifier(cin_);
            clf.class_labels = labels;
            if (clf.weights.rows() != static_cast<Eigen::Index>(labels.size()))
                fail(ErrorKind::shape, "classifier rows != class count for member " + id);
            m.ensemble.push_back(std::move(clf));
        }
        team.members.push_back(std::move(m));
    }
    if (team.priors.size() != team.size())
        fail(ErrorKind::shape, "team priors length != member count");
    return team;
}

// ---------------------------------------------------------------------------
// Decision export: line-delimited JSON mirroring LabelDecision.

inline json decision_to_json(const LabelDecision& d) {
    json j;
    j["sample_id"] = d.sample_id;
    j["outcome"] = d.assigned() ? "assigned" : "abstained";
    j["label"] = d.label ? json(*d.label) : json(nullptr);
    j["winning_fraction"] = d.winning_fraction;
    j["alpha"] = d.alpha;
    j["threshold"] = d.threshold;
    json votes = json::array();
    for (const auto& v : d.member_votes)
        votes.push_back({{"member_id", v.member_id}, {"label", v.label}, {"weight", v.weight}});
    j["member_votes"] = votes;
    return j;
}

inline void write_decisions(const std::vector<LabelDecision>& decisions, std::ostream& out) {
    for (const auto& d : decisions) out << decision_to_json(d).dump() << "\n";
}

inline std::vector<LabelDecision> parse_decisions(std::istream& in) {
    std::vector<LabelDecision> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view sv = trim(line);
        if (sv.empty() || sv.front() == '#') continue;
        json j;
        try {
            j = json::parse(sv);
        } catch (const json::exception& e) {
            fail(ErrorKind::parse, "decisions line " + std::to_string(line_no) + ": " + e.what());
        }
        LabelDecision d;
        d.sample_id = j.at("sample_id").get<std::string>();
        if (!j.at("label").is_null()) d.label = j.at("label").get<std::string>();
        d.winning_fraction = j.at("winning_fraction").get<double>();
        d.alpha = j.at("alpha").get<double>();
        d.threshold = j.at("threshold").get<double>();
        for (const auto& v : j.at("member_votes"))
            d.member_votes.push_back({v.at("member_id").get<std::string>(),
                                      v.at("label").get<std::string>(),
                                      v.at("weight").get<double>()});
        out.push_back(std::move(d));
    }
    return out;
}

}  // namespace kidforge
