#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "kidforge/common.hpp"
#include "kidforge/expert.hpp"
#include "kidforge/schema.hpp"
#include "kidforge/synth.hpp"
#include "kidforge/team.hpp"

namespace kidforge {

// ---------------------------------------------------------------------------
// Ablation ladder. Each stage flips exactly one toggle on top of the
// previous one; the resolved cumulative configuration is spelled out per
// stage so a stage is usable standalone.

struct AblationStage {
    std::string name;
    int bag_count = 1;
    bool early_stop = false;
    std::vector<int> quality_factors;  // prediction-time views; empty = original only
    VoteMode vote_mode = VoteMode::unweighted;
    ThresholdMode threshold_mode = ThresholdMode::off;
};

inline const std::vector<AblationStage>& canonical_ladder() {
    static const std::vector<AblationStage> ladder = {
        {"initial", 1, false, {}, VoteMode::unweighted, ThresholdMode::off},
        {"+bootstrap", 5, false, {}, VoteMode::unweighted, ThresholdMode::off},
        {"+early_stop", 5, true, {}, VoteMode::unweighted, ThresholdMode::off},
        {"+compression(90)", 5, true, {90}, VoteMode::unweighted, ThresholdMode::off},
        {"+compression(90,70,50)", 5, true, {90, 70, 50}, VoteMode::unweighted,
         ThresholdMode::off},
        {"+confidence_weights", 5, true, {90, 70, 50}, VoteMode::weighted, ThresholdMode::off},
        {"+agreement_threshold", 5, true, {90, 70, 50}, VoteMode::weighted,
         ThresholdMode::dynamic},
    };
    return ladder;
}

// Stage names must form a prefix of the canonical ladder, in order. "all"
// (alone) selects the whole ladder.
inline std::vector<AblationStage> resolve_stages(const std::vector<std::string>& names) {
    const auto& ladder = canonical_ladder();
    if (names.empty() || (names.size() == 1 && names[0] == "all")) return ladder;
    if (names.size() > ladder.size())
        fail(ErrorKind::config, "more stages requested than the ladder has");
    std::vector<AblationStage> out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        bool known = false;
        for (const auto& s : ladder) known = known || s.name == names[i];
        if (!known) fail(ErrorKind::config, "unknown ablation stage '" + names[i] + "'");
        if (names[i] != ladder[i].name)
            fail(ErrorKind::config, "stages must form a prefix of the canonical ladder; got '" +
                                        names[i] + "' at position " + std::to_string(i) +
                                        ", expected '" + ladder[i].name + "'");
        out.push_back(ladder[i]);
    }
    return out;
}

inline void apply_stage(const AblationStage& stage, TrainConfig& cfg, TeamOptions& opts) {
    cfg.bag_count = stage.bag_count;
    cfg.early_stop = stage.early_stop;
    opts.quality_factors = stage.quality_factors;
    opts.vote_mode = stage.vote_mode;
    opts.threshold_mode = stage.threshold_mode;
}

// ---------------------------------------------------------------------------
// Reports. A cell accumulates per-round values for one (stage, held-out)
// key; rounds with zero assignments contribute no accuracy sample (accuracy
// is undefined there, never 0).

struct EvalCell {
    double acc_sum = 0.0;
    int acc_n = 0;
    double cov_sum = 0.0;
    int cov_n = 0;
    long assigned = 0, correct = 0, total = 0;

    void add_round(std::optional<double> acc, double cov, long a, long c, long t) {
        if (acc) {
            acc_sum += *acc;
            ++acc_n;
        }
        cov_sum += cov;
        ++cov_n;
        assigned += a;
        correct += c;
        total += t;
    }

    std::optional<double> accuracy() const {
        if (acc_n == 0) return std::nullopt;
        return acc_sum / acc_n;
    }
    double coverage() const { return cov_n == 0 ? 1.0 : cov_sum / cov_n; }
};

// One (stage, seed, held-out) labeling pass, with everything needed to
// recompute its numbers from scratch.
struct HeldOutRound {
    std::string stage;
    std::uint64_t seed = 0;
    std::string held_out;
    std::vector<std::string> member_homes;
    std::map<std::string, std::vector<std::string>> member_peers;
    std::vector<LabelDecision> decisions;  // held-out test split, manifest order
    std::vector<std::string> truth;        // parallel to decisions
    long total = 0, assigned = 0, correct = 0;
    std::optional<double> accuracy;  // null at coverage 0
    double coverage = 1.0;
};

struct EvalReport {
    std::vector<std::string> stages;    // row order
    std::vector<std::string> datasets;  // column order (held-out ids, federation order)
    std::map<std::string, std::map<std::string, EvalCell>> cells;  // stage -> held_out
    std::vector<HeldOutRound> rounds;
    json metadata;

    const EvalCell* cell(const std::string& stage, const std::string& ds) const {
        auto it = cells.find(stage);
        if (it == cells.end()) return nullptr;
        auto jt = it->second.find(ds);
        return jt == it->second.end() ? nullptr : &jt->second;
    }

    // Unweighted mean over held-out datasets; null-accuracy cells are
    // excluded from the accuracy mean.
    EvalCell stage_mean(const std::string& stage) const {
        EvalCell mean;
        auto it = cells.find(stage);
        if (it == cells.end()) return mean;
        for (const auto& ds : datasets) {
            auto jt = it->second.find(ds);
            if (jt == it->second.end()) continue;
            mean.add_round(jt->second.accuracy(), jt->second.coverage(), jt->second.assigned,
                           jt->second.correct, jt->second.total);
        }
        return mean;
    }
};

namespace detail {

inline Federation without_dataset(const Federation& fed, const std::string& exclude) {
    Federation out;
    out.schema = fed.schema;
    for (const auto& d : fed.datasets)
        if (d.dataset_id != exclude) out.datasets.push_back(d);
    return out;
}

// Training is untouched by labeling-time options, so stages that only
// change views, vote mode, or thresholds can reuse a team trained for an
// earlier stage. Keyed by every TrainConfig field to keep that implicit.
inline std::string train_signature(const std::string& held_out, const TrainConfig& cfg,
                                   double beta, double min_coverage) {
    std::string s = held_out;
    for (const std::string& part :
         {std::to_string(cfg.bag_count), std::to_string(cfg.max_epochs),
          format_double(cfg.learning_rate), format_double(cfg.finetune_lr_factor),
          std::to_string(cfg.batch_size), std::to_string(cfg.patience),
          format_double(cfg.min_delta), std::string(cfg.early_stop ? "1" : "0"),
          std::to_string(cfg.seed), format_double(beta), format_double(min_coverage)})
        s += "\x1f" + part;
    return s;
}

}  // namespace detail

// Labels the test split of `held` (its rows carrying ground truth for the
// annotation) with `team` and scores accuracy-on-assigned.
inline HeldOutRound score_held_out(const Team& team, const DatasetManifest& held,
                                   const std::string& annotation, FeatureSource& source,
                                   int workers = 1) {
    HeldOutRound round;
    round.held_out = held.dataset_id;

    std::vector<const SampleRecord*> rows;
    for (const auto& s : held.samples) {
        if (!s.label(annotation)) continue;
        if (split_of(s.sample_id, held.split_seed) != Split::test) continue;
        rows.push_back(&s);
    }
    round.total = static_cast<long>(rows.size());
    round.decisions.resize(rows.size());
    round.truth.resize(rows.size());
    parallel_for(rows.size(), workers, [&](std::size_t i) {
        const SampleRecord& s = *rows[i];
        ViewSet views = source.views(held.dataset_id, s, team.quality_factors);
        round.decisions[i] = label_sample(team, views.views.front(), views, s.sample_id);
        round.truth[i] = *s.label(annotation);
    });

    for (std::size_t i = 0; i < rows.size(); ++i) {
        const LabelDecision& dec = round.decisions[i];
        if (!dec.assigned()) continue;
        ++round.assigned;
        if (*dec.label == round.truth[i]) ++round.correct;
    }
    round.coverage = round.total == 0
                         ? 1.0
                         : static_cast<double>(round.assigned) / static_cast<double>(round.total);
    if (round.assigned > 0)
        round.accuracy = static_cast<double>(round.correct) / static_cast<double>(round.assigned);
    return round;
}

// Held-out protocol for one annotation: each source dataset is held out in
// turn, a team is built on the remaining sources, and the held-out test
// split is labeled and scored. The final aggregate is the unweighted mean
// over datasets. `team_cache` (optional) carries trained teams across
// stages that share a training configuration.
inline EvalReport held_out_eval(const std::string& annotation, const Federation& fed,
                                FeatureSource& source, const TrainConfig& cfg,
                                const TeamOptions& opts = {}, int workers = 1,
                                const std::string& stage_name = "heldout",
                                std::uint64_t seed_tag = 0,
                                std::map<std::string, Team>* team_cache = nullptr) {
    cfg.check();
    Partition part = partition_by_annotation(fed, annotation, opts.min_coverage);
    if (part.sources.size() < 2)
        fail(ErrorKind::protocol, "held-out protocol needs >= 2 source datasets for '" +
                                      annotation + "', have " +
                                      std::to_string(part.sources.size()));

    EvalReport report;
    report.stages.push_back(stage_name);
    report.metadata["protocol"] = "held_out";
    report.metadata["annotation"] = annotation;
    json round_meta = json::array();

    for (const auto& held : part.sources) {
        report.datasets.push_back(held.dataset_id);

        Team team;
        std::string key = detail::train_signature(held.dataset_id, cfg, opts.beta,
                                                  opts.min_coverage);
        const Team* hit = nullptr;
        if (team_cache) {
            auto it = team_cache->find(key);
            if (it != team_cache->end()) hit = &it->second;
        }
        if (hit) {
            team = *hit;
            // Labeling-time options are stamped onto the cached team.
            team.vote_mode = opts.vote_mode;
            team.threshold_mode = opts.threshold_mode;
            team.quality_factors = opts.quality_factors;
        } else {
            team = build_team(annotation, detail::without_dataset(fed, held.dataset_id), source,
                              cfg, opts, workers);
            if (team_cache) (*team_cache)[key] = team;
        }

        HeldOutRound round = score_held_out(team, held, annotation, source, workers);
        round.stage = stage_name;
        round.seed = seed_tag;

        // The held-out dataset must appear in no member's home or peer set.
        for (const auto& m : team.members) {
            if (m.member_id == held.dataset_id)
                fail(ErrorKind::protocol, "held-out dataset leaked into member homes");
            round.member_homes.push_back(m.member_id);
        }
        for (const auto& home : round.member_homes) {
            std::vector<std::string> peers;
            for (const auto& other : round.member_homes)
                if (other != home) peers.push_back(other);
            round.member_peers[home] = peers;
        }

        report.cells[stage_name][held.dataset_id].add_round(round.accuracy, round.coverage,
                                                            round.assigned, round.correct,
                                                            round.total);
        json rm;
        rm["stage"] = stage_name;
        rm["held_out"] = held.dataset_id;
        rm["member_homes"] = round.member_homes;
        rm["member_peers"] = round.member_peers;
        rm["assigned"] = round.assigned;
        rm["correct"] = round.correct;
        rm["total"] = round.total;
        round_meta.push_back(std::move(rm));
        report.rounds.push_back(std::move(round));
    }
    report.metadata["rounds"] = std::move(round_meta);
    return report;
}

// ---------------------------------------------------------------------------
// Ablation runs: held_out_eval per stage per seed, cells averaged over
// seeds. The generic form regenerates the federation per seed (synthetic
// benchmarks); the fixed-federation overload varies only the training seed.

using FederationProvider = std::function<SyntheticFederation(std::uint64_t seed)>;
using RoundSink = std::function<void(const HeldOutRound&)>;

inline EvalReport ablation_run(const std::string& annotation, const FederationProvider& provider,
                               const std::vector<AblationStage>& stages,
                               const std::vector<std::uint64_t>& seeds, const TrainConfig& base_cfg,
                               const TeamOptions& base_opts = {}, int workers = 1,
                               bool keep_rounds = true, const RoundSink& sink = nullptr) {
    if (stages.empty()) fail(ErrorKind::config, "ablation: no stages requested");
    if (seeds.empty()) fail(ErrorKind::config, "ablation: no seeds requested");

    EvalReport report;
    for (const auto& s : stages) report.stages.push_back(s.name);
    report.metadata["protocol"] = "ablation";
    report.metadata["annotation"] = annotation;
    report.metadata["seeds"] = seeds;
    json stage_meta = json::array();
    for (const auto& s : stages) stage_meta.push_back(s.name);
    report.metadata["stages"] = std::move(stage_meta);

    for (std::uint64_t seed : seeds) {
        SyntheticFederation bundle = provider(seed);
        std::map<std::string, Team> team_cache;
        for (const auto& stage : stages) {
            TrainConfig cfg = base_cfg;
            TeamOptions opts = base_opts;
            apply_stage(stage, cfg, opts);
            cfg.seed = seed;
            EvalReport one =
                held_out_eval(annotation, bundle.federation, *bundle.source, cfg, opts, workers,
                              stage.name, seed, &team_cache);
            if (report.datasets.empty()) report.datasets = one.datasets;
            for (const auto& ds : one.datasets) {
                const EvalCell& c = one.cells.at(stage.name).at(ds);
                report.cells[stage.name][ds].add_round(c.accuracy(), c.coverage(), c.assigned,
                                                       c.correct, c.total);
            }
            for (auto& r : one.rounds) {
                if (sink) sink(r);
                if (keep_rounds) report.rounds.push_back(std::move(r));
            }
        }
    }
    return report;
}

inline EvalReport ablation_run(const std::string& annotation, const Federation& fed,
                               const std::shared_ptr<FeatureSource>& source,
                               const std::vector<AblationStage>& stages,
                               const std::vector<std::uint64_t>& seeds, const TrainConfig& base_cfg,
                               const TeamOptions& base_opts = {}, int workers = 1,
                               bool keep_rounds = true, const RoundSink& sink = nullptr) {
    FederationProvider provider = [&](std::uint64_t) {
        SyntheticFederation bundle;
        bundle.federation = fed;
        bundle.source = source;
        return bundle;
    };
    return ablation_run(annotation, provider, stages, seeds, base_cfg, base_opts, workers,
                        keep_rounds, sink);
}

// ---------------------------------------------------------------------------
// Report writers. CSV is the machine format (long layout, one row per
// (stage, held-out) plus a mean row per stage); Markdown mirrors the wide
// grid of the ablation tables, stages as rows and held-out datasets as
// columns. `stamp` (config hash + seed) is embedded in both.

namespace detail {

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline std::string fixed4(std::optional<double> v, const char* null_text = "n/a") {
    if (!v) return null_text;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", *v);
    return buf;
}

}  // namespace detail

inline void write_eval_csv(const EvalReport& report, std::ostream& out,
                           const std::string& stamp = {}) {
    if (!stamp.empty()) out << "# " << stamp << "\n";
    out << "stage,held_out,accuracy,coverage,assigned,correct,total\n";
    auto row = [&](const std::string& stage, const std::string& ds, const EvalCell& c) {
        out << detail::csv_escape(stage) << "," << detail::csv_escape(ds) << ",";
        if (auto a = c.accuracy()) out << format_double(*a);
        out << "," << format_double(c.coverage()) << "," << c.assigned << "," << c.correct << ","
            << c.total << "\n";
    };
    for (const auto& stage : report.stages) {
        for (const auto& ds : report.datasets) {
            const EvalCell* c = report.cell(stage, ds);
            if (c) row(stage, ds, *c);
        }
        row(stage, "mean", report.stage_mean(stage));
    }
}

inline void write_eval_markdown(const EvalReport& report, std::ostream& out,
                                const std::string& stamp = {}) {
    std::vector<std::string> headers{"stage"};
    for (const auto& ds : report.datasets) headers.push_back(ds);
    headers.push_back("mean");

    auto table = [&](const std::string& title, auto value) {
        std::vector<std::vector<std::string>> grid;
        grid.push_back(headers);
        for (const auto& stage : report.stages) {
            std::vector<std::string> row{stage};
            for (const auto& ds : report.datasets) {
                const EvalCell* c = report.cell(stage, ds);
                row.push_back(c ? value(*c) : "n/a");
            }
            row.push_back(value(report.stage_mean(stage)));
            grid.push_back(std::move(row));
        }
        std::vector<std::size_t> width(headers.size(), 0);
        for (const auto& row : grid)
            for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
        out << "## " << title << "\n\n";
        for (std::size_t r = 0; r < grid.size(); ++r) {
            out << "|";
            for (std::size_t i = 0; i < grid[r].size(); ++i) {
                out << " " << grid[r][i];
                out << std::string(width[i] - grid[r][i].size(), ' ') << " |";
            }
            out << "\n";
            if (r == 0) {
                out << "|";
                for (std::size_t i = 0; i < width.size(); ++i)
                    out << std::string(width[i] + 2, '-') << "|";
                out << "\n";
            }
        }
        out << "\n";
    };

    table("Accuracy on assigned", [](const EvalCell& c) { return detail::fixed4(c.accuracy()); });
    table("Coverage", [](const EvalCell& c) { return detail::fixed4(c.coverage()); });
    if (!stamp.empty()) out << "Run: " << stamp << "\n";
}

}  // namespace kidforge
