// kidforge command line: ingestion, team training, labeling, KID assembly,
// and evaluation. One process, batch workflow; see README for formats.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kidforge/kidforge.hpp"

namespace kf = kidforge;
namespace fs = std::filesystem;
using kf::json;

namespace {

std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string iso_now() {
    std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s)
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
    return out;
}

// Splits a stage list on commas that are not inside parentheses, so
// "+compression(90,70,50)" stays one token.
std::vector<std::string> split_stages(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    int depth = 0;
    for (char c : s) {
        if (c == '(') ++depth;
        if (c == ')') --depth;
        if (c == ',' && depth == 0) {
            if (!std::string(kf::trim(cur)).empty()) out.push_back(std::string(kf::trim(cur)));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!std::string(kf::trim(cur)).empty()) out.push_back(std::string(kf::trim(cur)));
    return out;
}

// Run metadata is written for every invocation that names an output
// directory, on both success and failure paths.
struct RunMeta {
    fs::path out_dir;
    std::string subcommand;
    json config;
    std::string hash;
    std::uint64_t seed = 0;
    std::vector<std::string> outputs;

    std::string stamp() const { return "config=" + hash + " seed=" + std::to_string(seed); }

    void add(const fs::path& p) { outputs.push_back(p.string()); }

    void write(const std::string& status, const std::string& error = {}) {
        if (out_dir.empty()) return;
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) return;
        json j;
        j["subcommand"] = subcommand;
        j["config"] = config;
        j["config_hash"] = hash;
        j["seed"] = seed;
        j["status"] = status;
        if (!error.empty()) j["error"] = error;
        j["outputs"] = outputs;
        j["timestamp"] = iso_now();
        std::ofstream out(out_dir / "run-metadata.json");
        out << j.dump(2) << "\n";
    }
};

RunMeta g_meta;

void seal_meta(const std::string& subcommand, const fs::path& out_dir, json config,
               std::uint64_t seed) {
    g_meta.subcommand = subcommand;
    g_meta.out_dir = out_dir;
    g_meta.config = std::move(config);
    g_meta.config["subcommand"] = subcommand;
    g_meta.hash = hex16(kf::fnv1a64(g_meta.config.dump()));
    g_meta.seed = seed;
}

// ---------------------------------------------------------------------------
// Shared input flags: schema + manifests + optional feature tables. When no
// feature tables are given, samples must carry image paths, resolved
// relative to the directory of the manifest that declares them.

struct InputOpts {
    std::string schema_path;
    std::vector<std::string> manifest_paths;
    std::vector<std::string> feature_paths;
};

void add_input_flags(CLI::App* cmd, InputOpts& in) {
    cmd->add_option("--schema", in.schema_path, "global annotation schema (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--manifest", in.manifest_paths, "dataset manifest (repeatable)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--features", in.feature_paths, "feature table (repeatable)")
        ->check(CLI::ExistingFile);
}

class MultiDirImageSource : public kf::ImageFeatureSourceBase {
  public:
    void set_root(const std::string& dataset_id, fs::path dir) {
        roots_[dataset_id] = std::move(dir);
    }

  protected:
    cv::Mat load_mat(const std::string& dataset_id, const kf::SampleRecord& sample) override {
        if (!sample.image)
            kf::fail(kf::ErrorKind::coverage,
                     "sample '" + dataset_id + "/" + sample.sample_id + "' has no image");
        auto it = roots_.find(dataset_id);
        fs::path p = (it == roots_.end() ? fs::path() : it->second) / *sample.image;
        cv::Mat m = cv::imread(p.string(), cv::IMREAD_COLOR);
        if (m.empty()) kf::fail(kf::ErrorKind::io, "cannot read image " + p.string());
        return m;
    }

  private:
    std::map<std::string, fs::path> roots_;
};

struct LoadedInputs {
    kf::Federation fed;
    std::shared_ptr<kf::FeatureSource> source;
    std::vector<kf::Violation> violations;  // only populated when a sink is used
};

// strict = throw on the first schema violation (every subcommand except
// validate, which wants the full list).
LoadedInputs load_inputs(const InputOpts& in, bool strict) {
    LoadedInputs out;
    out.fed.schema = kf::parse_schema_file(in.schema_path);
    auto sink = strict ? nullptr : &out.violations;
    std::map<std::string, fs::path> manifest_dirs;
    for (const auto& path : in.manifest_paths) {
        kf::DatasetManifest m = kf::parse_manifest_file(path, out.fed.schema, sink);
        manifest_dirs[m.dataset_id] = fs::path(path).parent_path();
        out.fed.datasets.push_back(std::move(m));
    }

    if (!in.feature_paths.empty()) {
        auto tables = std::make_shared<kf::TableFeatureSource>();
        for (const auto& path : in.feature_paths) {
            kf::FeatureTable t = kf::load_feature_table(path);
            // Tables are looked up by the manifest's feature_ref string,
            // which may be the path as given or just the filename.
            std::string base = fs::path(path).filename().string();
            if (base != path) tables->add_table(base, t);
            tables->add_table(path, std::move(t));
        }
        out.source = tables;
    } else {
        auto images = std::make_shared<MultiDirImageSource>();
        for (const auto& [ds, dir] : manifest_dirs) images->set_root(ds, dir);
        out.source = images;
    }
    return out;
}

json input_config(const InputOpts& in) {
    json j;
    j["schema"] = in.schema_path;
    j["manifests"] = in.manifest_paths;
    j["features"] = in.feature_paths;
    return j;
}

// ---------------------------------------------------------------------------
// Training / team option flags shared by train-team, eval-heldout, ablate.

struct TrainOpts {
    int bag_count = 5;
    int max_epochs = 200;
    double learning_rate = 0.1;
    double finetune_lr_factor = 0.1;
    int batch_size = 64;
    int patience = 5;
    double min_delta = 1e-3;
    bool no_early_stop = false;

    kf::TrainConfig config(std::uint64_t seed) const {
        kf::TrainConfig cfg;
        cfg.bag_count = bag_count;
        cfg.max_epochs = max_epochs;
        cfg.learning_rate = learning_rate;
        cfg.finetune_lr_factor = finetune_lr_factor;
        cfg.batch_size = batch_size;
        cfg.patience = patience;
        cfg.min_delta = min_delta;
        cfg.early_stop = !no_early_stop;
        cfg.seed = seed;
        return cfg;
    }

    json to_json() const {
        json j;
        j["bag_count"] = bag_count;
        j["max_epochs"] = max_epochs;
        j["learning_rate"] = learning_rate;
        j["finetune_lr_factor"] = finetune_lr_factor;
        j["batch_size"] = batch_size;
        j["patience"] = patience;
        j["min_delta"] = min_delta;
        j["early_stop"] = !no_early_stop;
        return j;
    }
};

void add_train_flags(CLI::App* cmd, TrainOpts& t) {
    cmd->add_option("--bag-count", t.bag_count, "bootstrap bags per member");
    cmd->add_option("--max-epochs", t.max_epochs, "epoch cap per training phase");
    cmd->add_option("--learning-rate", t.learning_rate, "SGD learning rate");
    cmd->add_option("--finetune-lr-factor", t.finetune_lr_factor,
                    "finetune learning rate multiplier");
    cmd->add_option("--batch-size", t.batch_size, "SGD minibatch size");
    cmd->add_option("--patience", t.patience, "early stopping patience (epochs)");
    cmd->add_option("--min-delta", t.min_delta, "minimum early-stopping improvement");
    cmd->add_flag("--no-early-stop", t.no_early_stop, "train exactly max-epochs");
}

struct VoteOpts {
    std::vector<int> quality_factors{90, 70, 50};
    std::string vote = "weighted";
    std::string threshold = "dynamic";
    double beta = 4.0;
    double min_coverage = 0.95;

    kf::TeamOptions options() const {
        kf::TeamOptions o;
        o.quality_factors = quality_factors;
        o.vote_mode = kf::parse_vote_mode(vote);
        o.threshold_mode = kf::parse_threshold_mode(threshold);
        o.beta = beta;
        o.min_coverage = min_coverage;
        return o;
    }

    json to_json() const {
        json j;
        j["quality_factors"] = quality_factors;
        j["vote"] = vote;
        j["threshold"] = threshold;
        j["beta"] = beta;
        j["min_coverage"] = min_coverage;
        return j;
    }
};

void add_vote_flags(CLI::App* cmd, VoteOpts& v) {
    cmd->add_option("--qf", v.quality_factors, "JPEG quality factor view (repeatable)");
    cmd->add_option("--vote", v.vote, "vote weighting")
        ->check(CLI::IsMember({"weighted", "unweighted"}));
    cmd->add_option("--threshold", v.threshold, "assignment threshold mode")
        ->check(CLI::IsMember({"dynamic", "fixed", "off"}));
    cmd->add_option("--beta", v.beta, "prior exponent over member f-scores");
    cmd->add_option("--min-coverage", v.min_coverage,
                    "annotation coverage required of a source dataset");
}

// Synthetic benchmark selector for eval-heldout and ablate.
kf::SyntheticSpec benchmark_spec(const std::string& name, std::uint64_t seed) {
    if (name == "feature") return kf::default_feature_benchmark(seed);
    if (name == "image" || name == "default") return kf::default_image_benchmark(seed);
    kf::fail(kf::ErrorKind::config, "unknown synthetic benchmark '" + name +
                                        "' (want feature, image, or default)");
}

void write_eval_outputs(const kf::EvalReport& report, const fs::path& out_dir,
                        const std::string& basename, const std::string& format,
                        const std::string& stamp, bool dump_decisions) {
    fs::create_directories(out_dir);
    if (format.empty() || format == "csv") {
        fs::path p = out_dir / (basename + ".csv");
        std::ofstream out(p);
        if (!out) kf::fail(kf::ErrorKind::io, "cannot write " + p.string());
        kf::write_eval_csv(report, out, stamp);
        g_meta.add(p);
    }
    if (format.empty() || format == "md") {
        fs::path p = out_dir / (basename + ".md");
        std::ofstream out(p);
        if (!out) kf::fail(kf::ErrorKind::io, "cannot write " + p.string());
        kf::write_eval_markdown(report, out, stamp);
        g_meta.add(p);
    }
    {
        fs::path p = out_dir / (basename + "-metadata.json");
        std::ofstream out(p);
        if (!out) kf::fail(kf::ErrorKind::io, "cannot write " + p.string());
        json j = report.metadata;
        j["run"] = stamp;
        out << j.dump(2) << "\n";
        g_meta.add(p);
    }
    if (dump_decisions) {
        fs::path dir = out_dir / "decisions";
        fs::create_directories(dir);
        for (const auto& round : report.rounds) {
            fs::path p = dir / (sanitize(round.stage) + "-seed" + std::to_string(round.seed) +
                                "-" + sanitize(round.held_out) + ".ldjson");
            std::ofstream out(p);
            if (!out) kf::fail(kf::ErrorKind::io, "cannot write " + p.string());
            out << "# " << stamp << "\n";
            kf::write_decisions(round.decisions, out);
            g_meta.add(p);
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommand bodies. Each throws kf::Error on failure; main maps error
// kinds to exit codes.

struct ValidateArgs {
    InputOpts in;
    std::string out_dir;
    double min_coverage = 0.95;
    bool check_files = false;
    int exit_code = 0;
};

void run_validate(ValidateArgs& a) {
    json cfg = input_config(a.in);
    cfg["min_coverage"] = a.min_coverage;
    cfg["check_files"] = a.check_files;
    seal_meta("validate", a.out_dir, cfg, 0);

    LoadedInputs loaded = load_inputs(a.in, /*strict=*/false);
    kf::ValidateOptions opts;
    opts.min_coverage = a.min_coverage;
    opts.check_files = a.check_files;
    if (!a.in.manifest_paths.empty())
        opts.base_dir = fs::path(a.in.manifest_paths.front()).parent_path();
    kf::ValidationReport report = kf::validate_federation(loaded.fed, opts);
    // Parse-time violations (undeclared keys, labels outside the set) come
    // first, then federation-level ones.
    report.violations.insert(report.violations.begin(), loaded.violations.begin(),
                             loaded.violations.end());

    std::cout << report.to_string();
    if (!g_meta.out_dir.empty()) {
        fs::create_directories(g_meta.out_dir);
        fs::path p = g_meta.out_dir / "validation.json";
        std::ofstream out(p);
        if (!out) kf::fail(kf::ErrorKind::io, "cannot write " + p.string());
        json j;
        j["ok"] = report.ok();
        json v = json::array();
        for (const auto& viol : report.violations)
            v.push_back({{"dataset_id", viol.dataset_id},
                         {"sample_id", viol.sample_id},
                         {"message", viol.message}});
        j["violations"] = v;
        j["run"] = g_meta.stamp();
        out << j.dump(2) << "\n";
        g_meta.add(p);
    }
    g_meta.write(report.ok() ? "ok" : "violations");
    a.exit_code = report.ok() ? 0 : 1;
}

struct TrainTeamArgs {
    InputOpts in;
    TrainOpts train;
    VoteOpts vote;
    std::string annotation;
    std::string out_dir;
    std::uint64_t seed = 0;
    int workers = 0;
};

void run_train_team(TrainTeamArgs& a) {
    json cfg = input_config(a.in);
    cfg["annotation"] = a.annotation;
    cfg["train"] = a.train.to_json();
    cfg["vote"] = a.vote.to_json();
    cfg["seed"] = a.seed;
    seal_meta("train-team", a.out_dir, cfg, a.seed);

    LoadedInputs loaded = load_inputs(a.in, /*strict=*/true);
    int workers = a.workers > 0 ? a.workers : kf::default_workers();
    kf::Team team = kf::build_team(a.annotation, loaded.fed, *loaded.source,
                                   a.train.config(a.seed), a.vote.options(), workers);

    fs::path team_dir = fs::path(a.out_dir) / ("team-" + sanitize(a.annotation));
    kf::save_team(team, team_dir);
    {
        std::ofstream out(team_dir / "provenance.json");
        if (!out) kf::fail(kf::ErrorKind::io, "cannot write provenance.json");
        json j;
        j["annotation"] = a.annotation;
        j["config_hash"] = g_meta.hash;
        j["seed"] = a.seed;
        out << j.dump(2) << "\n";
    }
    g_meta.add(team_dir);

    std::cout << "team " << kf::team_version(team) << " annotation=" << a.annotation << "\n";
    for (const auto& m : team.members)
        std::cout << "  member " << m.member_id << " fscore=" << kf::format_double(m.fscore)
                  << " ensemble=" << m.ensemble.size() << "\n";
    g_meta.write("ok");
}

struct LabelArgs {
    InputOpts in;
    std::string team_dir;
    std::string out_dir;
    int workers = 0;
};

void run_label(LabelArgs& a) {
    json cfg = input_config(a.in);
    cfg["team"] = a.team_dir;
    seal_meta("label", a.out_dir, cfg, 0);

    kf::Team team = kf::load_team(a.team_dir);
    g_meta.seed = team.config.seed;
    LoadedInputs loaded = load_inputs(a.in, /*strict=*/true);
    int workers = a.workers > 0 ? a.workers : kf::default_workers();

    fs::create_directories(g_meta.out_dir);
    for (const auto& d : loaded.fed.datasets) {
        std::vector<kf::LabelDecision> decisions =
            kf::label_dataset(team, d, *loaded.source, workers);
        fs::path p = g_meta.out_dir / (sanitize(d.dataset_id) + ".decisions.ldjson");
        std::ofstream out(p);
        if (!out) kf::fail(kf::ErrorKind::io, "cannot write " + p.string());
        out << "# " << g_meta.stamp() << " team=" << kf::team_version(team) << "\n";
        kf::write_decisions(decisions, out);
        g_meta.add(p);

        long assigned = 0;
        for (const auto& dec : decisions) assigned += dec.assigned() ? 1 : 0;
        std::cout << d.dataset_id << ": assigned " << assigned << "/" << decisions.size() << "\n";
    }
    g_meta.write("ok");
}

struct BuildKidArgs {
    InputOpts in;
    std::vector<std::string> team_dirs;
    std::string cluster_model_path;
    double tau = 0.0;  // 0 = calibrate from data
    std::string out_dir;
    std::uint64_t seed = 0;
    int workers = 0;
};

void run_build_kid(BuildKidArgs& a) {
    json cfg = input_config(a.in);
    cfg["teams"] = a.team_dirs;
    cfg["cluster_model"] = a.cluster_model_path;
    cfg["tau"] = a.tau;
    cfg["seed"] = a.seed;
    seal_meta("build-kid", a.out_dir, cfg, a.seed);

    LoadedInputs loaded = load_inputs(a.in, /*strict=*/true);
    int workers = a.workers > 0 ? a.workers : kf::default_workers();

    std::map<std::string, kf::Team> teams;
    for (const auto& dir : a.team_dirs) {
        kf::Team team = kf::load_team(dir);
        if (teams.count(team.annotation))
            kf::fail(kf::ErrorKind::config, "two teams given for annotation '" + team.annotation + "'");
        teams.emplace(team.annotation, std::move(team));
    }

    // Cluster-kind annotations: load the model if given, otherwise fit one
    // from the datasets that carry the annotation. A single model serves a
    // single annotation.
    std::optional<kf::ClusterModel> model;
    std::string cluster_annotation;
    for (const auto& def : loaded.fed.schema.annotations) {
        if (def.kind != kf::AnnotationKind::cluster) continue;
        bool gap = false;
        for (const auto& d : loaded.fed.datasets)
            for (const auto& s : d.samples)
                if (!s.label(def.name)) gap = true;
        if (!gap) continue;
        if (!cluster_annotation.empty())
            kf::fail(kf::ErrorKind::config,
                     "multiple cluster annotations have gaps; build them one at a time");
        cluster_annotation = def.name;
    }
    if (!cluster_annotation.empty()) {
        if (!a.cluster_model_path.empty()) {
            model = kf::load_cluster_model(a.cluster_model_path);
        } else {
            std::vector<kf::LabeledSet> sets;
            for (const auto& d : loaded.fed.datasets) {
                if (d.coverage(cluster_annotation) == 0.0) continue;
                kf::LabeledSet s = kf::make_labeled_set(d, cluster_annotation, *loaded.source);
                if (s.size() > 0) sets.push_back(std::move(s));
            }
            if (sets.empty())
                kf::fail(kf::ErrorKind::config, "no labeled source to fit cluster annotation '" +
                                                    cluster_annotation + "'");
            std::optional<double> tau;
            if (a.tau > 0) tau = a.tau;
            model = kf::fit_make_centroids(sets, tau);
        }
    }

    kf::ClusterModel augmented;
    kf::KIDManifest kid = kf::build_kid(loaded.fed, teams, model, *loaded.source, workers,
                                        model ? &augmented : nullptr);
    kid.build_metadata["config_hash"] = g_meta.hash;
    kid.build_metadata["seed"] = a.seed;
    kid.build_metadata["codec"] = kf::codec_id();
    json versions;
    for (const auto& [name, team] : teams) versions[name] = kf::team_version(team);
    kid.build_metadata["team_versions"] = versions;
    if (model) kid.build_metadata["cluster_model_version"] = kf::cluster_model_version(augmented);

    fs::create_directories(g_meta.out_dir);
    fs::path kid_path = g_meta.out_dir / "kid.manifest";
    kf::write_kid_file(kid, kid_path);
    g_meta.add(kid_path);

    if (model) {
        fs::path p = g_meta.out_dir / ("cluster-" + sanitize(cluster_annotation) + ".model");
        kf::save_cluster_model(augmented, p);
        g_meta.add(p);
    }
    {
        fs::path p = g_meta.out_dir / "kid-stats.json";
        std::ofstream out(p);
        if (!out) kf::fail(kf::ErrorKind::io, "cannot write " + p.string());
        json j = kf::kid_stats_to_json(kf::kid_stats(kid));
        j["run"] = g_meta.stamp();
        out << j.dump(2) << "\n";
        g_meta.add(p);
    }

    for (const auto& [name, counts] : kid.provenance_summary)
        std::cout << name << ": original=" << counts.original << " inferred=" << counts.inferred
                  << " abstained=" << counts.abstained << "\n";
    g_meta.write("ok");
}

struct EvalHeldoutArgs {
    InputOpts in;
    bool have_inputs = false;
    std::string synthetic;
    TrainOpts train;
    VoteOpts vote;
    std::string annotation = "label";
    std::string out_dir;
    std::string format;
    std::uint64_t seed = 0;
    int workers = 0;
    bool dump_decisions = false;
};

void run_eval_heldout(EvalHeldoutArgs& a) {
    json cfg = a.have_inputs ? input_config(a.in) : json::object();
    cfg["synthetic"] = a.synthetic;
    cfg["annotation"] = a.annotation;
    cfg["train"] = a.train.to_json();
    cfg["vote"] = a.vote.to_json();
    cfg["seed"] = a.seed;
    seal_meta("eval-heldout", a.out_dir, cfg, a.seed);

    kf::Federation fed;
    std::shared_ptr<kf::FeatureSource> source;
    if (!a.synthetic.empty()) {
        kf::SyntheticFederation synth =
            kf::generate_synthetic_federation(benchmark_spec(a.synthetic, a.seed));
        fed = std::move(synth.federation);
        source = synth.source;
    } else if (a.have_inputs) {
        LoadedInputs loaded = load_inputs(a.in, /*strict=*/true);
        fed = std::move(loaded.fed);
        source = loaded.source;
    } else {
        kf::fail(kf::ErrorKind::config, "eval-heldout needs either --synthetic or --schema/--manifest");
    }

    int workers = a.workers > 0 ? a.workers : kf::default_workers();
    kf::EvalReport report = kf::held_out_eval(a.annotation, fed, *source, a.train.config(a.seed),
                                              a.vote.options(), workers, "heldout", a.seed);
    write_eval_outputs(report, g_meta.out_dir, "heldout", a.format, g_meta.stamp(),
                       a.dump_decisions);
    kf::write_eval_markdown(report, std::cout);
    g_meta.write("ok");
}

struct AblateArgs {
    InputOpts in;
    bool have_inputs = false;
    std::string synthetic = "default";
    TrainOpts train;
    VoteOpts vote;
    std::string annotation = "label";
    std::string stages = "all";
    int seeds = 10;
    std::uint64_t seed = 0;  // first seed
    std::string out_dir;
    std::string format;
    int workers = 0;
    bool dump_decisions = false;
};

void run_ablate(AblateArgs& a) {
    json cfg = a.have_inputs ? input_config(a.in) : json::object();
    cfg["synthetic"] = a.have_inputs ? "" : a.synthetic;
    cfg["annotation"] = a.annotation;
    cfg["train"] = a.train.to_json();
    cfg["vote"] = a.vote.to_json();
    cfg["stages"] = a.stages;
    cfg["seeds"] = a.seeds;
    cfg["seed"] = a.seed;
    seal_meta("ablate", a.out_dir, cfg, a.seed);

    std::vector<kf::AblationStage> stages = kf::resolve_stages(split_stages(a.stages));
    if (a.seeds < 1) kf::fail(kf::ErrorKind::config, "--seeds must be >= 1");
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < a.seeds; ++i) seeds.push_back(a.seed + static_cast<std::uint64_t>(i));

    int workers = a.workers > 0 ? a.workers : kf::default_workers();
    kf::RoundSink sink = nullptr;
    if (kf::log_level() >= 1) {
        sink = [](const kf::HeldOutRound& r) {
            std::cerr << "[ablate] " << r.stage << " seed=" << r.seed << " held=" << r.held_out
                      << " assigned=" << r.assigned << "/" << r.total
                      << (r.accuracy ? " acc=" + kf::format_double(*r.accuracy) : "") << "\n";
        };
    }

    kf::EvalReport report;
    if (a.have_inputs) {
        LoadedInputs loaded = load_inputs(a.in, /*strict=*/true);
        report = kf::ablation_run(a.annotation, loaded.fed, loaded.source, stages, seeds,
                                  a.train.config(a.seed), a.vote.options(), workers,
                                  /*keep_rounds=*/true, sink);
    } else {
        std::string bench = a.synthetic;
        kf::FederationProvider provider = [bench](std::uint64_t s) {
            return kf::generate_synthetic_federation(benchmark_spec(bench, s));
        };
        report = kf::ablation_run(a.annotation, provider, stages, seeds, a.train.config(a.seed),
                                  a.vote.options(), workers, /*keep_rounds=*/true, sink);
    }

    std::string stamp = g_meta.stamp() + " seeds=" + std::to_string(a.seed) + ".." +
                        std::to_string(a.seed + static_cast<std::uint64_t>(a.seeds) - 1);
    write_eval_outputs(report, g_meta.out_dir, "ablation", a.format, stamp, a.dump_decisions);
    kf::write_eval_markdown(report, std::cout);
    g_meta.write("ok");
}

struct SynthArgs {
    std::string kind = "categorical";
    bool image = false;
    std::string benchmark;  // feature|image: emit a pinned benchmark spec
    int datasets = 3;
    int classes = 8;
    int samples = 240;
    int dim = 16;
    double separation = 4.0;
    double shift = 0.5;
    double noise = 0.25;
    double overlap = 0.5;
    std::uint64_t seed = 0;
    std::string out_dir;
};

void run_synth(SynthArgs& a) {
    json cfg;
    cfg["kind"] = a.kind;
    cfg["image"] = a.image;
    cfg["benchmark"] = a.benchmark;
    cfg["datasets"] = a.datasets;
    cfg["classes"] = a.classes;
    cfg["samples"] = a.samples;
    cfg["dim"] = a.dim;
    cfg["separation"] = a.separation;
    cfg["shift"] = a.shift;
    cfg["noise"] = a.noise;
    cfg["overlap"] = a.overlap;
    cfg["seed"] = a.seed;
    seal_meta("synth", a.out_dir, cfg, a.seed);

    kf::SyntheticSpec spec;
    if (!a.benchmark.empty()) {
        spec = benchmark_spec(a.benchmark, a.seed);
    } else {
        spec.kind = a.kind == "cluster" ? kf::AnnotationKind::cluster
                                        : kf::AnnotationKind::categorical;
        if (a.kind != "cluster" && a.kind != "categorical")
            kf::fail(kf::ErrorKind::config, "--kind must be categorical or cluster");
        spec.image_mode = a.image;
        spec.num_datasets = a.datasets;
        spec.num_classes = a.classes;
        spec.samples_per_dataset = a.samples;
        spec.feature_dim = a.dim;
        spec.class_separation = a.separation;
        spec.domain_shift = a.shift;
        spec.noise = a.noise;
        spec.overlap_fraction = a.overlap;
        spec.seed = a.seed;
    }

    kf::SyntheticFederation synth = kf::generate_synthetic_federation(spec);
    kf::write_synthetic_federation(synth, g_meta.out_dir, g_meta.stamp());
    g_meta.add(g_meta.out_dir / "schema.json");
    for (const auto& d : synth.federation.datasets) {
        g_meta.add(g_meta.out_dir / (d.dataset_id + ".manifest"));
        std::cout << d.dataset_id << ": " << d.samples.size() << " samples\n";
    }
    g_meta.write("ok");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kidforge: cross-dataset annotation teams and KID assembly"};
    app.require_subcommand(1);

    ValidateArgs validate_args;
    auto* validate = app.add_subcommand("validate", "check manifests against the schema");
    add_input_flags(validate, validate_args.in);
    validate->add_option("--out", validate_args.out_dir, "output directory for the report");
    validate->add_option("--min-coverage", validate_args.min_coverage,
                         "required per-annotation coverage");
    validate->add_flag("--check-files", validate_args.check_files,
                       "verify referenced image files exist");
    validate->set_config("--config");
    validate->callback([&] { run_validate(validate_args); });

    TrainTeamArgs train_args;
    auto* train = app.add_subcommand("train-team", "train one annotation's expert team");
    add_input_flags(train, train_args.in);
    add_train_flags(train, train_args.train);
    add_vote_flags(train, train_args.vote);
    train->add_option("--annotation", train_args.annotation, "annotation to train")->required();
    train->add_option("--out", train_args.out_dir, "output directory")->required();
    train->add_option("--seed", train_args.seed, "training seed");
    train->add_option("--workers", train_args.workers, "worker threads (0 = all cores)");
    train->set_config("--config");
    train->callback([&] { run_train_team(train_args); });

    LabelArgs label_args;
    auto* label = app.add_subcommand("label", "label manifests with a saved team");
    add_input_flags(label, label_args.in);
    label->add_option("--team", label_args.team_dir, "saved team directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    label->add_option("--out", label_args.out_dir, "output directory")->required();
    label->add_option("--workers", label_args.workers, "worker threads (0 = all cores)");
    label->set_config("--config");
    label->callback([&] { run_label(label_args); });

    BuildKidArgs kid_args;
    auto* kid = app.add_subcommand("build-kid", "assemble the knowledge-integrated dataset");
    add_input_flags(kid, kid_args.in);
    kid->add_option("--team", kid_args.team_dirs, "saved team directory (repeatable)")
        ->check(CLI::ExistingDirectory);
    kid->add_option("--cluster-model", kid_args.cluster_model_path,
                    "saved cluster model (fitted from sources when absent)")
        ->check(CLI::ExistingFile);
    kid->add_option("--tau", kid_args.tau, "cluster merge radius (0 = calibrate)");
    kid->add_option("--out", kid_args.out_dir, "output directory")->required();
    kid->add_option("--seed", kid_args.seed, "seed recorded in build metadata");
    kid->add_option("--workers", kid_args.workers, "worker threads (0 = all cores)");
    kid->set_config("--config");
    kid->callback([&] { run_build_kid(kid_args); });

    EvalHeldoutArgs eval_args;
    auto* evalh = app.add_subcommand("eval-heldout", "held-out cross-dataset evaluation");
    eval_args.in.schema_path.clear();
    evalh->add_option("--schema", eval_args.in.schema_path, "global annotation schema (JSON)")
        ->check(CLI::ExistingFile);
    evalh->add_option("--manifest", eval_args.in.manifest_paths, "dataset manifest (repeatable)")
        ->check(CLI::ExistingFile);
    evalh->add_option("--features", eval_args.in.feature_paths, "feature table (repeatable)")
        ->check(CLI::ExistingFile);
    evalh->add_option("--synthetic", eval_args.synthetic,
                      "use a pinned synthetic benchmark {feature,image,default}");
    add_train_flags(evalh, eval_args.train);
    add_vote_flags(evalh, eval_args.vote);
    evalh->add_option("--annotation", eval_args.annotation, "annotation to evaluate");
    evalh->add_option("--out", eval_args.out_dir, "output directory")->required();
    evalh->add_option("--format", eval_args.format, "report format (default: both)")
        ->check(CLI::IsMember({"csv", "md"}));
    evalh->add_option("--seed", eval_args.seed, "seed");
    evalh->add_option("--workers", eval_args.workers, "worker threads (0 = all cores)");
    evalh->add_flag("--dump-decisions", eval_args.dump_decisions,
                    "write per-sample decision files");
    evalh->set_config("--config");
    evalh->callback([&] {
        eval_args.have_inputs = !eval_args.in.schema_path.empty();
        if (eval_args.have_inputs && eval_args.in.manifest_paths.empty())
            kf::fail(kf::ErrorKind::config, "--schema requires --manifest");
        run_eval_heldout(eval_args);
    });

    AblateArgs ablate_args;
    auto* ablate = app.add_subcommand("ablate", "run the mitigation ablation ladder");
    ablate->add_option("--schema", ablate_args.in.schema_path, "global annotation schema (JSON)")
        ->check(CLI::ExistingFile);
    ablate->add_option("--manifest", ablate_args.in.manifest_paths, "dataset manifest (repeatable)")
        ->check(CLI::ExistingFile);
    ablate->add_option("--features", ablate_args.in.feature_paths, "feature table (repeatable)")
        ->check(CLI::ExistingFile);
    ablate->add_option("--synthetic", ablate_args.synthetic,
                       "synthetic benchmark {feature,image,default}");
    add_train_flags(ablate, ablate_args.train);
    add_vote_flags(ablate, ablate_args.vote);
    ablate->add_option("--annotation", ablate_args.annotation, "annotation to evaluate");
    ablate->add_option("--stages", ablate_args.stages,
                       "comma-separated ladder prefix, or 'all'");
    ablate->add_option("--seeds", ablate_args.seeds, "number of seeds (first = --seed)");
    ablate->add_option("--seed", ablate_args.seed, "first seed");
    ablate->add_option("--out", ablate_args.out_dir, "output directory")->required();
    ablate->add_option("--format", ablate_args.format, "report format (default: both)")
        ->check(CLI::IsMember({"csv", "md"}));
    ablate->add_option("--workers", ablate_args.workers, "worker threads (0 = all cores)");
    ablate->add_flag("--dump-decisions", ablate_args.dump_decisions,
                     "write per-sample decision files");
    ablate->set_config("--config");
    ablate->callback([&] {
        ablate_args.have_inputs = !ablate_args.in.schema_path.empty();
        if (ablate_args.have_inputs && ablate_args.in.manifest_paths.empty())
            kf::fail(kf::ErrorKind::config, "--schema requires --manifest");
        run_ablate(ablate_args);
    });

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "generate a synthetic federation on disk");
    synth->add_option("--kind", synth_args.kind, "annotation kind {categorical,cluster}");
    synth->add_flag("--image", synth_args.image, "render images instead of feature tables");
    synth->add_option("--benchmark", synth_args.benchmark,
                      "emit a pinned benchmark {feature,image} (overrides other knobs)");
    synth->add_option("--datasets", synth_args.datasets, "number of datasets");
    synth->add_option("--classes", synth_args.classes, "classes (or makes)");
    synth->add_option("--samples", synth_args.samples, "samples per dataset");
    synth->add_option("--dim", synth_args.dim, "feature dimension");
    synth->add_option("--separation", synth_args.separation, "class prototype separation");
    synth->add_option("--shift", synth_args.shift, "per-dataset domain shift");
    synth->add_option("--noise", synth_args.noise, "sample noise sigma");
    synth->add_option("--overlap", synth_args.overlap, "cluster-kind make overlap fraction");
    synth->add_option("--seed", synth_args.seed, "generator seed");
    synth->add_option("--out", synth_args.out_dir, "output directory")->required();
    synth->set_config("--config");
    synth->callback([&] { run_synth(synth_args); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);  // prints help or the error + usage hint
        return code == 0 ? 0 : 2;
    } catch (const kf::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        g_meta.write("error", e.what());
        return e.kind() == kf::ErrorKind::config ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        g_meta.write("error", e.what());
        return 1;
    }
    return validate_args.exit_code;
}
