#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "kidforge/cluster.hpp"
#include "kidforge/common.hpp"
#include "kidforge/schema.hpp"
#include "kidforge/team.hpp"

namespace kidforge {

enum class ProvenanceSource { original, inferred, abstained };

inline const char* to_string(ProvenanceSource s) {
    switch (s) {
        case ProvenanceSource::original: return "original";
        case ProvenanceSource::inferred: return "inferred";
        case ProvenanceSource::abstained: return "abstained";
    }
    return "?";
}

struct AnnotationEntry {
    std::optional<std::string> value;
    ProvenanceSource source = ProvenanceSource::original;
    std::optional<double> agreement;   // winning fraction for team decisions
    std::optional<double> threshold;   // 0.5 + alpha for team decisions
    std::optional<std::string> team_version;
};

struct KIDRecord {
    std::string sample_id;  // "<dataset_id>/<local_id>", globally unique
    std::string source_dataset;
    std::optional<std::string> image;
    std::optional<std::string> feature_ref;
    std::map<std::string, AnnotationEntry> annotations;  // one entry per schema annotation
};

struct ProvenanceCounts {
    long original = 0;
    long inferred = 0;
    long abstained = 0;

    long total() const { return original + inferred + abstained; }
    double coverage() const {
        return total() == 0 ? 1.0
                            : static_cast<double>(original + inferred) / static_cast<double>(total());
    }
};

struct KIDManifest {
    AnnotationSchema schema;
    std::vector<KIDRecord> records;
    std::map<std::string, ProvenanceCounts> provenance_summary;  // per annotation
    json build_metadata;  // seed, config hash, codec id, team versions
};

inline std::string cluster_model_version(const ClusterModel& model) {
    std::ostringstream out;
    write_cluster_model(model, out);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(out.str())));
    return buf;
}

// Assembles the KID: the union of all federation samples, original
// annotation values kept untouched, gaps filled per annotation by its team
// (categorical) or by cluster transfer (cluster kind), abstentions recorded
// blank. Cluster transfer runs dataset by dataset in federation order with
// the model augmented along the way, so novel clusters opened for one
// dataset are visible to the next; the final augmented model is returned
// through augmented_out when given.
inline KIDManifest build_kid(const Federation& fed, const std::map<std::string, Team>& teams,
                             const std::optional<ClusterModel>& cluster_model,
                             FeatureSource& source, int workers = 1,
                             ClusterModel* augmented_out = nullptr) {
    KIDManifest kid;
    kid.schema = fed.schema;

    // An annotation has a gap as soon as one (sample, annotation) value is
    // missing anywhere; that is what forces a labeler to exist.
    std::map<std::string, bool> has_gap;
    for (const auto& a : fed.schema.annotations) {
        bool gap = false;
        for (const auto& d : fed.datasets) {
            for (const auto& s : d.samples)
                if (!s.label(a.name)) {
                    gap = true;
                    break;
                }
            if (gap) break;
        }
        has_gap[a.name] = gap;
        if (!gap) continue;
        if (a.kind == AnnotationKind::categorical && !teams.count(a.name))
            fail(ErrorKind::config, "annotation '" + a.name + "' has gaps but no team");
        if (a.kind == AnnotationKind::cluster && !cluster_model)
            fail(ErrorKind::config, "annotation '" + a.name + "' has gaps but no cluster model");
    }

    // Cluster-kind gaps first: sequential by contract.
    std::map<std::string, std::map<std::string, ClusterAssignment>> cluster_fill;  // annot -> global id
    std::string cluster_version;
    for (const auto& a : fed.schema.annotations) {
        if (a.kind != AnnotationKind::cluster || !has_gap[a.name]) continue;
        ClusterModel model = *cluster_model;
        for (const auto& d : fed.datasets) {
            std::vector<std::string> ids;
            std::vector<const SampleRecord*> rows;
            for (const auto& s : d.samples)
                if (!s.label(a.name)) rows.push_back(&s);
            if (rows.empty()) continue;
            Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), source.dimension());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                ids.push_back(rows[i]->sample_id);
                X.row(static_cast<Eigen::Index>(i)) =
                    source.features(d.dataset_id, *rows[i]).transpose();
            }
            TransferResult res = transfer_make_clusters(model, d.dataset_id, ids, X);
            for (const auto& asg : res.assignments)
                cluster_fill[a.name][d.dataset_id + "/" + asg.sample_id] = asg;
            model = std::move(res.model);
        }
        cluster_version = cluster_model_version(model);
        if (augmented_out) *augmented_out = model;
    }

    // Team versions computed once.
    std::map<std::string, std::string> versions;
    for (const auto& [name, team] : teams) versions[name] = team_version(team);

    for (const auto& d : fed.datasets) {
        std::size_t base = kid.records.size();
        kid.records.resize(base + d.samples.size());
        parallel_for(d.samples.size(), workers, [&](std::size_t i) {
            const SampleRecord& s = d.samples[i];
            KIDRecord rec;
            rec.sample_id = d.dataset_id + "/" + s.sample_id;
            rec.source_dataset = d.dataset_id;
            rec.image = s.image;
            rec.feature_ref = s.feature_ref;
            for (const auto& a : kid.schema.annotations) {
                AnnotationEntry entry;
                auto orig = s.label(a.name);
                if (orig) {
                    entry.value = *orig;
                    entry.source = ProvenanceSource::original;
                } else if (a.kind == AnnotationKind::categorical) {
                    const Team& team = teams.at(a.name);
                    ViewSet views = source.views(d.dataset_id, s, team.quality_factors);
                    LabelDecision dec =
                        label_sample(team, views.views.front(), views, s.sample_id);
                    entry.value = dec.label;
                    entry.source = dec.assigned() ? ProvenanceSource::inferred
                                                  : ProvenanceSource::abstained;
                    entry.agreement = dec.winning_fraction;
                    entry.threshold = dec.threshold;
                    entry.team_version = versions.at(a.name);
                } else {
                    const ClusterAssignment& asg = cluster_fill.at(a.name).at(rec.sample_id);
                    entry.value = asg.cluster_id;
                    entry.source = ProvenanceSource::inferred;
                    entry.team_version = cluster_version;
                }
                rec.annotations[a.name] = std::move(entry);
            }
            kid.records[base + i] = std::move(rec);
        });
    }

    for (const auto& rec : kid.records) {
        for (const auto& [name, entry] : rec.annotations) {
            auto& counts = kid.provenance_summary[name];
            switch (entry.source) {
                case ProvenanceSource::original: ++counts.original; break;
                case ProvenanceSource::inferred: ++counts.inferred; break;
                case ProvenanceSource::abstained: ++counts.abstained; break;
            }
        }
    }
    return kid;
}

// Per-annotation and per-source-dataset provenance breakdown.
struct KidStats {
    std::map<std::string, ProvenanceCounts> per_annotation;
    std::map<std::string, std::map<std::string, ProvenanceCounts>> per_dataset;
};

inline KidStats kid_stats(const KIDManifest& kid) {
    KidStats stats;
    for (const auto& rec : kid.records) {
        for (const auto& [name, entry] : rec.annotations) {
            auto bump = [&](ProvenanceCounts& c) {
                switch (entry.source) {
                    case ProvenanceSource::original: ++c.original; break;
                    case ProvenanceSource::inferred: ++c.inferred; break;
                    case ProvenanceSource::abstained: ++c.abstained; break;
                }
            };
            bump(stats.per_annotation[name]);
            bump(stats.per_dataset[rec.source_dataset][name]);
        }
    }
    return stats;
}

inline json kid_stats_to_json(const KidStats& stats) {
    json j;
    auto counts_json = [](const ProvenanceCounts& c) {
        return json{{"original", c.original},
                    {"inferred", c.inferred},
                    {"abstained", c.abstained},
                    {"coverage", c.coverage()}};
    };
    for (const auto& [name, c] : stats.per_annotation) j["annotations"][name] = counts_json(c);
    for (const auto& [ds, per] : stats.per_dataset)
        for (const auto& [name, c] : per) j["datasets"][ds][name] = counts_json(c);
    return j;
}

// ---------------------------------------------------------------------------
// Export: the input manifest format plus a "provenance" object per record,
// so a KID file parses back as an ordinary dataset manifest that declares
// every schema annotation.

inline void write_kid(const KIDManifest& kid, std::ostream& out,
                      const std::string& dataset_id = "kid") {
    json header;
    header["dataset_id"] = dataset_id;
    json declared = json::array();
    for (const auto& a : kid.schema.annotations) declared.push_back(a.name);
    header["declared_annotations"] = declared;
    header["split_seed"] = 0;
    header["build_metadata"] = kid.build_metadata;
    json summary;
    for (const auto& [name, c] : kid.provenance_summary)
        summary[name] = {{"original", c.original},
                         {"inferred", c.inferred},
                         {"abstained", c.abstained}};
    header["provenance_summary"] = summary;
    out << header.dump() << "\n";

    for (const auto& rec : kid.records) {
        json j;
        j["sample_id"] = rec.sample_id;
        j["source_dataset"] = rec.source_dataset;
        j["image"] = rec.image ? json(*rec.image) : json(nullptr);
        j["feature_ref"] = rec.feature_ref ? json(*rec.feature_ref) : json(nullptr);
        json ann = json::object();
        json prov = json::object();
        for (const auto& [name, entry] : rec.annotations) {
            ann[name] = entry.value ? json(*entry.value) : json(nullptr);
            json p;
            p["source"] = to_string(entry.source);
            if (entry.agreement) p["agreement"] = *entry.agreement;
            if (entry.threshold) p["threshold"] = *entry.threshold;
            if (entry.team_version) p["team_version"] = *entry.team_version;
            prov[name] = p;
        }
        j["annotations"] = ann;
        j["provenance"] = prov;
        out << j.dump() << "\n";
    }
}

inline void write_kid_file(const KIDManifest& kid, const std::filesystem::path& path,
                           const std::string& dataset_id = "kid") {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write KID manifest " + path.string());
    write_kid(kid, out, dataset_id);
}

}  // namespace kidforge
