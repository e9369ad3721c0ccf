#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kidforge/common.hpp"
#include "kidforge/expert.hpp"
#include "kidforge/features.hpp"

namespace kidforge {

// Make labels are dataset-local, so known cluster ids are namespaced
// "<dataset_id>:<make>". Novel clusters opened at transfer time are named
// after their founding sample: "novel:<dataset_id>/<sample_id>".
struct ClusterModel {
    std::map<std::string, FeatureVector> centroids;
    std::map<std::string, std::optional<std::string>> known;  // cluster_id -> make label
    double tau = 0.0;

    Eigen::Index dim() const {
        return centroids.empty() ? 0 : centroids.begin()->second.size();
    }
};

struct ClusterAssignment {
    std::string sample_id;
    std::string cluster_id;
    double distance = 0.0;
    bool novel = false;  // cluster opened during this labeling run
};

namespace detail {

struct UnionFind {
    std::vector<std::size_t> parent;

    explicit UnionFind(std::size_t n) : parent(n) {
        std::iota(parent.begin(), parent.end(), 0);
    }

    std::size_t find(std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }

    void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
};

}  // namespace detail

// Builds one centroid per (dataset, make), then merges makes from different
// datasets whose centroids sit closer than tau (union-find over the merge
// graph; chains merge transitively). A merged cluster keeps the
// lexicographically smallest cluster_id and its make label; its centroid is
// the mean over all member samples. When tau is not given it defaults to
// the 95th percentile (nearest-rank) of intra-make sample-to-centroid
// distances, floored at 1e-12 to stay positive on exact-point fixtures.
inline ClusterModel fit_make_centroids(const std::vector<LabeledSet>& labeled,
                                       std::optional<double> tau = std::nullopt) {
    if (labeled.empty()) fail(ErrorKind::empty_input, "fit_make_centroids: no datasets");
    for (const auto& d : labeled)
        if (d.size() == 0)
            fail(ErrorKind::empty_input,
                 "fit_make_centroids: dataset '" + d.dataset_id + "' has no labeled makes");

    // Group rows by namespaced make; maps keep everything sorted so the
    // result is independent of dataset order.
    std::map<std::string, std::vector<FeatureVector>> groups;
    std::map<std::string, std::string> make_of;
    for (const auto& d : labeled) {
        for (Eigen::Index i = 0; i < d.size(); ++i) {
            std::string cid = d.dataset_id + ":" + d.labels[static_cast<std::size_t>(i)];
            groups[cid].push_back(d.features.row(i).transpose());
            make_of[cid] = d.labels[static_cast<std::size_t>(i)];
        }
    }

    std::vector<std::string> ids;
    std::vector<FeatureVector> centroids;
    for (const auto& [cid, rows] : groups) {
        ids.push_back(cid);
        centroids.push_back(dataset_center(rows));
    }

    ClusterModel model;
    if (tau) {
        if (*tau <= 0) fail(ErrorKind::config, "tau must be > 0");
        model.tau = *tau;
    } else {
        std::vector<double> dists;
        for (std::size_t g = 0; g < ids.size(); ++g)
            for (const auto& row : groups[ids[g]]) dists.push_back((row - centroids[g]).norm());
        std::sort(dists.begin(), dists.end());
        std::size_t rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(dists.size())));
        if (rank > 0) --rank;
        model.tau = std::max(dists[rank], 1e-12);
    }

    detail::UnionFind uf(ids.size());
    auto dataset_of = [](const std::string& cid) { return cid.substr(0, cid.find(':')); };
    for (std::size_t a = 0; a < ids.size(); ++a)
        for (std::size_t b = a + 1; b < ids.size(); ++b) {
            if (dataset_of(ids[a]) == dataset_of(ids[b])) continue;  // same-dataset makes stay distinct
            if ((centroids[a] - centroids[b]).norm() < model.tau) uf.unite(a, b);
        }

    std::map<std::size_t, std::vector<std::size_t>> components;
    for (std::size_t g = 0; g < ids.size(); ++g) components[uf.find(g)].push_back(g);
    for (auto& [root, group] : components) {
        std::sort(group.begin(), group.end());  // indices follow sorted ids already
        const std::string& keep = ids[group.front()];
        std::vector<FeatureVector> rows;
        for (std::size_t g : group)
            for (const auto& row : groups[ids[g]]) rows.push_back(row);
        model.centroids[keep] = dataset_center(rows);
        model.known[keep] = make_of[keep];
    }
    return model;
}

struct TransferResult {
    std::vector<ClusterAssignment> assignments;
    // Input model plus any clusters opened during the pass; feeding it to a
    // second pass over other data keeps the label space coherent.
    ClusterModel model;
};

// Sequential single-pass online transfer in sample_id order: each sample
// joins its nearest centroid when the distance is <= tau (ties toward the
// smallest cluster_id), otherwise opens a novel cluster centered on itself.
// Novel centroids are fixed once opened, which makes re-running over
// already-assigned samples with the augmented model reproduce the same
// (cluster_id, distance) pairs.
inline TransferResult transfer_make_clusters(const ClusterModel& model,
                                             const std::string& dataset_id,
                                             const std::vector<std::string>& sample_ids,
                                             const Eigen::MatrixXd& features) {
    if (static_cast<Eigen::Index>(sample_ids.size()) != features.rows())
        fail(ErrorKind::shape, "transfer_make_clusters: ids/features mismatch");
    TransferResult res;
    res.model = model;

    std::vector<std::size_t> order(sample_ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return sample_ids[a] < sample_ids[b]; });

    for (std::size_t i : order) {
        FeatureVector x = features.row(static_cast<Eigen::Index>(i)).transpose();
        const std::string* best_id = nullptr;
        double best_d = 0.0;
        for (const auto& [cid, c] : res.model.centroids) {
            if (c.size() != x.size())
                fail(ErrorKind::shape, "transfer_make_clusters: dimension mismatch");
            double d = (x - c).norm();
            if (!best_id || d < best_d) {
                best_id = &cid;
                best_d = d;
            }
        }
        ClusterAssignment a;
        a.sample_id = sample_ids[i];
        if (best_id && best_d <= res.model.tau) {
            a.cluster_id = *best_id;
            a.distance = best_d;
            a.novel = false;
        } else {
            a.cluster_id = "novel:" + dataset_id + "/" + sample_ids[i];
            a.distance = 0.0;
            a.novel = true;
            res.model.centroids[a.cluster_id] = x;
            res.model.known[a.cluster_id] = std::nullopt;
        }
        res.assignments.push_back(std::move(a));
    }
    return res;
}

inline TransferResult transfer_make_clusters(const ClusterModel& model, const LabeledSet& data) {
    return transfer_make_clusters(model, data.dataset_id, data.ids, data.features);
}

// A make counts as detected iff some predicted cluster contains a strict
// majority of the make's samples AND the make is that cluster's unique
// plurality (strictly more samples than any other make in the cluster).
// Score = detected makes / total ground-truth makes. Depends only on the
// grouping, so it is invariant under cluster renaming.
inline double make_detection_score(const std::vector<ClusterAssignment>& assignments,
                                   const std::map<std::string, std::string>& ground_truth) {
    if (ground_truth.empty()) fail(ErrorKind::empty_input, "make_detection_score: no ground truth");
    std::map<std::string, std::map<std::string, long>> cluster_makes;  // cluster -> make -> count
    std::map<std::string, long> make_totals;
    for (const auto& [sid, make] : ground_truth) ++make_totals[make];
    for (const auto& a : assignments) {
        auto it = ground_truth.find(a.sample_id);
        if (it == ground_truth.end())
            fail(ErrorKind::coverage, "make_detection_score: no ground truth for sample '" +
                                          a.sample_id + "'");
        ++cluster_makes[a.cluster_id][it->second];
    }
    long detected = 0;
    for (const auto& [make, total] : make_totals) {
        bool hit = false;
        for (const auto& [cid, counts] : cluster_makes) {
            auto it = counts.find(make);
            if (it == counts.end()) continue;
            if (2 * it->second <= total) continue;  // needs strict majority of the make
            bool plurality = true;
            for (const auto& [other, c] : counts)
                if (other != make && c >= it->second) {
                    plurality = false;
                    break;
                }
            if (plurality) {
                hit = true;
                break;
            }
        }
        if (hit) ++detected;
    }
    return static_cast<double>(detected) / static_cast<double>(make_totals.size());
}

// ---------------------------------------------------------------------------
// Model persistence: header "tau=<t> dim=<n>", then one line per centroid
// "cluster_id make v1..vN" with "-" for clusters without a make label.
// Spaces and '%' inside ids/makes are percent-encoded to keep the format
// whitespace-delimited.

namespace detail {

inline std::string encode_token(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == ' ')
            out += "%20";
        else if (c == '%')
            out += "%25";
        else
            out += c;
    }
    return out;
}

inline std::string decode_token(const std::string& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '%' && i + 2 < s.size()) {
            if (s.compare(i, 3, "%20") == 0) {
                out += ' ';
                i += 2;
                continue;
            }
            if (s.compare(i, 3, "%25") == 0) {
                out += '%';
                i += 2;
                continue;
            }
        }
        out += s[i];
    }
    return out;
}

}  // namespace detail

inline void write_cluster_model(const ClusterModel& model, std::ostream& out) {
    out << "tau=" << format_double(model.tau) << " dim=" << model.dim() << "\n";
    for (const auto& [cid, c] : model.centroids) {
        out << detail::encode_token(cid);
        auto it = model.known.find(cid);
        if (it != model.known.end() && it->second)
            out << " " << detail::encode_token(*it->second);
        else
            out << " -";
        for (Eigen::Index i = 0; i < c.size(); ++i) out << " " << format_double(c[i]);
        out << "\n";
    }
}

inline ClusterModel parse_cluster_model(std::istream& in) {
    ClusterModel model;
    std::string line;
    bool have_header = false;
    Eigen::Index dim = 0;
    while (std::getline(in, line)) {
        std::string_view sv = trim(line);
        if (sv.empty() || sv.front() == '#') continue;
        if (!have_header) {
            std::istringstream hdr{std::string(sv)};
            std::string tau_tok, dim_tok;
            hdr >> tau_tok >> dim_tok;
            if (tau_tok.substr(0, 4) != "tau=" || dim_tok.substr(0, 4) != "dim=")
                fail(ErrorKind::parse, "cluster model: bad header '" + std::string(sv) + "'");
            model.tau = parse_double(std::string_view(tau_tok).substr(4));
            dim = static_cast<Eigen::Index>(parse_long(std::string_view(dim_tok).substr(4)));
            have_header = true;
            continue;
        }
        std::istringstream row{std::string(sv)};
        std::string cid, make;
        row >> cid >> make;
        cid = detail::decode_token(cid);
        FeatureVector v(dim);
        std::string tok;
        Eigen::Index i = 0;
        while (row >> tok) {
            if (i >= dim) fail(ErrorKind::shape, "cluster model: too many values for '" + cid + "'");
            v[i++] = parse_double(tok);
        }
        if (i != dim) fail(ErrorKind::shape, "cluster model: short row for '" + cid + "'");
        model.centroids[cid] = std::move(v);
        model.known[cid] = make == "-" ? std::optional<std::string>{}
                                       : std::optional<std::string>{detail::decode_token(make)};
    }
    if (!have_header) fail(ErrorKind::parse, "cluster model: empty file");
    return model;
}

inline void save_cluster_model(const ClusterModel& model, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write cluster model " + path.string());
    write_cluster_model(model, out);
}

inline ClusterModel load_cluster_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open cluster model " + path.string());
    return parse_cluster_model(in);
}

}  // namespace kidforge
