#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kidforge/common.hpp"
#include "kidforge/schema.hpp"

namespace kidforge {

using FeatureVector = Eigen::VectorXd;

// Feature views of one sample: the original plus one view per compression
// quality factor, in the order requested.
struct ViewSet {
    std::vector<FeatureVector> views;
    std::vector<int> quality_factors;  // parallel to views[1..]
};

// ---------------------------------------------------------------------------
// Feature table: text format, one header line "dim=N" followed by
// "<sample_id> v1 ... vN" per row. Values round-trip exactly through
// format_double.

struct FeatureTable {
    Eigen::Index dimension = 0;
    std::map<std::string, FeatureVector> rows;

    const FeatureVector& at(const std::string& sample_id) const {
        auto it = rows.find(sample_id);
        if (it == rows.end())
            fail(ErrorKind::coverage, "feature table has no row for sample '" + sample_id + "'");
        return it->second;
    }
};

inline FeatureTable parse_feature_table(std::istream& in) {
    FeatureTable table;
    std::string line;
    int line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view sv = trim(line);
        if (sv.empty() || sv.front() == '#') continue;
        if (!have_header) {
            if (sv.substr(0, 4) != "dim=")
                fail(ErrorKind::parse, "feature table must start with 'dim=N'");
            long dim = parse_long(sv.substr(4));
            if (dim <= 0) fail(ErrorKind::parse, "feature table dimension must be positive");
            table.dimension = static_cast<Eigen::Index>(dim);
            have_header = true;
            continue;
        }
        std::istringstream row(std::string{sv});
        std::string id;
        row >> id;
        FeatureVector v(table.dimension);
        std::string tok;
        Eigen::Index i = 0;
        while (row >> tok) {
            if (i >= table.dimension)
                fail(ErrorKind::shape, "row '" + id + "' has more than " +
                                           std::to_string(table.dimension) + " values");
            double x = parse_double(tok);
            if (!std::isfinite(x))
                fail(ErrorKind::format, "row '" + id + "' has a non-finite value");
            v[i++] = x;
        }
        if (i != table.dimension)
            fail(ErrorKind::shape, "row '" + id + "' has " + std::to_string(i) + " values, want " +
                                       std::to_string(table.dimension));
        if (table.rows.count(id)) fail(ErrorKind::parse, "duplicate feature row '" + id + "'");
        table.rows.emplace(std::move(id), std::move(v));
    }
    if (!have_header) fail(ErrorKind::parse, "feature table is empty");
    return table;
}

inline FeatureTable load_feature_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open feature table " + path.string());
    return parse_feature_table(in);
}

// Loads a table and checks it covers every manifest sample whose feature_ref
// points at this file (the ref may be the full path or just the filename).
inline FeatureTable load_feature_table(const std::filesystem::path& path,
                                       const DatasetManifest& manifest) {
    FeatureTable table = load_feature_table(path);
    std::string full = path.string();
    std::string base = path.filename().string();
    for (const auto& s : manifest.samples) {
        if (!s.feature_ref) continue;
        if (*s.feature_ref != full && *s.feature_ref != base) continue;
        if (!table.rows.count(s.sample_id))
            fail(ErrorKind::coverage, "feature table " + full + " is missing sample '" +
                                          s.sample_id + "' of dataset '" + manifest.dataset_id +
                                          "'");
    }
    return table;
}

inline void write_feature_table(const FeatureTable& table, std::ostream& out) {
    out << "dim=" << table.dimension << "\n";
    for (const auto& [id, v] : table.rows) {
        out << id;
        for (Eigen::Index i = 0; i < v.size(); ++i) out << " " << format_double(v[i]);
        out << "\n";
    }
}

inline void save_feature_table(const FeatureTable& table, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write feature table " + path.string());
    write_feature_table(table, out);
}

// Mean of the given vectors, summed left to right in the order passed.
// Callers that need determinism pass sample_id-sorted input.
inline FeatureVector dataset_center(const std::vector<FeatureVector>& features) {
    if (features.empty()) fail(ErrorKind::empty_input, "dataset_center of zero vectors");
    FeatureVector sum = features.front();
    for (std::size_t i = 1; i < features.size(); ++i) {
        if (features[i].size() != sum.size())
            fail(ErrorKind::shape, "dataset_center: mixed dimensions " +
                                       std::to_string(features[i].size()) + " vs " +
                                       std::to_string(sum.size()));
        sum += features[i];
    }
    return sum / static_cast<double>(features.size());
}

// ---------------------------------------------------------------------------
// FeatureSource: where per-sample features come from. Table-backed sources
// have a single view (no pixels to recompress); image-backed sources (see
// image.hpp) add compressed views on request.

class FeatureSource {
  public:
    virtual ~FeatureSource() = default;

    virtual FeatureVector features(const std::string& dataset_id, const SampleRecord& sample) = 0;

    // Original view first, then one view per quality factor.
    virtual ViewSet views(const std::string& dataset_id, const SampleRecord& sample,
                          const std::vector<int>& quality_factors) = 0;

    virtual Eigen::Index dimension() const = 0;

    // True when compression views are real (re-encoded pixels) rather than
    // copies of the original vector.
    virtual bool supports_compression() const { return false; }
};

class TableFeatureSource : public FeatureSource {
  public:
    TableFeatureSource() = default;

    void add_table(const std::string& key, FeatureTable table) {
        if (dim_ == 0)
            dim_ = table.dimension;
        else if (dim_ != table.dimension)
            fail(ErrorKind::shape, "feature table '" + key + "' has dimension " +
                                       std::to_string(table.dimension) + ", expected " +
                                       std::to_string(dim_));
        tables_[key] = std::move(table);
    }

    FeatureVector features(const std::string& dataset_id, const SampleRecord& sample) override {
        return lookup(dataset_id, sample);
    }

    // A feature table has no pixels to recompress: compression views are
    // unavailable and the ViewSet degenerates to the single original vector,
    // whatever quality factors were requested.
    ViewSet views(const std::string& dataset_id, const SampleRecord& sample,
                  const std::vector<int>& /*quality_factors*/) override {
        ViewSet vs;
        vs.views.push_back(lookup(dataset_id, sample));
        return vs;
    }

    Eigen::Index dimension() const override { return dim_; }

  private:
    const FeatureVector& lookup(const std::string& dataset_id, const SampleRecord& sample) const {
        if (!sample.feature_ref)
            fail(ErrorKind::coverage, "sample '" + dataset_id + "/" + sample.sample_id +
                                          "' has no feature_ref");
        auto it = tables_.find(*sample.feature_ref);
        if (it == tables_.end())
            fail(ErrorKind::coverage, "no feature table loaded for ref '" + *sample.feature_ref +
                                          "' (sample " + dataset_id + "/" + sample.sample_id + ")");
        return it->second.at(sample.sample_id);
    }

    std::map<std::string, FeatureTable> tables_;
    Eigen::Index dim_ = 0;
};

}  // namespace kidforge
