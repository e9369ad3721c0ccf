#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "kidforge/common.hpp"
#include "kidforge/expert.hpp"
#include "kidforge/features.hpp"
#include "kidforge/image.hpp"
#include "kidforge/schema.hpp"

namespace kidforge {

struct SyntheticSpec {
    int num_datasets = 3;
    std::string annotation = "label";
    AnnotationKind kind = AnnotationKind::categorical;
    int num_classes = 8;             // classes (categorical) or total makes (cluster)
    double overlap_fraction = 0.5;   // cluster kind: fraction of a dataset's makes shared
    int samples_per_dataset = 240;
    int feature_dim = 16;
    double class_separation = 4.0;   // prototype spacing (pixel units in image mode)
    double domain_shift = 0.5;       // per-dataset affine shift magnitude
    double noise = 0.25;             // per-coordinate sigma (fraction of 255 in image mode)
    bool image_mode = false;
    std::uint64_t seed = 0;

    void check() const {
        if (num_datasets < 1) fail(ErrorKind::config, "num_datasets must be >= 1");
        if (num_classes < 2) fail(ErrorKind::config, "need >= 2 classes");
        if (samples_per_dataset < 1) fail(ErrorKind::config, "samples_per_dataset must be >= 1");
        if (class_separation < 0 || domain_shift < 0 || noise < 0)
            fail(ErrorKind::config, "magnitudes must be >= 0");
        if (overlap_fraction < 0 || overlap_fraction > 1)
            fail(ErrorKind::config, "overlap_fraction must be in [0,1]");
        if (!image_mode && feature_dim < num_classes)
            fail(ErrorKind::config, "feature_dim must be >= class count");
        if (image_mode && num_classes > 8)
            fail(ErrorKind::config, "image mode supports at most 8 classes");
    }
};

struct SyntheticFederation {
    Federation federation;
    std::map<std::string, FeatureTable> tables;  // feature mode, keyed by feature_ref
    std::shared_ptr<FeatureSource> source;
    std::shared_ptr<MemoryImageSource> image_source;  // set in image mode
};

namespace detail {

inline std::string padded(const char* prefix, int i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%0*d", prefix, width, i);
    return buf;
}

// Per-dataset affine shift: one seeded Givens rotation (random coordinate
// plane, angle uniform in +-min(domain_shift, pi)) plus a translation with
// i.i.d. N(0, domain_shift^2) coordinates.
struct AffineShift {
    Eigen::Index axis_a = 0, axis_b = 1;
    double cos_t = 1.0, sin_t = 0.0;
    Eigen::VectorXd translation;

    static AffineShift draw(std::mt19937_64& rng, Eigen::Index dim, double magnitude) {
        AffineShift s;
        s.axis_a = static_cast<Eigen::Index>(rand_index(rng, static_cast<std::size_t>(dim)));
        s.axis_b = static_cast<Eigen::Index>(rand_index(rng, static_cast<std::size_t>(dim - 1)));
        if (s.axis_b >= s.axis_a) ++s.axis_b;
        double bound = std::min(magnitude, 3.141592653589793);
        double theta = (2.0 * rand_unit(rng) - 1.0) * bound;
        s.cos_t = std::cos(theta);
        s.sin_t = std::sin(theta);
        s.translation.resize(dim);
        for (Eigen::Index i = 0; i < dim; ++i) s.translation[i] = rand_normal(rng) * magnitude;
        return s;
    }

    FeatureVector apply(FeatureVector x) const {
        double a = x[axis_a], b = x[axis_b];
        x[axis_a] = a * cos_t - b * sin_t;
        x[axis_b] = a * sin_t + b * cos_t;
        return x + translation;
    }
};

// Class-colored 64x64 noise tile. Appearance stack, per dataset: an RGB
// color cast, a 1-pixel alternating chroma pattern on a third of the 2x2
// pixel blocks (+-pattern_rgb by pixel parity; pattern_rgb lies in the
// luma-neutral plane, so JPEG chroma subsampling erases it at any quality
// factor), and per-pixel Gaussian noise. The class signal is the base
// color. Masking the pattern to a third of the blocks keeps the clean base
// color in every training histogram, so a de-patterned view of a foreign
// tile still lands inside the support a member trained on.
inline cv::Mat render_tile(const double base_rgb[3], const double cast_rgb[3],
                           const double pattern_rgb[3], int chroma_phase, double noise_sigma,
                           std::mt19937_64& rng) {
    cv::Mat img(kFeaturizerSide, kFeaturizerSide, CV_8UC3);
    for (int y = 0; y < kFeaturizerSide; ++y) {
        cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
        for (int x = 0; x < kFeaturizerSide; ++x) {
            bool on = ((x >> 1) + (y >> 1)) % 3 == 0;
            double sign = !on ? 0.0 : ((x + y + chroma_phase) & 1) ? 1.0 : -1.0;
            for (int c = 0; c < 3; ++c) {
                double v = std::round(base_rgb[c] + cast_rgb[c] + sign * pattern_rgb[c] +
                                      rand_normal(rng) * noise_sigma);
                if (v < 0) v = 0;
                if (v > 255) v = 255;
                row[x][2 - c] = static_cast<unsigned char>(v);  // Mat stores BGR
            }
        }
    }
    return img;
}

// Orthonormal basis of the plane orthogonal to the BT.601 luma weights
// (0.299, 0.587, 0.114); chroma patterns are drawn from this plane so they
// carry no luminance and die under chroma subsampling.
inline void luma_neutral_pattern(double angle, double amp, double out[3]) {
    static const double u1[3] = {0.8910617, -0.4538798, 0.0};
    static const double u2[3] = {0.0773886, 0.1519413, -0.9853560};
    for (int c = 0; c < 3; ++c) out[c] = amp * (std::cos(angle) * u1[c] + std::sin(angle) * u2[c]);
}

}  // namespace detail

// Deterministic synthetic federation. Feature mode: class prototypes are
// simplex vertices (class_separation * e_c), each dataset applies its own
// seeded affine shift, and samples are shifted prototypes plus N(0,
// noise^2) coordinates. Cluster mode assigns each dataset a contiguous
// window of makes with the requested overlap. Image mode renders class-
// colored noise tiles instead of feature rows (see render_tile).
inline SyntheticFederation generate_synthetic_federation(const SyntheticSpec& spec) {
    spec.check();
    SyntheticFederation out;

    const int C = spec.num_classes;
    std::vector<std::string> labels;
    for (int c = 0; c < C; ++c)
        labels.push_back(detail::padded(spec.kind == AnnotationKind::categorical ? "c" : "m", c, 2));

    AnnotationDef def;
    def.name = spec.annotation;
    def.kind = spec.kind;
    if (spec.kind == AnnotationKind::categorical) def.label_set = labels;
    out.federation.schema.annotations.push_back(def);

    // Cluster mode: dataset d sees makes [start_d, start_d + window).
    int window = C;
    double step = 0;
    if (spec.kind == AnnotationKind::cluster && spec.num_datasets > 1) {
        double w = static_cast<double>(C) /
                   (1.0 + (spec.num_datasets - 1) * (1.0 - spec.overlap_fraction));
        window = std::max(1, static_cast<int>(std::lround(w)));
        step = window * (1.0 - spec.overlap_fraction);
    }

    auto table_source = std::make_shared<TableFeatureSource>();
    auto image_source = std::make_shared<MemoryImageSource>();

    // Image-mode palette: the 8 RGB cube corners around mid-gray, in an
    // order scrambled against the label alphabet so lexicographic tie-breaks
    // carry no brightness information.
    static const int kCorner[8][3] = {{1, -1, 1},  {-1, 1, -1}, {1, 1, 1},  {-1, -1, -1},
                                      {-1, 1, 1},  {1, 1, -1},  {-1, -1, 1}, {1, -1, -1}};

    for (int d = 0; d < spec.num_datasets; ++d) {
        std::string ds_id = detail::padded("synth", d, 1);
        DatasetManifest m;
        m.dataset_id = ds_id;
        m.declared_annotations = {spec.annotation};
        m.split_seed = derive_seed(spec.seed, {"split", ds_id});

        int first_class = 0, n_classes = C;
        if (spec.kind == AnnotationKind::cluster) {
            first_class = std::min(static_cast<int>(std::lround(d * step)), C - window);
            n_classes = window;
        }

        auto rng = make_rng(spec.seed, {"ds", ds_id});
        FeatureTable table;

        if (spec.image_mode) {
            // Dataset appearance parameters.
            double cast[3];
            double norm = 0;
            for (double& c : cast) {
                c = rand_normal(rng);
                norm += c * c;
            }
            norm = std::sqrt(std::max(norm, 1e-12));
            // Two damage channels: the cast survives every view, while the
            // luma-neutral pattern dies under chroma subsampling, so the
            // compression stages have real headroom. The pattern angle, not
            // its amplitude, carries most of the pattern mismatch;
            // near-equal amplitudes keep member centers comparably spread,
            // which keeps center distances honest.
            for (double& c : cast) c = c / norm * (40.0 * spec.domain_shift);
            double chroma_angle = rand_unit(rng) * 6.283185307179586;
            double chroma_amp = 140.0 * spec.domain_shift * (0.8 + 0.4 * rand_unit(rng));
            double pattern[3];
            detail::luma_neutral_pattern(chroma_angle, chroma_amp, pattern);
            int chroma_phase = static_cast<int>(rand_index(rng, 2));

            for (int i = 0; i < spec.samples_per_dataset; ++i) {
                int c = first_class + i % n_classes;
                // Per-sample shade jitter at half the separation keeps a
                // borderline band alive, so cross-dataset errors come in
                // graded per-sample form instead of whole classes flipping.
                double base[3];
                for (int ch = 0; ch < 3; ++ch)
                    base[ch] = 128.0 + kCorner[c][ch] * spec.class_separation +
                               rand_normal(rng) * 0.5 * spec.class_separation;
                cv::Mat tile = detail::render_tile(base, cast, pattern, chroma_phase,
                                                   spec.noise * 255.0, rng);
                SampleRecord rec;
                rec.sample_id = detail::padded("s", i, 4);
                rec.image = ds_id + "/" + rec.sample_id + ".png";
                rec.annotations[spec.annotation] = labels[static_cast<std::size_t>(c)];
                image_source->add(ds_id, rec.sample_id, std::move(tile));
                m.samples.push_back(std::move(rec));
            }
        } else {
            detail::AffineShift shift =
                detail::AffineShift::draw(rng, spec.feature_dim, spec.domain_shift);
            std::vector<FeatureVector> protos;
            for (int c = 0; c < C; ++c) {
                FeatureVector p = FeatureVector::Zero(spec.feature_dim);
                p[c] = spec.class_separation;
                protos.push_back(shift.apply(p));
            }
            table.dimension = spec.feature_dim;
            std::string ref = ds_id + ".ftab";
            for (int i = 0; i < spec.samples_per_dataset; ++i) {
                int c = first_class + i % n_classes;
                FeatureVector x = protos[static_cast<std::size_t>(c)];
                for (Eigen::Index k = 0; k < x.size(); ++k) x[k] += rand_normal(rng) * spec.noise;
                SampleRecord rec;
                rec.sample_id = detail::padded("s", i, 4);
                rec.feature_ref = ref;
                rec.annotations[spec.annotation] = labels[static_cast<std::size_t>(c)];
                table.rows.emplace(rec.sample_id, std::move(x));
                m.samples.push_back(std::move(rec));
            }
            out.tables[ref] = table;
            table_source->add_table(ref, std::move(table));
        }
        out.federation.datasets.push_back(std::move(m));
    }

    if (spec.image_mode) {
        out.image_source = image_source;
        out.source = image_source;
    } else {
        out.source = table_source;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Benchmarks used by the evaluation harness and the acceptance suite. All
// parameters are pinned here; changing them invalidates recorded results.

// Default feature-mode benchmark: 3 sources, 8 classes.
inline SyntheticSpec default_feature_benchmark(std::uint64_t seed) {
    SyntheticSpec spec;
    spec.num_datasets = 3;
    spec.annotation = "label";
    spec.num_classes = 8;
    spec.samples_per_dataset = 300;
    spec.feature_dim = 16;
    spec.class_separation = 4.0;
    spec.domain_shift = 0.6;
    spec.noise = 0.9;
    spec.seed = seed;
    return spec;
}

// Default image-mode benchmark for the ablation ladder: 3 sources, 8
// classes, appearance gap from color casts + chroma artifacts, tuned so the
// no-mitigation baseline lands in the 0.75-0.90 accuracy band.
inline SyntheticSpec default_image_benchmark(std::uint64_t seed) {
    SyntheticSpec spec;
    spec.num_datasets = 3;
    spec.annotation = "label";
    spec.num_classes = 8;
    spec.samples_per_dataset = 300;
    spec.class_separation = 46.0;
    spec.domain_shift = 0.7;
    spec.noise = 0.1;
    spec.image_mode = true;
    spec.seed = seed;
    return spec;
}

// A labeling target with an injected out-of-distribution half. The target
// dataset declares nothing (so it never joins a team); ground truth comes
// back separately. OOD samples carry an extra translation of ood_sigmas *
// noise per coordinate (random signs), i.e. >= ood_sigmas standard
// deviations away from every in-distribution center in every coordinate.
struct OodBenchmark {
    SyntheticFederation synthetic;
    std::string target_id = "target0";
    std::map<std::string, std::string> ground_truth;  // target sample -> label
    std::set<std::string> ood_ids;
};

inline OodBenchmark make_ood_benchmark(const SyntheticSpec& spec, double ood_sigmas = 6.0) {
    if (spec.kind != AnnotationKind::categorical || spec.image_mode)
        fail(ErrorKind::config, "OOD benchmark is feature-mode categorical only");
    OodBenchmark bench;
    bench.synthetic = generate_synthetic_federation(spec);

    const int C = spec.num_classes;
    std::vector<std::string> labels;
    for (int c = 0; c < C; ++c) labels.push_back(detail::padded("c", c, 2));

    DatasetManifest target;
    target.dataset_id = bench.target_id;
    target.split_seed = derive_seed(spec.seed, {"split", bench.target_id});

    auto rng = make_rng(spec.seed, {"ds", bench.target_id});
    detail::AffineShift shift = detail::AffineShift::draw(rng, spec.feature_dim, spec.domain_shift);
    std::vector<FeatureVector> protos;
    for (int c = 0; c < C; ++c) {
        FeatureVector p = FeatureVector::Zero(spec.feature_dim);
        p[c] = spec.class_separation;
        protos.push_back(shift.apply(p));
    }
    Eigen::VectorXd ood_offset(spec.feature_dim);
    for (Eigen::Index k = 0; k < ood_offset.size(); ++k)
        ood_offset[k] = (rand_unit(rng) < 0.5 ? -1.0 : 1.0) * ood_sigmas * spec.noise;

    FeatureTable table;
    table.dimension = spec.feature_dim;
    std::string ref = bench.target_id + ".ftab";
    for (int i = 0; i < spec.samples_per_dataset; ++i) {
        int c = i % C;
        bool ood = i >= spec.samples_per_dataset / 2;
        FeatureVector x = protos[static_cast<std::size_t>(c)];
        for (Eigen::Index k = 0; k < x.size(); ++k) x[k] += rand_normal(rng) * spec.noise;
        if (ood) x += ood_offset;
        SampleRecord rec;
        rec.sample_id = detail::padded("s", i, 4);
        rec.feature_ref = ref;
        bench.ground_truth[rec.sample_id] = labels[static_cast<std::size_t>(c)];
        if (ood) bench.ood_ids.insert(rec.sample_id);
        table.rows.emplace(rec.sample_id, std::move(x));
        target.samples.push_back(std::move(rec));
    }
    bench.synthetic.tables[ref] = table;
    static_cast<TableFeatureSource&>(*bench.synthetic.source).add_table(ref, std::move(table));
    bench.synthetic.federation.datasets.push_back(std::move(target));
    return bench;
}

// Make-clustering benchmark: 12 makes, two source datasets whose make sets
// overlap 50%, well-separated prototypes, plus a target over all makes with
// ground truth in `target.labels`. shatter_make >= 0 scatters that make's
// target samples onto distinct far-away axes so no cluster can hold a
// majority of them.
struct ClusterBenchmark {
    std::vector<LabeledSet> sources;
    LabeledSet target;  // labels = hidden ground-truth makes
};

inline ClusterBenchmark make_cluster_benchmark(std::uint64_t seed, int shatter_make = -1) {
    const int M = 12;
    const int dim = 24;
    const double separation = 10.0;
    const double noise = 0.3;
    const int per_make = 6;

    std::vector<std::string> makes;
    for (int m = 0; m < M; ++m) makes.push_back(detail::padded("m", m, 2));

    auto build = [&](const std::string& ds_id, int first, int count, bool target) {
        LabeledSet set;
        set.dataset_id = ds_id;
        set.split_seed = derive_seed(seed, {"split", ds_id});
        auto rng = make_rng(seed, {"ds", ds_id});
        int n = count * per_make;
        set.features.resize(n, dim);
        int shattered_seen = 0;
        for (int i = 0; i < n; ++i) {
            int m = first + i % count;
            FeatureVector x = FeatureVector::Zero(dim);
            x[m] = separation;
            for (Eigen::Index k = 0; k < dim; ++k) x[k] += rand_normal(rng) * noise;
            if (target && m == shatter_make) {
                // Distinct far-away axis per shattered sample: pairwise and
                // centroid distances all far exceed any calibrated tau.
                x[(m + 1 + shattered_seen) % dim] += separation * 40.0 * (1 + shattered_seen);
                ++shattered_seen;
            }
            set.ids.push_back(detail::padded("s", i, 4));
            set.labels.push_back(makes[static_cast<std::size_t>(m)]);
            set.features.row(i) = x.transpose();
        }
        return set;
    };

    ClusterBenchmark bench;
    bench.sources.push_back(build("alpha", 0, 8, false));   // m00..m07
    bench.sources.push_back(build("bravo", 4, 8, false));   // m04..m11
    bench.target = build("target", 0, M, true);
    return bench;
}

// ---------------------------------------------------------------------------
// Disk export for the synth CLI subcommand.

inline void write_synthetic_federation(const SyntheticFederation& synth,
                                       const std::filesystem::path& dir,
                                       const std::string& artifact_comment = {}) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "schema.json");
        if (!out) fail(ErrorKind::io, "cannot write schema.json");
        json j = schema_to_json(synth.federation.schema);
        if (!artifact_comment.empty()) j["_meta"] = {{"run", artifact_comment}};
        out << j.dump(2) << "\n";
    }
    for (const auto& d : synth.federation.datasets) {
        std::ofstream out(dir / (d.dataset_id + ".manifest"));
        if (!out) fail(ErrorKind::io, "cannot write manifest for " + d.dataset_id);
        if (!artifact_comment.empty()) out << "# " << artifact_comment << "\n";
        write_manifest(d, out);
        if (synth.image_source) {
            for (const auto& s : d.samples) {
                if (!s.image) continue;
                std::filesystem::path p = dir / *s.image;
                std::filesystem::create_directories(p.parent_path());
                std::vector<unsigned char> png =
                    encode_png(synth.image_source->mat(d.dataset_id, s.sample_id));
                std::ofstream img(p, std::ios::binary);
                if (!img) fail(ErrorKind::io, "cannot write image " + p.string());
                img.write(reinterpret_cast<const char*>(png.data()),
                          static_cast<std::streamsize>(png.size()));
            }
        }
    }
    for (const auto& [ref, table] : synth.tables) {
        std::ofstream out(dir / ref);
        if (!out) fail(ErrorKind::io, "cannot write feature table " + ref);
        if (!artifact_comment.empty()) out << "# " << artifact_comment << "\n";
        write_feature_table(table, out);
    }
}

}  // namespace kidforge
