#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kidforge/common.hpp"
#include "kidforge/features.hpp"
#include "kidforge/schema.hpp"

namespace kidforge {

struct TrainConfig {
    int bag_count = 5;
    int max_epochs = 200;
    double learning_rate = 0.1;
    double finetune_lr_factor = 0.1;
    int batch_size = 64;
    int patience = 5;
    double min_delta = 1e-3;
    // Not a tuning knob so much as an ablation toggle: with early stopping
    // off, training runs exactly max_epochs and keeps the final parameters.
    bool early_stop = true;
    std::uint64_t seed = 0;

    void check() const {
        if (bag_count < 1) fail(ErrorKind::config, "bag_count must be >= 1");
        if (max_epochs < 1) fail(ErrorKind::config, "max_epochs must be >= 1");
        if (learning_rate <= 0 || finetune_lr_factor <= 0)
            fail(ErrorKind::config, "learning rates must be > 0");
        if (batch_size < 1) fail(ErrorKind::config, "batch_size must be >= 1");
        if (patience < 1) fail(ErrorKind::config, "patience must be >= 1");
    }
};

// One dataset's labeled rows for a single annotation, sample_id-sorted.
// Rows of `features` are parallel to ids/labels.
struct LabeledSet {
    std::string dataset_id;
    std::uint64_t split_seed = 0;
    std::vector<std::string> ids;
    std::vector<std::string> labels;
    Eigen::MatrixXd features;

    Eigen::Index size() const { return static_cast<Eigen::Index>(ids.size()); }
    Eigen::Index dim() const { return features.cols(); }
};

// Extracts the rows of `manifest` that carry a non-null label for the
// annotation, in sample_id order, resolving features through the source.
inline LabeledSet make_labeled_set(const DatasetManifest& manifest, const std::string& annotation,
                                   FeatureSource& source) {
    std::vector<const SampleRecord*> rows;
    for (const auto& s : manifest.samples)
        if (s.label(annotation)) rows.push_back(&s);
    std::sort(rows.begin(), rows.end(),
              [](const SampleRecord* a, const SampleRecord* b) { return a->sample_id < b->sample_id; });

    LabeledSet set;
    set.dataset_id = manifest.dataset_id;
    set.split_seed = manifest.split_seed;
    set.features.resize(static_cast<Eigen::Index>(rows.size()), source.dimension());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        set.ids.push_back(rows[i]->sample_id);
        set.labels.push_back(*rows[i]->label(annotation));
        FeatureVector v = source.features(manifest.dataset_id, *rows[i]);
        if (v.size() != set.features.cols())
            fail(ErrorKind::shape, "feature dimension mismatch for sample '" + rows[i]->sample_id +
                                       "': " + std::to_string(v.size()) + " vs " +
                                       std::to_string(set.features.cols()));
        set.features.row(static_cast<Eigen::Index>(i)) = v.transpose();
    }
    return set;
}

struct SplitIndices {
    std::vector<Eigen::Index> train, val, test;
};

inline SplitIndices split_indices(const LabeledSet& set) {
    SplitIndices out;
    for (Eigen::Index i = 0; i < set.size(); ++i) {
        switch (split_of(set.ids[static_cast<std::size_t>(i)], set.split_seed)) {
            case Split::train: out.train.push_back(i); break;
            case Split::val: out.val.push_back(i); break;
            case Split::test: out.test.push_back(i); break;
        }
    }
    return out;
}

inline LabeledSet subset(const LabeledSet& set, const std::vector<Eigen::Index>& rows) {
    LabeledSet out;
    out.dataset_id = set.dataset_id;
    out.split_seed = set.split_seed;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), set.features.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.ids.push_back(set.ids[static_cast<std::size_t>(rows[i])]);
        out.labels.push_back(set.labels[static_cast<std::size_t>(rows[i])]);
        out.features.row(static_cast<Eigen::Index>(i)) = set.features.row(rows[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear softmax classifier. class_labels are sorted lexicographically, so
// scanning scores with strict > ties toward the smallest index implements
// the project-wide lexicographic tie-break for free.

struct BaseClassifier {
    std::vector<std::string> class_labels;
    Eigen::MatrixXd weights;  // num_classes x feature_dim
    Eigen::VectorXd biases;   // num_classes

    Eigen::Index num_classes() const { return weights.rows(); }
    Eigen::Index feature_dim() const { return weights.cols(); }

    Eigen::VectorXd scores(const FeatureVector& x) const {
        if (x.size() != weights.cols())
            fail(ErrorKind::shape, "classifier expects dimension " + std::to_string(weights.cols()) +
                                       ", got " + std::to_string(x.size()));
        return weights * x + biases;
    }

    int predict_index(const FeatureVector& x) const {
        Eigen::VectorXd s = scores(x);
        int best = 0;
        for (int i = 1; i < s.size(); ++i)
            if (s[i] > s[best]) best = i;
        return best;
    }

    const std::string& predict(const FeatureVector& x) const {
        return class_labels[static_cast<std::size_t>(predict_index(x))];
    }
};

inline BaseClassifier zero_classifier(std::vector<std::string> class_labels, Eigen::Index dim) {
    BaseClassifier clf;
    clf.class_labels = std::move(class_labels);
    clf.weights = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(clf.class_labels.size()), dim);
    clf.biases = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(clf.class_labels.size()));
    return clf;
}

inline Eigen::MatrixXd softmax_rows(Eigen::MatrixXd logits) {
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::RowVectorXd row = logits.row(r);
        double m = row.maxCoeff();
        row = (row.array() - m).exp();
        logits.row(r) = row / row.sum();
    }
    return logits;
}

// Mean cross-entropy of the classifier over (X, y).
inline double softmax_loss(const BaseClassifier& clf, const Eigen::MatrixXd& X,
                           const std::vector<int>& y) {
    Eigen::MatrixXd P = softmax_rows(X * clf.weights.transpose() +
                                     Eigen::VectorXd::Ones(X.rows()) * clf.biases.transpose());
    double loss = 0;
    for (Eigen::Index r = 0; r < X.rows(); ++r)
        loss -= std::log(std::max(P(r, y[static_cast<std::size_t>(r)]), 1e-300));
    return loss / static_cast<double>(X.rows());
}

// One gradient step on the given batch rows.
inline void sgd_step(BaseClassifier& clf, const Eigen::MatrixXd& X, const std::vector<int>& y,
                     const std::vector<Eigen::Index>& batch, double lr) {
    const Eigen::Index bsz = static_cast<Eigen::Index>(batch.size());
    Eigen::MatrixXd Xb(bsz, X.cols());
    for (Eigen::Index i = 0; i < bsz; ++i) Xb.row(i) = X.row(batch[static_cast<std::size_t>(i)]);
    Eigen::MatrixXd P = softmax_rows(Xb * clf.weights.transpose() +
                                     Eigen::VectorXd::Ones(bsz) * clf.biases.transpose());
    for (Eigen::Index i = 0; i < bsz; ++i)
        P(i, y[static_cast<std::size_t>(batch[static_cast<std::size_t>(i)])]) -= 1.0;
    P /= static_cast<double>(bsz);
    clf.weights.noalias() -= lr * (P.transpose() * Xb);
    clf.biases.noalias() -= lr * P.colwise().sum().transpose();
}

// ---------------------------------------------------------------------------

struct Member {
    std::string member_id;  // home dataset_id
    std::vector<BaseClassifier> ensemble;
    FeatureVector center;
    double fscore = 0.0;
    int home_epochs_run = 0;
    int finetune_epochs_run = 0;
};

// Majority over per-view argmaxes for one classifier, then majority over
// classifiers. Ties resolve to the lexicographically smallest label at both
// levels (= smallest class index, labels being sorted).
inline int classifier_vote_index(const BaseClassifier& clf, const ViewSet& views) {
    std::vector<int> counts(static_cast<std::size_t>(clf.num_classes()), 0);
    for (const auto& v : views.views) ++counts[static_cast<std::size_t>(clf.predict_index(v))];
    int best = 0;
    for (int i = 1; i < static_cast<int>(counts.size()); ++i)
        if (counts[static_cast<std::size_t>(i)] > counts[static_cast<std::size_t>(best)]) best = i;
    return best;
}

struct MemberPrediction {
    std::string label;
    double support = 0.0;  // winning classifier votes / ensemble size
};

inline MemberPrediction member_predict(const Member& m, const ViewSet& views) {
    if (views.views.empty()) fail(ErrorKind::shape, "member_predict: empty view set");
    const auto& labels = m.ensemble.front().class_labels;
    std::vector<int> counts(labels.size(), 0);
    for (const auto& clf : m.ensemble) ++counts[static_cast<std::size_t>(classifier_vote_index(clf, views))];
    int best = 0;
    for (int i = 1; i < static_cast<int>(counts.size()); ++i)
        if (counts[static_cast<std::size_t>(i)] > counts[static_cast<std::size_t>(best)]) best = i;
    return {labels[static_cast<std::size_t>(best)],
            static_cast<double>(counts[static_cast<std::size_t>(best)]) /
                static_cast<double>(m.ensemble.size())};
}

inline MemberPrediction member_predict(const Member& m, const FeatureVector& x) {
    ViewSet vs;
    vs.views.push_back(x);
    return member_predict(m, vs);
}

// Macro-averaged F1 over the classes present in truth or predictions; a
// class never predicted and never present is excluded by construction.
inline double macro_f1(const std::vector<std::string>& truth,
                       const std::vector<std::string>& pred) {
    if (truth.size() != pred.size()) fail(ErrorKind::shape, "macro_f1: length mismatch");
    if (truth.empty()) fail(ErrorKind::empty_input, "macro_f1 of zero samples");
    std::map<std::string, std::array<long, 3>> stats;  // label -> tp, fp, fn
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] == pred[i]) {
            ++stats[truth[i]][0];
        } else {
            ++stats[pred[i]][1];
            ++stats[truth[i]][2];
        }
    }
    double sum = 0;
    for (const auto& [label, s] : stats) {
        double denom = 2.0 * s[0] + s[1] + s[2];
        sum += denom == 0 ? 0.0 : 2.0 * s[0] / denom;
    }
    return sum / static_cast<double>(stats.size());
}

namespace detail {

struct DatasetSplits {
    LabeledSet train, val;
};

// Majority-vote accuracy of the ensemble on one labeled set, single view.
inline double ensemble_accuracy(const std::vector<BaseClassifier>& ensemble,
                                const LabeledSet& set) {
    const auto& labels = ensemble.front().class_labels;
    long correct = 0;
    for (Eigen::Index i = 0; i < set.size(); ++i) {
        FeatureVector x = set.features.row(i).transpose();
        std::vector<int> counts(labels.size(), 0);
        for (const auto& clf : ensemble) ++counts[static_cast<std::size_t>(clf.predict_index(x))];
        int best = 0;
        for (int c = 1; c < static_cast<int>(counts.size()); ++c)
            if (counts[static_cast<std::size_t>(c)] > counts[static_cast<std::size_t>(best)]) best = c;
        if (labels[static_cast<std::size_t>(best)] == set.labels[static_cast<std::size_t>(i)])
            ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(set.size());
}

// Mean of per-dataset validation accuracies; each dataset counts equally.
inline std::optional<double> validation_accuracy(const std::vector<BaseClassifier>& ensemble,
                                                 const std::vector<LabeledSet>& val_sets) {
    double sum = 0;
    int n = 0;
    for (const auto& v : val_sets) {
        if (v.size() == 0) continue;
        sum += ensemble_accuracy(ensemble, v);
        ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / n;
}

struct EnsembleSnapshot {
    std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> params;

    static EnsembleSnapshot take(const std::vector<BaseClassifier>& ensemble) {
        EnsembleSnapshot s;
        for (const auto& c : ensemble) s.params.emplace_back(c.weights, c.biases);
        return s;
    }

    void restore(std::vector<BaseClassifier>& ensemble) const {
        for (std::size_t i = 0; i < ensemble.size(); ++i) {
            ensemble[i].weights = params[i].first;
            ensemble[i].biases = params[i].second;
        }
    }
};

}  // namespace detail

// Trains one member. Phases, in order:
//   1. bag_count bootstrap resamples of the home training split (with
//      replacement, size |home train|, seeded); bag_count = 1 disables
//      bagging and trains the single classifier on the full split.
//   2. mini-batch SGD on softmax cross-entropy, one classifier per bag.
//   3. after each epoch, mean ensemble accuracy over the validation splits
//      of home + peers; stop after `patience` epochs without an improvement
//      > min_delta and restore the best epoch (early_stop on).
//   4. fine-tune on the pooled peer training splits at learning_rate x
//      finetune_lr_factor under the same stopping rule; the pre-fine-tune
//      parameters are the initial best, so a harmful fine-tune rolls back.
//      No-op when peers are empty.
//   5. center = mean of the pre-bootstrap home training features.
//   6. fscore = macro F1 over the validation splits of home + peers.
//
// The label vocabulary is the sorted union of labels seen in the train+val
// splits of home + peers; test splits contribute nothing. Every vocabulary
// class must occur in the home training split.
inline Member train_member(const LabeledSet& home, const std::vector<LabeledSet>& peers,
                           const TrainConfig& cfg) {
    cfg.check();
    for (const auto& p : peers)
        if (p.dim() != home.dim())
            fail(ErrorKind::shape, "peer '" + p.dataset_id + "' dimension " +
                                       std::to_string(p.dim()) + " != home dimension " +
                                       std::to_string(home.dim()));

    SplitIndices home_split = split_indices(home);
    LabeledSet home_train = subset(home, home_split.train);
    std::vector<LabeledSet> val_sets;
    val_sets.push_back(subset(home, home_split.val));
    std::vector<LabeledSet> peer_trains;
    for (const auto& p : peers) {
        SplitIndices ps = split_indices(p);
        peer_trains.push_back(subset(p, ps.train));
        val_sets.push_back(subset(p, ps.val));
    }
    if (home_train.size() == 0)
        fail(ErrorKind::empty_input, "home '" + home.dataset_id + "' has no training rows");

    // Vocabulary and integer targets.
    std::set<std::string> vocab_set(home_train.labels.begin(), home_train.labels.end());
    for (const auto& v : val_sets) vocab_set.insert(v.labels.begin(), v.labels.end());
    for (const auto& t : peer_trains) vocab_set.insert(t.labels.begin(), t.labels.end());
    std::vector<std::string> vocab(vocab_set.begin(), vocab_set.end());
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < vocab.size(); ++i) index[vocab[i]] = static_cast<int>(i);

    std::set<std::string> home_classes(home_train.labels.begin(), home_train.labels.end());
    for (const auto& c : vocab)
        if (!home_classes.count(c))
            fail(ErrorKind::missing_class,
                 "class '" + c + "' has no training sample in home '" + home.dataset_id + "'");

    auto targets = [&](const LabeledSet& s) {
        std::vector<int> y;
        y.reserve(s.labels.size());
        for (const auto& l : s.labels) y.push_back(index.at(l));
        return y;
    };
    std::vector<int> y_home = targets(home_train);

    Member m;
    m.member_id = home.dataset_id;
    for (int b = 0; b < cfg.bag_count; ++b) m.ensemble.push_back(zero_classifier(vocab, home.dim()));

    // Phase 1: bags.
    const std::size_t n_train = static_cast<std::size_t>(home_train.size());
    std::vector<std::vector<Eigen::Index>> bags(static_cast<std::size_t>(cfg.bag_count));
    for (int b = 0; b < cfg.bag_count; ++b) {
        auto& bag = bags[static_cast<std::size_t>(b)];
        if (cfg.bag_count == 1) {
            for (std::size_t i = 0; i < n_train; ++i) bag.push_back(static_cast<Eigen::Index>(i));
        } else {
            auto rng = make_rng(cfg.seed, {"bag", home.dataset_id, std::to_string(b)});
            for (std::size_t i = 0; i < n_train; ++i)
                bag.push_back(static_cast<Eigen::Index>(rand_index(rng, n_train)));
        }
    }

    // Shared epoch driver for phases 2-4. Streams one RNG per classifier so
    // epoch shuffles are independent of how many epochs actually run before.
    auto run_phase = [&](const Eigen::MatrixXd& X, const std::vector<int>& y,
                         const std::vector<std::vector<Eigen::Index>>& orders0, double lr,
                         const char* tag, bool seed_best_from_current) -> int {
        std::vector<std::mt19937_64> rngs;
        std::vector<std::vector<Eigen::Index>> orders = orders0;
        for (int b = 0; b < cfg.bag_count; ++b)
            rngs.push_back(make_rng(cfg.seed, {tag, home.dataset_id, std::to_string(b)}));

        double best = -std::numeric_limits<double>::infinity();
        detail::EnsembleSnapshot best_snap;
        bool have_snap = false;
        if (seed_best_from_current) {
            auto acc0 = detail::validation_accuracy(m.ensemble, val_sets);
            if (acc0) {
                best = *acc0;
                best_snap = detail::EnsembleSnapshot::take(m.ensemble);
                have_snap = true;
            }
        }
        int bad = 0;
        int epochs = 0;
        for (int e = 0; e < cfg.max_epochs; ++e) {
            for (int b = 0; b < cfg.bag_count; ++b) {
                auto& order = orders[static_cast<std::size_t>(b)];
                shuffle_indices(order, rngs[static_cast<std::size_t>(b)]);
                for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
                    std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
                    std::vector<Eigen::Index> batch(order.begin() + static_cast<std::ptrdiff_t>(at),
                                                    order.begin() + static_cast<std::ptrdiff_t>(end));
                    sgd_step(m.ensemble[static_cast<std::size_t>(b)], X, y, batch, lr);
                }
            }
            ++epochs;
            if (!cfg.early_stop) continue;
            auto acc = detail::validation_accuracy(m.ensemble, val_sets);
            if (!acc) continue;  // no validation data anywhere: fixed-epoch fallback
            if (*acc > best + cfg.min_delta) {
                best = *acc;
                best_snap = detail::EnsembleSnapshot::take(m.ensemble);
                have_snap = true;
                bad = 0;
            } else if (++bad >= cfg.patience) {
                break;
            }
        }
        if (cfg.early_stop && have_snap) best_snap.restore(m.ensemble);
        return epochs;
    };

    // Phases 2-3: home training.
    m.home_epochs_run = run_phase(home_train.features, y_home, bags, cfg.learning_rate, "sgd", false);

    // Phase 4: peer fine-tuning on the pooled peer training rows.
    Eigen::Index peer_rows = 0;
    for (const auto& t : peer_trains) peer_rows += t.size();
    if (peer_rows > 0) {
        Eigen::MatrixXd Xp(peer_rows, home.dim());
        std::vector<int> yp;
        yp.reserve(static_cast<std::size_t>(peer_rows));
        Eigen::Index r = 0;
        for (const auto& t : peer_trains) {
            for (Eigen::Index i = 0; i < t.size(); ++i) {
                Xp.row(r++) = t.features.row(i);
                yp.push_back(index.at(t.labels[static_cast<std::size_t>(i)]));
            }
        }
        std::vector<Eigen::Index> full(static_cast<std::size_t>(peer_rows));
        for (Eigen::Index i = 0; i < peer_rows; ++i) full[static_cast<std::size_t>(i)] = i;
        std::vector<std::vector<Eigen::Index>> orders(static_cast<std::size_t>(cfg.bag_count), full);
        m.finetune_epochs_run =
            run_phase(Xp, yp, orders, cfg.learning_rate * cfg.finetune_lr_factor, "ft", true);
    }

    // Phase 5: center over the pre-bootstrap home training rows (id-sorted).
    std::vector<FeatureVector> train_rows;
    train_rows.reserve(n_train);
    for (Eigen::Index i = 0; i < home_train.size(); ++i)
        train_rows.push_back(home_train.features.row(i).transpose());
    m.center = dataset_center(train_rows);

    // Phase 6: f-score over the validation splits.
    std::vector<std::string> truth, pred;
    for (const auto& v : val_sets) {
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            truth.push_back(v.labels[static_cast<std::size_t>(i)]);
            pred.push_back(member_predict(m, FeatureVector(v.features.row(i).transpose())).label);
        }
    }
    m.fscore = truth.empty() ? 0.0 : macro_f1(truth, pred);
    return m;
}

// Macro F1 of the member over the union of the given validation sets,
// single-view prediction.
inline double cross_val_fscore(const Member& m, const std::vector<LabeledSet>& eval_sets) {
    if (eval_sets.empty()) fail(ErrorKind::empty_input, "cross_val_fscore: no eval sets");
    std::vector<std::string> truth, pred;
    for (const auto& s : eval_sets) {
        for (Eigen::Index i = 0; i < s.size(); ++i) {
            truth.push_back(s.labels[static_cast<std::size_t>(i)]);
            pred.push_back(member_predict(m, FeatureVector(s.features.row(i).transpose())).label);
        }
    }
    if (truth.empty()) fail(ErrorKind::empty_input, "cross_val_fscore: empty union");
    return macro_f1(truth, pred);
}

// ---------------------------------------------------------------------------
// Classifier parameter file: header "rows cols", then rows of decimal
// floats. cols = feature_dim + 1; the last column is the bias.

inline void write_classifier(const BaseClassifier& clf, std::ostream& out) {
    out << clf.weights.rows() << " " << clf.weights.cols() + 1 << "\n";
    for (Eigen::Index r = 0; r < clf.weights.rows(); ++r) {
        for (Eigen::Index c = 0; c < clf.weights.cols(); ++c) {
            if (c) out << " ";
            out << format_double(clf.weights(r, c));
        }
        out << " " << format_double(clf.biases[r]) << "\n";
    }
}

// Labels are stored in the member metadata, not here; the caller attaches
// them afterwards.
inline BaseClassifier read_classifier(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::parse, "classifier file: missing header");
    std::istringstream hdr(line);
    long rows = 0, cols = 0;
    hdr >> rows >> cols;
    if (rows < 1 || cols < 2) fail(ErrorKind::parse, "classifier file: bad header '" + line + "'");
    BaseClassifier clf;
    clf.weights.resize(rows, cols - 1);
    clf.biases.resize(rows);
    for (long r = 0; r < rows; ++r) {
        if (!std::getline(in, line))
            fail(ErrorKind::parse, "classifier file: truncated at row " + std::to_string(r));
        std::istringstream row(line);
        std::string tok;
        for (long c = 0; c < cols; ++c) {
            if (!(row >> tok))
                fail(ErrorKind::parse, "classifier file: short row " + std::to_string(r));
            double v = parse_double(tok);
            if (c < cols - 1)
                clf.weights(r, c) = v;
            else
                clf.biases[r] = v;
        }
    }
    return clf;
}

}  // namespace kidforge
