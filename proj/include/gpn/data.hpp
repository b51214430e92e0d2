#ifndef GPN_DATA_HPP
#define GPN_DATA_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "gpn/errors.hpp"

namespace gpn::data {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class ColKind { Continuous, Categorical };

enum class Split : int { Train = 0, Val = 1, Test = 2 };

struct ColumnMeta {
    ColKind kind = ColKind::Continuous;
    double min = 0.0, max = 1.0;            // continuous scaling (train split)
    std::vector<std::string> categories;    // categorical levels, sorted
    bool has_unknown = false;               // extra category for missing values
    int width() const {
        return kind == ColKind::Continuous
                   ? 1
                   : static_cast<int>(categories.size()) + (has_unknown ? 1 : 0);
    }
};

struct Schema {
    std::vector<ColKind> columns; // kind of every file column; target entry ignored
    int target_column = 0;
    bool target_real = false;     // regression target instead of a class label
    bool has_header = false;
};

/// Preprocessed dataset: features in [0,1] (clamped to [-0.5, 1.5] where
/// train statistics push val/test outside), one-hot or real targets, and a
/// per-sample split assignment.
struct Dataset {
    MatrixXd x;
    MatrixXd t;
    bool onehot_targets = true;
    std::vector<int> split;
    std::vector<ColumnMeta> feature_meta;
    std::vector<std::string> class_names;

    // raw parse results, kept so scaling statistics can be recomputed after
    // the validation split is drawn
    bool has_raw = false;
    MatrixXd raw_cont;               // S x (#continuous), NaN = missing
    Eigen::MatrixXi raw_cat;         // S x (#categorical), -1 = missing
    std::vector<int> raw_labels;
    VectorXd raw_real_targets;

    Eigen::Index samples() const { return x.rows(); }
    Eigen::Index features() const { return x.cols(); }
    Eigen::Index classes() const { return onehot_targets ? t.cols() : 0; }

    long count(Split s) const;
    MatrixXd split_x(Split s) const;
    MatrixXd split_t(Split s) const;

    /// Mark the trailing n samples as the provided test portion.
    void mark_test_tail(long n);
    /// Re-encode features using scaling statistics from the current train
    /// split only; no-op for fixed-range sources (IDX images).
    void refresh_encoding();
};

/// Parse a comma-separated file and encode it per the schema. Missing
/// categorical values become an extra "unknown" category; missing continuous
/// values encode to 0.
Dataset load_delimited(const std::string& path, const Schema& schema);

/// IDX-format image/label pair (big-endian sizes, magic 0x803 / 0x801);
/// pixels scaled by 1/255, labels one-hot.
Dataset load_idx_images(const std::string& images_path,
                        const std::string& labels_path);

/// Seeded reassignment of a fraction of the train split to validation; the
/// test split is untouched. Re-encodes continuous features with the final
/// train statistics.
Dataset split(Dataset dataset, double val_fraction, std::uint64_t seed);

/// Versioned binary cache of the encoded dataset (bit-exact round trip).
void save_cache(const Dataset& ds, const std::string& path);
Dataset load_cache(const std::string& path);

/// In-memory dataset from ready-made matrices (all rows marked train).
Dataset from_matrices(MatrixXd x, MatrixXd t, bool onehot);

} // namespace gpn::data

#endif
