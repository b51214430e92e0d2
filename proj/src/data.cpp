#include "gpn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "gpn/rng.hpp"

namespace gpn::data {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool is_missing(const std::string& field) { return field.empty() || field == "?"; }

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    std::stringstream ss(line);
    while (std::getline(ss, cur, ',')) fields.push_back(trim(cur));
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

} // namespace

long Dataset::count(Split s) const {
    return std::count(split.begin(), split.end(), static_cast<int>(s));
}

MatrixXd Dataset::split_x(Split s) const {
    MatrixXd out(count(s), x.cols());
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (split[i] == static_cast<int>(s)) out.row(k++) = x.row(static_cast<Eigen::Index>(i));
    return out;
}

MatrixXd Dataset::split_t(Split s) const {
    MatrixXd out(count(s), t.cols());
    Eigen::Index k = 0;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (split[i] == static_cast<int>(s)) out.row(k++) = t.row(static_cast<Eigen::Index>(i));
    return out;
}

void Dataset::mark_test_tail(long n) {
    if (n < 0 || n > static_cast<long>(split.size()))
        throw DimensionMismatch("mark_test_tail: bad count");
    for (std::size_t i = split.size() - n; i < split.size(); ++i)
        split[i] = static_cast<int>(Split::Test);
    refresh_encoding();
}

void Dataset::refresh_encoding() {
    if (!has_raw) return;
    const Eigen::Index s_count = raw_cont.rows() > 0
                                     ? raw_cont.rows()
                                     : static_cast<Eigen::Index>(raw_cat.rows());

    // train-split min/max per continuous column, ignoring missing entries
    for (Eigen::Index c = 0, ci = 0; c < static_cast<Eigen::Index>(feature_meta.size()); ++c) {
        ColumnMeta& meta = feature_meta[c];
        if (meta.kind != ColKind::Continuous) continue;
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        const Eigen::Index col = ci++;
        for (Eigen::Index i = 0; i < s_count; ++i) {
            if (split[i] != static_cast<int>(Split::Train)) continue;
            const double v = raw_cont(i, col);
            if (std::isnan(v)) continue;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (!std::isfinite(lo)) { lo = 0.0; hi = 1.0; }
        meta.min = lo;
        meta.max = hi;
    }

    Eigen::Index width = 0;
    for (const auto& m : feature_meta) width += m.width();
    x.resize(s_count, width);

    for (Eigen::Index i = 0; i < s_count; ++i) {
        Eigen::Index out_col = 0, cont_col = 0, cat_col = 0;
        for (const auto& meta : feature_meta) {
            if (meta.kind == ColKind::Continuous) {
                const double v = raw_cont(i, cont_col++);
                double enc = 0.0;
                if (!std::isnan(v)) {
                    const double range = meta.max - meta.min;
                    enc = range > 0.0 ? (v - meta.min) / range : 0.0;
                    enc = std::clamp(enc, -0.5, 1.5);
                }
                x(i, out_col++) = enc;
            } else {
                const int code = raw_cat(i, cat_col++);
                const int w = meta.width();
                x.block(i, out_col, 1, w).setZero();
                if (code >= 0)
                    x(i, out_col + code) = 1.0;
                else if (meta.has_unknown)
                    x(i, out_col + w - 1) = 1.0;
                out_col += w;
            }
        }
    }
}

Dataset load_delimited(const std::string& path, const Schema& schema) {
    std::ifstream in(path);
    if (!in) throw DatasetMissing("cannot open " + path);

    const int n_cols = static_cast<int>(schema.columns.size());
    if (schema.target_column < 0 || schema.target_column >= n_cols)
        throw SchemaMismatch("target column out of range");

    std::vector<std::vector<std::string>> rows;
    std::string line;
    long line_no = 0;
    bool skipped_header = !schema.has_header;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (!skipped_header) { skipped_header = true; continue; }
        auto fields = split_csv_line(t);
        if (static_cast<int>(fields.size()) != n_cols)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected " +
                             std::to_string(n_cols) + " fields, got " +
                             std::to_string(fields.size()));
        rows.push_back(std::move(fields));
    }
    if (rows.empty()) throw ParseError(path + ": no data rows");
    const Eigen::Index s_count = static_cast<Eigen::Index>(rows.size());

    Dataset ds;
    ds.has_raw = true;
    ds.split.assign(rows.size(), static_cast<int>(Split::Train));

    // column inventory
    int n_cont = 0, n_cat = 0;
    for (int c = 0; c < n_cols; ++c) {
        if (c == schema.target_column) continue;
        (schema.columns[c] == ColKind::Continuous ? n_cont : n_cat)++;
    }
    ds.raw_cont.resize(s_count, n_cont);
    ds.raw_cat.resize(s_count, n_cat);

    // category tables (sorted for determinism) and missing detection
    std::vector<std::set<std::string>> cat_levels(n_cat);
    std::vector<bool> cat_missing(n_cat, false);
    {
        int cat = 0;
        for (int c = 0; c < n_cols; ++c) {
            if (c == schema.target_column || schema.columns[c] == ColKind::Continuous)
                continue;
            for (const auto& row : rows) {
                if (is_missing(row[c]))
                    cat_missing[cat] = true;
                else
                    cat_levels[cat].insert(row[c]);
            }
            ++cat;
        }
    }

    for (int c = 0, cont = 0, cat = 0; c < n_cols; ++c) {
        if (c == schema.target_column) continue;
        ColumnMeta meta;
        if (schema.columns[c] == ColKind::Continuous) {
            meta.kind = ColKind::Continuous;
            for (Eigen::Index i = 0; i < s_count; ++i) {
                const std::string& f = rows[i][c];
                if (is_missing(f)) {
                    ds.raw_cont(i, cont) = std::numeric_limits<double>::quiet_NaN();
                } else {
                    try {
                        ds.raw_cont(i, cont) = std::stod(f);
                    } catch (const std::exception&) {
                        throw ParseError(path + ": bad numeric value '" + f +
                                         "' in column " + std::to_string(c));
                    }
                }
            }
            ++cont;
        } else {
            meta.kind = ColKind::Categorical;
            meta.categories.assign(cat_levels[cat].begin(), cat_levels[cat].end());
            meta.has_unknown = cat_missing[cat];
            std::map<std::string, int> index;
            for (std::size_t k = 0; k < meta.categories.size(); ++k)
                index[meta.categories[k]] = static_cast<int>(k);
            for (Eigen::Index i = 0; i < s_count; ++i) {
                const std::string& f = rows[i][c];
                ds.raw_cat(i, cat) = is_missing(f) ? -1 : index.at(f);
            }
            ++cat;
        }
        ds.feature_meta.push_back(std::move(meta));
    }

    // targets
    if (schema.target_real) {
        ds.onehot_targets = false;
        ds.raw_real_targets.resize(s_count);
        for (Eigen::Index i = 0; i < s_count; ++i) {
            const std::string& f = rows[i][schema.target_column];
            try {
                ds.raw_real_targets[i] = std::stod(f);
            } catch (const std::exception&) {
                throw ParseError(path + ": bad target value '" + f + "'");
            }
        }
        ds.t = ds.raw_real_targets;
    } else {
        std::set<std::string> labels;
        for (const auto& row : rows) labels.insert(row[schema.target_column]);
        ds.class_names.assign(labels.begin(), labels.end());
        std::map<std::string, int> index;
        for (std::size_t k = 0; k < ds.class_names.size(); ++k)
            index[ds.class_names[k]] = static_cast<int>(k);
        ds.raw_labels.resize(rows.size());
        ds.t = MatrixXd::Zero(s_count, static_cast<Eigen::Index>(ds.class_names.size()));
        for (Eigen::Index i = 0; i < s_count; ++i) {
            const int k = index.at(rows[i][schema.target_column]);
            ds.raw_labels[static_cast<std::size_t>(i)] = k;
            ds.t(i, k) = 1.0;
        }
    }

    ds.refresh_encoding();
    return ds;
}

// ---- IDX ------------------------------------------------------------------------

namespace {

std::uint32_t read_u32_be(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw TruncatedFile(path + ": truncated header");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

} // namespace

Dataset load_idx_images(const std::string& images_path,
                        const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw DatasetMissing("cannot open " + images_path);
    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw DatasetMissing("cannot open " + labels_path);

    if (read_u32_be(imgs, images_path) != 0x00000803u)
        throw BadMagic(images_path + ": not an IDX image file");
    const std::uint32_t n = read_u32_be(imgs, images_path);
    const std::uint32_t rows = read_u32_be(imgs, images_path);
    const std::uint32_t cols = read_u32_be(imgs, images_path);

    if (read_u32_be(labs, labels_path) != 0x00000801u)
        throw BadMagic(labels_path + ": not an IDX label file");
    const std::uint32_t n_labels = read_u32_be(labs, labels_path);
    if (n_labels != n)
        throw SchemaMismatch("image/label counts differ");

    const std::size_t pixels = std::size_t(rows) * cols;
    std::vector<unsigned char> img_buf(pixels);
    std::vector<unsigned char> lab_buf(n);
    labs.read(reinterpret_cast<char*>(lab_buf.data()), n);
    if (!labs) throw TruncatedFile(labels_path + ": truncated data");

    Dataset ds;
    ds.x.resize(n, static_cast<Eigen::Index>(pixels));
    int max_label = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
        imgs.read(reinterpret_cast<char*>(img_buf.data()), static_cast<std::streamsize>(pixels));
        if (!imgs) throw TruncatedFile(images_path + ": truncated data");
        for (std::size_t p = 0; p < pixels; ++p)
            ds.x(i, static_cast<Eigen::Index>(p)) = img_buf[p] / 255.0;
        max_label = std::max(max_label, int(lab_buf[i]));
    }
    const int n_classes = std::max(10, max_label + 1);
    ds.t = MatrixXd::Zero(n, n_classes);
    ds.raw_labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        ds.t(i, lab_buf[i]) = 1.0;
        ds.raw_labels[i] = lab_buf[i];
    }
    for (int c = 0; c < n_classes; ++c)
        ds.class_names.push_back(std::to_string(c));
    ds.split.assign(n, static_cast<int>(Split::Train));
    ds.onehot_targets = true;
    ds.has_raw = false; // fixed 1/255 scaling, nothing to re-estimate
    return ds;
}

Dataset split(Dataset dataset, double val_fraction, std::uint64_t seed) {
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw DimensionMismatch("split: val_fraction out of range");
    std::vector<int> train_idx;
    for (std::size_t i = 0; i < dataset.split.size(); ++i) {
        if (dataset.split[i] == static_cast<int>(Split::Val))
            dataset.split[i] = static_cast<int>(Split::Train);
        if (dataset.split[i] == static_cast<int>(Split::Train))
            train_idx.push_back(static_cast<int>(i));
    }
    Rng rng(derive_seed(seed, "val-split"));
    rng.shuffle(train_idx);
    const long n_val = static_cast<long>(std::lround(val_fraction * double(train_idx.size())));
    for (long i = 0; i < n_val; ++i)
        dataset.split[train_idx[i]] = static_cast<int>(Split::Val);
    dataset.refresh_encoding();
    return dataset;
}

Dataset from_matrices(MatrixXd x, MatrixXd t, bool onehot) {
    Dataset ds;
    ds.x = std::move(x);
    ds.t = std::move(t);
    ds.onehot_targets = onehot;
    ds.split.assign(ds.x.rows(), static_cast<int>(Split::Train));
    ds.has_raw = false;
    return ds;
}

// ---- binary cache ------------------------------------------------------------------

namespace {
constexpr char kCacheMagic[8] = {'G', 'P', 'N', 'D', 'S', 'E', 'T', '1'};

void write_matrix(std::ofstream& out, const MatrixXd& m) {
    const std::int64_t rows = m.rows(), cols = m.cols();
    out.write(reinterpret_cast<const char*>(&rows), 8);
    out.write(reinterpret_cast<const char*>(&cols), 8);
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()));
}

MatrixXd read_matrix(std::ifstream& in, const std::string& path) {
    std::int64_t rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&rows), 8);
    in.read(reinterpret_cast<char*>(&cols), 8);
    if (!in) throw TruncatedFile(path + ": truncated matrix header");
    MatrixXd m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw TruncatedFile(path + ": truncated matrix data");
    return m;
}
} // namespace

void save_cache(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write cache: " + path);
    out.write(kCacheMagic, 8);
    const std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 4);

    nlohmann::json meta;
    meta["onehot"] = ds.onehot_targets;
    meta["class_names"] = ds.class_names;
    meta["split"] = ds.split;
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& m : ds.feature_meta) {
        nlohmann::json jm;
        jm["kind"] = m.kind == ColKind::Continuous ? "cont" : "cat";
        jm["min"] = m.min;
        jm["max"] = m.max;
        jm["categories"] = m.categories;
        jm["has_unknown"] = m.has_unknown;
        cols.push_back(std::move(jm));
    }
    meta["feature_meta"] = std::move(cols);
    const std::string meta_str = meta.dump();
    const std::uint64_t meta_len = meta_str.size();
    out.write(reinterpret_cast<const char*>(&meta_len), 8);
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_len));
    write_matrix(out, ds.x);
    write_matrix(out, ds.t);
}

Dataset load_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetMissing("cannot open cache: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCacheMagic, 8) != 0)
        throw BadMagic(path + ": not a dataset cache");
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (version != 1) throw BadMagic(path + ": unsupported cache version");

    std::uint64_t meta_len = 0;
    in.read(reinterpret_cast<char*>(&meta_len), 8);
    std::string meta_str(meta_len, '\0');
    in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw TruncatedFile(path + ": truncated metadata");
    const nlohmann::json meta = nlohmann::json::parse(meta_str);

    Dataset ds;
    ds.onehot_targets = meta.at("onehot").get<bool>();
    ds.class_names = meta.at("class_names").get<std::vector<std::string>>();
    ds.split = meta.at("split").get<std::vector<int>>();
    for (const auto& jm : meta.at("feature_meta")) {
        ColumnMeta m;
        m.kind = jm.at("kind").get<std::string>() == "cont" ? ColKind::Continuous
                                                            : ColKind::Categorical;
        m.min = jm.at("min").get<double>();
        m.max = jm.at("max").get<double>();
        m.categories = jm.at("categories").get<std::vector<std::string>>();
        m.has_unknown = jm.at("has_unknown").get<bool>();
        ds.feature_meta.push_back(std::move(m));
    }
    ds.x = read_matrix(in, path);
    ds.t = read_matrix(in, path);
    ds.has_raw = false;
    return ds;
}

} // namespace gpn::data
