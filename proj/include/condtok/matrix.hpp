#pragma once

// Dense row-major double matrices and the handful of operations the
// conditioning and attention code needs. Every public operation returns a
// matrix whose entries are finite, or throws NonFiniteError.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "condtok/error.hpp"
#include "condtok/rng.hpp"

namespace condtok {

class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
        require_positive();
    }

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        require_positive();
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("matrix data has " + std::to_string(data_.size()) +
                                 " entries, expected " + std::to_string(rows_ * cols_) + " for " +
                                 shape_string());
        }
        check_finite("construction");
    }

    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        require_positive();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw DimensionError("ragged initializer list");
            data_.insert(data_.end(), r.begin(), r.end());
        }
        check_finite("construction");
    }

    static Matrix identity(std::size_t n) { return eye(n, n); }

    /// Rectangular identity: ones on the leading min(rows, cols) diagonal.
    static Matrix eye(std::size_t rows, std::size_t cols, double value = 1.0) {
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < std::min(rows, cols); ++i) m(i, i) = value;
        return m;
    }

    static Matrix diag(std::initializer_list<double> values) {
        return diag(std::vector<double>(values));
    }

    static Matrix diag(const std::vector<double>& values) {
        Matrix m(values.size(), values.size());
        for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
        m.check_finite("diag");
        return m;
    }

    static Matrix random_uniform(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng) {
        Matrix m(rows, cols);
        for (auto& v : m.data_) v = rng.uniform(lo, hi);
        return m;
    }

    static Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng) {
        Matrix m(rows, cols);
        for (auto& v : m.data_) v = rng.normal();
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const noexcept {
        return {data_.data() + i * cols_, cols_};
    }

    std::string shape_string() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    void check_finite(const char* context) const {
        for (double v : data_) {
            if (!std::isfinite(v)) {
                throw NonFiniteError(std::string("non-finite entry in ") + shape_string() +
                                     " matrix after " + context);
            }
        }
    }

    Matrix& operator+=(const Matrix& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        check_finite("+=");
        return *this;
    }

    Matrix& operator-=(const Matrix& o) {
        require_same_shape(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        check_finite("-=");
        return *this;
    }

    Matrix& operator*=(double s) {
        for (auto& v : data_) v *= s;
        check_finite("scaling");
        return *this;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

    void require_same_shape(const Matrix& o, const char* op) const {
        if (!same_shape(o)) {
            throw DimensionError(std::string(op) + ": shape mismatch " + shape_string() + " vs " +
                                 o.shape_string());
        }
    }

private:
    void require_positive() const {
        if (rows_ == 0 || cols_ == 0) throw DimensionError("matrix dimensions must be positive");
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ, " + a.shape_string() + " * " +
                             b.shape_string());
    }
    Matrix c(a.rows(), b.cols());
    const std::size_t n = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.row(i).data();
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* bk = b.row(k).data();
            for (std::size_t j = 0; j < m; ++j) ci[j] += aik * bk[j];
        }
    }
    c.check_finite("matmul");
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    a.require_same_shape(b, "hadamard");
    Matrix c = a;
    auto cd = c.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < cd.size(); ++i) cd[i] *= bd[i];
    c.check_finite("hadamard");
    return c;
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
inline Matrix softmax_rows(const Matrix& a) {
    Matrix s(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto in = a.row(i);
        auto out = s.row(i);
        const double mx = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            out[j] = std::exp(in[j] - mx);
            total += out[j];
        }
        for (double& v : out) v /= total;
    }
    s.check_finite("softmax_rows");
    return s;
}

inline double frobenius_norm(const Matrix& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v * v;
    return std::sqrt(acc);
}

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
    a.require_same_shape(b, "frobenius_distance");
    double acc = 0.0;
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) {
        const double d = ad[i] - bd[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

inline double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.data()) m = std::max(m, std::abs(v));
    return m;
}

/// Column-wise concatenation [a_1, ..., a_n]; all blocks share a row count.
inline Matrix hconcat(std::span<const Matrix> blocks) {
    if (blocks.empty()) throw DimensionError("hconcat: no blocks");
    const std::size_t rows = blocks.front().rows();
    std::size_t cols = 0;
    for (const auto& b : blocks) {
        if (b.rows() != rows) {
            throw DimensionError("hconcat: row mismatch " + blocks.front().shape_string() + " vs " +
                                 b.shape_string());
        }
        cols += b.cols();
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (const auto& b : blocks) {
        for (std::size_t i = 0; i < rows; ++i)
            std::copy(b.row(i).begin(), b.row(i).end(), out.row(i).begin() + offset);
        offset += b.cols();
    }
    return out;
}

inline Matrix column_block(const Matrix& a, std::size_t first, std::size_t width) {
    if (width == 0 || first + width > a.cols()) {
        throw DimensionError("column_block: columns [" + std::to_string(first) + ", " +
                             std::to_string(first + width) + ") out of range for " +
                             a.shape_string());
    }
    Matrix out(a.rows(), width);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < width; ++j) out(i, j) = a(i, first + j);
    return out;
}

// ---------------------------------------------------------------------------
// CSV: headerless rows of comma-separated decimal literals.

inline void write_csv(std::ostream& os, const Matrix& m) {
    char buf[32];
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
            if (j) os << ',';
            os << buf;
        }
        os << '\n';
    }
}

inline std::string to_csv(const Matrix& m) {
    std::ostringstream os;
    write_csv(os, m);
    return os.str();
}

inline Matrix read_csv(std::istream& is, const std::string& source = "<stream>") {
    std::vector<double> values;
    std::size_t rows = 0, cols = 0;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        std::size_t count = 0;
        std::size_t pos = 0;
        while (true) {
            const std::size_t comma = line.find(',', pos);
            const std::string field = line.substr(pos, comma == std::string::npos ? std::string::npos
                                                                                  : comma - pos);
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(field, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || field.find_first_not_of(" \t", used) != std::string::npos) {
                throw ParseError(source + ":" + std::to_string(lineno) + ": not a number: '" + field +
                                 "'");
            }
            if (!std::isfinite(v)) {
                throw ParseError(source + ":" + std::to_string(lineno) + ": non-finite value");
            }
            values.push_back(v);
            ++count;
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (rows == 0) {
            cols = count;
        } else if (count != cols) {
            throw ParseError(source + ":" + std::to_string(lineno) + ": expected " +
                             std::to_string(cols) + " columns, found " + std::to_string(count));
        }
        ++rows;
    }
    if (rows == 0) throw ParseError(source + ": no matrix rows");
    return Matrix(rows, cols, std::move(values));
}

inline Matrix read_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open '" + path + "'");
    return read_csv(in, path);
}

inline void write_csv_file(const std::string& path, const Matrix& m) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write '" + path + "'");
    write_csv(out, m);
}

}  // namespace condtok
