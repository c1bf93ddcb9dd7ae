#pragma once

// Dense multi-head self-attention over all tokens, written with plain loops
// in double precision. Weight layouts follow torch::nn::Linear ([out, in]).

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// y = x W^T + b for x [n, in], W [out, in].
inline Matrix linear(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
    Matrix y(x.rows, w.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t o = 0; o < w.rows; ++o) {
            double s = b.empty() ? 0.0 : b[o];
            for (std::size_t k = 0; k < x.cols; ++k) {
                s += x.at(i, k) * w.at(o, k);
            }
            y.at(i, o) = s;
        }
    }
    return y;
}

// Attention with Q from `query_rows` and K, V from `memory_rows`.
// q/k/v are already projected: [n, heads * head_dim]. `blocked(i, j)` hides
// key j from query i. Returns concatenated head outputs [n, heads * head_dim].
template <typename Blocked>
Matrix attend(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, Blocked blocked) {
    const std::size_t hd = q.cols / heads;
    Matrix out(q.rows, q.cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < q.rows; ++i) {
            std::vector<double> logits(k.rows, 0.0);
            double top = -1e300;
            for (std::size_t j = 0; j < k.rows; ++j) {
                if (blocked(i, j)) {
                    continue;
                }
                double s = 0.0;
                for (std::size_t e = 0; e < hd; ++e) {
                    s += q.at(i, h * hd + e) * k.at(j, h * hd + e);
                }
                logits[j] = s * scale;
                top = std::max(top, logits[j]);
            }
            double z = 0.0;
            std::vector<double> p(k.rows, 0.0);
            for (std::size_t j = 0; j < k.rows; ++j) {
                if (!blocked(i, j)) {
                    p[j] = std::exp(logits[j] - top);
                    z += p[j];
                }
            }
            for (std::size_t j = 0; j < k.rows; ++j) {
                for (std::size_t e = 0; e < hd; ++e) {
                    out.at(i, h * hd + e) += p[j] / z * v.at(j, h * hd + e);
                }
            }
        }
    }
    return out;
}

// Self-attention with a fused qkv projection laid out as [q; k; v] rows, each
// block split into heads of equal width.
inline Matrix dense_self_attention(const Matrix& x, const Matrix& w_qkv, const std::vector<double>& b_qkv,
                                   const Matrix& w_out, const std::vector<double>& b_out, std::size_t heads) {
    const std::size_t c = x.cols;
    const Matrix qkv = linear(x, w_qkv, b_qkv);
    Matrix q(x.rows, c), k(x.rows, c), v(x.rows, c);
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t e = 0; e < c; ++e) {
            q.at(i, e) = qkv.at(i, e);
            k.at(i, e) = qkv.at(i, c + e);
            v.at(i, e) = qkv.at(i, 2 * c + e);
        }
    }
    const Matrix ctx = attend(q, k, v, heads, [](std::size_t, std::size_t) { return false; });
    return linear(ctx, w_out, b_out);
}

} // namespace oracle
