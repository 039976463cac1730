#include <cmath>
#include <vector>

#include "compostruct/kernels.hpp"

namespace compostruct::kernels::serial {

void gemm_nn_acc(MatView a, MatView b, MutMatView c) {
  const std::size_t m = a.rows, k = a.cols, n = b.cols;
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data + i * n;
    const double* arow = a.data + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_tn_acc(MatView a, MatView b, MutMatView c) {
  // c is (a.cols x b.cols); sum runs over the shared row index.
  const std::size_t m = a.rows, k = a.cols, n = b.cols;
  for (std::size_t p = 0; p < k; ++p) {
    double* crow = c.data + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a.data[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b.data + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_acc(MatView a, MatView b, MutMatView c) {
  // Transpose b once so the inner loop is a contiguous axpy.
  const std::size_t m = a.rows, k = a.cols, n = b.rows;
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b.data[j * k + p];
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data + i * n;
    const double* arow = a.data + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = bt.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void soft_mask(std::span<const double> w, std::span<const double> s, double beta,
               std::span<double> gate, std::span<double> out) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double g = 1.0 / (1.0 + std::exp(-beta * s[i]));
    gate[i] = g;
    out[i] = w[i] * g;
  }
}

void odd_one_out_logits(MatView e, std::size_t group, std::span<double> logits) {
  const std::size_t d = e.cols;
  const std::size_t groups = e.rows / group;
  std::vector<double> total(d);
  for (std::size_t g = 0; g < groups; ++g) {
    const double* base = e.data + g * group * d;
    for (std::size_t t = 0; t < d; ++t) {
      double acc = 0.0;
      for (std::size_t r = 0; r < group; ++r) acc += base[r * d + t];
      total[t] = acc;
    }
    for (std::size_t r = 0; r < group; ++r) {
      const double* row = base + r * d;
      double score = 0.0;
      for (std::size_t t = 0; t < d; ++t) score += row[t] * (total[t] - row[t]);
      logits[g * group + r] = -score;
    }
  }
}

}  // namespace compostruct::kernels::serial
