#include <cmath>
#include <vector>

#include "compostruct/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace compostruct::kernels::omp {

namespace {
// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1 << 15;

long as_long(std::size_t v) { return static_cast<long>(v); }
}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(n < 1 ? 1 : n);
#else
  (void)n;
#endif
}

void gemm_nn_acc(MatView a, MatView b, MutMatView c) {
  const std::size_t m = a.rows, k = a.cols, n = b.cols;
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (long il = 0; il < as_long(m); ++il) {
    const auto i = static_cast<std::size_t>(il);
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
  const std::size_t m = a.rows, k = a.cols, n = b.cols;
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (long pl = 0; pl < as_long(k); ++pl) {
    const auto p = static_cast<std::size_t>(pl);
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
  const std::size_t m = a.rows, k = a.cols, n = b.rows;
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b.data[j * k + p];
#pragma omp parallel for schedule(static) if (m * k * n > kParallelWork)
  for (long il = 0; il < as_long(m); ++il) {
    const auto i = static_cast<std::size_t>(il);
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
  const std::size_t n = w.size();
#pragma omp parallel for schedule(static) if (n > kParallelWork)
  for (long il = 0; il < as_long(n); ++il) {
    const auto i = static_cast<std::size_t>(il);
    const double g = 1.0 / (1.0 + std::exp(-beta * s[i]));
    gate[i] = g;
    out[i] = w[i] * g;
  }
}

void odd_one_out_logits(MatView e, std::size_t group, std::span<double> logits) {
  const std::size_t d = e.cols;
  const std::size_t groups = e.rows / group;
#pragma omp parallel for schedule(static) if (groups * group * d > kParallelWork)
  for (long gl = 0; gl < as_long(groups); ++gl) {
    const auto g = static_cast<std::size_t>(gl);
    std::vector<double> total(d);
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

}  // namespace compostruct::kernels::omp
