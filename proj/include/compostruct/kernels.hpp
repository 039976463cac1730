#pragma once

// Dense kernels behind the autodiff primitives. Every kernel has a serial
// reference in kernels::serial and an OpenMP version in kernels::omp. The
// OpenMP versions split work over output rows only, so each output element
// is summed in the same order as the serial reference and results are
// bit-identical for any thread count.

#include <cstddef>
#include <span>

namespace compostruct::kernels {

/// Row-major matrix view.
struct MatView {
  const double* data;
  std::size_t rows;
  std::size_t cols;
};

struct MutMatView {
  double* data;
  std::size_t rows;
  std::size_t cols;
};

namespace serial {
/// C += A * B. Zero entries of A are skipped (inputs are sparse rasters).
void gemm_nn_acc(MatView a, MatView b, MutMatView c);
/// C += A^T * B. Zero entries of A are skipped.
void gemm_tn_acc(MatView a, MatView b, MutMatView c);
/// C += A * B^T.
void gemm_nt_acc(MatView a, MatView b, MutMatView c);
/// gate[i] = sigmoid(beta * s[i]); out[i] = w[i] * gate[i].
void soft_mask(std::span<const double> w, std::span<const double> s, double beta,
               std::span<double> gate, std::span<double> out);
/// For each block of `group` consecutive rows of E, logits[g, i] = -sum_{j != i} e_i . e_j.
void odd_one_out_logits(MatView e, std::size_t group, std::span<double> logits);
}  // namespace serial

namespace omp {
void gemm_nn_acc(MatView a, MatView b, MutMatView c);
void gemm_tn_acc(MatView a, MatView b, MutMatView c);
void gemm_nt_acc(MatView a, MatView b, MutMatView c);
void soft_mask(std::span<const double> w, std::span<const double> s, double beta,
               std::span<double> gate, std::span<double> out);
void odd_one_out_logits(MatView e, std::size_t group, std::span<double> logits);

/// Threads the OpenMP kernels will use (1 when built without OpenMP).
int max_threads();
/// Sets the OpenMP thread count for the calling thread; no-op without OpenMP.
void set_threads(int n);
}  // namespace omp

// Default dispatch used by the library.
using omp::gemm_nn_acc;
using omp::gemm_nt_acc;
using omp::gemm_tn_acc;
using omp::odd_one_out_logits;
using omp::soft_mask;

}  // namespace compostruct::kernels
