#include "gemm.hpp"

#include <vector>

namespace badseg::detail {

namespace {

void gemm_nn(int m, int n, int k, const float* a, int lda, bool a_cols, const float* b, float* c) {
  // a_cols: A stored transposed (k×m), element (i,p) at a[p*lda + i]
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<long>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = a_cols ? a[static_cast<long>(p) * lda + i] : a[static_cast<long>(i) * lda + p];
      if (av == 0.0f) continue;
      const float* brow = b + static_cast<long>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

void gemm(bool transpose_a, bool transpose_b, int m, int n, int k, const float* a,
          const float* b, float beta, float* c) {
  const long mn = static_cast<long>(m) * n;
  if (beta == 0.0f) {
    for (long i = 0; i < mn; ++i) c[i] = 0.0f;
  } else if (beta != 1.0f) {
    for (long i = 0; i < mn; ++i) c[i] *= beta;
  }
  if (transpose_b) {
    // B stored n×k; repack to k×n so the inner loop streams contiguously.
    std::vector<float> bt(static_cast<std::size_t>(k) * n);
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) bt[static_cast<std::size_t>(p) * n + j] = b[static_cast<long>(j) * k + p];
    gemm_nn(m, n, k, a, transpose_a ? m : k, transpose_a, bt.data(), c);
  } else {
    gemm_nn(m, n, k, a, transpose_a ? m : k, transpose_a, b, c);
  }
}

}  // namespace badseg::detail
