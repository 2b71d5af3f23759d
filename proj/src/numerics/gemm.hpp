#pragma once

namespace badseg::detail {

// C[m,n] = beta·C + op(A)·op(B), op(A) is m×k, op(B) is k×n.
void gemm(bool transpose_a, bool transpose_b, int m, int n, int k, const float* a,
          const float* b, float beta, float* c);

}  // namespace badseg::detail
