#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

namespace pcqa::ad::detail {

// C[M,N] (+)= op(A)[M,K] * op(B)[K,N] over row-major storage. With trans_a the
// buffer A holds [K,M]; with trans_b the buffer B holds [N,K]. Each output
// element accumulates over k in ascending order, independent of the thread
// count.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  if (m == 0 || n == 0 || k == 0) return;
  std::vector<T> bt;
  if (trans_b) {
    bt.resize(static_cast<std::size_t>(k * n));
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    b = bt.data();
  }
  constexpr std::int64_t kBlockK = 128;
  constexpr std::int64_t kBlockN = 512;
  for (std::int64_t j0 = 0; j0 < n; j0 += kBlockN) {
    const std::int64_t j1 = std::min(n, j0 + kBlockN);
    for (std::int64_t p0 = 0; p0 < k; p0 += kBlockK) {
      const std::int64_t p1 = std::min(k, p0 + kBlockK);
#pragma omp parallel for schedule(static) if (m * (j1 - j0) * (p1 - p0) > 32768)
      for (std::int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::int64_t p = p0; p < p1; ++p) {
          const T av = trans_a ? a[p * m + i] : a[i * k + p];
          const T* brow = b + p * n;
          for (std::int64_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

}  // namespace pcqa::ad::detail
