#include "pialm/tensor.hpp"

#include <vector>

namespace pialm {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace kernels {

template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      if (aip == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  if (m < 4) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T s = c[i * n + j];
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        c[i * n + j] = s;
      }
    }
    return;
  }
  // Transposing b once lets the inner loop run over contiguous memory; the
  // summation order over p is the same as the direct branch above.
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = bt.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = arow[i];
      if (api == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

template void gemm_nn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_nn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void gemm_nt<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_nt<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void gemm_tn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_tn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);

}  // namespace kernels
}  // namespace pialm
