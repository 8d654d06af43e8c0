#include "flowseg/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <vector>

#include "flowseg/errors.hpp"

namespace flowseg::kernels {
namespace {

// Below this many multiply-adds the thread fork costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 15;

void check_sizes(std::size_t na, std::size_t nb, std::size_t nc, std::size_t m, std::size_t k,
                 std::size_t n) {
  if (na != m * k || nb != k * n || nc != m * n) throw ShapeError("gemm operand size mismatch");
}

// Register tile of MR rows x NR columns. Each output element still sums its
// products in ascending p, exactly like the serial triple loop; mul and add
// stay separate (no contraction), so the results agree bitwise.
constexpr std::size_t MR = 4, NR = 16;
typedef double v8d __attribute__((vector_size(64)));

inline v8d load8(const double* p) {
  v8d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
inline void store8(double* p, v8d v) { std::memcpy(p, &v, sizeof v); }

template <std::size_t R>
inline void tile(const double* a, const double* b, double* c, std::size_t k, std::size_t n,
                 bool accumulate) {
  v8d lo[R], hi[R];
  for (std::size_t r = 0; r < R; ++r) {
    if (accumulate) {
      lo[r] = load8(c + r * n);
      hi[r] = load8(c + r * n + 8);
    } else {
      lo[r] = v8d{};
      hi[r] = v8d{};
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const v8d b0 = load8(b + p * n), b1 = load8(b + p * n + 8);
    for (std::size_t r = 0; r < R; ++r) {
      const double ar = a[r * k + p];
      lo[r] += ar * b0;
      hi[r] += ar * b1;
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    store8(c + r * n, lo[r]);
    store8(c + r * n + 8, hi[r]);
  }
}

// Eight-column variant for the tail.
template <std::size_t R>
inline void tile8(const double* a, const double* b, double* c, std::size_t k, std::size_t n,
                  bool accumulate) {
  v8d acc[R];
  for (std::size_t r = 0; r < R; ++r) acc[r] = accumulate ? load8(c + r * n) : v8d{};
  for (std::size_t p = 0; p < k; ++p) {
    const v8d bp = load8(b + p * n);
    for (std::size_t r = 0; r < R; ++r) acc[r] += a[r * k + p] * bp;
  }
  for (std::size_t r = 0; r < R; ++r) store8(c + r * n, acc[r]);
}

// Ragged edge: same order, no fixed trip counts.
inline void edge(const double* a, const double* b, double* c, std::size_t rows, std::size_t cols,
                 std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      double s = accumulate ? c[r * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[r * k + p] * b[p * n + j];
      c[r * n + j] = s;
    }
  }
}

// Rows [i0, i0 + rows) of C = A B with A (m x k), B (k x n), both row-major.
inline void row_block(const double* a, const double* b, double* c, std::size_t rows, std::size_t k,
                      std::size_t n, bool accumulate) {
  std::size_t j = 0;
  if (rows == MR) {
    for (; j + NR <= n; j += NR) tile<MR>(a, b + j, c + j, k, n, accumulate);
    for (; j + 8 <= n; j += 8) tile8<MR>(a, b + j, c + j, k, n, accumulate);
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t jj = 0;
      for (; jj + NR <= n; jj += NR) tile<1>(a + r * k, b + jj, c + r * n + jj, k, n, accumulate);
      for (; jj + 8 <= n; jj += 8) tile8<1>(a + r * k, b + jj, c + r * n + jj, k, n, accumulate);
      j = jj;
    }
  }
  if (j < n) edge(a, b + j, c + j, rows, n - j, k, n, accumulate);
}

void gemm_rowmajor(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate) {
  const long long blocks = static_cast<long long>((m + MR - 1) / MR);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (long long ib = 0; ib < blocks; ++ib) {
    const std::size_t i = static_cast<std::size_t>(ib) * MR;
    row_block(a + i * k, b, c + i * n, std::min(MR, m - i), k, n, accumulate);
  }
}

std::vector<double> transpose(std::span<const double> x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  return t;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Felzenszwalb-Huttenlocher lower envelope of parabolas over one line.
void edt_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v,
            std::vector<double>& z) {
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] < kInf) {
      first = q;
      break;
    }
  }
  if (first == n) {
    std::fill(d, d + n, kInf);
    return;
  }
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (!(f[q] < kInf)) continue;
    const double fq = f[q] + static_cast<double>(q) * static_cast<double>(q);
    auto intersect = [&](std::size_t vk) {
      const double fv = f[vk] + static_cast<double>(vk) * static_cast<double>(vk);
      return (fq - fv) / (2.0 * (static_cast<double>(q) - static_cast<double>(vk)));
    };
    double s = intersect(v[k]);
    // z[0] is -inf, so this terminates with k >= 0.
    while (s <= z[k]) {
      --k;
      s = intersect(v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

template <bool Parallel>
void edt_impl(std::span<const unsigned char> feature, std::span<double> out, std::size_t rows,
              std::size_t cols) {
  if (feature.size() != rows * cols || out.size() != rows * cols) {
    throw ShapeError("squared_edt size mismatch");
  }
  std::vector<double> tmp(rows * cols);
  const long long ncols = static_cast<long long>(cols);
  const long long nrows = static_cast<long long>(rows);
#pragma omp parallel if (Parallel && rows * cols >= 4096)
  {
    std::vector<double> f(std::max(rows, cols));
    std::vector<double> d(std::max(rows, cols));
    std::vector<std::size_t> v;
    std::vector<double> z;
#pragma omp for schedule(static)
    for (long long c = 0; c < ncols; ++c) {
      for (std::size_t r = 0; r < rows; ++r) f[r] = feature[r * cols + c] ? 0.0 : kInf;
      edt_1d(f.data(), d.data(), rows, v, z);
      for (std::size_t r = 0; r < rows; ++r) tmp[r * cols + c] = d[r];
    }
#pragma omp for schedule(static)
    for (long long r = 0; r < nrows; ++r) {
      edt_1d(tmp.data() + r * cols, out.data() + r * cols, cols, v, z);
    }
  }
}

}  // namespace

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a.size(), b.size(), c.size(), m, k, n);
  gemm_rowmajor(a.data(), b.data(), c.data(), m, k, n, accumulate);
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a.size(), b.size(), c.size(), m, k, n);
  const std::vector<double> bt = transpose(b, n, k);
  gemm_rowmajor(a.data(), bt.data(), c.data(), m, k, n, accumulate);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a.size(), b.size(), c.size(), m, k, n);
  const std::vector<double> at = transpose(a, k, m);
  gemm_rowmajor(at.data(), b.data(), c.data(), m, k, n, accumulate);
}

void squared_edt(std::span<const unsigned char> feature, std::span<double> out,
                 std::size_t rows, std::size_t cols) {
  edt_impl<true>(feature, out, rows, cols);
}

namespace serial {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a.size(), b.size(), c.size(), m, k, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a.size(), b.size(), c.size(), m, k, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] = s;
    }
  }
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  check_sizes(a.size(), b.size(), c.size(), m, k, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

void squared_edt(std::span<const unsigned char> feature, std::span<double> out,
                 std::size_t rows, std::size_t cols) {
  edt_impl<false>(feature, out, rows, cols);
}

}  // namespace serial
}  // namespace flowseg::kernels
