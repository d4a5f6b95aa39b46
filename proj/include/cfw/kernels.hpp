#pragma once

// Raw loops shared by the taped ops. Layout: sequences are [N, C, T], kernels [Cout, Cin, K],
// "same" padding with odd K. The innermost loop always runs over time so it vectorizes.

#include <algorithm>
#include <cstddef>

namespace cfw::kernels {

struct ConvDims {
  std::size_t n, cin, cout, len, k;
  std::ptrdiff_t pad() const { return static_cast<std::ptrdiff_t>(k / 2); }
};

// Valid output range [lo, hi) of t for tap offset s, so that 0 <= t + s < len.
inline void tap_range(std::ptrdiff_t s, std::size_t len, std::size_t& lo, std::size_t& hi) {
  std::ptrdiff_t l = std::max<std::ptrdiff_t>(0, -s);
  std::ptrdiff_t h = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(len), static_cast<std::ptrdiff_t>(len) - s);
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(std::max(l, h));
}

/// out[n,co,t] = b[co] + sum_{ci,k} w[co,ci,k] * x[n,ci,t+k-pad]
template <class S>
void conv1d_forward(const ConvDims& d, const S* x, const S* w, const S* b, S* out) {
  const std::size_t T = d.len;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      S* o = out + (n * d.cout + co) * T;
      std::fill(o, o + T, b ? b[co] : S(0));
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const S* xi = x + (n * d.cin + ci) * T;
        const S* wk = w + (co * d.cin + ci) * d.k;
        for (std::size_t k = 0; k < d.k; ++k) {
          const S wv = wk[k];
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(k) - d.pad();
          std::size_t lo, hi;
          tap_range(s, T, lo, hi);
          const S* xs = xi + s;
#pragma omp simd
          for (std::size_t t = lo; t < hi; ++t) o[t] += wv * xs[t];
        }
      }
    }
  }
}

/// gx[n,ci,t+k-pad] += w[co,ci,k] * g[n,co,t]   (adjoint of conv1d_forward w.r.t. x)
template <class S>
void conv1d_backward_data(const ConvDims& d, const S* g, const S* w, S* gx) {
  const std::size_t T = d.len;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t ci = 0; ci < d.cin; ++ci) {
      S* gxi = gx + (n * d.cin + ci) * T;
      for (std::size_t co = 0; co < d.cout; ++co) {
        const S* go = g + (n * d.cout + co) * T;
        const S* wk = w + (co * d.cin + ci) * d.k;
        for (std::size_t k = 0; k < d.k; ++k) {
          const S wv = wk[k];
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(k) - d.pad();
          std::size_t lo, hi;
          tap_range(s, T, lo, hi);
          S* dst = gxi + s;
#pragma omp simd
          for (std::size_t t = lo; t < hi; ++t) dst[t] += wv * go[t];
        }
      }
    }
  }
}

/// gw[co,ci,k] += sum_{n,t} g[n,co,t] * x[n,ci,t+k-pad]
template <class S>
void conv1d_backward_weight(const ConvDims& d, const S* g, const S* x, S* gw) {
  const std::size_t T = d.len;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      const S* go = g + (n * d.cout + co) * T;
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const S* xi = x + (n * d.cin + ci) * T;
        S* gwk = gw + (co * d.cin + ci) * d.k;
        for (std::size_t k = 0; k < d.k; ++k) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(k) - d.pad();
          std::size_t lo, hi;
          tap_range(s, T, lo, hi);
          const S* xs = xi + s;
          S acc = 0;
#pragma omp simd reduction(+ : acc)
          for (std::size_t t = lo; t < hi; ++t) acc += go[t] * xs[t];
          gwk[k] += acc;
        }
      }
    }
  }
}

/// y[n,r] = b[r] + sum_c W[r,c] x[n,c]
template <class S>
void linear_forward(std::size_t n, std::size_t in, std::size_t out, const S* x, const S* W, const S* b, S* y) {
  for (std::size_t i = 0; i < n; ++i) {
    const S* xi = x + i * in;
    for (std::size_t r = 0; r < out; ++r) {
      const S* wr = W + r * in;
      S acc = 0;
#pragma omp simd reduction(+ : acc)
      for (std::size_t c = 0; c < in; ++c) acc += wr[c] * xi[c];
      y[i * out + r] = acc + (b ? b[r] : S(0));
    }
  }
}

/// gx[n,c] += sum_r W[r,c] g[n,r]
template <class S>
void linear_backward_data(std::size_t n, std::size_t in, std::size_t out, const S* g, const S* W, S* gx) {
  for (std::size_t i = 0; i < n; ++i) {
    S* gxi = gx + i * in;
    for (std::size_t r = 0; r < out; ++r) {
      const S gv = g[i * out + r];
      const S* wr = W + r * in;
#pragma omp simd
      for (std::size_t c = 0; c < in; ++c) gxi[c] += gv * wr[c];
    }
  }
}

/// gW[r,c] += sum_n g[n,r] x[n,c]
template <class S>
void linear_backward_weight(std::size_t n, std::size_t in, std::size_t out, const S* g, const S* x, S* gW) {
  for (std::size_t i = 0; i < n; ++i) {
    const S* xi = x + i * in;
    for (std::size_t r = 0; r < out; ++r) {
      const S gv = g[i * out + r];
      S* gwr = gW + r * in;
#pragma omp simd
      for (std::size_t c = 0; c < in; ++c) gwr[c] += gv * xi[c];
    }
  }
}

}  // namespace cfw::kernels
