#include "arvsr/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <cblas.h>

#include "arvsr/core/errors.hpp"

namespace arvsr {

using detail::make_result;
using detail::Node;

namespace {

int norm_dim(int dim, int rank) {
  const int d = dim < 0 ? dim + rank : dim;
  if (d < 0 || d >= rank) throw ShapeError("dimension " + std::to_string(dim) + " out of range for rank " + std::to_string(rank));
  return d;
}

bool needs(const Node& self, size_t i) { return self.inputs[i]->requires_grad; }

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
  Shape out;
  std::vector<int64_t> sa, sb;  // per output dim; 0 where broadcast
  bool same = false;
};

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  const auto ast = contiguous_strides(a);
  const auto bst = contiguous_strides(b);
  for (size_t i = 0; i < r; ++i) {
    const int ia = static_cast<int>(i) - static_cast<int>(r - a.size());
    const int ib = static_cast<int>(i) - static_cast<int>(r - b.size());
    const int64_t da = ia >= 0 ? a[ia] : 1;
    const int64_t db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(da, db);
    if (da == db && da == 0) p.out[i] = 0;
    p.sa[i] = (ia >= 0 && da != 1) ? ast[ia] : 0;
    p.sb[i] = (ib >= 0 && db != 1) ? bst[ib] : 0;
  }
  return p;
}

template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const int64_t n = shape_numel(p.out);
  if (p.same) {
    for (int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const int r = static_cast<int>(p.out.size());
  std::vector<int64_t> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[d] < p.out[d]) {
        oa += p.sa[d];
        ob += p.sb[d];
        break;
      }
      oa -= p.sa[d] * (p.out[d] - 1);
      ob -= p.sb[d] * (p.out[d] - 1);
      idx[d] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  Broadcast p = plan_broadcast(a.shape(), b.shape());
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(shape_numel(p.out));
  switch (op) {
    case BinOp::kAdd: for_each_broadcast(p, [&](int64_t i, int64_t ia, int64_t ib) { out[i] = av[ia] + bv[ib]; }); break;
    case BinOp::kSub: for_each_broadcast(p, [&](int64_t i, int64_t ia, int64_t ib) { out[i] = av[ia] - bv[ib]; }); break;
    case BinOp::kMul: for_each_broadcast(p, [&](int64_t i, int64_t ia, int64_t ib) { out[i] = av[ia] * bv[ib]; }); break;
    case BinOp::kDiv: for_each_broadcast(p, [&](int64_t i, int64_t ia, int64_t ib) { out[i] = av[ia] / bv[ib]; }); break;
  }
  Shape out_shape = p.out;
  return make_result(std::move(out_shape), promote(a.dtype(), b.dtype()), std::move(out), name, {a, b},
                     [p = std::move(p), op](Node& self) {
                       const auto& g = self.grad;
                       const auto& av = self.inputs[0]->value;
                       const auto& bv = self.inputs[1]->value;
                       const bool ga = needs(self, 0), gb = needs(self, 1);
                       double* da = ga ? self.inputs[0]->grad_buffer().data() : nullptr;
                       double* db = gb ? self.inputs[1]->grad_buffer().data() : nullptr;
                       for_each_broadcast(p, [&](int64_t i, int64_t ia, int64_t ib) {
                         switch (op) {
                           case BinOp::kAdd:
                             if (da) da[ia] += g[i];
                             if (db) db[ib] += g[i];
                             break;
                           case BinOp::kSub:
                             if (da) da[ia] += g[i];
                             if (db) db[ib] -= g[i];
                             break;
                           case BinOp::kMul:
                             if (da) da[ia] += g[i] * bv[ib];
                             if (db) db[ib] += g[i] * av[ia];
                             break;
                           case BinOp::kDiv:
                             if (da) da[ia] += g[i] / bv[ib];
                             if (db) db[ib] -= g[i] * av[ia] / (bv[ib] * bv[ib]);
                             break;
                         }
                       });
                     });
}

// Unary op whose derivative is expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(x.shape(), x.dtype(), std::move(out), name, {x}, [deriv](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const auto& xv = self.inputs[0]->value;
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(xv[i], self.value[i]);
  });
}

// [outer, n, inner] decomposition around `dim`.
struct Split3 {
  int64_t outer = 1, n = 1, inner = 1;
};

Split3 split_at(const Shape& s, int dim) {
  Split3 r;
  for (int i = 0; i < dim; ++i) r.outer *= s[i];
  r.n = s[dim];
  for (size_t i = dim + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, A, k, B, n, 1.0, C, n);
}

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt(const double* A, const double* B, double* C, int64_t m, int64_t n, int64_t k) {
  if (m == 0 || n == 0 || k == 0) return;
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0, A, n, B, n, 1.0, C, k);
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0, A, k, B, n, 1.0, C, n);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kDiv, "div"); }

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary(x, "mul_scalar", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& x) {
  return unary(x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor square(const Tensor& x) {
  return unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, "silu", [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  const auto xv = x.data();
  double s = 0.0;
  for (double v : xv) s += v;
  return make_result({}, x.dtype(), {s}, "sum", {x}, [](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const double g = self.grad[0];
    for (double& v : gx) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_dim(const Tensor& x, int dim, bool keepdim) {
  const int d = norm_dim(dim, x.rank());
  const Split3 s = split_at(x.shape(), d);
  const auto xv = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t k = 0; k < s.n; ++k) {
      const double* src = xv.data() + (o * s.n + k) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  Shape shape = x.shape();
  if (keepdim) {
    shape[d] = 1;
  } else {
    shape.erase(shape.begin() + d);
  }
  return make_result(std::move(shape), x.dtype(), std::move(out), "sum_dim", {x}, [s](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (int64_t o = 0; o < s.outer; ++o)
      for (int64_t k = 0; k < s.n; ++k) {
        double* dst = gx.data() + (o * s.n + k) * s.inner;
        const double* g = self.grad.data() + o * s.inner;
        for (int64_t i = 0; i < s.inner; ++i) dst[i] += g[i];
      }
  });
}

Tensor mean_dim(const Tensor& x, int dim, bool keepdim) {
  const int d = norm_dim(dim, x.rank());
  return mul_scalar(sum_dim(x, d, keepdim), 1.0 / static_cast<double>(x.shape()[d]));
}

Tensor reshape(const Tensor& x, Shape shape) {
  int infer = -1;
  int64_t known = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) throw ShapeError("reshape: cannot infer dimension for " + shape_str(x.shape()));
    shape[infer] = x.numel() / known;
  }
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> v(x.data().begin(), x.data().end());
  return make_result(std::move(shape), x.dtype(), std::move(v), "reshape", {x}, [](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r) throw ShapeError("permute: order size does not match rank");
  std::vector<int> seen(r, 0);
  for (int o : order) {
    if (o < 0 || o >= r || seen[o]++) throw ShapeError("permute: invalid order");
  }
  const Shape& in = x.shape();
  const auto in_st = contiguous_strides(in);
  Shape out_shape(r);
  std::vector<int64_t> src_st(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = in[order[i]];
    src_st[i] = in_st[order[i]];
  }
  // Gather index table shared by forward and backward.
  const int64_t n = x.numel();
  auto index = std::make_shared<std::vector<int64_t>>(n);
  {
    std::vector<int64_t> idx(r, 0);
    int64_t off = 0;
    for (int64_t i = 0; i < n; ++i) {
      (*index)[i] = off;
      for (int d = r - 1; d >= 0; --d) {
        if (++idx[d] < out_shape[d]) {
          off += src_st[d];
          break;
        }
        off -= src_st[d] * (out_shape[d] - 1);
        idx[d] = 0;
      }
    }
  }
  const auto xv = x.data();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = xv[(*index)[i]];
  return make_result(std::move(out_shape), x.dtype(), std::move(out), "permute", {x}, [index](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (size_t i = 0; i < index->size(); ++i) gx[(*index)[i]] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x, int a, int b) {
  const int r = x.rank();
  std::vector<int> order(r);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[norm_dim(a, r)], order[norm_dim(b, r)]);
  return permute(x, order);
}

Tensor slice(const Tensor& x, int dim, int64_t start, int64_t end) {
  const int d = norm_dim(dim, x.rank());
  const Split3 s = split_at(x.shape(), d);
  if (start < 0 || end > s.n || start > end) {
    throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(end) + ") out of range for extent " +
                     std::to_string(s.n));
  }
  const int64_t len = end - start;
  const auto xv = x.data();
  std::vector<double> out(s.outer * len * s.inner);
  for (int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.data() + (o * s.n + start) * s.inner, len * s.inner, out.data() + o * len * s.inner);
  }
  Shape shape = x.shape();
  shape[d] = len;
  return make_result(std::move(shape), x.dtype(), std::move(out), "slice", {x}, [s, start, len](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (int64_t o = 0; o < s.outer; ++o) {
      double* dst = gx.data() + (o * s.n + start) * s.inner;
      const double* g = self.grad.data() + o * len * s.inner;
      for (int64_t i = 0; i < len * s.inner; ++i) dst[i] += g[i];
    }
  });
}

Tensor concat(std::span<const Tensor> parts, int dim) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int d = norm_dim(dim, parts[0].rank());
  Shape shape = parts[0].shape();
  DType dtype = parts[0].dtype();
  int64_t total = 0;
  std::vector<int64_t> extents;
  for (const Tensor& t : parts) {
    if (t.rank() != static_cast<int>(shape.size())) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < t.rank(); ++i) {
      if (i != d && t.shape()[i] != shape[i]) {
        throw ShapeError("concat shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(shape));
      }
    }
    extents.push_back(t.shape()[d]);
    total += t.shape()[d];
    dtype = promote(dtype, t.dtype());
  }
  shape[d] = total;
  const Split3 s = split_at(shape, d);
  std::vector<double> out(shape_numel(shape));
  int64_t offset = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].data();
    const int64_t len = extents[p];
    for (int64_t o = 0; o < s.outer; ++o) {
      std::copy_n(v.data() + o * len * s.inner, len * s.inner, out.data() + (o * total + offset) * s.inner);
    }
    offset += len;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result(std::move(shape), dtype, std::move(out), "concat", std::move(inputs),
                     [s, extents, total](Node& self) {
                       int64_t offset = 0;
                       for (size_t p = 0; p < extents.size(); ++p) {
                         const int64_t len = extents[p];
                         if (self.inputs[p]->requires_grad) {
                           auto& gx = self.inputs[p]->grad_buffer();
                           for (int64_t o = 0; o < s.outer; ++o) {
                             const double* g = self.grad.data() + (o * total + offset) * s.inner;
                             double* dst = gx.data() + o * len * s.inner;
                             for (int64_t i = 0; i < len * s.inner; ++i) dst[i] += g[i];
                           }
                         }
                         offset += len;
                       }
                     });
}

Tensor upsample_nearest2d(const Tensor& x, int factor) {
  if (x.rank() < 2 || factor < 1) throw ShapeError("upsample_nearest2d needs rank >= 2 and factor >= 1");
  const int64_t h = x.size(-2), w = x.size(-1);
  const int64_t planes = x.numel() / std::max<int64_t>(1, h * w);
  const int64_t oh = h * factor, ow = w * factor;
  const auto xv = x.data();
  std::vector<double> out(planes * oh * ow);
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t i = 0; i < oh; ++i) {
      const double* src = xv.data() + (p * h + i / factor) * w;
      double* dst = out.data() + (p * oh + i) * ow;
      for (int64_t j = 0; j < ow; ++j) dst[j] = src[j / factor];
    }
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  return make_result(std::move(shape), x.dtype(), std::move(out), "upsample_nearest2d", {x},
                     [planes, h, w, factor](Node& self) {
                       auto& gx = self.inputs[0]->grad_buffer();
                       const int64_t oh = h * factor, ow = w * factor;
                       for (int64_t p = 0; p < planes; ++p)
                         for (int64_t i = 0; i < oh; ++i) {
                           double* dst = gx.data() + (p * h + i / factor) * w;
                           const double* g = self.grad.data() + (p * oh + i) * ow;
                           for (int64_t j = 0; j < ow; ++j) dst[j / factor] += g[j];
                         }
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2 operands");
  const int64_t m = a.size(-2), k = a.size(-1);
  const int64_t n = b.size(-1);
  if (b.size(-2) != k) throw ShapeError("matmul inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const bool shared_b = b.rank() == 2;
  int64_t batch = 1;
  for (int i = 0; i < a.rank() - 2; ++i) batch *= a.shape()[i];
  if (!shared_b) {
    if (b.rank() != a.rank()) throw ShapeError("matmul batch rank mismatch");
    for (int i = 0; i < a.rank() - 2; ++i) {
      if (a.shape()[i] != b.shape()[i]) throw ShapeError("matmul batch mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
  }
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(batch * m * n, 0.0);
  if (shared_b) {
    gemm_nn(av.data(), bv.data(), out.data(), batch * m, k, n);
  } else {
    for (int64_t q = 0; q < batch; ++q) {
      gemm_nn(av.data() + q * m * k, bv.data() + q * k * n, out.data() + q * m * n, m, k, n);
    }
  }
  Shape shape = a.shape();
  shape.back() = n;
  return make_result(std::move(shape), promote(a.dtype(), b.dtype()), std::move(out), "matmul", {a, b},
                     [batch, m, k, n, shared_b](Node& self) {
                       const auto& av = self.inputs[0]->value;
                       const auto& bv = self.inputs[1]->value;
                       const auto& g = self.grad;
                       if (needs(self, 0)) {
                         auto& ga = self.inputs[0]->grad_buffer();
                         if (shared_b) {
                           gemm_nt(g.data(), bv.data(), ga.data(), batch * m, n, k);
                         } else {
                           for (int64_t q = 0; q < batch; ++q)
                             gemm_nt(g.data() + q * m * n, bv.data() + q * k * n, ga.data() + q * m * k, m, n, k);
                         }
                       }
                       if (needs(self, 1)) {
                         auto& gb = self.inputs[1]->grad_buffer();
                         if (shared_b) {
                           gemm_tn(av.data(), g.data(), gb.data(), batch * m, k, n);
                         } else {
                           for (int64_t q = 0; q < batch; ++q)
                             gemm_tn(av.data() + q * m * k, g.data() + q * m * n, gb.data() + q * k * n, m, k, n);
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("softmax of a scalar");
  const int64_t d = x.size(-1);
  const int64_t rows = d == 0 ? 0 : x.numel() / d;
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * d;
    double* dst = out.data() + r * d;
    double mx = src[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, src[j]);
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      dst[j] = std::exp(src[j] - mx);
      s += dst[j];
    }
    const double inv = 1.0 / s;
    for (int64_t j = 0; j < d; ++j) dst[j] *= inv;
  }
  return make_result(x.shape(), x.dtype(), std::move(out), "softmax", {x}, [rows, d](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* g = self.grad.data() + r * d;
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += g[j] * y[j];
      double* dst = gx.data() + r * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, double eps) {
  const int64_t d = x.size(-1);
  const int64_t rows = x.numel() / d;
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += src[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int64_t j = 0; j < d; ++j) {
      (*xhat)[r * d + j] = (src[j] - mu) * rs;
      out[r * d + j] = (*xhat)[r * d + j];
    }
  }
  return make_result(x.shape(), x.dtype(), std::move(out), "layer_norm", {x}, [rows, d, rstd, xhat](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (int64_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * d;
      const double* xh = xhat->data() + r * d;
      double mg = 0.0, mgx = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        mg += g[j];
        mgx += g[j] * xh[j];
      }
      mg /= static_cast<double>(d);
      mgx /= static_cast<double>(d);
      double* dst = gx.data() + r * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += (*rstd)[r] * (g[j] - mg - xh[j] * mgx);
    }
  });
}

Shape conv3d_output_shape(const Shape& x, const Shape& w, const Conv3dOptions& opt) {
  if (x.size() != 5 || w.size() != 5) throw ShapeError("conv3d expects 5-d input and weight");
  if (x[1] != w[1]) throw ShapeError("conv3d channel mismatch: input " + shape_str(x) + " weight " + shape_str(w));
  const int64_t t = x[2] + opt.pad_t_front + opt.pad_t_back - w[2];
  const int64_t h = x[3] + 2 * opt.pad_h - w[3];
  const int64_t ww = x[4] + 2 * opt.pad_w - w[4];
  if (t < 0 || h < 0 || ww < 0) throw ShapeError("conv3d kernel larger than padded input " + shape_str(x));
  return {x[0], w[0], t / opt.stride[0] + 1, h / opt.stride[1] + 1, ww / opt.stride[2] + 1};
}

namespace {

struct ConvGeom {
  int64_t B, Ci, T, H, W, Co, KT, KH, KW, To, Ho, Wo;
  int st, sh, sw, pt, ph, pw;

  int64_t K() const { return Ci * KT * KH * KW; }
  int64_t P() const { return To * Ho * Wo; }
};

// Output positions go through gemm in fixed-width column tiles, zero-padded at
// the end, so every output element sees the same kernel and summation order
// whatever the spatial extent. decode_local relies on this for exactness.
constexpr int64_t kConvTile = 256;

// A tile is a few runs of consecutive output columns along one output row.
struct TileRun {
  int64_t c, len, t0, h0, w0;  // first column, run length, input origin of the first column
};

struct TileCoords {
  int64_t n = 0;
  std::vector<TileRun> runs;
};

TileCoords tile_coords(const ConvGeom& g, int64_t p0) {
  TileCoords tc;
  tc.n = std::min(kConvTile, g.P() - p0);
  for (int64_t c = 0; c < tc.n;) {
    const int64_t p = p0 + c;
    const int64_t wo = p % g.Wo;
    const int64_t len = std::min(g.Wo - wo, tc.n - c);
    tc.runs.push_back({c, len, (p / (g.Wo * g.Ho)) * g.st - g.pt, ((p / g.Wo) % g.Ho) * g.sh - g.ph, wo * g.sw - g.pw});
    c += len;
  }
  return tc;
}

// Columns j of the run whose input column w0 + kw + j*sw lies inside [0, W).
std::pair<int64_t, int64_t> valid_span(const ConvGeom& g, const TileRun& r, int64_t kw) {
  const int64_t first = r.w0 + kw;
  int64_t lo = first >= 0 ? 0 : (-first + g.sw - 1) / g.sw;
  int64_t hi = first > g.W - 1 ? 0 : (g.W - 1 - first) / g.sw + 1;
  hi = std::min(hi, r.len);
  return {std::min(lo, hi), hi};
}

// col[k, c] for output positions p0 .. p0+kConvTile (zero past P or in padding).
void im2col_tile(const ConvGeom& g, const double* x, const TileCoords& tc, double* col) {
  std::fill(col, col + g.K() * kConvTile, 0.0);
  int64_t k = 0;
  for (int64_t ci = 0; ci < g.Ci; ++ci)
    for (int64_t kt = 0; kt < g.KT; ++kt)
      for (int64_t kh = 0; kh < g.KH; ++kh)
        for (int64_t kw = 0; kw < g.KW; ++kw, ++k) {
          double* row = col + k * kConvTile;
          for (const TileRun& r : tc.runs) {
            const int64_t ti = r.t0 + kt, hi = r.h0 + kh;
            if (ti < 0 || ti >= g.T || hi < 0 || hi >= g.H) continue;
            const double* src = x + ((ci * g.T + ti) * g.H + hi) * g.W + r.w0 + kw;
            const auto [lo, up] = valid_span(g, r, kw);
            double* dst = row + r.c;
            if (g.sw == 1) {
              std::copy(src + lo, src + up, dst + lo);
            } else {
              for (int64_t j = lo; j < up; ++j) dst[j] = src[j * g.sw];
            }
          }
        }
}

void col2im_tile(const ConvGeom& g, const double* col, const TileCoords& tc, double* gx) {
  int64_t k = 0;
  for (int64_t ci = 0; ci < g.Ci; ++ci)
    for (int64_t kt = 0; kt < g.KT; ++kt)
      for (int64_t kh = 0; kh < g.KH; ++kh)
        for (int64_t kw = 0; kw < g.KW; ++kw, ++k) {
          const double* row = col + k * kConvTile;
          for (const TileRun& r : tc.runs) {
            const int64_t ti = r.t0 + kt, hi = r.h0 + kh;
            if (ti < 0 || ti >= g.T || hi < 0 || hi >= g.H) continue;
            double* dst = gx + ((ci * g.T + ti) * g.H + hi) * g.W + r.w0 + kw;
            const auto [lo, up] = valid_span(g, r, kw);
            const double* src = row + r.c;
            for (int64_t j = lo; j < up; ++j) dst[j * g.sw] += src[j];
          }
        }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv3dOptions& opt) {
  const Shape out_shape = conv3d_output_shape(x.shape(), weight.shape(), opt);
  if (bias.defined() && (bias.rank() != 1 || bias.size(0) != weight.size(0))) throw ShapeError("conv3d bias shape mismatch");
  ConvGeom g{x.size(0), x.size(1), x.size(2), x.size(3), x.size(4), weight.size(0), weight.size(2), weight.size(3),
             weight.size(4), out_shape[2], out_shape[3], out_shape[4], opt.stride[0], opt.stride[1], opt.stride[2],
             opt.pad_t_front, opt.pad_h, opt.pad_w};
  const int64_t K = g.K(), P = g.P(), in_vol = g.Ci * g.T * g.H * g.W;
  const auto xv = x.data();
  const auto wv = weight.data();
  std::vector<double> out(shape_numel(out_shape), 0.0);
  std::vector<double> col(K * kConvTile), acc(g.Co * kConvTile);
  for (int64_t b = 0; b < g.B; ++b)
    for (int64_t p0 = 0; p0 < P; p0 += kConvTile) {
      const TileCoords tc = tile_coords(g, p0);
      im2col_tile(g, xv.data() + b * in_vol, tc, col.data());
      for (int64_t co = 0; co < g.Co; ++co)
        std::fill_n(acc.data() + co * kConvTile, kConvTile, bias.defined() ? bias.data()[co] : 0.0);
      gemm_nn(wv.data(), col.data(), acc.data(), g.Co, K, kConvTile);
      const int64_t n = tc.n;
      for (int64_t co = 0; co < g.Co; ++co)
        std::copy_n(acc.data() + co * kConvTile, n, out.data() + (b * g.Co + co) * P + p0);
    }
  std::vector<Tensor> inputs = {x, weight};
  if (bias.defined()) inputs.push_back(bias);
  DType dt = promote(x.dtype(), weight.dtype());
  const bool has_bias = bias.defined();
  return make_result(out_shape, dt, std::move(out), "conv3d", std::move(inputs), [g, has_bias](Node& self) {
    const int64_t K = g.K(), P = g.P(), in_vol = g.Ci * g.T * g.H * g.W;
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    const auto& gout = self.grad;
    double* gx = needs(self, 0) ? self.inputs[0]->grad_buffer().data() : nullptr;
    double* gw = needs(self, 1) ? self.inputs[1]->grad_buffer().data() : nullptr;
    double* gb = (has_bias && needs(self, 2)) ? self.inputs[2]->grad_buffer().data() : nullptr;
    std::vector<double> col(K * kConvTile), gt(g.Co * kConvTile);
    for (int64_t b = 0; b < g.B; ++b)
      for (int64_t p0 = 0; p0 < P; p0 += kConvTile) {
        const TileCoords tc = tile_coords(g, p0);
        const int64_t n = tc.n;
        std::fill(gt.begin(), gt.end(), 0.0);
        for (int64_t co = 0; co < g.Co; ++co) {
          const double* src = gout.data() + (b * g.Co + co) * P + p0;
          std::copy_n(src, n, gt.data() + co * kConvTile);
          if (gb) {
            double s = 0.0;
            for (int64_t c = 0; c < n; ++c) s += src[c];
            gb[co] += s;
          }
        }
        if (gw) {
          im2col_tile(g, xv.data() + b * in_vol, tc, col.data());
          gemm_nt(gt.data(), col.data(), gw, g.Co, kConvTile, K);
        }
        if (gx) {
          std::fill(col.begin(), col.end(), 0.0);
          gemm_tn(wv.data(), gt.data(), col.data(), g.Co, K, kConvTile);
          col2im_tile(g, col.data(), tc, gx + b * in_vol);
        }
      }
  });
}

Tensor rotary_embed(const Tensor& x, std::span<const int64_t> positions, double base) {
  if (x.rank() != 3) throw ShapeError("rotary_embed expects [tokens, heads, head_dim]");
  const int64_t n = x.size(0), heads = x.size(1), dh = x.size(2);
  if (dh % 2 != 0) throw ShapeError("rotary_embed needs an even head_dim");
  if (static_cast<int64_t>(positions.size()) != n) throw ShapeError("rotary_embed position count mismatch");
  const int64_t half = dh / 2;
  auto cs = std::make_shared<std::vector<double>>(n * half);
  auto sn = std::make_shared<std::vector<double>>(n * half);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < half; ++j) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
      const double ang = static_cast<double>(positions[i]) * freq;
      (*cs)[i * half + j] = std::cos(ang);
      (*sn)[i * half + j] = std::sin(ang);
    }
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (int64_t i = 0; i < n; ++i)
    for (int64_t h = 0; h < heads; ++h) {
      const double* src = xv.data() + (i * heads + h) * dh;
      double* dst = out.data() + (i * heads + h) * dh;
      for (int64_t j = 0; j < half; ++j) {
        const double c = (*cs)[i * half + j], s = (*sn)[i * half + j];
        dst[j] = src[j] * c - src[j + half] * s;
        dst[j + half] = src[j] * s + src[j + half] * c;
      }
    }
  return make_result(x.shape(), x.dtype(), std::move(out), "rotary_embed", {x}, [n, heads, dh, half, cs, sn](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t h = 0; h < heads; ++h) {
        const double* g = self.grad.data() + (i * heads + h) * dh;
        double* dst = gx.data() + (i * heads + h) * dh;
        for (int64_t j = 0; j < half; ++j) {
          const double c = (*cs)[i * half + j], s = (*sn)[i * half + j];
          dst[j] += g[j] * c + g[j + half] * s;
          dst[j + half] += -g[j] * s + g[j + half] * c;
        }
      }
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return mean(square(sub(a, b)));
}

}  // namespace arvsr
