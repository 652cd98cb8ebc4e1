#include "vpcsv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

namespace vpcsv {

namespace {

using detail::make_result;

template <typename Scalar>
using Node = detail::Node<Scalar>;

[[noreturn]] void shape_fail(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

template <typename Scalar>
bool wants_grad(const Tensor<Scalar>& t) {
  return t.defined() && t.requires_grad();
}

template <typename Scalar>
VectorX<Scalar>& grad_of(const Tensor<Scalar>& t) {
  return t.node()->grad_buffer();
}

template <typename Scalar>
void require_defined(const Tensor<Scalar>& t, const char* op) {
  if (!t.defined()) shape_fail(op, "undefined input tensor");
}

/// Rows of `a` viewed as [outer, inner] where inner == b.numel(), or throws.
template <typename Scalar>
Index broadcast_rows(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) {
    ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  }
  if (!ok) shape_fail(op, "shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  const Index inner = b.numel();
  return inner == 0 ? 0 : a.numel() / inner;
}

Index last_dim(const Shape& s, const char* op) {
  if (s.empty()) shape_fail(op, "expected rank >= 1, got scalar");
  return s.back();
}

struct ConvDims {
  Index n, h, w, c;       // image being gathered from / scattered into
  Index kh, kw, stride, pad;
  Index oh, ow;           // sliding-window positions
};

template <typename Scalar>
void im2col(const Scalar* x, const ConvDims& d, Scalar* cols) {
  const Index row_len = d.kh * d.kw * d.c;
  for (Index n = 0; n < d.n; ++n) {
    for (Index oy = 0; oy < d.oh; ++oy) {
      for (Index ox = 0; ox < d.ow; ++ox) {
        Scalar* row = cols + ((n * d.oh + oy) * d.ow + ox) * row_len;
        for (Index ky = 0; ky < d.kh; ++ky) {
          const Index iy = oy * d.stride - d.pad + ky;
          for (Index kx = 0; kx < d.kw; ++kx) {
            const Index ix = ox * d.stride - d.pad + kx;
            Scalar* dst = row + (ky * d.kw + kx) * d.c;
            if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) {
              std::fill(dst, dst + d.c, Scalar(0));
            } else {
              const Scalar* src = x + ((n * d.h + iy) * d.w + ix) * d.c;
              std::copy(src, src + d.c, dst);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds rows back into the image.
template <typename Scalar>
void col2im(const Scalar* cols, const ConvDims& d, Scalar* x) {
  const Index row_len = d.kh * d.kw * d.c;
  for (Index n = 0; n < d.n; ++n) {
    for (Index oy = 0; oy < d.oh; ++oy) {
      for (Index ox = 0; ox < d.ow; ++ox) {
        const Scalar* row = cols + ((n * d.oh + oy) * d.ow + ox) * row_len;
        for (Index ky = 0; ky < d.kh; ++ky) {
          const Index iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          for (Index kx = 0; kx < d.kw; ++kx) {
            const Index ix = ox * d.stride - d.pad + kx;
            if (ix < 0 || ix >= d.w) continue;
            const Scalar* src = row + (ky * d.kw + kx) * d.c;
            Scalar* dst = x + ((n * d.h + iy) * d.w + ix) * d.c;
            for (Index c = 0; c < d.c; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void add_bias_grad(const Tensor<Scalar>& bias, const VectorX<Scalar>& g, Index rows, Index cols) {
  if (!wants_grad(bias)) return;
  ConstMapRM<Scalar> G(g.data(), rows, cols);
  grad_of(bias) += G.colwise().sum().transpose();
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Index rows = broadcast_rows(a, b, "add");
  const Index cols = b.numel();
  MatrixRM<Scalar> out = a.matrix(rows, cols);
  out.rowwise() += b.data().transpose();
  VectorX<Scalar> value = Eigen::Map<VectorX<Scalar>>(out.data(), out.size());
  return make_result<Scalar>(a.shape(), std::move(value), "add", {a, b}, [a, b, rows, cols](Node<Scalar>& o) {
    if (wants_grad(a)) grad_of(a) += o.grad;
    add_bias_grad(b, o.grad, rows, cols);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Index rows = broadcast_rows(a, b, "sub");
  const Index cols = b.numel();
  MatrixRM<Scalar> out = a.matrix(rows, cols);
  out.rowwise() -= b.data().transpose();
  VectorX<Scalar> value = Eigen::Map<VectorX<Scalar>>(out.data(), out.size());
  return make_result<Scalar>(a.shape(), std::move(value), "sub", {a, b}, [a, b, rows, cols](Node<Scalar>& o) {
    if (wants_grad(a)) grad_of(a) += o.grad;
    if (wants_grad(b)) {
      ConstMapRM<Scalar> G(o.grad.data(), rows, cols);
      grad_of(b) -= G.colwise().sum().transpose();
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Index rows = broadcast_rows(a, b, "mul");
  const Index cols = b.numel();
  MatrixRM<Scalar> out = a.matrix(rows, cols);
  out.array().rowwise() *= b.data().transpose().array();
  VectorX<Scalar> value = Eigen::Map<VectorX<Scalar>>(out.data(), out.size());
  return make_result<Scalar>(a.shape(), std::move(value), "mul", {a, b}, [a, b, rows, cols](Node<Scalar>& o) {
    ConstMapRM<Scalar> G(o.grad.data(), rows, cols);
    if (wants_grad(a)) {
      MapRM<Scalar> ga(grad_of(a).data(), rows, cols);
      ga.array() += G.array().rowwise() * b.data().transpose().array();
    }
    if (wants_grad(b)) {
      grad_of(b) += (G.array() * a.matrix(rows, cols).array()).colwise().sum().transpose().matrix();
    }
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  require_defined(a, "scale");
  return make_result<Scalar>(a.shape(), a.data() * factor, "scale", {a}, [a, factor](Node<Scalar>& o) {
    if (wants_grad(a)) grad_of(a) += o.grad * factor;
  });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  require_defined(x, "relu");
  VectorX<Scalar> value = x.data().cwiseMax(Scalar(0));
  return make_result<Scalar>(x.shape(), std::move(value), "relu", {x}, [x](Node<Scalar>& o) {
    if (!wants_grad(x)) return;
    grad_of(x).array() += (x.data().array() > Scalar(0)).select(o.grad.array(), Scalar(0));
  });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  require_defined(x, "sigmoid");
  VectorX<Scalar> value = x.data().unaryExpr([](Scalar v) {
    return v >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-v)) : std::exp(v) / (Scalar(1) + std::exp(v));
  });
  VectorX<Scalar> y = value;
  return make_result<Scalar>(x.shape(), std::move(value), "sigmoid", {x}, [x, y](Node<Scalar>& o) {
    if (wants_grad(x)) grad_of(x).array() += o.grad.array() * y.array() * (Scalar(1) - y.array());
  });
}

// ---------------------------------------------------------------- products

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (b.rank() != 2 || a.rank() < 1 || last_dim(a.shape(), "matmul") != b.dim(0)) {
    shape_fail("matmul", "shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Index k = b.dim(0);
  const Index n = b.dim(1);
  const Index m = k == 0 ? 0 : a.numel() / k;
  Shape shape = a.shape();
  shape.back() = n;
  VectorX<Scalar> value(m * n);
  MapRM<Scalar>(value.data(), m, n).noalias() = a.matrix(m, k) * b.matrix(k, n);
  return make_result<Scalar>(std::move(shape), std::move(value), "matmul", {a, b}, [a, b, m, k, n](Node<Scalar>& o) {
    ConstMapRM<Scalar> G(o.grad.data(), m, n);
    if (wants_grad(a)) MapRM<Scalar>(grad_of(a).data(), m, k).noalias() += G * b.matrix(k, n).transpose();
    if (wants_grad(b)) MapRM<Scalar>(grad_of(b).data(), k, n).noalias() += a.matrix(m, k).transpose() * G;
  });
}

template <typename Scalar>
Tensor<Scalar> bmm(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool transpose_b) {
  require_defined(a, "bmm");
  require_defined(b, "bmm");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    shape_fail("bmm", "shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                          (transpose_b ? " (transposed)" : ""));
  }
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  VectorX<Scalar> value(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    ConstMapRM<Scalar> A(a.data().data() + i * m * k, m, k);
    MapRM<Scalar> C(value.data() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * ConstMapRM<Scalar>(b.data().data() + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * ConstMapRM<Scalar>(b.data().data() + i * k * n, k, n);
    }
  }
  return make_result<Scalar>({batch, m, n}, std::move(value), "bmm", {a, b},
                             [a, b, transpose_b, batch, m, k, n](Node<Scalar>& o) {
    for (Index i = 0; i < batch; ++i) {
      ConstMapRM<Scalar> G(o.grad.data() + i * m * n, m, n);
      ConstMapRM<Scalar> A(a.data().data() + i * m * k, m, k);
      if (transpose_b) {
        ConstMapRM<Scalar> B(b.data().data() + i * n * k, n, k);
        if (wants_grad(a)) MapRM<Scalar>(grad_of(a).data() + i * m * k, m, k).noalias() += G * B;
        if (wants_grad(b)) MapRM<Scalar>(grad_of(b).data() + i * n * k, n, k).noalias() += G.transpose() * A;
      } else {
        ConstMapRM<Scalar> B(b.data().data() + i * k * n, k, n);
        if (wants_grad(a)) MapRM<Scalar>(grad_of(a).data() + i * m * k, m, k).noalias() += G * B.transpose();
        if (wants_grad(b)) MapRM<Scalar>(grad_of(b).data() + i * k * n, k, n).noalias() += A.transpose() * G;
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  Tensor<Scalar> y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------- convolution

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      ConvGeometry geometry) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(2) != x.dim(3) || geometry.stride < 1 ||
      geometry.padding < 0) {
    shape_fail("conv2d", "shape mismatch input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  }
  const Index cout = weight.dim(3);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    shape_fail("conv2d", "bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) + " outputs");
  }
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(1),
             geometry.stride, geometry.padding, 0, 0};
  d.oh = (d.h + 2 * d.pad - d.kh) / d.stride + 1;
  d.ow = (d.w + 2 * d.pad - d.kw) / d.stride + 1;
  if (d.oh <= 0 || d.ow <= 0) shape_fail("conv2d", "kernel larger than padded input " + shape_str(x.shape()));

  const Index rows = d.n * d.oh * d.ow;
  const Index patch = d.kh * d.kw * d.c;
  auto cols = std::make_shared<MatrixRM<Scalar>>(rows, patch);
  im2col(x.data().data(), d, cols->data());
  VectorX<Scalar> value(rows * cout);
  MapRM<Scalar> out(value.data(), rows, cout);
  out.noalias() = *cols * weight.matrix(patch, cout);
  if (bias.defined()) out.rowwise() += bias.data().transpose();

  return make_result<Scalar>({d.n, d.oh, d.ow, cout}, std::move(value), "conv2d", {x, weight, bias},
                             [x, weight, bias, cols, d, rows, patch, cout](Node<Scalar>& o) {
    ConstMapRM<Scalar> G(o.grad.data(), rows, cout);
    if (wants_grad(weight)) MapRM<Scalar>(grad_of(weight).data(), patch, cout).noalias() += cols->transpose() * G;
    add_bias_grad(bias, o.grad, rows, cout);
    if (wants_grad(x)) {
      MatrixRM<Scalar> dcols = G * weight.matrix(patch, cout).transpose();
      col2im(dcols.data(), d, grad_of(x).data());
    }
  });
}

template <typename Scalar>
Tensor<Scalar> conv_transpose2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                                const Tensor<Scalar>& bias, ConvGeometry geometry) {
  require_defined(x, "conv_transpose2d");
  require_defined(weight, "conv_transpose2d");
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(0) != x.dim(3) || geometry.stride < 1 ||
      geometry.padding < 0) {
    shape_fail("conv_transpose2d",
               "shape mismatch input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  }
  const Index cin = x.dim(3);
  const Index cout = weight.dim(3);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    shape_fail("conv_transpose2d", "bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) + " outputs");
  }
  // Output geometry is the image that a conv2d with the same kernel would
  // slide over to produce x's spatial size.
  ConvDims d{x.dim(0), 0, 0, cout, weight.dim(1), weight.dim(2), geometry.stride, geometry.padding,
             x.dim(1), x.dim(2)};
  d.h = (d.oh - 1) * d.stride - 2 * d.pad + d.kh;
  d.w = (d.ow - 1) * d.stride - 2 * d.pad + d.kw;
  if (d.h <= 0 || d.w <= 0) shape_fail("conv_transpose2d", "empty output for input " + shape_str(x.shape()));

  const Index rows = d.n * d.oh * d.ow;
  const Index patch = d.kh * d.kw * cout;
  MatrixRM<Scalar> cols = x.matrix(rows, cin) * weight.matrix(cin, patch);
  VectorX<Scalar> value = VectorX<Scalar>::Zero(d.n * d.h * d.w * cout);
  col2im(cols.data(), d, value.data());
  if (bias.defined()) MapRM<Scalar>(value.data(), d.n * d.h * d.w, cout).rowwise() += bias.data().transpose();

  return make_result<Scalar>({d.n, d.h, d.w, cout}, std::move(value), "conv_transpose2d", {x, weight, bias},
                             [x, weight, bias, d, rows, patch, cin, cout](Node<Scalar>& o) {
    add_bias_grad(bias, o.grad, d.n * d.h * d.w, cout);
    if (!wants_grad(x) && !wants_grad(weight)) return;
    MatrixRM<Scalar> dcols(rows, patch);
    im2col(o.grad.data(), d, dcols.data());
    if (wants_grad(x)) MapRM<Scalar>(grad_of(x).data(), rows, cin).noalias() += dcols * weight.matrix(cin, patch).transpose();
    if (wants_grad(weight)) MapRM<Scalar>(grad_of(weight).data(), cin, patch).noalias() += x.matrix(rows, cin).transpose() * dcols;
  });
}

// ---------------------------------------------------------------- normalizers

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
  require_defined(x, "softmax");
  const Index cols = last_dim(x.shape(), "softmax");
  const Index rows = cols == 0 ? 0 : x.numel() / cols;
  VectorX<Scalar> value(x.numel());
  MapRM<Scalar> Y(value.data(), rows, cols);
  auto X = x.matrix(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mx = X.row(r).maxCoeff();
    Y.row(r) = (X.row(r).array() - mx).exp().matrix();
    const double total = Y.row(r).template cast<double>().sum();
    Y.row(r) /= static_cast<Scalar>(total);
  }
  VectorX<Scalar> y = value;
  return make_result<Scalar>(x.shape(), std::move(value), "softmax", {x}, [x, y, rows, cols](Node<Scalar>& o) {
    if (!wants_grad(x)) return;
    ConstMapRM<Scalar> Yv(y.data(), rows, cols);
    ConstMapRM<Scalar> G(o.grad.data(), rows, cols);
    MapRM<Scalar> gx(grad_of(x).data(), rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const Scalar dot = Yv.row(r).dot(G.row(r));
      gx.row(r).array() += Yv.row(r).array() * (G.row(r).array() - dot);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> log_softmax(const Tensor<Scalar>& x) {
  require_defined(x, "log_softmax");
  const Index cols = last_dim(x.shape(), "log_softmax");
  const Index rows = cols == 0 ? 0 : x.numel() / cols;
  VectorX<Scalar> value(x.numel());
  MapRM<Scalar> Y(value.data(), rows, cols);
  auto X = x.matrix(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mx = X.row(r).maxCoeff();
    const double total = (X.row(r).array() - mx).exp().template cast<double>().sum();
    Y.row(r).array() = X.row(r).array() - (mx + static_cast<Scalar>(std::log(total)));
  }
  VectorX<Scalar> y = value;
  return make_result<Scalar>(x.shape(), std::move(value), "log_softmax", {x}, [x, y, rows, cols](Node<Scalar>& o) {
    if (!wants_grad(x)) return;
    ConstMapRM<Scalar> Yv(y.data(), rows, cols);
    ConstMapRM<Scalar> G(o.grad.data(), rows, cols);
    MapRM<Scalar> gx(grad_of(x).data(), rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const Scalar total = static_cast<Scalar>(G.row(r).template cast<double>().sum());
      gx.row(r).array() += G.row(r).array() - Yv.row(r).array().exp() * total;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> causal_softmax(const Tensor<Scalar>& x, Scalar factor) {
  require_defined(x, "causal_softmax");
  if (x.rank() < 2 || x.dim(-1) != x.dim(-2)) {
    shape_fail("causal_softmax", "expected [..., L, L], got " + shape_str(x.shape()));
  }
  const Index len = x.dim(-1);
  const Index mats = len == 0 ? 0 : x.numel() / (len * len);
  VectorX<Scalar> value = VectorX<Scalar>::Zero(x.numel());
  for (Index m = 0; m < mats; ++m) {
    const Scalar* xs = x.data().data() + m * len * len;
    Scalar* ys = value.data() + m * len * len;
    for (Index i = 0; i < len; ++i) {
      Eigen::Map<const VectorX<Scalar>> row(xs + i * len, i + 1);
      Eigen::Map<VectorX<Scalar>> out(ys + i * len, i + 1);
      const Scalar mx = row.maxCoeff() * factor;
      out = (row.array() * factor - mx).exp().matrix();
      out /= static_cast<Scalar>(out.template cast<double>().sum());
    }
  }
  VectorX<Scalar> y = value;
  return make_result<Scalar>(x.shape(), std::move(value), "causal_softmax", {x},
                             [x, y, len, mats, factor](Node<Scalar>& o) {
    if (!wants_grad(x)) return;
    auto& gx = grad_of(x);
    for (Index m = 0; m < mats; ++m) {
      for (Index i = 0; i < len; ++i) {
        const Index off = m * len * len + i * len;
        Eigen::Map<const VectorX<Scalar>> yr(y.data() + off, i + 1);
        Eigen::Map<const VectorX<Scalar>> gr(o.grad.data() + off, i + 1);
        const Scalar dot = yr.dot(gr);
        Eigen::Map<VectorX<Scalar>> out(gx.data() + off, i + 1);
        out.array() += factor * yr.array() * (gr.array() - dot);
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> causal_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                Scalar factor) {
  require_defined(q, "causal_attention");
  require_defined(k, "causal_attention");
  require_defined(v, "causal_attention");
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    shape_fail("causal_attention", "expected equal [G, L, d] stacks, got " + shape_str(q.shape()) + ", " +
                                       shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  if (!(factor > Scalar(0))) throw std::invalid_argument("causal_attention: factor must be positive");
  using Strided = Eigen::Map<MatrixRM<Scalar>, 0, Eigen::OuterStride<>>;
  const Index groups = q.dim(0), len = q.dim(1), dh = q.dim(2);
  // Rows are processed in blocks; a block only needs the keys up to its last
  // row, so the upper triangle is never formed. probs keeps the normalized
  // weights for backward (entries right of the block's key range are unused).
  constexpr Index kBlock = 64;
  auto probs = std::make_shared<VectorX<Scalar>>(groups * len * len);
  VectorX<Scalar> value(groups * len * dh);
  for (Index g = 0; g < groups; ++g) {
    ConstMapRM<Scalar> Q(q.data().data() + g * len * dh, len, dh);
    ConstMapRM<Scalar> K(k.data().data() + g * len * dh, len, dh);
    ConstMapRM<Scalar> V(v.data().data() + g * len * dh, len, dh);
    MapRM<Scalar> O(value.data() + g * len * dh, len, dh);
    for (Index r0 = 0; r0 < len; r0 += kBlock) {
      const Index r1 = std::min(len, r0 + kBlock), n = r1 - r0;
      Strided P(probs->data() + g * len * len + r0 * len, n, r1, Eigen::OuterStride<>(len));
      P.noalias() = Q.middleRows(r0, n) * K.topRows(r1).transpose();
      for (Index i = 0; i < n; ++i) {
        const Index keep = r0 + i + 1;
        auto row = P.row(i);
        const Scalar mx = row.head(keep).maxCoeff();
        row.head(keep) = ((row.head(keep).array() - mx) * factor).exp().matrix();
        row.head(keep) /= static_cast<Scalar>(row.head(keep).template cast<double>().sum());
        row.segment(keep, r1 - keep).setZero();
      }
      O.middleRows(r0, n).noalias() = P * V.topRows(r1);
    }
  }
  return make_result<Scalar>(q.shape(), std::move(value), "causal_attention", {q, k, v},
                             [q, k, v, probs, groups, len, dh, factor](Node<Scalar>& o) {
    const bool gq = wants_grad(q), gk = wants_grad(k), gv = wants_grad(v);
    if (!gq && !gk && !gv) return;
    MatrixRM<Scalar> dP;
    for (Index g = 0; g < groups; ++g) {
      ConstMapRM<Scalar> Q(q.data().data() + g * len * dh, len, dh);
      ConstMapRM<Scalar> K(k.data().data() + g * len * dh, len, dh);
      ConstMapRM<Scalar> V(v.data().data() + g * len * dh, len, dh);
      ConstMapRM<Scalar> dO(o.grad.data() + g * len * dh, len, dh);
      for (Index r0 = 0; r0 < len; r0 += kBlock) {
        const Index r1 = std::min(len, r0 + kBlock), n = r1 - r0;
        Eigen::Map<const MatrixRM<Scalar>, 0, Eigen::OuterStride<>> P(probs->data() + g * len * len + r0 * len, n, r1,
                                                                        Eigen::OuterStride<>(len));
        const auto dOb = dO.middleRows(r0, n);
        if (gv) MapRM<Scalar>(grad_of(v).data() + g * len * dh, len, dh).topRows(r1).noalias() += P.transpose() * dOb;
        if (!gq && !gk) continue;
        dP.noalias() = dOb * V.topRows(r1).transpose();
        for (Index i = 0; i < n; ++i) {
          const Scalar dot = P.row(i).dot(dP.row(i));
          dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot) * factor).matrix();
        }
        if (gq) MapRM<Scalar>(grad_of(q).data() + g * len * dh, len, dh).middleRows(r0, n).noalias() += dP * K.topRows(r1);
        if (gk)
          MapRM<Scalar>(grad_of(k).data() + g * len * dh, len, dh).topRows(r1).noalias() +=
              dP.transpose() * Q.middleRows(r0, n);
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          double eps) {
  require_defined(x, "layer_norm");
  const Index cols = last_dim(x.shape(), "layer_norm");
  if (gain.numel() != cols || bias.numel() != cols) {
    shape_fail("layer_norm", "parameters " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                                 " for input " + shape_str(x.shape()));
  }
  const Index rows = cols == 0 ? 0 : x.numel() / cols;
  auto xhat = std::make_shared<MatrixRM<Scalar>>(rows, cols);
  auto rstd = std::make_shared<VectorX<Scalar>>(rows);
  auto X = x.matrix(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const auto row = X.row(r).template cast<double>();
    const double mu = row.mean();
    const double var = (row.array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = static_cast<Scalar>(inv);
    xhat->row(r) = ((row.array() - mu) * inv).matrix().template cast<Scalar>();
  }
  VectorX<Scalar> value(x.numel());
  MapRM<Scalar> Y(value.data(), rows, cols);
  Y.array() = (xhat->array().rowwise() * gain.data().transpose().array()).rowwise() + bias.data().transpose().array();
  return make_result<Scalar>(x.shape(), std::move(value), "layer_norm", {x, gain, bias},
                             [x, gain, bias, xhat, rstd, rows, cols](Node<Scalar>& o) {
    ConstMapRM<Scalar> G(o.grad.data(), rows, cols);
    if (wants_grad(gain)) grad_of(gain) += (G.array() * xhat->array()).colwise().sum().transpose().matrix();
    if (wants_grad(bias)) grad_of(bias) += G.colwise().sum().transpose();
    if (!wants_grad(x)) return;
    MapRM<Scalar> gx(grad_of(x).data(), rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const auto dxhat = (G.row(r).array() * gain.data().transpose().array()).eval();
      const Scalar m1 = dxhat.mean();
      const Scalar m2 = (dxhat * xhat->row(r).array()).mean();
      gx.row(r).array() += (*rstd)[r] * (dxhat - m1 - xhat->row(r).array() * m2);
    }
  });
}

// ---------------------------------------------------------------- lookups

template <typename Scalar>
Tensor<Scalar> embedding(const Tensor<Scalar>& table, std::span<const int> ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) shape_fail("embedding", "table must be [V, D], got " + shape_str(table.shape()));
  const Index vocab = table.dim(0), width = table.dim(1);
  const Index n = static_cast<Index>(ids.size());
  VectorX<Scalar> value(n * width);
  auto T = table.matrix(vocab, width);
  MapRM<Scalar> out(value.data(), n, width);
  for (Index i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= vocab) {
      shape_fail("embedding", "id " + std::to_string(id) + " outside table " + shape_str(table.shape()));
    }
    out.row(i) = T.row(id);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result<Scalar>({n, width}, std::move(value), "embedding", {table},
                             [table, saved = std::move(saved), vocab, width](Node<Scalar>& o) {
    if (!wants_grad(table)) return;
    MapRM<Scalar> gt(grad_of(table).data(), vocab, width);
    ConstMapRM<Scalar> G(o.grad.data(), static_cast<Index>(saved.size()), width);
    for (std::size_t i = 0; i < saved.size(); ++i) gt.row(saved[i]) += G.row(static_cast<Index>(i));
  });
}

template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const Index> rows) {
  require_defined(x, "gather_rows");
  if (x.rank() != 2) shape_fail("gather_rows", "expected [R, C], got " + shape_str(x.shape()));
  const Index total = x.dim(0), width = x.dim(1);
  const Index n = static_cast<Index>(rows.size());
  VectorX<Scalar> value(n * width);
  auto X = x.matrix(total, width);
  MapRM<Scalar> out(value.data(), n, width);
  for (Index i = 0; i < n; ++i) {
    const Index r = rows[static_cast<std::size_t>(i)];
    if (r < 0 || r >= total) shape_fail("gather_rows", "row " + std::to_string(r) + " outside " + shape_str(x.shape()));
    out.row(i) = X.row(r);
  }
  std::vector<Index> saved(rows.begin(), rows.end());
  return make_result<Scalar>({n, width}, std::move(value), "gather_rows", {x},
                             [x, saved = std::move(saved), total, width](Node<Scalar>& o) {
    if (!wants_grad(x)) return;
    MapRM<Scalar> gx(grad_of(x).data(), total, width);
    ConstMapRM<Scalar> G(o.grad.data(), static_cast<Index>(saved.size()), width);
    for (std::size_t i = 0; i < saved.size(); ++i) gx.row(saved[i]) += G.row(static_cast<Index>(i));
  });
}

// ---------------------------------------------------------------- reductions and losses

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  require_defined(x, "sum");
  const double total = x.data().template cast<double>().sum();
  return make_result<Scalar>({}, VectorX<Scalar>::Constant(1, static_cast<Scalar>(total)), "sum", {x},
                             [x](Node<Scalar>& o) {
    if (wants_grad(x)) grad_of(x).array() += o.grad[0];
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) shape_fail("mean", "empty tensor");
  const double n = static_cast<double>(x.numel());
  const double total = x.data().template cast<double>().sum() / n;
  return make_result<Scalar>({}, VectorX<Scalar>::Constant(1, static_cast<Scalar>(total)), "mean", {x},
                             [x, n](Node<Scalar>& o) {
    if (wants_grad(x)) grad_of(x).array() += static_cast<Scalar>(o.grad[0] / n);
  });
}

template <typename Scalar>
Tensor<Scalar> squared_error(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "squared_error");
  require_defined(b, "squared_error");
  if (a.shape() != b.shape()) {
    shape_fail("squared_error", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.numel() == 0) shape_fail("squared_error", "empty tensor");
  const double n = static_cast<double>(a.numel());
  const double total = (a.data() - b.data()).template cast<double>().squaredNorm() / n;
  return make_result<Scalar>({}, VectorX<Scalar>::Constant(1, static_cast<Scalar>(total)), "squared_error", {a, b},
                             [a, b, n](Node<Scalar>& o) {
    const Scalar f = static_cast<Scalar>(2.0 * o.grad[0] / n);
    if (wants_grad(a)) grad_of(a) += f * (a.data() - b.data());
    if (wants_grad(b)) grad_of(b) -= f * (a.data() - b.data());
  });
}

template <typename Scalar>
Tensor<Scalar> bce_with_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets) {
  require_defined(logits, "bce_with_logits");
  require_defined(targets, "bce_with_logits");
  if (logits.shape() != targets.shape()) {
    shape_fail("bce_with_logits", "shape mismatch " + shape_str(logits.shape()) + " vs " + shape_str(targets.shape()));
  }
  const Index n = logits.numel();
  if (n == 0) shape_fail("bce_with_logits", "empty tensor");
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double x = logits.data()[i], y = targets.data()[i];
    total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  return make_result<Scalar>({}, VectorX<Scalar>::Constant(1, static_cast<Scalar>(total / n)), "bce_with_logits",
                             {logits}, [logits, targets, n](Node<Scalar>& o) {
    if (!wants_grad(logits)) return;
    const Scalar f = static_cast<Scalar>(o.grad[0] / static_cast<double>(n));
    auto& g = grad_of(logits);
    for (Index i = 0; i < n; ++i) {
      const Scalar x = logits.data()[i];
      const Scalar s = x >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-x)) : std::exp(x) / (Scalar(1) + std::exp(x));
      g[i] += f * (s - targets.data()[i]);
    }
  });
}

namespace {

template <typename Scalar>
void check_class_ids(const Tensor<Scalar>& logits, std::span<const int> ids, const char* op, Index& rows, Index& cols) {
  require_defined(logits, op);
  if (logits.rank() != 2) shape_fail(op, "logits must be [N, V], got " + shape_str(logits.shape()));
  rows = logits.dim(0);
  cols = logits.dim(1);
  if (static_cast<Index>(ids.size()) != rows) {
    shape_fail(op, std::to_string(ids.size()) + " targets for logits " + shape_str(logits.shape()));
  }
  for (int id : ids) {
    if (id < 0 || id >= cols) shape_fail(op, "target " + std::to_string(id) + " outside " + std::to_string(cols) + " classes");
  }
}

/// Row-wise log-sum-exp, optionally skipping one column per row.
template <typename Scalar>
double row_lse(const Scalar* row, Index cols, Index skip) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Index c = 0; c < cols; ++c) {
    if (c != skip) mx = std::max(mx, static_cast<double>(row[c]));
  }
  if (!std::isfinite(mx)) return mx;
  double total = 0.0;
  for (Index c = 0; c < cols; ++c) {
    if (c != skip) total += std::exp(static_cast<double>(row[c]) - mx);
  }
  return mx + std::log(total);
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> targets) {
  Index rows = 0, cols = 0;
  check_class_ids(logits, targets, "cross_entropy", rows, cols);
  if (rows == 0) shape_fail("cross_entropy", "no rows");
  auto lse = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = logits.data().data() + r * cols;
    (*lse)[static_cast<std::size_t>(r)] = row_lse(row, cols, -1);
    total += (*lse)[static_cast<std::size_t>(r)] - row[targets[static_cast<std::size_t>(r)]];
  }
  std::vector<int> saved(targets.begin(), targets.end());
  return make_result<Scalar>({}, VectorX<Scalar>::Constant(1, static_cast<Scalar>(total / rows)), "cross_entropy",
                             {logits}, [logits, lse, saved = std::move(saved), rows, cols](Node<Scalar>& o) {
    if (!wants_grad(logits)) return;
    const double f = o.grad[0] / static_cast<double>(rows);
    auto& g = grad_of(logits);
    for (Index r = 0; r < rows; ++r) {
      const Scalar* row = logits.data().data() + r * cols;
      const double l = (*lse)[static_cast<std::size_t>(r)];
      for (Index c = 0; c < cols; ++c) {
        g[r * cols + c] += static_cast<Scalar>(f * std::exp(static_cast<double>(row[c]) - l));
      }
      g[r * cols + saved[static_cast<std::size_t>(r)]] -= static_cast<Scalar>(f);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> pick_log_softmax(const Tensor<Scalar>& logits, std::span<const int> ids) {
  Index rows = 0, cols = 0;
  check_class_ids(logits, ids, "pick_log_softmax", rows, cols);
  auto lse = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  VectorX<Scalar> value(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = logits.data().data() + r * cols;
    (*lse)[static_cast<std::size_t>(r)] = row_lse(row, cols, -1);
    value[r] = static_cast<Scalar>(row[ids[static_cast<std::size_t>(r)]] - (*lse)[static_cast<std::size_t>(r)]);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result<Scalar>({rows}, std::move(value), "pick_log_softmax", {logits},
                             [logits, lse, saved = std::move(saved), rows, cols](Node<Scalar>& o) {
    if (!wants_grad(logits)) return;
    auto& g = grad_of(logits);
    for (Index r = 0; r < rows; ++r) {
      const double up = o.grad[r];
      const Scalar* row = logits.data().data() + r * cols;
      const double l = (*lse)[static_cast<std::size_t>(r)];
      for (Index c = 0; c < cols; ++c) {
        g[r * cols + c] -= static_cast<Scalar>(up * std::exp(static_cast<double>(row[c]) - l));
      }
      g[r * cols + saved[static_cast<std::size_t>(r)]] += static_cast<Scalar>(up);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> pick_log1m_softmax(const Tensor<Scalar>& logits, std::span<const int> ids) {
  Index rows = 0, cols = 0;
  check_class_ids(logits, ids, "pick_log1m_softmax", rows, cols);
  auto lse_all = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  auto lse_rest = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  VectorX<Scalar> value(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar* row = logits.data().data() + r * cols;
    const auto i = static_cast<std::size_t>(r);
    (*lse_all)[i] = row_lse(row, cols, -1);
    (*lse_rest)[i] = row_lse(row, cols, ids[i]);
    value[r] = static_cast<Scalar>((*lse_rest)[i] - (*lse_all)[i]);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result<Scalar>({rows}, std::move(value), "pick_log1m_softmax", {logits},
                             [logits, lse_all, lse_rest, saved = std::move(saved), rows, cols](Node<Scalar>& o) {
    if (!wants_grad(logits)) return;
    auto& g = grad_of(logits);
    for (Index r = 0; r < rows; ++r) {
      const auto i = static_cast<std::size_t>(r);
      const double up = o.grad[r];
      const Scalar* row = logits.data().data() + r * cols;
      for (Index c = 0; c < cols; ++c) {
        const double x = row[c];
        double d = -std::exp(x - (*lse_all)[i]);
        if (c != saved[i] && std::isfinite((*lse_rest)[i])) d += std::exp(x - (*lse_rest)[i]);
        g[r * cols + c] += static_cast<Scalar>(up * d);
      }
    }
  });
}

// ---------------------------------------------------------------- layout

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  const int rank = static_cast<int>(first.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) shape_fail("concat", "axis out of range for " + shape_str(first));
  Shape shape = first;
  shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == rank;
    for (int i = 0; ok && i < rank; ++i) ok = i == axis || p.shape()[static_cast<std::size_t>(i)] == first[static_cast<std::size_t>(i)];
    if (!ok) shape_fail("concat", "shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
    shape[static_cast<std::size_t>(axis)] += p.dim(axis);
  }
  Index outer = 1;
  for (int i = 0; i < axis; ++i) outer *= first[static_cast<std::size_t>(i)];
  Index inner_unit = 1;
  for (int i = axis + 1; i < rank; ++i) inner_unit *= first[static_cast<std::size_t>(i)];
  const Index out_inner = shape[static_cast<std::size_t>(axis)] * inner_unit;

  VectorX<Scalar> value(shape_numel(shape));
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const Index chunk = p.dim(axis) * inner_unit;
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * chunk, chunk, value.data() + o * out_inner + offset);
    }
    offset += chunk;
  }
  return make_result<Scalar>(shape, std::move(value), "concat", parts,
                             [parts, offsets, outer, out_inner, inner_unit, axis](Node<Scalar>& o) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!wants_grad(parts[k])) continue;
      const Index chunk = parts[k].dim(axis) * inner_unit;
      auto& g = grad_of(parts[k]);
      for (Index r = 0; r < outer; ++r) {
        Eigen::Map<VectorX<Scalar>>(g.data() + r * chunk, chunk) +=
            Eigen::Map<const VectorX<Scalar>>(o.grad.data() + r * out_inner + offsets[k], chunk);
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_result<Scalar>(std::move(shape), x.data(), "reshape", {x}, [x](Node<Scalar>& o) {
    if (wants_grad(x)) grad_of(x) += o.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, std::span<const int> order) {
  require_defined(x, "permute");
  const int rank = x.rank();
  if (static_cast<int>(order.size()) != rank) shape_fail("permute", "order rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(static_cast<std::size_t>(rank), false);
  for (int a : order) {
    if (a < 0 || a >= rank || seen[static_cast<std::size_t>(a)]) shape_fail("permute", "invalid axis order");
    seen[static_cast<std::size_t>(a)] = true;
  }
  std::vector<Index> in_stride(static_cast<std::size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i) {
    in_stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(i + 1)] * x.shape()[static_cast<std::size_t>(i + 1)];
  }
  Shape shape(static_cast<std::size_t>(rank));
  std::vector<Index> src_stride(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    src_stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  // map[out_index] = in_index
  auto map = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(x.numel()));
  {
    std::vector<Index> counter(static_cast<std::size_t>(rank), 0);
    Index src = 0;
    for (Index out = 0; out < x.numel(); ++out) {
      (*map)[static_cast<std::size_t>(out)] = src;
      for (int i = rank - 1; i >= 0; --i) {
        const auto u = static_cast<std::size_t>(i);
        ++counter[u];
        src += src_stride[u];
        if (counter[u] < shape[u]) break;
        src -= src_stride[u] * counter[u];
        counter[u] = 0;
      }
    }
  }
  VectorX<Scalar> value(x.numel());
  for (Index i = 0; i < x.numel(); ++i) value[i] = x.data()[(*map)[static_cast<std::size_t>(i)]];
  return make_result<Scalar>(std::move(shape), std::move(value), "permute", {x}, [x, map](Node<Scalar>& o) {
    if (!wants_grad(x)) return;
    auto& g = grad_of(x);
    for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += o.grad[static_cast<Index>(i)];
  });
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x, Index factor) {
  require_defined(x, "upsample_nearest");
  if (x.rank() != 4 || factor < 1) shape_fail("upsample_nearest", "expected NHWC input, got " + shape_str(x.shape()));
  const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const Index oh = h * factor, ow = w * factor;
  VectorX<Scalar> value(n * oh * ow * c);
  for (Index b = 0; b < n; ++b)
    for (Index y = 0; y < oh; ++y)
      for (Index xx = 0; xx < ow; ++xx) {
        const Scalar* src = x.data().data() + ((b * h + y / factor) * w + xx / factor) * c;
        std::copy_n(src, c, value.data() + ((b * oh + y) * ow + xx) * c);
      }
  return make_result<Scalar>({n, oh, ow, c}, std::move(value), "upsample_nearest", {x},
                             [x, n, h, w, c, oh, ow, factor](Node<Scalar>& o) {
    if (!wants_grad(x)) return;
    auto& g = grad_of(x);
    for (Index b = 0; b < n; ++b)
      for (Index y = 0; y < oh; ++y)
        for (Index xx = 0; xx < ow; ++xx) {
          const Scalar* src = o.grad.data() + ((b * oh + y) * ow + xx) * c;
          Scalar* dst = g.data() + ((b * h + y / factor) * w + xx / factor) * c;
          for (Index k = 0; k < c; ++k) dst[k] += src[k];
        }
  });
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  require_defined(x, "global_avg_pool");
  if (x.rank() != 4) shape_fail("global_avg_pool", "expected NHWC input, got " + shape_str(x.shape()));
  const Index n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  if (hw == 0) shape_fail("global_avg_pool", "empty spatial extent");
  VectorX<Scalar> value(n * c);
  for (Index b = 0; b < n; ++b) {
    ConstMapRM<Scalar> X(x.data().data() + b * hw * c, hw, c);
    value.segment(b * c, c) = (X.template cast<double>().colwise().sum() / static_cast<double>(hw)).transpose().template cast<Scalar>();
  }
  return make_result<Scalar>({n, c}, std::move(value), "global_avg_pool", {x}, [x, n, hw, c](Node<Scalar>& o) {
    if (!wants_grad(x)) return;
    auto& g = grad_of(x);
    for (Index b = 0; b < n; ++b) {
      MapRM<Scalar> G(g.data() + b * hw * c, hw, c);
      G.rowwise() += o.grad.segment(b * c, c).transpose() / static_cast<Scalar>(hw);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double p, Rng& rng, bool training) {
  require_defined(x, "dropout");
  if (p < 0.0 || p >= 1.0) shape_fail("dropout", "probability must be in [0, 1)");
  if (!training || p == 0.0) return x;
  // Four 16-bit lanes per draw; p is rounded to a multiple of 2^-16 and the
  // kept scale uses the rounded value so the expectation stays exact.
  const auto threshold = static_cast<std::uint64_t>(std::llround(p * 65536.0));
  const Scalar keep_scale = static_cast<Scalar>(65536.0 / static_cast<double>(65536 - threshold));
  VectorX<Scalar> mask(x.numel());
  std::uint64_t bits = 0;
  for (Index i = 0; i < x.numel(); ++i) {
    if (i % 4 == 0) bits = rng.next_u64();
    mask[i] = (bits & 0xffff) < threshold ? Scalar(0) : keep_scale;
    bits >>= 16;
  }
  VectorX<Scalar> value = x.data().cwiseProduct(mask);
  return make_result<Scalar>(x.shape(), std::move(value), "dropout", {x}, [x, mask](Node<Scalar>& o) {
    if (wants_grad(x)) grad_of(x) += o.grad.cwiseProduct(mask);
  });
}

template <typename Scalar>
Tensor<Scalar> stop_gradient(const Tensor<Scalar>& x) {
  require_defined(x, "stop_gradient");
  return Tensor<Scalar>::from_data(x.shape(), x.data());
}

template <typename Scalar>
Tensor<Scalar> straight_through(const Tensor<Scalar>& quantized, const Tensor<Scalar>& input) {
  require_defined(quantized, "straight_through");
  require_defined(input, "straight_through");
  if (quantized.shape() != input.shape()) {
    shape_fail("straight_through", "shape mismatch " + shape_str(quantized.shape()) + " vs " + shape_str(input.shape()));
  }
  return make_result<Scalar>(input.shape(), quantized.data(), "straight_through", {input}, [input](Node<Scalar>& o) {
    if (wants_grad(input)) grad_of(input) += o.grad;
  });
}

#define VPCSV_INSTANTIATE_OPS(S)                                                                           \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                              \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                              \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                              \
  template Tensor<S> scale(const Tensor<S>&, S);                                                           \
  template Tensor<S> relu(const Tensor<S>&);                                                               \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                            \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<S> bmm(const Tensor<S>&, const Tensor<S>&, bool);                                        \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                         \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, ConvGeometry);           \
  template Tensor<S> conv_transpose2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, ConvGeometry); \
  template Tensor<S> softmax(const Tensor<S>&);                                                            \
  template Tensor<S> log_softmax(const Tensor<S>&);                                                        \
  template Tensor<S> causal_softmax(const Tensor<S>&, S);                                                  \
  template Tensor<S> causal_attention(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);            \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, double);             \
  template Tensor<S> embedding(const Tensor<S>&, std::span<const int>);                                    \
  template Tensor<S> gather_rows(const Tensor<S>&, std::span<const Index>);                                \
  template Tensor<S> sum(const Tensor<S>&);                                                                \
  template Tensor<S> mean(const Tensor<S>&);                                                               \
  template Tensor<S> squared_error(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> bce_with_logits(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const int>);                                \
  template Tensor<S> pick_log_softmax(const Tensor<S>&, std::span<const int>);                             \
  template Tensor<S> pick_log1m_softmax(const Tensor<S>&, std::span<const int>);                           \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                                           \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                                     \
  template Tensor<S> permute(const Tensor<S>&, std::span<const int>);                                      \
  template Tensor<S> upsample_nearest(const Tensor<S>&, Index);                                            \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                                                    \
  template Tensor<S> dropout(const Tensor<S>&, double, Rng&, bool);                                        \
  template Tensor<S> stop_gradient(const Tensor<S>&);                                                      \
  template Tensor<S> straight_through(const Tensor<S>&, const Tensor<S>&);

VPCSV_INSTANTIATE_OPS(float)
VPCSV_INSTANTIATE_OPS(double)

}  // namespace vpcsv
