#include "robtok/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace robtok {

namespace {

using detail::NodePtr;

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return a;
}

void accumulate(const NodePtr& node, const Vector& g) {
  if (node->requires_grad) node->grad_buffer() += g;
}

Index product(const Shape& s, size_t begin, size_t end) {
  Index p = 1;
  for (size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

// For every linear index of `out`, the linear offset into a tensor whose
// per-axis strides (aligned to `out`) are `strides`.
std::vector<Index> strided_offsets(const Shape& out, const std::vector<Index>& strides) {
  const size_t r = out.size();
  const Index n = numel(out);
  std::vector<Index> off(static_cast<size_t>(n));
  std::vector<Index> idx(r, 0);
  Index cur = 0;
  for (Index k = 0; k < n; ++k) {
    off[static_cast<size_t>(k)] = cur;
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      cur += strides[d];
      if (idx[d] < out[d]) break;
      cur -= strides[d] * out[d];
      idx[d] = 0;
    }
  }
  return off;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const Index ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

std::vector<Index> broadcast_offsets(const Shape& in, const Shape& out) {
  const size_t r = out.size();
  const size_t lead = r - in.size();
  std::vector<Index> strides(r, 0);
  Index s = 1;
  for (size_t i = in.size(); i-- > 0;) {
    strides[lead + i] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strided_offsets(out, strides);
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
  NodePtr na = a.node(), nb = b.node();
  if (a.shape() == b.shape()) {
    Vector v;
    switch (kind) {
      case BinaryKind::Add: v = a.value() + b.value(); break;
      case BinaryKind::Sub: v = a.value() - b.value(); break;
      case BinaryKind::Mul: v = a.value().cwiseProduct(b.value()); break;
    }
    return make_result(a.shape(), std::move(v), {a, b}, [na, nb, kind](const Vector& g) {
      switch (kind) {
        case BinaryKind::Add:
          accumulate(na, g);
          accumulate(nb, g);
          break;
        case BinaryKind::Sub:
          accumulate(na, g);
          if (nb->requires_grad) nb->grad_buffer() -= g;
          break;
        case BinaryKind::Mul:
          if (na->requires_grad) na->grad_buffer() += g.cwiseProduct(nb->value);
          if (nb->requires_grad) nb->grad_buffer() += g.cwiseProduct(na->value);
          break;
      }
    });
  }

  Shape out = broadcast_shape(a.shape(), b.shape());
  auto oa = broadcast_offsets(a.shape(), out);
  auto ob = broadcast_offsets(b.shape(), out);
  const Index n = numel(out);
  Vector v(n);
  const Vector& av = a.value();
  const Vector& bv = b.value();
  for (Index k = 0; k < n; ++k) {
    const double x = av[oa[k]], y = bv[ob[k]];
    v[k] = kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y;
  }
  return make_result(out, std::move(v), {a, b},
                     [na, nb, kind, oa = std::move(oa), ob = std::move(ob)](const Vector& g) {
                       const Index n = g.size();
                       if (na->requires_grad) {
                         Vector& ga = na->grad_buffer();
                         for (Index k = 0; k < n; ++k) {
                           ga[oa[k]] += kind == BinaryKind::Mul ? g[k] * nb->value[ob[k]] : g[k];
                         }
                       }
                       if (nb->requires_grad) {
                         Vector& gb = nb->grad_buffer();
                         for (Index k = 0; k < n; ++k) {
                           gb[ob[k]] += kind == BinaryKind::Mul ? g[k] * na->value[oa[k]]
                                        : kind == BinaryKind::Sub ? -g[k]
                                                                  : g[k];
                         }
                       }
                     });
}

Tensor elementwise(const Tensor& x, Vector value, Vector local_derivative) {
  NodePtr nx = x.node();
  return make_result(x.shape(), std::move(value), {x},
                     [nx, d = std::move(local_derivative)](const Vector& g) {
                       if (nx->requires_grad) nx->grad_buffer() += g.cwiseProduct(d);
                     });
}

Tensor reindex(const Tensor& x, Shape out_shape, std::vector<Index> offsets) {
  NodePtr nx = x.node();
  const Vector& xv = x.value();
  Vector v(static_cast<Index>(offsets.size()));
  for (size_t k = 0; k < offsets.size(); ++k) v[static_cast<Index>(k)] = xv[offsets[k]];
  return make_result(std::move(out_shape), std::move(v), {x}, [nx, off = std::move(offsets)](const Vector& g) {
    if (!nx->requires_grad) return;
    Vector& gx = nx->grad_buffer();
    for (size_t k = 0; k < off.size(); ++k) gx[off[k]] += g[static_cast<Index>(k)];
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul); }

Tensor mul_scalar(const Tensor& a, double s) {
  NodePtr na = a.node();
  return make_result(a.shape(), a.value() * s, {a}, [na, s](const Vector& g) {
    if (na->requires_grad) na->grad_buffer() += g * s;
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  NodePtr na = a.node();
  return make_result(a.shape(), a.value().array() + s, {a}, [na](const Vector& g) { accumulate(na, g); });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor square(const Tensor& a) { return elementwise(a, a.value().array().square(), 2.0 * a.value()); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul dimension mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Index m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  NodePtr na = a.node(), nb = b.node();

  if (b.rank() == 2) {
    // Fold every leading axis of `a` into rows: one GEMM.
    Shape out = a.shape();
    out.back() = n;
    const Index rows = a.size() / k;
    Vector v(rows * n);
    MatrixMap(v.data(), rows, n).noalias() =
        ConstMatrixMap(a.value().data(), rows, k) * ConstMatrixMap(b.value().data(), k, n);
    return make_result(std::move(out), std::move(v), {a, b}, [na, nb, rows, k, n](const Vector& g) {
      ConstMatrixMap G(g.data(), rows, n);
      if (na->requires_grad) {
        MatrixMap(na->grad_buffer().data(), rows, k).noalias() += G * ConstMatrixMap(nb->value.data(), k, n).transpose();
      }
      if (nb->requires_grad) {
        MatrixMap(nb->grad_buffer().data(), k, n).noalias() +=
            ConstMatrixMap(na->value.data(), rows, k).transpose() * G;
      }
    });
  }

  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shape(batch_a, batch_b);
  } catch (const ShapeError&) {
    throw ShapeError("matmul batch mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  auto oa = broadcast_offsets(batch_a, batch);
  auto ob = broadcast_offsets(batch_b, batch);
  Shape out = batch;
  out.push_back(m);
  out.push_back(n);
  const Index count = numel(batch);
  Vector v(count * m * n);
  for (Index i = 0; i < count; ++i) {
    MatrixMap(v.data() + i * m * n, m, n).noalias() = ConstMatrixMap(a.value().data() + oa[i] * m * k, m, k) *
                                                      ConstMatrixMap(b.value().data() + ob[i] * k * n, k, n);
  }
  return make_result(std::move(out), std::move(v), {a, b},
                     [na, nb, m, k, n, oa = std::move(oa), ob = std::move(ob)](const Vector& g) {
                       for (size_t i = 0; i < oa.size(); ++i) {
                         ConstMatrixMap G(g.data() + static_cast<Index>(i) * m * n, m, n);
                         if (na->requires_grad) {
                           MatrixMap(na->grad_buffer().data() + oa[i] * m * k, m, k).noalias() +=
                               G * ConstMatrixMap(nb->value.data() + ob[i] * k * n, k, n).transpose();
                         }
                         if (nb->requires_grad) {
                           MatrixMap(nb->grad_buffer().data() + ob[i] * k * n, k, n).noalias() +=
                               ConstMatrixMap(na->value.data() + oa[i] * m * k, m, k).transpose() * G;
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  const Index len = x.shape()[ax];
  const Index inner = product(x.shape(), ax + 1, x.shape().size());
  const Index outer = len == 0 ? 0 : x.size() / (len * inner);
  const Vector& xv = x.value();
  Vector y(x.size());
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (Index j = 0; j < len; ++j) z += (y[base + j * inner] = std::exp(xv[base + j * inner] - mx));
      for (Index j = 0; j < len; ++j) y[base + j * inner] /= z;
    }
  }
  NodePtr nx = x.node();
  Vector saved = y;
  return make_result(x.shape(), std::move(y), {x}, [nx, y = std::move(saved), outer, len, inner](const Vector& g) {
    if (!nx->requires_grad) return;
    Vector& gx = nx->grad_buffer();
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * len * inner + i;
        double dot = 0.0;
        for (Index j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (Index j = 0; j < len; ++j) gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  const Index len = x.shape()[ax];
  const Index inner = product(x.shape(), ax + 1, x.shape().size());
  const Index outer = len == 0 ? 0 : x.size() / (len * inner);
  const Vector& xv = x.value();
  Vector y(x.size());
  Vector p(x.size());
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (Index j = 0; j < len; ++j) z += std::exp(xv[base + j * inner] - mx);
      const double lz = mx + std::log(z);
      for (Index j = 0; j < len; ++j) {
        y[base + j * inner] = xv[base + j * inner] - lz;
        p[base + j * inner] = std::exp(y[base + j * inner]);
      }
    }
  }
  NodePtr nx = x.node();
  return make_result(x.shape(), std::move(y), {x}, [nx, p = std::move(p), outer, len, inner](const Vector& g) {
    if (!nx->requires_grad) return;
    Vector& gx = nx->grad_buffer();
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * len * inner + i;
        double total = 0.0;
        for (Index j = 0; j < len; ++j) total += g[base + j * inner];
        for (Index j = 0; j < len; ++j) gx[base + j * inner] += g[base + j * inner] - p[base + j * inner] * total;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm eps must be positive");
  if (x.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
  const Index d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm affine shape mismatch: x " + to_string(x.shape()) + ", gamma " +
                     to_string(gamma.shape()) + ", beta " + to_string(beta.shape()));
  }
  const Index rows = d == 0 ? 0 : x.size() / d;
  ConstMatrixMap X(x.value().data(), rows, d);
  RowMatrix xhat(rows, d);
  Vector inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const double mu = X.row(r).mean();
    const double var = (X.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mu) * inv_std[r];
  }
  Vector y(x.size());
  MatrixMap Y(y.data(), rows, d);
  Y = (xhat.array().rowwise() * gamma.value().transpose().array()).rowwise() + beta.value().transpose().array();

  NodePtr nx = x.node(), ng = gamma.node(), nb = beta.node();
  return make_result(x.shape(), std::move(y), {x, gamma, beta},
                     [nx, ng, nb, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](const Vector& g) {
                       ConstMatrixMap G(g.data(), rows, d);
                       if (ng->requires_grad) ng->grad_buffer() += (G.array() * xhat.array()).colwise().sum().transpose().matrix();
                       if (nb->requires_grad) nb->grad_buffer() += G.colwise().sum().transpose();
                       if (nx->requires_grad) {
                         MatrixMap GX(nx->grad_buffer().data(), rows, d);
                         const auto gamma_row = ng->value.transpose().array();
                         for (Index r = 0; r < rows; ++r) {
                           const Eigen::ArrayXd dxhat = (G.row(r).array() * gamma_row).transpose();
                           const Eigen::ArrayXd xh = xhat.row(r).transpose().array();
                           const double m1 = dxhat.mean();
                           const double m2 = (dxhat * xh).mean();
                           GX.row(r).array() += (inv_std[r] * (dxhat - m1 - xh * m2)).transpose();
                         }
                       }
                     });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const auto xa = x.value().array();
  const Eigen::ArrayXd cdf = 0.5 * (1.0 + (xa * inv_sqrt2).unaryExpr([](double v) { return std::erf(v); }));
  const Eigen::ArrayXd pdf = (-0.5 * xa.square()).exp() * (std::numbers::inv_sqrtpi * inv_sqrt2);
  return elementwise(x, (xa * cdf).matrix(), (cdf + xa * pdf).matrix());
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp with lo > hi");
  const auto xa = x.value().array();
  Vector mask = ((xa >= lo) && (xa <= hi)).cast<double>().matrix();
  return elementwise(x, xa.max(lo).min(hi).matrix(), std::move(mask));
}

Tensor sum(const Tensor& x) {
  NodePtr nx = x.node();
  return make_result({}, Vector::Constant(1, x.value().sum()), {x}, [nx](const Vector& g) {
    if (nx->requires_grad) nx->grad_buffer().array() += g[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean of an empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank());
  const Index len = x.shape()[ax];
  const Index inner = product(x.shape(), ax + 1, x.shape().size());
  const Index outer = product(x.shape(), 0, ax);
  Shape out = x.shape();
  out.erase(out.begin() + ax);
  Vector v = Vector::Zero(outer * inner);
  const Vector& xv = x.value();
  for (Index o = 0; o < outer; ++o)
    for (Index j = 0; j < len; ++j)
      for (Index i = 0; i < inner; ++i) v[o * inner + i] += xv[(o * len + j) * inner + i];
  NodePtr nx = x.node();
  return make_result(std::move(out), std::move(v), {x}, [nx, outer, len, inner](const Vector& g) {
    if (!nx->requires_grad) return;
    Vector& gx = nx->grad_buffer();
    for (Index o = 0; o < outer; ++o)
      for (Index j = 0; j < len; ++j)
        for (Index i = 0; i < inner; ++i) gx[(o * len + j) * inner + i] += g[o * inner + i];
  });
}

Tensor mean(const Tensor& x, int axis) {
  const Index len = x.dim(axis);
  if (len == 0) throw ShapeError("mean over an empty axis");
  return mul_scalar(sum(x, axis), 1.0 / static_cast<double>(len));
}

Tensor l2_norm(const Tensor& x) {
  const double norm = x.value().norm();
  NodePtr nx = x.node();
  return make_result({}, Vector::Constant(1, norm), {x}, [nx, norm](const Vector& g) {
    if (nx->requires_grad && norm > 0.0) nx->grad_buffer() += nx->value * (g[0] / norm);
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  NodePtr nx = x.node();
  return make_result(std::move(shape), x.value(), {x}, [nx](const Vector& g) { accumulate(nx, g); });
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) throw ShapeError("permute axes do not match rank of " + to_string(x.shape()));
  std::vector<Index> in_strides(static_cast<size_t>(r));
  Index s = 1;
  for (int i = r; i-- > 0;) {
    in_strides[static_cast<size_t>(i)] = s;
    s *= x.shape()[static_cast<size_t>(i)];
  }
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape out(static_cast<size_t>(r));
  std::vector<Index> strides(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int a = normalize_axis(axes[static_cast<size_t>(i)], r);
    if (seen[static_cast<size_t>(a)]) throw ShapeError("permute axes repeat an axis");
    seen[static_cast<size_t>(a)] = true;
    out[static_cast<size_t>(i)] = x.shape()[static_cast<size_t>(a)];
    strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(a)];
  }
  auto offsets = strided_offsets(out, strides);
  return reindex(x, std::move(out), std::move(offsets));
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  std::vector<int> axes(static_cast<size_t>(x.rank()));
  for (int i = 0; i < x.rank(); ++i) axes[static_cast<size_t>(i)] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw ShapeError("cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  }
  return reindex(x, shape, broadcast_offsets(x.shape(), shape));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int r = parts.front().rank();
  const int ax = normalize_axis(axis, r);
  Shape out = parts.front().shape();
  out[ax] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == r;
    for (int i = 0; ok && i < r; ++i) ok = i == ax || p.shape()[i] == parts.front().shape()[i];
    if (!ok) {
      throw ShapeError("concat extent mismatch: " + to_string(parts.front().shape()) + " vs " + to_string(p.shape()));
    }
    out[ax] += p.shape()[ax];
  }
  const Index inner = product(out, ax + 1, out.size());
  const Index outer = product(out, 0, ax);
  const Index row = out[ax] * inner;
  Vector v(numel(out));
  std::vector<Index> widths;
  Index offset = 0;
  for (const auto& p : parts) {
    const Index w = p.shape()[ax] * inner;
    for (Index o = 0; o < outer; ++o) v.segment(o * row + offset, w) = p.value().segment(o * w, w);
    widths.push_back(w);
    offset += w;
  }
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result(std::move(out), std::move(v), parts,
                     [nodes = std::move(nodes), widths = std::move(widths), outer, row](const Vector& g) {
                       Index offset = 0;
                       for (size_t i = 0; i < nodes.size(); ++i) {
                         const Index w = widths[i];
                         if (nodes[i]->requires_grad) {
                           Vector& gp = nodes[i]->grad_buffer();
                           for (Index o = 0; o < outer; ++o) gp.segment(o * w, w) += g.segment(o * row + offset, w);
                         }
                         offset += w;
                       }
                     });
}

Tensor slice(const Tensor& x, int axis, Index begin, Index end) {
  const int ax = normalize_axis(axis, x.rank());
  const Index len = x.shape()[ax];
  if (begin < 0 || end < begin || end > len) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for axis " +
                     std::to_string(ax) + " of " + to_string(x.shape()));
  }
  Shape out = x.shape();
  out[ax] = end - begin;
  const Index inner = product(out, ax + 1, out.size());
  const Index outer = product(out, 0, ax);
  const Index w = (end - begin) * inner;
  const Index row = len * inner;
  Vector v(outer * w);
  for (Index o = 0; o < outer; ++o) v.segment(o * w, w) = x.value().segment(o * row + begin * inner, w);
  NodePtr nx = x.node();
  return make_result(std::move(out), std::move(v), {x}, [nx, outer, w, row, start = begin * inner](const Vector& g) {
    if (!nx->requires_grad) return;
    Vector& gx = nx->grad_buffer();
    for (Index o = 0; o < outer; ++o) gx.segment(o * row + start, w) += g.segment(o * w, w);
  });
}

Tensor gather(const Tensor& x, std::span<const Index> index, Shape out_shape) {
  if (numel(out_shape) != static_cast<Index>(index.size())) {
    throw ShapeError("gather index count does not match output shape " + to_string(out_shape));
  }
  for (Index i : index) {
    if (i < 0 || i >= x.size()) throw ShapeError("gather index out of range for " + to_string(x.shape()));
  }
  return reindex(x, std::move(out_shape), std::vector<Index>(index.begin(), index.end()));
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  if (u.rank() != 1 || u.shape() != v.shape()) {
    throw ShapeError("cosine_similarity needs equal 1-d shapes, got " + to_string(u.shape()) + " and " +
                     to_string(v.shape()));
  }
  if (u.value().isZero(0.0) || v.value().isZero(0.0)) {
    throw ContractError("cosine_similarity of a zero-norm vector");
  }
  return reshape(cosine_similarity_rows(u, v), {});
}

Tensor cosine_similarity_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || a.shape() != b.shape()) {
    throw ShapeError("cosine_similarity_rows shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const Index d = a.dim(-1);
  const Index rows = d == 0 ? 0 : a.size() / d;
  ConstMatrixMap A(a.value().data(), rows, d), B(b.value().data(), rows, d);
  Vector na = A.rowwise().norm(), nb = B.rowwise().norm();
  Vector dot = A.cwiseProduct(B).rowwise().sum();
  Vector c = dot.array() / ((na.array() + kNormGuard) * (nb.array() + kNormGuard));
  Shape out(a.shape().begin(), a.shape().end() - 1);
  NodePtr pa = a.node(), pb = b.node();
  return make_result(std::move(out), c, {a, b},
                     [pa, pb, rows, d, na = std::move(na), nb = std::move(nb), dot = std::move(dot)](const Vector& g) {
                       ConstMatrixMap A(pa->value.data(), rows, d), B(pb->value.data(), rows, d);
                       for (Index r = 0; r < rows; ++r) {
                         const double ga = na[r] + kNormGuard, gb = nb[r] + kNormGuard;
                         const double s = g[r] / (ga * gb);
                         if (pa->requires_grad) {
                           const double t = na[r] > 0.0 ? g[r] * dot[r] / (ga * ga * gb * na[r]) : 0.0;
                           MatrixMap(pa->grad_buffer().data(), rows, d).row(r) += s * B.row(r) - t * A.row(r);
                         }
                         if (pb->requires_grad) {
                           const double t = nb[r] > 0.0 ? g[r] * dot[r] / (gb * gb * ga * nb[r]) : 0.0;
                           MatrixMap(pb->grad_buffer().data(), rows, d).row(r) += s * A.row(r) - t * B.row(r);
                         }
                       }
                     });
}

Tensor mse(const Tensor& x, const Tensor& y, Reduction reduction) {
  if (x.shape() != y.shape()) {
    throw ShapeError("mse shape mismatch: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  }
  const double scale = reduction == Reduction::Mean && x.size() > 0 ? 1.0 / static_cast<double>(x.size()) : 1.0;
  Vector diff = x.value() - y.value();
  const double value = diff.squaredNorm() * scale;
  NodePtr nx = x.node(), ny = y.node();
  return make_result({}, Vector::Constant(1, value), {x, y}, [nx, ny, diff = std::move(diff), scale](const Vector& g) {
    const double k = 2.0 * scale * g[0];
    if (nx->requires_grad) nx->grad_buffer() += k * diff;
    if (ny->requires_grad) ny->grad_buffer() -= k * diff;
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<Index>(labels.size())) {
    throw ShapeError("cross_entropy expects logits [N, K] with N labels, got " + to_string(logits.shape()));
  }
  const Index n = logits.dim(0), k = logits.dim(1);
  for (int y : labels) {
    if (y < 0 || y >= k) throw ContractError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
  }
  ConstMatrixMap L(logits.value().data(), n, k);
  RowMatrix p(n, k);
  double loss = 0.0;
  for (Index r = 0; r < n; ++r) {
    const double mx = L.row(r).maxCoeff();
    p.row(r) = (L.row(r).array() - mx).exp();
    const double z = p.row(r).sum();
    p.row(r) /= z;
    loss -= L(r, labels[r]) - mx - std::log(z);
  }
  loss /= static_cast<double>(std::max<Index>(n, 1));
  NodePtr nl = logits.node();
  std::vector<int> y(labels.begin(), labels.end());
  return make_result({}, Vector::Constant(1, loss), {logits}, [nl, p = std::move(p), y = std::move(y), n, k](const Vector& g) {
    if (!nl->requires_grad) return;
    RowMatrix d = p;
    for (Index r = 0; r < n; ++r) d(r, y[static_cast<size_t>(r)]) -= 1.0;
    MatrixMap(nl->grad_buffer().data(), n, k) += d * (g[0] / static_cast<double>(n));
  });
}

}  // namespace robtok
