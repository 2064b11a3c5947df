#include "aerialformer/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "aerialformer/flops.hpp"

namespace aerialformer::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

std::size_t sz(Index v) { return static_cast<std::size_t>(v); }

int normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  }
  return a;
}

Shape strides_of(const Shape& shape) {
  Shape s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// For every flat index of `out`, the flat index of the broadcast source `in`.
std::vector<Index> broadcast_offsets(const Shape& out, const Shape& in) {
  const std::size_t r = out.size();
  Shape padded(r, 1);
  std::copy(in.begin(), in.end(), padded.begin() + static_cast<std::ptrdiff_t>(r - in.size()));
  const Shape in_strides = strides_of(padded);
  Shape eff(r, 0);
  for (std::size_t i = 0; i < r; ++i) eff[i] = padded[i] == 1 ? 0 : in_strides[i];

  const Index total = numel(out);
  std::vector<Index> offsets(sz(total));
  Shape counter(r, 0);
  Index off = 0;
  for (Index flat = 0; flat < total; ++flat) {
    offsets[sz(flat)] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out[d]) {
        off += eff[d];
        break;
      }
      off -= eff[d] * (out[d] - 1);
      counter[d] = 0;
    }
  }
  return offsets;
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const Index n = numel(out_shape);
  const bool a_direct = a.shape() == out_shape;
  const bool b_direct = b.shape() == out_shape;
  auto a_off = a_direct ? std::vector<Index>{} : broadcast_offsets(out_shape, a.shape());
  auto b_off = b_direct ? std::vector<Index>{} : broadcast_offsets(out_shape, b.shape());
  auto ad = a.data();
  auto bd = b.data();
  Buffer out(sz(n));
  for (Index i = 0; i < n; ++i) {
    const double x = ad[sz(a_direct ? i : a_off[sz(i)])];
    const double y = bd[sz(b_direct ? i : b_off[sz(i)])];
    switch (kind) {
      case BinaryKind::kAdd: out[sz(i)] = x + y; break;
      case BinaryKind::kSub: out[sz(i)] = x - y; break;
      case BinaryKind::kMul: out[sz(i)] = x * y; break;
    }
  }
  FlopCounter::charge(static_cast<std::uint64_t>(n));
  return make_result(
      name, out_shape, std::move(out), {a, b},
      [a, b, kind, n, a_direct, b_direct, a_off = std::move(a_off),
       b_off = std::move(b_off)](std::span<const double> g) mutable {
        auto ia = [&](Index i) { return sz(a_direct ? i : a_off[sz(i)]); };
        auto ib = [&](Index i) { return sz(b_direct ? i : b_off[sz(i)]); };
        if (a.requires_grad()) {
          auto ga = a.mutable_grad();
          auto bd = b.data();
          for (Index i = 0; i < n; ++i) {
            ga[ia(i)] += kind == BinaryKind::kMul ? g[sz(i)] * bd[ib(i)] : g[sz(i)];
          }
        }
        if (b.requires_grad()) {
          auto gb = b.mutable_grad();
          auto ad = a.data();
          for (Index i = 0; i < n; ++i) {
            switch (kind) {
              case BinaryKind::kAdd: gb[ib(i)] += g[sz(i)]; break;
              case BinaryKind::kSub: gb[ib(i)] -= g[sz(i)]; break;
              case BinaryKind::kMul: gb[ib(i)] += g[sz(i)] * ad[ia(i)]; break;
            }
          }
        }
      });
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const Index da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  Buffer out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  FlopCounter::charge(out.size());
  return make_result("scale", a.shape(), std::move(out), {a},
                     [a, factor](std::span<const double> g) mutable {
                       auto ga = a.mutable_grad();
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * g[i];
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const Index m = a.dim(-2);
  const Index k = a.dim(-1);
  const Index n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shape(a_batch, b_batch);
  } catch (const ShapeError&) {
    throw ShapeError("matmul batch dimensions not broadcastable: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const Index nb = numel(batch);
  auto a_off = broadcast_offsets(batch, a_batch);
  auto b_off = broadcast_offsets(batch, b_batch);

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Buffer out(sz(nb * m * n));
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (Index i = 0; i < nb; ++i) {
    ConstMapMat am(ad + a_off[sz(i)] * m * k, m, k);
    ConstMapMat bm(bd + b_off[sz(i)] * k * n, k, n);
    MapMat(out.data() + i * m * n, m, n).noalias() = am * bm;
  }
  FlopCounter::charge(static_cast<std::uint64_t>(2 * nb * m * n * k));
  return make_result("matmul", out_shape, std::move(out), {a, b},
                     [a, b, m, k, n, nb, a_off = std::move(a_off),
                      b_off = std::move(b_off)](std::span<const double> g) mutable {
                       const double* ad = a.data().data();
                       const double* bd = b.data().data();
                       double* ga = a.requires_grad() ? a.mutable_grad().data() : nullptr;
                       double* gb = b.requires_grad() ? b.mutable_grad().data() : nullptr;
                       for (Index i = 0; i < nb; ++i) {
                         ConstMapMat gm(g.data() + i * m * n, m, n);
                         if (ga) {
                           ConstMapMat bm(bd + b_off[sz(i)] * k * n, k, n);
                           MapMat(ga + a_off[sz(i)] * m * k, m, k).noalias() += gm * bm.transpose();
                         }
                         if (gb) {
                           ConstMapMat am(ad + a_off[sz(i)] * m * k, m, k);
                           MapMat(gb + b_off[sz(i)] * k * n, k, n).noalias() += am.transpose() * gm;
                         }
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  Index known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[sz(infer)] = x.numel() / known;
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Buffer out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x},
                     [x](std::span<const double> g) mutable { accumulate_grad(x, g); });
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  const std::size_t r = x.rank();
  if (order.size() != r) throw ShapeError("permute: order rank differs from " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (int o : order) {
    if (o < 0 || sz(o) >= r || seen[sz(o)]) throw ShapeError("permute: invalid axis order");
    seen[sz(o)] = true;
  }
  const Shape in_strides = strides_of(x.shape());
  Shape out_shape(r);
  Shape src_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[sz(order[i])];
    src_strides[i] = in_strides[sz(order[i])];
  }
  const Index n = x.numel();
  std::vector<Index> map(sz(n));
  {
    Shape counter(r, 0);
    Index off = 0;
    for (Index flat = 0; flat < n; ++flat) {
      map[sz(flat)] = off;
      for (std::size_t d = r; d-- > 0;) {
        if (++counter[d] < out_shape[d]) {
          off += src_strides[d];
          break;
        }
        off -= src_strides[d] * (out_shape[d] - 1);
        counter[d] = 0;
      }
    }
  }
  Buffer out(sz(n));
  auto xd = x.data();
  for (Index i = 0; i < n; ++i) out[sz(i)] = xd[sz(map[sz(i)])];
  return make_result("permute", out_shape, std::move(out), {x},
                     [x, map = std::move(map)](std::span<const double> g) mutable {
                       auto gx = x.mutable_grad();
                       for (std::size_t i = 0; i < map.size(); ++i) gx[sz(map[i])] += g[i];
                     });
}

Tensor transpose(const Tensor& x) {
  std::vector<int> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  if (order.size() < 2) throw ShapeError("transpose needs rank >= 2");
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(x, order);
}

Tensor roll(const Tensor& x, const std::vector<Index>& shifts, const std::vector<int>& axes) {
  if (shifts.size() != axes.size()) throw ShapeError("roll: shifts and axes differ in length");
  const std::size_t r = x.rank();
  Shape shift_per_axis(r, 0);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    const int a = normalize_axis(axes[i], r, "roll");
    const Index d = x.shape()[sz(a)];
    shift_per_axis[sz(a)] = ((shifts[i] % d) + d) % d;
  }
  const Shape& shape = x.shape();
  const Shape strides = strides_of(shape);
  const Index n = x.numel();
  std::vector<Index> map(sz(n));  // out flat -> source flat
  Shape counter(r, 0);
  for (Index flat = 0; flat < n; ++flat) {
    Index src = 0;
    for (std::size_t d = 0; d < r; ++d) {
      Index c = counter[d] - shift_per_axis[d];
      if (c < 0) c += shape[d];
      src += c * strides[d];
    }
    map[sz(flat)] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < shape[d]) break;
      counter[d] = 0;
    }
  }
  Buffer out(sz(n));
  auto xd = x.data();
  for (Index i = 0; i < n; ++i) out[sz(i)] = xd[sz(map[sz(i)])];
  return make_result("roll", shape, std::move(out), {x},
                     [x, map = std::move(map)](std::span<const double> g) mutable {
                       auto gx = x.mutable_grad();
                       for (std::size_t i = 0; i < map.size(); ++i) gx[sz(map[i])] += g[i];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t r = parts[0].rank();
  const int a = normalize_axis(axis, r, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[sz(a)] = 0;
  for (const Tensor& p : parts) {
    bool ok = p.rank() == r;
    for (std::size_t i = 0; ok && i < r; ++i) {
      if (static_cast<int>(i) != a && p.shape()[i] != parts[0].shape()[i]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: shape " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(parts[0].shape()) + " along axis " + std::to_string(a));
    }
    out_shape[sz(a)] += p.shape()[sz(a)];
  }
  Index outer = 1;
  for (int i = 0; i < a; ++i) outer *= out_shape[sz(i)];
  Index inner = 1;
  for (std::size_t i = sz(a) + 1; i < r; ++i) inner *= out_shape[i];
  const Index out_row = out_shape[sz(a)] * inner;

  Buffer out(sz(numel(out_shape)));
  Index col = 0;
  for (const Tensor& p : parts) {
    const Index row = p.shape()[sz(a)] * inner;
    auto pd = p.data();
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(pd.begin() + o * row, row, out.begin() + o * out_row + col);
    }
    col += row;
  }
  return make_result("concat", out_shape, std::move(out), parts,
                     [parts, a, outer, inner, out_row](std::span<const double> g) mutable {
                       Index col = 0;
                       for (const Tensor& p : parts) {
                         const Index row = p.shape()[sz(a)] * inner;
                         if (p.requires_grad()) {
                           auto gp = p.mutable_grad();
                           for (Index o = 0; o < outer; ++o) {
                             for (Index j = 0; j < row; ++j) {
                               gp[sz(o * row + j)] += g[sz(o * out_row + col + j)];
                             }
                           }
                         }
                         col += row;
                       }
                     });
}

Tensor slice(const Tensor& x, int axis, Index start, Index length) {
  const std::size_t r = x.rank();
  const int a = normalize_axis(axis, r, "slice");
  const Index extent = x.shape()[sz(a)];
  if (start < 0 || length < 0 || start + length > extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(a) + " of " +
                     shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[sz(a)] = length;
  Index outer = 1;
  for (int i = 0; i < a; ++i) outer *= out_shape[sz(i)];
  Index inner = 1;
  for (std::size_t i = sz(a) + 1; i < r; ++i) inner *= out_shape[i];
  const Index in_row = extent * inner;
  const Index row = length * inner;
  const Index col = start * inner;
  Buffer out(sz(outer * row));
  auto xd = x.data();
  for (Index o = 0; o < outer; ++o) {
    std::copy_n(xd.begin() + o * in_row + col, row, out.begin() + o * row);
  }
  return make_result("slice", out_shape, std::move(out), {x},
                     [x, outer, in_row, row, col](std::span<const double> g) mutable {
                       auto gx = x.mutable_grad();
                       for (Index o = 0; o < outer; ++o) {
                         for (Index j = 0; j < row; ++j) gx[sz(o * in_row + col + j)] += g[sz(o * row + j)];
                       }
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const Index> indices) {
  if (table.rank() != 2) throw ShapeError("gather_rows needs a 2-D table, got " + shape_str(table.shape()));
  const Index rows = table.dim(0);
  const Index cols = table.dim(1);
  std::vector<Index> idx(indices.begin(), indices.end());
  Buffer out(idx.size() * sz(cols));
  auto td = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) throw ShapeError("gather_rows: index out of range");
    std::copy_n(td.begin() + idx[i] * cols, cols, out.begin() + static_cast<std::ptrdiff_t>(i) * cols);
  }
  Shape out_shape{static_cast<Index>(idx.size()), cols};
  return make_result("gather_rows", std::move(out_shape), std::move(out), {table},
                     [table, cols, idx = std::move(idx)](std::span<const double> g) mutable {
                       auto gt = table.mutable_grad();
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         for (Index c = 0; c < cols; ++c) gt[sz(idx[i] * cols + c)] += g[i * sz(cols) + sz(c)];
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  FlopCounter::charge(static_cast<std::uint64_t>(x.numel()));
  return make_result("sum", {}, {s}, {x}, [x](std::span<const double> g) mutable {
    auto gx = x.mutable_grad();
    for (double& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t r = x.rank();
  const int a = normalize_axis(axis, r, "softmax");
  Index outer = 1;
  for (int i = 0; i < a; ++i) outer *= x.shape()[sz(i)];
  const Index len = x.shape()[sz(a)];
  Index inner = 1;
  for (std::size_t i = sz(a) + 1; i < r; ++i) inner *= x.shape()[i];

  auto xd = x.data();
  Buffer out(xd.size());
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < len; ++j) mx = std::max(mx, xd[sz(base + j * inner)]);
      double total = 0.0;
      for (Index j = 0; j < len; ++j) {
        const double e = std::exp(xd[sz(base + j * inner)] - mx);
        out[sz(base + j * inner)] = e;
        total += e;
      }
      for (Index j = 0; j < len; ++j) out[sz(base + j * inner)] /= total;
    }
  }
  FlopCounter::charge(static_cast<std::uint64_t>(4 * x.numel()));
  Tensor y = Tensor::from(x.shape(), std::move(out));
  if (needs_grad({x})) {
    attach("softmax", {x}, y, [x, y, outer, len, inner](std::span<const double> g) mutable {
      auto gx = x.mutable_grad();
      auto yd = y.data();
      for (Index o = 0; o < outer; ++o) {
        for (Index in = 0; in < inner; ++in) {
          const Index base = o * len * inner + in;
          double dot = 0.0;
          for (Index j = 0; j < len; ++j) dot += g[sz(base + j * inner)] * yd[sz(base + j * inner)];
          for (Index j = 0; j < len; ++j) {
            const auto p = sz(base + j * inner);
            gx[p] += yd[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
  const Index d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: gamma/beta of size " + std::to_string(gamma.numel()) + "/" +
                     std::to_string(beta.numel()) + " do not match last dim of " +
                     shape_str(x.shape()));
  }
  const Index rows = x.numel() / std::max<Index>(d, 1);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  Buffer xhat(xd.size());
  Buffer rstd(sz(rows));
  Buffer out(xd.size());
  for (Index r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mu = 0.0;
    for (Index j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (Index j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[sz(r)] = rs;
    for (Index j = 0; j < d; ++j) {
      const auto p = sz(r * d + j);
      xhat[p] = (row[j] - mu) * rs;
      out[p] = gd[sz(j)] * xhat[p] + bd[sz(j)];
    }
  }
  FlopCounter::charge(static_cast<std::uint64_t>(8 * x.numel()));
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, d, rows, xhat = std::move(xhat),
       rstd = std::move(rstd)](std::span<const double> g) mutable {
        auto gd = gamma.data();
        if (gamma.requires_grad() || beta.requires_grad()) {
          Buffer dg(sz(d), 0.0), db(sz(d), 0.0);
          for (Index r = 0; r < rows; ++r) {
            for (Index j = 0; j < d; ++j) {
              const auto p = sz(r * d + j);
              dg[sz(j)] += g[p] * xhat[p];
              db[sz(j)] += g[p];
            }
          }
          accumulate_grad(gamma, dg);
          accumulate_grad(beta, db);
        }
        if (x.requires_grad()) {
          auto gx = x.mutable_grad();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (Index r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (Index j = 0; j < d; ++j) {
              const auto p = sz(r * d + j);
              const double dxh = g[p] * gd[sz(j)];
              s1 += dxh;
              s2 += dxh * xhat[p];
            }
            for (Index j = 0; j < d; ++j) {
              const auto p = sz(r * d + j);
              const double dxh = g[p] * gd[sz(j)];
              gx[p] += rstd[sz(r)] * (dxh - inv_d * s1 - xhat[p] * inv_d * s2);
            }
          }
        }
      });
}

namespace {

void check_bn_operands(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() != 4) throw ShapeError("batch_norm expects (N, C, H, W), got " + shape_str(x.shape()));
  const Index c = x.dim(1);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("batch_norm: channel parameters of length " + std::to_string(gamma.numel()) +
                     " do not match C=" + std::to_string(c));
  }
}

}  // namespace

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        ChannelStats* stats) {
  check_bn_operands(x, gamma, beta);
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Index m = n * hw;
  if (m < 2) {
    throw ShapeError("batch_norm in training mode needs N*H*W >= 2, got shape " +
                     shape_str(x.shape()));
  }
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  Buffer mu(sz(c), 0.0), var(sz(c), 0.0), rstd(sz(c));
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const double* p = xd.data() + (b * c + ch) * hw;
      for (Index i = 0; i < hw; ++i) mu[sz(ch)] += p[i];
    }
  }
  for (double& v : mu) v /= static_cast<double>(m);
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const double* p = xd.data() + (b * c + ch) * hw;
      for (Index i = 0; i < hw; ++i) var[sz(ch)] += (p[i] - mu[sz(ch)]) * (p[i] - mu[sz(ch)]);
    }
  }
  for (double& v : var) v /= static_cast<double>(m);
  for (Index ch = 0; ch < c; ++ch) rstd[sz(ch)] = 1.0 / std::sqrt(var[sz(ch)] + eps);

  Buffer xhat(xd.size()), out(xd.size());
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index base = (b * c + ch) * hw;
      for (Index i = 0; i < hw; ++i) {
        const auto p = sz(base + i);
        xhat[p] = (xd[p] - mu[sz(ch)]) * rstd[sz(ch)];
        out[p] = gd[sz(ch)] * xhat[p] + bd[sz(ch)];
      }
    }
  }
  if (stats) *stats = {std::vector<double>(mu.begin(), mu.end()), std::vector<double>(var.begin(), var.end())};
  FlopCounter::charge(static_cast<std::uint64_t>(8 * x.numel()));
  return make_result(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, hw, m, xhat = std::move(xhat),
       rstd = std::move(rstd)](std::span<const double> g) mutable {
        Buffer dg(sz(c), 0.0), db(sz(c), 0.0);
        for (Index b = 0; b < n; ++b) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index base = (b * c + ch) * hw;
            for (Index i = 0; i < hw; ++i) {
              dg[sz(ch)] += g[sz(base + i)] * xhat[sz(base + i)];
              db[sz(ch)] += g[sz(base + i)];
            }
          }
        }
        if (x.requires_grad()) {
          auto gx = x.mutable_grad();
          auto gam = gamma.data();
          const double inv_m = 1.0 / static_cast<double>(m);
          for (Index b = 0; b < n; ++b) {
            for (Index ch = 0; ch < c; ++ch) {
              const Index base = (b * c + ch) * hw;
              const double k = gam[sz(ch)] * rstd[sz(ch)];
              for (Index i = 0; i < hw; ++i) {
                const auto p = sz(base + i);
                gx[p] += k * (g[p] - inv_m * db[sz(ch)] - xhat[p] * inv_m * dg[sz(ch)]);
              }
            }
          }
        }
        accumulate_grad(gamma, dg);
        accumulate_grad(beta, db);
      });
}

Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const double> running_mean, std::span<const double> running_var,
                       double eps) {
  check_bn_operands(x, gamma, beta);
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (static_cast<Index>(running_mean.size()) != c || static_cast<Index>(running_var.size()) != c) {
    throw ShapeError("batch_norm: running statistics do not match C=" + std::to_string(c));
  }
  Buffer rstd(sz(c)), rmean(running_mean.begin(), running_mean.end());
  for (Index ch = 0; ch < c; ++ch) rstd[sz(ch)] = 1.0 / std::sqrt(running_var[sz(ch)] + eps);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  Buffer out(xd.size());
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index base = (b * c + ch) * hw;
      for (Index i = 0; i < hw; ++i) {
        const auto p = sz(base + i);
        out[p] = gd[sz(ch)] * (xd[p] - rmean[sz(ch)]) * rstd[sz(ch)] + bd[sz(ch)];
      }
    }
  }
  FlopCounter::charge(static_cast<std::uint64_t>(4 * x.numel()));
  return make_result("batch_norm_eval", x.shape(), std::move(out), {x, gamma, beta},
                     [x, gamma, beta, n, c, hw, rstd = std::move(rstd),
                      rmean = std::move(rmean)](std::span<const double> g) mutable {
                       auto xd = x.data();
                       auto gam = gamma.data();
                       Buffer dg(sz(c), 0.0), db(sz(c), 0.0);
                       double* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
                       for (Index b = 0; b < n; ++b) {
                         for (Index ch = 0; ch < c; ++ch) {
                           const Index base = (b * c + ch) * hw;
                           for (Index i = 0; i < hw; ++i) {
                             const auto p = sz(base + i);
                             const double xh = (xd[p] - rmean[sz(ch)]) * rstd[sz(ch)];
                             dg[sz(ch)] += g[p] * xh;
                             db[sz(ch)] += g[p];
                             if (gx) gx[p] += g[p] * gam[sz(ch)] * rstd[sz(ch)];
                           }
                         }
                       }
                       accumulate_grad(gamma, dg);
                       accumulate_grad(beta, db);
                     });
}

Tensor gelu(const Tensor& x) {
  auto xd = x.data();
  Buffer out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * std::numbers::sqrt2 / 2.0));
  }
  FlopCounter::charge(static_cast<std::uint64_t>(4 * x.numel()));
  return make_result("gelu", x.shape(), std::move(out), {x}, [x](std::span<const double> g) mutable {
    auto xd = x.data();
    auto gx = x.mutable_grad();
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < xd.size(); ++i) {
      const double v = xd[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Tensor relu(const Tensor& x) {
  auto xd = x.data();
  Buffer out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  FlopCounter::charge(static_cast<std::uint64_t>(x.numel()));
  return make_result("relu", x.shape(), std::move(out), {x}, [x](std::span<const double> g) mutable {
    auto xd = x.data();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < xd.size(); ++i) {
      if (xd[i] > 0.0) gx[i] += g[i];
    }
  });
}

Index conv_output_size(Index input, Index kernel, const ConvGeometry& g) {
  if (kernel < 1 || g.stride < 1 || g.dilation < 1 || g.padding < 0) {
    throw GeometryError("invalid convolution geometry: kernel=" + std::to_string(kernel) +
                        " stride=" + std::to_string(g.stride) +
                        " dilation=" + std::to_string(g.dilation) +
                        " padding=" + std::to_string(g.padding));
  }
  const Index span = input + 2 * g.padding - g.dilation * (kernel - 1) - 1;
  const Index out = span < 0 ? 0 : span / g.stride + 1;
  if (out < 1) {
    throw GeometryError("convolution output size < 1: floor((" + std::to_string(input) + " + 2*" +
                        std::to_string(g.padding) + " - " + std::to_string(g.dilation) + "*(" +
                        std::to_string(kernel) + "-1) - 1)/" + std::to_string(g.stride) + ") + 1");
  }
  return out;
}

namespace {

struct ConvPlan {
  Index channels, height, width;   // the spatially larger side
  Index out_h, out_w;              // the sliding-window grid
  Index kernel;
  ConvGeometry geom;
  Index rows() const { return channels * kernel * kernel; }
  Index cols() const { return out_h * out_w; }
};

// col[(c, ki, kj), (oy, ox)] = img[c, oy*s - p + ki*d, ox*s - p + kj*d] (zero outside).
void im2col(const ConvPlan& p, const double* img, double* col) {
  const Index s = p.geom.stride, pad = p.geom.padding, dil = p.geom.dilation;
  for (Index c = 0; c < p.channels; ++c) {
    for (Index ki = 0; ki < p.kernel; ++ki) {
      for (Index kj = 0; kj < p.kernel; ++kj) {
        double* dst = col + ((c * p.kernel + ki) * p.kernel + kj) * p.cols();
        for (Index oy = 0; oy < p.out_h; ++oy) {
          const Index y = oy * s - pad + ki * dil;
          double* row = dst + oy * p.out_w;
          if (y < 0 || y >= p.height) {
            std::fill_n(row, p.out_w, 0.0);
            continue;
          }
          const double* src = img + (c * p.height + y) * p.width;
          for (Index ox = 0; ox < p.out_w; ++ox) {
            const Index x = ox * s - pad + kj * dil;
            row[ox] = (x >= 0 && x < p.width) ? src[x] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into the image.
void col2im(const ConvPlan& p, const double* col, double* img) {
  const Index s = p.geom.stride, pad = p.geom.padding, dil = p.geom.dilation;
  for (Index c = 0; c < p.channels; ++c) {
    for (Index ki = 0; ki < p.kernel; ++ki) {
      for (Index kj = 0; kj < p.kernel; ++kj) {
        const double* srcc = col + ((c * p.kernel + ki) * p.kernel + kj) * p.cols();
        for (Index oy = 0; oy < p.out_h; ++oy) {
          const Index y = oy * s - pad + ki * dil;
          if (y < 0 || y >= p.height) continue;
          double* dst = img + (c * p.height + y) * p.width;
          const double* row = srcc + oy * p.out_w;
          for (Index ox = 0; ox < p.out_w; ++ox) {
            const Index x = ox * s - pad + kj * dil;
            if (x >= 0 && x < p.width) dst[x] += row[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvPlan& p) {
  return p.kernel == 1 && p.geom.stride == 1 && p.geom.padding == 0;
}

void check_bias(const Tensor& bias, Index channels, const char* op) {
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != channels)) {
    throw ShapeError(std::string(op) + ": bias shape " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(channels) + " output channels");
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g) {
  if (x.rank() != 4) throw ShapeError("conv2d expects (N, C, H, W) input, got " + shape_str(x.shape()));
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d expects square (Cout, Cin, k, k) weight, got " + shape_str(weight.shape()));
  }
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " expects " +
                     std::to_string(weight.dim(1)) + " input channels, input " +
                     shape_str(x.shape()) + " has " + std::to_string(cin));
  }
  check_bias(bias, cout, "conv2d");
  const ConvPlan plan{cin, h, w, conv_output_size(h, k, g), conv_output_size(w, k, g), k, g};
  const Index rows = plan.rows(), cols = plan.cols();
  const bool pointwise = is_pointwise(plan);

  Buffer out(sz(n * cout * cols));
  Buffer col(pointwise ? 0 : sz(rows * cols));
  ConstMapMat wm(weight.data().data(), cout, rows);
  for (Index b = 0; b < n; ++b) {
    const double* img = x.data().data() + b * cin * h * w;
    if (!pointwise) im2col(plan, img, col.data());
    ConstMapMat cm(pointwise ? img : col.data(), rows, cols);
    MapMat om(out.data() + b * cout * cols, cout, cols);
    om.noalias() = wm * cm;
    if (bias.defined()) om.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), cout);
  }
  FlopCounter::charge(static_cast<std::uint64_t>(2 * n * cout * rows * cols));
  return make_result(
      "conv2d", {n, cout, plan.out_h, plan.out_w}, std::move(out), {x, weight, bias},
      [x, weight, bias, plan, n, cout, pointwise](std::span<const double> gspan) mutable {
        const Index cin = plan.channels, rows = plan.rows(), cols = plan.cols();
        const Index img_size = cin * plan.height * plan.width;
        Buffer col(sz(rows * cols));
        ConstMapMat wm(weight.data().data(), cout, rows);
        double* gw = weight.requires_grad() ? weight.mutable_grad().data() : nullptr;
        double* gb = bias.defined() && bias.requires_grad() ? bias.mutable_grad().data() : nullptr;
        double* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
        for (Index b = 0; b < n; ++b) {
          ConstMapMat gm(gspan.data() + b * cout * cols, cout, cols);
          const double* img = x.data().data() + b * img_size;
          if (gw) {
            if (!pointwise) im2col(plan, img, col.data());
            ConstMapMat cm(pointwise ? img : col.data(), rows, cols);
            MapMat(gw, cout, rows).noalias() += gm * cm.transpose();
          }
          if (gb) Eigen::Map<Eigen::VectorXd>(gb, cout) += gm.rowwise().sum();
          if (gx) {
            if (pointwise) {
              MapMat(gx + b * img_size, rows, cols).noalias() += wm.transpose() * gm;
            } else {
              MapMat(col.data(), rows, cols).noalias() = wm.transpose() * gm;
              col2im(plan, col.data(), gx + b * img_size);
            }
          }
        }
      });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index stride,
                        Index padding) {
  if (x.rank() != 4) {
    throw ShapeError("conv_transpose2d expects (N, C, H, W) input, got " + shape_str(x.shape()));
  }
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv_transpose2d expects square (Cin, Cout, k, k) weight, got " +
                     shape_str(weight.shape()));
  }
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index cout = weight.dim(1), k = weight.dim(2);
  if (weight.dim(0) != cin) {
    throw ShapeError("conv_transpose2d: weight " + shape_str(weight.shape()) + " expects " +
                     std::to_string(weight.dim(0)) + " input channels, input has " +
                     std::to_string(cin));
  }
  check_bias(bias, cout, "conv_transpose2d");
  if (stride < 1 || padding < 0) {
    throw GeometryError("conv_transpose2d: invalid stride " + std::to_string(stride) +
                        " or padding " + std::to_string(padding));
  }
  const Index oh = (h - 1) * stride - 2 * padding + k;
  const Index ow = (w - 1) * stride - 2 * padding + k;
  if (oh < 1 || ow < 1) {
    throw GeometryError("conv_transpose2d output size < 1: (" + std::to_string(h) + " - 1)*" +
                        std::to_string(stride) + " - 2*" + std::to_string(padding) + " + " +
                        std::to_string(k));
  }
  // The forward pass is col2im of a conv whose "image" is the output.
  const ConvGeometry geom{stride, padding, 1};
  const ConvPlan plan{cout, oh, ow, h, w, k, geom};
  if (conv_output_size(oh, k, geom) != h || conv_output_size(ow, k, geom) != w) {
    throw GeometryError("conv_transpose2d: geometry is not the adjoint of a valid convolution");
  }
  const Index rows = plan.rows(), cols = plan.cols();
  Buffer out(sz(n * cout * oh * ow), 0.0);
  Buffer col(sz(rows * cols));
  ConstMapMat wm(weight.data().data(), cin, rows);
  for (Index b = 0; b < n; ++b) {
    ConstMapMat xm(x.data().data() + b * cin * cols, cin, cols);
    MapMat(col.data(), rows, cols).noalias() = wm.transpose() * xm;
    double* o = out.data() + b * cout * oh * ow;
    col2im(plan, col.data(), o);
    if (bias.defined()) {
      for (Index c = 0; c < cout; ++c) {
        const double bv = bias.data()[sz(c)];
        for (Index i = 0; i < oh * ow; ++i) o[c * oh * ow + i] += bv;
      }
    }
  }
  FlopCounter::charge(static_cast<std::uint64_t>(2 * n * cin * rows * cols));
  return make_result(
      "conv_transpose2d", {n, cout, oh, ow}, std::move(out), {x, weight, bias},
      [x, weight, bias, plan, n, cin](std::span<const double> gspan) mutable {
        const Index rows = plan.rows(), cols = plan.cols();
        const Index out_size = plan.channels * plan.height * plan.width;
        Buffer col(sz(rows * cols));
        ConstMapMat wm(weight.data().data(), cin, rows);
        double* gw = weight.requires_grad() ? weight.mutable_grad().data() : nullptr;
        double* gb = bias.defined() && bias.requires_grad() ? bias.mutable_grad().data() : nullptr;
        double* gx = x.requires_grad() ? x.mutable_grad().data() : nullptr;
        const Index plane = plan.height * plan.width;
        for (Index b = 0; b < n; ++b) {
          const double* go = gspan.data() + b * out_size;
          im2col(plan, go, col.data());
          ConstMapMat cm(col.data(), rows, cols);
          if (gx) MapMat(gx + b * cin * cols, cin, cols).noalias() += wm * cm;
          if (gw) {
            ConstMapMat xm(x.data().data() + b * cin * cols, cin, cols);
            MapMat(gw, cin, rows).noalias() += xm * cm.transpose();
          }
          if (gb) {
            for (Index c = 0; c < plan.channels; ++c) {
              double s = 0.0;
              for (Index i = 0; i < plane; ++i) s += go[c * plane + i];
              gb[c] += s;
            }
          }
        }
      });
}

}  // namespace aerialformer::ops
