#include "nap/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "nap/errors.hpp"

namespace nap::ops {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " differ");
  }
}

std::size_t last_dim(const char* op, const Tensor& x) {
  if (x.rank() == 0) throw DimensionError(std::string(op) + ": scalar operand has no feature axis");
  return x.shape().back();
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, std::size_t end) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < end; ++i) s.inner *= shape[i];
  return s;
}

constexpr Eigen::Index kSmallAttention = 4;

// Attention problems of axis_attention: one per (outer, inner, head)
// combination, each over n tokens of d_k features gathered from a strided
// [outer, n, inner, heads * d_k] layout.
struct AttentionGeometry {
  AxisSplit split;
  std::size_t heads = 1;
  std::size_t d_k = 1;
  std::size_t features = 1;

  [[nodiscard]] std::size_t problems() const { return split.outer * split.inner * heads; }

  [[nodiscard]] std::size_t offset(std::size_t prob, std::size_t i) const {
    const std::size_t h = prob % heads;
    const std::size_t rest = prob / heads;
    const std::size_t in = rest % split.inner;
    const std::size_t o = rest / split.inner;
    return ((o * split.n + i) * split.inner + in) * features + h * d_k;
  }

  void gather(const Tensor& src, std::size_t prob, RowMatrix& dst) const {
    for (std::size_t i = 0; i < split.n; ++i) {
      std::copy_n(src.data() + offset(prob, i), d_k, dst.data() + i * d_k);
    }
  }

  void scatter_add(const RowMatrix& src, std::size_t prob, Tensor& dst) const {
    for (std::size_t i = 0; i < split.n; ++i) {
      double* d = dst.data() + offset(prob, i);
      const double* s = src.data() + i * d_k;
      for (std::size_t f = 0; f < d_k; ++f) d[f] += s[f];
    }
  }
};

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }


}  // namespace

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape("add", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
    const Tensor& gy = t.grad_accumulator(self);
    for (Var in : {a, b}) {
      if (!in.requires_grad()) continue;
      Tensor& g = t.grad_accumulator(in);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

Var add_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  const std::size_t d = last_dim("add_bias", xv);
  if (bv.rank() != 1 || bv.size() != d) {
    throw DimensionError("add_bias: bias " + shape_to_string(bv.shape()) +
                         " does not match feature axis of " + shape_to_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % d];
  return x.tape().record(std::move(out), {x, b}, [x, b, d](Tape& t, Var self) {
    const Tensor& gy = t.grad_accumulator(self);
    if (x.requires_grad()) {
      Tensor& gx = t.grad_accumulator(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = t.grad_accumulator(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i % d] += gy[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape("mul", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
    const Tensor& gy = t.grad_accumulator(self);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (a.requires_grad()) {
      Tensor& ga = t.grad_accumulator(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = t.grad_accumulator(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  return x.tape().record(std::move(out), {x}, [x, factor](Tape& t, Var self) {
    const Tensor& gy = t.grad_accumulator(self);
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * gy[i];
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  return x.tape().record(Tensor::scalar(total), {x}, [x](Tape& t, Var self) {
    const double gy = t.grad_accumulator(self)[0];
    Tensor& gx = t.grad_accumulator(x);
    for (double& g : gx.values()) g += gy;
  });
}

Var linear(Var x, Var w, std::optional<Var> b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.rank() == 0 || xv.shape().back() != wv.dim(0)) {
    throw DimensionError("linear: input " + shape_to_string(xv.shape()) +
                         " incompatible with weight " + shape_to_string(wv.shape()));
  }
  const std::size_t d_in = wv.dim(0);
  const std::size_t d_out = wv.dim(1);
  const std::size_t rows = xv.size() / d_in;
  if (b && (b->value().rank() != 1 || b->value().size() != d_out)) {
    throw DimensionError("linear: bias " + shape_to_string(b->value().shape()) +
                         " incompatible with weight " + shape_to_string(wv.shape()));
  }

  Shape out_shape = xv.shape();
  out_shape.back() = d_out;
  Tensor out(out_shape);
  {
    ConstMatrixMap xm(xv.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d_in));
    ConstMatrixMap wm(wv.data(), static_cast<Eigen::Index>(d_in), static_cast<Eigen::Index>(d_out));
    MatrixMap ym(out.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d_out));
    ym.noalias() = xm * wm;
    if (b) {
      const Tensor& bv = b->value();
      Eigen::Map<const Eigen::RowVectorXd> bm(bv.data(), static_cast<Eigen::Index>(d_out));
      ym.rowwise() += bm;
    }
  }

  auto backward = [x, w, b, rows, d_in, d_out](Tape& t, Var self) {
    const Tensor& gy = t.grad_accumulator(self);
    const auto r = static_cast<Eigen::Index>(rows);
    const auto di = static_cast<Eigen::Index>(d_in);
    const auto dout = static_cast<Eigen::Index>(d_out);
    ConstMatrixMap gym(gy.data(), r, dout);
    if (x.requires_grad()) {
      Tensor& gx = t.grad_accumulator(x);
      MatrixMap gxm(gx.data(), r, di);
      gxm.noalias() += gym * ConstMatrixMap(w.value().data(), di, dout).transpose();
    }
    if (w.requires_grad()) {
      Tensor& gw = t.grad_accumulator(w);
      MatrixMap gwm(gw.data(), di, dout);
      gwm.noalias() += ConstMatrixMap(x.value().data(), r, di).transpose() * gym;
    }
    if (b && b->requires_grad()) {
      Tensor& gb = t.grad_accumulator(*b);
      Eigen::Map<Eigen::RowVectorXd> gbm(gb.data(), dout);
      gbm += gym.colwise().sum();
    }
  };
  if (b) return x.tape().record(std::move(out), {x, w, *b}, std::move(backward));
  return x.tape().record(std::move(out), {x, w}, std::move(backward));
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_to_string(xv.shape()));
  }
  if (xv.dim(axis) == 0) {
    throw DimensionError("softmax: empty axis in shape " + shape_to_string(xv.shape()));
  }
  const AxisSplit s = split_at(xv.shape(), axis, xv.rank());
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double peak = xv[base];
      for (std::size_t i = 1; i < s.n; ++i) peak = std::max(peak, xv[base + i * s.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) {
        const double e = std::exp(xv[base + i * s.inner] - peak);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] /= total;
    }
  }
  return x.tape().record(std::move(out), {x}, [x, s](Tape& t, Var self) {
    const Tensor& p = self.value();
    const Tensor& gy = t.grad_accumulator(self);
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < s.n; ++i) {
          dot += p[base + i * s.inner] * gy[base + i * s.inner];
        }
        for (std::size_t i = 0; i < s.n; ++i) {
          const std::size_t k = base + i * s.inner;
          gx[k] += p[k] * (gy[k] - dot);
        }
      }
    }
  });
}

Var layer_norm(Var x, Var gain, std::size_t group) {
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const std::size_t d = last_dim("layer_norm", xv);
  if (group == 0) group = d;
  if (d == 0 || d % group != 0) {
    throw DimensionError("layer_norm: group size " + std::to_string(group) +
                         " does not divide feature axis of " + shape_to_string(xv.shape()));
  }
  if (gv.rank() != 1 || gv.size() != d) {
    throw DimensionError("layer_norm: gain " + shape_to_string(gv.shape()) +
                         " does not match input " + shape_to_string(xv.shape()));
  }
  const std::size_t n_groups = xv.size() / group;
  AlignedVector normalized(xv.size());
  AlignedVector inv_std(n_groups);
  Tensor out(xv.shape());
  for (std::size_t gi = 0; gi < n_groups; ++gi) {
    const std::size_t base = gi * group;
    double mean = 0.0;
    for (std::size_t i = 0; i < group; ++i) mean += xv[base + i];
    mean /= static_cast<double>(group);
    double var = 0.0;
    for (std::size_t i = 0; i < group; ++i) {
      const double c = xv[base + i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(group);
    const double r = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    inv_std[gi] = r;
    for (std::size_t i = 0; i < group; ++i) {
      const double xh = (xv[base + i] - mean) * r;
      normalized[base + i] = xh;
      out[base + i] = xh * gv[(base + i) % d];
    }
  }
  return x.tape().record(
      std::move(out), {x, gain},
      [x, gain, d, group, normalized = std::move(normalized), inv_std = std::move(inv_std)](
          Tape& t, Var self) {
        const Tensor& gy = t.grad_accumulator(self);
        const Tensor& gv = gain.value();
        if (gain.requires_grad()) {
          Tensor& gg = t.grad_accumulator(gain);
          for (std::size_t i = 0; i < gy.size(); ++i) gg[i % d] += gy[i] * normalized[i];
        }
        if (!x.requires_grad()) return;
        Tensor& gx = t.grad_accumulator(x);
        const double inv_n = 1.0 / static_cast<double>(group);
        for (std::size_t gi = 0; gi < inv_std.size(); ++gi) {
          const std::size_t base = gi * group;
          double mean_g = 0.0;
          double mean_gx = 0.0;
          for (std::size_t i = 0; i < group; ++i) {
            const double g = gy[base + i] * gv[(base + i) % d];
            mean_g += g;
            mean_gx += g * normalized[base + i];
          }
          mean_g *= inv_n;
          mean_gx *= inv_n;
          for (std::size_t i = 0; i < group; ++i) {
            const double g = gy[base + i] * gv[(base + i) % d];
            gx[base + i] += inv_std[gi] * (g - mean_g - normalized[base + i] * mean_gx);
          }
        }
      });
}

Var gelu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  AlignedVector cdf(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    cdf[i] = normal_cdf(xv[i]);
    out[i] = xv[i] * cdf[i];
  }
  return x.tape().record(std::move(out), {x}, [x, cdf = std::move(cdf)](Tape& t, Var self) {
    const Tensor& gy = t.grad_accumulator(self);
    const auto n = static_cast<Eigen::Index>(cdf.size());
    Eigen::Map<const Eigen::ArrayXd> xa(x.value().data(), n);
    Eigen::Map<const Eigen::ArrayXd> phi(cdf.data(), n);
    Eigen::Map<const Eigen::ArrayXd> gya(gy.data(), n);
    Eigen::Map<Eigen::ArrayXd> gx(t.grad_accumulator(x).data(), n);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    gx += gya * (phi + xa * (-0.5 * xa.square()).exp() * inv_sqrt_2pi);
  });
}

Var tanh(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = std::tanh(v);
  return x.tape().record(std::move(out), {x}, [x](Tape& t, Var self) {
    const Tensor& gy = t.grad_accumulator(self);
    const Tensor& y = self.value();
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * (1.0 - y[i] * y[i]);
  });
}

Var dropout(Var x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw ValidationError("dropout probability must lie in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  // An element is dropped when the top 53 bits of a raw draw, read as a
  // uniform in [0, 1), fall below p.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(p, 53));
  AlignedVector mask(x.value().size());
  for (double& m : mask) m = (rng() >> 11) < threshold ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape().record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, Var self) {
    const Tensor& gy = t.grad_accumulator(self);
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * mask[i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [x](Tape& t, Var self) {
    const Tensor& gy = t.grad_accumulator(self);
    Tensor& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ValidationError("concat: no operands");
  const Shape& first = parts.front().value().shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_to_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.value().shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_to_string(s) + " incompatible with " +
                           shape_to_string(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  Tensor out(out_shape);
  const std::size_t out_block = out_shape[axis] * inner;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    offsets.push_back(offset);
    const Tensor& v = p.value();
    const std::size_t block = v.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * block, block, out.data() + o * out_block + offset);
    }
    offset += block;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts.front().tape().record(
      std::move(out), parts,
      [inputs, offsets = std::move(offsets), outer, inner, axis, out_block](Tape& t, Var self) {
        const Tensor& gy = t.grad_accumulator(self);
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          if (!inputs[k].requires_grad()) continue;
          Tensor& g = t.grad_accumulator(inputs[k]);
          const std::size_t block = g.dim(axis) * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = gy.data() + o * out_block + offsets[k];
            double* dst = g.data() + o * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
      });
}

Var select_row(Var m, std::size_t row) {
  const Tensor& mv = m.value();
  if (mv.rank() != 2 || row >= mv.dim(0)) {
    throw DimensionError("select_row: row " + std::to_string(row) + " invalid for shape " +
                         shape_to_string(mv.shape()));
  }
  const std::size_t d = mv.dim(1);
  Tensor out({d});
  std::copy_n(mv.data() + row * d, d, out.data());
  return m.tape().record(std::move(out), {m}, [m, row, d](Tape& t, Var self) {
    const Tensor& gy = t.grad_accumulator(self);
    Tensor& gm = t.grad_accumulator(m);
    for (std::size_t i = 0; i < d; ++i) gm[row * d + i] += gy[i];
  });
}

Var axis_attention(Var q, Var k, Var v, std::size_t axis, std::size_t heads) {
  const Tensor& qv = q.value();
  require_same_shape("axis_attention", qv, k.value());
  require_same_shape("axis_attention", qv, v.value());
  if (qv.rank() < 2 || axis + 1 >= qv.rank()) {
    throw DimensionError("axis_attention: axis " + std::to_string(axis) +
                         " must precede the feature axis of " + shape_to_string(qv.shape()));
  }
  const std::size_t features = qv.shape().back();
  if (heads == 0 || features % heads != 0) {
    throw DimensionError("axis_attention: " + std::to_string(heads) +
                         " heads do not divide feature axis of " + shape_to_string(qv.shape()));
  }
  const AttentionGeometry geo{split_at(qv.shape(), axis, qv.rank() - 1), heads, features / heads,
                              features};
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(geo.d_k));
  const auto n = static_cast<Eigen::Index>(geo.split.n);
  const auto dk = static_cast<Eigen::Index>(geo.d_k);

  AlignedVector probs(geo.problems() * geo.split.n * geo.split.n);
  Tensor out(qv.shape());
  RowMatrix qh(n, dk), kh(n, dk), vh(n, dk), oh(n, dk);
  for (std::size_t prob = 0; prob < geo.problems(); ++prob) {
    geo.gather(qv, prob, qh);
    geo.gather(k.value(), prob, kh);
    geo.gather(v.value(), prob, vh);
    MatrixMap p(probs.data() + prob * geo.split.n * geo.split.n, n, n);
    if (n <= kSmallAttention) {
      // Tiny axes: plain loops beat the fixed overhead of dynamic products.
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) p(i, j) = qh.row(i).dot(kh.row(j)) * scale_factor;
      }
    } else {
      p.noalias() = qh * kh.transpose();
      p *= scale_factor;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      auto row = p.row(i).array();
      row = (row - row.maxCoeff()).exp();
      row /= row.sum();
    }
    oh.noalias() = p * vh;
    geo.scatter_add(oh, prob, out);
  }

  return q.tape().record(
      std::move(out), {q, k, v},
      [q, k, v, geo, scale_factor, probs = std::move(probs)](Tape& t, Var self) {
        const Tensor& gy = t.grad_accumulator(self);
        const auto n = static_cast<Eigen::Index>(geo.split.n);
        const auto dk = static_cast<Eigen::Index>(geo.d_k);
        RowMatrix qh(n, dk), kh(n, dk), vh(n, dk), gh(n, dk), tmp(n, dk);
        RowMatrix dp(n, n);
        for (std::size_t prob = 0; prob < geo.problems(); ++prob) {
          ConstMatrixMap p(probs.data() + prob * geo.split.n * geo.split.n, n, n);
          geo.gather(gy, prob, gh);
          if (v.requires_grad()) {
            tmp.noalias() = p.transpose() * gh;
            geo.scatter_add(tmp, prob, t.grad_accumulator(v));
          }
          if (!q.requires_grad() && !k.requires_grad()) continue;
          geo.gather(v.value(), prob, vh);
          dp.noalias() = gh * vh.transpose();
          // d score = P o (dP - rowsum(P o dP)), scaled like the forward scores.
          const Eigen::VectorXd weighted = (p.array() * dp.array()).rowwise().sum();
          dp = (p.array() * (dp.array().colwise() - weighted.array())) * scale_factor;
          if (q.requires_grad()) {
            geo.gather(k.value(), prob, kh);
            tmp.noalias() = dp * kh;
            geo.scatter_add(tmp, prob, t.grad_accumulator(q));
          }
          if (k.requires_grad()) {
            geo.gather(q.value(), prob, qh);
            tmp.noalias() = dp.transpose() * qh;
            geo.scatter_add(tmp, prob, t.grad_accumulator(k));
          }
        }
      });
}

Var weighted_sum(Var weights, Var x) {
  const Tensor& wv = weights.value();
  const Tensor& xv = x.value();
  bool ok = xv.rank() >= 2 && wv.rank() + 1 == xv.rank();
  for (std::size_t i = 0; ok && i < wv.rank(); ++i) ok = wv.shape()[i] == xv.shape()[i];
  if (!ok) {
    throw DimensionError("weighted_sum: weights " + shape_to_string(wv.shape()) +
                         " incompatible with values " + shape_to_string(xv.shape()));
  }
  const std::size_t d = xv.shape().back();
  const std::size_t n = wv.shape().back();
  const std::size_t lead = wv.size() / std::max<std::size_t>(n, 1);
  Shape out_shape(wv.shape().begin(), wv.shape().end() - 1);
  out_shape.push_back(d);
  Tensor out(out_shape);
  for (std::size_t r = 0; r < lead; ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      const double a = wv[r * n + j];
      const double* src = xv.data() + (r * n + j) * d;
      double* dst = out.data() + r * d;
      for (std::size_t f = 0; f < d; ++f) dst[f] += a * src[f];
    }
  }
  return weights.tape().record(
      std::move(out), {weights, x}, [weights, x, lead, n, d](Tape& t, Var self) {
        const Tensor& gy = t.grad_accumulator(self);
        const Tensor& wv = weights.value();
        const Tensor& xv = x.value();
        if (weights.requires_grad()) {
          Tensor& gw = t.grad_accumulator(weights);
          for (std::size_t r = 0; r < lead; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
              const double* src = xv.data() + (r * n + j) * d;
              double dot = 0.0;
              for (std::size_t f = 0; f < d; ++f) dot += gy[r * d + f] * src[f];
              gw[r * n + j] += dot;
            }
          }
        }
        if (x.requires_grad()) {
          Tensor& gx = t.grad_accumulator(x);
          for (std::size_t r = 0; r < lead; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
              const double a = wv[r * n + j];
              double* dst = gx.data() + (r * n + j) * d;
              for (std::size_t f = 0; f < d; ++f) dst[f] += a * gy[r * d + f];
            }
          }
        }
      });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  const std::size_t classes = last_dim("cross_entropy", lv);
  const std::size_t rows = classes == 0 ? 0 : lv.size() / classes;
  if (rows == 0) throw ValidationError("cross_entropy: need at least one row");
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_to_string(lv.shape()));
  }
  AlignedVector probs(lv.size());
  std::vector<int> owned(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int label = owned[r];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ValidationError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(classes) + ")");
    }
    const double* z = lv.data() + r * classes;
    const double peak = *std::max_element(z, z + classes);
    double norm = 0.0;
    for (std::size_t c = 0; c < classes; ++c) norm += std::exp(z[c] - peak);
    const double log_norm = std::log(norm) + peak;
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(z[c] - log_norm);
    total += log_norm - z[label];
  }
  const double loss = total / static_cast<double>(rows);
  return logits.tape().record(
      Tensor::scalar(loss), {logits},
      [logits, rows, classes, probs = std::move(probs), owned = std::move(owned)](Tape& t,
                                                                                Var self) {
        const double scale_factor = t.grad_accumulator(self)[0] / static_cast<double>(rows);
        Tensor& g = t.grad_accumulator(logits);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < classes; ++c) {
            const double target = static_cast<std::size_t>(owned[r]) == c ? 1.0 : 0.0;
            g[r * classes + c] += scale_factor * (probs[r * classes + c] - target);
          }
        }
      });
}

}  // namespace nap::ops
