#include "moelab/ndgrad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "moelab/errors.hpp"

namespace moelab::ndgrad {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatR>;
using MMap = Eigen::Map<MatR>;
using Strided = Eigen::OuterStride<>;
using CStridedMap = Eigen::Map<const MatR, 0, Strided>;
using MStridedMap = Eigen::Map<MatR, 0, Strided>;

using detail::make_result;

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + " needs a rank-2 tensor, got " + to_string(x.shape()));
  }
}

void require_axis(int axis, const char* op) {
  if (axis != 0 && axis != 1) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank-2 tensor");
  }
}

// Accumulator for a parent's gradient, or null when it does not need one.
double* grad_of(Node& parent) {
  return parent.requires_grad ? parent.ensure_grad().data() : nullptr;
}

template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  const bool bcast_a = a.numel() == 1 && b.numel() != 1;
  const bool bcast_b = b.numel() == 1 && a.numel() != 1;
  if (!bcast_a && !bcast_b && a.shape() != b.shape()) {
    throw DimensionError(std::string(name) + ": shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + " differ");
  }
  Shape shape = bcast_a ? b.shape() : a.shape();
  const auto n = numel(shape);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[bcast_a ? 0 : i], bv[bcast_b ? 0 : i]);
  return make_result(
      std::move(shape), std::move(out), {a.node(), b.node()},
      [bcast_a, bcast_b, da, db](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        double* ga = grad_of(pa);
        double* gb = grad_of(pb);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const std::size_t ia = bcast_a ? 0 : i;
          const std::size_t ib = bcast_b ? 0 : i;
          const double g = self.grad[i];
          if (ga) ga[ia] += g * da(pa.value[ia], pb.value[ib]);
          if (gb) gb[ib] += g * db(pa.value[ia], pb.value[ib]);
        }
      },
      name);
}

// f maps x -> y; df maps (x, y) -> dy/dx.
template <class F, class DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(
      x.shape(), std::move(out), {x.node()},
      [df](Node& self) {
        Node& px = *self.parents[0];
        double* gx = grad_of(px);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          gx[i] += self.grad[i] * df(px.value[i], self.value[i]);
        }
      },
      name);
}

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// Iterates the 1-D lines of a rank-2 tensor along `axis`.
struct Lines {
  std::size_t count, length, stride;
  std::size_t offset(std::size_t line) const { return stride == 1 ? line * length : line; }
};

Lines lines_of(const Tensor& x, int axis) {
  const auto r = x.rows();
  const auto c = x.cols();
  if (axis == 1) return {r, c, 1};
  return {c, r, c};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor neg(const Tensor& x) {
  return unary(
      x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      x, "add_scalar", [offset](double v) { return v + offset; },
      [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor log_clamped(const Tensor& x, double eps) {
  return unary(
      x, "log_clamped", [eps](double v) { return std::log(std::max(v, eps)); },
      [eps](double v, double) { return v > eps ? 1.0 / v : 0.0; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result(
      {1, 1}, {s}, {x.node()},
      [](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        const double g = self.grad[0];
        for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) gx[i] += g;
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, int axis) {
  require_rank2(x, "sum_axis");
  require_axis(axis, "sum_axis");
  const auto lines = lines_of(x, axis);
  const auto step = lines.stride == 1 ? std::size_t{1} : x.cols();
  auto xv = x.values();
  std::vector<double> out(lines.count, 0.0);
  for (std::size_t l = 0; l < lines.count; ++l) {
    const auto base = lines.offset(l);
    for (std::size_t i = 0; i < lines.length; ++i) out[l] += xv[base + i * step];
  }
  Shape shape = axis == 0 ? Shape{1, x.cols()} : Shape{x.rows(), 1};
  return make_result(
      std::move(shape), std::move(out), {x.node()},
      [lines, step](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        for (std::size_t l = 0; l < lines.count; ++l) {
          const auto base = lines.offset(l);
          for (std::size_t i = 0; i < lines.length; ++i) gx[base + i * step] += self.grad[l];
        }
      },
      "sum_axis");
}

Tensor mean_axis(const Tensor& x, int axis) {
  require_rank2(x, "mean_axis");
  require_axis(axis, "mean_axis");
  const auto n = axis == 0 ? x.rows() : x.cols();
  if (n == 0) throw DimensionError("mean_axis over an empty axis");
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(n));
}

Tensor maxpool(const Tensor& x, int axis) {
  require_rank2(x, "maxpool");
  require_axis(axis, "maxpool");
  const auto lines = lines_of(x, axis);
  if (lines.length == 0) throw DimensionError("maxpool over an empty axis");
  const auto step = lines.stride == 1 ? std::size_t{1} : x.cols();
  auto xv = x.values();
  std::vector<double> out(lines.count);
  std::vector<std::size_t> arg(lines.count);
  for (std::size_t l = 0; l < lines.count; ++l) {
    const auto base = lines.offset(l);
    std::size_t best = base;
    for (std::size_t i = 1; i < lines.length; ++i) {
      const auto at = base + i * step;
      if (xv[at] > xv[best]) best = at;  // strict: ties keep the lowest index
    }
    arg[l] = best;
    out[l] = xv[best];
  }
  Shape shape = axis == 0 ? Shape{1, x.cols()} : Shape{x.rows(), 1};
  return make_result(
      std::move(shape), std::move(out), {x.node()},
      [arg = std::move(arg)](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        for (std::size_t l = 0; l < arg.size(); ++l) gx[arg[l]] += self.grad[l];
      },
      "maxpool");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ for " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  MMap(out.data(), m, n).noalias() = CMap(a.values().data(), m, k) * CMap(b.values().data(), k, n);
  return make_result(
      {m, n}, std::move(out), {a.node(), b.node()},
      [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        CMap dc(self.grad.data(), m, n);
        if (double* ga = grad_of(pa)) {
          MMap(ga, m, k).noalias() += dc * CMap(pb.value.data(), k, n).transpose();
        }
        if (double* gb = grad_of(pb)) {
          MMap(gb, k, n).noalias() += CMap(pa.value.data(), m, k).transpose() * dc;
        }
      },
      "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ for " + to_string(a.shape()) +
                         " and transposed " + to_string(b.shape()));
  }
  const auto m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n);
  MMap(out.data(), m, n).noalias() =
      CMap(a.values().data(), m, k) * CMap(b.values().data(), n, k).transpose();
  return make_result(
      {m, n}, std::move(out), {a.node(), b.node()},
      [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        CMap dc(self.grad.data(), m, n);
        if (double* ga = grad_of(pa)) {
          MMap(ga, m, k).noalias() += dc * CMap(pb.value.data(), n, k);
        }
        if (double* gb = grad_of(pb)) {
          MMap(gb, n, k).noalias() += dc.transpose() * CMap(pa.value.data(), m, k);
        }
      },
      "matmul_nt");
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const auto r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  MMap(out.data(), c, r) = CMap(x.values().data(), r, c).transpose();
  return make_result(
      {c, r}, std::move(out), {x.node()},
      [r, c](Node& self) {
        if (double* gx = grad_of(*self.parents[0])) {
          MMap(gx, r, c) += CMap(self.grad.data(), c, r).transpose();
        }
      },
      "transpose");
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_row_bias");
  if (bias.numel() != x.cols() || bias.rows() != 1) {
    throw DimensionError("add_row_bias: bias " + to_string(bias.shape()) +
                         " does not match rows of " + to_string(x.shape()));
  }
  const auto r = x.rows(), c = x.cols();
  auto xv = x.values();
  auto bv = bias.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] + bv[j];
  }
  return make_result(
      x.shape(), std::move(out), {x.node(), bias.node()},
      [r, c](Node& self) {
        if (double* gx = grad_of(*self.parents[0])) {
          for (std::size_t i = 0; i < r * c; ++i) gx[i] += self.grad[i];
        }
        if (double* gb = grad_of(*self.parents[1])) {
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) gb[j] += self.grad[i * c + j];
          }
        }
      },
      "add_row_bias");
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
  require_rank2(x, "scale_rows");
  if (w.numel() != x.rows()) {
    throw DimensionError("scale_rows: weights " + to_string(w.shape()) + " do not match rows of " +
                         to_string(x.shape()));
  }
  const auto r = x.rows(), c = x.cols();
  auto xv = x.values();
  auto wv = w.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * wv[i];
  }
  return make_result(
      x.shape(), std::move(out), {x.node(), w.node()},
      [r, c](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        double* gx = grad_of(px);
        double* gw = grad_of(pw);
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double g = self.grad[i * c + j];
            if (gx) gx[i * c + j] += g * pw.value[i];
            acc += g * px.value[i * c + j];
          }
          if (gw) gw[i] += acc;
        }
      },
      "scale_rows");
}

Tensor row_normalize(const Tensor& x) {
  require_rank2(x, "row_normalize");
  const auto r = x.rows(), c = x.cols();
  auto xv = x.values();
  std::vector<double> out(r * c);
  std::vector<double> sums(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) sums[i] += xv[i * c + j];
    if (sums[i] == 0.0 || !std::isfinite(sums[i])) {
      throw NumericError("row_normalize: row " + std::to_string(i) + " sums to " +
                         std::to_string(sums[i]));
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] / sums[i];
  }
  return make_result(
      x.shape(), std::move(out), {x.node()},
      [r, c, sums = std::move(sums)](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += (self.grad[i * c + j] - dot) / sums[i];
        }
      },
      "row_normalize");
}

Tensor softmax(const Tensor& x, int axis) {
  require_rank2(x, "softmax");
  require_axis(axis, "softmax");
  check_finite(x.values(), "softmax");
  const auto lines = lines_of(x, axis);
  const auto step = lines.stride == 1 ? std::size_t{1} : x.cols();
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t l = 0; l < lines.count; ++l) {
    const auto base = lines.offset(l);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < lines.length; ++i) mx = std::max(mx, xv[base + i * step]);
    double total = 0.0;
    for (std::size_t i = 0; i < lines.length; ++i) {
      const auto at = base + i * step;
      out[at] = std::exp(xv[at] - mx);
      total += out[at];
    }
    for (std::size_t i = 0; i < lines.length; ++i) out[base + i * step] /= total;
  }
  return make_result(
      x.shape(), std::move(out), {x.node()},
      [lines, step](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        for (std::size_t l = 0; l < lines.count; ++l) {
          const auto base = lines.offset(l);
          double dot = 0.0;
          for (std::size_t i = 0; i < lines.length; ++i) {
            const auto at = base + i * step;
            dot += self.grad[at] * self.value[at];
          }
          for (std::size_t i = 0; i < lines.length; ++i) {
            const auto at = base + i * step;
            gx[at] += self.value[at] * (self.grad[at] - dot);
          }
        }
      },
      "softmax");
}

Tensor log_softmax(const Tensor& x) {
  require_rank2(x, "log_softmax");
  check_finite(x.values(), "log_softmax");
  const auto r = x.rows(), c = x.cols();
  auto xv = x.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return make_result(
      x.shape(), std::move(out), {x.node()},
      [r, c](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        for (std::size_t i = 0; i < r; ++i) {
          double total = 0.0;
          for (std::size_t j = 0; j < c; ++j) total += self.grad[i * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            gx[i * c + j] += self.grad[i * c + j] - std::exp(self.value[i * c + j]) * total;
          }
        }
      },
      "log_softmax");
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> mask) {
  require_rank2(x, "masked_softmax");
  if (mask.size() != x.numel()) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(mask.size()) +
                         " entries for " + to_string(x.shape()));
  }
  const auto r = x.rows(), c = x.cols();
  auto xv = x.values();
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < c; ++j) {
      if (!mask[i * c + j]) continue;
      const double v = xv[i * c + j];
      if (!std::isfinite(v)) throw NumericError("masked_softmax: non-finite input");
      mx = std::max(mx, v);
      any = true;
    }
    if (!any) throw RoutingError("masked_softmax: row " + std::to_string(i) + " is fully masked");
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!mask[i * c + j]) continue;
      out[i * c + j] = std::exp(xv[i * c + j] - mx);
      total += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= total;
  }
  // Masked entries have value 0, so the plain softmax backward already sends
  // them zero gradient.
  return make_result(
      x.shape(), std::move(out), {x.node()},
      [r, c](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            gx[i * c + j] += self.value[i * c + j] * (self.grad[i * c + j] - dot);
          }
        }
      },
      "masked_softmax");
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  require_axis(axis, "concat");
  for (const auto& p : parts) require_rank2(p, "concat");
  std::vector<NodePtr> parents;
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  const auto fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  for (const auto& p : parts) {
    const auto other = axis == 0 ? p.cols() : p.rows();
    if (other != fixed) {
      throw DimensionError("concat: " + to_string(p.shape()) + " does not match " +
                           to_string(parts[0].shape()) + " along the fixed axis");
    }
    const auto e = axis == 0 ? p.rows() : p.cols();
    extents.push_back(e);
    total += e;
    parents.push_back(p.node());
  }
  Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  std::vector<double> out(numel(shape));
  if (axis == 0) {
    std::size_t at = 0;
    for (const auto& p : parts) {
      std::copy(p.values().begin(), p.values().end(), out.begin() + static_cast<std::ptrdiff_t>(at));
      at += p.numel();
    }
  } else {
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      auto pv = parts[k].values();
      for (std::size_t i = 0; i < fixed; ++i) {
        for (std::size_t j = 0; j < extents[k]; ++j) out[i * total + col + j] = pv[i * extents[k] + j];
      }
      col += extents[k];
    }
  }
  return make_result(
      std::move(shape), std::move(out), std::move(parents),
      [axis, fixed, total, extents = std::move(extents)](Node& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < extents.size(); ++k) {
          double* g = grad_of(*self.parents[k]);
          if (g) {
            if (axis == 0) {
              const auto n = extents[k] * fixed;
              for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset * fixed + i];
            } else {
              for (std::size_t i = 0; i < fixed; ++i) {
                for (std::size_t j = 0; j < extents[k]; ++j) {
                  g[i * extents[k] + j] += self.grad[i * total + offset + j];
                }
              }
            }
          }
          offset += extents[k];
        }
      },
      "concat");
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows");
  if (begin > end || end > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + to_string(x.shape()));
  }
  const auto c = x.cols();
  auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          xv.begin() + static_cast<std::ptrdiff_t>(end * c));
  return make_result(
      {end - begin, c}, std::move(out), {x.node()},
      [begin, c](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[begin * c + i] += self.grad[i];
      },
      "slice_rows");
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_rank2(x, "gather_rows");
  const auto r = x.rows(), c = x.cols();
  auto xv = x.values();
  std::vector<double> out(index.size() * c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) {
      throw DimensionError("gather_rows: row " + std::to_string(index[i]) + " outside " +
                           to_string(x.shape()));
    }
    std::copy_n(xv.data() + index[i] * c, c, out.data() + i * c);
  }
  return make_result(
      {index.size(), c}, std::move(out), {x.node()},
      [c, idx = std::vector<std::size_t>(index.begin(), index.end())](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t j = 0; j < c; ++j) gx[idx[i] * c + j] += self.grad[i * c + j];
        }
      },
      "gather_rows");
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(table.rows()) + " rows");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, rows);
}

Tensor gather_elements(const Tensor& x, std::span<const std::size_t> rows,
                       std::span<const std::size_t> cols) {
  require_rank2(x, "gather_elements");
  if (rows.size() != cols.size()) throw DimensionError("gather_elements: index lists differ in length");
  const auto c = x.cols();
  std::vector<std::size_t> flat(rows.size());
  auto xv = x.values();
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows() || cols[i] >= c) {
      throw DimensionError("gather_elements: (" + std::to_string(rows[i]) + ", " +
                           std::to_string(cols[i]) + ") outside " + to_string(x.shape()));
    }
    flat[i] = rows[i] * c + cols[i];
    out[i] = xv[flat[i]];
  }
  return make_result(
      {rows.size(), 1}, std::move(out), {x.node()},
      [flat = std::move(flat)](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        for (std::size_t i = 0; i < flat.size(); ++i) gx[flat[i]] += self.grad[i];
      },
      "gather_elements");
}

Tensor scatter_rows_sum(std::span<const Tensor> parts, std::span<const std::vector<std::size_t>> index,
                        std::size_t out_rows) {
  if (parts.size() != index.size()) throw DimensionError("scatter_rows_sum: parts/index count differ");
  if (parts.empty()) throw DimensionError("scatter_rows_sum of zero tensors");
  const auto c = parts[0].cols();
  std::vector<double> out(out_rows * c, 0.0);
  std::vector<NodePtr> parents;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    require_rank2(parts[p], "scatter_rows_sum");
    if (parts[p].cols() != c || parts[p].rows() != index[p].size()) {
      throw DimensionError("scatter_rows_sum: part " + to_string(parts[p].shape()) +
                           " does not match its index list");
    }
    auto pv = parts[p].values();
    for (std::size_t i = 0; i < index[p].size(); ++i) {
      if (index[p][i] >= out_rows) throw DimensionError("scatter_rows_sum: row index out of range");
      for (std::size_t j = 0; j < c; ++j) out[index[p][i] * c + j] += pv[i * c + j];
    }
    parents.push_back(parts[p].node());
  }
  return make_result(
      {out_rows, c}, std::move(out), std::move(parents),
      [c, idx = std::vector<std::vector<std::size_t>>(index.begin(), index.end())](Node& self) {
        for (std::size_t p = 0; p < idx.size(); ++p) {
          double* g = grad_of(*self.parents[p]);
          if (!g) continue;
          for (std::size_t i = 0; i < idx[p].size(); ++i) {
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[idx[p][i] * c + j];
          }
        }
      },
      "scatter_rows_sum");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank2(x, "layer_norm");
  const auto r = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm: gain/bias do not match " + to_string(x.shape()));
  }
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> out(r * c);
  std::vector<double> xhat(r * c);
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& pg = *self.parents[1];
        double* gx = grad_of(*self.parents[0]);
        double* gg = grad_of(pg);
        double* gb = grad_of(*self.parents[2]);
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double dy = self.grad[i * c + j];
            if (gg) gg[j] += dy * xhat[i * c + j];
            if (gb) gb[j] += dy;
            const double dxh = dy * pg.value[j];
            m1 += dxh;
            m2 += dxh * xhat[i * c + j];
          }
          if (!gx) continue;
          m1 *= inv_c;
          m2 *= inv_c;
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = self.grad[i * c + j] * pg.value[j];
            gx[i * c + j] += inv_std[i] * (dxh - m1 - xhat[i * c + j] * m2);
          }
        }
      },
      "layer_norm");
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const Segment> q_segments, std::span<const Segment> kv_segments,
                 bool causal) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const auto d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                         ", v " + to_string(v.shape()) + " are incompatible");
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible into " +
                         std::to_string(heads) + " heads");
  }
  if (q_segments.size() != kv_segments.size()) {
    throw DimensionError("attention: query and key segment counts differ");
  }
  for (std::size_t s = 0; s < q_segments.size(); ++s) {
    const auto& qs = q_segments[s];
    const auto& ks = kv_segments[s];
    if (qs.begin + qs.length > q.rows() || ks.begin + ks.length > k.rows()) {
      throw DimensionError("attention: segment outside the packed rows");
    }
    if (ks.length == 0 && qs.length != 0) throw DimensionError("attention: empty key segment");
    if (causal && qs.length != ks.length) {
      throw DimensionError("attention: causal segments need equal query/key lengths");
    }
  }
  const auto dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(q.rows() * d, 0.0);
  auto probs = std::make_shared<std::vector<MatR>>();
  probs->reserve(q_segments.size() * heads);
  for (std::size_t s = 0; s < q_segments.size(); ++s) {
    const auto& qs = q_segments[s];
    const auto& ks = kv_segments[s];
    for (std::size_t h = 0; h < heads; ++h) {
      CStridedMap qh(q.values().data() + qs.begin * d + h * dh, qs.length, dh, Strided(d));
      CStridedMap kh(k.values().data() + ks.begin * d + h * dh, ks.length, dh, Strided(d));
      CStridedMap vh(v.values().data() + ks.begin * d + h * dh, ks.length, dh, Strided(d));
      MatR a = (qh * kh.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const Eigen::Index visible = causal ? i + 1 : a.cols();
        const double mx = a.row(i).head(visible).maxCoeff();
        double total = 0.0;
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
          a(i, j) = j < visible ? std::exp(a(i, j) - mx) : 0.0;
          total += a(i, j);
        }
        a.row(i) /= total;
      }
      MStridedMap oh(out.data() + qs.begin * d + h * dh, qs.length, dh, Strided(d));
      oh.noalias() = a * vh;
      probs->push_back(std::move(a));
    }
  }
  return make_result(
      q.shape(), std::move(out), {q.node(), k.node(), v.node()},
      [d, dh, heads, inv_sqrt, probs, qseg = std::vector<Segment>(q_segments.begin(), q_segments.end()),
       kseg = std::vector<Segment>(kv_segments.begin(), kv_segments.end())](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        double* gq = grad_of(pq);
        double* gk = grad_of(pk);
        double* gv = grad_of(pv);
        std::size_t at = 0;
        for (std::size_t s = 0; s < qseg.size(); ++s) {
          const auto& qs = qseg[s];
          const auto& ks = kseg[s];
          for (std::size_t h = 0; h < heads; ++h, ++at) {
            const MatR& a = (*probs)[at];
            const auto qo = qs.begin * d + h * dh;
            const auto ko = ks.begin * d + h * dh;
            CStridedMap dout(self.grad.data() + qo, qs.length, dh, Strided(d));
            CStridedMap qh(pq.value.data() + qo, qs.length, dh, Strided(d));
            CStridedMap kh(pk.value.data() + ko, ks.length, dh, Strided(d));
            CStridedMap vh(pv.value.data() + ko, ks.length, dh, Strided(d));
            if (gv) MStridedMap(gv + ko, ks.length, dh, Strided(d)).noalias() += a.transpose() * dout;
            if (!gq && !gk) continue;
            MatR da = dout * vh.transpose();
            MatR ds = a.cwiseProduct(da);
            const Eigen::VectorXd dot = ds.rowwise().sum();
            ds -= a.cwiseProduct(dot.replicate(1, a.cols()));
            ds *= inv_sqrt;
            if (gq) MStridedMap(gq + qo, qs.length, dh, Strided(d)).noalias() += ds * kh;
            if (gk) MStridedMap(gk + ko, ks.length, dh, Strided(d)).noalias() += ds.transpose() * qh;
          }
        }
      },
      "attention");
}

Tensor prefix_mean(const Tensor& x, std::span<const Segment> segments) {
  require_rank2(x, "prefix_mean");
  const auto r = x.rows(), c = x.cols();
  for (const auto& s : segments) {
    if (s.begin + s.length > r) throw DimensionError("prefix_mean: segment outside the packed rows");
  }
  auto xv = x.values();
  std::vector<double> out(r * c, 0.0);
  std::vector<double> running(c);
  for (const auto& s : segments) {
    std::fill(running.begin(), running.end(), 0.0);
    for (std::size_t t = 1; t < s.length; ++t) {
      const double* prev = xv.data() + (s.begin + t - 1) * c;
      double* row = out.data() + (s.begin + t) * c;
      const double inv = 1.0 / static_cast<double>(t);
      for (std::size_t j = 0; j < c; ++j) {
        running[j] += prev[j];
        row[j] = running[j] * inv;
      }
    }
  }
  return make_result(
      x.shape(), std::move(out), {x.node()},
      [c, segs = std::vector<Segment>(segments.begin(), segments.end())](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        std::vector<double> acc(c);
        for (const auto& s : segs) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t t = s.length; t-- > 1;) {
            const double inv = 1.0 / static_cast<double>(t);
            const double* g = self.grad.data() + (s.begin + t) * c;
            double* dst = gx + (s.begin + t - 1) * c;
            for (std::size_t j = 0; j < c; ++j) {
              acc[j] += g[j] * inv;
              dst[j] += acc[j];
            }
          }
        }
      },
      "prefix_mean");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets) {
  require_rank2(logits, "cross_entropy");
  const auto r = logits.rows(), c = logits.cols();
  if (targets.size() != r) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         to_string(logits.shape()));
  }
  check_finite(logits.values(), "cross_entropy");
  auto lv = logits.values();
  std::size_t count = 0;
  double total = 0.0;
  std::vector<double> probs(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= c) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) +
                           " outside vocabulary of " + std::to_string(c));
    }
    const double* row = lv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(row[j] - mx);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    total += mx + std::log(z) - row[targets[i]];
    ++count;
  }
  if (count == 0) throw ValidationError("cross_entropy: every position is padding");
  const double inv = 1.0 / static_cast<double>(count);
  return make_result(
      {1, 1}, {total * inv}, {logits.node()},
      [c, inv, probs = std::move(probs),
       tg = std::vector<std::int64_t>(targets.begin(), targets.end())](Node& self) {
        double* gx = grad_of(*self.parents[0]);
        if (!gx) return;
        const double g = self.grad[0] * inv;
        for (std::size_t i = 0; i < tg.size(); ++i) {
          if (tg[i] < 0) continue;
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g * probs[i * c + j];
          gx[i * c + static_cast<std::size_t>(tg[i])] -= g;
        }
      },
      "cross_entropy");
}

}  // namespace moelab::ndgrad
