#include "hvqa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace hvqa {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace instrument {
namespace {
thread_local std::uint64_t g_macs = 0;
}
std::uint64_t mac_count() { return g_macs; }
void reset_mac_count() { g_macs = 0; }
void add_macs(std::uint64_t n) { g_macs += n; }
}  // namespace instrument

namespace {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// True when `operand` (padded with leading ones to rank(result)) equals
// `result` except on a leading run of unit extents.
bool leading_broadcastable(const Shape& operand, const Shape& result) {
  const std::size_t pad = result.size() - operand.size();
  auto extent = [&](std::size_t i) { return i < pad ? std::size_t{1} : operand[i - pad]; };
  std::size_t p = result.size();
  while (p > 0 && extent(p - 1) == result[p - 1]) --p;
  for (std::size_t i = 0; i < p; ++i)
    if (extent(i) != 1) return false;
  return true;
}

void require_rank2(const char* op, const Shape& s) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " + shape_str(s));
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  const std::size_t rank = std::max(a.size(), b.size());
  Shape result(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::size_t eb = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("broadcast: shapes " + shape_str(a) + " and " + shape_str(b) + " are incompatible");
    result[i] = std::max(ea, eb);
  }
  if (!leading_broadcastable(a, result) || !leading_broadcastable(b, result))
    throw ShapeError("broadcast: shapes " + shape_str(a) + " and " + shape_str(b) +
                     " differ beyond a leading run of unit extents");
  return result;
}

namespace {

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  Shape out_shape;
  try {
    out_shape = broadcast_shape(a.shape(), b.shape());
  } catch (const ShapeError& e) {
    throw ShapeError(std::string(name) + ": " + e.what());
  }
  Array<T> out(out_shape);
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t n = out.size(), na = av.size(), nb = bv.size();
  // Broadcasting only repeats the smaller operand as a contiguous block.
  const std::size_t block = std::min(na, nb);
  for (std::size_t base = 0; base < n; base += block) {
    const T* pa = av.ptr() + (na == n ? base : 0);
    const T* pb = bv.ptr() + (nb == n ? base : 0);
    T* po = out.ptr() + base;
    for (std::size_t j = 0; j < block; ++j) po[j] = fwd(pa[j], pb[j]);
  }
  return make_result<T>(name, std::move(out), {a, b}, [da, db](Node<T>& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    const auto& g = self.grad;
    const std::size_t n = g.size(), nx = x.size(), ny = y.size();
    const std::size_t block = std::min(nx, ny);
    auto* gx = grad_of(self, 0);
    auto* gy = grad_of(self, 1);
    for (std::size_t base = 0; base < n; base += block) {
      const std::size_t ox = nx == n ? base : 0, oy = ny == n ? base : 0;
      const T* px = x.ptr() + ox;
      const T* py = y.ptr() + oy;
      const T* pg = g.ptr() + base;
      if (gx) {
        T* q = gx->ptr() + ox;
        for (std::size_t j = 0; j < block; ++j) q[j] += pg[j] * da(px[j], py[j]);
      }
      if (gy) {
        T* q = gy->ptr() + oy;
        for (std::size_t j = 0; j < block; ++j) q[j] += pg[j] * db(px[j], py[j]);
      }
    }
  });
}

// Unary op whose derivative is expressed through the output value.
template <typename T, typename Fwd, typename DOut>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, Fwd fwd, DOut dout) {
  Array<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_result<T>(name, std::move(out), {x}, [dout](Node<T>& self) {
    if (auto* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i] * dout(self.value[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T y) { return y > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary_op<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Array<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * factor;
  return make_result<T>("scale", std::move(out), {x}, [factor](Node<T>& self) {
    if (auto* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>* b) {
  const bool binary = kind == ElementwiseKind::kAdd || kind == ElementwiseKind::kSub || kind == ElementwiseKind::kMul;
  if (binary && b == nullptr) throw ArgumentError("elementwise: binary kind requires a second operand");
  switch (kind) {
    case ElementwiseKind::kAdd: return add(a, *b);
    case ElementwiseKind::kSub: return sub(a, *b);
    case ElementwiseKind::kMul: return mul(a, *b);
    case ElementwiseKind::kRelu: return relu(a);
    case ElementwiseKind::kSigmoid: return sigmoid(a);
  }
  throw ArgumentError("elementwise: unknown kind");
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2("matmul", a.shape());
  require_rank2("matmul", b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Array<T> out({m, n});
  MatMap<T>(out.ptr(), m, n).noalias() = ConstMatMap<T>(a.value().ptr(), m, k) * ConstMatMap<T>(b.value().ptr(), k, n);
  instrument::add_macs(static_cast<std::uint64_t>(m) * k * n);
  return make_result<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    ConstMatMap<T> g(self.grad.ptr(), m, n);
    if (auto* ga = grad_of(self, 0))
      MatMap<T>(ga->ptr(), m, k).noalias() += g * ConstMatMap<T>(self.inputs[1]->value.ptr(), k, n).transpose();
    if (auto* gb = grad_of(self, 1))
      MatMap<T>(gb->ptr(), k, n).noalias() += ConstMatMap<T>(self.inputs[0]->value.ptr(), m, k).transpose() * g;
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank2("transpose", x.shape());
  const std::size_t m = x.dim(0), n = x.dim(1);
  Array<T> out({n, m});
  MatMap<T>(out.ptr(), n, m) = ConstMatMap<T>(x.value().ptr(), m, n).transpose();
  return make_result<T>("transpose", std::move(out), {x}, [m, n](Node<T>& self) {
    if (auto* gx = grad_of(self, 0))
      MatMap<T>(gx->ptr(), m, n) += ConstMatMap<T>(self.grad.ptr(), n, m).transpose();
  });
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  if (stride == 0) throw ArgumentError("conv2d: stride must be positive");
  if (padding == Padding::kSame) return (in + stride - 1) / stride;
  if (kernel > in) throw ShapeError("conv2d: kernel extent " + std::to_string(kernel) + " exceeds input extent " +
                                    std::to_string(in) + " under valid padding");
  return (in - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t n, h, w, c, kh, kw, cout, stride, oh, ow, pad_top, pad_left;
  std::size_t patch() const { return kh * kw * c; }
  std::size_t rows() const { return n * oh * ow; }
};

std::size_t same_pad_low(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride) {
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > in ? needed - in : 0;
  return total / 2;
}

template <typename T>
void im2col(const T* input, const ConvGeometry& g, T* cols) {
  const std::size_t patch = g.patch();
  for (std::size_t b = 0; b < g.n; ++b)
    for (std::size_t oy = 0; oy < g.oh; ++oy)
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        T* row = cols + ((b * g.oh + oy) * g.ow + ox) * patch;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            T* dst = row + (ky * g.kw + kx) * g.c;
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) || ix >= static_cast<std::ptrdiff_t>(g.w)) {
              std::fill(dst, dst + g.c, T(0));
            } else {
              const T* src = input + ((b * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)) * g.c;
              std::copy(src, src + g.c, dst);
            }
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* grad_input) {
  const std::size_t patch = g.patch();
  for (std::size_t b = 0; b < g.n; ++b)
    for (std::size_t oy = 0; oy < g.oh; ++oy)
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        const T* row = cols + ((b * g.oh + oy) * g.ow + ox) * patch;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            const T* src = row + (ky * g.kw + kx) * g.c;
            T* dst = grad_input + ((b * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)) * g.c;
            for (std::size_t ch = 0; ch < g.c; ++ch) dst[ch] += src[ch];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, Padding padding) {
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  if (is.size() != 3 && is.size() != 4)
    throw ShapeError("conv2d: input must be [H,W,C] or [N,H,W,C], got " + shape_str(is));
  if (ks.size() != 4) throw ShapeError("conv2d: kernel must be [kh,kw,Cin,Cout], got " + shape_str(ks));
  const bool batched = is.size() == 4;
  ConvGeometry g{};
  g.n = batched ? is[0] : 1;
  g.h = is[batched ? 1 : 0];
  g.w = is[batched ? 2 : 1];
  g.c = is[batched ? 3 : 2];
  g.kh = ks[0];
  g.kw = ks[1];
  g.cout = ks[3];
  g.stride = stride;
  if (ks[2] != g.c)
    throw ShapeError("conv2d: kernel expects " + std::to_string(ks[2]) + " input channels, input has " +
                     std::to_string(g.c));
  g.oh = conv_output_extent(g.h, g.kh, stride, padding);
  g.ow = conv_output_extent(g.w, g.kw, stride, padding);
  if (padding == Padding::kSame) {
    g.pad_top = same_pad_low(g.h, g.oh, g.kh, stride);
    g.pad_left = same_pad_low(g.w, g.ow, g.kw, stride);
  }

  std::vector<T> cols(g.rows() * g.patch());
  im2col(input.value().ptr(), g, cols.data());
  Shape out_shape = batched ? Shape{g.n, g.oh, g.ow, g.cout} : Shape{g.oh, g.ow, g.cout};
  Array<T> out(out_shape);
  MatMap<T>(out.ptr(), g.rows(), g.cout).noalias() =
      ConstMatMap<T>(cols.data(), g.rows(), g.patch()) * ConstMatMap<T>(kernel.value().ptr(), g.patch(), g.cout);
  instrument::add_macs(static_cast<std::uint64_t>(g.rows()) * g.patch() * g.cout);

  const bool keep_cols = kernel.requires_grad();
  return make_result<T>("conv2d", std::move(out), {input, kernel},
                        [g, cols = keep_cols ? std::move(cols) : std::vector<T>{}](Node<T>& self) {
                          ConstMatMap<T> grad(self.grad.ptr(), g.rows(), g.cout);
                          if (auto* gk = grad_of(self, 1))
                            MatMap<T>(gk->ptr(), g.patch(), g.cout).noalias() +=
                                ConstMatMap<T>(cols.data(), g.rows(), g.patch()).transpose() * grad;
                          if (auto* gi = grad_of(self, 0)) {
                            std::vector<T> gcols(g.rows() * g.patch());
                            MatMap<T>(gcols.data(), g.rows(), g.patch()).noalias() =
                                grad * ConstMatMap<T>(self.inputs[1]->value.ptr(), g.patch(), g.cout).transpose();
                            col2im_add(gcols.data(), g, gi->ptr());
                          }
                        });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Array<T> out(s);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  return make_result<T>("softmax", std::move(out), {x}, [outer, inner, n](Node<T>& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          (*gx)[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

template <typename T>
std::vector<T> softmax_values(std::span<const T> x) {
  std::vector<T> out(x.size());
  if (x.empty()) return out;
  const T mx = *std::max_element(x.begin(), x.end());
  T total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

template <typename T>
Tensor<T> l2_norm_map(const Tensor<T>& m) {
  const auto& s = m.shape();
  const std::size_t d = last_dim(s);
  const std::size_t cells = m.size() / d;
  Shape out_shape(s.begin(), s.end() - (s.empty() ? 0 : 1));
  if (out_shape.empty()) out_shape = {1};
  Array<T> out(out_shape);
  const T* mv = m.value().ptr();
  for (std::size_t i = 0; i < cells; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += mv[i * d + j] * mv[i * d + j];
    out[i] = std::sqrt(acc);
  }
  return make_result<T>("l2_norm_map", std::move(out), {m}, [cells, d](Node<T>& self) {
    auto* gm = grad_of(self, 0);
    if (!gm) return;
    const T* mv = self.inputs[0]->value.ptr();
    for (std::size_t i = 0; i < cells; ++i) {
      const T norm = self.value[i];
      if (norm == T(0)) continue;
      const T f = self.grad[i] / norm;
      for (std::size_t j = 0; j < d; ++j) (*gm)[i * d + j] += f * mv[i * d + j];
    }
  });
}

template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> p, std::size_t k) {
  if (k == 0 || k > p.size())
    throw ArgumentError("top_k_indices: k=" + std::to_string(k) + " outside [1, " + std::to_string(p.size()) + "]");
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  idx.resize(k);
  return idx;
}

template <typename T>
Tensor<T> gather_cells(const Tensor<T>& m, std::span<const std::size_t> indices) {
  const auto& s = m.shape();
  if (s.size() < 2) throw ShapeError("gather_cells: expected a [..., d] map with at least two axes, got " + shape_str(s));
  if (indices.empty()) throw ArgumentError("gather_cells: empty index list");
  const std::size_t d = s.back();
  const std::size_t cells = m.size() / d;
  for (auto i : indices)
    if (i >= cells)
      throw ArgumentError("gather_cells: index " + std::to_string(i) + " outside [0, " + std::to_string(cells) + ")");
  Array<T> out({indices.size(), d});
  const T* mv = m.value().ptr();
  for (std::size_t r = 0; r < indices.size(); ++r) std::copy(mv + indices[r] * d, mv + (indices[r] + 1) * d, out.ptr() + r * d);
  return make_result<T>("gather_cells", std::move(out), {m},
                        [d, idx = std::vector<std::size_t>(indices.begin(), indices.end())](Node<T>& self) {
                          auto* gm = grad_of(self, 0);
                          if (!gm) return;
                          for (std::size_t r = 0; r < idx.size(); ++r) {
                            T* dst = gm->ptr() + idx[r] * d;
                            const T* src = self.grad.ptr() + r * d;
                            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return Tensor<T>(x.value(), false);
}

template <typename T>
Tensor<T> straight_through(const Tensor<T>& g, const Array<T>& hard) {
  if (g.shape() != hard.shape())
    throw ShapeError("straight_through: gate " + shape_str(g.shape()) + " vs hard mask " + shape_str(hard.shape()));
  return make_result<T>("straight_through", hard, {g}, [](Node<T>& self) {
    if (auto* gg = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gg)[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (auto v : x.value().data()) acc += v;
  return make_result<T>("sum", Array<T>({1}, acc), {x}, [](Node<T>& self) {
    if (auto* gx = grad_of(self, 0))
      for (auto& v : gx->data()) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> sum_squares(const Tensor<T>& x) {
  T acc = 0;
  for (auto v : x.value().data()) acc += v * v;
  return make_result<T>("sum_squares", Array<T>({1}, acc), {x}, [](Node<T>& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += T(2) * xv[i] * self.grad[0];
  });
}

template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x) {
  const std::size_t offsets[2] = {0, x.rank() >= 2 ? x.size() / x.shape().back() : 1};
  auto out = segment_sum(x.rank() >= 2 ? x : reshape(x, {1, x.size()}), std::span<const std::size_t>(offsets, 2));
  return reshape(out, {out.size()});
}

template <typename T>
Tensor<T> segment_sum(const Tensor<T>& x, std::span<const std::size_t> offsets) {
  if (x.rank() < 2) throw ShapeError("segment_sum: expected [rows, d], got " + shape_str(x.shape()));
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != rows)
    throw ArgumentError("segment_sum: offsets must run from 0 to " + std::to_string(rows));
  for (std::size_t s = 1; s < offsets.size(); ++s)
    if (offsets[s] <= offsets[s - 1]) throw ArgumentError("segment_sum: empty or decreasing segment");
  const std::size_t segments = offsets.size() - 1;
  Array<T> out({segments, d});
  const T* xv = x.value().ptr();
  for (std::size_t s = 0; s < segments; ++s) {
    T* dst = out.ptr() + s * d;
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
      for (std::size_t j = 0; j < d; ++j) dst[j] += xv[r * d + j];
  }
  return make_result<T>("segment_sum", std::move(out), {x},
                        [d, off = std::vector<std::size_t>(offsets.begin(), offsets.end())](Node<T>& self) {
                          auto* gx = grad_of(self, 0);
                          if (!gx) return;
                          for (std::size_t s = 0; s + 1 < off.size(); ++s) {
                            const T* src = self.grad.ptr() + s * d;
                            for (std::size_t r = off[s]; r < off[s + 1]; ++r)
                              for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() < 2) throw ShapeError("scale_rows: expected [rows, d], got " + shape_str(x.shape()));
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  if (w.size() != rows)
    throw ShapeError("scale_rows: " + std::to_string(w.size()) + " weights for " + std::to_string(rows) + " rows");
  Array<T> out(x.shape());
  const T* xv = x.value().ptr();
  const T* wv = w.value().ptr();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * wv[r];
  return make_result<T>("scale_rows", std::move(out), {x, w}, [rows, d](Node<T>& self) {
    const T* xv = self.inputs[0]->value.ptr();
    const T* wv = self.inputs[1]->value.ptr();
    const T* g = self.grad.ptr();
    if (auto* gx = grad_of(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) (*gx)[r * d + j] += g[r * d + j] * wv[r];
    if (auto* gw = grad_of(self, 1))
      for (std::size_t r = 0; r < rows; ++r) {
        T acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += g[r * d + j] * xv[r * d + j];
        (*gw)[r] += acc;
      }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  return make_result<T>("reshape", x.value().reshaped(std::move(shape)), {x}, [](Node<T>& self) {
    if (auto* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2("concat_cols", p.shape());
    if (p.dim(0) != rows)
      throw ShapeError("concat_cols: row counts differ (" + std::to_string(rows) + " vs " + std::to_string(p.dim(0)) + ")");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Array<T> out({rows, total});
  std::size_t col = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const T* src = parts[i].value().ptr();
    for (std::size_t r = 0; r < rows; ++r) std::copy(src + r * widths[i], src + (r + 1) * widths[i], out.ptr() + r * total + col);
    col += widths[i];
  }
  return make_result<T>("concat_cols", std::move(out), parts, [rows, total, widths](Node<T>& self) {
    std::size_t col = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (auto* gp = grad_of(self, i))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[i]; ++j) (*gp)[r * widths[i] + j] += self.grad[r * total + col + j];
      col += widths[i];
    }
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
  const std::size_t d = parts[0].shape().back();
  std::vector<std::size_t> offsets{0};
  for (const auto& p : parts) {
    if (p.rank() > 2 || p.shape().back() != d)
      throw ShapeError("concat_rows: part " + shape_str(p.shape()) + " does not have " + std::to_string(d) + " columns");
    offsets.push_back(offsets.back() + p.size());
  }
  Array<T> out({offsets.back() / d, d});
  for (std::size_t i = 0; i < parts.size(); ++i)
    std::copy(parts[i].value().ptr(), parts[i].value().ptr() + parts[i].size(), out.ptr() + offsets[i]);
  return make_result<T>("concat_rows", std::move(out), parts, [offsets](Node<T>& self) {
    for (std::size_t i = 0; i + 1 < offsets.size(); ++i)
      if (auto* gp = grad_of(self, i))
        for (std::size_t j = offsets[i]; j < offsets[i + 1]; ++j) (*gp)[j - offsets[i]] += self.grad[j];
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank2("slice_cols", x.shape());
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (begin >= end || end > cols)
    throw ArgumentError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                        std::to_string(cols) + " columns");
  const std::size_t w = end - begin;
  Array<T> out({rows, w});
  const T* xv = x.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) std::copy(xv + r * cols + begin, xv + r * cols + end, out.ptr() + r * w);
  return make_result<T>("slice_cols", std::move(out), {x}, [rows, cols, begin, w](Node<T>& self) {
    if (auto* gx = grad_of(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) (*gx)[r * cols + begin + j] += self.grad[r * w + j];
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank2("slice_rows", x.shape());
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (begin >= end || end > rows)
    throw ArgumentError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                        std::to_string(rows) + " rows");
  Array<T> out({end - begin, cols});
  std::copy(x.value().ptr() + begin * cols, x.value().ptr() + end * cols, out.ptr());
  return make_result<T>("slice_rows", std::move(out), {x}, [begin, cols](Node<T>& self) {
    if (auto* gx = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[begin * cols + i] += self.grad[i];
  });
}

#define HVQA_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> elementwise(ElementwiseKind, const Tensor<T>&, const Tensor<T>*);                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> relu(const Tensor<T>&);                                                             \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                          \
  template Tensor<T> tanh(const Tensor<T>&);                                                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> transpose(const Tensor<T>&);                                                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, Padding);                   \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                             \
  template std::vector<T> softmax_values(std::span<const T>);                                            \
  template Tensor<T> l2_norm_map(const Tensor<T>&);                                                      \
  template std::vector<std::size_t> top_k_indices(std::span<const T>, std::size_t);                      \
  template Tensor<T> gather_cells(const Tensor<T>&, std::span<const std::size_t>);                       \
  template Tensor<T> stop_gradient(const Tensor<T>&);                                                    \
  template Tensor<T> straight_through(const Tensor<T>&, const Array<T>&);                                \
  template Tensor<T> sum(const Tensor<T>&);                                                              \
  template Tensor<T> mean(const Tensor<T>&);                                                             \
  template Tensor<T> sum_squares(const Tensor<T>&);                                                      \
  template Tensor<T> sum_rows(const Tensor<T>&);                                                         \
  template Tensor<T> segment_sum(const Tensor<T>&, std::span<const std::size_t>);                        \
  template Tensor<T> scale_rows(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                   \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                         \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                         \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                             \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);

HVQA_INSTANTIATE_OPS(float)
HVQA_INSTANTIATE_OPS(double)

}  // namespace hvqa
