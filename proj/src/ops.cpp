#include "ssrseg/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace ssrseg {

namespace {

using detail::TensorImpl;

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

// Gradient buffer of an input, or nullptr when it does not need one.
template <typename T>
std::vector<T>* grad_of(const ImplPtr<T>& in) {
  return in->requires_grad ? &in->grad_buffer() : nullptr;
}

template <typename T>
const std::vector<T>& values(const ImplPtr<T>& in) {
  return *in->data;
}

// [N, C, D, H, W] view of a tensor with 1-3 spatial axes; missing leading
// spatial axes get extent 1.
struct Vol {
  std::size_t n = 1, c = 1;
  std::array<std::size_t, 3> s{1, 1, 1};
  std::size_t spatial() const { return s[0] * s[1] * s[2]; }
};

Vol as_volume(const Shape& shape, const char* op) {
  if (shape.size() < 3 || shape.size() > 5) {
    throw ContractError(std::string(op) + ": expected [N,C,spatial...] with 1-3 spatial axes, got " +
                        shape_str(shape));
  }
  Vol v;
  v.n = shape[0];
  v.c = shape[1];
  const std::size_t r = shape.size() - 2;
  for (std::size_t i = 0; i < r; ++i) v.s[3 - r + i] = shape[2 + i];
  return v;
}

std::array<std::size_t, 3> pad_axes(const std::vector<std::size_t>& per_axis, std::size_t fill) {
  std::array<std::size_t, 3> out{fill, fill, fill};
  const std::size_t r = per_axis.size();
  for (std::size_t i = 0; i < r; ++i) out[3 - r + i] = per_axis[i];
  return out;
}

std::size_t ceil_div(std::ptrdiff_t a, std::ptrdiff_t b) {
  return static_cast<std::size_t>((a + b - 1) / b);
}

// Output indices o in [lo, hi) for which o*stride + offset lands in [0, in).
std::pair<std::size_t, std::size_t> valid_range(std::ptrdiff_t offset, std::size_t stride,
                                                std::size_t in, std::size_t out) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const std::size_t lo = offset >= 0 ? 0 : ceil_div(-offset, s);
  const std::ptrdiff_t room = static_cast<std::ptrdiff_t>(in) - offset;
  std::size_t hi = room <= 0 ? 0 : ceil_div(room, s);
  hi = std::min(hi, out);
  return {std::min(lo, hi), hi};
}

enum class Broadcast { kSame, kScalarA, kScalarB, kChannelA, kChannelB };

Broadcast broadcast_mode(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::kSame;
  if (shape_numel(b) == 1) return Broadcast::kScalarB;
  if (shape_numel(a) == 1) return Broadcast::kScalarA;
  auto channel_of = [](const Shape& full, const Shape& single) {
    if (full.size() != single.size() || full.size() < 2 || single[1] != 1) return false;
    for (std::size_t i = 0; i < full.size(); ++i) {
      if (i != 1 && full[i] != single[i]) return false;
    }
    return true;
  };
  if (channel_of(a, b)) return Broadcast::kChannelB;
  if (channel_of(b, a)) return Broadcast::kChannelA;
  throw ContractError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                      shape_str(b));
}

// Maps an output flat index to the operand flat indices.
struct BroadcastIndex {
  Broadcast mode;
  std::size_t channels = 1, inner = 1;

  BroadcastIndex(Broadcast m, const Shape& out) : mode(m) {
    if (m == Broadcast::kChannelA || m == Broadcast::kChannelB) {
      channels = out[1];
      for (std::size_t i = 2; i < out.size(); ++i) inner *= out[i];
    }
  }
  std::size_t squeeze(std::size_t i) const {
    return (i / (channels * inner)) * inner + i % inner;
  }
  std::size_t a(std::size_t i) const {
    switch (mode) {
      case Broadcast::kScalarA: return 0;
      case Broadcast::kChannelA: return squeeze(i);
      default: return i;
    }
  }
  std::size_t b(std::size_t i) const {
    switch (mode) {
      case Broadcast::kScalarB: return 0;
      case Broadcast::kChannelB: return squeeze(i);
      default: return i;
    }
  }
};

// Shared driver for add/sub/mul/div. `fwd(x, y)` computes the value,
// `dfa(x, y)` / `dfb(x, y)` the partial derivatives.
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da dfa,
                    Db dfb) {
  const Broadcast mode = broadcast_mode(a.shape(), b.shape(), name);
  const Shape out_shape =
      (mode == Broadcast::kScalarA || mode == Broadcast::kChannelA) ? b.shape() : a.shape();
  const BroadcastIndex idx(mode, out_shape);
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t n = shape_numel(out_shape);
  std::vector<T> out(n);
  if (mode == Broadcast::kSame) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[idx.a(i)], bv[idx.b(i)]);
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result<T>(name, out_shape, std::move(out), {a, b},
                        [ai, bi, idx, n, dfa, dfb](const TensorImpl<T>& o) {
                          const auto& x = values(ai);
                          const auto& y = values(bi);
                          auto* ga = grad_of(ai);
                          auto* gb = grad_of(bi);
                          for (std::size_t i = 0; i < n; ++i) {
                            const T g = o.grad[i];
                            const T xv = x[idx.a(i)];
                            const T yv = y[idx.b(i)];
                            if (ga) (*ga)[idx.a(i)] += g * dfa(xv, yv);
                            if (gb) (*gb)[idx.b(i)] += g * dfb(xv, yv);
                          }
                        });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto xi = x.impl();
  return make_result<T>(name, x.shape(), std::move(out), {x},
                        [xi, deriv](const TensorImpl<T>& o) {
                          const auto& xs = values(xi);
                          auto* g = grad_of(xi);
                          const auto& ys = *o.data;
                          for (std::size_t i = 0; i < xs.size(); ++i) {
                            (*g)[i] += o.grad[i] * deriv(xs[i], ys[i]);
                          }
                        });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------- ConvSpec

ConvSpec ConvSpec::same(std::size_t rank, std::size_t in_channels, std::size_t out_channels,
                        std::size_t kernel, std::size_t dilation) {
  ConvSpec s;
  s.kernel.assign(rank, kernel);
  s.dilation.assign(rank, dilation);
  s.stride.assign(rank, 1);
  s.padding.assign(rank, dilation * (kernel - 1) / 2);
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  return s;
}

void ConvSpec::validate() const {
  const std::size_t r = kernel.size();
  if (r < 2 || r > 3) throw ConfigError("conv spec: spatial rank must be 2 or 3");
  if (dilation.size() != r || stride.size() != r || padding.size() != r) {
    throw ConfigError("conv spec: kernel/dilation/stride/padding ranks differ");
  }
  for (std::size_t i = 0; i < r; ++i) {
    if (kernel[i] == 0 || kernel[i] % 2 == 0) {
      throw ConfigError("conv spec: kernel extent on axis " + std::to_string(i) +
                        " must be odd and positive");
    }
    if (dilation[i] == 0) throw ConfigError("conv spec: dilation on axis " + std::to_string(i) + " is 0");
    if (stride[i] == 0) throw ConfigError("conv spec: stride on axis " + std::to_string(i) + " is 0");
  }
  if (in_channels == 0 || out_channels == 0) throw ConfigError("conv spec: channel counts must be positive");
}

std::vector<std::size_t> ConvSpec::output_extents(const std::vector<std::size_t>& in) const {
  validate();
  if (in.size() != rank()) throw ContractError("conv spec: input rank mismatch");
  std::vector<std::size_t> out(rank());
  for (std::size_t i = 0; i < rank(); ++i) {
    const auto span = static_cast<std::ptrdiff_t>(in[i] + 2 * padding[i]) -
                      static_cast<std::ptrdiff_t>(dilation[i] * (kernel[i] - 1)) - 1;
    if (span < 0) {
      throw ConfigError("conv: non-positive output extent on spatial axis " + std::to_string(i) +
                        " (input " + std::to_string(in[i]) + ")");
    }
    out[i] = static_cast<std::size_t>(span) / stride[i] + 1;
  }
  return out;
}

// ---------------------------------------------------------------- conv_nd

namespace {

struct ConvGeometry {
  Vol in, out;
  std::array<std::size_t, 3> k, d, s, p;
  std::size_t taps() const { return k[0] * k[1] * k[2]; }
  // Offset applied to output index o on axis a for kernel tap t: i = o*s + off.
  std::ptrdiff_t offset(int a, std::size_t t) const {
    return static_cast<std::ptrdiff_t>(t * d[a]) - static_cast<std::ptrdiff_t>(p[a]);
  }
};

// Calls body(out_row, in_row, ow_lo, ow_hi, off_w) for every (n, co, ci, tap, od, oh)
// combination that touches the input, where in_row[ow*sw + off_w] pairs with out_row[ow].
template <typename Body>
void for_each_conv_row(const ConvGeometry& g, std::size_t co_count, Body&& body) {
  const std::size_t in_plane = g.in.s[1] * g.in.s[2];
  const std::size_t out_plane = g.out.s[1] * g.out.s[2];
  for (std::size_t n = 0; n < g.in.n; ++n) {
    for (std::size_t co = 0; co < co_count; ++co) {
      for (std::size_t ci = 0; ci < g.in.c; ++ci) {
        const std::size_t in_base = (n * g.in.c + ci) * g.in.spatial();
        const std::size_t out_base = (n * co_count + co) * g.out.spatial();
        const std::size_t w_base = (co * g.in.c + ci) * g.taps();
        for (std::size_t kd = 0; kd < g.k[0]; ++kd) {
          const auto offd = g.offset(0, kd);
          const auto [od_lo, od_hi] = valid_range(offd, g.s[0], g.in.s[0], g.out.s[0]);
          for (std::size_t kh = 0; kh < g.k[1]; ++kh) {
            const auto offh = g.offset(1, kh);
            const auto [oh_lo, oh_hi] = valid_range(offh, g.s[1], g.in.s[1], g.out.s[1]);
            for (std::size_t kw = 0; kw < g.k[2]; ++kw) {
              const auto offw = g.offset(2, kw);
              const auto [ow_lo, ow_hi] = valid_range(offw, g.s[2], g.in.s[2], g.out.s[2]);
              if (ow_lo >= ow_hi) continue;
              const std::size_t w_index = w_base + (kd * g.k[1] + kh) * g.k[2] + kw;
              for (std::size_t od = od_lo; od < od_hi; ++od) {
                const std::size_t id = od * g.s[0] + offd;
                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const std::size_t ih = oh * g.s[1] + offh;
                  body(w_index, out_base + od * out_plane + oh * g.out.s[2],
                       in_base + id * in_plane + ih * g.in.s[2], ow_lo, ow_hi, offw);
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv_nd(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                  const ConvSpec& spec) {
  spec.validate();
  const std::size_t r = spec.rank();
  const Shape& xs = input.shape();
  if (xs.size() != r + 2) {
    throw ContractError("conv_nd: input " + shape_str(xs) + " has spatial rank " +
                        std::to_string(xs.size() < 2 ? 0 : xs.size() - 2) + ", spec has " +
                        std::to_string(r));
  }
  if (xs[1] != spec.in_channels) {
    throw ContractError("conv_nd: input channel axis (1) is " + std::to_string(xs[1]) +
                        ", spec expects " + std::to_string(spec.in_channels));
  }
  Shape ws{spec.out_channels, spec.in_channels};
  ws.insert(ws.end(), spec.kernel.begin(), spec.kernel.end());
  if (weight.shape() != ws) {
    for (std::size_t a = 0; a < std::max(ws.size(), weight.rank()); ++a) {
      if (a >= ws.size() || a >= weight.rank() || ws[a] != weight.dim(a)) {
        throw ContractError("conv_nd: weight " + shape_str(weight.shape()) + " differs from " +
                            shape_str(ws) + " on axis " + std::to_string(a));
      }
    }
  }
  if (bias.defined() && bias.shape() != Shape{spec.out_channels}) {
    throw ContractError("conv_nd: bias " + shape_str(bias.shape()) + " differs from [" +
                        std::to_string(spec.out_channels) + "] on axis 0");
  }
  std::vector<std::size_t> in_ext(xs.begin() + 2, xs.end());
  const auto out_ext = spec.output_extents(in_ext);

  ConvGeometry g;
  g.in = as_volume(xs, "conv_nd");
  Shape out_shape{xs[0], spec.out_channels};
  out_shape.insert(out_shape.end(), out_ext.begin(), out_ext.end());
  g.out = as_volume(out_shape, "conv_nd");
  g.k = pad_axes(spec.kernel, 1);
  g.d = pad_axes(spec.dilation, 1);
  g.s = pad_axes(spec.stride, 1);
  g.p = pad_axes(spec.padding, 0);

  const auto x = input.data();
  const auto w = weight.data();
  std::vector<T> out(shape_numel(out_shape), T(0));
  if (bias.defined()) {
    const auto b = bias.data();
    const std::size_t sp = g.out.spatial();
    for (std::size_t n = 0; n < g.out.n; ++n) {
      for (std::size_t co = 0; co < g.out.c; ++co) {
        std::fill_n(out.begin() + (n * g.out.c + co) * sp, sp, b[co]);
      }
    }
  }
  const std::size_t sw = g.s[2];
  for_each_conv_row(g, g.out.c,
                    [&](std::size_t wi, std::size_t orow, std::size_t irow, std::size_t lo,
                        std::size_t hi, std::ptrdiff_t off) {
                      const T wv = w[wi];
                      T* __restrict dst = out.data() + orow;
                      const T* __restrict src = x.data() + irow + off;
                      if (sw == 1) {
                        for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] += wv * src[ow];
                      } else {
                        for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] += wv * src[ow * sw];
                      }
                    });

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  auto xi = input.impl();
  auto wi = weight.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  return make_result<T>(
      "conv_nd", out_shape, std::move(out), std::move(inputs),
      [xi, wi, bi, g](const TensorImpl<T>& o) {
        const auto& xv = values(xi);
        const auto& wv = values(wi);
        const T* gout = o.grad.data();
        auto* gx = grad_of(xi);
        auto* gw = grad_of(wi);
        const std::size_t sw = g.s[2];
        if (bi && bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          const std::size_t sp = g.out.spatial();
          for (std::size_t n = 0; n < g.out.n; ++n) {
            for (std::size_t co = 0; co < g.out.c; ++co) {
              const T* row = gout + (n * g.out.c + co) * sp;
              T acc = T(0);
              for (std::size_t i = 0; i < sp; ++i) acc += row[i];
              gb[co] += acc;
            }
          }
        }
        if (gx) {
          T* gxd = gx->data();
          for_each_conv_row(g, g.out.c,
                            [&](std::size_t wi_, std::size_t orow, std::size_t irow, std::size_t lo,
                                std::size_t hi, std::ptrdiff_t off) {
                              const T w = wv[wi_];
                              const T* __restrict src = gout + orow;
                              T* __restrict dst = gxd + irow + off;
                              if (sw == 1) {
                                for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] += w * src[ow];
                              } else {
                                for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * sw] += w * src[ow];
                              }
                            });
        }
        if (gw) {
          T* gwd = gw->data();
          for_each_conv_row(g, g.out.c,
                            [&](std::size_t wi_, std::size_t orow, std::size_t irow, std::size_t lo,
                                std::size_t hi, std::ptrdiff_t off) {
                              const T* __restrict go = gout + orow;
                              const T* __restrict src = xv.data() + irow + off;
                              T acc = T(0);
                              if (sw == 1) {
                                for (std::size_t ow = lo; ow < hi; ++ow) acc += go[ow] * src[ow];
                              } else {
                                for (std::size_t ow = lo; ow < hi; ++ow) acc += go[ow] * src[ow * sw];
                              }
                              gwd[wi_] += acc;
                            });
        }
      });
}

// ---------------------------------------------------------------- pooling

namespace {

struct Bins {
  std::vector<std::size_t> begin, end;
};

Bins make_bins(std::size_t in, std::size_t out) {
  Bins b;
  for (std::size_t i = 0; i < out; ++i) {
    b.begin.push_back(i * in / out);
    b.end.push_back(((i + 1) * in + out - 1) / out);
  }
  return b;
}

void check_spatial_target(const Shape& shape, const std::vector<std::size_t>& target,
                          const char* op, bool allow_upscale) {
  if (shape.size() < 3 || shape.size() > 5 || target.size() != shape.size() - 2) {
    throw ContractError(std::string(op) + ": target rank " + std::to_string(target.size()) +
                        " does not match input " + shape_str(shape));
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == 0) {
      throw ConfigError(std::string(op) + ": target extent 0 on spatial axis " + std::to_string(i));
    }
    if (!allow_upscale && target[i] > shape[2 + i]) {
      throw ConfigError(std::string(op) + ": target extent " + std::to_string(target[i]) +
                        " exceeds input extent " + std::to_string(shape[2 + i]) +
                        " on spatial axis " + std::to_string(i));
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, const std::vector<std::size_t>& target) {
  check_spatial_target(input.shape(), target, "adaptive_avg_pool", false);
  const Vol in = as_volume(input.shape(), "adaptive_avg_pool");
  Shape out_shape{in.n, in.c};
  out_shape.insert(out_shape.end(), target.begin(), target.end());
  const Vol out = as_volume(out_shape, "adaptive_avg_pool");
  std::array<Bins, 3> bins;
  for (int a = 0; a < 3; ++a) bins[a] = make_bins(in.s[a], out.s[a]);

  // Calls f(out_index, in_index, inverse_count) for every contributing pair.
  auto visit = [in, out, bins](auto&& f) {
    for (std::size_t nc = 0; nc < in.n * in.c; ++nc) {
      const std::size_t ib = nc * in.spatial();
      const std::size_t ob = nc * out.spatial();
      for (std::size_t od = 0; od < out.s[0]; ++od)
        for (std::size_t oh = 0; oh < out.s[1]; ++oh)
          for (std::size_t ow = 0; ow < out.s[2]; ++ow) {
            const std::size_t oi = ob + (od * out.s[1] + oh) * out.s[2] + ow;
            const std::size_t cnt = (bins[0].end[od] - bins[0].begin[od]) *
                                    (bins[1].end[oh] - bins[1].begin[oh]) *
                                    (bins[2].end[ow] - bins[2].begin[ow]);
            for (std::size_t id = bins[0].begin[od]; id < bins[0].end[od]; ++id)
              for (std::size_t ih = bins[1].begin[oh]; ih < bins[1].end[oh]; ++ih)
                for (std::size_t iw = bins[2].begin[ow]; iw < bins[2].end[ow]; ++iw)
                  f(oi, ib + (id * in.s[1] + ih) * in.s[2] + iw, cnt);
          }
    }
  };

  const auto x = input.data();
  std::vector<T> sums(shape_numel(out_shape), T(0));
  std::vector<std::size_t> counts(sums.size(), 1);
  visit([&](std::size_t oi, std::size_t ii, std::size_t cnt) {
    sums[oi] += x[ii];
    counts[oi] = cnt;
  });
  for (std::size_t i = 0; i < sums.size(); ++i) sums[i] /= static_cast<T>(counts[i]);

  auto xi = input.impl();
  return make_result<T>("adaptive_avg_pool", out_shape, std::move(sums), {input},
                        [xi, visit](const TensorImpl<T>& o) {
                          auto& gx = xi->grad_buffer();
                          visit([&](std::size_t oi, std::size_t ii, std::size_t cnt) {
                            gx[ii] += o.grad[oi] / static_cast<T>(cnt);
                          });
                        });
}

// ---------------------------------------------------------------- resize

namespace {

template <typename T>
struct LerpAxis {
  std::vector<std::size_t> i0, i1;
  std::vector<T> frac;
};

template <typename T>
LerpAxis<T> make_lerp(std::size_t in, std::size_t out) {
  LerpAxis<T> ax;
  const T scale = static_cast<T>(in) / static_cast<T>(out);
  for (std::size_t o = 0; o < out; ++o) {
    T src = (static_cast<T>(o) + T(0.5)) * scale - T(0.5);
    if (src < T(0)) src = T(0);
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    ax.i0.push_back(lo);
    ax.i1.push_back(hi);
    ax.frac.push_back(hi == lo ? T(0) : src - static_cast<T>(lo));
  }
  return ax;
}

}  // namespace

template <typename T>
Tensor<T> resize_linear(const Tensor<T>& input, const std::vector<std::size_t>& target) {
  check_spatial_target(input.shape(), target, "resize_linear", true);
  const Vol in = as_volume(input.shape(), "resize_linear");
  Shape out_shape{in.n, in.c};
  out_shape.insert(out_shape.end(), target.begin(), target.end());
  const Vol out = as_volume(out_shape, "resize_linear");
  std::array<LerpAxis<T>, 3> ax;
  for (int a = 0; a < 3; ++a) ax[a] = make_lerp<T>(in.s[a], out.s[a]);

  // Calls f(out_index, in_index, weight) for each of the 8 corners.
  auto visit = [in, out, ax](auto&& f) {
    for (std::size_t nc = 0; nc < in.n * in.c; ++nc) {
      const std::size_t ib = nc * in.spatial();
      std::size_t oi = nc * out.spatial();
      for (std::size_t od = 0; od < out.s[0]; ++od) {
        const std::size_t d[2] = {ax[0].i0[od], ax[0].i1[od]};
        const T wd[2] = {T(1) - ax[0].frac[od], ax[0].frac[od]};
        for (std::size_t oh = 0; oh < out.s[1]; ++oh) {
          const std::size_t h[2] = {ax[1].i0[oh], ax[1].i1[oh]};
          const T wh[2] = {T(1) - ax[1].frac[oh], ax[1].frac[oh]};
          for (std::size_t ow = 0; ow < out.s[2]; ++ow, ++oi) {
            const std::size_t w[2] = {ax[2].i0[ow], ax[2].i1[ow]};
            const T ww[2] = {T(1) - ax[2].frac[ow], ax[2].frac[ow]};
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int c = 0; c < 2; ++c)
                  f(oi, ib + (d[a] * in.s[1] + h[b]) * in.s[2] + w[c], wd[a] * wh[b] * ww[c]);
          }
        }
      }
    }
  };

  const auto x = input.data();
  std::vector<T> result(shape_numel(out_shape), T(0));
  visit([&](std::size_t oi, std::size_t ii, T wt) { result[oi] += wt * x[ii]; });
  auto xi = input.impl();
  return make_result<T>("resize_linear", out_shape, std::move(result), {input},
                        [xi, visit](const TensorImpl<T>& o) {
                          auto& gx = xi->grad_buffer();
                          visit([&](std::size_t oi, std::size_t ii, T wt) {
                            gx[ii] += wt * o.grad[oi];
                          });
                        });
}

// ---------------------------------------------------------------- pixel shuffle

namespace {

// Index pairs (low-res channel-blocked index, high-res index) of the
// depth-to-space permutation for the given low-res shape.
std::vector<std::pair<std::size_t, std::size_t>> shuffle_map(const Shape& low, std::size_t r,
                                                             Shape& high) {
  const Vol lo = as_volume(low, "pixel_shuffle");
  const std::size_t rank = low.size() - 2;
  std::size_t block = 1;
  for (std::size_t i = 0; i < rank; ++i) block *= r;
  if (lo.c % block != 0) {
    throw ConfigError("pixel_shuffle: channel count " + std::to_string(lo.c) +
                      " is not divisible by factor^" + std::to_string(rank) + " = " +
                      std::to_string(block));
  }
  const std::size_t c_out = lo.c / block;
  std::array<std::size_t, 3> f{1, 1, 1};
  for (std::size_t i = 0; i < rank; ++i) f[3 - rank + i] = r;
  high = Shape{lo.n, c_out};
  for (std::size_t i = 0; i < rank; ++i) high.push_back(low[2 + i] * r);
  const std::array<std::size_t, 3> hs{lo.s[0] * f[0], lo.s[1] * f[1], lo.s[2] * f[2]};

  std::vector<std::pair<std::size_t, std::size_t>> map;
  map.reserve(shape_numel(low));
  std::size_t li = 0;
  for (std::size_t n = 0; n < lo.n; ++n)
    for (std::size_t c = 0; c < c_out; ++c)
      for (std::size_t rd = 0; rd < f[0]; ++rd)
        for (std::size_t rh = 0; rh < f[1]; ++rh)
          for (std::size_t rw = 0; rw < f[2]; ++rw)
            for (std::size_t d = 0; d < lo.s[0]; ++d)
              for (std::size_t h = 0; h < lo.s[1]; ++h)
                for (std::size_t w = 0; w < lo.s[2]; ++w, ++li) {
                  const std::size_t hd = d * f[0] + rd, hh = h * f[1] + rh, hw = w * f[2] + rw;
                  const std::size_t hi = (n * c_out + c) * hs[0] * hs[1] * hs[2] +
                                         (hd * hs[1] + hh) * hs[2] + hw;
                  map.emplace_back(li, hi);
                }
  return map;
}

template <typename T>
Tensor<T> permute_values(const char* name, const Tensor<T>& input, Shape out_shape,
                         std::vector<std::pair<std::size_t, std::size_t>> map, bool forward) {
  const auto x = input.data();
  std::vector<T> out(x.size());
  for (const auto& [lo, hi] : map) {
    if (forward) out[hi] = x[lo];
    else out[lo] = x[hi];
  }
  auto xi = input.impl();
  return make_result<T>(name, std::move(out_shape), std::move(out), {input},
                        [xi, map = std::move(map), forward](const TensorImpl<T>& o) {
                          auto& gx = xi->grad_buffer();
                          for (const auto& [lo, hi] : map) {
                            if (forward) gx[lo] += o.grad[hi];
                            else gx[hi] += o.grad[lo];
                          }
                        });
}

}  // namespace

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& input, std::size_t factor) {
  if (factor == 0) throw ConfigError("pixel_shuffle: factor must be positive");
  Shape high;
  auto map = shuffle_map(input.shape(), factor, high);
  return permute_values<T>("pixel_shuffle", input, std::move(high), std::move(map), true);
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& input, std::size_t factor) {
  if (factor == 0) throw ConfigError("pixel_unshuffle: factor must be positive");
  const Shape& hs = input.shape();
  if (hs.size() < 3 || hs.size() > 5) {
    throw ContractError("pixel_unshuffle: expected [N,C,spatial...], got " + shape_str(hs));
  }
  Shape low{hs[0], hs[1]};
  for (std::size_t i = 2; i < hs.size(); ++i) {
    if (hs[i] % factor != 0) {
      throw ConfigError("pixel_unshuffle: extent " + std::to_string(hs[i]) + " on axis " +
                        std::to_string(i) + " is not divisible by " + std::to_string(factor));
    }
    low[1] *= factor;
    low.push_back(hs[i] / factor);
  }
  Shape high;
  auto map = shuffle_map(low, factor, high);
  return permute_values<T>("pixel_unshuffle", input, std::move(low), std::move(map), false);
}

// ---------------------------------------------------------------- normalization

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, T eps) {
  const Vol v = as_volume(input.shape(), "instance_norm");
  const std::size_t sp = v.spatial();
  const auto x = input.data();
  std::vector<T> out(x.size());
  std::vector<T> inv_std(v.n * v.c);
  for (std::size_t nc = 0; nc < v.n * v.c; ++nc) {
    const T* src = x.data() + nc * sp;
    T mean = T(0);
    for (std::size_t i = 0; i < sp; ++i) mean += src[i];
    mean /= static_cast<T>(sp);
    T var = T(0);
    for (std::size_t i = 0; i < sp; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(sp);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[nc] = inv;
    for (std::size_t i = 0; i < sp; ++i) out[nc * sp + i] = (src[i] - mean) * inv;
  }
  auto xi = input.impl();
  return make_result<T>("instance_norm", input.shape(), std::move(out), {input},
                        [xi, inv_std = std::move(inv_std), sp](const TensorImpl<T>& o) {
                          auto& gx = xi->grad_buffer();
                          const auto& y = *o.data;
                          for (std::size_t nc = 0; nc < inv_std.size(); ++nc) {
                            const T* gy = o.grad.data() + nc * sp;
                            const T* yy = y.data() + nc * sp;
                            T mg = T(0), mgy = T(0);
                            for (std::size_t i = 0; i < sp; ++i) {
                              mg += gy[i];
                              mgy += gy[i] * yy[i];
                            }
                            mg /= static_cast<T>(sp);
                            mgy /= static_cast<T>(sp);
                            for (std::size_t i = 0; i < sp; ++i) {
                              gx[nc * sp + i] += inv_std[nc] * (gy[i] - mg - yy[i] * mgy);
                            }
                          }
                        });
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op<T>(
      "sigmoid", x, [](T v) { return stable_sigmoid(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary_op<T>(
      "square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary_op<T>(
      "add_scalar", x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T value) {
  return unary_op<T>(
      "mul_scalar", x, [value](T v) { return v * value; }, [value](T, T) { return value; });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------- structural

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ContractError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ContractError("concat: rank mismatch " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ContractError("concat: shape " + shape_str(s) + " differs from " + shape_str(first) +
                            " on axis " + std::to_string(i));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> chunk;
  for (const auto& p : parts) chunk.push_back(p.dim(axis) * inner);
  const std::size_t row = out_shape[axis] * inner;

  std::vector<T> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t pos = o * row;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto d = parts[k].data();
      std::copy_n(d.begin() + o * chunk[k], chunk[k], out.begin() + pos);
      pos += chunk[k];
    }
  }
  std::vector<ImplPtr<T>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return make_result<T>("concat", out_shape, std::move(out), parts,
                        [impls, chunk, outer, row](const TensorImpl<T>& o) {
                          for (std::size_t oo = 0; oo < outer; ++oo) {
                            std::size_t pos = oo * row;
                            for (std::size_t k = 0; k < impls.size(); ++k) {
                              if (auto* g = grad_of(impls[k])) {
                                for (std::size_t i = 0; i < chunk[k]; ++i) {
                                  (*g)[oo * chunk[k] + i] += o.grad[pos + i];
                                }
                              }
                              pos += chunk[k];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ContractError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  const auto d = x.data();
  auto xi = x.impl();
  return make_result<T>("reshape", shape, std::vector<T>(d.begin(), d.end()), {x},
                        [xi](const TensorImpl<T>& o) { xi->accumulate(o.grad); });
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t index) {
  if (x.rank() < 1 || index >= x.dim(0)) {
    throw ContractError("slice_batch: index " + std::to_string(index) + " out of range for " +
                        shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[0] = 1;
  const std::size_t n = shape_numel(out_shape);
  const auto d = x.data();
  std::vector<T> out(d.begin() + index * n, d.begin() + (index + 1) * n);
  auto xi = x.impl();
  return make_result<T>("slice_batch", out_shape, std::move(out), {x},
                        [xi, index, n](const TensorImpl<T>& o) {
                          auto& g = xi->grad_buffer();
                          for (std::size_t i = 0; i < n; ++i) g[index * n + i] += o.grad[i];
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& matrix) {
  if (matrix.rank() != 2) throw ContractError("transpose: expected a matrix, got " + shape_str(matrix.shape()));
  const std::size_t r = matrix.dim(0), c = matrix.dim(1);
  const auto d = matrix.data();
  std::vector<T> out(d.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = d[i * c + j];
  auto xi = matrix.impl();
  return make_result<T>("transpose", Shape{c, r}, std::move(out), {matrix},
                        [xi, r, c](const TensorImpl<T>& o) {
                          auto& g = xi->grad_buffer();
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
                        });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ContractError("matmul: expected matrices, got " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ContractError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result<T>("matmul", Shape{m, n}, std::move(out), {a, b},
                        [ai, bi, m, k, n](const TensorImpl<T>& o) {
                          const auto& A = values(ai);
                          const auto& B = values(bi);
                          if (auto* ga = grad_of(ai)) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                T acc = T(0);
                                for (std::size_t j = 0; j < n; ++j) acc += o.grad[i * n + j] * B[p * n + j];
                                (*ga)[i * k + p] += acc;
                              }
                          }
                          if (auto* gb = grad_of(bi)) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                const T aip = A[i * k + p];
                                for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * o.grad[i * n + j];
                              }
                          }
                        });
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto xi = x.impl();
  return make_result<T>("reduce_sum", Shape{1}, std::vector<T>{acc}, {x},
                        [xi](const TensorImpl<T>& o) {
                          auto& g = xi->grad_buffer();
                          for (auto& v : g) v += o.grad[0];
                        });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
  return mul_scalar(reduce_sum(x), T(1) / static_cast<T>(x.numel()));
}

#define SSRSEG_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> conv_nd(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                             const ConvSpec&);                                                 \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&, const std::vector<std::size_t>&);     \
  template Tensor<T> resize_linear(const Tensor<T>&, const std::vector<std::size_t>&);         \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> pixel_unshuffle(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> instance_norm(const Tensor<T>&, T);                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> square(const Tensor<T>&);                                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                       \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                  \
  template Tensor<T> slice_batch(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> reduce_sum(const Tensor<T>&);                                             \
  template Tensor<T> reduce_mean(const Tensor<T>&);

SSRSEG_INSTANTIATE_OPS(float)
SSRSEG_INSTANTIATE_OPS(double)

}  // namespace ssrseg
