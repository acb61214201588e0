#pragma once

// Tape-based reverse-mode differentiation over Tensor<T>. A Tape records one
// forward pass; backward() walks it in reverse and pushes gradients into the
// ParamSet entries that were bound with Tape::parameter(). A tape is meant to
// be discarded after backward.

#include <Eigen/Core>

#include <cassert>
#include <functional>
#include <memory>
#include <utility>
#include <deque>
#include <vector>

#include "s2s/params.hpp"
#include "s2s/tensor.hpp"

namespace s2s::ad {

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  T scalar() const { return value()[0]; }
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr, {}); }

  /// Leaf whose gradient is kept on the tape (read it back with grad()).
  Var<T> leaf(Tensor<T> value) { return push(std::move(value), true, nullptr, {}); }

  /// Leaf bound to a parameter; backward() accumulates into param.grad.
  Var<T> parameter(Parameter<T>& param) {
    return push(param.value, true, &param, {});
  }

  /// Records an op result. `backward` is only invoked when the result needs a
  /// gradient, which is the case iff any of `inputs` does.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) {
      assert(in.tape == this);
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), needs, nullptr, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of a node, allocated (zeroed) on first access.
  Tensor<T>& grad_buffer(Var<T> v) {
    auto& node = nodes_.at(v.id);
    if (node.grad.empty() && !node.value.empty()) node.grad = Tensor<T>(node.value.shape());
    return node.grad;
  }

  /// Gradient of the last backward() w.r.t. a leaf, or zeros if it received none.
  Tensor<T> grad(Var<T> v) const {
    const auto& node = nodes_.at(v.id);
    return node.grad.empty() ? Tensor<T>(node.value.shape()) : node.grad;
  }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: variable from another tape");
    if (value(loss).size() != 1)
      throw ShapeError("backward: loss must be a scalar, got shape " +
                       shape_string(value(loss).shape()));
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.requires_grad || node.grad.empty()) continue;
      // No nodes are appended during backward, so references stay valid.
      if (node.backward) node.backward(*this, node.grad);
      if (node.param) {
        auto& p = *node.param;
        for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += node.grad[k];
        p.has_grad = true;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Parameter<T>* param, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, param, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable references while recording
};

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <class T>
void accumulate(Tape<T>& tape, Var<T> v, const Tensor<T>& g, T scale = T{1}) {
  if (!tape.requires_grad(v)) return;
  auto& buf = tape.grad_buffer(v);
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += scale * g[i];
}

// cols has shape (C*k*k, Ho*Wo) for one image (C, H, W).
template <class T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* cols) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ki) - static_cast<std::ptrdiff_t>(pad);
          T* out = row + oy * Wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(out, out + Wo, T{0});
            continue;
          }
          const T* src = img + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox + kj) - static_cast<std::ptrdiff_t>(pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? T{0} : src[ix];
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                std::size_t pad, std::size_t Ho, std::size_t Wo, T* img) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy + ki) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          T* dst = img + (c * H + static_cast<std::size_t>(iy)) * W;
          const T* in = row + oy * Wo;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox + kj) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) dst[ix] += in[ox];
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// Stride-1 cross-correlation of (N, Cin, H, W) with a (Cout, Cin, k, k) kernel,
/// zero padding on every side, plus a per-output-channel bias.
template <class T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, std::size_t padding) {
  auto& tape = *input.tape;
  const auto& x = input.value();
  const auto& w = kernel.value();
  const auto& b = bias.value();
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d kernel");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C)
    throw ShapeError("conv2d: input has " + std::to_string(C) + " channels but kernel expects " +
                     std::to_string(w.dim(1)));
  if (w.dim(3) != k) throw ShapeError("conv2d: kernel must be square");
  if (b.size() != Co) throw ShapeError("conv2d: bias length must equal output channels");
  if (H + 2 * padding < k || W + 2 * padding < k) throw ShapeError("conv2d: kernel larger than input");
  const std::size_t Ho = H + 2 * padding - k + 1, Wo = W + 2 * padding - k + 1;
  const std::size_t K = C * k * k, P = Ho * Wo;

  Tensor<T> y({N, Co, Ho, Wo});
  AlignedVector<T> cols(K * P);
  detail::ConstMatMap<T> wm(w.data(), Co, K);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.data() + n * C * H * W, C, H, W, k, padding, Ho, Wo, cols.data());
    detail::MatMap<T> ym(y.data() + n * Co * P, Co, P);
    ym.noalias() = wm * detail::ConstMatMap<T>(cols.data(), K, P);
    for (std::size_t o = 0; o < Co; ++o) ym.row(o).array() += b[o];
  }

  return tape.record(std::move(y), {input, kernel, bias},
                     [=](Tape<T>& t, const Tensor<T>& g) {
                       const auto& xv = t.value(input);
                       const auto& wv = t.value(kernel);
                       const bool gx = t.requires_grad(input);
                       const bool gw = t.requires_grad(kernel);
                       const bool gb = t.requires_grad(bias);
                       AlignedVector<T> c(K * P);
                       detail::ConstMatMap<T> wmat(wv.data(), Co, K);
                       for (std::size_t n = 0; n < N; ++n) {
                         detail::ConstMatMap<T> gm(g.data() + n * Co * P, Co, P);
                         if (gw) {
                           detail::im2col(xv.data() + n * C * H * W, C, H, W, k, padding, Ho, Wo,
                                          c.data());
                           detail::MatMap<T> dw(t.grad_buffer(kernel).data(), Co, K);
                           dw.noalias() += gm * detail::ConstMatMap<T>(c.data(), K, P).transpose();
                         }
                         if (gb) {
                           auto& db = t.grad_buffer(bias);
                           for (std::size_t o = 0; o < Co; ++o) db[o] += gm.row(o).sum();
                         }
                         if (gx) {
                           detail::MatMap<T> dc(c.data(), K, P);
                           dc.noalias() = wmat.transpose() * gm;
                           detail::col2im_add(c.data(), C, H, W, k, padding, Ho, Wo,
                                              t.grad_buffer(input).data() + n * C * H * W);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Pointwise and structural ops

template <class T>
Var<T> relu(Var<T> input) {
  const auto& x = input.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return input.tape->record(std::move(y), {input}, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(input);
    auto& dx = t.grad_buffer(input);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T{0}) dx[i] += g[i];
  });
}

/// 2x2 non-overlapping max. Gradient goes to the first maximum in row-major
/// order within each block.
template <class T>
Var<T> maxpool2(Var<T> input) {
  const auto& x = input.value();
  require_rank(x.shape(), 4, "maxpool2");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2)
    throw ShapeError("maxpool2: spatial extents must be even, got " + shape_string(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor<T> y({N, C, Ho, Wo});
  std::vector<std::size_t> argmax(y.size());
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        const std::size_t base = nc * H * W;
        const std::size_t cand[4] = {base + 2 * i * W + 2 * j, base + 2 * i * W + 2 * j + 1,
                                     base + (2 * i + 1) * W + 2 * j,
                                     base + (2 * i + 1) * W + 2 * j + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q)
          if (x[cand[q]] > x[best]) best = cand[q];
        const std::size_t o = (nc * Ho + i) * Wo + j;
        y[o] = x[best];
        argmax[o] = best;
      }
  return input.tape->record(std::move(y), {input},
                            [=, argmax = std::move(argmax)](Tape<T>& t, const Tensor<T>& g) {
                              auto& dx = t.grad_buffer(input);
                              for (std::size_t o = 0; o < g.size(); ++o) dx[argmax[o]] += g[o];
                            });
}

template <class T>
Var<T> upsample2_nearest(Var<T> input) {
  const auto& x = input.value();
  require_rank(x.shape(), 4, "upsample2_nearest");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({N, C, 2 * H, 2 * W});
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < 2 * H; ++i)
      for (std::size_t j = 0; j < 2 * W; ++j)
        y[(nc * 2 * H + i) * 2 * W + j] = x[(nc * H + i / 2) * W + j / 2];
  return input.tape->record(std::move(y), {input}, [=](Tape<T>& t, const Tensor<T>& g) {
    auto& dx = t.grad_buffer(input);
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t i = 0; i < 2 * H; ++i)
        for (std::size_t j = 0; j < 2 * W; ++j)
          dx[(nc * H + i / 2) * W + j / 2] += g[(nc * 2 * H + i) * 2 * W + j];
  });
}

template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const auto& x = a.value();
  const auto& z = b.value();
  require_rank(x.shape(), 4, "concat_channels");
  require_rank(z.shape(), 4, "concat_channels");
  if (x.dim(0) != z.dim(0) || x.dim(2) != z.dim(2) || x.dim(3) != z.dim(3))
    throw ShapeError("concat_channels: batch/spatial mismatch " + shape_string(x.shape()) +
                     " vs " + shape_string(z.shape()));
  const std::size_t N = x.dim(0), Ca = x.dim(1), Cb = z.dim(1), P = x.dim(2) * x.dim(3);
  Tensor<T> y({N, Ca + Cb, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(x.data() + n * Ca * P, Ca * P, y.data() + n * (Ca + Cb) * P);
    std::copy_n(z.data() + n * Cb * P, Cb * P, y.data() + n * (Ca + Cb) * P + Ca * P);
  }
  return a.tape->record(std::move(y), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t n = 0; n < N; ++n) {
      if (t.requires_grad(a)) {
        auto& da = t.grad_buffer(a);
        for (std::size_t i = 0; i < Ca * P; ++i) da[n * Ca * P + i] += g[n * (Ca + Cb) * P + i];
      }
      if (t.requires_grad(b)) {
        auto& db = t.grad_buffer(b);
        for (std::size_t i = 0; i < Cb * P; ++i)
          db[n * Cb * P + i] += g[n * (Ca + Cb) * P + Ca * P + i];
      }
    }
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return a.tape->record(std::move(y), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return a.tape->record(std::move(y), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    detail::accumulate(t, a, g);
    detail::accumulate(t, b, g, T{-1});
  });
}

/// alpha * x + beta, elementwise with scalar constants.
template <class T>
Var<T> affine(Var<T> x, T alpha, T beta) {
  Tensor<T> y = x.value();
  for (auto& v : y.values()) v = alpha * v + beta;
  return x.tape->record(std::move(y), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    detail::accumulate(t, x, g, alpha);
  });
}

/// Per batch item affine map y[n] = scale[n] * x[n] + shift[n] (constants).
template <class T>
Var<T> affine_per_item(Var<T> x, std::vector<T> scale, std::vector<T> shift) {
  const auto& xv = x.value();
  const std::size_t N = xv.dim(0), per = xv.size() / N;
  if (scale.size() != N || shift.size() != N)
    throw ShapeError("affine_per_item: coefficient count must equal batch size");
  Tensor<T> y(xv.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < per; ++i) y[n * per + i] = scale[n] * xv[n * per + i] + shift[n];
  return x.tape->record(std::move(y), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    auto& dx = t.grad_buffer(x);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < per; ++i) dx[n * per + i] += scale[n] * g[n * per + i];
  });
}

/// Mean over the batch axis: (N, ...) -> (1, ...).
template <class T>
Var<T> batch_mean(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t N = xv.dim(0), per = xv.size() / N;
  Shape s = xv.shape();
  s[0] = 1;
  Tensor<T> y(s);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < per; ++i) y[i] += xv[n * per + i];
  for (auto& v : y.values()) v /= static_cast<T>(N);
  return x.tape->record(std::move(y), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    auto& dx = t.grad_buffer(x);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < per; ++i) dx[n * per + i] += g[i] / static_cast<T>(N);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(Var<T> x) {
  T acc{0};
  for (T v : x.value().values()) acc += v;
  return x.tape->record(Tensor<T>({1}, acc), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    auto& dx = t.grad_buffer(x);
    for (auto& v : dx.values()) v += g[0];
  });
}

/// Mean of squared differences.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  const auto& av = a.value();
  const auto& bv = b.value();
  T acc{0};
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - bv[i];
    acc += d * d;
  }
  const T n = static_cast<T>(av.size());
  return a.tape->record(Tensor<T>({1}, acc / n), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& x = t.value(a);
    const auto& y = t.value(b);
    const T s = T{2} * g[0] / n;
    if (t.requires_grad(a)) {
      auto& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < x.size(); ++i) da[i] += s * (x[i] - y[i]);
    }
    if (t.requires_grad(b)) {
      auto& db = t.grad_buffer(b);
      for (std::size_t i = 0; i < x.size(); ++i) db[i] -= s * (x[i] - y[i]);
    }
  });
}

/// Weighted sum of scalar nodes.
template <class T>
Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>& terms) {
  if (terms.empty()) throw std::invalid_argument("weighted_sum: no terms");
  auto& tape = *terms.front().second.tape;
  T acc{0};
  for (const auto& [w, v] : terms) {
    if (v.value().size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    acc += w * v.scalar();
  }
  std::vector<Var<T>> inputs;
  for (const auto& term : terms) inputs.push_back(term.second);
  return tape.record(Tensor<T>({1}, acc), inputs, [terms](Tape<T>& t, const Tensor<T>& g) {
    for (const auto& [w, v] : terms) detail::accumulate(t, v, g, w);
  });
}

}  // namespace s2s::ad
