// Image tower: a small convolutional network mapping a CxHxW image to a
// d-dimensional embedding. Layer kinds: convolution (cross-correlation, no
// kernel flip), max pooling, across-channel local contrast normalization, and
// fully-connected. Forward keeps the activation trail needed for an exact
// backward pass; everything is templated on the scalar type so the
// finite-difference checks can run the same code in double precision.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "csm/errors.hpp"
#include "csm/random.hpp"
#include "csm/tensor.hpp"
#include "json.hpp"

namespace csm {

struct ConvSpec {
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  bool relu = true;
};

struct MaxPoolSpec {
  int window = 2;
  int stride = 2;
};

// b_c = a_c / (k + alpha * sum_{|c'-c| <= (n-1)/2} a_{c'}^2)^beta
struct LcnSpec {
  int n = 5;
  double k = 2.0;
  double alpha = 1e-4;
  double beta = 0.75;
};

struct FcSpec {
  int out_dim = 1;
  bool relu = false;
};

using LayerSpec = std::variant<ConvSpec, MaxPoolSpec, LcnSpec, FcSpec>;

struct NetworkSpec {
  std::vector<LayerSpec> layers;
};

inline const char* layer_kind_name(const LayerSpec& layer) {
  if (std::holds_alternative<ConvSpec>(layer)) return "conv";
  if (std::holds_alternative<MaxPoolSpec>(layer)) return "maxpool";
  if (std::holds_alternative<LcnSpec>(layer)) return "lcn";
  return "fc";
}

namespace detail {
inline int conv_extent(int in, int pad, int kernel, int stride) {
  return (in + 2 * pad - kernel) / stride + 1;
}

inline std::string layer_label(std::size_t index, const LayerSpec& layer) {
  return "layer " + std::to_string(index) + " (" + layer_kind_name(layer) + ")";
}
}  // namespace detail

// Shapes through the network, acts[0] = input shape. Throws ConfigError
// naming the offending layer when the spec cannot run on the input shape.
inline std::vector<std::vector<int>> resolve_shapes(const NetworkSpec& spec,
                                                    const std::vector<int>& input_shape) {
  if (input_shape.size() != 3 || input_shape[0] < 1 || input_shape[1] < 1 || input_shape[2] < 1) {
    throw ConfigError("network input shape must be channels x height x width, got " +
                      shape_string(input_shape));
  }
  std::vector<std::vector<int>> shapes{input_shape};
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const auto& layer = spec.layers[li];
    const auto& in = shapes.back();
    const auto label = detail::layer_label(li, layer);
    if (const auto* conv = std::get_if<ConvSpec>(&layer)) {
      if (in.size() != 3) throw ConfigError(label + ": requires a channels x height x width input");
      if (conv->out_channels < 1 || conv->kernel < 1 || conv->stride < 1 || conv->padding < 0) {
        throw ConfigError(label + ": invalid geometry");
      }
      const int oh = detail::conv_extent(in[1], conv->padding, conv->kernel, conv->stride);
      const int ow = detail::conv_extent(in[2], conv->padding, conv->kernel, conv->stride);
      if (oh < 1 || ow < 1) throw ConfigError(label + ": kernel does not fit the input");
      shapes.push_back({conv->out_channels, oh, ow});
    } else if (const auto* pool = std::get_if<MaxPoolSpec>(&layer)) {
      if (in.size() != 3) throw ConfigError(label + ": requires a channels x height x width input");
      if (pool->window < 1 || pool->stride < 1) throw ConfigError(label + ": invalid geometry");
      const int oh = detail::conv_extent(in[1], 0, pool->window, pool->stride);
      const int ow = detail::conv_extent(in[2], 0, pool->window, pool->stride);
      if (oh < 1 || ow < 1) throw ConfigError(label + ": window does not fit the input");
      shapes.push_back({in[0], oh, ow});
    } else if (const auto* lcn = std::get_if<LcnSpec>(&layer)) {
      if (in.size() != 3) throw ConfigError(label + ": requires a channels x height x width input");
      if (lcn->n < 1 || lcn->k <= 0.0 || lcn->beta <= 0.0) {
        throw ConfigError(label + ": invalid parameters");
      }
      shapes.push_back(in);
    } else {
      const auto& fc = std::get<FcSpec>(layer);
      if (fc.out_dim < 1) throw ConfigError(label + ": output dimension must be >= 1");
      shapes.push_back({fc.out_dim});
    }
  }
  return shapes;
}

inline int output_dim(const NetworkSpec& spec, const std::vector<int>& input_shape) {
  return static_cast<int>(numel(resolve_shapes(spec, input_shape).back()));
}

template <typename T>
struct LayerParams {
  Tensor<T> weight;
  Tensor<T> bias;

  bool empty() const { return weight.size() == 0 && bias.size() == 0; }
};

template <typename T>
struct NetworkParams {
  std::vector<LayerParams<T>> layers;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  // Visits every parameter tensor, weights before biases, layers in order.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (auto& l : layers) {
      if (l.weight.size()) fn(l.weight);
      if (l.bias.size()) fn(l.bias);
    }
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    for (const auto& l : layers) {
      if (l.weight.size()) fn(l.weight);
      if (l.bias.size()) fn(l.bias);
    }
  }

  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out;
    out.layers.reserve(layers.size());
    for (const auto& l : layers) {
      out.layers.push_back({l.weight.template cast<U>(), l.bias.template cast<U>()});
    }
    return out;
  }
};

enum class InitScheme {
  kFixedStd,  // every weight ~ N(0, std^2)
  kHe,        // per-layer std = sqrt(2 / fan_in), final linear layer sqrt(1 / fan_in)
};

inline int layer_fan_in(const LayerSpec& layer, const std::vector<int>& in_shape) {
  if (const auto* conv = std::get_if<ConvSpec>(&layer)) {
    return in_shape[0] * conv->kernel * conv->kernel;
  }
  if (std::holds_alternative<FcSpec>(layer)) {
    return static_cast<int>(numel(in_shape));
  }
  return 0;
}

// Gaussian weights, zero biases, deterministic per seed. Each layer draws
// from its own derived stream so parameter values do not depend on the
// draw order of other layers.
template <typename T>
NetworkParams<T> init_params(const NetworkSpec& spec, const std::vector<int>& input_shape,
                             std::uint64_t seed, InitScheme scheme = InitScheme::kFixedStd,
                             double weight_std = 0.01) {
  const auto shapes = resolve_shapes(spec, input_shape);
  NetworkParams<T> params;
  params.layers.resize(spec.layers.size());
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const auto& layer = spec.layers[li];
    std::vector<int> wshape;
    int bias_len = 0;
    if (const auto* conv = std::get_if<ConvSpec>(&layer)) {
      wshape = {conv->out_channels, shapes[li][0], conv->kernel, conv->kernel};
      bias_len = conv->out_channels;
    } else if (const auto* fc = std::get_if<FcSpec>(&layer)) {
      wshape = {fc->out_dim, static_cast<int>(numel(shapes[li]))};
      bias_len = fc->out_dim;
    } else {
      continue;
    }
    double std_dev = weight_std;
    if (scheme == InitScheme::kHe) {
      const int fan_in = layer_fan_in(layer, shapes[li]);
      const bool last_linear = [&] {
        const auto* fc = std::get_if<FcSpec>(&layer);
        return fc != nullptr && !fc->relu;
      }();
      std_dev = std::sqrt((last_linear ? 1.0 : 2.0) / static_cast<double>(fan_in));
    }
    Rng rng(mix_seed(seed, stream_tag("init"), li));
    Tensor<T> w(wshape);
    for (auto& v : w.data) v = static_cast<T>(rng.gaussian(0.0, std_dev));
    params.layers[li] = {std::move(w), Tensor<T>({bias_len})};
  }
  return params;
}

template <typename T>
struct ActivationCache {
  std::vector<Tensor<T>> acts;                      // acts[0] = input
  std::vector<std::vector<std::int32_t>> pool_argmax;  // per layer, input linear indices
  std::vector<Tensor<T>> lcn_scale;                 // per layer, the (k + alpha*sum) tensor
  std::uint64_t signature = 0;
};

namespace detail {

inline std::uint64_t cache_signature(const NetworkSpec& spec, const std::vector<int>& in_shape) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](std::uint64_t v) { h = splitmix64(h ^ v); };
  for (int d : in_shape) mix(static_cast<std::uint64_t>(d));
  for (const auto& layer : spec.layers) {
    mix(layer.index());
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      mix(c->out_channels);
      mix(c->kernel);
      mix(c->stride);
      mix(c->padding);
      mix(c->relu);
    } else if (const auto* p = std::get_if<MaxPoolSpec>(&layer)) {
      mix(p->window);
      mix(p->stride);
    } else if (const auto* l = std::get_if<LcnSpec>(&layer)) {
      mix(static_cast<std::uint64_t>(l->n));
    } else {
      const auto& fc = std::get<FcSpec>(layer);
      mix(fc.out_dim);
      mix(fc.relu);
    }
  }
  return h;
}

template <typename T>
void conv_forward(const ConvSpec& spec, const Tensor<T>& in, const LayerParams<T>& p,
                  Tensor<T>& out) {
  const int ic_n = in.shape[0], ih = in.shape[1], iw = in.shape[2];
  const int oc_n = out.shape[0], oh = out.shape[1], ow = out.shape[2];
  const int k = spec.kernel, s = spec.stride, pad = spec.padding;
  for (int oc = 0; oc < oc_n; ++oc) {
    const T b = p.bias[oc];
    T* oplane = out.data.data() + static_cast<std::size_t>(oc) * oh * ow;
    for (int i = 0; i < oh * ow; ++i) oplane[i] = b;
  }
  for (int oc = 0; oc < oc_n; ++oc) {
    T* oplane = out.data.data() + static_cast<std::size_t>(oc) * oh * ow;
    for (int ic = 0; ic < ic_n; ++ic) {
      const T* iplane = in.data.data() + static_cast<std::size_t>(ic) * ih * iw;
      const T* wk = p.weight.data.data() +
                    (static_cast<std::size_t>(oc) * ic_n + ic) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const T w = wk[ky * k + kx];
          if (w == T(0)) continue;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * s - pad + ky;
            if (iy < 0 || iy >= ih) continue;
            const T* irow = iplane + static_cast<std::size_t>(iy) * iw;
            T* orow = oplane + static_cast<std::size_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * s - pad + kx;
              if (ix < 0 || ix >= iw) continue;
              orow[ox] += w * irow[ix];
            }
          }
        }
      }
    }
  }
  if (spec.relu) {
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
  }
}

template <typename T>
void conv_backward(const ConvSpec& spec, const Tensor<T>& in, const LayerParams<T>& p,
                   const Tensor<T>& out, const Tensor<T>& grad_out, LayerParams<T>& grad_p,
                   Tensor<T>* grad_in) {
  const int ic_n = in.shape[0], ih = in.shape[1], iw = in.shape[2];
  const int oc_n = out.shape[0], oh = out.shape[1], ow = out.shape[2];
  const int k = spec.kernel, s = spec.stride, pad = spec.padding;
  // ReLU gate; out == 0 routes nothing, matching the forward subgradient.
  Tensor<T> gated;
  const Tensor<T>* g = &grad_out;
  if (spec.relu) {
    gated = grad_out;
    for (std::size_t i = 0; i < gated.data.size(); ++i) {
      if (out.data[i] <= T(0)) gated.data[i] = T(0);
    }
    g = &gated;
  }
  for (int oc = 0; oc < oc_n; ++oc) {
    const T* gplane = g->data.data() + static_cast<std::size_t>(oc) * oh * ow;
    T acc = T(0);
    for (int i = 0; i < oh * ow; ++i) acc += gplane[i];
    grad_p.bias[oc] += acc;
  }
  for (int oc = 0; oc < oc_n; ++oc) {
    const T* gplane = g->data.data() + static_cast<std::size_t>(oc) * oh * ow;
    for (int ic = 0; ic < ic_n; ++ic) {
      const T* iplane = in.data.data() + static_cast<std::size_t>(ic) * ih * iw;
      T* giplane =
          grad_in ? grad_in->data.data() + static_cast<std::size_t>(ic) * ih * iw : nullptr;
      const std::size_t wbase = (static_cast<std::size_t>(oc) * ic_n + ic) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const T w = p.weight[wbase + ky * k + kx];
          T wgrad = T(0);
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * s - pad + ky;
            if (iy < 0 || iy >= ih) continue;
            const T* irow = iplane + static_cast<std::size_t>(iy) * iw;
            T* girow = giplane ? giplane + static_cast<std::size_t>(iy) * iw : nullptr;
            const T* grow = gplane + static_cast<std::size_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * s - pad + kx;
              if (ix < 0 || ix >= iw) continue;
              const T gv = grow[ox];
              wgrad += gv * irow[ix];
              if (girow) girow[ix] += w * gv;
            }
          }
          grad_p.weight[wbase + ky * k + kx] += wgrad;
        }
      }
    }
  }
}

template <typename T>
void maxpool_forward(const MaxPoolSpec& spec, const Tensor<T>& in, Tensor<T>& out,
                     std::vector<std::int32_t>& argmax) {
  const int c_n = in.shape[0], ih = in.shape[1], iw = in.shape[2];
  const int oh = out.shape[1], ow = out.shape[2];
  argmax.resize(out.size());
  std::size_t oi = 0;
  for (int c = 0; c < c_n; ++c) {
    const T* iplane = in.data.data() + static_cast<std::size_t>(c) * ih * iw;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++oi) {
        T best = -std::numeric_limits<T>::infinity();
        std::int32_t best_idx = -1;
        // First occurrence in row-major window order wins ties.
        for (int ky = 0; ky < spec.window; ++ky) {
          const int iy = oy * spec.stride + ky;
          for (int kx = 0; kx < spec.window; ++kx) {
            const int ix = ox * spec.stride + kx;
            const T v = iplane[iy * iw + ix];
            if (v > best) {
              best = v;
              best_idx = static_cast<std::int32_t>(c * ih * iw + iy * iw + ix);
            }
          }
        }
        out.data[oi] = best;
        argmax[oi] = best_idx;
      }
    }
  }
}

template <typename T>
void maxpool_backward(const Tensor<T>& grad_out, const std::vector<std::int32_t>& argmax,
                      Tensor<T>& grad_in) {
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    grad_in.data[argmax[i]] += grad_out.data[i];
  }
}

template <typename T>
void lcn_forward(const LcnSpec& spec, const Tensor<T>& in, Tensor<T>& out, Tensor<T>& scale) {
  const int c_n = in.shape[0], h = in.shape[1], w = in.shape[2];
  const int half = (spec.n - 1) / 2;
  scale = Tensor<T>(in.shape);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < c_n; ++c) {
        const int lo = std::max(0, c - half);
        const int hi = std::min(c_n - 1, c + half);
        double sum = 0.0;
        for (int cc = lo; cc <= hi; ++cc) {
          const double a = static_cast<double>(in.at(cc, y, x));
          sum += a * a;
        }
        const double s = spec.k + spec.alpha * sum;
        scale.at(c, y, x) = static_cast<T>(s);
        out.at(c, y, x) =
            static_cast<T>(static_cast<double>(in.at(c, y, x)) * std::pow(s, -spec.beta));
      }
    }
  }
}

// d a_e = g_e * s_e^-beta - 2*alpha*beta * a_e * sum_{c in window(e)} g_c * a_c * s_c^(-beta-1)
// The channel window relation is symmetric, so window(e) equals the set of
// outputs whose normalizer includes a_e.
template <typename T>
void lcn_backward(const LcnSpec& spec, const Tensor<T>& in, const Tensor<T>& scale,
                  const Tensor<T>& grad_out, Tensor<T>& grad_in) {
  const int c_n = in.shape[0], h = in.shape[1], w = in.shape[2];
  const int half = (spec.n - 1) / 2;
  std::vector<double> t(c_n);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < c_n; ++c) {
        const double s = static_cast<double>(scale.at(c, y, x));
        t[c] = static_cast<double>(grad_out.at(c, y, x)) *
               static_cast<double>(in.at(c, y, x)) * std::pow(s, -spec.beta - 1.0);
      }
      for (int e = 0; e < c_n; ++e) {
        const int lo = std::max(0, e - half);
        const int hi = std::min(c_n - 1, e + half);
        double window_sum = 0.0;
        for (int cc = lo; cc <= hi; ++cc) window_sum += t[cc];
        const double se = static_cast<double>(scale.at(e, y, x));
        const double g = static_cast<double>(grad_out.at(e, y, x)) * std::pow(se, -spec.beta) -
                         2.0 * spec.alpha * spec.beta * static_cast<double>(in.at(e, y, x)) *
                             window_sum;
        grad_in.at(e, y, x) += static_cast<T>(g);
      }
    }
  }
}

template <typename T>
void fc_forward(const FcSpec& spec, const Tensor<T>& in, const LayerParams<T>& p, Tensor<T>& out) {
  const int out_dim = out.shape[0];
  const int in_dim = static_cast<int>(in.size());
  const T* x = in.data.data();
  for (int o = 0; o < out_dim; ++o) {
    const T* wrow = p.weight.data.data() + static_cast<std::size_t>(o) * in_dim;
    T acc = p.bias[o];
    for (int i = 0; i < in_dim; ++i) acc += wrow[i] * x[i];
    out.data[o] = spec.relu ? (acc > T(0) ? acc : T(0)) : acc;
  }
}

template <typename T>
void fc_backward(const FcSpec& spec, const Tensor<T>& in, const LayerParams<T>& p,
                 const Tensor<T>& out, const Tensor<T>& grad_out, LayerParams<T>& grad_p,
                 Tensor<T>* grad_in) {
  const int out_dim = out.shape[0];
  const int in_dim = static_cast<int>(in.size());
  const T* x = in.data.data();
  for (int o = 0; o < out_dim; ++o) {
    T gv = grad_out.data[o];
    if (spec.relu && out.data[o] <= T(0)) gv = T(0);
    grad_p.bias[o] += gv;
    T* gw = grad_p.weight.data.data() + static_cast<std::size_t>(o) * in_dim;
    const T* wrow = p.weight.data.data() + static_cast<std::size_t>(o) * in_dim;
    if (gv == T(0)) continue;
    if (grad_in) {
      T* gx = grad_in->data.data();
      for (int i = 0; i < in_dim; ++i) {
        gw[i] += gv * x[i];
        gx[i] += gv * wrow[i];
      }
    } else {
      for (int i = 0; i < in_dim; ++i) gw[i] += gv * x[i];
    }
  }
}

}  // namespace detail

template <typename T>
struct ForwardResult {
  std::vector<T> embedding;
  ActivationCache<T> cache;
};

// Runs the layers in order; throws NumericError naming the layer if a
// non-finite value appears. The returned cache holds the activation trail
// and the pooling/normalization bookkeeping backward needs.
template <typename T>
ForwardResult<T> forward(const NetworkSpec& spec, const NetworkParams<T>& params,
                         const Tensor<T>& image) {
  const auto shapes = resolve_shapes(spec, image.shape);
  if (params.layers.size() != spec.layers.size()) {
    throw ContractError("parameter collection does not match network spec");
  }
  ForwardResult<T> result;
  auto& cache = result.cache;
  cache.acts.reserve(spec.layers.size() + 1);
  cache.acts.push_back(image);
  cache.pool_argmax.resize(spec.layers.size());
  cache.lcn_scale.resize(spec.layers.size());
  cache.signature = detail::cache_signature(spec, image.shape);
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const auto& layer = spec.layers[li];
    const Tensor<T>& in = cache.acts.back();
    Tensor<T> out(shapes[li + 1]);
    if (const auto* conv = std::get_if<ConvSpec>(&layer)) {
      detail::conv_forward(*conv, in, params.layers[li], out);
    } else if (const auto* pool = std::get_if<MaxPoolSpec>(&layer)) {
      detail::maxpool_forward(*pool, in, out, cache.pool_argmax[li]);
    } else if (const auto* lcn = std::get_if<LcnSpec>(&layer)) {
      detail::lcn_forward(*lcn, in, out, cache.lcn_scale[li]);
    } else {
      detail::fc_forward(std::get<FcSpec>(layer), in, params.layers[li], out);
    }
    for (const T& v : out.data) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NumericError("non-finite activation after " + detail::layer_label(li, layer));
      }
    }
    cache.acts.push_back(std::move(out));
  }
  result.embedding = cache.acts.back().data;
  return result;
}

// Exact gradients of (upstream . F(I)) with respect to every weight and bias.
template <typename T>
NetworkParams<T> backward(const NetworkSpec& spec, const NetworkParams<T>& params,
                          const ActivationCache<T>& cache, const std::vector<T>& upstream) {
  if (cache.acts.size() != spec.layers.size() + 1 ||
      cache.signature != detail::cache_signature(spec, cache.acts.front().shape)) {
    throw ContractError("activation cache does not match this network spec");
  }
  if (upstream.size() != cache.acts.back().size()) {
    throw ContractError("upstream gradient length " + std::to_string(upstream.size()) +
                        " does not match output dimension " +
                        std::to_string(cache.acts.back().size()));
  }
  NetworkParams<T> grads;
  grads.layers.resize(spec.layers.size());
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    if (!params.layers[li].empty()) {
      grads.layers[li] = {Tensor<T>(params.layers[li].weight.shape),
                          Tensor<T>(params.layers[li].bias.shape)};
    }
  }
  Tensor<T> grad_out(cache.acts.back().shape);
  grad_out.data.assign(upstream.begin(), upstream.end());
  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const auto& layer = spec.layers[li];
    const Tensor<T>& in = cache.acts[li];
    const Tensor<T>& out = cache.acts[li + 1];
    const bool need_input_grad = li > 0;
    Tensor<T> grad_in;
    if (need_input_grad) grad_in = Tensor<T>(in.shape);
    if (const auto* conv = std::get_if<ConvSpec>(&layer)) {
      detail::conv_backward(*conv, in, params.layers[li], out, grad_out, grads.layers[li],
                            need_input_grad ? &grad_in : nullptr);
    } else if (std::holds_alternative<MaxPoolSpec>(layer)) {
      if (need_input_grad) detail::maxpool_backward(grad_out, cache.pool_argmax[li], grad_in);
    } else if (const auto* lcn = std::get_if<LcnSpec>(&layer)) {
      if (need_input_grad) detail::lcn_backward(*lcn, in, cache.lcn_scale[li], grad_out, grad_in);
    } else {
      const auto& fc = std::get<FcSpec>(layer);
      // FC consumes the flattened view of its input.
      Tensor<T> flat_in = in;
      flat_in.shape = {static_cast<int>(in.size())};
      Tensor<T> flat_grad_in;
      if (need_input_grad) {
        flat_grad_in = Tensor<T>({static_cast<int>(in.size())});
      }
      detail::fc_backward(fc, flat_in, params.layers[li], out, grad_out, grads.layers[li],
                          need_input_grad ? &flat_grad_in : nullptr);
      if (need_input_grad) {
        flat_grad_in.shape = in.shape;
        grad_in = std::move(flat_grad_in);
      }
    }
    if (need_input_grad) grad_out = std::move(grad_in);
  }
  return grads;
}

struct LayerCheck {
  int layer_index = -1;
  std::string kind;
  double max_rel_error = 0.0;
  int params_checked = 0;
  int params_skipped = 0;  // probes rejected as non-differentiable points
};

struct GradCheckReport {
  std::vector<LayerCheck> layers;
  double max_rel_error = 0.0;
  double tolerance = 1e-4;
  bool passed = false;
};

inline double fd_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(std::abs(analytic) + std::abs(numeric), 1e-4);
}

// Central differences at two step sizes. A smooth point yields agreeing
// estimates; disagreement means the probe straddles a kink (ReLU zero,
// pooling argmax flip), where finite differences are meaningless.
struct FdProbe {
  double value = 0.0;
  bool smooth = false;
};

template <typename Objective>
FdProbe fd_probe(Objective&& objective, double& parameter, double h) {
  const double saved = parameter;
  auto central = [&](double step) {
    parameter = saved + step;
    const double fp = objective();
    parameter = saved - step;
    const double fm = objective();
    parameter = saved;
    return (fp - fm) / (2.0 * step);
  };
  const double full = central(h);
  const double half = central(h / 2.0);
  FdProbe probe;
  probe.value = full;
  probe.smooth =
      std::abs(full - half) <= 0.25 * std::max(std::abs(full), std::abs(half)) + 1e-9;
  return probe;
}

// Central finite differences against backward, double precision. Parameters
// are drawn at healthy scales (1/sqrt(fan_in)) so the objective is well
// conditioned; up to max_per_layer entries are probed per parameter tensor.
inline GradCheckReport gradient_check(const NetworkSpec& spec, const std::vector<int>& input_shape,
                                      double tolerance, std::uint64_t seed,
                                      int max_per_layer = 64) {
  const auto shapes = resolve_shapes(spec, input_shape);
  auto params = init_params<double>(spec, input_shape, seed, InitScheme::kHe);
  Rng data_rng(mix_seed(seed, stream_tag("gradcheck-data")));
  Tensor<double> image(input_shape);
  for (auto& v : image.data) v = data_rng.uniform(-1.0, 1.0);
  const int d = static_cast<int>(numel(shapes.back()));
  std::vector<double> upstream(d);
  for (auto& v : upstream) v = data_rng.gaussian();

  auto objective = [&](const NetworkParams<double>& p) {
    auto fwd = forward(spec, p, image);
    double acc = 0.0;
    for (int i = 0; i < d; ++i) acc += upstream[i] * fwd.embedding[i];
    return acc;
  };

  auto fwd = forward(spec, params, image);
  auto analytic = backward(spec, params, fwd.cache, upstream);

  GradCheckReport report;
  report.tolerance = tolerance;
  const double h = 1e-4;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    if (params.layers[li].empty()) continue;
    LayerCheck check;
    check.layer_index = static_cast<int>(li);
    check.kind = layer_kind_name(spec.layers[li]);
    Rng pick(mix_seed(seed, stream_tag("gradcheck-pick"), li));
    auto probe_tensor = [&](Tensor<double>& t, const Tensor<double>& grad) {
      const std::size_t n = t.size();
      std::vector<std::size_t> indices;
      if (static_cast<int>(n) <= max_per_layer) {
        for (std::size_t i = 0; i < n; ++i) indices.push_back(i);
      } else {
        for (int i = 0; i < max_per_layer; ++i) {
          indices.push_back(static_cast<std::size_t>(pick.uniform_below(n)));
        }
      }
      for (std::size_t idx : indices) {
        const auto probe = fd_probe([&] { return objective(params); }, t[idx], h);
        if (!probe.smooth) {
          ++check.params_skipped;
          continue;
        }
        check.max_rel_error = std::max(check.max_rel_error, fd_rel_error(grad[idx], probe.value));
        ++check.params_checked;
      }
    };
    probe_tensor(params.layers[li].weight, analytic.layers[li].weight);
    probe_tensor(params.layers[li].bias, analytic.layers[li].bias);
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.layers.push_back(std::move(check));
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

// Paper-shaped default stack: five convolutions and two fully-connected
// layers, pooling after conv 1, 2, and 5, contrast normalization after the
// first two pools, ReLU everywhere except the output layer.
inline NetworkSpec default_network_spec(int embedding_dim = 64) {
  NetworkSpec spec;
  spec.layers = {
      ConvSpec{8, 5, 1, 2, true},   MaxPoolSpec{2, 2}, LcnSpec{},
      ConvSpec{16, 3, 1, 1, true},  MaxPoolSpec{2, 2}, LcnSpec{},
      ConvSpec{16, 3, 1, 1, true},  ConvSpec{16, 3, 1, 1, true},
      ConvSpec{16, 3, 1, 1, true},  MaxPoolSpec{2, 2},
      FcSpec{128, true},            FcSpec{embedding_dim, false},
  };
  return spec;
}

// --- JSON (de)serialization -------------------------------------------------

inline void to_json(nlohmann::json& j, const NetworkSpec& spec) {
  j = nlohmann::json::array();
  for (const auto& layer : spec.layers) {
    nlohmann::json lj;
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      lj = {{"kind", "conv"},       {"out_channels", c->out_channels}, {"kernel", c->kernel},
            {"stride", c->stride},  {"padding", c->padding},           {"relu", c->relu}};
    } else if (const auto* p = std::get_if<MaxPoolSpec>(&layer)) {
      lj = {{"kind", "maxpool"}, {"window", p->window}, {"stride", p->stride}};
    } else if (const auto* l = std::get_if<LcnSpec>(&layer)) {
      lj = {{"kind", "lcn"}, {"n", l->n}, {"k", l->k}, {"alpha", l->alpha}, {"beta", l->beta}};
    } else {
      const auto& fc = std::get<FcSpec>(layer);
      lj = {{"kind", "fc"}, {"out_dim", fc.out_dim}, {"relu", fc.relu}};
    }
    j.push_back(std::move(lj));
  }
}

inline void from_json(const nlohmann::json& j, NetworkSpec& spec) {
  spec.layers.clear();
  for (const auto& lj : j) {
    const std::string kind = lj.at("kind").get<std::string>();
    if (kind == "conv") {
      ConvSpec c;
      c.out_channels = lj.at("out_channels").get<int>();
      c.kernel = lj.at("kernel").get<int>();
      c.stride = lj.value("stride", 1);
      c.padding = lj.value("padding", 0);
      c.relu = lj.value("relu", true);
      spec.layers.push_back(c);
    } else if (kind == "maxpool") {
      MaxPoolSpec p;
      p.window = lj.at("window").get<int>();
      p.stride = lj.at("stride").get<int>();
      spec.layers.push_back(p);
    } else if (kind == "lcn") {
      LcnSpec l;
      l.n = lj.value("n", 5);
      l.k = lj.value("k", 2.0);
      l.alpha = lj.value("alpha", 1e-4);
      l.beta = lj.value("beta", 0.75);
      spec.layers.push_back(l);
    } else if (kind == "fc") {
      FcSpec f;
      f.out_dim = lj.at("out_dim").get<int>();
      f.relu = lj.value("relu", false);
      spec.layers.push_back(f);
    } else {
      throw ConfigError("unknown layer kind '" + kind + "' in network spec");
    }
  }
}

}  // namespace csm
