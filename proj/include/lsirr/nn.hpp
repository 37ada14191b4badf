// Parameter storage keyed by stable path strings, plus the convolutional
// building blocks the network is assembled from.
#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>

#include "lsirr/ops.hpp"
#include "lsirr/random.hpp"

namespace lsirr::nn {

inline constexpr double kInitStd = 0.02;
inline constexpr double kPreluInit = 0.25;

template <class T>
class ParamStore {
 public:
  using Map = std::map<std::string, ad::Var<T>>;

  ad::Var<T>& create(const std::string& path, Tensor<T> init, bool trainable = true) {
    if (params_.count(path)) throw std::logic_error("duplicate parameter path " + path);
    auto [it, ok] = params_.emplace(path, ad::Var<T>(std::move(init), trainable));
    return it->second;
  }

  const ad::Var<T>& operator[](const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + path);
    return it->second;
  }
  ad::Var<T>& at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + path);
    return it->second;
  }

  bool contains(const std::string& path) const { return params_.count(path) != 0; }
  const Map& entries() const { return params_; }
  Map& entries() { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.value().size();
    return n;
  }
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_)
      if (v.requires_grad()) n += v.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

 private:
  Map params_;
};

template <class T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev = kInitStd) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <class T>
void declare_conv(ParamStore<T>& ps, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout,
                  std::size_t k) {
  ps.create(name + "/w", normal_tensor<T>({cout, cin, k, k}, rng));
  ps.create(name + "/b", Tensor<T>(Shape{cout}));
}

template <class T>
ad::Var<T> conv(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x, std::size_t stride = 1) {
  return ad::conv2d(x, ps[name + "/w"], ps[name + "/b"], stride, Pad::reflect);
}

template <class T>
void declare_prelu(ParamStore<T>& ps, const std::string& name, std::size_t channels) {
  ps.create(name + "/slope", Tensor<T>(Shape{channels}, static_cast<T>(kPreluInit)));
}

template <class T>
ad::Var<T> prelu(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x) {
  return ad::prelu(x, ps[name + "/slope"]);
}

inline std::size_t reduced(std::size_t channels, std::size_t reduction) {
  return std::max<std::size_t>(1, channels / reduction);
}

// Squeeze-and-excitation residual block:
//   y = conv -> PReLU -> conv, y *= sigmoid(fc2(relu(fc1(avgpool(y))))), out = PReLU(x + y).
template <class T>
void declare_se_block(ParamStore<T>& ps, Rng& rng, const std::string& name, std::size_t channels,
                      std::size_t reduction = 4) {
  declare_conv(ps, rng, name + "/conv1", channels, channels, 3);
  declare_prelu(ps, name + "/act1", channels);
  declare_conv(ps, rng, name + "/conv2", channels, channels, 3);
  declare_conv(ps, rng, name + "/se_fc1", channels, reduced(channels, reduction), 1);
  declare_conv(ps, rng, name + "/se_fc2", reduced(channels, reduction), channels, 1);
  declare_prelu(ps, name + "/act_out", channels);
}

template <class T>
ad::Var<T> se_block(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x) {
  auto y = conv(ps, name + "/conv2", prelu(ps, name + "/act1", conv(ps, name + "/conv1", x)));
  auto gate = ad::sigmoid(conv(ps, name + "/se_fc2", ad::relu(conv(ps, name + "/se_fc1", ad::global_avg_pool(y)))));
  return prelu(ps, name + "/act_out", ad::add(x, ad::mul_channels(y, gate)));
}

template <class T>
struct CbamGates {
  Tensor<T> channel;  // [C,1,1]
  Tensor<T> spatial;  // [1,H,W]
};

// Channel attention (shared MLP over avg- and max-pooled descriptors) followed
// by spatial attention (7x7 conv over channel mean and max).
template <class T>
void declare_cbam(ParamStore<T>& ps, Rng& rng, const std::string& name, std::size_t channels,
                  std::size_t reduction = 4, std::size_t spatial_kernel = 7) {
  declare_conv(ps, rng, name + "/mlp1", channels, reduced(channels, reduction), 1);
  declare_conv(ps, rng, name + "/mlp2", reduced(channels, reduction), channels, 1);
  declare_conv(ps, rng, name + "/spatial", 2, 1, spatial_kernel);
}

template <class T>
ad::Var<T> cbam(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x,
                CbamGates<T>* gates = nullptr) {
  auto mlp = [&](const ad::Var<T>& d) { return conv(ps, name + "/mlp2", ad::relu(conv(ps, name + "/mlp1", d))); };
  auto ch_gate = ad::sigmoid(ad::add(mlp(ad::global_avg_pool(x)), mlp(ad::global_max_pool(x))));
  auto x1 = ad::mul_channels(x, ch_gate);
  auto sp_gate = ad::sigmoid(conv(ps, name + "/spatial", ad::concat<T>({ad::channel_mean(x1), ad::channel_max(x1)})));
  if (gates) *gates = {ch_gate.value(), sp_gate.value()};
  return ad::mul_plane(x1, sp_gate);
}

template <class T>
struct RecurrentState {
  ad::Var<T> hidden;
  ad::Var<T> cell;
  bool empty() const { return !hidden.defined(); }
};

// Convolutional LSTM cell with input, forget and output gates.
template <class T>
void declare_conv_lstm(ParamStore<T>& ps, Rng& rng, const std::string& name, std::size_t input_channels,
                       std::size_t hidden_channels) {
  declare_conv(ps, rng, name + "/gates", input_channels + hidden_channels, 4 * hidden_channels, 3);
}

template <class T>
RecurrentState<T> conv_lstm_step(const ParamStore<T>& ps, const std::string& name, const ad::Var<T>& x,
                                 const RecurrentState<T>& state, std::size_t hidden_channels) {
  const auto& xv = x.value();
  RecurrentState<T> prev = state;
  if (prev.empty()) {
    prev.hidden = ad::constant(Tensor<T>::chw(hidden_channels, xv.height(), xv.width()));
    prev.cell = ad::constant(Tensor<T>::chw(hidden_channels, xv.height(), xv.width()));
  }
  auto gates = conv(ps, name + "/gates", ad::concat<T>({x, prev.hidden}));
  const std::size_t h = hidden_channels;
  auto in_gate = ad::sigmoid(ad::slice_channels(gates, 0, h));
  auto forget_gate = ad::sigmoid(ad::slice_channels(gates, h, 2 * h));
  auto out_gate = ad::sigmoid(ad::slice_channels(gates, 2 * h, 3 * h));
  auto candidate = ad::tanh(ad::slice_channels(gates, 3 * h, 4 * h));
  auto cell = ad::add(ad::mul(forget_gate, prev.cell), ad::mul(in_gate, candidate));
  auto hidden = ad::mul(out_gate, ad::tanh(cell));
  return {hidden, cell};
}

}  // namespace lsirr::nn
