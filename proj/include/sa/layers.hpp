#pragma once

#include <string>

#include "sa/lora.hpp"
#include "sa/params.hpp"
#include "sa/rng.hpp"
#include "sa/tape.hpp"

namespace sa {

// He-initialized conv weight [out, in*k*k].
template <typename T>
TensorT<T> conv_init(int in, int out, int k, Rng& rng) {
  TensorT<T> w({out, in * k * k});
  double std = std::sqrt(2.0 / (in * k * k));
  for (auto& v : w.data) v = static_cast<T>(rng.normal(0.0, std));
  return w;
}

// Plain trainable conv layer.
template <typename T>
struct ConvLayer {
  TensorT<T> w;  // [out, in*k*k]
  TensorT<T> b;  // [out]
  int k = 3, stride = 1, pad = 1;

  static ConvLayer init(int in, int out, int k, int stride, Rng& rng) {
    ConvLayer l;
    l.w = conv_init<T>(in, out, k, rng);
    l.b = TensorT<T>({out});
    l.k = k;
    l.stride = stride;
    l.pad = k / 2;
    return l;
  }

  // Parameters used several times on one tape (recurrent layers) must map to
  // a single leaf so the read-back gradient covers every use.
  int forward(Tape<T>& tape, int x, Binds<T>* binds, bool trainable) const {
    int wn = -1, bn = -1;
    if (binds && trainable) {
      wn = binds->node_of(&w);
      bn = binds->node_of(&b);
    }
    if (wn < 0) {
      wn = tape.leaf(w, trainable);
      if (binds && trainable) binds->bind(&w, wn);
    }
    if (bn < 0) {
      bn = tape.leaf(b, trainable);
      if (binds && trainable) binds->bind(&b, bn);
    }
    return tape.conv2d(x, wn, bn, k, stride, pad);
  }

  void collect(ParamList<T>& out, const std::string& prefix, bool trainable) {
    out.push_back({prefix + ".w", &w, trainable, false});
    out.push_back({prefix + ".b", &b, trainable, false});
  }
};

// Conv layer with a frozen base weight and a LoRA adapter on top. The bias is
// part of the frozen base.
template <typename T>
struct LoraConvLayer {
  LoraAdapter<T> ad;
  TensorT<T> b;
  int k = 3, stride = 1, pad = 1;

  static LoraConvLayer init(int in, int out, int k, int stride, int rank, Rng& rng) {
    LoraConvLayer l;
    l.ad = LoraAdapter<T>::init(conv_init<T>(in, out, k, rng), rank, rng);
    l.b = TensorT<T>({out});
    for (auto& v : l.b.data) v = static_cast<T>(rng.normal(0.0, 0.01));
    l.k = k;
    l.stride = stride;
    l.pad = k / 2;
    return l;
  }

  int forward(Tape<T>& tape, int x, Binds<T>* binds, bool train_lora) const {
    int wn = ad.weight_node(tape, train_lora ? binds : nullptr, train_lora);
    int bn = tape.leaf(b, false);
    return tape.conv2d(x, wn, bn, k, stride, pad);
  }
};

}  // namespace sa
