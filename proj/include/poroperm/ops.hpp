#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "poroperm/graph.hpp"

namespace poroperm {

enum class Activation { relu, sigmoid, tanh, linear };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Same-padded, stride-1 cross-correlation: input C×H×W, kernels F×C×kh×kw,
/// bias F. Output F×H×W.
template <typename T>
Var conv2d(Graph<T>& g, Var input, Var kernels, Var bias);

/// x·Wᵀ + b for x of shape [n] or [rows, n], W of shape [m, n], b of shape [m].
template <typename T>
Var linear(Graph<T>& g, Var x, Var weight, Var bias);

template <typename T>
Var activate(Graph<T>& g, Var x, Activation act);

template <typename T>
Var dense(Graph<T>& g, Var x, Var weight, Var bias, Activation act) {
  return activate(g, linear(g, x, weight, bias), act);
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b);

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape);

/// Row i of the output is row perm[i] of x (x is rows × cols).
template <typename T>
Var permute_rows(Graph<T>& g, Var x, std::span<const std::size_t> perm);

/// Per-row normalization of x (rows × d) with learned gain and offset of shape [d].
template <typename T>
Var layer_norm(Graph<T>& g, Var x, Var gain, Var offset, double eps = 1e-5);

struct AttentionParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Softmax weights of one attention call, heads × T × T.
template <typename T>
struct AttentionProbe {
  Tensor<T> weights;
};

/// Scaled dot-product self-attention with `heads` heads over X (T × d),
/// heads concatenated and projected by Wo.
template <typename T>
Var multi_head_attention(Graph<T>& g, Var x, const AttentionParams& p, std::size_t heads,
                         AttentionProbe<T>* probe = nullptr);

/// Mean squared error against a constant target, over `mask` indices when given.
template <typename T>
Var mse(Graph<T>& g, Var pred, const Tensor<T>& target, std::optional<std::span<const std::uint32_t>> mask = {});

}  // namespace poroperm
