#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "smoothcert/error.hpp"
#include "smoothcert/tensor.hpp"

namespace smoothcert {

template <typename T>
struct LossResult {
  double loss = 0.0;       // mean over the batch
  std::size_t correct = 0;  // argmax hits, for train accuracy
  BasicTensor<T> grad;     // d loss / d logits
};

// Mean softmax cross-entropy over logits [N, K], computed in double.
template <typename T>
LossResult<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                    std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross-entropy expects [N,K] logits with N labels, got " +
                     shape_str(logits.shape()) + " and " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  LossResult<T> out;
  out.grad = BasicTensor<T>(logits.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw Error("label " + std::to_string(label) + " outside [0, " +
                  std::to_string(k) + ")");
    }
    const T* z = logits.ptr() + i * k;
    const double zmax = *std::max_element(z, z + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[j] - zmax);
    const double lse = zmax + std::log(denom);
    total += lse - z[label];
    if (static_cast<std::size_t>(std::max_element(z, z + k) - z) ==
        static_cast<std::size_t>(label)) {
      ++out.correct;
    }
    T* g = out.grad.ptr() + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(z[j] - lse);
      g[j] = static_cast<T>((p - (j == static_cast<std::size_t>(label) ? 1.0 : 0.0)) /
                            static_cast<double>(n));
    }
  }
  out.loss = total / static_cast<double>(n);
  return out;
}

}  // namespace smoothcert
