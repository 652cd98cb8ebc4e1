#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vpcsv/rng.hpp"
#include "vpcsv/tensor.hpp"

namespace vpcsv {

/// Ordered, named collection of trainable leaves.
template <typename Scalar>
class ParameterSet {
 public:
  Tensor<Scalar>& add(std::string name, Tensor<Scalar> tensor);
  Tensor<Scalar>& at(const std::string& name);
  const Tensor<Scalar>& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  Index total_numel() const;

 private:
  std::vector<std::pair<std::string, Tensor<Scalar>>> entries_;
};

/// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))
template <typename Scalar>
Tensor<Scalar> glorot_uniform(Shape shape, Index fan_in, Index fan_out, Rng& rng);
template <typename Scalar>
Tensor<Scalar> uniform_init(Shape shape, double bound, Rng& rng);

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& what, std::string param) : std::runtime_error(what), param_(std::move(param)) {}
  const std::string& parameter() const { return param_; }

 private:
  std::string param_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  std::int64_t step = 0;
  std::vector<VectorX<Scalar>> m;
  std::vector<VectorX<Scalar>> v;
  AdamConfig config;
};

/// One bias-corrected Adam update from the accumulated gradients. Throws
/// NonFiniteError (naming the parameter) before touching anything if any
/// gradient is NaN/Inf.
template <typename Scalar>
void adam_step(ParameterSet<Scalar>& params, AdamState<Scalar>& state);

/// Scales all gradients so their global L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <typename Scalar>
double clip_grad_norm(ParameterSet<Scalar>& params, double max_norm);

}  // namespace vpcsv
