#include "vpcsv/optim.hpp"

#include <cmath>

namespace vpcsv {

template <typename Scalar>
Tensor<Scalar>& ParameterSet<Scalar>::add(std::string name, Tensor<Scalar> tensor) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  tensor.set_requires_grad(true);
  entries_.emplace_back(std::move(name), std::move(tensor));
  return entries_.back().second;
}

template <typename Scalar>
Tensor<Scalar>& ParameterSet<Scalar>::at(const std::string& name) {
  for (auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

template <typename Scalar>
const Tensor<Scalar>& ParameterSet<Scalar>::at(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

template <typename Scalar>
bool ParameterSet<Scalar>::contains(const std::string& name) const {
  for (const auto& entry : entries_) {
    if (entry.first == name) return true;
  }
  return false;
}

template <typename Scalar>
void ParameterSet<Scalar>::zero_grad() {
  for (auto& entry : entries_) entry.second.zero_grad();
}

template <typename Scalar>
Index ParameterSet<Scalar>::total_numel() const {
  Index n = 0;
  for (const auto& entry : entries_) n += entry.second.numel();
  return n;
}

template <typename Scalar>
Tensor<Scalar> uniform_init(Shape shape, double bound, Rng& rng) {
  VectorX<Scalar> data(shape_numel(shape));
  for (Index i = 0; i < data.size(); ++i) data[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return Tensor<Scalar>::from_data(std::move(shape), std::move(data), true);
}

template <typename Scalar>
Tensor<Scalar> glorot_uniform(Shape shape, Index fan_in, Index fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init<Scalar>(std::move(shape), bound, rng);
}

template <typename Scalar>
void adam_step(ParameterSet<Scalar>& params, AdamState<Scalar>& state) {
  if (state.m.empty()) {
    for (const auto& [name, t] : params) {
      state.m.push_back(VectorX<Scalar>::Zero(t.numel()));
      state.v.push_back(VectorX<Scalar>::Zero(t.numel()));
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                                std::to_string(params.size()));
  }
  std::size_t k = 0;
  for (const auto& [name, t] : params) {
    if (state.m[k].size() != t.numel() || state.v[k].size() != t.numel()) {
      throw std::invalid_argument("adam_step: moment length mismatch for " + name);
    }
    if (t.has_grad() && !t.grad().allFinite()) {
      throw NonFiniteError("adam_step: non-finite gradient in parameter " + name, name);
    }
    ++k;
  }

  const auto& c = state.config;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  k = 0;
  for (auto& [name, t] : params) {
    auto& m = state.m[k];
    auto& v = state.v[k];
    ++k;
    if (!t.has_grad()) {
      // Zero gradient still decays the moments.
      m *= static_cast<Scalar>(c.beta1);
      v *= static_cast<Scalar>(c.beta2);
    } else {
      const VectorX<Scalar> g = t.grad();
      m = static_cast<Scalar>(c.beta1) * m + static_cast<Scalar>(1.0 - c.beta1) * g;
      v = static_cast<Scalar>(c.beta2) * v + static_cast<Scalar>(1.0 - c.beta2) * g.cwiseAbs2();
    }
    auto& w = t.data();
    for (Index i = 0; i < w.size(); ++i) {
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= static_cast<Scalar>(c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

template <typename Scalar>
double clip_grad_norm(ParameterSet<Scalar>& params, double max_norm) {
  double total = 0.0;
  for (const auto& [name, t] : params) {
    if (t.has_grad()) total += t.grad().template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(total);
  if (std::isfinite(norm) && norm > max_norm && norm > 0.0) {
    const auto f = static_cast<Scalar>(max_norm / norm);
    for (auto& [name, t] : params) {
      if (t.has_grad()) t.mutable_grad() *= f;
    }
  }
  return norm;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template Tensor<float> uniform_init(Shape, double, Rng&);
template Tensor<double> uniform_init(Shape, double, Rng&);
template Tensor<float> glorot_uniform(Shape, Index, Index, Rng&);
template Tensor<double> glorot_uniform(Shape, Index, Index, Rng&);
template void adam_step(ParameterSet<float>&, AdamState<float>&);
template void adam_step(ParameterSet<double>&, AdamState<double>&);
template double clip_grad_norm(ParameterSet<float>&, double);
template double clip_grad_norm(ParameterSet<double>&, double);

}  // namespace vpcsv
