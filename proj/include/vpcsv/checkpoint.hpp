#pragma once

// Binary checkpoint: the magic "VPCSV1" followed by records until EOF. Each
// record is u32 name length, name bytes, u32 rank, rank x u32 dims, then
// product(dims) float32 values. All integers and floats are little-endian.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "vpcsv/optim.hpp"
#include "vpcsv/tensor.hpp"

namespace vpcsv {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  Shape shape;
  Eigen::VectorXf values;
};

class Checkpoint {
 public:
  void put(std::string name, Shape shape, Eigen::VectorXf values);
  void put_scalar(std::string name, double value);
  bool contains(const std::string& name) const;
  const NamedArray& get(const std::string& name) const;
  double get_scalar(const std::string& name) const;
  const std::vector<NamedArray>& arrays() const { return arrays_; }

  /// Stores every parameter under prefix + name.
  void put_parameters(const ParameterSet<float>& params, const std::string& prefix = "");
  /// Copies values into matching parameters; shapes must agree exactly.
  void load_parameters(ParameterSet<float>& params, const std::string& prefix = "") const;
  void put_adam(const AdamState<float>& state, const ParameterSet<float>& params);
  void load_adam(AdamState<float>& state, const ParameterSet<float>& params) const;

  /// Written to a temporary file first and renamed, so an existing checkpoint
  /// at `path` survives a failed write.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<NamedArray> arrays_;
};

}  // namespace vpcsv
