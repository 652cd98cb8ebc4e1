#include "vpcsv/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace vpcsv {

namespace {

constexpr char kMagic[] = "VPCSV1";
constexpr std::size_t kMagicLen = 6;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

bool read_u32(std::istream& in, std::uint32_t& v) {
  in.read(reinterpret_cast<char*>(&v), 4);
  return in.gcount() == 4;
}

}  // namespace

void Checkpoint::put(std::string name, Shape shape, Eigen::VectorXf values) {
  if (shape_numel(shape) != values.size()) {
    throw CheckpointError("checkpoint: " + name + " shape " + shape_str(shape) + " does not match data");
  }
  for (auto& a : arrays_) {
    if (a.name == name) {
      a.shape = std::move(shape);
      a.values = std::move(values);
      return;
    }
  }
  arrays_.push_back({std::move(name), std::move(shape), std::move(values)});
}

void Checkpoint::put_scalar(std::string name, double value) {
  put(std::move(name), {1}, Eigen::VectorXf::Constant(1, static_cast<float>(value)));
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return true;
  }
  return false;
}

const NamedArray& Checkpoint::get(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return a;
  }
  throw CheckpointError("checkpoint: missing tensor " + name);
}

double Checkpoint::get_scalar(const std::string& name) const {
  const auto& a = get(name);
  if (a.values.size() != 1) throw CheckpointError("checkpoint: " + name + " is not a scalar");
  return a.values[0];
}

void Checkpoint::put_parameters(const ParameterSet<float>& params, const std::string& prefix) {
  for (const auto& [name, t] : params) put(prefix + name, t.shape(), t.data());
}

void Checkpoint::load_parameters(ParameterSet<float>& params, const std::string& prefix) const {
  for (auto& [name, t] : params) {
    const auto& a = get(prefix + name);
    if (a.shape != t.shape()) {
      throw CheckpointError("checkpoint: " + prefix + name + " has shape " + shape_str(a.shape) + ", model expects " +
                            shape_str(t.shape()));
    }
    t.data() = a.values;
  }
}

void Checkpoint::put_adam(const AdamState<float>& state, const ParameterSet<float>& params) {
  put_scalar("adam/step", static_cast<double>(state.step));
  std::size_t k = 0;
  for (const auto& [name, t] : params) {
    if (k < state.m.size()) {
      put("adam/m/" + name, t.shape(), state.m[k]);
      put("adam/v/" + name, t.shape(), state.v[k]);
    }
    ++k;
  }
}

void Checkpoint::load_adam(AdamState<float>& state, const ParameterSet<float>& params) const {
  state.step = static_cast<std::int64_t>(get_scalar("adam/step"));
  state.m.clear();
  state.v.clear();
  if (state.step == 0) return;
  for (const auto& [name, t] : params) {
    state.m.push_back(get("adam/m/" + name).values);
    state.v.push_back(get("adam/v/" + name).values);
    if (state.m.back().size() != t.numel()) throw CheckpointError("checkpoint: adam moments mismatch for " + name);
  }
}

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write " + tmp.string());
    out.write(kMagic, kMagicLen);
    for (const auto& a : arrays_) {
      write_u32(out, static_cast<std::uint32_t>(a.name.size()));
      out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
      write_u32(out, static_cast<std::uint32_t>(a.shape.size()));
      for (Index d : a.shape) write_u32(out, static_cast<std::uint32_t>(d));
      out.write(reinterpret_cast<const char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * 4));
    }
    if (!out) throw CheckpointError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (in.gcount() != static_cast<std::streamsize>(kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0) {
    throw CheckpointError("checkpoint: bad magic in " + path.string());
  }
  Checkpoint ckpt;
  std::uint32_t name_len = 0;
  while (read_u32(in, name_len)) {
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint32_t rank = 0;
    if (in.gcount() != static_cast<std::streamsize>(name_len) || !read_u32(in, rank) || rank > 8) {
      throw CheckpointError("checkpoint: truncated record header in " + path.string());
    }
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint32_t v = 0;
      if (!read_u32(in, v)) throw CheckpointError("checkpoint: truncated dims in " + path.string());
      d = v;
    }
    Eigen::VectorXf values(shape_numel(shape));
    const auto bytes = static_cast<std::streamsize>(values.size() * 4);
    in.read(reinterpret_cast<char*>(values.data()), bytes);
    if (in.gcount() != bytes) throw CheckpointError("checkpoint: truncated data for " + name + " in " + path.string());
    ckpt.arrays_.push_back({std::move(name), std::move(shape), std::move(values)});
  }
  return ckpt;
}

}  // namespace vpcsv
