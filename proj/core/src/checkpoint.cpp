#include "malsf/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <map>
#include <sstream>

#include "malsf/dataset_io.hpp"

namespace malsf {

namespace {

constexpr char kMagic[8] = {'M', 'A', 'L', 'S', 'F', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

static_assert(sizeof(double) == 8);

void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little) {
    throw std::runtime_error("checkpoint format requires a little-endian host");
  }
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::string take_bytes(const std::string& in, size_t& pos, size_t n) {
  if (pos + n > in.size()) throw std::runtime_error("checkpoint truncated");
  std::string s = in.substr(pos, n);
  pos += n;
  return s;
}

}  // namespace

void save_checkpoint(MalsfModel& model, const std::string& path) {
  require_little_endian();
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put<uint32_t>(out, kVersion);
  const std::string cfg = model.config().to_json();
  put<uint64_t>(out, cfg.size());
  out.append(cfg);
  put<uint64_t>(out, model.seed());

  auto params = model.named_params();
  put<uint64_t>(out, params.size());
  for (auto& p : params) {
    put<uint64_t>(out, p.name.size());
    out.append(p.name);
    put<uint32_t>(out, static_cast<uint32_t>(p.tensor.ndim()));
    for (int i = 0; i < p.tensor.ndim(); ++i) put<uint64_t>(out, p.tensor.dim(i));
    const auto& data = p.tensor.data();
    const size_t bytes = data.size() * sizeof(double);
    const size_t base = out.size();
    out.resize(base + bytes);
    std::memcpy(out.data() + base, data.data(), bytes);
  }
  put<uint32_t>(out, crc32_of(out));
  write_file_atomic(path, out);
}

CheckpointData read_checkpoint(const std::string& path) {
  require_little_endian();
  const std::string in = read_file(path);
  if (in.size() < sizeof(kMagic) + 8) throw std::runtime_error("checkpoint truncated");

  const std::string body = in.substr(0, in.size() - 4);
  size_t tail = in.size() - 4;
  const uint32_t stored_crc = take<uint32_t>(in, tail);
  if (crc32_of(body) != stored_crc) {
    throw std::runtime_error("checkpoint checksum mismatch: " + path);
  }

  size_t pos = 0;
  const std::string magic = take_bytes(in, pos, sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  const uint32_t version = take<uint32_t>(in, pos);
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                             " (expected " + std::to_string(kVersion) + ")");
  }
  CheckpointData data;
  const uint64_t cfg_len = take<uint64_t>(in, pos);
  data.config = ModelConfig::from_json(take_bytes(in, pos, cfg_len));
  data.seed = take<uint64_t>(in, pos);

  const uint64_t n_params = take<uint64_t>(in, pos);
  for (uint64_t i = 0; i < n_params; ++i) {
    const uint64_t name_len = take<uint64_t>(in, pos);
    std::string name = take_bytes(in, pos, name_len);
    const uint32_t ndim = take<uint32_t>(in, pos);
    Shape shape;
    for (uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(take<uint64_t>(in, pos)));
    const size_t count = static_cast<size_t>(shape_numel(shape));
    std::vector<double> values(count);
    const std::string raw = take_bytes(in, pos, count * sizeof(double));
    std::memcpy(values.data(), raw.data(), raw.size());
    data.params.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return data;
}

void apply_checkpoint(const CheckpointData& data, MalsfModel& model) {
  auto params = model.named_params();
  std::map<std::string, Tensor*> by_name;
  for (auto& p : params) by_name[p.name] = &p.tensor;

  std::vector<std::string> missing, extra, seen;
  std::map<std::string, int> counts;
  for (const auto& [name, tensor] : data.params) {
    if (++counts[name] > 1) {
      throw std::runtime_error("checkpoint has duplicate parameter: " + name);
    }
    if (!by_name.count(name)) extra.push_back(name);
  }
  for (const auto& p : params) {
    if (!counts.count(p.name)) missing.push_back(p.name);
  }
  if (!missing.empty() || !extra.empty()) {
    std::ostringstream os;
    os << "checkpoint/model parameter-name mismatch:";
    if (!missing.empty()) {
      os << " model-only:";
      for (const auto& n : missing) os << " " << n;
    }
    if (!extra.empty()) {
      os << " checkpoint-only:";
      for (const auto& n : extra) os << " " << n;
    }
    throw std::runtime_error(os.str());
  }
  for (const auto& [name, tensor] : data.params) {
    Tensor* dst = by_name[name];
    if (dst->shape() != tensor.shape()) {
      throw std::runtime_error("checkpoint parameter " + name + " has shape " +
                               shape_str(tensor.shape()) + ", model expects " +
                               shape_str(dst->shape()));
    }
    dst->data() = tensor.data();
  }
}

MalsfModel load_model(const std::string& path) {
  const CheckpointData data = read_checkpoint(path);
  MalsfModel model(data.config, data.seed);
  apply_checkpoint(data, model);
  return model;
}

}  // namespace malsf
