#include "emkd/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace emkd {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'K', 'D'};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(std::string("truncated payload: ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

const char* kConfigFields[] = {"vocab_size", "hidden_dim", "num_layers", "num_heads",
                               "grid_h",     "grid_w",     "patch_dim",  "pooled_h",
                               "pooled_w",   "mlp_ratio",  "max_seq_len"};

std::size_t* config_field(ModelConfig& c, const std::string& name) {
  if (name == "vocab_size") return &c.vocab_size;
  if (name == "hidden_dim") return &c.hidden_dim;
  if (name == "num_layers") return &c.num_layers;
  if (name == "num_heads") return &c.num_heads;
  if (name == "grid_h") return &c.grid_h;
  if (name == "grid_w") return &c.grid_w;
  if (name == "patch_dim") return &c.patch_dim;
  if (name == "pooled_h") return &c.pooled_h;
  if (name == "pooled_w") return &c.pooled_w;
  if (name == "mlp_ratio") return &c.mlp_ratio;
  if (name == "max_seq_len") return &c.max_seq_len;
  return nullptr;
}

const NamedArray& find(const std::vector<NamedArray>& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw CheckpointError("checkpoint has no entry '" + name + "'");
}

std::int64_t scalar_int(const NamedArray& a) {
  if (a.dtype != DType::kI64 || a.i64.size() != 1) {
    throw CheckpointError("entry '" + a.name + "' is not a single integer");
  }
  return a.i64[0];
}

std::vector<std::uint32_t> to_dims(const Shape& shape) {
  std::vector<std::uint32_t> dims;
  for (auto d : shape) dims.push_back(static_cast<std::uint32_t>(d));
  return dims;
}

}  // namespace

std::size_t NamedArray::numel() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

NamedArray NamedArray::from_tensor(std::string name, const Tensor& t) {
  NamedArray a;
  a.name = std::move(name);
  a.dtype = DType::kF64;
  a.dims = to_dims(t.shape());
  a.f64.assign(t.values().begin(), t.values().end());
  return a;
}

NamedArray NamedArray::from_ints(std::string name, std::vector<std::int64_t> values) {
  NamedArray a;
  a.name = std::move(name);
  a.dtype = DType::kI64;
  a.dims = {static_cast<std::uint32_t>(values.size())};
  a.i64 = std::move(values);
  return a;
}

Tensor NamedArray::to_tensor() const {
  if (dtype != DType::kF64) throw CheckpointError("entry '" + name + "' is not a float tensor");
  Shape shape(dims.begin(), dims.end());
  return Tensor::from(std::move(shape), f64);
}

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedArray>& entries) {
  std::set<std::string> seen;
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (!seen.insert(e.name).second) throw CheckpointError("duplicate entry name '" + e.name + "'");
    if (e.dims.size() > 255) throw CheckpointError("entry '" + e.name + "' has rank above 255");
    const std::size_t n = e.numel();
    if ((e.dtype == DType::kF64 ? e.f64.size() : e.i64.size()) != n) {
      throw CheckpointError("entry '" + e.name + "' payload does not match its dims");
    }
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.raw(e.name.data(), e.name.size());
    w.u8(static_cast<std::uint8_t>(e.dtype));
    w.u8(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) w.u32(d);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits;
      if (e.dtype == DType::kF64) {
        std::memcpy(&bits, &e.f64[i], 8);
      } else {
        std::memcpy(&bits, &e.i64[i], 8);
      }
      w.u64(bits);
    }
  }
  return w.take();
}

std::vector<NamedArray> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw CheckpointError("bad magic: not an EMKD container");
  }
  Reader r(bytes);
  r.str(4, "magic");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("version mismatch: file has " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const auto count = r.u32("entry count");
  std::vector<NamedArray> entries;
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedArray e;
    const auto name_len = r.u32("name length");
    e.name = r.str(name_len, "name");
    if (!seen.insert(e.name).second) throw CheckpointError("duplicate entry name '" + e.name + "'");
    const auto dtype = r.u8("dtype");
    if (dtype > 1) throw CheckpointError("entry '" + e.name + "' has unknown dtype " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const auto rank = r.u8("rank");
    for (std::uint8_t i = 0; i < rank; ++i) e.dims.push_back(r.u32("dims"));
    const std::size_t n = e.numel();
    r.need(8 * n, "tensor data");
    if (e.dtype == DType::kF64) {
      e.f64.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t bits = r.u64();
        std::memcpy(&e.f64[i], &bits, 8);
      }
    } else {
      e.i64.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t bits = r.u64();
        std::memcpy(&e.i64[i], &bits, 8);
      }
    }
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last entry");
  return entries;
}

void save_checkpoint(const std::string& path, const std::vector<NamedArray>& entries) {
  const auto bytes = encode_checkpoint(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing '" + path + "'");
}

std::vector<NamedArray> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

std::vector<NamedArray> model_to_arrays(const ModelParameters& params,
                                        const std::map<std::string, std::int64_t>& meta) {
  std::vector<NamedArray> out;
  ModelConfig c = params.config();
  for (const char* f : kConfigFields) {
    out.push_back(NamedArray::from_ints(std::string("config.") + f,
                                        {static_cast<std::int64_t>(*config_field(c, f))}));
  }
  out.push_back(NamedArray::from_ints("config.role", {c.role == ModelRole::kTeacher ? 0 : 1}));
  for (const auto& [key, value] : meta) out.push_back(NamedArray::from_ints("meta." + key, {value}));
  for (const auto& [name, t] : params.tensors()) out.push_back(NamedArray::from_tensor("param." + name, t));
  return out;
}

ModelParameters model_from_arrays(const std::vector<NamedArray>& entries) {
  ModelConfig c;
  for (const char* f : kConfigFields) {
    const auto v = scalar_int(find(entries, std::string("config.") + f));
    if (v < 0) throw CheckpointError(std::string("negative config field ") + f);
    *config_field(c, f) = static_cast<std::size_t>(v);
  }
  const auto role = scalar_int(find(entries, "config.role"));
  if (role != 0 && role != 1) throw CheckpointError("config.role must be 0 or 1");
  c.role = role == 0 ? ModelRole::kTeacher : ModelRole::kStudent;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("stored config is invalid: ") + e.what());
  }
  ModelParameters params(c);
  for (const auto& [name, shape] : parameter_shapes(c)) {
    const auto& a = find(entries, "param." + name);
    Tensor t = a.to_tensor();
    if (t.shape() != shape) {
      throw CheckpointError("parameter '" + name + "' has shape " + shape_to_string(t.shape()) +
                            ", config expects " + shape_to_string(shape));
    }
    t.set_requires_grad(true);
    params.insert(name, t);
  }
  return params;
}

std::map<std::string, std::int64_t> model_meta(const std::vector<NamedArray>& entries) {
  std::map<std::string, std::int64_t> meta;
  for (const auto& e : entries)
    if (e.name.rfind("meta.", 0) == 0) meta[e.name.substr(5)] = scalar_int(e);
  return meta;
}

void save_model(const std::string& path, const ModelParameters& params,
                const std::map<std::string, std::int64_t>& meta) {
  save_checkpoint(path, model_to_arrays(params, meta));
}

ModelParameters load_model(const std::string& path) { return model_from_arrays(load_checkpoint(path)); }

std::vector<NamedArray> dataset_to_arrays(const SyntheticDataset& dataset, Split split, std::size_t count) {
  std::vector<NamedArray> out;
  out.push_back(NamedArray::from_ints("split", {split == Split::kTrain ? 0 : 1}));
  out.push_back(NamedArray::from_ints("count", {static_cast<std::int64_t>(count)}));
  for (std::size_t i = 0; i < count; ++i) {
    const auto ex = dataset.generate(split, i);
    const std::string p = "example." + std::to_string(i) + ".";
    out.push_back(NamedArray::from_tensor(p + "patch_grid", ex.patch_grid));
    out.push_back(NamedArray::from_ints(p + "prompt_ids", ex.prompt_ids));
    out.push_back(NamedArray::from_ints(p + "response_ids", ex.response_ids));
    out.push_back(NamedArray::from_ints(p + "labels", ex.labels));
  }
  return out;
}

std::vector<SyntheticExample> examples_from_arrays(const std::vector<NamedArray>& entries) {
  const auto count = scalar_int(find(entries, "count"));
  std::vector<SyntheticExample> out;
  for (std::int64_t i = 0; i < count; ++i) {
    const std::string p = "example." + std::to_string(i) + ".";
    SyntheticExample ex;
    ex.patch_grid = find(entries, p + "patch_grid").to_tensor();
    ex.prompt_ids = find(entries, p + "prompt_ids").i64;
    ex.response_ids = find(entries, p + "response_ids").i64;
    ex.labels = find(entries, p + "labels").i64;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace emkd
