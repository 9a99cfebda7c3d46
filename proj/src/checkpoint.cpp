#include "lopt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "lopt/config.hpp"
#include "lopt/errors.hpp"
#include "lopt/tasks.hpp"

namespace lopt {

static_assert(std::endian::native == std::endian::little, "checkpoint code assumes a little-endian host");

namespace {

constexpr std::uint64_t kChecksumSeed = 1469598103934665603ULL;

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  std::vector<unsigned char>& buffer() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class Cursor {
 public:
  Cursor(const std::vector<unsigned char>& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <typename T>
  T pod(const char* what) {
    T v;
    take(&v, sizeof(T), what);
    return v;
  }
  void take(void* out, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  void need(std::size_t n, const char* what) const {
    if (n > end_ - pos_) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  void skip(std::size_t n, const char* what) {
    need(n, what);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<unsigned char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU64: return 8;
  }
  throw FormatError("unknown dtype tag " + std::to_string(static_cast<int>(t)));
}

template <typename Real>
constexpr DType dtype_of() {
  return sizeof(Real) == 4 ? DType::kF32 : DType::kF64;
}

template <typename Real>
CheckpointEntry tensor_entry(const std::string& name, CheckpointSection section, const Tensor<Real>& t) {
  CheckpointEntry e;
  e.name = name;
  e.section = section;
  e.dtype = dtype_of<Real>();
  for (std::size_t d : t.shape()) e.dims.push_back(d);
  e.data.resize(t.size() * sizeof(Real));
  if (t.size() != 0) std::memcpy(e.data.data(), t.data(), e.data.size());
  return e;
}

CheckpointEntry counter_entry(const std::string& name, std::uint64_t value) {
  CheckpointEntry e;
  e.name = name;
  e.section = CheckpointSection::kOptimizer;
  e.dtype = DType::kU64;
  e.data.resize(8);
  std::memcpy(e.data.data(), &value, 8);
  return e;
}

template <typename Real>
Tensor<Real> entry_tensor(const CheckpointEntry& e) {
  if (e.dtype != dtype_of<Real>())
    throw FormatError("tensor " + e.name + " has a different precision than the requested load");
  Shape shape(e.dims.begin(), e.dims.end());
  Tensor<Real> t(shape);
  if (t.size() * sizeof(Real) != e.data.size()) throw FormatError("tensor " + e.name + " size does not match its dims");
  if (t.size() != 0) std::memcpy(t.data(), e.data.data(), e.data.size());
  return t;
}

std::uint64_t entry_counter(const CheckpointEntry& e) {
  if (e.dtype != DType::kU64 || e.data.size() != 8) throw FormatError("counter " + e.name + " is malformed");
  std::uint64_t v;
  std::memcpy(&v, e.data.data(), 8);
  return v;
}

ModelConfig model_from_echo(const std::string& config) {
  try {
    const Json doc = Json::parse(config);
    if (!doc.contains("model")) throw FormatError("checkpoint config echo has no model section");
    return model_config_from_json(doc.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config echo is not valid JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config echo is invalid: ") + e.what());
  }
}

template <typename Real>
void add_params(CheckpointFile& f, const ParameterMap<Real>& params, CheckpointSection section) {
  for (const auto& [name, p] : params) f.entries.push_back(tensor_entry(name, section, p.value));
}

std::string opt_prefix(std::size_t i) {
  return "opt." + std::to_string(i) + ".";
}

}  // namespace

const CheckpointEntry* CheckpointFile::find(const std::string& name) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), name,
                             [](const CheckpointEntry& e, const std::string& n) { return e.name < n; });
  return it != entries.end() && it->name == name ? &*it : nullptr;
}

void write_checkpoint_file(const std::filesystem::path& path, CheckpointFile file) {
  std::sort(file.entries.begin(), file.entries.end(),
            [](const CheckpointEntry& a, const CheckpointEntry& b) { return a.name < b.name; });
  for (std::size_t i = 1; i < file.entries.size(); ++i)
    if (file.entries[i].name == file.entries[i - 1].name)
      throw ContractError("duplicate checkpoint tensor " + file.entries[i].name);
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.pod<std::uint32_t>(file.version);
  w.pod<std::uint64_t>(file.config.size());
  w.bytes(file.config.data(), file.config.size());
  w.pod<std::uint64_t>(file.entries.size());
  for (const auto& e : file.entries) {
    std::size_t n = dtype_size(e.dtype);
    for (auto d : e.dims) n *= d;
    if (n != e.data.size()) throw ContractError("checkpoint tensor " + e.name + " data does not match its dims");
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(e.section));
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) w.pod<std::uint64_t>(d);
    w.bytes(e.data.data(), e.data.size());
  }
  auto& buf = w.buffer();
  w.pod<std::uint64_t>(fnv1a64(buf.data(), buf.size(), kChecksumSeed));

  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ReportError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw ReportError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path, LoadMode mode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 + 8 + 8 + 8) throw FormatError("checkpoint truncated: " + path.string());
  if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic in " + path.string());

  const std::size_t body = buf.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, 8);

  Cursor c(buf, body);
  c.skip(4, "magic");
  CheckpointFile f;
  f.version = c.pod<std::uint32_t>("version");
  if (f.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(f.version));
  if (fnv1a64(buf.data(), body, kChecksumSeed) != stored) throw FormatError("checkpoint checksum mismatch (truncated or corrupt)");

  const auto config_len = c.pod<std::uint64_t>("config length");
  c.need(config_len, "config");
  f.config.resize(config_len);
  c.take(f.config.data(), config_len, "config");
  const auto count = c.pod<std::uint64_t>("tensor count");
  std::string previous;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = c.pod<std::uint32_t>("name length");
    c.need(name_len, "name");
    e.name.resize(name_len);
    c.take(e.name.data(), name_len, "name");
    if (i > 0 && !(previous < e.name)) throw FormatError("checkpoint tensor names are not sorted");
    previous = e.name;
    const auto section = c.pod<std::uint8_t>("section");
    if (section > 2) throw FormatError("unknown section tag in " + e.name);
    e.section = static_cast<CheckpointSection>(section);
    e.dtype = static_cast<DType>(c.pod<std::uint8_t>("dtype"));
    const auto rank = c.pod<std::uint32_t>("rank");
    if (rank > 8) throw FormatError("implausible rank for " + e.name);
    std::size_t n = dtype_size(e.dtype);
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = c.pod<std::uint64_t>("dims");
      if (d != 0 && n > (std::size_t(1) << 40) / d) throw FormatError("implausible size for " + e.name);
      n *= d;
      e.dims.push_back(d);
    }
    if (mode == LoadMode::kInference && e.section != CheckpointSection::kModel) {
      c.skip(n, "tensor data");
      continue;
    }
    c.need(n, "tensor data");
    e.data.resize(n);
    c.take(e.data.data(), n, "tensor data");
    f.entries.push_back(std::move(e));
  }
  if (c.pos() != body) throw FormatError("trailing bytes after checkpoint tensors");
  return f;
}

template <typename Real>
void save_model_checkpoint(const std::filesystem::path& path, const Transformer<Real>& model,
                           const std::string& config_echo) {
  CheckpointFile f;
  f.config = config_echo;
  add_params(f, model.params(), CheckpointSection::kModel);
  write_checkpoint_file(path, std::move(f));
}

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const Trainer<Real>& trainer, const std::string& config_echo) {
  CheckpointFile f;
  f.config = config_echo;
  add_params(f, trainer.model().params(), CheckpointSection::kModel);
  for (const auto& head : trainer.aux_heads()) add_params(f, head.params(), CheckpointSection::kAux);
  if (const auto* dec = trainer.local_decoder()) add_params(f, dec->params(), CheckpointSection::kAux);
  const auto& opts = trainer.optimizers();
  for (std::size_t i = 0; i < opts.size(); ++i) {
    const std::string pre = opt_prefix(i);
    f.entries.push_back(counter_entry(pre + "step", opts[i].step_count()));
    const auto& group = opts[i].group();
    for (std::size_t k = 0; k < opts[i].first_moments().size(); ++k) {
      f.entries.push_back(tensor_entry(pre + "m." + group[k]->name, CheckpointSection::kOptimizer, opts[i].first_moments()[k]));
      f.entries.push_back(tensor_entry(pre + "v." + group[k]->name, CheckpointSection::kOptimizer, opts[i].second_moments()[k]));
    }
  }
  f.entries.push_back(counter_entry("trainer.step", trainer.steps_taken()));
  write_checkpoint_file(path, std::move(f));
}

template <typename Real>
Transformer<Real> load_model(const std::filesystem::path& path, LoadMode mode) {
  const CheckpointFile f = read_checkpoint_file(path, mode);
  const ModelConfig config = model_from_echo(f.config);
  ParameterMap<Real> params;
  for (const auto& e : f.entries) {
    if (e.section != CheckpointSection::kModel) continue;
    params.emplace(e.name, Parameter<Real>{e.name, entry_tensor<Real>(e)});
  }
  try {
    return Transformer<Real>::from_params(config, std::move(params));
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint does not match its model config: ") + e.what());
  }
}

template <typename Real>
void load_checkpoint(const std::filesystem::path& path, Trainer<Real>& trainer) {
  const CheckpointFile f = read_checkpoint_file(path, LoadMode::kFull);
  if (!(model_from_echo(f.config) == trainer.model().config()))
    throw FormatError("checkpoint model config differs from the trainer's");

  // Stage every tensor first so that a mismatch leaves the trainer untouched.
  std::vector<std::pair<Tensor<Real>*, Tensor<Real>>> staged;
  std::size_t used = 0;
  auto stage = [&](const std::string& name, Tensor<Real>& dst) {
    const CheckpointEntry* e = f.find(name);
    if (!e) throw FormatError("checkpoint is missing tensor " + name);
    Tensor<Real> t = entry_tensor<Real>(*e);
    if (t.shape() != dst.shape()) throw FormatError("checkpoint tensor " + name + " has the wrong shape");
    staged.emplace_back(&dst, std::move(t));
    ++used;
  };
  auto counter = [&](const std::string& name) {
    const CheckpointEntry* e = f.find(name);
    if (!e) throw FormatError("checkpoint is missing counter " + name);
    ++used;
    return entry_counter(*e);
  };
  for (auto& [name, p] : trainer.model().params()) stage(name, p.value);
  for (auto& head : trainer.aux_heads())
    for (auto& [name, p] : head.params()) stage(name, p.value);
  if (auto* dec = trainer.local_decoder())
    for (auto& [name, p] : dec->params()) stage(name, p.value);
  auto& opts = trainer.optimizers();
  std::vector<std::uint64_t> steps;
  for (std::size_t i = 0; i < opts.size(); ++i) {
    const std::string pre = opt_prefix(i);
    steps.push_back(counter(pre + "step"));
    const auto& group = opts[i].group();
    for (std::size_t k = 0; k < opts[i].first_moments().size(); ++k) {
      stage(pre + "m." + group[k]->name, opts[i].first_moments()[k]);
      stage(pre + "v." + group[k]->name, opts[i].second_moments()[k]);
    }
  }
  const std::uint64_t trainer_step = counter("trainer.step");
  if (used != f.entries.size()) throw FormatError("checkpoint holds tensors the trainer does not have");

  for (auto& [dst, t] : staged) *dst = std::move(t);
  for (std::size_t i = 0; i < opts.size(); ++i) opts[i].set_step_count(steps[i]);
  trainer.set_steps_taken(trainer_step);
}

#define LOPT_INSTANTIATE(Real)                                                                              \
  template void save_checkpoint(const std::filesystem::path&, const Trainer<Real>&, const std::string&);    \
  template void save_model_checkpoint(const std::filesystem::path&, const Transformer<Real>&,               \
                                      const std::string&);                                                  \
  template Transformer<Real> load_model<Real>(const std::filesystem::path&, LoadMode);                      \
  template void load_checkpoint(const std::filesystem::path&, Trainer<Real>&);

LOPT_INSTANTIATE(float)
LOPT_INSTANTIATE(double)

#undef LOPT_INSTANTIATE

}  // namespace lopt
