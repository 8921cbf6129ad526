#include "pialm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include "pialm/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes host byte order, which must be little-endian");

namespace pialm {

namespace {

constexpr char model_magic[8] = {'P', 'I', 'A', 'L', 'M', 'C', 'K', '\0'};
constexpr char state_magic[8] = {'P', 'I', 'A', 'L', 'M', 'T', 'R', '\0'};

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot write " + path);
  }
  template <typename U>
  void put(U value) {
    out_.write(reinterpret_cast<const char*>(&value), sizeof(U));
  }
  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  }
  void string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor(const std::string& name, const Tensor<float>& t) {
    string(name);
    put(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put(static_cast<std::uint64_t>(d));
    bytes(t.data().data(), t.size() * sizeof(float));
  }
  void finish() {
    out_.flush();
    if (!out_) throw FormatError("failed writing " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw FormatError("cannot read " + path);
  }
  template <typename U>
  U get() {
    U value{};
    bytes(&value, sizeof(U));
    return value;
  }
  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_ + " is truncated");
  }
  std::string string(std::size_t limit = 1u << 24) {
    const auto n = get<std::uint32_t>();
    if (n > limit) throw FormatError(path_ + ": implausible string length " + std::to_string(n));
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::pair<std::string, Tensor<float>> tensor() {
    std::string name = string(4096);
    const auto rank = get<std::uint32_t>();
    if (rank > 8) throw FormatError(path_ + ": tensor " + name + " has rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(get<std::uint64_t>());
      if (d > (std::size_t{1} << 32)) throw FormatError(path_ + ": implausible extent in " + name);
      count *= d;
    }
    Tensor<float> t(shape);
    if (t.size() != count) throw FormatError(path_ + ": bad tensor " + name);
    bytes(t.data().data(), count * sizeof(float));
    return {std::move(name), std::move(t)};
  }
  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) {
      throw FormatError(path_ + " has trailing bytes");
    }
  }
  void magic(const char (&expected)[8]) {
    char got[8];
    bytes(got, 8);
    if (std::memcmp(got, expected, 8) != 0) throw FormatError(path_ + " has the wrong magic");
    const auto version = get<std::uint32_t>();
    if (version != checkpoint_version) {
      throw FormatError(path_ + " has format version " + std::to_string(version) +
                        ", expected " + std::to_string(checkpoint_version));
    }
  }

 private:
  std::string path_;
  std::ifstream in_;
};

void write_parameters(Writer& w, const Parameters<float>& params) {
  std::uint32_t n = 0;
  params.for_each([&n](const std::string&, const Tensor<float>&) { ++n; });
  w.put(n);
  params.for_each([&w](const std::string& name, const Tensor<float>& t) { w.tensor(name, t); });
}

// Fills a parameter set shaped like `like` from the stream, by name.
void read_parameters(Reader& r, Parameters<float>& like, const std::string& path) {
  const auto n = r.get<std::uint32_t>();
  std::map<std::string, Tensor<float>> loaded;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto [name, t] = r.tensor();
    if (!loaded.emplace(name, std::move(t)).second) {
      throw FormatError(path + ": duplicate tensor " + name);
    }
  }
  std::size_t used = 0;
  like.for_each([&](const std::string& name, Tensor<float>& slot) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw FormatError(path + ": missing tensor " + name);
    if (it->second.shape() != slot.shape()) {
      throw FormatError(path + ": tensor " + name + " has shape " +
                        shape_string(it->second.shape()) + ", config implies " +
                        shape_string(slot.shape()));
    }
    slot = std::move(it->second);
    ++used;
  });
  if (used != loaded.size()) throw FormatError(path + ": unexpected extra tensors");
}

const char* const model_keys[] = {"variant", "n_layers", "d_model", "n_heads", "d_ff",
                                  "vocab_size", "L", "L_cache", "use_cache", "tie_embeddings",
                                  "dropout", "activation", "norm", "ln_eps"};

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const Parameters<float>& params, const KeyValueConfig& metadata) {
  config.validate();
  KeyValueConfig header = config.to_kv();
  for (const auto& [k, v] : metadata.values()) {
    if (header.has(k)) throw ContractError("checkpoint metadata key '" + k + "' shadows a model key");
    header.set(k, v);
  }
  Writer w(path);
  w.bytes(model_magic, 8);
  w.put(checkpoint_version);
  w.string(header.to_string());
  write_parameters(w, params);
  w.finish();
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r(path);
  r.magic(model_magic);
  const KeyValueConfig header = KeyValueConfig::parse(r.string());
  Checkpoint ck;
  ck.config = ModelConfig::from_kv(header);
  std::map<std::string, std::string> extra = header.values();
  for (const char* key : model_keys) extra.erase(key);
  ck.metadata = KeyValueConfig(std::move(extra));
  ck.params = init_parameters<float>(ck.config, 0);
  read_parameters(r, ck.params, path);
  r.expect_end();
  return ck;
}

std::string training_state_path(const std::string& checkpoint_path) {
  return checkpoint_path + ".train";
}

void save_training_state(const std::string& path, const TrainingState& state) {
  Writer w(path);
  w.bytes(state_magic, 8);
  w.put(checkpoint_version);
  w.put(static_cast<std::uint64_t>(state.epochs_done));
  w.put(static_cast<std::uint64_t>(state.optimizer.step));
  write_parameters(w, state.optimizer.m);
  write_parameters(w, state.optimizer.v);
  w.finish();
}

TrainingState load_training_state(const std::string& path, const Parameters<float>& like) {
  Reader r(path);
  r.magic(state_magic);
  TrainingState s;
  s.epochs_done = static_cast<std::size_t>(r.get<std::uint64_t>());
  s.optimizer = make_optimizer_state(like);
  s.optimizer.step = static_cast<std::size_t>(r.get<std::uint64_t>());
  read_parameters(r, s.optimizer.m, path);
  read_parameters(r, s.optimizer.v, path);
  r.expect_end();
  return s;
}

}  // namespace pialm
