#include "convbert/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "convbert/errors.hpp"

namespace convbert {

namespace {

constexpr char kMagic[] = "CVBT1";
constexpr std::size_t kMagicSize = 5;

void put_u32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t narrow32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw ContractError(std::string("checkpoint: ") + what + " too large");
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  Reader(std::ifstream& in, const std::string& path) : in_(in), path_(path) {}

  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw InputError("checkpoint '" + path_ + "' is truncated");
  }

  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  }

  std::string text(std::size_t limit) {
    const std::uint32_t n = u32();
    if (n > limit) throw InputError("checkpoint '" + path_ + "': implausible string length " + std::to_string(n));
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::ifstream& in_;
  const std::string& path_;
};

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParameterList& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, kMagicSize);
  const std::string text = cfg.to_text();
  put_u32(out, narrow32(text.size(), "config"));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  std::vector<const std::pair<std::string, Tensor>*> unique;
  std::unordered_set<std::uintptr_t> seen;
  for (const auto& entry : params.entries()) {
    if (seen.insert(entry.second.id()).second) unique.push_back(&entry);
  }
  put_u32(out, narrow32(unique.size(), "tensor count"));
  for (const auto* entry : unique) {
    const auto& [name, tensor] = *entry;
    put_u32(out, narrow32(name.size(), "name"));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, narrow32(tensor.rank(), "rank"));
    for (std::size_t e : tensor.shape()) put_u32(out, narrow32(e, "extent"));
    for (double v : tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!out) throw InputError("error while writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint '" + path + "'");
  Reader r(in, path);
  char magic[kMagicSize];
  r.bytes(magic, kMagicSize);
  if (std::memcmp(magic, kMagic, kMagicSize) != 0) throw InputError("'" + path + "' is not a CVBT1 checkpoint");
  Checkpoint ckpt;
  ckpt.config = ModelConfig::parse(r.text(1 << 16));
  const std::uint32_t count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    NamedTensor nt;
    nt.name = r.text(4096);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw InputError("checkpoint tensor '" + nt.name + "' has unsupported rank");
    for (std::uint32_t i = 0; i < rank; ++i) nt.shape.push_back(r.u32());
    nt.values.resize(shape_numel(nt.shape));
    for (float& v : nt.values) v = std::bit_cast<float>(r.u32());
    ckpt.tensors.push_back(std::move(nt));
  }
  return ckpt;
}

void restore_parameters(const Checkpoint& ckpt, const ParameterList& params) {
  for (const auto& [name, tensor] : params.entries()) {
    const NamedTensor* stored = ckpt.find(name);
    if (stored == nullptr) {
      // Shared tensors are stored once; accept any alias already restored.
      bool aliased = false;
      for (const auto& [other, t] : params.entries()) {
        if (t.id() == tensor.id() && ckpt.find(other) != nullptr) aliased = true;
      }
      if (aliased) continue;
      throw InputError("checkpoint has no tensor '" + name + "'");
    }
    if (stored->shape != tensor.shape()) {
      throw InputError("checkpoint tensor '" + name + "' has shape " + shape_string(stored->shape) + ", expected " +
                       shape_string(tensor.shape()));
    }
    Tensor target = tensor;
    auto dst = target.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = stored->values[i];
  }
}

ConvBertModel model_from_checkpoint(const Checkpoint& ckpt) {
  Rng rng(0);
  ConvBertModel model(ckpt.config, rng);
  restore_parameters(ckpt, model.parameters());
  return model;
}

}  // namespace convbert
