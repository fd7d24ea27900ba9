#include "mrsnet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "mrsnet/errors.hpp"

namespace mrsnet {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'M', 'R', 'S', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const fs::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw LoadError("truncated checkpoint " + path.string());
  return v;
}

std::vector<std::pair<std::string, Tensor>> state_of(const Module& module) {
  auto state = module.named_parameters();
  auto buffers = module.named_buffers();
  state.insert(state.end(), buffers.begin(), buffers.end());
  return state;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Module& module, nlohmann::json header) {
  const auto state = state_of(module);
  auto index = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& [name, t] : state) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  header["tensors"] = index;
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : state) {
      const auto d = t.data();
      out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
    }
    if (!out) throw LoadError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw LoadError(path.string() + " is not a checkpoint file");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));
  const auto size = get<std::uint64_t>(in, path);
  std::string text(size, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(size))) throw LoadError("truncated checkpoint " + path.string());

  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  for (const auto& entry : ck.header.at("tensors")) {
    Tensor t(entry.at("shape").get<Shape>());
    auto d = t.data_mut();
    if (!in.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double))))
      throw LoadError("truncated checkpoint payload in " + path.string());
    ck.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

void load_state(Module& module, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, t] : tensors) stored[name] = &t;
  const auto state = state_of(module);
  if (state.size() != stored.size())
    throw ConfigError("checkpoint holds " + std::to_string(stored.size()) + " tensors, model expects " +
                      std::to_string(state.size()));
  for (const auto& [name, slot] : state) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ConfigError("checkpoint is missing tensor " + name);
    if (it->second->shape() != slot.shape())
      throw ConfigError("tensor " + name + ": checkpoint shape " + shape_str(it->second->shape()) + " vs model " +
                        shape_str(slot.shape()));
  }
  for (auto& [name, slot] : state) {
    const auto src = stored[name]->data();
    auto dst = Tensor(slot).data_mut();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace mrsnet
