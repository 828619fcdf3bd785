#include "mdcap/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mdcap {

namespace {
constexpr const char* kMagic = "MDCAP-CKPT v1";

size_t dtype_bytes(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw std::invalid_argument("checkpoint: unknown dtype " + dtype);
}
}  // namespace

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
  for (auto& kv : meta)
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  meta.emplace_back(key, value);
}

const std::string* Checkpoint::find_meta(const std::string& key) const {
  for (const auto& kv : meta)
    if (kv.first == key) return &kv.second;
  return nullptr;
}

const Checkpoint::Blob* Checkpoint::find(const std::string& name) const {
  for (const auto& b : tensors)
    if (b.name == name) return &b;
  return nullptr;
}

void Checkpoint::save(const std::string& path) const {
  std::ostringstream header;
  for (const auto& [k, v] : meta) header << "meta " << k << ' ' << v << '\n';
  for (const auto& b : tensors) {
    header << "tensor " << b.name << ' ' << b.dtype;
    for (int d : b.shape) header << ' ' << d;
    header << '\n';
  }
  const std::string h = header.str();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out << kMagic << " header_bytes=" << h.size() << '\n';
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& b : tensors)
    out.write(reinterpret_cast<const char*>(b.bytes.data()), static_cast<std::streamsize>(b.bytes.size()));
  if (!out) throw std::runtime_error("short write to checkpoint: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);

  std::string first;
  std::getline(in, first);
  const std::string prefix = std::string(kMagic) + " header_bytes=";
  if (first.rfind(prefix, 0) != 0)
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);
  const size_t header_bytes = std::stoull(first.substr(prefix.size()));

  std::string header(header_bytes, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_bytes));
  if (in.gcount() != static_cast<std::streamsize>(header_bytes))
    throw std::runtime_error("truncated checkpoint header: " + path);

  Checkpoint ckpt;
  std::istringstream hs(header);
  std::string line;
  while (std::getline(hs, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(value.begin());
      ckpt.meta.emplace_back(key, value);
    } else if (kind == "tensor") {
      Blob b;
      ls >> b.name >> b.dtype;
      int d;
      while (ls >> d) b.shape.push_back(d);
      b.bytes.resize(static_cast<size_t>(numel(b.shape)) * dtype_bytes(b.dtype));
      ckpt.tensors.push_back(std::move(b));
    } else {
      throw std::runtime_error("unknown checkpoint header entry: " + line);
    }
  }
  for (auto& b : ckpt.tensors) {
    in.read(reinterpret_cast<char*>(b.bytes.data()), static_cast<std::streamsize>(b.bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(b.bytes.size()))
      throw std::runtime_error("truncated checkpoint payload at tensor " + b.name + ": " + path);
  }
  return ckpt;
}

}  // namespace mdcap
