#pragma once

#include <bit>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "mdcap/tensor.hpp"

namespace mdcap {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian IEEE-754");

// On-disk container: a one-line magic, a text manifest with a declared byte
// length, then the raw tensor values concatenated in manifest order.
//
//   MDCAP-CKPT v1 header_bytes=<n>\n
//   <n bytes of manifest text: "meta k v\n" and "tensor name dtype d0 d1..\n">
//   <payload>
//
// Round trips are bit-exact.
struct Checkpoint {
  struct Blob {
    std::string name;
    std::string dtype;  // "f32" | "f64"
    Shape shape;
    std::vector<unsigned char> bytes;
  };

  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<Blob> tensors;

  void set_meta(const std::string& key, const std::string& value);
  const std::string* find_meta(const std::string& key) const;
  const Blob* find(const std::string& name) const;

  template <typename T>
  void add(const std::string& name, const Shape& shape, std::span<const T> values) {
    Blob b;
    b.name = name;
    b.dtype = sizeof(T) == 4 ? "f32" : "f64";
    b.shape = shape;
    b.bytes.resize(values.size() * sizeof(T));
    std::memcpy(b.bytes.data(), values.data(), b.bytes.size());
    tensors.push_back(std::move(b));
  }

  template <typename T>
  std::vector<T> values(const Blob& b) const {
    const char* want = sizeof(T) == 4 ? "f32" : "f64";
    if (b.dtype != want)
      throw std::invalid_argument("checkpoint tensor " + b.name + " has dtype " + b.dtype +
                                  ", wanted " + want);
    std::vector<T> out(b.bytes.size() / sizeof(T));
    std::memcpy(out.data(), b.bytes.data(), b.bytes.size());
    return out;
  }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace mdcap
