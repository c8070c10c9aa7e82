#pragma once

#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sa/tensor.hpp"

namespace sa {

inline std::string base64_encode(const unsigned char* data, size_t n) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (size_t i = 0; i < n; i += 3) {
    unsigned v = data[i] << 16;
    if (i + 1 < n) v |= data[i + 1] << 8;
    if (i + 2 < n) v |= data[i + 2];
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(i + 1 < n ? tbl[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < n ? tbl[v & 63] : '=');
  }
  return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& s) {
  auto dec = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    if (c == '=') return -1;
    throw std::invalid_argument("base64: bad character");
  };
  std::vector<unsigned char> out;
  out.reserve(s.size() / 4 * 3);
  for (size_t i = 0; i + 3 < s.size(); i += 4) {
    int a = dec(s[i]), b = dec(s[i + 1]), c = dec(s[i + 2]), d = dec(s[i + 3]);
    unsigned v = (a << 18) | (b << 12) | ((c < 0 ? 0 : c) << 6) | (d < 0 ? 0 : d);
    out.push_back((v >> 16) & 0xff);
    if (c >= 0) out.push_back((v >> 8) & 0xff);
    if (d >= 0) out.push_back(v & 0xff);
  }
  return out;
}

template <typename T>
nlohmann::ordered_json tensor_to_json(const TensorT<T>& t) {
  nlohmann::ordered_json j;
  j["shape"] = t.shape;
  j["dtype"] = sizeof(T) == 4 ? "f32" : "f64";
  j["data"] = base64_encode(reinterpret_cast<const unsigned char*>(t.data.data()),
                            t.data.size() * sizeof(T));
  return j;
}

template <typename T>
TensorT<T> tensor_from_json(const nlohmann::json& j) {
  TensorT<T> t;
  t.shape = j.at("shape").get<std::vector<int>>();
  std::string dtype = j.at("dtype").get<std::string>();
  if (dtype != (sizeof(T) == 4 ? "f32" : "f64"))
    throw std::runtime_error("tensor_from_json: dtype mismatch");
  auto bytes = base64_decode(j.at("data").get<std::string>());
  size_t n = static_cast<size_t>(TensorT<T>::numel_of(t.shape));
  if (bytes.size() != n * sizeof(T)) throw std::runtime_error("tensor_from_json: size mismatch");
  t.data.resize(n);
  std::memcpy(t.data.data(), bytes.data(), bytes.size());
  return t;
}

}  // namespace sa
