#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "tmvod/config.hpp"
#include "tmvod/nn.hpp"

namespace tmvod {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'T', 'M', 'V', 'O', 'D', 'C', 'K', '1'};

template <typename T>
struct CheckpointBundle {
  PipelineConfig config;
  int epoch = 0;  // completed epochs
  std::string rng_state;
  ParamStore<T> params;
  std::map<std::string, Tensor<T>> momentum;
};

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

inline std::string rng_state_string(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_state(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw CheckpointError("corrupt random generator state");
  return rng;
}

// Layout: magic, u64 header length, JSON header, raw little-endian arrays in
// header order (parameters, then momentum buffers). Written to a temporary
// file and renamed into place.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const CheckpointBundle<T>& b) {
  nlohmann::json header;
  header["dtype"] = dtype_name<T>();
  header["config"] = format_config(b.config);
  header["epoch"] = b.epoch;
  header["rng"] = b.rng_state;
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& [name, v] : b.params.all()) arrays.push_back({{"kind", "param"}, {"name", name}, {"shape", v->value.shape()}});
  for (const auto& [name, t] : b.momentum) arrays.push_back({{"kind", "momentum"}, {"name", name}, {"shape", t.shape()}});
  header["arrays"] = arrays;
  const std::string text = header.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint '" + tmp.string() + "'");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t n = text.size();
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    auto put = [&os](const Tensor<T>& t) {
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    };
    for (const auto& [name, v] : b.params.all()) put(v->value);
    for (const auto& [name, t] : b.momentum) put(t);
    if (!os) throw CheckpointError("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place: " + ec.message());
}

template <typename T>
CheckpointBundle<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointError("'" + path.string() + "' is not a checkpoint");
  }
  std::uint64_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!is || n > (1u << 26)) throw CheckpointError("corrupt checkpoint header");
  std::string text(n, '\0');
  is.read(text.data(), static_cast<std::streamsize>(n));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (header.at("dtype") != dtype_name<T>()) {
    throw CheckpointError("checkpoint holds " + header.at("dtype").get<std::string>() + " arrays, expected " +
                          dtype_name<T>());
  }
  CheckpointBundle<T> b;
  b.config = parse_config_text(header.at("config").get<std::string>());
  b.epoch = header.at("epoch").get<int>();
  b.rng_state = header.at("rng").get<std::string>();
  for (const auto& a : header.at("arrays")) {
    Tensor<T> t(a.at("shape").get<Shape>());
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!is) throw CheckpointError("checkpoint truncated at array '" + a.at("name").get<std::string>() + "'");
    if (a.at("kind") == "param") {
      b.params.create(a.at("name").get<std::string>(), t.shape())->value = std::move(t);
    } else {
      b.momentum.emplace(a.at("name").get<std::string>(), std::move(t));
    }
  }
  return b;
}

}  // namespace tmvod
