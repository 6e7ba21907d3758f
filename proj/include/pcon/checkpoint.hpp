#pragma once

// PCON1 checkpoint files:
//   "PCON1"
//   u32 length, config text (UTF-8), including a [state] section with the
//       epoch and the serialized training RNG
//   u32 array count, then one block per parameter:
//     u32 name length, name, u32 rank, rank x u32 dims, float32 values
//   nothing after the last block
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "config.hpp"
#include "data.hpp"
#include "nn.hpp"

namespace pcon {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  TrainConfig config;
  std::size_t epoch = 0;
  std::string rng_state;
  std::vector<NamedArray> params;

  template <class T>
  static Checkpoint capture(const TrainConfig& cfg, const ContrastiveNet<T>& net, std::size_t epoch,
                            std::string rng_state = {}) {
    Checkpoint c{cfg, epoch, std::move(rng_state), {}};
    for (const auto& [name, t] : net.named_parameters()) {
      NamedArray a{name, t.shape(), {}};
      for (T v : t.data()) a.values.push_back(float(v));
      c.params.push_back(std::move(a));
    }
    return c;
  }

  /// Rebuilds the network from the stored config and overwrites every
  /// parameter with the stored values.
  template <class T>
  ContrastiveNet<T> restore() const {
    ContrastiveNet<T> net(config.encoder_spec(), config.seed);
    const auto named = net.named_parameters();
    if (named.size() != params.size()) {
      throw CheckpointError("checkpoint holds " + std::to_string(params.size()) + " arrays, model expects " +
                            std::to_string(named.size()));
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      auto [name, t] = named[i];
      if (params[i].name != name || params[i].shape != t.shape()) {
        throw CheckpointError("checkpoint array '" + params[i].name + "' " + shape_str(params[i].shape) +
                              " does not match model array '" + name + "' " + shape_str(t.shape()));
      }
      auto dst = t.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = T(params[i].values[k]);
    }
    return net;
  }
};

inline constexpr std::string_view kCheckpointMagic = "PCON1";

inline std::string checkpoint_config_text(const Checkpoint& c) {
  std::ostringstream out;
  out << to_text(c.config) << "\n[state]\nepoch = " << c.epoch << "\nrng_state = \"" << c.rng_state << "\"\n";
  return out.str();
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  const std::string text = checkpoint_config_text(c);
  detail::put_u32(out, std::uint32_t(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  detail::put_u32(out, std::uint32_t(c.params.size()));
  for (const auto& p : c.params) {
    detail::put_u32(out, std::uint32_t(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    detail::put_u32(out, std::uint32_t(p.shape.size()));
    for (std::size_t d : p.shape) detail::put_u32(out, std::uint32_t(d));
    for (float v : p.values) detail::put_f32(out, v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> in, const std::string& origin = "<memory>") {
  if (in.size() < kCheckpointMagic.size() || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), in.begin())) {
    throw CheckpointError(origin + ": not a PCON1 checkpoint");
  }
  try {
    std::size_t off = kCheckpointMagic.size();
    const std::size_t len = detail::get_u32(in, off);
    if (off + len > in.size()) throw DataError("config text runs past end of file");
    const std::string text(in.begin() + long(off), in.begin() + long(off + len));
    off += len;

    Checkpoint c;
    const auto entries = parse_config_text(text, origin);
    apply_entries(c.config, entries, origin, {"state"});
    for (const auto& e : entries) {
      if (e.section != "state") continue;
      if (e.key == "epoch") c.epoch = std::size_t(parse_integer(e.value, "epoch"));
      else if (e.key == "rng_state") c.rng_state = e.value;
    }

    const std::size_t arrays = detail::get_u32(in, off);
    for (std::size_t i = 0; i < arrays; ++i) {
      NamedArray a;
      const std::size_t name_len = detail::get_u32(in, off);
      if (off + name_len > in.size()) throw DataError("parameter name runs past end of file");
      a.name.assign(in.begin() + long(off), in.begin() + long(off + name_len));
      off += name_len;
      const std::size_t rank = detail::get_u32(in, off);
      if (rank > 2) throw DataError("parameter '" + a.name + "' has rank " + std::to_string(rank));
      std::size_t count = 1;
      for (std::size_t r = 0; r < rank; ++r) {
        a.shape.push_back(detail::get_u32(in, off));
        count *= a.shape.back();
      }
      if (off + 4 * count > in.size()) throw DataError("parameter '" + a.name + "' is truncated");
      a.values.resize(count);
      for (float& v : a.values) v = detail::get_f32(in, off);
      c.params.push_back(std::move(a));
    }
    if (off != in.size()) throw DataError(std::to_string(in.size() - off) + " trailing bytes after the last array");
    return c;
  } catch (const DataError& e) {
    throw CheckpointError(origin + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_bytes(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("missing checkpoint file " + path.string());
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint(bytes, path.string());
}

}  // namespace pcon
