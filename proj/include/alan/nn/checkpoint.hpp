#pragma once

// Checkpoint file: every ParamTensor with its name, shape and f32 values,
// preceded by a JSON blob describing the model configuration.
//
//   "VARC" | u32 version=1 | u32 config_len | config_len bytes UTF-8 JSON
//   | u32 n_tensors | n_tensors x ( u32 name_len | name | u32 rows | u32 cols
//   | rows*cols f32 little-endian, row-major )

#include <filesystem>
#include <map>
#include <string>

#include "alan/datapack.hpp"
#include "alan/nn/param.hpp"

namespace alan::nn {

inline constexpr std::array<char, 4> kCheckpointMagic{'V', 'A', 'R', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::string encode_checkpoint(const ParamList<T>& params, const std::string& config_json) {
  std::string out(kCheckpointMagic.data(), 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, detail::checked_u32(config_json.size(), "config"));
  out += config_json;
  detail::put_u32(out, detail::checked_u32(params.size(), "tensor count"));
  for (const auto* p : params) {
    detail::put_u32(out, detail::checked_u32(p->name.size(), "name"));
    out += p->name;
    detail::put_u32(out, detail::checked_u32(static_cast<std::size_t>(p->value.rows()), "rows"));
    detail::put_u32(out, detail::checked_u32(static_cast<std::size_t>(p->value.cols()), "cols"));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) detail::put_f32(out, static_cast<float>(p->value.data()[i]));
  }
  return out;
}

struct CheckpointContents {
  std::string config_json;
  std::map<std::string, MatF> tensors;
};

inline CheckpointContents decode_checkpoint(const std::string& bytes, const std::string& where = "checkpoint") {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw ShapeError(where + ": truncated");
  };
  auto u32 = [&] {
    need(4);
    const auto v = detail::get_u32(bytes.data() + pos);
    pos += 4;
    return v;
  };
  need(4);
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0) throw ValidationError(where + ": bad magic");
  pos = 4;
  if (u32() != kCheckpointVersion) throw ValidationError(where + ": unsupported version");
  CheckpointContents c;
  const auto cfg_len = u32();
  need(cfg_len);
  c.config_json = bytes.substr(pos, cfg_len);
  pos += cfg_len;
  const auto count = u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = u32();
    need(name_len);
    std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto rows = u32();
    const auto cols = u32();
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    need(4 * n);
    MatF m(rows, cols);
    for (std::size_t i = 0; i < n; ++i) m.data()[i] = detail::get_f32(bytes.data() + pos + 4 * i);
    pos += 4 * n;
    if (!m.allFinite()) throw ValidationError(where + ": non-finite value in " + name);
    c.tensors.emplace(std::move(name), std::move(m));
  }
  if (pos != bytes.size()) throw ShapeError(where + ": trailing bytes");
  return c;
}

template <typename T>
void write_checkpoint(const std::filesystem::path& path, const ParamList<T>& params, const std::string& config_json) {
  detail::write_file(path, encode_checkpoint(params, config_json));
}

inline CheckpointContents read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

/// Copies tensors into params by name; every param must be present with a
/// matching shape.
template <typename T>
void load_params(const ParamList<T>& params, const CheckpointContents& c) {
  for (auto* p : params) {
    const auto it = c.tensors.find(p->name);
    if (it == c.tensors.end()) throw ValidationError("checkpoint lacks tensor '" + p->name + "'");
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
      throw ShapeError("checkpoint tensor '" + p->name + "' has the wrong shape");
    }
    p->value = it->second.template cast<T>();
  }
  if (c.tensors.size() != params.size()) throw ValidationError("checkpoint has tensors the model does not");
}

}  // namespace alan::nn
