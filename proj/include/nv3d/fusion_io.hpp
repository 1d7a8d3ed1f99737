#ifndef NV3D_FUSION_IO_HPP
#define NV3D_FUSION_IO_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nv3d/error.hpp"
#include "nv3d/fusion.hpp"

// Flat binary layout (all integers u32, all reals f64, little-endian):
//
//   magic "NV3DFUSE" (8 bytes), version = 1
//   for each MLP in order enc_q, enc_k, enc_v, dec:
//     num_layers L, then L + 1 widths
//     for each layer: weights row-major (out x in), then bias (out)

namespace nv3d::fusion {

inline constexpr std::array<char, 8> kParamMagic{'N', 'V', '3', 'D', 'F', 'U', 'S', 'E'};
inline constexpr std::uint32_t kParamVersion = 1;

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& buf, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  auto raw = std::bit_cast<U>(value);
  for (std::size_t b = 0; b < sizeof(U); ++b) buf.push_back(static_cast<unsigned char>((raw >> (8 * b)) & 0xFF));
}

template <typename T>
T get_le(const std::vector<unsigned char>& buf, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  if (pos + sizeof(U) > buf.size()) throw Error(ErrorCode::MalformedFrame, "parameter file truncated");
  U raw = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) raw |= static_cast<U>(buf[pos + b]) << (8 * b);
  pos += sizeof(U);
  return std::bit_cast<T>(raw);
}

}  // namespace detail

inline std::vector<unsigned char> encode_params(const FusionParams& params) {
  params.validate();
  std::vector<unsigned char> buf(kParamMagic.begin(), kParamMagic.end());
  detail::put_le(buf, kParamVersion);
  auto put_mlp = [&buf](const MlpParams& m) {
    const auto w = m.widths();
    detail::put_le(buf, static_cast<std::uint32_t>(m.layers.size()));
    for (std::size_t x : w) detail::put_le(buf, static_cast<std::uint32_t>(x));
    for (const DenseLayer& l : m.layers) {
      for (double v : l.weight.data) detail::put_le(buf, v);
      for (double v : l.bias) detail::put_le(buf, v);
    }
  };
  put_mlp(params.enc_q);
  put_mlp(params.enc_k);
  put_mlp(params.enc_v);
  put_mlp(params.dec);
  return buf;
}

inline FusionParams decode_params(const std::vector<unsigned char>& buf) {
  if (buf.size() < 12 || !std::equal(kParamMagic.begin(), kParamMagic.end(), buf.begin())) {
    throw Error(ErrorCode::MalformedFrame, "not a fusion parameter file");
  }
  std::size_t pos = 8;
  if (detail::get_le<std::uint32_t>(buf, pos) != kParamVersion) {
    throw Error(ErrorCode::MalformedFrame, "unsupported parameter file version");
  }
  auto get_mlp = [&buf, &pos]() {
    const auto layers = detail::get_le<std::uint32_t>(buf, pos);
    if (layers == 0 || layers > 1024) throw Error(ErrorCode::MalformedFrame, "implausible layer count");
    std::vector<std::size_t> widths(layers + 1);
    for (auto& w : widths) {
      w = detail::get_le<std::uint32_t>(buf, pos);
      if (w == 0 || w > (1u << 20)) throw Error(ErrorCode::MalformedFrame, "implausible layer width");
    }
    MlpParams m = MlpParams::zeros(widths);
    for (DenseLayer& l : m.layers) {
      for (double& v : l.weight.data) v = detail::get_le<double>(buf, pos);
      for (double& v : l.bias) v = detail::get_le<double>(buf, pos);
    }
    return m;
  };
  FusionParams p;
  p.enc_q = get_mlp();
  p.enc_k = get_mlp();
  p.enc_v = get_mlp();
  p.dec = get_mlp();
  if (pos != buf.size()) throw Error(ErrorCode::MalformedFrame, "trailing bytes in parameter file");
  p.validate();
  return p;
}

inline nlohmann::ordered_json params_manifest(const FusionParams& params, std::uint64_t seed,
                                              const std::string& binary_name) {
  nlohmann::ordered_json j;
  j["format"] = "nv3d-fusion-params";
  j["version"] = kParamVersion;
  j["binary"] = binary_name;
  j["seed"] = seed;
  j["widths"] = {{"enc_q", params.enc_q.widths()},
                 {"enc_k", params.enc_k.widths()},
                 {"enc_v", params.enc_v.widths()},
                 {"dec", params.dec.widths()}};
  return j;
}

/// Writes `<stem>.bin` and `<stem>.json` next to each other.
inline void save_params(const FusionParams& params, std::uint64_t seed, const std::filesystem::path& bin_path) {
  const auto bytes = encode_params(params);
  {
    std::ofstream out(bin_path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot open " + bin_path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  auto manifest_path = bin_path;
  manifest_path.replace_extension(".json");
  std::ofstream mf(manifest_path, std::ios::trunc);
  if (!mf) throw Error(ErrorCode::IoError, "cannot open " + manifest_path.string());
  mf << params_manifest(params, seed, bin_path.filename().string()).dump(2) << '\n';
}

inline FusionParams load_params(const std::filesystem::path& bin_path) {
  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw Error(ErrorCode::FileNotFound, bin_path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_params(bytes);
}

}  // namespace nv3d::fusion

#endif  // NV3D_FUSION_IO_HPP
