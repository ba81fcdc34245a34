#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "prom/float16.hpp"
#include "prom/net.hpp"

// Binary model container (normative layout in docs/model_format.md):
//
//   [0..8)   magic "PROMMDL\0"
//   [8..12)  u32 LE format version (currently 1)
//   [12..20) u64 LE manifest length
//   [20..)   manifest JSON, then the blob region
//
// Each tensor blob is immediately followed by its u32 LE CRC32. The manifest
// carries the ArchSpec and a tensor directory with absolute offsets. All
// multi-byte fields are little-endian.

namespace prom {

constexpr std::array<char, 8> kModelMagic = {'P', 'R', 'O', 'M', 'M', 'D', 'L', '\0'};
constexpr std::uint32_t kModelVersion = 1;

enum class ModelFileErrorCode {
  BadMagic,
  VersionMismatch,
  Truncated,
  CrcMismatch,
  BadManifest,
  CorruptData,
};

struct ModelFileError : std::runtime_error {
  ModelFileErrorCode code;
  ModelFileError(ModelFileErrorCode c, const std::string& msg)
      : std::runtime_error(msg), code(c) {}
};

// ---------------------------------------------------------------------------
// CRC32 (IEEE 802.3, reflected, poly 0xEDB88320)
// ---------------------------------------------------------------------------

inline std::uint32_t crc32(const std::uint8_t* data, size_t n, std::uint32_t seed = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// ---------------------------------------------------------------------------
// Base-3 trit packing: five trits per byte, digit = trit + 1, byte value
// <= 242 (3^5 - 1 = 242), final partial group padded with digit 0.
// ---------------------------------------------------------------------------

struct PackedTrits {
  std::uint64_t count = 0;
  std::vector<std::uint8_t> bytes;
};

inline PackedTrits pack_trits(const std::vector<std::int8_t>& trits) {
  PackedTrits p;
  p.count = trits.size();
  p.bytes.reserve((trits.size() + 4) / 5);
  for (size_t i = 0; i < trits.size(); i += 5) {
    std::uint32_t byte = 0, pow = 1;
    for (size_t k = 0; k < 5; ++k, pow *= 3) {
      const int digit = i + k < trits.size() ? trits[i + k] + 1 : 0;
      byte += static_cast<std::uint32_t>(digit) * pow;
    }
    p.bytes.push_back(static_cast<std::uint8_t>(byte));
  }
  return p;
}

inline std::vector<std::int8_t> unpack_trits(const PackedTrits& p) {
  if (p.bytes.size() != (p.count + 4) / 5)
    throw ModelFileError(ModelFileErrorCode::CorruptData, "packed trits: length mismatch");
  std::vector<std::int8_t> trits;
  trits.reserve(p.count);
  for (size_t i = 0; i < p.bytes.size(); ++i) {
    std::uint32_t byte = p.bytes[i];
    if (byte > 242)
      throw ModelFileError(ModelFileErrorCode::CorruptData,
                           "packed trits: byte value " + std::to_string(byte) + " out of range");
    for (int k = 0; k < 5 && trits.size() < p.count; ++k) {
      trits.push_back(static_cast<std::int8_t>(static_cast<int>(byte % 3) - 1));
      byte /= 3;
    }
  }
  return trits;
}

// ---------------------------------------------------------------------------
// ArchSpec <-> manifest JSON
// ---------------------------------------------------------------------------

inline LayerKind layer_kind_from_string(const std::string& s) {
  for (LayerKind k : {LayerKind::ConvDense, LayerKind::ConvPointwise, LayerKind::ConvDepthwise,
                      LayerKind::Linear, LayerKind::BatchNorm, LayerKind::Activation,
                      LayerKind::AvgPoolGlobal, LayerKind::ResidualAdd})
    if (s == to_string(k)) return k;
  throw ModelFileError(ModelFileErrorCode::BadManifest, "unknown layer kind: " + s);
}

inline QuantPolicy policy_from_string(const std::string& s) {
  for (QuantPolicy p : {QuantPolicy::Ternary, QuantPolicy::Int8, QuantPolicy::Float})
    if (s == to_string(p)) return p;
  throw ModelFileError(ModelFileErrorCode::BadManifest, "unknown policy: " + s);
}

inline nlohmann::json arch_to_json(const ArchSpec& a) {
  nlohmann::json j;
  j["name"] = a.name;
  j["width_mult"] = a.width_mult;
  j["num_classes"] = a.num_classes;
  j["input_shape"] = a.input_shape.dims;
  j["layers"] = nlohmann::json::array();
  for (const LayerSpec& l : a.layers) {
    nlohmann::json jl;
    jl["kind"] = to_string(l.kind);
    jl["in"] = l.in_ch;
    jl["out"] = l.out_ch;
    jl["k"] = l.kernel;
    jl["s"] = l.stride;
    jl["p"] = l.padding;
    jl["policy"] = to_string(l.policy);
    if (l.kind == LayerKind::Activation) jl["act"] = to_string(l.act);
    if (l.kind == LayerKind::ResidualAdd) jl["res"] = l.residual_from;
    j["layers"].push_back(std::move(jl));
  }
  return j;
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
  try {
    ArchSpec a;
    a.name = j.at("name").get<std::string>();
    a.width_mult = j.at("width_mult").get<double>();
    a.num_classes = j.at("num_classes").get<int>();
    a.input_shape = Shape(j.at("input_shape").get<std::vector<int>>());
    for (const auto& jl : j.at("layers")) {
      LayerSpec l;
      l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
      l.in_ch = jl.at("in").get<int>();
      l.out_ch = jl.at("out").get<int>();
      l.kernel = jl.at("k").get<int>();
      l.stride = jl.at("s").get<int>();
      l.padding = jl.at("p").get<int>();
      l.policy = policy_from_string(jl.at("policy").get<std::string>());
      if (jl.contains("act"))
        l.act = jl.at("act").get<std::string>() == "prelu" ? ActKind::Prelu : ActKind::Relu6;
      if (jl.contains("res")) l.residual_from = jl.at("res").get<int>();
      a.layers.push_back(std::move(l));
    }
    validate(a);
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw ModelFileError(ModelFileErrorCode::BadManifest, std::string("manifest: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ModelFileError(ModelFileErrorCode::BadManifest, std::string("manifest: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Container plumbing
// ---------------------------------------------------------------------------

namespace detail {

struct BlobWriter {
  std::vector<std::uint8_t> region;
  nlohmann::json directory = nlohmann::json::array();

  void add(const std::string& name, int layer, const std::string& dtype,
           const std::vector<std::uint8_t>& payload, std::uint64_t count,
           const std::vector<int>* shape = nullptr) {
    nlohmann::json e;
    e["name"] = name;
    e["layer"] = layer;
    e["dtype"] = dtype;
    e["count"] = count;
    e["offset_in_region"] = region.size();
    e["length"] = payload.size();
    if (shape) e["shape"] = *shape;
    directory.push_back(std::move(e));
    region.insert(region.end(), payload.begin(), payload.end());
    const std::uint32_t crc = crc32(payload.data(), payload.size());
    for (int k = 0; k < 4; ++k) region.push_back(static_cast<std::uint8_t>(crc >> (8 * k)));
  }
};

inline std::vector<std::uint8_t> f16_payload(const std::vector<float>& v) {
  std::vector<std::uint8_t> out;
  out.reserve(v.size() * 2);
  for (float f : v) {
    const std::uint16_t h = float_to_half(f);
    out.push_back(static_cast<std::uint8_t>(h & 0xff));
    out.push_back(static_cast<std::uint8_t>(h >> 8));
  }
  return out;
}

inline std::vector<float> f16_parse(const std::uint8_t* p, size_t bytes) {
  if (bytes % 2) throw ModelFileError(ModelFileErrorCode::CorruptData, "odd f16 payload");
  std::vector<float> out(bytes / 2);
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = half_to_float(static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8)));
  return out;
}

inline std::vector<std::uint8_t> f32_payload(const float* v, size_t n) {
  std::vector<std::uint8_t> out(n * 4);
  for (size_t i = 0; i < n; ++i) {
    std::uint32_t u;
    std::memcpy(&u, v + i, 4);
    for (int k = 0; k < 4; ++k) out[4 * i + static_cast<size_t>(k)] =
        static_cast<std::uint8_t>(u >> (8 * k));
  }
  return out;
}

inline std::vector<float> f32_parse(const std::uint8_t* p, size_t bytes) {
  if (bytes % 4) throw ModelFileError(ModelFileErrorCode::CorruptData, "odd f32 payload");
  std::vector<float> out(bytes / 4);
  for (size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(p[4 * i + static_cast<size_t>(k)])
                                     << (8 * k);
    std::memcpy(&out[i], &u, 4);
  }
  return out;
}

inline std::vector<std::uint8_t> assemble(const nlohmann::json& manifest,
                                          const std::vector<std::uint8_t>& region) {
  const std::string mtext = manifest.dump();
  std::vector<std::uint8_t> file;
  file.reserve(20 + mtext.size() + region.size());
  for (char c : kModelMagic) file.push_back(static_cast<std::uint8_t>(c));
  for (int k = 0; k < 4; ++k) file.push_back(static_cast<std::uint8_t>(kModelVersion >> (8 * k)));
  const std::uint64_t mlen = mtext.size();
  for (int k = 0; k < 8; ++k) file.push_back(static_cast<std::uint8_t>(mlen >> (8 * k)));
  file.insert(file.end(), mtext.begin(), mtext.end());
  file.insert(file.end(), region.begin(), region.end());
  return file;
}

struct ParsedFile {
  nlohmann::json manifest;
  const std::uint8_t* region = nullptr;
  size_t region_len = 0;
};

inline ParsedFile parse_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 20) throw ModelFileError(ModelFileErrorCode::Truncated, "file too short");
  if (std::memcmp(bytes.data(), kModelMagic.data(), 8) != 0)
    throw ModelFileError(ModelFileErrorCode::BadMagic, "not a model file");
  std::uint32_t version = 0;
  for (int k = 0; k < 4; ++k) version |= static_cast<std::uint32_t>(bytes[8 + k]) << (8 * k);
  if (version != kModelVersion)
    throw ModelFileError(ModelFileErrorCode::VersionMismatch,
                         "unsupported format version " + std::to_string(version));
  std::uint64_t mlen = 0;
  for (int k = 0; k < 8; ++k) mlen |= static_cast<std::uint64_t>(bytes[12 + k]) << (8 * k);
  if (20 + mlen > bytes.size())
    throw ModelFileError(ModelFileErrorCode::Truncated, "manifest extends past end of file");
  ParsedFile pf;
  try {
    pf.manifest = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 +
                                                                static_cast<std::ptrdiff_t>(mlen));
  } catch (const nlohmann::json::exception& e) {
    throw ModelFileError(ModelFileErrorCode::BadManifest, e.what());
  }
  pf.region = bytes.data() + 20 + mlen;
  pf.region_len = bytes.size() - 20 - mlen;
  return pf;
}

/// Locate, CRC-check and return one blob from the region.
inline std::pair<const std::uint8_t*, size_t> fetch_blob(const ParsedFile& pf,
                                                         const nlohmann::json& entry) {
  const auto off = entry.at("offset_in_region").get<std::uint64_t>();
  const auto len = entry.at("length").get<std::uint64_t>();
  if (off + len + 4 > pf.region_len)
    throw ModelFileError(ModelFileErrorCode::Truncated,
                         "blob " + entry.at("name").get<std::string>() + " out of bounds");
  const std::uint8_t* p = pf.region + off;
  std::uint32_t want = 0;
  for (int k = 0; k < 4; ++k)
    want |= static_cast<std::uint32_t>(p[len + static_cast<std::uint64_t>(k)]) << (8 * k);
  if (crc32(p, len) != want)
    throw ModelFileError(ModelFileErrorCode::CrcMismatch,
                         "checksum failure in " + entry.at("name").get<std::string>());
  return {p, len};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Quantized model serialization
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> save_model(const QuantizedModel& m) {
  detail::BlobWriter w;
  for (size_t i = 0; i < m.arch.layers.size(); ++i) {
    const LayerSpec& l = m.arch.layers[i];
    const FrozenLayer& f = m.layers[i];
    const int li = static_cast<int>(i);
    const std::string base = "layer" + std::to_string(i) + ".";
    switch (l.kind) {
      case LayerKind::ConvPointwise: {
        const PackedTrits packed = pack_trits(f.tern.trits);
        w.add(base + "trits", li, "trits_b3", packed.bytes, packed.count, &f.tern.shape.dims);
        w.add(base + "alpha", li, "f16", detail::f16_payload(f.tern.alpha), f.tern.alpha.size());
        break;
      }
      case LayerKind::ConvDense:
      case LayerKind::ConvDepthwise:
      case LayerKind::Linear: {
        std::vector<std::uint8_t> raw(f.w8.values.size());
        std::memcpy(raw.data(), f.w8.values.data(), raw.size());
        w.add(base + "w8", li, "int8", raw, f.w8.values.size(), &f.w8.shape.dims);
        w.add(base + "beta", li, "f16", detail::f16_payload(f.w8.scale), f.w8.scale.size());
        if (!f.bias.empty())
          w.add(base + "bias", li, "f16", detail::f16_payload(f.bias), f.bias.size());
        break;
      }
      case LayerKind::BatchNorm:
        w.add(base + "bn_scale", li, "f16", detail::f16_payload(f.bn_scale), f.bn_scale.size());
        w.add(base + "bn_shift", li, "f16", detail::f16_payload(f.bn_shift), f.bn_shift.size());
        break;
      case LayerKind::Activation:
        if (!f.slopes.empty())
          w.add(base + "slopes", li, "f16", detail::f16_payload(f.slopes), f.slopes.size());
        break;
      default:
        break;
    }
  }
  nlohmann::json manifest;
  manifest["format_version"] = kModelVersion;
  manifest["kind"] = "quantized";
  manifest["arch"] = arch_to_json(m.arch);
  manifest["tensors"] = std::move(w.directory);
  return detail::assemble(manifest, w.region);
}

inline QuantizedModel load_model(const std::vector<std::uint8_t>& bytes) {
  const detail::ParsedFile pf = detail::parse_container(bytes);
  if (pf.manifest.value("kind", "quantized") != "quantized")
    throw ModelFileError(ModelFileErrorCode::BadManifest, "not a quantized model file");
  QuantizedModel m;
  m.arch = arch_from_json(pf.manifest.at("arch"));
  m.layers.resize(m.arch.layers.size());
  try {
    for (const auto& e : pf.manifest.at("tensors")) {
      const int li = e.at("layer").get<int>();
      if (li < 0 || li >= static_cast<int>(m.layers.size()))
        throw ModelFileError(ModelFileErrorCode::BadManifest, "tensor references bad layer");
      FrozenLayer& f = m.layers[static_cast<size_t>(li)];
      const std::string name = e.at("name").get<std::string>();
      const std::string dtype = e.at("dtype").get<std::string>();
      auto [p, len] = detail::fetch_blob(pf, e);
      const std::string field = name.substr(name.find('.') + 1);
      if (dtype == "trits_b3") {
        PackedTrits packed;
        packed.count = e.at("count").get<std::uint64_t>();
        packed.bytes.assign(p, p + len);
        f.tern.trits = unpack_trits(packed);
        f.tern.shape = Shape(e.at("shape").get<std::vector<int>>());
      } else if (dtype == "int8") {
        f.w8.values.resize(len);
        std::memcpy(f.w8.values.data(), p, len);
        f.w8.shape = Shape(e.at("shape").get<std::vector<int>>());
        f.w8.scale_kind = ScaleKind::PerChannel;
      } else if (dtype == "f16") {
        auto vals = detail::f16_parse(p, len);
        if (field == "alpha") f.tern.alpha = std::move(vals);
        else if (field == "beta") f.w8.scale = std::move(vals);
        else if (field == "bias") f.bias = std::move(vals);
        else if (field == "bn_scale") f.bn_scale = std::move(vals);
        else if (field == "bn_shift") f.bn_shift = std::move(vals);
        else if (field == "slopes") f.slopes = std::move(vals);
        // unknown fields are ignored for forward compatibility
      } else {
        throw ModelFileError(ModelFileErrorCode::BadManifest, "unknown dtype " + dtype);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ModelFileError(ModelFileErrorCode::BadManifest, e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Float checkpoints (master weights), same container with dtype f32
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> save_float_params(const ArchSpec& a, const ParamState& p) {
  detail::BlobWriter w;
  const auto add_vec = [&](const std::string& name, int li, const std::vector<float>& v) {
    if (!v.empty()) w.add(name, li, "f32", detail::f32_payload(v.data(), v.size()), v.size());
  };
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const LayerParams& lp = p.layers[i];
    const int li = static_cast<int>(i);
    const std::string base = "layer" + std::to_string(i) + ".";
    if (!lp.weight.data.empty())
      w.add(base + "weight", li, "f32",
            detail::f32_payload(lp.weight.data.data(), lp.weight.data.size()),
            lp.weight.data.size(), &lp.weight.shape.dims);
    add_vec(base + "bias", li, lp.bias);
    add_vec(base + "gamma", li, lp.gamma);
    add_vec(base + "beta", li, lp.beta);
    add_vec(base + "run_mean", li, lp.run_mean);
    add_vec(base + "run_var", li, lp.run_var);
    add_vec(base + "slopes", li, lp.slopes);
  }
  nlohmann::json manifest;
  manifest["format_version"] = kModelVersion;
  manifest["kind"] = "float_checkpoint";
  manifest["arch"] = arch_to_json(a);
  manifest["tensors"] = std::move(w.directory);
  return detail::assemble(manifest, w.region);
}

inline std::pair<ArchSpec, ParamState> load_float_params(const std::vector<std::uint8_t>& bytes) {
  const detail::ParsedFile pf = detail::parse_container(bytes);
  if (pf.manifest.value("kind", "") != "float_checkpoint")
    throw ModelFileError(ModelFileErrorCode::BadManifest, "not a float checkpoint");
  ArchSpec a = arch_from_json(pf.manifest.at("arch"));
  ParamState p;
  p.layers.resize(a.layers.size());
  for (const auto& e : pf.manifest.at("tensors")) {
    const int li = e.at("layer").get<int>();
    if (li < 0 || li >= static_cast<int>(p.layers.size()))
      throw ModelFileError(ModelFileErrorCode::BadManifest, "tensor references bad layer");
    LayerParams& lp = p.layers[static_cast<size_t>(li)];
    const std::string name = e.at("name").get<std::string>();
    const std::string field = name.substr(name.find('.') + 1);
    auto [ptr, len] = detail::fetch_blob(pf, e);
    auto vals = detail::f32_parse(ptr, len);
    if (field == "weight")
      lp.weight = FloatTensor(Shape(e.at("shape").get<std::vector<int>>()), std::move(vals));
    else if (field == "bias") lp.bias = std::move(vals);
    else if (field == "gamma") lp.gamma = std::move(vals);
    else if (field == "beta") lp.beta = std::move(vals);
    else if (field == "run_mean") lp.run_mean = std::move(vals);
    else if (field == "run_var") lp.run_var = std::move(vals);
    else if (field == "slopes") lp.slopes = std::move(vals);
  }
  return {std::move(a), std::move(p)};
}

// ---------------------------------------------------------------------------
// File I/O (atomic write: temp file + rename)
// ---------------------------------------------------------------------------

inline void write_bytes_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is),
                                   std::istreambuf_iterator<char>());
}

/// Size of the blob region (payloads + per-blob CRCs) of a serialized model,
/// for cross-checking against the analytic storage estimate.
inline std::uint64_t blob_region_size(const std::vector<std::uint8_t>& bytes) {
  const detail::ParsedFile pf = detail::parse_container(bytes);
  return pf.region_len;
}

}  // namespace prom
