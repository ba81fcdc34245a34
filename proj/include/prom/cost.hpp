#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "prom/arch.hpp"

namespace prom {

// ---------------------------------------------------------------------------
// Operation counting
// ---------------------------------------------------------------------------

enum class EnergyDType { Int8, Int32, Fp16, Fp32 };

inline const char* to_string(EnergyDType t) {
  switch (t) {
    case EnergyDType::Int8: return "int8";
    case EnergyDType::Int32: return "int32";
    case EnergyDType::Fp16: return "fp16";
    case EnergyDType::Fp32: return "fp32";
  }
  return "?";
}

inline EnergyDType dtype_from_string(const std::string& s) {
  if (s == "int8") return EnergyDType::Int8;
  if (s == "int32") return EnergyDType::Int32;
  if (s == "fp16") return EnergyDType::Fp16;
  if (s == "fp32") return EnergyDType::Fp32;
  throw std::invalid_argument("unknown data type tag: " + s);
}

/// Storage widths in bits. Ternary weights carry log2(3) bits of information.
enum class ParamWidth { Trit, B2, B4, B8, B16, B32 };

inline double bits_of(ParamWidth w) {
  switch (w) {
    case ParamWidth::Trit: return 1.5849625007211562;
    case ParamWidth::B2: return 2.0;
    case ParamWidth::B4: return 4.0;
    case ParamWidth::B8: return 8.0;
    case ParamWidth::B16: return 16.0;
    case ParamWidth::B32: return 32.0;
  }
  return 0.0;
}

struct LayerOps {
  int index = 0;
  LayerKind kind = LayerKind::ConvDense;
  QuantPolicy policy = QuantPolicy::Float;
  std::uint64_t macs = 0;
  std::map<EnergyDType, std::uint64_t> adds;
  std::map<EnergyDType, std::uint64_t> muls;
  std::map<ParamWidth, std::uint64_t> params;
};

struct OpCounts {
  std::vector<LayerOps> layers;

  std::uint64_t total_macs() const {
    std::uint64_t n = 0;
    for (const auto& l : layers) n += l.macs;
    return n;
  }
};

/// Weight bit-width override used by the int4/int2 comparison modes; the
/// operation counts themselves stay int8 (energy is rescaled separately).
struct CountOptions {
  std::optional<ParamWidth> int8_weight_width;
};

/// Count one forward pass at batch 1. Per conv layer the MAC count is
/// C_out * (C_in/groups) * K^2 * H_out * W_out; the linear layer is a K=1
/// conv. Accumulation adds are charged at the operand type (one int8 add per
/// MAC for integer layers) and a ternary pointwise layer contributes pure
/// int8 adds with zero multiplications. Elementwise layers (BatchNorm,
/// activations, pooling, residual adds) contribute no counted operations;
/// their parameters are still tracked for storage at fp16.
inline OpCounts count_ops(const ArchSpec& a) {
  const auto shapes = infer_shapes(a, 1);
  OpCounts oc;
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const LayerSpec& l = a.layers[i];
    LayerOps ops;
    ops.index = static_cast<int>(i);
    ops.kind = l.kind;
    ops.policy = l.policy;
    if (is_counted(l.kind)) {
      const Shape& out = shapes[i].out;
      const std::int64_t spatial = out.rank() == 4 ? static_cast<std::int64_t>(out[2]) * out[3] : 1;
      const std::int64_t weights =
          l.kind == LayerKind::Linear
              ? static_cast<std::int64_t>(l.out_ch) * l.in_ch
              : static_cast<std::int64_t>(l.out_ch) * (l.in_ch / l.groups()) * l.kernel * l.kernel;
      ops.macs = static_cast<std::uint64_t>(weights * spatial);
      switch (l.policy) {
        case QuantPolicy::Float:
          ops.adds[EnergyDType::Fp16] = ops.macs;
          ops.muls[EnergyDType::Fp16] = ops.macs;
          ops.params[ParamWidth::B16] = static_cast<std::uint64_t>(weights);
          break;
        case QuantPolicy::Int8:
          ops.adds[EnergyDType::Int8] = ops.macs;
          ops.muls[EnergyDType::Int8] = ops.macs;
          ops.params[ParamWidth::B8] = static_cast<std::uint64_t>(weights);
          ops.params[ParamWidth::B16] += static_cast<std::uint64_t>(l.out_ch);  // beta
          break;
        case QuantPolicy::Ternary:
          ops.adds[EnergyDType::Int8] = ops.macs;
          ops.params[ParamWidth::Trit] = static_cast<std::uint64_t>(weights);
          ops.params[ParamWidth::B16] += static_cast<std::uint64_t>(l.out_ch);  // alpha
          break;
      }
      if (l.kind == LayerKind::Linear)
        ops.params[ParamWidth::B16] += static_cast<std::uint64_t>(l.out_ch);  // bias
    } else if (l.kind == LayerKind::BatchNorm) {
      ops.params[ParamWidth::B16] = 2ULL * static_cast<std::uint64_t>(l.out_ch);
    } else if (l.kind == LayerKind::Activation && l.act == ActKind::Prelu) {
      ops.params[ParamWidth::B16] = static_cast<std::uint64_t>(l.out_ch);
    }
    oc.layers.push_back(std::move(ops));
  }
  return oc;
}

// ---------------------------------------------------------------------------
// Energy tables
// ---------------------------------------------------------------------------

struct OpEnergy {
  double add_fj = 0.0;
  double mul_fj = 0.0;
};

struct EnergyTable {
  std::string node;
  std::map<EnergyDType, OpEnergy> entries;

  const OpEnergy& at(EnergyDType t) const {
    auto it = entries.find(t);
    if (it == entries.end())
      throw std::invalid_argument("energy table '" + node + "' has no entry for type " +
                                  to_string(t));
    return it->second;
  }
};

inline void check_table(const EnergyTable& t) {
  for (const auto& [ty, e] : t.entries) {
    if (e.add_fj <= 0.0 || e.mul_fj <= 0.0)
      throw std::invalid_argument("energy table '" + t.node + "': non-positive entry for " +
                                  to_string(ty));
    if (e.mul_fj < e.add_fj)
      throw std::invalid_argument("energy table '" + t.node + "': mul < add for " + to_string(ty));
  }
}

/// 45nm defaults follow the widely used per-operation measurements for that
/// node; 7nm defaults are transcribed estimates (see docs/energy_tables.md)
/// and can be overridden with a JSON table file.
inline EnergyTable default_energy_table(const std::string& node) {
  EnergyTable t;
  t.node = node;
  if (node == "45nm") {
    t.entries[EnergyDType::Int8] = {30.0, 200.0};
    t.entries[EnergyDType::Int32] = {100.0, 3100.0};
    t.entries[EnergyDType::Fp16] = {400.0, 1100.0};
    t.entries[EnergyDType::Fp32] = {900.0, 3700.0};
  } else if (node == "7nm") {
    t.entries[EnergyDType::Int8] = {7.0, 70.0};
    t.entries[EnergyDType::Int32] = {24.0, 720.0};
    t.entries[EnergyDType::Fp16] = {160.0, 340.0};
    t.entries[EnergyDType::Fp32] = {380.0, 1310.0};
  } else {
    throw std::invalid_argument("unknown process node: " + node);
  }
  return t;
}

/// Parse the flat JSON schema [{node, type, add_fj, mul_fj}, ...] into one
/// table per node.
inline std::map<std::string, EnergyTable> parse_energy_tables(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("energy table JSON: expected a top-level array");
  std::map<std::string, EnergyTable> out;
  for (const auto& row : j) {
    const std::string node = row.at("node").get<std::string>();
    const EnergyDType ty = dtype_from_string(row.at("type").get<std::string>());
    auto& t = out[node];
    t.node = node;
    t.entries[ty] = {row.at("add_fj").get<double>(), row.at("mul_fj").get<double>()};
  }
  for (const auto& [_, t] : out) check_table(t);
  return out;
}

inline std::map<std::string, EnergyTable> load_energy_tables(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open energy table file: " + path);
  nlohmann::json j;
  in >> j;
  return parse_energy_tables(j);
}

// ---------------------------------------------------------------------------
// Energy and storage estimation
// ---------------------------------------------------------------------------

constexpr double kFemtoPerMicro = 1e9;
constexpr double kBytesPerMb = 1e6;

inline double layer_energy_uj(const LayerOps& l, const EnergyTable& t) {
  double fj = 0.0;
  for (const auto& [ty, n] : l.adds) fj += static_cast<double>(n) * t.at(ty).add_fj;
  for (const auto& [ty, n] : l.muls) fj += static_cast<double>(n) * t.at(ty).mul_fj;
  return fj / kFemtoPerMicro;
}

inline double energy_uj(const OpCounts& oc, const EnergyTable& t) {
  double uj = 0.0;
  for (const auto& l : oc.layers) uj += layer_energy_uj(l, t);
  return uj;
}

enum class SplitBy { LayerKind, OpKind };

/// Percentage breakdown of total energy, either by layer kind (pointwise /
/// depthwise / dense / linear) or by operation kind (add / mul).
inline std::map<std::string, double> energy_split(const OpCounts& oc, const EnergyTable& t,
                                                  SplitBy by) {
  std::map<std::string, double> acc;
  double total = 0.0;
  for (const auto& l : oc.layers) {
    if (by == SplitBy::LayerKind) {
      const double e = layer_energy_uj(l, t);
      if (e > 0.0) acc[to_string(l.kind)] += e;
      total += e;
    } else {
      double ea = 0.0, em = 0.0;
      for (const auto& [ty, n] : l.adds) ea += static_cast<double>(n) * t.at(ty).add_fj;
      for (const auto& [ty, n] : l.muls) em += static_cast<double>(n) * t.at(ty).mul_fj;
      acc["add"] += ea / kFemtoPerMicro;
      acc["mul"] += em / kFemtoPerMicro;
      total += (ea + em) / kFemtoPerMicro;
    }
  }
  if (total > 0.0)
    for (auto& [_, v] : acc) v = 100.0 * v / total;
  return acc;
}

/// Total energy under the sub-8-bit assumption: int8 operation energy halves
/// per step 8 -> 4 -> 2; other data types are unaffected.
inline double sub8_energy_uj(const OpCounts& oc, int bits, const EnergyTable& t) {
  if (bits != 8 && bits != 4 && bits != 2)
    throw std::invalid_argument("sub8_energy: bits must be 8, 4 or 2");
  const double divisor = 8.0 / bits;  // 1, 2, 4
  double uj = 0.0;
  for (const auto& l : oc.layers) {
    for (const auto& [ty, n] : l.adds) {
      const double e = static_cast<double>(n) * t.at(ty).add_fj;
      uj += (ty == EnergyDType::Int8 ? e / divisor : e) / kFemtoPerMicro;
    }
    for (const auto& [ty, n] : l.muls) {
      const double e = static_cast<double>(n) * t.at(ty).mul_fj;
      uj += (ty == EnergyDType::Int8 ? e / divisor : e) / kFemtoPerMicro;
    }
  }
  return uj;
}

inline double layer_storage_mb(const LayerOps& l) {
  double bits = 0.0;
  for (const auto& [w, n] : l.params) bits += bits_of(w) * static_cast<double>(n);
  return bits / 8.0 / kBytesPerMb;
}

/// Storage in decimal megabytes: ternary weights at log2(3) bits, int8
/// weights at 8 bits, scale vectors and float parameters (folded BatchNorm
/// affine pairs, PReLU slopes, the classifier bias) at 16 bits.
inline double storage_mb(const ArchSpec& a) {
  double mb = 0.0;
  for (const auto& l : count_ops(a).layers) mb += layer_storage_mb(l);
  return mb;
}

// ---------------------------------------------------------------------------
// Cost profiles and reports
// ---------------------------------------------------------------------------

/// Quantization profile used for a cost estimate. Float16 models the
/// unquantized baseline, Prom the canonical mixed scheme (with the PReLU
/// swap), Int8/Int4/Int2 quantize every conv and the linear layer uniformly.
enum class CostProfile { Float16, Prom, Int8, Int4, Int2 };

inline const char* to_string(CostProfile p) {
  switch (p) {
    case CostProfile::Float16: return "float16";
    case CostProfile::Prom: return "prom";
    case CostProfile::Int8: return "int8";
    case CostProfile::Int4: return "int4";
    case CostProfile::Int2: return "int2";
  }
  return "?";
}

inline CostProfile cost_profile_from_string(const std::string& s) {
  if (s == "float16") return CostProfile::Float16;
  if (s == "prom") return CostProfile::Prom;
  if (s == "int8") return CostProfile::Int8;
  if (s == "int4") return CostProfile::Int4;
  if (s == "int2") return CostProfile::Int2;
  throw std::invalid_argument("unknown cost profile: " + s);
}

inline int sub8_bits(CostProfile p) {
  return p == CostProfile::Int4 ? 4 : p == CostProfile::Int2 ? 2 : 8;
}

/// Rewrite layer policies for a profile. The canonical (PROM) assignment is
/// what the builders emit; other profiles override it uniformly.
inline ArchSpec apply_cost_profile(ArchSpec a, CostProfile p) {
  switch (p) {
    case CostProfile::Prom:
      return apply_prelu_swap(std::move(a));
    case CostProfile::Float16:
      for (auto& l : a.layers)
        if (is_counted(l.kind)) l.policy = QuantPolicy::Float;
      return a;
    case CostProfile::Int8:
    case CostProfile::Int4:
    case CostProfile::Int2:
      for (auto& l : a.layers)
        if (is_counted(l.kind)) l.policy = QuantPolicy::Int8;
      return a;
  }
  return a;
}

/// Storage override for the comparison modes: int4/int2 store the int8-policy
/// weights at 4/2 bits instead.
inline double profile_storage_mb(const ArchSpec& profiled, CostProfile p) {
  if (p != CostProfile::Int4 && p != CostProfile::Int2) return storage_mb(profiled);
  const ParamWidth w = p == CostProfile::Int4 ? ParamWidth::B4 : ParamWidth::B2;
  double mb = 0.0;
  for (auto l : count_ops(profiled).layers) {
    auto it = l.params.find(ParamWidth::B8);
    if (it != l.params.end()) {
      l.params[w] += it->second;
      l.params.erase(ParamWidth::B8);
    }
    mb += layer_storage_mb(l);
  }
  return mb;
}

struct CostRow {
  int layer = -1;  // -1 marks the TOTAL row
  std::string kind;
  std::string policy;
  std::uint64_t macs = 0;
  std::uint64_t adds = 0;
  std::uint64_t muls = 0;
  std::string op_dtype;  // dtype of the counted ops ("-" if none)
  double energy_45nm_uj = 0.0;
  double energy_7nm_uj = 0.0;
  double size_mb = 0.0;

  bool operator==(const CostRow&) const = default;
};

struct CostReport {
  std::string arch;
  double width_mult = 1.0;
  int input_res = 0;
  std::string profile;
  std::vector<CostRow> rows;  // one per layer, TOTAL last
  std::map<std::string, double> split_by_kind_45nm;  // percentages
  std::map<std::string, double> split_by_op_45nm;

  bool operator==(const CostReport&) const = default;

  const CostRow& total() const { return rows.back(); }
};

inline CostReport make_cost_report(const ArchSpec& base, CostProfile profile,
                                   const EnergyTable& t45, const EnergyTable& t7) {
  const ArchSpec a = apply_cost_profile(base, profile);
  const OpCounts oc = count_ops(a);
  const int bits = sub8_bits(profile);
  const double divisor = 8.0 / bits;

  CostReport r;
  r.arch = a.name;
  r.width_mult = a.width_mult;
  r.input_res = a.input_shape.rank() == 3 ? a.input_shape[1] : 0;
  r.profile = to_string(profile);

  CostRow tot;
  tot.kind = "TOTAL";
  tot.policy = r.profile;
  tot.op_dtype = "-";
  for (const auto& l : oc.layers) {
    CostRow row;
    row.layer = l.index;
    row.kind = to_string(l.kind);
    row.policy = to_string(l.policy);
    row.macs = l.macs;
    row.op_dtype = "-";
    for (const auto& [ty, n] : l.adds) {
      row.adds += n;
      row.op_dtype = to_string(ty);
    }
    for (const auto& [ty, n] : l.muls) row.muls += n;
    const bool scaled = l.adds.count(EnergyDType::Int8) || l.muls.count(EnergyDType::Int8);
    const double f = scaled ? 1.0 / divisor : 1.0;
    // int8 halving applies uniformly to a layer's int8 ops
    row.energy_45nm_uj = layer_energy_uj(l, t45) * f;
    row.energy_7nm_uj = layer_energy_uj(l, t7) * f;
    LayerOps lp = l;
    if (bits != 8) {
      auto it = lp.params.find(ParamWidth::B8);
      if (it != lp.params.end()) {
        lp.params[bits == 4 ? ParamWidth::B4 : ParamWidth::B2] += it->second;
        lp.params.erase(ParamWidth::B8);
      }
    }
    row.size_mb = layer_storage_mb(lp);

    tot.macs += row.macs;
    tot.adds += row.adds;
    tot.muls += row.muls;
    tot.energy_45nm_uj += row.energy_45nm_uj;
    tot.energy_7nm_uj += row.energy_7nm_uj;
    tot.size_mb += row.size_mb;
    r.rows.push_back(std::move(row));
  }
  r.rows.push_back(std::move(tot));
  r.split_by_kind_45nm = energy_split(oc, t45, SplitBy::LayerKind);
  r.split_by_op_45nm = energy_split(oc, t45, SplitBy::OpKind);
  return r;
}

// ---------------------------------------------------------------------------
// Report emission (CSV and JSON; schemas in docs/report_schema.md)
// ---------------------------------------------------------------------------

namespace detail {
inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}
}  // namespace detail

inline std::string emit_report_csv(const CostReport& r) {
  std::ostringstream os;
  os << "# arch=" << r.arch << ",width_mult=" << detail::fmt_double(r.width_mult)
     << ",input_res=" << r.input_res << ",profile=" << r.profile << "\n";
  os << "layer,kind,policy,macs,adds,muls,op_dtype,energy_45nm_uj,energy_7nm_uj,size_mb\n";
  for (const auto& row : r.rows) {
    os << (row.layer < 0 ? std::string("TOTAL") : std::to_string(row.layer)) << ','
       << (row.layer < 0 ? "TOTAL" : row.kind) << ',' << row.policy << ',' << row.macs << ','
       << row.adds << ',' << row.muls << ',' << row.op_dtype << ','
       << detail::fmt_double(row.energy_45nm_uj) << ',' << detail::fmt_double(row.energy_7nm_uj)
       << ',' << detail::fmt_double(row.size_mb) << "\n";
  }
  for (const auto& [k, v] : r.split_by_kind_45nm)
    os << "SPLIT,kind," << k << ',' << detail::fmt_double(v) << "\n";
  for (const auto& [k, v] : r.split_by_op_45nm)
    os << "SPLIT,op," << k << ',' << detail::fmt_double(v) << "\n";
  return os.str();
}

inline CostReport parse_report_csv(const std::string& text) {
  CostReport r;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream meta(line.substr(2));
      std::string kv;
      while (std::getline(meta, kv, ',')) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "arch") r.arch = val;
        else if (key == "width_mult") r.width_mult = std::stod(val);
        else if (key == "input_res") r.input_res = std::stoi(val);
        else if (key == "profile") r.profile = val;
      }
      continue;
    }
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) f.push_back(tok);
    if (f[0] == "layer") continue;  // header
    if (f[0] == "SPLIT") {
      auto& m = f[1] == "kind" ? r.split_by_kind_45nm : r.split_by_op_45nm;
      m[f[2]] = std::stod(f[3]);
      continue;
    }
    CostRow row;
    row.layer = f[0] == "TOTAL" ? -1 : std::stoi(f[0]);
    row.kind = f[1];
    row.policy = f[2];
    row.macs = std::stoull(f[3]);
    row.adds = std::stoull(f[4]);
    row.muls = std::stoull(f[5]);
    row.op_dtype = f[6];
    row.energy_45nm_uj = std::stod(f[7]);
    row.energy_7nm_uj = std::stod(f[8]);
    row.size_mb = std::stod(f[9]);
    if (row.layer < 0) row.kind = "TOTAL";
    r.rows.push_back(std::move(row));
  }
  return r;
}

inline nlohmann::json report_to_json(const CostReport& r) {
  nlohmann::json j;
  j["arch"] = r.arch;
  j["width_mult"] = r.width_mult;
  j["input_res"] = r.input_res;
  j["profile"] = r.profile;
  j["layers"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json jr;
    jr["layer"] = row.layer;
    jr["kind"] = row.kind;
    jr["policy"] = row.policy;
    jr["macs"] = row.macs;
    jr["adds"] = row.adds;
    jr["muls"] = row.muls;
    jr["op_dtype"] = row.op_dtype;
    jr["energy_45nm_uj"] = row.energy_45nm_uj;
    jr["energy_7nm_uj"] = row.energy_7nm_uj;
    jr["size_mb"] = row.size_mb;
    j["layers"].push_back(std::move(jr));
  }
  j["split_by_kind_45nm"] = r.split_by_kind_45nm;
  j["split_by_op_45nm"] = r.split_by_op_45nm;
  return j;
}

inline std::string emit_report_json(const CostReport& r) { return report_to_json(r).dump(2); }

inline CostReport parse_report_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  CostReport r;
  r.arch = j.at("arch").get<std::string>();
  r.width_mult = j.at("width_mult").get<double>();
  r.input_res = j.at("input_res").get<int>();
  r.profile = j.at("profile").get<std::string>();
  for (const auto& jr : j.at("layers")) {
    CostRow row;
    row.layer = jr.at("layer").get<int>();
    row.kind = jr.at("kind").get<std::string>();
    row.policy = jr.at("policy").get<std::string>();
    row.macs = jr.at("macs").get<std::uint64_t>();
    row.adds = jr.at("adds").get<std::uint64_t>();
    row.muls = jr.at("muls").get<std::uint64_t>();
    row.op_dtype = jr.at("op_dtype").get<std::string>();
    row.energy_45nm_uj = jr.at("energy_45nm_uj").get<double>();
    row.energy_7nm_uj = jr.at("energy_7nm_uj").get<double>();
    row.size_mb = jr.at("size_mb").get<double>();
    r.rows.push_back(std::move(row));
  }
  if (j.contains("split_by_kind_45nm"))
    r.split_by_kind_45nm = j.at("split_by_kind_45nm").get<std::map<std::string, double>>();
  if (j.contains("split_by_op_45nm"))
    r.split_by_op_45nm = j.at("split_by_op_45nm").get<std::map<std::string, double>>();
  return r;
}

}  // namespace prom
