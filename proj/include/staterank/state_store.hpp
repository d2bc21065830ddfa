#pragma once

// Layer selection, footprint accounting and the on-disk state cache.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "staterank/embedder.hpp"

namespace staterank {

// --- layer selection ------------------------------------------------------

struct LayerPreset {
  const char* name;
  std::uint32_t n_layers;
  std::vector<std::uint32_t> indices;  // empty means all layers
};

inline const std::vector<LayerPreset>& layer_presets() {
  static const std::vector<LayerPreset> presets = {
      {"12L-top-3", 12, {9, 10, 11}},
      {"12L-uniform-3a", 12, {0, 5, 11}},
      {"12L-uniform-3b", 12, {1, 6, 10}},
      {"12L-top-6", 12, {6, 7, 8, 9, 10, 11}},
      {"12L-uniform-6", 12, {0, 3, 5, 7, 9, 11}},
      {"12L-full", 12, {}},
      {"24L-top-1", 24, {23}},
      {"24L-uniform-3", 24, {1, 11, 22}},
      {"24L-top-6", 24, {18, 19, 20, 21, 22, 23}},
      {"24L-uniform-6", 24, {1, 6, 11, 15, 19, 22}},
      {"24L-full", 24, {}},
  };
  return presets;
}

struct LayerSelection {
  enum class Kind { preset, explicit_indices, uniform_generic, top_heavy, full };
  Kind kind = Kind::full;
  std::string preset_name;
  std::vector<std::uint32_t> indices;
  std::uint32_t k = 0;

  static LayerSelection preset(std::string name) { return {Kind::preset, std::move(name), {}, 0}; }
  static LayerSelection explicit_list(std::vector<std::uint32_t> idx) {
    return {Kind::explicit_indices, {}, std::move(idx), 0};
  }
  static LayerSelection uniform(std::uint32_t k) { return {Kind::uniform_generic, {}, {}, k}; }
  static LayerSelection top(std::uint32_t k) { return {Kind::top_heavy, {}, {}, k}; }
  static LayerSelection all() { return {}; }
};

namespace detail {
inline void check_layer_list(std::uint32_t L, const std::vector<std::uint32_t>& idx) {
  if (idx.empty()) throw UsageError("layer selection is empty");
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= L) throw UsageError("layer index " + std::to_string(idx[i]) + " out of range");
    if (i > 0 && idx[i] <= idx[i - 1]) throw UsageError("layer indices must be strictly increasing");
  }
}

inline std::vector<std::uint32_t> iota_layers(std::uint32_t from, std::uint32_t to) {
  std::vector<std::uint32_t> out(to - from);
  std::iota(out.begin(), out.end(), from);
  return out;
}
}  // namespace detail

inline std::vector<std::uint32_t> select_layers(std::uint32_t L, const LayerSelection& sel) {
  if (L < 1) throw UsageError("select_layers: model has no layers");
  using K = LayerSelection::Kind;
  switch (sel.kind) {
    case K::full:
      return detail::iota_layers(0, L);
    case K::preset: {
      for (const auto& p : layer_presets()) {
        if (sel.preset_name != p.name) continue;
        if (p.n_layers != L) {
          throw UsageError("preset " + sel.preset_name + " needs " + std::to_string(p.n_layers) + " layers, model has " +
                           std::to_string(L));
        }
        return p.indices.empty() ? detail::iota_layers(0, L) : p.indices;
      }
      throw UsageError("unknown layer preset: " + sel.preset_name);
    }
    case K::explicit_indices:
      detail::check_layer_list(L, sel.indices);
      return sel.indices;
    case K::top_heavy:
      if (sel.k < 1 || sel.k > L) throw UsageError("top_heavy: k must be in [1, L]");
      return detail::iota_layers(L - sel.k, L);
    case K::uniform_generic: {
      if (sel.k < 1 || sel.k > L) throw UsageError("uniform: k must be in [1, L]");
      if (sel.k == 1) return {L - 1};
      // round(i·(L−1)/(k−1)) with halves rounded up, then shift any
      // collision one slot right.
      const std::uint64_t num = L - 1, den = sel.k - 1;
      std::vector<std::uint32_t> out;
      for (std::uint64_t i = 0; i < sel.k; ++i) {
        auto idx = static_cast<std::uint32_t>((2 * i * num + den) / (2 * den));
        if (!out.empty() && idx <= out.back()) idx = out.back() + 1;
        out.push_back(idx);
      }
      detail::check_layer_list(L, out);
      return out;
    }
  }
  throw UsageError("select_layers: bad selection kind");
}

// "full", "top:3", "uniform:3", "preset:12L-top-3", "1,6,10", or a bare preset name.
inline LayerSelection parse_layer_selection(const std::string& text) {
  auto to_count = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return static_cast<std::uint32_t>(v);
    } catch (const std::exception&) {
      throw UsageError("bad layer selection: " + text);
    }
  };
  if (text == "full") return LayerSelection::all();
  const auto colon = text.find(':');
  if (colon != std::string::npos) {
    const auto head = text.substr(0, colon), tail = text.substr(colon + 1);
    if (head == "top") return LayerSelection::top(to_count(tail));
    if (head == "uniform") return LayerSelection::uniform(to_count(tail));
    if (head == "preset") return LayerSelection::preset(tail);
    throw UsageError("bad layer selection: " + text);
  }
  if (!text.empty() && text.find_first_not_of("0123456789,") == std::string::npos) {
    std::vector<std::uint32_t> idx;
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto comma = std::min(text.find(',', start), text.size());
      idx.push_back(to_count(text.substr(start, comma - start)));
      start = comma + 1;
    }
    return LayerSelection::explicit_list(std::move(idx));
  }
  return LayerSelection::preset(text);
}

// Replaces every layer's matrix state with the final layer's. Shift
// vectors stay per layer.
inline StateStack share_final_state(const StateStack& stack) {
  if (!stack.is_full_depth() || stack.states.empty()) {
    throw UsageError("share_final_state: needs a full-depth stack");
  }
  StateStack out = stack;
  const auto& last = stack.states.back().wkv;
  for (auto& s : out.states) s.wkv = last;
  return out;
}

// --- memory accounting ---------------------------------------------------

struct MemoryReport {
  std::uint64_t n_layers = 0, n_heads = 0, head_size = 0, d_model = 0, seq_len = 0, bytes_per_value = 0;
  std::uint64_t selected_layers = 0;
  std::uint64_t bytes_state = 0;     // L_sel·H·S²·b
  std::uint64_t bytes_kv = 0;        // L·2·d_model·T·b
  std::uint64_t ratio_num = 0;       // bytes_kv / bytes_state, reduced
  std::uint64_t ratio_den = 1;
  std::uint64_t bytes_shift = 0;     // token-shift vectors, not part of bytes_state

  double ratio() const { return static_cast<double>(ratio_num) / static_cast<double>(ratio_den); }
};

inline MemoryReport memory_report(std::uint64_t L, std::uint64_t H, std::uint64_t S, std::uint64_t d_model,
                                  std::uint64_t T, std::uint64_t b, std::optional<std::uint64_t> L_sel = std::nullopt) {
  if (!L || !H || !S || !d_model || !T || !b) throw UsageError("memory_report: all counts must be >= 1");
  MemoryReport r{L, H, S, d_model, T, b};
  r.selected_layers = L_sel.value_or(L);
  if (r.selected_layers < 1 || r.selected_layers > L) throw UsageError("memory_report: L_sel must be in [1, L]");
  r.bytes_state = r.selected_layers * H * S * S * b;
  r.bytes_kv = L * 2 * d_model * T * b;
  const std::uint64_t g = std::gcd(r.bytes_kv, r.bytes_state);
  r.ratio_num = r.bytes_kv / g;
  r.ratio_den = r.bytes_state / g;
  r.bytes_shift = r.selected_layers * 2 * d_model * b;
  return r;
}

// Binary megabytes to two decimals, printf rounding.
inline std::string format_mb(std::uint64_t bytes) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", static_cast<double>(bytes) / 1048576.0);
  return buf;
}

inline std::string format_ratio(const MemoryReport& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", r.ratio());
  std::string s = buf;
  while (s.back() == '0') s.pop_back();
  if (s.back() == '.') s.pop_back();
  return s;
}

struct FootprintRow {
  const char* label;
  std::uint32_t n_layers, d_model, n_heads, head_size;
};

// Reference model shapes for the state vs. KV footprint table (T = 2000, 2-byte values).
inline const std::vector<FootprintRow>& footprint_rows() {
  static const std::vector<FootprintRow> rows = {
      {"0.1B", 12, 768, 12, 64}, {"0.4B", 24, 1024, 16, 64}, {"1.5B", 24, 2048, 32, 64},
      {"~3B", 32, 2560, 40, 64}, {"~7B", 32, 4096, 64, 64},
  };
  return rows;
}

// --- cache file ------------------------------------------------------------

enum class CacheDtype : std::uint8_t { f64 = 0, f32 = 1, f16 = 2 };

inline std::size_t dtype_bytes(CacheDtype d) {
  switch (d) {
    case CacheDtype::f64: return 8;
    case CacheDtype::f32: return 4;
    case CacheDtype::f16: return 2;
  }
  throw UsageError("unknown cache dtype");
}

inline CacheDtype parse_dtype(const std::string& s) {
  if (s == "f64") return CacheDtype::f64;
  if (s == "f32") return CacheDtype::f32;
  if (s == "f16") return CacheDtype::f16;
  throw UsageError("unknown cache dtype: " + s);
}

struct CacheHeader {
  std::uint64_t fingerprint = 0;
  std::uint32_t n_layers = 0;
  std::uint32_t n_heads = 0;
  std::uint32_t head_size = 0;
  std::uint32_t d_model = 0;
  std::vector<std::uint32_t> layer_indices;
  CacheDtype dtype = CacheDtype::f32;
  bool has_embeddings = false;

  std::size_t entry_bytes() const {
    const std::size_t per_layer = std::size_t{n_heads} * head_size * head_size + 2 * std::size_t{d_model};
    std::size_t values = layer_indices.size() * per_layer;
    if (has_embeddings) values += d_model;
    return 8 + values * dtype_bytes(dtype);
  }

  friend bool operator==(const CacheHeader&, const CacheHeader&) = default;
};

inline CacheHeader make_cache_header(const ModelWeights& model, std::vector<std::uint32_t> layer_indices,
                                     CacheDtype dtype = CacheDtype::f32, bool with_embeddings = false) {
  const auto& c = model.config;
  detail::check_layer_list(c.n_layers, layer_indices);
  return {model.fingerprint(), c.n_layers,          c.n_heads, c.head_size, c.d_model,
          std::move(layer_indices), dtype, with_embeddings};
}

struct CacheEntry {
  std::string doc_id;
  StateStack state;
  std::optional<Embedding> embedding;
  std::uint64_t token_count = 0;
};

inline void check_fingerprint(const CacheHeader& header, const ModelWeights& model) {
  if (header.fingerprint != model.fingerprint()) {
    throw DataError("state cache was produced by a different model (fingerprint mismatch)");
  }
}

inline constexpr std::uint16_t kCacheVersion = 1;

namespace detail {

inline void write_cached(ByteWriter& w, std::span<const double> values, CacheDtype d) {
  for (double v : values) {
    switch (d) {
      case CacheDtype::f64: w.f64(v); break;
      case CacheDtype::f32: w.f32(static_cast<float>(v)); break;
      case CacheDtype::f16: w.f16(v); break;
    }
  }
}

inline void read_cached(ByteReader& r, std::span<double> values, CacheDtype d) {
  for (double& v : values) {
    switch (d) {
      case CacheDtype::f64: v = r.f64(); break;
      case CacheDtype::f32: v = r.f32(); break;
      case CacheDtype::f16: v = r.f16(); break;
    }
  }
}

inline std::size_t table_bytes(std::span<const std::string> ids) {
  std::size_t n = 0;
  for (const auto& id : ids) n += 2 + id.size() + 8;
  return n;
}

inline std::size_t fixed_header_bytes(std::size_t k_sel) {
  return 4 + 2 + 2 + 8 + 2 + 2 + 2 + 4 + 2 + 2 * k_sel + 1 + 8;
}

inline void check_entry(const CacheHeader& h, const CacheEntry& e) {
  if (e.doc_id.empty()) throw UsageError("cache entry with empty doc_id");
  if (e.doc_id.size() > 0xffff) throw UsageError("doc_id too long: " + e.doc_id.substr(0, 32));
  const auto& s = e.state;
  if (s.config_fingerprint != h.fingerprint) throw DataError("entry " + e.doc_id + ": fingerprint differs from header");
  if (s.layer_indices != h.layer_indices || s.states.size() != h.layer_indices.size()) {
    throw UsageError("entry " + e.doc_id + ": layer indices differ from header");
  }
  for (const auto& ls : s.states) {
    if (ls.wkv.size() != h.n_heads || ls.tm_shift.dim() != h.d_model || ls.cm_shift.dim() != h.d_model) {
      throw ShapeError("entry " + e.doc_id + ": state shape differs from header");
    }
    for (const auto& m : ls.wkv) {
      if (m.rows() != h.head_size || m.cols() != h.head_size) throw ShapeError("entry " + e.doc_id + ": bad head size");
    }
  }
  if (h.has_embeddings != e.embedding.has_value()) {
    throw UsageError("entry " + e.doc_id + ": embedding presence differs from header");
  }
  if (e.embedding && e.embedding->values.dim() != h.d_model) {
    throw ShapeError("entry " + e.doc_id + ": embedding width must equal d_model");
  }
}

inline void write_header(ByteWriter& w, const CacheHeader& h, std::uint64_t count) {
  w.bytes("SCR1");
  w.u16(kCacheVersion);
  w.u16(h.has_embeddings ? 1 : 0);
  w.u64(h.fingerprint);
  w.u16(static_cast<std::uint16_t>(h.n_layers));
  w.u16(static_cast<std::uint16_t>(h.n_heads));
  w.u16(static_cast<std::uint16_t>(h.head_size));
  w.u32(h.d_model);
  w.u16(static_cast<std::uint16_t>(h.layer_indices.size()));
  for (auto i : h.layer_indices) w.u16(static_cast<std::uint16_t>(i));
  w.u8(static_cast<std::uint8_t>(h.dtype));
  w.u64(count);
}

inline CacheHeader read_header(ByteReader& r, std::uint64_t& count) {
  check_magic(r, "SCR1", "state cache");
  if (r.u16() != kCacheVersion) throw FormatError("state cache: unsupported version");
  const auto flags = r.u16();
  if (flags & ~1u) throw FormatError("state cache: unknown flags");
  CacheHeader h;
  h.has_embeddings = flags & 1u;
  h.fingerprint = r.u64();
  h.n_layers = r.u16();
  h.n_heads = r.u16();
  h.head_size = r.u16();
  h.d_model = r.u32();
  const auto k_sel = r.u16();
  for (std::uint16_t i = 0; i < k_sel; ++i) h.layer_indices.push_back(r.u16());
  const auto dtype = r.u8();
  if (dtype > 2) throw FormatError("state cache: unknown dtype code");
  h.dtype = static_cast<CacheDtype>(dtype);
  count = r.u64();
  if (h.n_layers == 0 || h.n_heads == 0 || h.head_size == 0 || h.d_model == 0) {
    throw FormatError("state cache: zero dimension in header");
  }
  try {
    check_layer_list(h.n_layers, h.layer_indices);
  } catch (const UsageError& e) {
    throw FormatError(std::string("state cache: ") + e.what());
  }
  return h;
}

inline CacheEntry read_entry_payload(ByteReader& r, const CacheHeader& h, std::string doc_id) {
  CacheEntry e;
  e.doc_id = std::move(doc_id);
  e.token_count = r.u64();
  if (h.has_embeddings) {
    Vector v(h.d_model);
    read_cached(r, v.span(), h.dtype);
    e.embedding = Embedding{std::move(v), true};
  }
  e.state.layer_indices = h.layer_indices;
  e.state.config_fingerprint = h.fingerprint;
  e.state.token_count = e.token_count;
  e.state.source_layers = h.n_layers;
  for (std::size_t l = 0; l < h.layer_indices.size(); ++l) {
    auto ls = LayerState::zeros(h.n_heads, h.head_size, h.d_model);
    for (auto& m : ls.wkv) read_cached(r, m.span(), h.dtype);
    read_cached(r, ls.tm_shift.span(), h.dtype);
    read_cached(r, ls.cm_shift.span(), h.dtype);
    e.state.states.push_back(std::move(ls));
  }
  return e;
}

}  // namespace detail

// Exact file length for a cache holding these doc ids.
inline std::size_t predict_cache_size(const CacheHeader& h, std::span<const std::string> doc_ids) {
  return detail::fixed_header_bytes(h.layer_indices.size()) + detail::table_bytes(doc_ids) +
         doc_ids.size() * h.entry_bytes() + 4;
}

inline std::vector<std::uint8_t> serialize_cache(const CacheHeader& h, const std::vector<CacheEntry>& entries) {
  detail::check_layer_list(h.n_layers, h.layer_indices);
  std::set<std::string> seen;
  for (const auto& e : entries) {
    detail::check_entry(h, e);
    if (!seen.insert(e.doc_id).second) throw UsageError("duplicate doc_id in cache: " + e.doc_id);
  }
  ByteWriter w;
  detail::write_header(w, h, entries.size());
  std::vector<std::size_t> slots;
  for (const auto& e : entries) {
    w.u16(static_cast<std::uint16_t>(e.doc_id.size()));
    w.bytes(e.doc_id);
    slots.push_back(w.size());
    w.u64(0);
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    w.patch_u64(slots[i], w.size());
    w.u64(e.token_count);
    if (e.embedding) detail::write_cached(w, e.embedding->values.span(), h.dtype);
    for (const auto& ls : e.state.states) {
      for (const auto& m : ls.wkv) detail::write_cached(w, m.span(), h.dtype);
      detail::write_cached(w, ls.tm_shift.span(), h.dtype);
      detail::write_cached(w, ls.cm_shift.span(), h.dtype);
    }
  }
  w.seal_crc();
  return w.buffer();
}

inline void write_cache(const std::filesystem::path& path, const CacheHeader& h, const std::vector<CacheEntry>& entries) {
  write_file_atomic(path, serialize_cache(h, entries));
}

struct CacheContents {
  CacheHeader header;
  std::vector<CacheEntry> entries;
};

inline CacheContents deserialize_cache(std::span<const std::uint8_t> bytes) {
  ByteReader r(verify_crc(bytes, "state cache"), "state cache");
  CacheContents out;
  std::uint64_t count = 0;
  out.header = detail::read_header(r, count);
  if (count > r.remaining()) throw FormatError("state cache: implausible entry count");
  std::vector<std::pair<std::string, std::uint64_t>> table;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto id = r.string(r.u16());
    table.emplace_back(std::move(id), r.u64());
  }
  for (auto& [id, offset] : table) {
    if (offset != r.position()) throw FormatError("state cache: offset table does not match entry layout");
    out.entries.push_back(detail::read_entry_payload(r, out.header, std::move(id)));
  }
  if (r.remaining() != 0) throw FormatError("state cache: trailing bytes");
  return out;
}

inline CacheContents read_cache(const std::filesystem::path& path) { return deserialize_cache(read_file_bytes(path)); }

inline CacheContents read_cache(const std::filesystem::path& path, const ModelWeights& model) {
  auto c = read_cache(path);
  check_fingerprint(c.header, model);
  return c;
}

// Point read through the offset table. Reads the header and table, then
// seeks straight to the entry; the whole-file CRC is not checked here.
class CacheReader {
 public:
  explicit CacheReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw NotFoundError("cannot open " + path.string());
    in_.seekg(0, std::ios::end);
    file_size_ = static_cast<std::size_t>(in_.tellg());
    in_.seekg(0);

    // Fixed prefix ends with k_sel; the layer list, dtype and count follow.
    auto head = read_exact(28);
    const std::size_t k_sel = head[26] | (std::size_t{head[27]} << 8);
    const auto rest = read_exact(2 * k_sel + 9);
    head.insert(head.end(), rest.begin(), rest.end());

    ByteReader r(head, "state cache");
    std::uint64_t count = 0;
    header_ = detail::read_header(r, count);
    const std::size_t payload_end = file_size_ < 4 ? 0 : file_size_ - 4;
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto len = read_exact(2);
      const auto id_bytes = read_exact(len[0] | (std::size_t{len[1]} << 8));
      const auto off = read_exact(8);
      const auto offset = ByteReader(off, "state cache").u64();
      if (offset > payload_end || header_.entry_bytes() > payload_end - offset) {
        throw FormatError("state cache: entry offset out of bounds");
      }
      offsets_.emplace(std::string(id_bytes.begin(), id_bytes.end()), offset);
    }
  }

  const CacheHeader& header() const noexcept { return header_; }
  std::size_t size() const noexcept { return offsets_.size(); }
  bool contains(const std::string& doc_id) const { return offsets_.count(doc_id) > 0; }

  CacheEntry get(const std::string& doc_id) {
    const auto it = offsets_.find(doc_id);
    if (it == offsets_.end()) throw NotFoundError("doc_id not in state cache: " + doc_id);
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(it->second));
    const auto bytes = read_exact(header_.entry_bytes());
    ByteReader r(bytes, "state cache");
    return detail::read_entry_payload(r, header_, doc_id);
  }

 private:
  std::vector<std::uint8_t> read_exact(std::size_t n) {
    std::vector<std::uint8_t> buf(n);
    if (n && !in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n))) {
      throw FormatError("state cache: unexpected end of file " + path_.string());
    }
    return buf;
  }

  std::filesystem::path path_;
  std::ifstream in_;
  std::size_t file_size_ = 0;
  CacheHeader header_;
  std::map<std::string, std::uint64_t> offsets_;
};

inline CacheEntry read_entry(const std::filesystem::path& path, const std::string& doc_id) {
  return CacheReader(path).get(doc_id);
}

// Builds a cache entry from a full-depth stack, keeping only the header's layers.
inline CacheEntry make_cache_entry(const CacheHeader& h, std::string doc_id, const StateStack& full,
                                   std::optional<Embedding> embedding = std::nullopt) {
  CacheEntry e;
  e.doc_id = std::move(doc_id);
  e.state = extract_states(full, h.layer_indices);
  e.token_count = full.token_count;
  if (h.has_embeddings) e.embedding = std::move(embedding);
  return e;
}

}  // namespace staterank
