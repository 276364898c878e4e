#pragma once

// Model file layout (all integers little-endian):
//
//   "KFLO" | u16 version=1 | u8 mode (0 training, 1 deployed) | u32 node count
//   per node:
//     u16 name length | UTF-8 name | u8 kind
//     u32 stride_h, stride_w, pad_h, pad_w, dilation_h, dilation_w | u32 groups
//     u8 param-layout tag | tensors
//   u32 CRC32 of every preceding byte
//
// Param-layout tags: 0 no parameters; 1 plain (kernel, bias); B >= 2 a KFLO
// block of depth B (W1, W2..WB, bias). A tensor is u8 rank, rank x u32 dims
// and an f32 payload. The input shape is not stored; load_model infers the
// smallest square spatial size the layers accept unless one is supplied.

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "kflo/errors.hpp"
#include "kflo/model.hpp"

namespace kflo {

inline constexpr std::uint16_t kModelFormatVersion = 1;

namespace crc32 {

inline const std::array<std::uint32_t, 256>& table() {
  static const std::array<std::uint32_t, 256> t = [] {
    std::array<std::uint32_t, 256> out{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      out[i] = c;
    }
    return out;
  }();
  return t;
}

inline std::uint32_t compute(const std::uint8_t* data, std::size_t n) {
  const auto& t = table();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = t[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// For equal-length messages crc(a) ^ crc(b) is the zero-initialized CRC of
// a ^ b. A single corrupted byte therefore leaves a syndrome equal to
// table[e] advanced through the trailing zero bytes; the byte step is
// invertible (the table's top bytes are a permutation), so walking back
// finds the position. Returns nullopt when no single-byte error explains it.
inline std::optional<std::size_t> locate_single_byte_error(std::uint32_t syndrome,
                                                           std::size_t length) {
  const auto& t = table();
  static const std::array<std::uint8_t, 256> by_top_byte = [] {
    std::array<std::uint8_t, 256> r{};
    const auto& tt = table();
    for (std::uint32_t i = 0; i < 256; ++i) r[tt[i] >> 24] = static_cast<std::uint8_t>(i);
    return r;
  }();
  std::uint32_t c = syndrome;
  for (std::size_t back = 0; back < length; ++back) {
    const std::uint8_t idx = by_top_byte[c >> 24];
    if (c != 0 && t[idx] == c) return length - 1 - back;
    c = ((c ^ t[idx]) << 8) | idx;
  }
  return std::nullopt;
}

}  // namespace crc32

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& buf, std::size_t end) : buf_(buf), end_(end) {}

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return end_ - pos_; }

  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (n > remaining()) throw TruncatedError("model file truncated at byte " + std::to_string(pos_));
  }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const Tensor& t) {
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.data()) w.f32(v);
}

inline Tensor read_tensor(ByteReader& r) {
  const std::size_t rank = r.u8();
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = r.u32();
    count *= d;
    if (count * 4 > r.remaining()) {
      throw TruncatedError("model file truncated: tensor payload exceeds the file");
    }
  }
  std::vector<float> data(count);
  for (float& v : data) v = r.f32();
  return Tensor(std::move(shape), std::move(data));
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// Smallest square [c, s, s] (or [features] for fc-first models) accepted by
// the layers.
inline Shape infer_input_shape(const std::vector<LayerNode<float>>& nodes) {
  for (const auto& n : nodes) {
    if (!n.filtering()) continue;
    const Shape k = n.deployed_kernel_shape();
    if (n.kind == LayerKind::fc) return {k[1]};
    const std::size_t channels = k[1] * n.geom.groups;
    for (std::size_t s = 1; s <= 4096; ++s) {
      if (accepts_input(nodes, {channels, s, s})) return {channels, s, s};
    }
    break;
  }
  throw FormatError("cannot infer an input shape for the stored layers");
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_model(const ModelGraph& model) {
  detail::ByteWriter w;
  w.bytes("KFLO");
  w.u16(kModelFormatVersion);
  w.u8(static_cast<std::uint8_t>(model.mode()));
  w.u32(static_cast<std::uint32_t>(model.nodes().size()));
  for (const auto& n : model.nodes()) {
    if (n.name.size() > 0xFFFF) throw ConfigError("layer name too long: " + n.name);
    w.u16(static_cast<std::uint16_t>(n.name.size()));
    w.bytes(n.name);
    w.u8(static_cast<std::uint8_t>(n.kind));
    for (std::size_t v : {n.geom.stride[0], n.geom.stride[1], n.geom.padding[0],
                          n.geom.padding[1], n.geom.dilation[0], n.geom.dilation[1]}) {
      w.u32(static_cast<std::uint32_t>(v));
    }
    w.u32(static_cast<std::uint32_t>(n.geom.groups));
    if (const auto* k = n.kflo()) {
      if (k->block.depth() > 255) throw ConfigError("KFLO depth above 255 cannot be stored");
      w.u8(static_cast<std::uint8_t>(k->block.depth() == 1 ? 1 : k->block.depth()));
    } else {
      w.u8(n.plain() ? 1 : 0);
    }
    for (const ParamSlot<float>* s : n.slots()) detail::write_tensor(w, s->value());
  }
  auto& buf = w.buffer();
  w.u32(crc32::compute(buf.data(), buf.size()));
  return std::move(buf);
}

inline void save_model(const ModelGraph& model, const std::string& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path);
}

struct LoadOptions {
  std::optional<ModelMode> expected_mode;  // ModeError when the file differs
  std::optional<Shape> input_shape;        // inferred when absent
};

namespace detail {

struct NodeRegion {
  std::size_t begin, end;
  std::string name;
};

// Parses one node. `current` receives the layer name as soon as it is read so
// callers can attribute a failure.
inline LayerNode<float> read_node(ByteReader& r, std::string& current) {
  current.clear();
  const std::string name = r.bytes(r.u16());
  current = name;
  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(LayerKind::global_avg_pool)) {
    throw FormatError("layer " + name + ": unknown kind " + std::to_string(kind));
  }
  ConvGeometry g;
  g.stride = {r.u32(), r.u32()};
  g.padding = {r.u32(), r.u32()};
  g.dilation = {r.u32(), r.u32()};
  g.groups = r.u32();
  const std::uint8_t tag = r.u8();
  LayerNode<float> n{static_cast<LayerKind>(kind), name, g, {}};
  try {
    if (tag == 1) {
      Tensor kernel = read_tensor(r);
      Tensor bias = read_tensor(r);
      n.params = PlainParams<float>{
          ParamSlot<float>(name + ".weight", std::move(kernel), ParamClass::plain),
          ParamSlot<float>(name + ".bias", std::move(bias), ParamClass::bias)};
    } else if (tag >= 2) {
      ParamSlot<float> base(name + ".W1", read_tensor(r), ParamClass::base_kernel);
      std::vector<ParamSlot<float>> cascade;
      for (std::size_t b = 2; b <= tag; ++b) {
        cascade.emplace_back(name + ".W" + std::to_string(b), read_tensor(r),
                             ParamClass::cascade_pointwise);
      }
      ParamSlot<float> bias(name + ".bias", read_tensor(r), ParamClass::bias);
      if (base.value().rank() < 2 || cascade.back().value().rank() < 1) {
        throw FormatError("layer " + name + ": malformed KFLO tensors");
      }
      const double rho = static_cast<double>(base.value().dim(0)) /
                         static_cast<double>(cascade.back().value().dim(0));
      n.params = KfloParams<float>{KfloBlock<float>(std::move(base), std::move(cascade), g, rho),
                                   std::move(bias)};
    }
  } catch (const StructureError& e) {
    throw FormatError("layer " + name + ": " + e.what());
  }
  return n;
}

}  // namespace detail

// Errors are checked in this order: magic, version, truncation, checksum
// (naming the layer when a single corrupted byte can be located), mode.
inline ModelGraph deserialize_model(const std::vector<std::uint8_t>& buf, LoadOptions options = {}) {
  if (buf.size() < 4 || std::string(buf.begin(), buf.begin() + 4) != "KFLO") {
    throw BadMagicError("not a KFLO model file (bad magic)");
  }
  if (buf.size() < 4 + 2 + 1 + 4 + 4) throw TruncatedError("model file truncated in header");
  const std::size_t body_end = buf.size() - 4;
  detail::ByteReader r(buf, body_end);
  r.bytes(4);
  const std::uint16_t version = r.u16();
  if (version != kModelFormatVersion) {
    throw VersionError("unsupported model format version " + std::to_string(version));
  }
  const std::uint32_t stored = static_cast<std::uint32_t>(buf[body_end]) |
                               static_cast<std::uint32_t>(buf[body_end + 1]) << 8 |
                               static_cast<std::uint32_t>(buf[body_end + 2]) << 16 |
                               static_cast<std::uint32_t>(buf[body_end + 3]) << 24;
  const std::uint32_t actual = crc32::compute(buf.data(), body_end);
  const std::uint8_t mode_byte = r.u8();
  const std::uint32_t count = r.u32();

  std::vector<detail::NodeRegion> regions;
  std::vector<LayerNode<float>> nodes;
  std::string current;
  try {
    if (mode_byte > 1) throw FormatError("invalid mode byte " + std::to_string(mode_byte));
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::size_t begin = r.position();
      nodes.push_back(detail::read_node(r, current));
      regions.push_back({begin, r.position(), current});
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after the last layer");
  } catch (const TruncatedError&) {
    throw;
  } catch (const FormatError&) {
    // Structural garbage inside a body whose checksum fails is corruption.
    if (stored == actual) throw;
    throw ChecksumError(current, "model file checksum mismatch" +
                                     (current.empty() ? std::string() : " in layer " + current));
  }

  if (stored != actual) {
    std::string layer;
    if (auto pos = crc32::locate_single_byte_error(stored ^ actual, body_end)) {
      for (const auto& reg : regions) {
        if (*pos >= reg.begin && *pos < reg.end) layer = reg.name;
      }
    }
    throw ChecksumError(layer, layer.empty()
                                   ? std::string("model file checksum mismatch")
                                   : "model file checksum mismatch in layer " + layer);
  }
  const auto mode = static_cast<ModelMode>(mode_byte);
  if (options.expected_mode && *options.expected_mode != mode) {
    throw ModeError(std::string("model file is in ") +
                    (mode == ModelMode::training ? "training" : "deployed") + " mode");
  }
  try {
    Shape input = options.input_shape ? *options.input_shape : detail::infer_input_shape(nodes);
    return ModelGraph(std::move(input), std::move(nodes), mode);
  } catch (const ModeError& e) {
    throw FormatError(e.what());
  } catch (const DimensionError& e) {
    throw FormatError(e.what());
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
}

inline ModelGraph load_model(const std::string& path, LoadOptions options = {}) {
  return deserialize_model(detail::read_file(path), std::move(options));
}

}  // namespace kflo
