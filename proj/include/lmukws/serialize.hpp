#pragma once

// Model file ("LMUQ", version 1). All integers little-endian.
//
//   magic "LMUQ" | u16 version | 32-byte frontend config SHA-256
//   topology: u32 input_dim | u8 weight_bits | u8 discretization | f64 dt
//             | spec input | u32 layers
//             per layer: u32 hidden | spec u | spec m | spec h | u32 cells
//                        per cell: u32 order | f64 theta
//   labels:   u32 count, per label u16 length + bytes
//   tensors:  u32 count, per tensor u16 name length + name | u8 rank
//             | rank x u32 dims | spec | u32 payload bytes | payload
//   u32 CRC32 of everything before it
//
// spec = u8 bits | u8 signed | i8 scale exponent. Payloads hold two's
// complement integers: 4-bit values packed two per byte (low nibble first),
// 7/8-bit one byte each, 32-bit four bytes.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lmukws/qmodel.hpp"

namespace lmukws {

inline constexpr char kModelMagic[4] = {'L', 'M', 'U', 'Q'};
inline constexpr std::uint16_t kModelVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void i8(std::int8_t v) { buf_.push_back(static_cast<std::uint8_t>(v)); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str16(const std::string& s) {
    u16(static_cast<std::uint16_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::int8_t i8() { return static_cast<std::int8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str16() {
    const auto n = u16();
    auto b = bytes(n);
    return std::string(b.begin(), b.end());
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw LoadError("model file truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{data_[pos_ + i]} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline void write_spec(ByteWriter& w, const QuantSpec& s) {
  w.u8(static_cast<std::uint8_t>(s.bits));
  w.u8(s.is_signed ? 1 : 0);
  w.i8(static_cast<std::int8_t>(s.scale_exp));
}

inline QuantSpec read_spec(ByteReader& r) {
  QuantSpec s;
  s.bits = r.u8();
  s.is_signed = r.u8() != 0;
  s.scale_exp = r.i8();
  if (!valid_bits(s.bits) || !s.is_signed) throw LoadError("invalid quantization spec");
  return s;
}

}  // namespace detail

inline std::uint32_t crc32_of(std::span<const std::uint8_t> data) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, data.data(), static_cast<uInt>(data.size())));
}

/// Encode tensor values at their spec width.
inline std::vector<std::uint8_t> pack_payload(const QuantTensor& t) {
  std::vector<std::uint8_t> out;
  switch (t.spec.bits) {
    case 4:
      out.assign((t.data.size() + 1) / 2, 0);
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        const auto nib = static_cast<std::uint8_t>(t.data[i] & 0x0F);
        out[i / 2] |= (i % 2 == 0) ? nib : static_cast<std::uint8_t>(nib << 4);
      }
      break;
    case 7:
    case 8:
      for (auto v : t.data) out.push_back(static_cast<std::uint8_t>(v & 0xFF));
      break;
    case 32:
      for (auto v : t.data) {
        const auto u = static_cast<std::uint32_t>(v);
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
      }
      break;
    default:
      throw ArgumentError("pack_payload: unsupported bit width");
  }
  return out;
}

inline std::vector<std::int32_t> unpack_payload(std::span<const std::uint8_t> payload,
                                                std::size_t count, const QuantSpec& spec) {
  std::vector<std::int32_t> out(count);
  const std::size_t expected = spec.bits == 4 ? (count + 1) / 2 : spec.bits == 32 ? count * 4 : count;
  if (payload.size() != expected) throw LoadError("tensor payload has the wrong size");
  for (std::size_t i = 0; i < count; ++i) {
    std::int32_t v;
    if (spec.bits == 4) {
      const std::uint8_t byte = payload[i / 2];
      const int nib = (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
      v = nib >= 8 ? nib - 16 : nib;
    } else if (spec.bits == 32) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= std::uint32_t{payload[i * 4 + b]} << (8 * b);
      v = static_cast<std::int32_t>(u);
    } else {
      v = static_cast<std::int8_t>(payload[i]);
    }
    if (v < spec.qmin() || v > spec.qmax()) throw LoadError("tensor value outside its spec range");
    out[i] = v;
  }
  return out;
}

inline std::vector<std::uint8_t> encode_model(const QuantizedModel& qm) {
  detail::ByteWriter w;
  for (char c : kModelMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kModelVersion);
  w.bytes(qm.frontend_hash);
  w.u32(static_cast<std::uint32_t>(qm.input_dim));
  w.u8(static_cast<std::uint8_t>(qm.weight_bits));
  w.u8(qm.method == Discretization::kZeroOrderHold ? 0 : 1);
  w.f64(qm.dt);
  detail::write_spec(w, qm.input_spec);
  w.u32(static_cast<std::uint32_t>(qm.layers.size()));
  for (const auto& L : qm.layers) {
    w.u32(static_cast<std::uint32_t>(L.hidden_dim()));
    detail::write_spec(w, L.u_spec);
    detail::write_spec(w, L.m_spec);
    detail::write_spec(w, L.h_spec);
    w.u32(static_cast<std::uint32_t>(L.cells.size()));
    for (const auto& c : L.cells) {
      w.u32(static_cast<std::uint32_t>(c.order));
      w.f64(c.theta);
    }
  }
  w.u32(static_cast<std::uint32_t>(qm.label_names.size()));
  for (const auto& l : qm.label_names) w.str16(l);

  auto tensors = model_tensors(qm);
  if (!qm.feature_mean.data.empty()) {
    tensors.push_back({"frontend.mean", &qm.feature_mean, false, false, false});
    tensors.push_back({"frontend.inv_std", &qm.feature_inv_std, false, false, false});
  }
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.str16(t.name);
    w.u8(static_cast<std::uint8_t>(t.tensor->shape.size()));
    for (auto d : t.tensor->shape) w.u32(static_cast<std::uint32_t>(d));
    detail::write_spec(w, t.tensor->spec);
    const auto payload = pack_payload(*t.tensor);
    w.u32(static_cast<std::uint32_t>(payload.size()));
    w.bytes(payload);
  }
  auto& buf = w.buffer();
  const auto crc = crc32_of(buf);
  w.u32(crc);
  return std::move(buf);
}

inline QuantizedModel decode_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelMagic, 4) != 0) {
    throw LoadError("bad magic: not an LMUQ model file");
  }
  if (bytes.size() < 4 + 2 + 32 + 4) throw LoadError("model file truncated");
  detail::ByteReader head(bytes.subspan(4, 2));
  const auto version = head.u16();
  if (version != kModelVersion) {
    throw LoadError("unsupported model version " + std::to_string(version));
  }
  const auto body = bytes.first(bytes.size() - 4);
  detail::ByteReader tail(bytes.last(4));
  if (crc32_of(body) != tail.u32()) throw LoadError("model file checksum mismatch");

  detail::ByteReader r(body.subspan(6));
  QuantizedModel qm;
  const auto hash = r.bytes(32);
  std::copy(hash.begin(), hash.end(), qm.frontend_hash.begin());
  qm.input_dim = static_cast<int>(r.u32());
  qm.weight_bits = r.u8();
  const auto method = r.u8();
  if (method > 1) throw LoadError("unknown discretization method");
  qm.method = method == 0 ? Discretization::kZeroOrderHold : Discretization::kEuler;
  qm.dt = r.f64();
  qm.input_spec = detail::read_spec(r);
  const auto nlayers = r.u32();
  if (nlayers > 1024) throw LoadError("implausible layer count");
  std::vector<std::uint32_t> hidden(nlayers);
  for (std::uint32_t l = 0; l < nlayers; ++l) {
    QuantizedLayer L;
    hidden[l] = r.u32();
    L.u_spec = detail::read_spec(r);
    L.m_spec = detail::read_spec(r);
    L.h_spec = detail::read_spec(r);
    const auto ncells = r.u32();
    if (ncells > 4096) throw LoadError("implausible cell count");
    for (std::uint32_t k = 0; k < ncells; ++k) {
      CellSpec c;
      c.order = static_cast<int>(r.u32());
      c.theta = r.f64();
      L.cells.push_back(c);
    }
    qm.layers.push_back(std::move(L));
  }
  const auto nlabels = r.u32();
  if (nlabels > 4096) throw LoadError("implausible label count");
  for (std::uint32_t i = 0; i < nlabels; ++i) qm.label_names.push_back(r.str16());

  std::map<std::string, QuantTensor> tensors;
  const auto ntensors = r.u32();
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    const auto name = r.str16();
    QuantTensor t;
    const auto rank = r.u8();
    for (int d = 0; d < rank; ++d) t.shape.push_back(r.u32());
    t.spec = detail::read_spec(r);
    const auto count = static_cast<std::size_t>(element_count(t.shape));
    const auto nbytes = r.u32();
    t.data = unpack_payload(r.bytes(nbytes), count, t.spec);
    tensors[name] = std::move(t);
  }
  if (r.remaining() != 0) throw LoadError("trailing bytes before checksum");

  auto take = [&tensors](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw LoadError("missing tensor " + name);
    return it->second;
  };
  for (std::size_t l = 0; l < qm.layers.size(); ++l) {
    auto& L = qm.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    L.e_x = take(p + "e_x");
    L.e_h = take(p + "e_h");
    L.W_x = take(p + "W_x");
    L.W_m = take(p + "W_m");
    L.b = take(p + "b");
    for (std::size_t k = 0; k < L.cells.size(); ++k) {
      L.A_bar.push_back(take(p + "cell" + std::to_string(k) + ".A_bar"));
      L.B_bar.push_back(take(p + "cell" + std::to_string(k) + ".B_bar"));
    }
    if (L.hidden_dim() != hidden[l]) throw LoadError("tensor shapes disagree with topology");
  }
  qm.W_out = take("out.W");
  qm.b_out = take("out.b");
  if (tensors.count("frontend.mean")) {
    qm.feature_mean = take("frontend.mean");
    qm.feature_inv_std = take("frontend.inv_std");
  }
  return qm;
}

inline void save_model(const QuantizedModel& qm, const std::string& path) {
  const auto bytes = encode_model(qm);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing " + path);
}

inline QuantizedModel load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open model file " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode_model(bytes);
}

}  // namespace lmukws
