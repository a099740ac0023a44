#include "ftl/wire.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "ftl/errors.hpp"

namespace ftl::wire {

namespace {

constexpr std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int bit = 0; bit < 8; ++bit) {
      c = (c & 1u) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
    }
    table[i] = c;
  }
  return table;
}

constexpr auto kCrcTable = make_crc_table();

static_assert(std::numeric_limits<double>::is_iec559, "IEEE-754 doubles required");

bool valid_type(std::uint8_t t) {
  return t >= static_cast<std::uint8_t>(MsgType::Hello) &&
         t <= static_cast<std::uint8_t>(MsgType::Shutdown);
}

}  // namespace

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

std::uint8_t ByteReader::u8() {
  need(1);
  return bytes_[pos_++];
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = static_cast<std::uint32_t>(bytes_[pos_]) |
                    static_cast<std::uint32_t>(bytes_[pos_ + 1]) << 8 |
                    static_cast<std::uint32_t>(bytes_[pos_ + 2]) << 16 |
                    static_cast<std::uint32_t>(bytes_[pos_ + 3]) << 24;
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  std::uint64_t lo = u32();
  std::uint64_t hi = u32();
  return lo | (hi << 32);
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::string() {
  std::uint32_t len = u32();
  auto bytes = take(len);
  return std::string(bytes.begin(), bytes.end());
}

std::span<const std::uint8_t> ByteReader::take(std::size_t count) {
  need(count);
  auto s = bytes_.subspan(pos_, count);
  pos_ += count;
  return s;
}

std::span<const std::uint8_t> ByteReader::rest() { return take(remaining()); }

void ByteReader::expect_end() const {
  if (remaining() != 0) {
    throw DecodeError(DecodeStatus::BadLength,
                      "decode: " + std::to_string(remaining()) + " trailing bytes");
  }
}

void ByteReader::need(std::size_t count) const {
  if (remaining() < count) {
    throw DecodeError(DecodeStatus::Truncated,
                      "decode: truncated at byte offset " + std::to_string(pos_));
  }
}

std::uint32_t crc32(std::span<const std::uint8_t> data) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::uint8_t b : data) {
    crc = kCrcTable[(crc ^ b) & 0xFFu] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

std::vector<std::uint8_t> encode_frame(const Message& msg) {
  if (msg.payload.size() > kMaxPayload) {
    throw std::invalid_argument("encode_frame: payload of " + std::to_string(msg.payload.size()) +
                                " bytes exceeds the 64 MiB cap");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + msg.payload.size() + kTrailerSize);
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(msg.type));
  put_u32(out, static_cast<std::uint32_t>(msg.payload.size()));
  out.insert(out.end(), msg.payload.begin(), msg.payload.end());
  put_u32(out, crc32(msg.payload));
  return out;
}

FrameHeader decode_header(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  std::uint8_t magic[4];
  for (std::uint8_t& b : magic) b = r.u8();
  if (!std::equal(std::begin(magic), std::end(magic), kMagic.begin())) {
    throw DecodeError(DecodeStatus::BadMagic, "decode: bad magic");
  }
  std::uint8_t version = r.u8();
  if (version != kVersion) {
    throw DecodeError(DecodeStatus::BadVersion,
                      "decode: unsupported version " + std::to_string(version));
  }
  std::uint8_t type = r.u8();
  if (!valid_type(type)) {
    throw DecodeError(DecodeStatus::BadType, "decode: unknown message type " + std::to_string(type));
  }
  std::uint32_t len = r.u32();
  if (len > kMaxPayload) {
    throw DecodeError(DecodeStatus::BadLength,
                      "decode: payload length " + std::to_string(len) + " exceeds the 64 MiB cap");
  }
  return FrameHeader{static_cast<MsgType>(type), len};
}

Message decode_frame(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) {
    throw DecodeError(DecodeStatus::Truncated, "decode: frame shorter than header");
  }
  FrameHeader header = decode_header(bytes.first(kHeaderSize));
  const std::size_t total = kHeaderSize + header.payload_len + kTrailerSize;
  if (bytes.size() < total) {
    throw DecodeError(DecodeStatus::Truncated, "decode: frame shorter than payload length");
  }
  if (bytes.size() > total) {
    throw DecodeError(DecodeStatus::BadLength, "decode: trailing bytes after frame");
  }
  ByteReader r(bytes.subspan(kHeaderSize));
  auto payload = r.take(header.payload_len);
  std::uint32_t stored_crc = r.u32();
  std::uint32_t actual = crc32(payload);
  if (stored_crc != actual) {
    throw DecodeError(DecodeStatus::BadCrc, "decode: crc mismatch");
  }
  Message msg;
  msg.type = header.type;
  msg.payload.assign(payload.begin(), payload.end());
  return msg;
}

bool ModelPayload::operator==(const ModelPayload& other) const {
  if (n_k != other.n_k || layers.size() != other.layers.size()) return false;
  if (std::bit_cast<std::uint64_t>(relevance) != std::bit_cast<std::uint64_t>(other.relevance)) {
    return false;
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerEntry& a = layers[i];
    const LayerEntry& b = other.layers[i];
    if (a.layer_index != b.layer_index || a.activation != b.activation || a.frozen != b.frozen) {
      return false;
    }
    if (a.weights.rows() != b.weights.rows() || a.weights.cols() != b.weights.cols()) return false;
    if (std::memcmp(a.weights.data(), b.weights.data(),
                    sizeof(double) * static_cast<std::size_t>(a.weights.size())) != 0) {
      return false;
    }
    if (a.bias.size() != b.bias.size()) return false;
    if (std::memcmp(a.bias.data(), b.bias.data(),
                    sizeof(double) * static_cast<std::size_t>(a.bias.size())) != 0) {
      return false;
    }
  }
  return true;
}

std::vector<std::uint8_t> encode_model_payload(const ModelPayload& payload) {
  std::vector<std::uint8_t> out;
  put_u32(out, static_cast<std::uint32_t>(payload.layers.size()));
  for (const LayerEntry& layer : payload.layers) {
    if (!layer.weights.allFinite() || !layer.bias.allFinite()) {
      throw std::invalid_argument("encode_model_payload: non-finite parameter in layer " +
                                  std::to_string(layer.layer_index));
    }
    if (layer.bias.size() != layer.weights.rows()) {
      throw std::invalid_argument("encode_model_payload: bias size mismatch in layer " +
                                  std::to_string(layer.layer_index));
    }
    put_u32(out, layer.layer_index);
    put_u32(out, static_cast<std::uint32_t>(layer.weights.rows()));
    put_u32(out, static_cast<std::uint32_t>(layer.weights.cols()));
    out.push_back(static_cast<std::uint8_t>(layer.activation));
    out.push_back(layer.frozen ? 1 : 0);
    for (Index r = 0; r < layer.weights.rows(); ++r) {
      for (Index c = 0; c < layer.weights.cols(); ++c) put_f64(out, layer.weights(r, c));
    }
    for (Index r = 0; r < layer.bias.size(); ++r) put_f64(out, layer.bias(r));
  }
  if (!std::isfinite(payload.relevance)) {
    throw std::invalid_argument("encode_model_payload: non-finite relevance");
  }
  put_u64(out, payload.n_k);
  put_f64(out, payload.relevance);
  return out;
}

ModelPayload decode_model_payload(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  ModelPayload payload;
  std::uint32_t layer_count = r.u32();
  payload.layers.reserve(std::min<std::size_t>(layer_count, 1024));
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    LayerEntry layer;
    layer.layer_index = r.u32();
    std::uint32_t rows = r.u32();
    std::uint32_t cols = r.u32();
    std::uint8_t act = r.u8();
    if (act > static_cast<std::uint8_t>(model::Activation::Linear)) {
      throw DecodeError(DecodeStatus::BadValue,
                        "decode: unknown activation tag " + std::to_string(act));
    }
    std::uint8_t frozen = r.u8();
    if (frozen > 1) {
      throw DecodeError(DecodeStatus::BadValue, "decode: frozen flag must be 0 or 1");
    }
    // Reject impossible sizes before allocating anything.
    std::uint64_t doubles = static_cast<std::uint64_t>(rows) * cols + rows;
    if (doubles > r.remaining() / sizeof(double)) {
      throw DecodeError(DecodeStatus::Truncated, "decode: layer data longer than payload");
    }
    layer.activation = static_cast<model::Activation>(act);
    layer.frozen = frozen == 1;
    layer.weights.resize(rows, cols);
    for (std::uint32_t rr = 0; rr < rows; ++rr) {
      for (std::uint32_t cc = 0; cc < cols; ++cc) layer.weights(rr, cc) = r.f64();
    }
    layer.bias.resize(rows);
    for (std::uint32_t rr = 0; rr < rows; ++rr) layer.bias(rr) = r.f64();
    payload.layers.push_back(std::move(layer));
  }
  payload.n_k = r.u64();
  payload.relevance = r.f64();
  if (r.remaining() != 0) {
    throw DecodeError(DecodeStatus::BadLength, "decode: trailing bytes after model payload");
  }
  return payload;
}

}  // namespace ftl::wire

namespace ftl::model {

std::vector<std::uint8_t> serialize(const MlpModel& m) {
  wire::ModelPayload payload;
  payload.layers.reserve(m.layers.size());
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    wire::LayerEntry entry;
    entry.layer_index = static_cast<std::uint32_t>(i);
    entry.weights = m.layers[i].weights;
    entry.bias = m.layers[i].bias;
    entry.activation = m.layers[i].activation;
    entry.frozen = m.layers[i].frozen;
    payload.layers.push_back(std::move(entry));
  }
  payload.n_k = 0;
  payload.relevance = 1.0;
  return wire::encode_model_payload(payload);
}

MlpModel deserialize(std::span<const std::uint8_t> bytes) {
  wire::ModelPayload payload = wire::decode_model_payload(bytes);
  MlpModel m;
  m.layers.resize(payload.layers.size());
  std::vector<bool> seen(payload.layers.size(), false);
  for (const wire::LayerEntry& entry : payload.layers) {
    if (entry.layer_index >= payload.layers.size()) {
      throw wire::DecodeError(wire::DecodeStatus::BadValue,
                              "decode: layer index " + std::to_string(entry.layer_index) +
                                  " outside a whole model of " +
                                  std::to_string(payload.layers.size()) + " layers");
    }
    if (seen[entry.layer_index]) {
      throw wire::DecodeError(wire::DecodeStatus::BadValue,
                              "decode: duplicate layer index " +
                                  std::to_string(entry.layer_index));
    }
    seen[entry.layer_index] = true;
    Layer& l = m.layers[entry.layer_index];
    l.weights = entry.weights;
    l.bias = entry.bias;
    l.activation = entry.activation;
    l.frozen = entry.frozen;
  }
  return m;
}

}  // namespace ftl::model
