#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftl/model.hpp"
#include "ftl/types.hpp"

namespace ftl::wire {

// Frame layout, all multi-byte integers little-endian:
//   magic "FTL1" | version u8 | msg_type u8 | payload_len u32 | payload | crc32(payload) u32
inline constexpr std::array<std::uint8_t, 4> kMagic = {'F', 'T', 'L', '1'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 10;  // magic + version + type + payload_len
inline constexpr std::size_t kTrailerSize = 4;  // crc32
inline constexpr std::size_t kMaxPayload = 64ull * 1024 * 1024;

enum class MsgType : std::uint8_t {
  Hello = 0x01,
  GlobalModel = 0x02,
  UpdateSubmit = 0x03,
  RoundAck = 0x04,
  ClientError = 0x05,
  Shutdown = 0x06,
};

struct Message {
  MsgType type = MsgType::Hello;
  std::vector<std::uint8_t> payload;

  bool operator==(const Message&) const = default;
};

// Why a frame failed to decode; every malformed input maps to exactly one.
enum class DecodeStatus {
  Truncated,   // fewer bytes than the layout requires
  BadMagic,
  BadVersion,
  BadType,     // unknown msg_type / tag value
  BadLength,   // payload_len over the cap or trailing bytes
  BadCrc,
  BadValue,    // structurally valid but semantically impossible field
};

class DecodeError : public std::runtime_error {
 public:
  DecodeError(DecodeStatus status, const std::string& what)
      : std::runtime_error(what), status_(status) {}
  DecodeStatus status() const { return status_; }

 private:
  DecodeStatus status_;
};

// CRC-32, polynomial 0xEDB88320 (reflected), init/final-xor 0xFFFFFFFF.
// crc32 of the empty string is 0.
std::uint32_t crc32(std::span<const std::uint8_t> data);

// Little-endian byte writers shared by all payload codecs.
void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);
void put_string(std::vector<std::uint8_t>& out, const std::string& s);  // u32 length + bytes

// Bounds-checked little-endian reader; every read past the end throws
// DecodeError(Truncated) instead of walking off the buffer.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string string();  // u32 length + that many bytes
  std::span<const std::uint8_t> take(std::size_t count);
  std::span<const std::uint8_t> rest();  // everything left
  void expect_end() const;  // throws BadLength when bytes remain

 private:
  void need(std::size_t count) const;

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> encode_frame(const Message& msg);

// Parses a buffer holding exactly one frame; throws DecodeError otherwise.
// Never crashes on arbitrary bytes.
Message decode_frame(std::span<const std::uint8_t> bytes);

// Header-only validation for stream transports: checks magic/version/type and
// returns the payload length so the caller knows how many bytes follow.
struct FrameHeader {
  MsgType type;
  std::uint32_t payload_len;
};
FrameHeader decode_header(std::span<const std::uint8_t> bytes);  // first kHeaderSize bytes

// One layer's parameters as shipped between server and clients. Only the
// layers selected for averaging travel; `layer_index` says where each one
// lives in the full model.
struct LayerEntry {
  std::uint32_t layer_index = 0;
  Matrix weights;
  Vector bias;
  model::Activation activation = model::Activation::Linear;
  bool frozen = false;
};

struct ModelPayload {
  std::vector<LayerEntry> layers;
  std::uint64_t n_k = 0;      // local sample count backing this payload
  double relevance = 1.0;     // client relevance score

  bool operator==(const ModelPayload& other) const;
};

// Layout: u32 layer_count; per layer u32 layer_index, u32 rows, u32 cols,
// u8 activation, u8 frozen, rows*cols f64 LE weights (row-major), rows f64 LE
// biases; then u64 n_k, f64 relevance.
std::vector<std::uint8_t> encode_model_payload(const ModelPayload& payload);  // rejects non-finite
ModelPayload decode_model_payload(std::span<const std::uint8_t> bytes);

}  // namespace ftl::wire
