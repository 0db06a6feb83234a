#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace bandmod {

/// One observed packet. Header/payload hold the retained raw bytes
/// (encrypted payload is kept only as an opaque prefix, never parsed).
struct PacketRecord {
  int64_t ts_us = 0;  // microseconds since flow start
  uint32_t size = 0;  // wire size in bytes
  int dir = +1;       // +1 client->exit, -1 exit->client
  std::vector<uint8_t> header;
  std::vector<uint8_t> payload;
  bool is_dummy = false;  // inserted by a padding defense, not ground truth
};

/// A direction-tagged packet sequence; the unit of shaping, transmission
/// and labeling. label is the modulation class id (0 = natural).
struct FlowTrace {
  std::string flow_id;
  int label = 0;
  std::vector<PacketRecord> packets;

  void validate() const;  // nondecreasing timestamps, label in 0..3
  int64_t last_ts_us() const { return packets.empty() ? 0 : packets.back().ts_us; }
  uint64_t total_bytes() const;
};

/// Fixed-length bit representation of a flow: first M packets, header
/// truncated/padded to H bytes and payload to P bytes, each byte expanded
/// MSB-first. Stored bit-packed (8 bits per byte).
struct SerializedFlow {
  int M = 0, H = 0, P = 0;
  std::vector<uint8_t> packed;  // M*(H+P) bytes

  size_t bit_length() const { return packed.size() * 8; }
  int bit(size_t i) const { return (packed[i >> 3] >> (7 - (i & 7))) & 1; }
};

/// Non-overlapping L_s-bit tokens of a serialized flow; the final stride
/// is zero-padded when the bit length is not divisible by L_s.
struct StrideSequence {
  int n_strides = 0;   // N
  int stride_bits = 0; // L_s
  std::vector<uint8_t> bits;  // N * L_s entries, each 0 or 1, row-major

  const uint8_t* stride(int i) const { return bits.data() + static_cast<size_t>(i) * stride_bits; }
};

/// Offsets of endpoint identity inside an IPv4+TCP header; zeroed before
/// serialization so a classifier cannot key on addresses or ports.
struct SerializeOptions {
  bool zero_endpoints = true;
};

SerializedFlow serialize_flow(const FlowTrace& flow, int M, int H, int P,
                              const SerializeOptions& opts = {});

StrideSequence segment_strides(const SerializedFlow& s, int stride_bits);

/// Re-concatenates strides and strips the final-stride padding.
std::vector<uint8_t> strides_to_bits(const StrideSequence& s, size_t bit_length);

/// Expands a packed serialization to one byte per bit (values 0/1).
std::vector<uint8_t> unpack_bits(const std::vector<uint8_t>& packed, size_t bit_length);

/// Per-bin throughput in bytes/s; bin i covers [i*bin_s, (i+1)*bin_s).
std::vector<double> throughput_bins(const FlowTrace& flow, double bin_s,
                                    bool include_dummies = true);

/// Moving mean over consecutive inter-arrival gaps, in seconds.
/// Flows with fewer than two packets yield an empty series.
std::vector<double> rolling_iat(const FlowTrace& flow, int window);

// --- JSON-lines trace format ------------------------------------------
// First line: {"flow_id":str,"label":int}; then one packet per line:
// {"ts_us":int,"size":int,"dir":+/-1,"hdr":"<hex>","pay":"<hex>","dummy":bool}

void write_flow_jsonl(const FlowTrace& flow, std::ostream& out);
void write_flow_jsonl(const FlowTrace& flow, const std::string& path);
FlowTrace read_flow_jsonl(std::istream& in);
FlowTrace read_flow_jsonl_file(const std::string& path);

// --- Exit-side capture synthesis --------------------------------------

/// Models what an exit-side TCP stack would put on the wire: each packet
/// gets a 52-byte IPv4+TCP header (fixed headers plus a TCP timestamp
/// option clocked off the observed departure time) and an opaque random
/// payload prefix. Run after the channel so header fields reflect the
/// timing the observer actually sees.
struct CaptureSynthOptions {
  int payload_bytes = 12;
  int64_t tsval_tick_us = 1000;  // TCP timestamp clock granularity
  int ttl = 52;
};

constexpr int kSynthHeaderBytes = 52;

void synthesize_capture(FlowTrace& flow, uint64_t seed,
                        const CaptureSynthOptions& opts = {});

}  // namespace bandmod
