#include "bandmod/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bandmod/errors.hpp"
#include "bandmod/rng.hpp"

namespace bandmod {

using nlohmann::json;

void FlowTrace::validate() const {
  if (label < 0 || label > 3) throw ValidationError("FlowTrace.label must be in 0..3");
  for (size_t i = 0; i < packets.size(); ++i) {
    const auto& p = packets[i];
    if (p.ts_us < 0) throw ValidationError("PacketRecord.ts_us must be >= 0");
    if (p.dir != 1 && p.dir != -1) throw ValidationError("PacketRecord.dir must be +1 or -1");
    if (p.size < p.header.size() + p.payload.size())
      throw ValidationError("PacketRecord.size smaller than retained bytes");
    if (i > 0 && p.ts_us < packets[i - 1].ts_us)
      throw ValidationError("FlowTrace.packets timestamps must be nondecreasing");
  }
}

uint64_t FlowTrace::total_bytes() const {
  uint64_t n = 0;
  for (const auto& p : packets) n += p.size;
  return n;
}

namespace {

// Copies `src` truncated or zero-padded to exactly `len` bytes at dst.
void copy_padded(const std::vector<uint8_t>& src, uint8_t* dst, int len) {
  const int n = std::min<int>(len, static_cast<int>(src.size()));
  std::copy(src.begin(), src.begin() + n, dst);
  std::fill(dst + n, dst + len, 0);
}

}  // namespace

SerializedFlow serialize_flow(const FlowTrace& flow, int M, int H, int P,
                              const SerializeOptions& opts) {
  if (M <= 0) throw ValidationError("serialize_flow: M must be > 0");
  if (H < 0 || P < 0 || H + P <= 0)
    throw ValidationError("serialize_flow: H+P must be > 0 with H,P >= 0");
  SerializedFlow out;
  out.M = M;
  out.H = H;
  out.P = P;
  out.packed.assign(static_cast<size_t>(M) * (H + P), 0);
  const int n = std::min<int>(M, static_cast<int>(flow.packets.size()));
  for (int i = 0; i < n; ++i) {
    uint8_t* at = out.packed.data() + static_cast<size_t>(i) * (H + P);
    copy_padded(flow.packets[i].header, at, H);
    if (opts.zero_endpoints) {
      // IPv4 source/destination addresses and TCP ports.
      for (int off = 12; off < 24 && off < H; ++off) at[off] = 0;
    }
    copy_padded(flow.packets[i].payload, at + H, P);
  }
  return out;
}

StrideSequence segment_strides(const SerializedFlow& s, int stride_bits) {
  if (stride_bits <= 0) throw ValidationError("segment_strides: stride_bits must be > 0");
  StrideSequence seq;
  seq.stride_bits = stride_bits;
  const size_t len = s.bit_length();
  seq.n_strides = static_cast<int>((len + stride_bits - 1) / stride_bits);
  seq.bits.assign(static_cast<size_t>(seq.n_strides) * stride_bits, 0);
  for (size_t i = 0; i < len; ++i) seq.bits[i] = static_cast<uint8_t>(s.bit(i));
  return seq;
}

std::vector<uint8_t> strides_to_bits(const StrideSequence& s, size_t bit_length) {
  if (bit_length > s.bits.size())
    throw ValidationError("strides_to_bits: bit_length exceeds stored strides");
  return std::vector<uint8_t>(s.bits.begin(), s.bits.begin() + bit_length);
}

std::vector<uint8_t> unpack_bits(const std::vector<uint8_t>& packed, size_t bit_length) {
  if (bit_length > packed.size() * 8)
    throw ValidationError("unpack_bits: bit_length exceeds packed data");
  std::vector<uint8_t> bits(bit_length);
  for (size_t i = 0; i < bit_length; ++i) bits[i] = (packed[i >> 3] >> (7 - (i & 7))) & 1;
  return bits;
}

std::vector<double> throughput_bins(const FlowTrace& flow, double bin_s, bool include_dummies) {
  if (!(bin_s > 0.0)) throw ValidationError("throughput_bins: bin must be > 0");
  if (flow.packets.empty()) return {};
  const size_t n_bins = static_cast<size_t>(flow.last_ts_us() / 1e6 / bin_s) + 1;
  std::vector<double> bins(n_bins, 0.0);
  for (const auto& p : flow.packets) {
    if (!include_dummies && p.is_dummy) continue;
    size_t i = static_cast<size_t>(p.ts_us / 1e6 / bin_s);
    if (i >= n_bins) i = n_bins - 1;
    bins[i] += p.size;
  }
  for (auto& v : bins) v /= bin_s;
  return bins;
}

std::vector<double> rolling_iat(const FlowTrace& flow, int window) {
  if (window < 1) throw ValidationError("rolling_iat: window must be >= 1");
  const size_t n = flow.packets.size();
  if (n < 2) return {};
  std::vector<double> gaps(n - 1);
  for (size_t i = 0; i + 1 < n; ++i)
    gaps[i] = (flow.packets[i + 1].ts_us - flow.packets[i].ts_us) / 1e6;
  if (static_cast<size_t>(window) > gaps.size()) return {};
  std::vector<double> out(gaps.size() - window + 1);
  double acc = 0.0;
  for (int i = 0; i < window; ++i) acc += gaps[i];
  out[0] = acc / window;
  for (size_t i = 1; i < out.size(); ++i) {
    acc += gaps[i + window - 1] - gaps[i - 1];
    out[i] = acc / window;
  }
  return out;
}

// --- JSON-lines I/O ----------------------------------------------------

namespace {

std::string to_hex(const std::vector<uint8_t>& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (uint8_t b : bytes) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0xF]);
  }
  return s;
}

std::vector<uint8_t> from_hex(const std::string& s) {
  if (s.size() % 2) throw ValidationError("trace: odd-length hex string");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw ValidationError("trace: invalid hex digit");
  };
  std::vector<uint8_t> out(s.size() / 2);
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<uint8_t>(nibble(s[2 * i]) << 4 | nibble(s[2 * i + 1]));
  return out;
}

}  // namespace

void write_flow_jsonl(const FlowTrace& flow, std::ostream& out) {
  out << json{{"flow_id", flow.flow_id}, {"label", flow.label}}.dump() << '\n';
  for (const auto& p : flow.packets) {
    out << json{{"ts_us", p.ts_us},         {"size", p.size},
                {"dir", p.dir},             {"hdr", to_hex(p.header)},
                {"pay", to_hex(p.payload)}, {"dummy", p.is_dummy}}
               .dump()
        << '\n';
  }
}

void write_flow_jsonl(const FlowTrace& flow, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFault("cannot open for writing: " + path);
  write_flow_jsonl(flow, f);
  if (!f.good()) throw RuntimeFault("write failed: " + path);
}

FlowTrace read_flow_jsonl(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("trace: missing metadata line");
  json meta = json::parse(line);
  FlowTrace flow;
  flow.flow_id = meta.at("flow_id").get<std::string>();
  flow.label = meta.at("label").get<int>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    PacketRecord p;
    p.ts_us = j.at("ts_us").get<int64_t>();
    p.size = j.at("size").get<uint32_t>();
    p.dir = j.at("dir").get<int>();
    p.header = from_hex(j.at("hdr").get<std::string>());
    p.payload = from_hex(j.at("pay").get<std::string>());
    p.is_dummy = j.value("dummy", false);
    flow.packets.push_back(std::move(p));
  }
  flow.validate();
  return flow;
}

FlowTrace read_flow_jsonl_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeFault("cannot open: " + path);
  return read_flow_jsonl(f);
}

// --- Capture synthesis --------------------------------------------------

namespace {

void put_be16(uint8_t* p, uint16_t v) {
  p[0] = static_cast<uint8_t>(v >> 8);
  p[1] = static_cast<uint8_t>(v);
}

void put_be32(uint8_t* p, uint32_t v) {
  p[0] = static_cast<uint8_t>(v >> 24);
  p[1] = static_cast<uint8_t>(v >> 16);
  p[2] = static_cast<uint8_t>(v >> 8);
  p[3] = static_cast<uint8_t>(v);
}

uint16_t inet_checksum(const uint8_t* data, size_t len) {
  uint32_t sum = 0;
  for (size_t i = 0; i + 1 < len; i += 2) sum += (data[i] << 8) | data[i + 1];
  if (len & 1) sum += data[len - 1] << 8;
  while (sum >> 16) sum = (sum & 0xFFFF) + (sum >> 16);
  return static_cast<uint16_t>(~sum);
}

}  // namespace

void synthesize_capture(FlowTrace& flow, uint64_t seed, const CaptureSynthOptions& opts) {
  Rng rng(seed);
  // Flow-relative normalization: the stack's random per-connection
  // constants (initial sequence number, timestamp base, ack state, echo
  // lag) are rebased to zero, the same way endpoint identity is zeroed,
  // so content bytes carry within-flow structure rather than flow
  // identity.
  const uint32_t isn = 0;
  const uint32_t peer_ack = 0;
  const uint32_t tsval_base = 0;
  const uint16_t peer_port = static_cast<uint16_t>(49152 + rng.below(16384));
  const uint32_t tsecr_lag = 1;
  uint16_t ip_id = 0;
  uint64_t cum_bytes = 0;

  for (auto& p : flow.packets) {
    std::vector<uint8_t> h(kSynthHeaderBytes, 0);
    // IPv4, 20 bytes.
    h[0] = 0x45;
    put_be16(&h[2], static_cast<uint16_t>(std::min<uint32_t>(p.size, 65535)));
    put_be16(&h[4], ip_id++);
    h[6] = 0x40;  // DF
    h[8] = static_cast<uint8_t>(opts.ttl);
    h[9] = 6;  // TCP
    put_be32(&h[12], 0x0A000001u);
    put_be32(&h[16], 0x0A000002u);
    put_be16(&h[10], inet_checksum(h.data(), 20));
    // TCP, 20 bytes + 12 bytes of options (NOP NOP TS).
    put_be16(&h[20], 443);
    put_be16(&h[22], peer_port);
    put_be32(&h[24], isn + static_cast<uint32_t>(cum_bytes));
    put_be32(&h[28], peer_ack);
    h[32] = 0x80;  // data offset 8 words
    h[33] = 0x18;  // PSH|ACK
    put_be16(&h[34], 64240);
    h[40] = 1;  // NOP
    h[41] = 1;  // NOP
    h[42] = 8;  // timestamp option
    h[43] = 10;
    const uint32_t tsval = tsval_base + static_cast<uint32_t>(p.ts_us / opts.tsval_tick_us);
    put_be32(&h[44], tsval);
    put_be32(&h[48], tsval - tsecr_lag);
    put_be16(&h[36], inet_checksum(h.data() + 20, 32));

    p.header = std::move(h);
    p.payload.resize(opts.payload_bytes);
    for (auto& b : p.payload) b = static_cast<uint8_t>(rng.next_u64());
    if (p.size < static_cast<uint32_t>(kSynthHeaderBytes + opts.payload_bytes))
      p.size = kSynthHeaderBytes + opts.payload_bytes;
    cum_bytes += p.size;
  }
}

}  // namespace bandmod
