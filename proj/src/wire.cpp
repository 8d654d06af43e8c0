#include "flowseg/wire.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "flowseg/errors.hpp"

namespace flowseg::wire {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int sextet(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
  return v;
}

template <class T>
T field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ArgumentError(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ArgumentError(std::string("field '") + key + "' has the wrong type");
  }
}

std::size_t index_field(const json& j, const char* key) {
  const json& v = j.contains(key) ? j.at(key) : json();
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ArgumentError(std::string("field '") + key + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

constexpr std::array<char, 4> kPredMagic{'F', 'M', 'S', 'K'};
constexpr std::uint32_t kPredVersion = 1;
constexpr std::size_t kPredHeader = 20;

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[v >> 18];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out += kAlphabet[v >> 18];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kAlphabet[v >> 18];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4) throw FormatError("base64 length is not a multiple of 4", text.size());
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    int s[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && last && k >= 2) {
        s[k] = 0;
        ++pad;
        continue;
      }
      if (pad) throw FormatError("base64 padding in the middle", i + k);
      s[k] = sextet(c);
      if (s[k] < 0) throw FormatError("invalid base64 character", i + k);
    }
    const std::uint32_t v = (s[0] << 18) | (s[1] << 12) | (s[2] << 6) | s[3];
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(v >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v));
    // non-canonical trailing bits would decode two ways
    if ((pad == 2 && (v & 0xFFFF)) || (pad == 1 && (v & 0xFF))) throw FormatError("non-zero padding bits", i);
  }
  return out;
}

std::vector<std::uint32_t> rle_runs(const Mask& mask) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t n = 0;
  for (std::uint8_t v : mask.cells) {
    if (v != current) {
      runs.push_back(n);
      current = v;
      n = 0;
    }
    ++n;
  }
  runs.push_back(n);
  return runs;
}

Mask rle_mask(std::span<const std::uint32_t> runs, std::size_t height, std::size_t width) {
  Mask m(height, width);
  std::size_t pos = 0;
  std::uint8_t value = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (runs[i] > m.cells.size() - pos) throw FormatError("runs exceed the mask size", i * 4);
    std::fill_n(m.cells.begin() + static_cast<std::ptrdiff_t>(pos), runs[i], value);
    pos += runs[i];
    value ^= 1;
  }
  if (pos != m.cells.size()) throw FormatError("runs do not cover the mask", runs.size() * 4);
  return m;
}

std::string encode_mask(const Mask& mask) {
  std::vector<std::uint8_t> bytes;
  for (std::uint32_t r : rle_runs(mask)) put_u32(bytes, r);
  return base64_encode(bytes);
}

Mask decode_mask(std::string_view payload, std::size_t height, std::size_t width) {
  const auto bytes = base64_decode(payload);
  if (bytes.size() % 4) throw FormatError("run payload is not a whole number of u32", bytes.size());
  std::vector<std::uint32_t> runs(bytes.size() / 4);
  for (std::size_t i = 0; i < runs.size(); ++i) runs[i] = get_u32(bytes, 4 * i);
  return rle_mask(runs, height, width);
}

json mask_json(const Mask& mask) {
  return {{"height", mask.height}, {"width", mask.width}, {"rle", encode_mask(mask)}};
}

Mask mask_from_json(const json& j) {
  const std::size_t h = index_field(j, "height"), w = index_field(j, "width");
  try {
    return decode_mask(field<std::string>(j, "rle"), h, w);
  } catch (const FormatError& e) {
    throw ArgumentError(std::string("bad mask payload: ") + e.what());
  }
}

Prompt prompt_from_json(const json& j, const Flow& flow, std::size_t frame_index) {
  if (!j.is_object()) throw ArgumentError("prompt must be an object");
  if (frame_index >= flow.size()) throw ArgumentError("frame index out of range");
  const auto type = field<std::string>(j, "type");
  Prompt p;
  p.frame_index = frame_index;
  if (type == "point") {
    const bool positive = j.contains("positive") ? field<bool>(j, "positive") : true;
    p.shape = PointPrompt{index_field(j, "row"), index_field(j, "col"), positive};
  } else if (type == "box") {
    p.shape = BoxPrompt{index_field(j, "r0"), index_field(j, "c0"), index_field(j, "r1"), index_field(j, "c1")};
  } else if (type == "mask") {
    if (!j.contains("mask")) throw ArgumentError("mask prompt needs a 'mask'");
    p.shape = MaskPrompt{mask_from_json(j.at("mask"))};
  } else if (type == "auto") {
    const PromptKind kind = parse_prompt_kind(field<std::string>(j, "kind"));
    const std::uint64_t seed = j.contains("seed") ? field<std::uint64_t>(j, "seed") : 0;
    try {
      p = auto_prompt(flow.frames[frame_index].mask, kind, seed, frame_index);
    } catch (const EmptyForeground& e) {
      throw ArgumentError(e.what());
    }
  } else {
    throw ArgumentError("unknown prompt type '" + type + "'");
  }
  try {
    validate(p, flow.size(), flow.height(), flow.width());
  } catch (const ShapeError& e) {
    throw ArgumentError(e.what());
  }
  return p;
}

json prompt_json(const Prompt& prompt) {
  json j;
  if (const auto* pt = std::get_if<PointPrompt>(&prompt.shape)) {
    j = {{"type", "point"}, {"row", pt->row}, {"col", pt->col}, {"positive", pt->positive}};
  } else if (const auto* b = std::get_if<BoxPrompt>(&prompt.shape)) {
    j = {{"type", "box"}, {"r0", b->r0}, {"c0", b->c0}, {"r1", b->r1}, {"c1", b->c1}};
  } else {
    j = {{"type", "mask"}, {"mask", mask_json(std::get<MaskPrompt>(prompt.shape).mask)}};
  }
  return j;
}

json prediction_json(const net::MaskPrediction& p, std::size_t frame_index) {
  double lo = 1.0, hi = 0.0, sum = 0.0;
  for (double v : p.probs.storage()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
  }
  const std::size_t n = p.probs.size();
  return {{"frame", frame_index},
          {"mask", mask_json(p.mask)},
          {"confidence", p.confidence},
          {"probability",
           {{"mean", n ? sum / static_cast<double>(n) : 0.0},
            {"min", n ? lo : 0.0},
            {"max", n ? hi : 0.0},
            {"foreground_cells", p.mask.count()}}}};
}

json snapshot_json(const membank::BankSnapshot& s) {
  json entries = json::array();
  for (const auto& e : s.entries) {
    entries.push_back({{"frame_index", e.frame_index},
                       {"confidence", e.confidence},
                       {"is_template", e.is_template},
                       {"last_weight", e.last_weight ? json(*e.last_weight) : json(nullptr)}});
  }
  json pickup = json::array();
  double total = 0.0;
  for (const auto& p : s.last_pickup) {
    pickup.push_back({{"frame_index", p.frame_index}, {"weight", p.weight}});
    total += p.weight;
  }
  return {{"entries", entries}, {"last_pickup", pickup}, {"weight_sum", total}};
}

json propagation_json(const engine::PropagationResult& r) {
  json masks = json::array();
  for (std::size_t f = 0; f < r.masks.size(); ++f) masks.push_back(prediction_json(r.masks[f], f));
  json snaps = json::array();
  for (const auto& s : r.bank_snapshots) snaps.push_back(snapshot_json(s));
  return {{"order", r.order}, {"recomputed", r.recomputed}, {"masks", masks}, {"bank_snapshots", snaps}};
}

membank::BankConfig bank_config_from_json(const json& j, membank::BankConfig c) {
  if (j.is_null()) return c;
  if (!j.is_object()) throw ConfigError("bank config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "capacity") {
        if (!v.is_number_integer() || v.get<long long>() < 1) throw ConfigError("capacity must be a positive integer");
        c.capacity = v.get<std::size_t>();
      } else if (key == "mode") {
        c.mode = membank::parse_bank_mode(v.get<std::string>());
      } else if (key == "diversity_threshold") {
        c.diversity_threshold = v.get<double>();
      } else if (key == "pickup_temperature") {
        c.pickup_temperature = v.get<double>();
      } else if (key == "gate_against_templates") {
        c.gate_against_templates = v.get<bool>();
      } else {
        throw ConfigError("unknown bank option '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad bank option: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

json bank_config_json(const membank::BankConfig& c) {
  return {{"capacity", c.capacity},
          {"mode", membank::to_string(c.mode)},
          {"diversity_threshold", c.diversity_threshold},
          {"pickup_temperature", c.pickup_temperature},
          {"gate_against_templates", c.gate_against_templates}};
}

std::vector<std::uint8_t> encode_predictions(std::span<const net::MaskPrediction> preds) {
  const std::size_t h = preds.empty() ? 0 : preds.front().mask.height;
  const std::size_t w = preds.empty() ? 0 : preds.front().mask.width;
  std::vector<std::uint8_t> out(kPredMagic.begin(), kPredMagic.end());
  put_u32(out, kPredVersion);
  put_u32(out, static_cast<std::uint32_t>(preds.size()));
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(w));
  for (const auto& p : preds) {
    if (p.mask.height != h || p.mask.width != w) throw ShapeError("predictions differ in shape");
    const auto bits = std::bit_cast<std::uint64_t>(p.confidence);
    put_u32(out, static_cast<std::uint32_t>(bits));
    put_u32(out, static_cast<std::uint32_t>(bits >> 32));
    out.insert(out.end(), p.mask.cells.begin(), p.mask.cells.end());
  }
  return out;
}

std::vector<net::MaskPrediction> decode_predictions(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPredHeader) throw FormatError("truncated header", bytes.size());
  if (!std::equal(kPredMagic.begin(), kPredMagic.end(), bytes.begin())) {
    throw FormatError("bad magic, expected 'FMSK'", 0);
  }
  if (get_u32(bytes, 4) != kPredVersion) throw FormatError("unsupported version", 4);
  const std::size_t n = get_u32(bytes, 8), h = get_u32(bytes, 12), w = get_u32(bytes, 16);
  const std::size_t expected = kPredHeader + n * (8 + h * w);
  if (bytes.size() < expected) throw FormatError("truncated payload", bytes.size());
  if (bytes.size() > expected) throw FormatError("trailing bytes after payload", expected);
  std::vector<net::MaskPrediction> out(n);
  std::size_t off = kPredHeader;
  for (auto& p : out) {
    const std::uint64_t bits = get_u32(bytes, off) | (static_cast<std::uint64_t>(get_u32(bytes, off + 4)) << 32);
    p.confidence = std::bit_cast<double>(bits);
    off += 8;
    p.mask = Mask(h, w);
    p.probs = Tensor(h, w);
    for (std::size_t i = 0; i < h * w; ++i, ++off) {
      if (bytes[off] > 1) throw FormatError("mask byte not 0/1", off);
      p.mask.cells[i] = bytes[off];
      p.probs[i] = bytes[off];
    }
  }
  return out;
}

void save_predictions(std::span<const net::MaskPrediction> preds, const std::filesystem::path& path) {
  write_file(path, encode_predictions(preds));
}

std::vector<net::MaskPrediction> load_predictions(const std::filesystem::path& path) {
  return decode_predictions(read_file(path));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace flowseg::wire
