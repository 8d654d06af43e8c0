#pragma once

// Wire formats shared by the service and the CLI: run-length mask payloads,
// JSON conversions and the prediction file.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "flowseg/engine.hpp"
#include "flowseg/flowdata.hpp"
#include "flowseg/membank.hpp"
#include "flowseg/network.hpp"

namespace flowseg::wire {

using nlohmann::json;

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws FormatError on characters outside the standard alphabet or bad padding.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Row-major run lengths, alternating background/foreground, starting with a
/// (possibly zero) background run.
std::vector<std::uint32_t> rle_runs(const Mask& mask);
/// Throws FormatError when the runs do not cover exactly height*width cells.
Mask rle_mask(std::span<const std::uint32_t> runs, std::size_t height, std::size_t width);

/// base64 of the runs as little-endian u32.
std::string encode_mask(const Mask& mask);
Mask decode_mask(std::string_view payload, std::size_t height, std::size_t width);

/// {"height", "width", "rle"}
json mask_json(const Mask& mask);
Mask mask_from_json(const json& j);

/// Prompt objects:
///   {"type":"point","row":r,"col":c,"positive":true}
///   {"type":"box","r0":..,"c0":..,"r1":..,"c1":..}
///   {"type":"mask","mask":{mask_json}}
///   {"type":"auto","kind":"point|box|mask","seed":s}  derived from the flow's ground truth
/// Throws ArgumentError on anything malformed or out of bounds.
Prompt prompt_from_json(const json& j, const Flow& flow, std::size_t frame_index);
json prompt_json(const Prompt& prompt);

json prediction_json(const net::MaskPrediction& p, std::size_t frame_index);
json snapshot_json(const membank::BankSnapshot& s);
json propagation_json(const engine::PropagationResult& r);

/// Unknown keys and invalid values raise ConfigError.
membank::BankConfig bank_config_from_json(const json& j, membank::BankConfig base);
json bank_config_json(const membank::BankConfig& c);

/// Prediction file, little-endian: magic "FMSK", u32 version, u32 n_frames,
/// u32 height, u32 width, then per frame an f64 confidence followed by
/// height*width mask bytes.
std::vector<std::uint8_t> encode_predictions(std::span<const net::MaskPrediction> preds);
std::vector<net::MaskPrediction> decode_predictions(std::span<const std::uint8_t> bytes);
void save_predictions(std::span<const net::MaskPrediction> preds, const std::filesystem::path& path);
std::vector<net::MaskPrediction> load_predictions(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace flowseg::wire
