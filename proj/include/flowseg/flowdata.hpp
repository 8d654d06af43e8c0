#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace flowseg {

/// Grayscale image, intensities in [0, 1], row-major.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary mask, cells in {0, 1}, row-major.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> cells;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), cells(h * w, 0) {}

  std::uint8_t at(std::size_t r, std::size_t c) const { return cells[r * width + c]; }
  std::uint8_t& at(std::size_t r, std::size_t c) { return cells[r * width + c]; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  friend bool operator==(const Mask&, const Mask&) = default;
};

struct PointPrompt {
  std::size_t row = 0;
  std::size_t col = 0;
  bool positive = true;
  friend bool operator==(const PointPrompt&, const PointPrompt&) = default;
};

/// Inclusive pixel bounds.
struct BoxPrompt {
  std::size_t r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  friend bool operator==(const BoxPrompt&, const BoxPrompt&) = default;
};

struct MaskPrompt {
  Mask mask;
  friend bool operator==(const MaskPrompt&, const MaskPrompt&) = default;
};

enum class PromptKind { point, box, mask };

struct Prompt {
  std::size_t frame_index = 0;
  std::variant<PointPrompt, BoxPrompt, MaskPrompt> shape;

  PromptKind kind() const { return static_cast<PromptKind>(shape.index()); }
  friend bool operator==(const Prompt&, const Prompt&) = default;
};

enum class FlowMode : std::uint32_t { volumetric = 0, unordered = 1 };
enum class TaskClass : std::uint32_t { ellipse = 0, ring = 1, polygon_blob = 2 };
inline constexpr std::size_t kTaskClassCount = 3;

struct Frame {
  Image image;
  Mask mask;
  friend bool operator==(const Frame&, const Frame&) = default;
};

struct Flow {
  std::vector<Frame> frames;
  FlowMode mode = FlowMode::volumetric;
  TaskClass task_class = TaskClass::ellipse;

  std::size_t size() const { return frames.size(); }
  std::size_t height() const { return frames.empty() ? 0 : frames.front().image.height; }
  std::size_t width() const { return frames.empty() ? 0 : frames.front().image.width; }
  friend bool operator==(const Flow&, const Flow&) = default;
};

/// Throws ShapeError / ArgumentError when a value breaks its type invariants.
void validate(const Image& image);
void validate(const Mask& mask);
void validate(const Prompt& prompt, std::size_t n_frames, std::size_t height, std::size_t width);
void validate(const Flow& flow);

struct GeneratorOptions {
  /// Objects of other classes drawn into every frame but absent from the mask.
  std::size_t distractors = 1;
  /// Per-frame centre displacement bound for volumetric flows, at size 64.
  double max_step = 1.5;
  /// Per-frame relative axis change bound for volumetric flows.
  double max_axis_change = 0.08;
};

Flow generate_volume_flow(std::uint64_t seed, std::size_t n_frames, TaskClass task_class,
                          std::size_t size, const GeneratorOptions& options = {});
Flow generate_unordered_flow(std::uint64_t seed, std::size_t n_frames, TaskClass task_class,
                             std::size_t size, const GeneratorOptions& options = {});

/// Derives a prompt of the requested kind from a ground-truth mask.
/// Throws EmptyForeground for point/box prompts on an empty mask.
Prompt auto_prompt(const Mask& mask, PromptKind kind, std::uint64_t seed,
                   std::size_t frame_index = 0);

void save_flow(const Flow& flow, const std::filesystem::path& path);
Flow load_flow(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_flow(const Flow& flow);
/// Throws FormatError with the offending byte offset; never returns a partial flow.
Flow decode_flow(std::span<const std::uint8_t> bytes);

std::string_view to_string(FlowMode mode);
std::string_view to_string(TaskClass task_class);
std::string_view to_string(PromptKind kind);
FlowMode parse_flow_mode(std::string_view text);
TaskClass parse_task_class(std::string_view text);
PromptKind parse_prompt_kind(std::string_view text);

}  // namespace flowseg
