#include "flowseg/flowdata.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "flowseg/errors.hpp"
#include "flowseg/rng.hpp"

namespace flowseg {
namespace {

constexpr double kPi = 3.14159265358979323846;

struct Shape {
  TaskClass cls = TaskClass::ellipse;
  double cy = 0, cx = 0;  // centre
  double ay = 0, ax = 0;  // semi-axes (outer for rings)
  double theta = 0;       // orientation
  double harm2 = 0, harm3 = 0, phase2 = 0, phase3 = 0;  // blob outline
  double base = 0.7;      // mean intensity
  double tex_phase_a = 0, tex_phase_b = 0, tex_angle = 0;
};

constexpr double kRingInner = 0.5;

// Normalised radial coordinate of (y, x) in the shape's rotated frame, and
// the polar angle there.
inline void local_coords(const Shape& s, double y, double x, double& rho, double& phi) {
  const double dy = y - s.cy, dx = x - s.cx;
  const double ct = std::cos(s.theta), st = std::sin(s.theta);
  const double u = (ct * dx + st * dy) / s.ax;
  const double v = (-st * dx + ct * dy) / s.ay;
  rho = std::sqrt(u * u + v * v);
  phi = std::atan2(v, u);
}

bool inside(const Shape& s, double y, double x) {
  double rho, phi;
  local_coords(s, y, x, rho, phi);
  switch (s.cls) {
    case TaskClass::ellipse:
      return rho <= 1.0;
    case TaskClass::ring:
      return rho <= 1.0 && rho >= kRingInner;
    case TaskClass::polygon_blob: {
      const double r = 1.0 + s.harm2 * std::cos(2 * phi + s.phase2) +
                       s.harm3 * std::cos(3 * phi + s.phase3);
      return rho <= r;
    }
  }
  return false;
}

// Class-specific texture: oriented stripes, a checkerboard, or a dot lattice.
double texture(const Shape& s, double y, double x, double scale) {
  constexpr double amp = 0.09;
  switch (s.cls) {
    case TaskClass::ellipse: {
      const double t = std::cos(s.tex_angle) * x + std::sin(s.tex_angle) * y;
      return amp * std::sin(2 * kPi * t / (6.0 * scale) + s.tex_phase_a);
    }
    case TaskClass::ring: {
      const double a = std::sin(kPi * x / (3.0 * scale) + s.tex_phase_a);
      const double b = std::sin(kPi * y / (3.0 * scale) + s.tex_phase_b);
      return amp * (a * b >= 0 ? 1.0 : -1.0);
    }
    case TaskClass::polygon_blob: {
      const double a = std::sin(2 * kPi * x / (3.5 * scale) + s.tex_phase_a);
      const double b = std::sin(2 * kPi * y / (3.5 * scale) + s.tex_phase_b);
      return amp * (2.0 * a * a * b * b - 0.5);
    }
  }
  return 0.0;
}

double extent(const Shape& s) {
  const double m = std::max(s.ay, s.ax);
  return s.cls == TaskClass::polygon_blob ? m * (1.0 + s.harm2 + s.harm3) : m;
}

// Overlapping per-class brightness bands; texture and outline carry the rest.
void base_range(TaskClass cls, double& lo, double& hi) {
  switch (cls) {
    case TaskClass::ellipse: lo = 0.55; hi = 0.72; break;
    case TaskClass::ring: lo = 0.63; hi = 0.80; break;
    case TaskClass::polygon_blob: lo = 0.71; hi = 0.88; break;
    default: lo = 0.55; hi = 0.88; break;
  }
}

Shape sample_shape(Rng& rng, TaskClass cls, double size) {
  Shape s;
  s.cls = cls;
  const double scale = size / 64.0;
  switch (cls) {
    case TaskClass::ellipse: {
      s.ay = rng.uniform(7.5, 12.5) * scale;
      s.ax = s.ay * rng.uniform(0.65, 1.35);
      break;
    }
    case TaskClass::ring: {
      s.ay = rng.uniform(9.0, 13.5) * scale;
      s.ax = s.ay * rng.uniform(0.8, 1.2);
      break;
    }
    case TaskClass::polygon_blob: {
      s.ay = rng.uniform(7.5, 11.5) * scale;
      s.ax = s.ay * rng.uniform(0.8, 1.2);
      s.harm2 = rng.uniform(0.05, 0.18);
      s.harm3 = rng.uniform(0.05, 0.16);
      s.phase2 = rng.uniform(0, 2 * kPi);
      s.phase3 = rng.uniform(0, 2 * kPi);
      break;
    }
  }
  s.theta = rng.uniform(0, kPi);
  double lo, hi;
  base_range(cls, lo, hi);
  s.base = rng.uniform(lo, hi);
  s.tex_phase_a = rng.uniform(0, 2 * kPi);
  s.tex_phase_b = rng.uniform(0, 2 * kPi);
  s.tex_angle = rng.uniform(0, kPi);
  return s;
}

void place(Rng& rng, Shape& s, double size) {
  const double margin = extent(s) + 1.0;
  const double lo = margin, hi = std::max(margin, size - 1.0 - margin);
  s.cy = rng.uniform(lo, hi);
  s.cx = rng.uniform(lo, hi);
}

bool separated(const Shape& a, const Shape& b) {
  const double d = std::hypot(a.cy - b.cy, a.cx - b.cx);
  return d >= extent(a) + extent(b) + 3.0;
}

TaskClass other_class(Rng& rng, TaskClass target) {
  const auto offset = 1 + rng.below(kTaskClassCount - 1);
  return static_cast<TaskClass>((static_cast<std::uint64_t>(target) + offset) % kTaskClassCount);
}

struct Background {
  double level, gy, gx;
};

Frame render(const std::vector<Shape>& shapes, const Background& bg, std::size_t size,
             Rng& noise) {
  Frame f;
  f.image.height = f.image.width = size;
  f.image.pixels.resize(size * size);
  f.mask = Mask(size, size);
  const double scale = static_cast<double>(size) / 64.0;
  const double n = static_cast<double>(size);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const double y = static_cast<double>(r), x = static_cast<double>(c);
      double v = bg.level + bg.gy * (y / n - 0.5) + bg.gx * (x / n - 0.5);
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (inside(shapes[i], y, x)) {
          v = shapes[i].base + texture(shapes[i], y, x, scale);
          if (i == 0) f.mask.at(r, c) = 1;
          break;
        }
      }
      v += noise.normal(0.0, 0.035);
      f.image.pixels[r * size + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return f;
}

Background sample_background(Rng& rng) {
  return {rng.uniform(0.15, 0.3), rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08)};
}

void check_generator_args(std::size_t n_frames, std::size_t size) {
  if (n_frames == 0) throw ArgumentError("n_frames must be at least 1");
  if (size < 16) throw ArgumentError("size must be at least 16");
}

// Keeps the largest 4-connected foreground component. Rasterising a thin
// outline can occasionally split it.
void keep_largest_component(Mask& m) {
  std::vector<int> label(m.cells.size(), -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < m.cells.size(); ++i) {
    if (!m.cells[i] || label[i] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t count = 0;
    stack.push_back(i);
    label[i] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++count;
      const std::size_t r = p / m.width, c = p % m.width;
      const std::size_t nbrs[4] = {r > 0 ? p - m.width : p, r + 1 < m.height ? p + m.width : p,
                                   c > 0 ? p - 1 : p, c + 1 < m.width ? p + 1 : p};
      for (std::size_t q : nbrs) {
        if (m.cells[q] && label[q] < 0) {
          label[q] = id;
          stack.push_back(q);
        }
      }
    }
    sizes.push_back(count);
  }
  if (sizes.size() <= 1) return;
  const int keep = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < m.cells.size(); ++i)
    if (label[i] != keep) m.cells[i] = 0;
}

}  // namespace

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
}

void validate(const Image& image) {
  if (image.height < 8 || image.width < 8) throw ShapeError("image must be at least 8x8");
  if (image.pixels.size() != image.height * image.width) throw ShapeError("image pixel count mismatch");
  for (float v : image.pixels) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw ArgumentError("image intensity outside [0,1]");
  }
}

void validate(const Mask& mask) {
  if (mask.cells.size() != mask.height * mask.width) throw ShapeError("mask cell count mismatch");
  for (auto v : mask.cells) {
    if (v > 1) throw ArgumentError("mask values must be 0 or 1");
  }
}

void validate(const Prompt& prompt, std::size_t n_frames, std::size_t height, std::size_t width) {
  if (prompt.frame_index >= n_frames) {
    throw ArgumentError("prompt frame " + std::to_string(prompt.frame_index) + " outside flow of " +
                        std::to_string(n_frames) + " frames");
  }
  if (const auto* p = std::get_if<PointPrompt>(&prompt.shape)) {
    if (p->row >= height || p->col >= width) throw ArgumentError("point prompt outside image");
  } else if (const auto* b = std::get_if<BoxPrompt>(&prompt.shape)) {
    if (!(b->r0 < b->r1 && b->c0 < b->c1)) throw ArgumentError("box prompt needs r0 < r1 and c0 < c1");
    if (b->r1 >= height || b->c1 >= width) throw ArgumentError("box prompt outside image");
  } else {
    const auto& m = std::get<MaskPrompt>(prompt.shape).mask;
    validate(m);
    if (m.height != height || m.width != width) throw ShapeError("mask prompt shape mismatch");
  }
}

void validate(const Flow& flow) {
  if (flow.frames.empty()) throw ArgumentError("flow has no frames");
  const std::size_t h = flow.height(), w = flow.width();
  for (const Frame& f : flow.frames) {
    validate(f.image);
    validate(f.mask);
    if (f.image.height != h || f.image.width != w || f.mask.height != h || f.mask.width != w) {
      throw ShapeError("flow frames must share one shape");
    }
  }
}

Flow generate_volume_flow(std::uint64_t seed, std::size_t n_frames, TaskClass task_class,
                          std::size_t size, const GeneratorOptions& options) {
  check_generator_args(n_frames, size);
  Rng rng(seed);
  const double sz = static_cast<double>(size);
  const double scale = sz / 64.0;
  const double max_step = options.max_step * scale;
  const Background bg = sample_background(rng);

  // Sample trajectories until target and distractors stay apart on every slice.
  std::vector<std::vector<Shape>> slices;
  for (int attempt = 0; attempt < 200; ++attempt) {
    std::vector<Shape> objects;
    objects.push_back(sample_shape(rng, task_class, sz));
    for (std::size_t i = 0; i < options.distractors; ++i)
      objects.push_back(sample_shape(rng, other_class(rng, task_class), sz));
    for (Shape& s : objects) place(rng, s, sz);

    struct Motion {
      double vy, vx, growth, spin;
    };
    std::vector<Motion> motion;
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const double a = rng.uniform(0, 2 * kPi), speed = rng.uniform(0, max_step * 0.7);
      motion.push_back({speed * std::sin(a), speed * std::cos(a),
                        rng.uniform(-0.5, 0.5) * options.max_axis_change, rng.uniform(-0.04, 0.04)});
    }
    slices.assign(1, objects);
    bool ok = true;
    for (std::size_t t = 1; t < n_frames && ok; ++t) {
      std::vector<Shape> next = slices.back();
      for (std::size_t i = 0; i < next.size(); ++i) {
        Shape& s = next[i];
        Motion& mv = motion[i];
        mv.vy += rng.normal(0, 0.25 * scale);
        mv.vx += rng.normal(0, 0.25 * scale);
        const double speed = std::hypot(mv.vy, mv.vx);
        if (speed > max_step) {
          mv.vy *= max_step / speed;
          mv.vx *= max_step / speed;
        }
        mv.growth = std::clamp(mv.growth + rng.normal(0, 0.02), -options.max_axis_change,
                               options.max_axis_change);
        const double factor = 1.0 + mv.growth;
        const double lo_axis = 0.6 * (s.cls == TaskClass::ring ? 9.0 : 7.5) * scale;
        const double hi_axis = 1.4 * 13.5 * scale;
        if ((s.ay * factor < lo_axis && factor < 1) || (s.ay * factor > hi_axis && factor > 1)) {
          mv.growth = -mv.growth;
        } else {
          s.ay *= factor;
          s.ax *= factor;
        }
        s.theta += mv.spin;
        const double margin = extent(s) + 1.0;
        double ny = s.cy + mv.vy, nx = s.cx + mv.vx;
        if (ny < margin || ny > sz - 1.0 - margin) {
          mv.vy = -mv.vy;
          ny = s.cy + mv.vy;
        }
        if (nx < margin || nx > sz - 1.0 - margin) {
          mv.vx = -mv.vx;
          nx = s.cx + mv.vx;
        }
        s.cy = std::clamp(ny, margin, std::max(margin, sz - 1.0 - margin));
        s.cx = std::clamp(nx, margin, std::max(margin, sz - 1.0 - margin));
      }
      slices.push_back(std::move(next));
    }
    for (const auto& objs : slices)
      for (std::size_t i = 1; i < objs.size() && ok; ++i) ok = separated(objs[0], objs[i]);
    if (ok) break;
    if (attempt == 199) {
      // Fall back to the target alone rather than fail a valid request.
      for (auto& objs : slices) objs.resize(1);
    }
  }

  Flow flow;
  flow.mode = FlowMode::volumetric;
  flow.task_class = task_class;
  Rng noise(mix_seed(seed, 0xA11CE));
  for (const auto& objs : slices) {
    flow.frames.push_back(render(objs, bg, size, noise));
    keep_largest_component(flow.frames.back().mask);
  }
  return flow;
}

Flow generate_unordered_flow(std::uint64_t seed, std::size_t n_frames, TaskClass task_class,
                             std::size_t size, const GeneratorOptions& options) {
  check_generator_args(n_frames, size);
  const double sz = static_cast<double>(size);
  Flow flow;
  flow.mode = FlowMode::unordered;
  flow.task_class = task_class;
  for (std::size_t t = 0; t < n_frames; ++t) {
    Rng rng(mix_seed(seed, t));
    const Background bg = sample_background(rng);
    std::vector<Shape> objects;
    objects.push_back(sample_shape(rng, task_class, sz));
    place(rng, objects[0], sz);
    for (std::size_t i = 0; i < options.distractors; ++i) {
      Shape d = sample_shape(rng, other_class(rng, task_class), sz);
      bool ok = false;
      for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        place(rng, d, sz);
        ok = std::all_of(objects.begin(), objects.end(),
                         [&](const Shape& o) { return separated(o, d); });
      }
      if (ok) objects.push_back(d);
    }
    Rng noise(mix_seed(seed, 0xA11CE + t));
    flow.frames.push_back(render(objects, bg, size, noise));
    keep_largest_component(flow.frames.back().mask);
  }
  return flow;
}

Prompt auto_prompt(const Mask& mask, PromptKind kind, std::uint64_t seed, std::size_t frame_index) {
  validate(mask);
  Prompt p;
  p.frame_index = frame_index;
  if (kind == PromptKind::mask) {
    p.shape = MaskPrompt{mask};
    return p;
  }
  const std::size_t n = mask.count();
  if (n == 0) throw EmptyForeground("cannot derive a point or box prompt from an empty mask");
  if (kind == PromptKind::point) {
    Rng rng(seed);
    std::size_t pick = rng.below(n);
    for (std::size_t i = 0; i < mask.cells.size(); ++i) {
      if (mask.cells[i] && pick-- == 0) {
        p.shape = PointPrompt{i / mask.width, i % mask.width, true};
        return p;
      }
    }
  }
  BoxPrompt b{mask.height, mask.width, 0, 0};
  for (std::size_t r = 0; r < mask.height; ++r) {
    for (std::size_t c = 0; c < mask.width; ++c) {
      if (!mask.at(r, c)) continue;
      b.r0 = std::min(b.r0, r);
      b.c0 = std::min(b.c0, c);
      b.r1 = std::max(b.r1, r);
      b.c1 = std::max(b.c1, c);
    }
  }
  // A box must span at least two rows and columns; widen degenerate extents.
  auto widen = [](std::size_t& lo, std::size_t& hi, std::size_t limit) {
    if (lo < hi) return;
    if (hi + 1 < limit) ++hi;
    else --lo;
  };
  widen(b.r0, b.r1, mask.height);
  widen(b.c0, b.c1, mask.width);
  p.shape = b;
  return p;
}

// ---- .flow files -------------------------------------------------------------
//
// Little-endian. 32-byte header:
//   0  magic "FLOW"     4  version (1)   8  mode      12 n_frames
//   16 height           20 width         24 task_class 28 reserved (0)
// followed by n_frames*H*W float32 intensities, then n_frames*H*W mask bytes.

namespace {

constexpr std::array<char, 4> kFlowMagic{'F', 'L', 'O', 'W'};
constexpr std::uint32_t kFlowVersion = 1;
constexpr std::size_t kHeaderBytes = 32;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_flow(const Flow& flow) {
  validate(flow);
  const std::size_t n = flow.size(), h = flow.height(), w = flow.width();
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + n * h * w * 5);
  out.insert(out.end(), kFlowMagic.begin(), kFlowMagic.end());
  put_u32(out, kFlowVersion);
  put_u32(out, static_cast<std::uint32_t>(flow.mode));
  put_u32(out, static_cast<std::uint32_t>(n));
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(w));
  put_u32(out, static_cast<std::uint32_t>(flow.task_class));
  put_u32(out, 0);
  for (const Frame& f : flow.frames)
    for (float v : f.image.pixels) put_u32(out, std::bit_cast<std::uint32_t>(v));
  for (const Frame& f : flow.frames) out.insert(out.end(), f.mask.cells.begin(), f.mask.cells.end());
  return out;
}

Flow decode_flow(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("truncated header", bytes.size());
  if (!std::equal(kFlowMagic.begin(), kFlowMagic.end(), bytes.begin())) {
    throw FormatError("bad magic, expected 'FLOW'", 0);
  }
  if (get_u32(bytes, 4) != kFlowVersion) throw FormatError("unsupported version", 4);
  const std::uint32_t mode = get_u32(bytes, 8);
  if (mode > 1) throw FormatError("invalid mode", 8);
  const std::size_t n = get_u32(bytes, 12), h = get_u32(bytes, 16), w = get_u32(bytes, 20);
  if (n == 0) throw FormatError("zero frames", 12);
  if (h < 8) throw FormatError("height below 8", 16);
  if (w < 8) throw FormatError("width below 8", 20);
  const std::uint32_t cls = get_u32(bytes, 24);
  if (cls >= kTaskClassCount) throw FormatError("invalid task class", 24);

  const std::size_t plane = h * w;
  const std::size_t expected = kHeaderBytes + n * plane * 5;
  if (bytes.size() < expected) throw FormatError("truncated payload", bytes.size());
  if (bytes.size() > expected) throw FormatError("trailing bytes after payload", expected);

  Flow flow;
  flow.mode = static_cast<FlowMode>(mode);
  flow.task_class = static_cast<TaskClass>(cls);
  flow.frames.resize(n);
  std::size_t off = kHeaderBytes;
  for (Frame& f : flow.frames) {
    f.image.height = h;
    f.image.width = w;
    f.image.pixels.resize(plane);
    for (std::size_t i = 0; i < plane; ++i, off += 4) {
      const float v = std::bit_cast<float>(get_u32(bytes, off));
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw FormatError("intensity outside [0,1]", off);
      f.image.pixels[i] = v;
    }
  }
  for (Frame& f : flow.frames) {
    f.mask = Mask(h, w);
    for (std::size_t i = 0; i < plane; ++i, ++off) {
      if (bytes[off] > 1) throw FormatError("mask byte not 0/1", off);
      f.mask.cells[i] = bytes[off];
    }
  }
  return flow;
}

void save_flow(const Flow& flow, const std::filesystem::path& path) {
  const auto bytes = encode_flow(flow);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

Flow load_flow(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_flow(bytes);
}

std::string_view to_string(FlowMode mode) {
  return mode == FlowMode::volumetric ? "volumetric" : "unordered";
}

std::string_view to_string(TaskClass task_class) {
  switch (task_class) {
    case TaskClass::ellipse: return "ellipse";
    case TaskClass::ring: return "ring";
    case TaskClass::polygon_blob: return "polygon-blob";
  }
  return "?";
}

std::string_view to_string(PromptKind kind) {
  switch (kind) {
    case PromptKind::point: return "point";
    case PromptKind::box: return "box";
    case PromptKind::mask: return "mask";
  }
  return "?";
}

FlowMode parse_flow_mode(std::string_view text) {
  if (text == "volumetric") return FlowMode::volumetric;
  if (text == "unordered") return FlowMode::unordered;
  throw ArgumentError("unknown flow mode '" + std::string(text) + "'");
}

TaskClass parse_task_class(std::string_view text) {
  if (text == "ellipse") return TaskClass::ellipse;
  if (text == "ring") return TaskClass::ring;
  if (text == "polygon-blob") return TaskClass::polygon_blob;
  throw ArgumentError("unknown task class '" + std::string(text) + "'");
}

PromptKind parse_prompt_kind(std::string_view text) {
  if (text == "point") return PromptKind::point;
  if (text == "box") return PromptKind::box;
  if (text == "mask") return PromptKind::mask;
  throw ArgumentError("unknown prompt kind '" + std::string(text) + "'");
}

}  // namespace flowseg
