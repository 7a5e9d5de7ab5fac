// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/synth.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "binio.hpp"
#include "vidplug/errors.hpp"
#include "vidplug/rng.hpp"

namespace vidplug {

// Generation uses 53-bit uniforms and correctly rounded arithmetic only (no
// libm calls), so samples are identical on any IEEE-754 platform.

namespace {

constexpr char kMagic[4] = {'V', 'P', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kModalityPatternLabel = 0x6d6f64616c697479ULL;
constexpr double kBlobAmplitude = 1.5;

// Irwin-Hall(12) - 6: zero mean, unit variance, bounded to [-6, 6].
double noise(CounterRng& rng) {
  double s = -6.0;
  for (int i = 0; i < 12; ++i) s += rng.uniform();
  return s;
}

// Per-channel weights are powers of two so a / w is exact.
double channel_weight(std::size_t c) {
  static constexpr double w[] = {1.0, 0.5, -0.5, -1.0};
  return w[c % 4];
}

// Square wave of period 4 pixels.
double square(std::size_t k) { return (k / 2) % 2 == 0 ? 1.0 : -1.0; }

struct Dims {
  std::size_t t, h, w, c;
  explicit Dims(const SyntheticSpec& s)
      : t(s.video_shape[0]), h(s.video_shape[1]), w(s.video_shape[2]), c(s.video_shape[3]) {}
  std::size_t at(std::size_t ti, std::size_t y, std::size_t x, std::size_t ci) const {
    return ((ti * h + y) * w + x) * c + ci;
  }
};

// Region q covers rows [qy*h/2, (qy+1)*h/2) and columns [qx*w/2, ...), qy = q / 2, qx = q % 2.
struct Region {
  std::size_t y0, y1, x0, x1;
};
Region region(const Dims& d, std::size_t q) {
  const std::size_t qy = q / 2, qx = q % 2;
  return {qy * d.h / 2, (qy + 1) * d.h / 2, qx * d.w / 2, (qx + 1) * d.w / 2};
}

// Fixed +-1 signature of modality m, derived from the seed only.
std::vector<double> modality_pattern(const SyntheticSpec& spec, std::size_t m) {
  const ModalitySpec& ms = spec.modalities[m];
  CounterRng rng(derive_key(spec.seed, kModalityPatternLabel), m);
  std::vector<double> u(ms.dim);
  for (double& v : u) v = (rng.next_u64() >> 63) != 0 ? 1.0 : -1.0;
  return u;
}

// Signature on `active` steps, noise of sd 1/snr everywhere.
Tensor modality_features(const SyntheticSpec& spec, std::size_t m, CounterRng& rng, double amplitude,
                         std::size_t active_begin, std::size_t active_end) {
  const ModalitySpec& ms = spec.modalities[m];
  const std::vector<double> u = modality_pattern(spec, m);
  const double sd = ms.snr > 0.0 ? 1.0 / ms.snr : 0.0;
  std::vector<double> x(ms.steps * ms.dim);
  for (std::size_t s = 0; s < ms.steps; ++s) {
    const bool on = s >= active_begin && s < active_end;
    for (std::size_t j = 0; j < ms.dim; ++j) {
      const double n = noise(rng);
      x[s * ms.dim + j] = (on ? amplitude * u[j] : 0.0) + sd * n;
    }
  }
  return Tensor::from({ms.steps, ms.dim}, std::move(x));
}

void add_noise(std::vector<double>& v, double sd, CounterRng& rng) {
  for (double& x : v) {
    const double n = noise(rng);
    x += sd * n;
  }
}

Sample window_pattern_sample(const SyntheticSpec& spec, std::size_t index, CounterRng& rng) {
  const Dims d(spec);
  Sample s;
  s.label = index % spec.num_classes;
  const std::size_t odd = s.label % 4;
  const bool majority_up = s.label >= 4;
  std::vector<double> v(d.t * d.h * d.w * d.c, 0.0);
  for (std::size_t q = 0; q < 4; ++q) {
    const Region r = region(d, q);
    const bool up = (q == odd) != majority_up;
    const std::size_t phase = rng.below(4);
    const double amp = 0.75 + 0.5 * rng.uniform();
    for (std::size_t t = 0; t < d.t; ++t) {
      for (std::size_t y = r.y0; y < r.y1; ++y) {
        for (std::size_t x = r.x0; x < r.x1; ++x) {
          // Same horizontal stripes; type A drifts down one row per frame, type B up.
          const std::size_t drift = up ? 4 * d.t - t : t;
          const double wave = square(y - r.y0 + drift + phase);
          for (std::size_t c = 0; c < d.c; ++c) v[d.at(t, y, x, c)] = amp * wave * channel_weight(c);
        }
      }
    }
  }
  add_noise(v, spec.video_noise, rng);
  s.video = Tensor::from({d.t, d.h, d.w, d.c}, std::move(v));
  return s;
}

Sample crossmodal_sample(const SyntheticSpec& spec, std::size_t index, CounterRng& rng) {
  const Dims d(spec);
  Sample s;
  s.label = index % 2;
  const std::size_t n = spec.modalities.size();
  // Bits: vision, then one per modality; the last modality bit fixes the parity.
  std::vector<std::size_t> bits(n + 1);
  std::size_t parity = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bits[i] = rng.next_u64() >> 63;
    parity ^= bits[i];
  }
  bits[n] = parity ^ s.label;

  const std::size_t side = std::max<std::size_t>(1, std::min(d.h, d.w) / 2);
  const std::size_t by = rng.below(d.h - side + 1), bx = rng.below(d.w - side + 1);
  const std::size_t half = d.t / 2;
  const std::size_t t0 = bits[0] == 0 ? 0 : half, t1 = bits[0] == 0 ? half : d.t;
  std::vector<double> v(d.t * d.h * d.w * d.c, 0.0);
  for (std::size_t t = t0; t < t1; ++t) {
    for (std::size_t y = by; y < by + side; ++y) {
      for (std::size_t x = bx; x < bx + side; ++x) {
        for (std::size_t c = 0; c < d.c; ++c) v[d.at(t, y, x, c)] = kBlobAmplitude;
      }
    }
  }
  add_noise(v, spec.video_noise, rng);
  s.video = Tensor::from({d.t, d.h, d.w, d.c}, std::move(v));

  for (std::size_t m = 0; m < n; ++m) {
    const std::size_t steps = spec.modalities[m].steps, mh = steps / 2;
    const bool first = bits[m + 1] == 0;
    s.streams.push_back({spec.modalities[m].name,
                         modality_features(spec, m, rng, 1.0, first ? 0 : mh, first ? mh : steps)});
  }
  return s;
}

// Video factor a scales a fixed stripe field; modality factor b_m scales its signature.
std::vector<double> regression_targets(std::size_t count, double a, const std::vector<double>& b) {
  double f = a * a;
  if (!b.empty()) {
    f = 0.0;
    for (double x : b) f += x;
    f = f / static_cast<double>(b.size());
  }
  std::vector<double> y(count);
  for (std::size_t k = 0; k < count; ++k) {
    const double diff = a - f;
    y[k] = k == 0 ? a + f : k == 1 ? a * f : diff * diff;
  }
  return y;
}

double regression_field(std::size_t t, std::size_t y, std::size_t x, std::size_t c) {
  return square(x + y + t) * channel_weight(c);
}

Sample regression_sample(const SyntheticSpec& spec, CounterRng& rng) {
  const Dims d(spec);
  Sample s;
  const double a = rng.uniform();
  std::vector<double> b(spec.modalities.size());
  for (double& x : b) x = rng.uniform();
  std::vector<double> v(d.t * d.h * d.w * d.c);
  for (std::size_t t = 0; t < d.t; ++t) {
    for (std::size_t y = 0; y < d.h; ++y) {
      for (std::size_t x = 0; x < d.w; ++x) {
        for (std::size_t c = 0; c < d.c; ++c) v[d.at(t, y, x, c)] = a * regression_field(t, y, x, c);
      }
    }
  }
  add_noise(v, spec.video_noise, rng);
  s.video = Tensor::from({d.t, d.h, d.w, d.c}, std::move(v));
  for (std::size_t m = 0; m < b.size(); ++m) {
    s.streams.push_back(
        {spec.modalities[m].name, modality_features(spec, m, rng, b[m], 0, spec.modalities[m].steps)});
  }
  s.targets = regression_targets(spec.num_classes, a, b);
  return s;
}

Dataset generate_all(const SyntheticSpec& spec) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  d.train.reserve(spec.train_size);
  for (std::size_t i = 0; i < spec.train_size; ++i) d.train.push_back(make_sample(spec, Split::train, i));
  d.val.reserve(spec.val_size);
  for (std::size_t i = 0; i < spec.val_size; ++i) d.val.push_back(make_sample(spec, Split::val, i));
  return d;
}

Dataset generate_as(SyntheticSpec spec, TaskKind kind) {
  spec.kind = kind;
  return generate_all(spec);
}

// Projection of a stream onto modality m's signature over a step range.
double stream_projection(const SyntheticSpec& spec, std::size_t m, const Tensor& f, std::size_t s0,
                         std::size_t s1) {
  const std::vector<double> u = modality_pattern(spec, m);
  const auto x = f.data();
  const std::size_t dim = spec.modalities[m].dim;
  double acc = 0.0;
  for (std::size_t s = s0; s < s1; ++s) {
    for (std::size_t j = 0; j < dim; ++j) acc += x[s * dim + j] * u[j];
  }
  return acc;
}

const Tensor& stream_named(const Sample& s, const std::string& name) {
  for (const ModalityStream& m : s.streams) {
    if (m.name == name) return m.features;
  }
  throw DataError("sample has no stream named " + name);
}

}  // namespace

const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::window_pattern:
      return "window-pattern";
    case TaskKind::cross_modal:
      return "cross-modal";
    case TaskKind::regression:
      return "regression";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "window-pattern") return TaskKind::window_pattern;
  if (s == "cross-modal") return TaskKind::cross_modal;
  if (s == "regression") return TaskKind::regression;
  throw ConfigError("unknown task kind '" + s + "'", "data.task");
}

void SyntheticSpec::validate() const {
  for (std::size_t e : video_shape) {
    if (e == 0) throw ConfigError("video extents must be positive", "data.video_shape");
  }
  if (video_noise < 0.0) throw ConfigError("noise must be non-negative", "data.video_noise");
  std::vector<std::string> names;
  for (const ModalitySpec& m : modalities) {
    if (m.dim == 0 || m.steps < 2) throw ConfigError("modality needs dim >= 1 and steps >= 2", "data.modalities");
    if (m.snr < 0.0) throw ConfigError("snr must be non-negative", "data.modalities");
    if (std::find(names.begin(), names.end(), m.name) != names.end()) {
      throw ConfigError("duplicate modality '" + m.name + "'", "data.modalities");
    }
    names.push_back(m.name);
  }
  switch (kind) {
    case TaskKind::window_pattern:
      if (num_classes < 2 || num_classes > 8) {
        throw ConfigError("window-pattern supports 2..8 classes (4 regions x 2 pattern types)",
                          "data.num_classes");
      }
      if (video_shape[0] < 2 || video_shape[1] < 8 || video_shape[2] < 2 || video_shape[1] % 2 ||
          video_shape[2] % 2) {
        throw ConfigError("window-pattern needs T >= 2, even H >= 8 and even W >= 2", "data.video_shape");
      }
      break;
    case TaskKind::cross_modal:
      if (num_classes != 2) throw ConfigError("cross-modal labels are binary", "data.num_classes");
      if (modalities.empty()) throw ConfigError("cross-modal needs a modality", "data.modalities");
      if (video_shape[0] < 2) throw ConfigError("cross-modal needs T >= 2", "data.video_shape");
      break;
    case TaskKind::regression:
      if (num_classes < 1 || num_classes > 3) {
        throw ConfigError("regression supports 1..3 targets", "data.num_classes");
      }
      break;
  }
}

Sample make_sample(const SyntheticSpec& spec, Split split, std::size_t index) {
  CounterRng rng(derive_key(spec.seed, static_cast<std::uint64_t>(split)), index);
  switch (spec.kind) {
    case TaskKind::window_pattern:
      return window_pattern_sample(spec, index, rng);
    case TaskKind::cross_modal:
      return crossmodal_sample(spec, index, rng);
    case TaskKind::regression:
      return regression_sample(spec, rng);
  }
  throw ConfigError("unknown task kind", "data.task");
}

Dataset gen_window_pattern_task(const SyntheticSpec& spec) {
  return generate_as(spec, TaskKind::window_pattern);
}
Dataset gen_crossmodal_task(const SyntheticSpec& spec) { return generate_as(spec, TaskKind::cross_modal); }
Dataset gen_regression_task(const SyntheticSpec& spec) { return generate_as(spec, TaskKind::regression); }
Dataset generate(const SyntheticSpec& spec) { return generate_all(spec); }

std::size_t decode_window_pattern(const SyntheticSpec& spec, const Sample& s) {
  const Dims d(spec);
  const auto v = s.video.data();
  bool up[4];
  std::size_t up_count = 0;
  for (std::size_t q = 0; q < 4; ++q) {
    const Region r = region(d, q);
    // Downward drift: frame t+1 at row y repeats frame t at row y+1; upward: row y-1.
    double miss_down = 0.0, miss_up = 0.0;
    for (std::size_t t = 0; t + 1 < d.t; ++t) {
      for (std::size_t y = r.y0 + 1; y + 1 < r.y1; ++y) {
        for (std::size_t x = r.x0; x < r.x1; ++x) {
          for (std::size_t c = 0; c < d.c; ++c) {
            const double next = v[d.at(t + 1, y, x, c)];
            miss_down += std::abs(next - v[d.at(t, y + 1, x, c)]);
            miss_up += std::abs(next - v[d.at(t, y - 1, x, c)]);
          }
        }
      }
    }
    up[q] = miss_up < miss_down;
    up_count += up[q];
  }
  const bool majority_up = up_count >= 2;
  std::size_t odd = 0;
  for (std::size_t q = 0; q < 4; ++q) {
    if (up[q] != majority_up) odd = q;
  }
  return odd + (majority_up ? 4 : 0);
}

std::size_t decode_crossmodal(const SyntheticSpec& spec, const Sample& s) {
  const Dims d(spec);
  const auto v = s.video.data();
  const std::size_t half = d.t / 2, frame = d.h * d.w * d.c;
  double first = 0.0, second = 0.0;
  for (std::size_t i = 0; i < half * frame; ++i) first += v[i];
  for (std::size_t i = half * frame; i < d.t * frame; ++i) second += v[i];
  std::size_t label = second > first ? 1 : 0;
  for (std::size_t m = 0; m < spec.modalities.size(); ++m) {
    const Tensor& f = stream_named(s, spec.modalities[m].name);
    const std::size_t steps = spec.modalities[m].steps, mh = steps / 2;
    label ^= stream_projection(spec, m, f, mh, steps) > stream_projection(spec, m, f, 0, mh) ? 1 : 0;
  }
  return label;
}

std::vector<double> decode_regression(const SyntheticSpec& spec, const Sample& s) {
  const Dims d(spec);
  const auto v = s.video.data();
  double num = 0.0, den = 0.0;
  for (std::size_t t = 0; t < d.t; ++t) {
    for (std::size_t y = 0; y < d.h; ++y) {
      for (std::size_t x = 0; x < d.w; ++x) {
        for (std::size_t c = 0; c < d.c; ++c) {
          const double p = regression_field(t, y, x, c);
          num += v[d.at(t, y, x, c)] * p;
          den += p * p;
        }
      }
    }
  }
  std::vector<double> b(spec.modalities.size());
  for (std::size_t m = 0; m < b.size(); ++m) {
    const ModalitySpec& ms = spec.modalities[m];
    b[m] = stream_projection(spec, m, stream_named(s, ms.name), 0, ms.steps) /
           static_cast<double>(ms.steps * ms.dim);
  }
  return regression_targets(spec.num_classes, num / den, b);
}

std::string spec_to_json(const SyntheticSpec& spec) {
  nlohmann::ordered_json j;
  j["video_shape"] = spec.video_shape;
  j["num_classes"] = spec.num_classes;
  j["task"] = to_string(spec.kind);
  j["modalities"] = nlohmann::ordered_json::array();
  for (const ModalitySpec& m : spec.modalities) {
    j["modalities"].push_back({{"name", m.name}, {"dim", m.dim}, {"steps", m.steps}, {"snr", m.snr}});
  }
  j["video_noise"] = spec.video_noise;
  j["train_size"] = spec.train_size;
  j["val_size"] = spec.val_size;
  j["seed"] = spec.seed;
  return j.dump();
}

SyntheticSpec spec_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    SyntheticSpec s;
    s.video_shape = j.at("video_shape").get<std::array<std::size_t, 4>>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.kind = parse_task_kind(j.at("task").get<std::string>());
    for (const auto& m : j.at("modalities")) {
      s.modalities.push_back({m.at("name").get<std::string>(), m.at("dim").get<std::size_t>(),
                              m.at("steps").get<std::size_t>(), m.at("snr").get<double>()});
    }
    s.video_noise = j.at("video_noise").get<double>();
    s.train_size = j.at("train_size").get<std::size_t>();
    s.val_size = j.at("val_size").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad dataset spec: ") + e.what());
  }
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  binio::Writer w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.str(spec_to_json(d.spec));
  for (const auto* split : {&d.train, &d.val}) {
    w.u64(split->size());
    for (const Sample& s : *split) {
      w.u64(s.label);
      w.f64s(s.targets);
      w.f64s(s.video.to_vector());
      w.u64(s.streams.size());
      for (const ModalityStream& m : s.streams) {
        w.str(m.name);
        w.u64(m.features.shape().at(0));
        w.f64s(m.features.to_vector());
      }
    }
  }
  w.save(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  binio::Reader r = binio::Reader::load(path);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("not a dataset container: bad magic");
  if (const std::uint32_t v = r.u32(); v != kVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(v));
  }
  Dataset d;
  d.spec = spec_from_json(r.str());
  const Dims dims(d.spec);
  const Shape video_shape{dims.t, dims.h, dims.w, dims.c};
  for (auto* split : {&d.train, &d.val}) {
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      Sample s;
      s.label = r.u64();
      s.targets = r.f64s();
      std::vector<double> video = r.f64s();
      if (video.size() != numel(video_shape)) throw FormatError("video record has the wrong size");
      s.video = Tensor::from(video_shape, std::move(video));
      const std::uint64_t streams = r.u64();
      for (std::uint64_t m = 0; m < streams; ++m) {
        std::string name = r.str();
        const std::uint64_t steps = r.u64();
        std::vector<double> f = r.f64s();
        if (steps == 0 || f.size() % steps != 0) throw FormatError("ragged stream record");
        const std::size_t dim = f.size() / steps;
        s.streams.push_back({std::move(name), Tensor::from({steps, dim}, std::move(f))});
      }
      split->push_back(std::move(s));
    }
  }
  if (!r.done()) throw FormatError("trailing bytes in dataset container");
  return d;
}

}  // namespace vidplug
