#include "dmu/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace dmu {

void SequenceBatch::validate() const {
  const std::size_t B = inputs.size();
  if (lengths.size() != B) throw DatasetError("lengths count does not match batch size");
  if (!labels.empty() && labels.size() != B) {
    throw DatasetError("labels count does not match batch size");
  }
  if (!step_labels.empty() && step_labels.size() != B) {
    throw DatasetError("step label count does not match batch size");
  }
  if (!values.empty() && values.size() != B) {
    throw DatasetError("target value count does not match batch size");
  }
  auto check_class = [&](int c) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw DatasetError("class index " + std::to_string(c) + " outside [0, " +
                         std::to_string(num_classes) + ")");
    }
  };
  for (std::size_t b = 0; b < B; ++b) {
    const Matrix& x = inputs[b];
    if (x.rows() != steps() || x.cols() != channels()) {
      throw DatasetError("sequence " + std::to_string(b) + " has inconsistent shape");
    }
    if (lengths[b] > x.rows()) throw DatasetError("length exceeds sequence steps");
    if (!all_finite(x.span())) throw DatasetError("non-finite input value");
    if (!labels.empty()) check_class(labels[b]);
    if (!step_labels.empty()) {
      if (step_labels[b].size() != x.rows()) throw DatasetError("step labels length mismatch");
      for (int c : step_labels[b]) check_class(c);
    }
  }
}

void DelayedRecallSpec::validate() const {
  if (alphabet < 2) throw DatasetError("alphabet must hold at least two symbols");
  if (delay < 1) throw DatasetError("delay must be at least 1");
  if (length < delay + 2) throw DatasetError("length must be at least delay + 2");
}

SequenceBatch gen_delayed_recall(const DelayedRecallSpec& spec, std::size_t count) {
  spec.validate();
  SequenceBatch batch;
  batch.num_classes = spec.alphabet;
  const std::size_t M = spec.channels();
  const std::size_t latest_start = spec.length - spec.delay - 1;
  for (std::size_t i = 0; i < count; ++i) {
    SeededRng rng = SeededRng(spec.seed).fork(i);
    Matrix x(spec.length, M);
    const auto symbol = static_cast<std::size_t>(rng.below(spec.alphabet));
    const std::size_t t0 =
        spec.anchored ? latest_start : static_cast<std::size_t>(rng.below(latest_start + 1));
    for (std::size_t t = 0; t < spec.length; ++t) {
      if (t == t0) {
        x(t, symbol) = 1.0;
      } else if (spec.distractors) {
        x(t, static_cast<std::size_t>(rng.below(spec.alphabet))) = 1.0;
      }
    }
    x(t0 + spec.delay, spec.alphabet) = 1.0;
    if (spec.noise) {
      for (std::size_t t = 0; t < spec.length; ++t) {
        for (std::size_t c = spec.alphabet + 1; c < M; ++c) x(t, c) = rng.uniform();
      }
    }
    batch.inputs.push_back(std::move(x));
    batch.labels.push_back(static_cast<int>(symbol));
    batch.lengths.push_back(spec.length);
  }
  return batch;
}

SequenceBatch gen_adding(const AddingSpec& spec, std::size_t count) {
  if (spec.length < 2) throw DatasetError("adding task needs at least two steps");
  SequenceBatch batch;
  batch.num_classes = spec.classes;
  const std::size_t half = spec.length / 2;
  for (std::size_t i = 0; i < count; ++i) {
    SeededRng rng = SeededRng(spec.seed).fork(i);
    Matrix x(spec.length, 2);
    for (std::size_t t = 0; t < spec.length; ++t) x(t, 0) = rng.uniform();
    const auto first = static_cast<std::size_t>(rng.below(half));
    const auto second = half + static_cast<std::size_t>(rng.below(spec.length - half));
    x(first, 1) = 1.0;
    x(second, 1) = 1.0;
    const double sum = x(first, 0) + x(second, 0);
    batch.values.push_back(sum);
    if (spec.classes > 0) {
      auto bin = static_cast<std::size_t>(sum / 2.0 * static_cast<double>(spec.classes));
      batch.labels.push_back(static_cast<int>(std::min(bin, spec.classes - 1)));
    }
    batch.inputs.push_back(std::move(x));
    batch.lengths.push_back(spec.length);
  }
  return batch;
}

// IDX

namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Header: magic then `ndims` big-endian dimensions. Returns the dimensions
// and checks the payload is exactly their product.
std::vector<std::size_t> read_idx_header(std::span<const std::uint8_t> bytes,
                                         std::uint32_t magic, std::size_t ndims) {
  if (bytes.size() < 4) throw IdxError(IdxErrorKind::truncated, "idx: missing magic");
  const std::uint32_t got = read_be32(bytes, 0);
  if (got != magic) {
    std::ostringstream msg;
    msg << "idx: bad magic 0x" << std::hex << got << ", expected 0x" << magic;
    throw IdxError(IdxErrorKind::bad_magic, msg.str());
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) throw IdxError(IdxErrorKind::truncated, "idx: truncated header");
  std::vector<std::size_t> dims;
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    dims.push_back(read_be32(bytes, 4 + 4 * i));
    if (__builtin_mul_overflow(total, dims.back(), &total)) {
      throw IdxError(IdxErrorKind::dimension_overflow, "idx: dimensions overflow");
    }
  }
  if (total > bytes.size() - header) {
    throw IdxError(IdxErrorKind::truncated, "idx: payload holds " +
                                                std::to_string(bytes.size() - header) +
                                                " bytes, header declares " +
                                                std::to_string(total));
  }
  if (total < bytes.size() - header) {
    throw IdxError(IdxErrorKind::trailing_bytes, "idx: payload larger than declared");
  }
  return dims;
}

}  // namespace

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  const auto dims = read_idx_header(bytes, kIdxImageMagic, 3);
  IdxImages images;
  images.count = dims[0];
  images.rows = dims[1];
  images.cols = dims[2];
  images.pixels.resize(images.count * images.rows * images.cols);
  for (std::size_t i = 0; i < images.pixels.size(); ++i) {
    images.pixels[i] = static_cast<double>(bytes[16 + i]) / 255.0;
  }
  return images;
}

std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  const auto dims = read_idx_header(bytes, kIdxLabelMagic, 1);
  std::vector<int> labels(dims[0]);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = bytes[8 + i];
  return labels;
}

IdxImages load_idx_images(const std::filesystem::path& path) {
  return parse_idx_images(read_all(path));
}

std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  return parse_idx_labels(read_all(path));
}

void write_idx_images(const std::filesystem::path& path, const IdxImages& images) {
  if (images.pixels.size() != images.count * images.rows * images.cols) {
    throw DatasetError("idx: pixel count does not match dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError(IdxErrorKind::io, "cannot write " + path.string());
  put_be32(out, kIdxImageMagic);
  put_be32(out, static_cast<std::uint32_t>(images.count));
  put_be32(out, static_cast<std::uint32_t>(images.rows));
  put_be32(out, static_cast<std::uint32_t>(images.cols));
  for (double p : images.pixels) {
    const double clamped = std::clamp(p, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(clamped * 255.0))));
  }
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<int>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError(IdxErrorKind::io, "cannot write " + path.string());
  put_be32(out, kIdxLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw DatasetError("idx: label outside a byte");
    out.put(static_cast<char>(l));
  }
}

// Permutations

PermutationSpec PermutationSpec::make(std::size_t length, std::uint64_t seed) {
  PermutationSpec spec = identity(length);
  spec.seed = seed;
  SeededRng rng(seed);
  rng.shuffle(spec.order);
  return spec;
}

PermutationSpec PermutationSpec::identity(std::size_t length) {
  PermutationSpec spec;
  spec.length = length;
  spec.order.resize(length);
  std::iota(spec.order.begin(), spec.order.end(), std::size_t{0});
  return spec;
}

bool PermutationSpec::is_bijection() const {
  if (order.size() != length) return false;
  std::vector<bool> seen(length, false);
  for (std::size_t i : order) {
    if (i >= length || seen[i]) return false;
    seen[i] = true;
  }
  return true;
}

std::vector<double> PermutationSpec::apply(std::span<const double> v) const {
  if (v.size() != length) throw DimensionError("permutation length mismatch");
  std::vector<double> out(length);
  for (std::size_t t = 0; t < length; ++t) out[t] = v[order[t]];
  return out;
}

std::vector<double> PermutationSpec::invert(std::span<const double> v) const {
  if (v.size() != length) throw DimensionError("permutation length mismatch");
  std::vector<double> out(length);
  for (std::size_t t = 0; t < length; ++t) out[order[t]] = v[t];
  return out;
}

SequenceBatch permute_sequence(const IdxImages& images, const std::vector<int>& labels,
                               const PermutationSpec& spec, std::size_t num_classes) {
  const std::size_t P = images.rows * images.cols;
  if (spec.length != P) {
    throw DatasetError("permutation length " + std::to_string(spec.length) +
                       " does not match image size " + std::to_string(P));
  }
  if (!spec.is_bijection()) throw DatasetError("permutation is not a bijection");
  if (labels.size() != images.count) throw DatasetError("label count does not match images");
  SequenceBatch batch;
  batch.num_classes = num_classes;
  for (std::size_t i = 0; i < images.count; ++i) {
    const auto flat = spec.apply(images.image(i));
    Matrix x(P, 1);
    std::copy(flat.begin(), flat.end(), x.span().begin());
    batch.inputs.push_back(std::move(x));
    batch.labels.push_back(labels[i]);
    batch.lengths.push_back(P);
  }
  batch.validate();
  return batch;
}

// Event streams

BinnedEvents bin_event_stream(std::span<const Event> events, const EventBinSpec& spec) {
  if (!(spec.bin_width > 0.0)) throw DatasetError("bin width must be positive");
  BinnedEvents out;
  out.counts = Matrix(spec.num_bins, spec.num_channels);
  for (const Event& e : events) {
    if (e.channel >= spec.num_channels) {
      throw DatasetError("event channel " + std::to_string(e.channel) + " out of range");
    }
    if (!(e.time >= 0.0)) throw DatasetError("event time must be non-negative");
    const double bin = std::floor(e.time / spec.bin_width);
    if (bin >= static_cast<double>(spec.num_bins)) {
      ++out.dropped;
      continue;
    }
    out.counts(static_cast<std::size_t>(bin), e.channel) += 1.0;
  }
  return out;
}

std::vector<Event> parse_event_text(std::istream& in) {
  std::vector<Event> events;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    double time = 0.0;
    long long channel = -1;
    std::string rest;
    if (!(fields >> time >> channel) || (fields >> rest) || channel < 0) {
      throw DatasetError("event line " + std::to_string(lineno) + ": expected 'time channel'");
    }
    events.push_back({time, static_cast<std::size_t>(channel)});
  }
  return events;
}

std::vector<Event> load_event_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  return parse_event_text(in);
}

// Synthetic ECG
//
// Each beat is P, PR (normal), QR, RS, ST (normal), T, TP (normal).
// P and T share one shape and amplitude range, so telling them apart needs
// the position relative to the last QRS complex.

namespace {

struct SegmentRange {
  int label;
  std::size_t lo;
  std::size_t hi;  // inclusive
};

constexpr int kNormal = 0, kP = 1, kQR = 2, kRS = 3, kT = 4;

const SegmentRange kBeat[] = {
    {kP, 8, 16},  {kNormal, 4, 8},  {kQR, 3, 5},       {kRS, 3, 5},
    {kNormal, 6, 12}, {kT, 8, 16}, {kNormal, 8, 24},
};

constexpr std::size_t kMaxLead = 20;

// Longest possible prefix needed to finish one full beat.
constexpr std::size_t max_first_beat() {
  std::size_t total = kMaxLead;
  for (const auto& s : kBeat) total += s.hi;
  return total;
}

void check_ecg_spec(const EcgSynthSpec& spec) {
  if (spec.min_active > spec.length) throw DatasetError("min_active exceeds length");
  if (spec.min_active < max_first_beat()) {
    throw DatasetError("min_active must be at least " + std::to_string(max_first_beat()) +
                       " so that every label appears");
  }
  if (spec.noise < 0.0) throw DatasetError("noise must be non-negative");
}

}  // namespace

std::vector<EcgSegment> ecg_layout(const EcgSynthSpec& spec, std::size_t index) {
  check_ecg_spec(spec);
  SeededRng rng = SeededRng(spec.seed).fork(2 * index);
  const std::size_t active =
      spec.min_active + static_cast<std::size_t>(rng.below(spec.length - spec.min_active + 1));
  std::vector<EcgSegment> segments;
  std::size_t pos = static_cast<std::size_t>(rng.below(kMaxLead + 1));
  if (pos > 0) segments.push_back({kNormal, 0, pos});
  while (pos < active) {
    for (const auto& s : kBeat) {
      if (pos >= active) break;
      const std::size_t len = s.lo + static_cast<std::size_t>(rng.below(s.hi - s.lo + 1));
      const std::size_t end = std::min(pos + len, active);
      segments.push_back({s.label, pos, end});
      pos = end;
    }
  }
  if (active < spec.length) segments.push_back({kNormal, active, spec.length, true});
  return segments;
}

SequenceBatch gen_ecg_stream(const EcgSynthSpec& spec, std::size_t count) {
  check_ecg_spec(spec);
  SequenceBatch batch;
  batch.num_classes = EcgSynthSpec::num_classes;
  for (std::size_t i = 0; i < count; ++i) {
    const auto segments = ecg_layout(spec, i);
    SeededRng rng = SeededRng(spec.seed).fork(2 * i + 1);
    Matrix x(spec.length, 2);
    std::vector<int> labels(spec.length, kNormal);
    const double wander_period = rng.uniform(150.0, 250.0);
    const double wander_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    double r_peak = 1.0;
    std::size_t length = spec.length;
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const EcgSegment& seg = segments[s];
      if (seg.padding) {
        length = seg.begin;
        break;
      }
      const double len = static_cast<double>(seg.end - seg.begin);
      double amp = 0.0;
      if (seg.label == kP || seg.label == kT) amp = rng.uniform(0.15, 0.35);
      if (seg.label == kQR) r_peak = rng.uniform(0.8, 1.2);
      for (std::size_t t = seg.begin; t < seg.end; ++t) {
        labels[t] = seg.label;
        const double u = (static_cast<double>(t - seg.begin) + 1.0) / len;
        double lead0 = 0.0;
        double lead1 = 0.0;
        switch (seg.label) {
          case kP:
          case kT: {
            const double bump = amp * std::sin(std::numbers::pi * (u - 0.5 / len));
            lead0 = bump;
            lead1 = 0.8 * bump;
            break;
          }
          case kQR:
            lead0 = r_peak * u;
            lead1 = -0.5 * r_peak * u;
            break;
          case kRS:
            lead0 = r_peak * (1.0 - 1.25 * u);
            lead1 = -0.5 * r_peak * (1.0 - 1.25 * u);
            break;
          default:
            break;
        }
        const double wander =
            0.05 * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / wander_period +
                            wander_phase);
        x(t, 0) = lead0 + wander + spec.noise * rng.normal();
        x(t, 1) = lead1 - wander + spec.noise * rng.normal();
      }
    }
    batch.inputs.push_back(std::move(x));
    batch.step_labels.push_back(std::move(labels));
    batch.lengths.push_back(length);
  }
  return batch;
}

}  // namespace dmu
