#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmu/numerics.hpp"

namespace dmu {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sequences for classification (one label per sequence) or segmentation
// (one label per step). Inputs are T x M per sequence.
struct SequenceBatch {
  std::vector<Matrix> inputs;
  std::vector<int> labels;                    // sequence classification
  std::vector<std::vector<int>> step_labels;  // segmentation
  std::vector<std::size_t> lengths;
  std::vector<double> values;                 // regression targets, when the task has them
  std::size_t num_classes = 0;

  std::size_t size() const { return inputs.size(); }
  bool per_step() const { return !step_labels.empty(); }
  std::size_t steps() const { return inputs.empty() ? 0 : inputs.front().rows(); }
  std::size_t channels() const { return inputs.empty() ? 0 : inputs.front().cols(); }

  // Throws DatasetError if any invariant is broken.
  void validate() const;

  friend bool operator==(const SequenceBatch&, const SequenceBatch&) = default;
};

// One symbol out of `alphabet` shown at step t0 (one-hot), a marker channel
// raised at t0 + delay, and the target (the symbol) read at the last step.
// With distractors on, every other step also shows a random symbol, so the
// marker is the only way to tell which one to report.
//
// Channels: [0, alphabet) symbol one-hot, alphabet = marker, then
// `noise_channels` channels of uniform noise in [0, 1) when noise is set.
struct DelayedRecallSpec {
  std::size_t alphabet = 8;
  std::size_t delay = 8;
  std::size_t length = 20;
  bool distractors = true;
  // t0 = length - delay - 1, so the marker coincides with the decision step.
  bool anchored = true;
  bool noise = false;
  std::size_t noise_channels = 2;
  std::uint64_t seed = 0;

  std::size_t channels() const { return alphabet + 1 + (noise ? noise_channels : 0); }
  void validate() const;
};

SequenceBatch gen_delayed_recall(const DelayedRecallSpec& spec, std::size_t count);

// Adding problem: channel 0 holds uniform values in [0, 1), channel 1 marks
// two positions (one in each half). The regression target is the sum of the
// two marked values (stored in `values`); with classes > 0 the sum is also
// binned into that many equal-width classes over [0, 2) and stored in
// `labels`.
struct AddingSpec {
  std::size_t length = 50;
  std::size_t classes = 0;
  std::uint64_t seed = 0;
};

SequenceBatch gen_adding(const AddingSpec& spec, std::size_t count);

// IDX files (big-endian). Images: magic 0x00000803, dims count/rows/cols,
// unsigned bytes. Labels: magic 0x00000801, dim count.
struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> pixels;  // count * rows * cols, scaled to [0, 1]

  std::span<const double> image(std::size_t i) const {
    return {pixels.data() + i * rows * cols, rows * cols};
  }
};

enum class IdxErrorKind { io, bad_magic, truncated, trailing_bytes, dimension_overflow };

class IdxError : public DatasetError {
 public:
  IdxError(IdxErrorKind kind, const std::string& what) : DatasetError(what), kind_(kind) {}
  IdxErrorKind kind() const { return kind_; }

 private:
  IdxErrorKind kind_;
};

IdxImages load_idx_images(const std::filesystem::path& path);
std::vector<int> load_idx_labels(const std::filesystem::path& path);
IdxImages parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes);
// Pixels are written as round(p * 255).
void write_idx_images(const std::filesystem::path& path, const IdxImages& images);
void write_idx_labels(const std::filesystem::path& path, const std::vector<int>& labels);

struct PermutationSpec {
  std::size_t length = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> order;  // order[t] = source pixel shown at step t

  static PermutationSpec make(std::size_t length, std::uint64_t seed);
  static PermutationSpec identity(std::size_t length);
  bool is_bijection() const;
  std::vector<double> apply(std::span<const double> v) const;
  std::vector<double> invert(std::span<const double> v) const;
};

// Flattens every image row-major, reorders it by the permutation and emits
// one pixel per step (T = rows * cols, M = 1).
SequenceBatch permute_sequence(const IdxImages& images, const std::vector<int>& labels,
                               const PermutationSpec& spec, std::size_t num_classes = 10);

struct Event {
  double time = 0.0;
  std::size_t channel = 0;
};

struct EventBinSpec {
  std::size_t num_channels = 1;
  double bin_width = 10.0;
  std::size_t num_bins = 100;
};

struct BinnedEvents {
  Matrix counts;  // num_bins x num_channels
  std::size_t dropped = 0;
};

// Half-open bins [k*w, (k+1)*w); events at or past num_bins * w are dropped.
BinnedEvents bin_event_stream(std::span<const Event> events, const EventBinSpec& spec);

// Plain-text events: one "time channel" pair per line; blank lines and
// lines starting with '#' are ignored.
std::vector<Event> parse_event_text(std::istream& in);
std::vector<Event> load_event_file(const std::filesystem::path& path);

// Synthetic two-channel ECG-like stream labelled per step with
// 0 Normal (baseline), 1 P, 2 QR, 3 RS, 4 T.
struct EcgSynthSpec {
  std::size_t length = 300;
  std::size_t min_active = 240;  // active (unpadded) length is uniform in [min_active, length]
  double noise = 0.05;           // gaussian noise std on both channels
  std::uint64_t seed = 0;

  static constexpr std::size_t num_classes = 5;
};

struct EcgSegment {
  int label;
  std::size_t begin;
  std::size_t end;  // exclusive
  bool padding = false;
};

// Segment layout used to build sequence `index` (exposed for self-checks).
std::vector<EcgSegment> ecg_layout(const EcgSynthSpec& spec, std::size_t index);
SequenceBatch gen_ecg_stream(const EcgSynthSpec& spec, std::size_t count);

}  // namespace dmu
