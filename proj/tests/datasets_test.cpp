#include "dmu/datasets.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "gtest/gtest.h"

namespace dmu {
namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dmu_datasets_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::size_t argmax_row(const Matrix& x, std::size_t t, std::size_t width) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < width; ++c) {
    if (x(t, c) > x(t, best)) best = c;
  }
  return best;
}

std::size_t marker_step(const Matrix& x, std::size_t marker) {
  for (std::size_t t = 0; t < x.rows(); ++t) {
    if (x(t, marker) == 1.0) return t;
  }
  return x.rows();
}

TEST(DelayedRecallTest, TinyTaskRecoverableByConstruction) {
  DelayedRecallSpec spec;
  spec.alphabet = 4;
  spec.delay = 1;
  spec.length = 4;
  for (bool anchored : {true, false}) {
    spec.anchored = anchored;
    auto batch = gen_delayed_recall(spec, 200);
    batch.validate();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Matrix& x = batch.inputs[i];
      const std::size_t m = marker_step(x, spec.alphabet);
      ASSERT_LT(m, x.rows());
      ASSERT_GE(m, spec.delay);
      EXPECT_EQ(static_cast<int>(argmax_row(x, m - spec.delay, spec.alphabet)), batch.labels[i]);
      if (anchored) EXPECT_EQ(m, spec.length - 1);
    }
  }
}

TEST(DelayedRecallTest, ExactlyOneMarkerAndOneSymbolPerStep) {
  DelayedRecallSpec spec;
  spec.noise = true;
  auto batch = gen_delayed_recall(spec, 50);
  EXPECT_EQ(batch.channels(), spec.alphabet + 1 + spec.noise_channels);
  for (const Matrix& x : batch.inputs) {
    double markers = 0.0;
    for (std::size_t t = 0; t < x.rows(); ++t) {
      double symbols = 0.0;
      for (std::size_t c = 0; c < spec.alphabet; ++c) symbols += x(t, c);
      EXPECT_EQ(symbols, 1.0);
      markers += x(t, spec.alphabet);
      for (std::size_t c = spec.alphabet + 1; c < x.cols(); ++c) {
        EXPECT_GE(x(t, c), 0.0);
        EXPECT_LT(x(t, c), 1.0);
      }
    }
    EXPECT_EQ(markers, 1.0);
  }
}

TEST(DelayedRecallTest, WithoutDistractorsOnlyTheTargetIsShown) {
  DelayedRecallSpec spec;
  spec.distractors = false;
  spec.anchored = false;
  auto batch = gen_delayed_recall(spec, 100);
  std::set<std::size_t> starts;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Matrix& x = batch.inputs[i];
    double total = 0.0;
    for (std::size_t t = 0; t < x.rows(); ++t)
      for (std::size_t c = 0; c < spec.alphabet; ++c) total += x(t, c);
    EXPECT_EQ(total, 1.0);
    starts.insert(marker_step(x, spec.alphabet) - spec.delay);
  }
  EXPECT_GT(starts.size(), 5u);
}

TEST(DelayedRecallTest, SeedDeterminesBatch) {
  DelayedRecallSpec spec;
  spec.seed = 42;
  EXPECT_EQ(gen_delayed_recall(spec, 30), gen_delayed_recall(spec, 30));
  auto other = spec;
  other.seed = 43;
  EXPECT_NE(gen_delayed_recall(spec, 30), gen_delayed_recall(other, 30));
}

TEST(DelayedRecallTest, PrefixStableInCount) {
  DelayedRecallSpec spec;
  auto small = gen_delayed_recall(spec, 10);
  auto large = gen_delayed_recall(spec, 20);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(small.inputs[i], large.inputs[i]);
}

std::vector<double> class_counts(const DelayedRecallSpec& spec, std::size_t count) {
  auto batch = gen_delayed_recall(spec, count);
  std::vector<double> counts(spec.alphabet, 0.0);
  for (int l : batch.labels) counts[static_cast<std::size_t>(l)] += 1.0;
  return counts;
}

TEST(DelayedRecallTest, ClassBalanceWithinFivePercent) {
  DelayedRecallSpec spec;
  spec.alphabet = 4;
  spec.seed = 5;
  const double expected = 10000.0 / 4.0;
  for (double c : class_counts(spec, 10000)) EXPECT_LT(std::abs(c - expected) / expected, 0.05);
}

TEST(DelayedRecallTest, ClassBalanceChiSquare) {
  // df = 7, critical value 24.32 at p = 0.001.
  for (std::uint64_t seed : {5, 6, 7}) {
    DelayedRecallSpec spec;
    spec.seed = seed;
    const double expected = 10000.0 / 8.0;
    double chi2 = 0.0;
    for (double c : class_counts(spec, 10000)) chi2 += (c - expected) * (c - expected) / expected;
    EXPECT_LT(chi2, 24.32) << "seed " << seed;
  }
}

TEST(DelayedRecallTest, RejectsInvalidSpec) {
  DelayedRecallSpec spec;
  spec.delay = 0;
  EXPECT_THROW(gen_delayed_recall(spec, 1), DatasetError);
  spec.delay = 8;
  spec.length = 9;
  EXPECT_THROW(gen_delayed_recall(spec, 1), DatasetError);
  spec.length = 10;
  EXPECT_NO_THROW(gen_delayed_recall(spec, 1));
}

TEST(AddingTest, TargetIsSumOfMarkedValues) {
  AddingSpec spec;
  spec.length = 30;
  auto batch = gen_adding(spec, 100);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Matrix& x = batch.inputs[i];
    std::vector<std::size_t> marked;
    for (std::size_t t = 0; t < x.rows(); ++t) {
      if (x(t, 1) == 1.0) marked.push_back(t);
    }
    ASSERT_EQ(marked.size(), 2u);
    EXPECT_LT(marked[0], 15u);
    EXPECT_GE(marked[1], 15u);
    EXPECT_EQ(batch.values[i], x(marked[0], 0) + x(marked[1], 0));
  }
}

TEST(AddingTest, ConstantPredictorMseMatchesVarianceOfTwoUniforms) {
  AddingSpec spec;
  spec.length = 2;
  auto batch = gen_adding(spec, 100000);
  double mse = 0.0;
  for (double v : batch.values) mse += (v - 1.0) * (v - 1.0);
  mse /= static_cast<double>(batch.size());
  EXPECT_NEAR(mse, 2.0 / 12.0, 0.003);
}

TEST(AddingTest, BinnedLabels) {
  AddingSpec spec;
  spec.classes = 4;
  auto batch = gen_adding(spec, 500);
  batch.validate();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int expected = std::min(3, static_cast<int>(batch.values[i] / 0.5));
    EXPECT_EQ(batch.labels[i], expected);
  }
  EXPECT_THROW(gen_adding(AddingSpec{1, 0, 0}, 1), DatasetError);
}

std::vector<std::uint8_t> image_fixture() {
  return {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2,
          0, 51, 102, 255, 255, 204, 153, 0};
}

TEST(IdxTest, ParsesHandBuiltFixture) {
  const auto bytes = image_fixture();
  IdxImages img = parse_idx_images(bytes);
  EXPECT_EQ(img.count, 2u);
  EXPECT_EQ(img.rows, 2u);
  EXPECT_EQ(img.cols, 2u);
  const std::vector<double> expected = {0.0, 0.2, 0.4, 1.0, 1.0, 0.8, 0.6, 0.0};
  ASSERT_EQ(img.pixels.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_DOUBLE_EQ(img.pixels[i], expected[i]);
  EXPECT_EQ(img.image(1)[0], 1.0);
}

IdxErrorKind error_kind(std::span<const std::uint8_t> bytes) {
  try {
    parse_idx_images(bytes);
  } catch (const IdxError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return IdxErrorKind::io;
}

TEST(IdxTest, DistinctErrors) {
  auto bytes = image_fixture();
  auto bad_magic = bytes;
  bad_magic[3] = 1;
  EXPECT_EQ(error_kind(bad_magic), IdxErrorKind::bad_magic);

  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_EQ(error_kind(truncated), IdxErrorKind::truncated);
  EXPECT_EQ(error_kind(std::span(bytes).first(10)), IdxErrorKind::truncated);

  auto trailing = bytes;
  trailing.push_back(7);
  EXPECT_EQ(error_kind(trailing), IdxErrorKind::trailing_bytes);

  std::vector<std::uint8_t> huge = {0, 0, 8, 3, 0xff, 0xff, 0xff, 0xff,
                                    0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff};
  EXPECT_EQ(error_kind(huge), IdxErrorKind::dimension_overflow);
}

TEST(IdxTest, LabelsParseAndRejectImageMagic) {
  const std::vector<std::uint8_t> labels = {0, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9};
  EXPECT_EQ(parse_idx_labels(labels), (std::vector<int>{7, 0, 9}));
  EXPECT_THROW(parse_idx_labels(image_fixture()), IdxError);
}

TEST(IdxTest, FileRoundTrip) {
  const auto dir = scratch_dir("idx");
  IdxImages img;
  img.count = 3;
  img.rows = 4;
  img.cols = 5;
  SeededRng rng(9);
  for (std::size_t i = 0; i < 60; ++i) img.pixels.push_back(static_cast<double>(rng.below(256)) / 255.0);
  write_idx_images(dir / "img.idx", img);
  write_idx_labels(dir / "lbl.idx", {1, 2, 3});
  IdxImages back = load_idx_images(dir / "img.idx");
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_EQ(load_idx_labels(dir / "lbl.idx"), (std::vector<int>{1, 2, 3}));
  EXPECT_THROW(load_idx_images(dir / "missing.idx"), IdxError);
}

TEST(PermutationTest, IsVerifiedBijection) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = PermutationSpec::make(784, seed);
    EXPECT_TRUE(p.is_bijection());
    std::vector<std::size_t> sorted = p.order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
  }
  PermutationSpec broken = PermutationSpec::identity(4);
  broken.order[1] = 0;
  EXPECT_FALSE(broken.is_bijection());
}

TEST(PermutationTest, InverseRestoresAndSeedIsConsistent) {
  auto p = PermutationSpec::make(50, 3);
  std::vector<double> v(50);
  std::iota(v.begin(), v.end(), 0.0);
  EXPECT_EQ(p.invert(p.apply(v)), v);
  EXPECT_EQ(PermutationSpec::make(50, 3).order, p.order);
  EXPECT_NE(PermutationSpec::make(50, 4).order, p.order);
}

IdxImages tiny_images() {
  IdxImages img;
  img.count = 2;
  img.rows = 2;
  img.cols = 3;
  for (int i = 0; i < 12; ++i) img.pixels.push_back(i / 11.0);
  return img;
}

TEST(PermuteSequenceTest, IdentityKeepsRowMajorOrder) {
  auto img = tiny_images();
  auto batch = permute_sequence(img, {4, 5}, PermutationSpec::identity(6));
  ASSERT_EQ(batch.size(), 2u);
  EXPECT_EQ(batch.steps(), 6u);
  EXPECT_EQ(batch.channels(), 1u);
  for (std::size_t t = 0; t < 6; ++t) EXPECT_EQ(batch.inputs[1](t, 0), img.pixels[6 + t]);
  EXPECT_EQ(batch.labels, (std::vector<int>{4, 5}));
}

TEST(PermuteSequenceTest, SamePermutationForEveryImage) {
  auto img = tiny_images();
  auto p = PermutationSpec::make(6, 17);
  auto batch = permute_sequence(img, {0, 1}, p);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t t = 0; t < 6; ++t) EXPECT_EQ(batch.inputs[i](t, 0), img.image(i)[p.order[t]]);
  EXPECT_THROW(permute_sequence(img, {0, 1}, PermutationSpec::identity(5)), DatasetError);
}

TEST(EventBinTest, HalfOpenBoundaries) {
  EventBinSpec spec{2, 10.0, 5};
  std::vector<Event> events = {{0.0, 0}, {9.9, 0}, {10.0, 0}, {3.0, 1}, {3.1, 1}, {3.2, 1}};
  auto binned = bin_event_stream(events, spec);
  EXPECT_EQ(binned.counts(0, 0), 2.0);
  EXPECT_EQ(binned.counts(1, 0), 1.0);
  EXPECT_EQ(binned.counts(0, 1), 3.0);
  EXPECT_EQ(binned.dropped, 0u);
}

TEST(EventBinTest, ConservesEventsIncludingDropped) {
  SeededRng rng(4);
  std::vector<Event> events;
  for (int i = 0; i < 2000; ++i) {
    events.push_back({rng.uniform(0.0, 1200.0), static_cast<std::size_t>(rng.below(7))});
  }
  auto binned = bin_event_stream(events, EventBinSpec{7, 10.0, 100});
  double total = 0.0;
  for (double c : binned.counts.span()) {
    EXPECT_GE(c, 0.0);
    total += c;
  }
  EXPECT_GT(binned.dropped, 0u);
  EXPECT_EQ(static_cast<std::size_t>(total) + binned.dropped, events.size());
  EXPECT_EQ(binned.counts.rows(), 100u);
  EXPECT_EQ(binned.counts.cols(), 7u);
}

TEST(EventBinTest, RejectsBadInput) {
  std::vector<Event> bad_channel = {{1.0, 3}};
  EXPECT_THROW(bin_event_stream(bad_channel, EventBinSpec{3, 1.0, 4}), DatasetError);
  EXPECT_THROW(bin_event_stream({}, EventBinSpec{3, 0.0, 4}), DatasetError);
  std::vector<Event> negative = {{-1.0, 0}};
  EXPECT_THROW(bin_event_stream(negative, EventBinSpec{1, 1.0, 4}), DatasetError);
}

TEST(EventTextTest, ParsesPairsAndSkipsComments) {
  std::istringstream in("# time channel\n0.5 2\n\n  12 0\n");
  auto events = parse_event_text(in);
  ASSERT_EQ(events.size(), 2u);
  EXPECT_EQ(events[0].time, 0.5);
  EXPECT_EQ(events[0].channel, 2u);
  EXPECT_EQ(events[1].time, 12.0);
  std::istringstream bad("1.0\n");
  EXPECT_THROW(parse_event_text(bad), DatasetError);
  std::istringstream extra("1.0 2 3\n");
  EXPECT_THROW(parse_event_text(extra), DatasetError);
}

TEST(EcgTest, EverySequenceHasAllLabelsAndPadding) {
  EcgSynthSpec spec;
  spec.seed = 3;
  auto batch = gen_ecg_stream(spec, 40);
  batch.validate();
  EXPECT_EQ(batch.steps(), 300u);
  EXPECT_EQ(batch.channels(), 2u);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::set<int> seen(batch.step_labels[i].begin(),
                       batch.step_labels[i].begin() + static_cast<long>(batch.lengths[i]));
    EXPECT_EQ(seen.size(), 5u);
    EXPECT_GE(batch.lengths[i], spec.min_active);
    for (std::size_t t = batch.lengths[i]; t < 300; ++t) {
      EXPECT_EQ(batch.inputs[i](t, 0), 0.0);
      EXPECT_EQ(batch.inputs[i](t, 1), 0.0);
      EXPECT_EQ(batch.step_labels[i][t], 0);
    }
  }
}

TEST(EcgTest, LabelsChangeOnlyAtSegmentBoundaries) {
  EcgSynthSpec spec;
  auto batch = gen_ecg_stream(spec, 20);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto segments = ecg_layout(spec, i);
    std::size_t expected_begin = 0;
    std::set<std::size_t> boundaries;
    for (const auto& s : segments) {
      EXPECT_EQ(s.begin, expected_begin);
      EXPECT_LT(s.begin, s.end);
      expected_begin = s.end;
      boundaries.insert(s.begin);
      for (std::size_t t = s.begin; t < s.end; ++t) EXPECT_EQ(batch.step_labels[i][t], s.label);
    }
    EXPECT_EQ(expected_begin, 300u);
    const auto& labels = batch.step_labels[i];
    for (std::size_t t = 1; t < labels.size(); ++t) {
      if (labels[t] != labels[t - 1]) EXPECT_TRUE(boundaries.count(t)) << "step " << t;
    }
  }
}

TEST(EcgTest, SeedDeterminesBatch) {
  EcgSynthSpec spec;
  spec.seed = 8;
  EXPECT_EQ(gen_ecg_stream(spec, 5), gen_ecg_stream(spec, 5));
  spec.min_active = 50;
  EXPECT_THROW(gen_ecg_stream(spec, 1), DatasetError);
}

TEST(SequenceBatchTest, ValidateCatchesBrokenInvariants) {
  DelayedRecallSpec spec;
  auto batch = gen_delayed_recall(spec, 4);
  EXPECT_NO_THROW(batch.validate());
  auto bad_label = batch;
  bad_label.labels[0] = 8;
  EXPECT_THROW(bad_label.validate(), DatasetError);
  auto bad_length = batch;
  bad_length.lengths[1] = 21;
  EXPECT_THROW(bad_length.validate(), DatasetError);
  auto bad_value = batch;
  bad_value.inputs[2](0, 0) = std::nan("");
  EXPECT_THROW(bad_value.validate(), DatasetError);
}

}  // namespace
}  // namespace dmu
