#include "meltrtl/harvest.h"

#include <gtest/gtest.h>
#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <map>

#include "meltrtl/binio.h"
#include "meltrtl/error.h"

namespace meltrtl {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 16;
  c.max_context = 96;
  c.seed = 5;
  return c;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode{};
}

// Byte-level writer following the documented interchange layout.
struct FixtureBytes {
  std::string b;
  void raw(const void* p, std::size_t n) { b.append(static_cast<const char*>(p), n); }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    le(u);
  }
  std::string finish() {
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(b.data()), static_cast<uInt>(b.size())));
    le(crc);
    return b;
  }
};

TEST(HarvestTest, CountsShapesAndTags) {
  const ModelState m = ModelState::initialize(small_config());
  const DatasetManifest corpus = generate_corpus(1, 10, 0.5);
  const ActivationStore store = harvest(m, corpus);
  EXPECT_EQ(store.size(), corpus.samples.size() * 2 * 4);
  std::map<std::uint32_t, const Sample*> by_id;
  for (const auto& s : corpus.samples) by_id[s.id] = &s;
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 4; ++h) {
      ASSERT_EQ(store.group(l, h).size(), corpus.samples.size());
      for (const auto& r : store.group(l, h)) {
        EXPECT_EQ(r.vector.size(), 4u);
        EXPECT_EQ(r.label, by_id.at(r.sample_id)->label);
        EXPECT_EQ(r.category, by_id.at(r.sample_id)->category);
      }
    }
  EXPECT_EQ(store.fingerprint(), m.fingerprint());
}

TEST(HarvestTest, DefaultConfigRecordWidthAndCount) {
  ModelConfig c;
  const ModelState m = ModelState::initialize(c);
  const DatasetManifest corpus = generate_corpus_sized(2, split_total(200), 0.5);
  const ActivationStore store = harvest(m, corpus);
  EXPECT_EQ(store.size(), 200u * c.n_layers * c.n_heads);
  EXPECT_EQ(store.group(0, 0).front().vector.size(), static_cast<std::size_t>(c.d_model / c.n_heads));
}

TEST(HarvestTest, PolicySelectsPositions) {
  const ModelState m = ModelState::initialize(small_config());
  const DatasetManifest corpus = generate_corpus(3, 4, 0.5);
  const Sample& s = corpus.samples[0];
  TokenSeq seq = make_prompt(s.spec);
  const int p = static_cast<int>(seq.size());
  seq.insert(seq.end(), s.code.begin(), s.code.end());
  const ForwardTrace tr = forward(m, seq);
  const int last = static_cast<int>(seq.size()) - 1;
  const auto find = [&](const ActivationStore& st) { return st.group(1, 2).front().vector; };
  const Vec last_v = find(harvest(m, corpus, PositionPolicy::kLastCode));
  const Vec sep_v = find(harvest(m, corpus, PositionPolicy::kSep));
  const Vec mean_v = find(harvest(m, corpus, PositionPolicy::kMeanCode));
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(last_v[i], tr.tap(last, 1, 2)[i]);
    EXPECT_EQ(sep_v[i], tr.tap(p - 1, 1, 2)[i]);
    double acc = 0;
    for (int t = p; t <= last; ++t) acc += tr.tap(t, 1, 2)[i];
    EXPECT_NEAR(mean_v[i], acc / (last - p + 1), 1e-12);
  }
  EXPECT_EQ(position_policy_from_name("mean-code"), PositionPolicy::kMeanCode);
  EXPECT_EQ(code_of([] { position_policy_from_name("middle"); }), ErrorCode::kConfig);
}

TEST(HarvestTest, DeterministicBytesAndRoundTrip) {
  const ModelState m = ModelState::initialize(small_config());
  const DatasetManifest corpus = generate_corpus(4, 6, 0.5);
  const ActivationStore a = harvest(m, corpus), b = harvest(m, corpus);
  EXPECT_EQ(serialize_store(a), serialize_store(b));
  const auto path = std::filesystem::temp_directory_path() / "meltrtl_store_rt.bin";
  export_store(a, path);
  const ActivationStore back = import_store(path);
  EXPECT_EQ(back, a);
  EXPECT_EQ(serialize_store(back), serialize_store(a));
  std::filesystem::remove(path);
}

TEST(HarvestTest, SkipsSamplesBeyondContext) {
  ModelConfig c = small_config();
  c.max_context = 20;
  const ModelState m = ModelState::initialize(c);
  const DatasetManifest corpus = generate_corpus(5, 6, 0.5);
  HarvestReport rep;
  const ActivationStore store = harvest(m, corpus, PositionPolicy::kLastCode, &rep);
  std::size_t fit = 0;
  for (const auto& s : corpus.samples) fit += s.spec.size() + 1 + s.code.size() <= 20;
  EXPECT_EQ(rep.skipped.size(), corpus.samples.size() - fit);
  EXPECT_EQ(store.size(), fit * 8);
}

TEST(HarvestTest, MixedLengthsRejected) {
  ActivationStore s(1, 2, 3, "x");
  s.add({1, 0, 1, 1, Category::kCombinational, {1, 2, 3}});
  s.add({2, 0, 1, 0, Category::kCombinational, {1, 2}});
  EXPECT_EQ(code_of([&] { s.validate(); }), ErrorCode::kData);
  EXPECT_EQ(code_of([&] { serialize_store(s); }), ErrorCode::kData);
}

TEST(HarvestTest, HandBuiltFixtureImports) {
  FixtureBytes f;
  f.raw("MELTACT\1", 8);
  f.le<std::uint32_t>(1);  // version
  f.le<std::uint32_t>(1);  // L
  f.le<std::uint32_t>(2);  // H
  f.le<std::uint32_t>(2);  // d_head
  f.le<std::uint64_t>(8);  // records
  f.le<std::uint32_t>(8);
  f.raw("external", 8);
  // Head 1 separates labels along its first coordinate; head 0 is noise.
  const double vals[4][2] = {{1.0, 0.1}, {1.2, -0.3}, {-1.0, 0.2}, {-0.8, -0.1}};
  for (std::uint16_t head = 0; head < 2; ++head)
    for (std::uint32_t id = 0; id < 4; ++id) {
      f.le(id);
      f.le<std::uint16_t>(0);
      f.le(head);
      f.le<std::uint8_t>(id < 2 ? 1 : 0);
      f.le<std::uint8_t>(2);
      f.f64(head == 1 ? vals[id][0] : vals[id][1]);
      f.f64(head == 1 ? vals[id][1] : 0.5);
    }
  const ActivationStore s = deserialize_store(f.finish());
  EXPECT_EQ(s.n_heads(), 2);
  EXPECT_EQ(s.fingerprint(), "external");
  EXPECT_EQ(s.group(0, 1).size(), 4u);
  EXPECT_EQ(s.group(0, 1)[1].vector[0], 1.2);
  EXPECT_EQ(s.group(0, 1)[3].category, Category::kFsm);
}

TEST(HarvestTest, MalformedFilesRejected) {
  const ModelState m = ModelState::initialize(small_config());
  const std::string good = serialize_store(harvest(m, generate_corpus(6, 4, 0.5)));
  FixtureBytes f;
  f.b = good.substr(0, good.size() - 4);
  f.b[24] = 9;  // record count low byte
  EXPECT_EQ(code_of([&] { deserialize_store(f.finish()); }), ErrorCode::kFormat);
  std::string bad = good;
  bad[bad.size() - 10] ^= 1;
  EXPECT_EQ(code_of([&] { deserialize_store(bad); }), ErrorCode::kFormat);
}

TEST(SplitTest, StratifiedCountsAndDeterminism) {
  const ModelState m = ModelState::initialize(small_config());
  const DatasetManifest corpus = generate_corpus_sized(7, split_total(200), 0.5);
  const ActivationStore store = harvest(m, corpus);
  const auto [train, val] = split(store, 0.7, 3);
  const auto& tg = train.group(1, 3);
  const auto& vg = val.group(1, 3);
  EXPECT_EQ(tg.size() + vg.size(), 200u);
  EXPECT_NEAR(static_cast<double>(tg.size()), 140.0, 3.0);
  std::map<std::pair<int, int>, std::array<int, 3>> strata;  // (cat,label) -> all, train, val
  for (const auto& s : corpus.samples) strata[{static_cast<int>(s.category), s.label}][0]++;
  for (const auto& r : tg) strata[{static_cast<int>(r.category), r.label}][1]++;
  for (const auto& r : vg) strata[{static_cast<int>(r.category), r.label}][2]++;
  for (const auto& [key, n] : strata) {
    EXPECT_EQ(n[1] + n[2], n[0]);
    EXPECT_LE(std::abs(n[1] - 0.7 * n[0]), 1.0);
  }
  // Every head group uses the same sample partition.
  std::vector<std::uint32_t> ids_a, ids_b;
  for (const auto& r : train.group(0, 0)) ids_a.push_back(r.sample_id);
  for (const auto& r : tg) ids_b.push_back(r.sample_id);
  EXPECT_EQ(ids_a, ids_b);
  const auto again = split(store, 0.7, 3);
  EXPECT_EQ(again.first, train);
  EXPECT_NE(split(store, 0.7, 4).first, train);
}

TEST(SplitTest, EmptyStratumNamed) {
  ActivationStore s(1, 1, 1, "x");
  s.add({1, 0, 0, 1, Category::kSequential, {1.0}});
  s.add({2, 0, 0, 0, Category::kSequential, {0.0}});
  s.add({3, 0, 0, 0, Category::kSequential, {0.5}});
  try {
    split(s, 0.7, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kData);
    EXPECT_NE(std::string(e.what()).find("label=1"), std::string::npos) << e.what();
  }
  EXPECT_EQ(code_of([&] { split(s, 1.0, 1); }), ErrorCode::kContract);
}

TEST(SplitTest, FilterCategory) {
  const ModelState m = ModelState::initialize(small_config());
  const ActivationStore store = harvest(m, generate_corpus(8, 4, 0.5));
  const ActivationStore fsm = filter_category(store, Category::kFsm);
  EXPECT_EQ(fsm.size(), 4u * 8);
  for (const auto& r : fsm.group(0, 1)) EXPECT_EQ(r.category, Category::kFsm);
  EXPECT_EQ(filter_category(store, std::nullopt), store);
}

}  // namespace
}  // namespace meltrtl
