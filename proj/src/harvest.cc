#include "meltrtl/harvest.h"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "meltrtl/binio.h"
#include "meltrtl/error.h"
#include "meltrtl/rng.h"

namespace meltrtl {
namespace {

constexpr std::string_view kMagic{"MELTACT\1", 8};

}  // namespace

std::string_view position_policy_name(PositionPolicy p) {
  switch (p) {
    case PositionPolicy::kLastCode: return "last-code";
    case PositionPolicy::kMeanCode: return "mean-code";
    case PositionPolicy::kSep: return "sep";
  }
  return "?";
}

PositionPolicy position_policy_from_name(std::string_view name) {
  for (auto p : {PositionPolicy::kLastCode, PositionPolicy::kMeanCode, PositionPolicy::kSep})
    if (position_policy_name(p) == name) return p;
  fail(ErrorCode::kConfig, "unknown position policy '" + std::string(name) +
                               "' (expected last-code, mean-code or sep)");
}

ActivationStore::ActivationStore(int n_layers, int n_heads, int d_head, std::string fingerprint)
    : n_layers_(n_layers),
      n_heads_(n_heads),
      d_head_(d_head),
      fingerprint_(std::move(fingerprint)),
      groups_(static_cast<std::size_t>(n_layers) * static_cast<std::size_t>(n_heads)) {
  require(n_layers > 0 && n_heads > 0 && d_head > 0, "activation store: non-positive shape");
}

void ActivationStore::add(ActivationRecord r) {
  require(r.layer < n_layers_ && r.head < n_heads_,
          "activation store: record head (" + std::to_string(r.layer) + ", " +
              std::to_string(r.head) + ") out of range");
  groups_[static_cast<std::size_t>(r.layer) * n_heads_ + r.head].push_back(std::move(r));
}

const std::vector<ActivationRecord>& ActivationStore::group(int layer, int head) const {
  require(layer >= 0 && layer < n_layers_ && head >= 0 && head < n_heads_,
          "activation store: group index out of range");
  return groups_[static_cast<std::size_t>(layer) * n_heads_ + head];
}

std::size_t ActivationStore::size() const {
  std::size_t n = 0;
  for (const auto& g : groups_) n += g.size();
  return n;
}

void ActivationStore::validate() const {
  for (int l = 0; l < n_layers_; ++l)
    for (int h = 0; h < n_heads_; ++h) {
      const auto& g = group(l, h);
      const std::string where = "activation store group (" + std::to_string(l) + ", " +
                                std::to_string(h) + ")";
      std::vector<std::uint32_t> ids;
      for (const auto& r : g) {
        if (r.vector.size() != g.front().vector.size())
          fail(ErrorCode::kData, where + ": mixed vector lengths " +
                                     std::to_string(g.front().vector.size()) + " and " +
                                     std::to_string(r.vector.size()));
        if (r.vector.empty()) fail(ErrorCode::kData, where + ": empty activation vector");
        if (!all_finite(r.vector)) fail(ErrorCode::kData, where + ": non-finite activation");
        if (r.label > 1) fail(ErrorCode::kData, where + ": label outside {0,1}");
        ids.push_back(r.sample_id);
      }
      std::sort(ids.begin(), ids.end());
      if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        fail(ErrorCode::kData, where + ": duplicate sample id");
    }
}

ActivationStore harvest(const ModelState& model, const DatasetManifest& manifest,
                        PositionPolicy policy, HarvestReport* report) {
  const ModelConfig& c = model.config();
  ActivationStore store(c.n_layers, c.n_heads, c.d_head(), model.fingerprint());
  const auto dh = static_cast<std::size_t>(c.d_head());
  HarvestReport local;
  for (const Sample& s : manifest.samples) {
    TokenSeq seq = make_prompt(s.spec);
    const int code_begin = static_cast<int>(seq.size());
    seq.insert(seq.end(), s.code.begin(), s.code.end());
    if (static_cast<int>(seq.size()) > c.max_context || s.code.empty()) {
      std::cerr << "harvest: sample " << s.id << " skipped (" << seq.size()
                << " tokens exceed context " << c.max_context << ")\n";
      local.skipped.push_back(s.id);
      continue;
    }
    const ForwardTrace tr = forward(model, seq);
    const int last = static_cast<int>(seq.size()) - 1;
    for (int l = 0; l < c.n_layers; ++l)
      for (int h = 0; h < c.n_heads; ++h) {
        ActivationRecord r;
        r.sample_id = s.id;
        r.layer = static_cast<std::uint16_t>(l);
        r.head = static_cast<std::uint16_t>(h);
        r.label = s.label;
        r.category = s.category;
        switch (policy) {
          case PositionPolicy::kLastCode: {
            const auto z = tr.tap(last, l, h);
            r.vector.assign(z.begin(), z.end());
            break;
          }
          case PositionPolicy::kSep: {
            const auto z = tr.tap(code_begin - 1, l, h);
            r.vector.assign(z.begin(), z.end());
            break;
          }
          case PositionPolicy::kMeanCode: {
            r.vector.assign(dh, 0.0);
            for (int t = code_begin; t <= last; ++t) {
              const auto z = tr.tap(t, l, h);
              for (std::size_t i = 0; i < dh; ++i) r.vector[i] += z[i];
            }
            for (double& v : r.vector) v /= static_cast<double>(last - code_begin + 1);
            break;
          }
        }
        store.add(std::move(r));
      }
  }
  if (report) *report = std::move(local);
  return store;
}

std::string serialize_store(const ActivationStore& store) {
  store.validate();
  BinaryWriter w(kMagic, kStoreFormatVersion);
  w.u32(static_cast<std::uint32_t>(store.n_layers()));
  w.u32(static_cast<std::uint32_t>(store.n_heads()));
  w.u32(static_cast<std::uint32_t>(store.d_head()));
  w.u64(store.size());
  w.str(store.fingerprint());
  for (int l = 0; l < store.n_layers(); ++l)
    for (int h = 0; h < store.n_heads(); ++h)
      for (const auto& r : store.group(l, h)) {
        if (r.vector.size() != static_cast<std::size_t>(store.d_head()))
          fail(ErrorCode::kData, "activation store: record width " +
                                     std::to_string(r.vector.size()) +
                                     " differs from header d_head " +
                                     std::to_string(store.d_head()));
        w.u32(r.sample_id);
        w.u16(r.layer);
        w.u16(r.head);
        w.u8(r.label);
        w.u8(static_cast<std::uint8_t>(r.category));
        w.f64s(r.vector);
      }
  return std::move(w).finish();
}

ActivationStore deserialize_store(std::string bytes) {
  BinaryReader rd(std::move(bytes), kMagic, kStoreFormatVersion, "activation store");
  const std::uint32_t L = rd.u32(), H = rd.u32(), dh = rd.u32();
  const std::uint64_t n = rd.u64();
  std::string fp = rd.str();
  if (L == 0 || H == 0 || dh == 0 || L > 0xffff || H > 0xffff || dh > (1u << 20))
    fail(ErrorCode::kFormat, "activation store: malformed header (L=" + std::to_string(L) +
                                 ", H=" + std::to_string(H) + ", d_head=" + std::to_string(dh) +
                                 ")");
  const std::size_t record_bytes = 10 + 8 * static_cast<std::size_t>(dh);
  if (rd.remaining() != n * record_bytes)
    fail(ErrorCode::kFormat, "activation store: header declares " + std::to_string(n) +
                                 " records but the payload holds " +
                                 std::to_string(rd.remaining() / record_bytes) + " (" +
                                 std::to_string(rd.remaining()) + " bytes)");
  ActivationStore store(static_cast<int>(L), static_cast<int>(H), static_cast<int>(dh),
                        std::move(fp));
  for (std::uint64_t i = 0; i < n; ++i) {
    ActivationRecord r;
    r.sample_id = rd.u32();
    r.layer = rd.u16();
    r.head = rd.u16();
    r.label = rd.u8();
    const std::uint8_t cat = rd.u8();
    if (r.layer >= L || r.head >= H)
      fail(ErrorCode::kFormat, "activation store: record " + std::to_string(i) +
                                   " names head (" + std::to_string(r.layer) + ", " +
                                   std::to_string(r.head) + ") outside the header shape");
    if (r.label > 1)
      fail(ErrorCode::kFormat, "activation store: record " + std::to_string(i) +
                                   " has label " + std::to_string(r.label));
    if (cat >= kNumCategories)
      fail(ErrorCode::kFormat, "activation store: record " + std::to_string(i) +
                                   " has category " + std::to_string(cat));
    r.category = static_cast<Category>(cat);
    r.vector.resize(dh);
    rd.f64s(r.vector);
    store.add(std::move(r));
  }
  rd.expect_end();
  try {
    store.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kFormat, e.what());
  }
  return store;
}

void export_store(const ActivationStore& store, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_store(store));
}

ActivationStore import_store(const std::filesystem::path& path) {
  return deserialize_store(read_file_bytes(path));
}

std::pair<ActivationStore, ActivationStore> split(const ActivationStore& store,
                                                  double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    fail(ErrorCode::kContract, "split: train_fraction must lie in (0, 1)");
  store.validate();
  ActivationStore train(store.n_layers(), store.n_heads(), store.d_head(), store.fingerprint());
  ActivationStore val = train;
  for (int l = 0; l < store.n_layers(); ++l)
    for (int h = 0; h < store.n_heads(); ++h) {
      const auto& g = store.group(l, h);
      for (int cat = 0; cat < kNumCategories; ++cat)
        for (int label = 0; label < 2; ++label) {
          std::vector<const ActivationRecord*> members;
          for (const auto& r : g)
            if (static_cast<int>(r.category) == cat && r.label == label) members.push_back(&r);
          if (members.empty()) continue;
          std::sort(members.begin(), members.end(),
                    [](auto* a, auto* b) { return a->sample_id < b->sample_id; });
          Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(cat * 2 + label)));
          rng.shuffle(members);
          const auto n_train = static_cast<std::size_t>(
              std::lround(train_fraction * static_cast<double>(members.size())));
          if (n_train == 0 || n_train == members.size())
            fail(ErrorCode::kData,
                 "split: stratum (category=" + std::string(category_name(static_cast<Category>(cat))) +
                     ", label=" + std::to_string(label) + ") of head (" + std::to_string(l) +
                     ", " + std::to_string(h) + ") with " + std::to_string(members.size()) +
                     " record(s) would leave one side empty");
          std::sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train),
                    [](auto* a, auto* b) { return a->sample_id < b->sample_id; });
          std::sort(members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end(),
                    [](auto* a, auto* b) { return a->sample_id < b->sample_id; });
          for (std::size_t i = 0; i < members.size(); ++i) (i < n_train ? train : val).add(*members[i]);
        }
    }
  return {std::move(train), std::move(val)};
}

ActivationStore filter_category(const ActivationStore& store, std::optional<Category> scope) {
  if (!scope) return store;
  ActivationStore out(store.n_layers(), store.n_heads(), store.d_head(), store.fingerprint());
  for (int l = 0; l < store.n_layers(); ++l)
    for (int h = 0; h < store.n_heads(); ++h)
      for (const auto& r : store.group(l, h))
        if (r.category == *scope) out.add(r);
  return out;
}

}  // namespace meltrtl
