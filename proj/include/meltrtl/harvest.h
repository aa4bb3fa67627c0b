#pragma once

// Per-head activation capture and the activation interchange file:
//   magic "MELTACT\1", u32 version, u32 L, u32 H, u32 d_head, u64 n_records,
//   str fingerprint, then n_records x (u32 sample_id, u16 layer, u16 head,
//   u8 label, u8 category, f64 x d_head), trailing CRC-32.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "meltrtl/corpus.h"
#include "meltrtl/model.h"

namespace meltrtl {

inline constexpr std::uint32_t kStoreFormatVersion = 1;

// Which sequence position of spec ‖ SEP ‖ code supplies a sample's activation.
enum class PositionPolicy : std::uint8_t {
  kLastCode = 0,  // final code token
  kMeanCode = 1,  // average over all code tokens
  kSep = 2,       // separator, before any code is seen
};
std::string_view position_policy_name(PositionPolicy p);
PositionPolicy position_policy_from_name(std::string_view name);  // kConfig on unknown

struct ActivationRecord {
  std::uint32_t sample_id = 0;
  std::uint16_t layer = 0;
  std::uint16_t head = 0;
  std::uint8_t label = 0;
  Category category = Category::kCombinational;
  Vec vector;

  bool operator==(const ActivationRecord&) const = default;
};

class ActivationStore {
 public:
  ActivationStore() = default;
  ActivationStore(int n_layers, int n_heads, int d_head, std::string fingerprint);

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  int d_head() const { return d_head_; }
  const std::string& fingerprint() const { return fingerprint_; }

  // Appends to the record's (layer, head) group; kContract when out of range.
  void add(ActivationRecord r);
  const std::vector<ActivationRecord>& group(int layer, int head) const;
  std::size_t size() const;
  // Throws kData when a group mixes vector lengths or a vector is non-finite.
  void validate() const;

  bool operator==(const ActivationStore&) const = default;

 private:
  int n_layers_ = 0, n_heads_ = 0, d_head_ = 0;
  std::string fingerprint_;
  std::vector<std::vector<ActivationRecord>> groups_;  // layer-major
};

struct HarvestReport {
  std::vector<std::uint32_t> skipped;  // samples that do not fit the context
};

ActivationStore harvest(const ModelState& model, const DatasetManifest& manifest,
                        PositionPolicy policy = PositionPolicy::kLastCode,
                        HarvestReport* report = nullptr);

void export_store(const ActivationStore& store, const std::filesystem::path& path);
ActivationStore import_store(const std::filesystem::path& path);
std::string serialize_store(const ActivationStore& store);
ActivationStore deserialize_store(std::string bytes);

// Stratified by (label, category) inside every (layer, head) group. A stratum
// that would leave either side empty is a kData error naming it.
std::pair<ActivationStore, ActivationStore> split(const ActivationStore& store,
                                                  double train_fraction, std::uint64_t seed);

// Keeps records whose category matches; nullopt keeps everything.
ActivationStore filter_category(const ActivationStore& store, std::optional<Category> scope);

}  // namespace meltrtl
