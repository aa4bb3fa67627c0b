#include "meltrtl/model_io.h"

#include "meltrtl/binio.h"
#include "meltrtl/error.h"

namespace meltrtl {
namespace {

constexpr std::string_view kMagic{"MELTLM\0\1", 8};

}  // namespace

void save_model(const ModelState& model, const std::filesystem::path& path) {
  const ModelConfig& c = model.config();
  BinaryWriter w(kMagic, kModelFormatVersion);
  for (int v : {c.n_layers, c.n_heads, c.d_model, c.vocab_size, c.max_context})
    w.u32(static_cast<std::uint32_t>(v));
  w.u64(c.seed);
  w.u64(model.params().size());
  w.f64s(model.params());
  std::move(w).write_file(path);
}

ModelState load_model(const std::filesystem::path& path, const ModelConfig* expected) {
  BinaryReader r = BinaryReader::from_file(path, kMagic, kModelFormatVersion, "model file");
  ModelConfig c;
  c.n_layers = static_cast<int>(r.u32());
  c.n_heads = static_cast<int>(r.u32());
  c.d_model = static_cast<int>(r.u32());
  c.vocab_size = static_cast<int>(r.u32());
  c.max_context = static_cast<int>(r.u32());
  c.seed = r.u64();
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kFormat, std::string("model file: invalid config block: ") + e.what());
  }
  if (expected && !(*expected == c))
    fail(ErrorCode::kFormat, "model file: configuration differs from the expected one (L=" +
                                 std::to_string(c.n_layers) + " H=" + std::to_string(c.n_heads) +
                                 " d_model=" + std::to_string(c.d_model) + ")");
  ModelState model(c);
  const std::uint64_t n = r.u64();
  if (n != model.params().size())
    fail(ErrorCode::kFormat, "model file: parameter count " + std::to_string(n) +
                                 " does not match the configuration (" +
                                 std::to_string(model.params().size()) + ")");
  r.f64s(model.params());
  r.expect_end();
  if (!all_finite(model.params())) fail(ErrorCode::kFormat, "model file: non-finite weights");
  return model;
}

}  // namespace meltrtl
