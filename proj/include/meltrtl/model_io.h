#pragma once

// Model file: magic "MELTLM\0\1", u32 version, config block (u32 n_layers,
// n_heads, d_model, vocab_size, max_context; u64 seed), u64 parameter count,
// then every parameter block in ParamLayout order as f64, trailing CRC-32.

#include <filesystem>

#include "meltrtl/model.h"

namespace meltrtl {

inline constexpr std::uint32_t kModelFormatVersion = 1;

void save_model(const ModelState& model, const std::filesystem::path& path);
// Throws kFormat on corruption, version or shape mismatch. When `expected` is
// given, a file holding a different configuration is rejected with kFormat.
ModelState load_model(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace meltrtl
