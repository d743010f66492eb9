#pragma once

#include <filesystem>
#include <string>

#include "watk/model.hpp"
#include "watk/tensor_file.hpp"

namespace watk {

TensorFile checkpoint_to_tensors(const ModelCheckpoint& model);
ModelCheckpoint checkpoint_from_tensors(const TensorFile& file);

/// Validates first; nothing is written if the model has a non-finite entry.
/// A non-empty `model.run_config` is embedded in the file.
void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace watk
