#include "watk/checkpoint.hpp"

#include <cmath>

namespace watk {

TensorFile checkpoint_to_tensors(const ModelCheckpoint& model) {
  const auto& c = model.config;
  TensorFile f;
  f.meta = std::array<std::uint32_t, 7>{
      static_cast<std::uint32_t>(c.vocab_size), static_cast<std::uint32_t>(c.n_blocks),
      static_cast<std::uint32_t>(c.d_model),    static_cast<std::uint32_t>(c.n_heads),
      static_cast<std::uint32_t>(c.d_ff),       static_cast<std::uint32_t>(c.max_seq), 0u};
  f.tensors.push_back(NamedTensor::from_matrix("embed", model.embed));
  f.tensors.push_back(NamedTensor::from_matrix("pos_embed", model.pos_embed));
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto p = std::to_string(b) + ".";
    const auto& bw = model.blocks[b];
    for (LayerName n : kAllLayers)
      f.tensors.push_back(NamedTensor::from_matrix(p + std::string(to_string(n)), bw.layer(n)));
    f.tensors.push_back(NamedTensor::from_vector(p + "norm1", bw.norm1));
    f.tensors.push_back(NamedTensor::from_vector(p + "norm2", bw.norm2));
  }
  f.tensors.push_back(NamedTensor::from_vector("final_norm", model.final_norm));
  f.tensors.push_back(NamedTensor::from_matrix("unembed", model.unembed));
  if (!model.run_config.empty()) f.run_config = model.run_config;
  return f;
}

ModelCheckpoint checkpoint_from_tensors(const TensorFile& file) {
  if (!file.meta) throw ModelError("malformed header: missing __meta__ entry");
  const auto& m = *file.meta;
  ModelConfig cfg{m[0], m[1], m[2], m[3], m[4], m[5]};
  cfg.validate();
  ModelCheckpoint model = ModelCheckpoint::zeros(cfg);

  auto fetch = [&](const std::string& name) -> const NamedTensor& {
    const NamedTensor* t = file.find(name);
    if (!t) throw ModelError("missing tensor " + name);
    for (float v : t->data)
      if (!std::isfinite(v)) throw ModelError("non-finite entry in tensor " + name);
    return *t;
  };
  auto load_matrix = [&](const std::string& name, Matrix& dst) {
    const NamedTensor& t = fetch(name);
    if (t.dims.size() != 2 || t.dims[0] != dst.rows() || t.dims[1] != dst.cols())
      throw ModelError("dimension mismatch for tensor " + name + ": expected " + dst.shape_string());
    dst = t.to_matrix();
  };
  auto load_vector = [&](const std::string& name, Vector& dst) {
    const NamedTensor& t = fetch(name);
    if (t.dims.size() != 1 || t.dims[0] != dst.size())
      throw ModelError("dimension mismatch for tensor " + name + ": expected length " +
                       std::to_string(dst.size()));
    dst = t.to_vector();
  };

  load_matrix("embed", model.embed);
  load_matrix("pos_embed", model.pos_embed);
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const auto p = std::to_string(b) + ".";
    auto& bw = model.blocks[b];
    for (LayerName n : kAllLayers) load_matrix(p + std::string(to_string(n)), bw.layer(n));
    load_vector(p + "norm1", bw.norm1);
    load_vector(p + "norm2", bw.norm2);
  }
  load_vector("final_norm", model.final_norm);
  load_matrix("unembed", model.unembed);
  if (file.run_config) model.run_config = *file.run_config;
  model.validate();
  return model;
}

void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path) {
  model.validate();
  write_tensor_file(path, checkpoint_to_tensors(model));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_tensors(read_tensor_file(path));
}

}  // namespace watk
