#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moesplit/tensor.hpp"
#include "moesplit/transformer.hpp"

namespace moesplit {

using Json = nlohmann::ordered_json;

/// Rounds to 9 significant digits, the precision used for every number the
/// tools print.
double real9(double x);
std::string format_real(double x);

/// Checkpoint layout: a JSON manifest (tensor name -> shape, dtype, byte
/// offset, plus free-form metadata) next to a single little-endian raw f32
/// blob with the same stem and a `.bin` extension.
class CheckpointWriter {
 public:
  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    add_f32(name, t.template cast<float>());
  }
  Json& meta() noexcept { return meta_; }
  /// Writes `<manifest>` and its blob. Parent directories are created.
  void write(const std::filesystem::path& manifest) const;

 private:
  void add_f32(const std::string& name, Tensor<float> t);

  std::vector<std::pair<std::string, Tensor<float>>> tensors_;
  Json meta_ = Json::object();
};

struct Checkpoint {
  Json meta;
  std::vector<std::string> names;
  std::map<std::string, Tensor<float>> tensors;

  const Tensor<float>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  static Checkpoint load(const std::filesystem::path& manifest);
};

std::filesystem::path blob_path(const std::filesystem::path& manifest);

Json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);

void save_model(const std::filesystem::path& manifest, const ModelWeights<float>& m, const Json& extra_meta = {});
ModelWeights<float> load_model(const std::filesystem::path& manifest);
/// Rebuilds model weights from tensors stored under `prefix` in an open checkpoint.
ModelWeights<float> model_from_checkpoint(const Checkpoint& ck, const std::string& prefix = "");

}  // namespace moesplit
