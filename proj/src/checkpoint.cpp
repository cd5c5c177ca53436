#include "moesplit/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "moesplit/errors.hpp"

namespace moesplit {

namespace {

constexpr const char* kFormat = "moesplit-checkpoint/1";

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v & 0xff0000u) >> 8) | (v >> 24);
  }
  return v;
}

}  // namespace

double real9(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return std::strtod(buf, nullptr);
}

std::string format_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

void CheckpointWriter::add_f32(const std::string& name, Tensor<float> t) {
  for (const auto& [n, _] : tensors_)
    if (n == name) throw CheckpointError("duplicate tensor name " + name);
  tensors_.emplace_back(name, std::move(t));
}

void CheckpointWriter::write(const std::filesystem::path& manifest) const {
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  const auto blob = blob_path(manifest);
  Json j;
  j["format"] = kFormat;
  j["blob"] = blob.filename().string();
  j["byte_order"] = "little";
  Json tensors = Json::object();
  std::ofstream out(blob, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + blob.string());
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    tensors[name] = {{"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}};
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      bits = to_le(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    offset += t.size() * sizeof(float);
  }
  if (!out) throw CheckpointError("short write to " + blob.string());
  j["tensors"] = std::move(tensors);
  j["meta"] = meta_;
  std::ofstream mf(manifest, std::ios::trunc);
  if (!mf) throw CheckpointError("cannot write " + manifest.string());
  mf << j.dump(2) << "\n";
}

const Tensor<float>& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw CheckpointError("checkpoint has no tensor " + name);
  return it->second;
}

Checkpoint Checkpoint::load(const std::filesystem::path& manifest) {
  std::ifstream mf(manifest);
  if (!mf) throw CheckpointError("cannot read checkpoint manifest " + manifest.string());
  Json j;
  try {
    j = Json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed manifest " + manifest.string() + ": " + e.what());
  }
  if (j.value("format", "") != kFormat) throw CheckpointError("unknown checkpoint format in " + manifest.string());
  const auto blob = manifest.parent_path() / j.at("blob").get<std::string>();
  std::ifstream in(blob, std::ios::binary);
  if (!in) throw CheckpointError("cannot read blob " + blob.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  ck.meta = j.value("meta", Json::object());
  for (const auto& [name, rec] : j.at("tensors").items()) {
    const auto shape = rec.at("shape").get<Shape>();
    const auto offset = rec.at("offset").get<std::size_t>();
    if (rec.at("dtype") != "f32") throw CheckpointError("tensor " + name + " has unsupported dtype");
    const std::size_t n = shape_numel(shape);
    if (offset + n * sizeof(float) > bytes.size()) throw CheckpointError("tensor " + name + " overruns blob");
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + offset + i * sizeof bits, sizeof bits);
      bits = to_le(bits);
      std::memcpy(&data[i], &bits, sizeof bits);
    }
    ck.names.push_back(name);
    ck.tensors.emplace(name, Tensor<float>(shape, std::move(data)));
  }
  return ck;
}

Json model_config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers}, {"d_model", c.d_model}, {"expansion", c.expansion},
          {"heads", c.heads},   {"vocab", c.vocab},     {"max_seq", c.max_seq}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.expansion = j.at("expansion").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.validate();
  return c;
}

void save_model(const std::filesystem::path& manifest, const ModelWeights<float>& m, const Json& extra_meta) {
  CheckpointWriter w;
  for_each_tensor(m, [&](const std::string& name, const Tensor<float>& t) { w.add(name, t); });
  w.meta()["kind"] = "dense";
  w.meta()["model"] = model_config_to_json(m.config);
  for (const auto& [k, v] : extra_meta.items()) w.meta()[k] = v;
  w.write(manifest);
}

ModelWeights<float> model_from_checkpoint(const Checkpoint& ck, const std::string& prefix) {
  ModelWeights<float> m;
  m.config = model_config_from_json(ck.meta.at("model"));
  m.blocks.resize(m.config.layers);
  for_each_tensor(m, [&](const std::string& name, Tensor<float>& t) { t = ck.at(prefix + name); });
  return m;
}

ModelWeights<float> load_model(const std::filesystem::path& manifest) {
  return model_from_checkpoint(Checkpoint::load(manifest));
}

}  // namespace moesplit
