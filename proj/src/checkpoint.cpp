#include <cmath>
#include <cstring>
#include <fstream>

#include "curlip/model_state.hpp"

namespace curlip {

namespace {

constexpr char kMagic[8] = {'C', 'U', 'R', 'L', 'I', 'P', '0', '1'};

struct ManifestEntry {
  std::string name;
  std::string kind;  // "param" | "adam_m" | "adam_v"
  bool trainable;
  Shape shape;
  int64_t offset;
};

void write_u64(std::ofstream& out, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = (unsigned char)((v >> (8 * i)) & 0xff);
  out.write((const char*)buf, 8);
}

uint64_t read_u64(std::ifstream& in) {
  unsigned char buf[8];
  in.read((char*)buf, 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= (uint64_t)buf[i] << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const ModelStateF& state, const std::string& path) {
  std::vector<ManifestEntry> manifest;
  int64_t offset = 0;
  auto push = [&](const std::string& name, const std::string& kind, bool trainable,
                  const TensorF& t) {
    manifest.push_back({name, kind, trainable, t.shape(), offset});
    offset += t.numel() * (int64_t)sizeof(float);
  };
  for (const auto& [name, p] : state.params) push(name, "param", p.trainable, p.value);
  for (const auto& [name, m] : state.moments) {
    push(name, "adam_m", true, m.m);
    push(name, "adam_v", true, m.v);
  }

  nlohmann::json jman = nlohmann::json::array();
  for (const auto& e : manifest)
    jman.push_back({{"name", e.name},
                    {"kind", e.kind},
                    {"trainable", e.trainable},
                    {"dtype", "f32"},
                    {"shape", e.shape},
                    {"offset", e.offset}});
  nlohmann::json header{{"config", state.config.to_json()},
                        {"step_count", state.step_count},
                        {"tensors", jman}};
  if (!std::isnan(state.stored_val_loss)) header["val_loss"] = state.stored_val_loss;
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kMagic, 8);
  write_u64(out, header_str.size());
  out.write(header_str.data(), (std::streamsize)header_str.size());
  auto write_tensor = [&out](const TensorF& t) {
    out.write((const char*)t.data(), (std::streamsize)(t.numel() * (int64_t)sizeof(float)));
  };
  for (const auto& [_, p] : state.params) write_tensor(p.value);
  for (const auto& [_, m] : state.moments) {
    write_tensor(m.m);
    write_tensor(m.v);
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

ModelStateF load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw SchemaError("not a checkpoint file (bad magic): " + path);
  const uint64_t header_len = read_u64(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), (std::streamsize)header_len);
  if (!in) throw SchemaError("truncated checkpoint header: " + path);

  nlohmann::json header = nlohmann::json::parse(header_str);
  ModelStateF state;
  state.config = RunConfig::from_json(header.at("config"));
  state.step_count = header.at("step_count").get<int64_t>();
  if (header.contains("val_loss")) state.stored_val_loss = header.at("val_loss").get<double>();

  const int64_t data_start = (int64_t)(8 + 8 + header_len);
  for (const auto& e : header.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const std::string kind = e.at("kind").get<std::string>();
    if (e.at("dtype").get<std::string>() != "f32")
      throw SchemaError("unsupported tensor dtype in checkpoint");
    Shape shape = e.at("shape").get<Shape>();
    TensorF t(shape);
    in.seekg(data_start + e.at("offset").get<int64_t>());
    in.read((char*)t.data(), (std::streamsize)(t.numel() * (int64_t)sizeof(float)));
    if (!in) throw SchemaError("truncated checkpoint data: " + path);
    if (kind == "param") {
      state.add(name, std::move(t), e.at("trainable").get<bool>());
    } else if (kind == "adam_m") {
      state.moments[name].m = std::move(t);
    } else if (kind == "adam_v") {
      state.moments[name].v = std::move(t);
    } else {
      throw SchemaError("unknown tensor kind in checkpoint: " + kind);
    }
  }
  return state;
}

}  // namespace curlip
