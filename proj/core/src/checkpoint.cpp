#include "respalloc/checkpoint.hpp"

#include <fstream>

#include "respalloc/errors.hpp"

namespace resp {

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json j;
  j["format"] = "respalloc-checkpoint";
  j["format_version"] = kCheckpointVersion;
  j["meta"] = ckpt.meta.is_null() ? nlohmann::json::object() : ckpt.meta;
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& s : ckpt.params.slices()) {
    slices.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}, {"fan_in", s.fan_in}});
  }
  j["slices"] = std::move(slices);
  const Eigen::VectorXd& flat = ckpt.params.flat();
  std::vector<double> values(flat.data(), flat.data() + flat.size());
  j["values"] = std::move(values);

  std::ofstream out(path);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << j.dump() << '\n';
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid checkpoint JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != "respalloc-checkpoint")
    throw ParseError("not a respalloc checkpoint: " + path);
  const int version = j.value("format_version", -1);
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint format_version " + std::to_string(version) +
                     " (expected " + std::to_string(kCheckpointVersion) + ")");
  if (!j.contains("slices") || !j["slices"].is_array() || !j.contains("values") ||
      !j["values"].is_array())
    throw ParseError("checkpoint missing slices/values arrays: " + path);

  Checkpoint ckpt;
  ckpt.meta = j.value("meta", nlohmann::json::object());
  for (const auto& s : j["slices"]) {
    if (!s.contains("name") || !s.contains("rows") || !s.contains("cols"))
      throw ParseError("malformed slice entry in checkpoint: " + path);
    ckpt.params.add(s["name"].get<std::string>(), s["rows"].get<long>(), s["cols"].get<long>(),
                    s.value("fan_in", 0L));
  }
  const auto& values = j["values"];
  if (static_cast<long>(values.size()) != ckpt.params.size())
    throw ParseError("checkpoint value count does not match slice table: " + path);
  Eigen::VectorXd& flat = ckpt.params.flat();
  for (long i = 0; i < flat.size(); ++i) {
    if (!values[i].is_number()) throw ParseError("non-numeric checkpoint value: " + path);
    flat[i] = values[i].get<double>();
  }
  if (!flat.allFinite()) throw ParseError("checkpoint contains non-finite values: " + path);
  return ckpt;
}

}  // namespace resp
