#include "dscm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace dscm {
namespace {

constexpr const char* kFormat = "dscm-checkpoint";
constexpr int kVersion = 1;

nlohmann::json shape_json(const Tensor& t) { return t.shape(); }

std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw CheckpointError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const config::GraphConfig& config, const Scm& scm,
                     const CheckpointInfo& info) {
  std::filesystem::create_directories(dir);
  std::vector<NamedTensor> params, buffers;
  scm.named_parameters(params);
  scm.named_buffers(buffers);

  nlohmann::ordered_json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["role"] = info.role;
  manifest["config_hash"] = config.hash();
  manifest["step"] = info.step;
  manifest["epoch"] = info.epoch;
  manifest["parameters"] = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  std::vector<char> blob;
  for (const auto& p : params) {
    manifest["parameters"].push_back({{"name", p.name}, {"shape", shape_json(p.tensor)}, {"offset", offset}});
    for (double v : p.tensor.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
    }
    offset += p.tensor.size();
  }
  manifest["parameter_count"] = offset;
  manifest["buffers"] = nlohmann::ordered_json::array();
  for (const auto& b : buffers) {
    std::vector<double> values(b.tensor.data().begin(), b.tensor.data().end());
    manifest["buffers"].push_back({{"name", b.name}, {"shape", shape_json(b.tensor)}, {"values", values}});
  }
  manifest["best_validation"] = info.best_validation;
  manifest["history"] = nlohmann::ordered_json::array();
  for (const auto& r : info.history) manifest["history"].push_back(nlohmann::ordered_json::parse(to_json(r).dump()));
  manifest["config"] = config.source;

  const auto tmp_blob = dir / "params.f32.tmp";
  const auto tmp_manifest = dir / "manifest.json.tmp";
  {
    std::ofstream f(tmp_blob, std::ios::binary);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw CheckpointError("cannot write " + tmp_blob.string());
  }
  {
    std::ofstream f(tmp_manifest, std::ios::binary);
    f << manifest.dump(2) << "\n";
    if (!f) throw CheckpointError("cannot write " + tmp_manifest.string());
  }
  std::filesystem::rename(tmp_blob, dir / "params.f32");
  std::filesystem::rename(tmp_manifest, dir / "manifest.json");
}

std::filesystem::path resolve_checkpoint(const std::filesystem::path& path, const std::string& role) {
  if (std::filesystem::exists(path / "manifest.json")) return path;
  if (std::filesystem::exists(path / role / "manifest.json")) return path / role;
  throw CheckpointError(path.string() + ": no checkpoint manifest found");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_hash) {
  const auto dir = resolve_checkpoint(path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError((dir / "manifest.json").string() + ": " + e.what());
  }
  try {
    if (manifest.at("format") != kFormat || manifest.at("version") != kVersion) {
      throw CheckpointError(dir.string() + ": unsupported checkpoint format");
    }
    const std::string hash = manifest.at("config_hash").get<std::string>();
    config::GraphConfig cfg = config::parse_config(manifest.at("config").dump(2), (dir / "manifest.json").string());
    if (cfg.hash() != hash) {
      throw CheckpointError(dir.string() + ": manifest config hash " + hash + " does not match its config (" +
                            cfg.hash() + ")");
    }
    if (!expected_hash.empty() && expected_hash != hash) {
      throw CheckpointError(dir.string() + ": checkpoint config hash " + hash + " differs from expected " +
                            expected_hash);
    }
    Rng rng(0);
    Scm scm = config::build_scm(cfg, nullptr, rng);

    std::vector<NamedTensor> params, buffers;
    scm.named_parameters(params);
    scm.named_buffers(buffers);
    const auto& plist = manifest.at("parameters");
    if (plist.size() != params.size()) throw CheckpointError(dir.string() + ": parameter count mismatch");
    const std::string blob = read_text(dir / "params.f32");
    const std::size_t total = manifest.at("parameter_count").get<std::size_t>();
    if (blob.size() != 4 * total) throw CheckpointError(dir.string() + ": params.f32 has the wrong size");
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& entry = plist[k];
      if (entry.at("name") != params[k].name || entry.at("shape").get<Shape>() != params[k].tensor.shape()) {
        throw CheckpointError(dir.string() + ": parameter " + params[k].name + " does not match the manifest");
      }
      const std::size_t off = entry.at("offset").get<std::size_t>();
      auto dst = params[k].tensor.mutable_data();
      if (off + dst.size() > total) throw CheckpointError(dir.string() + ": parameter offset out of range");
      for (std::size_t j = 0; j < dst.size(); ++j) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
          bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[4 * (off + j) + b])) << (8 * b);
        }
        dst[j] = static_cast<double>(std::bit_cast<float>(bits));
      }
    }
    const auto& blist = manifest.at("buffers");
    if (blist.size() != buffers.size()) throw CheckpointError(dir.string() + ": buffer count mismatch");
    for (std::size_t k = 0; k < buffers.size(); ++k) {
      const auto& entry = blist[k];
      const auto values = entry.at("values").get<std::vector<double>>();
      auto dst = buffers[k].tensor.mutable_data();
      if (entry.at("name") != buffers[k].name || values.size() != dst.size()) {
        throw CheckpointError(dir.string() + ": buffer " + buffers[k].name + " does not match the manifest");
      }
      std::copy(values.begin(), values.end(), dst.begin());
    }

    CheckpointInfo info;
    info.role = manifest.at("role").get<std::string>();
    info.step = manifest.at("step").get<std::int64_t>();
    info.epoch = manifest.at("epoch").get<std::size_t>();
    info.best_validation = manifest.at("best_validation").get<std::map<std::string, double>>();
    for (const auto& r : manifest.at("history")) info.history.push_back(epoch_record_from_json(r));
    return {std::move(cfg), std::move(scm), std::move(info)};
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(dir.string() + ": malformed manifest: " + e.what());
  }
}

}  // namespace dscm
