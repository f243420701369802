#include "gssm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>

namespace gssm {

namespace fs = std::filesystem;

namespace {

void put_le(std::vector<unsigned char>& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<unsigned char>(bits & 0xffU));
    bits >>= 8;
  }
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const fs::path& dir, const std::vector<ad::Param*>& params, const nlohmann::json& meta) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["blob"] = "params.bin";
  manifest["meta"] = meta;
  auto& tensors = manifest["tensors"] = nlohmann::json::array();

  std::vector<unsigned char> blob;
  for (const ad::Param* p : params) {
    tensors.push_back({{"name", p->name},
                       {"rows", p->value.rows()},
                       {"cols", p->value.cols()},
                       {"offset", blob.size()}});
    for (Eigen::Index i = 0; i < p->value.size(); ++i) put_le(blob, p->value.data()[i]);
  }
  manifest["blob_bytes"] = blob.size();

  {
    std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
    bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!bin) throw CheckpointError("cannot write " + (dir / "params.bin").string());
  }
  std::ofstream js(dir / "manifest.json", std::ios::trunc);
  js << manifest.dump(2) << "\n";
  if (!js) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
}

nlohmann::json read_manifest(const fs::path& dir) {
  std::ifstream js(dir / "manifest.json");
  if (!js) throw CheckpointError("missing checkpoint manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format", std::string()) != kCheckpointFormat)
    throw CheckpointError("checkpoint format mismatch: expected " + std::string(kCheckpointFormat));
  return manifest;
}

nlohmann::json load_checkpoint(const fs::path& dir, const std::vector<ad::Param*>& params) {
  const nlohmann::json manifest = read_manifest(dir);
  std::ifstream bin(dir / manifest.at("blob").get<std::string>(), std::ios::binary);
  if (!bin) throw CheckpointError("missing checkpoint blob in " + dir.string());
  const std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (blob.size() != manifest.at("blob_bytes").get<std::size_t>())
    throw CheckpointError("checkpoint blob size " + std::to_string(blob.size()) + " != manifest " +
                          std::to_string(manifest.at("blob_bytes").get<std::size_t>()));

  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& t : manifest.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;

  for (ad::Param* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor " + p->name);
    const auto& t = *it->second;
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    const auto offset = t.at("offset").get<std::size_t>();
    if (rows != p->value.rows() || cols != p->value.cols())
      throw CheckpointError("shape mismatch for " + p->name + ": checkpoint " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", model " + p->shape().str());
    const auto n = static_cast<std::size_t>(rows * cols);
    if (offset + 8 * n > blob.size()) throw CheckpointError("tensor " + p->name + " overruns blob");
    for (std::size_t i = 0; i < n; ++i) p->value.data()[i] = get_le(blob.data() + offset + 8 * i);
  }
  return manifest.value("meta", nlohmann::json::object());
}

}  // namespace gssm
