#include "pdnet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace pdnet {

namespace {

constexpr char kMagic[4] = {'P', 'D', 'N', 'W'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::ostream& out, T v)
{
   out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in)
{
   T v{};
   in.read(reinterpret_cast<char*>(&v), sizeof v);
   if (!in) {
      throw std::runtime_error("checkpoint: truncated weights.bin");
   }
   return v;
}

std::string fnv1a_hex(const std::string& bytes)
{
   std::uint64_t h = 0xcbf29ce484222325ULL;
   for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ULL;
   }
   std::ostringstream out;
   out << std::hex << std::setw(16) << std::setfill('0') << h;
   return out.str();
}

} // namespace

std::vector<std::pair<std::string, torch::Tensor>> named_state(PdNet& model)
{
   std::vector<std::pair<std::string, torch::Tensor>> out;
   for (const auto& item : model->named_parameters()) {
      out.emplace_back(item.key(), item.value());
   }
   for (const auto& item : model->named_buffers()) {
      out.emplace_back(item.key(), item.value());
   }
   return out;
}

nlohmann::json to_json(const CheckpointMeta& meta)
{
   return {
      {"format_version", kFormatVersion},
      {"model", to_json(meta.model)},
      {"stage", meta.stage},
      {"sigma", meta.sigma},
      {"lambda", meta.lambda},
      {"extra", meta.extra},
   };
}

CheckpointMeta checkpoint_meta_from_json(const nlohmann::json& j)
{
   if (j.value("format_version", 0u) != kFormatVersion) {
      throw std::runtime_error("checkpoint: unsupported format_version");
   }
   CheckpointMeta meta;
   meta.model = model_config_from_json(j.at("model"));
   meta.stage = j.at("stage").get<int>();
   meta.sigma = j.at("sigma").get<double>();
   meta.lambda = j.at("lambda").get<double>();
   meta.extra = j.value("extra", nlohmann::json::object());
   return meta;
}

void save_checkpoint(const fs::path& dir, PdNet& model, const CheckpointMeta& meta)
{
   fs::create_directories(dir);
   {
      std::ofstream cfg(dir / "config.json");
      cfg << to_json(meta).dump(2) << '\n';
   }
   const auto state = named_state(model);
   nlohmann::json manifest = nlohmann::json::array();
   std::ofstream out(dir / "weights.bin", std::ios::binary);
   out.write(kMagic, 4);
   put<std::uint32_t>(out, kFormatVersion);
   put<std::uint32_t>(out, static_cast<std::uint32_t>(state.size()));
   for (const auto& [name, tensor] : state) {
      const auto t = tensor.detach().contiguous();
      std::uint8_t dtype = 0;
      if (t.scalar_type() == torch::kInt64) {
         dtype = 1;
      } else if (t.scalar_type() != torch::kFloat32) {
         throw std::runtime_error("checkpoint: unsupported dtype for " + name);
      }
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint8_t>(out, dtype);
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
      for (auto d : t.sizes()) {
         put<std::int64_t>(out, d);
      }
      out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
      manifest.push_back({{"name", name}, {"dtype", dtype == 0 ? "f32" : "i64"}, {"shape", t.sizes().vec()}});
   }
   out.close();
   std::ofstream man(dir / "manifest.json");
   man << manifest.dump(1) << '\n';
}

LoadedCheckpoint load_checkpoint(const fs::path& dir)
{
   std::ifstream cfg(dir / "config.json");
   if (!cfg) {
      throw std::runtime_error("checkpoint: missing " + (dir / "config.json").string());
   }
   LoadedCheckpoint ckpt;
   ckpt.meta = checkpoint_meta_from_json(nlohmann::json::parse(cfg));
   ckpt.model = PdNet(ckpt.meta.model);

   std::ifstream file(dir / "weights.bin", std::ios::binary);
   if (!file) {
      throw std::runtime_error("checkpoint: missing weights.bin");
   }
   const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
   ckpt.model_version = fnv1a_hex(bytes);
   std::istringstream in(bytes);

   char magic[4];
   in.read(magic, 4);
   if (!in || std::memcmp(magic, kMagic, 4) != 0) {
      throw std::runtime_error("checkpoint: bad magic");
   }
   if (get<std::uint32_t>(in) != kFormatVersion) {
      throw std::runtime_error("checkpoint: unsupported weights version");
   }
   const auto count = get<std::uint32_t>(in);

   std::map<std::string, torch::Tensor> targets;
   for (auto& [name, t] : named_state(ckpt.model)) {
      targets.emplace(name, t);
   }
   if (count != targets.size()) {
      throw std::runtime_error("checkpoint: tensor count does not match the configured model");
   }
   torch::NoGradGuard no_grad;
   for (std::uint32_t i = 0; i < count; ++i) {
      std::string name(get<std::uint32_t>(in), '\0');
      in.read(name.data(), static_cast<std::streamsize>(name.size()));
      const auto dtype = get<std::uint8_t>(in);
      std::vector<std::int64_t> dims(get<std::uint32_t>(in));
      for (auto& d : dims) {
         d = get<std::int64_t>(in);
      }
      const auto it = targets.find(name);
      if (it == targets.end()) {
         throw std::runtime_error("checkpoint: unexpected tensor " + name);
      }
      auto& target = it->second;
      const auto expected_type = dtype == 1 ? torch::kInt64 : torch::kFloat32;
      if (target.sizes().vec() != dims || target.scalar_type() != expected_type) {
         throw std::runtime_error("checkpoint: shape or dtype mismatch for " + name);
      }
      auto loaded = torch::empty(dims, torch::TensorOptions().dtype(expected_type));
      in.read(static_cast<char*>(loaded.data_ptr()), static_cast<std::streamsize>(loaded.nbytes()));
      if (!in) {
         throw std::runtime_error("checkpoint: truncated data for " + name);
      }
      target.copy_(loaded);
      targets.erase(it);
   }
   ckpt.model->eval();
   return ckpt;
}

} // namespace pdnet
