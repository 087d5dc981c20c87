#include "foley/checkpoint.hpp"

#include <fstream>

#include "foley/blob.hpp"

namespace foley {

using nlohmann::json;

void save_checkpoint(const std::filesystem::path& dir, const nn::ParamStore& params, const json& meta) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "params", ec);
  check_runtime(fs::exists(dir / "params"), msg("cannot create checkpoint directory ", dir.string()));

  json meta_out = meta;
  json order = json::array();
  for (const auto& [name, _] : params.items) order.push_back(name);
  meta_out["param_order"] = order;

  std::ofstream f(dir / "meta.json");
  check_runtime(f.good(), msg("cannot write ", (dir / "meta.json").string()));
  f << meta_out.dump(2) << "\n";

  for (const auto& [name, t] : params.items) write_blob(dir / "params" / (name + ".blob"), t, BlobDtype::f64);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "meta.json");
  check_runtime(f.good(), msg("cannot open checkpoint meta ", (dir / "meta.json").string()));
  Checkpoint ckpt;
  try {
    f >> ckpt.meta;
  } catch (const json::exception& e) {
    throw RuntimeError(msg("malformed checkpoint meta in ", dir.string(), ": ", e.what()));
  }
  check_runtime(ckpt.meta.contains("param_order"), msg("checkpoint ", dir.string(), " lacks param_order"));
  for (const auto& name : ckpt.meta.at("param_order")) {
    const std::string n = name.get<std::string>();
    ckpt.params.add(n, read_blob(dir / "params" / (n + ".blob")));
  }
  return ckpt;
}

}  // namespace foley

namespace foley {

void check_params_match(const nn::ParamStore& params, size_t loaded_count, const std::filesystem::path& dir) {
  check_runtime(params.items.size() == loaded_count,
                msg("checkpoint at ", dir.string(), " does not match this architecture: ", loaded_count,
                    " parameters on disk, ", params.items.size(), " expected"));
}

}  // namespace foley
