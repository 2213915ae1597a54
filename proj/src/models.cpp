#include "triforecaster/models.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "triforecaster/errors.hpp"

namespace triforecaster {

namespace {

constexpr std::uint64_t kInitStream = 1;

void check_region(std::size_t region, std::size_t regions) {
  if (region >= regions) {
    throw ContractError("forward: unknown region id " + std::to_string(region) + " (model has " +
                        std::to_string(regions) + " regions)");
  }
}

// [N, H, d] -> [N, H, 1]
Tensor per_step_head(const Linear& head, const Tensor& latent) { return head(latent); }

}  // namespace

// ---------------------------------------------------------------------------
// TriForecaster

TriForecasterModel::TriForecasterModel(const TrainConfig& cfg, const ModelDims& dims, Rng& rng) {
  const std::size_t d = cfg.latent_dim;
  embedding_ = Embedding::init(dims.lookback, dims.horizon, dims.history_channels, dims.future_channels, d, rng);
  const std::size_t region_layers = cfg.ablation == Ablation::kRegionMixer ? 0 : cfg.region_layers;
  region_stack_ = RegionMixerStack::init(region_layers, dims.regions, dims.horizon, d, cfg.expert_blocks, rng);
  for (std::size_t l = 0; l < cfg.ct_layers; ++l) {
    CTSpecializerLayer layer;
    if (cfg.ablation != Ablation::kContextMoE) {
      layer.context = ContextMoE::init(cfg.context_experts, d, cfg.moe_hidden ? cfg.moe_hidden : d, rng);
    }
    if (cfg.ablation != Ablation::kTimeMoE) {
      layer.time = TimeMoE::init(cfg.time_experts, dims.horizon, cfg.moe_hidden ? cfg.moe_hidden : dims.horizon, rng);
    }
    ct_layers_.push_back(std::move(layer));
  }
  for (std::size_t t = 0; t < dims.regions; ++t) heads_.push_back(Linear::init(d, 1, rng));
}

ForwardOutput TriForecasterModel::forward(const Tensor& history, const Tensor& future, std::size_t region,
                                          const ForwardContext& ctx) const {
  check_region(region, heads_.size());
  Tensor x = embedding_(history, future);
  x = region_stack_.forward(x, region, ctx);
  ForwardOutput out;
  for (const auto& layer : ct_layers_) {
    CtOutput step = layer.forward(x, ctx);
    x = step.out;
    out.contexts.push_back(step.context);
  }
  out.prediction = per_step_head(heads_[region], x);
  return out;
}

ParamList TriForecasterModel::parameters() const {
  ParamList out;
  embedding_.collect("embedding", out);
  region_stack_.collect("region_mixer", out);
  for (std::size_t l = 0; l < ct_layers_.size(); ++l) ct_layers_[l].collect("ct" + std::to_string(l), out);
  for (std::size_t t = 0; t < heads_.size(); ++t) heads_[t].collect("head" + std::to_string(t), out);
  return out;
}

// ---------------------------------------------------------------------------
// MTL

MtlBaseline::MtlBaseline(const TrainConfig& cfg, const ModelDims& dims, Rng& rng) {
  const std::size_t d = cfg.latent_dim;
  embedding_ = Embedding::init(dims.lookback, dims.horizon, dims.history_channels, dims.future_channels, d, rng);
  backbone_ = TSMixer::init(cfg.baseline_blocks, dims.horizon, d, rng);
  for (std::size_t t = 0; t < dims.regions; ++t) heads_.push_back(Mlp::init(d, d, 1, rng));
}

ForwardOutput MtlBaseline::forward(const Tensor& history, const Tensor& future, std::size_t region,
                                   const ForwardContext&) const {
  check_region(region, heads_.size());
  return ForwardOutput{heads_[region](backbone_(embedding_(history, future))), {}};
}

ParamList MtlBaseline::parameters() const {
  ParamList out;
  embedding_.collect("embedding", out);
  backbone_.collect("backbone", out);
  for (std::size_t t = 0; t < heads_.size(); ++t) heads_[t].collect("head" + std::to_string(t), out);
  return out;
}

// ---------------------------------------------------------------------------
// STL

StlBaseline::StlBaseline(const TrainConfig& cfg, const ModelDims& dims, Rng& rng) {
  const std::size_t d = cfg.latent_dim;
  for (std::size_t t = 0; t < dims.regions; ++t) {
    Member m;
    m.embedding = Embedding::init(dims.lookback, dims.horizon, dims.history_channels, dims.future_channels, d, rng);
    m.backbone = TSMixer::init(cfg.baseline_blocks, dims.horizon, d, rng);
    m.head = Mlp::init(d, d, 1, rng);
    members_.push_back(std::move(m));
  }
}

ForwardOutput StlBaseline::forward(const Tensor& history, const Tensor& future, std::size_t region,
                                   const ForwardContext&) const {
  check_region(region, members_.size());
  const Member& m = members_[region];
  return ForwardOutput{m.head(m.backbone(m.embedding(history, future))), {}};
}

ParamList StlBaseline::parameters_for_region(std::size_t region) const {
  check_region(region, members_.size());
  ParamList out;
  const std::string prefix = "region" + std::to_string(region);
  const Member& m = members_[region];
  m.embedding.collect(prefix + ".embedding", out);
  m.backbone.collect(prefix + ".backbone", out);
  m.head.collect(prefix + ".head", out);
  return out;
}

ParamList StlBaseline::parameters() const {
  ParamList out;
  for (std::size_t t = 0; t < members_.size(); ++t) {
    ParamList part = parameters_for_region(t);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

// ---------------------------------------------------------------------------

std::unique_ptr<Forecaster> build_model(const TrainConfig& cfg, const ModelDims& dims) {
  cfg.validate();
  if (dims.regions == 0 || dims.lookback == 0 || dims.horizon == 0 || dims.history_channels == 0) {
    throw ConfigError("model: regions, lookback, horizon and history channels must all be positive");
  }
  Rng rng = Rng::stream(cfg.seed, kInitStream);
  switch (cfg.model) {
    case ModelKind::kTriForecaster:
      return std::make_unique<TriForecasterModel>(cfg, dims, rng);
    case ModelKind::kMtl:
      return std::make_unique<MtlBaseline>(cfg, dims, rng);
    case ModelKind::kStl:
      return std::make_unique<StlBaseline>(cfg, dims, rng);
  }
  throw ConfigError("model: unsupported kind");
}

std::size_t param_count(const Forecaster& model) { return param_count(model.parameters()); }

ParamSnapshot snapshot(const ParamList& params) {
  ParamSnapshot snap;
  snap.reserve(params.size());
  for (const auto& p : params) snap.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return snap;
}

void restore(const ParamList& params, const ParamSnapshot& snap) {
  if (snap.size() != params.size()) throw ContractError("restore: snapshot does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto dst = t.mutable_values();
    if (dst.size() != snap[i].size()) throw ContractError("restore: size mismatch for " + params[i].name);
    std::copy(snap[i].begin(), snap[i].end(), dst.begin());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

void put_le64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  os.write(bytes, 8);
}

double get_le64(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& stem, const ParamList& params, const CheckpointMeta& meta) {
  const auto blob_path = with_suffix(stem, ".bin");
  nlohmann::json manifest;
  manifest["format"] = "triforecaster-checkpoint";
  manifest["version"] = 1;
  manifest["config_hash"] = meta.config_hash;
  manifest["seed"] = meta.seed;
  manifest["blob"] = blob_path.filename().string();
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params) {
    entries.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"dtype", "f64"}, {"byte_offset", offset}});
    offset += p.tensor.numel() * sizeof(double);
  }
  manifest["params"] = std::move(entries);
  manifest["total_bytes"] = offset;

  std::ofstream blob(blob_path, std::ios::binary);
  if (!blob) throw DataError("checkpoint: cannot write " + blob_path.string());
  for (const auto& p : params) {
    for (double v : p.tensor.values()) put_le64(blob, v);
  }
  std::ofstream json_out(with_suffix(stem, ".json"));
  if (!json_out) throw DataError("checkpoint: cannot write " + with_suffix(stem, ".json").string());
  json_out << manifest.dump(2) << '\n';
}

CheckpointMeta load_checkpoint(const std::filesystem::path& stem, const ParamList& params) {
  const auto json_path = with_suffix(stem, ".json");
  std::ifstream json_in(json_path);
  if (!json_in) throw DataError("checkpoint: cannot open " + json_path.string());
  nlohmann::json manifest;
  try {
    json_in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: " + json_path.string() + ": " + e.what());
  }
  const auto blob_path = json_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw DataError("checkpoint: cannot open " + blob_path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

  const auto& entries = manifest.at("params");
  if (entries.size() != params.size()) {
    throw DataError("checkpoint: " + std::to_string(entries.size()) + " parameters stored, model has " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    if (name != params[i].name || shape != params[i].tensor.shape() || e.at("dtype") != "f64") {
      throw DataError("checkpoint: entry " + std::to_string(i) + " is " + name + shape_str(shape) +
                      ", model expects " + params[i].name + shape_str(params[i].tensor.shape()));
    }
    const std::size_t offset = e.at("byte_offset").get<std::size_t>();
    Tensor t = params[i].tensor;
    auto dst = t.mutable_values();
    if (offset + dst.size() * 8 > bytes.size()) throw DataError("checkpoint: blob truncated at " + name);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = get_le64(bytes.data() + offset + 8 * k);
  }
  return CheckpointMeta{manifest.at("config_hash").get<std::string>(), manifest.at("seed").get<std::uint64_t>()};
}

}  // namespace triforecaster
