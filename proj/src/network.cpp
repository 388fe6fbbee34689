#include "hsi/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace hsi {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kCheckpointVersion = 1;

// per-element costs used by count_flops, independent of the MAC convention
constexpr int64_t kNormFlopsPerElement = 8;
constexpr int64_t kActFlopsPerElement = 4;
constexpr int64_t kSigmoidFlopsPerElement = 4;

std::string kind_name(BlockKind k) { return k == BlockKind::Efe ? "efe" : "fused_efe"; }

BlockKind kind_from_name(const std::string& s) {
  if (s == "efe") return BlockKind::Efe;
  if (s == "fused_efe") return BlockKind::FusedEfe;
  throw ValidationError("model config: unknown block kind \"" + s + "\"");
}

std::string norm_name(NormKind k) {
  return k == NormKind::LayerNorm ? "layer_norm" : "batch_norm";
}

NormKind norm_from_name(const std::string& s) {
  if (s == "layer_norm") return NormKind::LayerNorm;
  if (s == "batch_norm") return NormKind::BatchNorm;
  throw ValidationError("model config: unknown norm \"" + s + "\"");
}

std::string act_name(Activation a) {
  switch (a) {
    case Activation::Selu: return "selu";
    case Activation::Silu: return "silu";
    case Activation::Gelu: return "gelu";
  }
  return "selu";
}

Activation act_from_name(const std::string& s) {
  if (s == "selu") return Activation::Selu;
  if (s == "silu") return Activation::Silu;
  if (s == "gelu") return Activation::Gelu;
  throw ValidationError("model config: unknown activation \"" + s + "\"");
}

}  // namespace

void ModelConfig::validate() const {
  if (input_bands < 1) throw ValidationError("model config: input_bands must be >= 1");
  if (num_classes < 1) throw ValidationError("model config: num_classes must be >= 1");
  if (stack.empty()) throw ValidationError("model config: stack must not be empty");
  if (!(dropout_p >= 0 && dropout_p < 1))
    throw ValidationError("model config: dropout_p must lie in [0, 1)");
  if (se_reduction < 1) throw ValidationError("model config: se_reduction must be >= 1");
  if (!(norm_eps > 0)) throw ValidationError("model config: norm_eps must be positive");
  if (!(bn_momentum > 0 && bn_momentum <= 1))
    throw ValidationError("model config: bn_momentum must lie in (0, 1]");
  activation.validate();

  bool seen_fused = false;
  int prev_channels = 0;
  for (size_t i = 0; i < stack.size(); ++i) {
    const BlockSpec& b = stack[i];
    if (b.out_channels < 1)
      throw ValidationError("model config: block " + std::to_string(i) +
                            " out_channels must be >= 1");
    if (b.repeats < 1)
      throw ValidationError("model config: block " + std::to_string(i) +
                            " repeats must be >= 1");
    if (b.expansion_ratio < 1)
      throw ValidationError("model config: block " + std::to_string(i) +
                            " expansion_ratio must be >= 1");
    if (b.kind == BlockKind::FusedEfe) {
      seen_fused = true;
      if (b.use_se)
        throw ValidationError("model config: squeeze-excite applies to efe blocks only");
    } else if (seen_fused) {
      throw ValidationError("model config: efe blocks must precede all fused_efe blocks");
    }
    if (i > 0 && b.out_channels > prev_channels)
      throw ValidationError(
          "model config: out_channels must be non-increasing along the stack");
    prev_channels = b.out_channels;
  }
}

std::vector<BlockPlan> plan_blocks(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<BlockPlan> plans;
  for (const BlockSpec& b : cfg.stack)
    for (int r = 0; r < b.repeats; ++r) {
      BlockPlan p;
      p.kind = b.kind;
      p.out_channels = b.out_channels;
      p.expanded_channels = b.expansion_ratio;  // ratio for now, resolved below
      p.se_channels = b.use_se ? 1 : 0;
      plans.push_back(p);
    }

  if (!cfg.inverted_channels) {
    // ablation baseline: same kinds and depth, channel schedule reversed
    std::vector<int> widths;
    for (const BlockPlan& p : plans) widths.push_back(p.out_channels);
    std::reverse(widths.begin(), widths.end());
    for (size_t i = 0; i < plans.size(); ++i) plans[i].out_channels = widths[i];
  }

  int in_ch = plans.front().out_channels;  // stem maps bands to the first width
  for (BlockPlan& p : plans) {
    p.in_channels = in_ch;
    p.expanded_channels = p.in_channels * p.expanded_channels;
    if (p.se_channels) {
      if (p.expanded_channels % cfg.se_reduction != 0)
        throw ValidationError("model config: se_reduction must divide expanded channels");
      p.se_channels = p.expanded_channels / cfg.se_reduction;
    }
    p.residual = p.in_channels == p.out_channels;
    in_ch = p.out_channels;
  }
  return plans;
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig cfg;
  try {
    cfg.input_bands = j.at("input_bands").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    for (const auto& bj : j.at("stack")) {
      BlockSpec b;
      b.kind = kind_from_name(bj.at("kind").get<std::string>());
      b.out_channels = bj.at("out_channels").get<int>();
      if (bj.contains("repeats")) b.repeats = bj.at("repeats").get<int>();
      if (bj.contains("expansion_ratio"))
        b.expansion_ratio = bj.at("expansion_ratio").get<int>();
      if (bj.contains("use_se")) b.use_se = bj.at("use_se").get<bool>();
      cfg.stack.push_back(b);
    }
    if (j.contains("activation")) {
      const auto& aj = j.at("activation");
      cfg.activation.kind = act_from_name(aj.at("kind").get<std::string>());
      if (aj.contains("selu_alpha"))
        cfg.activation.selu_alpha = aj.at("selu_alpha").get<double>();
      if (aj.contains("selu_lambda"))
        cfg.activation.selu_lambda = aj.at("selu_lambda").get<double>();
    }
    if (j.contains("norm")) cfg.norm = norm_from_name(j.at("norm").get<std::string>());
    if (j.contains("dropout_p")) cfg.dropout_p = j.at("dropout_p").get<double>();
    if (j.contains("inverted_channels"))
      cfg.inverted_channels = j.at("inverted_channels").get<bool>();
    if (j.contains("se_reduction")) cfg.se_reduction = j.at("se_reduction").get<int>();
    if (j.contains("norm_eps")) cfg.norm_eps = j.at("norm_eps").get<double>();
    if (j.contains("bn_momentum")) cfg.bn_momentum = j.at("bn_momentum").get<double>();
    if (j.contains("reference_params"))
      cfg.reference_params = j.at("reference_params").get<int64_t>();
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

json ModelConfig::to_json() const {
  json j;
  j["input_bands"] = input_bands;
  j["num_classes"] = num_classes;
  json stack_j = json::array();
  for (const BlockSpec& b : stack) {
    json bj;
    bj["kind"] = kind_name(b.kind);
    bj["out_channels"] = b.out_channels;
    bj["repeats"] = b.repeats;
    bj["expansion_ratio"] = b.expansion_ratio;
    bj["use_se"] = b.use_se;
    stack_j.push_back(bj);
  }
  j["stack"] = stack_j;
  j["activation"] = {{"kind", act_name(activation.kind)},
                     {"selu_alpha", activation.selu_alpha},
                     {"selu_lambda", activation.selu_lambda}};
  j["norm"] = norm_name(norm);
  j["dropout_p"] = dropout_p;
  j["inverted_channels"] = inverted_channels;
  j["se_reduction"] = se_reduction;
  j["norm_eps"] = norm_eps;
  j["bn_momentum"] = bn_momentum;
  if (reference_params > 0) j["reference_params"] = reference_params;
  return j;
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open model config: " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ValidationError("malformed JSON in model config: " + path);
  return ModelConfig::from_json(j);
}

// --- Model ---------------------------------------------------------------

template <typename T>
Model<T>::Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  plans_ = plan_blocks(cfg_);
  Rng base(seed);

  auto add_param = [&](const std::string& name, Shape shape, int64_t fan_in,
                       bool decay_exempt, T const_value, bool random) {
    const int64_t n = numel(shape);
    std::vector<T> vals(static_cast<size_t>(n), const_value);
    if (random) {
      Rng r = base.fork(static_cast<uint64_t>(params_.size()));
      const T std = T(1) / std::sqrt(static_cast<T>(fan_in));
      for (auto& v : vals) v = static_cast<T>(r.next_gaussian()) * std;
    }
    params_.push_back(
        {name, Tensor<T>::from(std::move(shape), std::move(vals), true), decay_exempt});
    return static_cast<int>(params_.size() - 1);
  };
  auto add_conv = [&](const std::string& name, int64_t o, int64_t c, int64_t k) {
    return add_param(name + ".w", {o, c, k, k}, c * k * k, false, T(0), true);
  };
  auto add_bias = [&](const std::string& name, int64_t n) {
    return add_param(name + ".b", {n}, 0, false, T(0), false);
  };

  const int first_width = plans_.front().in_channels;
  stem_w_ = add_conv("stem", first_width, cfg_.input_bands, 1);
  stem_b_ = add_bias("stem", first_width);

  for (size_t i = 0; i < plans_.size(); ++i) {
    const BlockPlan& p = plans_[i];
    const std::string prefix = "block" + std::to_string(i);
    Slots s;
    if (p.kind == BlockKind::Efe) {
      s.conv_w = add_conv(prefix + ".expand", p.expanded_channels, p.in_channels, 1);
      s.conv_b = add_bias(prefix + ".expand", p.expanded_channels);
    } else {
      s.conv_w = add_conv(prefix + ".conv3", p.expanded_channels, p.in_channels, 3);
      s.conv_b = add_bias(prefix + ".conv3", p.expanded_channels);
    }
    s.norm_g = add_param(prefix + ".norm.g", {p.expanded_channels}, 0, true, T(1), false);
    s.norm_b = add_param(prefix + ".norm.b", {p.expanded_channels}, 0, true, T(0), false);
    if (p.kind == BlockKind::Efe) {
      s.dw_w = add_param(prefix + ".dw.w", {p.expanded_channels, 3, 3}, 9, false, T(0), true);
      s.dw_b = add_bias(prefix + ".dw", p.expanded_channels);
      if (p.se_channels > 0) {
        s.se_rw = add_param(prefix + ".se.reduce.w", {p.se_channels, p.expanded_channels},
                            p.expanded_channels, false, T(0), true);
        s.se_rb = add_bias(prefix + ".se.reduce", p.se_channels);
        s.se_ew = add_param(prefix + ".se.expand.w", {p.expanded_channels, p.se_channels},
                            p.se_channels, false, T(0), true);
        s.se_eb = add_bias(prefix + ".se.expand", p.expanded_channels);
      }
    }
    s.proj_w = add_conv(prefix + ".project", p.out_channels, p.expanded_channels, 1);
    s.proj_b = add_bias(prefix + ".project", p.out_channels);
    if (cfg_.norm == NormKind::BatchNorm) {
      s.bn_state = static_cast<int>(bn_states_.size());
      bn_states_.emplace_back();
    }
    slots_.push_back(s);
  }

  const int last_width = plans_.back().out_channels;
  head_w_ = add_conv("head", cfg_.num_classes, last_width, 1);
  head_b_ = add_bias("head", cfg_.num_classes);
}

template <typename T>
NamedParam<T>& Model<T>::param(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw RuntimeError("model: no parameter named \"" + name + "\"");
}

template <typename T>
Tensor<T> Model<T>::block_forward(size_t block_index, const Tensor<T>& x, bool training) {
  if (block_index >= plans_.size())
    throw ValidationError("model: block index out of range");
  const BlockPlan& plan = plans_[block_index];
  const Slots& s = slots_[block_index];
  if (x.shape().size() != 4 || x.dim(1) != plan.in_channels)
    throw ValidationError("model: block input must be N x " +
                          std::to_string(plan.in_channels) + " x h x w");

  auto norm = [&](const Tensor<T>& t) {
    if (cfg_.norm == NormKind::LayerNorm)
      return layer_norm(t, p(s.norm_g), p(s.norm_b), cfg_.norm_eps);
    return batch_norm(t, p(s.norm_g), p(s.norm_b), bn_states_[s.bn_state], training,
                      cfg_.bn_momentum, cfg_.norm_eps);
  };

  Tensor<T> t;
  if (plan.kind == BlockKind::Efe) {
    t = conv2d(x, p(s.conv_w), p(s.conv_b), 1, 0);
    t = norm(t);
    t = depthwise_conv2d(t, p(s.dw_w), p(s.dw_b), 1, 1);
    t = activate(t, cfg_.activation);
    if (plan.se_channels > 0)
      t = se_module(t, p(s.se_rw), p(s.se_rb), p(s.se_ew), p(s.se_eb), cfg_.activation);
    t = conv2d(t, p(s.proj_w), p(s.proj_b), 1, 0);
  } else {
    t = conv2d(x, p(s.conv_w), p(s.conv_b), 1, 1);
    t = norm(t);
    t = conv2d(t, p(s.proj_w), p(s.proj_b), 1, 0);
    t = activate(t, cfg_.activation);
  }
  return plan.residual ? add(x, t) : t;
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& x, bool training, Rng& rng) {
  if (!x.defined() || x.shape().size() != 4)
    throw ValidationError("model: input must be N x B x h x w");
  if (x.dim(1) != cfg_.input_bands)
    throw ValidationError("model: input has " + std::to_string(x.dim(1)) +
                          " bands, config expects " + std::to_string(cfg_.input_bands));
  ++forward_calls_;
  forward_samples_ += x.dim(0);

  Tensor<T> h = conv2d(x, p(stem_w_), p(stem_b_), 1, 0);
  for (size_t i = 0; i < plans_.size(); ++i) h = block_forward(i, h, training);
  h = dropout(h, cfg_.dropout_p, rng, training);
  return conv2d(h, p(head_w_), p(head_b_), 1, 0);
}

template <typename T>
int64_t Model<T>::count_params() const {
  int64_t total = 0;
  for (const auto& pr : params_) total += pr.value.size();
  return total;
}

template <typename T>
FlopReport Model<T>::count_flops(int h, int w, int mac_per_op) const {
  if (h < 1 || w < 1) throw ValidationError("count_flops: h, w must be >= 1");
  if (mac_per_op != 1 && mac_per_op != 2)
    throw ValidationError("count_flops: mac_per_op must be 1 or 2");
  const int64_t hw = static_cast<int64_t>(h) * w;
  const int64_t mac = mac_per_op;
  FlopReport rep;
  auto push = [&](const std::string& name, int64_t flops) {
    rep.items.push_back({name, flops});
    rep.total += flops;
  };

  const int first_width = plans_.front().in_channels;
  push("stem", mac * hw * cfg_.input_bands * first_width);
  for (size_t i = 0; i < plans_.size(); ++i) {
    const BlockPlan& p = plans_[i];
    const int64_t cin = p.in_channels, cexp = p.expanded_channels, cout = p.out_channels;
    int64_t f = 0;
    if (p.kind == BlockKind::Efe) {
      f += mac * hw * cin * cexp;            // 1x1 expand
      f += kNormFlopsPerElement * hw * cexp;
      f += mac * hw * 9 * cexp;              // 3x3 depthwise
      f += kActFlopsPerElement * hw * cexp;
      if (p.se_channels > 0) {
        const int64_t cr = p.se_channels;
        f += hw * cexp;                      // global average pool
        f += mac * cexp * cr + kActFlopsPerElement * cr;
        f += mac * cr * cexp + kSigmoidFlopsPerElement * cexp;
        f += hw * cexp;                      // channel rescale
      }
      f += mac * hw * cexp * cout;           // 1x1 project
    } else {
      f += mac * hw * 9 * cin * cexp;        // 3x3 regular
      f += kNormFlopsPerElement * hw * cexp;
      f += mac * hw * cexp * cout;           // 1x1 project
      f += kActFlopsPerElement * hw * cout;
    }
    if (p.residual) f += hw * cout;
    push("block" + std::to_string(i) + "." + kind_name(p.kind), f);
  }
  const int last_width = plans_.back().out_channels;
  push("head", mac * hw * last_width * cfg_.num_classes);
  return rep;
}

// --- checkpoint ----------------------------------------------------------

template <typename T>
void Model<T>::save_checkpoint(const std::string& prefix) const {
  const fs::path manifest_path = prefix + ".json";
  const fs::path payload_path = prefix + ".bin";

  std::vector<float> payload;
  json tensors = json::array();
  for (const auto& pr : params_) {
    json t;
    t["name"] = pr.name;
    t["shape"] = pr.value.shape();
    t["offset"] = payload.size();
    t["count"] = pr.value.size();
    tensors.push_back(t);
    for (T v : pr.value.values()) payload.push_back(static_cast<float>(v));
  }
  json bn = json::array();
  for (size_t i = 0; i < bn_states_.size(); ++i) {
    const auto& st = bn_states_[i];
    json b;
    b["index"] = i;
    b["initialized"] = st.initialized;
    b["count"] = st.mean.size();
    b["mean_offset"] = payload.size();
    for (T v : st.mean) payload.push_back(static_cast<float>(v));
    b["var_offset"] = payload.size();
    for (T v : st.var) payload.push_back(static_cast<float>(v));
    bn.push_back(b);
  }

  json manifest;
  manifest["format"] = "hsicls-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["payload"] = payload_path.filename().string();
  manifest["config"] = cfg_.to_json();
  manifest["tensors"] = tensors;
  manifest["bn_states"] = bn;

  if (manifest_path.has_parent_path()) fs::create_directories(manifest_path.parent_path());
  std::ofstream mf(manifest_path);
  if (!mf) throw RuntimeError("cannot write checkpoint manifest: " + manifest_path.string());
  mf << manifest.dump(2) << "\n";
  std::ofstream pf(payload_path, std::ios::binary);
  if (!pf) throw RuntimeError("cannot write checkpoint payload: " + payload_path.string());
  pf.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!pf) throw RuntimeError("short write to checkpoint payload");
}

template <typename T>
Model<T> Model<T>::load_checkpoint(const std::string& prefix) {
  const fs::path manifest_path = prefix + ".json";
  std::ifstream mf(manifest_path);
  if (!mf) throw ValidationError("cannot open checkpoint manifest: " + manifest_path.string());
  json manifest = json::parse(mf, nullptr, false);
  if (manifest.is_discarded())
    throw ValidationError("malformed checkpoint manifest: " + manifest_path.string());

  try {
    if (manifest.at("format").get<std::string>() != "hsicls-checkpoint")
      throw ValidationError("not a checkpoint manifest: " + manifest_path.string());
    if (manifest.at("version").get<int>() != kCheckpointVersion)
      throw ValidationError("unsupported checkpoint version " +
                            manifest.at("version").dump());
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(std::string("bad checkpoint manifest: ") + e.what());
  }

  Model<T> model(ModelConfig::from_json(manifest.at("config")), 0);

  const fs::path payload_path =
      manifest_path.parent_path() / manifest.at("payload").get<std::string>();
  std::ifstream pf(payload_path, std::ios::binary);
  if (!pf) throw ValidationError("cannot open checkpoint payload: " + payload_path.string());
  std::vector<float> payload((fs::file_size(payload_path) + sizeof(float) - 1) /
                             sizeof(float));
  pf.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!pf) throw ValidationError("short read from checkpoint payload");

  auto copy_range = [&](size_t offset, size_t count, std::span<T> dst) {
    if (offset + count > payload.size())
      throw ValidationError("checkpoint payload truncated");
    for (size_t i = 0; i < count; ++i) dst[i] = static_cast<T>(payload[offset + i]);
  };

  try {
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != model.params_.size())
      throw ValidationError("checkpoint tensor count does not match config");
    for (size_t i = 0; i < model.params_.size(); ++i) {
      auto& pr = model.params_[i];
      const auto& t = tensors[i];
      if (t.at("name").get<std::string>() != pr.name)
        throw ValidationError("checkpoint tensor \"" + t.at("name").get<std::string>() +
                              "\" does not match expected \"" + pr.name + "\"");
      if (t.at("shape").get<Shape>() != pr.value.shape())
        throw ValidationError("checkpoint tensor \"" + pr.name + "\" has wrong shape");
      copy_range(t.at("offset").get<size_t>(), t.at("count").get<size_t>(),
                 pr.value.values_mut());
    }
    const auto& bn = manifest.at("bn_states");
    if (bn.size() != model.bn_states_.size())
      throw ValidationError("checkpoint batch-norm state count does not match config");
    for (size_t i = 0; i < model.bn_states_.size(); ++i) {
      auto& st = model.bn_states_[i];
      const auto& b = bn[i];
      st.initialized = b.at("initialized").get<bool>();
      const size_t count = b.at("count").get<size_t>();
      st.mean.assign(count, T(0));
      st.var.assign(count, T(0));
      copy_range(b.at("mean_offset").get<size_t>(), count, st.mean);
      copy_range(b.at("var_offset").get<size_t>(), count, st.var);
    }
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(std::string("bad checkpoint manifest: ") + e.what());
  }
  return model;
}

template class Model<float>;
template class Model<double>;

}  // namespace hsi
