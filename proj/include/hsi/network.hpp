#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hsi/tensor.hpp"

namespace hsi {

enum class BlockKind { Efe, FusedEfe };
enum class NormKind { LayerNorm, BatchNorm };

struct BlockSpec {
  BlockKind kind = BlockKind::Efe;
  int out_channels = 0;
  int repeats = 1;
  int expansion_ratio = 2;
  bool use_se = false;
};

/// Declarative network description. Widths are written largest-first; with
/// inverted_channels=false the derived per-block schedule is reversed while
/// block kinds stay in place, so only the channel schedule changes.
struct ModelConfig {
  int input_bands = 0;
  int num_classes = 0;
  std::vector<BlockSpec> stack;
  ActivationSpec activation;
  NormKind norm = NormKind::LayerNorm;
  double dropout_p = 0.2;
  bool inverted_channels = true;
  int se_reduction = 4;
  double norm_eps = 1e-5;
  double bn_momentum = 0.1;
  int64_t reference_params = 0;  // optional published figure for cost reports

  void validate() const;
  static ModelConfig from_json(const nlohmann::ordered_json& j);
  nlohmann::ordered_json to_json() const;
};

ModelConfig load_model_config(const std::string& path);

/// One entry per materialized block after expanding repeats and applying the
/// channel-schedule direction.
struct BlockPlan {
  BlockKind kind;
  int in_channels = 0;
  int out_channels = 0;
  int expanded_channels = 0;
  int se_channels = 0;  // 0 when the block has no squeeze-excite
  bool residual = false;
};

std::vector<BlockPlan> plan_blocks(const ModelConfig& cfg);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
  bool decay_exempt = false;  // norm gains and biases only
};

struct FlopItem {
  std::string name;
  int64_t flops = 0;
};

struct FlopReport {
  int64_t total = 0;
  std::vector<FlopItem> items;
};

template <typename T>
class Model {
public:
  Model(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<BlockPlan>& plans() const { return plans_; }

  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  NamedParam<T>& param(const std::string& name);

  /// N x B x h x w -> N x K x h x w logits. `rng` feeds dropout and is only
  /// consumed in training mode.
  Tensor<T> forward(const Tensor<T>& x, bool training, Rng& rng);

  /// Single block, exposed for block-level tests. Index into plans().
  Tensor<T> block_forward(size_t block_index, const Tensor<T>& x, bool training);

  int64_t forward_calls() const { return forward_calls_; }
  int64_t forward_samples() const { return forward_samples_; }
  void reset_forward_counters() { forward_calls_ = forward_samples_ = 0; }

  int64_t count_params() const;
  FlopReport count_flops(int h, int w, int mac_per_op = 2) const;

  /// Writes <prefix>.json (manifest) and <prefix>.bin (f32le payload,
  /// includes batch-norm running stats).
  void save_checkpoint(const std::string& prefix) const;
  static Model load_checkpoint(const std::string& prefix);

  std::vector<BatchNormState<T>>& bn_states() { return bn_states_; }

private:
  struct Slots {
    int conv_w = -1, conv_b = -1;  // 1x1 expand (efe) or 3x3 regular (fused)
    int norm_g = -1, norm_b = -1;
    int dw_w = -1, dw_b = -1;
    int se_rw = -1, se_rb = -1, se_ew = -1, se_eb = -1;
    int proj_w = -1, proj_b = -1;
    int bn_state = -1;
  };

  Tensor<T>& p(int idx) { return params_[static_cast<size_t>(idx)].value; }

  ModelConfig cfg_;
  std::vector<BlockPlan> plans_;
  std::vector<NamedParam<T>> params_;
  std::vector<Slots> slots_;
  std::vector<BatchNormState<T>> bn_states_;
  int stem_w_ = -1, stem_b_ = -1, head_w_ = -1, head_b_ = -1;
  int64_t forward_calls_ = 0;
  int64_t forward_samples_ = 0;
};

}  // namespace hsi
