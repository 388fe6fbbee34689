#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "hsi/network.hpp"

namespace fs = std::filesystem;
using namespace hsi;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.input_bands = 8;
  cfg.num_classes = 3;
  cfg.stack = {{BlockKind::Efe, 8, 1, 2, false}, {BlockKind::FusedEfe, 4, 1, 2, false}};
  return cfg;
}

// Closed-form parameter counts for the fixed block recipes, written
// independently of the model construction code.
int64_t efe_params(int64_t cin, int64_t cout, int64_t ratio, bool se, int64_t se_red) {
  const int64_t e = cin * ratio;
  int64_t total = cin * e + e;      // 1x1 expand
  total += 2 * e;                   // norm affine
  total += 9 * e + e;               // 3x3 depthwise
  if (se) {
    const int64_t r = e / se_red;
    total += e * r + r + r * e + e;
  }
  total += e * cout + cout;         // 1x1 project
  return total;
}

int64_t fused_params(int64_t cin, int64_t cout, int64_t ratio) {
  const int64_t e = cin * ratio;
  return 9 * cin * e + e + 2 * e + e * cout + cout;
}

int64_t closed_form_params(const ModelConfig& cfg) {
  const auto plans = plan_blocks(cfg);
  int64_t total = cfg.input_bands * plans.front().in_channels + plans.front().in_channels;
  for (const auto& p : plans)
    total += p.kind == BlockKind::Efe
                 ? efe_params(p.in_channels, p.out_channels,
                              p.expanded_channels / p.in_channels, p.se_channels > 0,
                              cfg.se_reduction)
                 : fused_params(p.in_channels, p.out_channels,
                                p.expanded_channels / p.in_channels);
  total += plans.back().out_channels * cfg.num_classes + cfg.num_classes;
  return total;
}

int count_op(const Tensor<float>& root, const char* op_name) {
  std::set<const detail::Node<float>*> seen;
  std::vector<const detail::Node<float>*> stack{root.node()};
  int hits = 0;
  while (!stack.empty()) {
    const auto* n = stack.back();
    stack.pop_back();
    if (!n || !seen.insert(n).second) continue;
    if (std::string(n->op) == op_name) ++hits;
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return hits;
}

Tensor<float> random_input(int bands, int h, int w, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> vals(static_cast<size_t>(bands) * h * w);
  for (auto& v : vals) v = static_cast<float>(rng.next_gaussian());
  return Tensor<float>::from({1, bands, h, w}, std::move(vals));
}

}  // namespace

TEST_CASE("plan_blocks expands repeats and chains channels") {
  ModelConfig cfg;
  cfg.input_bands = 20;
  cfg.num_classes = 4;
  cfg.stack = {{BlockKind::Efe, 32, 2, 2, true},
               {BlockKind::Efe, 16, 1, 2, false},
               {BlockKind::FusedEfe, 16, 1, 3, false}};
  const auto plans = plan_blocks(cfg);
  REQUIRE(plans.size() == 4);

  CHECK(plans[0].in_channels == 32);  // stem feeds the first width
  CHECK(plans[0].out_channels == 32);
  CHECK(plans[0].residual);
  CHECK(plans[0].expanded_channels == 64);
  CHECK(plans[0].se_channels == 16);

  CHECK(plans[1].in_channels == 32);
  CHECK(plans[1].out_channels == 32);
  CHECK(plans[1].residual);

  CHECK(plans[2].in_channels == 32);
  CHECK(plans[2].out_channels == 16);
  CHECK_FALSE(plans[2].residual);
  CHECK(plans[2].se_channels == 0);

  CHECK(plans[3].kind == BlockKind::FusedEfe);
  CHECK(plans[3].in_channels == 16);
  CHECK(plans[3].out_channels == 16);
  CHECK(plans[3].expanded_channels == 48);
  CHECK(plans[3].residual);
}

TEST_CASE("channel direction flag only reverses the width schedule") {
  ModelConfig cfg;
  cfg.input_bands = 10;
  cfg.num_classes = 2;
  cfg.stack = {{BlockKind::Efe, 24, 1, 2, false},
               {BlockKind::Efe, 16, 1, 2, false},
               {BlockKind::FusedEfe, 8, 1, 2, false}};
  const auto fwd = plan_blocks(cfg);
  cfg.inverted_channels = false;
  const auto rev = plan_blocks(cfg);

  REQUIRE(fwd.size() == rev.size());
  std::vector<int> fwd_out, rev_out;
  for (const auto& p : fwd) fwd_out.push_back(p.out_channels);
  for (const auto& p : rev) rev_out.push_back(p.out_channels);
  std::vector<int> flipped(fwd_out.rbegin(), fwd_out.rend());
  CHECK(rev_out == flipped);
  for (size_t i = 0; i < fwd.size(); ++i) CHECK(fwd[i].kind == rev[i].kind);
}

TEST_CASE("config validation rejects malformed stacks") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());

  ModelConfig fused_first = tiny_config();
  std::swap(fused_first.stack[0], fused_first.stack[1]);
  CHECK_THROWS_AS(fused_first.validate(), ValidationError);

  ModelConfig se_on_fused = tiny_config();
  se_on_fused.stack[1].use_se = true;
  CHECK_THROWS_AS(se_on_fused.validate(), ValidationError);

  ModelConfig widening = tiny_config();
  widening.stack[1].out_channels = 32;
  CHECK_THROWS_AS(widening.validate(), ValidationError);

  ModelConfig bad_dropout = tiny_config();
  bad_dropout.dropout_p = 1.0;
  CHECK_THROWS_AS(bad_dropout.validate(), ValidationError);

  ModelConfig no_stack = tiny_config();
  no_stack.stack.clear();
  CHECK_THROWS_AS(no_stack.validate(), ValidationError);

  ModelConfig bad_se = tiny_config();
  bad_se.stack[0].use_se = true;
  bad_se.se_reduction = 5;  // expanded 16 not divisible by 5
  CHECK_THROWS_AS((void)plan_blocks(bad_se), ValidationError);
}

TEST_CASE("config JSON round trip preserves every field") {
  ModelConfig cfg = tiny_config();
  cfg.stack[0].use_se = true;
  cfg.se_reduction = 4;
  cfg.activation.kind = Activation::Gelu;
  cfg.norm = NormKind::BatchNorm;
  cfg.dropout_p = 0.35;
  cfg.inverted_channels = false;
  cfg.reference_params = 12345;
  const ModelConfig back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.input_bands == cfg.input_bands);
  CHECK(back.num_classes == cfg.num_classes);
  CHECK(back.stack.size() == cfg.stack.size());
  CHECK(back.stack[0].use_se);
  CHECK(back.stack[1].kind == BlockKind::FusedEfe);
  CHECK(back.activation.kind == Activation::Gelu);
  CHECK(back.norm == NormKind::BatchNorm);
  CHECK(back.dropout_p == cfg.dropout_p);
  CHECK_FALSE(back.inverted_channels);
  CHECK(back.reference_params == 12345);
}

TEST_CASE("an 8-to-8 expansion-2 block costs exactly 472 parameters") {
  CHECK(efe_params(8, 8, 2, false, 4) == 472);

  // the model agrees: adding one more such block raises the count by 472
  ModelConfig one = tiny_config();
  ModelConfig two = tiny_config();
  two.stack.insert(two.stack.begin() + 1, BlockSpec{BlockKind::Efe, 8, 1, 2, false});
  Model<float> m1(one, 0), m2(two, 0);
  CHECK(m2.count_params() - m1.count_params() == 472);
}

TEST_CASE("count_params matches the closed form and the tensor sum") {
  std::vector<ModelConfig> cases;
  cases.push_back(tiny_config());

  ModelConfig se_case = tiny_config();
  se_case.stack[0].use_se = true;
  cases.push_back(se_case);

  ModelConfig deep;
  deep.input_bands = 30;
  deep.num_classes = 6;
  deep.stack = {{BlockKind::Efe, 48, 2, 2, false},
                {BlockKind::Efe, 24, 1, 2, true},
                {BlockKind::FusedEfe, 24, 1, 2, false},
                {BlockKind::FusedEfe, 12, 1, 2, false}};
  cases.push_back(deep);

  for (const auto& cfg : cases) {
    Model<float> model(cfg, 7);
    CHECK(model.count_params() == closed_form_params(cfg));
    int64_t by_tensor = 0;
    for (const auto& p : model.params()) by_tensor += p.value.size();
    CHECK(model.count_params() == by_tensor);
  }
}

TEST_CASE("flop report composes stem, blocks and head") {
  ModelConfig cfg = tiny_config();
  Model<float> model(cfg, 0);
  const int h = 5, w = 7;
  const int64_t hw = static_cast<int64_t>(h) * w;

  const FlopReport rep = model.count_flops(h, w, 2);
  REQUIRE(rep.items.size() == 4);  // stem, block0.efe, block1.fused_efe, head
  CHECK(rep.items[0].name == "stem");
  CHECK(rep.items[1].name == "block0.efe");
  CHECK(rep.items[2].name == "block1.fused_efe");
  CHECK(rep.items[3].name == "head");

  CHECK(rep.items[0].flops == 2 * hw * 8 * 8);
  // efe 8->8, expanded 16: expand + norm + dw + act + project + residual
  const int64_t efe = 2 * hw * 8 * 16 + 8 * hw * 16 + 2 * hw * 9 * 16 +
                      4 * hw * 16 + 2 * hw * 16 * 8 + hw * 8;
  CHECK(rep.items[1].flops == efe);
  // fused 8->4, expanded 16: 3x3 conv + norm + project + act, no residual
  const int64_t fused = 2 * hw * 9 * 8 * 16 + 8 * hw * 16 + 2 * hw * 16 * 4 +
                       4 * hw * 4;
  CHECK(rep.items[2].flops == fused);
  CHECK(rep.items[3].flops == 2 * hw * 4 * 3);
  CHECK(rep.total == rep.items[0].flops + rep.items[1].flops + rep.items[2].flops +
                         rep.items[3].flops);

  // halving the MAC convention halves exactly the conv terms
  const FlopReport one = model.count_flops(h, w, 1);
  CHECK(one.items[0].flops == rep.items[0].flops / 2);
  CHECK(one.total < rep.total);
}

TEST_CASE("spatial dims are preserved through the whole model") {
  ModelConfig cfg = tiny_config();
  Model<float> model(cfg, 3);
  Rng rng(0);
  for (int hw : {4, 6, 9}) {
    auto x = random_input(8, hw, hw, static_cast<uint64_t>(hw));
    auto y = model.forward(x, false, rng);
    REQUIRE(y.shape() == Shape{1, 3, hw, hw});
  }
  // non-square as well
  auto y = model.forward(random_input(8, 4, 9, 5), false, rng);
  CHECK(y.shape() == Shape{1, 3, 4, 9});
}

TEST_CASE("residual adds appear exactly where channels match") {
  ModelConfig cfg;
  cfg.input_bands = 6;
  cfg.num_classes = 2;
  cfg.stack = {{BlockKind::Efe, 12, 2, 2, false},     // 12->12, 12->12: residual x2
               {BlockKind::Efe, 8, 1, 2, false},      // 12->8: none
               {BlockKind::FusedEfe, 8, 1, 2, false}};  // 8->8: residual
  Model<float> model(cfg, 1);
  int expected = 0;
  for (const auto& p : model.plans()) expected += p.residual ? 1 : 0;
  REQUIRE(expected == 3);

  Rng rng(0);
  auto y = model.forward(random_input(6, 5, 5, 2), false, rng);
  CHECK(count_op(y, "add") == expected);
}

TEST_CASE("fused block is not the composition of expand and depthwise") {
  // Give one EFE and one fused block matched weights: the fused 3x3 kernel is
  // the exact composition K[o,c] = dw[o] * expand[o,c], all biases zero, the
  // projection shared. The surviving difference is where norm and activation
  // sit, so outputs must still differ.
  ModelConfig efe_cfg;
  efe_cfg.input_bands = 4;
  efe_cfg.num_classes = 2;
  efe_cfg.stack = {{BlockKind::Efe, 4, 1, 2, false}};
  ModelConfig fused_cfg = efe_cfg;
  fused_cfg.stack[0].kind = BlockKind::FusedEfe;

  Model<float> efe(efe_cfg, 11);
  Model<float> fused(fused_cfg, 11);

  auto& ew = efe.param("block0.expand.w").value;   // 8x4x1x1
  auto& dw = efe.param("block0.dw.w").value;       // 8x3x3
  auto& kw = fused.param("block0.conv3.w").value;  // 8x4x3x3
  for (int o = 0; o < 8; ++o)
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 9; ++i)
        kw.values_mut()[(o * 4 + c) * 9 + i] =
            dw.values()[o * 9 + i] * ew.values()[o * 4 + c];
  for (const char* name : {"block0.expand.b", "block0.dw.b"})
    for (auto& v : efe.param(name).value.values_mut()) v = 0.0f;
  for (auto& v : fused.param("block0.conv3.b").value.values_mut()) v = 0.0f;
  // share projection and norm affine
  auto copy_param = [&](const char* name) {
    auto src = efe.param(name).value.values();
    auto dst = fused.param(name).value.values_mut();
    std::copy(src.begin(), src.end(), dst.begin());
  };
  copy_param("block0.project.w");
  copy_param("block0.project.b");
  copy_param("block0.norm.g");
  copy_param("block0.norm.b");

  auto x = random_input(4, 6, 6, 9);
  auto ye = efe.block_forward(0, x, false);
  auto yf = fused.block_forward(0, x, false);
  REQUIRE(ye.shape() == yf.shape());
  double max_diff = 0;
  for (int64_t i = 0; i < ye.size(); ++i)
    max_diff = std::max(max_diff,
                        std::abs(static_cast<double>(ye.values()[i] - yf.values()[i])));
  CHECK(max_diff > 1e-3);
}

TEST_CASE("squeeze-excite changes the block output") {
  ModelConfig plain = tiny_config();
  ModelConfig with_se = tiny_config();
  with_se.stack[0].use_se = true;
  Model<float> a(plain, 5);
  Model<float> b(with_se, 5);
  // align the shared parameters; SE weights stay as initialized
  for (auto& p : a.params()) {
    auto src = p.value.values();
    auto dst = b.param(p.name).value.values_mut();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  auto x = random_input(8, 5, 5, 3);
  auto ya = a.block_forward(0, x, false);
  auto yb = b.block_forward(0, x, false);
  double max_diff = 0;
  for (int64_t i = 0; i < ya.size(); ++i)
    max_diff = std::max(max_diff,
                        std::abs(static_cast<double>(ya.values()[i] - yb.values()[i])));
  CHECK(max_diff > 1e-4);
}

TEST_CASE("model init is seed-deterministic") {
  ModelConfig cfg = tiny_config();
  Model<float> a(cfg, 42), b(cfg, 42), c(cfg, 43);
  bool all_equal = true, any_diff = false;
  for (size_t i = 0; i < a.params().size(); ++i) {
    const auto &va = a.params()[i].value.values(), &vb = b.params()[i].value.values();
    const auto& vc = c.params()[i].value.values();
    for (size_t j = 0; j < va.size(); ++j) {
      if (va[j] != vb[j]) all_equal = false;
      if (va[j] != vc[j]) any_diff = true;
    }
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("norm affine parameters are the only decay-exempt ones") {
  ModelConfig cfg = tiny_config();
  cfg.stack[0].use_se = true;
  Model<float> model(cfg, 0);
  for (const auto& p : model.params()) {
    const bool is_norm = p.name.find(".norm.") != std::string::npos;
    CHECK(p.decay_exempt == is_norm);
  }
}

TEST_CASE("forward validates the input band count") {
  Model<float> model(tiny_config(), 0);
  Rng rng(0);
  auto bad = random_input(7, 4, 4, 1);
  CHECK_THROWS_AS((void)model.forward(bad, false, rng), ValidationError);
}

TEST_CASE("dropout only acts in training mode") {
  ModelConfig cfg = tiny_config();
  cfg.dropout_p = 0.5;
  Model<float> model(cfg, 2);
  auto x = random_input(8, 6, 6, 4);
  Rng r1(9), r2(9), r3(10);
  auto e1 = model.forward(x, false, r1);
  auto e2 = model.forward(x, false, r2);
  CHECK(std::vector<float>(e1.values().begin(), e1.values().end()) ==
        std::vector<float>(e2.values().begin(), e2.values().end()));

  Rng t1(9), t2(9);
  auto a = model.forward(x, true, t1);
  auto b = model.forward(x, true, t2);
  CHECK(std::vector<float>(a.values().begin(), a.values().end()) ==
        std::vector<float>(b.values().begin(), b.values().end()));
  Rng t3(10);
  auto c = model.forward(x, true, t3);
  CHECK(std::vector<float>(a.values().begin(), a.values().end()) !=
        std::vector<float>(c.values().begin(), c.values().end()));
}

TEST_CASE("forward counters track calls and samples") {
  Model<float> model(tiny_config(), 0);
  Rng rng(0);
  CHECK(model.forward_calls() == 0);
  (void)model.forward(random_input(8, 4, 4, 1), false, rng);
  Rng rng2(0);
  std::vector<float> two(static_cast<size_t>(2) * 8 * 4 * 4, 0.1f);
  (void)model.forward(Tensor<float>::from({2, 8, 4, 4}, std::move(two)), false, rng2);
  CHECK(model.forward_calls() == 2);
  CHECK(model.forward_samples() == 3);
  model.reset_forward_counters();
  CHECK(model.forward_calls() == 0);
}

TEST_CASE("checkpoint round trip restores parameters and behaviour") {
  const fs::path dir = fs::temp_directory_path() / "hsicls_ckpt_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  ModelConfig cfg = tiny_config();
  cfg.norm = NormKind::BatchNorm;
  Model<float> model(cfg, 77);
  // initialize BN running stats with one training pass
  Rng rng(1);
  (void)model.forward(random_input(8, 6, 6, 2), true, rng);

  const std::string prefix = (dir / "model.ckpt").string();
  model.save_checkpoint(prefix);
  Model<float> back = Model<float>::load_checkpoint(prefix);

  REQUIRE(back.params().size() == model.params().size());
  for (size_t i = 0; i < model.params().size(); ++i) {
    CHECK(back.params()[i].name == model.params()[i].name);
    const auto &va = model.params()[i].value.values(),
               &vb = back.params()[i].value.values();
    REQUIRE(va.size() == vb.size());
    for (size_t j = 0; j < va.size(); ++j) REQUIRE(va[j] == vb[j]);
  }

  auto x = random_input(8, 5, 5, 6);
  Rng ra(0), rb(0);
  auto ya = model.forward(x, false, ra);
  auto yb = back.forward(x, false, rb);
  for (int64_t i = 0; i < ya.size(); ++i) REQUIRE(ya.values()[i] == yb.values()[i]);

  // truncated payload must be rejected
  fs::resize_file(prefix + ".bin", 16);
  CHECK_THROWS_AS((void)Model<float>::load_checkpoint(prefix), ValidationError);
  fs::remove_all(dir);
}

TEST_CASE("batch-norm model refuses eval before any training pass") {
  ModelConfig cfg = tiny_config();
  cfg.norm = NormKind::BatchNorm;
  Model<float> model(cfg, 0);
  Rng rng(0);
  auto x = random_input(8, 4, 4, 1);
  CHECK_THROWS_AS((void)model.forward(x, false, rng), RuntimeError);
  CHECK_NOTHROW((void)model.forward(x, true, rng));
  CHECK_NOTHROW((void)model.forward(x, false, rng));
}
