#include <doctest.h>

#include <algorithm>

#include "bllm/autograd.hpp"
#include "bllm/checkpoint.hpp"
#include "bllm/error.hpp"
#include "bllm/model.hpp"
#include "bllm/rng.hpp"
#include "toy.hpp"

using namespace bllm;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

std::size_t count(const std::vector<std::size_t>& v, std::size_t x) {
  return static_cast<std::size_t>(std::count(v.begin(), v.end(), x));
}

}  // namespace

TEST_CASE("config invariants") {
  ModelConfig c;
  CHECK(c.violations().empty());
  CHECK(c.patches() == 196);
  CHECK(c.grouped_tokens() == 49);
  c.patch = 64;  // 49 patches
  c.lora_rank = 0;
  c.d = 130;  // not a multiple of 4 heads
  const auto v = c.violations();
  CHECK(v.size() >= 3);
  CHECK(std::find(v.begin(), v.end(), "model.lora_rank must be ≥ 1") != v.end());
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"lora_rank": -2})"), ValidationError);

  ModelConfig d;
  d.d = 64;
  d.seed = 99;
  CHECK(ModelConfig::from_json(d.to_json()) == d);
  CHECK_THROWS_AS(ModelConfig::from_json(R"({"d": 64, "colour": 1})"), ValidationError);
}

TEST_CASE("shape laws across the config matrix") {
  const Vocabulary vocab = toy::small_vocab();
  const BevImage img = toy::noise_image(1);
  for (std::size_t patch : {16u, 32u, 56u}) {
    for (std::size_t d_bev : {8u, 16u}) {
      for (std::size_t d : {16u, 32u}) {
        ModelConfig c = toy::tiny_config(vocab.size());
        c.patch = patch;
        c.d_bev = d_bev;
        c.d = d;
        c.max_seq = c.grouped_tokens() + 32;
        MultimodalModel m(c, vocab);
        const VisualTokens p = patch_embed(m, img);
        const std::size_t n = (448 / patch) * (448 / patch);
        CHECK(p.z.rows() == n);
        CHECK(p.z.cols() == d_bev);
        const VisualTokens e = encode(m, p);
        CHECK(e.z.rows() == n);
        CHECK(e.z.cols() == d_bev);
        const VisualTokens g = concat4(e);
        CHECK(g.z.rows() == n / 4);
        CHECK(g.z.cols() == 4 * d_bev);
        const VisualTokens pr = project(g, Projection{m.parameter("projector.weight").value,
                                                      m.parameter("projector.bias").value});
        CHECK(pr.z.rows() == n / 4);
        CHECK(pr.z.cols() == d);
      }
    }
  }
}

TEST_CASE("patch embedding") {
  const Vocabulary vocab = toy::small_vocab();
  MultimodalModel m(toy::tiny_config(vocab.size()), vocab);
  CHECK(patch_embed(m, BevImage(448, 448)).z.rows() == 196);
  CHECK_THROWS_AS(patch_embed(m, BevImage(447, 448)), ShapeError);

  // zero input and zero bias leave only the position vectors
  m.parameter("encoder.patch.bias").value.fill(0.0);
  CHECK(patch_embed(m, BevImage(448, 448)).z == m.parameter("encoder.position").value);

  // swapping two patches swaps their content components
  BevImage img = toy::noise_image(3);
  BevImage swapped = img;
  const std::size_t pa = 5, pb = 100;  // patch indices, row-major over a 14x14 grid
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) {
      const std::size_t ar = (pa / 14) * 32 + r, ac = (pa % 14) * 32 + c;
      const std::size_t br = (pb / 14) * 32 + r, bc = (pb % 14) * 32 + c;
      swapped.set(ac, ar, img.at(bc, br));
      swapped.set(bc, br, img.at(ac, ar));
    }
  const Matrix& pos = m.parameter("encoder.position").value;
  const Matrix x = patch_embed(m, img).z;
  const Matrix y = patch_embed(m, swapped).z;
  for (std::size_t t = 0; t < 196; ++t) {
    const std::size_t src = t == pa ? pb : t == pb ? pa : t;
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(y(t, k) - pos(t, k) == doctest::Approx(x(src, k) - pos(src, k)).epsilon(1e-12));
    }
  }
}

TEST_CASE("encoder is deterministic and stage-checked") {
  const Vocabulary vocab = toy::small_vocab();
  MultimodalModel m(toy::tiny_config(vocab.size()), vocab);
  const BevImage a = toy::noise_image(4);
  const BevImage b = a;
  CHECK(encode(m, patch_embed(m, a)).z == encode(m, patch_embed(m, b)).z);
  const VisualTokens p = patch_embed(m, a);
  CHECK_THROWS_AS(encode(m, encode(m, p)), ContractError);
  CHECK_THROWS_AS(concat4(p), ContractError);
}

TEST_CASE("concat4") {
  const VisualTokens t{Matrix{{1, 2}, {3, 4}, {5, 6}, {7, 8}}, TokenStage::encoded};
  const VisualTokens g = concat4(t);
  CHECK(g.stage == TokenStage::grouped);
  CHECK(g.z == Matrix{{1, 2, 3, 4, 5, 6, 7, 8}});
  CHECK_THROWS_AS(concat4(VisualTokens{Matrix(6, 2), TokenStage::encoded}), ShapeError);
}

TEST_CASE("projection") {
  Rng rng(8);
  const VisualTokens g{random_matrix(rng, 49, 8), TokenStage::grouped};
  CHECK(project(g, Projection{Matrix(4, 8), Matrix(1, 4)}).z == Matrix(49, 4));
  CHECK(project(g, Projection{Matrix::identity(8), std::nullopt}).z == g.z);
  const Matrix w = random_matrix(rng, 4, 8);
  const Matrix bias = random_matrix(rng, 1, 4);
  const Matrix out = project(g, Projection{w, bias}).z;
  const Matrix oracle = matmul(g.z, w.transposed());
  for (std::size_t i = 0; i < 49; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(out(i, j) == doctest::Approx(oracle(i, j) + bias(0, j)).epsilon(1e-14));
  CHECK_THROWS_AS(project(g, Projection{Matrix(4, 7), std::nullopt}), ShapeError);
  CHECK_THROWS_AS(project(VisualTokens{g.z, TokenStage::encoded}, Projection{w, std::nullopt}), ContractError);
}

TEST_CASE("LoRA contracts") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t in = 3 + rng.below(20), out = 3 + rng.below(20), r = 1 + rng.below(4);
    LoraLayer layer{random_matrix(rng, out, in), random_matrix(rng, r, in), Matrix(out, r), 2.0 * static_cast<double>(r)};
    const Matrix x = random_matrix(rng, 5, in);
    CHECK(lora_forward(x, layer) == matmul_nt(x, layer.base));
    layer.b = random_matrix(rng, out, r);
    CHECK(max_abs_diff(lora_forward(x, layer), matmul_nt(x, layer.merged())) <= 1e-12);
  }
  LoraLayer bad{Matrix(4, 4), Matrix(2, 4), Matrix(4, 3), 1.0};
  CHECK_THROWS_AS(lora_forward(Matrix(1, 4), bad), ShapeError);

  // r = 64 on a 4096-wide layer
  const std::size_t width = 4096, rank = 64;
  CHECK(rank * width + width * rank == 2 * 64 * 4096);
}

TEST_CASE("zero-initialized adapters leave the model unchanged") {
  const Vocabulary vocab = toy::small_vocab();
  MultimodalModel m(toy::tiny_config(vocab.size()), vocab);
  const Matrix grouped = m.grouped_features(toy::noise_image(6));
  const auto q = vocab.encode("How many lanes are there?");
  const DecoderInput in = assemble_context(49, {}, q, {}, 96);
  std::vector<std::size_t> all(in.length());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  Tape t1;
  const Matrix with = t1.value(m.decoder_logits(t1, m.project(t1, t1.constant(grouped)), in.text, all));
  // adapter-free: drop the A factors too
  for (Parameter* p : m.parameters()) {
    if (p->name.find("lora_a") != std::string::npos) p->value.fill(0.0);
  }
  Tape t2;
  const Matrix without = t2.value(m.decoder_logits(t2, m.project(t2, t2.constant(grouped)), in.text, all));
  CHECK(with == without);
}

TEST_CASE("context assembly") {
  std::vector<std::size_t> ann(30, 7), q(8, 9), answer{11, 12};
  DecoderInput in = assemble_context(49, ann, q, {}, 256);
  CHECK(in.length() == 90);
  CHECK(count(in.text, Vocabulary::kSep) == 3);
  CHECK(in.loss_positions.empty());

  in = assemble_context(49, {}, q, answer, 256);
  REQUIRE(in.text.size() == 1 + 1 + 8 + 1 + 2);
  CHECK(in.text[0] == Vocabulary::kSep);
  CHECK(in.text[1] == Vocabulary::kSep);
  CHECK(in.text[10] == Vocabulary::kSep);
  CHECK(in.targets == std::vector<std::size_t>{11, 12, Vocabulary::kEos});
  CHECK(in.loss_positions.size() == answer.size() + 1);
  // position p predicts token p + 1
  CHECK(in.loss_positions.front() == 49 + 10);

  try {
    (void)assemble_context(49, std::vector<std::size_t>(300, 5), q, answer, 256);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("annotation") != std::string::npos);
  }
  CHECK_THROWS_AS(assemble_context(49, ann, q, std::vector<std::size_t>(200, 5), 256), ShapeError);
}

TEST_CASE("decoder is causal") {
  const Vocabulary vocab = toy::small_vocab();
  MultimodalModel m(toy::tiny_config(vocab.size()), vocab);
  toy::randomize_lora_b(m, 2);
  const Matrix grouped = m.grouped_features(toy::noise_image(9));
  const auto q = vocab.encode("How many lanes are there?");
  DecoderInput in = assemble_context(49, vocab.encode("urban road"), q, vocab.encode("3"), 96);
  std::vector<std::size_t> all(in.length());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Tape t;
  const Matrix base = t.value(m.decoder_logits(t, m.project(t, t.constant(grouped)), in.text, all));
  for (std::size_t j : {49u, 52u, 60u}) {
    std::vector<std::size_t> text = in.text;
    text[j - 49] = (text[j - 49] + 1) % vocab.size();
    Tape u;
    const Matrix changed = u.value(m.decoder_logits(u, m.project(u, u.constant(grouped)), text, all));
    for (std::size_t p = 0; p < j; ++p)
      for (std::size_t k = 0; k < changed.cols(); ++k) REQUIRE(changed(p, k) == base(p, k));
    CHECK(max_abs_diff(changed, base) > 0.0);
  }
}

TEST_CASE("greedy generation") {
  const Vocabulary vocab = toy::small_vocab();
  MultimodalModel m(toy::tiny_config(vocab.size()), vocab);
  const Matrix grouped = m.grouped_features(toy::noise_image(10));
  const auto q = vocab.encode("How many lanes are there?");
  const auto a = m.generate(grouped, {}, q, 8);
  CHECK(a == m.generate(grouped, {}, q, 8));
  CHECK(a.size() <= 8);
  CHECK(m.generate(grouped, {}, q, 0).empty());
}

TEST_CASE("trainable set") {
  ModelConfig c;
  const Vocabulary vocab = toy::small_vocab();
  c.vocab_size = vocab.size();
  MultimodalModel m(c, vocab);
  CHECK(m.trainable_count() == 128 * 256 + 128 + 2 * 2 * (8 * 128 + 128 * 8));
  for (const Parameter* p : m.parameters()) {
    if (p->name.rfind("encoder.", 0) == 0) CHECK_FALSE(p->trainable);
  }
  c.train_embeddings = true;
  MultimodalModel e(c, vocab);
  std::vector<std::string> extra;
  for (const Parameter* p : e.parameters()) {
    if (p->trainable && !m.parameter(p->name).trainable) extra.push_back(p->name);
  }
  std::sort(extra.begin(), extra.end());
  CHECK(extra == std::vector<std::string>{"encoder.patch.bias", "encoder.patch.weight", "encoder.position"});
}

TEST_CASE("gradients reach only the trainable tensors") {
  const Vocabulary vocab = toy::small_vocab();
  MultimodalModel m(toy::tiny_config(vocab.size()), vocab);
  const Matrix grouped = m.grouped_features(toy::noise_image(11));
  const DecoderInput in = assemble_context(49, {}, vocab.encode("How many lanes are there?"), vocab.encode("3"), 96);
  for (Parameter* p : m.parameters()) p->zero_grad();
  Tape t;
  t.backward(m.loss(t, t.constant(grouped), in, 0.0));
  for (const Parameter* p : m.parameters()) {
    const bool any = std::any_of(p->grad.data().begin(), p->grad.data().end(), [](double g) { return g != 0.0; });
    if (!p->trainable) {
      INFO(p->name);
      CHECK_FALSE(any);
    }
    if (p->name == "projector.weight" || p->name.find("lora_b") != std::string::npos) {
      INFO(p->name);
      CHECK(any);
    }
  }
}

TEST_CASE("end-to-end gradient check at d=16") {
  const Vocabulary vocab = toy::small_vocab();
  ModelConfig c = toy::tiny_config(vocab.size());
  c.seed = 7;
  MultimodalModel m(c, vocab);
  toy::randomize_lora_b(m, 7);
  const Matrix grouped = m.grouped_features(toy::noise_image(107));
  const DecoderInput in = assemble_context(49, vocab.encode("urban road"), vocab.encode("How many lanes are there?"),
                                           vocab.encode("yes, intersection"), 96);
  const auto params = m.trainable_parameters();
  const GradCheckReport report =
      grad_check([&](Tape& t) { return m.loss(t, t.constant(grouped), in, 0.0); }, params);
  CHECK(report.groups.size() == params.size());
  for (const auto& g : report.groups) {
    INFO(g.name << " rel " << g.max_rel_error);
    CHECK(g.passed);
  }
  CHECK(report.max_rel_error <= 1e-4);
}

TEST_CASE("gradient check across seeds at a small step") {
  const Vocabulary vocab = toy::small_vocab();
  const DecoderInput in = assemble_context(49, vocab.encode("urban road"), vocab.encode("How many lanes are there?"),
                                           vocab.encode("yes, intersection"), 96);
  GradCheckOptions opts;
  opts.delta = 1e-4;
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    ModelConfig c = toy::tiny_config(vocab.size());
    c.seed = seed;
    MultimodalModel m(c, vocab);
    toy::randomize_lora_b(m, seed);
    const Matrix grouped = m.grouped_features(toy::noise_image(seed + 100));
    const GradCheckReport report = grad_check(
        [&](Tape& t) { return m.loss(t, t.constant(grouped), in, 0.0); }, m.trainable_parameters(), opts);
    INFO("seed " << seed << " rel " << report.max_rel_error);
    CHECK(report.passed);
  }
}

TEST_CASE("checkpoint round trip") {
  const Vocabulary vocab = toy::small_vocab();
  const ModelConfig c = toy::tiny_config(vocab.size());
  MultimodalModel m(c, vocab);
  toy::randomize_lora_b(m, 7);
  const std::string bytes = m.to_checkpoint().encode();
  const MultimodalModel back = MultimodalModel::from_checkpoint(Checkpoint::decode(bytes));
  CHECK(back.to_checkpoint().encode() == bytes);
  CHECK(back.config() == c);
  CHECK(back.vocab() == vocab);
  CHECK(back.frozen_digest() == m.frozen_digest());

  ModelConfig wider = c;
  wider.d = 32;
  try {
    (void)MultimodalModel::from_checkpoint(Checkpoint::decode(bytes), wider);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("projector.weight") != std::string::npos);
  }
}
