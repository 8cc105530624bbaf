#include "bllm/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "bllm/error.hpp"
#include "bllm/rng.hpp"

namespace bllm {
namespace {

using nlohmann::json;

void require_stage(const VisualTokens& t, TokenStage expected, const char* op) {
  if (t.stage != expected) {
    throw ContractError(std::string(op) + ": expected " + std::string(to_string(expected)) +
                        " tokens, got " + std::string(to_string(t.stage)));
  }
}

Matrix flatten_patches(const BevImage& img, std::size_t patch) {
  const std::size_t per_side = img.width() / patch;
  Matrix out(per_side * per_side, patch * patch * 3);
  for (std::size_t pr = 0; pr < per_side; ++pr) {
    for (std::size_t pc = 0; pc < per_side; ++pc) {
      auto dst = out.row(pr * per_side + pc);
      std::size_t k = 0;
      for (std::size_t r = 0; r < patch; ++r) {
        for (std::size_t c = 0; c < patch; ++c) {
          const Rgb px = img.at(pc * patch + c, pr * patch + r);
          dst[k++] = px.r / 255.0;
          dst[k++] = px.g / 255.0;
          dst[k++] = px.b / 255.0;
        }
      }
    }
  }
  return out;
}

}  // namespace

std::size_t ModelConfig::patches() const {
  if (patch == 0) return 0;
  const std::size_t side = image_size / patch;
  return side * side;
}

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> v;
  if (patch == 0 || image_size % patch != 0) {
    v.push_back("model.patch must divide model.image_size");
  } else if (patches() % 4 != 0) {
    v.push_back("model.patch must give a patch count divisible by 4");
  }
  auto heads_ok = [&](std::size_t width, std::size_t heads, const char* name) {
    if (heads == 0 || width == 0 || width % heads != 0 || (width / heads) % 2 != 0) {
      v.push_back(std::string("model.") + name + " must be an even multiple of its head count");
    }
  };
  heads_ok(d_bev, encoder_heads, "d_bev");
  heads_ok(d, decoder_heads, "d");
  if (encoder_layers == 0) v.push_back("model.encoder_layers must be ≥ 1");
  if (decoder_layers == 0) v.push_back("model.decoder_layers must be ≥ 1");
  if (mlp_ratio == 0) v.push_back("model.mlp_ratio must be ≥ 1");
  if (lora_rank < 1) v.push_back("model.lora_rank must be ≥ 1");
  if (!(lora_alpha > 0.0)) v.push_back("model.lora_alpha must be > 0");
  if (vocab_size <= Vocabulary::kReserved) v.push_back("model.vocab_size must exceed the reserved tokens");
  if (max_seq <= grouped_tokens() + 3) v.push_back("model.max_seq must leave room after the visual tokens");
  return v;
}

void ModelConfig::validate() const {
  const auto v = violations();
  if (!v.empty()) throw ValidationError("model", v.front());
}

std::string ModelConfig::to_json() const {
  json j = {{"image_size", image_size},         {"patch", patch},
            {"d_bev", d_bev},                   {"d", d},
            {"encoder_layers", encoder_layers}, {"encoder_heads", encoder_heads},
            {"decoder_layers", decoder_layers}, {"decoder_heads", decoder_heads},
            {"mlp_ratio", mlp_ratio},           {"vocab_size", vocab_size},
            {"max_seq", max_seq},               {"lora_rank", lora_rank},
            {"lora_alpha", lora_alpha},         {"train_embeddings", train_embeddings},
            {"seed", seed}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed model config", 1, e.byte);
  }
  ModelConfig c;
  for (auto& [key, val] : j.items()) {
    if (val.is_number_integer() && !val.is_number_unsigned()) {
      throw ValidationError("model." + key, "must be a non-negative integer");
    }
    try {
      if (key == "image_size") c.image_size = val.get<std::size_t>();
      else if (key == "patch") c.patch = val.get<std::size_t>();
      else if (key == "d_bev") c.d_bev = val.get<std::size_t>();
      else if (key == "d") c.d = val.get<std::size_t>();
      else if (key == "encoder_layers") c.encoder_layers = val.get<std::size_t>();
      else if (key == "encoder_heads") c.encoder_heads = val.get<std::size_t>();
      else if (key == "decoder_layers") c.decoder_layers = val.get<std::size_t>();
      else if (key == "decoder_heads") c.decoder_heads = val.get<std::size_t>();
      else if (key == "mlp_ratio") c.mlp_ratio = val.get<std::size_t>();
      else if (key == "vocab_size") c.vocab_size = val.get<std::size_t>();
      else if (key == "max_seq") c.max_seq = val.get<std::size_t>();
      else if (key == "lora_rank") c.lora_rank = val.get<std::size_t>();
      else if (key == "lora_alpha") c.lora_alpha = val.get<double>();
      else if (key == "train_embeddings") c.train_embeddings = val.get<bool>();
      else if (key == "seed") c.seed = val.get<std::uint64_t>();
      else throw ValidationError("model." + key, "unknown key");
    } catch (const json::exception&) {
      throw ValidationError("model." + key, "wrong type");
    }
  }
  return c;
}

std::string_view to_string(TokenStage s) {
  switch (s) {
    case TokenStage::patched: return "patched";
    case TokenStage::encoded: return "encoded";
    case TokenStage::grouped: return "grouped";
    case TokenStage::projected: return "projected";
  }
  return "patched";
}

Matrix LoraLayer::merged() const {
  Matrix w = base;
  const Matrix ba = matmul(b, a);
  const double s = scale();
  for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] += s * ba.data()[i];
  return w;
}

Matrix lora_forward(const Matrix& x, const LoraLayer& layer) {
  if (layer.a.rows() != layer.b.cols()) {
    throw ShapeError("lora_forward: A is " + layer.a.shape_string() + " but B is " +
                     layer.b.shape_string() + " (rank mismatch)");
  }
  if (layer.a.cols() != layer.base.cols() || layer.b.rows() != layer.base.rows()) {
    throw ShapeError("lora_forward: adapter " + layer.b.shape_string() + "·" + layer.a.shape_string() +
                     " does not match base " + layer.base.shape_string());
  }
  Matrix out = matmul_nt(x, layer.base);
  const Matrix delta = matmul_nt(matmul_nt(x, layer.a), layer.b);
  const double s = layer.scale();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += s * delta.data()[i];
  return out;
}

DecoderInput assemble_context(std::size_t visual_tokens, std::span<const std::size_t> annotation,
                              std::span<const std::size_t> question,
                              std::span<const std::size_t> answer, std::size_t max_seq) {
  DecoderInput in;
  in.visual_tokens = visual_tokens;
  auto check = [&](const char* segment) {
    if (in.length() > max_seq) {
      throw ShapeError(std::string("context overflow in ") + segment + " segment: length " +
                       std::to_string(in.length()) + " exceeds max_seq " + std::to_string(max_seq));
    }
  };
  check("visual");
  in.text.push_back(Vocabulary::kSep);
  in.text.insert(in.text.end(), annotation.begin(), annotation.end());
  check("annotation");
  in.text.push_back(Vocabulary::kSep);
  in.text.insert(in.text.end(), question.begin(), question.end());
  in.text.push_back(Vocabulary::kSep);
  check("question");
  if (answer.empty()) return in;
  // position p predicts the token at p + 1; the final SEP predicts answer[0]
  for (std::size_t i = 0; i <= answer.size(); ++i) {
    in.loss_positions.push_back(in.length() - 1 + i);
    in.targets.push_back(i < answer.size() ? answer[i] : Vocabulary::kEos);
  }
  in.text.insert(in.text.end(), answer.begin(), answer.end());
  check("answer");
  return in;
}

MultimodalModel::MultimodalModel(ModelConfig config, Vocabulary vocab)
    : config_(config), vocab_(std::move(vocab)) {
  config_.validate();
  if (vocab_.size() > config_.vocab_size) {
    throw ValidationError("model.vocab_size", "vocabulary has " + std::to_string(vocab_.size()) +
                                                  " tokens, limit is " + std::to_string(config_.vocab_size));
  }
  const std::size_t patch_in = config_.patch * config_.patch * 3;
  const std::size_t db = config_.d_bev;
  const std::size_t d = config_.d;
  auto inv = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
  auto norm = [&](const std::string& prefix, std::size_t width) {
    return Norm{add(prefix + ".gain", 1, width, 0.0, 1.0), add(prefix + ".bias", 1, width, 0.0)};
  };
  auto linear = [&](const std::string& prefix, std::size_t out, std::size_t in, bool bias) {
    return Linear{add(prefix + ".weight", out, in, inv(in)), bias ? add(prefix + ".bias", 1, out, 0.0) : nullptr};
  };
  auto lora = [&](const std::string& prefix, std::size_t out, std::size_t in) {
    const std::size_t r = config_.lora_rank;
    return LoraLinear{add(prefix + ".base", out, in, inv(in)), add(prefix + ".lora_a", r, in, inv(in)),
                      add(prefix + ".lora_b", out, r, 0.0),
                      config_.lora_alpha / static_cast<double>(r)};
  };

  patch_ = linear("encoder.patch", db, patch_in, true);
  patch_pos_ = add("encoder.position", config_.patches(), db, 0.1);
  for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l);
    EncoderBlock b;
    b.ln1 = norm(p + ".ln1", db);
    b.q = linear(p + ".attn.q", db, db, false);
    b.k = linear(p + ".attn.k", db, db, false);
    b.v = linear(p + ".attn.v", db, db, false);
    b.o = linear(p + ".attn.o", db, db, false);
    b.ln2 = norm(p + ".ln2", db);
    b.up = linear(p + ".mlp.up", config_.mlp_ratio * db, db, true);
    b.down = linear(p + ".mlp.down", db, config_.mlp_ratio * db, true);
    encoder_.push_back(b);
  }
  encoder_ln_ = norm("encoder.ln_final", db);
  projector_ = linear("projector", d, 4 * db, true);
  tok_emb_ = add("decoder.token_embedding", vocab_.size(), d, 1.0);
  pos_emb_ = add("decoder.position_embedding", config_.max_seq, d, 0.1);
  for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
    const std::string p = "decoder.layers." + std::to_string(l);
    DecoderBlock b;
    b.ln1 = norm(p + ".ln1", d);
    b.q = lora(p + ".attn.q", d, d);
    b.k = linear(p + ".attn.k", d, d, false);
    b.v = lora(p + ".attn.v", d, d);
    b.o = linear(p + ".attn.o", d, d, false);
    b.ln2 = norm(p + ".ln2", d);
    b.up = linear(p + ".mlp.up", config_.mlp_ratio * d, d, true);
    b.down = linear(p + ".mlp.down", d, config_.mlp_ratio * d, true);
    decoder_.push_back(b);
  }
  decoder_ln_ = norm("decoder.ln_final", d);
  lm_head_ = add("decoder.lm_head", vocab_.size(), d, inv(d));
  set_trainable();
}

Parameter* MultimodalModel::add(std::string name, std::size_t rows, std::size_t cols, double stddev,
                                double fill) {
  Rng rng = Rng(config_.seed).derive(name);
  Matrix value(rows, cols, fill);
  if (stddev > 0.0) {
    for (double& v : value.data()) v = rng.normal(0.0, stddev);
  }
  store_.push_back(Parameter{std::move(name), std::move(value), Matrix(), false});
  return &store_.back();
}

void MultimodalModel::set_trainable() {
  for (auto& p : store_) p.trainable = false;
  projector_.weight->trainable = true;
  projector_.bias->trainable = true;
  for (auto& b : decoder_) {
    b.q.a->trainable = b.q.b->trainable = true;
    b.v.a->trainable = b.v.b->trainable = true;
  }
  if (config_.train_embeddings) {
    patch_.weight->trainable = patch_.bias->trainable = patch_pos_->trainable = true;
  }
}

std::vector<Parameter*> MultimodalModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : store_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> MultimodalModel::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : store_) out.push_back(&p);
  return out;
}

std::vector<Parameter*> MultimodalModel::trainable_parameters() {
  std::vector<Parameter*> out;
  for (auto& p : store_) {
    if (p.trainable) out.push_back(&p);
  }
  return out;
}

Parameter& MultimodalModel::parameter(std::string_view name) {
  for (auto& p : store_) {
    if (p.name == name) return p;
  }
  throw IndexError("no parameter named '" + std::string(name) + "'");
}

const Parameter& MultimodalModel::parameter(std::string_view name) const {
  return const_cast<MultimodalModel*>(this)->parameter(name);
}

std::size_t MultimodalModel::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : store_) {
    if (p.trainable) n += p.value.size();
  }
  return n;
}

std::string MultimodalModel::frozen_digest() const {
  Checkpoint frozen;
  for (const auto& p : store_) {
    if (!p.trainable) frozen.put(p.name, p.value);
  }
  return sha256_hex(frozen.encode());
}

Var MultimodalModel::linear(Tape& t, Var x, const Linear& l) {
  Var y = t.matmul_nt(x, t.param(*l.weight));
  return l.bias != nullptr ? t.add_row(y, t.param(*l.bias)) : y;
}

Var MultimodalModel::lora(Tape& t, Var x, const LoraLinear& l) {
  Var base = t.matmul_nt(x, t.param(*l.base));
  Var low = t.matmul_nt(t.matmul_nt(x, t.param(*l.a)), t.param(*l.b));
  return t.add(base, t.scale(low, l.scale));
}

Var MultimodalModel::norm(Tape& t, Var x, const Norm& n) {
  return t.layer_norm(x, t.param(*n.gain), t.param(*n.bias));
}

Var MultimodalModel::patch_embed(Tape& t, const BevImage& img) {
  if (img.width() != config_.image_size || img.height() != config_.image_size) {
    throw ShapeError("patch_embed: image is " + std::to_string(img.width()) + "x" +
                     std::to_string(img.height()) + ", model expects " + std::to_string(config_.image_size) +
                     "x" + std::to_string(config_.image_size));
  }
  Var patches = t.constant(flatten_patches(img, config_.patch));
  return t.add(linear(t, patches, patch_), t.param(*patch_pos_));
}

Var MultimodalModel::encode(Tape& t, Var x) {
  for (const auto& b : encoder_) {
    Var h = norm(t, x, b.ln1);
    Var a = t.attention(linear(t, h, b.q), linear(t, h, b.k), linear(t, h, b.v), config_.encoder_heads, false);
    x = t.add(x, linear(t, a, b.o));
    Var h2 = norm(t, x, b.ln2);
    x = t.add(x, linear(t, t.gelu(linear(t, h2, b.up)), b.down));
  }
  return norm(t, x, encoder_ln_);
}

Var MultimodalModel::concat4(Tape& t, Var encoded) {
  const Matrix& z = t.value(encoded);
  if (z.rows() % 4 != 0) {
    throw ShapeError("concat4: " + std::to_string(z.rows()) + " tokens is not divisible by 4");
  }
  // Row-major storage makes grouping 4 consecutive rows a pure reshape.
  return t.reshape(encoded, z.rows() / 4, 4 * z.cols());
}

Var MultimodalModel::project(Tape& t, Var grouped) {
  const Matrix& z = t.value(grouped);
  if (z.cols() != 4 * config_.d_bev) {
    throw ShapeError("project: token width " + std::to_string(z.cols()) + " but W_bev expects " +
                     std::to_string(4 * config_.d_bev));
  }
  return linear(t, grouped, projector_);
}

Var MultimodalModel::decoder_logits(Tape& t, Var projected, std::span<const std::size_t> text,
                                    std::span<const std::size_t> positions) {
  const std::size_t length = t.value(projected).rows() + text.size();
  if (length > config_.max_seq) {
    throw ShapeError("decoder input of length " + std::to_string(length) + " exceeds max_seq " +
                     std::to_string(config_.max_seq));
  }
  Var emb = t.gather_rows(t.param(*tok_emb_), text);
  const Var parts[] = {projected, emb};
  Var x = t.concat_rows(parts);
  x = t.add(x, t.slice_rows(t.param(*pos_emb_), 0, length));
  for (const auto& b : decoder_) {
    Var h = norm(t, x, b.ln1);
    Var a = t.attention(lora(t, h, b.q), linear(t, h, b.k), lora(t, h, b.v), config_.decoder_heads, true);
    x = t.add(x, linear(t, a, b.o));
    Var h2 = norm(t, x, b.ln2);
    x = t.add(x, linear(t, t.gelu(linear(t, h2, b.up)), b.down));
  }
  Var picked = t.gather_rows(norm(t, x, decoder_ln_), positions);
  return t.matmul_nt(picked, t.param(*lm_head_));
}

Var MultimodalModel::loss(Tape& t, Var grouped, const DecoderInput& in, double normalizer) {
  Var logits = decoder_logits(t, project(t, grouped), in.text, in.loss_positions);
  return t.cross_entropy(logits, in.targets, normalizer);
}

Matrix MultimodalModel::grouped_features(const BevImage& img) {
  Tape t;
  const bool saved = config_.train_embeddings;
  // evaluated as constants: no gradient bookkeeping for the frozen path
  for (Parameter* p : {patch_.weight, patch_.bias, patch_pos_}) p->trainable = false;
  Matrix out = t.value(concat4(t, encode(t, patch_embed(t, img))));
  if (saved) {
    for (Parameter* p : {patch_.weight, patch_.bias, patch_pos_}) p->trainable = true;
  }
  return out;
}

std::vector<std::size_t> MultimodalModel::generate(const Matrix& grouped,
                                                   std::span<const std::size_t> annotation,
                                                   std::span<const std::size_t> question,
                                                   std::size_t max_new) {
  DecoderInput in = assemble_context(grouped.rows(), annotation, question, {}, config_.max_seq);
  std::vector<std::size_t> out;
  Matrix projected;
  {
    Tape t;
    projected = t.value(project(t, t.constant_ref(grouped)));
  }
  while (out.size() < max_new && in.length() < config_.max_seq) {
    Tape t;
    const std::size_t last[] = {in.length() - 1};
    const Matrix& logits = t.value(decoder_logits(t, t.constant_ref(projected), in.text, last));
    const auto row = logits.row(0);
    const auto next = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (next == Vocabulary::kEos) break;
    out.push_back(next);
    in.text.push_back(next);
  }
  return out;
}

std::string MultimodalModel::answer(const BevImage& img, std::string_view annotation,
                                    std::string_view question, std::size_t max_new) {
  const Matrix grouped = grouped_features(img);
  const auto ann = vocab_.encode(annotation);
  const auto q = vocab_.encode(question);
  return vocab_.decode(generate(grouped, ann, q, max_new));
}

Checkpoint MultimodalModel::to_checkpoint(const OptimState* optim) const {
  Checkpoint ckpt;
  ckpt.put_text("meta/config", config_.to_json());
  ckpt.put_text("meta/vocab", vocab_.serialize());
  for (const auto& p : store_) ckpt.put(p.name, p.value);
  if (optim != nullptr) {
    const auto& c = optim->config;
    ckpt.put("optim/config", Matrix{{c.beta1, c.beta2, c.eps, c.weight_decay}});
    ckpt.put("optim/step", Matrix(1, 1, static_cast<double>(optim->step)));
    for (const auto& [name, m] : optim->moments) {
      ckpt.put("optim/m/" + name, m.first);
      ckpt.put("optim/v/" + name, m.second);
    }
  }
  return ckpt;
}

MultimodalModel MultimodalModel::from_checkpoint(const Checkpoint& ckpt, OptimState* optim) {
  const auto cfg = ckpt.text("meta/config");
  if (!cfg) throw LoadError("checkpoint has no entry 'meta/config'");
  return from_checkpoint(ckpt, ModelConfig::from_json(*cfg), optim);
}

MultimodalModel MultimodalModel::from_checkpoint(const Checkpoint& ckpt, const ModelConfig& config,
                                                 OptimState* optim) {
  const auto vocab_text = ckpt.text("meta/vocab");
  if (!vocab_text) throw LoadError("checkpoint has no entry 'meta/vocab'");
  MultimodalModel model(config, Vocabulary::deserialize(*vocab_text));
  for (auto& p : model.store_) {
    const Matrix* m = ckpt.find(p.name);
    if (m == nullptr) throw LoadError("checkpoint is missing tensor '" + p.name + "'");
    if (m->rows() != p.value.rows() || m->cols() != p.value.cols()) {
      throw LoadError("tensor '" + p.name + "' has shape " + m->shape_string() + " but the config expects " +
                      p.value.shape_string());
    }
    p.value = *m;
  }
  if (optim != nullptr) {
    *optim = OptimState{};
    if (const Matrix* c = ckpt.find("optim/config"); c != nullptr && c->size() == 4) {
      optim->config = {(*c)(0, 0), (*c)(0, 1), (*c)(0, 2), (*c)(0, 3)};
    }
    if (const Matrix* s = ckpt.find("optim/step"); s != nullptr) {
      optim->step = static_cast<std::uint64_t>((*s)(0, 0));
    }
    for (const auto& p : model.store_) {
      const Matrix* m = ckpt.find("optim/m/" + p.name);
      const Matrix* v = ckpt.find("optim/v/" + p.name);
      if (m == nullptr || v == nullptr) continue;
      if (m->size() != p.value.size() || v->size() != p.value.size()) {
        throw LoadError("optimizer moments for '" + p.name + "' do not match the tensor shape");
      }
      optim->moments[p.name] = Moments{*m, *v};
    }
  }
  return model;
}

VisualTokens patch_embed(MultimodalModel& model, const BevImage& img) {
  Tape t;
  return {t.value(model.patch_embed(t, img)), TokenStage::patched};
}

VisualTokens encode(MultimodalModel& model, const VisualTokens& tokens) {
  require_stage(tokens, TokenStage::patched, "encode");
  Tape t;
  return {t.value(model.encode(t, t.constant_ref(tokens.z))), TokenStage::encoded};
}

VisualTokens concat4(const VisualTokens& tokens) {
  require_stage(tokens, TokenStage::encoded, "concat4");
  if (tokens.z.rows() % 4 != 0) {
    throw ShapeError("concat4: " + std::to_string(tokens.z.rows()) + " tokens is not divisible by 4");
  }
  return {tokens.z.reshaped(tokens.z.rows() / 4, tokens.z.cols() * 4), TokenStage::grouped};
}

VisualTokens project(const VisualTokens& tokens, const Projection& p) {
  require_stage(tokens, TokenStage::grouped, "project");
  if (tokens.z.cols() != p.weight.cols()) {
    throw ShapeError("project: token width " + std::to_string(tokens.z.cols()) + " vs W_bev " +
                     p.weight.shape_string());
  }
  Matrix out = matmul_nt(tokens.z, p.weight);
  if (p.bias) {
    if (p.bias->rows() != 1 || p.bias->cols() != p.weight.rows()) {
      throw ShapeError("project: bias " + p.bias->shape_string() + " vs W_bev " + p.weight.shape_string());
    }
    for (std::size_t r = 0; r < out.rows(); ++r) {
      for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += (*p.bias)(0, c);
    }
  }
  return {std::move(out), TokenStage::projected};
}

}  // namespace bllm
