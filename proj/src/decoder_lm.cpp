#include "mats/decoder_lm.hpp"

#include <cmath>
#include <string>

#include "mats/error.hpp"
#include "mats/nn_kernels.hpp"
#include "mats/optim.hpp"
#include "mats/rng.hpp"
#include "mats/transformer.hpp"

namespace mats {

namespace {

void validate_shape(const DecoderShape& s) {
  if (s.vocab < 2) throw ConfigError("decoder vocab must be >= 2");
  if (s.d_dec < 1) throw ConfigError("decoder d_dec must be >= 1");
  if (s.n_layers < 1) throw ConfigError("decoder n_layers must be >= 1");
  if (s.n_heads < 1 || s.d_dec % s.n_heads != 0)
    throw ConfigError("decoder n_heads must divide d_dec");
  if (s.max_len < 1) throw ConfigError("decoder max_len must be >= 1");
}

std::string blk(int l) { return "decoder.blk" + std::to_string(l); }

std::string lora_name(int l, const std::string& proj) {
  return "lora.blk" + std::to_string(l) + "." + proj;
}

}  // namespace

void init_decoder(ParamStore& ps, const DecoderShape& shape,
                  std::uint64_t seed) {
  validate_shape(shape);
  RngStream rng = RngStream(seed).fork("decoder");
  const double limit = 1.0 / std::sqrt(static_cast<double>(shape.d_dec));
  ps.add("decoder.embed",
         uniform_matrix(rng, shape.vocab, shape.d_dec, limit));
  for (int l = 0; l < shape.n_layers; ++l)
    init_block(ps, blk(l), shape.d_dec, rng, limit);
  ps.add("decoder.final_ln.g", Matrix::Ones(1, shape.d_dec));
  ps.add("decoder.final_ln.b", Matrix::Zero(1, shape.d_dec));
}

void init_lora(ParamStore& ps, const DecoderShape& shape,
               const LoraConfig& cfg, std::uint64_t seed) {
  if (cfg.rank < 1) throw ConfigError("lora rank must be >= 1");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0))
    throw ConfigError("lora dropout must lie in [0, 1)");
  RngStream rng = RngStream(seed).fork("lora");
  const double limit = 1.0 / std::sqrt(static_cast<double>(shape.d_dec));
  for (int l = 0; l < shape.n_layers; ++l)
    for (const char* proj : {"q", "k", "v", "o"}) {
      ps.add(lora_name(l, proj) + ".A",
             uniform_matrix(rng, shape.d_dec, cfg.rank, limit));
      ps.add(lora_name(l, proj) + ".B", Matrix::Zero(cfg.rank, shape.d_dec));
    }
}

std::map<std::string, Matrix> lora_dropout_masks(const DecoderShape& shape,
                                                 const LoraConfig& cfg,
                                                 Index rows, RngStream rng) {
  if (rows < 1) throw UsageError("lora_dropout_masks: rows must be >= 1");
  std::map<std::string, Matrix> masks;
  if (cfg.dropout <= 0.0) return masks;
  const double keep = 1.0 / (1.0 - cfg.dropout);
  for (int l = 0; l < shape.n_layers; ++l)
    for (const char* proj : {"q", "k", "v", "o"}) {
      Matrix m(rows, shape.d_dec);
      for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < shape.d_dec; ++j)
          m(i, j) = (rng.next_uniform() < cfg.dropout) ? 0.0 : keep;
      masks.emplace("blk" + std::to_string(l) + "." + proj, std::move(m));
    }
  return masks;
}

Matrix embed_tokens(const ParamStore& ps, const TokenSeq& tokens) {
  const Matrix& table = ps.at("decoder.embed").value;
  Matrix out(static_cast<Index>(tokens.size()), table.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= table.rows())
      throw UsageError("embed_tokens: token id out of range");
    out.row(static_cast<Index>(i)) = table.row(tokens[i]);
  }
  return out;
}

GradTape::Ref decoder_embed(GradTape& t, ParamStore& ps,
                            const TokenSeq& tokens) {
  std::vector<Index> ids(tokens.begin(), tokens.end());
  return t.gather_rows(t.param(ps, "decoder.embed"), std::move(ids));
}

GradTape::Ref decoder_logits(GradTape& t, ParamStore& ps,
                             const DecoderShape& shape, GradTape::Ref x,
                             const LoraRun* lora) {
  const Matrix& in = t.value(x);
  if (in.cols() != shape.d_dec)
    throw UsageError("decoder_logits: embedding width mismatch");
  if (in.rows() < 1) throw UsageError("decoder_logits: empty sequence");
  if (in.rows() > shape.max_len)
    throw UsageError("decoder_logits: sequence exceeds max_len");
  if (!in.allFinite())
    throw NumericError("decoder_logits: non-finite input");

  const Matrix pos = sinusoid_positions(shape.max_len, shape.d_dec);
  x = t.add(x, t.constant(pos.topRows(in.rows())));

  for (int l = 0; l < shape.n_layers; ++l) {
    ProjDelta delta;
    if (lora) {
      delta = [&ps, lora, l](GradTape& tt, GradTape::Ref px,
                             const std::string& proj) -> GradTape::Ref {
        const std::string base = lora_name(l, proj);
        GradTape::Ref inp = px;
        if (lora->dropout_masks) {
          auto it = lora->dropout_masks->find("blk" + std::to_string(l) + "." +
                                              proj);
          if (it != lora->dropout_masks->end())
            inp = tt.hadamard(px, tt.constant(it->second));
        }
        return tt.scale(tt.matmul(tt.matmul(inp, tt.param(ps, base + ".A")),
                                  tt.param(ps, base + ".B")),
                        lora->cfg.scale());
      };
    }
    x = tape_block(t, ps, blk(l), x, shape.n_heads, /*causal=*/true, delta);
  }

  x = t.layer_norm_rows(x, t.param(ps, "decoder.final_ln.g"),
                        t.param(ps, "decoder.final_ln.b"));
  GradTape::Ref logits =
      t.matmul(x, t.transpose(t.param(ps, "decoder.embed")));
  if (!t.value(logits).allFinite())
    throw NumericError("decoder_logits: non-finite logits");
  return logits;
}

Matrix decoder_logits_eval(ParamStore& ps, const DecoderShape& shape,
                           const Matrix& x, const LoraRun* lora) {
  GradTape t;
  return t.value(decoder_logits(t, ps, shape, t.constant(x), lora));
}

double ce_loss(const Matrix& logits, const std::vector<Index>& rows,
               const std::vector<TokenId>& targets) {
  if (rows.empty()) throw UsageError("ce_loss: no loss rows");
  if (rows.size() != targets.size())
    throw UsageError("ce_loss: rows/targets mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= logits.rows())
      throw UsageError("ce_loss: row out of range");
    if (targets[i] < 0 || targets[i] >= logits.cols())
      throw UsageError("ce_loss: target out of range");
    acc += logsumexp_row(logits.row(rows[i])) - logits(rows[i], targets[i]);
  }
  return acc / static_cast<double>(rows.size());
}

namespace {

TokenSeq lm_sequence(const Vocab& vocab, const SampleTuple& s) {
  TokenSeq seq;
  seq.push_back(vocab.bos);
  seq.insert(seq.end(), s.instruction_ids.begin(), s.instruction_ids.end());
  seq.insert(seq.end(), s.answer_ids.begin(), s.answer_ids.end());
  return seq;
}

GradTape::Ref lm_loss_on_tape(GradTape& t, ParamStore& ps,
                              const DecoderShape& shape, const TokenSeq& seq) {
  TokenSeq input(seq.begin(), seq.end() - 1);
  GradTape::Ref x = decoder_embed(t, ps, input);
  GradTape::Ref logits = decoder_logits(t, ps, shape, x, nullptr);
  std::vector<Index> rows;
  std::vector<TokenId> targets;
  rows.reserve(input.size());
  targets.reserve(input.size());
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    rows.push_back(static_cast<Index>(i));
    targets.push_back(seq[i + 1]);
  }
  return t.cross_entropy_rows(logits, std::move(rows), std::move(targets));
}

}  // namespace

PretrainReport pretrain_decoder(ParamStore& ps, const DecoderShape& shape,
                                const Vocab& vocab,
                                const std::vector<SampleTuple>& corpus,
                                const DecoderPretrainConfig& cfg) {
  if (corpus.empty()) throw UsageError("pretrain_decoder: empty corpus");
  if (cfg.heldout < 1 ||
      static_cast<std::size_t>(cfg.heldout) >= corpus.size())
    throw ConfigError("pretrain heldout must leave training samples");
  if (cfg.batch < 1) throw ConfigError("pretrain batch must be >= 1");
  if (cfg.steps < 0) throw ConfigError("pretrain steps must be >= 0");

  const std::size_t n_train = corpus.size() - static_cast<std::size_t>(cfg.heldout);
  RngStream rng(cfg.seed);
  AdamWConfig adam;
  adam.weight_decay = cfg.weight_decay;
  OptState opt;
  opt.init(ps);

  PretrainReport rep;
  for (int step = 0; step < cfg.steps; ++step) {
    RngStream br = rng.fork("batch").fork_index(static_cast<std::uint64_t>(step));
    GradTape t(4096);
    GradTape::Ref loss = -1;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& s = corpus[static_cast<std::size_t>(
          br.next_below(static_cast<std::uint64_t>(n_train)))];
      GradTape::Ref li = lm_loss_on_tape(t, ps, shape, lm_sequence(vocab, s));
      loss = (b == 0) ? li : t.add(loss, li);
    }
    loss = t.scale(loss, 1.0 / cfg.batch);
    const double lv = t.scalar(loss);
    if (!std::isfinite(lv)) throw TrainError("decoder pretraining diverged");
    ps.zero_grads();
    t.backward(loss);
    clip_global_norm(ps, 1.0);
    adamw_step(ps, opt,
               lr_at(step, cfg.steps, cfg.warmup, cfg.lr, Scheduler::linear),
               adam);
    rep.final_train_loss = lv;
    rep.steps_run = step + 1;
  }

  ps.set_trainable_prefix("decoder.", false);

  double held = 0.0;
  std::int64_t held_tokens = 0;
  for (std::size_t i = n_train; i < corpus.size(); ++i) {
    GradTape t;
    const TokenSeq seq = lm_sequence(vocab, corpus[i]);
    const auto n = static_cast<std::int64_t>(seq.size()) - 1;
    held += t.scalar(lm_loss_on_tape(t, ps, shape, seq)) *
            static_cast<double>(n);
    held_tokens += n;
  }
  rep.heldout_ce = held / static_cast<double>(held_tokens);
  rep.frozen_digest = ps.digest_prefix("decoder.");

  const double uniform = std::log(static_cast<double>(shape.vocab));
  if (cfg.steps > 0 && !(rep.heldout_ce < uniform))
    throw TrainError("decoder pretraining failed to beat the uniform model");
  return rep;
}

TokenSeq generate_greedy(ParamStore& ps, const DecoderShape& shape,
                         const Matrix& prefix, const TokenSeq& instruction,
                         Index max_new, TokenId eos, const LoraRun* lora) {
  if (max_new < 1) throw UsageError("generate_greedy: max_new must be >= 1");
  if (prefix.cols() != shape.d_dec)
    throw UsageError("generate_greedy: prefix width mismatch");
  if (prefix.rows() + static_cast<Index>(instruction.size()) >= shape.max_len)
    throw UsageError("generate_greedy: prompt leaves no room to generate");

  TokenSeq out;
  while (static_cast<Index>(out.size()) < max_new) {
    TokenSeq fed = instruction;
    fed.insert(fed.end(), out.begin(), out.end());
    const Index total = prefix.rows() + static_cast<Index>(fed.size());
    if (total > shape.max_len) break;
    Matrix x(total, shape.d_dec);
    x.topRows(prefix.rows()) = prefix;
    if (!fed.empty()) x.bottomRows(static_cast<Index>(fed.size())) =
        embed_tokens(ps, fed);
    Matrix logits = decoder_logits_eval(ps, shape, x, lora);
    const auto last = logits.row(logits.rows() - 1);
    TokenId arg = 0;
    for (Index v = 1; v < last.size(); ++v)
      if (last[v] > last[arg]) arg = static_cast<TokenId>(v);
    out.push_back(arg);
    if (arg == eos) break;
  }
  return out;
}

double lora_merge_check(const ParamStore& ps, const DecoderShape& shape,
                        const LoraConfig& cfg, const Matrix& probe_embeds) {
  ParamStore merged = ps;
  for (int l = 0; l < shape.n_layers; ++l)
    for (const char* proj : {"q", "k", "v", "o"}) {
      const Matrix& A = ps.at(lora_name(l, proj) + ".A").value;
      const Matrix& B = ps.at(lora_name(l, proj) + ".B").value;
      merged.at(blk(l) + ".attn.w" + proj).value += cfg.scale() * (A * B);
    }
  LoraRun run;
  run.cfg = cfg;
  ParamStore unmerged = ps;
  Matrix adapted = decoder_logits_eval(unmerged, shape, probe_embeds, &run);
  Matrix folded = decoder_logits_eval(merged, shape, probe_embeds, nullptr);
  return (adapted - folded).cwiseAbs().maxCoeff();
}

}  // namespace mats
