#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mats/grad_tape.hpp"
#include "mats/param_store.hpp"
#include "mats/synth_world.hpp"
#include "mats/types.hpp"

namespace mats {

// Tiny causal decoder. Pretrained once on the world's templated text, then
// frozen; low-rank adapters on the attention projections are the only
// decoder-side parameters that train afterwards. The output head is tied to
// the embedding table. Sinusoidal positions are added inside the forward to
// the whole sequence, prefix rows included.

struct DecoderShape {
  Index vocab = 64;
  Index d_dec = 64;
  int n_layers = 2;
  Index n_heads = 4;
  Index max_len = 16;  // position-table capacity for any input sequence
};

struct LoraConfig {
  Index rank = 8;
  double alpha = 4.0;
  double dropout = 0.1;
  double scale() const { return alpha / static_cast<double>(rank); }
};

// Adapter context for one forward pass. dropout_masks holds per-projection
// input masks keyed "blk<l>.<proj>" (already scaled by 1/(1-p)); null means
// evaluation mode, adapters active but undropped.
struct LoraRun {
  LoraConfig cfg;
  const std::map<std::string, Matrix>* dropout_masks = nullptr;
};

// Registers "decoder.*": embedding, causal blocks, final norm. Trainable
// until pretraining freezes them.
void init_decoder(ParamStore& ps, const DecoderShape& shape,
                  std::uint64_t seed);

// Registers "lora.blk<l>.<proj>.{A,B}" for proj in q/k/v/o. B starts at zero
// so the adapted model equals the frozen one bitwise.
void init_lora(ParamStore& ps, const DecoderShape& shape,
               const LoraConfig& cfg, std::uint64_t seed);

// Bernoulli keep-masks pre-scaled by 1/(1-p) for every adapted projection,
// shaped rows x d_dec and keyed the way the forward looks them up. Empty map
// when dropout is zero.
std::map<std::string, Matrix> lora_dropout_masks(const DecoderShape& shape,
                                                 const LoraConfig& cfg,
                                                 Index rows, RngStream rng);

// Exact embedding-table rows; empty input gives a 0 x d_dec matrix.
Matrix embed_tokens(const ParamStore& ps, const TokenSeq& tokens);

// Tape-side lookup (gradients flow to the table only while it is trainable).
GradTape::Ref decoder_embed(GradTape& t, ParamStore& ps,
                            const TokenSeq& tokens);

// Full causal forward over embedded rows (positions not yet added): logits
// over the vocab at every position via the tied head.
GradTape::Ref decoder_logits(GradTape& t, ParamStore& ps,
                             const DecoderShape& shape, GradTape::Ref x,
                             const LoraRun* lora = nullptr);

// Convenience no-grad wrapper.
Matrix decoder_logits_eval(ParamStore& ps, const DecoderShape& shape,
                           const Matrix& x, const LoraRun* lora = nullptr);

// Mean cross entropy over the listed rows; rows select loss positions
// (answer tokens for the main objective), targets are their token ids.
double ce_loss(const Matrix& logits, const std::vector<Index>& rows,
               const std::vector<TokenId>& targets);

struct DecoderPretrainConfig {
  int steps = 600;
  int batch = 16;
  double lr = 3e-3;
  double weight_decay = 0.0;
  int warmup = 50;
  int heldout = 64;  // trailing corpus samples reserved for the post-check
  std::uint64_t seed = 1;
};

struct PretrainReport {
  double heldout_ce = 0.0;  // per-token mean over the held-out split
  double final_train_loss = 0.0;
  std::string frozen_digest;
  int steps_run = 0;
};

// Plain next-token training on [BOS, instruction, answer] sequences; freezes
// "decoder.*" on return. Updates every trainable parameter in the store, so
// adapters and the mapper belong in the store only after this returns.
// steps = 0 freezes the random init as-is. With steps > 0 the held-out cross
// entropy must beat the uniform model (ln V) or a training error is raised.
PretrainReport pretrain_decoder(ParamStore& ps, const DecoderShape& shape,
                                const Vocab& vocab,
                                const std::vector<SampleTuple>& corpus,
                                const DecoderPretrainConfig& cfg);

// Greedy decoding from [prefix ; instruction]: argmax per step (ties toward
// the lowest token id) until eos, max_new tokens, or position capacity. The
// returned sequence includes the terminating eos when one was emitted.
TokenSeq generate_greedy(ParamStore& ps, const DecoderShape& shape,
                         const Matrix& prefix, const TokenSeq& instruction,
                         Index max_new, TokenId eos,
                         const LoraRun* lora = nullptr);

// Max abs logit deviation between the unmerged adapter path and a copy of
// the decoder with s*A*B folded into the attention weights. Evaluation mode.
double lora_merge_check(const ParamStore& ps, const DecoderShape& shape,
                        const LoraConfig& cfg, const Matrix& probe_embeds);

}  // namespace mats
