#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mats/clap_surrogate.hpp"
#include "mats/decoder_lm.hpp"
#include "mats/mapper.hpp"
#include "mats/optim.hpp"
#include "mats/param_store.hpp"
#include "mats/synth_world.hpp"
#include "mats/types.hpp"

namespace mats {

// Text-only supervised training. The decoder never sees an audio embedding
// here: each step draws noise-augmented text embeddings, maps them to prefix
// rows, and optimizes the mapper and the adapters against the answer tokens.
// Everything a step consumes is derived from (seed, step), which is what
// makes checkpoint resume bitwise.

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  Scheduler scheduler = Scheduler::cosine;
  int warmup_steps = 200;
  int batch_size = 32;
  int total_steps = 5000;
  std::uint64_t seed = 1;
  std::string sigma_source = "estimated";  // estimated | fixed
  double sigma_value = 0.015;              // used when sigma_source = fixed
  int sigma_pairs = 30;                    // probe pairs for the estimate
  LoraConfig lora;

  std::string digest() const;
};

void validate_train_config(const TrainConfig& cfg);

// Frozen-encoder text embeddings, computed once; noise is drawn on top per
// epoch pass at batch time.
struct TrainSet {
  Matrix text_embeds;  // N x d, noise-free
  std::vector<SampleTuple> samples;
  double sigma = 0.0;
  std::uint64_t seed = 0;  // keys the noise and epoch-order streams
};

TrainSet assemble_dataset(const DualEncoder& enc,
                          const std::vector<SampleTuple>& samples,
                          double sigma, std::uint64_t seed);

// Sample visit order for one epoch pass; reproducible from the set seed.
std::vector<std::int64_t> epoch_order(const TrainSet& set, std::int64_t epoch);

// Embedding with that epoch's noise draw for one sample. Keyed by (epoch,
// sample id), so the draw is independent of visit order and fresh per pass.
Vector augmented_embedding(const TrainSet& set, std::int64_t epoch,
                           Index sample);

struct TrainState {
  OptState opt;
  std::int64_t step = 0;
};

// Captures the trainable subset (call after every freeze is in place).
TrainState init_train_state(const ParamStore& ps);

struct StepStats {
  double loss = 0.0;
  double lr = 0.0;
};

// One optimizer step on the batch that position `step` defines: per-token
// mean cross entropy over the batch answer tokens, global-norm clip, AdamW.
StepStats train_step(ParamStore& ps, TrainState& st, const MapperShape& mshape,
                     const DecoderShape& dshape, const TrainSet& set,
                     const TrainConfig& cfg);

// The same batch loss without touching parameters. train_mode keeps the
// adapter dropout draws; otherwise dropout is disabled (evaluation).
double batch_loss(ParamStore& ps, const MapperShape& mshape,
                  const DecoderShape& dshape, const TrainSet& set,
                  std::int64_t step, const TrainConfig& cfg, bool train_mode);

struct TrainLogRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<TrainLogRow> curve;  // one row per executed step
  double final_loss = 0.0;
  double sigma = 0.0;
  std::int64_t steps_run = 0;
  std::string decoder_digest;  // frozen, asserted unchanged
  std::string mapper_digest;
  std::string lora_digest;
};

// Runs st.step .. cfg.total_steps-1 and appends to the curve; enforces the
// freeze discipline on "decoder." before and after. The encoder must be
// frozen; sigma comes from the config source (estimated re-measures on the
// world through the encoder). stop_at truncates the run (for mid-run
// checkpoints) without touching the schedule; negative means run to the end.
TrainResult run_training(const WorldSpec& world, const DualEncoder& enc,
                         ParamStore& ps, TrainState& st,
                         const MapperShape& mshape, const DecoderShape& dshape,
                         const Corpus& corpus, const TrainConfig& cfg,
                         std::int64_t stop_at = -1);

void save_loss_curve(const std::string& path,
                     const std::vector<TrainLogRow>& curve);

struct CheckpointMeta {
  std::string config_digest;
  std::string world_digest;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
};

// Unified artifact: every store parameter (frozen decoder included), the
// optimizer moments, and the stream seed, which is the entire rng state for
// counter-based streams. Bitwise round trips.
void save_checkpoint(const std::string& path, const ParamStore& ps,
                     const TrainState& st, const CheckpointMeta& meta);

// Restores values, trainable flags, and optimizer state into a store with
// identical parameter names and shapes (build it with the same init calls).
CheckpointMeta load_checkpoint(const std::string& path, ParamStore& ps,
                               TrainState& st);

}  // namespace mats
