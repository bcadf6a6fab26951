#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mats/clap_surrogate.hpp"
#include "mats/decoder_lm.hpp"
#include "mats/io.hpp"
#include "mats/mapper.hpp"
#include "mats/modality_transfer.hpp"
#include "mats/synth_world.hpp"
#include "mats/training.hpp"
#include "mats/types.hpp"

namespace mats {

// Cross-modal evaluation and the experiment machinery on top of it: greedy
// generation from either embedding side, text-matching classification,
// caption exact-match/F1, yes-no QA, gap diagnostics, ablation tables, and
// parameter sweeps. Evaluation runs parallel across samples (MATS_THREADS
// caps the workers) with per-sample rng keys, so reports do not depend on
// the thread count.

enum class InputSide { audio, text_oracle };

const char* input_side_name(InputSide side);
InputSide input_side_from_name(const std::string& name);

struct EvalConfig {
  InputSide side = InputSide::audio;
  SantaConfig santa;   // audio side: projection; text side: sigma of the
                       // oracle noise (train-style input)
  LoraConfig lora;     // scale/dropout of the adapters inside the store
  Index max_new = 8;
  std::uint64_t seed = 1;

  std::string digest() const;
};

// "full" when every stage is active, otherwise the disabled stages joined
// with '+', e.g. "no_gn+no_mb".
std::string santa_mode_name(const SantaConfig& cfg);

struct PredictionRecord {
  int index = 0;     // position in the evaluated split
  int class_id = 0;  // ground-truth content class
  std::string reference;
  std::string prediction;
  double score = 0.0;      // per-sample headline metric
  int matched_class = -1;  // cls only: text-matching argmax
};

// Every metric is recomputable from the carried records; to_json embeds them
// for exactly that reason.
struct EvalReport {
  Task task = Task::cls;
  InputSide side = InputSide::audio;
  std::string santa_mode;
  std::string config_digest;
  int n = 0;
  int correct = 0;     // cls/aqa
  int off_answer = 0;  // aqa generations naming neither yes nor no
  double accuracy = 0.0;     // cls/aqa
  double exact_match = 0.0;  // cap
  double token_f1 = 0.0;     // cap
  std::vector<int> class_n;          // per ground-truth class
  std::vector<double> class_score;   // per-class mean of the headline metric
  std::vector<PredictionRecord> records;

  double headline() const;  // accuracy, or token_f1 for captions
  Json to_json() const;
};

// Order-insensitive multiset F1 between two token sequences; identical
// sequences give 1, disjoint ones 0, two empty sequences count as identical.
double multiset_token_f1(const TokenSeq& pred, const TokenSeq& ref);

// Text-matching protocol: the free-text answer and every candidate are
// embedded by the clean text-side encoder (view noise off) as the mean
// embedding of the class prototypes named inside the string; argmax dot
// similarity, ties toward the lowest index. Strings naming no class embed
// to zero and therefore resolve to index 0.
Index match_text(const DualEncoder& enc, const WorldSpec& world,
                 const std::string& text,
                 const std::vector<std::string>& candidates);

// Energy distance V-statistic between two samples (rows are points):
// 2 E|x-y| - E|x-x'| - E|y-y'|. Symmetric, nonnegative, zero on identical
// samples.
double energy_distance(const Matrix& xs, const Matrix& ys);

// Task-specific evaluation over samples of that task only (UsageError on a
// mixed or empty split). The audio side runs encode -> santa -> mapper ->
// greedy decode; the text oracle side replaces the audio embedding with the
// train-style z_text + noise. bank == nullptr skips the projection entirely.
EvalReport eval_cls(const WorldSpec& world, const DualEncoder& enc,
                    ParamStore& ps, const MapperShape& mshape,
                    const DecoderShape& dshape, const MemoryBank* bank,
                    const std::vector<SampleTuple>& samples,
                    const EvalConfig& cfg);
EvalReport eval_caption(const WorldSpec& world, const DualEncoder& enc,
                        ParamStore& ps, const MapperShape& mshape,
                        const DecoderShape& dshape, const MemoryBank* bank,
                        const std::vector<SampleTuple>& samples,
                        const EvalConfig& cfg);
EvalReport eval_aqa(const WorldSpec& world, const DualEncoder& enc,
                    ParamStore& ps, const MapperShape& mshape,
                    const DecoderShape& dshape, const MemoryBank* bank,
                    const std::vector<SampleTuple>& samples,
                    const EvalConfig& cfg);

// Risk decomposition diagnostics on a paired classification split: train
// risk with train-style text inputs, test risk through the full audio path,
// and a per-class energy-distance proxy between the two post-processing
// embedding clouds. The discrepancy term this proxies is not directly
// computable over a hypothesis class; the proxy is labeled as such in every
// output. Classes absent from the split are skipped and flagged.
struct GapDiagnostics {
  double risk_train = 0.0;  // text-side 0/1 error
  double risk_test = 0.0;   // audio-side 0/1 error
  std::vector<double> class_proxy;
  std::vector<bool> class_skipped;
  double max_proxy = 0.0;
  int n = 0;
  int classes_evaluated = 0;
  bool ceiling_ok = true;  // text-side accuracy >= audio-side accuracy
  Json to_json() const;
};

GapDiagnostics gap_diagnostics(const WorldSpec& world, const DualEncoder& enc,
                               ParamStore& ps, const MapperShape& mshape,
                               const DecoderShape& dshape,
                               const MemoryBank* bank,
                               const std::vector<SampleTuple>& paired_cls,
                               const EvalConfig& cfg);

// One self-contained run: world, parametric encoder, corpus, decoder
// pretraining, mapper+adapter training, memory bank. The bank reuses the
// resolved training sigma and is clamped to the number of candidate texts.
struct ExperimentConfig {
  WorldConfig world;
  EncoderConfig encoder;
  std::string encoder_mode = "parametric";  // parametric | contrastive
  ContrastiveConfig contrastive;            // contrastive mode only
  CorpusSizes sizes;
  std::uint64_t corpus_seed = 2;
  DecoderShape decoder;  // vocab is overwritten from the world
  DecoderPretrainConfig pretrain;
  MapperShape mapper;
  TrainConfig train;
  SantaConfig santa;
  std::uint64_t decoder_init_seed = 5;
  std::uint64_t mapper_init_seed = 6;
  std::uint64_t lora_init_seed = 7;
  std::uint64_t bank_seed = 8;
  std::uint64_t eval_seed = 9;
  Index max_new = 8;

  std::string digest() const;
};

// Rewrites every seed in the config from labeled forks of one master seed;
// repetitions of an experiment differ in nothing else.
ExperimentConfig reseed(ExperimentConfig cfg, std::uint64_t seed);

struct TrainedModel {
  WorldSpec world;
  DualEncoder enc;
  Corpus corpus;
  ParamStore ps;
  MapperShape mshape;
  DecoderShape dshape;
  LoraConfig lora;
  SantaConfig santa;   // sigma rewritten to the resolved training noise
  double sigma = 0.0;  // resolved training noise
  MemoryBank bank;
  TrainResult train_result;
  Index max_new = 8;
  std::string config_digest;
};

TrainedModel run_pipeline(const ExperimentConfig& cfg);

// Evaluation wrappers over the model's own test split (filtered by task).
EvalConfig eval_config_for(const TrainedModel& model, InputSide side,
                           std::uint64_t seed, Index max_new);
EvalReport eval_task(TrainedModel& model, Task task, InputSide side,
                     std::uint64_t seed);
// Mean of cls accuracy, caption token F1, and aqa accuracy.
double composite_metric(TrainedModel& model, InputSide side,
                        std::uint64_t seed);

// Ablation modes: "full", "no_gn" (noise off during training and bank
// build), "no_ae" (projection drops the audio embedding), "no_kmeans"
// (retrieval over the whole bank), "no_mb" (no bank mixing). Only no_gn
// retrains; the other modes reuse one trained model per seed.
void apply_mode(ExperimentConfig& cfg, const std::string& mode);

struct AblationCell {
  std::string mode;
  std::uint64_t seed = 0;
  double cls_acc = 0.0;
  double cap_f1 = 0.0;
  double aqa_acc = 0.0;
  double composite = 0.0;
};

struct AblationSummary {
  std::string mode;
  double mean = 0.0;
  double stddev = 0.0;  // sample std over seeds; 0 for a single seed
  int seeds = 0;
};

struct AblationTable {
  std::vector<AblationCell> cells;        // mode-major, seed-minor
  std::vector<AblationSummary> summary;   // one row per mode, input order
  std::string to_csv() const;             // aggregate rows
  Json to_json() const;                   // cells + aggregates
};

AblationTable run_ablation(const ExperimentConfig& base,
                           const std::vector<std::string>& modes,
                           const std::vector<std::uint64_t>& seeds);

// Sweep parameters: sigma, tau, top_l, lambda, memory_size, clusters, rank,
// scale, mapper_layers. Inference-side parameters reuse one trained model
// per seed; training-side parameters retrain per grid point.
struct SweepSpec {
  std::string parameter;
  std::vector<double> grid;
  std::string metric = "composite";  // composite|cls_acc|cap_f1|aqa_acc
  std::vector<std::uint64_t> seeds = {1};
};

// Throws ConfigError naming the offending field or grid value.
void validate_sweep_spec(const SweepSpec& spec);

struct SweepCell {
  double x = 0.0;
  std::uint64_t seed = 0;
  double value = 0.0;
};

struct SweepTable {
  SweepSpec spec;
  std::vector<SweepCell> cells;  // grid-major, seed-minor
  std::string to_csv() const;    // "x,seed,metric" rows, plot-ready
  Json to_json() const;
};

SweepTable run_sweep(const ExperimentConfig& base, const SweepSpec& spec);

// World-gap study backing the risk-bound diagnostics: per (g, seed) one
// full pipeline, audio-side test error, and the max-over-class proxy with
// the projection on and off.
struct GapStudyRow {
  double g = 0.0;
  std::uint64_t seed = 0;
  double audio_error = 0.0;
  double proxy_projected = 0.0;
  double proxy_raw = 0.0;
};

struct GapStudyTable {
  std::vector<GapStudyRow> rows;  // g-major, seed-minor
  std::string to_csv() const;
  Json to_json() const;
};

GapStudyTable run_gap_study(const ExperimentConfig& base,
                            const std::vector<double>& g_grid,
                            const std::vector<std::uint64_t>& seeds);

}  // namespace mats
