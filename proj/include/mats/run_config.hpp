#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mats/eval_harness.hpp"
#include "mats/io.hpp"

namespace mats {

// Flat key=value run configuration. '#' starts a comment (whole line or
// trailing), blank lines are skipped, keys are dotted lowercase names from
// the schema below. Duplicate and unknown keys are rejected by name, so a
// typo never silently falls back to a default.
//
// Schema (defaults in the owning structs):
//   master_seed                       rewrites every stage seed when present
//   world.seed .classes .latent_dim .embed_dim .rho .gap .vocab_size
//        .attributes
//   encoder.mode (parametric|contrastive) .seed .nu .normalize
//   contrastive.pairs .epochs .batch .lr .temperature .seed
//   sizes.train_cls .train_cap .train_aqa .test_cls .test_cap .test_aqa
//   corpus.seed
//   decoder.d_dec .n_layers .n_heads .max_len
//   pretrain.steps .batch .lr .weight_decay .warmup .heldout .seed
//   mapper.queries .d_model .n_layers .n_heads
//   train.lr .weight_decay .clip_norm .scheduler (linear|cosine)
//        .warmup_steps .batch_size .total_steps .seed .sigma_source
//        (estimated|fixed) .sigma_value .sigma_pairs
//   lora.rank .alpha .dropout
//   santa.sigma .memory_size .clusters .top_l .tau .lambda .kmeans_iters
//        .no_kmeans .no_memory_bank .no_audio_embedding .no_gaussian_noise
//   seeds.decoder_init .mapper_init .lora_init .bank .eval
//   eval.max_new
//
// master_seed applies first; explicitly set seed keys then override the
// rewritten values individually.
struct KvConfig {
  std::vector<std::pair<std::string, std::string>> entries;  // file order

  const std::string* find(const std::string& key) const;
  // Appends, or replaces the value in place (the override path).
  void set(const std::string& key, const std::string& value);
};

KvConfig parse_kv_text(const std::string& text);
KvConfig load_kv_file(const std::string& path);

// In-place "key=value" override, e.g. from a command-line flag.
void apply_override(KvConfig& cfg, const std::string& assignment);

// Schema-checked application of the entries onto default-constructed
// configs. ConfigError names the offending key for unknown keys, malformed
// values, and out-of-domain enum strings.
ExperimentConfig experiment_from_kv(const KvConfig& kv);

// Every schema key (master_seed excluded: it is already expanded) with its
// resolved value, in schema order. Feeding the dump back through
// experiment_from_kv reproduces the config exactly.
Json resolved_config_json(const ExperimentConfig& cfg);

// Manifest for one executed command: resolved config and digest, named
// input/output artifact digests, and a single trailing timestamp field,
// which is the only nondeterministic byte in any emitted artifact.
Json run_manifest(const std::string& command, const ExperimentConfig& cfg,
                  const std::map<std::string, std::string>& inputs,
                  const std::map<std::string, std::string>& outputs);

// Digest of a file's raw bytes, for manifest input/output entries.
std::string file_digest(const std::string& path);

}  // namespace mats
