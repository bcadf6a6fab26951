#include "mats/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>

#include "mats/digest.hpp"
#include "mats/error.hpp"
#include "mats/io.hpp"
#include "mats/metrics.hpp"
#include "mats/modality_transfer.hpp"
#include "mats/rng.hpp"

namespace mats {

std::string TrainConfig::digest() const {
  Digest d;
  d.str("train-config");
  d.f64(lr).f64(weight_decay).f64(clip_norm);
  d.u64(scheduler == Scheduler::cosine ? 1 : 0);
  d.u64(static_cast<std::uint64_t>(warmup_steps));
  d.u64(static_cast<std::uint64_t>(batch_size));
  d.u64(static_cast<std::uint64_t>(total_steps));
  d.u64(seed);
  d.str(sigma_source).f64(sigma_value);
  d.u64(static_cast<std::uint64_t>(sigma_pairs));
  d.u64(static_cast<std::uint64_t>(lora.rank));
  d.f64(lora.alpha).f64(lora.dropout);
  return d.hex();
}

void validate_train_config(const TrainConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("lr must be > 0");
  if (cfg.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(cfg.clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
  if (cfg.warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (cfg.total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (cfg.warmup_steps > cfg.total_steps)
    throw ConfigError("warmup_steps must not exceed total_steps");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.sigma_source != "estimated" && cfg.sigma_source != "fixed")
    throw ConfigError("sigma_source must be estimated|fixed");
  if (cfg.sigma_value < 0.0) throw ConfigError("sigma_value must be >= 0");
  if (cfg.sigma_source == "estimated" && cfg.sigma_pairs < 2)
    throw ConfigError("sigma_pairs must be >= 2");
  if (cfg.lora.rank < 1) throw ConfigError("lora rank must be >= 1");
  if (!(cfg.lora.dropout >= 0.0 && cfg.lora.dropout < 1.0))
    throw ConfigError("lora dropout must lie in [0, 1)");
}

TrainSet assemble_dataset(const DualEncoder& enc,
                          const std::vector<SampleTuple>& samples,
                          double sigma, std::uint64_t seed) {
  if (!enc.frozen) throw UsageError("assemble_dataset: encoder not frozen");
  if (samples.empty()) throw UsageError("assemble_dataset: no samples");
  if (sigma < 0.0) throw UsageError("assemble_dataset: sigma must be >= 0");

  TrainSet set;
  set.samples = samples;
  set.sigma = sigma;
  set.seed = seed;
  set.text_embeds.resize(static_cast<Index>(samples.size()), enc.d);
  RngStream base = RngStream(seed).fork("enc_t");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    RngStream rng = base.fork_index(i);
    set.text_embeds.row(static_cast<Index>(i)) =
        encode_text(enc, samples[i].content, rng).transpose();
  }
  return set;
}

std::vector<std::int64_t> epoch_order(const TrainSet& set, std::int64_t epoch) {
  if (epoch < 0) throw UsageError("epoch_order: epoch must be >= 0");
  return shuffled_indices(
      set.text_embeds.rows(),
      RngStream(set.seed).fork("order").fork_index(
          static_cast<std::uint64_t>(epoch)));
}

Vector augmented_embedding(const TrainSet& set, std::int64_t epoch,
                           Index sample) {
  if (epoch < 0) throw UsageError("augmented_embedding: epoch must be >= 0");
  if (sample < 0 || sample >= set.text_embeds.rows())
    throw UsageError("augmented_embedding: sample out of range");
  RngStream rng = RngStream(set.seed)
                      .fork("noise")
                      .fork_index(static_cast<std::uint64_t>(epoch))
                      .fork_index(static_cast<std::uint64_t>(sample));
  Vector z = set.text_embeds.row(sample).transpose();
  return inject_noise(z, set.sigma, rng);
}

TrainState init_train_state(const ParamStore& ps) {
  TrainState st;
  st.opt.init(ps);
  return st;
}

namespace {

// Loss for one sample: prefix rows from the mapper, then the instruction and
// all answer tokens but the last, with cross entropy on the answer positions.
GradTape::Ref sample_loss(GradTape& t, ParamStore& ps,
                          const MapperShape& mshape, const DecoderShape& dshape,
                          const SampleTuple& s, const Vector& z,
                          const LoraRun* run, std::int64_t& answer_tokens) {
  if (s.answer_ids.empty())
    throw UsageError("sample_loss: sample has no answer tokens");
  GradTape::Ref x = mapper_forward(t, ps, mshape, z);
  TokenSeq fed = s.instruction_ids;
  fed.insert(fed.end(), s.answer_ids.begin(), s.answer_ids.end() - 1);
  if (!fed.empty()) x = t.concat_rows(x, decoder_embed(t, ps, fed));
  GradTape::Ref logits = decoder_logits(t, ps, dshape, x, run);

  const Index q = mshape.queries;
  const auto m = static_cast<Index>(s.instruction_ids.size());
  const auto n = static_cast<Index>(s.answer_ids.size());
  std::vector<Index> rows;
  std::vector<TokenId> targets;
  rows.reserve(static_cast<std::size_t>(n));
  targets.reserve(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) {
    rows.push_back(q + m + j - 1);
    targets.push_back(s.answer_ids[static_cast<std::size_t>(j)]);
  }
  answer_tokens = n;
  return t.cross_entropy_rows(logits, std::move(rows), std::move(targets));
}

// Per-token mean over the batch that position `step` defines in the epoch
// streams. Dropout masks are drawn only in train mode.
GradTape::Ref build_batch_loss(GradTape& t, ParamStore& ps,
                               const MapperShape& mshape,
                               const DecoderShape& dshape, const TrainSet& set,
                               std::int64_t step, const TrainConfig& cfg,
                               bool train_mode) {
  const std::int64_t n = set.text_embeds.rows();
  std::map<std::int64_t, std::vector<std::int64_t>> orders;
  GradTape::Ref weighted = -1;
  std::int64_t total_tokens = 0;

  for (int b = 0; b < cfg.batch_size; ++b) {
    const std::int64_t pos = step * cfg.batch_size + b;
    const std::int64_t epoch = pos / n;
    const std::int64_t slot = pos % n;
    auto it = orders.find(epoch);
    if (it == orders.end())
      it = orders.emplace(epoch, epoch_order(set, epoch)).first;
    const auto id = static_cast<Index>(it->second[
        static_cast<std::size_t>(slot)]);
    const SampleTuple& s = set.samples[static_cast<std::size_t>(id)];
    Vector z = augmented_embedding(set, epoch, id);

    std::map<std::string, Matrix> masks;
    if (train_mode && cfg.lora.dropout > 0.0) {
      const Index rows = mshape.queries +
                         static_cast<Index>(s.instruction_ids.size()) +
                         static_cast<Index>(s.answer_ids.size()) - 1;
      masks = lora_dropout_masks(
          dshape, cfg.lora, rows,
          RngStream(cfg.seed)
              .fork("dropout")
              .fork_index(static_cast<std::uint64_t>(step))
              .fork_index(static_cast<std::uint64_t>(b)));
    }
    LoraRun run;
    run.cfg = cfg.lora;
    run.dropout_masks = masks.empty() ? nullptr : &masks;

    std::int64_t n_tokens = 0;
    GradTape::Ref li = sample_loss(t, ps, mshape, dshape, s, z, &run,
                                   n_tokens);
    GradTape::Ref wi = t.scale(li, static_cast<double>(n_tokens));
    weighted = (b == 0) ? wi : t.add(weighted, wi);
    total_tokens += n_tokens;
  }
  return t.scale(weighted, 1.0 / static_cast<double>(total_tokens));
}

}  // namespace

StepStats train_step(ParamStore& ps, TrainState& st, const MapperShape& mshape,
                     const DecoderShape& dshape, const TrainSet& set,
                     const TrainConfig& cfg) {
  if (st.opt.param_indices.empty())
    throw UsageError("train_step: state captured no trainable parameters");
  StepStats out;
  out.lr = lr_at(st.step, cfg.total_steps, cfg.warmup_steps, cfg.lr,
                 cfg.scheduler);

  GradTape t(8192);
  GradTape::Ref loss = build_batch_loss(t, ps, mshape, dshape, set, st.step,
                                        cfg, /*train_mode=*/true);
  out.loss = t.scalar(loss);
  if (!std::isfinite(out.loss))
    throw TrainError("train_step: non-finite loss " +
                     std::to_string(out.loss) + " at step " +
                     std::to_string(st.step));
  ps.zero_grads();
  t.backward(loss);
  clip_global_norm(ps, cfg.clip_norm);
  AdamWConfig adam;
  adam.weight_decay = cfg.weight_decay;
  adamw_step(ps, st.opt, out.lr, adam);
  st.step += 1;
  return out;
}

double batch_loss(ParamStore& ps, const MapperShape& mshape,
                  const DecoderShape& dshape, const TrainSet& set,
                  std::int64_t step, const TrainConfig& cfg, bool train_mode) {
  GradTape t(8192);
  return t.scalar(
      build_batch_loss(t, ps, mshape, dshape, set, step, cfg, train_mode));
}

TrainResult run_training(const WorldSpec& world, const DualEncoder& enc,
                         ParamStore& ps, TrainState& st,
                         const MapperShape& mshape, const DecoderShape& dshape,
                         const Corpus& corpus, const TrainConfig& cfg,
                         std::int64_t stop_at) {
  validate_train_config(cfg);
  if (!enc.frozen) throw UsageError("run_training: encoder not frozen");
  if (corpus.train.empty()) throw UsageError("run_training: empty train split");
  for (const auto& name : ps.names_with_prefix("decoder."))
    if (ps.at(name).trainable)
      throw UsageError("run_training: decoder must be frozen ('" + name +
                       "' is trainable)");
  if (st.step < 0 || st.step > cfg.total_steps)
    throw UsageError("run_training: state step outside the schedule");

  TrainResult res;
  res.sigma = cfg.sigma_source == "fixed"
                  ? cfg.sigma_value
                  : estimate_sigma_world(world, enc, cfg.sigma_pairs,
                                         RngStream(cfg.seed).fork("sigma")
                                             .seed());
  TrainSet set = assemble_dataset(enc, corpus.train, res.sigma, cfg.seed);

  const std::int64_t last =
      stop_at < 0 ? cfg.total_steps
                  : std::min<std::int64_t>(stop_at, cfg.total_steps);
  res.decoder_digest = ps.digest_prefix("decoder.");
  while (st.step < last) {
    const std::int64_t step = st.step;
    StepStats stats = train_step(ps, st, mshape, dshape, set, cfg);
    res.curve.push_back({step, stats.lr, stats.loss});
    res.final_loss = stats.loss;
    res.steps_run += 1;
  }

  if (ps.digest_prefix("decoder.") != res.decoder_digest)
    throw TrainError("run_training: frozen decoder parameters changed");
  res.mapper_digest = ps.digest_prefix("mapper.");
  res.lora_digest = ps.digest_prefix("lora.");
  return res;
}

void save_loss_curve(const std::string& path,
                     const std::vector<TrainLogRow>& curve) {
  std::string out = "step,lr,loss\n";
  char line[96];
  for (const auto& row : curve) {
    std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g\n",
                  static_cast<long long>(row.step), row.lr, row.loss);
    out += line;
  }
  write_file_bytes(path, out);
}

void save_checkpoint(const std::string& path, const ParamStore& ps,
                     const TrainState& st, const CheckpointMeta& meta) {
  BinWriter w;
  w.magic("MATSCK01");
  w.str(meta.config_digest);
  w.str(meta.world_digest);
  w.u64(meta.seed);
  w.u64(static_cast<std::uint64_t>(st.step));
  w.u64(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    w.str(ps.name_at(i));
    w.u8(ps.param_at(i).trainable ? 1 : 0);
    w.matrix(ps.param_at(i).value);
  }
  w.u64(st.opt.param_indices.size());
  for (std::size_t i = 0; i < st.opt.param_indices.size(); ++i) {
    w.u64(st.opt.param_indices[i]);
    w.matrix(st.opt.m[i]);
    w.matrix(st.opt.v[i]);
  }
  w.u64(static_cast<std::uint64_t>(st.opt.step));
  write_file_bytes(path, w.bytes());
}

CheckpointMeta load_checkpoint(const std::string& path, ParamStore& ps,
                               TrainState& st) {
  const std::string bytes = read_file_bytes(path);
  BinReader r(bytes);
  r.magic("MATSCK01");
  CheckpointMeta meta;
  meta.config_digest = r.str();
  meta.world_digest = r.str();
  meta.seed = r.u64();
  meta.step = static_cast<std::int64_t>(r.u64());

  const std::uint64_t n_params = r.u64();
  if (n_params != ps.size())
    throw IoError("checkpoint '" + path + "': parameter count mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const std::string name = r.str();
    if (name != ps.name_at(i))
      throw IoError("checkpoint '" + path + "': parameter order mismatch at '" +
                    name + "'");
    const bool trainable = r.u8() != 0;
    Matrix value = r.matrix();
    Param& p = ps.at(name);
    if (value.rows() != p.value.rows() || value.cols() != p.value.cols())
      throw IoError("checkpoint '" + path + "': shape mismatch for '" + name +
                    "'");
    p.value = std::move(value);
    p.trainable = trainable;
  }

  const std::uint64_t n_opt = r.u64();
  st.opt.param_indices.assign(n_opt, 0);
  st.opt.m.assign(n_opt, Matrix());
  st.opt.v.assign(n_opt, Matrix());
  for (std::uint64_t i = 0; i < n_opt; ++i) {
    const std::uint64_t idx = r.u64();
    if (idx >= ps.size())
      throw IoError("checkpoint '" + path + "': optimizer index out of range");
    if (!ps.param_at(idx).trainable)
      throw IoError("checkpoint '" + path +
                    "': optimizer state on a frozen parameter");
    st.opt.param_indices[i] = idx;
    st.opt.m[i] = r.matrix();
    st.opt.v[i] = r.matrix();
    const Param& p = ps.param_at(idx);
    if (st.opt.m[i].rows() != p.value.rows() ||
        st.opt.m[i].cols() != p.value.cols() ||
        st.opt.v[i].rows() != p.value.rows() ||
        st.opt.v[i].cols() != p.value.cols())
      throw IoError("checkpoint '" + path + "': optimizer shape mismatch");
  }
  st.opt.step = static_cast<std::int64_t>(r.u64());
  st.step = meta.step;
  if (!r.at_end())
    throw IoError("checkpoint '" + path + "': trailing bytes");
  return meta;
}

}  // namespace mats
