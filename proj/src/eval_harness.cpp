#include "mats/eval_harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mats/digest.hpp"
#include "mats/error.hpp"

namespace mats {

const char* input_side_name(InputSide side) {
  return side == InputSide::audio ? "audio" : "text_oracle";
}

InputSide input_side_from_name(const std::string& name) {
  if (name == "audio") return InputSide::audio;
  if (name == "text_oracle") return InputSide::text_oracle;
  throw ConfigError("input side '" + name +
                    "' is not one of audio, text_oracle");
}

std::string santa_mode_name(const SantaConfig& cfg) {
  std::vector<const char*> off;
  if (cfg.no_gaussian_noise) off.push_back("no_gn");
  if (cfg.no_audio_embedding) off.push_back("no_ae");
  if (cfg.no_kmeans) off.push_back("no_kmeans");
  if (cfg.no_memory_bank) off.push_back("no_mb");
  if (off.empty()) return "full";
  std::string out = off[0];
  for (std::size_t i = 1; i < off.size(); ++i) {
    out += '+';
    out += off[i];
  }
  return out;
}

std::string EvalConfig::digest() const {
  Digest d;
  d.str(input_side_name(side));
  d.u64(seed);
  d.u64(static_cast<std::uint64_t>(max_new));
  d.f64(santa.sigma).u64(static_cast<std::uint64_t>(santa.memory_size));
  d.u64(static_cast<std::uint64_t>(santa.clusters));
  d.u64(static_cast<std::uint64_t>(santa.top_l));
  d.f64(santa.tau).f64(santa.lambda);
  d.u64(static_cast<std::uint64_t>(santa.kmeans_iters));
  d.u64(santa.no_kmeans).u64(santa.no_memory_bank);
  d.u64(santa.no_audio_embedding).u64(santa.no_gaussian_noise);
  d.u64(static_cast<std::uint64_t>(lora.rank)).f64(lora.alpha);
  d.f64(lora.dropout);
  return d.hex();
}

double multiset_token_f1(const TokenSeq& pred, const TokenSeq& ref) {
  if (pred.empty() && ref.empty()) return 1.0;
  if (pred.empty() || ref.empty()) return 0.0;
  std::map<TokenId, int> counts;
  for (TokenId t : ref) ++counts[t];
  int inter = 0;
  for (TokenId t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++inter;
    }
  }
  return 2.0 * inter / static_cast<double>(pred.size() + ref.size());
}

namespace {

// Clean text-side embedding (view noise off) of one class prototype.
Matrix class_embeddings(const DualEncoder& enc, const WorldSpec& world) {
  DualEncoder quiet = enc;
  quiet.nu = 0.0;
  Matrix out(world.cfg.classes, enc.d);
  for (int k = 0; k < world.cfg.classes; ++k) {
    ContentDescriptor c;
    c.class_id = k;
    c.latent = world.prototypes.row(k).transpose();
    RngStream rng(0);
    out.row(k) = encode_text(quiet, c, rng).transpose();
  }
  return out;
}

// Mean of the class-prototype embeddings named inside the string; zero when
// nothing matches. Plain whitespace split so arbitrary text is accepted.
Vector string_embedding(const WorldSpec& world, const Matrix& class_embeds,
                        const std::string& text) {
  Vector acc = Vector::Zero(class_embeds.cols());
  int hits = 0;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    for (int k = 0; k < world.cfg.classes; ++k) {
      if (word == world.class_names[k]) {
        acc += class_embeds.row(k).transpose();
        ++hits;
      }
    }
  }
  if (hits > 0) acc /= static_cast<double>(hits);
  return acc;
}

}  // namespace

Index match_text(const DualEncoder& enc, const WorldSpec& world,
                 const std::string& text,
                 const std::vector<std::string>& candidates) {
  if (candidates.empty()) throw UsageError("match_text: no candidates");
  const Matrix embeds = class_embeddings(enc, world);
  const Vector q = string_embedding(world, embeds, text);
  Index best = 0;
  double best_score = q.dot(string_embedding(world, embeds, candidates[0]));
  for (Index i = 1; i < static_cast<Index>(candidates.size()); ++i) {
    const double s = q.dot(string_embedding(world, embeds, candidates[i]));
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

double energy_distance(const Matrix& xs, const Matrix& ys) {
  if (xs.cols() != ys.cols())
    throw UsageError("energy_distance: dimension mismatch");
  if (xs.rows() < 1 || ys.rows() < 1)
    throw UsageError("energy_distance: empty sample");
  const Index nx = xs.rows(), ny = ys.rows();
  // Cross term accumulated in both nesting orders and averaged so the result
  // is bitwise symmetric in the two arguments.
  double cross_x = 0.0;
  for (Index i = 0; i < nx; ++i)
    for (Index j = 0; j < ny; ++j) cross_x += (xs.row(i) - ys.row(j)).norm();
  double cross_y = 0.0;
  for (Index j = 0; j < ny; ++j)
    for (Index i = 0; i < nx; ++i) cross_y += (ys.row(j) - xs.row(i)).norm();
  const double cross =
      (cross_x + cross_y) / (2.0 * static_cast<double>(nx) * ny);
  double xx = 0.0;
  for (Index i = 0; i < nx; ++i)
    for (Index j = 0; j < nx; ++j) xx += (xs.row(i) - xs.row(j)).norm();
  xx /= static_cast<double>(nx) * nx;
  double yy = 0.0;
  for (Index i = 0; i < ny; ++i)
    for (Index j = 0; j < ny; ++j) yy += (ys.row(i) - ys.row(j)).norm();
  yy /= static_cast<double>(ny) * ny;
  return std::max(0.0, 2.0 * cross - (xx + yy));
}

namespace {

int worker_count(Index n) {
  const unsigned hw = std::thread::hardware_concurrency();
  long w = hw > 0 ? static_cast<long>(hw) : 1;
  if (const char* s = std::getenv("MATS_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (end != s && v >= 1) w = std::min(w, v);
  }
  if (n < 1) return 1;
  return static_cast<int>(std::min<long>(w, static_cast<long>(n)));
}

// Runs fn(0..n-1) across workers; slot-indexed writes keep results
// independent of scheduling. The first exception wins and is rethrown.
template <typename Fn>
void for_each_sample(Index n, Fn&& fn) {
  const int workers = worker_count(n);
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::mutex mu;
  std::exception_ptr err;
  auto body = [&] {
    for (;;) {
      const Index i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) pool.emplace_back(body);
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

Vector input_embedding(const DualEncoder& enc, const MemoryBank* bank,
                       const EvalConfig& cfg, const SampleTuple& sample,
                       Index i) {
  if (cfg.side == InputSide::audio) {
    RngStream rng = RngStream(cfg.seed).fork("enc_a").fork_index(i);
    Vector z = encode_audio(enc, sample.content, rng);
    if (bank) z = santa_project(z, *bank, cfg.santa);
    return z;
  }
  RngStream rng = RngStream(cfg.seed).fork("enc_t").fork_index(i);
  Vector z = encode_text(enc, sample.content, rng);
  RngStream noise = RngStream(cfg.seed).fork("noise").fork_index(i);
  return inject_noise(z, cfg.santa.effective_sigma(), noise);
}

TokenSeq generate_answer(ParamStore& ps, const MapperShape& mshape,
                         const DecoderShape& dshape, const Vocab& vocab,
                         const Vector& z, const SampleTuple& sample,
                         const EvalConfig& cfg) {
  Matrix prefix = mapper_apply(ps, mshape, z);
  LoraRun run;
  run.cfg = cfg.lora;
  TokenSeq out = generate_greedy(ps, dshape, prefix, sample.instruction_ids,
                                 cfg.max_new, vocab.eos, &run);
  if (!out.empty() && out.back() == vocab.eos) out.pop_back();
  return out;
}

void require_split(Task task, const std::vector<SampleTuple>& samples) {
  if (samples.empty())
    throw UsageError(std::string("eval: empty ") + task_name(task) +
                     " split");
  for (const auto& s : samples)
    if (s.task != task)
      throw UsageError(std::string("eval: split for ") + task_name(task) +
                       " contains a " + task_name(s.task) + " sample");
}

// Shared skeleton: embed, generate, then let the task-specific scorer fill
// score/prediction fields. Aggregation runs sequentially in sample order.
template <typename Scorer>
EvalReport eval_generic(Task task, const WorldSpec& world,
                        const DualEncoder& enc, ParamStore& ps,
                        const MapperShape& mshape, const DecoderShape& dshape,
                        const MemoryBank* bank,
                        const std::vector<SampleTuple>& samples,
                        const EvalConfig& cfg, Scorer scorer) {
  require_split(task, samples);
  const Index n = static_cast<Index>(samples.size());
  EvalReport rep;
  rep.task = task;
  rep.side = cfg.side;
  rep.santa_mode = santa_mode_name(cfg.santa);
  rep.config_digest = cfg.digest();
  rep.n = static_cast<int>(n);
  rep.records.resize(samples.size());

  for_each_sample(n, [&](Index i) {
    const SampleTuple& s = samples[static_cast<std::size_t>(i)];
    PredictionRecord& rec = rep.records[static_cast<std::size_t>(i)];
    rec.index = static_cast<int>(i);
    rec.class_id = s.content.class_id;
    rec.reference = s.answer;
    const Vector z = input_embedding(enc, bank, cfg, s, i);
    const TokenSeq out =
        generate_answer(ps, mshape, dshape, world.vocab, z, s, cfg);
    rec.prediction = world.vocab.text(out);
    scorer(s, out, rec);
  });

  rep.class_n.assign(world.cfg.classes, 0);
  rep.class_score.assign(world.cfg.classes, 0.0);
  double em = 0.0, score_sum = 0.0;
  for (const auto& rec : rep.records) {
    if (rec.class_id < 0 || rec.class_id >= world.cfg.classes)
      throw UsageError("eval: sample class outside the world");
    rep.class_n[rec.class_id] += 1;
    rep.class_score[rec.class_id] += rec.score;
    score_sum += rec.score;
    if (rec.score == 1.0) rep.correct += 1;
    if (rec.prediction == rec.reference) em += 1.0;
  }
  for (int c = 0; c < world.cfg.classes; ++c)
    if (rep.class_n[c] > 0) rep.class_score[c] /= rep.class_n[c];
  if (task == Task::cap) {
    rep.exact_match = em / rep.n;
    rep.token_f1 = score_sum / rep.n;
  } else {
    rep.accuracy = static_cast<double>(rep.correct) / rep.n;
  }
  return rep;
}

}  // namespace

double EvalReport::headline() const {
  return task == Task::cap ? token_f1 : accuracy;
}

Json EvalReport::to_json() const {
  Json j;
  j["task"] = task_name(task);
  j["side"] = input_side_name(side);
  j["santa_mode"] = santa_mode;
  j["config_digest"] = config_digest;
  j["n"] = n;
  j["correct"] = correct;
  j["off_answer"] = off_answer;
  j["accuracy"] = accuracy;
  j["exact_match"] = exact_match;
  j["token_f1"] = token_f1;
  j["class_n"] = class_n;
  j["class_score"] = class_score;
  Json recs = Json::array();
  for (const auto& r : records) {
    Json jr;
    jr["index"] = r.index;
    jr["class_id"] = r.class_id;
    jr["reference"] = r.reference;
    jr["prediction"] = r.prediction;
    jr["score"] = r.score;
    jr["matched_class"] = r.matched_class;
    recs.push_back(std::move(jr));
  }
  j["records"] = std::move(recs);
  return j;
}

EvalReport eval_cls(const WorldSpec& world, const DualEncoder& enc,
                    ParamStore& ps, const MapperShape& mshape,
                    const DecoderShape& dshape, const MemoryBank* bank,
                    const std::vector<SampleTuple>& samples,
                    const EvalConfig& cfg) {
  return eval_generic(
      Task::cls, world, enc, ps, mshape, dshape, bank, samples, cfg,
      [&](const SampleTuple& s, const TokenSeq&, PredictionRecord& rec) {
        rec.matched_class = static_cast<int>(
            match_text(enc, world, rec.prediction, world.class_names));
        rec.score = rec.matched_class == s.content.class_id ? 1.0 : 0.0;
      });
}

EvalReport eval_caption(const WorldSpec& world, const DualEncoder& enc,
                        ParamStore& ps, const MapperShape& mshape,
                        const DecoderShape& dshape, const MemoryBank* bank,
                        const std::vector<SampleTuple>& samples,
                        const EvalConfig& cfg) {
  return eval_generic(
      Task::cap, world, enc, ps, mshape, dshape, bank, samples, cfg,
      [&](const SampleTuple& s, const TokenSeq& out, PredictionRecord& rec) {
        TokenSeq ref = s.answer_ids;
        if (!ref.empty() && ref.back() == world.vocab.eos) ref.pop_back();
        rec.score = multiset_token_f1(out, ref);
      });
}

EvalReport eval_aqa(const WorldSpec& world, const DualEncoder& enc,
                    ParamStore& ps, const MapperShape& mshape,
                    const DecoderShape& dshape, const MemoryBank* bank,
                    const std::vector<SampleTuple>& samples,
                    const EvalConfig& cfg) {
  std::atomic<int> off{0};
  EvalReport rep = eval_generic(
      Task::aqa, world, enc, ps, mshape, dshape, bank, samples, cfg,
      [&](const SampleTuple& s, const TokenSeq& out, PredictionRecord& rec) {
        const TokenId first = out.empty() ? world.vocab.pad : out[0];
        if (first != world.vocab.yes && first != world.vocab.no) {
          off.fetch_add(1);
          rec.score = 0.0;
          return;
        }
        rec.score = first == s.answer_ids[0] ? 1.0 : 0.0;
      });
  rep.off_answer = off.load();
  return rep;
}

Json GapDiagnostics::to_json() const {
  Json j;
  j["risk_train"] = risk_train;
  j["risk_test"] = risk_test;
  j["proxy_kind"] = "per_class_energy_distance_proxy";
  j["class_proxy"] = class_proxy;
  Json skipped = Json::array();
  for (bool b : class_skipped) skipped.push_back(b);
  j["class_skipped"] = std::move(skipped);
  j["max_proxy"] = max_proxy;
  j["n"] = n;
  j["classes_evaluated"] = classes_evaluated;
  j["ceiling_ok"] = ceiling_ok;
  return j;
}

GapDiagnostics gap_diagnostics(const WorldSpec& world, const DualEncoder& enc,
                               ParamStore& ps, const MapperShape& mshape,
                               const DecoderShape& dshape,
                               const MemoryBank* bank,
                               const std::vector<SampleTuple>& paired_cls,
                               const EvalConfig& cfg) {
  require_split(Task::cls, paired_cls);

  EvalConfig text_cfg = cfg;
  text_cfg.side = InputSide::text_oracle;
  EvalConfig audio_cfg = cfg;
  audio_cfg.side = InputSide::audio;
  const EvalReport text = eval_cls(world, enc, ps, mshape, dshape, bank,
                                   paired_cls, text_cfg);
  const EvalReport audio = eval_cls(world, enc, ps, mshape, dshape, bank,
                                    paired_cls, audio_cfg);

  GapDiagnostics d;
  d.n = static_cast<int>(paired_cls.size());
  d.risk_train = 1.0 - text.accuracy;
  d.risk_test = 1.0 - audio.accuracy;
  d.ceiling_ok = text.accuracy >= audio.accuracy;

  // The same per-sample keys the risk evaluations used, grouped by class.
  const int C = world.cfg.classes;
  std::vector<std::vector<Index>> members(C);
  for (Index i = 0; i < static_cast<Index>(paired_cls.size()); ++i)
    members[paired_cls[static_cast<std::size_t>(i)].content.class_id]
        .push_back(i);

  d.class_proxy.assign(C, 0.0);
  d.class_skipped.assign(C, false);
  for (int c = 0; c < C; ++c) {
    if (members[c].empty()) {
      d.class_skipped[c] = true;
      continue;
    }
    const Index m = static_cast<Index>(members[c].size());
    Matrix xs(m, enc.d), ys(m, enc.d);
    for (Index r = 0; r < m; ++r) {
      const Index i = members[c][static_cast<std::size_t>(r)];
      const SampleTuple& s = paired_cls[static_cast<std::size_t>(i)];
      xs.row(r) = input_embedding(enc, bank, text_cfg, s, i).transpose();
      ys.row(r) = input_embedding(enc, bank, audio_cfg, s, i).transpose();
    }
    d.class_proxy[c] = energy_distance(xs, ys);
    d.max_proxy = std::max(d.max_proxy, d.class_proxy[c]);
    d.classes_evaluated += 1;
  }
  return d;
}

std::string ExperimentConfig::digest() const {
  Digest d;
  d.u64(world.seed).u64(static_cast<std::uint64_t>(world.classes));
  d.u64(static_cast<std::uint64_t>(world.latent_dim));
  d.u64(static_cast<std::uint64_t>(world.embed_dim));
  d.f64(world.rho).f64(world.gap);
  d.u64(static_cast<std::uint64_t>(world.vocab_size));
  d.u64(static_cast<std::uint64_t>(world.attributes));
  d.u64(encoder.seed).f64(encoder.nu).u64(encoder.normalize);
  d.str(encoder_mode);
  d.u64(static_cast<std::uint64_t>(contrastive.pairs));
  d.u64(static_cast<std::uint64_t>(contrastive.epochs));
  d.u64(static_cast<std::uint64_t>(contrastive.batch));
  d.f64(contrastive.lr).f64(contrastive.temperature);
  d.u64(contrastive.seed);
  d.u64(static_cast<std::uint64_t>(sizes.train_cls));
  d.u64(static_cast<std::uint64_t>(sizes.train_cap));
  d.u64(static_cast<std::uint64_t>(sizes.train_aqa));
  d.u64(static_cast<std::uint64_t>(sizes.test_cls));
  d.u64(static_cast<std::uint64_t>(sizes.test_cap));
  d.u64(static_cast<std::uint64_t>(sizes.test_aqa));
  d.u64(corpus_seed);
  d.u64(static_cast<std::uint64_t>(decoder.d_dec));
  d.u64(static_cast<std::uint64_t>(decoder.n_layers));
  d.u64(static_cast<std::uint64_t>(decoder.n_heads));
  d.u64(static_cast<std::uint64_t>(decoder.max_len));
  d.u64(static_cast<std::uint64_t>(pretrain.steps));
  d.u64(static_cast<std::uint64_t>(pretrain.batch));
  d.f64(pretrain.lr).f64(pretrain.weight_decay);
  d.u64(static_cast<std::uint64_t>(pretrain.warmup));
  d.u64(static_cast<std::uint64_t>(pretrain.heldout));
  d.u64(pretrain.seed);
  d.u64(static_cast<std::uint64_t>(mapper.queries));
  d.u64(static_cast<std::uint64_t>(mapper.d_model));
  d.u64(static_cast<std::uint64_t>(mapper.n_layers));
  d.u64(static_cast<std::uint64_t>(mapper.n_heads));
  d.str(train.digest());
  d.f64(santa.sigma).u64(static_cast<std::uint64_t>(santa.memory_size));
  d.u64(static_cast<std::uint64_t>(santa.clusters));
  d.u64(static_cast<std::uint64_t>(santa.top_l));
  d.f64(santa.tau).f64(santa.lambda);
  d.u64(static_cast<std::uint64_t>(santa.kmeans_iters));
  d.u64(santa.no_kmeans).u64(santa.no_memory_bank);
  d.u64(santa.no_audio_embedding).u64(santa.no_gaussian_noise);
  d.u64(decoder_init_seed).u64(mapper_init_seed).u64(lora_init_seed);
  d.u64(bank_seed).u64(eval_seed);
  d.u64(static_cast<std::uint64_t>(max_new));
  return d.hex();
}

ExperimentConfig reseed(ExperimentConfig cfg, std::uint64_t seed) {
  RngStream root(seed);
  cfg.world.seed = root.fork("world").seed();
  cfg.encoder.seed = root.fork("encoder").seed();
  cfg.contrastive.seed = root.fork("contrastive").seed();
  cfg.corpus_seed = root.fork("corpus").seed();
  cfg.pretrain.seed = root.fork("pretrain").seed();
  cfg.train.seed = root.fork("train").seed();
  cfg.decoder_init_seed = root.fork("dec_init").seed();
  cfg.mapper_init_seed = root.fork("map_init").seed();
  cfg.lora_init_seed = root.fork("lora_init").seed();
  cfg.bank_seed = root.fork("bank").seed();
  cfg.eval_seed = root.fork("eval").seed();
  return cfg;
}

TrainedModel run_pipeline(const ExperimentConfig& cfg) {
  validate_santa_config(cfg.santa);
  validate_train_config(cfg.train);

  TrainedModel m;
  m.world = build_world(cfg.world);
  if (cfg.encoder_mode == "parametric")
    m.enc = build_parametric_encoder(m.world, cfg.encoder);
  else if (cfg.encoder_mode == "contrastive")
    m.enc = pretrain_contrastive(m.world, cfg.encoder, cfg.contrastive);
  else
    throw ConfigError("encoder_mode '" + cfg.encoder_mode +
                      "' is not one of parametric, contrastive");
  m.corpus = make_corpus(m.world, cfg.sizes, cfg.corpus_seed);

  // Widths that must agree with other artifacts follow them, whatever the
  // config says: vocab from the world, mapper input from the encoder, mapper
  // output from the decoder.
  m.dshape = cfg.decoder;
  m.dshape.vocab = m.world.vocab.size();
  m.mshape = cfg.mapper;
  m.mshape.d_in = m.enc.d;
  m.mshape.d_dec = m.dshape.d_dec;

  init_decoder(m.ps, m.dshape, cfg.decoder_init_seed);
  pretrain_decoder(m.ps, m.dshape, m.world.vocab, m.corpus.train,
                   cfg.pretrain);
  init_mapper(m.ps, m.mshape, cfg.mapper_init_seed);
  init_lora(m.ps, m.dshape, cfg.train.lora, cfg.lora_init_seed);
  m.lora = cfg.train.lora;

  TrainState st = init_train_state(m.ps);
  m.train_result = run_training(m.world, m.enc, m.ps, st, m.mshape, m.dshape,
                                m.corpus, cfg.train);
  m.sigma = m.train_result.sigma;
  m.santa = cfg.santa;
  m.santa.sigma = m.sigma;

  std::vector<ContentDescriptor> texts;
  texts.reserve(m.corpus.train.size());
  for (const auto& s : m.corpus.train) texts.push_back(s.content);
  const Index bank_size =
      std::min<Index>(m.santa.memory_size, static_cast<Index>(texts.size()));
  const double bank_sigma = m.santa.effective_sigma();
  m.bank = build_memory(texts, m.enc, m.world, bank_sigma, bank_size,
                        cfg.bank_seed);
  const Index k = std::min<Index>(m.santa.clusters, bank_size);
  m.bank = kmeans_fit(std::move(m.bank), k, m.santa.kmeans_iters,
                      RngStream(cfg.bank_seed).fork("kmeans").seed());

  m.max_new = cfg.max_new;
  m.config_digest = cfg.digest();
  return m;
}

EvalConfig eval_config_for(const TrainedModel& model, InputSide side,
                           std::uint64_t seed, Index max_new) {
  EvalConfig cfg;
  cfg.side = side;
  cfg.santa = model.santa;
  cfg.lora = model.lora;
  cfg.max_new = max_new;
  cfg.seed = seed;
  return cfg;
}

namespace {

std::vector<SampleTuple> test_split(const TrainedModel& model, Task task) {
  std::vector<SampleTuple> out;
  for (const auto& s : model.corpus.test)
    if (s.task == task) out.push_back(s);
  return out;
}

}  // namespace

EvalReport eval_task(TrainedModel& model, Task task, InputSide side,
                     std::uint64_t seed) {
  const EvalConfig cfg = eval_config_for(model, side, seed, model.max_new);
  const std::vector<SampleTuple> split = test_split(model, task);
  switch (task) {
    case Task::cls:
      return eval_cls(model.world, model.enc, model.ps, model.mshape,
                      model.dshape, &model.bank, split, cfg);
    case Task::cap:
      return eval_caption(model.world, model.enc, model.ps, model.mshape,
                          model.dshape, &model.bank, split, cfg);
    case Task::aqa:
      return eval_aqa(model.world, model.enc, model.ps, model.mshape,
                      model.dshape, &model.bank, split, cfg);
  }
  throw UsageError("eval_task: unknown task");
}

double composite_metric(TrainedModel& model, InputSide side,
                        std::uint64_t seed) {
  const double cls = eval_task(model, Task::cls, side, seed).accuracy;
  const double cap = eval_task(model, Task::cap, side, seed).token_f1;
  const double aqa = eval_task(model, Task::aqa, side, seed).accuracy;
  return (cls + cap + aqa) / 3.0;
}

void apply_mode(ExperimentConfig& cfg, const std::string& mode) {
  if (mode == "full") return;
  if (mode == "no_gn") {
    cfg.santa.no_gaussian_noise = true;
    cfg.train.sigma_source = "fixed";
    cfg.train.sigma_value = 0.0;
    return;
  }
  if (mode == "no_ae") {
    cfg.santa.no_audio_embedding = true;
    return;
  }
  if (mode == "no_kmeans") {
    cfg.santa.no_kmeans = true;
    return;
  }
  if (mode == "no_mb") {
    cfg.santa.no_memory_bank = true;
    return;
  }
  throw ConfigError("ablation mode '" + mode +
                    "' is not one of full, no_gn, no_ae, no_kmeans, no_mb");
}

namespace {

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;
};

// Sample standard deviation; a single observation reports spread zero.
MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double var = 0.0;
    for (double x : xs) var += (x - r.mean) * (x - r.mean);
    r.stddev = std::sqrt(var / static_cast<double>(xs.size() - 1));
  }
  return r;
}

std::string csv_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Evaluates the three tasks through a mode- or sweep-adjusted inference
// configuration over a model that may have been trained under different
// flags.
AblationCell evaluate_cell(TrainedModel& model, const SantaConfig& santa,
                           const MemoryBank& bank, std::uint64_t eval_seed,
                           Index max_new) {
  EvalConfig cfg;
  cfg.side = InputSide::audio;
  cfg.santa = santa;
  cfg.santa.sigma = model.sigma;
  cfg.lora = model.lora;
  cfg.max_new = max_new;
  cfg.seed = eval_seed;

  AblationCell cell;
  cell.cls_acc = eval_cls(model.world, model.enc, model.ps, model.mshape,
                          model.dshape, &bank, test_split(model, Task::cls),
                          cfg)
                     .accuracy;
  cell.cap_f1 = eval_caption(model.world, model.enc, model.ps, model.mshape,
                             model.dshape, &bank,
                             test_split(model, Task::cap), cfg)
                    .token_f1;
  cell.aqa_acc = eval_aqa(model.world, model.enc, model.ps, model.mshape,
                          model.dshape, &bank, test_split(model, Task::aqa),
                          cfg)
                     .accuracy;
  cell.composite = (cell.cls_acc + cell.cap_f1 + cell.aqa_acc) / 3.0;
  return cell;
}

}  // namespace

std::string AblationTable::to_csv() const {
  std::string out = "mode,composite_mean,composite_std,seeds\n";
  for (const auto& s : summary) {
    out += s.mode;
    out += ',';
    out += csv_double(s.mean);
    out += ',';
    out += csv_double(s.stddev);
    out += ',';
    out += std::to_string(s.seeds);
    out += '\n';
  }
  return out;
}

Json AblationTable::to_json() const {
  Json j;
  j["metric"] = "composite";
  Json jc = Json::array();
  for (const auto& c : cells) {
    Json e;
    e["mode"] = c.mode;
    e["seed"] = c.seed;
    e["cls_acc"] = c.cls_acc;
    e["cap_f1"] = c.cap_f1;
    e["aqa_acc"] = c.aqa_acc;
    e["composite"] = c.composite;
    jc.push_back(std::move(e));
  }
  j["cells"] = std::move(jc);
  Json js = Json::array();
  for (const auto& s : summary) {
    Json e;
    e["mode"] = s.mode;
    e["mean"] = s.mean;
    e["stddev"] = s.stddev;
    e["seeds"] = s.seeds;
    js.push_back(std::move(e));
  }
  j["summary"] = std::move(js);
  return j;
}

AblationTable run_ablation(const ExperimentConfig& base,
                           const std::vector<std::string>& modes,
                           const std::vector<std::uint64_t>& seeds) {
  if (modes.empty()) throw ConfigError("ablation modes list is empty");
  if (seeds.empty()) throw ConfigError("ablation seeds list is empty");
  for (const auto& mode : modes) {
    ExperimentConfig probe = base;
    apply_mode(probe, mode);
  }

  AblationTable table;
  table.cells.resize(modes.size() * seeds.size());

  // Only training-affecting flags force a retrain; inference-only modes
  // share one trained model per seed.
  for (std::size_t si = 0; si < seeds.size(); ++si) {
    std::map<std::string, TrainedModel> trained;
    for (std::size_t mi = 0; mi < modes.size(); ++mi) {
      ExperimentConfig cfg = reseed(base, seeds[si]);
      apply_mode(cfg, modes[mi]);
      const std::string key =
          cfg.train.digest() + (cfg.santa.no_gaussian_noise ? ":gn0" : ":gn1");
      auto it = trained.find(key);
      if (it == trained.end())
        it = trained.emplace(key, run_pipeline(cfg)).first;
      TrainedModel& model = it->second;
      AblationCell cell = evaluate_cell(model, cfg.santa, model.bank,
                                        cfg.eval_seed, cfg.max_new);
      cell.mode = modes[mi];
      cell.seed = seeds[si];
      table.cells[mi * seeds.size() + si] = std::move(cell);
    }
  }

  for (const auto& mode : modes) {
    std::vector<double> vals;
    for (const auto& c : table.cells)
      if (c.mode == mode) vals.push_back(c.composite);
    const MeanStd ms = mean_std(vals);
    table.summary.push_back(
        {mode, ms.mean, ms.stddev, static_cast<int>(vals.size())});
  }
  return table;
}

namespace {

bool integer_valued(double x) { return x == std::floor(x); }

bool train_affecting(const std::string& p) {
  return p == "sigma" || p == "rank" || p == "scale" || p == "mapper_layers";
}

void apply_sweep_value(ExperimentConfig& cfg, const std::string& p,
                       double x) {
  if (p == "sigma") {
    cfg.train.sigma_source = "fixed";
    cfg.train.sigma_value = x;
    cfg.santa.sigma = x;
  } else if (p == "rank") {
    cfg.train.lora.rank = static_cast<int>(x);
  } else if (p == "scale") {
    cfg.train.lora.alpha = x * cfg.train.lora.rank;
  } else if (p == "mapper_layers") {
    cfg.mapper.n_layers = static_cast<int>(x);
  } else if (p == "tau") {
    cfg.santa.tau = x;
  } else if (p == "top_l") {
    cfg.santa.top_l = static_cast<Index>(x);
  } else if (p == "lambda") {
    cfg.santa.lambda = x;
  } else if (p == "memory_size") {
    cfg.santa.memory_size = static_cast<Index>(x);
  } else if (p == "clusters") {
    cfg.santa.clusters = static_cast<Index>(x);
  }
}

double metric_from_cell(const AblationCell& cell, const std::string& metric) {
  if (metric == "composite") return cell.composite;
  if (metric == "cls_acc") return cell.cls_acc;
  if (metric == "cap_f1") return cell.cap_f1;
  return cell.aqa_acc;
}

}  // namespace

void validate_sweep_spec(const SweepSpec& spec) {
  static const std::vector<std::string> kParams = {
      "sigma",  "tau",  "top_l", "lambda",       "memory_size",
      "clusters", "rank", "scale", "mapper_layers"};
  if (std::find(kParams.begin(), kParams.end(), spec.parameter) ==
      kParams.end())
    throw ConfigError("sweep parameter '" + spec.parameter +
                      "' is not recognized");
  if (spec.grid.empty()) throw ConfigError("sweep grid is empty");
  if (spec.seeds.empty()) throw ConfigError("sweep seeds list is empty");
  if (spec.metric != "composite" && spec.metric != "cls_acc" &&
      spec.metric != "cap_f1" && spec.metric != "aqa_acc")
    throw ConfigError("sweep metric '" + spec.metric +
                      "' is not one of composite, cls_acc, cap_f1, aqa_acc");
  for (double x : spec.grid) {
    const std::string where =
        "sweep grid value " + std::to_string(x) + " for " + spec.parameter;
    if (spec.parameter == "sigma" && x < 0.0)
      throw ConfigError(where + ": must be >= 0");
    if ((spec.parameter == "tau" || spec.parameter == "scale") && x <= 0.0)
      throw ConfigError(where + ": must be > 0");
    if (spec.parameter == "lambda" && (x < 0.0 || x > 1.0))
      throw ConfigError(where + ": must lie in [0, 1]");
    if ((spec.parameter == "top_l" || spec.parameter == "memory_size" ||
         spec.parameter == "clusters" || spec.parameter == "rank" ||
         spec.parameter == "mapper_layers") &&
        (!integer_valued(x) || x < 1.0))
      throw ConfigError(where + ": must be an integer >= 1");
  }
}

std::string SweepTable::to_csv() const {
  std::string out = "x,seed,metric\n";
  for (const auto& c : cells) {
    out += csv_double(c.x);
    out += ',';
    out += std::to_string(c.seed);
    out += ',';
    out += csv_double(c.value);
    out += '\n';
  }
  return out;
}

Json SweepTable::to_json() const {
  Json j;
  j["parameter"] = spec.parameter;
  j["metric"] = spec.metric;
  j["grid"] = spec.grid;
  j["seeds"] = spec.seeds;
  Json jc = Json::array();
  for (const auto& c : cells) {
    Json e;
    e["x"] = c.x;
    e["seed"] = c.seed;
    e["value"] = c.value;
    jc.push_back(std::move(e));
  }
  j["cells"] = std::move(jc);
  return j;
}

SweepTable run_sweep(const ExperimentConfig& base, const SweepSpec& spec) {
  validate_sweep_spec(spec);
  SweepTable table;
  table.spec = spec;
  table.cells.resize(spec.grid.size() * spec.seeds.size());

  if (train_affecting(spec.parameter)) {
    for (std::size_t gi = 0; gi < spec.grid.size(); ++gi) {
      for (std::size_t si = 0; si < spec.seeds.size(); ++si) {
        ExperimentConfig cfg = reseed(base, spec.seeds[si]);
        apply_sweep_value(cfg, spec.parameter, spec.grid[gi]);
        TrainedModel model = run_pipeline(cfg);
        const AblationCell cell = evaluate_cell(
            model, model.santa, model.bank, cfg.eval_seed, cfg.max_new);
        table.cells[gi * spec.seeds.size() + si] = {
            spec.grid[gi], spec.seeds[si],
            metric_from_cell(cell, spec.metric)};
      }
    }
    return table;
  }

  for (std::size_t si = 0; si < spec.seeds.size(); ++si) {
    ExperimentConfig cfg = reseed(base, spec.seeds[si]);
    TrainedModel model = run_pipeline(cfg);
    std::vector<ContentDescriptor> texts;
    texts.reserve(model.corpus.train.size());
    for (const auto& s : model.corpus.train) texts.push_back(s.content);

    for (std::size_t gi = 0; gi < spec.grid.size(); ++gi) {
      SantaConfig santa = model.santa;
      apply_sweep_value(cfg, spec.parameter, spec.grid[gi]);
      santa = cfg.santa;
      santa.sigma = model.sigma;

      const MemoryBank* bank = &model.bank;
      MemoryBank rebuilt;
      if (spec.parameter == "memory_size") {
        const Index size = std::min<Index>(santa.memory_size,
                                           static_cast<Index>(texts.size()));
        rebuilt = build_memory(texts, model.enc, model.world,
                               santa.effective_sigma(), size, cfg.bank_seed);
        rebuilt = kmeans_fit(std::move(rebuilt),
                             std::min<Index>(santa.clusters, size),
                             santa.kmeans_iters,
                             RngStream(cfg.bank_seed).fork("kmeans").seed());
        bank = &rebuilt;
      } else if (spec.parameter == "clusters") {
        rebuilt = kmeans_fit(model.bank,
                             std::min<Index>(santa.clusters,
                                             model.bank.size()),
                             santa.kmeans_iters,
                             RngStream(cfg.bank_seed).fork("kmeans").seed());
        bank = &rebuilt;
      }

      const AblationCell cell =
          evaluate_cell(model, santa, *bank, cfg.eval_seed, cfg.max_new);
      table.cells[gi * spec.seeds.size() + si] = {
          spec.grid[gi], spec.seeds[si], metric_from_cell(cell, spec.metric)};
    }
  }
  return table;
}

std::string GapStudyTable::to_csv() const {
  std::string out = "g,seed,audio_error,proxy_projected,proxy_raw\n";
  for (const auto& r : rows) {
    out += csv_double(r.g);
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += csv_double(r.audio_error);
    out += ',';
    out += csv_double(r.proxy_projected);
    out += ',';
    out += csv_double(r.proxy_raw);
    out += '\n';
  }
  return out;
}

Json GapStudyTable::to_json() const {
  Json j;
  j["proxy_kind"] = "per_class_energy_distance_proxy";
  Json jr = Json::array();
  for (const auto& r : rows) {
    Json e;
    e["g"] = r.g;
    e["seed"] = r.seed;
    e["audio_error"] = r.audio_error;
    e["proxy_projected"] = r.proxy_projected;
    e["proxy_raw"] = r.proxy_raw;
    jr.push_back(std::move(e));
  }
  j["rows"] = std::move(jr);
  return j;
}

GapStudyTable run_gap_study(const ExperimentConfig& base,
                            const std::vector<double>& g_grid,
                            const std::vector<std::uint64_t>& seeds) {
  if (g_grid.empty()) throw ConfigError("gap study grid is empty");
  if (seeds.empty()) throw ConfigError("gap study seeds list is empty");

  GapStudyTable table;
  table.rows.reserve(g_grid.size() * seeds.size());
  for (double g : g_grid) {
    for (std::uint64_t seed : seeds) {
      ExperimentConfig cfg = reseed(base, seed);
      cfg.world.gap = g;
      TrainedModel model = run_pipeline(cfg);
      std::vector<SampleTuple> paired = test_split(model, Task::cls);

      EvalConfig ec = eval_config_for(model, InputSide::audio, cfg.eval_seed,
                                      model.max_new);
      GapDiagnostics on = gap_diagnostics(model.world, model.enc, model.ps,
                                          model.mshape, model.dshape,
                                          &model.bank, paired, ec);
      EvalConfig raw = ec;
      raw.santa.no_memory_bank = true;
      GapDiagnostics off = gap_diagnostics(model.world, model.enc, model.ps,
                                           model.mshape, model.dshape,
                                           &model.bank, paired, raw);
      table.rows.push_back(
          {g, seed, on.risk_test, on.max_proxy, off.max_proxy});
    }
  }
  return table;
}

}  // namespace mats
