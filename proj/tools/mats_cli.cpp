#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mats/error.hpp"
#include "mats/eval_harness.hpp"
#include "mats/run_config.hpp"

namespace fs = std::filesystem;
using namespace mats;

namespace {

// Shared flags; every subcommand resolves its configuration the same way:
// file keys, then --set overrides, then the schema defaults underneath.
struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_root = "runs";
  bool force = false;
};

void add_common(CLI::App* sub, CommonArgs& a) {
  sub->add_option("-c,--config", a.config_path,
                  "flat key=value config file")
      ->check(CLI::ExistingFile);
  sub->add_option("--set", a.sets, "override, key=value (repeatable)");
  sub->add_option("-o,--out", a.out_root, "root for run directories")
      ->capture_default_str();
  sub->add_flag("--force", a.force, "recompute even if outputs exist");
}

struct Run {
  ExperimentConfig cfg;
  std::string dir;  // out_root/<config digest>
};

Run open_run(const CommonArgs& a) {
  KvConfig kv;
  if (!a.config_path.empty()) kv = load_kv_file(a.config_path);
  for (const auto& s : a.sets) apply_override(kv, s);
  Run r;
  r.cfg = experiment_from_kv(kv);
  validate_train_config(r.cfg.train);
  validate_santa_config(r.cfg.santa);
  if (r.cfg.encoder_mode != "parametric" &&
      r.cfg.encoder_mode != "contrastive")
    throw ConfigError("config key 'encoder.mode': '" + r.cfg.encoder_mode +
                      "' is not one of parametric, contrastive");
  r.dir = a.out_root + "/" + r.cfg.digest();
  fs::create_directories(r.dir);
  return r;
}

std::string need(const std::string& path, const char* producer) {
  if (!fs::exists(path))
    throw IoError("missing input artifact '" + path + "'; produce it with '" +
                  producer + "'");
  return path;
}

// Fixed artifact names inside a run directory.
std::string world_path(const Run& r) { return r.dir + "/world.json"; }
std::string corpus_dir(const Run& r) { return r.dir + "/corpus"; }
std::string encoder_path(const Run& r) { return r.dir + "/encoder.json"; }
std::string decoder_ckpt_path(const Run& r) { return r.dir + "/decoder.ckpt"; }
std::string checkpoint_path(const Run& r) { return r.dir + "/checkpoint.ckpt"; }
std::string bank_path(const Run& r) { return r.dir + "/memory_bank.bin"; }

bool outputs_ready(const Run& r, const std::string& cmd,
                   const std::vector<std::string>& rel_outputs, bool force) {
  if (force) return false;
  if (!fs::exists(r.dir + "/manifest_" + cmd + ".json")) return false;
  for (const auto& o : rel_outputs)
    if (!fs::exists(r.dir + "/" + o)) return false;
  return true;
}

// Writes manifest_<cmd>.json and reports the run directory. Inputs and
// outputs are path -> digest maps over the artifacts actually touched.
void finish(const Run& r, const std::string& cmd,
            const std::map<std::string, std::string>& inputs,
            const std::vector<std::string>& rel_outputs) {
  std::map<std::string, std::string> outs;
  for (const auto& o : rel_outputs) {
    const std::string p = r.dir + "/" + o;
    outs[o] = file_digest(p);
    std::printf("wrote %s\n", p.c_str());
  }
  save_json_file(r.dir + "/manifest_" + cmd + ".json",
                 run_manifest(cmd, r.cfg, inputs, outs));
  std::printf("run %s: %s done\n", r.cfg.digest().c_str(), cmd.c_str());
}

std::map<std::string, std::string> digest_inputs(
    const std::vector<std::pair<std::string, std::string>>& named_paths) {
  std::map<std::string, std::string> m;
  for (const auto& [name, path] : named_paths) m[name] = file_digest(path);
  return m;
}

DecoderShape dshape_for(const ExperimentConfig& cfg, const WorldSpec& world) {
  DecoderShape d = cfg.decoder;
  d.vocab = world.vocab.size();
  return d;
}

MapperShape mshape_for(const ExperimentConfig& cfg, const DualEncoder& enc,
                       const DecoderShape& dshape) {
  MapperShape m = cfg.mapper;
  m.d_in = enc.d;
  m.d_dec = dshape.d_dec;
  return m;
}

double resolved_sigma(const ExperimentConfig& cfg, const WorldSpec& world,
                      const DualEncoder& enc) {
  if (cfg.train.sigma_source == "fixed") return cfg.train.sigma_value;
  return estimate_sigma_world(world, enc, cfg.train.sigma_pairs,
                              RngStream(cfg.train.seed).fork("sigma").seed());
}

void check_world_match(const CheckpointMeta& meta, const WorldSpec& world,
                       const std::string& path) {
  if (meta.world_digest != world.digest())
    throw ConfigError("checkpoint '" + path +
                      "' was built for a different world");
}

Json with_magic(const char* magic, Json body) {
  Json j;
  j["magic"] = magic;
  j["version"] = 1;
  j.update(body);
  return j;
}

std::vector<SampleTuple> test_split(const Corpus& corpus, Task task) {
  std::vector<SampleTuple> out;
  for (const auto& s : corpus.test)
    if (s.task == task) out.push_back(s);
  return out;
}

// Everything eval, infer, and diagnose need from a completed run.
struct LoadedModel {
  WorldSpec world;
  DualEncoder enc;
  Corpus corpus;
  ParamStore ps;
  DecoderShape dshape;
  MapperShape mshape;
  SantaConfig santa;  // sigma resolved
  CheckpointMeta meta;
};

LoadedModel load_model(const Run& r, bool want_corpus, bool want_bank,
                       MemoryBank* bank) {
  LoadedModel m;
  m.world = load_world(need(world_path(r), "gen-world"));
  m.enc = load_encoder(need(encoder_path(r), "pretrain-encoder"));
  if (want_corpus)
    m.corpus = load_corpus(
        m.world, fs::path(need(corpus_dir(r) + "/manifest.json", "gen-corpus"))
                     .parent_path()
                     .string());
  m.dshape = dshape_for(r.cfg, m.world);
  m.mshape = mshape_for(r.cfg, m.enc, m.dshape);
  init_decoder(m.ps, m.dshape, r.cfg.decoder_init_seed);
  init_mapper(m.ps, m.mshape, r.cfg.mapper_init_seed);
  init_lora(m.ps, m.dshape, r.cfg.train.lora, r.cfg.lora_init_seed);
  TrainState st = init_train_state(m.ps);
  m.meta = load_checkpoint(need(checkpoint_path(r), "train"), m.ps, st);
  check_world_match(m.meta, m.world, checkpoint_path(r));
  if (want_bank) *bank = load_memory_bank(need(bank_path(r), "build-memory"));
  m.santa = r.cfg.santa;
  m.santa.sigma = resolved_sigma(r.cfg, m.world, m.enc);
  return m;
}

EvalConfig eval_config(const Run& r, const LoadedModel& m, InputSide side) {
  EvalConfig ec;
  ec.side = side;
  ec.santa = m.santa;
  ec.lora = r.cfg.train.lora;
  ec.max_new = r.cfg.max_new;
  ec.seed = r.cfg.eval_seed;
  return ec;
}

std::vector<double> parse_double_list(const std::string& flag,
                                      const std::string& csv) {
  std::vector<double> out;
  std::istringstream in(csv);
  std::string item;
  while (std::getline(in, item, ',')) {
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (item.empty() || end != item.c_str() + item.size() || errno == ERANGE)
      throw ConfigError(flag + ": '" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(flag + ": empty list");
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& flag,
                                           const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::istringstream in(csv);
  std::string item;
  while (std::getline(in, item, ',')) {
    errno = 0;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(item.c_str(), &end, 10);
    if (item.empty() || item[0] == '-' ||
        end != item.c_str() + item.size() || errno == ERANGE)
      throw ConfigError(flag + ": '" + item + "' is not a seed");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(flag + ": empty list");
  return out;
}

std::vector<std::string> parse_name_list(const std::string& csv) {
  std::vector<std::string> out;
  std::istringstream in(csv);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(item);
  return out;
}

// ---- subcommand bodies ----

void cmd_gen_world(const CommonArgs& a) {
  Run r = open_run(a);
  if (outputs_ready(r, "gen-world", {"world.json"}, a.force)) {
    std::printf("up to date: %s\n", r.dir.c_str());
    return;
  }
  WorldSpec world = build_world(r.cfg.world);
  save_world(world, world_path(r));
  finish(r, "gen-world", {}, {"world.json"});
}

void cmd_gen_corpus(const CommonArgs& a) {
  Run r = open_run(a);
  const std::vector<std::string> outs = {
      "corpus/manifest.json", "corpus/train.jsonl", "corpus/test.jsonl"};
  if (outputs_ready(r, "gen-corpus", outs, a.force)) {
    std::printf("up to date: %s\n", r.dir.c_str());
    return;
  }
  WorldSpec world = load_world(need(world_path(r), "gen-world"));
  Corpus corpus = make_corpus(world, r.cfg.sizes, r.cfg.corpus_seed);
  fs::create_directories(corpus_dir(r));
  save_corpus(corpus, corpus_dir(r));
  finish(r, "gen-corpus", digest_inputs({{"world.json", world_path(r)}}),
         outs);
}

void cmd_pretrain_encoder(const CommonArgs& a) {
  Run r = open_run(a);
  if (outputs_ready(r, "pretrain-encoder", {"encoder.json"}, a.force)) {
    std::printf("up to date: %s\n", r.dir.c_str());
    return;
  }
  WorldSpec world = load_world(need(world_path(r), "gen-world"));
  DualEncoder enc =
      r.cfg.encoder_mode == "contrastive"
          ? pretrain_contrastive(world, r.cfg.encoder, r.cfg.contrastive)
          : build_parametric_encoder(world, r.cfg.encoder);
  save_encoder(enc, encoder_path(r));
  finish(r, "pretrain-encoder",
         digest_inputs({{"world.json", world_path(r)}}), {"encoder.json"});
}

void cmd_pretrain_decoder(const CommonArgs& a) {
  Run r = open_run(a);
  const std::vector<std::string> outs = {"decoder.ckpt",
                                         "pretrain_report.json"};
  if (outputs_ready(r, "pretrain-decoder", outs, a.force)) {
    std::printf("up to date: %s\n", r.dir.c_str());
    return;
  }
  WorldSpec world = load_world(need(world_path(r), "gen-world"));
  need(corpus_dir(r) + "/manifest.json", "gen-corpus");
  Corpus corpus = load_corpus(world, corpus_dir(r));
  DecoderShape dshape = dshape_for(r.cfg, world);
  ParamStore ps;
  init_decoder(ps, dshape, r.cfg.decoder_init_seed);
  PretrainReport rep =
      pretrain_decoder(ps, dshape, world.vocab, corpus.train, r.cfg.pretrain);
  TrainState st = init_train_state(ps);
  save_checkpoint(decoder_ckpt_path(r), ps, st,
                  {r.cfg.digest(), world.digest(), r.cfg.pretrain.seed, 0});
  Json body;
  body["heldout_ce"] = rep.heldout_ce;
  body["final_train_loss"] = rep.final_train_loss;
  body["frozen_digest"] = rep.frozen_digest;
  body["steps_run"] = rep.steps_run;
  save_json_file(r.dir + "/pretrain_report.json",
                 with_magic("MATSRP01", body));
  finish(r, "pretrain-decoder",
         digest_inputs({{"world.json", world_path(r)},
                        {"corpus/manifest.json",
                         corpus_dir(r) + "/manifest.json"}}),
         outs);
}

void cmd_train(const CommonArgs& a) {
  Run r = open_run(a);
  const std::vector<std::string> outs = {"checkpoint.ckpt", "loss_curve.csv",
                                         "train_result.json"};
  if (outputs_ready(r, "train", outs, a.force)) {
    std::printf("up to date: %s\n", r.dir.c_str());
    return;
  }
  WorldSpec world = load_world(need(world_path(r), "gen-world"));
  need(corpus_dir(r) + "/manifest.json", "gen-corpus");
  Corpus corpus = load_corpus(world, corpus_dir(r));
  DualEncoder enc = load_encoder(need(encoder_path(r), "pretrain-encoder"));
  DecoderShape dshape = dshape_for(r.cfg, world);
  MapperShape mshape = mshape_for(r.cfg, enc, dshape);

  ParamStore ps;
  init_decoder(ps, dshape, r.cfg.decoder_init_seed);
  TrainState pretrained = init_train_state(ps);
  CheckpointMeta meta = load_checkpoint(
      need(decoder_ckpt_path(r), "pretrain-decoder"), ps, pretrained);
  check_world_match(meta, world, decoder_ckpt_path(r));
  init_mapper(ps, mshape, r.cfg.mapper_init_seed);
  init_lora(ps, dshape, r.cfg.train.lora, r.cfg.lora_init_seed);

  TrainState st = init_train_state(ps);
  TrainResult res = run_training(world, enc, ps, st, mshape, dshape, corpus,
                                 r.cfg.train);
  save_checkpoint(checkpoint_path(r), ps, st,
                  {r.cfg.digest(), world.digest(), r.cfg.train.seed,
                   st.step});
  save_loss_curve(r.dir + "/loss_curve.csv", res.curve);
  Json body;
  body["final_loss"] = res.final_loss;
  body["sigma"] = res.sigma;
  body["steps_run"] = res.steps_run;
  body["decoder_digest"] = res.decoder_digest;
  body["mapper_digest"] = res.mapper_digest;
  body["lora_digest"] = res.lora_digest;
  save_json_file(r.dir + "/train_result.json", with_magic("MATSRP01", body));
  finish(r, "train",
         digest_inputs({{"world.json", world_path(r)},
                        {"corpus/manifest.json",
                         corpus_dir(r) + "/manifest.json"},
                        {"encoder.json", encoder_path(r)},
                        {"decoder.ckpt", decoder_ckpt_path(r)}}),
         outs);
}

void cmd_build_memory(const CommonArgs& a) {
  Run r = open_run(a);
  if (outputs_ready(r, "build-memory", {"memory_bank.bin"}, a.force)) {
    std::printf("up to date: %s\n", r.dir.c_str());
    return;
  }
  WorldSpec world = load_world(need(world_path(r), "gen-world"));
  need(corpus_dir(r) + "/manifest.json", "gen-corpus");
  Corpus corpus = load_corpus(world, corpus_dir(r));
  DualEncoder enc = load_encoder(need(encoder_path(r), "pretrain-encoder"));

  SantaConfig santa = r.cfg.santa;
  santa.sigma = resolved_sigma(r.cfg, world, enc);
  std::vector<ContentDescriptor> texts;
  texts.reserve(corpus.train.size());
  for (const auto& s : corpus.train) texts.push_back(s.content);
  const Index size = std::min<Index>(santa.memory_size,
                                     static_cast<Index>(texts.size()));
  MemoryBank bank = build_memory(texts, enc, world, santa.effective_sigma(),
                                 size, r.cfg.bank_seed);
  bank = kmeans_fit(std::move(bank), std::min<Index>(santa.clusters, size),
                    santa.kmeans_iters,
                    RngStream(r.cfg.bank_seed).fork("kmeans").seed());
  save_memory_bank(bank, bank_path(r));
  finish(r, "build-memory",
         digest_inputs({{"world.json", world_path(r)},
                        {"corpus/manifest.json",
                         corpus_dir(r) + "/manifest.json"},
                        {"encoder.json", encoder_path(r)}}),
         {"memory_bank.bin"});
}

void cmd_infer(const CommonArgs& a, const std::string& input_path) {
  Run r = open_run(a);
  MemoryBank bank;
  LoadedModel m = load_model(r, false, true, &bank);

  const std::string text = read_file_bytes(input_path);
  std::istringstream in(text);
  std::string line;
  Index idx = 0;
  LoraRun lora{r.cfg.train.lora, nullptr};
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw ConfigError("descriptor line " + std::to_string(idx + 1) + ": " +
                        e.what());
    }
    ContentDescriptor content;
    content.class_id = j.value("class_id", 0);
    if (j.contains("latent")) {
      const auto vals = j.at("latent").get<std::vector<double>>();
      if (static_cast<Index>(vals.size()) != m.world.cfg.latent_dim)
        throw ConfigError("descriptor line " + std::to_string(idx + 1) +
                          ": latent must have " +
                          std::to_string(m.world.cfg.latent_dim) +
                          " entries");
      content.latent = Vector::Zero(m.world.cfg.latent_dim);
      for (Index k = 0; k < content.latent.size(); ++k)
        content.latent[k] = vals[static_cast<std::size_t>(k)];
    } else if (j.contains("class_id")) {
      if (content.class_id < 0 || content.class_id >= m.world.cfg.classes)
        throw ConfigError("descriptor line " + std::to_string(idx + 1) +
                          ": class_id " + std::to_string(content.class_id) +
                          " out of range");
      content.latent = m.world.prototypes.row(content.class_id).transpose();
    } else {
      throw ConfigError("descriptor line " + std::to_string(idx + 1) +
                        ": needs 'latent' or 'class_id'");
    }

    TokenSeq instruction_ids;
    if (j.contains("instruction")) {
      try {
        instruction_ids =
            m.world.vocab.tokenize(j.at("instruction").get<std::string>());
      } catch (const UsageError& e) {
        throw ConfigError("descriptor line " + std::to_string(idx + 1) +
                          ": " + e.what());
      }
    } else if (j.contains("task")) {
      const Task task = task_from_name(j.at("task").get<std::string>());
      RngStream irng =
          RngStream(r.cfg.eval_seed).fork("instr").fork_index(idx);
      instruction_ids =
          render_tuple(m.world, content, task, irng).instruction_ids;
    } else {
      throw ConfigError("descriptor line " + std::to_string(idx + 1) +
                        ": needs 'instruction' or 'task'");
    }

    RngStream rng = RngStream(r.cfg.eval_seed).fork("enc_a").fork_index(idx);
    Vector z = encode_audio(m.enc, content, rng);
    z = santa_project(z, bank, m.santa);
    Matrix prefix = mapper_apply(m.ps, m.mshape, z);
    TokenSeq out = generate_greedy(m.ps, m.dshape, prefix, instruction_ids,
                                   r.cfg.max_new, m.world.vocab.eos, &lora);
    if (!out.empty() && out.back() == m.world.vocab.eos) out.pop_back();
    std::printf("%s\n", m.world.vocab.text(out).c_str());
    ++idx;
  }
  save_json_file(
      r.dir + "/manifest_infer.json",
      run_manifest("infer", r.cfg,
                   digest_inputs({{"input", input_path},
                                  {"checkpoint.ckpt", checkpoint_path(r)},
                                  {"memory_bank.bin", bank_path(r)}}),
                   {}));
}

void cmd_eval(const CommonArgs& a) {
  Run r = open_run(a);
  const std::vector<std::string> outs = {
      "reports/cls_audio.json", "reports/cap_audio.json",
      "reports/aqa_audio.json", "reports/cls_text.json",
      "reports/cap_text.json",  "reports/aqa_text.json",
      "reports/summary.json"};
  if (outputs_ready(r, "eval", outs, a.force)) {
    std::printf("up to date: %s\n", r.dir.c_str());
    return;
  }
  MemoryBank bank;
  LoadedModel m = load_model(r, true, true, &bank);
  fs::create_directories(r.dir + "/reports");

  Json summary_body;
  summary_body["config_digest"] = r.cfg.digest();
  for (InputSide side : {InputSide::audio, InputSide::text_oracle}) {
    const EvalConfig ec = eval_config(r, m, side);
    const char* tag = side == InputSide::audio ? "audio" : "text";
    double composite = 0.0;
    for (Task task : {Task::cls, Task::cap, Task::aqa}) {
      EvalReport rep;
      std::vector<SampleTuple> split = test_split(m.corpus, task);
      switch (task) {
        case Task::cls:
          rep = eval_cls(m.world, m.enc, m.ps, m.mshape, m.dshape, &bank,
                         split, ec);
          break;
        case Task::cap:
          rep = eval_caption(m.world, m.enc, m.ps, m.mshape, m.dshape, &bank,
                             split, ec);
          break;
        case Task::aqa:
          rep = eval_aqa(m.world, m.enc, m.ps, m.mshape, m.dshape, &bank,
                         split, ec);
          break;
      }
      composite += rep.headline() / 3.0;
      const std::string name =
          std::string(task_name(task)) + "_" + tag + ".json";
      save_json_file(r.dir + "/reports/" + name,
                     with_magic("MATSRP01", rep.to_json()));
      summary_body[std::string(task_name(task)) + "_" + tag] =
          rep.headline();
    }
    summary_body[std::string("composite_") + tag] = composite;
  }
  save_json_file(r.dir + "/reports/summary.json",
                 with_magic("MATSRP01", summary_body));
  finish(r, "eval",
         digest_inputs({{"world.json", world_path(r)},
                        {"corpus/manifest.json",
                         corpus_dir(r) + "/manifest.json"},
                        {"encoder.json", encoder_path(r)},
                        {"checkpoint.ckpt", checkpoint_path(r)},
                        {"memory_bank.bin", bank_path(r)}}),
         outs);
}

void cmd_ablate(const CommonArgs& a, const std::string& modes_csv,
                const std::string& seeds_csv) {
  Run r = open_run(a);
  const std::vector<std::string> modes = parse_name_list(modes_csv);
  const std::vector<std::uint64_t> seeds =
      parse_seed_list("--seeds", seeds_csv);
  AblationTable table = run_ablation(r.cfg, modes, seeds);
  write_file_bytes(r.dir + "/ablation.csv", table.to_csv());
  save_json_file(r.dir + "/ablation.json",
                 with_magic("MATSTB01", table.to_json()));
  finish(r, "ablate", {}, {"ablation.csv", "ablation.json"});
}

void cmd_sweep(const CommonArgs& a, const SweepSpec& spec_in,
               const std::string& grid_csv, const std::string& seeds_csv) {
  Run r = open_run(a);
  SweepSpec spec = spec_in;
  spec.grid = parse_double_list("--grid", grid_csv);
  if (!seeds_csv.empty()) spec.seeds = parse_seed_list("--seeds", seeds_csv);
  SweepTable table = run_sweep(r.cfg, spec);
  const std::string base = "sweep_" + spec.parameter;
  write_file_bytes(r.dir + "/" + base + ".csv", table.to_csv());
  save_json_file(r.dir + "/" + base + ".json",
                 with_magic("MATSTB01", table.to_json()));
  finish(r, "sweep", {}, {base + ".csv", base + ".json"});
}

void cmd_diagnose(const CommonArgs& a, const std::string& gap_grid_csv,
                  const std::string& seeds_csv) {
  Run r = open_run(a);
  if (!gap_grid_csv.empty()) {
    const std::vector<double> grid =
        parse_double_list("--gap-grid", gap_grid_csv);
    const std::vector<std::uint64_t> seeds =
        parse_seed_list("--seeds", seeds_csv);
    GapStudyTable table = run_gap_study(r.cfg, grid, seeds);
    write_file_bytes(r.dir + "/gap_study.csv", table.to_csv());
    save_json_file(r.dir + "/gap_study.json",
                   with_magic("MATSTB01", table.to_json()));
    finish(r, "diagnose", {}, {"gap_study.csv", "gap_study.json"});
    return;
  }
  MemoryBank bank;
  LoadedModel m = load_model(r, true, true, &bank);
  const std::vector<SampleTuple> paired = test_split(m.corpus, Task::cls);
  const EvalConfig ec = eval_config(r, m, InputSide::audio);
  GapDiagnostics d = gap_diagnostics(m.world, m.enc, m.ps, m.mshape,
                                     m.dshape, &bank, paired, ec);
  save_json_file(r.dir + "/gap_diagnostics.json",
                 with_magic("MATSRP01", d.to_json()));
  finish(r, "diagnose",
         digest_inputs({{"checkpoint.ckpt", checkpoint_path(r)},
                        {"memory_bank.bin", bank_path(r)}}),
         {"gap_diagnostics.json"});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Desk-scale text-supervised audio-language pipeline.\n"
      "Artifacts land in <out>/<config digest>/; MATS_THREADS caps eval "
      "workers."};
  app.require_subcommand(1);

  CommonArgs a;
  std::string infer_input;
  std::string ablate_modes = "full,no_gn,no_ae,no_kmeans,no_mb";
  std::string ablate_seeds = "1,2,3,4,5";
  SweepSpec sweep_spec;
  std::string sweep_grid;
  std::string sweep_seeds;
  std::string gap_grid;
  std::string gap_seeds = "1,2,3,4,5";

  CLI::App* gen_world =
      app.add_subcommand("gen-world", "generate the class world");
  CLI::App* gen_corpus =
      app.add_subcommand("gen-corpus", "draw the instruction corpus");
  CLI::App* pre_enc = app.add_subcommand(
      "pretrain-encoder", "build or contrastively pretrain the dual encoder");
  CLI::App* pre_dec = app.add_subcommand(
      "pretrain-decoder", "pretrain and freeze the causal decoder");
  CLI::App* train = app.add_subcommand(
      "train", "train mapper and adapters on noisy text embeddings");
  CLI::App* build_mem = app.add_subcommand(
      "build-memory", "encode and cluster the retrieval memory bank");
  CLI::App* infer = app.add_subcommand(
      "infer", "answer audio-side descriptors with the trained model");
  CLI::App* eval =
      app.add_subcommand("eval", "evaluate all tasks on both input sides");
  CLI::App* ablate =
      app.add_subcommand("ablate", "ablation table over projection stages");
  CLI::App* sweep =
      app.add_subcommand("sweep", "metric over a parameter grid");
  CLI::App* diagnose = app.add_subcommand(
      "diagnose", "risk and gap-proxy diagnostics, optionally over a g grid");

  for (CLI::App* sub : {gen_world, gen_corpus, pre_enc, pre_dec, train,
                        build_mem, infer, eval, ablate, sweep, diagnose})
    add_common(sub, a);

  infer->add_option("-i,--input", infer_input,
                    "descriptor file, one JSON object per line")
      ->required()
      ->check(CLI::ExistingFile);
  ablate->add_option("--modes", ablate_modes, "comma-separated mode list")
      ->capture_default_str();
  ablate->add_option("--seeds", ablate_seeds, "comma-separated seeds")
      ->capture_default_str();
  sweep->add_option("--param", sweep_spec.parameter, "parameter to sweep")
      ->required();
  sweep->add_option("--grid", sweep_grid, "comma-separated grid values")
      ->required();
  sweep->add_option("--metric", sweep_spec.metric,
                    "composite|cls_acc|cap_f1|aqa_acc")
      ->capture_default_str();
  sweep->add_option("--seeds", sweep_seeds, "comma-separated seeds");
  diagnose->add_option("--gap-grid", gap_grid,
                       "comma-separated world gaps; runs the full study");
  diagnose->add_option("--seeds", gap_seeds,
                       "comma-separated seeds for the gap study")
      ->capture_default_str();

  gen_world->callback([&] { cmd_gen_world(a); });
  gen_corpus->callback([&] { cmd_gen_corpus(a); });
  pre_enc->callback([&] { cmd_pretrain_encoder(a); });
  pre_dec->callback([&] { cmd_pretrain_decoder(a); });
  train->callback([&] { cmd_train(a); });
  build_mem->callback([&] { cmd_build_memory(a); });
  infer->callback([&] { cmd_infer(a, infer_input); });
  eval->callback([&] { cmd_eval(a); });
  ablate->callback([&] { cmd_ablate(a, ablate_modes, ablate_seeds); });
  sweep->callback([&] { cmd_sweep(a, sweep_spec, sweep_grid, sweep_seeds); });
  diagnose->callback([&] { cmd_diagnose(a, gap_grid, gap_seeds); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
