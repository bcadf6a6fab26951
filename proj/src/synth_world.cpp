#include "mats/synth_world.hpp"

#include <algorithm>

#include "mats/digest.hpp"
#include "mats/error.hpp"
#include "mats/io.hpp"
#include "mats/metrics.hpp"

namespace mats {

const char* const kClsInstruction = "Classify events in the audio clip.";
const char* const kCapInstruction = "Generate audio caption.";

std::string aqa_instruction(int attribute) {
  return "Is attribute a" + std::to_string(attribute) + " high?";
}

const char* task_name(Task t) {
  switch (t) {
    case Task::cls: return "cls";
    case Task::cap: return "cap";
    case Task::aqa: return "aqa";
  }
  throw UsageError("task_name: bad task");
}

Task task_from_name(const std::string& name) {
  if (name == "cls") return Task::cls;
  if (name == "cap") return Task::cap;
  if (name == "aqa") return Task::aqa;
  throw ConfigError("unknown task '" + name + "' (expected cls|cap|aqa)");
}

TokenId Vocab::id(const std::string& tok) const {
  auto it = index.find(tok);
  if (it == index.end()) throw UsageError("Vocab: unknown token '" + tok + "'");
  return it->second;
}

TokenSeq Vocab::tokenize(const std::string& text) const {
  TokenSeq out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find(' ', start);
    if (end == std::string::npos) end = text.size();
    if (end > start) out.push_back(id(text.substr(start, end - start)));
    start = end + 1;
  }
  return out;
}

std::string Vocab::text(const TokenSeq& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= static_cast<TokenId>(tokens.size()))
      throw UsageError("Vocab: token id out of range");
    if (!out.empty()) out += ' ';
    out += tokens[static_cast<std::size_t>(ids[i])];
  }
  return out;
}

namespace {

const char* const kNatoNames[26] = {
    "alpha",   "bravo",   "charlie", "delta",  "echo",   "foxtrot", "golf",
    "hotel",   "india",   "juliett", "kilo",   "lima",   "mike",    "november",
    "oscar",   "papa",    "quebec",  "romeo",  "sierra", "tango",   "uniform",
    "victor",  "whiskey", "xray",    "yankee", "zulu"};

std::vector<std::string> make_class_names(int classes) {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(classes));
  for (int i = 0; i < classes; ++i) {
    if (i < 26)
      names.emplace_back(kNatoNames[i]);
    else
      names.push_back("class" + std::to_string(i));
  }
  return names;
}

Vocab make_vocab(const WorldConfig& cfg,
                 const std::vector<std::string>& class_names) {
  std::vector<std::string> toks = {"<pad>", "<bos>", "<eos>", "yes", "no"};
  for (const char* w : {"Classify", "events", "in", "the", "audio", "clip.",
                        "Generate", "caption.", "Is", "attribute", "high?"})
    toks.emplace_back(w);
  for (int a = 0; a < cfg.attributes; ++a)
    toks.push_back("a" + std::to_string(a));
  for (int a = 0; a < cfg.attributes; ++a) {
    toks.push_back("a" + std::to_string(a) + "_hi");
    toks.push_back("a" + std::to_string(a) + "_lo");
  }
  for (const auto& n : class_names) toks.push_back(n);
  const int needed = static_cast<int>(toks.size());
  if (needed > cfg.vocab_size)
    throw ConfigError("vocab_size=" + std::to_string(cfg.vocab_size) +
                      " too small: " + std::to_string(cfg.classes) +
                      " classes and " + std::to_string(cfg.attributes) +
                      " attributes need " + std::to_string(needed));
  for (int i = needed; i < cfg.vocab_size; ++i)
    toks.push_back("tok" + std::to_string(i));

  Vocab v;
  v.tokens = std::move(toks);
  for (std::size_t i = 0; i < v.tokens.size(); ++i) {
    if (v.index.count(v.tokens[i]))
      throw ConfigError("vocab collision on token '" + v.tokens[i] + "'");
    v.index.emplace(v.tokens[i], static_cast<TokenId>(i));
  }
  v.pad = 0;
  v.bos = 1;
  v.eos = 2;
  v.yes = 3;
  v.no = 4;
  return v;
}

Matrix draw_prototypes(const WorldConfig& cfg, RngStream rng) {
  const double min_dist = 4.0 * cfg.rho;
  Matrix protos(cfg.classes, cfg.latent_dim);
  const int max_attempts = 10000;
  int attempts = 0;
  for (int c = 0; c < cfg.classes; ++c) {
    while (true) {
      if (++attempts > max_attempts)
        throw ConfigError(
            "prototype rejection failed after " +
            std::to_string(max_attempts) +
            " draws; classes too dense for rho=" + std::to_string(cfg.rho));
      Vector cand(cfg.latent_dim);
      for (Index i = 0; i < cfg.latent_dim; ++i)
        cand[i] = rng.next_gaussian();
      bool ok = true;
      for (int p = 0; p < c && ok; ++p)
        if ((protos.row(p).transpose() - cand).norm() <= min_dist) ok = false;
      if (ok) {
        protos.row(c) = cand.transpose();
        break;
      }
    }
  }
  return protos;
}

}  // namespace

WorldSpec build_world(const WorldConfig& cfg) {
  if (cfg.classes < 2) throw ConfigError("classes must be >= 2");
  if (cfg.latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (cfg.embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
  if (cfg.rho < 0.0) throw ConfigError("rho must be >= 0");
  if (cfg.gap < 0.0) throw ConfigError("gap must be >= 0");
  if (cfg.attributes < 1) throw ConfigError("attributes must be >= 1");
  if (cfg.attributes > cfg.latent_dim)
    throw ConfigError("attributes cannot exceed latent_dim");

  WorldSpec w;
  w.cfg = cfg;
  w.class_names = make_class_names(cfg.classes);
  w.vocab = make_vocab(cfg, w.class_names);
  RngStream rng(cfg.seed);
  w.prototypes = draw_prototypes(cfg, rng.fork("prototypes"));
  return w;
}

std::string WorldSpec::digest() const {
  Digest d;
  d.u64(cfg.seed);
  d.u64(static_cast<std::uint64_t>(cfg.classes));
  d.u64(static_cast<std::uint64_t>(cfg.latent_dim));
  d.u64(static_cast<std::uint64_t>(cfg.embed_dim));
  d.f64(cfg.rho);
  d.f64(cfg.gap);
  d.u64(static_cast<std::uint64_t>(cfg.vocab_size));
  d.u64(static_cast<std::uint64_t>(cfg.attributes));
  for (const auto& t : vocab.tokens) d.str(t);
  for (const auto& n : class_names) d.str(n);
  d.matrix(prototypes);
  return d.hex();
}

ContentDescriptor draw_content(const WorldSpec& world, int class_id,
                               RngStream& rng) {
  if (class_id < 0 || class_id >= world.cfg.classes)
    throw UsageError("draw_content: class_id out of range");
  ContentDescriptor c;
  c.class_id = class_id;
  c.latent = world.prototypes.row(class_id).transpose() +
             sample_gaussian(rng, world.cfg.latent_dim, world.cfg.rho);
  return c;
}

std::vector<int> content_attributes(const WorldSpec& world,
                                    const ContentDescriptor& content) {
  if (content.latent.size() != world.cfg.latent_dim)
    throw UsageError("content_attributes: latent dimension mismatch");
  std::vector<int> attrs(static_cast<std::size_t>(world.cfg.attributes));
  for (int j = 0; j < world.cfg.attributes; ++j)
    attrs[static_cast<std::size_t>(j)] =
        content.latent[j] >= world.prototypes(content.class_id, j) ? 1 : 0;
  return attrs;
}

SampleTuple render_tuple(const WorldSpec& world, const ContentDescriptor& c,
                         Task task, RngStream& rng) {
  if (c.class_id < 0 || c.class_id >= world.cfg.classes)
    throw UsageError("render_tuple: class_id out of range");
  SampleTuple s;
  s.task = task;
  s.content = c;
  const std::string& cname =
      world.class_names[static_cast<std::size_t>(c.class_id)];
  switch (task) {
    case Task::cls: {
      s.instruction = kClsInstruction;
      s.answer = cname;
      break;
    }
    case Task::cap: {
      s.instruction = kCapInstruction;
      const auto attrs = content_attributes(world, c);
      s.answer = cname;
      for (int j = 0; j < world.cfg.attributes; ++j)
        s.answer += " a" + std::to_string(j) +
                    (attrs[static_cast<std::size_t>(j)] ? "_hi" : "_lo");
      break;
    }
    case Task::aqa: {
      const int j =
          static_cast<int>(rng.next_below(
              static_cast<std::uint64_t>(world.cfg.attributes)));
      s.instruction = aqa_instruction(j);
      const auto attrs = content_attributes(world, c);
      s.answer = attrs[static_cast<std::size_t>(j)] ? "yes" : "no";
      break;
    }
  }
  s.instruction_ids = world.vocab.tokenize(s.instruction);
  s.answer_ids = world.vocab.tokenize(s.answer);
  s.answer_ids.push_back(world.vocab.eos);
  return s;
}

namespace {

void fill_split(const WorldSpec& world, const char* split, Task task, int n,
                RngStream base, std::vector<SampleTuple>& out) {
  const std::string label = std::string(split) + "/" + task_name(task);
  RngStream content_rng = base.fork(label + "/content");
  RngStream render_rng = base.fork(label + "/render");
  for (int i = 0; i < n; ++i) {
    const int y = i % world.cfg.classes;
    RngStream cr = content_rng.fork_index(static_cast<std::uint64_t>(i));
    RngStream rr = render_rng.fork_index(static_cast<std::uint64_t>(i));
    ContentDescriptor c = draw_content(world, y, cr);
    out.push_back(render_tuple(world, c, task, rr));
  }
}

}  // namespace

Corpus make_corpus(const WorldSpec& world, const CorpusSizes& sizes,
                   std::uint64_t seed) {
  for (int n : {sizes.train_cls, sizes.train_cap, sizes.train_aqa,
                sizes.test_cls, sizes.test_cap, sizes.test_aqa})
    if (n < 0) throw ConfigError("corpus sizes must be >= 0");
  Corpus corpus;
  corpus.world_digest = world.digest();
  corpus.sizes = sizes;
  corpus.seed = seed;
  RngStream base(seed);
  fill_split(world, "train", Task::cls, sizes.train_cls, base, corpus.train);
  fill_split(world, "train", Task::cap, sizes.train_cap, base, corpus.train);
  fill_split(world, "train", Task::aqa, sizes.train_aqa, base, corpus.train);
  fill_split(world, "test", Task::cls, sizes.test_cls, base, corpus.test);
  fill_split(world, "test", Task::cap, sizes.test_cap, base, corpus.test);
  fill_split(world, "test", Task::aqa, sizes.test_aqa, base, corpus.test);
  return corpus;
}

void save_world(const WorldSpec& world, const std::string& path) {
  Json j;
  j["magic"] = "MATSWD01";
  j["version"] = 1;
  j["seed"] = world.cfg.seed;
  j["classes"] = world.cfg.classes;
  j["latent_dim"] = world.cfg.latent_dim;
  j["embed_dim"] = world.cfg.embed_dim;
  j["rho"] = world.cfg.rho;
  j["gap"] = world.cfg.gap;
  j["vocab_size"] = world.cfg.vocab_size;
  j["attributes"] = world.cfg.attributes;
  j["vocab"] = world.vocab.tokens;
  j["class_names"] = world.class_names;
  j["prototypes"] = matrix_to_json(world.prototypes);
  save_json_file(path, j);
}

WorldSpec load_world(const std::string& path) {
  Json j = load_json_file(path);
  require_json_magic(j, "MATSWD01", path);
  WorldConfig cfg;
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.classes = j.at("classes").get<int>();
  cfg.latent_dim = j.at("latent_dim").get<Index>();
  cfg.embed_dim = j.at("embed_dim").get<Index>();
  cfg.rho = j.at("rho").get<double>();
  cfg.gap = j.at("gap").get<double>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.attributes = j.at("attributes").get<int>();

  WorldSpec w = build_world(cfg);
  // The file is authoritative; verify it agrees with the deterministic
  // rebuild so a hand-edited artifact cannot drift silently.
  const auto stored_vocab = j.at("vocab").get<std::vector<std::string>>();
  const auto stored_names = j.at("class_names").get<std::vector<std::string>>();
  const Matrix stored_protos = matrix_from_json(j.at("prototypes"));
  if (stored_vocab != w.vocab.tokens || stored_names != w.class_names ||
      stored_protos.rows() != w.prototypes.rows() ||
      stored_protos.cols() != w.prototypes.cols() ||
      !stored_protos.cwiseEqual(w.prototypes).all())
    throw IoError("world file " + path +
                  " is inconsistent with its own seed/config");
  return w;
}

namespace {

Json tuple_to_json(const SampleTuple& s) {
  Json j;
  j["class_id"] = s.content.class_id;
  j["task"] = task_name(s.task);
  j["instruction"] = s.instruction;
  j["answer"] = s.answer;
  j["latent"] = to_double_vec(s.content.latent);
  return j;
}

SampleTuple tuple_from_json(const WorldSpec& world, const Json& j) {
  SampleTuple s;
  s.task = task_from_name(j.at("task").get<std::string>());
  s.content.class_id = j.at("class_id").get<int>();
  s.content.latent = from_double_vec(j.at("latent").get<std::vector<double>>());
  s.instruction = j.at("instruction").get<std::string>();
  s.answer = j.at("answer").get<std::string>();
  s.instruction_ids = world.vocab.tokenize(s.instruction);
  s.answer_ids = world.vocab.tokenize(s.answer);
  s.answer_ids.push_back(world.vocab.eos);
  return s;
}

std::string split_to_jsonl(const std::vector<SampleTuple>& split) {
  std::string out;
  for (const auto& s : split) {
    out += tuple_to_json(s).dump();
    out += '\n';
  }
  return out;
}

std::vector<SampleTuple> split_from_jsonl(const WorldSpec& world,
                                          const std::string& text,
                                          const std::string& path) {
  std::vector<SampleTuple> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    if (end > start) {
      Json j = Json::parse(text.substr(start, end - start), nullptr, false);
      if (j.is_discarded())
        throw IoError("malformed JSONL line in " + path);
      out.push_back(tuple_from_json(world, j));
    }
    start = end + 1;
  }
  return out;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::string& dir) {
  Json m;
  m["magic"] = "MATSCO01";
  m["version"] = 1;
  m["world_digest"] = corpus.world_digest;
  m["seed"] = corpus.seed;
  m["sizes"] = {{"train_cls", corpus.sizes.train_cls},
                {"train_cap", corpus.sizes.train_cap},
                {"train_aqa", corpus.sizes.train_aqa},
                {"test_cls", corpus.sizes.test_cls},
                {"test_cap", corpus.sizes.test_cap},
                {"test_aqa", corpus.sizes.test_aqa}};
  save_json_file(dir + "/manifest.json", m);
  write_file_bytes(dir + "/train.jsonl", split_to_jsonl(corpus.train));
  write_file_bytes(dir + "/test.jsonl", split_to_jsonl(corpus.test));
}

Corpus load_corpus(const WorldSpec& world, const std::string& dir) {
  Json m = load_json_file(dir + "/manifest.json");
  require_json_magic(m, "MATSCO01", dir + "/manifest.json");
  Corpus corpus;
  corpus.world_digest = m.at("world_digest").get<std::string>();
  if (corpus.world_digest != world.digest())
    throw ConfigError("corpus at " + dir +
                      " was generated for a different world");
  corpus.seed = m.at("seed").get<std::uint64_t>();
  const Json& sz = m.at("sizes");
  corpus.sizes.train_cls = sz.at("train_cls").get<int>();
  corpus.sizes.train_cap = sz.at("train_cap").get<int>();
  corpus.sizes.train_aqa = sz.at("train_aqa").get<int>();
  corpus.sizes.test_cls = sz.at("test_cls").get<int>();
  corpus.sizes.test_cap = sz.at("test_cap").get<int>();
  corpus.sizes.test_aqa = sz.at("test_aqa").get<int>();
  corpus.train = split_from_jsonl(world, read_file_bytes(dir + "/train.jsonl"),
                                  dir + "/train.jsonl");
  corpus.test = split_from_jsonl(world, read_file_bytes(dir + "/test.jsonl"),
                                 dir + "/test.jsonl");
  return corpus;
}

}  // namespace mats
