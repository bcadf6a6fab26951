#include "mats/run_config.hpp"

#include <cerrno>
#include <cstdlib>
#include <ctime>
#include <limits>
#include <string>

#include "mats/digest.hpp"
#include "mats/error.hpp"
#include "mats/optim.hpp"

namespace mats {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::string* KvConfig::find(const std::string& key) const {
  for (const auto& [k, v] : entries)
    if (k == key) return &v;
  return nullptr;
}

void KvConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries.emplace_back(key, value);
}

KvConfig parse_kv_text(const std::string& text) {
  KvConfig cfg;
  std::size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string line = text.substr(
        pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++lineno;

    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;

    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        " has no '=': '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        " has an empty key");
    if (cfg.find(key))
      throw ConfigError("duplicate config key '" + key + "'");
    cfg.entries.emplace_back(key, value);
  }
  return cfg;
}

KvConfig load_kv_file(const std::string& path) {
  return parse_kv_text(read_file_bytes(path));
}

void apply_override(KvConfig& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment +
                      "' is not of the form key=value");
  cfg.set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* want) {
  throw ConfigError("config key '" + key + "': '" + value + "' is not " +
                    want);
}

double parse_double(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE)
    bad_value(key, value, "a number");
  return v;
}

long long parse_integer(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(value.c_str(), &end, 10);
  if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE)
    bad_value(key, value, "an integer");
  return v;
}

int parse_int(const std::string& key, const std::string& value) {
  const long long v = parse_integer(key, value);
  if (v < std::numeric_limits<int>::min() ||
      v > std::numeric_limits<int>::max())
    bad_value(key, value, "a 32-bit integer");
  return static_cast<int>(v);
}

std::uint64_t parse_seed(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  if (value.empty() || value[0] == '-' ||
      end != value.c_str() + value.size() || errno == ERANGE)
    bad_value(key, value, "a nonnegative seed");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "a bool (true|false|1|0)");
}

Scheduler parse_scheduler(const std::string& key, const std::string& value) {
  if (value == "linear") return Scheduler::linear;
  if (value == "cosine") return Scheduler::cosine;
  bad_value(key, value, "one of linear, cosine");
}

bool is_seed_key(const std::string& key) {
  return key == "world.seed" || key == "encoder.seed" ||
         key == "contrastive.seed" || key == "corpus.seed" ||
         key == "pretrain.seed" || key == "train.seed" ||
         key.rfind("seeds.", 0) == 0;
}

// One schema pass; returns false for keys outside the schema.
bool apply_key(ExperimentConfig& c, const std::string& k,
               const std::string& v) {
  if (k == "world.seed") c.world.seed = parse_seed(k, v);
  else if (k == "world.classes") c.world.classes = parse_int(k, v);
  else if (k == "world.latent_dim") c.world.latent_dim = parse_int(k, v);
  else if (k == "world.embed_dim") c.world.embed_dim = parse_int(k, v);
  else if (k == "world.rho") c.world.rho = parse_double(k, v);
  else if (k == "world.gap") c.world.gap = parse_double(k, v);
  else if (k == "world.vocab_size") c.world.vocab_size = parse_int(k, v);
  else if (k == "world.attributes") c.world.attributes = parse_int(k, v);
  else if (k == "encoder.mode") {
    if (v != "parametric" && v != "contrastive")
      bad_value(k, v, "one of parametric, contrastive");
    c.encoder_mode = v;
  } else if (k == "encoder.seed") c.encoder.seed = parse_seed(k, v);
  else if (k == "encoder.nu") c.encoder.nu = parse_double(k, v);
  else if (k == "encoder.normalize") c.encoder.normalize = parse_bool(k, v);
  else if (k == "contrastive.pairs") c.contrastive.pairs = parse_int(k, v);
  else if (k == "contrastive.epochs") c.contrastive.epochs = parse_int(k, v);
  else if (k == "contrastive.batch") c.contrastive.batch = parse_int(k, v);
  else if (k == "contrastive.lr") c.contrastive.lr = parse_double(k, v);
  else if (k == "contrastive.temperature")
    c.contrastive.temperature = parse_double(k, v);
  else if (k == "contrastive.seed") c.contrastive.seed = parse_seed(k, v);
  else if (k == "sizes.train_cls") c.sizes.train_cls = parse_int(k, v);
  else if (k == "sizes.train_cap") c.sizes.train_cap = parse_int(k, v);
  else if (k == "sizes.train_aqa") c.sizes.train_aqa = parse_int(k, v);
  else if (k == "sizes.test_cls") c.sizes.test_cls = parse_int(k, v);
  else if (k == "sizes.test_cap") c.sizes.test_cap = parse_int(k, v);
  else if (k == "sizes.test_aqa") c.sizes.test_aqa = parse_int(k, v);
  else if (k == "corpus.seed") c.corpus_seed = parse_seed(k, v);
  else if (k == "decoder.d_dec") c.decoder.d_dec = parse_int(k, v);
  else if (k == "decoder.n_layers") c.decoder.n_layers = parse_int(k, v);
  else if (k == "decoder.n_heads") c.decoder.n_heads = parse_int(k, v);
  else if (k == "decoder.max_len") c.decoder.max_len = parse_int(k, v);
  else if (k == "pretrain.steps") c.pretrain.steps = parse_int(k, v);
  else if (k == "pretrain.batch") c.pretrain.batch = parse_int(k, v);
  else if (k == "pretrain.lr") c.pretrain.lr = parse_double(k, v);
  else if (k == "pretrain.weight_decay")
    c.pretrain.weight_decay = parse_double(k, v);
  else if (k == "pretrain.warmup") c.pretrain.warmup = parse_int(k, v);
  else if (k == "pretrain.heldout") c.pretrain.heldout = parse_int(k, v);
  else if (k == "pretrain.seed") c.pretrain.seed = parse_seed(k, v);
  else if (k == "mapper.queries") c.mapper.queries = parse_int(k, v);
  else if (k == "mapper.d_model") c.mapper.d_model = parse_int(k, v);
  else if (k == "mapper.n_layers") c.mapper.n_layers = parse_int(k, v);
  else if (k == "mapper.n_heads") c.mapper.n_heads = parse_int(k, v);
  else if (k == "train.lr") c.train.lr = parse_double(k, v);
  else if (k == "train.weight_decay")
    c.train.weight_decay = parse_double(k, v);
  else if (k == "train.clip_norm") c.train.clip_norm = parse_double(k, v);
  else if (k == "train.scheduler") c.train.scheduler = parse_scheduler(k, v);
  else if (k == "train.warmup_steps")
    c.train.warmup_steps = parse_int(k, v);
  else if (k == "train.batch_size") c.train.batch_size = parse_int(k, v);
  else if (k == "train.total_steps") c.train.total_steps = parse_int(k, v);
  else if (k == "train.seed") c.train.seed = parse_seed(k, v);
  else if (k == "train.sigma_source") {
    if (v != "estimated" && v != "fixed")
      bad_value(k, v, "one of estimated, fixed");
    c.train.sigma_source = v;
  } else if (k == "train.sigma_value")
    c.train.sigma_value = parse_double(k, v);
  else if (k == "train.sigma_pairs") c.train.sigma_pairs = parse_int(k, v);
  else if (k == "lora.rank") c.train.lora.rank = parse_int(k, v);
  else if (k == "lora.alpha") c.train.lora.alpha = parse_double(k, v);
  else if (k == "lora.dropout") c.train.lora.dropout = parse_double(k, v);
  else if (k == "santa.sigma") c.santa.sigma = parse_double(k, v);
  else if (k == "santa.memory_size") c.santa.memory_size = parse_int(k, v);
  else if (k == "santa.clusters") c.santa.clusters = parse_int(k, v);
  else if (k == "santa.top_l") c.santa.top_l = parse_int(k, v);
  else if (k == "santa.tau") c.santa.tau = parse_double(k, v);
  else if (k == "santa.lambda") c.santa.lambda = parse_double(k, v);
  else if (k == "santa.kmeans_iters")
    c.santa.kmeans_iters = parse_int(k, v);
  else if (k == "santa.no_kmeans") c.santa.no_kmeans = parse_bool(k, v);
  else if (k == "santa.no_memory_bank")
    c.santa.no_memory_bank = parse_bool(k, v);
  else if (k == "santa.no_audio_embedding")
    c.santa.no_audio_embedding = parse_bool(k, v);
  else if (k == "santa.no_gaussian_noise")
    c.santa.no_gaussian_noise = parse_bool(k, v);
  else if (k == "seeds.decoder_init")
    c.decoder_init_seed = parse_seed(k, v);
  else if (k == "seeds.mapper_init") c.mapper_init_seed = parse_seed(k, v);
  else if (k == "seeds.lora_init") c.lora_init_seed = parse_seed(k, v);
  else if (k == "seeds.bank") c.bank_seed = parse_seed(k, v);
  else if (k == "seeds.eval") c.eval_seed = parse_seed(k, v);
  else if (k == "eval.max_new") c.max_new = parse_int(k, v);
  else return false;
  return true;
}

}  // namespace

ExperimentConfig experiment_from_kv(const KvConfig& kv) {
  ExperimentConfig cfg;
  // master_seed first, non-seed keys next, explicit seed keys last, so
  // individual seeds override the master rewrite regardless of file order.
  const std::string* master = kv.find("master_seed");
  if (master) cfg = reseed(cfg, parse_seed("master_seed", *master));
  for (const auto& [k, v] : kv.entries) {
    if (k == "master_seed" || is_seed_key(k)) continue;
    if (!apply_key(cfg, k, v))
      throw ConfigError("unknown config key '" + k + "'");
  }
  for (const auto& [k, v] : kv.entries) {
    if (!is_seed_key(k)) continue;
    if (!apply_key(cfg, k, v))
      throw ConfigError("unknown config key '" + k + "'");
  }
  return cfg;
}

Json resolved_config_json(const ExperimentConfig& c) {
  Json j;
  j["world.seed"] = c.world.seed;
  j["world.classes"] = c.world.classes;
  j["world.latent_dim"] = c.world.latent_dim;
  j["world.embed_dim"] = c.world.embed_dim;
  j["world.rho"] = c.world.rho;
  j["world.gap"] = c.world.gap;
  j["world.vocab_size"] = c.world.vocab_size;
  j["world.attributes"] = c.world.attributes;
  j["encoder.mode"] = c.encoder_mode;
  j["encoder.seed"] = c.encoder.seed;
  j["encoder.nu"] = c.encoder.nu;
  j["encoder.normalize"] = c.encoder.normalize;
  j["contrastive.pairs"] = c.contrastive.pairs;
  j["contrastive.epochs"] = c.contrastive.epochs;
  j["contrastive.batch"] = c.contrastive.batch;
  j["contrastive.lr"] = c.contrastive.lr;
  j["contrastive.temperature"] = c.contrastive.temperature;
  j["contrastive.seed"] = c.contrastive.seed;
  j["sizes.train_cls"] = c.sizes.train_cls;
  j["sizes.train_cap"] = c.sizes.train_cap;
  j["sizes.train_aqa"] = c.sizes.train_aqa;
  j["sizes.test_cls"] = c.sizes.test_cls;
  j["sizes.test_cap"] = c.sizes.test_cap;
  j["sizes.test_aqa"] = c.sizes.test_aqa;
  j["corpus.seed"] = c.corpus_seed;
  j["decoder.d_dec"] = c.decoder.d_dec;
  j["decoder.n_layers"] = c.decoder.n_layers;
  j["decoder.n_heads"] = c.decoder.n_heads;
  j["decoder.max_len"] = c.decoder.max_len;
  j["pretrain.steps"] = c.pretrain.steps;
  j["pretrain.batch"] = c.pretrain.batch;
  j["pretrain.lr"] = c.pretrain.lr;
  j["pretrain.weight_decay"] = c.pretrain.weight_decay;
  j["pretrain.warmup"] = c.pretrain.warmup;
  j["pretrain.heldout"] = c.pretrain.heldout;
  j["pretrain.seed"] = c.pretrain.seed;
  j["mapper.queries"] = c.mapper.queries;
  j["mapper.d_model"] = c.mapper.d_model;
  j["mapper.n_layers"] = c.mapper.n_layers;
  j["mapper.n_heads"] = c.mapper.n_heads;
  j["train.lr"] = c.train.lr;
  j["train.weight_decay"] = c.train.weight_decay;
  j["train.clip_norm"] = c.train.clip_norm;
  j["train.scheduler"] =
      c.train.scheduler == Scheduler::cosine ? "cosine" : "linear";
  j["train.warmup_steps"] = c.train.warmup_steps;
  j["train.batch_size"] = c.train.batch_size;
  j["train.total_steps"] = c.train.total_steps;
  j["train.seed"] = c.train.seed;
  j["train.sigma_source"] = c.train.sigma_source;
  j["train.sigma_value"] = c.train.sigma_value;
  j["train.sigma_pairs"] = c.train.sigma_pairs;
  j["lora.rank"] = c.train.lora.rank;
  j["lora.alpha"] = c.train.lora.alpha;
  j["lora.dropout"] = c.train.lora.dropout;
  j["santa.sigma"] = c.santa.sigma;
  j["santa.memory_size"] = c.santa.memory_size;
  j["santa.clusters"] = c.santa.clusters;
  j["santa.top_l"] = c.santa.top_l;
  j["santa.tau"] = c.santa.tau;
  j["santa.lambda"] = c.santa.lambda;
  j["santa.kmeans_iters"] = c.santa.kmeans_iters;
  j["santa.no_kmeans"] = c.santa.no_kmeans;
  j["santa.no_memory_bank"] = c.santa.no_memory_bank;
  j["santa.no_audio_embedding"] = c.santa.no_audio_embedding;
  j["santa.no_gaussian_noise"] = c.santa.no_gaussian_noise;
  j["seeds.decoder_init"] = c.decoder_init_seed;
  j["seeds.mapper_init"] = c.mapper_init_seed;
  j["seeds.lora_init"] = c.lora_init_seed;
  j["seeds.bank"] = c.bank_seed;
  j["seeds.eval"] = c.eval_seed;
  j["eval.max_new"] = c.max_new;
  return j;
}

Json run_manifest(const std::string& command, const ExperimentConfig& cfg,
                  const std::map<std::string, std::string>& inputs,
                  const std::map<std::string, std::string>& outputs) {
  Json j;
  j["magic"] = "MATSMF01";
  j["version"] = 1;
  j["command"] = command;
  j["config_digest"] = cfg.digest();
  j["config"] = resolved_config_json(cfg);
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  char stamp[32];
  const std::time_t now = std::time(nullptr);
  std::tm tm_utc{};
  gmtime_r(&now, &tm_utc);
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  j["timestamp"] = stamp;
  return j;
}

std::string file_digest(const std::string& path) {
  Digest d;
  d.str(read_file_bytes(path));
  return d.hex();
}

}  // namespace mats
