#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mats/rng.hpp"
#include "mats/types.hpp"

namespace mats {

// Paired-modality toy world: C classes with latent prototypes, per-sample
// latent jitter, and three instruction-following tasks rendered from fixed
// templates over a small closed vocabulary.

enum class Task { cls, cap, aqa };

const char* task_name(Task t);
Task task_from_name(const std::string& name);

struct WorldConfig {
  std::uint64_t seed = 1;
  int classes = 26;
  Index latent_dim = 16;
  Index embed_dim = 16;  // encoder output width downstream modules default to
  double rho = 0.1;      // within-class latent spread
  double gap = 0.5;      // audio-view offset magnitude consumed by the encoder
  int vocab_size = 64;
  int attributes = 2;    // binary attributes rendered into captions and AQA
};

struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, TokenId> index;
  TokenId pad = 0, bos = 1, eos = 2, yes = 3, no = 4;

  TokenId id(const std::string& tok) const;
  TokenSeq tokenize(const std::string& text) const;  // split on single spaces
  std::string text(const TokenSeq& ids) const;       // space-joined
  int size() const { return static_cast<int>(tokens.size()); }
};

struct WorldSpec {
  WorldConfig cfg;
  Vocab vocab;
  std::vector<std::string> class_names;  // one vocab token per class
  Matrix prototypes;                     // classes x latent_dim

  std::string digest() const;
};

// Instruction templates. CLS and CAP are fixed strings; AQA is a binary
// question over one attribute index.
extern const char* const kClsInstruction;   // "Classify events in the audio clip."
extern const char* const kCapInstruction;   // "Generate audio caption."
std::string aqa_instruction(int attribute);

WorldSpec build_world(const WorldConfig& cfg);

struct ContentDescriptor {
  int class_id = 0;
  Vector latent;
};

ContentDescriptor draw_content(const WorldSpec& world, int class_id,
                               RngStream& rng);

// Binary attribute values from latent quantization: attribute j is 1 iff
// latent[j] >= prototype[class][j].
std::vector<int> content_attributes(const WorldSpec& world,
                                    const ContentDescriptor& content);

struct SampleTuple {
  Task task = Task::cls;
  ContentDescriptor content;
  std::string instruction;
  std::string answer;       // text form, no terminator
  TokenSeq instruction_ids;
  TokenSeq answer_ids;      // ends with EOS
};

SampleTuple render_tuple(const WorldSpec& world, const ContentDescriptor& c,
                         Task task, RngStream& rng);

struct CorpusSizes {
  int train_cls = 2600, train_cap = 1300, train_aqa = 1300;
  int test_cls = 520, test_cap = 260, test_aqa = 260;
};

struct Corpus {
  std::string world_digest;
  CorpusSizes sizes;
  std::uint64_t seed = 0;
  std::vector<SampleTuple> train, test;
};

// Class-balanced draws (per-class counts differ by at most one within each
// split/task block); train and test latents come from disjoint rng forks.
Corpus make_corpus(const WorldSpec& world, const CorpusSizes& sizes,
                   std::uint64_t seed);

void save_world(const WorldSpec& world, const std::string& path);
WorldSpec load_world(const std::string& path);

// Corpus persists as manifest.json plus train.jsonl / test.jsonl in dir.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const WorldSpec& world, const std::string& dir);

}  // namespace mats
