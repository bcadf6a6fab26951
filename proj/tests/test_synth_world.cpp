#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "mats/error.hpp"
#include "mats/io.hpp"
#include "mats/synth_world.hpp"

using namespace mats;

namespace {

WorldConfig small_cfg() {
  WorldConfig cfg;
  cfg.seed = 7;
  cfg.classes = 6;
  cfg.latent_dim = 8;
  cfg.embed_dim = 8;
  cfg.vocab_size = 40;
  return cfg;
}

}  // namespace

TEST_CASE("build_world is deterministic in the seed") {
  WorldSpec a = build_world(small_cfg());
  WorldSpec b = build_world(small_cfg());
  CHECK(a.digest() == b.digest());
  WorldConfig other = small_cfg();
  other.seed = 8;
  WorldSpec c = build_world(other);
  CHECK(a.digest() != c.digest());
  CHECK(!a.prototypes.cwiseEqual(c.prototypes).all());
}

TEST_CASE("prototype separation exceeds four rho") {
  WorldSpec w = build_world(small_cfg());
  const double floor = 4.0 * w.cfg.rho;
  for (int i = 0; i < w.cfg.classes; ++i)
    for (int j = i + 1; j < w.cfg.classes; ++j)
      CHECK((w.prototypes.row(i) - w.prototypes.row(j)).norm() > floor);
}

TEST_CASE("impossible separation raises ConfigError") {
  WorldConfig cfg = small_cfg();
  cfg.classes = 50;
  cfg.latent_dim = 2;
  cfg.rho = 10.0;  // forces min distance 40 between standard normals
  cfg.vocab_size = 128;
  CHECK_THROWS_AS(build_world(cfg), ConfigError);
}

TEST_CASE("vocab tokens are unique and round trip") {
  WorldSpec w = build_world(small_cfg());
  CHECK(w.vocab.size() == w.cfg.vocab_size);
  std::set<std::string> uniq(w.vocab.tokens.begin(), w.vocab.tokens.end());
  CHECK(uniq.size() == w.vocab.tokens.size());
  CHECK(w.vocab.tokens[w.vocab.pad] == "<pad>");
  CHECK(w.vocab.tokens[w.vocab.eos] == "<eos>");
  CHECK(w.vocab.tokens[w.vocab.yes] == "yes");
  const std::string text = "Classify events in the audio clip.";
  CHECK(w.vocab.text(w.vocab.tokenize(text)) == text);
  CHECK_THROWS_AS(w.vocab.id("nonexistent-token"), UsageError);
}

TEST_CASE("vocab too small names the offending sizes") {
  WorldConfig cfg = small_cfg();
  cfg.vocab_size = 10;
  try {
    build_world(cfg);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("vocab_size") != std::string::npos);
  }
}

TEST_CASE("instruction templates are byte exact") {
  WorldSpec w = build_world(small_cfg());
  RngStream rng(1);
  ContentDescriptor c = draw_content(w, 2, rng);
  SampleTuple cls = render_tuple(w, c, Task::cls, rng);
  CHECK(cls.instruction == "Classify events in the audio clip.");
  SampleTuple cap = render_tuple(w, c, Task::cap, rng);
  CHECK(cap.instruction == "Generate audio caption.");
  SampleTuple aqa = render_tuple(w, c, Task::aqa, rng);
  CHECK(aqa.instruction.rfind("Is attribute a", 0) == 0);
  CHECK(aqa.instruction.substr(aqa.instruction.size() - 6) == " high?");
}

TEST_CASE("answers follow task semantics and end with EOS") {
  WorldSpec w = build_world(small_cfg());
  RngStream rng(5);
  for (int y = 0; y < w.cfg.classes; ++y) {
    ContentDescriptor c = draw_content(w, y, rng);
    const auto attrs = content_attributes(w, c);

    SampleTuple cls = render_tuple(w, c, Task::cls, rng);
    CHECK(cls.answer == w.class_names[static_cast<std::size_t>(y)]);
    CHECK(cls.answer_ids.back() == w.vocab.eos);
    CHECK(cls.answer_ids.size() == 2);

    SampleTuple cap = render_tuple(w, c, Task::cap, rng);
    CHECK(cap.answer_ids.back() == w.vocab.eos);
    // class name plus one value token per attribute
    CHECK(cap.answer_ids.size() ==
          1 + static_cast<std::size_t>(w.cfg.attributes) + 1);
    for (int j = 0; j < w.cfg.attributes; ++j) {
      const std::string expect =
          " a" + std::to_string(j) +
          (attrs[static_cast<std::size_t>(j)] ? "_hi" : "_lo");
      CHECK(cap.answer.find(expect) != std::string::npos);
    }

    SampleTuple aqa = render_tuple(w, c, Task::aqa, rng);
    const int asked = aqa.instruction[14] - '0';  // "Is attribute aJ high?"
    CHECK(aqa.answer ==
          (attrs[static_cast<std::size_t>(asked)] ? "yes" : "no"));
    CHECK(aqa.answer_ids.front() ==
          (attrs[static_cast<std::size_t>(asked)] ? w.vocab.yes : w.vocab.no));
  }
}

TEST_CASE("draw_content at rho zero returns the prototype exactly") {
  WorldConfig cfg = small_cfg();
  cfg.rho = 0.0;
  WorldSpec w = build_world(cfg);
  RngStream rng(3);
  ContentDescriptor c = draw_content(w, 4, rng);
  for (Index i = 0; i < w.cfg.latent_dim; ++i)
    CHECK(c.latent[i] == w.prototypes(4, i));
  CHECK_THROWS_AS(draw_content(w, -1, rng), UsageError);
  CHECK_THROWS_AS(draw_content(w, w.cfg.classes, rng), UsageError);
}

TEST_CASE("mean latent stays near the prototype") {
  WorldSpec w = build_world(small_cfg());
  RngStream rng(17);
  Vector mean = Vector::Zero(w.cfg.latent_dim);
  const int n = 1000;
  for (int i = 0; i < n; ++i) mean += draw_content(w, 1, rng).latent;
  mean /= static_cast<double>(n);
  CHECK((mean - w.prototypes.row(1).transpose()).cwiseAbs().maxCoeff() < 0.02);
}

TEST_CASE("corpus is class balanced within one per task block") {
  WorldConfig cfg;
  cfg.seed = 11;
  CorpusSizes sizes;  // defaults: 2600 cls train over 26 classes
  WorldSpec w = build_world(cfg);
  Corpus corpus = make_corpus(w, sizes, 99);
  std::map<std::pair<Task, int>, int> counts;
  for (const auto& s : corpus.train) ++counts[{s.task, s.content.class_id}];
  for (Task t : {Task::cls, Task::cap, Task::aqa}) {
    int lo = 1 << 30, hi = 0;
    for (int y = 0; y < cfg.classes; ++y) {
      lo = std::min(lo, counts[{t, y}]);
      hi = std::max(hi, counts[{t, y}]);
    }
    CHECK(hi - lo <= 1);
    if (t == Task::cls) {
      CHECK(lo == 100);  // 2600 / 26 exactly
      CHECK(hi == 100);
    }
  }
}

TEST_CASE("train and test content draws are disjoint") {
  WorldSpec w = build_world(small_cfg());
  CorpusSizes sizes{12, 6, 6, 12, 6, 6};
  Corpus corpus = make_corpus(w, sizes, 5);
  for (const auto& tr : corpus.train)
    for (const auto& te : corpus.test)
      CHECK(!(tr.content.latent.cwiseEqual(te.content.latent).all()));
}

TEST_CASE("corpus generation is deterministic in the seed") {
  WorldSpec w = build_world(small_cfg());
  CorpusSizes sizes{12, 6, 6, 6, 3, 3};
  Corpus a = make_corpus(w, sizes, 5);
  Corpus b = make_corpus(w, sizes, 5);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].answer == b.train[i].answer);
    CHECK(a.train[i].content.latent.cwiseEqual(b.train[i].content.latent).all());
  }
  Corpus c = make_corpus(w, sizes, 6);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.train.size(); ++i)
    if (!a.train[i].content.latent.cwiseEqual(c.train[i].content.latent).all())
      any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("world and corpus round trip through files byte-identically") {
  namespace fs = std::filesystem;
  const std::string dir = "tmp_synth_world_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  WorldSpec w = build_world(small_cfg());
  save_world(w, dir + "/world.json");
  WorldSpec w2 = load_world(dir + "/world.json");
  CHECK(w.digest() == w2.digest());

  CorpusSizes sizes{12, 6, 6, 6, 3, 3};
  Corpus corpus = make_corpus(w, sizes, 21);
  save_corpus(corpus, dir + "/corpus");
  const std::string bytes1 = read_file_bytes(dir + "/corpus/train.jsonl");
  save_corpus(corpus, dir + "/corpus");
  const std::string bytes2 = read_file_bytes(dir + "/corpus/train.jsonl");
  CHECK(bytes1 == bytes2);

  Corpus loaded = load_corpus(w, dir + "/corpus");
  REQUIRE(loaded.train.size() == corpus.train.size());
  REQUIRE(loaded.test.size() == corpus.test.size());
  for (std::size_t i = 0; i < corpus.train.size(); ++i) {
    const auto& x = corpus.train[i];
    const auto& y = loaded.train[i];
    CHECK(x.task == y.task);
    CHECK(x.instruction == y.instruction);
    CHECK(x.answer == y.answer);
    CHECK(x.instruction_ids == y.instruction_ids);
    CHECK(x.answer_ids == y.answer_ids);
    CHECK(x.content.latent.cwiseEqual(y.content.latent).all());
  }

  // a corpus refuses to load against the wrong world
  WorldConfig other = small_cfg();
  other.seed = 1234;
  WorldSpec w3 = build_world(other);
  CHECK_THROWS_AS(load_corpus(w3, dir + "/corpus"), ConfigError);

  fs::remove_all(dir);
}

TEST_CASE("missing corpus artifacts raise IoError") {
  WorldSpec w = build_world(small_cfg());
  CHECK_THROWS_AS(load_corpus(w, "no_such_dir_xyz"), IoError);
  CHECK_THROWS_AS(load_world("no_such_world.json"), IoError);
}
