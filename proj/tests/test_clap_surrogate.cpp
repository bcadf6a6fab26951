#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "mats/clap_surrogate.hpp"
#include "mats/error.hpp"
#include "mats/metrics.hpp"
#include "mats/synth_world.hpp"

using namespace mats;

namespace {

WorldConfig small_world_config() {
  WorldConfig wc;
  wc.seed = 11;
  wc.classes = 6;
  wc.latent_dim = 8;
  wc.embed_dim = 8;
  wc.rho = 0.2;
  wc.gap = 0.5;
  wc.vocab_size = 32;
  wc.attributes = 2;
  return wc;
}

std::vector<ContentDescriptor> draw_bank(const WorldSpec& world, int n,
                                         std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<ContentDescriptor> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    RngStream r = rng.fork_index(static_cast<std::uint64_t>(i));
    const int y = static_cast<int>(
        r.next_below(static_cast<std::uint64_t>(world.cfg.classes)));
    out.push_back(draw_content(world, y, r));
  }
  return out;
}

}  // namespace

TEST_CASE("parametric encoder is deterministic in its seed") {
  WorldSpec world = build_world(small_world_config());
  EncoderConfig ec;
  ec.seed = 3;
  DualEncoder a = build_parametric_encoder(world, ec);
  DualEncoder b = build_parametric_encoder(world, ec);
  CHECK(a.digest() == b.digest());
  ec.seed = 4;
  DualEncoder c = build_parametric_encoder(world, ec);
  CHECK(a.digest() != c.digest());
}

TEST_CASE("parametric towers share an orthonormal map") {
  WorldSpec world = build_world(small_world_config());
  DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
  CHECK(enc.mode == "parametric");
  CHECK(enc.frozen);
  CHECK(enc.U_t.cwiseEqual(enc.U_a).all());
  Matrix gram = enc.U_t.transpose() * enc.U_t;
  CHECK((gram - Matrix::Identity(enc.d_lat, enc.d_lat)).cwiseAbs().maxCoeff() <
        1e-12);
  CHECK(enc.b_t.cwiseAbs().maxCoeff() == 0.0);
  CHECK(std::abs(enc.b_a.norm() - world.cfg.gap) < 1e-12);
}

TEST_CASE("parametric encoder rejects embed_dim below latent_dim") {
  WorldConfig wc = small_world_config();
  wc.embed_dim = 4;
  WorldSpec world = build_world(wc);
  CHECK_THROWS_AS(build_parametric_encoder(world, EncoderConfig{}),
                  ConfigError);
}

TEST_CASE("noise-free encode is the exact affine image") {
  WorldSpec world = build_world(small_world_config());
  EncoderConfig ec;
  ec.nu = 0.0;
  DualEncoder enc = build_parametric_encoder(world, ec);
  RngStream rng(7);
  ContentDescriptor c = draw_content(world, 2, rng);
  RngStream er(9);
  const std::uint64_t before = er.counter();
  Vector zt = encode_text(enc, c, er);
  CHECK(er.counter() == before);  // nu == 0 consumes no rng state
  Vector expect = enc.U_t * c.latent;
  CHECK(zt.cwiseEqual(expect).all());
  Vector za = encode_audio(enc, c, er);
  Vector diff = zt - za;
  CHECK(std::abs(diff.norm() - world.cfg.gap) < 1e-12);
}

TEST_CASE("encode guards: frozen flag and latent dimension") {
  WorldSpec world = build_world(small_world_config());
  DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
  RngStream rng(1);
  ContentDescriptor c = draw_content(world, 0, rng);

  DualEncoder thawed = enc;
  thawed.frozen = false;
  CHECK_THROWS_AS(encode_text(thawed, c, rng), UsageError);

  ContentDescriptor bad = c;
  bad.latent = Vector::Zero(enc.d_lat + 1);
  CHECK_THROWS_AS(encode_audio(enc, bad, rng), UsageError);
}

TEST_CASE("normalize option yields unit-norm embeddings") {
  WorldSpec world = build_world(small_world_config());
  EncoderConfig ec;
  ec.normalize = true;
  DualEncoder enc = build_parametric_encoder(world, ec);
  RngStream rng(21);
  for (int i = 0; i < 8; ++i) {
    ContentDescriptor c = draw_content(world, i % world.cfg.classes, rng);
    CHECK(std::abs(encode_text(enc, c, rng).norm() - 1.0) < 1e-12);
    CHECK(std::abs(encode_audio(enc, c, rng).norm() - 1.0) < 1e-12);
  }
}

TEST_CASE("measured gap tracks the configured offset") {
  std::vector<double> gaps = {0.0, 0.25, 0.5, 1.0, 2.0};
  std::vector<double> centroid, grid;
  for (double g : gaps) {
    WorldConfig wc = small_world_config();
    wc.gap = g;
    WorldSpec world = build_world(wc);
    DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
    GapStats st = measure_gap(enc, draw_bank(world, 400, 5), 17);
    centroid.push_back(st.centroid_dist);
    grid.push_back(g);
    CHECK(st.centroid_dist <= st.mean_l2 + 1e-9);
    CHECK(st.mean_inf <= st.mean_l2 + 1e-12);
    if (g >= 0.25) CHECK(std::abs(st.centroid_dist - g) < 0.05);
    CHECK(st.class_ids.size() == st.per_class_centroid.size());
  }
  CHECK(spearman_rho(grid, centroid) >= 0.99);
}

TEST_CASE("paired distances at nu zero are exact") {
  WorldConfig wc = small_world_config();
  wc.gap = 0.5;
  WorldSpec world = build_world(wc);
  EncoderConfig ec;
  ec.nu = 0.0;
  DualEncoder enc = build_parametric_encoder(world, ec);
  GapStats st = measure_gap(enc, draw_bank(world, 100, 3), 4);
  CHECK(std::abs(st.mean_l2 - 0.5) < 1e-12);
  CHECK(std::abs(st.centroid_dist - 0.5) < 1e-12);
  CHECK(std::abs(st.mean_inf - enc.b_a.cwiseAbs().maxCoeff()) < 1e-15);
  for (double pc : st.per_class_centroid) CHECK(std::abs(pc - 0.5) < 1e-12);
}

TEST_CASE("measure_gap rejects an empty bank") {
  WorldSpec world = build_world(small_world_config());
  DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
  CHECK_THROWS_AS(measure_gap(enc, {}, 1), UsageError);
}

TEST_CASE("contrastive pretraining aligns paired views") {
  WorldSpec world = build_world(small_world_config());
  EncoderConfig ec;
  ec.nu = 0.03;
  ContrastiveConfig cc;
  cc.pairs = 512;
  cc.epochs = 8;
  cc.batch = 32;
  cc.seed = 2;
  DualEncoder enc = pretrain_contrastive(world, ec, cc);
  CHECK(enc.mode == "contrastive");
  CHECK(enc.frozen);

  auto bank = draw_bank(world, 64, 91);
  RngStream er(55);
  std::vector<Vector> zt, za;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    RngStream rt = er.fork("t").fork_index(i);
    RngStream ra = er.fork("a").fork_index(i);
    zt.push_back(encode_text(enc, bank[i], rt));
    za.push_back(encode_audio(enc, bank[i], ra));
  }
  int hits = 0;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    double best = -1e300;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < bank.size(); ++j) {
      const double s = zt[i].dot(za[j]) / (zt[i].norm() * za[j].norm());
      if (s > best) {
        best = s;
        arg = j;
      }
    }
    if (arg == i) ++hits;
  }
  CHECK(hits >= 58);  // retrieval@1 >= 0.9 among 64 candidates
}

TEST_CASE("contrastive pretraining is deterministic") {
  WorldSpec world = build_world(small_world_config());
  EncoderConfig ec;
  ec.nu = 0.03;
  ContrastiveConfig cc;
  cc.pairs = 256;
  cc.epochs = 4;
  cc.batch = 32;
  cc.seed = 6;
  DualEncoder a = pretrain_contrastive(world, ec, cc);
  DualEncoder b = pretrain_contrastive(world, ec, cc);
  CHECK(a.digest() == b.digest());
}

TEST_CASE("contrastive towers develop a gap even without an offset") {
  WorldConfig wc = small_world_config();
  wc.gap = 0.0;
  WorldSpec world = build_world(wc);
  EncoderConfig ec;
  ec.nu = 0.03;
  ContrastiveConfig cc;
  cc.pairs = 512;
  cc.epochs = 6;
  cc.batch = 32;
  cc.seed = 8;
  DualEncoder enc = pretrain_contrastive(world, ec, cc);
  GapStats st = measure_gap(enc, draw_bank(world, 300, 13), 29);
  CHECK(st.centroid_dist > 0.0);
}

TEST_CASE("contrastive config validation") {
  WorldSpec world = build_world(small_world_config());
  ContrastiveConfig cc;
  cc.pairs = 32;
  cc.batch = 32;
  CHECK_THROWS_AS(pretrain_contrastive(world, EncoderConfig{}, cc),
                  ConfigError);
  cc.pairs = 256;
  cc.temperature = 0.0;
  CHECK_THROWS_AS(pretrain_contrastive(world, EncoderConfig{}, cc),
                  ConfigError);
}

TEST_CASE("encoder file round trip preserves every bit") {
  WorldSpec world = build_world(small_world_config());
  EncoderConfig ec;
  ec.seed = 12;
  DualEncoder enc = build_parametric_encoder(world, ec);
  auto path = std::filesystem::temp_directory_path() / "mats_enc_rt.json";
  save_encoder(enc, path.string());
  DualEncoder back = load_encoder(path.string());
  CHECK(back.digest() == enc.digest());
  RngStream rng(40);
  ContentDescriptor c = draw_content(world, 1, rng);
  RngStream r1(41), r2(41);
  CHECK(encode_audio(enc, c, r1).cwiseEqual(encode_audio(back, c, r2)).all());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_encoder(path.string()), IoError);
}
