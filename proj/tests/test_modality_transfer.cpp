#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "mats/clap_surrogate.hpp"
#include "mats/error.hpp"
#include "mats/metrics.hpp"
#include "mats/modality_transfer.hpp"
#include "mats/synth_world.hpp"

using namespace mats;

namespace {

WorldConfig small_world_config() {
  WorldConfig wc;
  wc.seed = 11;
  wc.classes = 6;
  wc.latent_dim = 8;
  wc.embed_dim = 8;
  wc.rho = 0.1;
  wc.gap = 0.5;
  wc.vocab_size = 32;
  wc.attributes = 2;
  return wc;
}

std::vector<ContentDescriptor> draw_bank_contents(const WorldSpec& world,
                                                  int n, std::uint64_t seed) {
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

MemoryBank fitted_bank(const WorldSpec& world, const DualEncoder& enc,
                       Index m, Index k, double sigma, std::uint64_t seed) {
  auto texts = draw_bank_contents(world, static_cast<int>(2 * m), seed + 7);
  MemoryBank bank = build_memory(texts, enc, world, sigma, m, seed);
  return kmeans_fit(std::move(bank), k, 50, seed + 1);
}

Matrix rows_from(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()),
           static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace

TEST_CASE("estimate_sigma zero and pure-offset closed forms") {
  Matrix zt = rows_from({{1.0, 2.0}, {0.5, -3.0}, {4.0, 4.0}});
  CHECK(estimate_sigma(zt, zt) == 0.0);

  // Pure offset along the first axis: every pair's infinity norm is exactly
  // the offset, so the mean must be exact too.
  const int n = 30;
  Matrix a(n, 4), t(n, 4);
  RngStream rng(3);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 4; ++j) t(i, j) = rng.next_gaussian();
    a.row(i) = t.row(i);
    a(i, 0) += 0.3;
  }
  CHECK(estimate_sigma(t, a) == 0.3);

  CHECK_THROWS_AS(estimate_sigma(Matrix(0, 4), Matrix(0, 4)), UsageError);
  CHECK_THROWS_AS(estimate_sigma(Matrix(2, 4), Matrix(2, 3)), UsageError);
}

TEST_CASE("estimate_sigma_world matches the encoder offset scale") {
  WorldSpec world = build_world(small_world_config());
  EncoderConfig ec;
  ec.nu = 0.0;
  DualEncoder enc = build_parametric_encoder(world, ec);
  // With no view noise the paired difference is exactly the audio offset, so
  // sigma is the offset's largest coordinate.
  const double s = estimate_sigma_world(world, enc, 30, 5);
  CHECK(std::abs(s - enc.b_a.cwiseAbs().maxCoeff()) < 1e-15);
  CHECK(estimate_sigma_world(world, enc, 30, 5) == s);
  CHECK_THROWS_AS(estimate_sigma_world(world, enc, 0, 5), UsageError);
}

TEST_CASE("inject_noise identity and magnitude") {
  Vector z(3);
  z << 1.0, -2.0, 0.25;
  RngStream rng(9);
  const std::uint64_t before = rng.counter();
  Vector out = inject_noise(z, 0.0, rng);
  CHECK(out.cwiseEqual(z).all());
  CHECK(rng.counter() == before);

  const double sigma = 0.015;
  const Index d = 16;
  Vector base = Vector::Zero(d);
  double acc = 0.0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i)
    acc += (inject_noise(base, sigma, rng) - base).squaredNorm();
  const double expect = static_cast<double>(d) * sigma * sigma;
  CHECK(acc / draws == doctest::Approx(expect).epsilon(0.05));
}

TEST_CASE("build_memory honors sigma=0, determinism, and candidate counts") {
  WorldSpec world = build_world(small_world_config());
  DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
  auto texts = draw_bank_contents(world, 64, 2);

  MemoryBank bank = build_memory(texts, enc, world, 0.0, 32, 77);
  CHECK(bank.size() == 32);
  CHECK(bank.dim() == enc.d);
  CHECK_FALSE(bank.clustered());
  CHECK(bank.assignment ==
        std::vector<std::uint32_t>(32, MemoryBank::kUnassigned));
  CHECK(bank.provenance.sigma == 0.0);
  CHECK(bank.provenance.world_seed == world.cfg.seed);
  CHECK(bank.provenance.encoder_digest == enc.digest());

  // sigma=0 entries are the raw text embeddings of the selected contents.
  RngStream rng(77);
  auto order = shuffled_indices(static_cast<std::int64_t>(texts.size()),
                                rng.fork("select"));
  for (Index i = 0; i < bank.size(); ++i) {
    RngStream er = rng.fork("enc").fork_index(static_cast<std::uint64_t>(i));
    Vector z = encode_text(
        enc, texts[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])],
        er);
    CHECK(bank.entries.row(i).transpose().cwiseEqual(z).all());
  }

  MemoryBank again = build_memory(texts, enc, world, 0.0, 32, 77);
  CHECK(again.digest() == bank.digest());
  MemoryBank other = build_memory(texts, enc, world, 0.0, 32, 78);
  CHECK(other.digest() != bank.digest());

  CHECK_THROWS_AS(build_memory(texts, enc, world, 0.0, 65, 1), ConfigError);
  DualEncoder thawed = enc;
  thawed.frozen = false;
  CHECK_THROWS_AS(build_memory(texts, thawed, world, 0.0, 8, 1), UsageError);
}

TEST_CASE("kmeans recovers the optimal 1-D two-cluster split") {
  Matrix pts(4, 1);
  pts << 0.0, 1.0, 10.0, 11.0;
  KmeansResult res = kmeans_points(pts, 2, 50, 3);

  // Oracle: enumerate every 2-partition of the four points and minimize the
  // within-cluster sum of squares directly.
  double best = 1e300;
  for (int mask = 1; mask < 15; ++mask) {
    double s0 = 0, s1 = 0;
    int n0 = 0, n1 = 0;
    for (int i = 0; i < 4; ++i)
      if (mask & (1 << i)) {
        s0 += pts(i, 0);
        ++n0;
      } else {
        s1 += pts(i, 0);
        ++n1;
      }
    const double m0 = s0 / n0, m1 = s1 / n1;
    double obj = 0;
    for (int i = 0; i < 4; ++i) {
      const double m = (mask & (1 << i)) ? m0 : m1;
      obj += (pts(i, 0) - m) * (pts(i, 0) - m);
    }
    best = std::min(best, obj);
  }
  CHECK(best == 1.0);
  CHECK(res.objective == doctest::Approx(best).epsilon(1e-12));
  std::vector<double> centers = {res.centers(0, 0), res.centers(1, 0)};
  std::sort(centers.begin(), centers.end());
  CHECK(centers[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(centers[1] == doctest::Approx(10.5).epsilon(1e-12));
  CHECK(res.assignment[0] == res.assignment[1]);
  CHECK(res.assignment[2] == res.assignment[3]);
  CHECK(res.assignment[0] != res.assignment[2]);
}

TEST_CASE("kmeans degenerate and error cases") {
  RngStream rng(4);
  Matrix pts(6, 3);
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 3; ++j) pts(i, j) = rng.next_gaussian();

  KmeansResult res = kmeans_points(pts, 6, 10, 1);
  CHECK(res.objective == 0.0);

  CHECK_THROWS_AS(kmeans_points(pts, 7, 10, 1), UsageError);
  CHECK_THROWS_AS(kmeans_points(pts, 0, 10, 1), UsageError);
  CHECK_THROWS_AS(kmeans_points(pts, 2, 0, 1), UsageError);
}

TEST_CASE("kmeans centers equal member means and fits are deterministic") {
  RngStream rng(12);
  Matrix pts(200, 5);
  for (Index i = 0; i < 200; ++i)
    for (Index j = 0; j < 5; ++j) pts(i, j) = rng.next_gaussian();

  KmeansResult a = kmeans_points(pts, 12, 50, 9);
  KmeansResult b = kmeans_points(pts, 12, 50, 9);
  CHECK(a.assignment == b.assignment);
  CHECK(a.centers.cwiseEqual(b.centers).all());

  for (Index c = 0; c < 12; ++c) {
    Vector mean = Vector::Zero(5);
    Index n = 0;
    for (Index i = 0; i < 200; ++i)
      if (a.assignment[static_cast<std::size_t>(i)] ==
          static_cast<std::uint32_t>(c)) {
        mean += pts.row(i).transpose();
        ++n;
      }
    REQUIRE(n > 0);
    mean /= static_cast<double>(n);
    CHECK((a.centers.row(c).transpose() - mean).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("select_cluster matches a brute-force scan and breaks ties low") {
  WorldSpec world = build_world(small_world_config());
  DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
  MemoryBank bank = fitted_bank(world, enc, 200, 16, 0.015, 21);

  RngStream rng(31);
  for (int q = 0; q < 1000; ++q) {
    Vector z(enc.d);
    for (Index j = 0; j < enc.d; ++j) z[j] = rng.next_gaussian();
    Index got = select_cluster(z, bank);
    Index want = 0;
    double want_d = 1e300;
    for (Index c = 0; c < bank.centers.rows(); ++c) {
      const double d = (bank.centers.row(c).transpose() - z).squaredNorm();
      if (d < want_d) {
        want_d = d;
        want = c;
      }
    }
    CHECK(got == want);
  }

  CHECK(select_cluster(bank.centers.row(3).transpose(), bank) == 3);

  MemoryBank tie;
  tie.entries = rows_from({{0.0}, {2.0}});
  tie.centers = rows_from({{0.0}, {2.0}});
  tie.assignment = {0, 1};
  tie.cluster_items = {{0}, {1}};
  Vector mid(1);
  mid << 1.0;
  CHECK(select_cluster(mid, tie) == 0);

  MemoryBank raw;
  raw.entries = rows_from({{0.0}, {2.0}});
  raw.assignment = {MemoryBank::kUnassigned, MemoryBank::kUnassigned};
  raw.centers.resize(0, 1);
  CHECK_THROWS_AS(select_cluster(mid, raw), UsageError);
}

TEST_CASE("retrieve_top_l equals a full-sort oracle") {
  WorldSpec world = build_world(small_world_config());
  DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
  MemoryBank bank = fitted_bank(world, enc, 200, 16, 0.015, 22);

  RngStream rng(41);
  for (int q = 0; q < 200; ++q) {
    Vector z(enc.d);
    for (Index j = 0; j < enc.d; ++j) z[j] = rng.next_gaussian();
    const Index c = select_cluster(z, bank);
    Retrieval got = retrieve_top_l(z, bank, c, 8);

    std::vector<std::pair<double, Index>> oracle;
    for (Index id : bank.cluster_items[static_cast<std::size_t>(c)])
      oracle.emplace_back((bank.entries.row(id).transpose() - z).squaredNorm(),
                          id);
    std::sort(oracle.begin(), oracle.end());
    const std::size_t take = std::min<std::size_t>(oracle.size(), 8);
    REQUIRE(got.ids.size() == take);
    for (std::size_t i = 0; i < take; ++i) {
      CHECK(got.ids[i] == oracle[i].second);
      CHECK(got.scores[static_cast<Index>(i)] ==
            bank.entries.row(oracle[i].second).transpose().dot(z));
    }
  }

  // Underfull cluster: top_l larger than the cluster returns every entry.
  MemoryBank tiny;
  tiny.entries = rows_from({{0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}});
  tiny.centers = rows_from({{0.3, 0.3}});
  tiny.assignment = {0, 0, 0};
  tiny.cluster_items = {{0, 1, 2}};
  Vector z2(2);
  z2 << 0.0, 0.0;
  Retrieval all = retrieve_top_l(z2, tiny, 0, 10);
  CHECK(all.ids == std::vector<Index>{0, 1, 2});
  Retrieval one = retrieve_top_l(z2, tiny, 0, 1);
  CHECK(one.ids == std::vector<Index>{0});
}

TEST_CASE("santa_project identity, micro-case, and weight simplex") {
  MemoryBank bank;
  bank.entries = rows_from({{1.0, 0.0}, {0.0, 1.0}});
  bank.centers = rows_from({{0.5, 0.5}});
  bank.assignment = {0, 0};
  bank.cluster_items = {{0, 1}};

  SantaConfig cfg;
  cfg.memory_size = 2;
  cfg.clusters = 1;
  cfg.top_l = 2;
  cfg.tau = 1.0;
  cfg.lambda = 0.5;

  Vector z(2);
  z << 1.0, 0.0;

  SantaConfig id_cfg = cfg;
  id_cfg.lambda = 0.0;
  RngStream rng(8);
  for (int i = 0; i < 50; ++i) {
    Vector q(2);
    q << rng.next_gaussian(), rng.next_gaussian();
    CHECK(santa_project(q, bank, id_cfg).cwiseEqual(q).all());
  }

  Retrieval ret = retrieve_top_l(z, bank, 0, 2);
  Vector w = softmax_temp(ret.scores, 1.0);
  CHECK(w[0] == doctest::Approx(0.7310586).epsilon(1e-6));
  CHECK(w[1] == doctest::Approx(0.2689414).epsilon(1e-6));

  Vector out = santa_project(z, bank, cfg);
  CHECK(out[0] == doctest::Approx(0.8655293).epsilon(1e-6));
  CHECK(out[1] == doctest::Approx(0.1344707).epsilon(1e-6));

  for (double tau : {0.01, 0.1, 1.0}) {
    Vector ws = softmax_temp(retrieve_top_l(z, bank, 0, 2).scores, tau);
    CHECK(ws.minCoeff() > 0.0);
    CHECK(std::abs(ws.sum() - 1.0) < 1e-12);
  }

  SantaConfig bad = cfg;
  bad.lambda = 1.5;
  CHECK_THROWS_AS(santa_project(z, bank, bad), UsageError);
}

TEST_CASE("santa ablation flags") {
  WorldSpec world = build_world(small_world_config());
  DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
  MemoryBank bank = fitted_bank(world, enc, 128, 8, 0.015, 33);

  SantaConfig cfg;
  cfg.memory_size = 128;
  cfg.clusters = 8;
  cfg.top_l = 16;

  RngStream rng(51);
  Vector z(enc.d);
  for (Index j = 0; j < enc.d; ++j) z[j] = rng.next_gaussian();

  SantaConfig no_mb = cfg;
  no_mb.no_memory_bank = true;
  CHECK(santa_project(z, bank, no_mb).cwiseEqual(z).all());

  SantaConfig no_ae = cfg;
  no_ae.no_audio_embedding = true;
  Vector mem_only = santa_project(z, bank, no_ae);
  Retrieval ret = retrieve_top_l(z, bank, select_cluster(z, bank), cfg.top_l);
  Vector w = softmax_temp(ret.scores, cfg.tau);
  Vector manual = Vector::Zero(enc.d);
  for (std::size_t i = 0; i < ret.ids.size(); ++i)
    manual += w[static_cast<Index>(i)] *
              bank.entries.row(ret.ids[i]).transpose();
  CHECK(mem_only.cwiseEqual(manual).all());

  SantaConfig both = cfg;
  both.no_memory_bank = true;
  both.no_audio_embedding = true;
  CHECK_THROWS_AS(santa_project(z, bank, both), ConfigError);

  CHECK(SantaConfig{}.effective_sigma() == 0.015);
  SantaConfig no_gn;
  no_gn.no_gaussian_noise = true;
  CHECK(no_gn.effective_sigma() == 0.0);
}

TEST_CASE("single-cluster fit equals the no_kmeans path bitwise") {
  WorldSpec world = build_world(small_world_config());
  DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
  auto texts = draw_bank_contents(world, 256, 14);
  MemoryBank flat = build_memory(texts, enc, world, 0.015, 128, 60);
  MemoryBank one = kmeans_fit(flat, 1, 50, 61);

  SantaConfig cfg;
  cfg.memory_size = 128;
  cfg.clusters = 1;
  cfg.top_l = 16;
  SantaConfig global = cfg;
  global.no_kmeans = true;

  RngStream rng(71);
  for (int q = 0; q < 100; ++q) {
    Vector z(enc.d);
    for (Index j = 0; j < enc.d; ++j) z[j] = rng.next_gaussian();
    Vector a = santa_project(z, one, cfg);
    Vector b = santa_project(z, one, global);
    CHECK(a.cwiseEqual(b).all());
    Vector c = santa_project(z, flat, global);  // unclustered bank works too
    CHECK(a.cwiseEqual(c).all());
  }
}

TEST_CASE("low temperature concentrates on the highest-scoring entry") {
  WorldSpec world = build_world(small_world_config());
  DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
  MemoryBank bank = fitted_bank(world, enc, 128, 8, 0.015, 34);

  SantaConfig cfg;
  cfg.memory_size = 128;
  cfg.clusters = 8;
  cfg.top_l = 16;
  cfg.tau = 1e-6;
  cfg.lambda = 0.3;

  RngStream rng(81);
  for (int q = 0; q < 20; ++q) {
    Vector z(enc.d);
    for (Index j = 0; j < enc.d; ++j) z[j] = rng.next_gaussian();
    Retrieval ret = retrieve_top_l(z, bank, select_cluster(z, bank), cfg.top_l);
    Index best = 0;
    for (Index i = 1; i < ret.scores.size(); ++i)
      if (ret.scores[i] > ret.scores[best]) best = i;
    Vector nearest =
        bank.entries.row(ret.ids[static_cast<std::size_t>(best)]).transpose();
    Vector expect = (1.0 - cfg.lambda) * z + cfg.lambda * nearest;
    Vector got = santa_project(z, bank, cfg);
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("santa projection moves audio embeddings toward matched text") {
  WorldSpec world = build_world(small_world_config());
  EncoderConfig ec;
  ec.nu = 0.05;
  DualEncoder enc = build_parametric_encoder(world, ec);
  const double sigma = estimate_sigma_world(world, enc, 30, 17);
  MemoryBank bank = fitted_bank(world, enc, 400, 20, sigma, 44);

  SantaConfig cfg;
  cfg.sigma = sigma;
  cfg.memory_size = 400;
  cfg.clusters = 20;
  cfg.top_l = 16;

  RngStream rng(90);
  double raw = 0.0, projected = 0.0;
  const int pairs = 500;
  for (int i = 0; i < pairs; ++i) {
    RngStream cr = rng.fork("c").fork_index(static_cast<std::uint64_t>(i));
    const int y = static_cast<int>(
        cr.next_below(static_cast<std::uint64_t>(world.cfg.classes)));
    ContentDescriptor c = draw_content(world, y, cr);
    RngStream rt = rng.fork("t").fork_index(static_cast<std::uint64_t>(i));
    RngStream ra = rng.fork("a").fork_index(static_cast<std::uint64_t>(i));
    Vector zt = encode_text(enc, c, rt);
    Vector za = encode_audio(enc, c, ra);
    raw += (za - zt).norm();
    projected += (santa_project(za, bank, cfg) - zt).norm();
  }
  CHECK(projected / pairs <= raw / pairs);
}

TEST_CASE("memory bank file round trip is bit-exact") {
  WorldSpec world = build_world(small_world_config());
  DualEncoder enc = build_parametric_encoder(world, EncoderConfig{});
  MemoryBank bank = fitted_bank(world, enc, 64, 8, 0.015, 55);

  auto path = std::filesystem::temp_directory_path() / "mats_bank_rt.bin";
  save_memory_bank(bank, path.string());
  MemoryBank back = load_memory_bank(path.string());
  CHECK(back.digest() == bank.digest());
  CHECK(back.entries.cwiseEqual(bank.entries).all());
  CHECK(back.centers.cwiseEqual(bank.centers).all());
  CHECK(back.assignment == bank.assignment);
  CHECK(back.cluster_items == bank.cluster_items);
  CHECK(back.provenance.encoder_digest == bank.provenance.encoder_digest);

  // Unclustered banks round trip too.
  auto texts = draw_bank_contents(world, 64, 2);
  MemoryBank flat = build_memory(texts, enc, world, 0.01, 32, 3);
  save_memory_bank(flat, path.string());
  MemoryBank flat_back = load_memory_bank(path.string());
  CHECK(flat_back.digest() == flat.digest());
  CHECK_FALSE(flat_back.clustered());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_memory_bank(path.string()), IoError);
}

TEST_CASE("santa config validation names the offending field") {
  SantaConfig cfg;
  cfg.clusters = 200;
  cfg.memory_size = 100;
  try {
    validate_santa_config(cfg);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("clusters") != std::string::npos);
  }
  SantaConfig bad_tau;
  bad_tau.tau = -1.0;
  CHECK_THROWS_AS(validate_santa_config(bad_tau), ConfigError);
  SantaConfig bad_l;
  bad_l.top_l = 0;
  CHECK_THROWS_AS(validate_santa_config(bad_l), ConfigError);
}
