#include "mats/modality_transfer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mats/digest.hpp"
#include "mats/error.hpp"
#include "mats/io.hpp"
#include "mats/metrics.hpp"

namespace mats {

void validate_santa_config(const SantaConfig& cfg) {
  if (cfg.sigma < 0.0) throw ConfigError("sigma must be >= 0");
  if (cfg.memory_size < 1) throw ConfigError("memory_size must be >= 1");
  if (cfg.clusters < 1) throw ConfigError("clusters must be >= 1");
  if (cfg.clusters > cfg.memory_size)
    throw ConfigError("clusters must not exceed memory_size");
  if (cfg.top_l < 1) throw ConfigError("top_l must be >= 1");
  if (cfg.top_l > cfg.memory_size)
    throw ConfigError("top_l must not exceed memory_size");
  if (!(cfg.tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0))
    throw ConfigError("lambda must lie in [0, 1]");
  if (cfg.kmeans_iters < 1) throw ConfigError("kmeans_iters must be >= 1");
  if (cfg.no_memory_bank && cfg.no_audio_embedding)
    throw ConfigError(
        "no_memory_bank and no_audio_embedding are mutually exclusive");
}

std::string MemoryBank::digest() const {
  Digest d;
  d.matrix(entries);
  d.matrix(centers);
  for (std::uint32_t a : assignment) d.u64(a);
  d.u64(provenance.world_seed);
  d.u64(provenance.build_seed);
  d.f64(provenance.sigma);
  d.str(provenance.encoder_digest);
  return d.hex();
}

namespace {

// Mean stabilized by anchoring at the first value, so a constant series
// reduces to that constant exactly.
double anchored_mean(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x - v.front();
  return v.front() + acc / static_cast<double>(v.size());
}

std::vector<std::vector<Index>> items_by_cluster(
    const std::vector<std::uint32_t>& assignment, Index k) {
  std::vector<std::vector<Index>> items(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < assignment.size(); ++i)
    items[assignment[i]].push_back(static_cast<Index>(i));
  return items;
}

}  // namespace

double estimate_sigma(const Matrix& z_text, const Matrix& z_audio) {
  if (z_text.rows() == 0) throw UsageError("estimate_sigma: no pairs");
  if (z_text.rows() != z_audio.rows() || z_text.cols() != z_audio.cols())
    throw UsageError("estimate_sigma: paired shapes differ");
  std::vector<double> norms;
  norms.reserve(static_cast<std::size_t>(z_text.rows()));
  for (Index i = 0; i < z_text.rows(); ++i)
    norms.push_back(
        pairwise_metric(Metric::inf, z_audio.row(i), z_text.row(i)));
  return anchored_mean(norms);
}

double estimate_sigma_world(const WorldSpec& world, const DualEncoder& enc,
                            int n, std::uint64_t seed) {
  if (n < 1) throw UsageError("estimate_sigma_world: n must be >= 1");
  RngStream rng(seed);
  Matrix zt(n, enc.d), za(n, enc.d);
  for (int i = 0; i < n; ++i) {
    RngStream cr = rng.fork("content").fork_index(static_cast<std::uint64_t>(i));
    const int y = static_cast<int>(
        cr.next_below(static_cast<std::uint64_t>(world.cfg.classes)));
    ContentDescriptor c = draw_content(world, y, cr);
    RngStream rt = rng.fork("t").fork_index(static_cast<std::uint64_t>(i));
    RngStream ra = rng.fork("a").fork_index(static_cast<std::uint64_t>(i));
    zt.row(i) = encode_text(enc, c, rt).transpose();
    za.row(i) = encode_audio(enc, c, ra).transpose();
  }
  return estimate_sigma(zt, za);
}

Vector inject_noise(const Vector& z, double sigma, RngStream& rng) {
  if (sigma == 0.0) return z;
  return z + sample_gaussian(rng, z.size(), sigma);
}

MemoryBank build_memory(const std::vector<ContentDescriptor>& texts,
                        const DualEncoder& encoder, const WorldSpec& world,
                        double sigma, Index memory_size, std::uint64_t seed) {
  if (!encoder.frozen)
    throw UsageError("build_memory: encoder must be frozen");
  if (memory_size < 1) throw ConfigError("memory_size must be >= 1");
  if (static_cast<Index>(texts.size()) < memory_size)
    throw ConfigError("memory_size exceeds the " +
                      std::to_string(texts.size()) +
                      " candidate texts available");
  if (sigma < 0.0) throw ConfigError("sigma must be >= 0");

  RngStream rng(seed);
  auto order = shuffled_indices(static_cast<std::int64_t>(texts.size()),
                                rng.fork("select"));
  MemoryBank bank;
  bank.entries.resize(memory_size, encoder.d);
  for (Index i = 0; i < memory_size; ++i) {
    const auto& content = texts[static_cast<std::size_t>(
        order[static_cast<std::size_t>(i)])];
    RngStream er = rng.fork("enc").fork_index(static_cast<std::uint64_t>(i));
    RngStream nr = rng.fork("eps").fork_index(static_cast<std::uint64_t>(i));
    bank.entries.row(i) =
        inject_noise(encode_text(encoder, content, er), sigma, nr).transpose();
  }
  bank.assignment.assign(static_cast<std::size_t>(memory_size),
                         MemoryBank::kUnassigned);
  bank.centers.resize(0, encoder.d);
  bank.provenance.world_seed = world.cfg.seed;
  bank.provenance.build_seed = seed;
  bank.provenance.sigma = sigma;
  bank.provenance.encoder_digest = encoder.digest();
  return bank;
}

namespace {

Index nearest_row(const Matrix& rows, const Vector& z) {
  Index best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index k = 0; k < rows.rows(); ++k) {
    const double d = (rows.row(k).transpose() - z).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

Matrix kmeans_pp_seed(const Matrix& points, Index k, RngStream& rng) {
  const Index n = points.rows();
  Matrix centers(k, points.cols());
  std::vector<double> dist2(static_cast<std::size_t>(n),
                            std::numeric_limits<double>::infinity());
  Index first = static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(n)));
  centers.row(0) = points.row(first);
  for (Index c = 1; c < k; ++c) {
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double d =
          (points.row(i) - centers.row(c - 1)).squaredNorm();
      if (d < dist2[static_cast<std::size_t>(i)])
        dist2[static_cast<std::size_t>(i)] = d;
      total += dist2[static_cast<std::size_t>(i)];
    }
    Index pick;
    if (total == 0.0) {
      pick = static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(n)));
    } else {
      double target = rng.next_uniform() * total;
      pick = n - 1;
      double acc = 0.0;
      for (Index i = 0; i < n; ++i) {
        acc += dist2[static_cast<std::size_t>(i)];
        if (acc > target) {
          pick = i;
          break;
        }
      }
    }
    centers.row(c) = points.row(pick);
  }
  return centers;
}

}  // namespace

KmeansResult kmeans_points(const Matrix& points, Index k, int iters,
                           std::uint64_t seed) {
  const Index n = points.rows();
  if (k < 1) throw UsageError("kmeans: k must be >= 1");
  if (k > n) throw UsageError("kmeans: k exceeds the number of points");
  if (iters < 1) throw UsageError("kmeans: iters must be >= 1");

  RngStream rng(seed);
  KmeansResult res;
  res.centers = kmeans_pp_seed(points, k, rng);
  res.assignment.assign(static_cast<std::size_t>(n), MemoryBank::kUnassigned);
  std::vector<std::uint32_t> prev;
  double prev_obj = std::numeric_limits<double>::infinity();

  for (int it = 0; it < iters; ++it) {
    // Assignment: nearest center, ties toward the lowest cluster index.
    std::vector<double> point_dist(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (Index c = 0; c < k; ++c) {
        const double d = (points.row(i) - res.centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      res.assignment[static_cast<std::size_t>(i)] =
          static_cast<std::uint32_t>(best);
      point_dist[static_cast<std::size_t>(i)] = best_d;
    }

    // Repair: promote the point farthest from its center into each empty
    // cluster (lowest point index on ties), then give it distance zero.
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (std::uint32_t a : res.assignment) ++counts[a];
    for (Index c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      Index far = -1;
      double far_d = -1.0;
      for (Index i = 0; i < n; ++i) {
        const auto a = res.assignment[static_cast<std::size_t>(i)];
        if (counts[a] <= 1) continue;  // do not empty another cluster
        if (point_dist[static_cast<std::size_t>(i)] > far_d) {
          far_d = point_dist[static_cast<std::size_t>(i)];
          far = i;
        }
      }
      if (far < 0)
        throw NumericError("kmeans: cannot repair empty cluster");
      --counts[res.assignment[static_cast<std::size_t>(far)]];
      res.assignment[static_cast<std::size_t>(far)] =
          static_cast<std::uint32_t>(c);
      ++counts[static_cast<std::size_t>(c)];
      res.centers.row(c) = points.row(far);
      point_dist[static_cast<std::size_t>(far)] = 0.0;
    }

    double obj = 0.0;
    for (Index i = 0; i < n; ++i)
      obj += point_dist[static_cast<std::size_t>(i)];
    if (obj > prev_obj * (1.0 + 1e-12) + 1e-12)
      throw NumericError("kmeans: objective increased across iterations");
    prev_obj = obj;
    res.objective = obj;
    res.iterations = it + 1;

    // Update: centers become the means of their members.
    Matrix sums = Matrix::Zero(k, points.cols());
    for (Index i = 0; i < n; ++i)
      sums.row(res.assignment[static_cast<std::size_t>(i)]) += points.row(i);
    for (Index c = 0; c < k; ++c)
      res.centers.row(c) =
          sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);

    if (res.assignment == prev) break;
    prev = res.assignment;
  }
  return res;
}

MemoryBank kmeans_fit(MemoryBank bank, Index k, int iters,
                      std::uint64_t seed) {
  KmeansResult res = kmeans_points(bank.entries, k, iters, seed);
  bank.centers = std::move(res.centers);
  bank.assignment = std::move(res.assignment);
  bank.cluster_items = items_by_cluster(bank.assignment, k);
  for (const auto& items : bank.cluster_items)
    if (items.empty())
      throw NumericError("kmeans_fit: empty cluster survived repair");
  return bank;
}

Index select_cluster(const Vector& z, const MemoryBank& bank) {
  if (!bank.clustered())
    throw UsageError("select_cluster: bank is not clustered");
  if (z.size() != bank.dim())
    throw UsageError("select_cluster: query dimension mismatch");
  return nearest_row(bank.centers, z);
}

Retrieval retrieve_top_l(const Vector& z, const MemoryBank& bank,
                         Index cluster, Index top_l) {
  if (top_l < 1) throw UsageError("retrieve_top_l: top_l must be >= 1");
  if (z.size() != bank.dim())
    throw UsageError("retrieve_top_l: query dimension mismatch");

  std::vector<Index> candidates;
  if (cluster < 0) {
    candidates.resize(static_cast<std::size_t>(bank.size()));
    for (Index i = 0; i < bank.size(); ++i)
      candidates[static_cast<std::size_t>(i)] = i;
  } else {
    if (!bank.clustered())
      throw UsageError("retrieve_top_l: bank is not clustered");
    if (cluster >= bank.centers.rows())
      throw UsageError("retrieve_top_l: cluster index out of range");
    candidates = bank.cluster_items[static_cast<std::size_t>(cluster)];
  }

  std::vector<std::pair<double, Index>> order;
  order.reserve(candidates.size());
  for (Index id : candidates)
    order.emplace_back((bank.entries.row(id).transpose() - z).squaredNorm(),
                       id);
  std::sort(order.begin(), order.end());

  Retrieval ret;
  const std::size_t take =
      std::min(order.size(), static_cast<std::size_t>(top_l));
  ret.ids.reserve(take);
  ret.scores.resize(static_cast<Index>(take));
  for (std::size_t i = 0; i < take; ++i) {
    ret.ids.push_back(order[i].second);
    ret.scores[static_cast<Index>(i)] =
        bank.entries.row(order[i].second).transpose().dot(z);
  }
  return ret;
}

Vector santa_project(const Vector& z, const MemoryBank& bank,
                     const SantaConfig& cfg) {
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0))
    throw UsageError("santa_project: lambda must lie in [0, 1]");
  validate_santa_config(cfg);
  double lambda = cfg.lambda;
  if (cfg.no_memory_bank) lambda = 0.0;
  if (cfg.no_audio_embedding) lambda = 1.0;
  if (lambda == 0.0) return z;

  const Index cluster = cfg.no_kmeans ? -1 : select_cluster(z, bank);
  Retrieval ret = retrieve_top_l(z, bank, cluster, cfg.top_l);
  Vector w = softmax_temp(ret.scores, cfg.tau);
  Vector mem = Vector::Zero(z.size());
  for (std::size_t i = 0; i < ret.ids.size(); ++i)
    mem += w[static_cast<Index>(i)] * bank.entries.row(ret.ids[i]).transpose();
  if (lambda == 1.0) return mem;
  return (1.0 - lambda) * z + lambda * mem;
}

void save_memory_bank(const MemoryBank& bank, const std::string& path) {
  BinWriter w;
  w.magic("MATSMB01");
  w.u32(static_cast<std::uint32_t>(bank.dim()));
  w.u32(static_cast<std::uint32_t>(bank.size()));
  w.u32(static_cast<std::uint32_t>(bank.centers.rows()));
  for (Index i = 0; i < bank.entries.rows(); ++i)
    for (Index j = 0; j < bank.entries.cols(); ++j) w.f64(bank.entries(i, j));
  for (Index i = 0; i < bank.centers.rows(); ++i)
    for (Index j = 0; j < bank.centers.cols(); ++j) w.f64(bank.centers(i, j));
  for (std::uint32_t a : bank.assignment) w.u32(a);
  Json prov;
  prov["world_seed"] = bank.provenance.world_seed;
  prov["build_seed"] = bank.provenance.build_seed;
  prov["sigma"] = bank.provenance.sigma;
  prov["encoder_digest"] = bank.provenance.encoder_digest;
  w.str(prov.dump());
  write_file_bytes(path, w.bytes());
}

MemoryBank load_memory_bank(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  BinReader r(bytes);
  r.magic("MATSMB01");
  const Index d = static_cast<Index>(r.u32());
  const Index m = static_cast<Index>(r.u32());
  const Index k = static_cast<Index>(r.u32());
  MemoryBank bank;
  bank.entries.resize(m, d);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < d; ++j) bank.entries(i, j) = r.f64();
  bank.centers.resize(k, d);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < d; ++j) bank.centers(i, j) = r.f64();
  bank.assignment.resize(static_cast<std::size_t>(m));
  for (std::size_t i = 0; i < bank.assignment.size(); ++i)
    bank.assignment[i] = r.u32();
  Json prov = Json::parse(r.str());
  bank.provenance.world_seed = prov.at("world_seed").get<std::uint64_t>();
  bank.provenance.build_seed = prov.at("build_seed").get<std::uint64_t>();
  bank.provenance.sigma = prov.at("sigma").get<double>();
  bank.provenance.encoder_digest =
      prov.at("encoder_digest").get<std::string>();
  if (!r.at_end()) throw IoError("memory bank file " + path + " has trailing bytes");
  if (k > 0) bank.cluster_items = items_by_cluster(bank.assignment, k);
  return bank;
}

}  // namespace mats
