#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mats/clap_surrogate.hpp"
#include "mats/rng.hpp"
#include "mats/synth_world.hpp"
#include "mats/types.hpp"

namespace mats {

// Cross-modal transfer machinery: noise-level estimation, training-time noise
// injection, and inference-time projection of audio embeddings onto a bank of
// noise-augmented text embeddings. The projection mixes the query with a
// softmax-weighted sum of retrieved bank entries:
//
//   f(z) = (1 - lambda) z + lambda * sum_i w_i m_i
//
// where the m_i are the top-L entries of the cluster nearest to z (squared
// L2), and w_i is a temperature softmax over dot(z, m_i). Cluster selection
// and retrieval use squared L2 while the weights use raw dot products; the
// mismatch is deliberate and kept as designed.

struct SantaConfig {
  double sigma = 0.015;
  Index memory_size = 2000;
  Index clusters = 100;
  Index top_l = 32;
  double tau = 0.1;
  double lambda = 0.3;
  int kmeans_iters = 50;
  bool no_kmeans = false;            // retrieve over the whole bank
  bool no_memory_bank = false;       // lambda treated as 0
  bool no_audio_embedding = false;   // lambda treated as 1
  bool no_gaussian_noise = false;    // sigma forced to 0 everywhere
  double effective_sigma() const { return no_gaussian_noise ? 0.0 : sigma; }
};

// Throws ConfigError naming the offending field.
void validate_santa_config(const SantaConfig& cfg);

struct BankProvenance {
  std::uint64_t world_seed = 0;
  std::uint64_t build_seed = 0;
  double sigma = 0.0;
  std::string encoder_digest;
};

struct MemoryBank {
  Matrix entries;                          // M x d
  Matrix centers;                          // K x d; 0 x d before clustering
  std::vector<std::uint32_t> assignment;   // entry -> cluster; kUnassigned
                                           // before clustering
  std::vector<std::vector<Index>> cluster_items;  // ascending entry ids
  BankProvenance provenance;

  static constexpr std::uint32_t kUnassigned = 0xFFFFFFFFu;

  Index size() const { return entries.rows(); }
  Index dim() const { return entries.cols(); }
  bool clustered() const { return centers.rows() > 0; }
  std::string digest() const;
};

// Mean over paired rows of the infinity norm of (audio - text). The paired
// matrices hold one embedding per row.
double estimate_sigma(const Matrix& z_text, const Matrix& z_audio);

// Draws n contents from the world, encodes both sides, and reduces with
// estimate_sigma. Deterministic in seed.
double estimate_sigma_world(const WorldSpec& world, const DualEncoder& enc,
                            int n, std::uint64_t seed);

// z + gaussian(sigma); sigma == 0 returns z unchanged without consuming rng.
Vector inject_noise(const Vector& z, double sigma, RngStream& rng);

// Randomly selects M of the given text contents, encodes each once, and adds
// one persistent noise draw per entry. The bank is unclustered on return.
MemoryBank build_memory(const std::vector<ContentDescriptor>& texts,
                        const DualEncoder& encoder, const WorldSpec& world,
                        double sigma, Index memory_size, std::uint64_t seed);

struct KmeansResult {
  Matrix centers;                         // K x d
  std::vector<std::uint32_t> assignment;  // point -> cluster
  double objective = 0.0;                 // sum of squared distances
  int iterations = 0;                     // assignment passes run
};

// Lloyd's algorithm with k-means++ seeding. Ties in assignment and seeding
// break toward the lowest index; empty clusters are repaired by promoting the
// point farthest from its current center. The objective is checked to be
// non-increasing across iterations and the final centers equal the means of
// their assigned points.
KmeansResult kmeans_points(const Matrix& points, Index k, int iters,
                           std::uint64_t seed);

MemoryBank kmeans_fit(MemoryBank bank, Index k, int iters, std::uint64_t seed);

// Argmin over cluster centers of squared L2 distance; ties -> lowest index.
Index select_cluster(const Vector& z, const MemoryBank& bank);

struct Retrieval {
  std::vector<Index> ids;  // entry ids, ascending distance to the query
  Vector scores;           // dot(z, entry) aligned with ids
};

// The top_l entries of the given cluster closest to z in squared L2,
// ascending; clusters holding fewer than top_l entries return all of them.
// Pass cluster = -1 to retrieve over the whole bank.
Retrieval retrieve_top_l(const Vector& z, const MemoryBank& bank,
                         Index cluster, Index top_l);

Vector santa_project(const Vector& z, const MemoryBank& bank,
                     const SantaConfig& cfg);

// Binary round trip; bit-exact.
void save_memory_bank(const MemoryBank& bank, const std::string& path);
MemoryBank load_memory_bank(const std::string& path);

}  // namespace mats
