#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mats/rng.hpp"
#include "mats/synth_world.hpp"
#include "mats/types.hpp"

namespace mats {

// Frozen dual encoder standing in for a pretrained audio/text embedding
// model. Both towers are affine maps over the world latent plus isotropic
// view noise: z = U c + b + nu * eta. The modality gap is an offset on the
// audio side only, so the text view of a world does not move when the gap
// parameter changes.

struct EncoderConfig {
  std::uint64_t seed = 1;
  double nu = 0.05;
  bool normalize = false;
};

struct DualEncoder {
  Index d_lat = 0;
  Index d = 0;
  Matrix U_t, U_a;  // d x d_lat, orthonormal columns in parametric mode
  Vector b_t, b_a;  // d
  double nu = 0.0;
  bool normalize = false;
  double gap = 0.0;  // provenance: the world gap it was built for
  bool frozen = false;
  std::string mode;  // "parametric" | "contrastive"

  std::string digest() const;
};

// Deterministic construction: shared orthonormal U for both towers, zero text
// offset, audio offset of norm world.cfg.gap along a seed-derived direction.
DualEncoder build_parametric_encoder(const WorldSpec& world,
                                     const EncoderConfig& cfg);

Vector encode_text(const DualEncoder& enc, const ContentDescriptor& content,
                   RngStream& rng);
Vector encode_audio(const DualEncoder& enc, const ContentDescriptor& content,
                    RngStream& rng);

struct ContrastiveConfig {
  int pairs = 2048;
  int epochs = 12;
  int batch = 64;
  double lr = 0.01;
  double temperature = 0.07;
  std::uint64_t seed = 1;
};

// Symmetric InfoNCE over in-batch negatives with cosine similarities.
// Returns a frozen encoder; raises TrainError if the paired-similarity
// margin post-condition fails on held-out pairs.
DualEncoder pretrain_contrastive(const WorldSpec& world,
                                 const EncoderConfig& enc_cfg,
                                 const ContrastiveConfig& cfg);

struct GapStats {
  double mean_l2 = 0.0;
  double mean_inf = 0.0;
  double centroid_dist = 0.0;
  std::vector<int> class_ids;
  std::vector<double> per_class_centroid;
};

// Encodes each content on both sides with per-index rng forks and reports
// paired distances and centroid separation.
GapStats measure_gap(const DualEncoder& enc,
                     const std::vector<ContentDescriptor>& contents,
                     std::uint64_t seed);

void save_encoder(const DualEncoder& enc, const std::string& path);
DualEncoder load_encoder(const std::string& path);

}  // namespace mats
