#include "mats/clap_surrogate.hpp"

#include <cmath>
#include <map>
#include <utility>

#include "mats/digest.hpp"
#include "mats/error.hpp"
#include "mats/grad_tape.hpp"
#include "mats/io.hpp"
#include "mats/metrics.hpp"
#include "mats/optim.hpp"
#include "mats/param_store.hpp"

namespace mats {

std::string DualEncoder::digest() const {
  Digest d_;
  d_.str(mode);
  d_.u64(static_cast<std::uint64_t>(d_lat));
  d_.u64(static_cast<std::uint64_t>(d));
  d_.f64(nu);
  d_.u64(normalize ? 1 : 0);
  d_.f64(gap);
  d_.matrix(U_t);
  d_.matrix(U_a);
  d_.matrix(b_t);
  d_.matrix(b_a);
  return d_.hex();
}

namespace {

Matrix gaussian_matrix(RngStream& rng, Index r, Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = scale * rng.next_gaussian();
  return m;
}

// Orthonormal columns via Householder QR of a Gaussian draw.
Matrix orthonormal_columns(RngStream& rng, Index rows, Index cols) {
  Matrix g = gaussian_matrix(rng, rows, cols);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(rows, cols);
  // Fix signs so the factorization is unique given the draw.
  Matrix r = q.transpose() * g;
  for (Index c = 0; c < cols; ++c)
    if (r(c, c) < 0.0) q.col(c) = -q.col(c);
  return q;
}

Vector finalize(const DualEncoder& enc, Vector z) {
  if (enc.normalize) {
    const double n = z.norm();
    if (n == 0.0) throw NumericError("encode: zero embedding cannot be normalized");
    z /= n;
  }
  return z;
}

Vector encode_with(const DualEncoder& enc, const Matrix& U, const Vector& b,
                   const ContentDescriptor& content, RngStream& rng) {
  if (!enc.frozen)
    throw UsageError("encode: encoder must be frozen before use");
  if (content.latent.size() != enc.d_lat)
    throw UsageError("encode: latent dimension mismatch");
  Vector z = U * content.latent + b;
  if (enc.nu > 0.0) z += sample_gaussian(rng, enc.d, enc.nu);
  return finalize(enc, std::move(z));
}

}  // namespace

DualEncoder build_parametric_encoder(const WorldSpec& world,
                                     const EncoderConfig& cfg) {
  const Index d_lat = world.cfg.latent_dim;
  const Index d = world.cfg.embed_dim;
  if (d < d_lat)
    throw ConfigError(
        "parametric encoder needs embed_dim >= latent_dim for an "
        "orthonormal tower");
  if (cfg.nu < 0.0) throw ConfigError("encoder nu must be >= 0");

  RngStream rng(cfg.seed);
  DualEncoder enc;
  enc.d_lat = d_lat;
  enc.d = d;
  enc.nu = cfg.nu;
  enc.normalize = cfg.normalize;
  enc.gap = world.cfg.gap;
  enc.mode = "parametric";
  RngStream u_rng = rng.fork("U");
  enc.U_t = orthonormal_columns(u_rng, d, d_lat);
  enc.U_a = enc.U_t;
  enc.b_t = Vector::Zero(d);
  RngStream g_rng = rng.fork("gap_dir");
  Vector dir = gaussian_matrix(g_rng, d, 1);
  const double n = dir.norm();
  if (n == 0.0) throw NumericError("gap direction draw degenerate");
  enc.b_a = -world.cfg.gap * dir / n;
  enc.frozen = true;
  return enc;
}

Vector encode_text(const DualEncoder& enc, const ContentDescriptor& content,
                   RngStream& rng) {
  return encode_with(enc, enc.U_t, enc.b_t, content, rng);
}

Vector encode_audio(const DualEncoder& enc, const ContentDescriptor& content,
                    RngStream& rng) {
  return encode_with(enc, enc.U_a, enc.b_a, content, rng);
}

DualEncoder pretrain_contrastive(const WorldSpec& world,
                                 const EncoderConfig& enc_cfg,
                                 const ContrastiveConfig& cfg) {
  if (cfg.pairs < 2 * cfg.batch)
    throw ConfigError("contrastive pairs must cover at least two batches");
  if (cfg.batch < 2) throw ConfigError("contrastive batch must be >= 2");
  if (!(cfg.temperature > 0.0))
    throw ConfigError("contrastive temperature must be positive");

  const Index d_lat = world.cfg.latent_dim;
  const Index d = world.cfg.embed_dim;
  RngStream rng(cfg.seed);

  // Paired views: shared content, independent view noise per side, and the
  // world's audio offset applied to the audio-side input so the emergent
  // geometry reflects the modality gap.
  RngStream data_rng = rng.fork("pairs");
  std::vector<Vector> latents;
  latents.reserve(static_cast<std::size_t>(cfg.pairs));
  for (int i = 0; i < cfg.pairs; ++i) {
    RngStream cr = data_rng.fork_index(static_cast<std::uint64_t>(i));
    const int y = static_cast<int>(
        cr.next_below(static_cast<std::uint64_t>(world.cfg.classes)));
    latents.push_back(draw_content(world, y, cr).latent);
  }

  ParamStore ps;
  RngStream init = rng.fork("init");
  ps.add("t.W", gaussian_matrix(init, d_lat, d, 1.0 / std::sqrt(double(d_lat))));
  ps.add("t.b", Matrix::Zero(1, d));
  ps.add("a.W", gaussian_matrix(init, d_lat, d, 1.0 / std::sqrt(double(d_lat))));
  ps.add("a.b", Matrix::Zero(1, d));

  RngStream g_rng = rng.fork("gap_dir");
  Vector dir = gaussian_matrix(g_rng, d_lat, 1);
  dir /= dir.norm();
  const Vector audio_shift = -world.cfg.gap * dir;

  AdamWConfig adam;
  OptState opt;
  opt.init(ps);
  RngStream noise_rng = rng.fork("noise");

  const int steps_per_epoch = cfg.pairs / cfg.batch;
  for (int e = 0; e < cfg.epochs; ++e) {
    auto order = shuffled_indices(cfg.pairs, rng.fork("shuffle").fork_index(
                                                 static_cast<std::uint64_t>(e)));
    for (int s = 0; s < steps_per_epoch; ++s) {
      const int B = cfg.batch;
      Matrix Ct(B, d_lat), Ca(B, d_lat);
      for (int i = 0; i < B; ++i) {
        const auto idx = static_cast<std::size_t>(
            order[static_cast<std::size_t>(s * B + i)]);
        RngStream nr = noise_rng.fork_index(
            static_cast<std::uint64_t>(e) * 1000003ULL +
            static_cast<std::uint64_t>(s * B + i));
        Vector nt = sample_gaussian(nr, d_lat, enc_cfg.nu);
        Vector na = sample_gaussian(nr, d_lat, enc_cfg.nu);
        Ct.row(i) = (latents[idx] + nt).transpose();
        Ca.row(i) = (latents[idx] + audio_shift + na).transpose();
      }
      GradTape t;
      auto zt = t.add_rowvec(t.matmul(t.constant(Ct), t.param(ps, "t.W")),
                             t.param(ps, "t.b"));
      auto za = t.add_rowvec(t.matmul(t.constant(Ca), t.param(ps, "a.W")),
                             t.param(ps, "a.b"));
      zt = t.l2_normalize_rows(zt);
      za = t.l2_normalize_rows(za);
      auto logits = t.scale(t.matmul(zt, t.transpose(za)),
                            1.0 / cfg.temperature);
      std::vector<Index> rows(static_cast<std::size_t>(B));
      std::vector<TokenId> diag(static_cast<std::size_t>(B));
      for (int i = 0; i < B; ++i) {
        rows[static_cast<std::size_t>(i)] = i;
        diag[static_cast<std::size_t>(i)] = i;
      }
      auto l1 = t.cross_entropy_rows(logits, rows, diag);
      auto l2 = t.cross_entropy_rows(t.transpose(logits), rows, diag);
      auto loss = t.scale(t.add(l1, l2), 0.5);
      ps.zero_grads();
      t.backward(loss);
      if (!std::isfinite(t.scalar(loss)))
        throw TrainError("contrastive pretraining diverged");
      adamw_step(ps, opt, cfg.lr, adam);
    }
  }

  DualEncoder enc;
  enc.d_lat = d_lat;
  enc.d = d;
  enc.nu = enc_cfg.nu;
  enc.normalize = enc_cfg.normalize;
  enc.gap = world.cfg.gap;
  enc.mode = "contrastive";
  enc.U_t = ps.at("t.W").value.transpose();
  enc.b_t = ps.at("t.b").value.row(0).transpose();
  // The audio tower absorbs the audio-side input shift as an output offset:
  // z_a = W_a (c + shift) + b_a.
  enc.U_a = ps.at("a.W").value.transpose();
  enc.b_a = enc.U_a * audio_shift + ps.at("a.b").value.row(0).transpose();
  enc.frozen = true;

  // Post-condition: paired similarity beats unpaired by >= 3 standard errors
  // on held-out pairs.
  RngStream held = rng.fork("heldout");
  const int P = 128;
  std::vector<Vector> zt_h, za_h;
  for (int i = 0; i < P; ++i) {
    RngStream cr = held.fork_index(static_cast<std::uint64_t>(i));
    const int y = static_cast<int>(
        cr.next_below(static_cast<std::uint64_t>(world.cfg.classes)));
    ContentDescriptor c = draw_content(world, y, cr);
    zt_h.push_back(encode_text(enc, c, cr));
    za_h.push_back(encode_audio(enc, c, cr));
  }
  auto cosine = [](const Vector& x, const Vector& y) {
    return x.dot(y) / (x.norm() * y.norm());
  };
  double paired_sum = 0, paired_sq = 0;
  double un_sum = 0, un_sq = 0;
  std::int64_t un_n = 0;
  for (int i = 0; i < P; ++i) {
    const double sp = cosine(zt_h[static_cast<std::size_t>(i)],
                             za_h[static_cast<std::size_t>(i)]);
    paired_sum += sp;
    paired_sq += sp * sp;
    for (int j = 0; j < P; ++j) {
      if (i == j) continue;
      const double su = cosine(zt_h[static_cast<std::size_t>(i)],
                               za_h[static_cast<std::size_t>(j)]);
      un_sum += su;
      un_sq += su * su;
      ++un_n;
    }
  }
  const double mp = paired_sum / P;
  const double vp = paired_sq / P - mp * mp;
  const double mu = un_sum / static_cast<double>(un_n);
  const double vu = un_sq / static_cast<double>(un_n) - mu * mu;
  const double se = std::sqrt(vp / P + vu / static_cast<double>(un_n));
  if (!(mp - mu >= 3.0 * se))
    throw TrainError(
        "contrastive post-condition failed: paired similarity does not "
        "exceed unpaired by 3 standard errors");
  return enc;
}

GapStats measure_gap(const DualEncoder& enc,
                     const std::vector<ContentDescriptor>& contents,
                     std::uint64_t seed) {
  if (contents.empty()) throw UsageError("measure_gap: no contents");
  RngStream base(seed);
  GapStats st;
  Vector cen_t = Vector::Zero(enc.d), cen_a = Vector::Zero(enc.d);
  std::map<int, std::pair<Vector, Vector>> per_class_sums;
  std::map<int, int> per_class_n;
  for (std::size_t i = 0; i < contents.size(); ++i) {
    RngStream rt = base.fork("t").fork_index(i);
    RngStream ra = base.fork("a").fork_index(i);
    Vector zt = encode_text(enc, contents[i], rt);
    Vector za = encode_audio(enc, contents[i], ra);
    st.mean_l2 += (zt - za).norm();
    st.mean_inf += pairwise_metric(Metric::inf, zt, za);
    cen_t += zt;
    cen_a += za;
    const int cid = contents[i].class_id;
    auto it = per_class_sums.find(cid);
    if (it == per_class_sums.end())
      it = per_class_sums
               .emplace(cid, std::pair<Vector, Vector>(Vector::Zero(enc.d),
                                                       Vector::Zero(enc.d)))
               .first;
    it->second.first += zt;
    it->second.second += za;
    ++per_class_n[cid];
  }
  const double n = static_cast<double>(contents.size());
  st.mean_l2 /= n;
  st.mean_inf /= n;
  st.centroid_dist = (cen_t / n - cen_a / n).norm();
  for (const auto& [cid, sums] : per_class_sums) {
    const double cn = static_cast<double>(per_class_n[cid]);
    st.class_ids.push_back(cid);
    st.per_class_centroid.push_back(
        (sums.first / cn - sums.second / cn).norm());
  }
  if (st.centroid_dist > st.mean_l2 + 1e-9)
    throw NumericError(
        "measure_gap: centroid distance exceeds mean paired distance");
  return st;
}

void save_encoder(const DualEncoder& enc, const std::string& path) {
  Json j;
  j["magic"] = "MATSEN01";
  j["version"] = 1;
  j["mode"] = enc.mode;
  j["d_lat"] = enc.d_lat;
  j["d"] = enc.d;
  j["nu"] = enc.nu;
  j["normalize"] = enc.normalize;
  j["gap"] = enc.gap;
  j["U_t"] = matrix_to_json(enc.U_t);
  j["U_a"] = matrix_to_json(enc.U_a);
  j["b_t"] = to_double_vec(enc.b_t);
  j["b_a"] = to_double_vec(enc.b_a);
  save_json_file(path, j);
}

DualEncoder load_encoder(const std::string& path) {
  Json j = load_json_file(path);
  require_json_magic(j, "MATSEN01", path);
  DualEncoder enc;
  enc.mode = j.at("mode").get<std::string>();
  enc.d_lat = j.at("d_lat").get<Index>();
  enc.d = j.at("d").get<Index>();
  enc.nu = j.at("nu").get<double>();
  enc.normalize = j.at("normalize").get<bool>();
  enc.gap = j.at("gap").get<double>();
  enc.U_t = matrix_from_json(j.at("U_t"));
  enc.U_a = matrix_from_json(j.at("U_a"));
  enc.b_t = from_double_vec(j.at("b_t").get<std::vector<double>>());
  enc.b_a = from_double_vec(j.at("b_a").get<std::vector<double>>());
  if (enc.U_t.rows() != enc.d || enc.U_t.cols() != enc.d_lat ||
      enc.U_a.rows() != enc.d || enc.U_a.cols() != enc.d_lat ||
      enc.b_t.size() != enc.d || enc.b_a.size() != enc.d)
    throw IoError("encoder file " + path + " has inconsistent shapes");
  enc.frozen = true;
  return enc;
}

}  // namespace mats
