// SPDX-License-Identifier: Apache-2.0

#include "tfs/training.hpp"

#include "tfs/metrics.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace tfs {

namespace {

// Lower bound on the density sharpness. A collapsed beta turns the Laplace
// density into a step function whose gradient band is narrower than a sample
// spacing, freezing the geometry; keep it wide enough to carry signal.
constexpr double kBetaMin = 3e-3;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + salt * 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

SkeletonFrame rest_frame(SkeletonFrame s) {
  s.posed_joints = s.canonical_joints;
  for (auto& b : s.bone_transforms) b = RigidTransform::identity();
  return s;
}

// Broyden-backend canonicalization: iterative root finding against the
// current skinning network, initialized from every bone's rigid inverse (the
// correspondence search of the root-finding baselines this backend stands in
// for). The converged root with the smallest residual wins; the canonical
// points are constants for the backward pass.
DeformerForward canonicalize_broyden(const MatX& x_v, const SkeletonFrame& skel,
                                     const SkinningNet& snet) {
  DeformerForward fwd;
  fwd.x_v = x_v;
  const auto n = x_v.cols();
  fwd.x_c.resize(3, n);
  fwd.degenerate.assign(static_cast<size_t>(n), 0);
  WeightField field = [&snet](const Vec3& p) { return snet.predict(p); };
  std::vector<RigidTransform> inv(static_cast<size_t>(skel.n_b));
  for (int b = 0; b < skel.n_b; ++b)
    inv[static_cast<size_t>(b)] = skel.bone_transforms[static_cast<size_t>(b)].inverse();
  for (Eigen::Index c = 0; c < n; ++c) {
    const Vec3 xv = x_v.col(c);
    BroydenResult best;
    best.residual = std::numeric_limits<double>::infinity();
    for (int b = 0; b < skel.n_b; ++b) {
      BroydenResult res =
          broyden_inverse_lbs(xv, field, skel, inv[static_cast<size_t>(b)].apply(xv));
      if ((res.converged && !best.converged) ||
          (res.converged == best.converged && res.residual < best.residual))
        best = res;
    }
    fwd.x_c.col(c) = best.x_c;
  }
  fwd.x_c_init = fwd.x_c;
  fwd.x_c_prime = fwd.x_c;
  return fwd;
}

std::string step_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%06d.ckpt", step);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (rays_per_entity < 1 || samples_per_ray < 2 || steps < 0 ||
      checkpoint_every < 1 || bone_samples < 1 || chunk_points < samples_per_ray)
    throw InvalidInput("TrainConfig: nonpositive counts");
  if (backend != "inn" && backend != "broyden")
    throw InvalidInput("TrainConfig: unknown backend '" + backend + "'");
  if (lr <= 0.0 || beta_init <= 0.0) throw InvalidInput("TrainConfig: bad scalars");
  if (!weights.valid()) throw InvalidInput("TrainConfig: negative loss weight");
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{{"lr", lr},
                        {"rays_per_entity", rays_per_entity},
                        {"samples_per_ray", samples_per_ray},
                        {"steps", steps},
                        {"checkpoint_every", checkpoint_every},
                        {"seed", seed},
                        {"backend", backend},
                        {"lambda_pose", weights.lambda_pose},
                        {"lambda_w", weights.lambda_w},
                        {"lambda_inn", weights.lambda_inn},
                        {"lambda_consis", weights.lambda_consis},
                        {"lambda_shape", weights.lambda_shape},
                        {"use_eikonal", weights.use_eikonal},
                        {"lambda_eikonal", weights.lambda_eikonal},
                        {"inn_hidden", inn_hidden},
                        {"inn_proj", inn_proj},
                        {"snet_hidden", snet_hidden},
                        {"sdf_hidden", sdf_hidden},
                        {"sdf_feat", sdf_feat},
                        {"rgb_hidden", rgb_hidden},
                        {"bone_samples", bone_samples},
                        {"chunk_points", chunk_points},
                        {"beta_init", beta_init},
                        {"sphere_radius", sphere_radius},
                        {"use_xc_init", use_xc_init},
                        {"share_heads", share_heads}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.rays_per_entity = j.value("rays_per_entity", c.rays_per_entity);
  c.samples_per_ray = j.value("samples_per_ray", c.samples_per_ray);
  c.steps = j.value("steps", c.steps);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
  c.backend = j.value("backend", c.backend);
  c.weights.lambda_pose = j.value("lambda_pose", c.weights.lambda_pose);
  c.weights.lambda_w = j.value("lambda_w", c.weights.lambda_w);
  c.weights.lambda_inn = j.value("lambda_inn", c.weights.lambda_inn);
  c.weights.lambda_consis = j.value("lambda_consis", c.weights.lambda_consis);
  c.weights.lambda_shape = j.value("lambda_shape", c.weights.lambda_shape);
  c.weights.use_eikonal = j.value("use_eikonal", c.weights.use_eikonal);
  c.weights.lambda_eikonal = j.value("lambda_eikonal", c.weights.lambda_eikonal);
  c.inn_hidden = j.value("inn_hidden", c.inn_hidden);
  c.inn_proj = j.value("inn_proj", c.inn_proj);
  c.snet_hidden = j.value("snet_hidden", c.snet_hidden);
  c.sdf_hidden = j.value("sdf_hidden", c.sdf_hidden);
  c.sdf_feat = j.value("sdf_feat", c.sdf_feat);
  c.rgb_hidden = j.value("rgb_hidden", c.rgb_hidden);
  c.bone_samples = j.value("bone_samples", c.bone_samples);
  c.chunk_points = j.value("chunk_points", c.chunk_points);
  c.beta_init = j.value("beta_init", c.beta_init);
  c.sphere_radius = j.value("sphere_radius", c.sphere_radius);
  c.use_xc_init = j.value("use_xc_init", c.use_xc_init);
  c.share_heads = j.value("share_heads", c.share_heads);
  c.validate();
  return c;
}

SceneModel SceneModel::build(const TrainConfig& cfg, const Dataset& dataset) {
  cfg.validate();
  if (dataset.poses.empty()) throw InvalidInput("SceneModel: dataset has no frames");
  SceneModel m;
  m.cfg_ = cfg;
  m.share_heads_ = cfg.share_heads;
  m.d_.canonical = rest_frame(dataset.poses[0].deformable);
  m.nd_.canonical = rest_frame(dataset.poses[0].rigid);
  m.d_.sigma = default_semantic_sigma(m.d_.canonical);
  m.nd_.sigma = default_semantic_sigma(m.nd_.canonical);
  m.d_.inshape_r0 = default_inshape_radius(m.d_.canonical);
  m.nd_.inshape_r0 = default_inshape_radius(m.nd_.canonical);

  const int nb_d = m.d_.canonical.n_b;
  const int nb_nd = m.nd_.canonical.n_b;

  auto make_entity = [&](EntityModel& em, int nb, std::uint64_t salt) {
    InnConfig icfg;
    icfg.n_b = nb;
    icfg.hidden = cfg.inn_hidden;
    icfg.proj_dim = cfg.inn_proj;
    em.inn = CouplingINN(icfg, mix_seed(cfg.seed, salt));
    em.snet = SkinningNet(nb, cfg.snet_hidden, mix_seed(cfg.seed, salt + 1));
    SdfConfig scfg;
    scfg.n_b = cfg.share_heads ? std::max(nb_d, nb_nd) : nb;
    scfg.hidden = cfg.sdf_hidden;
    scfg.feat_dim = cfg.sdf_feat;
    scfg.sphere_radius = cfg.sphere_radius;
    em.sdf = SdfHead(scfg, mix_seed(cfg.seed, salt + 2), em.canonical.canonical_centroid());
  };
  make_entity(m.d_, nb_d, 11);
  make_entity(m.nd_, nb_nd, 29);

  RgbConfig rcfg;
  rcfg.pose_dim = 3 * (nb_d + nb_nd);
  rcfg.hidden = cfg.rgb_hidden;
  rcfg.feat_dim = cfg.sdf_feat;
  m.rgb_ = RgbHead(rcfg, mix_seed(cfg.seed, 47));

  m.beta_ = MatX::Constant(1, 1, cfg.beta_init);
  m.gbeta_ = MatX::Zero(1, 1);
  return m;
}

SdfHead& SceneModel::head_of(Entity e) {
  return (share_heads_ || e == Entity::Deformable) ? d_.sdf : nd_.sdf;
}
const SdfHead& SceneModel::head_of(Entity e) const {
  return (share_heads_ || e == Entity::Deformable) ? d_.sdf : nd_.sdf;
}

void SceneModel::sdf_forward(Entity e, const MatX& x_c, MatX& sdf, MatX& feat,
                             MatX& grad, SdfEvalCaches* caches) const {
  const EntityModel& em = entity(e);
  const SdfHead& head = head_of(e);
  MatX u;
  std::array<MatX, 3> ju;
  assemble_sdf_input(x_c, em.canonical, d_.canonical, nd_.canonical, d_.sigma,
                     nd_.sigma, head.origin(), u, ju,
                     caches ? &caches->input : nullptr);
  int pad = 3 * (head.config().n_b - em.canonical.n_b);
  if (caches) caches->pad_rows = pad;
  if (pad > 0) {
    // Zero rows between the own-joint block and the semantic block so both
    // entities fit the shared head's input width.
    const auto n = u.cols();
    const auto keep = u.rows() - 3;
    MatX up = MatX::Zero(u.rows() + pad, n);
    up.topRows(keep) = u.topRows(keep);
    up.bottomRows(3) = u.bottomRows(3);
    u = std::move(up);
    for (int a = 0; a < 3; ++a) {
      MatX jp = MatX::Zero(u.rows(), n);
      jp.topRows(keep) = ju[static_cast<size_t>(a)].topRows(keep);
      jp.bottomRows(3) = ju[static_cast<size_t>(a)].bottomRows(3);
      ju[static_cast<size_t>(a)] = std::move(jp);
    }
  }
  head.eval_joint(u, ju, sdf, feat, grad, caches ? &caches->head : nullptr);
}

MatX SceneModel::sdf_backward(Entity e, const SdfEvalCaches& caches,
                              const MatX& g_sdf, const MatX& g_feat,
                              const MatX& g_grad) {
  MatX g_u;
  std::array<MatX, 3> g_ju;
  head_of(e).backward(caches.head, g_sdf, g_feat, g_grad, g_u, g_ju);
  if (caches.pad_rows > 0) {
    const auto keep = g_u.rows() - caches.pad_rows - 3;
    auto strip = [&](const MatX& m) {
      MatX s(keep + 3, m.cols());
      s.topRows(keep) = m.topRows(keep);
      s.bottomRows(3) = m.bottomRows(3);
      return s;
    };
    g_u = strip(g_u);
    for (auto& g : g_ju) g = strip(g);
  }
  return assemble_sdf_input_backward(caches.input, g_u, g_ju);
}

double SceneModel::sdf_value(Entity e, const Vec3& x_c) const {
  MatX sdf, feat, grad;
  sdf_forward(e, x_c, sdf, feat, grad, nullptr);
  return sdf(0, 0);
}

VecX SceneModel::pose_vector(const FramePose& fp) const {
  VecX pd = fp.deformable.posed_flat();
  VecX pn = fp.rigid.posed_flat();
  VecX out(pd.size() + pn.size());
  out << pd, pn;
  return out;
}

ParamList SceneModel::params() {
  ParamList out;
  d_.inn.collect_params(out, "d.inn");
  d_.snet.collect_params(out, "d.snet");
  d_.sdf.collect_params(out, "d.sdf");
  nd_.inn.collect_params(out, "nd.inn");
  nd_.snet.collect_params(out, "nd.snet");
  if (!share_heads_) nd_.sdf.collect_params(out, "nd.sdf");
  rgb_.collect_params(out, "rgb");
  // The density sharpness anneals slowly: at the full rate Adam walks the
  // scalar to its floor before the geometry can localize, freezing the field.
  out.push_back({"beta", &beta_, &gbeta_, 0.05});
  return out;
}

Checkpoint SceneModel::to_checkpoint(const std::map<std::string, std::string>& metadata) {
  Checkpoint ckpt = Checkpoint::from_params(params());
  ckpt.metadata = metadata;
  ckpt.metadata["train_config"] = cfg_.to_json().dump();
  ckpt.metadata["skel_hash"] =
      fnv1a_hex(d_.canonical.to_json().dump() + nd_.canonical.to_json().dump());
  return ckpt;
}

SceneModel SceneModel::load(const Checkpoint& ckpt, const Dataset& dataset) {
  auto it = ckpt.metadata.find("train_config");
  if (it == ckpt.metadata.end())
    throw InvalidInput("SceneModel::load: checkpoint missing train_config");
  TrainConfig cfg = TrainConfig::from_json(nlohmann::json::parse(it->second));
  SceneModel m = build(cfg, dataset);
  ckpt.restore_params(m.params());
  return m;
}

namespace {

// Everything a training step needs about one frame/camera selection.
struct StepContext {
  const TrainConfig* cfg;
  const Dataset* dataset;
  SceneModel* model;
  const FramePose* fp;
  VecX poses;  // rgb conditioning
};

struct BatchPlan {
  RayBatch batch;
  MatX depths_d, depths_nd;        // S x N, per branch
  std::vector<char> qualifies;     // per ray, own-branch init-cloud hit
};

const SkeletonFrame& frame_skel(const StepContext& ctx, Entity e) {
  return e == Entity::Deformable ? ctx.fp->deformable : ctx.fp->rigid;
}

DeformerForward run_canonicalize(const StepContext& ctx, Entity e, const MatX& pts) {
  EntityModel& em = ctx.model->entity(e);
  const SkeletonFrame& skel = frame_skel(ctx, e);
  if (ctx.cfg->backend == "broyden") return canonicalize_broyden(pts, skel, em.snet);
  return canonicalize(pts, skel, em.inn, em.snet, ctx.cfg->use_xc_init);
}

// Pass 1: canonicalize own-branch points to learn per-ray in-shape
// qualification and the consistency population before gradients are taken.
void prepass(const StepContext& ctx, BatchPlan& plan, double& consis_sum,
             int& consis_n, int& shape_m) {
  Entity e = plan.batch.entity;
  const EntityModel& em = ctx.model->entity(e);
  const int S = ctx.cfg->samples_per_ray;
  const int N = plan.batch.size();
  const MatX& depths = e == Entity::Deformable ? plan.depths_d : plan.depths_nd;
  plan.qualifies.assign(static_cast<size_t>(N), 0);

  int rays_per_chunk = std::max(ctx.cfg->chunk_points / S, 1);
  for (int r0 = 0; r0 < N; r0 += rays_per_chunk) {
    int nr = std::min(rays_per_chunk, N - r0);
    MatX pts(3, static_cast<Eigen::Index>(nr) * S);
    for (int r = 0; r < nr; ++r)
      for (int s = 0; s < S; ++s)
        pts.col(static_cast<Eigen::Index>(r) * S + s) =
            plan.batch.origins.col(r0 + r) +
            depths(s, r0 + r) * plan.batch.directions.col(r0 + r);
    DeformerForward fwd = run_canonicalize(ctx, e, pts);
    for (int r = 0; r < nr; ++r) {
      bool q = false;
      for (int s = 0; s < S && !q; ++s)
        q = in_init_cloud(fwd.x_c.col(static_cast<Eigen::Index>(r) * S + s),
                          em.canonical, em.inshape_r0);
      if (q) {
        plan.qualifies[static_cast<size_t>(r0 + r)] = 1;
        ++shape_m;
      }
    }
    for (Eigen::Index c = 0; c < fwd.x_c.cols(); ++c) {
      if (fwd.degenerate[static_cast<size_t>(c)]) continue;
      consis_sum += (fwd.x_c_prime.col(c) - fwd.x_c.col(c)).squaredNorm();
      ++consis_n;
    }
  }
}

struct RenderStats {
  double rgb_l1_sum = 0.0;
  double shape_sum = 0.0;
  double eik_sum = 0.0;
  long eik_n = 0;
};

// Pass 2: full forward + backward over one entity's ray batch, chunked.
// Normalizers are global over the step's two batches.
void render_batch(const StepContext& ctx, const BatchPlan& plan, int total_rays,
                  int consis_total, int shape_total, bool train_mode,
                  RenderStats& stats) {
  Entity e = plan.batch.entity;
  Entity other = e == Entity::Deformable ? Entity::NonDeformable : Entity::Deformable;
  const int S = ctx.cfg->samples_per_ray;
  const int N = plan.batch.size();
  const LossWeights& w = ctx.cfg->weights;
  SceneModel& model = *ctx.model;
  const double beta = model.beta();
  const double alpha_scale = 1.0 / beta;
  const bool inn_backend = ctx.cfg->backend == "inn";
  // Own-branch samples across the step's two batches.
  const long eik_total = static_cast<long>(total_rays) * S;

  int rays_per_chunk = std::max(ctx.cfg->chunk_points / S, 1);
  for (int r0 = 0; r0 < N; r0 += rays_per_chunk) {
    int nr = std::min(rays_per_chunk, N - r0);
    const Eigen::Index np = static_cast<Eigen::Index>(nr) * S;

    auto chunk_points = [&](const MatX& depths) {
      MatX pts(3, np);
      for (int r = 0; r < nr; ++r)
        for (int s = 0; s < S; ++s)
          pts.col(static_cast<Eigen::Index>(r) * S + s) =
              plan.batch.origins.col(r0 + r) +
              depths(s, r0 + r) * plan.batch.directions.col(r0 + r);
      return pts;
    };
    const MatX& depths_own = e == Entity::Deformable ? plan.depths_d : plan.depths_nd;
    const MatX& depths_oth = e == Entity::Deformable ? plan.depths_nd : plan.depths_d;

    // --- own branch, with caches ---
    MatX pts_own = chunk_points(depths_own);
    DeformerForward fwd = run_canonicalize(ctx, e, pts_own);
    MatX sdf, feat, grad;
    SdfEvalCaches sc;
    model.sdf_forward(e, fwd.x_c, sdf, feat, grad, &sc);
    MatX normal;
    std::vector<char> degen_n;
    normals_from_gradients(grad, normal, degen_n);
    RgbHead::Cache rc;
    MatX rgb_own = model.rgb().forward(fwd.x_c, normal, feat, ctx.poses, &rc);
    VecX dens_own(np);
    for (Eigen::Index i = 0; i < np; ++i)
      dens_own[i] = sdf_to_density(sdf(0, i), beta, alpha_scale);

    // --- other branch, detached ---
    MatX pts_oth = chunk_points(depths_oth);
    DeformerForward fwd_o = run_canonicalize(ctx, other, pts_oth);
    MatX sdf_o, feat_o, grad_o;
    model.sdf_forward(other, fwd_o.x_c, sdf_o, feat_o, grad_o, nullptr);
    MatX normal_o;
    std::vector<char> degen_o;
    normals_from_gradients(grad_o, normal_o, degen_o);
    MatX rgb_oth = model.rgb().forward(fwd_o.x_c, normal_o, feat_o, ctx.poses, nullptr);
    VecX dens_oth(np);
    for (Eigen::Index i = 0; i < np; ++i)
      dens_oth[i] = sdf_to_density(sdf_o(0, i), beta, alpha_scale);

    // --- composite + per-ray gradients ---
    VecX g_dens_own = VecX::Zero(np);
    MatX g_rgb_own = MatX::Zero(3, np);
    for (int r = 0; r < nr; ++r) {
      int ray = r0 + r;
      SampleSet own{e, depths_own.col(ray), dens_own.segment(static_cast<Eigen::Index>(r) * S, S),
                    rgb_own.middleCols(static_cast<Eigen::Index>(r) * S, S)};
      SampleSet oth{other, depths_oth.col(ray), dens_oth.segment(static_cast<Eigen::Index>(r) * S, S),
                    rgb_oth.middleCols(static_cast<Eigen::Index>(r) * S, S)};
      const SampleSet& set_d = e == Entity::Deformable ? own : oth;
      const SampleSet& set_nd = e == Entity::Deformable ? oth : own;
      RenderOutput out = composite_render(set_d, set_nd, plan.batch.far[ray]);

      Vec3 diff = out.rgb - Vec3(plan.batch.target_rgb.col(ray));
      stats.rgb_l1_sum += diff.cwiseAbs().sum();

      // In-shape: the weight mass of the samples whose canonical points fall
      // inside the entity's init cloud is pushed toward 1. Restricting the
      // sum to in-cloud samples also starves weight outside the cloud, which
      // keeps the field from inflating toward the cameras.
      VecX g_w;
      bool have_gw = false;
      if (plan.qualifies[static_cast<size_t>(ray)]) {
        const int total_samples = static_cast<int>(out.weights.size());
        std::vector<char> in_cloud(static_cast<size_t>(total_samples), 0);
        double a_cloud = 0.0;
        for (int k = 0; k < total_samples; ++k) {
          if (out.src_entity[static_cast<size_t>(k)] != e) continue;
          Eigen::Index col = static_cast<Eigen::Index>(r) * S +
                             out.src_index[static_cast<size_t>(k)];
          if (!in_init_cloud(fwd.x_c.col(col), model.entity(e).canonical,
                             model.entity(e).inshape_r0))
            continue;
          in_cloud[static_cast<size_t>(k)] = 1;
          a_cloud += out.weights[static_cast<size_t>(k)];
        }
        constexpr double kEps = 1e-6;
        double a = std::clamp(a_cloud, kEps, 1.0);
        stats.shape_sum += -std::log(a);
        if (train_mode && a_cloud < 1.0) {
          g_w = VecX::Zero(total_samples);
          // Flatten the log pole so a nearly-empty cloud does not swamp the
          // color gradients of the same step.
          double g = w.lambda_shape * (-1.0 / (std::max(a, 0.02) * shape_total));
          for (int k = 0; k < total_samples; ++k)
            if (in_cloud[static_cast<size_t>(k)]) g_w[k] = g;
          have_gw = true;
        }
      }
      if (!train_mode) continue;

      Vec3 g_rgb_ray = diff.array().sign().matrix() / total_rays;
      SampleGrads sg = composite_backward(out, g_rgb_ray, 0.0, 0.0, 0.0,
                                          have_gw ? &g_w : nullptr);
      const VecX& gd = e == Entity::Deformable ? sg.g_density_d : sg.g_density_nd;
      const MatX& gc = e == Entity::Deformable ? sg.g_rgb_d : sg.g_rgb_nd;
      g_dens_own.segment(static_cast<Eigen::Index>(r) * S, S) = gd;
      g_rgb_own.middleCols(static_cast<Eigen::Index>(r) * S, S) = gc;
    }
    if (w.use_eikonal)
      for (Eigen::Index i = 0; i < np; ++i) {
        double d = grad.col(i).norm() - 1.0;
        stats.eik_sum += d * d;
      }
    stats.eik_n += np;
    if (!train_mode) continue;

    // --- backward ---
    MatX g_sdf = MatX::Zero(1, np);
    for (Eigen::Index i = 0; i < np; ++i) {
      double ds, db, da;
      sdf_to_density_grad(sdf(0, i), beta, alpha_scale, ds, db, da);
      g_sdf(0, i) = g_dens_own[i] * ds;
      // alpha_scale = 1/beta couples the two partials.
      model.gbeta_(0, 0) += g_dens_own[i] * (db - da / (beta * beta));
    }
    MatX g_xc_rgb, g_normal, g_feat;
    model.rgb().backward(rc, g_rgb_own, g_xc_rgb, g_normal, g_feat);
    MatX g_grad = normals_backward(grad, normal, degen_n, g_normal);
    if (w.use_eikonal && eik_total > 0)
      for (Eigen::Index i = 0; i < np; ++i) {
        double norm = grad.col(i).norm();
        if (norm > 1e-12)
          g_grad.col(i) += (w.lambda_eikonal * 2.0 * (norm - 1.0) /
                            (static_cast<double>(eik_total) * norm)) *
                           grad.col(i);
      }
    MatX g_xc = model.sdf_backward(e, sc, g_sdf, g_feat, g_grad) + g_xc_rgb;

    if (inn_backend) {
      MatX g_xc_prime = MatX::Zero(3, np);
      if (consis_total > 0) {
        for (Eigen::Index i = 0; i < np; ++i) {
          if (fwd.degenerate[static_cast<size_t>(i)]) continue;
          Vec3 dxi = fwd.x_c_prime.col(i) - fwd.x_c.col(i);
          Vec3 g = (w.lambda_consis * 2.0 / consis_total) * dxi;
          g_xc_prime.col(i) = g;
          g_xc.col(i) -= g;
        }
      }
      EntityModel& em = model.entity(e);
      canonicalize_backward(fwd, frame_skel(ctx, e), em.inn, em.snet, g_xc,
                            g_xc_prime, MatX());
    }
    // Broyden backend: canonical points are detached constants.
  }
}

void save_ckpt(SceneModel& model, const std::string& run_dir, int step) {
  std::map<std::string, std::string> meta;
  meta["step"] = std::to_string(step);
  model.to_checkpoint(meta).save(run_dir + "/checkpoints/" + step_name(step));
}

struct LoadedViews {
  std::vector<std::vector<Image>> rgbs, masks;
};

// Small synthetic datasets fit in memory; preload every view.
LoadedViews preload_views(const Dataset& dataset) {
  LoadedViews v;
  const int T = dataset.frames();
  const int C = static_cast<int>(dataset.cameras.size());
  v.rgbs.resize(static_cast<size_t>(T));
  v.masks.resize(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < C; ++c) {
      v.rgbs[static_cast<size_t>(t)].push_back(read_png(dataset.rgb_path(t, c)));
      v.masks[static_cast<size_t>(t)].push_back(read_png(dataset.mask_path(t, c)));
    }
  return v;
}

// One full optimization step. The optimizer is applied only when the total
// loss is finite, so the caller can retain the last finite checkpoint.
LossReport run_train_step(const TrainConfig& cfg, const Dataset& dataset,
                          SceneModel& model, ParamList& params,
                          AdamOptimizer& opt, SemanticRaySampler& sampler,
                          std::mt19937_64& rng, int step,
                          const LoadedViews& views) {
  const int T = dataset.frames();
  const int C = static_cast<int>(dataset.cameras.size());
  int t = static_cast<int>(rng() % static_cast<std::uint64_t>(T));
  int cam = static_cast<int>(rng() % static_cast<std::uint64_t>(C));
  std::uint64_t step_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(step) + 1);
  const int total_rays = 2 * cfg.rays_per_entity;

  zero_grads(params);
  model.gbeta_.setZero();

  StepContext ctx{&cfg, &dataset, &model, &dataset.poses[static_cast<size_t>(t)],
                  VecX()};
  ctx.poses = model.pose_vector(*ctx.fp);

  auto [batch_d, batch_nd] = sampler.sample(
      views.rgbs[static_cast<size_t>(t)][static_cast<size_t>(cam)],
      views.masks[static_cast<size_t>(t)][static_cast<size_t>(cam)],
      dataset.cameras[static_cast<size_t>(cam)], dataset.bounds,
      cfg.rays_per_entity, step_seed);

  BatchPlan plan_d{std::move(batch_d), {}, {}, {}};
  BatchPlan plan_nd{std::move(batch_nd), {}, {}, {}};
  plan_d.depths_d = stratified_depths(plan_d.batch, cfg.samples_per_ray,
                                      mix_seed(step_seed, 2));
  plan_d.depths_nd = stratified_depths(plan_d.batch, cfg.samples_per_ray,
                                       mix_seed(step_seed, 3));
  plan_nd.depths_d = stratified_depths(plan_nd.batch, cfg.samples_per_ray,
                                       mix_seed(step_seed, 4));
  plan_nd.depths_nd = stratified_depths(plan_nd.batch, cfg.samples_per_ray,
                                        mix_seed(step_seed, 5));

  double consis_sum = 0.0;
  int consis_n = 0, shape_m = 0;
  prepass(ctx, plan_d, consis_sum, consis_n, shape_m);
  prepass(ctx, plan_nd, consis_sum, consis_n, shape_m);

  RenderStats stats;
  render_batch(ctx, plan_d, total_rays, consis_n, shape_m, true, stats);
  render_batch(ctx, plan_nd, total_rays, consis_n, shape_m, true, stats);

  LossReport report;
  report.l_rgb = stats.rgb_l1_sum / total_rays;
  report.l_consis = consis_n > 0 ? consis_sum / consis_n : 0.0;
  report.l_shape = shape_m > 0 ? stats.shape_sum / shape_m : 0.0;
  if (cfg.weights.use_eikonal && stats.eik_n > 0)
    report.l_eikonal = stats.eik_sum / static_cast<double>(stats.eik_n);

  if (cfg.backend == "inn") {
    for (Entity e : {Entity::Deformable, Entity::NonDeformable}) {
      EntityModel& em = model.entity(e);
      const SkeletonFrame& skel = frame_skel(ctx, e);
      report.l_pose += 0.5 * loss_pose(em.inn, skel, cfg.bone_samples,
                                       mix_seed(step_seed, 7), -1.0,
                                       0.5 * cfg.weights.lambda_pose,
                                       cfg.use_xc_init);
      std::vector<Vec3> pv = sample_bone_points(
          skel, true, cfg.bone_samples, default_bone_sample_radius(skel),
          mix_seed(step_seed, 8));
      MatX xv(3, cfg.bone_samples);
      for (int i = 0; i < cfg.bone_samples; ++i)
        xv.col(i) = pv[static_cast<size_t>(i)];
      report.l_inn += 0.5 * loss_cycle(em.inn, skel, xv,
                                       0.5 * cfg.weights.lambda_inn,
                                       cfg.use_xc_init);
    }
  }
  for (Entity e : {Entity::Deformable, Entity::NonDeformable}) {
    EntityModel& em = model.entity(e);
    report.l_w += 0.5 * loss_skinning(em.snet, em.canonical,
                                      0.5 * cfg.weights.lambda_w);
  }
  report = loss_total(report, cfg.weights);

  if (std::isfinite(report.total)) {
    opt.step(params);
    if (model.beta_(0, 0) < kBetaMin) model.beta_(0, 0) = kBetaMin;
  }
  return report;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& dataset,
                  const std::string& run_dir, SceneModel* model_out) {
  cfg.validate();
  if (dataset.poses.empty() || dataset.cameras.empty())
    throw InvalidInput("train: empty dataset");
  fs::create_directories(fs::path(run_dir) / "checkpoints");

  SceneModel model = SceneModel::build(cfg, dataset);
  ParamList params = model.params();
  AdamOptimizer opt(cfg.lr);
  LoadedViews views = preload_views(dataset);

  std::ofstream log(run_dir + "/train_log.csv");
  log << loss_csv_header() << '\n';

  save_ckpt(model, run_dir, 0);

  TrainResult result;
  SemanticRaySampler sampler;
  std::mt19937_64 rng(cfg.seed);
  auto t_start = std::chrono::steady_clock::now();

  for (int step = 0; step < cfg.steps; ++step) {
    LossReport report =
        run_train_step(cfg, dataset, model, params, opt, sampler, rng, step, views);
    double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
            .count();
    if (!std::isfinite(report.total)) {
      result.nan_abort = true;
      result.abort_step = step;
      log << "# aborted: non-finite loss at step " << step << '\n';
      break;
    }

    result.log.push_back(report);
    result.wall_s.push_back(wall);
    log << loss_csv_row(step, report, wall) << '\n';
    result.steps_done = step + 1;

    if ((step + 1) % cfg.checkpoint_every == 0)
      save_ckpt(model, run_dir, step + 1);
  }

  if (!result.nan_abort) save_ckpt(model, run_dir, result.steps_done);
  std::map<std::string, std::string> meta;
  meta["step"] = std::to_string(result.steps_done);
  model.to_checkpoint(meta).save(run_dir + "/checkpoints/final.ckpt");
  if (model_out) *model_out = std::move(model);
  return result;
}

BenchResult bench_backends(TrainConfig cfg, const Dataset& dataset,
                           double budget_s, const std::string& out_dir,
                           int eval_res, int eval_points) {
  BenchResult result;
  Mesh gt_d = read_obj(dataset.gt_canonical_path(Entity::Deformable));
  Mesh gt_nd = read_obj(dataset.gt_canonical_path(Entity::NonDeformable));
  Mesh gt_union = gt_d;
  int off = static_cast<int>(gt_union.vertices.size());
  gt_union.vertices.insert(gt_union.vertices.end(), gt_nd.vertices.begin(),
                           gt_nd.vertices.end());
  for (const auto& f : gt_nd.faces)
    gt_union.faces.push_back({f[0] + off, f[1] + off, f[2] + off});
  MatX gt_pts = sample_surface(gt_union, eval_points, cfg.seed + 101);

  for (const std::string& backend : {std::string("inn"), std::string("broyden")}) {
    TrainConfig bcfg = cfg;
    bcfg.backend = backend;
    bcfg.steps = 0;  // stepped manually below
    SceneModel model = SceneModel::build(bcfg, dataset);
    ParamList params = model.params();
    AdamOptimizer opt(bcfg.lr);
    LoadedViews views = preload_views(dataset);

    SemanticRaySampler sampler;
    std::mt19937_64 rng(bcfg.seed);
    double train_wall = 0.0;  // training time only; evaluation excluded
    double half_budget = budget_s / 2.0;
    int step = 0;
    double per_step_sum = 0.0;

    auto evaluate = [&](int at_step) {
      const SkeletonFrame& skel = model.entity(Entity::Deformable).canonical;
      Vec3 lo = skel.canonical_joints[0], hi = skel.canonical_joints[0];
      for (const Vec3& j : skel.canonical_joints) {
        lo = lo.cwiseMin(j);
        hi = hi.cwiseMax(j);
      }
      Vec3 lo_nd = model.entity(Entity::NonDeformable).canonical.canonical_joints[0];
      lo = lo.cwiseMin(lo_nd - Vec3::Constant(0.3));
      hi = hi.cwiseMax(lo_nd + Vec3::Constant(0.3));
      Vec3 pad = 0.25 * (hi - lo) + Vec3::Constant(0.15);
      lo -= pad;
      hi += pad;
      double chamfer;
      try {
        Mesh pred = marching_cubes(
            [&](const Vec3& p) {
              return std::min(model.sdf_value(Entity::Deformable, p),
                              model.sdf_value(Entity::NonDeformable, p));
            },
            lo, hi, eval_res, "scene");
        MatX pred_pts = sample_surface(largest_component(pred), eval_points,
                                       bcfg.seed + 202);
        MetricReport rep = metrics_from_points(pred_pts, gt_pts, 5.0);
        chamfer = rep.chamfer_cm;
      } catch (const InvalidInput&) {
        chamfer = std::numeric_limits<double>::quiet_NaN();
      }
      result.points.push_back({backend, at_step, train_wall, chamfer});
    };

    evaluate(0);
    while (step < cfg.steps) {
      auto s0 = std::chrono::steady_clock::now();
      run_train_step(bcfg, dataset, model, params, opt, sampler, rng, step, views);
      ++step;
      double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - s0)
                      .count();
      train_wall += dt;
      per_step_sum += dt;
      if (step % cfg.checkpoint_every == 0) evaluate(step);
      if (train_wall > half_budget) {
        result.budget_exhausted = true;
        break;
      }
    }
    if (step % cfg.checkpoint_every != 0) evaluate(step);
    double per_step = step > 0 ? per_step_sum / step : 0.0;
    (backend == "inn" ? result.step_time_inn : result.step_time_broyden) = per_step;
  }

  fs::create_directories(out_dir);
  std::ofstream csv(out_dir + "/bench.csv");
  csv << "backend,step,wall_s,chamfer_cm\n";
  csv.precision(9);
  for (const BenchPoint& p : result.points)
    csv << p.backend << ',' << p.step << ',' << p.wall_s << ',' << p.chamfer_cm
        << '\n';
  return result;
}

}  // namespace tfs
