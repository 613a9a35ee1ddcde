#include "posewarp/loss.hpp"

#include <cmath>

#include "posewarp/ops.hpp"

namespace posewarp {

double LossReport::recomposed_total_G(const LossWeights& w) const {
  return adv_G_fwd + adv_G_bwd + w.lambda_P * (pose_fwd + pose_bwd) + w.lambda_Id * identity;
}

bool LossReport::all_finite() const {
  for (double v : {adv_G_fwd, adv_G_bwd, pose_fwd, pose_bwd, content, patch_style, identity, phi, total_G, total_D}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

nlohmann::json LossReport::to_json() const {
  return {{"adv_G_fwd", adv_G_fwd}, {"adv_G_bwd", adv_G_bwd}, {"pose_fwd", pose_fwd},
          {"pose_bwd", pose_bwd},   {"content", content},     {"patch_style", patch_style},
          {"identity", identity},   {"phi", phi},             {"total_G", total_G},
          {"total_D", total_D}};
}

LossReport LossReport::from_json(const nlohmann::json& j) {
  LossReport r;
  r.adv_G_fwd = j.at("adv_G_fwd").get<double>();
  r.adv_G_bwd = j.at("adv_G_bwd").get<double>();
  r.pose_fwd = j.at("pose_fwd").get<double>();
  r.pose_bwd = j.at("pose_bwd").get<double>();
  r.content = j.at("content").get<double>();
  r.patch_style = j.at("patch_style").get<double>();
  r.identity = j.at("identity").get<double>();
  r.phi = j.at("phi").get<double>();
  r.total_G = j.at("total_G").get<double>();
  r.total_D = j.at("total_D").get<double>();
  return r;
}

namespace {

Shape grid_shape(const Tensor& scores) {
  if (scores.rank() < 3) throw ShapeError("score grid must be [1,h,w] or [B,1,h,w], got " + shape_str(scores.shape()));
  return {scores.dim(-3), scores.dim(-2), scores.dim(-1)};
}

}  // namespace

Tensor adv_d_loss_scores(const Tensor& real_scores, const Tensor& fake_scores) {
  if (grid_shape(real_scores) != grid_shape(fake_scores)) {
    throw ShapeError("adv_d_loss: score grids differ: " + shape_str(real_scores.shape()) + " vs " +
                     shape_str(fake_scores.shape()));
  }
  const Tensor ones = Tensor::full(real_scores.shape(), 1.0f);
  const Tensor zeros = Tensor::zeros(fake_scores.shape());
  return mse(real_scores, ones) + mse(fake_scores, zeros);
}

Tensor adv_g_loss_scores(const Tensor& fake_scores) {
  return mse(fake_scores, Tensor::full(fake_scores.shape(), 1.0f));
}

Tensor adv_d_loss(const ArchDescriptor& arch, const ParamMap& d_params, const Tensor& real, const Tensor& fake) {
  return adv_d_loss_scores(discriminator_forward(arch, d_params, real.detach()),
                           discriminator_forward(arch, d_params, fake.detach()));
}

Tensor adv_g_loss(const ArchDescriptor& arch, const ParamMap& d_params, const Tensor& fake) {
  return adv_g_loss_scores(discriminator_forward(arch, d_params, fake));
}

Tensor pose_loss(const Tensor& phi_out, const Tensor& target) { return mse(phi_out, target); }

Tensor content_loss(const Tensor& psi_src, const Tensor& psi_cycle) { return mse(psi_src, psi_cycle); }

Tensor patch_features(const Tensor& psi, const Tensor& maps_ds, int joint) {
  if (psi.rank() != 3 || maps_ds.rank() != 3 || psi.dim(1) != maps_ds.dim(1) || psi.dim(2) != maps_ds.dim(2)) {
    throw ShapeError("patch_features: features " + shape_str(psi.shape()) + " and maps " + shape_str(maps_ds.shape()) +
                     " disagree spatially");
  }
  return psi * slice(maps_ds, 0, joint, joint + 1);
}

Tensor gram(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("gram: expected [C,H,W], got " + shape_str(x.shape()));
  const Tensor flat = reshape(x, {x.dim(0), x.dim(1) * x.dim(2)});
  return matmul(flat, transpose(flat));
}

Tensor patch_style_loss(const Tensor& psi_src, const Tensor& maps_src_ds, const Tensor& psi_gen,
                        const Tensor& maps_gen_ds, const std::vector<int>& visible) {
  if (psi_src.shape() != psi_gen.shape()) {
    throw ShapeError("patch_style_loss: feature shapes differ: " + shape_str(psi_src.shape()) + " vs " +
                     shape_str(psi_gen.shape()));
  }
  if (visible.empty()) return Tensor::scalar(0.0f);
  const float inv_area = 1.0f / static_cast<float>(psi_src.dim(1) * psi_src.dim(2));
  std::vector<Tensor> terms;
  terms.reserve(visible.size());
  for (int i : visible) {
    const Tensor diff = (gram(patch_features(psi_src, maps_src_ds, i)) - gram(patch_features(psi_gen, maps_gen_ds, i))) *
                        inv_area;
    terms.push_back(sum(diff * diff));
  }
  return mean(concat(terms, 0));
}

Tensor identity_loss(const Tensor& content, const Tensor& style, double lambda_style) {
  return content + style * static_cast<float>(lambda_style);
}

Tensor phi_loss(const Tensor& phi_out_real, const Tensor& maps_real) { return pose_loss(phi_out_real, maps_real); }

Tensor l1_ablation_loss(const Tensor& source, const Tensor& cycle) {
  if (source.shape() != cycle.shape()) {
    throw ShapeError("l1_ablation_loss: shapes differ: " + shape_str(source.shape()) + " vs " + shape_str(cycle.shape()));
  }
  return mean(abs(source - cycle));
}

GeneratorLoss full_generator_loss(const NetworkParams& frozen, const CycleBatch& batch, const LossWeights& weights,
                                  bool ablation_l1) {
  const ArchDescriptor& arch = frozen.arch;
  const ParamMap d = frozen.subset(kDiscriminator);
  const ParamMap phi = frozen.subset(kPoseRegressor);

  const Tensor adv_fwd = adv_g_loss(arch, d, batch.fake);
  const Tensor adv_bwd = adv_g_loss(arch, d, batch.cycle);
  const Tensor pose_fwd = pose_loss(pose_regressor_forward(arch, phi, batch.fake), batch.maps_target);
  const Tensor pose_bwd = pose_loss(pose_regressor_forward(arch, phi, batch.cycle), batch.maps_source);

  GeneratorLoss out;
  Tensor identity;
  if (ablation_l1) {
    identity = l1_ablation_loss(batch.source, batch.cycle);
  } else {
    const ParamMap psi = frozen.subset(kFeatureNet);
    const int z = arch.psi_layer;
    const int factor = feature_reduction(z);
    const Tensor psi_src = feature_extract(arch, psi, batch.source.detach(), z);
    const Tensor psi_fake = feature_extract(arch, psi, batch.fake, z);
    const Tensor psi_cycle = feature_extract(arch, psi, batch.cycle, z);
    const Tensor content = content_loss(psi_src, psi_cycle);

    const Tensor ds_src = downsample(batch.maps_source, factor);
    const Tensor ds_tgt = downsample(batch.maps_target, factor);
    const int n = batch.source.dim(0);
    const int h = batch.source.dim(-2), w = batch.source.dim(-1);
    std::vector<Tensor> per_sample;
    for (int b = 0; b < n; ++b) {
      auto one = [b](const Tensor& t) { return reshape(slice(t, 0, b, b + 1), {t.dim(1), t.dim(2), t.dim(3)}); };
      const auto visible = joint_visibility_pairs(batch.skel_source.at(b), batch.skel_target.at(b), h, w);
      per_sample.push_back(patch_style_loss(one(psi_src), one(ds_src), one(psi_fake), one(ds_tgt), visible));
    }
    const Tensor style = mean(concat(per_sample, 0));
    identity = identity_loss(content, style, weights.lambda_style);
    out.report.content = content.item();
    out.report.patch_style = style.item();
  }

  out.total = adv_fwd + adv_bwd + (pose_fwd + pose_bwd) * static_cast<float>(weights.lambda_P) +
              identity * static_cast<float>(weights.lambda_Id);
  out.report.adv_G_fwd = adv_fwd.item();
  out.report.adv_G_bwd = adv_bwd.item();
  out.report.pose_fwd = pose_fwd.item();
  out.report.pose_bwd = pose_bwd.item();
  out.report.identity = identity.item();
  out.report.total_G = out.total.item();
  return out;
}

}  // namespace posewarp
