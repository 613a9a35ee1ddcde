#pragma once

// Loss terms of the pose-conditioned cycle GAN: least-squares adversarial
// terms, belief-map pose terms, feature content loss, pose-conditioned patch
// Gram (style) loss, their identity combination, and the full generator
// objective.

#include <json.hpp>
#include <vector>

#include "posewarp/nn.hpp"
#include "posewarp/pose.hpp"
#include "posewarp/tensor.hpp"

namespace posewarp {

struct LossWeights {
  double lambda_P = 700.0;
  double lambda_Id = 0.3;
  double lambda_style = 1.0;
};

struct LossReport {
  double adv_G_fwd = 0.0;
  double adv_G_bwd = 0.0;
  double pose_fwd = 0.0;
  double pose_bwd = 0.0;
  double content = 0.0;
  double patch_style = 0.0;
  double identity = 0.0;
  double phi = 0.0;
  double total_G = 0.0;
  double total_D = 0.0;

  // total_G rebuilt from the parts.
  double recomposed_total_G(const LossWeights& w) const;
  bool all_finite() const;
  nlohmann::json to_json() const;
  static LossReport from_json(const nlohmann::json& j);
};

// Score-grid forms. Real and fake grids may differ in batch size but must share
// the per-sample grid shape.
Tensor adv_d_loss_scores(const Tensor& real_scores, const Tensor& fake_scores);
Tensor adv_g_loss_scores(const Tensor& fake_scores);

// Runs D. `fake` is detached here, so the discriminator loss never reaches G.
Tensor adv_d_loss(const ArchDescriptor& arch, const ParamMap& d_params, const Tensor& real, const Tensor& fake);
// Runs D on a fake that stays attached to G's tape.
Tensor adv_g_loss(const ArchDescriptor& arch, const ParamMap& d_params, const Tensor& fake);

Tensor pose_loss(const Tensor& phi_out, const Tensor& target);
Tensor content_loss(const Tensor& psi_src, const Tensor& psi_cycle);

// psi [C,H',W'] times channel i of maps_ds [N,H',W'], broadcast over C.
Tensor patch_features(const Tensor& psi, const Tensor& maps_ds, int joint);
// [C,H',W'] -> [C,C], sum over pixels of X[a] * X[b].
Tensor gram(const Tensor& x);

// For each visible joint, sum over the C x C matrix of
// ((gram_src - gram_gen) / (H' W'))^2; averaged over the visible joints.
// The literal 1/N normalisation is replaced by 1/|visible| so the scale does not
// depend on how many joints are off-frame. Zero when nothing is visible.
Tensor patch_style_loss(const Tensor& psi_src, const Tensor& maps_src_ds, const Tensor& psi_gen,
                        const Tensor& maps_gen_ds, const std::vector<int>& visible);

Tensor identity_loss(const Tensor& content, const Tensor& style, double lambda_style);
Tensor phi_loss(const Tensor& phi_out_real, const Tensor& maps_real);
Tensor l1_ablation_loss(const Tensor& source, const Tensor& cycle);

// One forward pass of the bidirectional generator on a batch.
struct CycleBatch {
  Tensor source;       // I_po  [B,3,H,W]
  Tensor fake;         // I_pf = G(I_po | p_f)
  Tensor cycle;        // I^_po = G(I_pf | p_o)
  Tensor maps_source;  // p_o   [B,N,H,W]
  Tensor maps_target;  // p_f
  std::vector<Skeleton> skel_source;
  std::vector<Skeleton> skel_target;
};

struct GeneratorLoss {
  Tensor total;
  LossReport report;
};

// Generator objective. The regressor term of the full objective is trained
// separately through phi_loss, so it is not part of `total`. With ablation_l1
// the identity term is the mean absolute difference between I_po and I^_po and
// the content and patch_style fields are zero.
GeneratorLoss full_generator_loss(const NetworkParams& frozen, const CycleBatch& batch, const LossWeights& weights,
                                  bool ablation_l1);

}  // namespace posewarp
