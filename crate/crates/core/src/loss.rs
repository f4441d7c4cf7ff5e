//! The loss committee: feature-distillation loss, alpha and RGB
//! reconstruction losses, and the harmlessness penalty that keeps the
//! frozen VAE round trip faithful through the adjusted latent.
//!
//! Every squared-norm loss is an element mean, which keeps the weights
//! resolution-independent. Besides the pure scalar ops, this module builds
//! the training graphs so gradients reach exactly the trainable groups.

use crate::adapter::{projection_graph, student_projected_graph, temporal_graph, FeatureClip};
use crate::autograd::NodeId;
use crate::clip::FrameClip;
use crate::config::{LossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::latent::{
    decode_rgb, tr_decode_graph, tr_encode_graph, vae_decode_graph, LatentClip,
};
use crate::nn::{GraphCtx, Params};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

/// Training stage selector for [`total_loss`]: the distillation stage
/// optimizes the feature-reconstruction term alone; fine-tuning optimizes
/// the alpha/RGB/harmlessness committee.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Distill,
    Finetune,
}

/// Named loss components, their weights, and the stage-weighted total.
/// Logged as one JSON line per training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub l_r: f64,
    pub l_alpha: f64,
    pub l_rgb: f64,
    pub l_p: f64,
    pub w_r: f64,
    pub w_alpha: f64,
    pub w_rgb: f64,
    pub w_p: f64,
    pub total: f64,
}

/// Raw component values fed to [`total_loss`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub l_r: f64,
    pub l_alpha: f64,
    pub l_rgb: f64,
    pub l_p: f64,
}

fn mse_arrays(a: &ndarray::ArrayViewD<f64>, b: &ndarray::ArrayViewD<f64>, context: &str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            context,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Feature-reconstruction distillation loss: mean squared difference
/// between student and teacher feature clips.
pub fn distill_loss(student: &FeatureClip, teacher: &FeatureClip) -> Result<f64> {
    mse_arrays(
        &student.features().view().into_dyn(),
        &teacher.features().view().into_dyn(),
        "distill_loss",
    )
}

/// Alpha reconstruction loss over all frames and pixels of the alpha plane.
pub fn alpha_loss(alpha_gt: &FrameClip, alpha_hat: &FrameClip) -> Result<f64> {
    alpha_gt.check_same_shape(alpha_hat, "alpha_loss")?;
    mse_arrays(
        &alpha_gt.alpha().view().into_dyn(),
        &alpha_hat.alpha().view().into_dyn(),
        "alpha_loss",
    )
}

/// RGB reconstruction loss over the three color planes.
pub fn rgb_loss(rgb_gt: &FrameClip, rgb_hat: &FrameClip) -> Result<f64> {
    rgb_gt.check_same_shape(rgb_hat, "rgb_loss")?;
    mse_arrays(
        &rgb_gt.rgb().view().into_dyn(),
        &rgb_hat.rgb().view().into_dyn(),
        "rgb_loss",
    )
}

/// Harmlessness penalty: the frozen VAE decode of the adjusted latent must
/// still reconstruct the input RGB. With zero offset and zero guidance this
/// is exactly the VAE's own reconstruction error.
pub fn harmlessness_loss(
    rgb: &FrameClip,
    z_adj: &LatentClip,
    params: &Params,
    config: &ModelConfig,
) -> Result<f64> {
    let decoded = decode_rgb(z_adj, params, config)?;
    if decoded.frame_count() != rgb.frame_count()
        || decoded.height() != rgb.height()
        || decoded.width() != rgb.width()
    {
        return Err(Error::shape(
            "harmlessness_loss",
            format!("{}x{}x{}", rgb.frame_count(), rgb.height(), rgb.width()),
            format!(
                "{}x{}x{}",
                decoded.frame_count(),
                decoded.height(),
                decoded.width()
            ),
        ));
    }
    mse_arrays(
        &rgb.rgb().view().into_dyn(),
        &decoded.rgb().view().into_dyn(),
        "harmlessness_loss",
    )
}

/// Combines components into the stage total: `w_r * l_r` during
/// distillation, `w_alpha * l_alpha + w_rgb * l_rgb + w_p * l_p` during
/// fine-tuning. Inactive components are reported but not counted.
pub fn total_loss(
    components: &LossComponents,
    weights: &LossWeights,
    stage: Stage,
) -> Result<LossReport> {
    weights.validate()?;
    let total = match stage {
        Stage::Distill => weights.w_r * components.l_r,
        Stage::Finetune => {
            weights.w_alpha * components.l_alpha
                + weights.w_rgb * components.l_rgb
                + weights.w_p * components.l_p
        }
    };
    Ok(LossReport {
        l_r: components.l_r,
        l_alpha: components.l_alpha,
        l_rgb: components.l_rgb,
        l_p: components.l_p,
        w_r: weights.w_r,
        w_alpha: weights.w_alpha,
        w_rgb: weights.w_rgb,
        w_p: weights.w_p,
        total,
    })
}

/// Node handles of the fine-tuning committee graph.
pub struct CommitteeNodes {
    pub l_alpha: NodeId,
    pub l_rgb: NodeId,
    pub l_p: NodeId,
    pub total: NodeId,
}

/// Builds the full fine-tuning loss graph for one clip:
/// offset from the transparency encoder, guidance from the temporal adapter
/// over frozen student features, latent adjustment, transparent decode, and
/// the three committee terms.
///
/// `z` and `student_feats` are precomputed with the frozen VAE encoder and
/// student; `etr_rgba` is the 4-channel input the transparency encoder sees
/// (RGB plus the configured alpha prior).
#[allow(clippy::too_many_arguments)]
pub fn finetune_committee_graph(
    ctx: &mut GraphCtx,
    rgb_gt: &Array4<f64>,
    alpha_gt: &Array3<f64>,
    etr_rgba: &Array4<f64>,
    z: &Array4<f64>,
    student_feats: &Array4<f64>,
    depth: usize,
    groups: usize,
    weights: &LossWeights,
) -> CommitteeNodes {
    let (n, h, w) = alpha_gt.dim();
    let rgb_node = ctx.input(rgb_gt.clone().into_dyn());
    let alpha_node = ctx.input(
        alpha_gt
            .clone()
            .into_shape_with_order((n, 1, h, w))
            .expect("alpha reshape")
            .into_dyn(),
    );

    let etr_input = ctx.input(etr_rgba.clone().into_dyn());
    let offset = tr_encode_graph(ctx, etr_input);

    let feats = ctx.input(student_feats.clone().into_dyn());
    let mixed = temporal_graph(ctx, feats, depth, groups);
    let (zn, _, zh, zw) = z.dim();
    let _ = zn;
    let guidance = projection_graph(ctx, mixed, (zh, zw));

    let z_node = ctx.input(z.clone().into_dyn());
    let z_off = ctx.graph.add(z_node, offset);
    let z_adj = ctx.graph.add(z_off, guidance);

    let (rgb_hat, alpha_hat) = tr_decode_graph(ctx, z_adj);
    let l_alpha = ctx.graph.mse_loss(alpha_hat, alpha_node);
    let l_rgb = ctx.graph.mse_loss(rgb_hat, rgb_node);

    let roundtrip = vae_decode_graph(ctx, z_adj);
    let l_p = ctx.graph.mse_loss(roundtrip, rgb_node);

    let total = ctx.graph.weighted_sum(vec![
        (l_alpha, weights.w_alpha),
        (l_rgb, weights.w_rgb),
        (l_p, weights.w_p),
    ]);
    CommitteeNodes {
        l_alpha,
        l_rgb,
        l_p,
        total,
    }
}

/// Builds the distillation loss graph: student (plus projection head) on a
/// masked input against full-image teacher features.
pub fn distill_loss_graph(
    ctx: &mut GraphCtx,
    masked_rgb: &Array4<f64>,
    teacher_feats: &Array4<f64>,
    w_r: f64,
) -> (NodeId, NodeId) {
    let input = ctx.input(masked_rgb.clone().into_dyn());
    let student = student_projected_graph(ctx, input);
    let teacher = ctx.input(teacher_feats.clone().into_dyn());
    let l_r = ctx.graph.mse_loss(student, teacher);
    let total = ctx.graph.weighted_sum(vec![(l_r, w_r)]);
    (l_r, total)
}
