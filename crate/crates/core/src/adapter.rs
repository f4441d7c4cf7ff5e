//! Layout adapter: a frozen teacher feature extractor, a lightweight
//! student image encoder distilled from it with masked-patch training, a
//! stack of temporal 3D convolutions (group norm + ReLU per block), and a
//! zero-initialized projection into the latent space.
//!
//! The teacher stands in for a heavyweight segmentation encoder: a frozen
//! seeded random conv net plus one analytic Sobel-magnitude channel, so its
//! features are deterministic, layout-sensitive, and non-trivial without
//! shipping foundation-model weights.

use crate::autograd::NodeId;
use crate::clip::FrameClip;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent::LatentOffset;
use crate::nn::{init_conv2d, init_conv3d, init_group_norm, GraphCtx, Init, Params};
use crate::rng::derive_rng;
use crate::tensor::{avg_pool_exact, sobel_magnitude};
use ndarray::{Array2, Array4, Axis};
use rand::Rng;

/// Where a feature clip came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Teacher,
    Student,
    TemporalMixed,
}

/// Per-frame feature maps `(N, C_f, h_f, w_f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip {
    features: Array4<f64>,
    source: FeatureSource,
}

impl FeatureClip {
    pub fn new(features: Array4<f64>, source: FeatureSource) -> Result<Self> {
        if let Some(v) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite feature value {v}")));
        }
        Ok(Self { features, source })
    }

    pub fn features(&self) -> &Array4<f64> {
        &self.features
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn frame_count(&self) -> usize {
        self.features.dim().0
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.features.dim()
    }
}

/// Installs the frozen teacher (`teacher.` group); its weights come from
/// `config.teacher_seed`, never from the run seed, and no stage trains them.
pub fn init_teacher(params: &mut Params, config: &ModelConfig) {
    let (t0, t1, t2) = config.teacher_channels;
    let cf = config.adapter.feature_channels;
    assert!(cf >= 2, "teacher needs at least one learned channel besides Sobel");
    let seed = config.teacher_seed;
    init_conv2d(params, seed, "teacher.c1", 3, t0, 3, Init::He, 0.0);
    init_conv2d(params, seed, "teacher.c2", t0, t1, 3, Init::He, 0.0);
    init_conv2d(params, seed, "teacher.c3", t1, t2, 3, Init::He, 0.0);
    init_conv2d(params, seed, "teacher.c4", t2, cf - 1, 3, Init::He, 0.0);
}

/// Installs the student encoder and its distillation projection head
/// (`student.` group).
pub fn init_student(params: &mut Params, seed: u64, config: &ModelConfig) {
    let (s0, s1) = config.student_channels;
    let cf = config.adapter.feature_channels;
    init_conv2d(params, seed, "student.c1", 3, s0, 3, Init::He, 0.0);
    init_conv2d(params, seed, "student.c2", s0, s1, 3, Init::He, 0.0);
    init_conv2d(params, seed, "student.c3", s1, cf, 3, Init::He, 0.0);
    init_conv2d(params, seed, "student.proj", cf, cf, 1, Init::He, 0.0);
}

/// Installs `depth` temporal blocks (`temporal.` group), each a 3x3x3 conv
/// with group norm and ReLU.
pub fn init_temporal(params: &mut Params, seed: u64, config: &ModelConfig, depth: usize) {
    let cf = config.adapter.feature_channels;
    for i in 0..depth {
        init_conv3d(params, seed, &format!("temporal.block{i}.conv"), cf, cf, 3);
        init_group_norm(params, &format!("temporal.block{i}.norm"), cf);
    }
}

/// Installs the zero-initialized feature-to-latent projection (`proj.`
/// group); an untrained adapter contributes exactly zero guidance.
pub fn init_projection(params: &mut Params, seed: u64, config: &ModelConfig) {
    init_conv2d(
        params,
        seed,
        "proj.to_latent",
        config.adapter.feature_channels,
        config.latent_channels,
        3,
        Init::Zero,
        0.0,
    );
}

fn check_feature_input(clip: &FrameClip, context: &str) -> Result<()> {
    let s = ModelConfig::DOWNSAMPLE;
    if clip.height() % s != 0 || clip.width() % s != 0 {
        return Err(Error::shape(
            context,
            format!("H and W divisible by {s}"),
            format!("{}x{}", clip.height(), clip.width()),
        ));
    }
    Ok(())
}

/// Sobel-magnitude channel of each frame's grayscale, pooled to feature
/// resolution: `(N, 1, H/4, W/4)`.
fn sobel_channel(clip: &FrameClip) -> Array4<f64> {
    let (n, h, w) = (clip.frame_count(), clip.height(), clip.width());
    let s = ModelConfig::DOWNSAMPLE;
    let mut out = Array4::zeros((n, 1, h / s, w / s));
    let rgb = clip.rgb();
    for i in 0..n {
        let mut gray = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                gray[[y, x]] =
                    (rgb[[i, 0, y, x]] + rgb[[i, 1, y, x]] + rgb[[i, 2, y, x]]) / 3.0;
            }
        }
        let mag = sobel_magnitude(&gray.view());
        let pooled = avg_pool_exact(&mag.view(), s);
        out.index_axis_mut(Axis(0), i)
            .index_axis_move(Axis(0), 0)
            .assign(&pooled);
    }
    out
}

/// Frozen teacher features for every frame of a clip: random-conv channels
/// concatenated with the Sobel coverage channel.
pub fn teacher_features(
    clip: &FrameClip,
    params: &Params,
    config: &ModelConfig,
) -> Result<FeatureClip> {
    check_feature_input(clip, "teacher_features")?;
    let sobel = sobel_channel(clip);
    let mut ctx = GraphCtx::inference(params);
    let rgb = ctx.input(clip.rgb().into_dyn());
    let h = ctx.conv2d(rgb, "teacher.c1", 2, 1);
    let h = ctx.graph.relu(h);
    let h = ctx.conv2d(h, "teacher.c2", 2, 1);
    let h = ctx.graph.relu(h);
    let h = ctx.conv2d(h, "teacher.c3", 1, 1);
    let h = ctx.graph.relu(h);
    let learned = ctx.conv2d(h, "teacher.c4", 1, 1);
    let sobel_node = ctx.input(sobel.into_dyn());
    let full = ctx.graph.concat_channels(learned, sobel_node);
    let features: Array4<f64> = ctx
        .graph
        .value(full)
        .clone()
        .into_dimensionality()
        .expect("teacher features 4-d");
    let _ = config;
    FeatureClip::new(features, FeatureSource::Teacher)
}

/// Student encoder graph (no projection head): `(N,3,H,W)` to
/// `(N,C_f,H/4,W/4)`, the teacher's feature shape.
pub fn student_graph(ctx: &mut GraphCtx, rgb: NodeId) -> NodeId {
    let h = ctx.conv2d(rgb, "student.c1", 2, 1);
    let h = ctx.graph.relu(h);
    let h = ctx.conv2d(h, "student.c2", 2, 1);
    let h = ctx.graph.relu(h);
    ctx.conv2d(h, "student.c3", 1, 1)
}

/// Student encoder followed by the distillation projection head.
pub fn student_projected_graph(ctx: &mut GraphCtx, rgb: NodeId) -> NodeId {
    let feats = student_graph(ctx, rgb);
    ctx.conv2d(feats, "student.proj", 1, 0)
}

/// Raw student features (no projection head), teacher-shaped.
pub fn student_features(
    clip: &FrameClip,
    params: &Params,
    config: &ModelConfig,
) -> Result<FeatureClip> {
    check_feature_input(clip, "student_features")?;
    let _ = config;
    let mut ctx = GraphCtx::inference(params);
    let rgb = ctx.input(clip.rgb().into_dyn());
    let out = student_graph(&mut ctx, rgb);
    let features: Array4<f64> = ctx
        .graph
        .value(out)
        .clone()
        .into_dimensionality()
        .expect("student features 4-d");
    FeatureClip::new(features, FeatureSource::Student)
}

/// Student features after the projection head, the representation the
/// adapter and the distillation loss both consume.
pub fn student_projected_features(
    clip: &FrameClip,
    params: &Params,
    config: &ModelConfig,
) -> Result<FeatureClip> {
    check_feature_input(clip, "student_projected_features")?;
    let _ = config;
    let mut ctx = GraphCtx::inference(params);
    let rgb = ctx.input(clip.rgb().into_dyn());
    let out = student_projected_graph(&mut ctx, rgb);
    let features: Array4<f64> = ctx
        .graph
        .value(out)
        .clone()
        .into_dimensionality()
        .expect("student features 4-d");
    FeatureClip::new(features, FeatureSource::Student)
}

/// Pixel mask (1 = visible, 0 = masked) built from non-overlapping square
/// patches; exactly `round(mask_ratio * patch_count)` patches are zeroed.
pub fn patch_mask(
    height: usize,
    width: usize,
    patch: usize,
    mask_ratio: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::Parameter(format!(
            "mask_ratio {mask_ratio} outside [0, 1); 1 leaves no visible patch"
        )));
    }
    if height % patch != 0 || width % patch != 0 {
        return Err(Error::shape(
            "patch_mask",
            format!("dims divisible by patch {patch}"),
            format!("{height}x{width}"),
        ));
    }
    let (gh, gw) = (height / patch, width / patch);
    let total = gh * gw;
    let masked = (mask_ratio * total as f64).round() as usize;

    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = derive_rng(seed, "patch-mask");
    for i in 0..total.saturating_sub(1) {
        let j = i + rng.gen_range(0..total - i);
        order.swap(i, j);
    }

    let mut mask = Array2::ones((height, width));
    for &cell in order.iter().take(masked) {
        let (gy, gx) = (cell / gw, cell % gw);
        mask.slice_mut(ndarray::s![
            gy * patch..(gy + 1) * patch,
            gx * patch..(gx + 1) * patch
        ])
        .fill(0.0);
    }
    Ok(mask)
}

/// Applies per-frame patch masks to a clip's RGB input and runs the student
/// plus projection head. Per-frame masks derive from `(seed, frame index)`,
/// so the same seed always produces the same masks.
pub fn masked_student_features(
    clip: &FrameClip,
    mask_ratio: f64,
    seed: u64,
    params: &Params,
    config: &ModelConfig,
) -> Result<FeatureClip> {
    check_feature_input(clip, "masked_student_features")?;
    let masked = masked_rgb_input(clip, mask_ratio, seed, config)?;
    let mut ctx = GraphCtx::inference(params);
    let rgb = ctx.input(masked.into_dyn());
    let out = student_projected_graph(&mut ctx, rgb);
    let features: Array4<f64> = ctx
        .graph
        .value(out)
        .clone()
        .into_dimensionality()
        .expect("student features 4-d");
    FeatureClip::new(features, FeatureSource::Student)
}

/// The masked RGB planes fed to the student during distillation.
pub fn masked_rgb_input(
    clip: &FrameClip,
    mask_ratio: f64,
    seed: u64,
    config: &ModelConfig,
) -> Result<Array4<f64>> {
    let mut rgb = clip.rgb();
    let (n, _, h, w) = rgb.dim();
    for i in 0..n {
        let frame_seed = crate::rng::derive_seed(seed, &format!("mask-frame-{i}"));
        let mask = patch_mask(h, w, config.adapter.mask_patch, mask_ratio, frame_seed)?;
        for c in 0..3 {
            let mut plane = rgb.slice_mut(ndarray::s![i, c, .., ..]);
            plane *= &mask;
        }
    }
    Ok(rgb)
}

/// Temporal mixing graph: `depth` blocks of 3D conv + per-frame group norm
/// + ReLU; shape-preserving, and the exact identity at depth 0.
pub fn temporal_graph(ctx: &mut GraphCtx, features: NodeId, depth: usize, groups: usize) -> NodeId {
    let mut h = features;
    for i in 0..depth {
        h = ctx.conv3d_temporal(h, &format!("temporal.block{i}.conv"));
        h = ctx.group_norm(h, &format!("temporal.block{i}.norm"), groups);
        h = ctx.graph.relu(h);
    }
    h
}

/// Runs `depth` temporal blocks over a feature clip. Depth 0 returns the
/// input bitwise unchanged.
pub fn temporal_mix(
    features: &FeatureClip,
    depth: usize,
    params: &Params,
    config: &ModelConfig,
) -> Result<FeatureClip> {
    let (_, c, _, _) = features.dim();
    if c % config.adapter.groups != 0 {
        return Err(Error::Parameter(format!(
            "groups {} must divide feature channels {c}",
            config.adapter.groups
        )));
    }
    if depth == 0 {
        return FeatureClip::new(features.features().clone(), FeatureSource::TemporalMixed);
    }
    for i in 0..depth {
        if !params.contains(&format!("temporal.block{i}.conv.weight")) {
            return Err(Error::Parameter(format!(
                "temporal depth {depth} exceeds the {i} initialized blocks"
            )));
        }
    }
    let mut ctx = GraphCtx::inference(params);
    let input = ctx.input(features.features().clone().into_dyn());
    let out = temporal_graph(&mut ctx, input, depth, config.adapter.groups);
    let mixed: Array4<f64> = ctx
        .graph
        .value(out)
        .clone()
        .into_dimensionality()
        .expect("temporal 4-d");
    FeatureClip::new(mixed, FeatureSource::TemporalMixed)
}

/// Projection graph: per-frame 2D conv to latent channels, then adaptive
/// average pooling to the latent's spatial size.
pub fn projection_graph(ctx: &mut GraphCtx, features: NodeId, target: (usize, usize)) -> NodeId {
    let mapped = ctx.conv2d(features, "proj.to_latent", 1, 1);
    ctx.graph.adaptive_avg_pool(mapped, target.0, target.1)
}

/// Maps mixed features into a latent-shaped guidance offset.
pub fn project_to_latent(
    features: &FeatureClip,
    target: (usize, usize),
    params: &Params,
) -> Result<LatentOffset> {
    let mut ctx = GraphCtx::inference(params);
    let input = ctx.input(features.features().clone().into_dyn());
    let out = projection_graph(&mut ctx, input, target);
    let guidance: Array4<f64> = ctx
        .graph
        .value(out)
        .clone()
        .into_dimensionality()
        .expect("guidance 4-d");
    LatentOffset::new(guidance)
}

/// Full adapter path: projected student features per frame, temporal
/// mixing at the configured depth, then projection to latent shape.
pub fn adapter_forward(
    clip: &FrameClip,
    config: &ModelConfig,
    params: &Params,
) -> Result<LatentOffset> {
    let feats = student_projected_features(clip, params, config)?;
    let mixed = temporal_mix(&feats, config.adapter.temporal_depth, params, config)?;
    let s = ModelConfig::DOWNSAMPLE;
    project_to_latent(&mixed, (clip.height() / s, clip.width() / s), params)
}
