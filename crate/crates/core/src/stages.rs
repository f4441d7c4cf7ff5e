//! Training stages, inference, evaluation, and the temporal-depth ablation.
//!
//! Stage order: `pretrain` fits the VAE and the noise predictor on synthetic
//! clips and freezes them; `distill` trains the student encoder against the
//! frozen teacher with masked inputs; `finetune` trains the transparency
//! encoder/decoder, the temporal stack, and the latent projection under the
//! loss committee with everything else frozen. Each stage is bit-reproducible
//! from `(config, seed)` and writes one checkpoint plus a JSON-lines log.

use crate::adapter::{
    adapter_forward, init_projection, init_student, init_teacher, init_temporal,
    masked_rgb_input, student_projected_features, teacher_features,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetadata};
use crate::clip::FrameClip;
use crate::config::{AlphaPrior, ModelConfig, RunConfig};
use crate::dataset::{load_clip, load_manifest, resolve_clip_root, resolve_frames_dir, ManifestRecord};
use crate::diffusion::{denoise_from, denoiser_graph, forward_noise, init_denoiser, predict_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::latent::{
    adjust_latent, encode_rgb, decode_transparent, encode_transparency, init_tr_decoder,
    init_tr_encoder, init_vae, rgba_input, vae_decode_graph, vae_encode_graph, LatentClip,
    LatentOffset,
};
use crate::loss::{
    distill_loss_graph, finetune_committee_graph, total_loss, LossComponents, Stage,
};
use crate::metrics::{clip_metrics_with_holes, ClipReport};
use crate::nn::{Adam, GraphCtx, Params};
use crate::rng::{derive_rng, derive_seed, normal_array};
use ndarray::{Array3, Array4, ArrayD, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Parameter-group prefixes each stage trains.
pub const PRETRAIN_TRAINS: [&str; 2] = ["vae.", "denoiser."];
pub const DISTILL_TRAINS: [&str; 1] = ["student."];
pub const FINETUNE_TRAINS: [&str; 4] = ["tr_enc.", "tr_dec.", "temporal.", "proj."];

/// A fully loaded dataset: manifest records plus RGB, ground-truth alpha,
/// and (when present) hole-mask clips.
pub struct LoadedDataset {
    pub manifest_path: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub rgb: Vec<FrameClip>,
    pub alpha: Vec<FrameClip>,
    pub holes: Vec<Option<FrameClip>>,
}

impl LoadedDataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref().to_path_buf();
        let records = load_manifest(&manifest_path)?;
        let mut rgb = Vec::with_capacity(records.len());
        let mut alpha = Vec::with_capacity(records.len());
        let mut holes = Vec::with_capacity(records.len());
        for record in &records {
            let frames_dir = resolve_frames_dir(&manifest_path, record);
            let root = resolve_clip_root(&manifest_path, record);
            rgb.push(load_clip(&frames_dir)?);
            alpha.push(load_clip(root.join("alpha"))?);
            let holes_dir = root.join("holes");
            holes.push(if holes_dir.is_dir() {
                Some(load_clip(&holes_dir)?)
            } else {
                None
            });
        }
        Ok(Self {
            manifest_path,
            records,
            rgb,
            alpha,
            holes,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check_uniform_dims(&self) -> Result<()> {
        let (h, w) = (self.rgb[0].height(), self.rgb[0].width());
        for (i, clip) in self.rgb.iter().enumerate() {
            if clip.height() != h || clip.width() != w {
                return Err(Error::Validation(format!(
                    "training clips must share dimensions: clip {} is {}x{}, expected {h}x{w}",
                    self.records[i].id,
                    clip.height(),
                    clip.width()
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic holdout split: a seeded permutation of clip indices, the
/// first `round(fraction * n)` held out. Both halves come back sorted.
pub fn holdout_split(count: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = derive_rng(seed, "holdout-split");
    for i in 0..count.saturating_sub(1) {
        let j = i + rng.gen_range(0..count - i);
        order.swap(i, j);
    }
    let mut k = (fraction * count as f64).round() as usize;
    if fraction > 0.0 && k == 0 && count > 1 {
        k = 1;
    }
    k = k.min(count.saturating_sub(1));
    let mut holdout: Vec<usize> = order[..k].to_vec();
    let mut train: Vec<usize> = order[k..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    (train, holdout)
}

/// Appends JSON objects as lines to a log file; a disabled logger drops
/// everything (used by in-memory runs and tests).
pub struct JsonlLogger {
    writer: Option<std::io::BufWriter<std::fs::File>>,
}

impl JsonlLogger {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer: Some(std::io::BufWriter::new(file)),
        })
    }

    pub fn disabled() -> Self {
        Self { writer: None }
    }

    pub fn log(&mut self, value: &serde_json::Value) {
        if let Some(w) = &mut self.writer {
            // Log lines are best-effort; training must not die on log I/O.
            let _ = serde_json::to_writer(&mut *w, value);
            let _ = w.write_all(b"\n");
        }
    }

    pub fn flush(&mut self) {
        if let Some(w) = &mut self.writer {
            let _ = w.flush();
        }
    }
}

fn init_seed(config: &RunConfig) -> u64 {
    derive_seed(config.seed, "param-init")
}

/// Numbers a pretrain run reports back.
#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub vae_holdout_mse: f64,
    pub denoiser_eval_mse: f64,
}

/// Numbers a distill run reports back.
#[derive(Debug, Clone, Serialize)]
pub struct DistillReport {
    pub initial_holdout_l_r: f64,
    pub final_holdout_l_r: f64,
}

/// Numbers a finetune run reports back.
#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    pub initial_holdout_alpha_mse: f64,
    pub final_holdout_alpha_mse: f64,
}

fn batch_rgb(data: &LoadedDataset, frames: &[(usize, usize)]) -> Array4<f64> {
    let (h, w) = (data.rgb[frames[0].0].height(), data.rgb[frames[0].0].width());
    let mut out = Array4::zeros((frames.len(), 3, h, w));
    for (slot, &(ci, fi)) in frames.iter().enumerate() {
        let frame = data.rgb[ci].frame(fi);
        out.index_axis_mut(Axis(0), slot)
            .assign(&frame.slice(ndarray::s![..3, .., ..]));
    }
    out
}

fn frame_pool(data: &LoadedDataset, clip_indices: &[usize]) -> Vec<(usize, usize)> {
    let mut pool = Vec::new();
    for &ci in clip_indices {
        for fi in 0..data.rgb[ci].frame_count() {
            pool.push((ci, fi));
        }
    }
    pool
}

/// Mean VAE reconstruction error over whole clips.
fn vae_reconstruction_mse(params: &Params, clips: &[&FrameClip]) -> f64 {
    let mut sse = 0.0;
    let mut count = 0.0;
    for clip in clips {
        let mut ctx = GraphCtx::inference(params);
        let input = ctx.input(clip.rgb().into_dyn());
        let z = vae_encode_graph(&mut ctx, input);
        let recon = vae_decode_graph(&mut ctx, z);
        let loss = ctx.graph.mse_loss(recon, input);
        let n = ctx.graph.value(input).len() as f64;
        sse += ctx.graph.scalar(loss) * n;
        count += n;
    }
    sse / count
}

/// VAE + denoiser pre-training on the train split of `data`. Returns the
/// trained (f32-quantized) parameters and the held-out evaluation numbers.
pub fn run_pretrain(
    config: &RunConfig,
    data: &LoadedDataset,
    logger: &mut JsonlLogger,
) -> Result<(Params, PretrainReport)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("pretrain needs a dataset".into()));
    }
    data.check_uniform_dims()?;
    let (train_idx, holdout_idx) = holdout_split(data.len(), config.data.holdout_fraction, config.seed);

    let mut params = Params::new();
    init_vae(&mut params, init_seed(config), &config.model);
    init_denoiser(&mut params, init_seed(config), &config.model);

    let pool = frame_pool(data, &train_idx);
    let mut rng = derive_rng(config.seed, "pretrain-vae-batch");
    let mut adam = Adam::new(config.pretrain.vae_lr);
    for step in 0..config.pretrain.vae_steps {
        let frames: Vec<(usize, usize)> = (0..config.pretrain.vae_batch)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect();
        let batch = batch_rgb(data, &frames);
        let mut ctx = GraphCtx::new(&params, &["vae."]);
        let input = ctx.input(batch.into_dyn());
        let z = vae_encode_graph(&mut ctx, input);
        let recon = vae_decode_graph(&mut ctx, z);
        let loss = ctx.graph.mse_loss(recon, input);
        let grads = ctx.graph.backward(loss);
        let by_name = ctx.grads_by_name(&grads);
        let value = ctx.graph.scalar(loss);
        adam.step(&mut params, &by_name)?;
        logger.log(&serde_json::json!({
            "stage": "pretrain", "phase": "vae", "step": step, "mse": value,
        }));
    }

    let eval_clips: Vec<&FrameClip> = if holdout_idx.is_empty() {
        train_idx.iter().map(|&i| &data.rgb[i]).collect()
    } else {
        holdout_idx.iter().map(|&i| &data.rgb[i]).collect()
    };
    let vae_holdout_mse = vae_reconstruction_mse(&params, &eval_clips);
    logger.log(&serde_json::json!({
        "stage": "pretrain", "phase": "vae-eval", "holdout_mse": vae_holdout_mse,
    }));
    if vae_holdout_mse > config.pretrain.tau_vae {
        return Err(Error::NonConvergence {
            metric: "vae holdout reconstruction mse".into(),
            achieved: vae_holdout_mse,
            threshold: config.pretrain.tau_vae,
        });
    }

    // Noise-predictor phase on frozen-VAE latents.
    let schedule = NoiseSchedule::linear(
        config.schedule.steps,
        config.schedule.beta_min,
        config.schedule.beta_max,
    )?;
    let mut latent_pool: Vec<Array3<f64>> = Vec::new();
    for &ci in &train_idx {
        let z = encode_rgb(&data.rgb[ci], &params, &config.model)?;
        for fi in 0..z.frame_count() {
            latent_pool.push(z.latents().index_axis(Axis(0), fi).to_owned());
        }
    }
    let mut rng = derive_rng(config.seed, "pretrain-denoiser-batch");
    let mut noise_rng = derive_rng(config.seed, "pretrain-denoiser-noise");
    let mut adam = Adam::new(config.pretrain.denoiser_lr);
    let latent_dim = latent_pool[0].dim();
    let denoiser_batch_loss = |params: &Params,
                               batch: &[usize],
                               steps: &[usize],
                               eps: &Array4<f64>,
                               latent_pool: &[Array3<f64>],
                               trainable: bool|
     -> (f64, BTreeMap<String, ArrayD<f64>>) {
        let b = batch.len();
        let mut x_t = Array4::zeros((b, latent_dim.0, latent_dim.1, latent_dim.2));
        for (slot, (&li, &t)) in batch.iter().zip(steps.iter()).enumerate() {
            let a = schedule.alpha(t).expect("step in range");
            let z = &latent_pool[li];
            let noise = eps.index_axis(Axis(0), slot);
            let mixed = z.mapv(|v| v * a.sqrt()) + noise.mapv(|v| v * (1.0 - a).sqrt());
            x_t.index_axis_mut(Axis(0), slot).assign(&mixed);
        }
        let groups: &[&str] = if trainable { &["denoiser."] } else { &[] };
        let mut ctx = GraphCtx::new(params, groups);
        let input = ctx.input(x_t.into_dyn());
        let eps_hat = denoiser_graph(&mut ctx, input, steps, config.model.time_embed_dim);
        let target = ctx.input(eps.clone().into_dyn());
        let loss = ctx.graph.mse_loss(eps_hat, target);
        let value = ctx.graph.scalar(loss);
        let by_name = if trainable {
            let grads = ctx.graph.backward(loss);
            ctx.grads_by_name(&grads)
        } else {
            BTreeMap::new()
        };
        (value, by_name)
    };

    for step in 0..config.pretrain.denoiser_steps {
        let b = config.pretrain.denoiser_batch;
        let batch: Vec<usize> = (0..b).map(|_| rng.gen_range(0..latent_pool.len())).collect();
        let steps: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=schedule.steps())).collect();
        let eps: Array4<f64> =
            normal_array(&mut noise_rng, &[b, latent_dim.0, latent_dim.1, latent_dim.2])
                .into_dimensionality()
                .expect("eps 4-d");
        let (value, by_name) = denoiser_batch_loss(&params, &batch, &steps, &eps, &latent_pool, true);
        adam.step(&mut params, &by_name)?;
        logger.log(&serde_json::json!({
            "stage": "pretrain", "phase": "denoiser", "step": step, "mse": value,
        }));
    }

    // Post-training noise-prediction error on a fresh seeded batch.
    let mut eval_rng = derive_rng(config.seed, "pretrain-denoiser-eval");
    let b = (config.pretrain.denoiser_batch * 4).min(latent_pool.len()).max(1);
    let batch: Vec<usize> = (0..b).map(|_| eval_rng.gen_range(0..latent_pool.len())).collect();
    let steps: Vec<usize> = (0..b).map(|_| eval_rng.gen_range(1..=schedule.steps())).collect();
    let eps: Array4<f64> =
        normal_array(&mut eval_rng, &[b, latent_dim.0, latent_dim.1, latent_dim.2])
            .into_dimensionality()
            .expect("eps 4-d");
    let (denoiser_eval_mse, _) = denoiser_batch_loss(&params, &batch, &steps, &eps, &latent_pool, false);
    logger.log(&serde_json::json!({
        "stage": "pretrain", "phase": "denoiser-eval", "eps_mse": denoiser_eval_mse,
    }));

    params.quantize_f32();
    Ok((
        params,
        PretrainReport {
            vae_holdout_mse,
            denoiser_eval_mse,
        },
    ))
}

/// Mean distillation loss (projected student vs teacher) over whole clips.
fn holdout_distill_loss(
    params: &Params,
    config: &ModelConfig,
    data: &LoadedDataset,
    indices: &[usize],
    teacher_cache: &[Array4<f64>],
) -> Result<f64> {
    let mut sse = 0.0;
    let mut count = 0.0;
    for &ci in indices {
        let student = student_projected_features(&data.rgb[ci], params, config)?;
        let diff = student.features() - &teacher_cache[ci];
        sse += diff.iter().map(|v| v * v).sum::<f64>();
        count += diff.len() as f64;
    }
    Ok(sse / count)
}

/// Masked-feature distillation of the student encoder against the frozen
/// teacher.
pub fn run_distill(
    config: &RunConfig,
    data: &LoadedDataset,
    logger: &mut JsonlLogger,
) -> Result<(Params, DistillReport)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("distill needs a dataset".into()));
    }
    data.check_uniform_dims()?;
    let (train_idx, holdout_idx) = holdout_split(data.len(), config.data.holdout_fraction, config.seed);

    let mut params = Params::new();
    init_teacher(&mut params, &config.model);
    init_student(&mut params, init_seed(config), &config.model);
    let teacher_hash = params.group_hash("teacher.");

    // The teacher is frozen, so its features are computed once.
    let teacher_cache: Vec<Array4<f64>> = data
        .rgb
        .par_iter()
        .map(|clip| {
            teacher_features(clip, &params, &config.model).map(|f| f.features().clone())
        })
        .collect::<Result<Vec<_>>>()?;

    let eval_idx: &[usize] = if holdout_idx.is_empty() { &train_idx } else { &holdout_idx };
    let initial = holdout_distill_loss(&params, &config.model, data, eval_idx, &teacher_cache)?;

    let pool = frame_pool(data, &train_idx);
    let mut rng = derive_rng(config.seed, "distill-batch");
    let mut adam = Adam::new(config.distill.lr);
    for step in 0..config.distill.steps {
        let frames: Vec<(usize, usize)> = (0..config.distill.batch)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect();

        let (h, w) = (data.rgb[0].height(), data.rgb[0].width());
        let mut masked = Array4::zeros((frames.len(), 3, h, w));
        let (fh, fw) = (
            teacher_cache[0].dim().2,
            teacher_cache[0].dim().3,
        );
        let cf = config.model.adapter.feature_channels;
        let mut teacher_batch = Array4::zeros((frames.len(), cf, fh, fw));
        for (slot, &(ci, fi)) in frames.iter().enumerate() {
            let frame_rgb = data.rgb[ci]
                .frame(fi)
                .slice(ndarray::s![..3, .., ..])
                .to_owned()
                .insert_axis(Axis(0));
            let single = FrameClip::from_rgb(frame_rgb).expect("frame clip");
            let mask_seed = derive_seed(config.seed, &format!("distill-mask-{step}-{slot}"));
            let m = masked_rgb_input(&single, config.model.adapter.mask_ratio, mask_seed, &config.model)?;
            masked
                .index_axis_mut(Axis(0), slot)
                .assign(&m.index_axis(Axis(0), 0));
            teacher_batch
                .index_axis_mut(Axis(0), slot)
                .assign(&teacher_cache[ci].index_axis(Axis(0), fi));
        }

        let mut ctx = GraphCtx::new(&params, &DISTILL_TRAINS);
        let (l_r_node, total_node) = distill_loss_graph(&mut ctx, &masked, &teacher_batch, config.loss_weights.w_r);
        let grads = ctx.graph.backward(total_node);
        let by_name = ctx.grads_by_name(&grads);
        let l_r = ctx.graph.scalar(l_r_node);
        adam.step(&mut params, &by_name)?;

        let report = total_loss(
            &LossComponents {
                l_r,
                ..Default::default()
            },
            &config.loss_weights,
            Stage::Distill,
        )?;
        let mut line = serde_json::to_value(report).expect("report serializes");
        line["stage"] = "distill".into();
        line["step"] = step.into();
        logger.log(&line);
    }

    let final_l_r = holdout_distill_loss(&params, &config.model, data, eval_idx, &teacher_cache)?;
    logger.log(&serde_json::json!({
        "stage": "distill", "phase": "eval",
        "initial_holdout_l_r": initial, "final_holdout_l_r": final_l_r,
    }));
    if final_l_r > config.distill.target_ratio * initial {
        return Err(Error::NonConvergence {
            metric: "holdout distillation loss".into(),
            achieved: final_l_r,
            threshold: config.distill.target_ratio * initial,
        });
    }
    debug_assert_eq!(teacher_hash, params.group_hash("teacher."));

    params.quantize_f32();
    Ok((
        params,
        DistillReport {
            initial_holdout_l_r: initial,
            final_holdout_l_r: final_l_r,
        },
    ))
}

/// Per-clip frozen precomputations for fine-tuning.
struct FrozenClipState {
    z: Array4<f64>,
    student_feats: Array4<f64>,
}

fn precompute_frozen(
    config: &RunConfig,
    data: &LoadedDataset,
    params: &Params,
) -> Result<Vec<FrozenClipState>> {
    data.rgb
        .par_iter()
        .map(|clip| {
            let z = encode_rgb(clip, params, &config.model)?;
            let feats = student_projected_features(clip, params, &config.model)?;
            Ok(FrozenClipState {
                z: z.latents().clone(),
                student_feats: feats.features().clone(),
            })
        })
        .collect()
}

/// The 4-channel transparency-encoder input for one training example;
/// `use_gt` resolves the `Mixed` coin for this example.
fn etr_input_for(clip_rgb: &FrameClip, alpha_gt: &FrameClip, prior: AlphaPrior, use_gt: bool) -> Array4<f64> {
    let ground_truth = match prior {
        AlphaPrior::GroundTruth => true,
        AlphaPrior::Ones => false,
        AlphaPrior::Mixed => use_gt,
    };
    if ground_truth {
        rgba_input(clip_rgb, alpha_gt)
    } else {
        let ones = FrameClip::from_alpha(Array3::ones((
            clip_rgb.frame_count(),
            clip_rgb.height(),
            clip_rgb.width(),
        )))
        .expect("ones clip");
        rgba_input(clip_rgb, &ones)
    }
}

/// Mean alpha reconstruction error of the inference path over clips.
fn holdout_alpha_mse(
    params: &Params,
    config: &RunConfig,
    data: &LoadedDataset,
    indices: &[usize],
) -> Result<f64> {
    let mut sse = 0.0;
    let mut count = 0.0;
    for &ci in indices {
        let pred = infer(&data.rgb[ci], params, config, &InferOptions::default())?;
        let diff = &pred.alpha() - &data.alpha[ci].alpha();
        sse += diff.iter().map(|v| v * v).sum::<f64>();
        count += diff.len() as f64;
    }
    Ok(sse / count)
}

/// Fine-tunes the transparency encoder/decoder, temporal stack, and latent
/// projection under the loss committee; `upstream` must hold the frozen
/// `vae`, `denoiser`, `teacher`, and `student` groups.
pub fn run_finetune(
    config: &RunConfig,
    data: &LoadedDataset,
    upstream: &Params,
    logger: &mut JsonlLogger,
) -> Result<(Params, FinetuneReport)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("finetune needs a dataset".into()));
    }
    data.check_uniform_dims()?;
    for group in ["vae.", "denoiser.", "teacher.", "student."] {
        if upstream.group_element_count(group) == 0 {
            return Err(Error::Dependency(format!(
                "finetune needs the {group} group from upstream checkpoints"
            )));
        }
    }
    let (train_idx, holdout_idx) = holdout_split(data.len(), config.data.holdout_fraction, config.seed);

    let mut params = upstream.clone();
    let seed = init_seed(config);
    init_tr_encoder(&mut params, seed, &config.model);
    init_tr_decoder(&mut params, seed, &config.model);
    init_temporal(&mut params, seed, &config.model, config.model.adapter.temporal_depth);
    init_projection(&mut params, seed, &config.model);

    let frozen_hashes: BTreeMap<String, String> = ["vae.", "denoiser.", "teacher.", "student."]
        .iter()
        .map(|g| (g.to_string(), params.group_hash(g)))
        .collect();

    let frozen_state = precompute_frozen(config, data, &params)?;

    let eval_idx: &[usize] = if holdout_idx.is_empty() { &train_idx } else { &holdout_idx };
    let initial_holdout_alpha_mse = holdout_alpha_mse(&params, config, data, eval_idx)?;

    let depth = config.model.adapter.temporal_depth;
    let groups = config.model.adapter.groups;
    let mut rng = derive_rng(config.seed, "finetune-batch");
    let mut adam = Adam::new(config.finetune.lr);
    for step in 0..config.finetune.steps {
        let batch: Vec<(usize, bool)> = (0..config.finetune.batch_clips)
            .map(|_| {
                let ci = train_idx[rng.gen_range(0..train_idx.len())];
                let use_gt = !rng.gen_bool(config.finetune.ones_fraction);
                (ci, use_gt)
            })
            .collect();

        // Per-clip losses and gradients in parallel; reduction stays in
        // batch order so results do not depend on scheduling.
        let results: Vec<Result<(BTreeMap<String, ArrayD<f64>>, LossComponents)>> = batch
            .par_iter()
            .map(|&(ci, use_gt)| {
                let rgb_gt = data.rgb[ci].rgb();
                let alpha_gt = data.alpha[ci].alpha();
                let etr = etr_input_for(&data.rgb[ci], &data.alpha[ci], config.finetune.alpha_prior, use_gt);
                let mut ctx = GraphCtx::new(&params, &FINETUNE_TRAINS);
                let nodes = finetune_committee_graph(
                    &mut ctx,
                    &rgb_gt,
                    &alpha_gt,
                    &etr,
                    &frozen_state[ci].z,
                    &frozen_state[ci].student_feats,
                    depth,
                    groups,
                    &config.loss_weights,
                );
                let grads = ctx.graph.backward(nodes.total);
                let by_name = ctx.grads_by_name(&grads);
                let components = LossComponents {
                    l_r: 0.0,
                    l_alpha: ctx.graph.scalar(nodes.l_alpha),
                    l_rgb: ctx.graph.scalar(nodes.l_rgb),
                    l_p: ctx.graph.scalar(nodes.l_p),
                };
                Ok((by_name, components))
            })
            .collect();

        let scale = 1.0 / batch.len() as f64;
        let mut summed: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        let mut mean_components = LossComponents::default();
        for result in results {
            let (by_name, components) = result?;
            for (name, grad) in by_name {
                match summed.get_mut(&name) {
                    Some(slot) => *slot += &grad,
                    None => {
                        summed.insert(name, grad);
                    }
                }
            }
            mean_components.l_alpha += components.l_alpha * scale;
            mean_components.l_rgb += components.l_rgb * scale;
            mean_components.l_p += components.l_p * scale;
        }
        for grad in summed.values_mut() {
            grad.mapv_inplace(|v| v * scale);
        }
        adam.step(&mut params, &summed)?;

        let report = total_loss(&mean_components, &config.loss_weights, Stage::Finetune)?;
        let mut line = serde_json::to_value(report).expect("report serializes");
        line["stage"] = "finetune".into();
        line["step"] = step.into();
        logger.log(&line);
    }

    for (group, hash) in &frozen_hashes {
        if &params.group_hash(group) != hash {
            return Err(Error::Validation(format!(
                "frozen group {group} changed during finetune"
            )));
        }
    }

    params.quantize_f32();
    let final_holdout_alpha_mse = holdout_alpha_mse(&params, config, data, eval_idx)?;
    logger.log(&serde_json::json!({
        "stage": "finetune", "phase": "eval",
        "initial_holdout_alpha_mse": initial_holdout_alpha_mse,
        "final_holdout_alpha_mse": final_holdout_alpha_mse,
    }));
    Ok((
        params,
        FinetuneReport {
            initial_holdout_alpha_mse,
            final_holdout_alpha_mse,
        },
    ))
}

fn make_metadata(
    config: &RunConfig,
    stage: &str,
    step: u64,
    params: &Params,
    trainable: &[&str],
    frozen: &[&str],
) -> CheckpointMetadata {
    CheckpointMetadata {
        stage: stage.to_string(),
        step,
        config_hash: config.config_hash(),
        model: config.model.clone(),
        trainable: trainable.iter().map(|s| s.to_string()).collect(),
        frozen: frozen.iter().map(|s| s.to_string()).collect(),
        group_hashes: params.all_group_hashes(),
    }
}

/// Runs pre-training end to end: dataset from the config, checkpoint and
/// log under `checkpoint_dir`.
pub fn stage_pretrain(config: &RunConfig) -> Result<PathBuf> {
    let data = LoadedDataset::load(&config.data.train_manifest)?;
    let mut logger = JsonlLogger::create(&config.log_path("pretrain"))?;
    let (params, _) = run_pretrain(config, &data, &mut logger)?;
    logger.flush();
    let meta = make_metadata(
        config,
        "pretrain",
        (config.pretrain.vae_steps + config.pretrain.denoiser_steps) as u64,
        &params,
        &["vae", "denoiser"],
        &[],
    );
    let path = config.checkpoint_path("pretrain");
    save_checkpoint(&path, &params, &meta)?;
    Ok(path)
}

/// Runs distillation end to end.
pub fn stage_distill(config: &RunConfig) -> Result<PathBuf> {
    let data = LoadedDataset::load(&config.data.train_manifest)?;
    let mut logger = JsonlLogger::create(&config.log_path("distill"))?;
    let (params, _) = run_distill(config, &data, &mut logger)?;
    logger.flush();
    let meta = make_metadata(
        config,
        "distill",
        config.distill.steps as u64,
        &params,
        &["student"],
        &["teacher"],
    );
    let path = config.checkpoint_path("distill");
    save_checkpoint(&path, &params, &meta)?;
    Ok(path)
}

/// Model shapes must match between a checkpoint and the current config;
/// the temporal depth is finetune-stage state and may differ.
pub fn check_model_compat(meta: &CheckpointMetadata, config: &ModelConfig) -> Result<()> {
    let mut a = meta.model.clone();
    let mut b = config.clone();
    a.adapter.temporal_depth = 0;
    b.adapter.temporal_depth = 0;
    if a != b {
        return Err(Error::Compatibility(format!(
            "checkpoint from stage {} was built with a different model configuration",
            meta.stage
        )));
    }
    Ok(())
}

/// Loads the pretrain and distill checkpoints into one store.
pub fn load_upstream(config: &RunConfig) -> Result<Params> {
    let mut upstream = Params::new();
    for stage in ["pretrain", "distill"] {
        let path = config.checkpoint_path(stage);
        if !path.is_file() {
            return Err(Error::Dependency(format!(
                "missing {stage} checkpoint at {}",
                path.display()
            )));
        }
        let (params, meta) = load_checkpoint(&path)?;
        check_model_compat(&meta, &config.model)?;
        upstream.absorb(params);
    }
    Ok(upstream)
}

/// Runs fine-tuning end to end on top of the pretrain/distill checkpoints.
pub fn stage_finetune(config: &RunConfig) -> Result<PathBuf> {
    let upstream = load_upstream(config)?;
    let data = LoadedDataset::load(&config.data.train_manifest)?;
    let mut logger = JsonlLogger::create(&config.log_path("finetune"))?;
    let (params, _) = run_finetune(config, &data, &upstream, &mut logger)?;
    logger.flush();
    let meta = make_metadata(
        config,
        "finetune",
        config.finetune.steps as u64,
        &params,
        &["tr_enc", "tr_dec", "temporal", "proj"],
        &["vae", "denoiser", "teacher", "student"],
    );
    let path = config.checkpoint_path("finetune");
    save_checkpoint(&path, &params, &meta)?;
    Ok(path)
}

/// Inference switches: the adapter guidance can be zeroed, and the adjusted
/// latent can optionally be pushed through the reverse diffusion process
/// (forward-noised to the last step, then ancestrally denoised) before
/// decoding.
#[derive(Debug, Clone)]
pub struct InferOptions {
    pub with_sampling: bool,
    pub guidance: bool,
    pub sample_seed: u64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            with_sampling: false,
            guidance: true,
            sample_seed: 0,
        }
    }
}

/// Predicts the alpha clip for an RGB clip: encode, offset from the
/// transparency encoder under an all-ones alpha prior, adapter guidance,
/// latent adjustment, transparent decode.
pub fn infer(
    rgb: &FrameClip,
    params: &Params,
    config: &RunConfig,
    options: &InferOptions,
) -> Result<FrameClip> {
    for group in ["vae.", "tr_enc.", "tr_dec.", "student.", "proj."] {
        if params.group_element_count(group) == 0 {
            return Err(Error::Dependency(format!(
                "inference needs the {group} parameter group; run the training stages first"
            )));
        }
    }
    let z = encode_rgb(rgb, params, &config.model)?;
    let ones = FrameClip::from_alpha(Array3::ones((
        rgb.frame_count(),
        rgb.height(),
        rgb.width(),
    )))?;
    let offset = encode_transparency(rgb, &ones, params, &config.model)?;
    let guidance = if options.guidance {
        adapter_forward(rgb, &config.model, params)?
    } else {
        LatentOffset::zeros(z.dim())
    };
    let mut z_adj = adjust_latent(&z, &offset, &guidance)?;

    if options.with_sampling {
        let schedule = NoiseSchedule::linear(
            config.schedule.steps,
            config.schedule.beta_min,
            config.schedule.beta_max,
        )?;
        let mut noise_rng = derive_rng(options.sample_seed, "infer-noise");
        let eps: Array4<f64> = normal_array(
            &mut noise_rng,
            &[z_adj.dim().0, z_adj.dim().1, z_adj.dim().2, z_adj.dim().3],
        )
        .into_dimensionality()
        .expect("eps 4-d");
        let x_t = forward_noise(z_adj.latents(), schedule.steps(), &eps, &schedule)?;
        let denoised = denoise_from(
            x_t,
            schedule.steps(),
            &schedule,
            |x, t| predict_noise(x, t, params, &config.model),
            options.sample_seed,
        )?;
        z_adj = LatentClip::new(denoised, z.downsample())?;
    }

    let (_, alpha_hat) = decode_transparent(&z_adj, params, &config.model)?;
    Ok(alpha_hat)
}

/// One evaluated clip: its id plus the metric bundle.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(flatten)]
    pub report: ClipReport,
}

/// Aggregate over evaluated clips. PSNR means skip the clips whose own mean
/// is the infinity sentinel, counting them separately; flicker and hole
/// residue average over the clips where they are defined.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub clips_evaluated: usize,
    pub skipped: Vec<String>,
    pub psnr_mean: f64,
    pub psnr_inf_clips: usize,
    pub ssim_mean: f64,
    pub flicker_mean: Option<f64>,
    pub hole_residue_mean: Option<f64>,
    pub hole_clips: usize,
}

/// Means over per-clip reports.
pub fn aggregate_reports(rows: &[EvalRow], skipped: Vec<String>) -> Result<EvalSummary> {
    if rows.is_empty() {
        return Err(Error::Validation(
            "no clips evaluated: empty intersection of predictions and manifest".into(),
        ));
    }
    let finite: Vec<f64> = rows
        .iter()
        .map(|r| r.report.psnr_mean)
        .filter(|v| v.is_finite())
        .collect();
    let psnr_inf_clips = rows.len() - finite.len();
    let psnr_mean = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let ssim_mean = rows.iter().map(|r| r.report.ssim_mean).sum::<f64>() / rows.len() as f64;
    let flickers: Vec<f64> = rows.iter().filter_map(|r| r.report.flicker).collect();
    let flicker_mean = if flickers.is_empty() {
        None
    } else {
        Some(flickers.iter().sum::<f64>() / flickers.len() as f64)
    };
    let holes: Vec<f64> = rows.iter().filter_map(|r| r.report.hole_residue).collect();
    let hole_clips = holes.len();
    let hole_residue_mean = if holes.is_empty() {
        None
    } else {
        Some(holes.iter().sum::<f64>() / holes.len() as f64)
    };
    Ok(EvalSummary {
        clips_evaluated: rows.len(),
        skipped,
        psnr_mean,
        psnr_inf_clips,
        ssim_mean,
        flicker_mean,
        hole_residue_mean,
        hole_clips,
    })
}

/// Evaluates predicted alpha clips under `pred_root/{id}/` against the
/// ground truth listed in a manifest (frame dirs resolved against
/// `gt_root`). Unreadable or missing prediction clips are skipped and
/// listed in the summary.
pub fn evaluate_dirs(
    pred_root: &Path,
    gt_root: &Path,
    manifest_path: &Path,
) -> Result<(Vec<EvalRow>, EvalSummary)> {
    let records = load_manifest(manifest_path)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for record in &records {
        let pred_dir = pred_root.join(&record.id);
        let pred = match load_clip(&pred_dir) {
            Ok(clip) => clip,
            Err(_) => {
                skipped.push(record.id.clone());
                continue;
            }
        };
        let clip_root = gt_root.join(
            Path::new(&record.frames_dir)
                .parent()
                .unwrap_or_else(|| Path::new("")),
        );
        let gt_alpha = load_clip(clip_root.join("alpha"))?;
        let holes_dir = clip_root.join("holes");
        let holes = if holes_dir.is_dir() {
            Some(load_clip(&holes_dir)?)
        } else {
            None
        };
        let report = clip_metrics_with_holes(&pred, &gt_alpha, holes.as_ref())?;
        rows.push(EvalRow {
            id: record.id.clone(),
            report,
        });
    }
    let summary = aggregate_reports(&rows, skipped)?;
    Ok((rows, summary))
}

/// Runs inference over every holdout clip of a loaded dataset and scores it.
pub fn evaluate_holdout(
    params: &Params,
    config: &RunConfig,
    data: &LoadedDataset,
    indices: &[usize],
    options: &InferOptions,
) -> Result<(Vec<EvalRow>, EvalSummary)> {
    let rows: Vec<Result<EvalRow>> = indices
        .par_iter()
        .map(|&ci| {
            let pred = infer(&data.rgb[ci], params, config, options)?;
            let report = clip_metrics_with_holes(&pred, &data.alpha[ci], data.holes[ci].as_ref())?;
            Ok(EvalRow {
                id: data.records[ci].id.clone(),
                report,
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = aggregate_reports(&rows, Vec::new())?;
    Ok((rows, summary))
}

/// One row of the depth-ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub depth: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub flicker_mean: Option<f64>,
    pub hole_residue_mean: Option<f64>,
}

/// Re-runs fine-tuning at each depth with the same seed and upstream
/// checkpoints, then scores the holdout split. Writes one checkpoint per
/// depth next to the stage checkpoints.
pub fn ablate_depth(config: &RunConfig, depths: &[usize]) -> Result<Vec<AblationRow>> {
    if depths.is_empty() {
        return Err(Error::Parameter("ablation needs at least one depth".into()));
    }
    let upstream = load_upstream(config)?;
    let data = LoadedDataset::load(&config.data.train_manifest)?;
    let (_, holdout_idx) = holdout_split(data.len(), config.data.holdout_fraction, config.seed);
    let (train_idx, _) = holdout_split(data.len(), config.data.holdout_fraction, config.seed);
    let eval_idx = if holdout_idx.is_empty() { train_idx } else { holdout_idx };

    let mut rows = Vec::new();
    for &depth in depths {
        let mut cfg = config.clone();
        cfg.model.adapter.temporal_depth = depth;
        let mut logger = JsonlLogger::create(&config.log_path(&format!("ablate_depth{depth}")))?;
        let (params, _) = run_finetune(&cfg, &data, &upstream, &mut logger)?;
        logger.flush();
        let meta = make_metadata(
            &cfg,
            "finetune",
            cfg.finetune.steps as u64,
            &params,
            &["tr_enc", "tr_dec", "temporal", "proj"],
            &["vae", "denoiser", "teacher", "student"],
        );
        save_checkpoint(
            &config.checkpoint_dir.join(format!("ablate_depth{depth}.ckpt")),
            &params,
            &meta,
        )?;
        let (_, summary) = evaluate_holdout(&params, &cfg, &data, &eval_idx, &InferOptions::default())?;
        rows.push(AblationRow {
            depth,
            psnr_mean: summary.psnr_mean,
            ssim_mean: summary.ssim_mean,
            flicker_mean: summary.flicker_mean,
            hole_residue_mean: summary.hole_residue_mean,
        });
    }
    Ok(rows)
}
