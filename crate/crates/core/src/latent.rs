//! Latent transparency: a small frozen VAE maps RGB clips to a latent space,
//! a transparency encoder turns (RGB, alpha) into a latent offset, and a
//! transparent decoder reconstructs RGB plus alpha from the adjusted latent
//! `z + offset + guidance`.
//!
//! The offset encoder's final convolution and the adapter's latent
//! projection are zero-initialized, so an untrained model leaves the latent
//! distribution exactly untouched.

use crate::clip::FrameClip;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{init_conv2d, GraphCtx, Init, Params};
use ndarray::{Array3, Array4};

/// Per-frame latent vectors `(N, C_z, h_z, w_z)` with the spatial
/// downsample factor that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    latents: Array4<f64>,
    downsample: usize,
}

impl LatentClip {
    pub fn new(latents: Array4<f64>, downsample: usize) -> Result<Self> {
        if let Some(v) = latents.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite latent value {v}")));
        }
        Ok(Self {
            latents,
            downsample,
        })
    }

    pub fn latents(&self) -> &Array4<f64> {
        &self.latents
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn frame_count(&self) -> usize {
        self.latents.dim().0
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.latents.dim()
    }
}

/// A latent-space offset with the same shape as a [`LatentClip`]. The zero
/// offset is representable exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentOffset {
    offsets: Array4<f64>,
}

impl LatentOffset {
    pub fn new(offsets: Array4<f64>) -> Result<Self> {
        if let Some(v) = offsets.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite offset value {v}")));
        }
        Ok(Self { offsets })
    }

    pub fn zeros(dim: (usize, usize, usize, usize)) -> Self {
        Self {
            offsets: Array4::zeros(dim),
        }
    }

    pub fn offsets(&self) -> &Array4<f64> {
        &self.offsets
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.offsets.dim()
    }
}

/// Installs the VAE parameters (`vae.` group: encoder + decoder).
pub fn init_vae(params: &mut Params, seed: u64, config: &ModelConfig) {
    let (v0, v1) = config.vae_channels;
    let (d0, d1, d2) = config.vae_decoder_channels;
    let cz = config.latent_channels;
    init_conv2d(params, seed, "vae.enc1", 3, v0, 3, Init::He, 0.0);
    init_conv2d(params, seed, "vae.enc2", v0, v1, 3, Init::He, 0.0);
    init_conv2d(params, seed, "vae.enc3", v1, cz, 3, Init::He, 0.0);
    init_conv2d(params, seed, "vae.dec1", cz, d0, 3, Init::He, 0.0);
    init_conv2d(params, seed, "vae.dec2", d0, d1, 3, Init::He, 0.0);
    init_conv2d(params, seed, "vae.dec3", d1, d2, 3, Init::He, 0.0);
    // Start decoded pixels mid-range so the output clamp has gradient.
    init_conv2d(params, seed, "vae.dec4", d2, 3, 3, Init::He, 0.5);
}

/// Installs the transparency encoder (`tr_enc.` group). The output layer is
/// zero-initialized: the untrained offset is exactly zero.
pub fn init_tr_encoder(params: &mut Params, seed: u64, config: &ModelConfig) {
    let (t0, t1) = config.tr_encoder_channels;
    let cz = config.latent_channels;
    init_conv2d(params, seed, "tr_enc.c1", 4, t0, 3, Init::He, 0.0);
    init_conv2d(params, seed, "tr_enc.c2", t0, t1, 3, Init::He, 0.0);
    init_conv2d(params, seed, "tr_enc.c3", t1, cz, 3, Init::Zero, 0.0);
}

/// Installs the transparent decoder (`tr_dec.` group) with its RGB and
/// alpha heads.
pub fn init_tr_decoder(params: &mut Params, seed: u64, config: &ModelConfig) {
    let (d0, d1, d2) = config.tr_decoder_channels;
    let cz = config.latent_channels;
    init_conv2d(params, seed, "tr_dec.c1", cz, d0, 3, Init::He, 0.0);
    init_conv2d(params, seed, "tr_dec.c2", d0, d1, 3, Init::He, 0.0);
    init_conv2d(params, seed, "tr_dec.c3", d1, d2, 3, Init::He, 0.0);
    init_conv2d(params, seed, "tr_dec.rgb", d2, 3, 3, Init::He, 0.5);
    init_conv2d(params, seed, "tr_dec.alpha", d2, 1, 3, Init::He, 0.0);
}

/// VAE encoder graph: `(N,3,H,W)` to `(N,C_z,H/4,W/4)` (deterministic mean
/// branch; no sampling).
pub fn vae_encode_graph(ctx: &mut GraphCtx, rgb: crate::autograd::NodeId) -> crate::autograd::NodeId {
    let h1 = ctx.conv2d(rgb, "vae.enc1", 2, 1);
    let h1 = ctx.graph.relu(h1);
    let h2 = ctx.conv2d(h1, "vae.enc2", 2, 1);
    let h2 = ctx.graph.relu(h2);
    ctx.conv2d(h2, "vae.enc3", 1, 1)
}

/// VAE decoder graph: latent to `(N,3,H,W)` clamped to `[0,1]`.
pub fn vae_decode_graph(ctx: &mut GraphCtx, z: crate::autograd::NodeId) -> crate::autograd::NodeId {
    let h = ctx.conv2d(z, "vae.dec1", 1, 1);
    let h = ctx.graph.relu(h);
    let h = ctx.graph.upsample2x(h);
    let h = ctx.conv2d(h, "vae.dec2", 1, 1);
    let h = ctx.graph.relu(h);
    let h = ctx.graph.upsample2x(h);
    let h = ctx.conv2d(h, "vae.dec3", 1, 1);
    let h = ctx.graph.relu(h);
    let rgb = ctx.conv2d(h, "vae.dec4", 1, 1);
    ctx.graph.clamp01(rgb)
}

/// Transparency encoder graph: `(N,4,H,W)` RGBA to a latent-shaped offset.
pub fn tr_encode_graph(ctx: &mut GraphCtx, rgba: crate::autograd::NodeId) -> crate::autograd::NodeId {
    let h = ctx.conv2d(rgba, "tr_enc.c1", 2, 1);
    let h = ctx.graph.relu(h);
    let h = ctx.conv2d(h, "tr_enc.c2", 2, 1);
    let h = ctx.graph.relu(h);
    ctx.conv2d(h, "tr_enc.c3", 1, 1)
}

/// Transparent decoder graph: latent to `(rgb clamped, alpha sigmoid)`.
pub fn tr_decode_graph(
    ctx: &mut GraphCtx,
    z: crate::autograd::NodeId,
) -> (crate::autograd::NodeId, crate::autograd::NodeId) {
    let h = ctx.conv2d(z, "tr_dec.c1", 1, 1);
    let h = ctx.graph.relu(h);
    let h = ctx.graph.upsample2x(h);
    let h = ctx.conv2d(h, "tr_dec.c2", 1, 1);
    let h = ctx.graph.relu(h);
    let h = ctx.graph.upsample2x(h);
    let h = ctx.conv2d(h, "tr_dec.c3", 1, 1);
    let h = ctx.graph.relu(h);
    let rgb = ctx.conv2d(h, "tr_dec.rgb", 1, 1);
    let rgb = ctx.graph.clamp01(rgb);
    let alpha = ctx.conv2d(h, "tr_dec.alpha", 1, 1);
    let alpha = ctx.graph.sigmoid(alpha);
    (rgb, alpha)
}

fn check_divisible(clip: &FrameClip, context: &str) -> Result<()> {
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

/// Encodes a clip's RGB planes into per-frame latents (frozen, no
/// sampling branch).
pub fn encode_rgb(rgb: &FrameClip, params: &Params, config: &ModelConfig) -> Result<LatentClip> {
    check_divisible(rgb, "encode_rgb")?;
    let mut ctx = GraphCtx::inference(params);
    let input = ctx.input(rgb.rgb().into_dyn());
    let z = vae_encode_graph(&mut ctx, input);
    let latents = ctx
        .graph
        .value(z)
        .clone()
        .into_dimensionality()
        .expect("latent 4-d");
    let _ = config;
    LatentClip::new(latents, ModelConfig::DOWNSAMPLE)
}

/// Decodes latents back to an opaque RGB clip (values clamped to `[0,1]`,
/// alpha forced to 1).
pub fn decode_rgb(z: &LatentClip, params: &Params, config: &ModelConfig) -> Result<FrameClip> {
    let (_, c, _, _) = z.dim();
    if c != config.latent_channels {
        return Err(Error::shape(
            "decode_rgb",
            format!("{} latent channels", config.latent_channels),
            c,
        ));
    }
    let mut ctx = GraphCtx::inference(params);
    let input = ctx.input(z.latents().clone().into_dyn());
    let rgb = vae_decode_graph(&mut ctx, input);
    let rgb: Array4<f64> = ctx
        .graph
        .value(rgb)
        .clone()
        .into_dimensionality()
        .expect("rgb 4-d");
    FrameClip::from_rgb(rgb)
}

/// Encodes RGB plus an alpha plane into a latent offset. The two clips must
/// agree on frame count and dimensions; the alpha input is the `A` plane of
/// `alpha`.
pub fn encode_transparency(
    rgb: &FrameClip,
    alpha: &FrameClip,
    params: &Params,
    config: &ModelConfig,
) -> Result<LatentOffset> {
    rgb.check_same_shape(alpha, "encode_transparency")?;
    check_divisible(rgb, "encode_transparency")?;
    let _ = config;
    let mut ctx = GraphCtx::inference(params);
    let input = ctx.input(rgba_input(rgb, alpha).into_dyn());
    let dz = tr_encode_graph(&mut ctx, input);
    let offsets = ctx
        .graph
        .value(dz)
        .clone()
        .into_dimensionality()
        .expect("offset 4-d");
    LatentOffset::new(offsets)
}

/// Stacks RGB planes with an alpha plane into the 4-channel encoder input.
pub fn rgba_input(rgb: &FrameClip, alpha: &FrameClip) -> Array4<f64> {
    let (n, h, w) = (rgb.frame_count(), rgb.height(), rgb.width());
    let mut out = Array4::zeros((n, 4, h, w));
    out.slice_mut(ndarray::s![.., ..3, .., ..]).assign(&rgb.rgb());
    out.index_axis_mut(ndarray::Axis(1), 3).assign(&alpha.alpha());
    out
}

/// Adjusted latent `(z + offset) + guidance`, elementwise in that fixed
/// order. Zero offset and zero guidance return `z` exactly.
pub fn adjust_latent(
    z: &LatentClip,
    offset: &LatentOffset,
    guidance: &LatentOffset,
) -> Result<LatentClip> {
    if z.dim() != offset.dim() || z.dim() != guidance.dim() {
        return Err(Error::shape(
            "adjust_latent",
            format!("{:?}", z.dim()),
            format!("offset {:?}, guidance {:?}", offset.dim(), guidance.dim()),
        ));
    }
    let adjusted = &(z.latents() + offset.offsets()) + guidance.offsets();
    LatentClip::new(adjusted, z.downsample())
}

/// Decodes an adjusted latent into reconstructed RGB (clamped, opaque) and
/// alpha (sigmoid-bounded) clips.
pub fn decode_transparent(
    z_adj: &LatentClip,
    params: &Params,
    config: &ModelConfig,
) -> Result<(FrameClip, FrameClip)> {
    let (_, c, _, _) = z_adj.dim();
    if c != config.latent_channels {
        return Err(Error::shape(
            "decode_transparent",
            format!("{} latent channels", config.latent_channels),
            c,
        ));
    }
    let mut ctx = GraphCtx::inference(params);
    let input = ctx.input(z_adj.latents().clone().into_dyn());
    let (rgb, alpha) = tr_decode_graph(&mut ctx, input);
    let rgb: Array4<f64> = ctx
        .graph
        .value(rgb)
        .clone()
        .into_dimensionality()
        .expect("rgb 4-d");
    let alpha4: Array4<f64> = ctx
        .graph
        .value(alpha)
        .clone()
        .into_dimensionality()
        .expect("alpha 4-d");
    let (n, _, h, w) = alpha4.dim();
    let alpha3: Array3<f64> = alpha4
        .into_shape_with_order((n, h, w))
        .expect("alpha squeeze");
    Ok((FrameClip::from_rgb(rgb)?, FrameClip::from_alpha(alpha3)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_params() -> (Params, ModelConfig) {
        let config = ModelConfig::tiny();
        let mut params = Params::new();
        init_vae(&mut params, 11, &config);
        init_tr_encoder(&mut params, 11, &config);
        init_tr_decoder(&mut params, 11, &config);
        (params, config)
    }

    fn gradient_clip(n: usize, h: usize, w: usize) -> FrameClip {
        let rgb = Array4::from_shape_fn((n, 3, h, w), |(f, c, y, x)| {
            ((f * 3 + c) as f64 * 0.1 + (y + x) as f64 / (h + w) as f64).fract()
        });
        FrameClip::from_rgb(rgb).unwrap()
    }

    #[test]
    fn encode_shape_contract() {
        let (params, config) = tiny_params();
        let clip = gradient_clip(1, 16, 16);
        let z = encode_rgb(&clip, &params, &config).unwrap();
        assert_eq!(z.dim(), (1, 4, 4, 4));
        assert_eq!(z.downsample(), 4);
    }

    #[test]
    fn encode_rejects_indivisible_dims() {
        let (params, config) = tiny_params();
        let clip = gradient_clip(1, 10, 16);
        assert!(matches!(
            encode_rgb(&clip, &params, &config),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn identical_frames_encode_identically() {
        let (params, config) = tiny_params();
        let one = gradient_clip(1, 16, 16);
        let mut data = Array4::zeros((2, 4, 16, 16));
        data.index_axis_mut(ndarray::Axis(0), 0).assign(&one.frame(0));
        data.index_axis_mut(ndarray::Axis(0), 1).assign(&one.frame(0));
        let two = FrameClip::new(data).unwrap();
        let z = encode_rgb(&two, &params, &config).unwrap();
        assert_eq!(
            z.latents().index_axis(ndarray::Axis(0), 0),
            z.latents().index_axis(ndarray::Axis(0), 1)
        );
    }

    #[test]
    fn decode_is_deterministic_and_sized() {
        let (params, config) = tiny_params();
        let z = LatentClip::new(Array4::zeros((3, 4, 4, 4)), 4).unwrap();
        let a = decode_rgb(&z, &params, &config).unwrap();
        let b = decode_rgb(&z, &params, &config).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.frame_count(), 3);
        assert_eq!((a.height(), a.width()), (16, 16));
        assert!(a.alpha().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn untrained_offset_is_exactly_zero() {
        let (params, config) = tiny_params();
        let rgb = gradient_clip(2, 16, 16);
        let alpha = FrameClip::from_alpha(Array3::ones((2, 16, 16))).unwrap();
        let dz = encode_transparency(&rgb, &alpha, &params, &config).unwrap();
        assert!(dz.offsets().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opaque_alpha_gives_finite_offset() {
        let (mut params, config) = tiny_params();
        // Randomize the zero-initialized output layer to get a nonzero path.
        let mut w = params.expect("tr_enc.c3.weight").clone();
        w.mapv_inplace(|_| 0.05);
        params.set("tr_enc.c3.weight", w);
        let rgb = gradient_clip(2, 16, 16);
        let alpha = FrameClip::from_alpha(Array3::ones((2, 16, 16))).unwrap();
        let dz = encode_transparency(&rgb, &alpha, &params, &config).unwrap();
        assert!(dz.offsets().iter().all(|v| v.is_finite()));
        assert!(dz.offsets().iter().any(|&v| v != 0.0));
        let again = encode_transparency(&rgb, &alpha, &params, &config).unwrap();
        assert_eq!(dz.offsets(), again.offsets());
    }

    #[test]
    fn encode_transparency_frame_count_mismatch() {
        let (params, config) = tiny_params();
        let rgb = gradient_clip(2, 16, 16);
        let alpha = FrameClip::from_alpha(Array3::ones((3, 16, 16))).unwrap();
        assert!(matches!(
            encode_transparency(&rgb, &alpha, &params, &config),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn adjust_latent_identity_and_arithmetic() {
        let z = LatentClip::new(Array4::ones((1, 4, 2, 2)), 4).unwrap();
        let zero = LatentOffset::zeros((1, 4, 2, 2));
        let same = adjust_latent(&z, &zero, &zero).unwrap();
        assert_eq!(same.latents(), z.latents());

        let dz = LatentOffset::new(Array4::from_elem((1, 4, 2, 2), 0.5)).unwrap();
        let g = LatentOffset::new(Array4::from_elem((1, 4, 2, 2), -0.25)).unwrap();
        let adj = adjust_latent(&z, &dz, &g).unwrap();
        assert!(adj.latents().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn adjust_latent_shape_mismatch() {
        let z = LatentClip::new(Array4::ones((1, 4, 2, 2)), 4).unwrap();
        let bad = LatentOffset::zeros((1, 4, 3, 3));
        let zero = LatentOffset::zeros((1, 4, 2, 2));
        assert!(matches!(
            adjust_latent(&z, &bad, &zero),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn decode_transparent_shapes_and_bounds() {
        let (params, config) = tiny_params();
        let z = LatentClip::new(
            Array4::from_shape_fn((2, 4, 4, 4), |(n, c, y, x)| {
                ((n + c + y + x) as f64 * 0.37).sin()
            }),
            4,
        )
        .unwrap();
        let (rgb, alpha) = decode_transparent(&z, &params, &config).unwrap();
        assert_eq!(rgb.frame_count(), 2);
        assert_eq!((rgb.height(), rgb.width()), (16, 16));
        assert_eq!(alpha.frame_count(), 2);
        assert!(alpha.alpha().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (rgb2, alpha2) = decode_transparent(&z, &params, &config).unwrap();
        assert_eq!(rgb.data(), rgb2.data());
        assert_eq!(alpha.data(), alpha2.data());
    }

    #[test]
    fn decoders_are_total_on_large_latents() {
        let (params, config) = tiny_params();
        let z = LatentClip::new(
            Array4::from_shape_fn((1, 4, 4, 4), |(_, c, y, x)| {
                10.0 * ((c * 16 + y * 4 + x) as f64 * 0.61).sin()
            }),
            4,
        )
        .unwrap();
        let rgb = decode_rgb(&z, &params, &config).unwrap();
        assert!(rgb.data().iter().all(|v| v.is_finite()));
        let (r2, a2) = decode_transparent(&z, &params, &config).unwrap();
        assert!(r2.data().iter().all(|v| v.is_finite()));
        assert!(a2.data().iter().all(|v| v.is_finite()));
    }
}
