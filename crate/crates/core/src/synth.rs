//! Procedural sticker clips with exact ground-truth alpha.
//!
//! Sprites (disks, rings, rounded rects) move over a flat background color.
//! Rings and hollow rounded rects enclose a hole whose interior shows the
//! background color while its ground-truth alpha is 0 — the case where
//! color-based matting is ambiguous by construction. Coverage is computed
//! with 4x4 supersampling, so boundaries carry fractional alpha.

use crate::clip::FrameClip;
use crate::dataset::{save_clip, save_manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpriteShape {
    Disk,
    Ring,
    RoundedRect,
}

impl SpriteShape {
    pub fn name(&self) -> &'static str {
        match self {
            SpriteShape::Disk => "disk",
            SpriteShape::Ring => "ring",
            SpriteShape::RoundedRect => "rounded-rect",
        }
    }
}

/// Sinusoidal vertical offset added on top of the linear motion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Wobble {
    /// Peak offset in pixels.
    pub amplitude: f64,
    /// Period in frames.
    pub period: f64,
}

/// One sprite: geometry, color, and motion.
///
/// `semi_open` must be `true` for rings (a ring always encloses a hole) and
/// may be `true` for rounded rects, which then carve an inner hole of wall
/// thickness `thickness`; disks are always solid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpriteSpec {
    pub shape: SpriteShape,
    pub fill_color: [f64; 3],
    /// Start position of the center in pixels (x, y).
    pub center: (f64, f64),
    /// Outer radius (disk, ring) or half-width (rounded rect).
    pub size: f64,
    /// Rounded rect half-height = `size * aspect`; ignored otherwise.
    pub aspect: f64,
    /// Wall thickness of rings and hollow rounded rects, in pixels.
    pub thickness: f64,
    /// Corner radius of rounded rects, in pixels.
    pub corner_radius: f64,
    /// Linear velocity in pixels per frame (x, y).
    pub velocity: (f64, f64),
    pub wobble: Option<Wobble>,
    pub semi_open: bool,
}

impl SpriteSpec {
    /// Center position at a given frame.
    pub fn position(&self, frame: usize) -> (f64, f64) {
        let t = frame as f64;
        let x = self.center.0 + self.velocity.0 * t;
        let mut y = self.center.1 + self.velocity.1 * t;
        if let Some(w) = self.wobble {
            y += w.amplitude * (2.0 * std::f64::consts::PI * t / w.period).sin();
        }
        (x, y)
    }

    /// Half-extents of the sprite's bounding box.
    fn extent(&self) -> (f64, f64) {
        match self.shape {
            SpriteShape::Disk | SpriteShape::Ring => (self.size, self.size),
            SpriteShape::RoundedRect => (self.size, self.size * self.aspect),
        }
    }

    /// (body, hole) membership of a point relative to the sprite center.
    fn classify(&self, dx: f64, dy: f64) -> (bool, bool) {
        match self.shape {
            SpriteShape::Disk => {
                let r = (dx * dx + dy * dy).sqrt();
                (r <= self.size, false)
            }
            SpriteShape::Ring => {
                let r = (dx * dx + dy * dy).sqrt();
                let inner = self.size - self.thickness;
                (r <= self.size && r >= inner, r < inner)
            }
            SpriteShape::RoundedRect => {
                let outer = rounded_rect_sdf(dx, dy, self.size, self.size * self.aspect, self.corner_radius);
                if !self.semi_open {
                    return (outer <= 0.0, false);
                }
                let hx = self.size - self.thickness;
                let hy = self.size * self.aspect - self.thickness;
                let rc = (self.corner_radius - self.thickness).max(0.0);
                let inner = rounded_rect_sdf(dx, dy, hx, hy, rc);
                (outer <= 0.0 && inner > 0.0, inner <= 0.0)
            }
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        match self.shape {
            SpriteShape::Disk => {
                if self.semi_open {
                    return Err(Error::Spec(format!("sprite {index}: a disk cannot be semi-open")));
                }
            }
            SpriteShape::Ring => {
                if !self.semi_open {
                    return Err(Error::Spec(format!(
                        "sprite {index}: a ring always encloses a hole; set semi_open"
                    )));
                }
                if self.thickness <= 0.0 || self.thickness >= self.size {
                    return Err(Error::Spec(format!(
                        "sprite {index}: ring thickness {} outside (0, {})",
                        self.thickness, self.size
                    )));
                }
            }
            SpriteShape::RoundedRect => {
                if self.semi_open {
                    let hy = self.size * self.aspect - self.thickness;
                    if self.thickness <= 0.0 || self.size - self.thickness <= 0.0 || hy <= 0.0 {
                        return Err(Error::Spec(format!(
                            "sprite {index}: hollow rect wall thickness {} leaves no interior",
                            self.thickness
                        )));
                    }
                }
            }
        }
        if self.size <= 0.0 {
            return Err(Error::Spec(format!("sprite {index}: size must be positive")));
        }
        Ok(())
    }
}

/// Signed distance to a rounded rectangle with half-extents (hx, hy) and
/// corner radius rc; negative inside.
fn rounded_rect_sdf(dx: f64, dy: f64, hx: f64, hy: f64, rc: f64) -> f64 {
    let qx = dx.abs() - (hx - rc);
    let qy = dy.abs() - (hy - rc);
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0) - rc
}

/// Full description of one clip to render.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipSpec {
    pub height: usize,
    pub width: usize,
    pub frame_count: usize,
    pub background_color: [f64; 3],
    pub sprites: Vec<SpriteSpec>,
    pub seed: u64,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::Spec(format!(
                "frame_count {} < 2; animation needs at least two frames",
                self.frame_count
            )));
        }
        if self.sprites.is_empty() {
            return Err(Error::Spec("at least one sprite required".into()));
        }
        for (i, sprite) in self.sprites.iter().enumerate() {
            sprite.validate(i)?;
            let (ex, ey) = sprite.extent();
            for frame in 0..self.frame_count {
                let (x, y) = sprite.position(frame);
                let inside = x - ex >= 1.0
                    && y - ey >= 1.0
                    && x + ex <= self.width as f64 - 1.0
                    && y + ey <= self.height as f64 - 1.0;
                if !inside {
                    return Err(Error::Spec(format!(
                        "sprite {i} leaves the canvas at frame {frame} (center {x:.1},{y:.1})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rendered clip: composited RGB (opaque), ground-truth alpha, and the
/// strict-interior hole mask used by the hole-residue metric.
#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub rgb: FrameClip,
    pub alpha: FrameClip,
    pub holes: FrameClip,
}

/// Renders a clip spec. Purely deterministic: the same spec always produces
/// bit-identical output.
pub fn generate_clip(spec: &ClipSpec) -> Result<GeneratedClip> {
    spec.validate()?;
    let (n, h, w) = (spec.frame_count, spec.height, spec.width);
    let mut rgb = Array4::zeros((n, 3, h, w));
    let mut alpha = Array3::zeros((n, h, w));
    let mut holes = Array3::zeros((n, h, w));

    let inv = 1.0 / SUPERSAMPLE as f64;
    let samples: Vec<f64> = (0..SUPERSAMPLE).map(|k| (k as f64 + 0.5) * inv).collect();

    for frame in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut pixel = spec.background_color;
                let mut pixel_alpha = 0.0f64;
                let mut pixel_hole = 0.0f64;
                for sprite in &spec.sprites {
                    let (cx, cy) = sprite.position(frame);
                    let mut body_hits = 0usize;
                    let mut hole_hits = 0usize;
                    for sy in &samples {
                        for sx in &samples {
                            let px = x as f64 + sx - cx;
                            let py = y as f64 + sy - cy;
                            let (body, hole) = sprite.classify(px, py);
                            body_hits += body as usize;
                            hole_hits += hole as usize;
                        }
                    }
                    let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    let cov = body_hits as f64 / total;
                    if cov > 0.0 {
                        for c in 0..3 {
                            pixel[c] = cov * sprite.fill_color[c] + (1.0 - cov) * pixel[c];
                        }
                        pixel_alpha = pixel_alpha.max(cov);
                    }
                    if sprite.semi_open && hole_hits == SUPERSAMPLE * SUPERSAMPLE {
                        pixel_hole = 1.0;
                    }
                }
                for c in 0..3 {
                    rgb[[frame, c, y, x]] = pixel[c].clamp(0.0, 1.0);
                }
                alpha[[frame, y, x]] = pixel_alpha;
                holes[[frame, y, x]] = pixel_hole;
            }
        }
    }

    if spec.sprites.iter().any(|s| s.semi_open) && holes.iter().all(|&v| v == 0.0) {
        return Err(Error::Spec(
            "semi-open sprite too thin: no fully interior hole pixel".into(),
        ));
    }

    Ok(GeneratedClip {
        rgb: FrameClip::from_rgb(rgb)?,
        alpha: FrameClip::from_alpha(alpha)?,
        holes: FrameClip::from_alpha(holes)?,
    })
}

/// Named color palette used for captions.
const FILL_PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.86, 0.17, 0.17]),
    ("green", [0.21, 0.68, 0.28]),
    ("blue", [0.18, 0.32, 0.80]),
    ("yellow", [0.91, 0.83, 0.17]),
    ("magenta", [0.80, 0.22, 0.72]),
    ("cyan", [0.18, 0.72, 0.74]),
    ("orange", [0.92, 0.52, 0.14]),
    ("purple", [0.48, 0.25, 0.70]),
];

const BACKGROUND_PALETTE: [[f64; 3]; 4] = [
    [1.0, 1.0, 1.0],
    [0.92, 0.92, 0.88],
    [0.85, 0.90, 0.95],
    [0.13, 0.13, 0.15],
];

/// Sampling ranges for [`generate_dataset`]. Canvas size and frame count are
/// fixed; geometry, color, and motion are drawn per clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetTemplate {
    pub height: usize,
    pub width: usize,
    pub frame_count: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub shapes: Vec<SpriteShape>,
    /// Chance that a rounded rect is hollow (rings always are).
    pub semi_open_prob: f64,
    /// Sprite outer size as a fraction of the smaller canvas dimension.
    pub size_frac: (f64, f64),
    /// Linear speed in pixels per frame.
    pub speed: (f64, f64),
    pub wobble_prob: f64,
}

impl Default for DatasetTemplate {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frame_count: 8,
            min_sprites: 1,
            max_sprites: 2,
            shapes: vec![SpriteShape::Disk, SpriteShape::Ring, SpriteShape::RoundedRect],
            semi_open_prob: 0.5,
            size_frac: (0.14, 0.24),
            speed: (0.3, 1.4),
            wobble_prob: 0.5,
        }
    }
}

fn direction_word(v: (f64, f64)) -> &'static str {
    let (vx, vy) = v;
    if vx.abs() < 0.05 && vy.abs() < 0.05 {
        return "in place";
    }
    if vx.abs() >= 2.0 * vy.abs() {
        if vx > 0.0 {
            "right"
        } else {
            "left"
        }
    } else if vy.abs() >= 2.0 * vx.abs() {
        if vy > 0.0 {
            "down"
        } else {
            "up"
        }
    } else {
        "diagonally"
    }
}

/// Samples one clip spec from the template. Fails only if no sprite can be
/// placed, which valid templates never hit.
fn sample_clip_spec(template: &DatasetTemplate, seed: u64) -> Result<(ClipSpec, Vec<&'static str>)> {
    let mut rng = derive_rng(seed, "synth-clip");
    let min_dim = template.height.min(template.width) as f64;
    let background_color = BACKGROUND_PALETTE[rng.gen_range(0..BACKGROUND_PALETTE.len())];
    let sprite_count = rng.gen_range(template.min_sprites..=template.max_sprites.max(template.min_sprites));

    let mut sprites: Vec<SpriteSpec> = Vec::new();
    let mut color_names = Vec::new();
    let mut occupied: Vec<(f64, f64, f64)> = Vec::new(); // center + radius over all frames

    for _ in 0..sprite_count {
        let mut placed = false;
        for _attempt in 0..100 {
            let shape = template.shapes[rng.gen_range(0..template.shapes.len())];
            let (color_name, fill_color) = FILL_PALETTE[rng.gen_range(0..FILL_PALETTE.len())];
            let size = rng.gen_range(template.size_frac.0..=template.size_frac.1) * min_dim;
            let speed = rng.gen_range(template.speed.0..=template.speed.1);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let velocity = (speed * angle.cos(), speed * angle.sin());
            let wobble = if rng.gen_bool(template.wobble_prob) {
                Some(Wobble {
                    amplitude: rng.gen_range(0.5..1.5),
                    period: rng.gen_range(4.0..9.0),
                })
            } else {
                None
            };
            let semi_open = match shape {
                SpriteShape::Disk => false,
                SpriteShape::Ring => true,
                SpriteShape::RoundedRect => rng.gen_bool(template.semi_open_prob),
            };
            let aspect: f64 = rng.gen_range(0.75..1.3);
            // Keep walls thin enough that the hole interior spans >= ~3 px.
            let thickness = rng.gen_range(0.28..0.4) * size;
            let corner_radius = rng.gen_range(0.2..0.4) * size;

            let travel = speed * (template.frame_count - 1) as f64
                + wobble.map_or(0.0, |w| w.amplitude);
            let ext = size * aspect.max(1.0);
            let margin = ext + travel + 2.0;
            if 2.0 * margin >= template.width as f64 || 2.0 * margin >= template.height as f64 {
                continue;
            }
            let cx = rng.gen_range(margin..template.width as f64 - margin);
            let cy = rng.gen_range(margin..template.height as f64 - margin);

            let clearance = ext + travel;
            if occupied
                .iter()
                .any(|(ox, oy, or)| ((cx - ox).powi(2) + (cy - oy).powi(2)).sqrt() < clearance + or + 2.0)
            {
                continue;
            }

            let sprite = SpriteSpec {
                shape,
                fill_color,
                center: (cx, cy),
                size,
                aspect,
                thickness,
                corner_radius,
                velocity,
                wobble,
                semi_open,
            };
            if sprite.validate(sprites.len()).is_err() {
                continue;
            }
            occupied.push((cx, cy, clearance));
            color_names.push(color_name);
            sprites.push(sprite);
            placed = true;
            break;
        }
        if !placed && sprites.is_empty() {
            return Err(Error::Spec(
                "template leaves no room to place a sprite".into(),
            ));
        }
    }

    Ok((
        ClipSpec {
            height: template.height,
            width: template.width,
            frame_count: template.frame_count,
            background_color,
            sprites,
            seed,
        },
        color_names,
    ))
}

/// Generates `count` clips under `out` (layout `out/{id}/{rgb,alpha,holes}/`)
/// plus `out/manifest.json`, and returns the manifest path. Clip `i` uses the
/// child seed `seed + i`, so any prefix of a dataset is reproducible.
pub fn generate_dataset(
    count: usize,
    template: &DatasetTemplate,
    seed: u64,
    out: impl AsRef<Path>,
) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::Parameter("dataset count must be >= 1".into()));
    }
    let out = out.as_ref();
    let mut records = Vec::with_capacity(count);
    let mut completed: Vec<String> = Vec::new();

    for i in 0..count {
        let id = format!("clip_{i:04}");
        let child_seed = seed.wrapping_add(i as u64);
        let result = (|| -> Result<ManifestRecord> {
            let (spec, color_names) = sample_clip_spec(template, child_seed)?;
            let clip = generate_clip(&spec)?;
            let root = out.join(&id);
            save_clip(&clip.rgb, root.join("rgb"))?;
            save_clip(&clip.alpha, root.join("alpha"))?;
            save_clip(&clip.holes, root.join("holes"))?;

            let lead = &spec.sprites[0];
            let caption_en = format!(
                "a {} {} moving {}",
                color_names[0],
                lead.shape.name(),
                direction_word(lead.velocity)
            );
            let mut trigger_words: Vec<String> =
                spec.sprites.iter().map(|s| s.shape.name().to_string()).collect();
            trigger_words.dedup();
            Ok(ManifestRecord {
                id: id.clone(),
                frames_dir: format!("{id}/rgb"),
                frame_count: spec.frame_count,
                caption_en,
                caption_cn: String::new(),
                trigger_words,
                keyframe_index: spec.frame_count / 2,
            })
        })();
        match result {
            Ok(record) => {
                completed.push(id);
                records.push(record);
            }
            Err(e) => {
                return Err(Error::PartialOutput {
                    completed,
                    reason: e.to_string(),
                })
            }
        }
    }

    let manifest_path = out.join("manifest.json");
    save_manifest(&records, &manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_spec() -> ClipSpec {
        ClipSpec {
            height: 32,
            width: 32,
            frame_count: 4,
            background_color: [1.0, 1.0, 1.0],
            sprites: vec![SpriteSpec {
                shape: SpriteShape::Disk,
                fill_color: [0.8, 0.1, 0.1],
                center: (16.0, 16.0),
                size: 6.0,
                aspect: 1.0,
                thickness: 0.0,
                corner_radius: 0.0,
                velocity: (0.0, 0.0),
                wobble: None,
                semi_open: false,
            }],
            seed: 1,
        }
    }

    #[test]
    fn static_disk_has_constant_alpha() {
        let clip = generate_clip(&disk_spec()).unwrap();
        let alpha = clip.alpha.alpha();
        for f in 1..4 {
            assert_eq!(
                alpha.index_axis(ndarray::Axis(0), f),
                alpha.index_axis(ndarray::Axis(0), 0)
            );
        }
    }

    #[test]
    fn ring_hole_matches_background_with_zero_alpha() {
        let mut spec = disk_spec();
        spec.background_color = [0.2, 0.4, 0.9];
        spec.sprites[0].shape = SpriteShape::Ring;
        spec.sprites[0].semi_open = true;
        spec.sprites[0].thickness = 2.5;
        let clip = generate_clip(&spec).unwrap();
        // Center pixel is deep inside the hole.
        let (cy, cx) = (16usize, 16usize);
        assert_eq!(clip.holes.alpha()[[0, cy, cx]], 1.0);
        assert_eq!(clip.alpha.alpha()[[0, cy, cx]], 0.0);
        for c in 0..3 {
            assert_eq!(clip.rgb.data()[[0, c, cy, cx]], spec.background_color[c]);
        }
        // The ring body itself is opaque.
        let ring_x = 16 + 5; // between inner (3.5) and outer (6.0) radius
        assert_eq!(clip.alpha.alpha()[[0, cy, ring_x]], 1.0);
    }

    #[test]
    fn same_spec_is_bit_identical() {
        let a = generate_clip(&disk_spec()).unwrap();
        let b = generate_clip(&disk_spec()).unwrap();
        assert_eq!(a.rgb.data(), b.rgb.data());
        assert_eq!(a.alpha.data(), b.alpha.data());
        assert_eq!(a.holes.data(), b.holes.data());
    }

    #[test]
    fn sprite_leaving_canvas_is_rejected() {
        let mut spec = disk_spec();
        spec.sprites[0].velocity = (6.0, 0.0);
        assert!(matches!(generate_clip(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn solid_disk_cannot_be_semi_open() {
        let mut spec = disk_spec();
        spec.sprites[0].semi_open = true;
        assert!(matches!(generate_clip(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn boundary_alpha_is_fractional() {
        let clip = generate_clip(&disk_spec()).unwrap();
        let alpha = clip.alpha.alpha();
        let fractional = alpha.iter().any(|&v| v > 0.0 && v < 1.0);
        assert!(fractional, "supersampling should give edge pixels in (0,1)");
    }

    #[test]
    fn zero_count_dataset_is_an_error() {
        let tmp = tempfile::TempDir::new().unwrap();
        let err = generate_dataset(0, &DatasetTemplate::default(), 1, tmp.path());
        assert!(matches!(err, Err(Error::Parameter(_))));
    }
}
