//! Clip and manifest I/O.
//!
//! Clips are stored as `frame_%04d.png` RGBA sequences (8-bit, one file per
//! frame). A dataset manifest is a UTF-8 JSON array of [`ManifestRecord`]s;
//! `frames_dir` entries are resolved relative to the manifest file.

use crate::clip::FrameClip;
use crate::error::{Error, Result};
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

/// One dataset sample: a sticker clip with its caption and trigger words.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    /// Directory with the RGB frame files, relative to the manifest.
    pub frames_dir: String,
    pub frame_count: usize,
    pub caption_en: String,
    /// Optional second-language caption; may be empty.
    #[serde(default)]
    pub caption_cn: String,
    pub trigger_words: Vec<String>,
    pub keyframe_index: usize,
}

/// Aggregate numbers over a manifest: sample count, mean caption length
/// (in characters of `caption_en`), mean frame count, and how many records
/// each trigger word appears in.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestStats {
    pub sample_count: usize,
    pub avg_description_length: f64,
    pub avg_frame_count: f64,
    pub trigger_word_frequencies: BTreeMap<String, u64>,
}

impl ManifestStats {
    /// Trigger words sorted by descending frequency (ties by name), truncated
    /// to `k` entries.
    pub fn top_trigger_words(&self, k: usize) -> Vec<(String, u64)> {
        let mut items: Vec<(String, u64)> = self
            .trigger_word_frequencies
            .iter()
            .map(|(w, c)| (w.clone(), *c))
            .collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        items.truncate(k);
        items
    }
}

fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

/// Parses `frame_NNNN.png` names; anything else is ignored.
fn parse_frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    if digits.len() < 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Number of `frame_%04d.png` files in a directory.
pub fn count_frame_files(dir: &Path) -> Result<usize> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut count = 0;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(name) = entry.file_name().to_str() {
            if parse_frame_index(name).is_some() {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Loads a clip from a directory of `frame_0000.png ... frame_{N-1}.png`
/// RGBA files, scaling 8-bit values to `[0, 1]`.
pub fn load_clip(dir: impl AsRef<Path>) -> Result<FrameClip> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indices = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(name) = entry.file_name().to_str() {
            if let Some(idx) = parse_frame_index(name) {
                indices.insert(idx);
            }
        }
    }
    if indices.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: "no frame_%04d.png files found".into(),
        });
    }
    let n = indices.len();
    for expect in 0..n {
        if !indices.contains(&expect) {
            return Err(Error::Gap {
                path: dir.to_path_buf(),
                missing: expect,
            });
        }
    }

    let mut data: Option<Array4<f64>> = None;
    for i in 0..n {
        let path = dir.join(frame_file_name(i));
        let img = image::ImageReader::open(&path)
            .map_err(|e| Error::io(&path, e))?
            .decode()
            .map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?;
        let rgba = match img {
            image::DynamicImage::ImageRgba8(img) => img,
            other => {
                return Err(Error::Format {
                    path,
                    reason: format!("expected 8-bit RGBA, got {:?}", other.color()),
                })
            }
        };
        let (w, h) = (rgba.width() as usize, rgba.height() as usize);
        let store = data.get_or_insert_with(|| Array4::zeros((n, 4, h, w)));
        let (_, _, sh, sw) = store.dim();
        if (h, w) != (sh, sw) {
            return Err(Error::shape(
                format!("load_clip frame {i}"),
                format!("{sh}x{sw}"),
                format!("{h}x{w}"),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                let px = rgba.get_pixel(x as u32, y as u32);
                for c in 0..4 {
                    store[[i, c, y, x]] = px.0[c] as f64 / 255.0;
                }
            }
        }
    }
    FrameClip::new(data.expect("at least one frame"))
}

/// Writes a clip as `frame_%04d.png` RGBA files, quantizing each channel
/// with `round(v * 255)`. Reloading reproduces every value within `1/510`.
pub fn save_clip(clip: &FrameClip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (clip.height(), clip.width());
    for i in 0..clip.frame_count() {
        let frame = clip.frame(i);
        let mut bytes = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                for c in 0..4 {
                    let v = (frame[[c, y, x]] * 255.0).round().clamp(0.0, 255.0);
                    bytes.push(v as u8);
                }
            }
        }
        let img = image::RgbaImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer sized from clip dims");
        let path = dir.join(frame_file_name(i));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn validate_record(record: &ManifestRecord, manifest_dir: &Path) -> Result<()> {
    if record.keyframe_index >= record.frame_count {
        return Err(Error::Validation(format!(
            "record {}: keyframe_index {} >= frame_count {}",
            record.id, record.keyframe_index, record.frame_count
        )));
    }
    if record.trigger_words.is_empty() {
        return Err(Error::Validation(format!(
            "record {}: trigger_words is empty",
            record.id
        )));
    }
    let frames_dir = manifest_dir.join(&record.frames_dir);
    let found = count_frame_files(&frames_dir).map_err(|_| {
        Error::Validation(format!(
            "record {}: frames_dir {} is not readable",
            record.id, record.frames_dir
        ))
    })?;
    if found != record.frame_count {
        return Err(Error::Validation(format!(
            "record {}: frame_count {} but {} frame files in {}",
            record.id, record.frame_count, found, record.frames_dir
        )));
    }
    Ok(())
}

/// Loads and validates a manifest. Every record must satisfy the record
/// invariants (keyframe in range, non-empty trigger words, frame files on
/// disk matching `frame_count`); ordering is preserved.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<ManifestRecord> = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let manifest_dir = path.parent().unwrap_or_else(|| Path::new("."));
    for record in &records {
        validate_record(record, manifest_dir)?;
    }
    Ok(records)
}

/// Serializes records to a manifest file (pretty JSON array).
pub fn save_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(records).expect("records serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Absolute frames directory for a record, given the manifest it came from.
pub fn resolve_frames_dir(manifest_path: &Path, record: &ManifestRecord) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&record.frames_dir)
}

/// Clip root (the directory holding `rgb/`, `alpha/`, and optionally
/// `holes/`) for a record.
pub fn resolve_clip_root(manifest_path: &Path, record: &ManifestRecord) -> PathBuf {
    let frames = resolve_frames_dir(manifest_path, record);
    frames.parent().map(Path::to_path_buf).unwrap_or(frames)
}

/// Computes manifest statistics: arithmetic means of caption length (in
/// characters) and frame count, plus per-word record counts (a trigger word
/// is counted once per record it appears in).
pub fn manifest_stats(records: &[ManifestRecord]) -> Result<ManifestStats> {
    if records.is_empty() {
        return Err(Error::EmptyInput("manifest_stats needs records".into()));
    }
    let n = records.len() as f64;
    let mut len_sum = 0.0;
    let mut frame_sum = 0.0;
    let mut freqs: BTreeMap<String, u64> = BTreeMap::new();
    for record in records {
        len_sum += record.caption_en.chars().count() as f64;
        frame_sum += record.frame_count as f64;
        let unique: BTreeSet<&String> = record.trigger_words.iter().collect();
        for word in unique {
            *freqs.entry(word.clone()).or_insert(0) += 1;
        }
    }
    Ok(ManifestStats {
        sample_count: records.len(),
        avg_description_length: len_sum / n,
        avg_frame_count: frame_sum / n,
        trigger_word_frequencies: freqs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::TempDir;

    fn record(frame_count: usize, keyframe: usize) -> ManifestRecord {
        ManifestRecord {
            id: "clip_0000".into(),
            frames_dir: "clip_0000/rgb".into(),
            frame_count,
            caption_en: "a white disk moving right".into(),
            caption_cn: String::new(),
            trigger_words: vec!["disk".into()],
            keyframe_index: keyframe,
        }
    }

    fn write_frames(dir: &Path, count: usize) {
        let alpha = Array3::from_elem((count, 2, 2), 1.0);
        let clip = FrameClip::from_alpha(alpha).unwrap();
        save_clip(&clip, dir).unwrap();
    }

    #[test]
    fn load_opaque_white_frame() {
        let tmp = TempDir::new().unwrap();
        let clip = FrameClip::from_alpha(Array3::ones((1, 2, 2))).unwrap();
        save_clip(&clip, tmp.path()).unwrap();
        let loaded = load_clip(tmp.path()).unwrap();
        assert_eq!(loaded.frame_count(), 1);
        assert!(loaded.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quantization_known_values() {
        let tmp = TempDir::new().unwrap();
        let mut data = ndarray::Array4::zeros((1, 4, 1, 3));
        for c in 0..4 {
            data[[0, c, 0, 0]] = 1.0;
            data[[0, c, 0, 1]] = 0.5;
            data[[0, c, 0, 2]] = 0.0;
        }
        save_clip(&FrameClip::new(data).unwrap(), tmp.path()).unwrap();
        let loaded = load_clip(tmp.path()).unwrap();
        assert_eq!(loaded.data()[[0, 0, 0, 0]], 1.0);
        // round(0.5 * 255) = 128
        assert_eq!(loaded.data()[[0, 1, 0, 1]], 128.0 / 255.0);
        assert_eq!(loaded.data()[[0, 2, 0, 2]], 0.0);
    }

    #[test]
    fn gap_in_sequence_is_rejected() {
        let tmp = TempDir::new().unwrap();
        write_frames(tmp.path(), 3);
        std::fs::remove_file(tmp.path().join("frame_0001.png")).unwrap();
        match load_clip(tmp.path()) {
            Err(Error::Gap { missing, .. }) => assert_eq!(missing, 1),
            other => panic!("expected gap error, got {other:?}"),
        }
    }

    #[test]
    fn non_rgba_file_is_rejected() {
        let tmp = TempDir::new().unwrap();
        let rgb = image::RgbImage::from_pixel(2, 2, image::Rgb([255, 0, 0]));
        rgb.save(tmp.path().join("frame_0000.png")).unwrap();
        assert!(matches!(load_clip(tmp.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let tmp = TempDir::new().unwrap();
        write_frames(tmp.path(), 1);
        let bigger = image::RgbaImage::new(3, 3);
        bigger.save(tmp.path().join("frame_0001.png")).unwrap();
        assert!(matches!(load_clip(tmp.path()), Err(Error::Shape { .. })));
    }

    #[test]
    fn sixteen_frame_roundtrip() {
        let tmp = TempDir::new().unwrap();
        write_frames(tmp.path(), 16);
        let loaded = load_clip(tmp.path()).unwrap();
        assert_eq!(loaded.frame_count(), 16);
        assert_eq!((loaded.height(), loaded.width()), (2, 2));
    }

    #[test]
    fn manifest_keyframe_boundary() {
        let tmp = TempDir::new().unwrap();
        write_frames(&tmp.path().join("clip_0000/rgb"), 16);
        let path = tmp.path().join("manifest.json");

        save_manifest(&[record(16, 15)], &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap().len(), 1);

        save_manifest(&[record(16, 16)], &path).unwrap();
        match load_manifest(&path) {
            Err(Error::Validation(msg)) => assert!(msg.contains("clip_0000")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_empty_array_is_empty_list() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("manifest.json");
        std::fs::write(&path, "[]").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn manifest_empty_trigger_words_rejected() {
        let tmp = TempDir::new().unwrap();
        write_frames(&tmp.path().join("clip_0000/rgb"), 4);
        let path = tmp.path().join("manifest.json");
        let mut bad = record(4, 0);
        bad.trigger_words.clear();
        save_manifest(&[bad], &path).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn stats_means() {
        let mut records = Vec::new();
        for (i, fc) in [16usize, 17, 18].iter().enumerate() {
            let mut r = record(*fc, 0);
            r.id = format!("clip_{i:04}");
            records.push(r);
        }
        let stats = manifest_stats(&records).unwrap();
        assert_eq!(stats.avg_frame_count, 17.0);
        assert_eq!(stats.sample_count, 3);

        let mut one = record(4, 0);
        one.caption_en = "x".repeat(96);
        let stats = manifest_stats(&[one]).unwrap();
        assert_eq!(stats.avg_description_length, 96.0);
    }

    #[test]
    fn stats_empty_input_errors() {
        assert!(matches!(manifest_stats(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn trigger_words_counted_once_per_record() {
        let mut r = record(4, 0);
        r.trigger_words = vec!["disk".into(), "disk".into(), "ring".into()];
        let stats = manifest_stats(&[r]).unwrap();
        assert_eq!(stats.trigger_word_frequencies["disk"], 1);
        assert_eq!(stats.trigger_word_frequencies["ring"], 1);
    }
}
