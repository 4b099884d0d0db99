//! Synthetic low-contrast segmentation data and dataset file IO.
//!
//! A [`Sample`] pairs a normalized image with a two-valued label map.
//! [`generate_synthetic`] builds desk-scale datasets of textured
//! backgrounds with faint elliptical lesions, [`save_dataset`] /
//! [`load_dataset`] round-trip them through a digest-checked directory
//! format, and [`split`] partitions samples deterministically by id hash.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, Domain};

/// Leading bytes of every sample file.
pub const SAMPLE_MAGIC: [u8; 4] = *b"DSSM";
/// Sample file format version written by this crate.
pub const SAMPLE_VERSION: u32 = 1;
/// Manifest format version written by this crate.
pub const MANIFEST_VERSION: u32 = 1;
/// File name of the dataset manifest inside a dataset directory.
pub const MANIFEST_NAME: &str = "manifest.json";

/// One image/label pair.
///
/// Images are normalized to `[-1, 1]`; labels use the symmetric alphabet
/// `{-1, +1}` with `+1` marking foreground, so both streams live on the
/// same scale when they share additive noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Normalized intensity image, values in `[-1, 1]`.
    pub image: Array2<f32>,
    /// Two-valued label map over `{-1, +1}`.
    pub label: Array2<f32>,
    /// Stable identifier, used for file names and split hashing.
    pub id: String,
}

impl Sample {
    /// Check the documented invariants: matching non-empty shapes, image
    /// range, and the strict two-valued label alphabet.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidData("sample id is empty".into()));
        }
        if self.image.dim() != self.label.dim() {
            return Err(Error::shapes(
                format!("sample {}: image vs label", self.id),
                &[self.image.dim().0, self.image.dim().1],
                &[self.label.dim().0, self.label.dim().1],
            ));
        }
        let (h, w) = self.image.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidData(format!(
                "sample {}: empty shape {h}x{w}",
                self.id
            )));
        }
        for &v in self.image.iter() {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(Error::InvalidData(format!(
                    "sample {}: image value {v} outside [-1, 1]",
                    self.id
                )));
            }
        }
        for &v in self.label.iter() {
            if v != 1.0 && v != -1.0 {
                return Err(Error::InvalidData(format!(
                    "sample {}: label value {v} not in {{-1, +1}}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Image converted to the requested precision.
    pub fn image_as<F: Real>(&self) -> Array2<F> {
        self.image.mapv(|v| F::from_f64(f64::from(v)))
    }

    /// Label converted to the requested precision.
    pub fn label_as<F: Real>(&self) -> Array2<F> {
        self.label.mapv(|v| F::from_f64(f64::from(v)))
    }
}

/// Map a binary mask to the `{-1, +1}` label alphabet.
pub fn encode_label(mask: &Array2<bool>) -> Array2<f32> {
    mask.mapv(|m| if m { 1.0 } else { -1.0 })
}

/// Threshold a map back to a binary mask: positive iff `value >= tau`.
///
/// Use `tau = 0.0` for raw label-scale arrays (the `{-1, +1}` midpoint)
/// and the configured threshold for `[0, 1]` probability maps, making
/// `decode_label(encode_label(m), 0.0) == m`.
pub fn decode_label<F: Real>(map: &Array2<F>, tau: f64) -> Array2<bool> {
    map.mapv(|v| Real::to_f64(v) >= tau)
}

/// Parameters of the synthetic generator; stored in the manifest so a
/// dataset records how it was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Number of samples.
    pub n: usize,
    /// Image height in pixels.
    pub height: usize,
    /// Image width in pixels.
    pub width: usize,
    /// Lesion-vs-background mean intensity difference in normalized units,
    /// in `(0, 1]`; background texture fades out as contrast approaches 1.
    pub contrast: f64,
    /// Lesion semi-axis range as fractions of `min(height, width) / 2`.
    pub lesion_scale: (f64, f64),
    /// Fraction of samples generated without any lesion.
    pub lesion_free_frac: f64,
    /// Generator seed; every sample draws from streams keyed by it.
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 200,
            height: 64,
            width: 64,
            contrast: 0.3,
            lesion_scale: (0.12, 0.35),
            lesion_free_frac: 0.2,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Check ranges: at least one sample, non-degenerate size, contrast in
    /// `(0, 1]`, ordered positive scale range, fraction in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("generator n must be >= 1".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidConfig(format!(
                "generator size {}x{} degenerate (need >= 8x8)",
                self.height, self.width
            )));
        }
        if !self.contrast.is_finite() || self.contrast <= 0.0 || self.contrast > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "contrast {} outside (0, 1]",
                self.contrast
            )));
        }
        let (lo, hi) = self.lesion_scale;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi && hi <= 0.5) {
            return Err(Error::InvalidConfig(format!(
                "lesion scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 0.5"
            )));
        }
        if !self.lesion_free_frac.is_finite() || !(0.0..=1.0).contains(&self.lesion_free_frac) {
            return Err(Error::InvalidConfig(format!(
                "lesion-free fraction {} outside [0, 1]",
                self.lesion_free_frac
            )));
        }
        Ok(())
    }
}

/// Generate a synthetic dataset.
///
/// Each sample is a smoothed-noise background at a random base level plus
/// 1..=3 wobbled ellipses raised above it by exactly `contrast`; the label
/// marks the union of lesion supports.  Per-sample random streams make the
/// output a pure function of the config.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.n).map(|index| generate_sample(cfg, index)).collect()
}

fn generate_sample(cfg: &GeneratorConfig, index: usize) -> Result<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let mut layout = rng::stream(cfg.seed, Domain::DataGen, index as u64, 0);
    let mut texture_rng = rng::stream(cfg.seed, Domain::DataGen, index as u64, 1);

    let base = -0.5 + 0.4 * layout.random::<f64>();
    let lesion_free = layout.random::<f64>() < cfg.lesion_free_frac;
    let mut mask = Array2::from_elem((h, w), false);
    if !lesion_free {
        let count = layout.random_range(1..=3usize);
        for _ in 0..count {
            paint_lesion(&mut mask, cfg, &mut layout);
        }
    }

    // Texture shrinks as contrast grows so maximal contrast is noise-free
    // and a single threshold separates lesion from background exactly.
    let amplitude = 0.15 * (1.0 - cfg.contrast);
    let texture = if amplitude > 0.0 {
        smoothed_noise(&mut texture_rng, h, w, amplitude)
    } else {
        Array2::zeros((h, w))
    };

    let mut image = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let lesion = if mask[[i, j]] { cfg.contrast } else { 0.0 };
            let v = (base + lesion + texture[[i, j]]).clamp(-1.0, 1.0);
            image[[i, j]] = v as f32;
        }
    }
    let sample = Sample {
        image,
        label: encode_label(&mask),
        id: format!("synth-{index:05}"),
    };
    sample.validate()?;
    Ok(sample)
}

/// OR one wobbled ellipse into `mask`, drawing its parameters from `rng`.
fn paint_lesion(mask: &mut Array2<bool>, cfg: &GeneratorConfig, rng: &mut impl Rng) {
    let (h, w) = mask.dim();
    let (hf, wf) = (h as f64, w as f64);
    let cx = wf * (0.2 + 0.6 * rng.random::<f64>());
    let cy = hf * (0.2 + 0.6 * rng.random::<f64>());
    let scale = 0.5 * hf.min(wf);
    let (lo, hi) = cfg.lesion_scale;
    let rx = scale * (lo + (hi - lo) * rng.random::<f64>());
    let ry = scale * (lo + (hi - lo) * rng.random::<f64>());
    let theta = std::f64::consts::TAU * rng.random::<f64>();
    let (a1, p1) = (rng.random::<f64>(), std::f64::consts::TAU * rng.random::<f64>());
    let (a2, p2) = (rng.random::<f64>(), std::f64::consts::TAU * rng.random::<f64>());
    let (sin_t, cos_t) = theta.sin_cos();

    for i in 0..h {
        for j in 0..w {
            let dx = (j as f64 + 0.5) - cx;
            let dy = (i as f64 + 0.5) - cy;
            // Rotate into the ellipse frame, then normalize by the axes.
            let ex = (cos_t * dx + sin_t * dy) / rx;
            let ey = (-sin_t * dx + cos_t * dy) / ry;
            let rho = ex.hypot(ey);
            let phi = ey.atan2(ex);
            let boundary =
                1.0 + 0.2 * (a1 * (2.0 * phi + p1).sin() + 0.5 * a2 * (3.0 * phi + p2).sin());
            if rho <= boundary {
                mask[[i, j]] = true;
            }
        }
    }
}

/// Zero-mean smoothed noise with maximum magnitude exactly `amplitude`.
fn smoothed_noise(rng: &mut impl Rng, h: usize, w: usize, amplitude: f64) -> Array2<f64> {
    let mut field = rng::normal_array::<f64>(rng, h, w);
    for _ in 0..2 {
        field = box_blur(&field, 2);
    }
    let mean = field.sum() / (h * w) as f64;
    field.mapv_inplace(|v| v - mean);
    let peak = field.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        field.mapv_inplace(|v| v * amplitude / peak);
    }
    field
}

/// Separable box blur with clamped edges; `radius` taps on each side.
fn box_blur(arr: &Array2<f64>, radius: isize) -> Array2<f64> {
    let (h, w) = arr.dim();
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut horiz = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for k in -radius..=radius {
                let jj = (j as isize + k).clamp(0, w as isize - 1) as usize;
                acc += arr[[i, jj]];
            }
            horiz[[i, j]] = acc * norm;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for k in -radius..=radius {
                let ii = (i as isize + k).clamp(0, h as isize - 1) as usize;
                acc += horiz[[ii, j]];
            }
            out[[i, j]] = acc * norm;
        }
    }
    out
}

/// One manifest row: sample id, file name, and content digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Sample id.
    pub id: String,
    /// File name relative to the dataset directory.
    pub file: String,
    /// Hex SHA-256 of the complete sample file.
    pub sha256: String,
}

/// Dataset directory manifest; written last so a complete manifest implies
/// a complete dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Manifest format version.
    pub version: u32,
    /// Version of the tool that wrote the dataset.
    #[serde(default)]
    pub tool_version: String,
    /// Number of samples; must equal `samples.len()`.
    pub count: usize,
    /// Common image height.
    pub height: usize,
    /// Common image width.
    pub width: usize,
    /// Per-sample files and digests, in dataset order.
    pub samples: Vec<ManifestEntry>,
    /// Generator parameters when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

fn sample_file_bytes(sample: &Sample) -> Vec<u8> {
    let (h, w) = sample.image.dim();
    let mut bytes = Vec::with_capacity(16 + 8 * h * w);
    bytes.extend_from_slice(&SAMPLE_MAGIC);
    bytes.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in sample.image.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &v in sample.label.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn file_name_safe(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Write a dataset directory: one binary file per sample plus a manifest.
///
/// Sample files land first; the manifest is written through a temporary
/// file and atomically renamed, so readers never observe a manifest whose
/// files are missing.
pub fn save_dataset(
    dir: &Path,
    samples: &[Sample],
    generator: Option<&GeneratorConfig>,
) -> Result<DatasetManifest> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot save an empty dataset".into()));
    }
    let (h, w) = samples[0].image.dim();
    let mut seen = BTreeSet::new();
    for sample in samples {
        sample.validate()?;
        if sample.image.dim() != (h, w) {
            return Err(Error::shapes(
                format!("sample {} vs dataset shape", sample.id),
                &[sample.image.dim().0, sample.image.dim().1],
                &[h, w],
            ));
        }
        if !file_name_safe(&sample.id) {
            return Err(Error::Dataset(format!(
                "sample id {:?} is not filesystem-safe",
                sample.id
            )));
        }
        if !seen.insert(sample.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate sample id {}", sample.id)));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut entries = Vec::with_capacity(samples.len());
    for sample in samples {
        let file = format!("{}.bin", sample.id);
        let bytes = sample_file_bytes(sample);
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        entries.push(ManifestEntry {
            id: sample.id.clone(),
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        tool_version: crate::TOOL_VERSION.to_string(),
        count: samples.len(),
        height: h,
        width: w,
        samples: entries,
        generator: generator.cloned(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("dataset manifest", e))?;
    let manifest_path = dir.join(MANIFEST_NAME);
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?;
    tmp.write_all(json.as_bytes())
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    tmp.persist(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e.error))?;
    Ok(manifest)
}

fn parse_sample_file(bytes: &[u8], entry: &ManifestEntry, h: usize, w: usize) -> Result<Sample> {
    let fail = |msg: String| Error::Dataset(format!("{}: {msg}", entry.file));
    if bytes.len() < 16 {
        return Err(fail(format!("header truncated ({} bytes)", bytes.len())));
    }
    if bytes[..4] != SAMPLE_MAGIC {
        return Err(fail("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SAMPLE_VERSION {
        return Err(fail(format!(
            "unsupported sample version {version} (expected {SAMPLE_VERSION})"
        )));
    }
    let fh = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let fw = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if (fh, fw) != (h, w) {
        return Err(fail(format!(
            "shape {fh}x{fw} disagrees with manifest {h}x{w}"
        )));
    }
    let expected = 16u128 + 8 * h as u128 * w as u128;
    if bytes.len() as u128 != expected {
        return Err(fail(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let read_plane = |offset: usize| -> Array2<f32> {
        let mut data = Vec::with_capacity(h * w);
        for k in 0..h * w {
            let at = offset + 4 * k;
            data.push(f32::from_le_bytes(
                bytes[at..at + 4].try_into().expect("4 bytes"),
            ));
        }
        Array2::from_shape_vec((h, w), data).expect("length matches shape")
    };
    let sample = Sample {
        image: read_plane(16),
        label: read_plane(16 + 4 * h * w),
        id: entry.id.clone(),
    };
    sample.validate()?;
    Ok(sample)
}

/// Load one sample file outside any dataset directory.
///
/// Shape comes from the file's own header and the id from the file stem;
/// without a manifest there is no digest to verify.
pub fn load_sample_file(path: &Path) -> Result<Sample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Dataset(format!("{}: unusable file name", path.display())))?
        .to_string();
    if bytes.len() < 16 || bytes[..4] != SAMPLE_MAGIC {
        return Err(Error::Dataset(format!(
            "{}: not a sample file",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let entry = ManifestEntry {
        id,
        file: path.display().to_string(),
        sha256: String::new(),
    };
    parse_sample_file(&bytes, &entry, h, w)
}

/// Load a dataset directory, verifying every digest and sample invariant.
///
/// Any failure — missing file, digest mismatch, malformed sample — aborts
/// the whole load; no partial dataset is returned.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let json = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&json).map_err(|e| Error::json("dataset manifest", e))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    if manifest.count != manifest.samples.len() {
        return Err(Error::Dataset(format!(
            "manifest count {} disagrees with {} listed samples",
            manifest.count,
            manifest.samples.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate sample id {}", entry.id)));
        }
        let path = dir.join(&entry.file);
        let bytes =
            std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let computed = sha256_hex(&bytes);
        if computed != entry.sha256 {
            return Err(Error::DigestMismatch {
                path: entry.file.clone(),
                stored: entry.sha256.clone(),
                computed,
            });
        }
        samples.push(parse_sample_file(
            &bytes,
            entry,
            manifest.height,
            manifest.width,
        )?);
    }
    Ok((samples, manifest))
}

/// Deterministic train/test split by id hash.
///
/// Samples are ranked by the SHA-256 of their id; the lowest
/// `floor(test_frac * n)` ranks become the test set.  Membership depends
/// only on the id, so it is stable across dataset order and growth.
pub fn split(samples: &[Sample], test_frac: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !test_frac.is_finite() || !(0.0..=1.0).contains(&test_frac) {
        return Err(Error::InvalidConfig(format!(
            "test fraction {test_frac} outside [0, 1]"
        )));
    }
    let mut seen = BTreeSet::new();
    for sample in samples {
        if !seen.insert(sample.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate sample id {}", sample.id)));
        }
    }
    let mut ranked: Vec<(u64, usize)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let digest = Sha256::digest(s.id.as_bytes());
            let rank = u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"));
            (rank, i)
        })
        .collect();
    ranked.sort_unstable();
    let n_test = (test_frac * samples.len() as f64).floor() as usize;
    let mut test: Vec<usize> = ranked[..n_test].iter().map(|&(_, i)| i).collect();
    let mut train: Vec<usize> = ranked[n_test..].iter().map(|&(_, i)| i).collect();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Write a `[0, 1]` map as an 8-bit binary portable graymap (P5).
///
/// Values are clamped to `[0, 1]` and scaled to `0..=255`.
pub fn write_pgm<F: Real>(path: &Path, map: &Array2<F>) -> Result<()> {
    let (h, w) = map.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in map.iter() {
        let v = Real::to_f64(v).clamp(0.0, 1.0);
        bytes.push((v * 255.0).round() as u8);
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            n: 6,
            height: 24,
            width: 24,
            contrast: 0.3,
            lesion_scale: (0.15, 0.35),
            lesion_free_frac: 0.2,
            seed: 11,
        }
    }

    #[test]
    fn encode_decode_round_trip_is_identity() {
        let mut rng = stream(3, Domain::DataGen, 90, 0);
        let mask = Array2::from_shape_fn((9, 7), |_| rng.random::<f64>() < 0.4);
        let encoded = encode_label(&mask);
        for &v in encoded.iter() {
            assert!(v == 1.0 || v == -1.0);
        }
        assert_eq!(decode_label(&encoded, 0.0), mask);
    }

    #[test]
    fn all_zero_mask_encodes_to_all_negative() {
        let mask = Array2::from_elem((4, 5), false);
        assert!(encode_label(&mask).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn decode_matches_elementwise_threshold_oracle() {
        let mut rng = stream(4, Domain::DataGen, 91, 0);
        let map = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>());
        let decoded = decode_label(&map, 0.5);
        for (idx, &v) in map.indexed_iter() {
            assert_eq!(decoded[idx], v >= 0.5);
        }
    }

    #[test]
    fn generated_samples_satisfy_invariants() {
        let samples = generate_synthetic(&tiny_config()).unwrap();
        assert_eq!(samples.len(), 6);
        for s in &samples {
            s.validate().unwrap();
            assert_eq!(s.image.dim(), (24, 24));
        }
        // With lesions present somewhere in the set, labels are not all flat.
        assert!(samples.iter().any(|s| s.label.iter().any(|&v| v == 1.0)));
    }

    #[test]
    fn maximal_contrast_is_threshold_separable() {
        let cfg = GeneratorConfig {
            contrast: 1.0,
            lesion_free_frac: 0.0,
            ..tiny_config()
        };
        let samples = generate_synthetic(&cfg).unwrap();
        let mut checked = 0;
        for s in &samples {
            let mask = decode_label(&s.label, 0.0);
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let min = s.image.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = s.image.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let thr = 0.5 * (min + max);
            let from_intensity = s.image.mapv(|v| v >= thr);
            assert_eq!(from_intensity, mask, "sample {}", s.id);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn lesion_free_samples_have_uniform_negative_labels() {
        let cfg = GeneratorConfig {
            lesion_free_frac: 1.0,
            ..tiny_config()
        };
        for s in &generate_synthetic(&cfg).unwrap() {
            assert!(s.label.iter().all(|&v| v == -1.0));
        }
    }

    #[test]
    fn regeneration_is_bitwise_deterministic() {
        let cfg = GeneratorConfig {
            n: 10,
            ..tiny_config()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic(&GeneratorConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn generator_rejects_bad_parameters() {
        assert!(GeneratorConfig {
            n: 0,
            ..tiny_config()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig {
            height: 4,
            ..tiny_config()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig {
            contrast: 0.0,
            ..tiny_config()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig {
            contrast: 1.5,
            ..tiny_config()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig {
            lesion_scale: (0.4, 0.2),
            ..tiny_config()
        }
        .validate()
        .is_err());
        assert!(GeneratorConfig {
            lesion_free_frac: -0.1,
            ..tiny_config()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn sample_validation_rejects_bad_values() {
        let good = Sample {
            image: Array2::zeros((4, 4)),
            label: Array2::from_elem((4, 4), -1.0),
            id: "ok".into(),
        };
        good.validate().unwrap();
        let mut bad_label = good.clone();
        bad_label.label[[0, 0]] = 0.5;
        assert!(bad_label.validate().is_err());
        let mut bad_image = good.clone();
        bad_image.image[[1, 1]] = 1.5;
        assert!(bad_image.validate().is_err());
        let mut bad_shape = good.clone();
        bad_shape.label = Array2::from_elem((4, 5), -1.0);
        assert!(bad_shape.validate().is_err());
    }

    #[test]
    fn save_load_round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let samples = generate_synthetic(&cfg).unwrap();
        let saved = save_dataset(dir.path(), &samples, Some(&cfg)).unwrap();
        let (loaded, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, samples);
        assert_eq!(manifest, saved);
        assert_eq!(manifest.generator.as_ref(), Some(&cfg));
    }

    #[test]
    fn tampered_sample_file_reports_digest_mismatch_naming_it() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&tiny_config()).unwrap();
        let manifest = save_dataset(dir.path(), &samples, None).unwrap();
        let victim = dir.path().join(&manifest.samples[2].file);
        let mut bytes = std::fs::read(&victim).unwrap();
        let at = bytes.len() / 2;
        bytes[at] ^= 0x40;
        std::fs::write(&victim, bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::DigestMismatch { path, .. }) => {
                assert_eq!(path, manifest.samples[2].file);
            }
            other => panic!("expected digest mismatch, got {other:?}"),
        }
    }

    #[test]
    fn manifest_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&tiny_config()).unwrap();
        save_dataset(dir.path(), &samples, None).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let json = std::fs::read_to_string(&path).unwrap();
        let mut manifest: DatasetManifest = serde_json::from_str(&json).unwrap();
        manifest.count += 1;
        std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Dataset(msg)) => assert!(msg.contains("count")),
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_sample_file_fails_with_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&tiny_config()).unwrap();
        let manifest = save_dataset(dir.path(), &samples, None).unwrap();
        std::fs::remove_file(dir.path().join(&manifest.samples[0].file)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn split_is_deterministic_disjoint_and_sized() {
        let cfg = GeneratorConfig {
            n: 40,
            ..tiny_config()
        };
        let samples = generate_synthetic(&cfg).unwrap();
        let (train_a, test_a) = split(&samples, 0.25).unwrap();
        let (train_b, test_b) = split(&samples, 0.25).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);
        assert_eq!(test_a.len(), 10);
        assert_eq!(train_a.len(), 30);
        let mut all: Vec<usize> = train_a.iter().chain(test_a.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        // Membership follows the id, not the position in the list.
        let mut reversed = samples.clone();
        reversed.reverse();
        let (_, test_rev) = split(&reversed, 0.25).unwrap();
        let ids: BTreeSet<&str> = test_a.iter().map(|&i| samples[i].id.as_str()).collect();
        let ids_rev: BTreeSet<&str> =
            test_rev.iter().map(|&i| reversed[i].id.as_str()).collect();
        assert_eq!(ids, ids_rev);
    }

    #[test]
    fn pgm_bytes_match_hand_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let map = Array2::from_shape_vec((2, 3), vec![0.0f32, 0.5, 1.0, -1.0, 2.0, 0.25]).unwrap();
        write_pgm(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expected = b"P5\n3 2\n255\n".to_vec();
        expected.extend_from_slice(&[0, 128, 255, 0, 255, 64]);
        assert_eq!(bytes, expected);
    }
}
