//! MCEP feature matrices: binary ETGF files, dataset manifests, zero-mean
//! unit-variance normalization, 128-frame segment sampling and the synthetic
//! two-domain corpus used for desk-scale experiments.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Fixed cepstral dimensionality of every feature matrix.
pub const MCEP_DIMS: usize = 24;

/// Default training segment length in frames.
pub const SEGMENT_FRAMES: usize = 128;

const ETGF_MAGIC: &[u8; 4] = b"ETGF";
const ETGF_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Emotion {
    Angry,
    Happy,
    Sad,
    Neutral,
}

/// A frames x 24 MCEP matrix with its dataset tags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// Row-major frames x 24.
    pub mcep: Vec<f32>,
    pub frames: usize,
    pub speaker_id: usize,
    pub emotion: Emotion,
    pub language: String,
}

impl FeatureMatrix {
    pub fn new(mcep: Vec<f32>, frames: usize) -> Result<Self> {
        if mcep.len() != frames * MCEP_DIMS {
            return Err(Error::contract(format!(
                "feature matrix length {} does not equal frames {frames} x {MCEP_DIMS}",
                mcep.len()
            )));
        }
        if mcep.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("feature matrix contains non-finite values".to_string()));
        }
        Ok(FeatureMatrix {
            mcep,
            frames,
            speaker_id: 0,
            emotion: Emotion::Neutral,
            language: String::new(),
        })
    }

    pub fn with_tags(mut self, speaker_id: usize, emotion: Emotion, language: &str) -> Self {
        self.speaker_id = speaker_id;
        self.emotion = emotion;
        self.language = language.to_string();
        self
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.mcep[t * MCEP_DIMS..(t + 1) * MCEP_DIMS]
    }

    /// Contiguous `length`-frame slice starting at `start`.
    pub fn segment(&self, start: usize, length: usize) -> Result<FeatureMatrix> {
        if start + length > self.frames {
            return Err(Error::contract(format!(
                "segment {start}..{} out of range for {} frames",
                start + length,
                self.frames
            )));
        }
        let mcep = self.mcep[start * MCEP_DIMS..(start + length) * MCEP_DIMS].to_vec();
        Ok(FeatureMatrix {
            mcep,
            frames: length,
            speaker_id: self.speaker_id,
            emotion: self.emotion,
            language: self.language.clone(),
        })
    }

    /// Transposed copy as channels x frames, the layout the 1-D generator
    /// consumes (MCEP dims are the channel axis).
    pub fn to_channels_major<T: crate::autodiff::Scalar>(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.mcep.len()];
        for t in 0..self.frames {
            for d in 0..MCEP_DIMS {
                out[d * self.frames + t] = crate::autodiff::fl(self.mcep[t * MCEP_DIMS + d] as f64);
            }
        }
        out
    }

    /// Inverse of [`FeatureMatrix::to_channels_major`].
    pub fn from_channels_major(data: &[f32], frames: usize) -> Result<FeatureMatrix> {
        if data.len() != frames * MCEP_DIMS {
            return Err(Error::contract(format!(
                "channel-major length {} does not equal {MCEP_DIMS} x {frames}",
                data.len()
            )));
        }
        let mut mcep = vec![0.0f32; data.len()];
        for d in 0..MCEP_DIMS {
            for t in 0..frames {
                mcep[t * MCEP_DIMS + d] = data[d * frames + t];
            }
        }
        FeatureMatrix::new(mcep, frames)
    }
}

/// Read one ETGF file. Tags are not stored in the file; they come from the
/// manifest entry.
pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ETGF_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}, expected \"ETGF\"",
            path.display(),
            magic
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != ETGF_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported ETGF version {version}",
            path.display()
        )));
    }
    let frames = r.read_u32::<LittleEndian>()? as usize;
    let dims = r.read_u32::<LittleEndian>()? as usize;
    if dims != MCEP_DIMS {
        return Err(Error::contract(format!(
            "{}: expected {MCEP_DIMS} coefficient dimensions, found {dims}",
            path.display()
        )));
    }
    let mut mcep = vec![0.0f32; frames * dims];
    for v in mcep.iter_mut() {
        *v = r.read_f32::<LittleEndian>().map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: truncated payload: {e}", path.display()),
            ))
        })?;
    }
    FeatureMatrix::new(mcep, frames)
}

pub fn write_features(features: &FeatureMatrix, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(ETGF_MAGIC)?;
    w.write_u32::<LittleEndian>(ETGF_VERSION)?;
    w.write_u32::<LittleEndian>(features.frames as u32)?;
    w.write_u32::<LittleEndian>(MCEP_DIMS as u32)?;
    for &v in &features.mcep {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-dimension standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub sample_count: u64,
}

/// Constant dimensions get this floor instead of a zero std.
pub const STD_FLOOR: f32 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub speaker_id: usize,
    pub emotion: Emotion,
    pub language: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub speakers: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory entry paths are resolved against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        manifest.root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn entry_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Read the feature file behind entry `i` and attach its tags.
    pub fn load_entry(&self, i: usize) -> Result<FeatureMatrix> {
        let entry = &self.entries[i];
        let fm = read_features(&self.entry_path(entry))?;
        Ok(fm.with_tags(entry.speaker_id, entry.emotion, &entry.language))
    }

    /// Check speaker-id density, file existence/parsability and minimum
    /// recording length. Recordings shorter than `min_frames` are rejected,
    /// not padded.
    pub fn validate(&self, min_frames: usize) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::validation("manifest has no entries".to_string()));
        }
        let k = self.speakers.len();
        let mut seen = vec![false; k];
        for entry in &self.entries {
            if entry.speaker_id >= k {
                return Err(Error::validation(format!(
                    "{}: speaker_id {} out of range [0, {k})",
                    entry.path, entry.speaker_id
                )));
            }
            seen[entry.speaker_id] = true;
            let fm = read_features(&self.entry_path(entry))?;
            if fm.frames < min_frames {
                return Err(Error::validation(format!(
                    "{}: {} frames, need at least {min_frames}",
                    entry.path, fm.frames
                )));
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::validation(
                "speaker ids are not dense: some speakers have no entries".to_string(),
            ));
        }
        Ok(())
    }
}

/// Fit per-dimension mean and (population) std over all frames of the
/// manifest, optionally filtered by predicate over entries.
pub fn fit_normalization(
    manifest: &DatasetManifest,
    filter: impl Fn(&ManifestEntry) -> bool,
) -> Result<NormalizationStats> {
    let mut sums = [0.0f64; MCEP_DIMS];
    let mut sq_sums = [0.0f64; MCEP_DIMS];
    let mut count = 0u64;
    for (i, entry) in manifest.entries.iter().enumerate() {
        if !filter(entry) {
            continue;
        }
        let fm = manifest.load_entry(i)?;
        for t in 0..fm.frames {
            for (d, &v) in fm.frame(t).iter().enumerate() {
                sums[d] += v as f64;
                sq_sums[d] += (v as f64) * (v as f64);
            }
        }
        count += fm.frames as u64;
    }
    if count < 2 {
        return Err(Error::contract(format!(
            "normalization needs at least 2 frames, found {count}"
        )));
    }
    let n = count as f64;
    let mut mean = Vec::with_capacity(MCEP_DIMS);
    let mut std = Vec::with_capacity(MCEP_DIMS);
    for d in 0..MCEP_DIMS {
        let m = sums[d] / n;
        let var = (sq_sums[d] / n - m * m).max(0.0);
        mean.push(m as f32);
        std.push((var.sqrt() as f32).max(STD_FLOOR));
    }
    Ok(NormalizationStats { mean, std, sample_count: count })
}

pub fn apply_normalization(fm: &FeatureMatrix, stats: &NormalizationStats) -> FeatureMatrix {
    transform_frames(fm, |d, v| (v - stats.mean[d]) / stats.std[d])
}

/// Inverse of [`apply_normalization`].
pub fn invert_normalization(fm: &FeatureMatrix, stats: &NormalizationStats) -> FeatureMatrix {
    transform_frames(fm, |d, v| v * stats.std[d] + stats.mean[d])
}

fn transform_frames(fm: &FeatureMatrix, f: impl Fn(usize, f32) -> f32) -> FeatureMatrix {
    let mut out = fm.clone();
    for t in 0..out.frames {
        for d in 0..MCEP_DIMS {
            let idx = t * MCEP_DIMS + d;
            out.mcep[idx] = f(d, out.mcep[idx]);
        }
    }
    out
}

/// Contiguous random 128-frame (or `length`-frame) cut. Uniform start index.
pub fn random_segment(
    fm: &FeatureMatrix,
    length: usize,
    rng: &mut impl Rng,
) -> Result<FeatureMatrix> {
    if fm.frames < length {
        return Err(Error::contract(format!(
            "recording has {} frames, cannot cut a {length}-frame segment",
            fm.frames
        )));
    }
    let start = rng.gen_range(0..=fm.frames - length);
    fm.segment(start, length)
}

// ---- synthetic two-domain corpus ----

/// Knobs for [`synth_dataset`]. The domain-B "emotion" transform is fixed:
/// +0.5 on dims 0-7 and sinusoidal amplitude modulation of depth 0.3 with a
/// 50-frame period on dims 8-23.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub samples_per_domain: usize,
    pub speakers: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub language: String,
    /// Scales the per-speaker base offsets; a different setting makes a
    /// different toy "language" with shifted trajectory statistics.
    pub offset_scale: f64,
    /// Amplitude range of the low-frequency sinusoidal content.
    pub trajectory_amp: f64,
    pub emotion_a: Emotion,
    pub emotion_b: Emotion,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples_per_domain: 50,
            speakers: 4,
            min_frames: 128,
            max_frames: 256,
            language: "zh".to_string(),
            offset_scale: 1.0,
            trajectory_amp: 0.4,
            emotion_a: Emotion::Neutral,
            emotion_b: Emotion::Happy,
        }
    }
}

pub const TILT_SHIFT: f32 = 0.5;
pub const TILT_DIMS: std::ops::Range<usize> = 0..8;
pub const AM_DEPTH: f32 = 0.3;
pub const AM_PERIOD: f64 = 50.0;

/// The fixed domain-B transform: additive tilt on the low dims, amplitude
/// modulation on the high dims.
pub fn emotion_transform(base: &FeatureMatrix) -> FeatureMatrix {
    let mut out = base.clone();
    for t in 0..out.frames {
        let am = 1.0 + AM_DEPTH * ((2.0 * std::f64::consts::PI * t as f64 / AM_PERIOD).sin() as f32);
        for d in 0..MCEP_DIMS {
            let idx = t * MCEP_DIMS + d;
            if TILT_DIMS.contains(&d) {
                out.mcep[idx] += TILT_SHIFT;
            } else {
                out.mcep[idx] *= am;
            }
        }
    }
    out
}

/// Generate matched domain-A/domain-B corpora under `out_dir` and return the
/// two manifests (already written to `manifest_a.json` / `manifest_b.json`).
/// Fully determined by `config` and the rng state.
pub fn synth_dataset(
    config: &SynthConfig,
    rng: &mut impl Rng,
    out_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if config.speakers < 2 {
        return Err(Error::contract(format!(
            "speaker classifier needs at least 2 speakers, got {}",
            config.speakers
        )));
    }
    if config.min_frames < SEGMENT_FRAMES || config.max_frames < config.min_frames {
        return Err(Error::contract(format!(
            "frame range [{}, {}] must contain [{SEGMENT_FRAMES}, ...]",
            config.min_frames, config.max_frames
        )));
    }
    let dir_a = out_dir.join("domain_a");
    let dir_b = out_dir.join("domain_b");
    std::fs::create_dir_all(&dir_a)?;
    std::fs::create_dir_all(&dir_b)?;

    // per-speaker base offsets, shared across domains
    let offsets: Vec<Vec<f32>> = (0..config.speakers)
        .map(|_| {
            (0..MCEP_DIMS)
                .map(|_| (rng.gen_range(-1.0..1.0) * config.offset_scale) as f32)
                .collect()
        })
        .collect();

    let speakers: Vec<String> = (0..config.speakers).map(|s| format!("spk{s}")).collect();
    let mut entries_a = Vec::new();
    let mut entries_b = Vec::new();
    for i in 0..config.samples_per_domain {
        let speaker = i % config.speakers;
        let frames = rng.gen_range(config.min_frames..=config.max_frames);
        let base = smooth_trajectory(&offsets[speaker], frames, config.trajectory_amp, rng)?;
        let transformed = emotion_transform(&base);

        let name = format!("sample_{i:03}.etgf");
        write_features(&base, &dir_a.join(&name))?;
        write_features(&transformed, &dir_b.join(&name))?;
        entries_a.push(ManifestEntry {
            path: format!("domain_a/{name}"),
            speaker_id: speaker,
            emotion: config.emotion_a,
            language: config.language.clone(),
        });
        entries_b.push(ManifestEntry {
            path: format!("domain_b/{name}"),
            speaker_id: speaker,
            emotion: config.emotion_b,
            language: config.language.clone(),
        });
    }

    let manifest_a = DatasetManifest {
        speakers: speakers.clone(),
        entries: entries_a,
        root: out_dir.to_path_buf(),
    };
    let manifest_b =
        DatasetManifest { speakers, entries: entries_b, root: out_dir.to_path_buf() };
    manifest_a.save(&out_dir.join("manifest_a.json"))?;
    manifest_b.save(&out_dir.join("manifest_b.json"))?;
    Ok((manifest_a, manifest_b))
}

/// Speaker offset plus a few low-frequency sinusoids per dimension.
fn smooth_trajectory(
    offset: &[f32],
    frames: usize,
    amp: f64,
    rng: &mut impl Rng,
) -> Result<FeatureMatrix> {
    let mut mcep = vec![0.0f32; frames * MCEP_DIMS];
    for d in 0..MCEP_DIMS {
        let components: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.01..0.08),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.3..1.0) * amp,
                )
            })
            .collect();
        for t in 0..frames {
            let mut v = offset[d] as f64;
            for &(freq, phase, a) in &components {
                v += a * (std::f64::consts::TAU * freq * t as f64 + phase).sin();
            }
            mcep[t * MCEP_DIMS + d] = v as f32;
        }
    }
    FeatureMatrix::new(mcep, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, frames: usize) -> FeatureMatrix {
        let mcep = (0..frames * MCEP_DIMS).map(|_| rng.gen_range(-3.0..3.0)).collect();
        FeatureMatrix::new(mcep, frames).unwrap()
    }

    #[test]
    fn etgf_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fm = random_matrix(&mut rng, 200);
        let path = dir.path().join("a.etgf");
        write_features(&fm, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(fm.mcep, back.mcep);
        assert_eq!(fm.frames, back.frames);
    }

    #[test]
    fn etgf_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.etgf");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x18\x00\x00\x00").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn etgf_rejects_wrong_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dims.etgf");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"ETGF");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&23u32.to_le_bytes());
        std::fs::write(&path, buf).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Contract(_))));
    }

    #[test]
    fn etgf_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fm = random_matrix(&mut rng, 100);
        let path = dir.path().join("t.etgf");
        write_features(&fm, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // claim 300 frames with a 100-frame payload
        bytes[8..12].copy_from_slice(&300u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Io(_))));
    }

    fn manifest_with(dir: &Path, matrices: &[FeatureMatrix]) -> DatasetManifest {
        let entries = matrices
            .iter()
            .enumerate()
            .map(|(i, fm)| {
                let name = format!("m{i}.etgf");
                write_features(fm, &dir.join(&name)).unwrap();
                ManifestEntry {
                    path: name,
                    speaker_id: fm.speaker_id,
                    emotion: fm.emotion,
                    language: fm.language.clone(),
                }
            })
            .collect();
        DatasetManifest {
            speakers: vec!["a".into(), "b".into()],
            entries,
            root: dir.to_path_buf(),
        }
    }

    #[test]
    fn normalization_hand_evaluated() {
        let dir = tempfile::tempdir().unwrap();
        let mut mcep = vec![0.0f32; 2 * MCEP_DIMS];
        mcep[MCEP_DIMS..].iter_mut().for_each(|v| *v = 2.0);
        let fm = FeatureMatrix::new(mcep, 2).unwrap();
        let manifest = manifest_with(dir.path(), std::slice::from_ref(&fm));
        let stats = fit_normalization(&manifest, |_| true).unwrap();
        assert_eq!(stats.mean, vec![1.0; MCEP_DIMS]);
        assert_eq!(stats.std, vec![1.0; MCEP_DIMS]);
        let normed = apply_normalization(&fm, &stats);
        assert_eq!(normed.frame(0), &[-1.0f32; MCEP_DIMS]);
        assert_eq!(normed.frame(1), &[1.0f32; MCEP_DIMS]);
    }

    #[test]
    fn normalization_fitting_corpus_is_standardized() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mats: Vec<FeatureMatrix> =
            (0..4).map(|_| random_matrix(&mut rng, 150)).collect();
        let manifest = manifest_with(dir.path(), &mats);
        let stats = fit_normalization(&manifest, |_| true).unwrap();
        let mut sums = [0.0f64; MCEP_DIMS];
        let mut sqs = [0.0f64; MCEP_DIMS];
        let mut n = 0u64;
        for fm in &mats {
            let normed = apply_normalization(fm, &stats);
            for t in 0..normed.frames {
                for (d, &v) in normed.frame(t).iter().enumerate() {
                    sums[d] += v as f64;
                    sqs[d] += (v as f64) * (v as f64);
                }
            }
            n += normed.frames as u64;
        }
        for d in 0..MCEP_DIMS {
            let mean = sums[d] / n as f64;
            let var = sqs[d] / n as f64 - mean * mean;
            assert!(mean.abs() < 1e-6, "dim {d} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "dim {d} var {var}");
        }
    }

    #[test]
    fn normalization_constant_dimension_floors_std() {
        let dir = tempfile::tempdir().unwrap();
        let fm = FeatureMatrix::new(vec![5.0; 3 * MCEP_DIMS], 3).unwrap();
        let manifest = manifest_with(dir.path(), std::slice::from_ref(&fm));
        let stats = fit_normalization(&manifest, |_| true).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR; MCEP_DIMS]);
        let normed = apply_normalization(&fm, &stats);
        assert!(normed.mcep.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_empty_corpus_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let fm = random_matrix(&mut ChaCha8Rng::seed_from_u64(4), 10);
        let manifest = manifest_with(dir.path(), std::slice::from_ref(&fm));
        assert!(matches!(
            fit_normalization(&manifest, |_| false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn segment_exact_length_returns_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fm = random_matrix(&mut rng, SEGMENT_FRAMES);
        let seg = random_segment(&fm, SEGMENT_FRAMES, &mut rng).unwrap();
        assert_eq!(seg.mcep, fm.mcep);
    }

    #[test]
    fn segment_too_short_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fm = random_matrix(&mut rng, 100);
        assert!(matches!(
            random_segment(&fm, SEGMENT_FRAMES, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn segment_seeded_rng_is_deterministic() {
        let fm = random_matrix(&mut ChaCha8Rng::seed_from_u64(7), 400);
        let a = random_segment(&fm, SEGMENT_FRAMES, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = random_segment(&fm, SEGMENT_FRAMES, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a.mcep, b.mcep);
    }

    #[test]
    fn synth_is_deterministic() {
        let config = SynthConfig { samples_per_domain: 6, ..Default::default() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_dataset(&config, &mut ChaCha8Rng::seed_from_u64(9), d1.path()).unwrap();
        synth_dataset(&config, &mut ChaCha8Rng::seed_from_u64(9), d2.path()).unwrap();
        for sub in ["domain_a", "domain_b"] {
            for i in 0..6 {
                let name = format!("{sub}/sample_{i:03}.etgf");
                let a = std::fs::read(d1.path().join(&name)).unwrap();
                let b = std::fs::read(d2.path().join(&name)).unwrap();
                assert_eq!(a, b, "{name}");
            }
        }
    }

    #[test]
    fn synth_domains_differ_by_configured_transform() {
        let config = SynthConfig { samples_per_domain: 12, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let (ma, mb) =
            synth_dataset(&config, &mut ChaCha8Rng::seed_from_u64(10), dir.path()).unwrap();
        let mut shift = [0.0f64; MCEP_DIMS];
        let mut n = 0u64;
        for i in 0..ma.entries.len() {
            let a = ma.load_entry(i).unwrap();
            let b = mb.load_entry(i).unwrap();
            assert_eq!(a.frames, b.frames);
            for t in 0..a.frames {
                for d in 0..MCEP_DIMS {
                    shift[d] += (b.frame(t)[d] - a.frame(t)[d]) as f64;
                }
            }
            n += a.frames as u64;
        }
        for d in TILT_DIMS {
            let s = shift[d] / n as f64;
            assert!((s - 0.5).abs() < 0.05, "dim {d} shift {s}");
        }
    }

    #[test]
    fn synth_counts_and_dense_speakers() {
        let config =
            SynthConfig { samples_per_domain: 50, speakers: 4, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let (ma, mb) =
            synth_dataset(&config, &mut ChaCha8Rng::seed_from_u64(11), dir.path()).unwrap();
        assert_eq!(ma.entries.len() + mb.entries.len(), 100);
        ma.validate(SEGMENT_FRAMES).unwrap();
        mb.validate(SEGMENT_FRAMES).unwrap();
    }

    #[test]
    fn synth_rejects_single_speaker() {
        let config = SynthConfig { speakers: 1, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            synth_dataset(&config, &mut ChaCha8Rng::seed_from_u64(12), dir.path()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"speakers": [], "entries": [], "bogus": 1}"#).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Format(_))));
    }
}
