//! Synthetic multi-resolution sequence tasks and the feature container.
//!
//! An event of scale s is an s-frame burst of random unit-magnitude steps in
//! which the first third repeats as the last third: a motif, an independent
//! decoy, then the motif again. The class is carried by the repeat lag
//! (2s/3 frames), so identifying it means correlating frames that far apart;
//! every per-frame statistic is class-independent by construction. Short
//! scales repeat at short lags (fine temporal resolution), long scales at
//! lags only reachable through dilated receptive fields.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_min_len() -> usize {
    80
}
fn default_max_len() -> usize {
    120
}
fn default_scales() -> Vec<usize> {
    vec![3, 9, 15]
}
fn default_sigma() -> f64 {
    0.3
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_background() -> f64 {
    0.5
}
fn default_sequences() -> usize {
    64
}
fn default_eval_sequences() -> usize {
    16
}

/// Declarative description of a synthetic frame-labeling task. Class 0 is
/// background; classes 1..k-1 cycle through `event_scales`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_scales")]
    pub event_scales: Vec<usize>,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Target fraction of background frames.
    #[serde(default = "default_background")]
    pub background_fraction: f64,
    #[serde(default = "default_sequences")]
    pub num_sequences: usize,
    /// Held-out sequences generated with seed + 1 by consumers.
    #[serde(default = "default_eval_sequences")]
    pub num_eval_sequences: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("task.num_classes must be >= 2".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("task.input_dim must be >= 1".into()));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config(
                "task sequence length range must satisfy 2 <= min_len <= max_len".into(),
            ));
        }
        if self.event_scales.is_empty() || self.event_scales.iter().any(|&s| s == 0) {
            return Err(Error::Config("task.event_scales must be non-empty, all >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("task.noise_sigma must be >= 0".into()));
        }
        if self.amplitude <= 0.0 {
            return Err(Error::Config("task.amplitude must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::Config("task.background_fraction must be in [0, 1)".into()));
        }
        if self.num_sequences == 0 {
            return Err(Error::Config("task.num_sequences must be >= 1".into()));
        }
        Ok(())
    }

    /// Span length for an event class (class 0 is background).
    pub fn scale_of(&self, class: usize) -> usize {
        self.event_scales[(class - 1) % self.event_scales.len()]
    }

    /// Expected frame fraction per class: `background_fraction` for class 0,
    /// the rest split evenly across event classes (events are sampled with
    /// probability inversely proportional to their span).
    pub fn target_priors(&self) -> Vec<f64> {
        let k = self.num_classes;
        let mut priors = vec![self.background_fraction];
        for _ in 1..k {
            priors.push((1.0 - self.background_fraction) / (k - 1) as f64);
        }
        priors
    }

    /// Event sampling weights (proportional to 1/span, so frame shares come
    /// out equal across event classes).
    fn class_weights(&self) -> Vec<f64> {
        (1..self.num_classes).map(|c| 1.0 / self.scale_of(c) as f64).collect()
    }

    /// Mean event length under the 1/span sampling weights.
    fn mean_event_len(&self) -> f64 {
        let w = self.class_weights();
        let total: f64 = w.iter().sum();
        (self.num_classes - 1) as f64 / total
    }
}

/// A feature matrix with optional per-frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub input_dim: usize,
    /// Row-major [T x input_dim].
    pub features: Vec<f32>,
    /// Per-frame class ids, when present. Length equals T.
    pub labels: Option<Vec<i32>>,
}

impl FrameBatch {
    pub fn new(input_dim: usize, features: Vec<f32>, labels: Option<Vec<i32>>) -> Result<Self> {
        if input_dim == 0 || features.len() % input_dim != 0 {
            return Err(Error::Contract(format!(
                "feature length {} not divisible by input_dim {input_dim}",
                features.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != features.len() / input_dim {
                return Err(Error::Contract(format!(
                    "{} labels for {} frames",
                    l.len(),
                    features.len() / input_dim
                )));
            }
        }
        Ok(FrameBatch { input_dim, features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Features as f64 rows for the model input.
    pub fn feature_rows(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }

    pub fn label_indices(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| l.iter().map(|&v| v as usize).collect())
    }
}

/// Deterministically generate a dataset for a task spec. Sequences alternate
/// background gaps and class events; an event that does not fit before the
/// end of the sequence is truncated there.
pub fn generate_synthetic(spec: &TaskSpec) -> Result<Vec<FrameBatch>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let d = spec.input_dim;
    // All classes share one unit signal direction so only temporal structure
    // separates them.
    let direction: Vec<f64> = vec![1.0 / (d as f64).sqrt(); d];
    let bg = spec.background_fraction;
    let gap_mean = bg / (1.0 - bg) * spec.mean_event_len();
    let gap_cap = (2.0 * gap_mean).round() as usize;
    let weights = spec.class_weights();
    let weight_total: f64 = weights.iter().sum();

    let mut batches = Vec::with_capacity(spec.num_sequences);
    for _ in 0..spec.num_sequences {
        let t_len = rng.random_range(spec.min_len..=spec.max_len);
        let mut features = vec![0.0f64; t_len * d];
        let mut labels = vec![0i32; t_len];
        if let Some(n) = &noise {
            for f in features.iter_mut() {
                *f = n.sample(&mut rng);
            }
        }
        let mut t = 0usize;
        loop {
            let gap = if gap_cap == 0 { 0 } else { rng.random_range(0..=gap_cap) };
            t += gap;
            if t >= t_len {
                break;
            }
            let class = {
                let mut pick = rng.random_range(0.0..weight_total);
                let mut chosen = spec.num_classes - 1;
                for (i, w) in weights.iter().enumerate() {
                    if pick < *w {
                        chosen = i + 1;
                        break;
                    }
                    pick -= w;
                }
                chosen
            };
            let span = spec.scale_of(class);
            // Random unit steps over the span, then the leading motif copied
            // over the tail: the event repeats itself at lag span - motif_len
            // and carries no other class cue.
            let motif_len = (span / 3).max(1);
            let mut signs: Vec<f64> =
                (0..span).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            for i in 0..motif_len {
                signs[span - motif_len + i] = signs[i];
            }
            let fit = span.min(t_len - t);
            for (tau, sign) in signs.iter().enumerate().take(fit) {
                let value = spec.amplitude * sign;
                for (j, dir) in direction.iter().enumerate() {
                    features[(t + tau) * d + j] += value * dir;
                }
                labels[t + tau] = class as i32;
            }
            t += fit;
            if t >= t_len {
                break;
            }
        }
        let features32: Vec<f32> = features.iter().map(|&v| v as f32).collect();
        batches.push(FrameBatch::new(d, features32, Some(labels))?);
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// Feature container: little-endian binary.
//
//   magic "MSAF" | version u32 | input_dim u32 | has_labels u8
//   repeated records until EOF:
//     T u32 | features T*input_dim f32 | labels T i32 (iff has_labels)
// ---------------------------------------------------------------------------

pub const FEATURE_MAGIC: [u8; 4] = *b"MSAF";
pub const FEATURE_VERSION: u32 = 1;

/// Batches read from a container, plus non-fatal warnings (e.g. skipped
/// zero-length utterances).
#[derive(Debug)]
pub struct ReadOutcome {
    pub batches: Vec<FrameBatch>,
    pub warnings: Vec<String>,
}

pub fn write_features(path: &Path, batches: &[FrameBatch]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::EmptyInput("write_features: no batches".into()));
    }
    let input_dim = batches[0].input_dim;
    let has_labels = batches[0].labels.is_some();
    for b in batches {
        if b.input_dim != input_dim {
            return Err(Error::Contract("write_features: mixed input_dim".into()));
        }
        if b.labels.is_some() != has_labels {
            return Err(Error::Contract("write_features: mixed label presence".into()));
        }
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(input_dim as u32).to_le_bytes())?;
    w.write_all(&[has_labels as u8])?;
    for b in batches {
        w.write_all(&(b.len() as u32).to_le_bytes())?;
        for v in &b.features {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(labels) = &b.labels {
            for l in labels {
                w.write_all(&l.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) struct CountingReader<R> {
    pub(crate) inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> CountingReader<R> {
    pub(crate) fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Corruption {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    /// Returns Ok(None) on clean EOF at a record boundary.
    fn read_u32_or_eof(&mut self) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self.inner.read(&mut buf[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(Error::Corruption {
                    offset: self.offset + filled as u64,
                    msg: "truncated record header".into(),
                });
            }
            filled += n;
        }
        self.offset += 4;
        Ok(Some(u32::from_le_bytes(buf)))
    }
}

pub fn read_features(path: &Path) -> Result<ReadOutcome> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    let mut r = CountingReader { inner: BufReader::new(file), offset: 0 };

    if len < 13 {
        return Err(Error::Format(format!(
            "file too short for a feature container header ({len} bytes)"
        )));
    }
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {FEATURE_MAGIC:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact_at(&mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}, expected {FEATURE_VERSION}"
        )));
    }
    r.read_exact_at(&mut word, "input_dim")?;
    let input_dim = u32::from_le_bytes(word) as usize;
    if input_dim == 0 {
        return Err(Error::Format("input_dim 0 in header".into()));
    }
    let mut flag = [0u8; 1];
    r.read_exact_at(&mut flag, "label flag")?;
    let has_labels = match flag[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("label flag must be 0 or 1, got {other}"))),
    };

    let mut batches = Vec::new();
    let mut warnings = Vec::new();
    let mut index = 0usize;
    while let Some(t) = r.read_u32_or_eof()? {
        let t = t as usize;
        if t == 0 {
            warnings.push(format!("utterance {index} has zero frames; skipped"));
            index += 1;
            continue;
        }
        let mut features = vec![0.0f32; t * input_dim];
        let mut buf = [0u8; 4];
        for f in features.iter_mut() {
            r.read_exact_at(&mut buf, "features")?;
            *f = f32::from_le_bytes(buf);
        }
        let labels = if has_labels {
            let mut labels = vec![0i32; t];
            for l in labels.iter_mut() {
                r.read_exact_at(&mut buf, "labels")?;
                *l = i32::from_le_bytes(buf);
            }
            Some(labels)
        } else {
            None
        };
        batches.push(FrameBatch::new(input_dim, features, labels)?);
        index += 1;
    }
    Ok(ReadOutcome { batches, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskSpec {
        TaskSpec {
            num_classes: 4,
            input_dim: 6,
            min_len: 40,
            max_len: 60,
            event_scales: vec![3, 9, 15],
            noise_sigma: 0.3,
            amplitude: 1.0,
            background_fraction: 0.5,
            num_sequences: 8,
            num_eval_sequences: 2,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let mut other = spec;
        other.seed = 12;
        assert_ne!(generate_synthetic(&other).unwrap(), a);
    }

    #[test]
    fn noiseless_single_class_marks_exact_spans() {
        let spec = TaskSpec {
            num_classes: 2,
            input_dim: 3,
            min_len: 50,
            max_len: 50,
            event_scales: vec![5],
            noise_sigma: 0.0,
            amplitude: 1.0,
            background_fraction: 0.4,
            num_sequences: 4,
            num_eval_sequences: 1,
            seed: 3,
        };
        for batch in generate_synthetic(&spec).unwrap() {
            let labels = batch.labels.as_ref().unwrap();
            for t in 0..batch.len() {
                let row = &batch.features[t * 3..(t + 1) * 3];
                let energy: f32 = row.iter().map(|v| v.abs()).sum();
                if labels[t] == 0 {
                    assert_eq!(energy, 0.0, "background frame {t} has signal");
                } else {
                    assert_eq!(labels[t], 1);
                }
            }
            // Labeled runs are whole events (adjacent events may merge), or a
            // single event truncated at the end of the sequence.
            let mut run = 0;
            for t in 0..labels.len() {
                if labels[t] == 1 {
                    run += 1;
                }
                let run_ends = labels[t] == 1 && (t + 1 == labels.len() || labels[t + 1] == 0);
                if run_ends {
                    assert!(
                        run % 5 == 0 || t + 1 == labels.len(),
                        "interior run of {run} frames is not whole events"
                    );
                    run = 0;
                }
            }
        }
    }

    #[test]
    fn class_priors_match_targets() {
        let spec = TaskSpec {
            min_len: 900,
            max_len: 1100,
            num_sequences: 120,
            ..small_spec()
        };
        let batches = generate_synthetic(&spec).unwrap();
        let total: usize = batches.iter().map(|b| b.len()).sum();
        assert!(total >= 100_000, "need >= 1e5 frames, got {total}");
        let mut counts = vec![0usize; spec.num_classes];
        for b in &batches {
            for &l in b.labels.as_ref().unwrap() {
                counts[l as usize] += 1;
            }
        }
        let targets = spec.target_priors();
        for (c, (&n, target)) in counts.iter().zip(&targets).enumerate() {
            let realized = n as f64 / total as f64;
            assert!(
                (realized - target).abs() <= 0.02,
                "class {c}: realized {realized:.4} vs target {target:.4}"
            );
        }
    }

    #[test]
    fn container_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.msaf");
        let batches = generate_synthetic(&small_spec()).unwrap();
        write_features(&path, &batches).unwrap();
        let ReadOutcome { batches: back, warnings } = read_features(&path).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(back, batches);
        // Write again: the files must be byte-identical.
        let path2 = dir.path().join("data2.msaf");
        write_features(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.msaf");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.msaf");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x02\x00\x00\x00\x01").unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_record_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.msaf");
        let batch = FrameBatch::new(2, vec![1.0, 2.0, 3.0, 4.0], Some(vec![0, 1])).unwrap();
        write_features(&path, &[batch]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_features(&path) {
            Err(Error::Corruption { offset, .. }) => {
                assert!(offset > 13, "offset {offset} should be past the header");
            }
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn zero_length_utterance_is_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.msaf");
        let empty = FrameBatch::new(2, vec![], Some(vec![])).unwrap();
        let real = FrameBatch::new(2, vec![0.5, -0.5], Some(vec![1])).unwrap();
        write_features(&path, &[empty, real.clone()]).unwrap();
        let out = read_features(&path).unwrap();
        assert_eq!(out.batches, vec![real]);
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("zero frames"));
    }
}
