//! Synthetic scarce-data generators and a loader for frame datasets on disk.
//!
//! A [`Dataset`] holds one tensor per item. Vector datasets store one
//! feature vector per item and give every item its own id. Frame datasets
//! store one whole video per item, shaped `[frames, height, width]`, so
//! frame blocks can be cut later without regrouping frames.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::bundle;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("labels row {row}: {message}")]
    Row { row: usize, message: String },
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Vectors,
    Frames,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// `[d]` per item for vectors, `[frames, height, width]` for videos.
    pub instances: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub video_ids: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        kind: DatasetKind,
        instances: Vec<Tensor>,
        labels: Vec<u8>,
        video_ids: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let ds = Self {
            kind,
            instances,
            labels,
            video_ids,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.instances.len();
        if self.labels.len() != n || self.video_ids.len() != n {
            return Err(DataError::Inconsistent(format!(
                "{n} instances, {} labels, {} ids",
                self.labels.len(),
                self.video_ids.len()
            )));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y > 1) {
            return Err(DataError::Inconsistent(format!("label {y} is not binary")));
        }
        if self.video_ids.iter().any(String::is_empty) {
            return Err(DataError::Inconsistent("empty video id".into()));
        }
        let rank = match self.kind {
            DatasetKind::Vectors => 1,
            DatasetKind::Frames => 3,
        };
        if let Some(first) = self.instances.first() {
            for t in &self.instances {
                if t.shape().len() != rank {
                    return Err(DataError::Inconsistent(format!(
                        "instance of rank {} in a {:?} dataset",
                        t.shape().len(),
                        self.kind
                    )));
                }
                // videos may differ in length but not in frame geometry
                let skip = if self.kind == DatasetKind::Frames { 1 } else { 0 };
                if t.shape()[skip..] != first.shape()[skip..] {
                    return Err(DataError::Inconsistent(format!(
                        "instance shape {:?} differs from {:?}",
                        t.shape(),
                        first.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// `(negatives, positives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        (self.labels.len() - pos, pos)
    }

    /// Frame `(height, width)` for frame datasets.
    pub fn frame_shape(&self) -> Option<(usize, usize)> {
        match (self.kind, self.instances.first()) {
            (DatasetKind::Frames, Some(t)) => Some((t.shape()[1], t.shape()[2])),
            _ => None,
        }
    }

    /// Items whose id is in `ids`, in dataset order.
    pub fn select_ids(&self, ids: &[String]) -> Self {
        let keep: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(self.video_ids[i].as_str()))
            .collect();
        self.select(&rows)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            kind: self.kind,
            instances: rows.iter().map(|&i| self.instances[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            video_ids: rows.iter().map(|&i| self.video_ids[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Blobs,
    SlidingLine,
}

fn default_ratio() -> f64 {
    0.5
}
fn default_dimension() -> usize {
    8
}
fn default_side() -> usize {
    32
}
fn default_frames() -> usize {
    20
}
fn default_amplitude() -> usize {
    1
}
fn default_band() -> usize {
    2
}
fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub family: Family,
    /// Instances (blobs) or videos (sliding line).
    pub n: usize,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_ratio")]
    pub positive_ratio: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Rows the band moves per frame in label-0 videos.
    #[serde(default = "default_amplitude")]
    pub motion_amplitude: usize,
    #[serde(default = "default_band")]
    pub band_height: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn blobs(n: usize, dimension: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            family: Family::Blobs,
            n,
            dimension,
            height: default_side(),
            width: default_side(),
            frames: default_frames(),
            positive_ratio: 0.5,
            noise_std,
            motion_amplitude: default_amplitude(),
            band_height: default_band(),
            seed,
        }
    }

    pub fn sliding_line(
        n: usize,
        height: usize,
        width: usize,
        frames: usize,
        noise_std: f64,
        seed: u64,
    ) -> Self {
        Self {
            family: Family::SlidingLine,
            n,
            dimension: default_dimension(),
            height,
            width,
            frames,
            positive_ratio: 0.5,
            noise_std,
            motion_amplitude: default_amplitude(),
            band_height: default_band(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if !(self.positive_ratio > 0.0 && self.positive_ratio < 1.0) {
            return bad(format!("positive_ratio {} outside (0, 1)", self.positive_ratio));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be non-negative", self.noise_std));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        match self.family {
            Family::Blobs if self.dimension == 0 => bad("dimension must be positive".into()),
            Family::SlidingLine => {
                if self.frames < 5 {
                    return bad(format!("{} frames per video, need at least 5", self.frames));
                }
                if self.band_height == 0 || self.width == 0 {
                    return bad("band_height and width must be positive".into());
                }
                let travel = self.motion_amplitude * (self.frames - 1);
                if self.height < self.band_height + travel {
                    return bad(format!(
                        "height {} cannot hold a {}-row band travelling {travel} rows",
                        self.height, self.band_height
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Number of positives, `round(n * positive_ratio)` with halves rounded
    /// away from zero.
    pub fn positive_count(&self) -> usize {
        (self.n as f64 * self.positive_ratio).round() as usize
    }
}

/// Labels with exactly `positive_count` ones, in seeded random order.
fn shuffled_labels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let pos = spec.positive_count();
    let mut labels: Vec<u8> = (0..spec.n).map(|i| u8::from(i < pos)).collect();
    labels.shuffle(rng);
    labels
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    match spec.family {
        Family::Blobs => generate_blobs(spec),
        Family::SlidingLine => generate_sliding_line_videos(spec),
    }
}

/// Two Gaussian clusters with means `-u/2` and `+u/2` for a seeded unit
/// direction `u`.
pub fn generate_blobs(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.family != Family::Blobs {
        return Err(DataError::InvalidSpec("family is not blobs".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dimension;
    let mut u: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    u.iter_mut().for_each(|v| *v /= norm);
    let labels = shuffled_labels(spec, &mut rng);
    let instances = labels
        .iter()
        .map(|&y| {
            let sign = if y == 1 { 0.5 } else { -0.5 };
            Tensor::vector(
                u.iter()
                    .map(|&ui| sign * ui + spec.noise_std * normal(&mut rng))
                    .collect(),
            )
        })
        .collect();
    let ids = (0..spec.n).map(|i| format!("blob{i:05}")).collect();
    Dataset::new(
        DatasetKind::Vectors,
        instances,
        labels,
        ids,
        format!("synthetic:blobs:seed={}", spec.seed),
    )
}

const BACKGROUND_LEVEL: f64 = 0.25;
const BAND_LEVEL: f64 = 0.85;

/// Videos of a bright horizontal band over noise. Label-0 videos move the
/// band by `motion_amplitude` rows per frame, label-1 videos keep it still.
/// Pixels are clamped to `[0, 1]`.
pub fn generate_sliding_line_videos(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.family != Family::SlidingLine {
        return Err(DataError::InvalidSpec("family is not sliding_line".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = shuffled_labels(spec, &mut rng);
    let (h, w, f) = (spec.height, spec.width, spec.frames);
    let travel = spec.motion_amplitude * (f - 1);
    let mut instances = Vec::with_capacity(spec.n);
    for &y in &labels {
        let start = rng.gen_range(0..=h - spec.band_height - travel);
        let downward = rng.gen_bool(0.5);
        let mut data = Vec::with_capacity(f * h * w);
        for t in 0..f {
            let shift = if y == 0 { spec.motion_amplitude * t } else { 0 };
            let top = if downward || y == 1 {
                start + shift
            } else {
                start + travel - shift
            };
            for r in 0..h {
                let level = if (top..top + spec.band_height).contains(&r) {
                    BAND_LEVEL
                } else {
                    BACKGROUND_LEVEL
                };
                for _ in 0..w {
                    let v = level + spec.noise_std * normal(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        instances.push(Tensor::new(vec![f, h, w], data));
    }
    let ids = (0..spec.n).map(|i| format!("video{i:04}")).collect();
    Dataset::new(
        DatasetKind::Frames,
        instances,
        labels,
        ids,
        format!("synthetic:sliding_line:seed={}", spec.seed),
    )
}

/// Sidecar describing a raw frame file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFrameHeader {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

/// Writes a `[frames, height, width]` tensor as little-endian `f64` with a
/// JSON sidecar next to it.
pub fn write_raw_video(path: &Path, video: &Tensor) -> Result<()> {
    let io = |p: &Path, e: &dyn std::fmt::Display| DataError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    let s = video.shape();
    if s.len() != 3 {
        return Err(DataError::Inconsistent(format!("video shape {s:?} is not 3-d")));
    }
    bundle::write_tensors(path, [("frames", video)]).map_err(|e| io(path, &e))?;
    let header = RawFrameHeader {
        frames: s[0],
        height: s[1],
        width: s[2],
    };
    let side = bundle::sidecar_path(path);
    fs::write(&side, serde_json::to_string(&header).expect("header serializes"))
        .map_err(|e| io(&side, &e))
}

pub fn read_raw_video(path: &Path) -> std::result::Result<Tensor, String> {
    let side = bundle::sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| format!("{}: {e}", side.display()))?;
    let header: RawFrameHeader =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", side.display()))?;
    let data = bundle::read_f64_stream(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let shape = vec![header.frames, header.height, header.width];
    Tensor::try_new(shape, data)
        .ok_or_else(|| format!("{}: length does not match the sidecar", path.display()))
}

/// Grayscale PNG frames of a directory, in file-name order.
fn read_png_directory(dir: &Path) -> std::result::Result<Tensor, String> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(format!("{}: no png frames", dir.display()));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for f in &files {
        let img = image::open(f)
            .map_err(|e| format!("{}: {e}", f.display()))?
            .into_luma16();
        let d = (img.height() as usize, img.width() as usize);
        if *dims.get_or_insert(d) != d {
            return Err(format!("{}: frame size differs from earlier frames", f.display()));
        }
        data.extend(img.pixels().map(|p| f64::from(p.0[0]) / f64::from(u16::MAX)));
    }
    let (h, w) = dims.expect("at least one frame");
    Ok(Tensor::new(vec![files.len(), h, w], data))
}

/// Rescales to `[0, 1]` by the video's own range when values fall outside it.
fn normalize_unit(video: Tensor) -> Tensor {
    let (lo, hi) = video
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo >= 0.0 && hi <= 1.0 {
        return video;
    }
    let span = hi - lo;
    if span > 0.0 {
        video.map(|v| (v - lo) / span)
    } else {
        video.map(|_| 0.0)
    }
}

/// Loads `labels_file` (`video_id,label,relative_path`, paths relative to
/// `root`). Each path is a raw frame file or a directory of PNG frames.
pub fn load_frame_dataset(root: &Path, labels_file: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(labels_file)
        .map_err(|e| DataError::Io {
            path: labels_file.display().to_string(),
            message: e.to_string(),
        })?;
    let headers = reader.headers().map_err(|e| DataError::Io {
        path: labels_file.display().to_string(),
        message: e.to_string(),
    })?;
    let expected = ["video_id", "label", "relative_path"];
    if !headers.is_empty() && headers.iter().ne(expected) {
        return Err(DataError::Row {
            row: 1,
            message: format!("header must be {}", expected.join(",")),
        });
    }
    let mut instances = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let err = |message: String| DataError::Row { row, message };
        let record = record.map_err(|e| err(e.to_string()))?;
        if record.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(err("empty video_id".into()));
        }
        let label = match &record[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label {other:?} is not 0 or 1"))),
        };
        let path = root.join(&record[2]);
        let video = if path.is_dir() {
            read_png_directory(&path)
        } else if path.is_file() {
            read_raw_video(&path)
        } else {
            Err(format!("{} does not exist", path.display()))
        }
        .map_err(err)?;
        if video.data().iter().any(|v| !v.is_finite()) {
            return Err(err(format!("{} contains non-finite values", path.display())));
        }
        instances.push(normalize_unit(video));
        labels.push(label);
        ids.push(id);
    }
    if instances.is_empty() {
        log::warn!("{} lists no videos", labels_file.display());
    }
    Dataset::new(
        DatasetKind::Frames,
        instances,
        labels,
        ids,
        format!("loaded:{}", labels_file.display()),
    )
}
