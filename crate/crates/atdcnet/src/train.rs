//! Synthetic paired data, the training loop, checkpointing, and
//! evaluation.
//!
//! Everything is deterministic from the config seed: dataset contents,
//! shuffles, crops, flips, weight init, and optimizer state. Checkpoints
//! capture the full loop state (weights, running statistics, optimizer
//! moments, RNG position), so interrupted training resumes bit-exactly.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::imagio::{load_image, Image, ImageError};
use crate::losses::{
    total_loss_with_terms, Batch, FeatureExtractor, LossError, LossWeights, SSIM_MIN_SIDE,
};
use crate::metrics::{MetricError, MetricReport};
use crate::model::{
    forward_batch, init_params, model_forward, ModelConfig, ModelError, RMT_PATCH,
};
use crate::physics::{
    degrade, estimate_rmt, make_depth, transmission_from_depth, DepthKind, PhysicsError,
    WaterParams,
};
use crate::rng::{fnv1a64, SeedStream};
use crate::tensor::{
    adam_step, AdamParams, AdamState, BnMode, BoundParams, ParamKind, ParamStore, Tape,
    TensorError,
};

const CKPT_MAGIC: &[u8; 4] = b"ATDC";
const CKPT_VERSION: u32 = 1;
/// Stream tag separating the training loop's draws from dataset synthesis.
const TRAIN_STREAM: u64 = 0x7472_6169_6e21;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    ChecksumMismatch,
    #[error("checkpoint version {0} is not supported (expected {CKPT_VERSION})")]
    VersionUnsupported(u32),
    #[error("checkpoint layout is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the requested model: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Per-channel sampling intervals for synthetic water. Defaults attenuate
/// red hardest and blue least, with a blue-green veil, matching how clear
/// ocean water absorbs long wavelengths first.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthRanges {
    pub beta_lo: [f32; 3],
    pub beta_hi: [f32; 3],
    pub airlight_lo: [f32; 3],
    pub airlight_hi: [f32; 3],
    pub d_max: f32,
}

impl Default for SynthRanges {
    fn default() -> Self {
        SynthRanges {
            beta_lo: [1.0, 0.5, 0.2],
            beta_hi: [2.0, 1.3, 0.8],
            airlight_lo: [0.40, 0.50, 0.55],
            airlight_hi: [0.65, 0.85, 0.90],
            d_max: 3.0,
        }
    }
}

impl SynthRanges {
    pub fn validate(&self) -> Result<(), TrainError> {
        for c in 0..3 {
            if !(self.beta_lo[c] > 0.0 && self.beta_lo[c] <= self.beta_hi[c]) {
                return Err(TrainError::InvalidRange(format!(
                    "attenuation channel {c}: [{}, {}]",
                    self.beta_lo[c], self.beta_hi[c]
                )));
            }
            let (lo, hi) = (self.airlight_lo[c], self.airlight_hi[c]);
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(TrainError::InvalidRange(format!(
                    "airlight channel {c}: [{lo}, {hi}]"
                )));
            }
        }
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(TrainError::InvalidRange(format!("d_max {}", self.d_max)));
        }
        Ok(())
    }
}

/// Ordered paired examples with stable names.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pairs: Vec<(String, Image, Image)>,
}

impl PairedDataset {
    pub fn new(pairs: Vec<(String, Image, Image)>) -> Result<Self, TrainError> {
        for (name, degraded, reference) in &pairs {
            if (degraded.height(), degraded.width()) != (reference.height(), reference.width()) {
                return Err(TrainError::InvalidConfig(format!(
                    "pair {name:?}: {}x{} degraded vs {}x{} reference",
                    degraded.height(),
                    degraded.width(),
                    reference.height(),
                    reference.width()
                )));
            }
        }
        Ok(PairedDataset { pairs })
    }

    /// Loads same-named image files from two directories, sorted by name.
    pub fn from_dirs(degraded: &Path, reference: &Path) -> Result<Self, TrainError> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(degraded)?
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut pairs = Vec::with_capacity(names.len());
        for path in names {
            let file = path.file_name().expect("listed entries have names");
            let twin = reference.join(file);
            if !twin.exists() {
                return Err(TrainError::InvalidConfig(format!(
                    "no reference for {}",
                    file.to_string_lossy()
                )));
            }
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| file.to_string_lossy().into_owned());
            pairs.push((name, load_image(&path)?, load_image(&twin)?));
        }
        Self::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, idx: usize) -> &(String, Image, Image) {
        &self.pairs[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Image, Image)> {
        self.pairs.iter()
    }

    /// Deterministic shuffle order for one epoch.
    pub fn shuffled_indices(&self, rng: &mut SeedStream) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        rng.shuffle(&mut order);
        order
    }
}

/// One synthetic example with the water column that degraded it.
pub struct SynthExample {
    pub clean: Image,
    pub degraded: Image,
    pub water: WaterParams,
}

fn value_noise_layer(rng: &mut SeedStream, size: usize, lattice: usize) -> Vec<f32> {
    let lat: Vec<f32> = (0..lattice * lattice * 3).map(|_| rng.uniform_f32()).collect();
    let mut out = vec![0f32; size * size * 3];
    let scale = (lattice - 1) as f32 / (size - 1).max(1) as f32;
    for y in 0..size {
        let fy = y as f32 * scale;
        let y0 = (fy as usize).min(lattice - 2);
        let ty = fy - y0 as f32;
        for x in 0..size {
            let fx = x as f32 * scale;
            let x0 = (fx as usize).min(lattice - 2);
            let tx = fx - x0 as f32;
            for c in 0..3 {
                let at = |yy: usize, xx: usize| lat[(yy * lattice + xx) * 3 + c];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[(y * size + x) * 3 + c] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn paint_shapes(rng: &mut SeedStream, size: usize, data: &mut [f32]) {
    let shapes = 2 + rng.below(3);
    for _ in 0..shapes {
        let color = [rng.uniform_f32(), rng.uniform_f32(), rng.uniform_f32()];
        let alpha = 0.4 + 0.4 * rng.uniform_f32();
        let disc = rng.coin();
        let (cy, cx) = (rng.below(size), rng.below(size));
        let r = size / 8 + rng.below((size / 4).max(1));
        let (h, w) = (
            size / 8 + rng.below((size * 3 / 8).max(1)),
            size / 8 + rng.below((size * 3 / 8).max(1)),
        );
        for y in 0..size {
            for x in 0..size {
                let inside = if disc {
                    let (dy, dx) = (y as i64 - cy as i64, x as i64 - cx as i64);
                    (dy * dy + dx * dx) as usize <= r * r
                } else {
                    y >= cy && y < (cy + h).min(size) && x >= cx && x < (cx + w).min(size)
                };
                if inside {
                    for c in 0..3 {
                        let px = &mut data[(y * size + x) * 3 + c];
                        *px = (1.0 - alpha) * *px + alpha * color[c];
                    }
                }
            }
        }
    }
}

/// Clean procedural scene: a multi-octave value-noise color field with
/// alpha-blended rectangles and discs.
pub fn synth_clean(rng: &mut SeedStream, size: usize) -> Result<Image, TrainError> {
    if size < 16 {
        return Err(TrainError::InvalidConfig(format!(
            "scene size {size} is below the 16-pixel minimum"
        )));
    }
    let octaves: [(usize, f32); 3] = [(3, 1.0), (5, 0.5), (9, 0.25)];
    let mut field = vec![0f32; size * size * 3];
    let mut total = 0f32;
    for (lattice, amp) in octaves {
        let layer = value_noise_layer(rng, size, lattice);
        for (acc, v) in field.iter_mut().zip(layer) {
            *acc += amp * v;
        }
        total += amp;
    }
    for v in &mut field {
        *v /= total;
    }
    paint_shapes(rng, size, &mut field);
    Ok(Image::new(size, size, field)?)
}

/// Clean/degraded pair drawn from one stream: a procedural scene pushed
/// through the scattering model with water sampled from `ranges`.
pub fn synth_example(
    rng: &mut SeedStream,
    size: usize,
    ranges: &SynthRanges,
) -> Result<SynthExample, TrainError> {
    let clean = synth_clean(rng, size)?;

    let mut beta = [0f32; 3];
    let mut airlight = [0f32; 3];
    for c in 0..3 {
        beta[c] = rng.range_f32(ranges.beta_lo[c], ranges.beta_hi[c]);
        airlight[c] = rng.range_f32(ranges.airlight_lo[c], ranges.airlight_hi[c]);
    }
    let water = WaterParams::new(beta, airlight)?;
    let kind = match rng.below(3) {
        0 => DepthKind::Ramp,
        1 => DepthKind::Radial,
        _ => DepthKind::Noise,
    };
    let depth = make_depth(kind, size, size, ranges.d_max, rng.next_u64())?;
    let t = transmission_from_depth(&water, &depth);
    let degraded = degrade(&clean, &water, &t)?;
    Ok(SynthExample { clean, degraded, water })
}

/// `count` synthetic pairs (degraded, clean), deterministic from `seed`.
pub fn make_synthetic_dataset(
    seed: u64,
    count: usize,
    size: usize,
    ranges: &SynthRanges,
) -> Result<PairedDataset, TrainError> {
    if count == 0 {
        return Err(TrainError::InvalidRange("count must be at least 1".into()));
    }
    if size < 16 {
        return Err(TrainError::InvalidRange(format!("size {size} is below 16")));
    }
    ranges.validate()?;
    let root = SeedStream::new(seed);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = root.child(i as u64);
        let ex = synth_example(&mut rng, size, ranges)?;
        pairs.push((format!("synth_{i:03}"), ex.degraded, ex.clean));
    }
    PairedDataset::new(pairs)
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        count: usize,
        size: usize,
        #[serde(default)]
        ranges: SynthRanges,
    },
    Dirs { degraded: PathBuf, reference: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic { count: 200, size: 64, ranges: SynthRanges::default() }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub crop_size: usize,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 50,
            batch_size: 4,
            learning_rate: 2e-4,
            crop_size: 64,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.crop_size < 16 || self.crop_size < SSIM_MIN_SIDE {
            return Err(TrainError::InvalidConfig(format!(
                "crop_size {} is below the 16-pixel minimum",
                self.crop_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {}",
                self.learning_rate
            )));
        }
        self.weights.validate()?;
        self.model
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if let DatasetSpec::Synthetic { count, size, ranges } = &self.dataset {
            if *count == 0 {
                return Err(TrainError::InvalidConfig("dataset count must be at least 1".into()));
            }
            if *size < self.crop_size {
                return Err(TrainError::InvalidConfig(format!(
                    "dataset size {size} is smaller than crop_size {}",
                    self.crop_size
                )));
            }
            ranges.validate()?;
        }
        Ok(())
    }

    pub fn build_dataset(&self) -> Result<PairedDataset, TrainError> {
        match &self.dataset {
            DatasetSpec::Synthetic { count, size, ranges } => {
                make_synthetic_dataset(self.seed, *count, *size, ranges)
            }
            DatasetSpec::Dirs { degraded, reference } => {
                PairedDataset::from_dirs(degraded, reference)
            }
        }
    }
}

/// Everything a checkpoint stores besides the tensors.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: usize,
    pub train_seed: u64,
}

/// A loaded checkpoint: weights, optimizer moments, and the RNG position
/// of the training loop at the save point.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore<f32>,
    pub opt: Option<AdamState<f32>>,
    pub rng: SeedStream,
}

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn push_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TrainError::Corrupt(format!("section at byte {} runs past the end", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, TrainError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, TrainError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| {
            TrainError::Corrupt("tensor length overflows".into())
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

fn kind_to_byte(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Trainable => 0,
        ParamKind::Fixed => 1,
        ParamKind::Stat => 2,
    }
}

fn kind_from_byte(b: u8) -> Result<ParamKind, TrainError> {
    match b {
        0 => Ok(ParamKind::Trainable),
        1 => Ok(ParamKind::Fixed),
        2 => Ok(ParamKind::Stat),
        other => Err(TrainError::Corrupt(format!("unknown parameter kind {other}"))),
    }
}

/// Serializes weights + optimizer + RNG into the "ATDC" container and
/// writes it atomically (temp file + rename).
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    opt: Option<&AdamState<f32>>,
    meta: &CheckpointMeta,
    rng: &SeedStream,
) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    push_u32(&mut buf, CKPT_VERSION);
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    push_u64(&mut buf, meta_json.len() as u64);
    buf.extend_from_slice(&meta_json);

    push_u32(&mut buf, store.len() as u32);
    for e in store.entries() {
        push_u16(&mut buf, e.name.len() as u16);
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(kind_to_byte(e.kind));
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            push_u64(&mut buf, d as u64);
        }
        push_f32s(&mut buf, &e.data);
    }

    match opt {
        Some(state) => {
            buf.push(1);
            push_u64(&mut buf, state.step);
            push_u32(&mut buf, state.m.len() as u32);
            for (m, v) in state.m.iter().zip(&state.v) {
                push_u64(&mut buf, m.len() as u64);
                push_f32s(&mut buf, m);
                push_f32s(&mut buf, v);
            }
        }
        None => buf.push(0),
    }

    let (seed, word_pos) = rng.state();
    buf.extend_from_slice(&seed);
    buf.extend_from_slice(&word_pos.to_le_bytes());

    let checksum = fnv1a64(&buf);
    push_u64(&mut buf, checksum);

    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(TrainError::ChecksumMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(TrainError::ChecksumMismatch);
    }
    let mut cur = Cursor { bytes: body, at: 0 };
    if cur.take(4)? != CKPT_MAGIC {
        return Err(TrainError::Corrupt("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(TrainError::VersionUnsupported(version));
    }
    let meta_len = cur.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| TrainError::Corrupt(format!("meta: {e}")))?;

    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| TrainError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let kind = kind_from_byte(cur.take(1)?[0])?;
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = cur.f32s(numel)?;
        store
            .insert(&name, shape, data, kind)
            .map_err(|e| TrainError::Corrupt(e.to_string()))?;
    }

    let opt = match cur.take(1)?[0] {
        0 => None,
        1 => {
            let step = cur.u64()?;
            let entries = cur.u32()? as usize;
            if entries != store.len() {
                return Err(TrainError::Corrupt(format!(
                    "{entries} optimizer entries for {} tensors",
                    store.len()
                )));
            }
            let mut m = Vec::with_capacity(entries);
            let mut v = Vec::with_capacity(entries);
            for _ in 0..entries {
                let len = cur.u64()? as usize;
                m.push(cur.f32s(len)?);
                v.push(cur.f32s(len)?);
            }
            Some(AdamState { step, m, v })
        }
        other => return Err(TrainError::Corrupt(format!("optimizer flag {other}"))),
    };

    let seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let word_pos = cur.u128()?;
    if !cur.done() {
        return Err(TrainError::Corrupt("trailing bytes after RNG state".into()));
    }
    Ok(Checkpoint { meta, store, opt, rng: SeedStream::from_state(seed, word_pos) })
}

/// Checks that a loaded store has exactly the entries `init_params` would
/// create for `model` (same names, shapes, kinds, order).
pub fn validate_model_structure(
    store: &ParamStore<f32>,
    model: &ModelConfig,
) -> Result<(), TrainError> {
    let expected: ParamStore<f32> =
        init_params(0, model).map_err(|e| TrainError::ConfigMismatch(e.to_string()))?;
    if expected.len() != store.len() {
        return Err(TrainError::ConfigMismatch(format!(
            "{} tensors stored, model needs {}",
            store.len(),
            expected.len()
        )));
    }
    for (got, want) in store.entries().zip(expected.entries()) {
        if got.name != want.name || got.shape != want.shape || got.kind != want.kind {
            return Err(TrainError::ConfigMismatch(format!(
                "entry {:?} {:?} ({:?}) where {:?} {:?} ({:?}) was expected",
                got.name, got.shape, got.kind, want.name, want.shape, want.kind
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    pub mean_total: f64,
    pub mean_l2: f64,
    pub mean_perceptual: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line, one line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.epochs {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<TrainLog, TrainError> {
        let mut epochs = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            epochs.push(
                serde_json::from_str(line)
                    .map_err(|e| TrainError::Corrupt(format!("log line: {e}")))?,
            );
        }
        Ok(TrainLog { epochs })
    }
}

struct LoopState {
    store: ParamStore<f32>,
    adam: AdamState<f32>,
    rng: SeedStream,
    start_epoch: usize,
}

fn init_loop_state(config: &TrainConfig, resume: Option<&Path>) -> Result<LoopState, TrainError> {
    match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            validate_model_structure(&ckpt.store, &ckpt.meta.model)?;
            if ckpt.meta.model != config.model {
                return Err(TrainError::ConfigMismatch(
                    "checkpoint was trained with a different model config".into(),
                ));
            }
            if ckpt.meta.train_seed != config.seed {
                return Err(TrainError::ConfigMismatch(format!(
                    "checkpoint seed {} vs configured seed {}",
                    ckpt.meta.train_seed, config.seed
                )));
            }
            let adam = match ckpt.opt {
                Some(state) => state,
                None => AdamState::for_store(&ckpt.store),
            };
            Ok(LoopState {
                store: ckpt.store,
                adam,
                rng: ckpt.rng,
                start_epoch: ckpt.meta.epoch,
            })
        }
        None => {
            let store = init_params::<f32>(config.seed, &config.model)?;
            let adam = AdamState::for_store(&store);
            let rng = SeedStream::new(config.seed).child(TRAIN_STREAM);
            Ok(LoopState { store, adam, rng, start_epoch: 0 })
        }
    }
}

/// Crop/flip augmentation for one pair, drawn from the loop stream.
fn augment(
    rng: &mut SeedStream,
    degraded: &Image,
    reference: &Image,
    crop: usize,
) -> Result<(Image, Image), TrainError> {
    let (h, w) = (degraded.height(), degraded.width());
    let y0 = rng.below(h - crop + 1);
    let x0 = rng.below(w - crop + 1);
    let flip = rng.coin();
    let mut d = degraded.crop(y0, x0, crop, crop)?;
    let mut r = reference.crop(y0, x0, crop, crop)?;
    if flip {
        d = d.flipped_h();
        r = r.flipped_h();
    }
    Ok((d, r))
}

/// Aborts the run instead of letting a broken batch poison the weights.
/// With validated inputs and range-guarded activations every value here
/// is finite; this trips on numeric regressions, not on normal training.
fn ensure_finite_loss(
    epoch: usize,
    batch: usize,
    total: f64,
    l2: f64,
    perceptual: f64,
    ssim: f64,
) -> Result<(), TrainError> {
    if [total, l2, perceptual, ssim].iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(TrainError::NonFiniteLoss {
        epoch,
        batch,
        detail: format!("total {total}, l2 {l2}, perceptual {perceptual}, ssim {ssim}"),
    })
}

fn run_batch(
    config: &TrainConfig,
    phi: &FeatureExtractor<f32>,
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    hp: AdamParams,
    batch: &Batch,
    epoch: usize,
    batch_idx: usize,
) -> Result<(f64, f64, f64, f64), TrainError> {
    let n = batch.len();
    let (ch, cw) = (batch.height(), batch.width());
    let mut tape: Tape<f32> = Tape::new();
    let bound = BoundParams::bind(&mut tape, store, true)?;
    let x = tape.leaf(vec![n, 3, ch, cw], batch.input_planar(), false)?;
    let r = tape.leaf(vec![n, 3, ch, cw], batch.reference_planar(), false)?;
    let rmt = if config.model.use_atm {
        let mut planar = Vec::with_capacity(n * ch * cw);
        for img in batch.inputs() {
            planar.extend_from_slice(estimate_rmt(img, RMT_PATCH)?.data());
        }
        Some(tape.leaf(vec![n, 1, ch, cw], planar, false)?)
    } else {
        None
    };
    let trace = forward_batch(&mut tape, store, &bound, &config.model, x, rmt, BnMode::Train)?;
    let (total, terms) =
        total_loss_with_terms(&mut tape, trace.output, r, phi, &config.weights)?;
    let value = |id: Option<crate::tensor::TensorId>| -> f64 {
        id.map(|id| tape.value(id)[0] as f64).unwrap_or(0.0)
    };
    let total_v = tape.value(total)[0] as f64;
    let (l2_v, perc_v, ssim_v) = (value(terms.l2), value(terms.perceptual), value(terms.ssim));
    ensure_finite_loss(epoch, batch_idx, total_v, l2_v, perc_v, ssim_v)?;
    tape.backward(total)?;
    store.zero_grads();
    bound.harvest(&tape, store);
    adam_step(store, adam, hp);
    Ok((total_v, l2_v, perc_v, ssim_v))
}

/// Full training run. Writes `latest.ckpt` after every epoch and
/// `final.ckpt` at the end; `resume` continues from a saved `latest.ckpt`
/// bit-exactly.
pub fn train(
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainLog, TrainError> {
    config.validate()?;
    let dataset = config.build_dataset()?;
    if dataset.is_empty() {
        return Err(TrainError::DatasetEmpty);
    }
    let (dh, dw) = {
        let (_, d, _) = dataset.get(0);
        (d.height(), d.width())
    };
    if dh < config.crop_size || dw < config.crop_size {
        return Err(TrainError::InvalidConfig(format!(
            "images are {dh}x{dw} but crop_size is {}",
            config.crop_size
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let phi: FeatureExtractor<f32> = FeatureExtractor::new(config.seed);
    let hp = AdamParams::with_lr(config.learning_rate);
    let LoopState { mut store, mut adam, mut rng, start_epoch } =
        init_loop_state(config, resume)?;

    let mut log = TrainLog::default();
    let meta = |epoch: usize| CheckpointMeta {
        model: config.model,
        epoch,
        train_seed: config.seed,
    };

    for epoch in start_epoch..config.epochs {
        let order = dataset.shuffled_indices(&mut rng);
        let mut sums = [0f64; 4];
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut refs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (_, degraded, reference) = dataset.get(i);
                let (d, r) = augment(&mut rng, degraded, reference, config.crop_size)?;
                inputs.push(d);
                refs.push(r);
            }
            let batch = Batch::new(inputs, refs)?;
            let (t, l2, perc, ssim) =
                run_batch(config, &phi, &mut store, &mut adam, hp, &batch, epoch, batch_idx)?;
            sums[0] += t;
            sums[1] += l2;
            sums[2] += perc;
            sums[3] += ssim;
            batches += 1;
        }
        log.epochs.push(EpochRecord {
            epoch,
            batches,
            mean_total: sums[0] / batches as f64,
            mean_l2: sums[1] / batches as f64,
            mean_perceptual: sums[2] / batches as f64,
            mean_ssim: sums[3] / batches as f64,
        });
        save_checkpoint(&out_dir.join("latest.ckpt"), &store, Some(&adam), &meta(epoch + 1), &rng)?;
    }

    let final_epoch = config.epochs.max(start_epoch);
    save_checkpoint(
        &out_dir.join("final.ckpt"),
        &store,
        Some(&adam),
        &meta(final_epoch),
        &rng,
    )?;
    Ok(log)
}

/// Runs the checkpointed model over a paired dataset in eval mode and
/// scores the outputs against the references.
pub fn evaluate(ckpt_path: &Path, dataset: &PairedDataset) -> Result<MetricReport, TrainError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    validate_model_structure(&ckpt.store, &ckpt.meta.model)?;
    let mut store = ckpt.store;
    let mut entries = Vec::with_capacity(dataset.len());
    for (name, degraded, reference) in dataset.iter() {
        let trace = model_forward(&mut store, &ckpt.meta.model, degraded)?;
        entries.push((name.clone(), trace.output, Some(reference.clone())));
    }
    Ok(MetricReport::build(&entries)?)
}
