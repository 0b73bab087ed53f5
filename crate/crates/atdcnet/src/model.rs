//! The three-branch enhancement network.
//!
//! * EDC: stem conv, three residual encoder blocks, channel-attention plus
//!   multi-stage fusion, three residual decoder blocks, sigmoid head.
//! * ATM: refines the dark-channel [`estimate_rmt`] prior through three
//!   residual blocks (widths 64, 64, 1) and gates the decoder input with
//!   D ⊙ (1 + RMT̂).
//! * DCM: three cascaded fully connected layers over the channel means,
//!   with dense concatenation, emitting per-channel coefficients in (0,2)
//!   that rescale the output.
//!
//! Every sub-network is expressed through the tape ops, so one backward
//! call differentiates the whole composite.
//!
//! [`estimate_rmt`]: crate::physics::estimate_rmt

use crate::imagio::{GrayMap, Image, ImageError};
use crate::physics::{estimate_rmt, PhysicsError};
use crate::rng::{fnv1a64, SeedStream};
use crate::tensor::{
    BnMode, BoundParams, Elem, ParamKind, ParamStore, Tape, TensorError, TensorId,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Window used when the forward pass derives the RMT prior itself.
pub const RMT_PATCH: usize = 15;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("branch input missing: {0}")]
    MissingBranchInput(&'static str),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Architecture switches. The four ablation rows toggle `use_dcm` /
/// `use_atm`; attention and fusion have their own flags.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub use_ca: bool,
    pub use_fusion: bool,
    pub use_atm: bool,
    pub use_dcm: bool,
    pub leaky_slope: f64,
    pub ca_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 64,
            encoder_blocks: 3,
            decoder_blocks: 3,
            use_ca: true,
            use_fusion: true,
            use_atm: true,
            use_dcm: true,
            leaky_slope: 0.2,
            ca_reduction: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.base_channels == 0 || self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(ModelError::InvalidConfig("zero-sized stage".into()));
        }
        if self.base_channels < self.ca_reduction || self.ca_reduction == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "base_channels {} must be >= ca_reduction {} > 0",
                self.base_channels, self.ca_reduction
            )));
        }
        if self.base_channels % self.ca_reduction != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "base_channels {} not divisible by ca_reduction {}",
                self.base_channels, self.ca_reduction
            )));
        }
        if self.use_fusion && self.encoder_blocks != 3 {
            return Err(ModelError::InvalidConfig(
                "fusion taps the first and third stage, so encoder_blocks must be 3".into(),
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "leaky_slope {} must lie in (0,1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// The four framework-ablation rows: EDC only, +DCM, +ATM, full.
    pub fn ablation_row(row: usize) -> Option<(&'static str, ModelConfig)> {
        let base = ModelConfig::default();
        match row {
            0 => Some(("edc", ModelConfig { use_dcm: false, use_atm: false, ..base })),
            1 => Some(("edc+dcm", ModelConfig { use_atm: false, ..base })),
            2 => Some(("edc+atm", ModelConfig { use_dcm: false, ..base })),
            3 => Some(("full", base)),
            _ => None,
        }
    }
}

/// Per-channel output coefficients, strictly inside (0,2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorCoeffs {
    pub mu_hat: [f32; 3],
}

/// Tape handles produced by one batched forward pass.
#[derive(Debug)]
pub struct BatchTrace {
    pub f1: TensorId,
    pub f2: TensorId,
    pub f3: TensorId,
    pub f_hat: Option<(TensorId, TensorId)>,
    pub rmt_refined: Option<TensorId>,
    pub coeffs: Option<TensorId>,
    pub output: TensorId,
}

/// Owned results of a single-image forward pass.
pub struct ForwardTrace {
    pub f1: Vec<f32>,
    pub f2: Vec<f32>,
    pub f3: Vec<f32>,
    pub f_hat: Option<(Vec<f32>, Vec<f32>)>,
    pub rmt_prior: Option<GrayMap>,
    pub rmt_refined: Option<GrayMap>,
    pub coeffs: Option<ColorCoeffs>,
    pub output: Image,
}

fn fan_in_uniform<E: Elem>(rng: &mut SeedStream, n: usize, fan_in: usize) -> Vec<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n)
        .map(|_| E::from_f64(rng.range_f64(-bound, bound)))
        .collect()
}

struct Init<'a, E: Elem> {
    seed: u64,
    store: &'a mut ParamStore<E>,
}

impl<E: Elem> Init<'_, E> {
    fn rng(&self, name: &str) -> SeedStream {
        SeedStream::new(self.seed).child(fnv1a64(name.as_bytes()))
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize) -> Result<(), ModelError> {
        let mut rng = self.rng(name);
        let w = fan_in_uniform(&mut rng, cout * cin * 9, cin * 9);
        self.store
            .insert(&format!("{name}.w"), vec![cout, cin, 3, 3], w, ParamKind::Trainable)?;
        self.store.insert(
            &format!("{name}.b"),
            vec![cout],
            vec![E::ZERO; cout],
            ParamKind::Trainable,
        )?;
        Ok(())
    }

    fn conv1x1(&mut self, name: &str, cout: usize, cin: usize) -> Result<(), ModelError> {
        let mut rng = self.rng(name);
        let w = fan_in_uniform(&mut rng, cout * cin, cin);
        self.store
            .insert(&format!("{name}.w"), vec![cout, cin], w, ParamKind::Trainable)?;
        self.store.insert(
            &format!("{name}.b"),
            vec![cout],
            vec![E::ZERO; cout],
            ParamKind::Trainable,
        )?;
        Ok(())
    }

    fn fc(&mut self, name: &str, dout: usize, din: usize) -> Result<(), ModelError> {
        let mut rng = self.rng(name);
        let w = fan_in_uniform(&mut rng, dout * din, din);
        self.store
            .insert(&format!("{name}.w"), vec![dout, din], w, ParamKind::Trainable)?;
        self.store.insert(
            &format!("{name}.b"),
            vec![dout],
            vec![E::ZERO; dout],
            ParamKind::Trainable,
        )?;
        Ok(())
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<(), ModelError> {
        self.store
            .insert(&format!("{name}.g"), vec![c], vec![E::ONE; c], ParamKind::Trainable)?;
        self.store
            .insert(&format!("{name}.b"), vec![c], vec![E::ZERO; c], ParamKind::Trainable)?;
        let mut stats = vec![E::ZERO; 2 * c];
        stats[c..].fill(E::ONE);
        self.store
            .insert(&format!("{name}.stats"), vec![2, c], stats, ParamKind::Stat)?;
        Ok(())
    }

    fn residual_block(&mut self, name: &str, cin: usize, cout: usize) -> Result<(), ModelError> {
        self.conv(&format!("{name}.conv1"), cout, cin)?;
        self.bn(&format!("{name}.bn1"), cout)?;
        self.conv(&format!("{name}.conv2"), cout, cout)?;
        self.bn(&format!("{name}.bn2"), cout)?;
        if cin != cout {
            self.conv1x1(&format!("{name}.proj"), cout, cin)?;
        }
        Ok(())
    }

    fn ca(&mut self, name: &str, c: usize, reduction: usize) -> Result<(), ModelError> {
        let mid = c / reduction;
        self.fc(&format!("{name}.fc1"), mid, c)?;
        self.fc(&format!("{name}.fc2"), c, mid)?;
        Ok(())
    }
}

/// Builds the named weight collection for a config. Each entry's values
/// depend only on (seed, entry name), so configs sharing a sub-network
/// initialize it identically.
pub fn init_params<E: Elem>(seed: u64, config: &ModelConfig) -> Result<ParamStore<E>, ModelError> {
    config.validate()?;
    let mut store = ParamStore::new();
    let b = config.base_channels;
    let mut init = Init { seed, store: &mut store };
    init.conv("edc.stem", b, 3)?;
    for i in 0..config.encoder_blocks {
        init.residual_block(&format!("edc.enc{i}"), b, b)?;
    }
    if config.use_ca {
        init.ca("edc.ca0", b, config.ca_reduction)?;
        init.ca("edc.ca1", b, config.ca_reduction)?;
    }
    if config.use_fusion {
        init.conv("edc.fuse", b, 3 * b)?;
    }
    for i in 0..config.decoder_blocks {
        init.residual_block(&format!("edc.dec{i}"), b, b)?;
    }
    init.conv("edc.head", 3, b)?;
    if config.use_atm {
        init.residual_block("atm.rb0", 1, b)?;
        init.residual_block("atm.rb1", b, b)?;
        init.residual_block("atm.rb2", b, 1)?;
    }
    if config.use_dcm {
        init.fc("dcm.fc0", 16, 3)?;
        init.fc("dcm.fc1", 16, 3 + 16)?;
        init.fc("dcm.fc2", 3, 3 + 16 + 16)?;
    }
    Ok(store)
}

fn pid<E: Elem>(store: &ParamStore<E>, bound: &BoundParams, name: &str) -> TensorId {
    bound.id(store.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name:?}")))
}

fn conv<E: Elem>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    bound: &BoundParams,
    name: &str,
    x: TensorId,
) -> Result<TensorId, ModelError> {
    let w = pid(store, bound, &format!("{name}.w"));
    let b = pid(store, bound, &format!("{name}.b"));
    Ok(tape.conv2d(x, w, b, 1)?)
}

fn bn<E: Elem>(
    tape: &mut Tape<E>,
    store: &mut ParamStore<E>,
    bound: &BoundParams,
    name: &str,
    x: TensorId,
    mode: BnMode,
) -> Result<TensorId, ModelError> {
    let g = pid(store, bound, &format!("{name}.g"));
    let b = pid(store, bound, &format!("{name}.b"));
    let idx = store
        .index_of(&format!("{name}.stats"))
        .unwrap_or_else(|| panic!("unknown parameter {name}.stats"));
    let stats = &mut store.entry_mut(idx).data;
    Ok(tape.batch_norm(x, g, b, stats, mode, BN_MOMENTUM, BN_EPS)?)
}

/// conv-BN-act twice, plus an identity or pointwise-projection skip.
#[allow(clippy::too_many_arguments)]
pub fn residual_block<E: Elem>(
    tape: &mut Tape<E>,
    store: &mut ParamStore<E>,
    bound: &BoundParams,
    name: &str,
    x: TensorId,
    cout: usize,
    slope: f64,
    mode: BnMode,
) -> Result<TensorId, ModelError> {
    let cin = tape.shape(x)[1];
    let c1 = conv(tape, store, bound, &format!("{name}.conv1"), x)?;
    let b1 = bn(tape, store, bound, &format!("{name}.bn1"), c1, mode)?;
    let a1 = tape.leaky_relu(b1, slope)?;
    let c2 = conv(tape, store, bound, &format!("{name}.conv2"), a1)?;
    let b2 = bn(tape, store, bound, &format!("{name}.bn2"), c2, mode)?;
    let a2 = tape.leaky_relu(b2, slope)?;
    let skip = if cin == cout {
        x
    } else {
        let w = pid(store, bound, &format!("{name}.proj.w"));
        let b = pid(store, bound, &format!("{name}.proj.b"));
        tape.conv1x1(x, w, b)?
    };
    Ok(tape.add(a2, skip)?)
}

/// Squeeze-excite attention: per-channel gates in (0,1) from the pooled
/// descriptor, multiplied back over the feature map.
pub fn channel_attention<E: Elem>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    bound: &BoundParams,
    name: &str,
    f: TensorId,
    slope: f64,
) -> Result<TensorId, ModelError> {
    let pooled = tape.global_avg_pool(f)?;
    let w1 = pid(store, bound, &format!("{name}.fc1.w"));
    let b1 = pid(store, bound, &format!("{name}.fc1.b"));
    let h = tape.fully_connected(pooled, w1, b1)?;
    let h = tape.leaky_relu(h, slope)?;
    let w2 = pid(store, bound, &format!("{name}.fc2.w"));
    let b2 = pid(store, bound, &format!("{name}.fc2.b"));
    let s = tape.fully_connected(h, w2, b2)?;
    let s = tape.sigmoid(s)?;
    Ok(tape.mul(f, s)?)
}

/// Color branch: channel means through three dense-concatenated fully
/// connected layers onto coefficients 2·sigmoid ∈ (0,2), shape [N,3].
pub fn dcm_forward<E: Elem>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    bound: &BoundParams,
    mu: TensorId,
    slope: f64,
) -> Result<TensorId, ModelError> {
    let w0 = pid(store, bound, "dcm.fc0.w");
    let b0 = pid(store, bound, "dcm.fc0.b");
    let h0 = tape.fully_connected(mu, w0, b0)?;
    let h0 = tape.leaky_relu(h0, slope)?;
    let cat1 = tape.concat_channels(&[mu, h0])?;
    let w1 = pid(store, bound, "dcm.fc1.w");
    let b1 = pid(store, bound, "dcm.fc1.b");
    let h1 = tape.fully_connected(cat1, w1, b1)?;
    let h1 = tape.leaky_relu(h1, slope)?;
    let cat2 = tape.concat_channels(&[mu, h0, h1])?;
    let w2 = pid(store, bound, "dcm.fc2.w");
    let b2 = pid(store, bound, "dcm.fc2.b");
    let z = tape.fully_connected(cat2, w2, b2)?;
    let s = tape.sigmoid(z)?;
    Ok(tape.mul_scalar(s, 2.0)?)
}

/// Transmission branch: three residual blocks (widths C, C, 1) and a
/// sigmoid, refining the prior into RMT̂ ∈ (0,1), shape [N,1,H,W].
pub fn atm_forward<E: Elem>(
    tape: &mut Tape<E>,
    store: &mut ParamStore<E>,
    bound: &BoundParams,
    config: &ModelConfig,
    rmt: TensorId,
    mode: BnMode,
) -> Result<TensorId, ModelError> {
    if tape.shape(rmt)[1] != 1 {
        return Err(ModelError::InvalidConfig(format!(
            "transmission prior must be single-channel, got {:?}",
            tape.shape(rmt)
        )));
    }
    let s = config.leaky_slope;
    let b = config.base_channels;
    let r0 = residual_block(tape, store, bound, "atm.rb0", rmt, b, s, mode)?;
    let r1 = residual_block(tape, store, bound, "atm.rb1", r0, b, s, mode)?;
    let r2 = residual_block(tape, store, bound, "atm.rb2", r1, 1, s, mode)?;
    Ok(tape.sigmoid(r2)?)
}

/// Backbone forward over a batch already on the tape.
#[allow(clippy::too_many_arguments)]
pub fn edc_forward<E: Elem>(
    tape: &mut Tape<E>,
    store: &mut ParamStore<E>,
    bound: &BoundParams,
    config: &ModelConfig,
    x: TensorId,
    rmt_refined: Option<TensorId>,
    coeffs: Option<TensorId>,
    mode: BnMode,
) -> Result<BatchTrace, ModelError> {
    if config.use_atm && rmt_refined.is_none() {
        return Err(ModelError::MissingBranchInput("refined transmission (ATM enabled)"));
    }
    if config.use_dcm && coeffs.is_none() {
        return Err(ModelError::MissingBranchInput("color coefficients (DCM enabled)"));
    }
    let s = config.leaky_slope;
    let b = config.base_channels;
    let stem = conv(tape, store, bound, "edc.stem", x)?;
    let mut stages = Vec::with_capacity(config.encoder_blocks);
    let mut cur = stem;
    for i in 0..config.encoder_blocks {
        cur = residual_block(tape, store, bound, &format!("edc.enc{i}"), cur, b, s, mode)?;
        stages.push(cur);
    }
    let (f1, f2, f3) = (stages[0], stages[config.encoder_blocks / 2], *stages.last().unwrap());

    let mut f_hat = None;
    let mut dec_in = if config.use_fusion {
        let t1 = if config.use_ca {
            channel_attention(tape, store, bound, "edc.ca0", f1, s)?
        } else {
            f1
        };
        let t3 = if config.use_ca {
            channel_attention(tape, store, bound, "edc.ca1", f3, s)?
        } else {
            f3
        };
        f_hat = Some((t1, t3));
        let cat = tape.concat_channels(&[t1, f2, t3])?;
        conv(tape, store, bound, "edc.fuse", cat)?
    } else if config.use_ca {
        channel_attention(tape, store, bound, "edc.ca1", f3, s)?
    } else {
        f3
    };

    if let Some(rmt) = rmt_refined.filter(|_| config.use_atm) {
        let gate = tape.add_scalar(rmt, 1.0)?;
        dec_in = tape.mul(dec_in, gate)?;
    }

    let mut cur = dec_in;
    for i in 0..config.decoder_blocks {
        cur = residual_block(tape, store, bound, &format!("edc.dec{i}"), cur, b, s, mode)?;
    }
    let head = conv(tape, store, bound, "edc.head", cur)?;
    let mut output = tape.sigmoid(head)?;
    if let Some(mu_hat) = coeffs.filter(|_| config.use_dcm) {
        let scaled = tape.mul(output, mu_hat)?;
        output = tape.clamp01(scaled)?;
    }
    Ok(BatchTrace {
        f1,
        f2,
        f3,
        f_hat,
        rmt_refined: rmt_refined.filter(|_| config.use_atm),
        coeffs: coeffs.filter(|_| config.use_dcm),
        output,
    })
}

/// All three branches over a batch: x is [N,3,H,W] on the tape, rmt_prior
/// (required when ATM is on) is [N,1,H,W]. The channel means feeding DCM
/// are the spatial average of x, taken on the tape.
pub fn forward_batch<E: Elem>(
    tape: &mut Tape<E>,
    store: &mut ParamStore<E>,
    bound: &BoundParams,
    config: &ModelConfig,
    x: TensorId,
    rmt_prior: Option<TensorId>,
    mode: BnMode,
) -> Result<BatchTrace, ModelError> {
    let coeffs = if config.use_dcm {
        let mu = tape.global_avg_pool(x)?;
        Some(dcm_forward(tape, store, bound, mu, config.leaky_slope)?)
    } else {
        None
    };
    let rmt_refined = if config.use_atm {
        let prior = rmt_prior.ok_or(ModelError::MissingBranchInput(
            "transmission prior (ATM enabled)",
        ))?;
        Some(atm_forward(tape, store, bound, config, prior, mode)?)
    } else {
        None
    };
    edc_forward(tape, store, bound, config, x, rmt_refined, coeffs, mode)
}

/// Single-image inference (eval-mode statistics, no gradients).
pub fn model_forward(
    store: &mut ParamStore<f32>,
    config: &ModelConfig,
    image: &Image,
) -> Result<ForwardTrace, ModelError> {
    config.validate()?;
    let (h, w) = (image.height(), image.width());
    let mut tape: Tape<f32> = Tape::new();
    let bound = BoundParams::bind(&mut tape, store, false)?;
    let x = tape.leaf(vec![1, 3, h, w], image.to_planar(), false)?;
    let rmt_prior = if config.use_atm {
        Some(estimate_rmt(image, RMT_PATCH)?)
    } else {
        None
    };
    let rmt_id = match &rmt_prior {
        Some(map) => Some(tape.leaf(vec![1, 1, h, w], map.data().to_vec(), false)?),
        None => None,
    };
    let trace = forward_batch(&mut tape, store, &bound, config, x, rmt_id, BnMode::Eval)?;
    let output = Image::from_planar_clamped(h, w, tape.value(trace.output))?;
    let coeffs = trace.coeffs.map(|id| {
        let v = tape.value(id);
        ColorCoeffs { mu_hat: [v[0], v[1], v[2]] }
    });
    let rmt_refined = match trace.rmt_refined {
        Some(id) => Some(GrayMap::new(h, w, tape.value(id).to_vec()).map_err(|e| {
            ModelError::InvalidConfig(format!("refined transmission left (0,1): {e}"))
        })?),
        None => None,
    };
    Ok(ForwardTrace {
        f1: tape.value(trace.f1).to_vec(),
        f2: tape.value(trace.f2).to_vec(),
        f3: tape.value(trace.f3).to_vec(),
        f_hat: trace
            .f_hat
            .map(|(a, b)| (tape.value(a).to_vec(), tape.value(b).to_vec())),
        rmt_prior,
        rmt_refined,
        coeffs,
        output,
    })
}
