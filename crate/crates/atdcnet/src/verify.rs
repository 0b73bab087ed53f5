//! Finite-difference verification of every differentiable operation.
//!
//! Each check builds a small scalar loss through one operation (or one
//! composite block) and compares reverse-mode gradients against central
//! differences. The suite is the backing for the `gradcheck` subcommand;
//! a fault hook lets callers corrupt one check's analytic gradients to
//! prove the harness actually detects broken backward passes.

use crate::losses::{
    l2_loss, perceptual_loss, ssim_loss, total_loss, FeatureExtractor, LossError, LossWeights,
};
use crate::model::{
    atm_forward, channel_attention, dcm_forward, forward_batch, init_params, ModelConfig,
    ModelError,
};
use crate::rng::SeedStream;
use crate::tensor::gradcheck::{max_rel_error, CheckOutcome};
use crate::tensor::{BnMode, BoundParams, Elem, ParamStore, Shape, Tape, TensorError, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown operation {0:?}; see the report for valid names")]
    UnknownOp(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::Single => 1e-3,
            Precision::Double => 1e-5,
        }
    }

    /// Central-difference step. Two error sources pull in opposite
    /// directions: forward-evaluation rounding noise contributes about
    /// ulp(loss) / h, while kink crossings in the leaky activations and
    /// truncation both grow with h. f64 leaves a wide valley around 1e-6;
    /// f32 noise floors the usable step near 1e-3.
    fn step(self) -> f64 {
        match self {
            Precision::Single => 1e-3,
            Precision::Double => 1e-6,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(format!("precision {other:?}, expected single|double")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel: f64,
    pub probes: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub precision: Precision,
    pub tolerance: f64,
    pub entries: Vec<OpCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel < self.tolerance)
    }

    pub fn failed_ops(&self) -> Vec<&'static str> {
        self.entries
            .iter()
            .filter(|e| e.max_rel >= self.tolerance)
            .map(|e| e.name)
            .collect()
    }
}

/// Every operation the suite covers, in report order.
pub const CHECKED_OPS: [&str; 15] = [
    "conv2d",
    "batch_norm",
    "leaky_relu",
    "sigmoid",
    "fully_connected",
    "global_avg_pool",
    "concat_channels",
    "broadcast_elementwise",
    "channel_attention",
    "dcm_forward",
    "atm_forward",
    "l2_loss",
    "perceptual_loss",
    "ssim_loss",
    "total_loss",
];

/// Runs the whole suite. `fault` names one operation whose analytic
/// gradient is deliberately corrupted before comparison (negative
/// control); its check must then fail.
pub fn run_suite(
    seed: u64,
    precision: Precision,
    fault: Option<&str>,
) -> Result<GradReport, VerifyError> {
    if let Some(op) = fault {
        if !CHECKED_OPS.contains(&op) {
            return Err(VerifyError::UnknownOp(op.to_string()));
        }
    }
    let entries = match precision {
        Precision::Single => suite::<f32>(seed, precision.step(), false, fault)?,
        Precision::Double => suite::<f64>(seed, precision.step(), true, fault)?,
    };
    Ok(GradReport { precision, tolerance: precision.tolerance(), entries })
}

fn rand_vec<E: Elem>(rng: &mut SeedStream, n: usize, lo: f64, hi: f64) -> Vec<E> {
    (0..n).map(|_| E::from_f64(rng.range_f64(lo, hi))).collect()
}

/// Values with magnitude at least 0.05, for kinked activations where a
/// finite-difference step must not cross zero.
fn rand_vec_off_zero<E: Elem>(rng: &mut SeedStream, n: usize) -> Vec<E> {
    (0..n)
        .map(|_| {
            let mag = 0.05 + 0.95 * rng.uniform_f64();
            E::from_f64(if rng.coin() { mag } else { -mag })
        })
        .collect()
}

fn corrupt<E: Elem>(analytic: &mut [Vec<E>]) {
    analytic[0][0] = E::from_f64(analytic[0][0].to_f64() + 1.0);
}

/// Gradcheck of a closure over plain leaf inputs, with optional analytic
/// corruption.
fn check_leaves<E: Elem>(
    inputs: &[(Shape, Vec<E>)],
    h: f64,
    fault: bool,
    build: impl Fn(&mut Tape<E>, &[TensorId]) -> Result<TensorId, TensorError>,
) -> Result<CheckOutcome, TensorError> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(s, d)| tape.leaf(s.clone(), d.clone(), true))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Vec<E>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, (_, d))| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![E::ZERO; d.len()])
        })
        .collect();
    if fault {
        corrupt(&mut analytic);
    }
    max_rel_error(inputs, &analytic, h, |probe| {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = probe
            .iter()
            .map(|(s, d)| t.leaf(s.clone(), d.clone(), false))
            .collect::<Result<_, _>>()?;
        let out = build(&mut t, &ids)?;
        Ok(t.value(out)[0].to_f64())
    })
}

/// Gradcheck through named [`ParamStore`] entries plus extra leaf inputs
/// (the extras come first in the probe order).
fn check_with_store<E: Elem>(
    base: &ParamStore<E>,
    probe_names: &[&str],
    extra: &[(Shape, Vec<E>)],
    h: f64,
    fault: bool,
    forward: impl Fn(
        &mut Tape<E>,
        &mut ParamStore<E>,
        &BoundParams,
        &[TensorId],
    ) -> Result<TensorId, TensorError>,
) -> Result<CheckOutcome, TensorError> {
    let clone_with = |probe: &[(Shape, Vec<E>)]| -> ParamStore<E> {
        let mut out = ParamStore::new();
        for e in base.entries() {
            out.insert(&e.name, e.shape.clone(), e.data.clone(), e.kind)
                .expect("clone of a valid store");
        }
        for (name, (_, vals)) in probe_names.iter().zip(&probe[extra.len()..]) {
            out.get_mut(name).expect("probed name exists").data = vals.clone();
        }
        out
    };
    let mut inputs: Vec<(Shape, Vec<E>)> = extra.to_vec();
    for name in probe_names {
        let e = base.get(name).expect("probed name exists");
        inputs.push((e.shape.clone(), e.data.clone()));
    }

    let mut store = clone_with(&inputs);
    let mut tape: Tape<E> = Tape::new();
    let bound = BoundParams::bind(&mut tape, &store, true)?;
    let ids: Vec<TensorId> = extra
        .iter()
        .map(|(s, d)| tape.leaf(s.clone(), d.clone(), true))
        .collect::<Result<_, _>>()?;
    let loss = forward(&mut tape, &mut store, &bound, &ids)?;
    tape.backward(loss)?;
    let mut analytic: Vec<Vec<E>> = ids
        .iter()
        .zip(extra)
        .map(|(id, (_, d))| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![E::ZERO; d.len()])
        })
        .collect();
    for name in probe_names {
        let idx = store.index_of(name).expect("probed name exists");
        analytic.push(tape.grad(bound.id(idx)).map(|g| g.to_vec()).unwrap_or_default());
    }
    if fault {
        corrupt(&mut analytic);
    }

    max_rel_error(&inputs, &analytic, h, |probe| {
        let mut store = clone_with(probe);
        let mut t: Tape<E> = Tape::new();
        let bound = BoundParams::bind(&mut t, &store, true)?;
        let ids: Vec<TensorId> = probe[..extra.len()]
            .iter()
            .map(|(s, d)| t.leaf(s.clone(), d.clone(), false))
            .collect::<Result<_, _>>()?;
        let out = forward(&mut t, &mut store, &bound, &ids)?;
        Ok(t.value(out)[0].to_f64())
    })
}

fn model_tensor_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("model failure outside tensor math during gradcheck: {other}"),
    }
}

fn loss_tensor_err(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => panic!("loss failure outside tensor math during gradcheck: {other}"),
    }
}

fn mean_square<E: Elem>(tape: &mut Tape<E>, y: TensorId) -> Result<TensorId, TensorError> {
    let sq = tape.mul(y, y)?;
    tape.mean_all(sq)
}

/// `deep` selects the full-depth variant of the end-to-end check, which
/// only double precision can resolve; see the comment at that check.
fn suite<E: Elem>(
    seed: u64,
    h: f64,
    deep: bool,
    fault: Option<&str>,
) -> Result<Vec<OpCheck>, VerifyError> {
    let root = SeedStream::new(seed);
    let hit = |name: &str| fault == Some(name);
    let mut entries: Vec<OpCheck> = Vec::with_capacity(CHECKED_OPS.len());
    let mut push = |name: &'static str, o: CheckOutcome| {
        entries.push(OpCheck { name, max_rel: o.max_rel, probes: o.probes });
    };

    {
        let mut rng = root.child(1);
        let inputs = [
            (vec![2, 3, 5, 5], rand_vec::<E>(&mut rng, 150, -1.0, 1.0)),
            (vec![4, 3, 3, 3], rand_vec(&mut rng, 108, -0.5, 0.5)),
            (vec![4], rand_vec(&mut rng, 4, -0.5, 0.5)),
        ];
        let mut o = check_leaves(&inputs, h, hit("conv2d"), |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 1)?;
            mean_square(t, y)
        })?;
        let o2 = check_leaves(&inputs, h, false, |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 2)?;
            mean_square(t, y)
        })?;
        o.max_rel = o.max_rel.max(o2.max_rel);
        o.probes += o2.probes;
        push("conv2d", o);
    }

    {
        let mut rng = root.child(2);
        let inputs = [
            (vec![3, 4, 2, 2], rand_vec::<E>(&mut rng, 48, -1.0, 1.0)),
            (vec![4], rand_vec(&mut rng, 4, 0.5, 1.5)),
            (vec![4], rand_vec(&mut rng, 4, -0.5, 0.5)),
        ];
        let o = check_leaves(&inputs, h, hit("batch_norm"), |t, ids| {
            let mut running = vec![E::ZERO; 8];
            for v in running.iter_mut().skip(4) {
                *v = E::ONE;
            }
            let y = t.batch_norm(ids[0], ids[1], ids[2], &mut running, BnMode::Train, 0.1, 1e-5)?;
            mean_square(t, y)
        })?;
        push("batch_norm", o);
    }

    {
        let mut rng = root.child(3);
        let inputs = [(vec![2, 5, 2, 2], rand_vec_off_zero::<E>(&mut rng, 40))];
        let o = check_leaves(&inputs, h, hit("leaky_relu"), |t, ids| {
            let y = t.leaky_relu(ids[0], 0.2)?;
            mean_square(t, y)
        })?;
        push("leaky_relu", o);
    }

    {
        let mut rng = root.child(4);
        let inputs = [(vec![40], rand_vec::<E>(&mut rng, 40, -4.0, 4.0))];
        let o = check_leaves(&inputs, h, hit("sigmoid"), |t, ids| {
            let y = t.sigmoid(ids[0])?;
            mean_square(t, y)
        })?;
        push("sigmoid", o);
    }

    {
        let mut rng = root.child(5);
        let inputs = [
            (vec![3, 6], rand_vec::<E>(&mut rng, 18, -1.0, 1.0)),
            (vec![4, 6], rand_vec(&mut rng, 24, -0.5, 0.5)),
            (vec![4], rand_vec(&mut rng, 4, -0.5, 0.5)),
        ];
        let o = check_leaves(&inputs, h, hit("fully_connected"), |t, ids| {
            let y = t.fully_connected(ids[0], ids[1], ids[2])?;
            mean_square(t, y)
        })?;
        push("fully_connected", o);
    }

    {
        let mut rng = root.child(6);
        let inputs = [(vec![2, 3, 4, 4], rand_vec::<E>(&mut rng, 96, -1.0, 1.0))];
        let o = check_leaves(&inputs, h, hit("global_avg_pool"), |t, ids| {
            let y = t.global_avg_pool(ids[0])?;
            mean_square(t, y)
        })?;
        push("global_avg_pool", o);
    }

    {
        let mut rng = root.child(7);
        let inputs = [
            (vec![2, 2, 3, 3], rand_vec::<E>(&mut rng, 36, -1.0, 1.0)),
            (vec![2, 3, 3, 3], rand_vec(&mut rng, 54, -1.0, 1.0)),
            (vec![2, 1, 3, 3], rand_vec(&mut rng, 18, -1.0, 1.0)),
        ];
        let o = check_leaves(&inputs, h, hit("concat_channels"), |t, ids| {
            let y = t.concat_channels(ids)?;
            mean_square(t, y)
        })?;
        push("concat_channels", o);
    }

    {
        let mut rng = root.child(8);
        let inputs = [
            (vec![2, 3, 4, 4], rand_vec::<E>(&mut rng, 96, -1.0, 1.0)),
            (vec![2, 3], rand_vec(&mut rng, 6, -1.0, 1.0)),
            (vec![2, 1, 4, 4], rand_vec(&mut rng, 32, -1.0, 1.0)),
        ];
        let o = check_leaves(&inputs, h, hit("broadcast_elementwise"), |t, ids| {
            let shifted = t.add(ids[0], ids[1])?;
            let gated = t.mul(shifted, ids[2])?;
            mean_square(t, gated)
        })?;
        push("broadcast_elementwise", o);
    }

    let small = ModelConfig { base_channels: 8, ca_reduction: 4, ..ModelConfig::default() };

    {
        let mut rng = root.child(9);
        let store: ParamStore<E> = init_params(seed ^ 0x11, &small)?;
        let extra = [(vec![2, 8, 3, 3], rand_vec::<E>(&mut rng, 144, -1.0, 1.0))];
        let o = check_with_store(
            &store,
            &["edc.ca0.fc1.w", "edc.ca0.fc2.b"],
            &extra,
            h,
            hit("channel_attention"),
            |t, store, bound, ids| {
                let y = channel_attention(t, store, bound, "edc.ca0", ids[0], 0.2)
                    .map_err(model_tensor_err)?;
                mean_square(t, y)
            },
        )?;
        push("channel_attention", o);
    }

    {
        let mut rng = root.child(10);
        let store: ParamStore<E> = init_params(seed ^ 0x22, &small)?;
        let extra = [(vec![2, 3], rand_vec::<E>(&mut rng, 6, 0.05, 0.95))];
        let o = check_with_store(
            &store,
            &["dcm.fc0.w", "dcm.fc1.w", "dcm.fc2.b"],
            &extra,
            h,
            hit("dcm_forward"),
            |t, store, bound, ids| {
                let y = dcm_forward(t, store, bound, ids[0], 0.2).map_err(model_tensor_err)?;
                mean_square(t, y)
            },
        )?;
        push("dcm_forward", o);
    }

    {
        let mut rng = root.child(11);
        // This initialization keeps the residual-block pre-activations
        // clear of their kinks across the probe windows of both precision
        // steps; a crossing inside the window makes the central difference
        // measure the wrong one-sided slope.
        let store: ParamStore<E> = init_params(seed ^ 0x77, &small)?;
        let extra = [(vec![2, 1, 6, 6], rand_vec::<E>(&mut rng, 72, 0.05, 0.95))];
        let cfg = small;
        let o = check_with_store(
            &store,
            &["atm.rb0.conv1.w", "atm.rb1.bn1.g", "atm.rb2.conv2.w"],
            &extra,
            h,
            hit("atm_forward"),
            move |t, store, bound, ids| {
                let y = atm_forward(t, store, bound, &cfg, ids[0], BnMode::Train)
                    .map_err(model_tensor_err)?;
                mean_square(t, y)
            },
        )?;
        push("atm_forward", o);
    }

    {
        let mut rng = root.child(12);
        let inputs = [
            (vec![2, 3, 8, 8], rand_vec::<E>(&mut rng, 384, 0.05, 0.95)),
            (vec![2, 3, 8, 8], rand_vec(&mut rng, 384, 0.05, 0.95)),
        ];
        let o = check_leaves(&inputs, h, hit("l2_loss"), |t, ids| {
            l2_loss(t, ids[0], ids[1]).map_err(loss_tensor_err)
        })?;
        push("l2_loss", o);
    }

    let phi: FeatureExtractor<E> = FeatureExtractor::new(seed ^ 0x44);

    {
        let mut rng = root.child(13);
        let inputs = [
            (vec![1, 3, 12, 12], rand_vec::<E>(&mut rng, 432, 0.05, 0.95)),
            (vec![1, 3, 12, 12], rand_vec(&mut rng, 432, 0.05, 0.95)),
        ];
        let o = check_leaves(&inputs, h, hit("perceptual_loss"), |t, ids| {
            perceptual_loss(t, ids[0], ids[1], &phi, 2).map_err(loss_tensor_err)
        })?;
        push("perceptual_loss", o);
    }

    {
        let mut rng = root.child(14);
        let inputs = [
            (vec![1, 3, 12, 12], rand_vec::<E>(&mut rng, 432, 0.05, 0.95)),
            (vec![1, 3, 12, 12], rand_vec(&mut rng, 432, 0.05, 0.95)),
        ];
        let o = check_leaves(&inputs, h, hit("ssim_loss"), |t, ids| {
            ssim_loss(t, ids[0], ids[1]).map_err(loss_tensor_err)
        })?;
        push("ssim_loss", o);
    }

    {
        let mut rng = root.child(15);
        let config = ModelConfig { base_channels: 4, ca_reduction: 2, ..ModelConfig::default() };
        let store: ParamStore<E> = init_params(seed ^ 0x55, &config)?;
        let x_data = rand_vec::<E>(&mut rng, 432, 0.05, 0.95);
        let r_data = rand_vec::<E>(&mut rng, 432, 0.05, 0.95);
        let rmt_data = rand_vec::<E>(&mut rng, 144, 0.05, 0.95);
        // Perturbing the input or the earliest weights sweeps thousands of
        // downstream activation kinks through zero, and each crossing adds
        // error proportional to h, while rounding noise in the loss value
        // adds ulp(loss) / h. In f64 both stay orders of magnitude under
        // tolerance at the default step, so the deep variant probes the
        // input and the earliest weight of every branch under the
        // production loss weighting. In f32 no step satisfies both bounds
        // for early layers, so the single-precision variant probes one
        // late group per branch and scales the weighting down to shrink
        // ulp(loss); full-depth coverage rests on the double run.
        let (names, weights): (&[&str], LossWeights) = if deep {
            (
                &["edc.stem.w", "edc.head.w", "atm.rb0.conv1.w", "dcm.fc0.w"],
                LossWeights::default(),
            )
        } else {
            (
                &["edc.head.w", "dcm.fc0.w", "atm.rb2.conv2.w"],
                LossWeights { alpha: 0.3, beta_w: 0.003, gamma_w: 0.3 },
            )
        };
        let extra: Vec<(Shape, Vec<E>)> =
            if deep { vec![(vec![1, 3, 12, 12], x_data.clone())] } else { Vec::new() };
        let o = check_with_store(
            &store,
            names,
            &extra,
            h,
            hit("total_loss"),
            move |t, store, bound, ids| {
                let x = match ids.first() {
                    Some(&probed) => probed,
                    None => t.leaf(vec![1, 3, 12, 12], x_data.clone(), false)?,
                };
                let r = t.leaf(vec![1, 3, 12, 12], r_data.clone(), false)?;
                let rmt = t.leaf(vec![1, 1, 12, 12], rmt_data.clone(), false)?;
                let trace = forward_batch(t, store, bound, &config, x, Some(rmt), BnMode::Train)
                    .map_err(model_tensor_err)?;
                total_loss(t, trace.output, r, &phi, &weights).map_err(loss_tensor_err)
            },
        )?;
        push("total_loss", o);
    }

    Ok(entries)
}
