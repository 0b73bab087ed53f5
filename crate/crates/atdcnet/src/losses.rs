//! Training losses: pixel ℓ2, feature-space ℓ1, and differentiable SSIM,
//! plus their weighted combination.
//!
//! Every loss is built from tape ops on `[N,3,H,W]` tensors, so the same
//! backward call that trains the network differentiates through them.

use crate::imagio::{Image, ImageError};
use crate::rng::{fnv1a64, SeedStream};
use crate::tensor::{BoundParams, Elem, ParamKind, ParamStore, Tape, TensorError, TensorId};

/// SSIM stabilizers (K1·L)² and (K2·L)² with K1=0.01, K2=0.03, range 1.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Smallest spatial extent the 11×11 SSIM window accepts.
pub const SSIM_MIN_SIDE: usize = 11;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("extractor stage {k} does not exist; {stages} stages available")]
    InvalidLayer { k: usize, stages: usize },
    #[error("{height}x{width} image is smaller than the {SSIM_MIN_SIDE}x{SSIM_MIN_SIDE} SSIM window")]
    TooSmall { height: usize, width: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Weights of the combined objective; defaults are (1, 0.01, 100).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_w: f64,
    pub gamma_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta_w: 0.01, gamma_w: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("alpha", self.alpha), ("beta_w", self.beta_w), ("gamma_w", self.gamma_w)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidBatch(format!(
                    "loss weight {name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// Paired training examples sharing one resolution.
#[derive(Clone, Debug)]
pub struct Batch {
    inputs: Vec<Image>,
    references: Vec<Image>,
}

impl Batch {
    pub fn new(inputs: Vec<Image>, references: Vec<Image>) -> Result<Self, LossError> {
        if inputs.is_empty() || inputs.len() != references.len() {
            return Err(LossError::InvalidBatch(format!(
                "{} inputs vs {} references",
                inputs.len(),
                references.len()
            )));
        }
        let (h, w) = (inputs[0].height(), inputs[0].width());
        for img in inputs.iter().chain(&references) {
            if (img.height(), img.width()) != (h, w) {
                return Err(LossError::InvalidBatch(format!(
                    "mixed resolutions {h}x{w} and {}x{}",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(Batch { inputs, references })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn height(&self) -> usize {
        self.inputs[0].height()
    }

    pub fn width(&self) -> usize {
        self.inputs[0].width()
    }

    pub fn inputs(&self) -> &[Image] {
        &self.inputs
    }

    pub fn references(&self) -> &[Image] {
        &self.references
    }

    /// Stacked planar tensor [N,3,H,W] of the degraded inputs.
    pub fn input_planar<E: Elem>(&self) -> Vec<E> {
        stack_planar(&self.inputs)
    }

    /// Stacked planar tensor [N,3,H,W] of the references.
    pub fn reference_planar<E: Elem>(&self) -> Vec<E> {
        stack_planar(&self.references)
    }
}

fn stack_planar<E: Elem>(images: &[Image]) -> Vec<E> {
    let mut out = Vec::with_capacity(images.len() * 3 * images[0].height() * images[0].width());
    for img in images {
        out.extend(img.to_planar().into_iter().map(|v| E::from_f64(v as f64)));
    }
    out
}

/// Fixed random conv stack standing in for a pretrained feature network.
/// Stage `k` halves the resolution and maps to `CHANNELS[k]` channels;
/// weights depend only on the seed, so the extractor is reproducible.
pub struct FeatureExtractor<E: Elem> {
    store: ParamStore<E>,
    seed: u64,
}

/// Output channels per extractor stage.
pub const EXTRACTOR_CHANNELS: [usize; 5] = [16, 32, 64, 64, 64];

impl<E: Elem> FeatureExtractor<E> {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (i, &cout) in EXTRACTOR_CHANNELS.iter().enumerate() {
            let name = format!("phi.stage{i}");
            let mut rng = SeedStream::new(seed).child(fnv1a64(name.as_bytes()));
            let bound = 1.0 / ((cin * 9) as f64).sqrt();
            let w: Vec<E> = (0..cout * cin * 9)
                .map(|_| E::from_f64(rng.range_f64(-bound, bound)))
                .collect();
            store
                .insert(&format!("{name}.w"), vec![cout, cin, 3, 3], w, ParamKind::Fixed)
                .expect("fresh store");
            store
                .insert(&format!("{name}.b"), vec![cout], vec![E::ZERO; cout], ParamKind::Fixed)
                .expect("fresh store");
            cin = cout;
        }
        FeatureExtractor { store, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stages(&self) -> usize {
        EXTRACTOR_CHANNELS.len()
    }

    pub fn store(&self) -> &ParamStore<E> {
        &self.store
    }

    /// Replaces the weights with externally supplied ones; names and
    /// shapes must match the built-in architecture.
    pub fn replace_store(&mut self, store: ParamStore<E>) -> Result<(), LossError> {
        for e in self.store.entries() {
            let found = store.get(&e.name).ok_or_else(|| {
                LossError::InvalidBatch(format!("extractor weights missing {}", e.name))
            })?;
            if found.shape != e.shape {
                return Err(LossError::InvalidBatch(format!(
                    "extractor entry {} has shape {:?}, expected {:?}",
                    e.name, found.shape, e.shape
                )));
            }
        }
        self.store = store;
        Ok(())
    }

    fn run(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        x: TensorId,
        k: usize,
    ) -> Result<TensorId, LossError> {
        if k >= self.stages() {
            return Err(LossError::InvalidLayer { k, stages: self.stages() });
        }
        let mut cur = x;
        for i in 0..=k {
            let w = bound_id(&self.store, bound, &format!("phi.stage{i}.w"));
            let b = bound_id(&self.store, bound, &format!("phi.stage{i}.b"));
            let c = tape.conv2d(cur, w, b, 2)?;
            cur = tape.leaky_relu(c, 0.2)?;
        }
        Ok(cur)
    }

    /// Features of `x` after stage `k` (binds the fixed weights itself).
    pub fn features(
        &self,
        tape: &mut Tape<E>,
        x: TensorId,
        k: usize,
    ) -> Result<TensorId, LossError> {
        let bound = BoundParams::bind(tape, &self.store, false)?;
        self.run(tape, &bound, x, k)
    }
}

fn bound_id<E: Elem>(store: &ParamStore<E>, bound: &BoundParams, name: &str) -> TensorId {
    bound.id(store.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name:?}")))
}

fn check_same_shape<E: Elem>(
    tape: &Tape<E>,
    op: &'static str,
    a: TensorId,
    b: TensorId,
) -> Result<(), LossError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        }
        .into());
    }
    Ok(())
}

/// Mean over the batch of the per-example Euclidean norm of the pixel
/// difference.
pub fn l2_loss<E: Elem>(
    tape: &mut Tape<E>,
    j: TensorId,
    j_ref: TensorId,
) -> Result<TensorId, LossError> {
    check_same_shape(tape, "l2_loss", j, j_ref)?;
    let d = tape.sub(j, j_ref)?;
    let sq = tape.mul(d, d)?;
    let per = tape.sum_per_example(sq)?;
    let norm = tape.sqrt(per)?;
    Ok(tape.mean_all(norm)?)
}

/// ℓ1 distance in the extractor's stage-`k` feature space, summed over
/// the batch and scaled by 1/(C·H·W) of that feature map.
pub fn perceptual_loss<E: Elem>(
    tape: &mut Tape<E>,
    j: TensorId,
    j_ref: TensorId,
    phi: &FeatureExtractor<E>,
    k: usize,
) -> Result<TensorId, LossError> {
    check_same_shape(tape, "perceptual_loss", j, j_ref)?;
    let bound = BoundParams::bind(tape, phi.store(), false)?;
    let fj = phi.run(tape, &bound, j, k)?;
    let fr = phi.run(tape, &bound, j_ref, k)?;
    let d = tape.sub(fj, fr)?;
    let a = tape.abs(d)?;
    let s = tape.sum_all(a)?;
    let dims = tape.shape(fj);
    let scale = 1.0 / (dims[1] * dims[2] * dims[3]) as f64;
    Ok(tape.mul_scalar(s, scale)?)
}

/// 1 − mean SSIM over batch, channels, and 11×11 Gaussian windows
/// (σ=1.5, valid placement, stabilizers [`SSIM_C1`], [`SSIM_C2`]).
pub fn ssim_loss<E: Elem>(
    tape: &mut Tape<E>,
    j: TensorId,
    j_ref: TensorId,
) -> Result<TensorId, LossError> {
    check_same_shape(tape, "ssim_loss", j, j_ref)?;
    let shape = tape.shape(j).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "ssim_loss",
            detail: format!("expected [N,C,H,W], got {shape:?}"),
        }
        .into());
    }
    if shape[2] < SSIM_MIN_SIDE || shape[3] < SSIM_MIN_SIDE {
        return Err(LossError::TooSmall { height: shape[2], width: shape[3] });
    }
    let mu_x = tape.gauss_blur_valid(j)?;
    let mu_y = tape.gauss_blur_valid(j_ref)?;
    let xx = tape.mul(j, j)?;
    let yy = tape.mul(j_ref, j_ref)?;
    let xy = tape.mul(j, j_ref)?;
    let mxx = tape.gauss_blur_valid(xx)?;
    let myy = tape.gauss_blur_valid(yy)?;
    let mxy = tape.gauss_blur_valid(xy)?;
    let mu_x2 = tape.mul(mu_x, mu_x)?;
    let mu_y2 = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(mxx, mu_x2)?;
    let var_y = tape.sub(myy, mu_y2)?;
    let cov = tape.sub(mxy, mu_xy)?;
    let l_num = {
        let t = tape.mul_scalar(mu_xy, 2.0)?;
        tape.add_scalar(t, SSIM_C1)?
    };
    let c_num = {
        let t = tape.mul_scalar(cov, 2.0)?;
        tape.add_scalar(t, SSIM_C2)?
    };
    let l_den = {
        let t = tape.add(mu_x2, mu_y2)?;
        tape.add_scalar(t, SSIM_C1)?
    };
    let c_den = {
        let t = tape.add(var_x, var_y)?;
        tape.add_scalar(t, SSIM_C2)?
    };
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    let ssim_map = tape.div(num, den)?;
    let mean = tape.mean_all(ssim_map)?;
    let neg = tape.mul_scalar(mean, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// Unweighted component values behind a [`total_loss`] call; absent when
/// the matching weight is zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub l2: Option<TensorId>,
    pub perceptual: Option<TensorId>,
    pub ssim: Option<TensorId>,
}

/// α·ℓ2 + β·perceptual + γ·SSIM. Zero-weight components are skipped
/// entirely, so a single unit weight reproduces that component's value
/// bit for bit.
pub fn total_loss<E: Elem>(
    tape: &mut Tape<E>,
    j: TensorId,
    j_ref: TensorId,
    phi: &FeatureExtractor<E>,
    weights: &LossWeights,
) -> Result<TensorId, LossError> {
    total_loss_with_terms(tape, j, j_ref, phi, weights).map(|(total, _)| total)
}

/// [`total_loss`] plus handles to the raw component scalars, for logging.
pub fn total_loss_with_terms<E: Elem>(
    tape: &mut Tape<E>,
    j: TensorId,
    j_ref: TensorId,
    phi: &FeatureExtractor<E>,
    weights: &LossWeights,
) -> Result<(TensorId, LossTerms), LossError> {
    weights.validate()?;
    let mut terms = LossTerms::default();
    let mut acc: Option<TensorId> = None;
    let mut push = |tape: &mut Tape<E>, term: TensorId, w: f64| -> Result<(), LossError> {
        let scaled = if w == 1.0 { term } else { tape.mul_scalar(term, w)? };
        acc = Some(match acc {
            Some(prev) => tape.add(prev, scaled)?,
            None => scaled,
        });
        Ok(())
    };
    if weights.alpha > 0.0 {
        let l2 = l2_loss(tape, j, j_ref)?;
        terms.l2 = Some(l2);
        push(tape, l2, weights.alpha)?;
    }
    if weights.beta_w > 0.0 {
        let k = phi.stages() - 1;
        let perc = perceptual_loss(tape, j, j_ref, phi, k)?;
        terms.perceptual = Some(perc);
        push(tape, perc, weights.beta_w)?;
    }
    if weights.gamma_w > 0.0 {
        let ssim = ssim_loss(tape, j, j_ref)?;
        terms.ssim = Some(ssim);
        push(tape, ssim, weights.gamma_w)?;
    }
    let total = match acc {
        Some(id) => id,
        None => tape.constant(vec![1], vec![E::ZERO])?,
    };
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use crate::tensor::gradcheck::check_tape_fn;
    use proptest::prelude::*;

    fn noise<E: Elem>(n: usize, seed: u64) -> Vec<E> {
        let mut rng = SeedStream::new(seed);
        (0..n).map(|_| E::from_f64(rng.uniform_f64())).collect()
    }

    fn scalar<E: Elem>(tape: &Tape<E>, id: crate::tensor::TensorId) -> f64 {
        tape.value(id)[0].to_f64()
    }

    #[test]
    fn l2_matches_hand_values() {
        let mut tape: Tape<f64> = Tape::new();
        // single example, single pixel, difference (0.3, 0, 0.4)
        let j = tape.constant(vec![1, 3, 1, 1], vec![0.5, 0.2, 0.9]).unwrap();
        let r = tape.constant(vec![1, 3, 1, 1], vec![0.2, 0.2, 0.5]).unwrap();
        let loss = l2_loss(&mut tape, j, r).unwrap();
        assert!((scalar(&tape, loss) - 0.5).abs() < 1e-12, "3-4-5 triangle gives norm 0.5");

        let same = l2_loss(&mut tape, j, j).unwrap();
        assert_eq!(scalar(&tape, same), 0.0);

        // doubling the difference doubles the loss
        let j2 = tape.constant(vec![1, 3, 1, 1], vec![0.8, 0.2, 1.3]).unwrap();
        let loss2 = l2_loss(&mut tape, j2, r).unwrap();
        assert!((scalar(&tape, loss2) - 1.0).abs() < 1e-12);

        // batch of two examples with norms 0.5 and 1.0 averages to 0.75
        let jb = tape
            .constant(vec![2, 3, 1, 1], vec![0.5, 0.2, 0.9, 0.8, 0.2, 1.3])
            .unwrap();
        let rb = tape
            .constant(vec![2, 3, 1, 1], vec![0.2, 0.2, 0.5, 0.2, 0.2, 0.5])
            .unwrap();
        let lb = l2_loss(&mut tape, jb, rb).unwrap();
        assert!((scalar(&tape, lb) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn extractor_is_seed_reproducible() {
        let a: FeatureExtractor<f32> = FeatureExtractor::new(9);
        let b: FeatureExtractor<f32> = FeatureExtractor::new(9);
        let c: FeatureExtractor<f32> = FeatureExtractor::new(10);
        let x_data: Vec<f32> = noise(2 * 3 * 16 * 16, 1);
        let feats = |phi: &FeatureExtractor<f32>| {
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.constant(vec![2, 3, 16, 16], x_data.clone()).unwrap();
            let f = phi.features(&mut tape, x, 4).unwrap();
            (tape.shape(f).to_vec(), tape.value(f).to_vec())
        };
        let (sa, fa) = feats(&a);
        let (_, fb) = feats(&b);
        let (_, fc) = feats(&c);
        assert_eq!(sa, vec![2, 64, 1, 1], "five stride-2 stages fold 16x16 to 1x1");
        assert_eq!(fa, fb, "same seed, same features");
        assert_ne!(fa, fc, "different seed, different features");
    }

    #[test]
    fn extractor_rejects_out_of_range_stage() {
        let phi: FeatureExtractor<f64> = FeatureExtractor::new(3);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1, 3, 8, 8], noise(3 * 64, 2)).unwrap();
        let err = phi.features(&mut tape, x, 5).unwrap_err();
        assert!(matches!(err, LossError::InvalidLayer { k: 5, stages: 5 }));
    }

    #[test]
    fn perceptual_is_zero_on_equal_and_symmetric() {
        let phi: FeatureExtractor<f64> = FeatureExtractor::new(4);
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![1, 3, 12, 12], noise(3 * 144, 3)).unwrap();
        let b = tape.constant(vec![1, 3, 12, 12], noise(3 * 144, 4)).unwrap();
        let zero = perceptual_loss(&mut tape, a, a, &phi, 4).unwrap();
        assert_eq!(scalar(&tape, zero), 0.0);
        let ab = perceptual_loss(&mut tape, a, b, &phi, 4).unwrap();
        let ba = perceptual_loss(&mut tape, b, a, &phi, 4).unwrap();
        assert_eq!(tape.value(ab), tape.value(ba), "|x-y| = |y-x| exactly");
        assert!(scalar(&tape, ab) > 0.0);
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![2, 3, 14, 13], noise(2 * 3 * 14 * 13, 5)).unwrap();
        let loss = ssim_loss(&mut tape, x, x).unwrap();
        assert_eq!(scalar(&tape, loss), 0.0);
    }

    #[test]
    fn ssim_of_constant_images_matches_the_luminance_formula() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1, 3, 16, 16], vec![0.5; 3 * 256]).unwrap();
        let y = tape.constant(vec![1, 3, 16, 16], vec![0.6; 3 * 256]).unwrap();
        let loss = ssim_loss(&mut tape, x, y).unwrap();
        // zero variances saturate the structure term; only luminance remains
        let expected = 1.0 - (2.0 * 0.5 * 0.6 + SSIM_C1) / (0.25 + 0.36 + SSIM_C1);
        assert!(
            (scalar(&tape, loss) - expected).abs() < 1e-9,
            "{} vs {expected}",
            scalar(&tape, loss)
        );
    }

    #[test]
    fn ssim_rejects_windows_larger_than_the_image() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1, 3, 10, 16], vec![0.5; 3 * 160]).unwrap();
        let err = ssim_loss(&mut tape, x, x).unwrap_err();
        assert!(matches!(err, LossError::TooSmall { height: 10, width: 16 }));
    }

    #[test]
    fn unit_alpha_total_equals_plain_l2_bitwise() {
        let phi: FeatureExtractor<f64> = FeatureExtractor::new(6);
        let mut tape: Tape<f64> = Tape::new();
        let j = tape.constant(vec![2, 3, 12, 12], noise(2 * 3 * 144, 7)).unwrap();
        let r = tape.constant(vec![2, 3, 12, 12], noise(2 * 3 * 144, 8)).unwrap();
        let w = LossWeights { alpha: 1.0, beta_w: 0.0, gamma_w: 0.0 };
        let total = total_loss(&mut tape, j, r, &phi, &w).unwrap();
        let plain = l2_loss(&mut tape, j, r).unwrap();
        assert_eq!(tape.value(total), tape.value(plain));
    }

    #[test]
    fn total_is_the_weighted_sum_of_its_components() {
        let phi: FeatureExtractor<f64> = FeatureExtractor::new(6);
        let mut tape: Tape<f64> = Tape::new();
        let j = tape.constant(vec![2, 3, 12, 12], noise(2 * 3 * 144, 7)).unwrap();
        let r = tape.constant(vec![2, 3, 12, 12], noise(2 * 3 * 144, 8)).unwrap();
        let l2_id = l2_loss(&mut tape, j, r).unwrap();
        let perc_id = perceptual_loss(&mut tape, j, r, &phi, 4).unwrap();
        let ssim_id = ssim_loss(&mut tape, j, r).unwrap();
        let (l2, perc, ssim) = (
            scalar(&tape, l2_id),
            scalar(&tape, perc_id),
            scalar(&tape, ssim_id),
        );

        let w = LossWeights::default();
        let total = total_loss(&mut tape, j, r, &phi, &w).unwrap();
        let expected = w.alpha * l2 + w.beta_w * perc + w.gamma_w * ssim;
        let got = scalar(&tape, total);
        assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{got} vs {expected}");

        // linearity in each weight
        for scale in [3.0, 0.25] {
            let ws = LossWeights {
                alpha: w.alpha * scale,
                beta_w: w.beta_w,
                gamma_w: w.gamma_w,
            };
            let t_id = total_loss(&mut tape, j, r, &phi, &ws).unwrap();
            let t = scalar(&tape, t_id);
            let want = expected + (scale - 1.0) * w.alpha * l2;
            assert!((t - want).abs() <= 1e-12 * want.abs().max(1.0));
        }

        let zero = LossWeights { alpha: 0.0, beta_w: 0.0, gamma_w: 0.0 };
        let t = total_loss(&mut tape, j, r, &phi, &zero).unwrap();
        assert_eq!(scalar(&tape, t), 0.0);

        let bad = LossWeights { alpha: -1.0, ..w };
        assert!(total_loss(&mut tape, j, r, &phi, &bad).is_err());
    }

    #[test]
    fn total_of_equal_images_is_zero() {
        let phi: FeatureExtractor<f64> = FeatureExtractor::new(6);
        let mut tape: Tape<f64> = Tape::new();
        let j = tape.constant(vec![1, 3, 12, 12], noise(3 * 144, 9)).unwrap();
        let total = total_loss(&mut tape, j, j, &phi, &LossWeights::default()).unwrap();
        assert_eq!(scalar(&tape, total), 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let phi: FeatureExtractor<f64> = FeatureExtractor::new(11);
        let shape = vec![2usize, 3, 12, 12];
        let n = 2 * 3 * 144;
        let inputs = vec![(shape.clone(), noise::<f64>(n, 12)), (shape.clone(), noise(n, 13))];

        let l2 = check_tape_fn(&inputs, 1e-5, |tape, ids| {
            l2_loss(tape, ids[0], ids[1]).map_err(|e| match e {
                LossError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        assert!(l2.max_rel < 1e-7, "l2 max rel {}", l2.max_rel);

        let perc = check_tape_fn(&inputs, 1e-5, |tape, ids| {
            perceptual_loss(tape, ids[0], ids[1], &phi, 4).map_err(|e| match e {
                LossError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        assert!(perc.max_rel < 1e-7, "perceptual max rel {}", perc.max_rel);

        let ssim = check_tape_fn(&inputs, 1e-5, |tape, ids| {
            ssim_loss(tape, ids[0], ids[1]).map_err(|e| match e {
                LossError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        assert!(ssim.max_rel < 1e-7, "ssim max rel {}", ssim.max_rel);

        let total = check_tape_fn(&inputs, 1e-5, |tape, ids| {
            total_loss(tape, ids[0], ids[1], &phi, &LossWeights::default()).map_err(|e| match e {
                LossError::Tensor(t) => t,
                other => panic!("{other}"),
            })
        })
        .unwrap();
        assert!(total.max_rel < 1e-5, "total max rel {}", total.max_rel);
    }

    #[test]
    fn batch_construction_validates() {
        let a = Image::constant(8, 8, [0.1, 0.2, 0.3]).unwrap();
        let b = Image::constant(8, 8, [0.4, 0.5, 0.6]).unwrap();
        let c = Image::constant(9, 8, [0.4, 0.5, 0.6]).unwrap();
        let batch = Batch::new(vec![a.clone(), a.clone()], vec![b.clone(), b.clone()]).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!((batch.height(), batch.width()), (8, 8));
        let planar: Vec<f32> = batch.input_planar();
        assert_eq!(planar.len(), 2 * 3 * 64);
        assert_eq!(planar[0], 0.1);
        assert_eq!(planar[64], 0.2);

        assert!(Batch::new(vec![], vec![]).is_err());
        assert!(Batch::new(vec![a.clone()], vec![b.clone(), b.clone()]).is_err());
        assert!(Batch::new(vec![a], vec![c]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn losses_are_nonnegative_and_vanish_on_equal(seed in 0u64..1000) {
            let phi: FeatureExtractor<f64> = FeatureExtractor::new(1);
            let mut tape: Tape<f64> = Tape::new();
            let j = tape.constant(vec![1, 3, 12, 12], noise(3 * 144, seed)).unwrap();
            let r = tape.constant(vec![1, 3, 12, 12], noise(3 * 144, seed + 7919)).unwrap();
            let l2_id = l2_loss(&mut tape, j, r).unwrap();
            let ssim_id = ssim_loss(&mut tape, j, r).unwrap();
            let perc_id = perceptual_loss(&mut tape, j, r, &phi, 4).unwrap();
            prop_assert!(scalar(&tape, l2_id) > 0.0, "distinct images differ in pixel space");
            prop_assert!((0.0..=2.0).contains(&scalar(&tape, ssim_id)));
            prop_assert!(scalar(&tape, perc_id) >= 0.0);
            let z = l2_loss(&mut tape, j, j).unwrap();
            prop_assert_eq!(scalar(&tape, z), 0.0);
            let zs = ssim_loss(&mut tape, j, j).unwrap();
            prop_assert_eq!(scalar(&tape, zs), 0.0);
        }
    }
}
