//! Central-difference verification of reverse-mode gradients.
//!
//! The checker perturbs each probed input element by ±h, re-evaluates the
//! scalar loss, and compares the finite-difference slope against the
//! analytic gradient using a symmetric relative error
//! `|a - f| / max(1, |a|, |f|)`. Large tensors are probed at evenly spaced
//! indices so composite checks stay fast.

use super::tape::{Tape, TensorId};
use super::{Elem, Shape, TensorError};

/// Most elements probed per input tensor.
pub const PROBE_CAP: usize = 48;

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOutcome {
    pub max_rel: f64,
    pub probes: usize,
}

impl CheckOutcome {
    fn fold(&mut self, rel: f64) {
        self.max_rel = self.max_rel.max(rel);
        self.probes += 1;
    }
}

pub fn rel_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / 1.0f64.max(a.abs()).max(f.abs())
}

/// Indices probed for a tensor of `len` elements.
pub fn probe_indices(len: usize) -> Vec<usize> {
    if len <= PROBE_CAP {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..PROBE_CAP).map(|i| i * len / PROBE_CAP).collect();
    if *out.last().unwrap() != len - 1 {
        out.push(len - 1);
    }
    out
}

/// Compares `analytic` (one gradient vector per input, zeros where the loss
/// does not depend on the input) against central differences of `eval`.
pub fn max_rel_error<E: Elem>(
    inputs: &[(Shape, Vec<E>)],
    analytic: &[Vec<E>],
    h: f64,
    mut eval: impl FnMut(&[(Shape, Vec<E>)]) -> Result<f64, TensorError>,
) -> Result<CheckOutcome, TensorError> {
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<(Shape, Vec<E>)> = inputs.to_vec();
    let mut outcome = CheckOutcome::default();
    for (ti, grads) in analytic.iter().enumerate() {
        for k in probe_indices(grads.len()) {
            let orig = inputs[ti].1[k];
            work[ti].1[k] = E::from_f64(orig.to_f64() + h);
            let up = eval(&work)?;
            work[ti].1[k] = E::from_f64(orig.to_f64() - h);
            let down = eval(&work)?;
            work[ti].1[k] = orig;
            let fd = (up - down) / (2.0 * h);
            outcome.fold(rel_error(grads[k].to_f64(), fd));
        }
    }
    Ok(outcome)
}

/// Full check of a tape-building closure: runs backward once for the
/// analytic gradients, then probes every input with central differences.
pub fn check_tape_fn<E: Elem>(
    inputs: &[(Shape, Vec<E>)],
    h: f64,
    build: impl Fn(&mut Tape<E>, &[TensorId]) -> Result<TensorId, TensorError>,
) -> Result<CheckOutcome, TensorError> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(s, d)| tape.leaf(s.clone(), d.clone(), true))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<E>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, (_, d))| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![E::ZERO; d.len()])
        })
        .collect();
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
