//! Underwater light-scattering model and the dark-channel-prior
//! transmission estimator.
//!
//! Degradation follows I_c(x) = J_c(x)·T_c(x) + A_c·(1 − T_c(x)) with
//! per-channel transmission T_c(x) = exp(−β_c·d(x)). The estimator runs
//! the classic dark-channel pipeline (window minimum over the channel
//! minimum, brightest-fraction airlight) and reports the *reverse*
//! transmission RMT = clamp(1 − T̃, 0, 1), which downstream layers refine.

use crate::imagio::{GrayMap, Image};
use crate::rng::SeedStream;

#[derive(Debug, thiserror::Error)]
pub enum PhysicsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Per-channel attenuation (1/meter) and global background light.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaterParams {
    beta: [f32; 3],
    airlight: [f32; 3],
}

impl WaterParams {
    pub fn new(beta: [f32; 3], airlight: [f32; 3]) -> Result<Self, PhysicsError> {
        if beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(PhysicsError::InvalidParam(format!(
                "attenuation {beta:?} must be positive"
            )));
        }
        if airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(PhysicsError::InvalidParam(format!(
                "airlight {airlight:?} must lie in [0,1]"
            )));
        }
        Ok(WaterParams { beta, airlight })
    }

    pub fn beta(&self) -> [f32; 3] {
        self.beta
    }

    pub fn airlight(&self) -> [f32; 3] {
        self.airlight
    }
}

/// Scene depth in meters, finite and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, PhysicsError> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(PhysicsError::ShapeMismatch(format!(
                "{} depth values for {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(PhysicsError::InvalidParam("depth must be finite and >= 0".into()));
        }
        Ok(DepthMap { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Per-channel transmission, H×W×3 interleaved, each value in (0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl TransmissionMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, PhysicsError> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(PhysicsError::ShapeMismatch(format!(
                "{} transmission values for {height}x{width}x3",
                data.len()
            )));
        }
        if data.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(PhysicsError::InvalidParam("transmission must lie in (0,1]".into()));
        }
        Ok(TransmissionMap { height, width, data })
    }

    pub fn constant(height: usize, width: usize, t: [f32; 3]) -> Result<Self, PhysicsError> {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&t);
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Pixelwise min over channels, as a [0,1] field.
    pub fn channel_min(&self) -> GrayMap {
        let data = self
            .data
            .chunks_exact(3)
            .map(|t| t[0].min(t[1]).min(t[2]))
            .collect();
        GrayMap::new(self.height, self.width, data).expect("subset of a valid map")
    }
}

/// T_c(x) = exp(−β_c·d(x)), floored at the smallest positive float so the
/// map stays strictly positive even for extreme depths.
pub fn transmission_from_depth(params: &WaterParams, depth: &DepthMap) -> TransmissionMap {
    let beta = params.beta();
    let mut data = Vec::with_capacity(depth.data().len() * 3);
    for &d in depth.data() {
        for b in beta {
            let t = (-(b as f64) * d as f64).exp() as f32;
            data.push(t.max(f32::MIN_POSITIVE).min(1.0));
        }
    }
    TransmissionMap { height: depth.height(), width: depth.width(), data }
}

fn check_extent(
    what: &'static str,
    (h1, w1): (usize, usize),
    (h2, w2): (usize, usize),
) -> Result<(), PhysicsError> {
    if (h1, w1) != (h2, w2) {
        return Err(PhysicsError::ShapeMismatch(format!(
            "{what}: {h1}x{w1} vs {h2}x{w2}"
        )));
    }
    Ok(())
}

/// Applies the scattering model: I = J·T + A·(1 − T).
pub fn degrade(
    j: &Image,
    params: &WaterParams,
    t: &TransmissionMap,
) -> Result<Image, PhysicsError> {
    check_extent("degrade", (j.height(), j.width()), (t.height(), t.width()))?;
    let a = params.airlight();
    let data: Vec<f32> = j
        .data()
        .iter()
        .zip(t.data())
        .enumerate()
        .map(|(i, (&jv, &tv))| {
            let av = a[i % 3] as f64;
            ((jv as f64) * (tv as f64) + av * (1.0 - tv as f64)).clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(j.height(), j.width(), data).map_err(|e| PhysicsError::ShapeMismatch(e.to_string()))
}

/// Inverts the scattering model with a floored denominator:
/// J = (I − A·(1 − T)) / max(T, t_floor), clamped to [0,1].
pub fn invert(
    i: &Image,
    params: &WaterParams,
    t: &TransmissionMap,
    t_floor: f32,
) -> Result<Image, PhysicsError> {
    if !(t_floor > 0.0 && t_floor < 1.0) {
        return Err(PhysicsError::InvalidParam(format!(
            "t_floor {t_floor} must lie in (0,1)"
        )));
    }
    check_extent("invert", (i.height(), i.width()), (t.height(), t.width()))?;
    let a = params.airlight();
    let data: Vec<f32> = i
        .data()
        .iter()
        .zip(t.data())
        .enumerate()
        .map(|(k, (&iv, &tv))| {
            let av = a[k % 3] as f64;
            let tv = (tv as f64).max(t_floor as f64);
            (((iv as f64) - av * (1.0 - tv)) / tv).clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(i.height(), i.width(), data).map_err(|e| PhysicsError::ShapeMismatch(e.to_string()))
}

/// Sliding-window minimum (two-pass block scan). `src` is pre-padded:
/// `dst.len() + k - 1` elements.
fn window_min(src: &[f32], k: usize, dst: &mut [f32]) {
    let m = src.len();
    debug_assert_eq!(m, dst.len() + k - 1);
    let mut prefix = vec![0f32; m];
    let mut suffix = vec![0f32; m];
    for (b, chunk) in src.chunks(k).enumerate() {
        let base = b * k;
        let mut run = f32::INFINITY;
        for (j, &v) in chunk.iter().enumerate() {
            run = run.min(v);
            prefix[base + j] = run;
        }
        let mut run = f32::INFINITY;
        for (j, &v) in chunk.iter().enumerate().rev() {
            run = run.min(v);
            suffix[base + j] = run;
        }
    }
    for (i, d) in dst.iter_mut().enumerate() {
        *d = suffix[i].min(prefix[i + k - 1]);
    }
}

/// Separable window minimum with edge replication at the borders.
fn min_filter(field: &[f32], h: usize, w: usize, patch: usize) -> Vec<f32> {
    let r = patch / 2;
    let mut rows = vec![0f32; h * w];
    let mut pad = vec![0f32; w + 2 * r];
    for y in 0..h {
        let row = &field[y * w..(y + 1) * w];
        pad[..r].fill(row[0]);
        pad[r..r + w].copy_from_slice(row);
        pad[r + w..].fill(row[w - 1]);
        window_min(&pad, patch, &mut rows[y * w..(y + 1) * w]);
    }
    let mut out = vec![0f32; h * w];
    let mut cpad = vec![0f32; h + 2 * r];
    let mut cdst = vec![0f32; h];
    for x in 0..w {
        for y in 0..h {
            cpad[r + y] = rows[y * w + x];
        }
        cpad[..r].fill(rows[x]);
        cpad[r + h..].fill(rows[(h - 1) * w + x]);
        window_min(&cpad, patch, &mut cdst);
        for y in 0..h {
            out[y * w + x] = cdst[y];
        }
    }
    out
}

fn dark_channel(i: &Image, patch: usize) -> Vec<f32> {
    let mins: Vec<f32> = i
        .data()
        .chunks_exact(3)
        .map(|px| px[0].min(px[1]).min(px[2]))
        .collect();
    min_filter(&mins, i.height(), i.width(), patch)
}

fn check_patch(patch: usize) -> Result<(), PhysicsError> {
    if patch == 0 || patch % 2 == 0 {
        return Err(PhysicsError::InvalidParam(format!(
            "patch {patch} must be odd and >= 1"
        )));
    }
    Ok(())
}

/// Background light: channel means over the brightest `fraction` of the
/// dark channel. Ties break toward lower pixel index, so the estimate is
/// deterministic.
pub fn estimate_airlight(
    i: &Image,
    patch: usize,
    fraction: f32,
) -> Result<[f32; 3], PhysicsError> {
    check_patch(patch)?;
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(PhysicsError::InvalidParam(format!(
            "fraction {fraction} must lie in (0, 0.5]"
        )));
    }
    let dark = dark_channel(i, patch);
    let npx = dark.len();
    let k = ((fraction as f64 * npx as f64).floor() as usize).clamp(1, npx);
    let mut order: Vec<usize> = (0..npx).collect();
    order.sort_by(|&a, &b| {
        dark[b]
            .partial_cmp(&dark[a])
            .expect("dark channel values are finite")
            .then(a.cmp(&b))
    });
    let mut sum = [0f64; 3];
    for &idx in &order[..k] {
        for c in 0..3 {
            sum[c] += i.data()[idx * 3 + c] as f64;
        }
    }
    Ok([
        (sum[0] / k as f64) as f32,
        (sum[1] / k as f64) as f32,
        (sum[2] / k as f64) as f32,
    ])
}

/// Reverse medium transmission: 1 minus the dark-channel transmission
/// estimate, clamped to [0,1]. High values mean heavy water between the
/// camera and the scene.
pub fn estimate_rmt(i: &Image, patch: usize) -> Result<GrayMap, PhysicsError> {
    check_patch(patch)?;
    let a = estimate_airlight(i, patch, 0.001)?;
    let denom = [
        a[0].max(0.1),
        a[1].max(0.1),
        a[2].max(0.1),
    ];
    let ratio: Vec<f32> = i
        .data()
        .chunks_exact(3)
        .map(|px| {
            (px[0] / denom[0])
                .min(px[1] / denom[1])
                .min(px[2] / denom[2])
        })
        .collect();
    // The prior's transmission estimate is 1 minus this window minimum;
    // the reverse map undoes that negation, so RMT is the minimum itself.
    let dark_ratio = min_filter(&ratio, i.height(), i.width(), patch);
    let rmt = dark_ratio.iter().map(|t| t.clamp(0.0, 1.0)).collect();
    Ok(GrayMap::new(i.height(), i.width(), rmt).expect("clamped to [0,1]"))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DepthKind {
    Ramp,
    Radial,
    Noise,
}

impl std::str::FromStr for DepthKind {
    type Err = PhysicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ramp" => Ok(DepthKind::Ramp),
            "radial" => Ok(DepthKind::Radial),
            "noise" => Ok(DepthKind::Noise),
            other => Err(PhysicsError::InvalidParam(format!(
                "depth kind {other:?}, expected ramp|radial|noise"
            ))),
        }
    }
}

impl std::fmt::Display for DepthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DepthKind::Ramp => "ramp",
            DepthKind::Radial => "radial",
            DepthKind::Noise => "noise",
        })
    }
}

/// Synthetic depth fields in [0, d_max]: a left-to-right ramp, a radial
/// bowl, or seeded smooth value noise.
pub fn make_depth(
    kind: DepthKind,
    height: usize,
    width: usize,
    d_max: f32,
    seed: u64,
) -> Result<DepthMap, PhysicsError> {
    if height == 0 || width == 0 {
        return Err(PhysicsError::ShapeMismatch(format!("{height}x{width} depth")));
    }
    if !(d_max > 0.0 && d_max.is_finite()) {
        return Err(PhysicsError::InvalidParam(format!("d_max {d_max} must be positive")));
    }
    let mut data = vec![0f32; height * width];
    match kind {
        DepthKind::Ramp => {
            let span = (width - 1).max(1) as f32;
            for y in 0..height {
                for x in 0..width {
                    data[y * width + x] = d_max * x as f32 / span;
                }
            }
        }
        DepthKind::Radial => {
            let yc = (height - 1) as f32 / 2.0;
            let xc = (width - 1) as f32 / 2.0;
            let rmax = (yc * yc + xc * xc).sqrt().max(f32::MIN_POSITIVE);
            for y in 0..height {
                for x in 0..width {
                    let dy = y as f32 - yc;
                    let dx = x as f32 - xc;
                    data[y * width + x] = d_max * (dy * dy + dx * dx).sqrt() / rmax;
                }
            }
        }
        DepthKind::Noise => {
            let cells = 4usize;
            let mut rng = SeedStream::new(seed).child(0x6465_7074_68);
            let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1))
                .map(|_| rng.uniform_f32())
                .collect();
            for y in 0..height {
                for x in 0..width {
                    let fy = if height > 1 {
                        y as f32 / (height - 1) as f32 * cells as f32
                    } else {
                        0.0
                    };
                    let fx = if width > 1 {
                        x as f32 / (width - 1) as f32 * cells as f32
                    } else {
                        0.0
                    };
                    let (cy, cx) = ((fy as usize).min(cells - 1), (fx as usize).min(cells - 1));
                    let (ty, tx) = (fy - cy as f32, fx - cx as f32);
                    let at = |yy: usize, xx: usize| lattice[yy * (cells + 1) + xx];
                    let top = at(cy, cx) * (1.0 - tx) + at(cy, cx + 1) * tx;
                    let bot = at(cy + 1, cx) * (1.0 - tx) + at(cy + 1, cx + 1) * tx;
                    data[y * width + x] = d_max * (top * (1.0 - ty) + bot * ty);
                }
            }
        }
    }
    DepthMap::new(height, width, data)
}
