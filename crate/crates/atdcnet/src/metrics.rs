//! Image quality metrics: reference-based MSE / PSNR / SSIM and the
//! no-reference underwater measures UIQM and UCIQE.
//!
//! Conventions pinned here (and echoed in the report's `config` block):
//! MSE and PSNR on the 0–255 scale, PSNR capped at 100 dB, UIQM block
//! statistics over full 8×8 blocks with partial edge blocks truncated,
//! asymmetric alpha-trim fractions 0.1/0.1, UCIQE in CIELAB (sRGB, D65)
//! with L* and chroma scaled by 1/100.

use crate::imagio::Image;
use crate::losses::{ssim_loss, LossError, SSIM_MIN_SIDE};
use crate::tensor::Tape;

pub const PSNR_CAP: f64 = 100.0;
/// Side of the UISM / UIConM block grid.
pub const UIQM_BLOCK: usize = 8;
/// Fraction trimmed from each tail of the sorted chroma statistics.
pub const ALPHA_TRIM: f64 = 0.1;
/// Smallest extent the UIQM block statistics accept.
pub const UIQM_MIN_SIDE: usize = 16;

const UIQM_C: [f64; 3] = [0.0282, 0.2953, 3.5753];
const UICM_MU_W: f64 = -0.0268;
const UICM_SIGMA_W: f64 = 0.1586;
const UISM_LAMBDA: [f64; 3] = [0.299, 0.587, 0.114];
const UCIQE_W: [f64; 3] = [0.4680, 0.2745, 0.2576];

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{height}x{width} image is below the {min}x{min} minimum")]
    TooSmall { height: usize, width: usize, min: usize },
}

fn check_same(a: &Image, b: &Image) -> Result<(), MetricError> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(MetricError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels on the 0–255 scale.
pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_same(a, b)?;
    let mut acc = 0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = 255.0 * (*x as f64 - *y as f64);
        acc += d * d;
    }
    Ok(acc / a.data().len() as f64)
}

/// 10·log10(255²/MSE), capped at [`PSNR_CAP`] dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / e).log10()).min(PSNR_CAP))
}

/// Mean SSIM (11×11 Gaussian window, σ=1.5, K1=0.01, K2=0.03, range 1),
/// averaged over channels and window placements. Same definition the
/// SSIM loss trains against.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    let to_f64 = |img: &Image| img.to_planar().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut tape: Tape<f64> = Tape::new();
    let ja = tape
        .constant(vec![1, 3, h, w], to_f64(a))
        .expect("image dims describe the planar buffer");
    let jb = tape
        .constant(vec![1, 3, h, w], to_f64(b))
        .expect("image dims describe the planar buffer");
    let loss = ssim_loss(&mut tape, ja, jb).map_err(|e| match e {
        LossError::TooSmall { height, width } => {
            MetricError::TooSmall { height, width, min: SSIM_MIN_SIDE }
        }
        other => MetricError::ShapeMismatch(other.to_string()),
    })?;
    Ok(1.0 - tape.value(loss)[0])
}

/// Mean after dropping the `ALPHA_TRIM` fraction from each tail
/// (ceil on the low tail, floor on the high), per the published UIQM
/// statistics.
fn alpha_trimmed_mean(sorted: &[f64]) -> f64 {
    let k = sorted.len();
    let lo = (ALPHA_TRIM * k as f64).ceil() as usize;
    let hi = k - (ALPHA_TRIM * k as f64).floor() as usize;
    let kept = &sorted[lo..hi];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn chroma_stats(vals: &[f64]) -> (f64, f64) {
    let mut sorted = vals.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mu = alpha_trimmed_mean(&sorted);
    let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64;
    (mu, var)
}

/// Colorfulness term of UIQM from the RG / YB opponent planes.
pub fn uicm(a: &Image) -> f64 {
    let n = a.height() * a.width();
    let mut rg = Vec::with_capacity(n);
    let mut yb = Vec::with_capacity(n);
    for px in a.data().chunks_exact(3) {
        let (r, g, b) = (px[0] as f64 * 255.0, px[1] as f64 * 255.0, px[2] as f64 * 255.0);
        rg.push(r - g);
        yb.push((r + g) / 2.0 - b);
    }
    let (mu_rg, var_rg) = chroma_stats(&rg);
    let (mu_yb, var_yb) = chroma_stats(&yb);
    UICM_MU_W * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + UICM_SIGMA_W * (var_rg + var_yb).sqrt()
}

/// Sobel gradient magnitude with replicated edges.
fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        plane[yy * w + xx]
    };
    let mut out = vec![0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Folds `f(block_min, block_max)` over full 8×8 blocks, averaged with
/// `weight_num / block_count`. Partial edge blocks are truncated.
fn block_fold(plane: &[f64], h: usize, w: usize, weight_num: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
    let (by, bx) = (h / UIQM_BLOCK, w / UIQM_BLOCK);
    let mut acc = 0f64;
    for iy in 0..by {
        for ix in 0..bx {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in iy * UIQM_BLOCK..(iy + 1) * UIQM_BLOCK {
                for x in ix * UIQM_BLOCK..(ix + 1) * UIQM_BLOCK {
                    let v = plane[y * w + x];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            acc += f(lo, hi);
        }
    }
    weight_num * acc / (by * bx) as f64
}

/// Sharpness term of UIQM: edge-weighted log contrast per channel,
/// combined with the standard luma weights.
pub fn uism(a: &Image) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut total = 0f64;
    for (c, lambda) in UISM_LAMBDA.iter().enumerate() {
        let plane: Vec<f64> = a.data().iter().skip(c).step_by(3).map(|&v| v as f64 * 255.0).collect();
        let edges = sobel_magnitude(&plane, h, w);
        let enhanced: Vec<f64> = plane.iter().zip(&edges).map(|(p, e)| p * e).collect();
        let eme = block_fold(&enhanced, h, w, 2.0, |lo, hi| {
            if lo <= 0.0 || hi <= 0.0 {
                0.0
            } else {
                (hi / lo).ln()
            }
        });
        total += lambda * eme;
    }
    total
}

/// Contrast term of UIQM: entropy of the Michelson contrast of 8×8
/// intensity blocks, kept positive by negating the log of a ratio ≤ 1.
pub fn uiconm(a: &Image) -> f64 {
    let (h, w) = (a.height(), a.width());
    let intensity: Vec<f64> = a
        .data()
        .chunks_exact(3)
        .map(|px| (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0 * 255.0)
        .collect();
    block_fold(&intensity, h, w, 1.0, |lo, hi| {
        let (top, bot) = (hi - lo, hi + lo);
        if top <= 0.0 || bot <= 0.0 {
            return 0.0;
        }
        let c = top / bot;
        -c * c.ln()
    })
}

/// 0.0282·UICM + 0.2953·UISM + 3.5753·UIConM.
pub fn uiqm(a: &Image) -> Result<f64, MetricError> {
    if a.height() < UIQM_MIN_SIDE || a.width() < UIQM_MIN_SIDE {
        return Err(MetricError::TooSmall {
            height: a.height(),
            width: a.width(),
            min: UIQM_MIN_SIDE,
        });
    }
    Ok(UIQM_C[0] * uicm(a) + UIQM_C[1] * uism(a) + UIQM_C[2] * uiconm(a))
}

fn srgb_to_lab(r: f32, g: f32, b: f32) -> (f64, f64, f64) {
    let lin = |v: f32| {
        let v = v as f64;
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    };
    let (rl, gl, bl) = (lin(r), lin(g), lin(b));
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    let f = |t: f64| {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    };
    // White point taken from the matrix row sums (D65 to 7 decimals) so
    // the neutral axis maps to a* = b* = 0 without rounding residue.
    let (fx, fy, fz) = (
        f(x / (0.4124564 + 0.3575761 + 0.1804375)),
        f(y / (0.2126729 + 0.7151522 + 0.0721750)),
        f(z / (0.0193339 + 0.1191920 + 0.9503041)),
    );
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Linear-interpolation percentile of ascending `sorted`, q in [0,100].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// The three UCIQE terms (σ chroma, percentile luma contrast, mean
/// saturation), each on a unit-normalized scale.
pub fn uciqe_parts(a: &Image) -> (f64, f64, f64) {
    let n = a.height() * a.width();
    let mut lstar = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    for px in a.data().chunks_exact(3) {
        let (l, la, lb) = srgb_to_lab(px[0], px[1], px[2]);
        lstar.push(l / 100.0);
        chroma.push((la * la + lb * lb).sqrt() / 100.0);
    }
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let var_c = chroma.iter().map(|c| (c - mean_c) * (c - mean_c)).sum::<f64>() / n as f64;
    let sigma_c = var_c.sqrt();

    let mut sorted_l = lstar.clone();
    sorted_l.sort_by(|a, b| a.total_cmp(b));
    let con_l = percentile(&sorted_l, 99.0) - percentile(&sorted_l, 1.0);

    let mu_s = chroma
        .iter()
        .zip(&lstar)
        .map(|(c, l)| {
            let denom = (c * c + l * l).sqrt();
            if denom == 0.0 {
                0.0
            } else {
                c / denom
            }
        })
        .sum::<f64>()
        / n as f64;
    (sigma_c, con_l, mu_s)
}

/// 0.4680·σ_chroma + 0.2745·luma contrast + 0.2576·mean saturation.
pub fn uciqe(a: &Image) -> f64 {
    let (sigma_c, con_l, mu_s) = uciqe_parts(a);
    UCIQE_W[0] * sigma_c + UCIQE_W[1] * con_l + UCIQE_W[2] * mu_s
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0f64;
    let mut da = 0f64;
    let mut db = 0f64;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0f64; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Per-image scores; reference metrics absent for unpaired images.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ImageScores {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub uiqm: f64,
    pub uciqe: f64,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct Aggregate {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub uiqm: f64,
    pub uciqe: f64,
}

/// Conventions the scores were computed under, embedded in each report.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ReportConventions {
    pub pixel_scale: f64,
    pub psnr_cap: f64,
    pub uiqm_block: usize,
    pub partial_blocks: String,
    pub alpha_trim: f64,
}

impl Default for ReportConventions {
    fn default() -> Self {
        ReportConventions {
            pixel_scale: 255.0,
            psnr_cap: PSNR_CAP,
            uiqm_block: UIQM_BLOCK,
            partial_blocks: "truncated".into(),
            alpha_trim: ALPHA_TRIM,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageScores>,
    pub aggregate: Aggregate,
    pub config: ReportConventions,
}

impl MetricReport {
    /// Scores every (name, image, optional reference) triple; all stored
    /// numbers are rounded to 4 decimal places, and aggregates are means
    /// of the listed per-image values.
    pub fn build(entries: &[(String, Image, Option<Image>)]) -> Result<MetricReport, MetricError> {
        let mut images = Vec::with_capacity(entries.len());
        for (name, img, reference) in entries {
            let (m, p, s) = match reference {
                Some(r) => (
                    Some(round4(mse(img, r)?)),
                    Some(round4(psnr(img, r)?)),
                    Some(round4(ssim(img, r)?)),
                ),
                None => (None, None, None),
            };
            images.push(ImageScores {
                name: name.clone(),
                mse: m,
                psnr: p,
                ssim: s,
                uiqm: round4(uiqm(img)?),
                uciqe: round4(uciqe(img)),
            });
        }
        let mean_of = |vals: Vec<f64>| -> Option<f64> {
            if vals.is_empty() {
                None
            } else {
                Some(round4(vals.iter().sum::<f64>() / vals.len() as f64))
            }
        };
        let aggregate = Aggregate {
            mse: mean_of(images.iter().filter_map(|i| i.mse).collect()),
            psnr: mean_of(images.iter().filter_map(|i| i.psnr).collect()),
            ssim: mean_of(images.iter().filter_map(|i| i.ssim).collect()),
            uiqm: mean_of(images.iter().map(|i| i.uiqm).collect()).unwrap_or(0.0),
            uciqe: mean_of(images.iter().map(|i| i.uciqe).collect()).unwrap_or(0.0),
        };
        Ok(MetricReport { images, aggregate, config: ReportConventions::default() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = SeedStream::new(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.uniform_f32()).collect()).unwrap()
    }

    fn gray_noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = SeedStream::new(seed);
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            let v = rng.uniform_f32();
            data.extend_from_slice(&[v, v, v]);
        }
        Image::new(h, w, data).unwrap()
    }

    fn flip_h(img: &Image) -> Image {
        let (h, w) = (img.height(), img.width());
        let mut data = vec![0f32; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                let dst = (y * w + (w - 1 - x)) * 3;
                data[dst..dst + 3].copy_from_slice(&img.data()[src..src + 3]);
            }
        }
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn mse_matches_hand_values() {
        let a = Image::constant(8, 8, [0.25; 3]).unwrap();
        let b = Image::constant(8, 8, [0.75; 3]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 127.5 * 127.5);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());

        let c = Image::constant(8, 8, [0.2; 3]).unwrap();
        let d = Image::constant(8, 8, [0.3; 3]).unwrap();
        assert!((mse(&c, &d).unwrap() - 650.25).abs() < 1e-2, "0.1 difference is 25.5 levels");

        let e = Image::constant(9, 8, [0.2; 3]).unwrap();
        assert!(mse(&a, &e).is_err());
    }

    #[test]
    fn psnr_matches_hand_values() {
        let a = Image::constant(8, 8, [0.25; 3]).unwrap();
        let b = Image::constant(8, 8, [0.75; 3]).unwrap();
        let c = Image::constant(8, 8, [0.5; 3]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        // diff 0.5 → 10·log10(255²/127.5²) = 20·log10(2)
        let p_half = psnr(&a, &b).unwrap();
        assert!((p_half - 20.0 * 2f64.log10()).abs() < 1e-9);
        // halving the difference adds another 20·log10(2)
        let p_quarter = psnr(&a, &c).unwrap();
        assert!((p_quarter - p_half - 20.0 * 2f64.log10()).abs() < 1e-9);

        let d = Image::constant(8, 8, [0.2; 3]).unwrap();
        let e = Image::constant(8, 8, [0.3; 3]).unwrap();
        assert!((psnr(&d, &e).unwrap() - 20.0).abs() < 1e-3, "25.5 levels → 20 dB");
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = noise_image(16, 16, 1);
        let mut prev = PSNR_CAP + 1.0;
        for amp in [0.02f32, 0.05, 0.1, 0.2] {
            let mut rng = SeedStream::new(2);
            let noisy = Image::from_clamped(
                16,
                16,
                base.data()
                    .iter()
                    .map(|&v| v + amp * (rng.uniform_f32() - 0.5))
                    .collect(),
            )
            .unwrap();
            let p = psnr(&noisy, &base).unwrap();
            assert!(p < prev, "amp {amp}: {p} not below {prev}");
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = noise_image(16, 16, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);

        // binary checkerboard against its inversion
        let mut data = Vec::with_capacity(16 * 16 * 3);
        for y in 0..16 {
            for x in 0..16 {
                let v = if (x / 2 + y / 2) % 2 == 0 { 1.0f32 } else { 0.0 };
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let checker = Image::new(16, 16, data.clone()).unwrap();
        let inverted = Image::new(16, 16, data.iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&checker, &inverted).unwrap();
        assert!(s < 1.0);
        assert!((-1.0..=1.0).contains(&s));

        let b = noise_image(16, 16, 4);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), "commutative terms");

        // definitional tie with the loss
        let mut tape: Tape<f64> = Tape::new();
        let pa = tape
            .constant(vec![1, 3, 16, 16], a.to_planar().iter().map(|&v| v as f64).collect())
            .unwrap();
        let pb = tape
            .constant(vec![1, 3, 16, 16], b.to_planar().iter().map(|&v| v as f64).collect())
            .unwrap();
        let loss = ssim_loss(&mut tape, pa, pb).unwrap();
        assert_eq!(ssim(&a, &b).unwrap(), 1.0 - tape.value(loss)[0]);
    }

    #[test]
    fn uicm_vanishes_on_gray() {
        let gray = gray_noise(16, 16, 5);
        assert_eq!(uicm(&gray), 0.0);
        let q = uiqm(&gray).unwrap();
        assert!((q - (UIQM_C[1] * uism(&gray) + UIQM_C[2] * uiconm(&gray))).abs() < 1e-12);
        let colorful = noise_image(16, 16, 6);
        assert_ne!(uicm(&colorful), 0.0);
    }

    #[test]
    fn constant_image_scores_zero_sharpness_and_contrast() {
        let c = Image::constant(16, 16, [0.4, 0.4, 0.4]).unwrap();
        assert_eq!(uism(&c), 0.0);
        assert_eq!(uiconm(&c), 0.0);
        assert_eq!(uicm(&c), 0.0);
        assert_eq!(uiqm(&c).unwrap(), 0.0);
    }

    #[test]
    fn contrast_stretch_does_not_lower_uiqm() {
        let mut rng = SeedStream::new(7);
        let low: Vec<f32> = (0..24 * 24 * 3).map(|_| 0.4 + 0.2 * rng.uniform_f32()).collect();
        let lo_img = Image::new(24, 24, low.clone()).unwrap();
        let stretched =
            Image::new(24, 24, low.iter().map(|v| 0.1 + (v - 0.4) * 4.0).collect()).unwrap();
        let q_low = uiqm(&lo_img).unwrap();
        let q_hi = uiqm(&stretched).unwrap();
        assert!(q_hi >= q_low, "stretched {q_hi} vs original {q_low}");
    }

    #[test]
    fn uiqm_rejects_tiny_images() {
        let tiny = Image::constant(8, 8, [0.5; 3]).unwrap();
        assert!(matches!(uiqm(&tiny), Err(MetricError::TooSmall { min: 16, .. })));
    }

    #[test]
    fn uciqe_gray_keeps_only_the_contrast_term() {
        let gray = gray_noise(16, 16, 8);
        let (sigma_c, con_l, mu_s) = uciqe_parts(&gray);
        assert!(sigma_c < 1e-12, "gray pixels have zero chroma");
        assert!(mu_s < 1e-12);
        assert!(con_l > 0.0);
        assert!((uciqe(&gray) - UCIQE_W[1] * con_l).abs() < 1e-12);

        let c = Image::constant(16, 16, [0.3, 0.5, 0.7]).unwrap();
        let (s0, c0, _) = uciqe_parts(&c);
        assert!(s0 < 1e-12 && c0 < 1e-12, "constant image has no spread");
    }

    #[test]
    fn uciqe_rewards_saturation() {
        let mut sat = Vec::with_capacity(16 * 16 * 3);
        let mut desat = Vec::with_capacity(16 * 16 * 3);
        for y in 0..16 {
            for x in 0..16 {
                let red = (x / 4 + y / 4) % 2 == 0;
                let rgb: [f32; 3] = if red { [0.9, 0.1, 0.1] } else { [0.1, 0.9, 0.9] };
                sat.extend_from_slice(&rgb);
                desat.extend(rgb.iter().map(|v| 0.5 + (v - 0.5) * 0.5));
            }
        }
        let sat_img = Image::new(16, 16, sat).unwrap();
        let desat_img = Image::new(16, 16, desat).unwrap();
        assert!(uciqe(&sat_img) > uciqe(&desat_img));
    }

    #[test]
    fn metrics_are_flip_invariant() {
        let a = noise_image(16, 16, 9);
        let b = noise_image(16, 16, 10);
        let (fa, fb) = (flip_h(&a), flip_h(&b));
        assert!((mse(&a, &b).unwrap() - mse(&fa, &fb).unwrap()).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - psnr(&fa, &fb).unwrap()).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&fa, &fb).unwrap()).abs() < 1e-9);
        assert!((uiqm(&a).unwrap() - uiqm(&fa).unwrap()).abs() < 1e-9);
        assert!((uciqe(&a) - uciqe(&fa)).abs() < 1e-9);
    }

    #[test]
    fn spearman_handles_order_and_ties() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let r = spearman(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!(r > 0.9 && r < 1.0, "ties lower a perfect correlation: {r}");
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), 0.0, "constant input degenerates");
    }

    #[test]
    fn report_aggregates_listed_scores() {
        let a = noise_image(16, 16, 11);
        let b = noise_image(16, 16, 12);
        let refimg = noise_image(16, 16, 13);
        let entries = vec![
            ("one".to_string(), a.clone(), Some(refimg.clone())),
            ("two".to_string(), b, Some(refimg.clone())),
            ("three".to_string(), a, None),
        ];
        let report = MetricReport::build(&entries).unwrap();
        assert_eq!(report.images.len(), 3);
        assert!(report.images[2].mse.is_none());

        let mean_psnr = (report.images[0].psnr.unwrap() + report.images[1].psnr.unwrap()) / 2.0;
        assert!((report.aggregate.psnr.unwrap() - mean_psnr).abs() <= 5e-5);
        let mean_uiqm =
            report.images.iter().map(|i| i.uiqm).sum::<f64>() / report.images.len() as f64;
        assert!((report.aggregate.uiqm - mean_uiqm).abs() <= 5e-5);

        let json = report.to_json();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["images"].as_array().unwrap().len(), 3);
        assert!(parsed["images"][2].get("mse").is_none(), "unpaired scores are omitted");
        assert_eq!(parsed["config"]["partial_blocks"], "truncated");
        for img in parsed["images"].as_array().unwrap() {
            for key in ["psnr", "uiqm", "uciqe"] {
                if let Some(v) = img.get(key).and_then(|v| v.as_f64()) {
                    assert!(
                        ((v * 1e4).round() - v * 1e4).abs() < 1e-6,
                        "{key}={v} not rounded to 4 places"
                    );
                }
            }
        }
    }

    #[test]
    fn self_evaluation_is_the_identity_oracle() {
        let r = noise_image(16, 16, 14);
        let entries = vec![("self".to_string(), r.clone(), Some(r))];
        let report = MetricReport::build(&entries).unwrap();
        assert_eq!(report.aggregate.mse, Some(0.0));
        assert_eq!(report.aggregate.psnr, Some(PSNR_CAP));
        assert_eq!(report.aggregate.ssim, Some(1.0));
    }
}
