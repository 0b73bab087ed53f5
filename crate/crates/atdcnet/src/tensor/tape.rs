//! The recording tape: forward ops append nodes, backward walks them once
//! in reverse.

use std::cell::RefCell;

use super::conv;
use super::{numel, shape_err, Elem, Shape, TensorError};

/// Handle into a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

/// Whether batch norm uses batch statistics (and updates the running
/// estimates) or the stored running statistics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum BinKind {
    Add,
    Mul,
}

/// How the smaller operand of a binary op maps onto the larger one.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Bcast {
    /// Identical shapes.
    None,
    /// [N,C] applied across the spatial extent of [N,C,H,W].
    Channel,
    /// [N,1,H,W] applied across the channels of [N,C,H,W].
    Plane,
}

enum Op<E> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    Conv1x1 {
        x: usize,
        w: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    LeakyRelu {
        x: usize,
        slope: E,
    },
    Sigmoid {
        x: usize,
    },
    FullyConnected {
        x: usize,
        w: usize,
        b: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    ConcatChannels {
        xs: Vec<usize>,
    },
    Binary {
        big: usize,
        small: usize,
        kind: BinKind,
        bcast: Bcast,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    AddScalar {
        x: usize,
    },
    MulScalar {
        x: usize,
        c: E,
    },
    Abs {
        x: usize,
    },
    Sqrt {
        x: usize,
    },
    Clamp01 {
        x: usize,
    },
    GaussBlur {
        x: usize,
        kernel: Vec<E>,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    SumPerExample {
        x: usize,
    },
}

struct Node<E> {
    shape: Shape,
    data: Vec<E>,
    /// Persistent gradient, leaves with `requires` only.
    grad: Option<Vec<E>>,
    requires: bool,
    /// True when backward must propagate through or into this node.
    needs: bool,
    op: Op<E>,
}

pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    /// Column buffer shared by every convolution on this tape; each call
    /// overwrites the region it needs, so only the high-water mark is kept.
    conv_scratch: RefCell<conv::ConvScratch<E>>,
}

/// Radius of the Gaussian window used by the structural-similarity loss.
pub(crate) const BLUR_RADIUS: usize = 5;

fn gauss_kernel<E: Elem>() -> Vec<E> {
    let sigma = 1.5f64;
    let side = 2 * BLUR_RADIUS + 1;
    let mut one_d = vec![0f64; side];
    for (i, v) in one_d.iter_mut().enumerate() {
        let d = i as f64 - BLUR_RADIUS as f64;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let mut k = vec![0f64; side * side];
    for y in 0..side {
        for x in 0..side {
            k[y * side + x] = one_d[y] * one_d[x];
        }
    }
    let total: f64 = k.iter().sum();
    k.iter().map(|v| E::from_f64(v / total)).collect()
}

/// (batch, channels, spatial extent) of a shape, tolerating low ranks.
/// Broadcast arms only ever see 4-D shapes; same-shape arms ignore this.
fn dims4(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.first().copied().unwrap_or(1);
    let c = shape.get(1).copied().unwrap_or(1);
    let inner = shape.get(2..).map_or(1, |s| s.iter().product::<usize>().max(1));
    (n, c, inner)
}

fn acc<E: Elem>(dst: &mut [E], src: &[E]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn slot<'a, E: Elem>(scratch: &'a mut [Option<Vec<E>>], j: usize, len: usize) -> &'a mut [E] {
    scratch[j].get_or_insert_with(|| vec![E::ZERO; len])
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), conv_scratch: RefCell::new(conv::ConvScratch::default()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Only leaves can request gradients.
    pub fn leaf(
        &mut self,
        shape: impl Into<Shape>,
        data: Vec<E>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let shape = shape.into();
        if numel(&shape) != data.len() || shape.is_empty() {
            return Err(shape_err(
                "leaf",
                format!("shape {:?} does not describe {} elements", shape, data.len()),
            ));
        }
        Ok(self.push(shape, data, requires_grad, requires_grad, Op::Leaf))
    }

    pub fn constant(
        &mut self,
        shape: impl Into<Shape>,
        data: Vec<E>,
    ) -> Result<TensorId, TensorError> {
        self.leaf(shape, data, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].data
    }

    /// Accumulated gradient of a leaf, absent for unknown or non-leaf ids.
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes.get(id.0).and_then(|n| n.grad.as_deref())
    }

    fn push(
        &mut self,
        shape: Shape,
        data: Vec<E>,
        requires: bool,
        needs: bool,
        op: Op<E>,
    ) -> TensorId {
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires,
            needs,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn check(&self, op: &'static str, id: TensorId) -> Result<&Node<E>, TensorError> {
        let _ = op;
        self.nodes.get(id.0).ok_or(TensorError::DetachedGraph)
    }

    fn needs_any(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs)
    }

    /// 3x3 convolution, one-pixel zero padding, stride 1 or 2.
    /// x: [N,Cin,H,W], w: [Cout,Cin,3,3], b: [Cout].
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
    ) -> Result<TensorId, TensorError> {
        let xs = self.check("conv2d", x)?.shape.clone();
        let ws = self.check("conv2d", w)?.shape.clone();
        let bs = self.check("conv2d", b)?.shape.clone();
        if !(stride == 1 || stride == 2) {
            return Err(shape_err("conv2d", format!("stride {stride} not in {{1,2}}")));
        }
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] {
            return Err(shape_err(
                "conv2d",
                format!("x {:?} incompatible with weight {:?}", xs, ws),
            ));
        }
        if bs != [ws[0]] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} does not match {} output channels", bs, ws[0]),
            ));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let ho = conv::out_extent(h, stride);
        let wo = conv::out_extent(wd, stride);
        let mut out = vec![E::ZERO; n * cout * ho * wo];
        conv::conv2d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            n, cin, h, wd, cout, stride,
            &mut self.conv_scratch.borrow_mut(),
            &mut out,
        );
        let needs = self.needs_any(&[x, w, b]);
        Ok(self.push(
            vec![n, cout, ho, wo],
            out,
            false,
            needs,
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride },
        ))
    }

    /// Pointwise (1x1) convolution: a per-pixel linear map over channels.
    /// x: [N,Cin,H,W], w: [Cout,Cin], b: [Cout].
    pub fn conv1x1(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let xs = self.check("conv1x1", x)?.shape.clone();
        let ws = self.check("conv1x1", w)?.shape.clone();
        let bs = self.check("conv1x1", b)?.shape.clone();
        if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(shape_err(
                "conv1x1",
                format!("x {:?}, w {:?}, b {:?} are inconsistent", xs, ws, bs),
            ));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let px = h * wd;
        let mut out = vec![E::ZERO; n * cout * px];
        for i in 0..n {
            unsafe {
                E::gemm(
                    cout, cin, px, E::ONE,
                    self.nodes[w.0].data.as_ptr(), cin as isize, 1,
                    self.nodes[x.0].data.as_ptr().add(i * cin * px), px as isize, 1,
                    E::ZERO,
                    out.as_mut_ptr().add(i * cout * px), px as isize, 1,
                );
            }
            let dst = &mut out[i * cout * px..][..cout * px];
            for (co, bv) in self.nodes[b.0].data.iter().enumerate() {
                for v in &mut dst[co * px..(co + 1) * px] {
                    *v = *v + *bv;
                }
            }
        }
        let needs = self.needs_any(&[x, w, b]);
        Ok(self.push(
            vec![n, cout, h, wd],
            out,
            false,
            needs,
            Op::Conv1x1 { x: x.0, w: w.0, b: b.0 },
        ))
    }

    /// Per-channel batch normalization over [N,C,H,W].
    ///
    /// `running` is the external [mean; var] store of length 2C; train mode
    /// reads batch statistics and folds them into `running`, eval mode
    /// normalizes with `running` directly.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running: &mut [E],
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let xs = self.check("batch_norm", x)?.shape.clone();
        if xs.len() != 4 {
            return Err(shape_err("batch_norm", format!("input {:?} is not [N,C,H,W]", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let gs = &self.nodes[gamma.0].shape;
        let bs = &self.nodes[beta.0].shape;
        if gs != &[c] || bs != &[c] {
            return Err(shape_err(
                "batch_norm",
                format!("scale {:?} / shift {:?} do not match {} channels", gs, bs, c),
            ));
        }
        if running.len() != 2 * c {
            return Err(shape_err(
                "batch_norm",
                format!("running stats len {} != 2*{}", running.len(), c),
            ));
        }
        let m = n * h * w;
        if mode == BnMode::Train && m < 2 {
            return Err(TensorError::DegenerateBatch);
        }
        let plane = h * w;
        let data = &self.nodes[x.0].data;
        let mut mean = vec![0f64; c];
        let mut var = vec![0f64; c];
        match mode {
            BnMode::Train => {
                for ci in 0..c {
                    let mut s = 0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for v in &data[base..base + plane] {
                            s += v.to_f64();
                        }
                    }
                    mean[ci] = s / m as f64;
                    let mut s2 = 0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for v in &data[base..base + plane] {
                            let d = v.to_f64() - mean[ci];
                            s2 += d * d;
                        }
                    }
                    var[ci] = s2 / m as f64;
                }
                let unbias = m as f64 / (m as f64 - 1.0);
                for ci in 0..c {
                    let rm = running[ci].to_f64();
                    let rv = running[c + ci].to_f64();
                    running[ci] = E::from_f64((1.0 - momentum) * rm + momentum * mean[ci]);
                    running[c + ci] =
                        E::from_f64((1.0 - momentum) * rv + momentum * var[ci] * unbias);
                }
            }
            BnMode::Eval => {
                for ci in 0..c {
                    mean[ci] = running[ci].to_f64();
                    var[ci] = running[c + ci].to_f64();
                }
            }
        }
        let inv_std: Vec<E> = var
            .iter()
            .map(|v| E::from_f64(1.0 / (v + eps).sqrt()))
            .collect();
        let mut xhat = vec![E::ZERO; data.len()];
        let mut out = vec![E::ZERO; data.len()];
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        for ni in 0..n {
            for ci in 0..c {
                let mu = E::from_f64(mean[ci]);
                let istd = inv_std[ci];
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let xh = (data[i] - mu) * istd;
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + b[ci];
                }
            }
        }
        let needs = self.needs_any(&[x, gamma, beta]);
        Ok(self.push(
            xs,
            out,
            false,
            needs,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> Result<TensorId, TensorError> {
        let node = self.check("leaky_relu", x)?;
        let s = E::from_f64(slope);
        let out: Vec<E> = node
            .data
            .iter()
            .map(|&v| if v > E::ZERO { v } else { s * v })
            .collect();
        let (shape, needs) = (node.shape.clone(), node.needs);
        Ok(self.push(shape, out, false, needs, Op::LeakyRelu { x: x.0, slope: s }))
    }

    /// Logistic function, clamped to stay strictly inside (0,1) for every
    /// finite input.
    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let node = self.check("sigmoid", x)?;
        let lo = E::UNIT_GUARD;
        let hi = E::ONE - E::UNIT_GUARD;
        let out: Vec<E> = node
            .data
            .iter()
            .map(|&v| {
                let y = if v >= E::ZERO {
                    E::ONE / (E::ONE + (E::ZERO - v).exp())
                } else {
                    let e = v.exp();
                    e / (E::ONE + e)
                };
                y.max_e(lo).min_e(hi)
            })
            .collect();
        let (shape, needs) = (node.shape.clone(), node.needs);
        Ok(self.push(shape, out, false, needs, Op::Sigmoid { x: x.0 }))
    }

    /// x: [N,Din], w: [Dout,Din], b: [Dout] -> [N,Dout].
    pub fn fully_connected(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let xs = self.check("fully_connected", x)?.shape.clone();
        let ws = self.check("fully_connected", w)?.shape.clone();
        let bs = self.check("fully_connected", b)?.shape.clone();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(shape_err(
                "fully_connected",
                format!("x {:?}, w {:?}, b {:?} are inconsistent", xs, ws, bs),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![E::ZERO; n * dout];
        unsafe {
            E::gemm(
                n, din, dout, E::ONE,
                self.nodes[x.0].data.as_ptr(), din as isize, 1,
                self.nodes[w.0].data.as_ptr(), 1, din as isize,
                E::ZERO,
                out.as_mut_ptr(), dout as isize, 1,
            );
        }
        let bias = &self.nodes[b.0].data;
        for row in out.chunks_exact_mut(dout) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v = *v + *bv;
            }
        }
        let needs = self.needs_any(&[x, w, b]);
        Ok(self.push(
            vec![n, dout],
            out,
            false,
            needs,
            Op::FullyConnected { x: x.0, w: w.0, b: b.0 },
        ))
    }

    /// [N,C,H,W] -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let node = self.check("global_avg_pool", x)?;
        let xs = node.shape.clone();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("input {:?} is not [N,C,H,W]", xs)));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut out = vec![E::ZERO; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * plane;
            let mut s = 0f64;
            for v in &node.data[base..base + plane] {
                s += v.to_f64();
            }
            *o = E::from_f64(s / plane as f64);
        }
        let needs = node.needs;
        Ok(self.push(vec![n, c], out, false, needs, Op::GlobalAvgPool { x: x.0 }))
    }

    /// Joins tensors along dim 1; all other dims must agree.
    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(shape_err("concat_channels", "no inputs".into()));
        }
        let first = self.check("concat_channels", xs[0])?.shape.clone();
        if first.len() < 2 {
            return Err(shape_err(
                "concat_channels",
                format!("rank {} input, need at least [N,C]", first.len()),
            ));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut c_total = 0usize;
        for &id in xs {
            let s = &self.check("concat_channels", id)?.shape;
            if s.len() != first.len()
                || s[0] != n
                || s[2..] != first[2..]
            {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} does not align with {:?} outside dim 1", s, first),
                ));
            }
            c_total += s[1];
        }
        let mut out = vec![E::ZERO; n * c_total * inner];
        for ni in 0..n {
            let mut at = 0usize;
            for &id in xs {
                let node = &self.nodes[id.0];
                let ci = node.shape[1];
                let src = &node.data[ni * ci * inner..(ni + 1) * ci * inner];
                out[(ni * c_total + at) * inner..][..ci * inner].copy_from_slice(src);
                at += ci;
            }
        }
        let mut shape = first;
        shape[1] = c_total;
        let needs = self.needs_any(xs);
        Ok(self.push(
            shape,
            out,
            false,
            needs,
            Op::ConcatChannels { xs: xs.iter().map(|id| id.0).collect() },
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary(a, b, BinKind::Mul)
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        kind: BinKind,
    ) -> Result<TensorId, TensorError> {
        let op_name = match kind {
            BinKind::Add => "add",
            BinKind::Mul => "mul",
        };
        let sa = self.check(op_name, a)?.shape.clone();
        let sb = self.check(op_name, b)?.shape.clone();
        let (big, small, bcast) = if sa == sb {
            (a, b, Bcast::None)
        } else if sa.len() == 4 && sb.len() == 2 && sb[0] == sa[0] && sb[1] == sa[1] {
            (a, b, Bcast::Channel)
        } else if sb.len() == 4 && sa.len() == 2 && sa[0] == sb[0] && sa[1] == sb[1] {
            (b, a, Bcast::Channel)
        } else if sa.len() == 4 && sb.len() == 4 && sb[0] == sa[0] && sb[1] == 1 && sb[2..] == sa[2..]
        {
            (a, b, Bcast::Plane)
        } else if sa.len() == 4 && sb.len() == 4 && sa[0] == sb[0] && sa[1] == 1 && sa[2..] == sb[2..]
        {
            (b, a, Bcast::Plane)
        } else {
            return Err(shape_err(
                op_name,
                format!("cannot combine {:?} with {:?}", sa, sb),
            ));
        };
        let shape = self.nodes[big.0].shape.clone();
        let (n, c, inner) = dims4(&shape);
        let bd = &self.nodes[big.0].data;
        let sd = &self.nodes[small.0].data;
        let combine = |x: E, y: E| match kind {
            BinKind::Add => x + y,
            BinKind::Mul => x * y,
        };
        let out: Vec<E> = match bcast {
            Bcast::None => bd.iter().zip(sd).map(|(&x, &y)| combine(x, y)).collect(),
            Bcast::Channel => {
                let mut out = vec![E::ZERO; bd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let s = sd[ni * c + ci];
                        let base = (ni * c + ci) * inner;
                        for i in base..base + inner {
                            out[i] = combine(bd[i], s);
                        }
                    }
                }
                out
            }
            Bcast::Plane => {
                let mut out = vec![E::ZERO; bd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        let pbase = ni * inner;
                        for i in 0..inner {
                            out[base + i] = combine(bd[base + i], sd[pbase + i]);
                        }
                    }
                }
                out
            }
        };
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(
            shape,
            out,
            false,
            needs,
            Op::Binary { big: big.0, small: small.0, kind, bcast },
        ))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.check("sub", a)?.shape.clone();
        let sb = self.check("sub", b)?.shape.clone();
        if sa != sb {
            return Err(shape_err("sub", format!("{:?} vs {:?}", sa, sb)));
        }
        let out: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(sa, out, false, needs, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.check("div", a)?.shape.clone();
        let sb = self.check("div", b)?.shape.clone();
        if sa != sb {
            return Err(shape_err("div", format!("{:?} vs {:?}", sa, sb)));
        }
        let out: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x / y)
            .collect();
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(sa, out, false, needs, Op::Div { a: a.0, b: b.0 }))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let node = self.check("add_scalar", x)?;
        let cv = E::from_f64(c);
        let out: Vec<E> = node.data.iter().map(|&v| v + cv).collect();
        let (shape, needs) = (node.shape.clone(), node.needs);
        Ok(self.push(shape, out, false, needs, Op::AddScalar { x: x.0 }))
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let node = self.check("mul_scalar", x)?;
        let cv = E::from_f64(c);
        let out: Vec<E> = node.data.iter().map(|&v| v * cv).collect();
        let (shape, needs) = (node.shape.clone(), node.needs);
        Ok(self.push(shape, out, false, needs, Op::MulScalar { x: x.0, c: cv }))
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let node = self.check("abs", x)?;
        let out: Vec<E> = node.data.iter().map(|&v| v.abs()).collect();
        let (shape, needs) = (node.shape.clone(), node.needs);
        Ok(self.push(shape, out, false, needs, Op::Abs { x: x.0 }))
    }

    /// Elementwise square root of max(x, 0); the gradient is zero at and
    /// below zero, so it never divides by zero.
    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let node = self.check("sqrt", x)?;
        let out: Vec<E> = node
            .data
            .iter()
            .map(|&v| if v > E::ZERO { v.sqrt() } else { E::ZERO })
            .collect();
        let (shape, needs) = (node.shape.clone(), node.needs);
        Ok(self.push(shape, out, false, needs, Op::Sqrt { x: x.0 }))
    }

    /// Clamp to [0,1]; the gradient passes through exactly where the input
    /// already lay inside the interval (inclusive).
    pub fn clamp01(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let node = self.check("clamp01", x)?;
        let out: Vec<E> = node
            .data
            .iter()
            .map(|&v| v.max_e(E::ZERO).min_e(E::ONE))
            .collect();
        let (shape, needs) = (node.shape.clone(), node.needs);
        Ok(self.push(shape, out, false, needs, Op::Clamp01 { x: x.0 }))
    }

    /// Depthwise 11x11 Gaussian blur (sigma 1.5), valid mode: the output
    /// shrinks by 10 pixels per axis.
    pub fn gauss_blur_valid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let node = self.check("gauss_blur_valid", x)?;
        let xs = node.shape.clone();
        let side = 2 * BLUR_RADIUS + 1;
        if xs.len() != 4 || xs[2] < side || xs[3] < side {
            return Err(shape_err(
                "gauss_blur_valid",
                format!("input {:?} smaller than the {side}x{side} window", xs),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h - side + 1, w - side + 1);
        let kernel = gauss_kernel::<E>();
        let mut out = vec![E::ZERO; n * c * ho * wo];
        for pi in 0..n * c {
            let src = &node.data[pi * h * w..][..h * w];
            let dst = &mut out[pi * ho * wo..][..ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = E::ZERO;
                    for ky in 0..side {
                        let row = &src[(oy + ky) * w + ox..][..side];
                        let krow = &kernel[ky * side..][..side];
                        for (v, k) in row.iter().zip(krow) {
                            s = s + *v * *k;
                        }
                    }
                    dst[oy * wo + ox] = s;
                }
            }
        }
        let needs = node.needs;
        Ok(self.push(
            vec![n, c, ho, wo],
            out,
            false,
            needs,
            Op::GaussBlur { x: x.0, kernel },
        ))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let node = self.check("sum_all", x)?;
        let mut s = 0f64;
        for v in &node.data {
            s += v.to_f64();
        }
        let needs = node.needs;
        Ok(self.push(vec![1], vec![E::from_f64(s)], false, needs, Op::SumAll { x: x.0 }))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let node = self.check("mean_all", x)?;
        let count = node.data.len();
        let mut s = 0f64;
        for v in &node.data {
            s += v.to_f64();
        }
        let needs = node.needs;
        Ok(self.push(
            vec![1],
            vec![E::from_f64(s / count as f64)],
            false,
            needs,
            Op::MeanAll { x: x.0 },
        ))
    }

    /// [N, ...] -> [N], summing everything behind the batch dim.
    pub fn sum_per_example(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let node = self.check("sum_per_example", x)?;
        let xs = node.shape.clone();
        let n = xs[0];
        let inner = node.data.len() / n;
        let mut out = vec![E::ZERO; n];
        for (ni, o) in out.iter_mut().enumerate() {
            let mut s = 0f64;
            for v in &node.data[ni * inner..(ni + 1) * inner] {
                s += v.to_f64();
            }
            *o = E::from_f64(s);
        }
        let needs = node.needs;
        Ok(self.push(vec![n], out, false, needs, Op::SumPerExample { x: x.0 }))
    }

    /// Runs reverse-mode accumulation from a scalar. Leaf gradients add up
    /// across repeated calls; interior gradients are not retained.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let start = loss.0;
        let node = self.nodes.get(start).ok_or(TensorError::DetachedGraph)?;
        if node.data.len() != 1 {
            return Err(TensorError::NotScalar { numel: node.data.len() });
        }
        let mut scratch: Vec<Option<Vec<E>>> = Vec::new();
        scratch.resize_with(start + 1, || None);
        scratch[start] = Some(vec![E::ONE]);
        for i in (0..=start).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].requires {
                    let node = &mut self.nodes[i];
                    let len = node.data.len();
                    let buf = node.grad.get_or_insert_with(|| vec![E::ZERO; len]);
                    acc(buf, &g);
                }
                continue;
            }
            self.propagate(i, &g, &mut scratch);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[E], scratch: &mut [Option<Vec<E>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].needs;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { x, w, b, stride } => {
                let xs = &nodes[*x].shape;
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = nodes[*w].shape[0];
                let xlen = nodes[*x].data.len();
                let (dx_s, rest) = split_three(scratch, *x, *w, *b);
                let dx = needs(*x).then(|| slot_raw(dx_s, xlen));
                let dw = needs(*w).then(|| slot_raw(rest.0, nodes[*w].data.len()));
                let db = needs(*b).then(|| slot_raw(rest.1, nodes[*b].data.len()));
                conv::conv2d_backward(
                    &nodes[*x].data,
                    &nodes[*w].data,
                    g,
                    n, cin, h, wd, cout, *stride,
                    &mut self.conv_scratch.borrow_mut(),
                    dx, dw, db,
                );
            }
            Op::Conv1x1 { x, w, b } => {
                let xs = &nodes[*x].shape;
                let (n, cin, px) = (xs[0], xs[1], xs[2] * xs[3]);
                let cout = nodes[*w].shape[0];
                if needs(*b) {
                    let db = slot(scratch, *b, cout);
                    for i in 0..n {
                        for co in 0..cout {
                            let mut s = 0f64;
                            for v in &g[(i * cout + co) * px..(i * cout + co + 1) * px] {
                                s += v.to_f64();
                            }
                            db[co] = db[co] + E::from_f64(s);
                        }
                    }
                }
                if needs(*w) {
                    let dw = slot(scratch, *w, cout * cin);
                    for i in 0..n {
                        unsafe {
                            E::gemm(
                                cout, px, cin, E::ONE,
                                g.as_ptr().add(i * cout * px), px as isize, 1,
                                nodes[*x].data.as_ptr().add(i * cin * px), 1, px as isize,
                                E::ONE,
                                dw.as_mut_ptr(), cin as isize, 1,
                            );
                        }
                    }
                }
                if needs(*x) {
                    let dx = slot(scratch, *x, nodes[*x].data.len());
                    for i in 0..n {
                        unsafe {
                            E::gemm(
                                cin, cout, px, E::ONE,
                                nodes[*w].data.as_ptr(), 1, cin as isize,
                                g.as_ptr().add(i * cout * px), px as isize, 1,
                                E::ONE,
                                dx.as_mut_ptr().add(i * cin * px), px as isize, 1,
                            );
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = &nodes[*x].shape;
                let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = n * plane;
                let gam = &nodes[*gamma].data;
                let mut sum_g = vec![0f64; c];
                let mut sum_gx = vec![0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for k in base..base + plane {
                            let gv = g[k].to_f64();
                            sum_g[ci] += gv;
                            sum_gx[ci] += gv * xhat[k].to_f64();
                        }
                    }
                }
                if needs(*beta) {
                    let db = slot(scratch, *beta, c);
                    for ci in 0..c {
                        db[ci] = db[ci] + E::from_f64(sum_g[ci]);
                    }
                }
                if needs(*gamma) {
                    let dg = slot(scratch, *gamma, c);
                    for ci in 0..c {
                        dg[ci] = dg[ci] + E::from_f64(sum_gx[ci]);
                    }
                }
                if needs(*x) {
                    let dx = slot(scratch, *x, nodes[*x].data.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let coef = gam[ci] * inv_std[ci];
                            let mg = E::from_f64(sum_g[ci] / m as f64);
                            let mgx = E::from_f64(sum_gx[ci] / m as f64);
                            let base = (ni * c + ci) * plane;
                            for k in base..base + plane {
                                let inner = if *train {
                                    g[k] - mg - xhat[k] * mgx
                                } else {
                                    g[k]
                                };
                                dx[k] = dx[k] + coef * inner;
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if needs(*x) {
                    let xd = &nodes[*x].data;
                    let dx = slot(scratch, *x, xd.len());
                    for (k, gv) in g.iter().enumerate() {
                        let d = if xd[k] > E::ZERO { *gv } else { *slope * *gv };
                        dx[k] = dx[k] + d;
                    }
                }
            }
            Op::Sigmoid { x } => {
                if needs(*x) {
                    let y = &nodes[i].data;
                    let dx = slot(scratch, *x, y.len());
                    for (k, gv) in g.iter().enumerate() {
                        dx[k] = dx[k] + *gv * y[k] * (E::ONE - y[k]);
                    }
                }
            }
            Op::FullyConnected { x, w, b } => {
                let (n, din) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                let dout = nodes[*w].shape[0];
                if needs(*b) {
                    let db = slot(scratch, *b, dout);
                    for row in g.chunks_exact(dout) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d = *d + *gv;
                        }
                    }
                }
                if needs(*w) {
                    let dw = slot(scratch, *w, dout * din);
                    unsafe {
                        E::gemm(
                            dout, n, din, E::ONE,
                            g.as_ptr(), 1, dout as isize,
                            nodes[*x].data.as_ptr(), din as isize, 1,
                            E::ONE,
                            dw.as_mut_ptr(), din as isize, 1,
                        );
                    }
                }
                if needs(*x) {
                    let dx = slot(scratch, *x, n * din);
                    unsafe {
                        E::gemm(
                            n, dout, din, E::ONE,
                            g.as_ptr(), dout as isize, 1,
                            nodes[*w].data.as_ptr(), din as isize, 1,
                            E::ONE,
                            dx.as_mut_ptr(), din as isize, 1,
                        );
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if needs(*x) {
                    let xs = &nodes[*x].shape;
                    let plane = xs[2] * xs[3];
                    let scale = E::from_f64(1.0 / plane as f64);
                    let dx = slot(scratch, *x, nodes[*x].data.len());
                    for (j, gv) in g.iter().enumerate() {
                        let gs = *gv * scale;
                        for d in &mut dx[j * plane..(j + 1) * plane] {
                            *d = *d + gs;
                        }
                    }
                }
            }
            Op::ConcatChannels { xs } => {
                let shape = &nodes[i].shape;
                let n = shape[0];
                let c_total = shape[1];
                let inner: usize = shape[2..].iter().product::<usize>().max(1);
                let mut at = 0usize;
                for &j in xs {
                    let cj = nodes[j].shape[1];
                    if needs(j) {
                        let dj = slot(scratch, j, nodes[j].data.len());
                        for ni in 0..n {
                            let src = &g[(ni * c_total + at) * inner..][..cj * inner];
                            acc(&mut dj[ni * cj * inner..][..cj * inner], src);
                        }
                    }
                    at += cj;
                }
            }
            Op::Binary { big, small, kind, bcast } => {
                let (n, c, inner) = dims4(&nodes[i].shape);
                let bd = &nodes[*big].data;
                let sd = &nodes[*small].data;
                match bcast {
                    Bcast::None => {
                        if needs(*big) {
                            let dbig = slot(scratch, *big, bd.len());
                            match kind {
                                BinKind::Add => acc(dbig, g),
                                BinKind::Mul => {
                                    for k in 0..g.len() {
                                        dbig[k] = dbig[k] + g[k] * sd[k];
                                    }
                                }
                            }
                        }
                        if needs(*small) {
                            let dsmall = slot(scratch, *small, sd.len());
                            match kind {
                                BinKind::Add => acc(dsmall, g),
                                BinKind::Mul => {
                                    for k in 0..g.len() {
                                        dsmall[k] = dsmall[k] + g[k] * bd[k];
                                    }
                                }
                            }
                        }
                    }
                    Bcast::Channel => {
                        if needs(*big) {
                            let dbig = slot(scratch, *big, bd.len());
                            for ni in 0..n {
                                for ci in 0..c {
                                    let base = (ni * c + ci) * inner;
                                    match kind {
                                        BinKind::Add => {
                                            acc(&mut dbig[base..base + inner], &g[base..base + inner])
                                        }
                                        BinKind::Mul => {
                                            let s = sd[ni * c + ci];
                                            for k in base..base + inner {
                                                dbig[k] = dbig[k] + g[k] * s;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        if needs(*small) {
                            let dsmall = slot(scratch, *small, sd.len());
                            for ni in 0..n {
                                for ci in 0..c {
                                    let base = (ni * c + ci) * inner;
                                    let mut s = 0f64;
                                    for k in base..base + inner {
                                        s += match kind {
                                            BinKind::Add => g[k].to_f64(),
                                            BinKind::Mul => g[k].to_f64() * bd[k].to_f64(),
                                        };
                                    }
                                    dsmall[ni * c + ci] = dsmall[ni * c + ci] + E::from_f64(s);
                                }
                            }
                        }
                    }
                    Bcast::Plane => {
                        if needs(*big) {
                            let dbig = slot(scratch, *big, bd.len());
                            for ni in 0..n {
                                for ci in 0..c {
                                    let base = (ni * c + ci) * inner;
                                    let pbase = ni * inner;
                                    match kind {
                                        BinKind::Add => {
                                            acc(&mut dbig[base..base + inner], &g[base..base + inner])
                                        }
                                        BinKind::Mul => {
                                            for k in 0..inner {
                                                dbig[base + k] = dbig[base + k] + g[base + k] * sd[pbase + k];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        if needs(*small) {
                            let dsmall = slot(scratch, *small, sd.len());
                            for ni in 0..n {
                                for k in 0..inner {
                                    let mut s = 0f64;
                                    for ci in 0..c {
                                        let idx = (ni * c + ci) * inner + k;
                                        s += match kind {
                                            BinKind::Add => g[idx].to_f64(),
                                            BinKind::Mul => g[idx].to_f64() * bd[idx].to_f64(),
                                        };
                                    }
                                    let di = ni * inner + k;
                                    dsmall[di] = dsmall[di] + E::from_f64(s);
                                }
                            }
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    acc(slot(scratch, *a, g.len()), g);
                }
                if needs(*b) {
                    let db = slot(scratch, *b, g.len());
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d = *d - *gv;
                    }
                }
            }
            Op::Div { a, b } => {
                let bd = &nodes[*b].data;
                let y = &nodes[i].data;
                if needs(*a) {
                    let da = slot(scratch, *a, g.len());
                    for k in 0..g.len() {
                        da[k] = da[k] + g[k] / bd[k];
                    }
                }
                if needs(*b) {
                    let db = slot(scratch, *b, g.len());
                    for k in 0..g.len() {
                        db[k] = db[k] - g[k] * y[k] / bd[k];
                    }
                }
            }
            Op::AddScalar { x } => {
                if needs(*x) {
                    acc(slot(scratch, *x, g.len()), g);
                }
            }
            Op::MulScalar { x, c } => {
                if needs(*x) {
                    let dx = slot(scratch, *x, g.len());
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d = *d + *c * *gv;
                    }
                }
            }
            Op::Abs { x } => {
                if needs(*x) {
                    let xd = &nodes[*x].data;
                    let dx = slot(scratch, *x, g.len());
                    for k in 0..g.len() {
                        let s = if xd[k] > E::ZERO {
                            g[k]
                        } else if xd[k] < E::ZERO {
                            E::ZERO - g[k]
                        } else {
                            E::ZERO
                        };
                        dx[k] = dx[k] + s;
                    }
                }
            }
            Op::Sqrt { x } => {
                if needs(*x) {
                    let xd = &nodes[*x].data;
                    let y = &nodes[i].data;
                    let half = E::from_f64(0.5);
                    let dx = slot(scratch, *x, g.len());
                    for k in 0..g.len() {
                        if xd[k] > E::ZERO {
                            dx[k] = dx[k] + half * g[k] / y[k];
                        }
                    }
                }
            }
            Op::Clamp01 { x } => {
                if needs(*x) {
                    let xd = &nodes[*x].data;
                    let dx = slot(scratch, *x, g.len());
                    for k in 0..g.len() {
                        if xd[k] >= E::ZERO && xd[k] <= E::ONE {
                            dx[k] = dx[k] + g[k];
                        }
                    }
                }
            }
            Op::GaussBlur { x, kernel } => {
                if needs(*x) {
                    let xs = &nodes[*x].shape;
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let side = 2 * BLUR_RADIUS + 1;
                    let (ho, wo) = (h - side + 1, w - side + 1);
                    let dx = slot(scratch, *x, nodes[*x].data.len());
                    for pi in 0..n * c {
                        let gsl = &g[pi * ho * wo..][..ho * wo];
                        let dsl = &mut dx[pi * h * w..][..h * w];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = gsl[oy * wo + ox];
                                for ky in 0..side {
                                    let drow = &mut dsl[(oy + ky) * w + ox..][..side];
                                    let krow = &kernel[ky * side..][..side];
                                    for (d, k) in drow.iter_mut().zip(krow) {
                                        *d = *d + gv * *k;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if needs(*x) {
                    let dx = slot(scratch, *x, nodes[*x].data.len());
                    let gv = g[0];
                    for d in dx.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::MeanAll { x } => {
                if needs(*x) {
                    let len = nodes[*x].data.len();
                    let gv = g[0] * E::from_f64(1.0 / len as f64);
                    let dx = slot(scratch, *x, len);
                    for d in dx.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::SumPerExample { x } => {
                if needs(*x) {
                    let len = nodes[*x].data.len();
                    let n = nodes[*x].shape[0];
                    let inner = len / n;
                    let dx = slot(scratch, *x, len);
                    for (ni, gv) in g.iter().enumerate() {
                        for d in &mut dx[ni * inner..(ni + 1) * inner] {
                            *d = *d + *gv;
                        }
                    }
                }
            }
        }
    }
}

/// Splits the scratch array into three disjoint mutable slots so conv
/// backward can fill dx, dw and db in one call.
fn split_three<E>(
    scratch: &mut [Option<Vec<E>>],
    x: usize,
    w: usize,
    b: usize,
) -> (&mut Option<Vec<E>>, (&mut Option<Vec<E>>, &mut Option<Vec<E>>)) {
    assert!(x != w && w != b && x != b);
    let ptr = scratch.as_mut_ptr();
    unsafe { (&mut *ptr.add(x), (&mut *ptr.add(w), &mut *ptr.add(b))) }
}

fn slot_raw<E: Elem>(opt: &mut Option<Vec<E>>, len: usize) -> &mut [E] {
    opt.get_or_insert_with(|| vec![E::ZERO; len])
}
