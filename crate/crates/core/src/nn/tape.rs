//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the parameters
//! that were read through [`Tape::param`]. Image tensors are NCHW.

use super::{Grads, ParamId, ParamStore, Scalar, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulConst(Var, Vec<F>),
    AddConst(Var),
    Silu(Var),
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    ResizeHw(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    AddChannel(Var, Var),
    ConcatChannels(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    NchwToNlc(Var),
    NlcToNchw(Var),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    ScaleSamples(Var, Vec<F>),
    AddRowScaled {
        x: Var,
        v: Var,
        s: Vec<F>,
    },
    Reshape(Var),
    Sum(Var),
    PerSampleMse {
        pred: Var,
        target: Vec<F>,
    },
    MeanSorted(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Recording of one forward computation.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn copy_hw<F: Scalar>(src: &[F], planes: usize, (h, w): (usize, usize), (ho, wo): (usize, usize)) -> Vec<F> {
    let mut out = vec![F::zero(); planes * ho * wo];
    let (hc, wc) = (h.min(ho), w.min(wo));
    for p in 0..planes {
        for y in 0..hc {
            let s = p * h * w + y * w;
            let d = p * ho * wo + y * wo;
            out[d..d + wc].copy_from_slice(&src[s..s + wc]);
        }
    }
    out
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let u = c * (x + a * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let half = F::of(0.5);
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::of(3.0) * a * x * x)
}

/// Unfolds a `[c, h, w]` image into `[c·k·k, h·w]` patch columns (zero padded).
fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize, k: usize, cols: &mut [F]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x_lo = p.saturating_sub(kx);
                let x_hi = (w + p).saturating_sub(kx).min(w);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].iter_mut().for_each(|v| *v = F::zero());
                    out[x_hi..].iter_mut().for_each(|v| *v = F::zero());
                    let s0 = x_lo + kx - p;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[c, h, w]` image.
fn col2im<F: Scalar>(cols: &[F], c: usize, h: usize, w: usize, k: usize, x: &mut [F]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x_lo = p.saturating_sub(kx);
                let x_hi = (w + p).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = x_lo + kx - p;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Reads a parameter; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::of(s);
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<F>) -> Var {
        assert_eq!(self.shape(a), c.shape());
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(c.shape(), data);
        self.push(t, Op::MulConst(a, c.data().to_vec()))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor<F>) -> Var {
        assert_eq!(self.shape(a), c.shape());
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(c.shape(), data);
        self.push(t, Op::AddConst(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * sigmoid(x));
        self.push(t, Op::Silu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, gelu);
        self.push(t, Op::Gelu(a))
    }

    /// Stride-1 "same" convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be [out, in, k, k]");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ci, "conv2d channel mismatch");
        assert!(k % 2 == 1 && ws[3] == k);
        let hw = h * wd;
        let ckk = ci * k * k;
        let mut out = vec![F::zero(); n * co * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![F::zero(); ckk * hw] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs_ = &xv[s * ci * hw..(s + 1) * ci * hw];
                let src: &[F] = if k == 1 {
                    xs_
                } else {
                    im2col(xs_, ci, h, wd, k, &mut cols);
                    &cols
                };
                F::gemm(co, ckk, hw, wv, false, src, false, &mut out[s * co * hw..(s + 1) * co * hw], false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), co);
                for s in 0..n {
                    for (c, &bias) in bv.iter().enumerate() {
                        out[(s * co + c) * hw..(s * co + c + 1) * hw]
                            .iter_mut()
                            .for_each(|v| *v += bias);
                    }
                }
            }
        }
        self.push(Tensor::new(&[n, co, h, wd], out), Op::Conv2d { x, w, b, k })
    }

    /// Non-overlapping average pooling by `f` in both spatial directions.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % f == 0 && w % f == 0, "avg_pool: {h}x{w} not divisible by {f}");
        let (ho, wo) = (h / f, w / f);
        let xv = self.value(x).data();
        let inv = F::of(1.0 / (f * f) as f64);
        let mut out = vec![F::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                let drow = &mut dst[(y / f) * wo..(y / f + 1) * wo];
                for (xx, &v) in row.iter().enumerate() {
                    drow[xx / f] += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(Tensor::new(&[n, c, ho, wo], out), Op::AvgPool(x, f))
    }

    /// Top-left aligned zero padding or cropping of the spatial axes to `ho × wo`.
    pub fn resize_hw(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let s = self.shape(x).to_vec();
        let out = copy_hw(self.value(x).data(), s[0] * s[1], (s[2], s[3]), (ho, wo));
        self.push(Tensor::new(&[s[0], s[1], ho, wo], out), Op::ResizeHw(x))
    }

    /// Nearest-neighbour upsampling by `f`.
    pub fn upsample(&mut self, x: Var, f: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * f, w * f);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                let srow = &src[(y / f) * w..(y / f + 1) * w];
                for (xx, d) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                    *d = srow[xx / f];
                }
            }
        }
        self.push(Tensor::new(&[n, c, ho, wo], out), Op::Upsample(x, f))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        assert!(c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let cg = c / groups;
        let m = cg * hw;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![F::zero(); xv.len()];
        let mut mean = Vec::with_capacity(n * groups);
        let mut rstd = Vec::with_capacity(n * groups);
        for s_ in 0..n {
            for g in 0..groups {
                let off = (s_ * c + g * cg) * hw;
                let blk = &xv[off..off + m];
                let mu = blk.iter().copied().sum::<F>() / F::of(m as f64);
                let var = blk.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / F::of(m as f64);
                let r = F::one() / (var + F::of(eps)).sqrt();
                mean.push(mu);
                rstd.push(r);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let o = off + ci * hw;
                    for (d, &v) in out[o..o + hw].iter_mut().zip(&xv[o..o + hw]) {
                        *d = (v - mu) * r * ga + be;
                    }
                }
            }
        }
        self.push(
            Tensor::new(&s, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
        )
    }

    /// `x[n, c, ..] + v[n, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        assert_eq!(self.shape(v), &[n, c], "add_channel shape");
        let mut out = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for p in 0..n * c {
            let b = vv[p];
            out[p * hw..(p + 1) * hw].iter_mut().for_each(|o| *o += b);
        }
        self.push(Tensor::new(&s, out), Op::AddChannel(x, v))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2..], sb[2..], "concat spatial mismatch");
        let hw: usize = sa[2..].iter().product();
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        self.push(Tensor::new(&shape, out), Op::ConcatChannels(a, b))
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap();
        assert_eq!(ws[1], din, "linear input width");
        let dout = ws[0];
        let rows = self.value(x).len() / din;
        let mut out = vec![F::zero(); rows * dout];
        F::gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_mut(dout) {
                for (o, &bb) in r.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![F::zero(); xv.len()];
        let rows = xv.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<F>() / F::of(d as f64);
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / F::of(d as f64);
            let rs = F::one() / (var + F::of(eps)).sqrt();
            mean.push(mu);
            rstd.push(rs);
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * rs * gv[j] + bv[j];
            }
        }
        self.push(
            Tensor::new(&s, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )
    }

    /// Row lookup: output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Var {
        let ts = self.shape(table).to_vec();
        let (v, d) = (ts[0], ts[1]);
        assert_eq!(lead.iter().product::<usize>(), ids.len());
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "embedding id {i} out of range {v}");
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        self.push(
            Tensor::new(&shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// `[n, c, h, w] -> [n, h·w, c]`.
    pub fn nchw_to_nlc(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let l: usize = s[2..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..l {
                    out[(b * l + p) * c + ch] = xv[(b * c + ch) * l + p];
                }
            }
        }
        self.push(Tensor::new(&[n, l, c], out), Op::NchwToNlc(x))
    }

    /// `[n, h·w, c] -> [n, c, h, w]`.
    pub fn nlc_to_nchw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, l, c) = (s[0], s[1], s[2]);
        assert_eq!(l, h * w);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..n {
            for p in 0..l {
                for ch in 0..c {
                    out[(b * c + ch) * l + p] = xv[(b * l + p) * c + ch];
                }
            }
        }
        self.push(Tensor::new(&[n, c, h, w], out), Op::NlcToNchw(x))
    }

    /// `[b, l, heads·dh] -> [b·heads, l, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        assert!(d % heads == 0);
        let dh = d / heads;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let src = &xv[(bi * l + li) * d + h * dh..(bi * l + li) * d + (h + 1) * dh];
                    let o = ((bi * heads + h) * l + li) * dh;
                    out[o..o + dh].copy_from_slice(src);
                }
            }
        }
        self.push(Tensor::new(&[b * heads, l, dh], out), Op::SplitHeads(x, heads))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (bh, l, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dh * heads;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let i = ((bi * heads + h) * l + li) * dh;
                    let o = (bi * l + li) * d + h * dh;
                    out[o..o + dh].copy_from_slice(&xv[i..i + dh]);
                }
            }
        }
        self.push(Tensor::new(&[b, l, d], out), Op::MergeHeads(x, heads))
    }

    /// Batched matmul `[b, m, k] x [b, k, n]` (or `[b, n, k]` transposed).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        assert_eq!(sb[0], bt);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "bmm inner dim");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); bt * m * n];
        for i in 0..bt {
            F::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(Tensor::new(&[bt, m, n], out), Op::Bmm { a, b, trans_b })
    }

    /// Softmax over the last axis of `[b, m, n]`; `key_mask[bi·n + j] == false`
    /// forces output 0 for column `j` of batch `bi / group`. A fully masked row
    /// yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool], group: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (b, m, n) = (s[0], s[1], s[2]);
        assert_eq!(key_mask.len() * group, b * n);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for bi in 0..b {
            let mask = &key_mask[(bi / group) * n..(bi / group + 1) * n];
            for r in 0..m {
                let row = &xv[(bi * m + r) * n..(bi * m + r + 1) * n];
                let o = &mut out[(bi * m + r) * n..(bi * m + r + 1) * n];
                let mx = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| v)
                    .fold(F::neg_infinity(), F::max);
                if mx == F::neg_infinity() {
                    continue;
                }
                let mut z = F::zero();
                for j in 0..n {
                    if mask[j] {
                        let e = (row[j] - mx).exp();
                        o[j] = e;
                        z += e;
                    }
                }
                o.iter_mut().for_each(|v| *v = *v / z);
            }
        }
        self.push(Tensor::new(&s, out), Op::Softmax(x))
    }

    /// Multiplies each leading-axis sample by a constant factor.
    pub fn scale_samples(&mut self, x: Var, s: &[F]) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh[0], s.len());
        let per = self.value(x).len() / s.len();
        let mut out = self.value(x).data().to_vec();
        for (chunk, &f) in out.chunks_mut(per).zip(s) {
            chunk.iter_mut().for_each(|v| *v = *v * f);
        }
        self.push(Tensor::new(&sh, out), Op::ScaleSamples(x, s.to_vec()))
    }

    /// `x[n, :] + s[n] · v` for `x: [n, d]`, `v: [d]`.
    pub fn add_row_scaled(&mut self, x: Var, v: Var, s: &[F]) -> Var {
        let sh = self.shape(x).to_vec();
        let d = sh[1];
        assert_eq!(self.shape(v), &[d]);
        assert_eq!(sh[0], s.len());
        let mut out = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for (row, &f) in out.chunks_mut(d).zip(s) {
            if f != F::zero() {
                for (o, &a) in row.iter_mut().zip(vv) {
                    *o += f * a;
                }
            }
        }
        self.push(Tensor::new(&sh, out), Op::AddRowScaled { x, v, s: s.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        self.push(t, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::new(&[1], vec![s]), Op::Sum(x))
    }

    /// Mean squared error per leading-axis sample against a constant target.
    pub fn per_sample_mse(&mut self, pred: Var, target: &Tensor<F>) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "mse shape mismatch");
        let n = target.shape()[0];
        let per = target.len() / n;
        let pv = self.value(pred).data();
        let out: Vec<F> = (0..n)
            .map(|i| {
                let se: F = pv[i * per..(i + 1) * per]
                    .iter()
                    .zip(&target.data()[i * per..(i + 1) * per])
                    .map(|(&p, &t)| (p - t) * (p - t))
                    .sum();
                se / F::of(per as f64)
            })
            .collect();
        self.push(
            Tensor::new(&[n], out),
            Op::PerSampleMse {
                pred,
                target: target.data().to_vec(),
            },
        )
    }

    /// Mean of a vector, summed in ascending order so the result does not
    /// depend on element order.
    pub fn mean_sorted(&mut self, x: Var) -> Var {
        let mut v = self.value(x).data().to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let n = F::of(v.len() as f64);
        let s = v.into_iter().fold(F::zero(), |a, b| a + b) / n;
        self.push(Tensor::new(&[1], vec![s]), Op::MeanSorted(x))
    }

    /// Gradients of a scalar node with respect to every parameter read.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::new(self.shape(root), vec![F::one()]));
        let mut out = Grads::new(0);

        fn acc<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let gv = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let neg = Tensor::new(g.shape(), gv.iter().map(|&v| -v).collect());
                    acc(&mut grads, *b, neg);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = gv.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    let gb = gv.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    acc(&mut grads, *a, Tensor::new(g.shape(), ga));
                    acc(&mut grads, *b, Tensor::new(g.shape(), gb));
                }
                Op::Scale(a, s) => {
                    let t = Tensor::new(g.shape(), gv.iter().map(|&v| v * *s).collect());
                    acc(&mut grads, *a, t);
                }
                Op::MulConst(a, c) => {
                    let t = Tensor::new(g.shape(), gv.iter().zip(c).map(|(&v, &k)| v * k).collect());
                    acc(&mut grads, *a, t);
                }
                Op::AddConst(a) | Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    acc(&mut grads, *a, g.reshaped(&shape));
                }
                Op::Silu(a) => {
                    let av = self.value(*a).data();
                    let d = gv
                        .iter()
                        .zip(av)
                        .map(|(&g, &x)| {
                            let sg = sigmoid(x);
                            g * sg * (F::one() + x * (F::one() - sg))
                        })
                        .collect();
                    acc(&mut grads, *a, Tensor::new(g.shape(), d));
                }
                Op::Gelu(a) => {
                    let av = self.value(*a).data();
                    let d = gv.iter().zip(av).map(|(&g, &x)| g * gelu_grad(x)).collect();
                    acc(&mut grads, *a, Tensor::new(g.shape(), d));
                }
                Op::Conv2d { x, w, b, k } => {
                    let k = *k;
                    let xs = self.shape(*x).to_vec();
                    let ws = self.shape(*w).to_vec();
                    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let co = ws[0];
                    let hw = h * wd;
                    let ckk = ci * k * k;
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let mut gw = vec![F::zero(); co * ckk];
                    let mut gx = vec![F::zero(); n * ci * hw];
                    let mut cols = if k == 1 { Vec::new() } else { vec![F::zero(); ckk * hw] };
                    let mut dcols = if k == 1 { Vec::new() } else { vec![F::zero(); ckk * hw] };
                    for s in 0..n {
                        let gs = &gv[s * co * hw..(s + 1) * co * hw];
                        let xs_ = &xv[s * ci * hw..(s + 1) * ci * hw];
                        if k == 1 {
                            F::gemm(co, hw, ckk, gs, false, xs_, true, &mut gw, true);
                            F::gemm(ckk, co, hw, wv, true, gs, false, &mut gx[s * ci * hw..(s + 1) * ci * hw], false);
                        } else {
                            im2col(xs_, ci, h, wd, k, &mut cols);
                            F::gemm(co, hw, ckk, gs, false, &cols, true, &mut gw, true);
                            F::gemm(ckk, co, hw, wv, true, gs, false, &mut dcols, false);
                            col2im(&dcols, ci, h, wd, k, &mut gx[s * ci * hw..(s + 1) * ci * hw]);
                        }
                    }
                    if let Some(b) = b {
                        let mut gb = vec![F::zero(); co];
                        for s in 0..n {
                            for (c, gbc) in gb.iter_mut().enumerate() {
                                *gbc += gv[(s * co + c) * hw..(s * co + c + 1) * hw].iter().copied().sum::<F>();
                            }
                        }
                        acc(&mut grads, *b, Tensor::new(&[co], gb));
                    }
                    acc(&mut grads, *w, Tensor::new(&ws, gw));
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::AvgPool(x, f) => {
                    let f = *f;
                    let xs = self.shape(*x).to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let (ho, wo) = (h / f, w / f);
                    let inv = F::of(1.0 / (f * f) as f64);
                    let planes = xs[0] * xs[1];
                    let mut gx = vec![F::zero(); planes * h * w];
                    for p in 0..planes {
                        let src = &gv[p * ho * wo..(p + 1) * ho * wo];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            let srow = &src[(y / f) * wo..(y / f + 1) * wo];
                            for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                                *d = srow[xx / f] * inv;
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::ResizeHw(x) => {
                    let xs = self.shape(*x).to_vec();
                    let gs = self.shape(Var(i));
                    let gx = copy_hw(gv, xs[0] * xs[1], (gs[2], gs[3]), (xs[2], xs[3]));
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::Upsample(x, f) => {
                    let f = *f;
                    let xs = self.shape(*x).to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let (ho, wo) = (h * f, w * f);
                    let planes = xs[0] * xs[1];
                    let mut gx = vec![F::zero(); planes * h * w];
                    for p in 0..planes {
                        let src = &gv[p * ho * wo..(p + 1) * ho * wo];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for y in 0..ho {
                            let drow = &mut dst[(y / f) * w..(y / f + 1) * w];
                            for (xx, &v) in src[y * wo..(y + 1) * wo].iter().enumerate() {
                                drow[xx / f] += v;
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let xs = self.shape(*x).to_vec();
                    let (n, c) = (xs[0], xs[1]);
                    let hw: usize = xs[2..].iter().product();
                    let cg = c / groups;
                    let m = F::of((cg * hw) as f64);
                    let xv = self.value(*x).data();
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![F::zero(); xv.len()];
                    let mut ggam = vec![F::zero(); c];
                    let mut gbet = vec![F::zero(); c];
                    for s in 0..n {
                        for gi in 0..*groups {
                            let (mu, rs) = (mean[s * groups + gi], rstd[s * groups + gi]);
                            let mut sum_d = F::zero();
                            let mut sum_dx = F::zero();
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let o = (s * c + ch) * hw;
                                for p in o..o + hw {
                                    let xhat = (xv[p] - mu) * rs;
                                    ggam[ch] += gv[p] * xhat;
                                    gbet[ch] += gv[p];
                                    let d = gv[p] * gam[ch];
                                    sum_d += d;
                                    sum_dx += d * xhat;
                                }
                            }
                            let md = sum_d / m;
                            let mdx = sum_dx / m;
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let o = (s * c + ch) * hw;
                                for p in o..o + hw {
                                    let xhat = (xv[p] - mu) * rs;
                                    gx[p] = rs * (gv[p] * gam[ch] - md - xhat * mdx);
                                }
                            }
                        }
                    }
                    acc(&mut grads, *gamma, Tensor::new(&[c], ggam));
                    acc(&mut grads, *beta, Tensor::new(&[c], gbet));
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::AddChannel(x, v) => {
                    let xs = self.shape(*x).to_vec();
                    let hw: usize = xs[2..].iter().product();
                    let gvv: Vec<F> = gv.chunks(hw).map(|c| c.iter().copied().sum()).collect();
                    acc(&mut grads, *v, Tensor::new(&[xs[0], xs[1]], gvv));
                    acc(&mut grads, *x, g);
                }
                Op::ConcatChannels(a, b) => {
                    let sa = self.shape(*a).to_vec();
                    let sb = self.shape(*b).to_vec();
                    let hw: usize = sa[2..].iter().product();
                    let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                    let mut ga = Vec::with_capacity(n * ca * hw);
                    let mut gb = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        let base = s * (ca + cb) * hw;
                        ga.extend_from_slice(&gv[base..base + ca * hw]);
                        gb.extend_from_slice(&gv[base + ca * hw..base + (ca + cb) * hw]);
                    }
                    acc(&mut grads, *a, Tensor::new(&sa, ga));
                    acc(&mut grads, *b, Tensor::new(&sb, gb));
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x).to_vec();
                    let ws = self.shape(*w).to_vec();
                    let (dout, din) = (ws[0], ws[1]);
                    let rows = self.value(*x).len() / din;
                    let mut gx = vec![F::zero(); rows * din];
                    F::gemm(rows, dout, din, gv, false, self.value(*w).data(), false, &mut gx, false);
                    let mut gw = vec![F::zero(); dout * din];
                    F::gemm(dout, rows, din, gv, true, self.value(*x).data(), false, &mut gw, false);
                    if let Some(b) = b {
                        let mut gb = vec![F::zero(); dout];
                        for r in gv.chunks(dout) {
                            for (a, &v) in gb.iter_mut().zip(r) {
                                *a += v;
                            }
                        }
                        acc(&mut grads, *b, Tensor::new(&[dout], gb));
                    }
                    acc(&mut grads, *w, Tensor::new(&ws, gw));
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let xs = self.shape(*x).to_vec();
                    let d = *xs.last().unwrap();
                    let xv = self.value(*x).data();
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![F::zero(); xv.len()];
                    let mut ggam = vec![F::zero(); d];
                    let mut gbet = vec![F::zero(); d];
                    let df = F::of(d as f64);
                    for r in 0..xv.len() / d {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_d = F::zero();
                        let mut sum_dx = F::zero();
                        for j in 0..d {
                            let p = r * d + j;
                            let xhat = (xv[p] - mu) * rs;
                            ggam[j] += gv[p] * xhat;
                            gbet[j] += gv[p];
                            let dd = gv[p] * gam[j];
                            sum_d += dd;
                            sum_dx += dd * xhat;
                        }
                        for j in 0..d {
                            let p = r * d + j;
                            let xhat = (xv[p] - mu) * rs;
                            gx[p] = rs * (gv[p] * gam[j] - sum_d / df - xhat * sum_dx / df);
                        }
                    }
                    acc(&mut grads, *gamma, Tensor::new(&[d], ggam));
                    acc(&mut grads, *beta, Tensor::new(&[d], gbet));
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::Embedding { table, ids } => {
                    let ts = self.shape(*table).to_vec();
                    let d = ts[1];
                    let mut gt = vec![F::zero(); ts[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += gv[r * d + j];
                        }
                    }
                    acc(&mut grads, *table, Tensor::new(&ts, gt));
                }
                Op::NchwToNlc(x) => {
                    let xs = self.shape(*x).to_vec();
                    let (n, c) = (xs[0], xs[1]);
                    let l: usize = xs[2..].iter().product();
                    let mut gx = vec![F::zero(); gv.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..l {
                                gx[(b * c + ch) * l + p] = gv[(b * l + p) * c + ch];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::NlcToNchw(x) => {
                    let xs = self.shape(*x).to_vec();
                    let (n, l, c) = (xs[0], xs[1], xs[2]);
                    let mut gx = vec![F::zero(); gv.len()];
                    for b in 0..n {
                        for p in 0..l {
                            for ch in 0..c {
                                gx[(b * l + p) * c + ch] = gv[(b * c + ch) * l + p];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::SplitHeads(x, heads) => {
                    let xs = self.shape(*x).to_vec();
                    let (b, l, d) = (xs[0], xs[1], xs[2]);
                    let dh = d / heads;
                    let mut gx = vec![F::zero(); gv.len()];
                    for bi in 0..b {
                        for li in 0..l {
                            for h in 0..*heads {
                                let o = ((bi * heads + h) * l + li) * dh;
                                let t = (bi * l + li) * d + h * dh;
                                gx[t..t + dh].copy_from_slice(&gv[o..o + dh]);
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::MergeHeads(x, heads) => {
                    let xs = self.shape(*x).to_vec();
                    let (bh, l, dh) = (xs[0], xs[1], xs[2]);
                    let b = bh / heads;
                    let d = dh * heads;
                    let mut gx = vec![F::zero(); gv.len()];
                    for bi in 0..b {
                        for h in 0..*heads {
                            for li in 0..l {
                                let i = ((bi * heads + h) * l + li) * dh;
                                let o = (bi * l + li) * d + h * dh;
                                gx[i..i + dh].copy_from_slice(&gv[o..o + dh]);
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(&xs, gx));
                }
                Op::Bmm { a, b, trans_b } => {
                    let sa = self.shape(*a).to_vec();
                    let sb = self.shape(*b).to_vec();
                    let (bt, m, k) = (sa[0], sa[1], sa[2]);
                    let n = if *trans_b { sb[1] } else { sb[2] };
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let mut ga = vec![F::zero(); av.len()];
                    let mut gb = vec![F::zero(); bv.len()];
                    for i in 0..bt {
                        let gi = &gv[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            F::gemm(m, n, k, gi, false, bi, false, gai, false);
                            F::gemm(n, m, k, gi, true, ai, false, gbi, false);
                        } else {
                            F::gemm(m, n, k, gi, false, bi, true, gai, false);
                            F::gemm(k, m, n, ai, true, gi, false, gbi, false);
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(&sa, ga));
                    acc(&mut grads, *b, Tensor::new(&sb, gb));
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut gx = vec![F::zero(); y.len()];
                    for ((gr, yr), out) in gv.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(node.value.shape(), gx));
                }
                Op::ScaleSamples(x, s) => {
                    let per = gv.len() / s.len();
                    let mut gx = gv.to_vec();
                    for (chunk, &f) in gx.chunks_mut(per).zip(s) {
                        chunk.iter_mut().for_each(|v| *v = *v * f);
                    }
                    acc(&mut grads, *x, Tensor::new(g.shape(), gx));
                }
                Op::AddRowScaled { x, v, s } => {
                    let d = self.shape(*v)[0];
                    let mut gvv = vec![F::zero(); d];
                    for (row, &f) in gv.chunks(d).zip(s) {
                        for (a, &r) in gvv.iter_mut().zip(row) {
                            *a += f * r;
                        }
                    }
                    acc(&mut grads, *v, Tensor::new(&[d], gvv));
                    acc(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let xs = self.shape(*x).to_vec();
                    acc(&mut grads, *x, Tensor::full(&xs, gv[0]));
                }
                Op::PerSampleMse { pred, target } => {
                    let ps = self.shape(*pred).to_vec();
                    let n = ps[0];
                    let per = target.len() / n;
                    let pv = self.value(*pred).data();
                    let two = F::of(2.0 / per as f64);
                    let gp = pv
                        .iter()
                        .zip(target)
                        .enumerate()
                        .map(|(i, (&p, &t))| gv[i / per] * two * (p - t))
                        .collect();
                    acc(&mut grads, *pred, Tensor::new(&ps, gp));
                }
                Op::MeanSorted(x) => {
                    let xs = self.shape(*x).to_vec();
                    let n = F::of(xs[0] as f64);
                    acc(&mut grads, *x, Tensor::full(&xs, gv[0] / n));
                }
            }
        }
        out
    }
}
