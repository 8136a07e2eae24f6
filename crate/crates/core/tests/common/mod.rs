//! Independent reference implementations shared by the integration tests and
//! the acceptance binary. Nothing here calls into the tape engine.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textsr::diffusion::{training_loss, training_step, DenoiserConfig, DiffusionBatch, ModelConfig, ScheduleConfig, TextSrModel};
use textsr::nn::ParamStore;
use textsr::textcodec::TextEncoderConfig;

pub fn tiny_denoiser(base: usize, groups: usize) -> DenoiserConfig {
    DenoiserConfig {
        image_channels: 1,
        height: 8,
        width: 16,
        base_channels: base,
        channel_multipliers: vec![1, 2],
        downsample_factors: vec![2, 2],
        cross_attn_levels: vec![1, 2],
        time_embed_dim: 8,
        groups,
        attn_heads: 2,
        text_dim: 8,
    }
}

pub fn tiny_text() -> TextEncoderConfig {
    TextEncoderConfig {
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        n_layers: 2,
        max_len: 4,
        trainable: true,
        project: false,
    }
}

pub fn tiny_model_config(base: usize, groups: usize) -> ModelConfig {
    ModelConfig {
        denoiser: tiny_denoiser(base, groups),
        text: tiny_text(),
        schedule: ScheduleConfig::default(),
    }
}

/// Overwrites every parameter with uniform values in `[-scale, scale]`
/// (norm gains around 1).
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let gain = store.name(id).ends_with(".g");
        for v in store.get_mut(id).data_mut() {
            let r: f64 = rng.random_range(-scale..scale);
            *v = if gain { 1.0 + r } else { r };
        }
    }
}

// ---------- dense primitives ----------

#[derive(Clone, Debug)]
pub struct Fm {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Fm {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.d[(c * self.h + y) * self.w + x]
    }
}

pub struct Weights<'a>(pub &'a ParamStore<f64>);

impl Weights<'_> {
    pub fn v(&self, name: &str) -> Vec<f64> {
        self.0.by_name(name).data().to_vec()
    }
    pub fn shape(&self, name: &str) -> Vec<usize> {
        self.0.by_name(name).shape().to_vec()
    }
    pub fn has(&self, name: &str) -> bool {
        self.0.find(name).is_some()
    }
}

pub fn sinus(pos: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

/// `rows × in` times `W[out, in]ᵀ` plus bias.
pub fn dense(x: &[f64], rows: usize, w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let inp = x.len() / rows;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut s = b[o];
            for i in 0..inp {
                s += x[r * inp + i] * w[o * inp + i];
            }
            y[r * out + o] = s;
        }
    }
    y
}

fn conv(x: &Fm, w: &[f64], b: &[f64], co: usize, k: usize) -> Fm {
    let p = (k / 2) as isize;
    let mut d = vec![0.0; co * x.h * x.w];
    for o in 0..co {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = b[o];
                for ci in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - p;
                            let sx = xx as isize + kx as isize - p;
                            if sy >= 0 && sx >= 0 && (sy as usize) < x.h && (sx as usize) < x.w {
                                s += w[((o * x.c + ci) * k + ky) * k + kx] * x.at(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                }
                d[(o * x.h + y) * x.w + xx] = s;
            }
        }
    }
    Fm { c: co, h: x.h, w: x.w, d }
}

fn conv_named(x: &Fm, wts: &Weights, name: &str) -> Fm {
    let s = wts.shape(&format!("{name}.w"));
    conv(x, &wts.v(&format!("{name}.w")), &wts.v(&format!("{name}.b")), s[0], s[2])
}

fn group_norm(x: &Fm, g: &[f64], b: &[f64], groups: usize, eps: f64) -> Fm {
    let cg = x.c / groups;
    let hw = x.h * x.w;
    let mut d = x.d.clone();
    for gi in 0..groups {
        let sl = &x.d[gi * cg * hw..(gi + 1) * cg * hw];
        let n = sl.len() as f64;
        let mu = sl.iter().sum::<f64>() / n;
        let var = sl.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        for c in gi * cg..(gi + 1) * cg {
            for i in 0..hw {
                d[c * hw + i] = (x.d[c * hw + i] - mu) / (var + eps).sqrt() * g[c] + b[c];
            }
        }
    }
    Fm { d, ..x.clone() }
}

fn gn_named(x: &Fm, wts: &Weights, name: &str, groups: usize) -> Fm {
    group_norm(x, &wts.v(&format!("{name}.g")), &wts.v(&format!("{name}.b")), groups, 1e-5)
}

fn map(x: &Fm, f: impl Fn(f64) -> f64) -> Fm {
    Fm {
        d: x.d.iter().map(|&v| f(v)).collect(),
        ..x.clone()
    }
}

fn add(a: &Fm, b: &Fm) -> Fm {
    Fm {
        d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

fn concat(a: &Fm, b: &Fm) -> Fm {
    let mut d = a.d.clone();
    d.extend_from_slice(&b.d);
    Fm { c: a.c + b.c, h: a.h, w: a.w, d }
}

fn pool(x: &Fm, f: usize) -> Fm {
    let (h, w) = (x.h / f, x.w / f);
    let mut d = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        s += x.at(c, y * f + dy, xx * f + dx);
                    }
                }
                d[(c * h + y) * w + xx] = s / (f * f) as f64;
            }
        }
    }
    Fm { c: x.c, h, w, d }
}

fn upsample(x: &Fm, f: usize) -> Fm {
    let (h, w) = (x.h * f, x.w * f);
    let mut d = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                d[(c * h + y) * w + xx] = x.at(c, y / f, xx / f);
            }
        }
    }
    Fm { c: x.c, h, w, d }
}

fn softmax_masked(row: &[f64], mask: &[bool]) -> Vec<f64> {
    if !mask.iter().any(|&m| m) {
        return vec![0.0; row.len()];
    }
    let mx = row.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).fold(f64::MIN, f64::max);
    let e: Vec<f64> = row.iter().zip(mask).map(|(&v, &m)| if m { (v - mx).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Multi-head attention of `q: lq × d` over `k, v: lk × d`.
fn mha(q: &[f64], k: &[f64], v: &[f64], d: usize, heads: usize, mask: &[bool]) -> Vec<f64> {
    let (lq, lk) = (q.len() / d, k.len() / d);
    let dh = d / heads;
    let mut out = vec![0.0; lq * d];
    for h in 0..heads {
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| (0..dh).map(|e| q[i * d + h * dh + e] * k[j * d + h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax_masked(&scores, mask);
            for e in 0..dh {
                out[i * d + h * dh + e] = (0..lk).map(|j| p[j] * v[j * d + h * dh + e]).sum();
            }
        }
    }
    out
}

// ---------- text encoder ----------

fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for r in 0..x.len() / d {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        for j in 0..d {
            y[r * d + j] = (row[j] - mu) / (var + 1e-6).sqrt() * g[j] + b[j];
        }
    }
    y
}

/// Text encoder forward for one sequence; returns `M × d`.
pub fn encoder_oracle(wts: &Weights, cfg: &TextEncoderConfig, ids: &[u16], mask: &[bool]) -> Vec<f64> {
    let (m, d, ff) = (cfg.max_len, cfg.d_model, cfg.d_ff);
    let table = wts.v("text.embed");
    let mut x = vec![0.0; m * d];
    for p in 0..m {
        let pe = sinus(p as f64, d);
        for j in 0..d {
            x[p * d + j] = table[ids[p] as usize * d + j] + pe[j];
        }
    }
    let lin = |x: &[f64], n: &str, out: usize| dense(x, m, &wts.v(&format!("{n}.w")), &wts.v(&format!("{n}.b")), out);
    for l in 0..cfg.n_layers {
        let p = format!("text.block{l}");
        let xn = layer_norm(&x, d, &wts.v(&format!("{p}.ln1.g")), &wts.v(&format!("{p}.ln1.b")));
        let q = lin(&xn, &format!("{p}.attn.q"), d);
        let k = lin(&xn, &format!("{p}.attn.k"), d);
        let v = lin(&xn, &format!("{p}.attn.v"), d);
        let o = mha(&q, &k, &v, d, cfg.n_heads, mask);
        let o = lin(&o, &format!("{p}.attn.o"), d);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        let xn = layer_norm(&x, d, &wts.v(&format!("{p}.ln2.g")), &wts.v(&format!("{p}.ln2.b")));
        let f: Vec<f64> = lin(&xn, &format!("{p}.ff1"), ff).into_iter().map(gelu).collect();
        let f = lin(&f, &format!("{p}.ff2"), d);
        x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
    }
    if cfg.project {
        x = lin(&x, "text.proj", d);
    }
    for p in 0..m {
        if !mask[p] {
            x[p * d..(p + 1) * d].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    x
}

// ---------- U-Net ----------

fn res_block(x: &Fm, temb: &[f64], wts: &Weights, p: &str, groups: usize) -> Fm {
    let h = map(&gn_named(x, wts, &format!("{p}.norm1"), groups), silu);
    let mut h = conv_named(&h, wts, &format!("{p}.conv1"));
    let tv = dense(temb, 1, &wts.v(&format!("{p}.temb.w")), &wts.v(&format!("{p}.temb.b")), h.c);
    let hw = h.h * h.w;
    for c in 0..h.c {
        h.d[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += tv[c]);
    }
    let h = map(&gn_named(&h, wts, &format!("{p}.norm2"), groups), silu);
    let h = conv_named(&h, wts, &format!("{p}.conv2"));
    let skip = if wts.has(&format!("{p}.skip.w")) {
        conv_named(x, wts, &format!("{p}.skip"))
    } else {
        x.clone()
    };
    add(&skip, &h)
}

pub struct TextCond<'a> {
    pub feats: &'a [f64],
    pub mask: &'a [bool],
}

#[allow(clippy::too_many_arguments)]
fn cross_attn(x: &Fm, text: &TextCond, wts: &Weights, p: &str, groups: usize, heads: usize, input_w: usize) -> Fm {
    let xn = gn_named(x, wts, &format!("{p}.norm"), groups);
    let (c, l) = (x.c, x.h * x.w);
    let mut seq = vec![0.0; l * c];
    for y in 0..x.h {
        for xx in 0..x.w {
            let code = sinus((xx as f64 + 0.5) * (input_w as f64 / x.w as f64) / 8.0, c);
            for ch in 0..c {
                seq[(y * x.w + xx) * c + ch] = xn.at(ch, y, xx) + code[ch];
            }
        }
    }
    let m = text.mask.len();
    let lin = |v: &[f64], rows: usize, n: &str| dense(v, rows, &wts.v(&format!("{p}.{n}.w")), &wts.v(&format!("{p}.{n}.b")), c);
    let q = lin(&seq, l, "q");
    let k = lin(text.feats, m, "k");
    let v = lin(text.feats, m, "v");
    let o = mha(&q, &k, &v, c, heads, text.mask);
    let o = lin(&o, l, "out");
    let mut out = x.clone();
    for i in 0..l {
        for ch in 0..c {
            out.d[ch * l + i] += o[i * c + ch];
        }
    }
    out
}

/// Straight-line U-Net forward for one sample. `cond = None` is the null image.
pub fn unet_oracle(
    cfg: &DenoiserConfig,
    wts: &Weights,
    x_t: &Fm,
    cond: Option<&Fm>,
    t: usize,
    text: Option<&TextCond>,
) -> Fm {
    let g = cfg.groups;
    let heads = cfg.attn_heads;
    let tf = sinus(t as f64, cfg.base_channels);
    let td = cfg.time_embed_dim;
    let e: Vec<f64> = dense(&tf, 1, &wts.v("unet.time1.w"), &wts.v("unet.time1.b"), td).into_iter().map(silu).collect();
    let mut e = dense(&e, 1, &wts.v("unet.time2.w"), &wts.v("unet.time2.b"), td);
    if cond.is_none() {
        e.iter_mut().zip(wts.v("unet.image_null")).for_each(|(a, b)| *a += b);
    }
    let temb: Vec<f64> = e.into_iter().map(silu).collect();

    let zeros = Fm {
        d: vec![0.0; x_t.d.len()],
        ..x_t.clone()
    };
    let x = concat(x_t, cond.unwrap_or(&zeros));
    let input_w = x.w;
    let mut h = conv_named(&x, wts, "unet.conv_in");
    let mut skips = vec![h.clone()];
    let levels = cfg.channel_multipliers.len();
    let attn = |h: Fm, level: usize, name: &str| match text {
        Some(tc) if cfg.cross_attn_levels.contains(&level) => cross_attn(&h, tc, wts, name, g, heads, input_w),
        _ => h,
    };
    for l in 0..levels {
        for j in 0..2 {
            h = res_block(&h, &temb, wts, &format!("unet.down{l}.res{j}"), g);
            h = attn(h, l, &format!("unet.down{l}.attn{j}"));
            skips.push(h.clone());
        }
        h = pool(&h, cfg.downsample_factors[l]);
        if l + 1 < levels {
            skips.push(h.clone());
        }
    }
    h = res_block(&h, &temb, wts, "unet.mid.res0", g);
    h = attn(h, levels, "unet.mid.attn");
    h = res_block(&h, &temb, wts, "unet.mid.res1", g);
    for l in (0..levels).rev() {
        h = upsample(&h, cfg.downsample_factors[l]);
        h = conv_named(&h, wts, &format!("unet.up{l}.upsample"));
        for j in 0..3 {
            let s = skips.pop().unwrap();
            h = res_block(&concat(&h, &s), &temb, wts, &format!("unet.up{l}.res{j}"), g);
            h = attn(h, l, &format!("unet.up{l}.attn{j}"));
        }
    }
    let h = map(&gn_named(&h, wts, "unet.norm_out", g), silu);
    conv_named(&h, wts, "unet.conv_out")
}

// ---------- gradient check ----------

pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central differences (h = 1e-5) on every entry of every parameter against
/// backprop; relative error `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(model: &mut TextSrModel<f64>, batch: &DiffusionBatch, per_tensor: usize) -> GradReport {
    let (_, grads) = training_step(model, batch).unwrap();
    let h = 1e-5;
    let mut rep = GradReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let used: Vec<usize> = batch.text.iter().flat_map(|s| s.ids().iter().map(|&t| t as usize)).collect();
    for id in model.store.ids().collect::<Vec<_>>() {
        let n = model.store.get(id).len();
        let mut idx: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            let mut v = vec![0, n - 1];
            v.extend((0..per_tensor - 2).map(|_| rng.random_range(0..n)));
            v
        };
        if model.store.name(id) == "text.embed" {
            let d = model.store.get(id).shape()[1];
            idx.extend(used.iter().flat_map(|&t| t * d..(t + 1) * d));
        }
        idx.sort_unstable();
        idx.dedup();
        for j in idx {
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + h;
            let lp = training_loss(model, batch).unwrap();
            model.store.get_mut(id).data_mut()[j] = orig - h;
            let lm = training_loss(model, batch).unwrap();
            model.store.get_mut(id).data_mut()[j] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-4);
            rep.checked += 1;
            if rel > rep.max_rel {
                rep.max_rel = rel;
                rep.worst = format!("{}[{j}] analytic {ana:e} numeric {num:e}", model.store.name(id));
            }
        }
    }
    rep
}

/// Sum of a few low-frequency sinusoids with random phases, values within ±0.8.
pub fn smooth_image(h: usize, w: usize, c: usize, seed: u64) -> textsr::ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.01..0.12),
                rng.random_range(0.01..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.2),
            )
        })
        .collect();
    textsr::ImagePlane::from_fn(h, w, c, |y, x, ch| {
        waves
            .iter()
            .map(|&(fy, fx, ph, a)| a * (fy * y as f64 + fx * x as f64 + ph + ch as f64).sin())
            .sum()
    })
}
