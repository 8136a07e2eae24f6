//! U-Net noise predictor `ε_θ(x_t, t, c_I, c_T)`.
//!
//! Layout per resolution level: two residual blocks on the way down and three
//! on the way up, with encoder activations concatenated into the decoder.
//! The image condition enters by channel concatenation with `x_t`; text enters
//! through cross-attention at the configured levels. Level `L` (one past the
//! last entry of `channel_multipliers`) is the bottleneck. Inputs whose size
//! is not a multiple of the total pooling factor are zero-padded at the
//! bottom and right, and the prediction is cropped back.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::textcodec::sinusoid;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Pooling factor applied after each level; the last one leads into the bottleneck.
    pub downsample_factors: Vec<usize>,
    /// Levels with text cross-attention; `channel_multipliers.len()` is the bottleneck.
    pub cross_attn_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub attn_heads: usize,
    /// Width of the text features attended to.
    pub text_dim: usize,
}

impl DenoiserConfig {
    /// Desk-scale preset: 48×240 lines, four levels, bottleneck at 2×10.
    pub fn desk() -> Self {
        DenoiserConfig {
            image_channels: 1,
            height: 48,
            width: 240,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4, 4],
            downsample_factors: vec![2, 2, 2, 3],
            cross_attn_levels: vec![3, 4],
            time_embed_dim: 64,
            groups: 8,
            attn_heads: 4,
            text_dim: 128,
        }
    }

    /// Full-size layout: 48×480 RGB lines, cross-attention on the 3×30 and
    /// 1×10 feature maps.
    pub fn paper() -> Self {
        DenoiserConfig {
            image_channels: 3,
            height: 48,
            width: 480,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 8, 8],
            downsample_factors: vec![2, 2, 2, 2, 3],
            cross_attn_levels: vec![4, 5],
            time_embed_dim: 128,
            groups: 8,
            attn_heads: 8,
            text_dim: 1536,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        let l = level.min(self.levels() - 1);
        self.base_channels * self.channel_multipliers[l]
    }

    /// Product of all pooling factors; inputs are zero-padded to a multiple of it.
    pub fn total_downsample(&self) -> usize {
        self.downsample_factors.iter().product()
    }

    /// Spatial size of the feature map at `level` (the bottleneck is `levels()`)
    /// for the configured line size.
    pub fn resolution(&self, level: usize) -> (usize, usize) {
        let f: usize = self.downsample_factors[..level].iter().product();
        (self.height / f, self.width / f)
    }

    pub fn has_attn(&self, level: usize) -> bool {
        self.cross_attn_levels.contains(&level)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_channels != 1 && self.image_channels != 3 {
            return bad(format!("image_channels must be 1 or 3, got {}", self.image_channels));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.len() != self.downsample_factors.len() {
            return bad("channel_multipliers and downsample_factors must be non-empty and equally long".into());
        }
        if self.downsample_factors.contains(&0) || self.height == 0 || self.width == 0 {
            return bad("downsample factors and line size must be positive".into());
        }
        for l in 0..=self.levels() {
            let c = self.channels(l);
            if c % self.groups != 0 {
                return bad(format!("{c} channels at level {l} not divisible by {} groups", self.groups));
            }
        }
        if let Some(&l) = self.cross_attn_levels.iter().find(|&&l| l > self.levels()) {
            return bad(format!("cross-attention level {l} does not exist"));
        }
        for &l in &self.cross_attn_levels {
            if self.channels(l) % self.attn_heads != 0 {
                return bad(format!("level {l} channels not divisible by {} heads", self.attn_heads));
            }
        }
        if self.time_embed_dim == 0 || self.base_channels < 2 {
            return bad("time_embed_dim and base_channels must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Conv,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct CrossAttn {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    out: Conv,
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: Option<CrossAttn>,
}

/// Parameter handles of the U-Net inside a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Unet {
    pub config: DenoiserConfig,
    time1: Conv,
    time2: Conv,
    image_null: ParamId,
    conv_in: Conv,
    down: Vec<Vec<Stage>>,
    mid: (ResBlock, Option<CrossAttn>, ResBlock),
    up: Vec<Vec<Stage>>,
    up_conv: Vec<Conv>,
    norm_out: Norm,
    conv_out: Conv,
}

/// One batch of denoiser inputs (NCHW tensors).
#[derive(Debug, Clone)]
pub struct UnetInput<'a> {
    pub x_t: Var,
    pub cond_image: Var,
    pub t: &'a [usize],
    /// Per-sample flag: the image condition is the null encoding.
    pub image_null: &'a [bool],
    pub text: Option<TextInput<'a>>,
}

/// Text features `[n, M, d]`, key mask `[n·M]` and per-sample keep flags.
#[derive(Debug, Clone)]
pub struct TextInput<'a> {
    pub features: Var,
    pub mask: &'a [bool],
    pub keep: &'a [bool],
}

/// Builds parameters or looks them up by name.
enum Source<'s, 'r, F, R> {
    Init(&'s mut ParamStore<F>, &'r mut R),
    Bind(&'s ParamStore<F>),
}

impl<F: Scalar, R: Rng> Source<'_, '_, F, R> {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match self {
            Source::Init(store, rng) => Ok(match init {
                Init::Normal(std) => store.normal(name, shape, std, *rng),
                Init::Const(v) => store.constant(name, shape, v),
            }),
            Source::Bind(store) => {
                let id = store
                    .find(name)
                    .ok_or_else(|| Error::ArtifactMismatch(format!("missing tensor {name}")))?;
                if store.get(id).shape() != shape {
                    return Err(Error::ArtifactMismatch(format!(
                        "{name}: shape {:?}, config expects {shape:?}",
                        store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, zero: bool) -> Result<Conv> {
        let std = if zero { 0.0 } else { (1.0 / (cin * k * k) as f64).sqrt() };
        Ok(Conv {
            w: self.tensor(&format!("{name}.w"), &[cout, cin, k, k], Init::Normal(std))?,
            b: self.tensor(&format!("{name}.b"), &[cout], Init::Const(0.0))?,
        })
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, zero: bool) -> Result<Conv> {
        let std = if zero { 0.0 } else { (1.0 / inp as f64).sqrt() };
        Ok(Conv {
            w: self.tensor(&format!("{name}.w"), &[out, inp], Init::Normal(std))?,
            b: self.tensor(&format!("{name}.b"), &[out], Init::Const(0.0))?,
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.tensor(&format!("{name}.g"), &[c], Init::Const(1.0))?,
            beta: self.tensor(&format!("{name}.b"), &[c], Init::Const(0.0))?,
        })
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin)?,
            conv1: self.conv(&format!("{name}.conv1"), cout, cin, 3, false)?,
            temb: self.linear(&format!("{name}.temb"), cout, temb, false)?,
            norm2: self.norm(&format!("{name}.norm2"), cout)?,
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, false)?,
            skip: if cin != cout {
                Some(self.conv(&format!("{name}.skip"), cout, cin, 1, false)?)
            } else {
                None
            },
        })
    }

    fn attn(&mut self, name: &str, c: usize, text_dim: usize) -> Result<CrossAttn> {
        Ok(CrossAttn {
            norm: self.norm(&format!("{name}.norm"), c)?,
            q: self.linear(&format!("{name}.q"), c, c, false)?,
            k: self.linear(&format!("{name}.k"), c, text_dim, false)?,
            v: self.linear(&format!("{name}.v"), c, text_dim, false)?,
            out: self.linear(&format!("{name}.out"), c, c, false)?,
        })
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Const(f64),
}

impl Unet {
    /// Fresh parameters. The output convolution starts at zero.
    pub fn new<F: Scalar, R: Rng>(config: DenoiserConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        Self::build(config, Source::Init(store, rng))
    }

    /// Re-binds to tensors already in `store`, validating every shape.
    pub fn bind<F: Scalar>(config: DenoiserConfig, store: &ParamStore<F>) -> Result<Self> {
        Self::build::<F, rand_chacha::ChaCha8Rng>(config, Source::Bind(store))
    }

    fn build<F: Scalar, R: Rng>(config: DenoiserConfig, mut src: Source<'_, '_, F, R>) -> Result<Self> {
        config.validate()?;
        let c0 = config.base_channels;
        let td = config.time_embed_dim;
        let levels = config.levels();
        let time1 = src.linear("unet.time1", td, c0, false)?;
        let time2 = src.linear("unet.time2", td, td, false)?;
        let image_null = src.tensor("unet.image_null", &[td], Init::Normal(1.0))?;
        let conv_in = src.conv("unet.conv_in", c0, 2 * config.image_channels, 3, false)?;

        let mut skip_ch = vec![c0];
        let mut ch = c0;
        let mut down = Vec::new();
        for l in 0..levels {
            let cout = config.channels(l);
            let mut stages = Vec::new();
            for j in 0..2 {
                let res = src.res(&format!("unet.down{l}.res{j}"), ch, cout, td)?;
                ch = cout;
                let attn = if config.has_attn(l) {
                    Some(src.attn(&format!("unet.down{l}.attn{j}"), ch, config.text_dim)?)
                } else {
                    None
                };
                stages.push(Stage { res, attn });
                skip_ch.push(ch);
            }
            if l + 1 < levels {
                skip_ch.push(ch);
            }
            down.push(stages);
        }
        let mid_attn = if config.has_attn(levels) {
            Some(src.attn("unet.mid.attn", ch, config.text_dim)?)
        } else {
            None
        };
        let mid = (
            src.res("unet.mid.res0", ch, ch, td)?,
            mid_attn,
            src.res("unet.mid.res1", ch, ch, td)?,
        );
        let mut up = Vec::new();
        let mut up_conv = Vec::new();
        for l in (0..levels).rev() {
            up_conv.push(src.conv(&format!("unet.up{l}.upsample"), ch, ch, 3, false)?);
            let cout = config.channels(l);
            let mut stages = Vec::new();
            for j in 0..3 {
                let s = skip_ch.pop().expect("skip bookkeeping");
                let res = src.res(&format!("unet.up{l}.res{j}"), ch + s, cout, td)?;
                ch = cout;
                let attn = if config.has_attn(l) {
                    Some(src.attn(&format!("unet.up{l}.attn{j}"), ch, config.text_dim)?)
                } else {
                    None
                };
                stages.push(Stage { res, attn });
            }
            up.push(stages);
        }
        debug_assert!(skip_ch.is_empty());
        let norm_out = src.norm("unet.norm_out", ch)?;
        let conv_out = src.conv("unet.conv_out", config.image_channels, ch, 3, true)?;
        Ok(Unet {
            config,
            time1,
            time2,
            image_null,
            conv_in,
            down,
            mid,
            up,
            up_conv,
            norm_out,
            conv_out,
        })
    }

    pub fn conv_out_ids(&self) -> (ParamId, ParamId) {
        (self.conv_out.w, self.conv_out.b)
    }

    fn conv<F: Scalar>(tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, c: &Conv) -> Var {
        let w = tape.param(store, c.w);
        let b = tape.param(store, c.b);
        tape.conv2d(x, w, Some(b))
    }

    fn linear<F: Scalar>(tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, c: &Conv) -> Var {
        let w = tape.param(store, c.w);
        let b = tape.param(store, c.b);
        tape.linear(x, w, Some(b))
    }

    fn norm<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, n: &Norm) -> Var {
        let g = tape.param(store, n.gamma);
        let b = tape.param(store, n.beta);
        tape.group_norm(x, g, b, self.config.groups, 1e-5)
    }

    fn res<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, temb: Var, r: &ResBlock) -> Var {
        let h = self.norm(tape, store, x, &r.norm1);
        let h = tape.silu(h);
        let h = Self::conv(tape, store, h, &r.conv1);
        let t = Self::linear(tape, store, temb, &r.temb);
        let h = tape.add_channel(h, t);
        let h = self.norm(tape, store, h, &r.norm2);
        let h = tape.silu(h);
        let h = Self::conv(tape, store, h, &r.conv2);
        let skip = match &r.skip {
            Some(c) => Self::conv(tape, store, x, c),
            None => x,
        };
        tape.add(skip, h)
    }

    /// Query position code: sinusoid of the input-image column each feature
    /// cell covers.
    fn column_code<F: Scalar>(&self, n: usize, h: usize, w: usize, c: usize, input_w: usize) -> Tensor<F> {
        let stride = input_w as f64 / w as f64;
        let mut row = vec![0.0; c];
        let mut out = vec![0.0; n * h * w * c];
        for x in 0..w {
            sinusoid((x as f64 + 0.5) * stride / 8.0, c, &mut row);
            for b in 0..n {
                for y in 0..h {
                    let o = ((b * h + y) * w + x) * c;
                    out[o..o + c].copy_from_slice(&row);
                }
            }
        }
        Tensor::from_f64(&[n, h * w, c], &out)
    }

    fn cross_attn<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        text: &TextInput<'_>,
        a: &CrossAttn,
        input_w: usize,
    ) -> Var {
        let s = tape.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let heads = self.config.attn_heads;
        let xn = self.norm(tape, store, x, &a.norm);
        let seq = tape.nchw_to_nlc(xn);
        let seq = tape.add_const(seq, &self.column_code(n, h, w, c, input_w));
        let q = Self::linear(tape, store, seq, &a.q);
        let k = Self::linear(tape, store, text.features, &a.k);
        let v = Self::linear(tape, store, text.features, &a.v);
        let (q, k, v) = (tape.split_heads(q, heads), tape.split_heads(k, heads), tape.split_heads(v, heads));
        let scores = tape.bmm(q, k, true);
        let scores = tape.scale(scores, 1.0 / ((c / heads) as f64).sqrt());
        let probs = tape.masked_softmax(scores, text.mask, heads);
        let o = tape.bmm(probs, v, false);
        let o = tape.merge_heads(o, heads);
        let o = Self::linear(tape, store, o, &a.out);
        let o = tape.nlc_to_nchw(o, h, w);
        let o = if text.keep.iter().all(|&k| k) {
            o
        } else {
            let gate: Vec<F> = text.keep.iter().map(|&k| if k { F::one() } else { F::zero() }).collect();
            tape.scale_samples(o, &gate)
        };
        tape.add(x, o)
    }

    fn stage<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        temb: Var,
        text: Option<&TextInput<'_>>,
        st: &Stage,
        input_w: usize,
    ) -> Var {
        let h = self.res(tape, store, x, temb, &st.res);
        match (&st.attn, text) {
            (Some(a), Some(t)) => self.cross_attn(tape, store, h, t, a, input_w),
            _ => h,
        }
    }

    /// Sinusoidal timestep features `[n, base_channels]`.
    pub fn timestep_features<F: Scalar>(&self, t: &[usize]) -> Tensor<F> {
        let c = self.config.base_channels;
        let mut out = vec![0.0; t.len() * c];
        for (i, &ti) in t.iter().enumerate() {
            sinusoid(ti as f64, c, &mut out[i * c..(i + 1) * c]);
        }
        Tensor::from_f64(&[t.len(), c], &out)
    }

    /// Records the noise prediction for a batch; returns `[n, C, H, W]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, input: &UnetInput<'_>) -> Result<Var> {
        let cfg = &self.config;
        let xs = tape.shape(input.x_t).to_vec();
        if xs.len() != 4 || xs[0] != input.t.len() || xs[1] != cfg.image_channels || tape.shape(input.cond_image) != xs {
            return Err(Error::shape(format!(
                "denoiser expects [{}, {}, H, W] for x_t and c_I, got {xs:?} / {:?}",
                input.t.len(),
                cfg.image_channels,
                tape.shape(input.cond_image)
            )));
        }
        if input.image_null.len() != input.t.len() {
            return Err(Error::shape("image_null flags per sample".to_string()));
        }
        if let Some(text) = &input.text {
            let ts = tape.shape(text.features);
            if ts.len() != 3 || ts[0] != input.t.len() || ts[2] != cfg.text_dim || text.mask.len() != ts[0] * ts[1] {
                return Err(Error::shape(format!(
                    "text features {ts:?} do not match batch {} / dim {}",
                    input.t.len(),
                    cfg.text_dim
                )));
            }
        }
        let text = input.text.as_ref();

        let tf = tape.leaf(self.timestep_features(input.t));
        let temb = Self::linear(tape, store, tf, &self.time1);
        let temb = tape.silu(temb);
        let temb = Self::linear(tape, store, temb, &self.time2);
        let temb = if input.image_null.iter().any(|&b| b) {
            let v = tape.param(store, self.image_null);
            let flags: Vec<F> = input.image_null.iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
            tape.add_row_scaled(temb, v, &flags)
        } else {
            temb
        };
        let temb = tape.silu(temb);

        let (hin, win) = (xs[2], xs[3]);
        let f = cfg.total_downsample();
        let (hp, wp) = (hin.div_ceil(f) * f, win.div_ceil(f) * f);
        let mut x = tape.concat_channels(input.x_t, input.cond_image);
        if (hp, wp) != (hin, win) {
            x = tape.resize_hw(x, hp, wp);
        }
        let mut h = Self::conv(tape, store, x, &self.conv_in);
        let mut skips = vec![h];
        let levels = cfg.levels();
        for (l, stages) in self.down.iter().enumerate() {
            for st in stages {
                h = self.stage(tape, store, h, temb, text, st, wp);
                skips.push(h);
            }
            h = tape.avg_pool(h, cfg.downsample_factors[l]);
            if l + 1 < levels {
                skips.push(h);
            }
        }
        h = self.res(tape, store, h, temb, &self.mid.0);
        if let (Some(a), Some(t)) = (&self.mid.1, text) {
            h = self.cross_attn(tape, store, h, t, a, wp);
        }
        h = self.res(tape, store, h, temb, &self.mid.2);
        for (i, stages) in self.up.iter().enumerate() {
            let l = levels - 1 - i;
            h = tape.upsample(h, cfg.downsample_factors[l]);
            h = Self::conv(tape, store, h, &self.up_conv[i]);
            for st in stages {
                let s = skips.pop().expect("skip bookkeeping");
                let cat = tape.concat_channels(h, s);
                h = self.stage(tape, store, cat, temb, text, st, wp);
            }
        }
        let h = self.norm(tape, store, h, &self.norm_out);
        let h = tape.silu(h);
        let out = Self::conv(tape, store, h, &self.conv_out);
        Ok(if (hp, wp) != (hin, win) {
            tape.resize_hw(out, hin, win)
        } else {
            out
        })
    }
}
