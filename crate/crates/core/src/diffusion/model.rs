use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, NoiseSchedule, ScheduleConfig, TextInput, Unet, UnetInput};
use crate::nn::{ParamStore, Scalar, Tape, Tensor};
use crate::rng::{keyed_rng, stage};
use crate::textcodec::{tokenize, TextEncoder, TextEncoderConfig, TextFeatures};
use crate::{Error, ImagePlane, Result};

/// Everything needed to rebuild a model: denoiser, text encoder and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub text: TextEncoderConfig,
    pub schedule: ScheduleConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            denoiser: DenoiserConfig::desk(),
            text: TextEncoderConfig::desk(),
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            denoiser: DenoiserConfig::paper(),
            text: TextEncoderConfig::paper_scale(),
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.text.validate()?;
        self.schedule.build()?;
        if self.text.d_model != self.denoiser.text_dim {
            return Err(Error::Config(format!(
                "text encoder width {} does not match denoiser text_dim {}",
                self.text.d_model, self.denoiser.text_dim
            )));
        }
        Ok(())
    }
}

/// Noise predictor interface used by the sampler.
pub trait EpsModel {
    fn image_channels(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    fn encode_text(&self, text: &str) -> Result<TextFeatures>;

    /// `ε_θ(x_t, t, c_I, τ)`; `cond_image = None` is the null image and
    /// `text = None` the null text.
    fn predict_eps(
        &self,
        x_t: &ImagePlane,
        t: usize,
        cond_image: Option<&ImagePlane>,
        text: Option<&TextFeatures>,
    ) -> Result<ImagePlane>;
}

/// Denoiser and text encoder sharing one parameter store.
#[derive(Debug, Clone)]
pub struct TextSrModel<F = f32> {
    pub config: ModelConfig,
    pub schedule: NoiseSchedule,
    pub store: ParamStore<F>,
    pub unet: Unet,
    pub encoder: TextEncoder,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl<F: Scalar> TextSrModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed_rng(seed, 0, stage::INIT);
        let mut store = ParamStore::new();
        let encoder = TextEncoder::new(config.text.clone(), &mut store, &mut rng)?;
        let unet = Unet::new(config.denoiser.clone(), &mut store, &mut rng)?;
        Ok(TextSrModel {
            schedule: config.schedule.build()?,
            config,
            store,
            unet,
            encoder,
            step: 0,
        })
    }

    /// Wraps loaded tensors, checking names and shapes against `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore<F>, step: u64) -> Result<Self> {
        config.validate()?;
        let encoder = TextEncoder::bind(config.text.clone(), &store)?;
        let unet = Unet::bind(config.denoiser.clone(), &store)?;
        let fresh = TextSrModel::<F>::new(config.clone(), 0)?;
        if fresh.store.len() != store.len() {
            let extra: Vec<&str> = store
                .ids()
                .map(|id| store.name(id))
                .filter(|n| fresh.store.find(n).is_none())
                .collect();
            return Err(Error::ArtifactMismatch(format!("unexpected tensors {extra:?}")));
        }
        let mut store = store;
        for id in store.ids().collect::<Vec<_>>() {
            let frozen = fresh.store.is_frozen(fresh.store.find(store.name(id)).expect("checked above"));
            store.set_frozen(id, frozen);
        }
        Ok(TextSrModel {
            schedule: config.schedule.build()?,
            config,
            store,
            unet,
            encoder,
            step,
        })
    }

    pub fn cast<G: Scalar>(&self) -> TextSrModel<G> {
        TextSrModel {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            store: self.store.cast(),
            unet: self.unet.clone(),
            encoder: self.encoder.clone(),
            step: self.step,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.numel()
    }
}

/// HWC plane to a CHW buffer.
pub(crate) fn plane_to_chw(p: &ImagePlane) -> Vec<f64> {
    let (h, w, c) = p.dims();
    if c == 1 {
        return p.data().to_vec();
    }
    let mut out = vec![0.0; h * w * c];
    for (i, px) in p.data().chunks(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * h * w + i] = v;
        }
    }
    out
}

pub(crate) fn chw_to_plane(data: &[f64], h: usize, w: usize, c: usize) -> Result<ImagePlane> {
    if c == 1 {
        return ImagePlane::new(h, w, 1, data.to_vec());
    }
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        for i in 0..h * w {
            out[i * c + ch] = data[ch * h * w + i];
        }
    }
    ImagePlane::new(h, w, c, out)
}

impl<F: Scalar> EpsModel for TextSrModel<F> {
    fn image_channels(&self) -> usize {
        self.config.denoiser.image_channels
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode_text(&self, text: &str) -> Result<TextFeatures> {
        self.encoder.encode(&tokenize(text, self.config.text.max_len), &self.store)
    }

    fn predict_eps(
        &self,
        x_t: &ImagePlane,
        t: usize,
        cond_image: Option<&ImagePlane>,
        text: Option<&TextFeatures>,
    ) -> Result<ImagePlane> {
        let (h, w, c) = x_t.dims();
        if c != self.image_channels() {
            return Err(Error::shape(format!("model expects {} channels, got {c}", self.image_channels())));
        }
        if t >= self.schedule.len() {
            return Err(Error::InvalidRange(format!("timestep {t} outside schedule")));
        }
        let mut tape = Tape::<F>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, c, h, w], &plane_to_chw(x_t)));
        let cond = match cond_image {
            Some(ci) => {
                x_t.ensure_same_shape(ci)?;
                Tensor::from_f64(&[1, c, h, w], &plane_to_chw(ci))
            }
            None => Tensor::zeros(&[1, c, h, w]),
        };
        let cond = tape.leaf(cond);
        let keep = [true];
        let text_in = match text {
            Some(f) => {
                let v = tape.leaf(Tensor::from_f64(&[1, f.len(), f.dim], &f.values));
                Some(TextInput {
                    features: v,
                    mask: &f.mask,
                    keep: &keep,
                })
            }
            None => None,
        };
        let out = self.unet.forward(
            &mut tape,
            &self.store,
            &UnetInput {
                x_t: x,
                cond_image: cond,
                t: &[t],
                image_null: &[cond_image.is_none()],
                text: text_in,
            },
        )?;
        let v = tape.value(out);
        if !v.all_finite() {
            return Err(Error::NonFiniteActivation("denoiser output".into()));
        }
        chw_to_plane(&v.to_f64(), h, w, c)
    }
}
