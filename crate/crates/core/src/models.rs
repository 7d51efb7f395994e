//! Autoencoder architectures: mono-modal baselines, mid-fusion variants,
//! attention and bottleneck fusion, a variational model and a residual
//! comparator.
//!
//! Every encoder maps its `C x 32 x 32` spectrogram stack to a
//! `latent_channels x 4 x 4` map through three stride-2 stages; every
//! decoder mirrors that with nearest-neighbour upsampling and convolutions,
//! ending in a sigmoid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cwt::{SampleTensor, SPEC_PIXELS, SPEC_SIZE};
use crate::eval::Modality;
use crate::losses::{self, LossKind};
use crate::nn::train::Objective;
use crate::nn::{GraphSpec, LayerSpec, Mode, ModelGraph, Scalar, Tensor};
use crate::{Error, Result};

pub const ACCEL_CHANNELS: usize = 3;
pub const AUDIO_CHANNELS: usize = 1;
/// Spatial size of every encoder output.
pub const LATENT_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MonoAcc,
    MonoAud,
    Maa1Joint,
    Maa2Conv,
    Maa3Pool,
    Matten,
    Mbotf,
    Cvae,
    Residual,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::MonoAcc,
        Variant::MonoAud,
        Variant::Maa1Joint,
        Variant::Maa2Conv,
        Variant::Maa3Pool,
        Variant::Matten,
        Variant::Mbotf,
        Variant::Cvae,
        Variant::Residual,
    ];

    /// Short id used on the command line.
    pub fn id(self) -> &'static str {
        match self {
            Variant::MonoAcc => "macc",
            Variant::MonoAud => "maud",
            Variant::Maa1Joint => "maa1",
            Variant::Maa2Conv => "maa2",
            Variant::Maa3Pool => "maa3",
            Variant::Matten => "matten",
            Variant::Mbotf => "mbotf",
            Variant::Cvae => "cvae",
            Variant::Residual => "residual",
        }
    }

    pub fn modalities(self) -> &'static [Modality] {
        match self {
            Variant::MonoAcc => &[Modality::Accel],
            Variant::MonoAud => &[Modality::Audio],
            _ => &[Modality::Accel, Modality::Audio],
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .or_else(|| serde_json::from_value(serde_json::Value::String(s.to_string())).ok())
            .ok_or_else(|| Error::Config(format!("unknown model '{s}'")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Max,
    Mean,
}

/// How the two latent maps are joined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOp {
    #[default]
    Concat,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub variant: Variant,
    /// Filters of the first two encoder stages (mirrored in the decoder);
    /// the third stage has `latent_channels` filters.
    pub stage_filters: [usize; 2],
    pub latent_channels: usize,
    pub fusion_kernel: usize,
    pub fusion_op: FusionOp,
    pub pool: PoolKind,
    pub attention_heads: usize,
    pub bottleneck_tokens: usize,
    pub vae_latent: usize,
    pub kl_weight: f64,
    /// L1 penalty on the latent; `None` disables it.
    pub sparsity_weight: Option<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            variant: Variant::Maa3Pool,
            stage_filters: [256, 128],
            latent_channels: 64,
            fusion_kernel: 3,
            fusion_op: FusionOp::Concat,
            pool: PoolKind::Max,
            attention_heads: 4,
            bottleneck_tokens: 4,
            vae_latent: 2,
            kl_weight: 1.0,
            sparsity_weight: None,
        }
    }
}

impl FusionConfig {
    pub fn new(variant: Variant) -> Self {
        FusionConfig {
            variant,
            ..Self::default()
        }
    }

    /// Same topology with narrower stages.
    pub fn with_widths(mut self, stage_filters: [usize; 2], latent_channels: usize) -> Self {
        self.stage_filters = stage_filters;
        self.latent_channels = latent_channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.variant)));
        if self.stage_filters.contains(&0) || self.latent_channels == 0 {
            return bad("stage filters and latent channels must be positive");
        }
        match self.variant {
            Variant::Maa2Conv | Variant::Maa3Pool | Variant::Residual if self.fusion_kernel % 2 == 0 => {
                bad("fusion_kernel must be odd and positive")
            }
            Variant::Matten if self.attention_heads == 0 || self.latent_channels % self.attention_heads != 0 => {
                bad("latent_channels must be divisible by attention_heads")
            }
            Variant::Mbotf
                if self.attention_heads == 0
                    || self.bottleneck_tokens == 0
                    || self.stage_filters.iter().any(|f| f % self.attention_heads != 0) =>
            {
                bad("stage filters must be divisible by attention_heads and bottleneck_tokens positive")
            }
            Variant::Cvae if self.vae_latent == 0 || !(self.kl_weight >= 0.0) => {
                bad("vae_latent must be positive and kl_weight non-negative")
            }
            _ => match self.sparsity_weight {
                Some(w) if !(w >= 0.0) => bad("sparsity weight must be non-negative"),
                _ => Ok(()),
            },
        }
    }
}

/// Positions of the named outputs within the graph's output list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OutputLayout {
    pub accel_recon: Option<usize>,
    pub audio_recon: Option<usize>,
    pub latent: usize,
    /// `(mu, logvar)` for the variational model.
    pub posterior: Option<(usize, usize)>,
}

struct Builder<'a> {
    g: GraphSpec,
    cfg: &'a FusionConfig,
    residual: bool,
}

impl<'a> Builder<'a> {
    fn conv(&mut self, name: &str, input: &str, cin: usize, cout: usize, k: usize, stride: usize) -> String {
        self.g.add(
            name,
            LayerSpec::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride,
                padding: k / 2,
            },
            &[input],
        )
    }

    /// conv -> batchnorm -> relu; 3x3 stages become residual blocks in the
    /// residual variant.
    fn stage(&mut self, name: &str, input: &str, cin: usize, cout: usize, k: usize, stride: usize) -> String {
        if self.residual && k == 3 {
            return self.g.add(
                name,
                LayerSpec::ResidualBlock {
                    in_channels: cin,
                    out_channels: cout,
                    stride,
                },
                &[input],
            );
        }
        let c = self.conv(&format!("{name}.conv"), input, cin, cout, k, stride);
        let b = self.g.add(&format!("{name}.bn"), LayerSpec::BatchNorm { channels: cout }, &[&c]);
        self.g.add(&format!("{name}.relu"), LayerSpec::Relu, &[&b])
    }

    fn encoder(&mut self, m: &str, cin: usize) -> String {
        let [f0, f1] = self.cfg.stage_filters;
        let s1 = self.stage(&format!("{m}.enc1"), m, cin, f0, 3, 2);
        let s2 = self.stage(&format!("{m}.enc2"), &s1, f0, f1, 3, 2);
        self.stage(&format!("{m}.enc3"), &s2, f1, self.cfg.latent_channels, 3, 2)
    }

    fn decoder(&mut self, m: &str, z: &str, cout: usize) -> String {
        let [f0, f1] = self.cfg.stage_filters;
        let l = self.cfg.latent_channels;
        let mut x = z.to_string();
        for (i, (cin, c)) in [(l, f1), (f1, f0)].into_iter().enumerate() {
            let up = self.g.add(&format!("{m}.dec{}.up", i + 1), LayerSpec::Upsample2d { factor: 2 }, &[&x]);
            x = self.stage(&format!("{m}.dec{}", i + 1), &up, cin, c, 3, 1);
        }
        let up = self.g.add(&format!("{m}.dec3.up"), LayerSpec::Upsample2d { factor: 2 }, &[&x]);
        let out = self.conv(&format!("{m}.dec3.conv"), &up, f0, cout, 3, 1);
        self.g.add(&format!("{m}.recon"), LayerSpec::Sigmoid, &[&out])
    }

    /// Joins the two latent maps; returns the node and its channel count.
    fn join(&mut self, za: &str, zb: &str) -> (String, usize) {
        let l = self.cfg.latent_channels;
        match self.cfg.fusion_op {
            FusionOp::Concat => (self.g.add("fusion.joint", LayerSpec::Concat { axis: 1 }, &[za, zb]), 2 * l),
            FusionOp::Sum => (self.g.add("fusion.joint", LayerSpec::Add { average: false }, &[za, zb]), l),
        }
    }
}

/// Graph topology and output positions for `cfg`.
pub fn build_graph(cfg: &FusionConfig) -> Result<(GraphSpec, OutputLayout)> {
    cfg.validate()?;
    let l = cfg.latent_channels;
    let img = |c: usize| vec![c, SPEC_SIZE, SPEC_SIZE];
    let mut b = Builder {
        g: GraphSpec::new(),
        cfg,
        residual: cfg.variant == Variant::Residual,
    };
    let mut layout = OutputLayout::default();
    let mut outputs: Vec<String> = Vec::new();
    let mut posterior: Option<(String, String)> = None;
    let push = |outputs: &mut Vec<String>, name: String| {
        outputs.push(name);
        outputs.len() - 1
    };

    match cfg.variant {
        Variant::MonoAcc | Variant::MonoAud => {
            let (m, c) = if cfg.variant == Variant::MonoAcc {
                ("accel", ACCEL_CHANNELS)
            } else {
                ("audio", AUDIO_CHANNELS)
            };
            b.g.input(m, &img(c));
            let z = b.encoder(m, c);
            let r = b.decoder(m, &z, c);
            let idx = push(&mut outputs, r);
            if cfg.variant == Variant::MonoAcc {
                layout.accel_recon = Some(idx);
            } else {
                layout.audio_recon = Some(idx);
            }
            layout.latent = push(&mut outputs, z);
        }
        variant => {
            b.g.input("accel", &img(ACCEL_CHANNELS));
            b.g.input("audio", &img(AUDIO_CHANNELS));
            let (za, zb) = if variant == Variant::Mbotf {
                bottleneck_encoders(&mut b)
            } else {
                (
                    b.encoder("accel", ACCEL_CHANNELS),
                    b.encoder("audio", AUDIO_CHANNELS),
                )
            };
            let (dec_a, dec_b, latent) = match variant {
                Variant::Maa1Joint | Variant::Mbotf => {
                    let (j, cj) = b.join(&za, &zb);
                    let f = b.stage("fusion.mix", &j, cj, l, 1, 1);
                    (f.clone(), f.clone(), f)
                }
                Variant::Maa2Conv => {
                    let (j, cj) = b.join(&za, &zb);
                    let k = b.stage("fusion.conv", &j, cj, l, cfg.fusion_kernel, 1);
                    let f = b.stage("fusion.mix", &k, l, l, 1, 1);
                    (f.clone(), f.clone(), f)
                }
                Variant::Maa3Pool | Variant::Residual => {
                    let (j, cj) = b.join(&za, &zb);
                    let k = b.stage("fusion.conv", &j, cj, l, cfg.fusion_kernel, 1);
                    let pool = match cfg.pool {
                        PoolKind::Max => LayerSpec::MaxPool2d { size: 2 },
                        PoolKind::Mean => LayerSpec::AvgPool2d { size: 2 },
                    };
                    let p = b.g.add("fusion.pool", pool, &[&k]);
                    let up = b.g.add("fusion.up", LayerSpec::Upsample2d { factor: 2 }, &[&p]);
                    let f = b.stage("fusion.mix", &up, l, l, 1, 1);
                    (f.clone(), f, p)
                }
                Variant::Matten => {
                    let j = b.g.add("fusion.tokens", LayerSpec::Concat { axis: 2 }, &[&za, &zb]);
                    let a = b.g.add(
                        "fusion.attention",
                        LayerSpec::Attention {
                            dim: l,
                            heads: cfg.attention_heads,
                        },
                        &[&j],
                    );
                    let sa = b.g.add(
                        "fusion.accel",
                        LayerSpec::Slice {
                            axis: 2,
                            start: 0,
                            len: LATENT_SIZE,
                        },
                        &[&a],
                    );
                    let sb = b.g.add(
                        "fusion.audio",
                        LayerSpec::Slice {
                            axis: 2,
                            start: LATENT_SIZE,
                            len: LATENT_SIZE,
                        },
                        &[&a],
                    );
                    (sa, sb, a)
                }
                Variant::Cvae => {
                    let (j, cj) = b.join(&za, &zb);
                    let flat_len = cj * LATENT_SIZE * LATENT_SIZE;
                    let flat = b.g.add("vae.flat", LayerSpec::Reshape { shape: vec![flat_len] }, &[&j]);
                    let dense = |out| LayerSpec::Dense {
                        in_features: flat_len,
                        out_features: out,
                    };
                    let mu = b.g.add("vae.mu", dense(cfg.vae_latent), &[&flat]);
                    let lv = b.g.add("vae.logvar", dense(cfg.vae_latent), &[&flat]);
                    let z = b.g.add("vae.z", LayerSpec::Sampling, &[&mu, &lv]);
                    let width = l * LATENT_SIZE * LATENT_SIZE;
                    let h = b.g.add(
                        "vae.expand",
                        LayerSpec::Dense {
                            in_features: cfg.vae_latent,
                            out_features: width,
                        },
                        &[&z],
                    );
                    let h = b.g.add("vae.expand.relu", LayerSpec::Relu, &[&h]);
                    let map = b.g.add(
                        "vae.map",
                        LayerSpec::Reshape {
                            shape: vec![l, LATENT_SIZE, LATENT_SIZE],
                        },
                        &[&h],
                    );
                    posterior = Some((mu, lv));
                    (map.clone(), map, z)
                }
                Variant::MonoAcc | Variant::MonoAud => unreachable!("handled above"),
            };
            let ra = b.decoder("accel", &dec_a, ACCEL_CHANNELS);
            let rb = b.decoder("audio", &dec_b, AUDIO_CHANNELS);
            layout.accel_recon = Some(push(&mut outputs, ra));
            layout.audio_recon = Some(push(&mut outputs, rb));
            layout.latent = push(&mut outputs, latent);
        }
    }
    if let Some((mu, lv)) = posterior {
        layout.posterior = Some((push(&mut outputs, mu), push(&mut outputs, lv)));
    }
    b.g.outputs = outputs;
    Ok((b.g, layout))
}

/// Two encoders joined by attention-bottleneck exchange units after the
/// first and second stages.
fn bottleneck_encoders(b: &mut Builder<'_>) -> (String, String) {
    let [f0, f1] = b.cfg.stage_filters;
    let heads = b.cfg.attention_heads;
    let tokens = b.cfg.bottleneck_tokens;
    let l = b.cfg.latent_channels;

    let a1 = b.stage("accel.enc1", "accel", ACCEL_CHANNELS, f0, 3, 2);
    let v1 = b.stage("audio.enc1", "audio", AUDIO_CHANNELS, f0, 3, 2);
    let (a1, v1) = exchange_unit(b, "xch1", &a1, &v1, f0, heads, tokens);
    let a2 = b.stage("accel.enc2", &a1, f0, f1, 3, 2);
    let v2 = b.stage("audio.enc2", &v1, f0, f1, 3, 2);
    let (a2, v2) = exchange_unit(b, "xch2", &a2, &v2, f1, heads, tokens);
    let za = b.stage("accel.enc3", &a2, f1, l, 3, 2);
    let zv = b.stage("audio.enc3", &v2, f1, l, 3, 2);
    (za, zv)
}

fn exchange_unit(
    b: &mut Builder<'_>,
    name: &str,
    acc: &str,
    aud: &str,
    dim: usize,
    heads: usize,
    tokens: usize,
) -> (String, String) {
    let att = || LayerSpec::Attention { dim, heads };
    let t = b.g.add(&format!("{name}.tokens"), LayerSpec::LearnedTokens { dim, tokens }, &[acc]);
    let ta = b.g.add(&format!("{name}.read_accel"), att(), &[&t, acc]);
    let tv = b.g.add(&format!("{name}.read_audio"), att(), &[&t, aud]);
    let shared = b.g.add(&format!("{name}.merge"), LayerSpec::Add { average: true }, &[&ta, &tv]);
    let acc2 = b.g.add(&format!("{name}.write_accel"), att(), &[acc, &shared]);
    let aud2 = b.g.add(&format!("{name}.write_audio"), att(), &[aud, &shared]);
    (acc2, aud2)
}

/// A built network with its configuration.
#[derive(Debug)]
pub struct Model<T = f32> {
    pub config: FusionConfig,
    pub graph: ModelGraph<T>,
    pub layout: OutputLayout,
}

/// Per-sample reconstructions and their losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionOutput {
    pub accel_recon: Option<Vec<f32>>,
    pub audio_recon: Option<Vec<f32>>,
    pub latent: Vec<f32>,
    pub kl: Option<f64>,
    pub loss_acc: Option<f64>,
    pub loss_aud: Option<f64>,
}

pub fn build_model<T: Scalar>(cfg: &FusionConfig, seed: u64) -> Result<Model<T>> {
    let (spec, layout) = build_graph(cfg)?;
    Ok(Model {
        config: cfg.clone(),
        graph: ModelGraph::new(spec, seed)?,
        layout,
    })
}

/// `-1/2 sum(1 + logvar - mu^2 - exp(logvar))` for one sample.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

fn modality_tensor<T: Scalar>(samples: &[&SampleTensor], m: Modality) -> Result<Tensor<T>> {
    let c = match m {
        Modality::Accel => ACCEL_CHANNELS,
        Modality::Audio => AUDIO_CHANNELS,
    };
    let mut data = Vec::with_capacity(samples.len() * c * SPEC_PIXELS);
    for s in samples {
        let src = match m {
            Modality::Accel => &s.accel,
            Modality::Audio => &s.audio,
        };
        if src.len() != c * SPEC_PIXELS {
            return Err(Error::invalid(format!(
                "sample {} lacks the {m} modality ({} values, expected {})",
                s.source_id,
                src.len(),
                c * SPEC_PIXELS
            )));
        }
        data.extend(src.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(&[samples.len(), c, SPEC_SIZE, SPEC_SIZE], data)
}

impl<T: Scalar> Model<T> {
    pub fn modalities(&self) -> &'static [Modality] {
        self.config.variant.modalities()
    }

    pub fn id(&self) -> &'static str {
        self.config.variant.id()
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    /// Graph inputs (and reconstruction targets) for a batch.
    pub fn batch_inputs(&self, samples: &[&SampleTensor]) -> Result<Vec<Tensor<T>>> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        self.modalities().iter().map(|&m| modality_tensor(samples, m)).collect()
    }

    pub fn objective(&self, loss: LossKind) -> ReconstructionObjective {
        ReconstructionObjective {
            loss,
            layout: self.layout,
            kl_weight: self.config.kl_weight,
            sparsity_weight: self.config.sparsity_weight,
        }
    }

    /// Reconstructs a batch in evaluation mode and computes per-sample,
    /// per-modality losses.
    pub fn reconstruct_batch(&self, samples: &[&SampleTensor], loss: LossKind) -> Result<Vec<ReconstructionOutput>> {
        let inputs = self.batch_inputs(samples)?;
        let outs = self.graph.infer(&inputs, Mode::EVAL)?;
        let mods = self.modalities();
        let target_of = |m: Modality| &inputs[mods.iter().position(|&x| x == m).expect("modality input")];
        let mut result = Vec::with_capacity(samples.len());
        for i in 0..samples.len() {
            let per_modality = |slot: Option<usize>, m: Modality| -> Result<(Option<Vec<f32>>, Option<f64>)> {
                let Some(k) = slot else { return Ok((None, None)) };
                let pred = &outs[k];
                let shape = pred.shape()[1..].to_vec();
                let p = Tensor::from_vec(&shape, pred.sample(i).to_vec())?;
                let t = Tensor::from_vec(&shape, target_of(m).sample(i).to_vec())?;
                let l = loss.compute(&t, &p)?.value;
                Ok((Some(p.data().iter().map(|v| v.f64() as f32).collect()), Some(l)))
            };
            let (accel_recon, loss_acc) = per_modality(self.layout.accel_recon, Modality::Accel)?;
            let (audio_recon, loss_aud) = per_modality(self.layout.audio_recon, Modality::Audio)?;
            let kl = self.layout.posterior.map(|(mu, lv)| {
                let f = |t: &Tensor<T>| t.sample(i).iter().map(|v| v.f64()).collect::<Vec<_>>();
                kl_divergence(&f(&outs[mu]), &f(&outs[lv]))
            });
            result.push(ReconstructionOutput {
                accel_recon,
                audio_recon,
                latent: outs[self.layout.latent].sample(i).iter().map(|v| v.f64() as f32).collect(),
                kl,
                loss_acc,
                loss_aud,
            });
        }
        Ok(result)
    }

    pub fn reconstruct(&self, sample: &SampleTensor, loss: LossKind) -> Result<ReconstructionOutput> {
        Ok(self.reconstruct_batch(&[sample], loss)?.remove(0))
    }
}

/// Summed per-modality reconstruction loss, plus the optional latent
/// sparsity penalty and, for the variational model, `kl_weight` times the
/// batch-mean KL divergence divided by the reconstructed elements per
/// sample.
#[derive(Debug, Clone, Copy)]
pub struct ReconstructionObjective {
    pub loss: LossKind,
    pub layout: OutputLayout,
    pub kl_weight: f64,
    pub sparsity_weight: Option<f64>,
}

impl<T: Scalar> Objective<T> for ReconstructionObjective {
    fn evaluate(&self, outputs: &[Tensor<T>], targets: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut grads: Vec<Tensor<T>> = outputs.iter().map(|o| Tensor::zeros(o.shape())).collect();
        let mut total = 0.0;
        let recon: Vec<usize> = [self.layout.accel_recon, self.layout.audio_recon].into_iter().flatten().collect();
        if recon.len() != targets.len() {
            return Err(Error::invalid(format!("{} targets for {} reconstructions", targets.len(), recon.len())));
        }
        let mut per_sample_elems = 0;
        for (&k, t) in recon.iter().zip(targets) {
            let r = self.loss.compute(t, &outputs[k])?;
            total += r.value;
            grads[k] = r.grad;
            per_sample_elems += t.sample_len();
        }
        if let Some(w) = self.sparsity_weight {
            let r = losses::sparsity_penalty(&outputs[self.layout.latent], w)?;
            total += r.value;
            grads[self.layout.latent].add_assign(&r.grad);
        }
        if let Some((mu_i, lv_i)) = self.layout.posterior {
            let (mu, lv) = (&outputs[mu_i], &outputs[lv_i]);
            let n = mu.batch() as f64;
            let scale = self.kl_weight / (n * per_sample_elems as f64);
            let mut kl = 0.0;
            let mut gmu = Vec::with_capacity(mu.len());
            let mut glv = Vec::with_capacity(lv.len());
            for (&m, &v) in mu.data().iter().zip(lv.data()) {
                let (m, v) = (m.f64(), v.f64());
                kl += -0.5 * (1.0 + v - m * m - v.exp());
                gmu.push(T::of(scale * m));
                glv.push(T::of(scale * 0.5 * (v.exp() - 1.0)));
            }
            total += scale * kl;
            grads[mu_i].add_assign(&Tensor::from_vec(mu.shape(), gmu)?);
            grads[lv_i].add_assign(&Tensor::from_vec(lv.shape(), glv)?);
        }
        Ok((total, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Label;

    fn small(v: Variant) -> FusionConfig {
        let mut c = FusionConfig::new(v).with_widths([8, 8], 8);
        c.attention_heads = 2;
        c
    }

    fn sample(fill: f32) -> SampleTensor {
        SampleTensor {
            accel: vec![fill; 3 * SPEC_PIXELS],
            audio: vec![fill; SPEC_PIXELS],
            label: Label::Damage,
            category: "dent".into(),
            source_id: "s".into(),
        }
    }

    #[test]
    fn every_variant_builds_with_fixed_latent_shape() {
        for v in Variant::ALL {
            let m = build_model::<f32>(&small(v), 0).unwrap();
            for enc in ["accel.enc3.relu", "audio.enc3.relu", "accel.enc3", "audio.enc3"] {
                if let Some(s) = m.graph.node_shape(enc) {
                    assert_eq!(s, &[8, 4, 4], "{v} {enc}");
                }
            }
            assert_eq!(m.layout.accel_recon.is_some(), v != Variant::MonoAud);
            assert_eq!(m.layout.audio_recon.is_some(), v != Variant::MonoAcc);
        }
    }

    #[test]
    fn maa3_pools_to_two_by_two() {
        let m = build_model::<f32>(&small(Variant::Maa3Pool), 0).unwrap();
        assert_eq!(m.graph.node_shape("fusion.pool").unwrap(), &[8, 2, 2]);
        let out = m.reconstruct(&sample(0.0), LossKind::Mse).unwrap();
        assert_eq!(out.accel_recon.as_ref().unwrap().len(), 3 * SPEC_PIXELS);
        assert_eq!(out.audio_recon.as_ref().unwrap().len(), SPEC_PIXELS);
        assert!(out.accel_recon.unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mono_acc_has_no_audio_output() {
        let m = build_model::<f32>(&small(Variant::MonoAcc), 0).unwrap();
        let out = m.reconstruct(&sample(0.3), LossKind::Mse).unwrap();
        assert!(out.audio_recon.is_none() && out.loss_aud.is_none());
        assert!(out.loss_acc.unwrap() > 0.0);
        let mut missing = sample(0.3);
        missing.accel.clear();
        assert!(matches!(m.reconstruct(&missing, LossKind::Mse), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small(Variant::Matten);
        c.attention_heads = 3;
        assert!(matches!(build_model::<f32>(&c, 0), Err(Error::Config(_))));
        let mut c = small(Variant::Maa2Conv);
        c.fusion_kernel = 2;
        assert!(build_model::<f32>(&c, 0).is_err());
        assert!("maa9".parse::<Variant>().is_err());
        assert_eq!("maa3_pool".parse::<Variant>().unwrap(), Variant::Maa3Pool);
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(kl_divergence(&[1.0], &[0.5]) > 0.0);
    }

    #[test]
    fn cvae_eval_is_deterministic() {
        let m = build_model::<f32>(&small(Variant::Cvae), 4).unwrap();
        let a = m.reconstruct(&sample(0.2), LossKind::Mse).unwrap();
        let b = m.reconstruct(&sample(0.2), LossKind::Mse).unwrap();
        assert_eq!(a, b);
        assert!(a.kl.unwrap().is_finite());
    }

    #[test]
    fn mono_is_smaller_than_fusion() {
        let full = |v| build_model::<f32>(&FusionConfig::new(v), 0).unwrap().param_count();
        assert!(full(Variant::MonoAcc) < full(Variant::Maa3Pool));
    }
}
