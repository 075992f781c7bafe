//! Visual, audio and spatial-query encoders, TCN fusion with prediction
//! heads, the composite loss, and training.

mod data;
mod train;

pub use data::{Dataset, MeetingData, ParticipantData};
pub use train::{
    evaluate_dataset, train, training_batch, EpochRecord, Precision, TrainConfig, TrainHistory, TrainOutcome, TrainingBatch,
};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{channel_swap_features, extract_features, AudioFeatures, CrossSpectralParams, MultiChannelAudio, Stft};
use crate::config::FrontendConfig;
use crate::error::{AsdError, Result};
use crate::query::Query;
use crate::scalar::Scalar;
use crate::tensor::{
    count_flops, glorot_uniform, read_checkpoint, write_checkpoint, Activation, Checkpoint, FlopReport, Graph,
    LayerSpec, NetworkDescription, ParamStore, Tensor, Var,
};

/// Which inputs, query parts and losses a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub visual: bool,
    pub audio: bool,
    pub single_channel_audio: bool,
    pub query: bool,
    pub background: bool,
    pub aux_losses: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { visual: true, audio: true, single_channel_audio: false, query: true, background: true, aux_losses: true }
    }
}

impl Toggles {
    /// Ablation rows `C1` to `C9`.
    pub fn preset(name: &str) -> Result<Self> {
        let t = |visual, audio, single, query, background, aux| Self {
            visual,
            audio,
            single_channel_audio: single,
            query,
            background,
            aux_losses: aux,
        };
        Ok(match name.to_ascii_uppercase().as_str() {
            "C1" => t(true, false, false, false, false, false),
            "C2" => t(true, true, false, false, false, true),
            "C3" => t(true, true, true, false, false, false),
            "C4" => t(false, true, false, false, false, false),
            "C5" => t(false, true, false, true, false, false),
            "C6" => t(false, true, false, true, true, false),
            "C7" => t(true, true, false, true, false, true),
            "C8" => t(true, true, false, true, true, true),
            "C9" => t(true, true, false, true, true, false),
            other => return Err(AsdError::input(format!("unknown ablation preset {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.visual && !self.audio {
            return Err(AsdError::input("at least one modality must be enabled"));
        }
        if self.single_channel_audio && !self.audio {
            return Err(AsdError::input("single-channel audio requires audio"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStackConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for ConvStackConfig {
    fn default() -> Self {
        Self { channels: vec![8, 16, 32, 64], kernel: 3, stride: 2 }
    }
}

/// Audio encoder family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AudioBackbone {
    /// Strided CNN over the `[2M, T_B, F]` feature tensor.
    Cnn { channels: Vec<usize>, kernel: usize, stride: usize },
    /// Fixed band-wise cross-spectral summary followed by a 2-layer FC net.
    CrossSpectral { bands: usize, bins_per_band: usize, hidden: usize },
}

impl Default for AudioBackbone {
    fn default() -> Self {
        let c = ConvStackConfig::default();
        Self::Cnn { channels: c.channels, kernel: c.kernel, stride: c.stride }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub visual: ConvStackConfig,
    pub audio: AudioBackbone,
    pub audio_dim: usize,
    pub query_hidden: usize,
    pub query_dim: usize,
    pub max_background: usize,
    pub tcn_channels: usize,
    pub tcn_kernel: usize,
    pub tcn_dilations: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub lambda_v: f64,
    pub lambda_as: f64,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual: ConvStackConfig::default(),
            audio: AudioBackbone::default(),
            audio_dim: 64,
            query_hidden: 16,
            query_dim: 16,
            max_background: 3,
            tcn_channels: 64,
            tcn_kernel: 3,
            tcn_dilations: vec![1, 2, 4],
            head_hidden: vec![32, 16],
            lambda_v: 0.3,
            lambda_as: 0.3,
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, frontend: &FrontendConfig) -> Result<()> {
        self.toggles.validate()?;
        let bad = |m: &str| Err(AsdError::input(m.to_string()));
        if self.visual.channels.is_empty() || self.visual.channels.contains(&0) || self.visual.kernel == 0 || self.visual.stride == 0 {
            return bad("invalid visual backbone");
        }
        match &self.audio {
            AudioBackbone::Cnn { channels, kernel, stride } => {
                if channels.last() != Some(&self.audio_dim) || channels.contains(&0) || *kernel == 0 || *stride == 0 {
                    return bad("audio CNN must end in audio_dim channels");
                }
            }
            AudioBackbone::CrossSpectral { bands, bins_per_band, hidden } => {
                if *bands == 0 || *bins_per_band == 0 || *hidden == 0 || 1 + bands * bins_per_band > frontend.stft.bins() {
                    return bad("cross-spectral bands exceed the spectrum");
                }
            }
        }
        if self.tcn_kernel == 0 || self.tcn_dilations.is_empty() || self.tcn_dilations.contains(&0) || self.tcn_channels == 0 {
            return bad("invalid TCN");
        }
        if self.max_background > 8 || self.query_dim == 0 || self.query_hidden == 0 || self.audio_dim == 0 {
            return bad("invalid query/audio widths");
        }
        if !(self.lambda_v >= 0.0 && self.lambda_as >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    /// TCN receptive field `R = 1 + sum((k - 1) * d)`.
    pub fn receptive_field(&self) -> usize {
        1 + self.tcn_dilations.iter().map(|d| (self.tcn_kernel - 1) * d).sum::<usize>()
    }

    pub fn visual_dim(&self) -> usize {
        *self.visual.channels.last().expect("validated")
    }

    pub fn embedding_dim(&self) -> usize {
        let t = &self.toggles;
        let mut d = 0;
        if t.visual {
            d += self.visual_dim();
        }
        if t.audio {
            d += self.audio_dim;
        }
        if t.query {
            d += self.query_dim;
        }
        d
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    step: usize,
}

#[derive(Clone, Debug)]
enum AudioNet {
    Cnn(Vec<Conv>),
    Fc(Vec<Lin>),
}

#[derive(Clone, Debug)]
struct QueryNet {
    f_ref: [Lin; 2],
    f_bg: [Lin; 2],
    comb: Lin,
}

#[derive(Clone, Debug)]
struct Head {
    tcn: Vec<Conv>,
    fc: Vec<Lin>,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Lin> {
        let w = self.params.insert(format!("{name}.weight"), glorot_uniform(&[d_out, d_in], d_in, d_out, &mut self.rng))?;
        let b = self.params.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Lin { w, b })
    }

    fn conv(&mut self, name: &str, shape: &[usize], step: usize) -> Result<Conv> {
        let field: usize = shape[2..].iter().product();
        let (fan_in, fan_out) = (shape[1] * field, shape[0] * field);
        let w = self.params.insert(format!("{name}.weight"), glorot_uniform(shape, fan_in, fan_out, &mut self.rng))?;
        let b = self.params.insert(format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?;
        Ok(Conv { w, b, step })
    }

    fn head(&mut self, name: &str, d_in: usize, cfg: &ModelConfig) -> Result<Head> {
        let mut tcn = Vec::new();
        let mut c = d_in;
        for (i, &d) in cfg.tcn_dilations.iter().enumerate() {
            tcn.push(self.conv(&format!("{name}.tcn{i}"), &[cfg.tcn_channels, c, cfg.tcn_kernel], d)?);
            c = cfg.tcn_channels;
        }
        let mut fc = Vec::new();
        for (i, &h) in cfg.head_hidden.iter().chain(std::iter::once(&2)).enumerate() {
            fc.push(self.linear(&format!("{name}.fc{i}"), c, h)?);
            c = h;
        }
        Ok(Head { tcn, fc })
    }
}

/// Encoder outputs for one batch: `a` has one row per audio input, `v` and
/// `s` one row per participant row.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub v: Option<Var>,
    pub a: Option<Var>,
    pub s: Option<Var>,
}

/// One training or evaluation batch of windows.
///
/// `steps[b * window + t]` names the participant row and audio input of
/// window `b` at step `t`; `None` marks steps before the start of a meeting,
/// which enter the network as zero embeddings. Labels cover the last
/// `labels.len() / batch` steps of each window.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub audio: Vec<&'a [f64]>,
    pub stacks: Vec<&'a [f64]>,
    pub queries: Vec<&'a Query>,
    pub steps: Vec<Option<(usize, usize)>>,
    pub batch: usize,
    pub window: usize,
    pub labels: Vec<Option<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub main: f64,
    pub visual: f64,
    pub audio_spatial: f64,
}

/// The complete network with its parameters.
pub struct AsdModel<T> {
    pub frontend: FrontendConfig,
    pub config: ModelConfig,
    params: ParamStore<T>,
    visual: Option<Vec<Conv>>,
    audio: Option<AudioNet>,
    query: Option<QueryNet>,
    main: Head,
    aux_v: Option<Head>,
    aux_as: Option<Head>,
    audio_runs: AtomicU64,
}

impl<T: Scalar> Clone for AsdModel<T> {
    fn clone(&self) -> Self {
        Self {
            frontend: self.frontend.clone(),
            config: self.config.clone(),
            params: self.params.clone(),
            visual: self.visual.clone(),
            audio: self.audio.clone(),
            query: self.query.clone(),
            main: self.main.clone(),
            aux_v: self.aux_v.clone(),
            aux_as: self.aux_as.clone(),
            audio_runs: AtomicU64::new(self.audio_runs.load(Ordering::Relaxed)),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    frontend: FrontendConfig,
    model: ModelConfig,
}

impl<T: Scalar> AsdModel<T> {
    pub fn new(frontend: &FrontendConfig, config: &ModelConfig, seed: u64) -> Result<Self> {
        frontend.validate()?;
        config.validate(frontend)?;
        let t = config.toggles;
        let mut params = ParamStore::new();
        let mut b = Builder { params: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };

        let visual = if t.visual {
            let mut layers = Vec::new();
            let mut c = frontend.stack_depth;
            for (i, &co) in config.visual.channels.iter().enumerate() {
                let k = config.visual.kernel;
                layers.push(b.conv(&format!("visual.conv{i}"), &[co, c, k, k], config.visual.stride)?);
                c = co;
            }
            Some(layers)
        } else {
            None
        };

        let audio = if t.audio {
            Some(match &config.audio {
                AudioBackbone::Cnn { channels, kernel, stride } => {
                    let mut c = if t.single_channel_audio { 2 } else { 2 * frontend.geometry.num_mics() };
                    let mut layers = Vec::new();
                    for (i, &co) in channels.iter().enumerate() {
                        layers.push(b.conv(&format!("audio.conv{i}"), &[co, c, *kernel, *kernel], *stride)?);
                        c = co;
                    }
                    AudioNet::Cnn(layers)
                }
                AudioBackbone::CrossSpectral { bands, bins_per_band, hidden } => {
                    let cs = CrossSpectralParams { bands: *bands, bins_per_band: *bins_per_band, single_channel: t.single_channel_audio };
                    let d_in = cs.dim(&frontend.geometry);
                    AudioNet::Fc(vec![
                        b.linear("audio.fc0", d_in, *hidden)?,
                        b.linear("audio.fc1", *hidden, config.audio_dim)?,
                    ])
                }
            })
        } else {
            None
        };

        let query = if t.query {
            let (h, d) = (config.query_hidden, config.query_dim);
            Some(QueryNet {
                f_ref: [b.linear("query.ref0", 6, h)?, b.linear("query.ref1", h, h)?],
                f_bg: [b.linear("query.bg0", 6, h)?, b.linear("query.bg1", h, h)?],
                comb: b.linear("query.comb", 2 * h, d)?,
            })
        } else {
            None
        };

        let main = b.head("head", config.embedding_dim(), config)?;
        let aux_v = if t.aux_losses && t.visual { Some(b.head("aux_v", config.visual_dim(), config)?) } else { None };
        let as_dim = if t.audio { config.audio_dim } else { 0 } + if t.query { config.query_dim } else { 0 };
        let aux_as = if t.aux_losses && as_dim > 0 { Some(b.head("aux_as", as_dim, config)?) } else { None };

        Ok(Self {
            frontend: frontend.clone(),
            config: config.clone(),
            params,
            visual,
            audio,
            query,
            main,
            aux_v,
            aux_as,
            audio_runs: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn receptive_field(&self) -> usize {
        self.config.receptive_field()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// Number of audio inputs the audio backbone has processed.
    pub fn audio_backbone_runs(&self) -> u64 {
        self.audio_runs.load(Ordering::Relaxed)
    }

    pub fn has_aux_heads(&self) -> bool {
        self.aux_v.is_some() || self.aux_as.is_some()
    }

    /// Zero the last layer of every head so all heads output probability 1/2.
    pub fn zero_output_layers(&mut self) {
        for head in [Some(&self.main), self.aux_v.as_ref(), self.aux_as.as_ref()].into_iter().flatten() {
            let last = *head.fc.last().expect("head has layers");
            for id in [last.w, last.b] {
                self.params.by_id_mut(id).data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    // ---- audio inputs -------------------------------------------------

    fn cross_spectral(&self) -> Option<CrossSpectralParams> {
        match self.config.audio {
            AudioBackbone::CrossSpectral { bands, bins_per_band, .. } => {
                Some(CrossSpectralParams { bands, bins_per_band, single_channel: false })
            }
            AudioBackbone::Cnn { .. } => None,
        }
    }

    /// Backbone input for one audio window, covering all channels; the
    /// single-channel variant reads a slice of it (see [`Self::audio_slice`]).
    pub fn audio_input(&self, audio: &MultiChannelAudio, stft: &Stft) -> Result<Vec<f64>> {
        let f = extract_features(audio, stft, self.frontend.eps)?;
        self.audio_input_from_features(&f)
    }

    pub fn audio_input_from_features(&self, f: &AudioFeatures) -> Result<Vec<f64>> {
        match self.cross_spectral() {
            Some(cs) => cs.summarize(f, &self.frontend.geometry, self.frontend.eps),
            None => Ok(f.data.clone()),
        }
    }

    /// Apply a ring rotation by `k` positions to a full audio input.
    pub fn swap_audio_input(&self, input: &[f64], k: usize) -> Result<Vec<f64>> {
        let g = &self.frontend.geometry;
        match self.cross_spectral() {
            Some(cs) => cs.swap(input, k, g),
            None => {
                let f = AudioFeatures {
                    mics: g.num_mics(),
                    frames: self.frontend.stft.frames(self.frontend.audio_samples())?,
                    bins: self.frontend.stft.bins(),
                    data: input.to_vec(),
                };
                Ok(channel_swap_features(&f, k, g)?.0.data)
            }
        }
    }

    fn audio_slice<'b>(&self, full: &'b [f64]) -> &'b [f64] {
        if !self.config.toggles.single_channel_audio {
            return full;
        }
        match &self.config.audio {
            AudioBackbone::CrossSpectral { bands, .. } => &full[full.len() - bands..],
            AudioBackbone::Cnn { .. } => {
                let plane = full.len() / (2 * self.frontend.geometry.num_mics());
                let r = self.frontend.geometry.reference_mic();
                &full[2 * r * plane..(2 * r + 2) * plane]
            }
        }
    }

    fn audio_shape(&self, len: usize) -> Vec<usize> {
        match self.audio.as_ref().expect("audio enabled") {
            AudioNet::Fc(_) => vec![len],
            AudioNet::Cnn(_) => {
                let c = if self.config.toggles.single_channel_audio { 2 } else { 2 * self.frontend.geometry.num_mics() };
                let f = self.frontend.stft.bins();
                vec![c, len / c / f, f]
            }
        }
    }

    // ---- graph construction -------------------------------------------

    /// Register every parameter in `g`; trainable parameters receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    fn lin(&self, g: &mut Graph<T>, p: &[Var], x: Var, l: Lin, relu: bool) -> Result<Var> {
        let y = g.linear(x, p[l.w], p[l.b])?;
        Ok(if relu { g.relu(y) } else { y })
    }

    fn conv_stack(&self, g: &mut Graph<T>, p: &[Var], mut x: Var, layers: &[Conv], kernel: usize) -> Result<Var> {
        for l in layers {
            x = g.conv2d(x, p[l.w], p[l.b], l.step, kernel / 2)?;
            x = g.relu(x);
        }
        g.global_avg_pool(x)
    }

    fn stack_input(rows: &[&[f64]], shape: &[usize]) -> Result<Tensor<T>> {
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(rows.len() * per);
        for r in rows {
            if r.len() != per {
                return Err(AsdError::shape("model_input", per, r.len()));
            }
            data.extend(r.iter().map(|&x| T::of(x)));
        }
        let mut full = vec![rows.len()];
        full.extend_from_slice(shape);
        Tensor::from_vec(&full, data)
    }

    /// Run the enabled encoders. `audio` holds full audio inputs (one per
    /// distinct tick), `stacks` and `queries` one entry per participant row.
    pub fn encode(&self, g: &mut Graph<T>, p: &[Var], audio: &[&[f64]], stacks: &[&[f64]], queries: &[&Query]) -> Result<Encoded> {
        if self.audio.is_some() && audio.is_empty() && !stacks.is_empty() {
            return Err(AsdError::input("audio pathway needs audio inputs"));
        }
        let a = match &self.audio {
            Some(net) if !audio.is_empty() => {
                let rows: Vec<&[f64]> = audio.iter().map(|x| self.audio_slice(x)).collect();
                let x = g.input(Self::stack_input(&rows, &self.audio_shape(rows[0].len()))?);
                self.audio_runs.fetch_add(audio.len() as u64, Ordering::Relaxed);
                Some(match net {
                    AudioNet::Cnn(layers) => {
                        let k = match &self.config.audio {
                            AudioBackbone::Cnn { kernel, .. } => *kernel,
                            AudioBackbone::CrossSpectral { .. } => unreachable!(),
                        };
                        self.conv_stack(g, p, x, layers, k)?
                    }
                    AudioNet::Fc(layers) => {
                        let h = self.lin(g, p, x, layers[0], true)?;
                        self.lin(g, p, h, layers[1], true)?
                    }
                })
            }
            _ => None,
        };
        let v = match &self.visual {
            Some(layers) => {
                let fe = &self.frontend;
                let x = g.input(Self::stack_input(stacks, &[fe.stack_depth, fe.patch_height, fe.patch_width])?);
                Some(self.conv_stack(g, p, x, layers, self.config.visual.kernel)?)
            }
            None => None,
        };
        let s = match &self.query {
            Some(net) => {
                let mut refs = Vec::with_capacity(queries.len() * 6);
                let mut bgs = Vec::new();
                let mut segments = Vec::with_capacity(queries.len());
                for q in queries {
                    refs.extend(q.reference.0.iter().map(|&x| T::of(x)));
                    let start = bgs.len() / 6;
                    if self.config.toggles.background {
                        for b in q.canonical_background().iter().take(self.config.max_background) {
                            bgs.extend(b.0.iter().map(|&x| T::of(x)));
                        }
                    }
                    segments.push(start..bgs.len() / 6);
                }
                let n_bg = bgs.len() / 6;
                let r = g.input(Tensor::from_vec(&[queries.len(), 6], refs)?);
                let r = self.lin(g, p, r, net.f_ref[0], true)?;
                let r = self.lin(g, p, r, net.f_ref[1], true)?;
                let bg = g.input(Tensor::from_vec(&[n_bg, 6], bgs)?);
                let bg = self.lin(g, p, bg, net.f_bg[0], true)?;
                let bg = self.lin(g, p, bg, net.f_bg[1], true)?;
                let mean = g.segment_mean(bg, segments)?;
                let both = g.concat(&[r, mean])?;
                Some(self.lin(g, p, both, net.comb, false)?)
            }
            None => None,
        };
        Ok(Encoded { v, a, s })
    }

    /// Lay encoder rows out per step. Returns `(e, v, a ⊕ s)`; the last two
    /// feed the auxiliary heads and are `None` when their inputs are absent.
    pub fn compose(&self, g: &mut Graph<T>, enc: &Encoded, steps: &[Option<(usize, usize)>]) -> Result<(Var, Option<Var>, Option<Var>)> {
        let rows: Vec<Option<usize>> = steps.iter().map(|s| s.map(|(r, _)| r)).collect();
        let auds: Vec<Option<usize>> = steps.iter().map(|s| s.map(|(_, a)| a)).collect();
        let v = enc.v.map(|v| g.gather_rows(v, rows.clone())).transpose()?;
        let a = enc.a.map(|a| g.gather_rows(a, auds)).transpose()?;
        let s = enc.s.map(|s| g.gather_rows(s, rows)).transpose()?;
        let parts: Vec<Var> = [v, a, s].into_iter().flatten().collect();
        let e = g.concat(&parts)?;
        let as_parts: Vec<Var> = [a, s].into_iter().flatten().collect();
        let as_ = if as_parts.is_empty() { None } else { Some(g.concat(&as_parts)?) };
        Ok((e, v, as_))
    }

    /// Logits for the last `window - start` steps of every window.
    fn head_logits(&self, g: &mut Graph<T>, p: &[Var], head: &Head, rows: Var, batch: usize, window: usize, start: usize) -> Result<Var> {
        let mut x = g.rows_to_seq(rows, batch, window)?;
        for l in &head.tcn {
            x = g.causal_conv1d(x, p[l.w], p[l.b], l.step)?;
            x = g.relu(x);
        }
        let mut h = g.seq_to_rows(x, start)?;
        let n = head.fc.len();
        for (i, l) in head.fc.iter().enumerate() {
            h = self.lin(g, p, h, *l, i + 1 < n)?;
        }
        Ok(h)
    }

    /// Composite loss `L = L_vas + λ_v L_v + λ_as L_as` as a graph node.
    pub fn loss_graph(&self, g: &mut Graph<T>, p: &[Var], batch: &Batch) -> Result<(Var, LossValues)> {
        if batch.steps.len() != batch.batch * batch.window || batch.batch == 0 || !batch.labels.len().is_multiple_of(batch.batch) {
            return Err(AsdError::shape("loss", batch.batch * batch.window, batch.steps.len()));
        }
        let labelled = batch.labels.len() / batch.batch;
        if labelled == 0 || labelled > batch.window {
            return Err(AsdError::input("labelled steps must be within the window"));
        }
        let start = batch.window - labelled;
        let enc = self.encode(g, p, &batch.audio, &batch.stacks, &batch.queries)?;
        let (e, v, as_) = self.compose(g, &enc, &batch.steps)?;
        let logits = self.head_logits(g, p, &self.main, e, batch.batch, batch.window, start)?;
        let main = g.softmax_ce(logits, batch.labels.clone())?;
        let mut terms = vec![(main, T::one())];
        let mut values = LossValues { main: g.value(main).item().as_f64(), ..Default::default() };
        if let (Some(head), Some(v)) = (&self.aux_v, v) {
            let l = self.head_logits(g, p, head, v, batch.batch, batch.window, start)?;
            let loss = g.softmax_ce(l, batch.labels.clone())?;
            values.visual = g.value(loss).item().as_f64();
            terms.push((loss, T::of(self.config.lambda_v)));
        }
        if let (Some(head), Some(x)) = (&self.aux_as, as_) {
            let l = self.head_logits(g, p, head, x, batch.batch, batch.window, start)?;
            let loss = g.softmax_ce(l, batch.labels.clone())?;
            values.audio_spatial = g.value(loss).item().as_f64();
            terms.push((loss, T::of(self.config.lambda_as)));
        }
        let total = g.weighted_sum(&terms)?;
        values.total = g.value(total).item().as_f64();
        if !values.total.is_finite() {
            return Err(AsdError::NonFinite("training loss".into()));
        }
        Ok((total, values))
    }

    /// Loss values and per-parameter gradients.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(LossValues, Vec<Option<Vec<T>>>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, true);
        let (loss, values) = self.loss_graph(&mut g, &p, batch)?;
        let mut grads = g.backward(loss)?;
        Ok((values, p.iter().map(|&v| grads.take(v)).collect()))
    }

    // ---- inference ----------------------------------------------------

    /// Embeddings `e` for participant rows, each row naming its audio input.
    pub fn embed_batch(&self, audio: &[&[f64]], rows: &[(usize, &[f64], &Query)]) -> Result<Vec<Vec<T>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let stacks: Vec<&[f64]> = rows.iter().map(|r| r.1).collect();
        let queries: Vec<&Query> = rows.iter().map(|r| r.2).collect();
        let enc = self.encode(&mut g, &p, audio, &stacks, &queries)?;
        let steps: Vec<Option<(usize, usize)>> = rows.iter().enumerate().map(|(i, r)| Some((i, r.0))).collect();
        let (e, _, _) = self.compose(&mut g, &enc, &steps)?;
        let d = self.embedding_dim();
        let out: Vec<Vec<T>> = g.value(e).data().chunks(d).map(<[T]>::to_vec).collect();
        if out.iter().flatten().any(|x| !x.is_finite()) {
            return Err(AsdError::NonFinite("embedding".into()));
        }
        Ok(out)
    }

    /// Embeddings for several participants at one tick; the audio backbone
    /// runs once.
    pub fn embed(&self, audio: Option<&[f64]>, rows: &[(&[f64], &Query)]) -> Result<Vec<Vec<T>>> {
        let audio: Vec<&[f64]> = audio.into_iter().collect();
        let rows: Vec<(usize, &[f64], &Query)> = rows.iter().map(|&(s, q)| (0, s, q)).collect();
        self.embed_batch(&audio, &rows)
    }

    fn speech_probabilities(logits: &Tensor<T>) -> Vec<f64> {
        logits
            .data()
            .chunks(2)
            .map(|l| {
                let m = l[0].max(l[1]);
                let (e0, e1) = ((l[0] - m).exp(), (l[1] - m).exp());
                (e1 / (e0 + e1)).as_f64()
            })
            .collect()
    }

    /// Speech probability at the last step of each window. Windows longer
    /// than the receptive field are cut to their last `R` steps; shorter ones
    /// are left-padded with zero embeddings.
    pub fn predict_windows(&self, windows: &[Vec<&[T]>]) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let r = self.receptive_field();
        let d = self.embedding_dim();
        let mut data = vec![T::zero(); windows.len() * r * d];
        for (b, w) in windows.iter().enumerate() {
            let kept = &w[w.len().saturating_sub(r)..];
            let offset = r - kept.len();
            for (t, e) in kept.iter().enumerate() {
                if e.len() != d {
                    return Err(AsdError::shape("predict", d, e.len()));
                }
                data[(b * r + offset + t) * d..(b * r + offset + t + 1) * d].copy_from_slice(e);
            }
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.input(Tensor::from_vec(&[windows.len() * r, d], data)?);
        let logits = self.head_logits(&mut g, &p, &self.main, x, windows.len(), r, r - 1)?;
        Ok(Self::speech_probabilities(g.value(logits)))
    }

    /// Speech probability at every step of a full embedding history, running
    /// the TCN over the whole sequence at once.
    pub fn predict_sequence(&self, seq: &[Vec<T>]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.embedding_dim();
        let mut data = Vec::with_capacity(seq.len() * d);
        for e in seq {
            if e.len() != d {
                return Err(AsdError::shape("predict", d, e.len()));
            }
            data.extend_from_slice(e);
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.input(Tensor::from_vec(&[seq.len(), d], data)?);
        let logits = self.head_logits(&mut g, &p, &self.main, x, 1, seq.len(), 0)?;
        Ok(Self::speech_probabilities(g.value(logits)))
    }

    // ---- cost accounting ----------------------------------------------

    fn conv_stack_desc(net: &mut NetworkDescription, prefix: &str, mut c: usize, mut hw: [usize; 2], cfg: (&[usize], usize, usize)) -> usize {
        let (channels, k, stride) = cfg;
        for (i, &co) in channels.iter().enumerate() {
            let pad = k / 2;
            hw = hw.map(|x| (x + 2 * pad - k) / stride + 1);
            net.push(format!("{prefix}.conv{i}"), LayerSpec::conv2d(c, co, [k, k], stride, Activation::Relu).with_extent(&hw));
            c = co;
        }
        net.push(format!("{prefix}.pool"), LayerSpec::global_avg_pool(c, hw));
        c
    }

    /// Layers executed once per tick (the audio encoder).
    pub fn describe_shared(&self) -> Result<NetworkDescription> {
        let mut net = NetworkDescription::default();
        let t = self.config.toggles;
        if !t.audio {
            return Ok(net);
        }
        match &self.config.audio {
            AudioBackbone::Cnn { channels, kernel, stride } => {
                let c = if t.single_channel_audio { 2 } else { 2 * self.frontend.geometry.num_mics() };
                let frames = self.frontend.stft.frames(self.frontend.audio_samples())?;
                Self::conv_stack_desc(&mut net, "audio", c, [frames, self.frontend.stft.bins()], (channels, *kernel, *stride));
            }
            AudioBackbone::CrossSpectral { bands, bins_per_band, hidden } => {
                let cs = CrossSpectralParams { bands: *bands, bins_per_band: *bins_per_band, single_channel: t.single_channel_audio };
                net.push("audio.fc0", LayerSpec::fully_connected(cs.dim(&self.frontend.geometry), *hidden, Activation::Relu));
                net.push("audio.fc1", LayerSpec::fully_connected(*hidden, self.config.audio_dim, Activation::Relu));
            }
        }
        Ok(net)
    }

    /// Layers executed for every predicted participant: visual encoder,
    /// query encoder and the main head over one receptive field.
    pub fn describe_per_participant(&self) -> Result<NetworkDescription> {
        let mut net = NetworkDescription::default();
        let cfg = &self.config;
        let fe = &self.frontend;
        if cfg.toggles.visual {
            let v = &cfg.visual;
            Self::conv_stack_desc(&mut net, "visual", fe.stack_depth, [fe.patch_height, fe.patch_width], (&v.channels, v.kernel, v.stride));
        }
        if cfg.toggles.query {
            let h = cfg.query_hidden;
            net.push("query.ref0", LayerSpec::fully_connected(6, h, Activation::Relu));
            net.push("query.ref1", LayerSpec::fully_connected(h, h, Activation::Relu));
            let n = if cfg.toggles.background { cfg.max_background } else { 0 };
            for i in 0..n {
                net.push(format!("query.bg{i}.0"), LayerSpec::fully_connected(6, h, Activation::Relu));
                net.push(format!("query.bg{i}.1"), LayerSpec::fully_connected(h, h, Activation::Relu));
            }
            net.push("query.comb", LayerSpec::fully_connected(2 * h, cfg.query_dim, Activation::None));
        }
        let r = cfg.receptive_field();
        let mut c = cfg.embedding_dim();
        for (i, &d) in cfg.tcn_dilations.iter().enumerate() {
            net.push(format!("head.tcn{i}"), LayerSpec::causal_conv1d(c, cfg.tcn_channels, cfg.tcn_kernel, d, Activation::Relu).with_extent(&[r]));
            c = cfg.tcn_channels;
        }
        let n = cfg.head_hidden.len();
        for (i, &h) in cfg.head_hidden.iter().chain(std::iter::once(&2)).enumerate() {
            let act = if i < n { Activation::Relu } else { Activation::None };
            net.push(format!("head.fc{i}"), LayerSpec::fully_connected(c, h, act));
            c = h;
        }
        net.push("head.softmax", LayerSpec::softmax(2));
        Ok(net)
    }

    /// `(shared, per participant)` FLOP reports.
    pub fn flops(&self) -> Result<(FlopReport, FlopReport)> {
        Ok((count_flops(&self.describe_shared()?)?, count_flops(&self.describe_per_participant()?)?))
    }

    // ---- persistence --------------------------------------------------

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta { frontend: self.frontend.clone(), model: self.config.clone() })?;
        let params: ParamStore<f64> = {
            let mut out = ParamStore::new();
            for (name, t) in self.params.iter() {
                out.insert(name, t.convert())?;
            }
            out
        };
        write_checkpoint(w, &Checkpoint { metadata: meta, params })
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<Self> {
        let ckpt: Checkpoint<T> = read_checkpoint(r)?;
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)?;
        let mut model = Self::new(&meta.frontend, &meta.model, 0)?;
        model.params.load_from(&ckpt.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
