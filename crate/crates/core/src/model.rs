//! Tubelet embedding, pre-norm attention encoder and linear patch decoder.
//!
//! The four variants differ only in temporal span (`t = 2` tubelets vs the
//! full-sequence `t = T` baseline) and in whether SAR channels are fused in.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::TubeletGeometry;
use crate::tensor::{Float, Tape, Tensor, Var};

pub const MSI_BANDS: usize = 11;
pub const SAR_BANDS: usize = 2;
pub const POS_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    MtsVit,
    MtsVivit,
    SmtsVit,
    SmtsVivit,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::MtsVit, Variant::MtsVivit, Variant::SmtsVit, Variant::SmtsVivit];

    pub fn uses_sar(self) -> bool {
        matches!(self, Variant::SmtsVit | Variant::SmtsVivit)
    }

    /// Temporal span of one tubelet for a sequence of `frames` dates.
    pub fn temporal_span(self, frames: usize) -> usize {
        match self {
            Variant::MtsVit | Variant::SmtsVit => frames,
            Variant::MtsVivit | Variant::SmtsVivit => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::MtsVit => "mts-vit",
            Variant::MtsVivit => "mts-vivit",
            Variant::SmtsVit => "smts-vit",
            Variant::SmtsVivit => "smts-vivit",
        }
    }

    /// Display label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::MtsVit => "MTS-ViT",
            Variant::MtsVivit => "MTS-ViViT",
            Variant::SmtsVit => "SMTS-ViT",
            Variant::SmtsVivit => "SMTS-ViViT",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}; expected mts-vit, mts-vivit, smts-vit or smts-vivit")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub msi_channels: usize,
    pub sar_channels: usize,
    pub use_mask_channel: bool,
    pub temporal_span: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelConfig {
    /// Reference hyperparameters for a variant: 6 dates, 5×5 patches, width 64,
    /// depth 6, 8 heads, feed-forward 256, 60×60 tiles, mask as an input channel.
    pub fn reference(variant: Variant) -> Self {
        let frames = 6;
        ModelConfig {
            frames,
            msi_channels: MSI_BANDS,
            sar_channels: if variant.uses_sar() { SAR_BANDS } else { 0 },
            use_mask_channel: true,
            temporal_span: variant.temporal_span(frames),
            patch: 5,
            embed_dim: 64,
            depth: 6,
            heads: 8,
            ff_dim: 256,
            height: 60,
            width: 60,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("msi_channels", self.msi_channels),
            ("temporal_span", self.temporal_span),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("height", self.height),
            ("width", self.width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if self.frames % self.temporal_span != 0 {
            return Err(Error::config(format!(
                "temporal span {} does not divide sequence length {}",
                self.temporal_span, self.frames
            )));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "patch {} does not tile {}×{}",
                self.patch, self.height, self.width
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!("{} heads do not divide embedding width {}", self.heads, self.embed_dim)));
        }
        Ok(())
    }

    pub fn uses_sar(&self) -> bool {
        self.sar_channels > 0
    }

    pub fn input_channels(&self) -> usize {
        self.msi_channels + self.sar_channels + usize::from(self.use_mask_channel)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    fn input_geometry(&self) -> TubeletGeometry {
        TubeletGeometry {
            channels: self.input_channels(),
            frames: self.frames,
            height: self.height,
            width: self.width,
            span: self.temporal_span,
            patch: self.patch,
        }
    }

    fn output_geometry(&self) -> TubeletGeometry {
        TubeletGeometry { channels: self.msi_channels, ..self.input_geometry() }
    }

    /// `(T/t)·(H/k)·(W/k)`.
    pub fn tokens(&self) -> usize {
        (self.frames / self.temporal_span) * (self.height / self.patch) * (self.width / self.patch)
    }

    /// Values each token decodes to: `t·k·k·C_msi`.
    pub fn decoder_width(&self) -> usize {
        self.temporal_span * self.patch * self.patch * self.msi_channels
    }

    /// Names and shapes of every learnable tensor, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.embed_dim, self.ff_dim);
        let k = self.patch;
        let mut shapes = vec![
            ("embed.tubelet.weight".to_string(), vec![d, self.input_channels(), self.temporal_span, k, k]),
            ("embed.tubelet.bias".to_string(), vec![d]),
            ("embed.linear.weight".to_string(), vec![d, d]),
            ("embed.linear.bias".to_string(), vec![d]),
            ("embed.pos".to_string(), vec![self.tokens(), d]),
        ];
        for layer in 0..self.depth {
            let p = |s: &str| format!("enc.{layer}.{s}");
            shapes.push((p("norm1.weight"), vec![d]));
            shapes.push((p("norm1.bias"), vec![d]));
            for proj in ["q", "k", "v", "out"] {
                shapes.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                shapes.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            shapes.push((p("norm2.weight"), vec![d]));
            shapes.push((p("norm2.bias"), vec![d]));
            shapes.push((p("ffn.fc1.weight"), vec![ff, d]));
            shapes.push((p("ffn.fc1.bias"), vec![ff]));
            shapes.push((p("ffn.fc2.weight"), vec![d, ff]));
            shapes.push((p("ffn.fc2.bias"), vec![d]));
        }
        shapes.push(("dec.norm.weight".to_string(), vec![d]));
        shapes.push(("dec.norm.bias".to_string(), vec![d]));
        shapes.push(("dec.linear.weight".to_string(), vec![self.decoder_width(), d]));
        shapes.push(("dec.linear.bias".to_string(), vec![self.decoder_width()]));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Every learnable tensor of a model, keyed by its dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Float = f32> {
    tensors: IndexMap<String, Tensor<F>>,
}

enum InitRule {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

fn init_rule(name: &str, shape: &[usize]) -> InitRule {
    if name.ends_with(".bias") {
        InitRule::Zeros
    } else if name == "embed.pos" {
        InitRule::Normal(POS_INIT_STD)
    } else if name.contains("norm") {
        InitRule::Ones
    } else {
        let fan_in: usize = shape[1..].iter().product();
        InitRule::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

impl<F: Float> ModelParams<F> {
    /// Fan-in uniform weights, zero biases, unit norm gains and a
    /// `normal(0, 0.02)` positional table, all drawn from one seeded stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut tensors = IndexMap::new();
        for (name, shape) in config.param_shapes() {
            let t = match init_rule(&name, &shape) {
                InitRule::Zeros => Tensor::zeros(shape),
                InitRule::Ones => Tensor::ones(shape),
                InitRule::Normal(std) => Tensor::from_fn(shape, |_| F::lit(std * normal.sample(&mut rng))),
                InitRule::Uniform(bound) => Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..bound))),
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams { tensors })
    }

    /// Builds a parameter set from named tensors, checking names and shapes against `config`.
    pub fn from_named(config: &ModelConfig, mut named: IndexMap<String, Tensor<F>>) -> Result<Self> {
        let mut tensors = IndexMap::new();
        for (name, shape) in config.param_shapes() {
            let t = named
                .shift_remove(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            tensors.insert(name, t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Data(format!("unexpected parameter {extra}")));
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Records every tensor on `tape`, as differentiable leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape<F>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }
}

/// Tape handles of a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not registered"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars { vars: iter.into_iter().collect() }
    }
}

/// Tubelet anchor `(t', row, col)` in the token grid.
pub type Anchor = (usize, usize, usize);

/// Token embeddings `[tokens, d_e]` plus the anchor of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<F: Float = f32> {
    pub tokens: Tensor<F>,
    pub anchors: Vec<Anchor>,
}

impl ModelConfig {
    pub fn anchors(&self) -> Vec<Anchor> {
        let geo = self.input_geometry();
        (0..self.tokens()).map(|i| geo.anchor(i)).collect()
    }
}

/// Stacks model inputs into `[C_total, T, H, W]`: MSI, then SAR, then the mask.
///
/// `msi_clouded` and `sar` are `[T, C, H, W]`, `mask` is `[T, H, W]`. SAR is
/// copied unchanged; only the MSI has been masked upstream.
pub fn assemble_input<F: Float>(
    msi_clouded: &Tensor<F>,
    sar: Option<&Tensor<F>>,
    mask: &Tensor<F>,
    config: &ModelConfig,
) -> Result<Tensor<F>> {
    let (t, h, w) = (config.frames, config.height, config.width);
    let expect = |name: &str, got: &[usize], want: &[usize]| -> Result<()> {
        if got != want {
            return Err(Error::shape(format!("{name} has shape {got:?}, expected {want:?}")));
        }
        Ok(())
    };
    expect("msi", msi_clouded.shape(), &[t, config.msi_channels, h, w])?;
    expect("mask", mask.shape(), &[t, h, w])?;
    match (sar, config.uses_sar()) {
        (Some(s), true) => expect("sar", s.shape(), &[t, config.sar_channels, h, w])?,
        (Some(_), false) => return Err(Error::config("SAR input given to an MSI-only configuration")),
        (None, true) => return Err(Error::config("fusion configuration requires SAR input")),
        (None, false) => {}
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(config.input_channels() * t * plane);
    let mut push_channels = |src: &Tensor<F>, channels: usize| {
        for c in 0..channels {
            for ti in 0..t {
                let base = (ti * channels + c) * plane;
                data.extend_from_slice(&src.data()[base..base + plane]);
            }
        }
    };
    push_channels(msi_clouded, config.msi_channels);
    if let Some(s) = sar {
        push_channels(s, config.sar_channels);
    }
    if config.use_mask_channel {
        data.extend_from_slice(mask.data());
    }
    Tensor::new(vec![config.input_channels(), t, h, w], data)
}

/// Builds the model on a tape. Each method records its stage and returns the output handle.
pub struct ModelGraph<'a, F: Float> {
    pub tape: &'a mut Tape<F>,
    pub params: &'a ParamVars,
    pub config: &'a ModelConfig,
}

/// Output of [`ModelGraph::encode`], with the attention nodes for inspection.
pub struct EncoderTrace {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl<F: Float> ModelGraph<'_, F> {
    fn p(&self, name: &str) -> Var {
        self.params.get(name)
    }

    /// 3-D tubelet convolution, linear projection, then the positional table.
    /// `input` is `[C_total, T, H, W]`; the result is `[tokens, d_e]`.
    pub fn embed(&mut self, input: Var) -> Result<Var> {
        let cfg = self.config;
        let (k, t) = (cfg.patch, cfg.temporal_span);
        let conv = self
            .tape
            .conv3d(input, self.p("embed.tubelet.weight"), self.p("embed.tubelet.bias"), (t, k, k))?;
        let flat = self.tape.reshape(conv, &[cfg.embed_dim, cfg.tokens()])?;
        let tokens = self.tape.permute(flat, &[1, 0])?;
        let lin = self.dense(tokens, "embed.linear")?;
        self.tape.add(lin, self.p("embed.pos"))
    }

    fn dense(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (w, b) = (self.p(&format!("{prefix}.weight")), self.p(&format!("{prefix}.bias")));
        self.tape.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (g, b) = (self.p(&format!("{prefix}.weight")), self.p(&format!("{prefix}.bias")));
        self.tape.layer_norm(x, g, b)
    }

    fn block(&mut self, layer: usize, x: Var) -> Result<(Var, Var)> {
        let pre = format!("enc.{layer}");
        let h = self.norm(x, &format!("{pre}.norm1"))?;
        let q = self.dense(h, &format!("{pre}.attn.q"))?;
        let k = self.dense(h, &format!("{pre}.attn.k"))?;
        let v = self.dense(h, &format!("{pre}.attn.v"))?;
        let attn = self.tape.attention(q, k, v, self.config.heads)?;
        let o = self.dense(attn, &format!("{pre}.attn.out"))?;
        let x = self.tape.add(x, o)?;
        let h = self.norm(x, &format!("{pre}.norm2"))?;
        let f = self.dense(h, &format!("{pre}.ffn.fc1"))?;
        let f = self.tape.gelu(f);
        let f = self.dense(f, &format!("{pre}.ffn.fc2"))?;
        Ok((self.tape.add(x, f)?, attn))
    }

    /// Pre-norm encoder stack with joint attention over all tokens.
    pub fn encode(&mut self, tokens: Var) -> Result<EncoderTrace> {
        let mut x = tokens;
        let mut attention = Vec::with_capacity(self.config.depth);
        for layer in 0..self.config.depth {
            let (next, attn) = self.block(layer, x)?;
            attention.push(attn);
            x = next;
        }
        Ok(EncoderTrace { output: x, attention })
    }

    /// Layer norm, per-token linear head, scatter into `[C_msi, T, H, W]`.
    pub fn decode(&mut self, tokens: Var) -> Result<Var> {
        let h = self.norm(tokens, "dec.norm")?;
        let rows = self.dense(h, "dec.linear")?;
        self.tape.unpatchify(rows, self.config.output_geometry())
    }

    /// Full pipeline from an assembled `[C_total, T, H, W]` input to `[C_msi, T, H, W]`.
    pub fn forward(&mut self, input: Var) -> Result<Var> {
        let tokens = self.embed(input)?;
        let enc = self.encode(tokens)?;
        self.decode(enc.output)
    }
}

fn with_graph<F: Float, R>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    run: impl FnOnce(&mut ModelGraph<'_, F>) -> Result<R>,
) -> Result<R> {
    config.validate()?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let mut graph = ModelGraph { tape: &mut tape, params: &vars, config };
    run(&mut graph)
}

/// Embeds an assembled `[C_total, T, H, W]` input into a token grid.
pub fn tubelet_embed<F: Float>(x: &Tensor<F>, params: &ModelParams<F>, config: &ModelConfig) -> Result<TokenGrid<F>> {
    with_graph(params, config, |g| {
        let input = g.tape.constant(x.clone());
        let out = g.embed(input)?;
        Ok(TokenGrid { tokens: g.tape.value(out).clone(), anchors: config.anchors() })
    })
}

/// Runs the encoder stack; returns the new grid and per-layer attention weights
/// (`[heads, tokens, tokens]` each, flattened).
pub fn encoder_forward_traced<F: Float>(
    grid: &TokenGrid<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
) -> Result<(TokenGrid<F>, Vec<Vec<F>>)> {
    with_graph(params, config, |g| {
        let input = g.tape.constant(grid.tokens.clone());
        let trace = g.encode(input)?;
        let weights = trace
            .attention
            .iter()
            .map(|&a| g.tape.attention_weights(a).expect("attention node").to_vec())
            .collect();
        let out = TokenGrid { tokens: g.tape.value(trace.output).clone(), anchors: grid.anchors.clone() };
        Ok((out, weights))
    })
}

pub fn encoder_forward<F: Float>(grid: &TokenGrid<F>, params: &ModelParams<F>, config: &ModelConfig) -> Result<TokenGrid<F>> {
    encoder_forward_traced(grid, params, config).map(|(g, _)| g)
}

pub fn decode_patches<F: Float>(grid: &TokenGrid<F>, params: &ModelParams<F>, config: &ModelConfig) -> Result<Tensor<F>> {
    with_graph(params, config, |g| {
        let input = g.tape.constant(grid.tokens.clone());
        let out = g.decode(input)?;
        Ok(g.tape.value(out).clone())
    })
}

/// End-to-end prediction `[C_msi, T, H, W]` from clouded MSI, optional SAR and the mask.
pub fn model_forward<F: Float>(
    msi_clouded: &Tensor<F>,
    sar: Option<&Tensor<F>>,
    mask: &Tensor<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
) -> Result<Tensor<F>> {
    let x = assemble_input(msi_clouded, sar, mask, config)?;
    with_graph(params, config, |g| {
        let input = g.tape.constant(x);
        let out = g.forward(input)?;
        Ok(g.tape.value(out).clone())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(variant: Variant) -> ModelConfig {
        ModelConfig {
            frames: 4,
            temporal_span: variant.temporal_span(4),
            embed_dim: 16,
            depth: 2,
            heads: 2,
            ff_dim: 32,
            height: 10,
            width: 10,
            ..ModelConfig::reference(variant)
        }
    }

    #[test]
    fn reference_token_counts() {
        assert_eq!(ModelConfig::reference(Variant::SmtsVivit).tokens(), 432);
        assert_eq!(ModelConfig::reference(Variant::SmtsVit).tokens(), 144);
        assert_eq!(ModelConfig::reference(Variant::SmtsVivit).head_dim(), 8);
    }

    #[test]
    fn input_channel_counts() {
        assert_eq!(ModelConfig::reference(Variant::SmtsVivit).input_channels(), 14);
        let cfg = ModelConfig { use_mask_channel: false, ..ModelConfig::reference(Variant::MtsVivit) };
        assert_eq!(cfg.input_channels(), 11);
    }

    #[test]
    fn validate_rejects_bad_tilings() {
        let base = ModelConfig::reference(Variant::MtsVivit);
        assert!(ModelConfig { temporal_span: 4, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { height: 62, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { heads: 7, ..base.clone() }.validate().is_err());
        assert!(ModelParams::<f32>::init(&ModelConfig { heads: 7, ..base }, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = micro(Variant::SmtsVivit);
        let a = ModelParams::<f32>::init(&cfg, 7).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::<f32>::init(&cfg, 8).unwrap());
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let bound = 1.0 / ((14 * 2 * 25) as f32).sqrt();
        assert!(a.get("embed.tubelet.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn names_are_unique() {
        let shapes = ModelConfig::reference(Variant::SmtsVivit).param_shapes();
        let mut names: Vec<_> = shapes.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), shapes.len());
        assert!(names.contains(&"enc.3.attn.q.weight".to_string()));
    }

    #[test]
    fn assemble_rejects_mismatched_sar() {
        let cfg = micro(Variant::MtsVivit);
        let msi = Tensor::<f32>::zeros([4, 11, 10, 10]);
        let sar = Tensor::<f32>::zeros([4, 2, 10, 10]);
        let mask = Tensor::<f32>::zeros([4, 10, 10]);
        assert!(matches!(assemble_input(&msi, Some(&sar), &mask, &cfg), Err(Error::Config(_))));
        let fused = micro(Variant::SmtsVivit);
        assert!(matches!(assemble_input(&msi, None, &mask, &fused), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_embeds_to_positional_table() {
        let cfg = micro(Variant::MtsVivit);
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let x = Tensor::zeros([cfg.input_channels(), 4, 10, 10]);
        let grid = tubelet_embed(&x, &params, &cfg).unwrap();
        assert_eq!(&grid.tokens, params.get("embed.pos").unwrap());
        assert_eq!(grid.anchors.len(), cfg.tokens());
    }

    #[test]
    fn zero_tokens_decode_to_zero() {
        let cfg = micro(Variant::MtsVivit);
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let grid = TokenGrid { tokens: Tensor::zeros([cfg.tokens(), cfg.embed_dim]), anchors: cfg.anchors() };
        let y = decode_patches(&grid, &params, &cfg).unwrap();
        assert_eq!(y.shape(), &[11, 4, 10, 10]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
