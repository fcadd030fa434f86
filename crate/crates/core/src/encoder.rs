//! The full classifier: multi-scale residual tokens, a stack of pre-norm
//! encoder layers, a final layer norm, mean pooling and a linear head.
//! Also the MSR-free ablation baseline that tokenizes with one strided
//! convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msr::{add_positions, BackboneSpec, MultiScaleResidual, PyramidMaps, TokenLevels, MIN_INPUT_LEN};
use crate::nn::{check_heads, global_mean_pool, join, Conv1d, EncoderLayer, LayerNorm, Linear, Module};
use crate::tensor::{softmax_in_place, Graph, Param, Tensor};

/// Display names in label order.
pub const CLASS_NAMES: [&str; 10] = [
    "-CG", "+CG", "-PBP", "+PBP", "-NBE", "+NBE", "NBE", "MP", "CG-IR", "SW",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Msrt,
    /// Patchifier + identical encoder/head; the ablation baseline.
    Baseline,
}

/// Architectural hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_len: usize,
    pub backbone: BackboneSpec,
    pub fpn_channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    pub token_levels: TokenLevels,
    /// Kernel and stride of the baseline patchifier.
    pub patch_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Msrt,
            input_len: 1000,
            backbone: BackboneSpec::default(),
            fpn_channels: 64,
            d_model: 48,
            n_heads: 6,
            n_layers: 2,
            d_ff: 192,
            n_classes: 10,
            token_levels: TokenLevels::All,
            patch_len: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks and smoke tests.
    pub fn toy(input_len: usize, d_model: usize) -> Self {
        ModelConfig {
            input_len,
            backbone: BackboneSpec {
                stem_channels: 4,
                stem_kernel: 7,
                stage_channels: [4, 6, 8, 8],
                blocks_per_stage: 1,
            },
            fpn_channels: 6,
            d_model,
            n_heads: 2,
            n_layers: 1,
            d_ff: 2 * d_model,
            patch_len: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_len", self.input_len),
            ("backbone.stem_channels", self.backbone.stem_channels),
            ("backbone.stem_kernel", self.backbone.stem_kernel),
            ("backbone.blocks_per_stage", self.backbone.blocks_per_stage),
            ("fpn_channels", self.fpn_channels),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("n_classes", self.n_classes),
            ("patch_len", self.patch_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.backbone.stage_channels.contains(&0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        check_heads(self.d_model, self.n_heads)?;
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model {} must be even for the position table",
                self.d_model
            )));
        }
        match self.architecture {
            Architecture::Msrt if self.input_len < MIN_INPUT_LEN => Err(Error::Config(format!(
                "input_len {} is shorter than the minimum {MIN_INPUT_LEN}",
                self.input_len
            ))),
            Architecture::Baseline if self.input_len < self.patch_len => Err(Error::Config(
                format!("input_len {} is shorter than patch_len {}", self.input_len, self.patch_len),
            )),
            _ => Ok(()),
        }
    }
}

/// Encoder layers, final norm, pooling and the classification head.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl EncoderStack {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = (0..cfg.n_layers)
            .map(|_| EncoderLayer::new(cfg.d_model, cfg.n_heads, cfg.d_ff, rng))
            .collect::<Result<_>>()?;
        Ok(EncoderStack {
            layers,
            final_norm: LayerNorm::new(cfg.d_model),
            head: Linear::new(cfg.d_model, cfg.n_classes, rng),
        })
    }

    /// `[T, d_model]` tokens → `[1, n_classes]` logits.
    pub fn forward(&self, g: &mut Graph, mut x: Tensor) -> Result<Tensor> {
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        let x = self.final_norm.forward(g, x)?;
        let pooled = global_mean_pool(g, x)?;
        let d = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[1, d])?;
        self.head.forward(g, pooled)
    }
}

impl Module for EncoderStack {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.named_params(&join(prefix, &format!("layer{i}")), out);
        }
        self.final_norm.named_params(&join(prefix, "final_norm"), out);
        self.head.named_params(&join(prefix, "head"), out);
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for l in &mut self.layers {
            l.params_mut(out);
        }
        self.final_norm.params_mut(out);
        self.head.params_mut(out);
    }
}

/// A model that maps one `[1, L]` record to `[1, n_classes]` logits.
pub trait Classifier: Module + Sync {
    fn config(&self) -> &ModelConfig;

    /// Builds the per-record computation in `g`.
    fn record_logits(&self, g: &mut Graph, x: Tensor) -> Result<Tensor>;
}

fn check_record(cfg: &ModelConfig, g: &Graph, x: Tensor) -> Result<()> {
    if g.shape(x) != [1, cfg.input_len] {
        return Err(Error::dim(
            "forward",
            format!(
                "expected input shape [1, {}], got {:?}",
                cfg.input_len,
                g.shape(x)
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MsrtModel {
    pub config: ModelConfig,
    pub msr: MultiScaleResidual,
    pub encoder: EncoderStack,
}

impl MsrtModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let msr = MultiScaleResidual::new(
            &config.backbone,
            config.fpn_channels,
            config.d_model,
            config.token_levels,
            &mut rng,
        );
        let encoder = EncoderStack::new(&config, &mut rng)?;
        Ok(MsrtModel {
            config,
            msr,
            encoder,
        })
    }

    pub fn token_count(&self) -> usize {
        self.msr.token_count(self.config.input_len)
    }

    /// Pyramid maps for one record, for feature analysis.
    pub fn pyramid(&self, g: &mut Graph, x: Tensor) -> Result<PyramidMaps> {
        check_record(&self.config, g, x)?;
        self.msr.forward_maps(g, x)
    }
}

impl Module for MsrtModel {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.msr.named_params(&join(prefix, "msr"), out);
        self.encoder.named_params(&join(prefix, "encoder"), out);
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.msr.params_mut(out);
        self.encoder.params_mut(out);
    }
}

impl Classifier for MsrtModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn record_logits(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        check_record(&self.config, g, x)?;
        let tokens = self.msr.forward(g, x)?;
        self.encoder.forward(g, tokens)
    }
}

/// Ablation baseline: one `patch_len`-wide, `patch_len`-strided
/// convolution to `d_model` channels replaces the multi-scale module.
#[derive(Debug, Clone)]
pub struct BaselineTransformer {
    pub config: ModelConfig,
    pub patchifier: Conv1d,
    pub encoder: EncoderStack,
}

impl BaselineTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let p = config.patch_len;
        let patchifier = Conv1d::new(1, config.d_model, p, p, 0, &mut rng);
        let encoder = EncoderStack::new(&config, &mut rng)?;
        Ok(BaselineTransformer {
            config,
            patchifier,
            encoder,
        })
    }

    pub fn token_count(&self) -> usize {
        self.patchifier.out_len(self.config.input_len)
    }
}

impl Module for BaselineTransformer {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.patchifier.named_params(&join(prefix, "patchifier"), out);
        self.encoder.named_params(&join(prefix, "encoder"), out);
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.patchifier.params_mut(out);
        self.encoder.params_mut(out);
    }
}

impl Classifier for BaselineTransformer {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn record_logits(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        check_record(&self.config, g, x)?;
        let h = self.patchifier.forward(g, x)?;
        let tokens = g.transpose(h)?;
        let tokens = add_positions(g, tokens)?;
        self.encoder.forward(g, tokens)
    }
}

/// Either architecture, chosen by [`ModelConfig::architecture`].
#[derive(Debug, Clone)]
pub enum Model {
    Msrt(MsrtModel),
    Baseline(BaselineTransformer),
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(match config.architecture {
            Architecture::Msrt => Model::Msrt(MsrtModel::new(config)?),
            Architecture::Baseline => Model::Baseline(BaselineTransformer::new(config)?),
        })
    }

    pub fn token_count(&self) -> usize {
        match self {
            Model::Msrt(m) => m.token_count(),
            Model::Baseline(m) => m.token_count(),
        }
    }
}

impl Module for Model {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            Model::Msrt(m) => m.named_params(prefix, out),
            Model::Baseline(m) => m.named_params(prefix, out),
        }
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match self {
            Model::Msrt(m) => m.params_mut(out),
            Model::Baseline(m) => m.params_mut(out),
        }
    }
}

impl Classifier for Model {
    fn config(&self) -> &ModelConfig {
        match self {
            Model::Msrt(m) => &m.config,
            Model::Baseline(m) => &m.config,
        }
    }

    fn record_logits(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        match self {
            Model::Msrt(m) => m.record_logits(g, x),
            Model::Baseline(m) => m.record_logits(g, x),
        }
    }
}

/// Batch forward inside one graph: `batch[B,1,L]` → logits `[B, n_classes]`.
pub fn forward<M: Classifier + ?Sized>(model: &M, g: &mut Graph, batch: Tensor) -> Result<Tensor> {
    let cfg = model.config();
    let (b, len) = match g.shape(batch) {
        &[b, 1, l] => (b, l),
        s => {
            return Err(Error::dim(
                "forward",
                format!("expected batch shape [B, 1, {}], got {s:?}", cfg.input_len),
            ))
        }
    };
    if len != cfg.input_len {
        return Err(Error::dim(
            "forward",
            format!("expected record length {}, got {len}", cfg.input_len),
        ));
    }
    if b == 0 {
        return Err(Error::Empty("forward"));
    }
    let flat = g.reshape(batch, &[b, len])?;
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let x = g.slice_rows(flat, i, 1)?;
        rows.push(model.record_logits(g, x)?);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(&rows)
    }
}

/// Logits for many records, one inference graph per record, in parallel.
pub fn logits<M: Classifier + ?Sized>(model: &M, records: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let len = model.config().input_len;
    records
        .par_iter()
        .map(|r| {
            if r.len() != len {
                return Err(Error::dim(
                    "forward",
                    format!("expected record length {len}, got {}", r.len()),
                ));
            }
            let mut g = Graph::inference();
            let x = g.constant(&[1, len], r.to_vec())?;
            let y = model.record_logits(&mut g, x)?;
            Ok(g.value(y).to_vec())
        })
        .collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes and softmax probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub classes: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Self {
        let mut classes = Vec::with_capacity(logits.len());
        let probabilities = logits
            .into_iter()
            .map(|mut row| {
                classes.push(argmax(&row));
                softmax_in_place(&mut row);
                row
            })
            .collect();
        Predictions {
            classes,
            probabilities,
        }
    }
}

pub fn predict<M: Classifier + ?Sized>(model: &M, records: &[&[f64]]) -> Result<Predictions> {
    Ok(Predictions::from_logits(logits(model, records)?))
}
