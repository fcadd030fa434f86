//! Multi-scale residual module: a 1-D residual backbone producing the
//! C2..C5 feature maps, a feature-pyramid top-down merge producing
//! P2..P5, and the tokenizer that turns the pyramid into an encoder
//! sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, positional_encoding, Conv1d, Module};
use crate::tensor::{Graph, Param, Tensor};

/// Shortest input for which every pyramid level keeps at least one sample.
pub const MIN_INPUT_LEN: usize = 32;

/// Which pyramid levels become encoder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenLevels {
    /// P2, P3, P4 and P5 concatenated along the token axis.
    #[default]
    All,
    /// P2 only.
    P2Only,
}

/// Two kernel-3 convolutions with a skip connection.
///
/// A strided block first crops an odd-length input by one sample so that
/// the output length is exactly `floor(L/stride)`; the skip path uses a
/// 1×1 projection with the same stride whenever the shape changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub projection: Option<Conv1d>,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        let projection =
            (c_in != c_out || stride != 1).then(|| Conv1d::new(c_in, c_out, 1, stride, 0, rng));
        ResidualBlock {
            conv1: Conv1d::new(c_in, c_out, 3, stride, 1, rng),
            conv2: Conv1d::new(c_out, c_out, 3, 1, 1, rng),
            projection,
            stride,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        len / self.stride
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let len = g.shape(x)[1];
        let usable = len - len % self.stride;
        let x = if usable != len {
            g.slice_cols(x, 0, usable)?
        } else {
            x
        };
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        g.relu(y)
    }
}

impl Module for ResidualBlock {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.named_params(&join(prefix, "conv1"), out);
        self.conv2.named_params(&join(prefix, "conv2"), out);
        if let Some(p) = &self.projection {
            p.named_params(&join(prefix, "projection"), out);
        }
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv1.params_mut(out);
        self.conv2.params_mut(out);
        if let Some(p) = &mut self.projection {
            p.params_mut(out);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualStage {
    pub blocks: Vec<ResidualBlock>,
}

impl ResidualStage {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        stride: usize,
        n_blocks: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..n_blocks.max(1))
            .map(|i| {
                if i == 0 {
                    ResidualBlock::new(c_in, c_out, stride, rng)
                } else {
                    ResidualBlock::new(c_out, c_out, 1, rng)
                }
            })
            .collect();
        ResidualStage { blocks }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Tensor) -> Result<Tensor> {
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }

    pub fn out_len(&self, len: usize) -> usize {
        self.blocks.iter().fold(len, |l, b| b.out_len(l))
    }
}

impl Module for ResidualStage {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_params(&join(prefix, &format!("block{i}")), out);
        }
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for b in &mut self.blocks {
            b.params_mut(out);
        }
    }
}

/// Geometry of the backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            stem_channels: 16,
            stem_kernel: 7,
            stage_channels: [32, 64, 128, 256],
            blocks_per_stage: 2,
        }
    }
}

/// Stem convolution (stride 2) followed by four stride-2 residual stages.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: Conv1d,
    pub stages: Vec<ResidualStage>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Self {
        let k = spec.stem_kernel;
        let stem = Conv1d::new(1, spec.stem_channels, k, 2, k / 2, rng);
        let mut c_in = spec.stem_channels;
        let stages = spec
            .stage_channels
            .iter()
            .map(|&c| {
                let s = ResidualStage::new(c_in, c, 2, spec.blocks_per_stage, rng);
                c_in = c;
                s
            })
            .collect();
        Backbone { stem, stages }
    }

    /// Lengths of C2..C5 for an input of `len` samples.
    pub fn level_lengths(&self, len: usize) -> [usize; 4] {
        let mut l = self.stem.out_len(len);
        let mut out = [0; 4];
        for (o, s) in out.iter_mut().zip(&self.stages) {
            l = s.out_len(l);
            *o = l;
        }
        out
    }

    pub fn level_channels(&self) -> [usize; 4] {
        let mut out = [0; 4];
        for (o, s) in out.iter_mut().zip(&self.stages) {
            *o = s.blocks[0].conv1.c_out();
        }
        out
    }

    /// `x[1,L]` → `[C2, C3, C4, C5]`.
    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<[Tensor; 4]> {
        match g.shape(x) {
            &[1, l] if l >= MIN_INPUT_LEN => {}
            &[1, l] => {
                return Err(Error::Config(format!(
                    "input of {l} samples is shorter than the minimum {MIN_INPUT_LEN}"
                )))
            }
            s => {
                return Err(Error::dim(
                    "backbone",
                    format!("expected a single-channel [1,L] input, got {s:?}"),
                ))
            }
        }
        let h = self.stem.forward(g, x)?;
        let mut h = g.relu(h)?;
        let mut levels = [h; 4];
        for (lvl, stage) in levels.iter_mut().zip(&self.stages) {
            h = stage.forward(g, h)?;
            *lvl = h;
        }
        Ok(levels)
    }
}

impl Module for Backbone {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.stem.named_params(&join(prefix, "stem"), out);
        for (i, s) in self.stages.iter().enumerate() {
            s.named_params(&join(prefix, &format!("stage{}", i + 1)), out);
        }
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.stem.params_mut(out);
        for s in &mut self.stages {
            s.params_mut(out);
        }
    }
}

/// Top-down pyramid: `P5 = lateral5(C5)` and, for i = 4, 3, 2,
/// `Pi = merge_i(upsample(P(i+1), len Ci) + lateral_i(Ci))`, where the
/// merge convolution carries the level bias.
#[derive(Debug, Clone)]
pub struct Fpn {
    /// 1×1 projections of C2..C5 to `fpn_channels`.
    pub laterals: Vec<Conv1d>,
    /// Kernel-3 merge convolutions for P2..P4.
    pub merges: Vec<Conv1d>,
}

impl Fpn {
    pub fn new<R: Rng + ?Sized>(level_channels: [usize; 4], fpn_channels: usize, rng: &mut R) -> Self {
        let laterals = level_channels
            .iter()
            .map(|&c| Conv1d::new(c, fpn_channels, 1, 1, 0, rng))
            .collect();
        let merges = (0..3)
            .map(|_| Conv1d::new(fpn_channels, fpn_channels, 3, 1, 1, rng))
            .collect();
        Fpn { laterals, merges }
    }

    pub fn channels(&self) -> usize {
        self.laterals[0].c_out()
    }

    pub fn forward(&self, g: &mut Graph, cs: &[Tensor; 4]) -> Result<[Tensor; 4]> {
        self.forward_with(g, cs, true)
    }

    /// Same as [`Fpn::forward`]; `top_down = false` drops the upsampled
    /// term so each level sees only its own lateral input.
    pub fn forward_with(&self, g: &mut Graph, cs: &[Tensor; 4], top_down: bool) -> Result<[Tensor; 4]> {
        for (i, (&c, lat)) in cs.iter().zip(&self.laterals).enumerate() {
            if g.shape(c).first() != Some(&lat.c_in()) {
                return Err(Error::dim(
                    "fpn",
                    format!(
                        "C{} has shape {:?}, lateral expects {} channels",
                        i + 2,
                        g.shape(c),
                        lat.c_in()
                    ),
                ));
            }
        }
        for i in 0..3 {
            if g.shape(cs[i])[1] < g.shape(cs[i + 1])[1] {
                return Err(Error::dim(
                    "fpn",
                    format!(
                        "level lengths must be non-increasing: C{} {:?} vs C{} {:?}",
                        i + 2,
                        g.shape(cs[i]),
                        i + 3,
                        g.shape(cs[i + 1])
                    ),
                ));
            }
        }
        let mut ps = [cs[0]; 4];
        ps[3] = self.laterals[3].forward(g, cs[3])?;
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(g, cs[i])?;
            let merged = if top_down {
                let len = g.shape(cs[i])[1];
                let up = g.upsample_nearest(ps[i + 1], len)?;
                g.add(up, lat)?
            } else {
                lat
            };
            ps[i] = self.merges[i].forward(g, merged)?;
        }
        Ok(ps)
    }
}

impl Module for Fpn {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, l) in self.laterals.iter().enumerate() {
            l.named_params(&join(prefix, &format!("lateral{}", i + 2)), out);
        }
        for (i, m) in self.merges.iter().enumerate() {
            m.named_params(&join(prefix, &format!("merge{}", i + 2)), out);
        }
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for l in &mut self.laterals {
            l.params_mut(out);
        }
        for m in &mut self.merges {
            m.params_mut(out);
        }
    }
}

/// Projects each pyramid level to `d_model`, lays levels out as
/// `[len, d_model]` token blocks in P2..P5 order and adds the sinusoidal
/// position table.
#[derive(Debug, Clone)]
pub struct PyramidTokenizer {
    pub projections: Vec<Conv1d>,
    pub levels: TokenLevels,
}

impl PyramidTokenizer {
    pub fn new<R: Rng + ?Sized>(
        fpn_channels: usize,
        d_model: usize,
        levels: TokenLevels,
        rng: &mut R,
    ) -> Self {
        let n = match levels {
            TokenLevels::All => 4,
            TokenLevels::P2Only => 1,
        };
        PyramidTokenizer {
            projections: (0..n)
                .map(|_| Conv1d::new(fpn_channels, d_model, 1, 1, 0, rng))
                .collect(),
            levels,
        }
    }

    pub fn d_model(&self) -> usize {
        self.projections[0].c_out()
    }

    pub fn token_count(&self, level_lengths: [usize; 4]) -> usize {
        level_lengths[..self.projections.len()].iter().sum()
    }

    /// Tokens before the position table is added.
    pub fn raw_tokens(&self, g: &mut Graph, ps: &[Tensor; 4]) -> Result<Tensor> {
        let mut blocks = Vec::with_capacity(self.projections.len());
        for (proj, &p) in self.projections.iter().zip(ps) {
            let h = proj.forward(g, p)?;
            blocks.push(g.transpose(h)?);
        }
        if blocks.len() == 1 {
            Ok(blocks[0])
        } else {
            g.concat_rows(&blocks)
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &[Tensor; 4]) -> Result<Tensor> {
        let tokens = self.raw_tokens(g, ps)?;
        add_positions(g, tokens)
    }
}

/// Adds the fixed sinusoidal table to a `[T, d_model]` token sequence.
pub fn add_positions(g: &mut Graph, tokens: Tensor) -> Result<Tensor> {
    let (t, d) = match g.shape(tokens) {
        &[t, d] => (t, d),
        s => return Err(Error::dim("positions", format!("expected [T,d], got {s:?}"))),
    };
    let pe = g.constant(&[t, d], positional_encoding(t, d)?)?;
    g.add(tokens, pe)
}

impl Module for PyramidTokenizer {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, p) in self.projections.iter().enumerate() {
            p.named_params(&join(prefix, &format!("proj{}", i + 2)), out);
        }
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for p in &mut self.projections {
            p.params_mut(out);
        }
    }
}

/// Backbone, pyramid and tokenizer as one unit.
#[derive(Debug, Clone)]
pub struct MultiScaleResidual {
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub tokenizer: PyramidTokenizer,
}

/// Intermediate maps of one forward pass, kept for analysis.
#[derive(Debug, Clone, Copy)]
pub struct PyramidMaps {
    pub c: [Tensor; 4],
    pub p: [Tensor; 4],
    pub tokens: Tensor,
}

impl MultiScaleResidual {
    pub fn new<R: Rng + ?Sized>(
        backbone: &BackboneSpec,
        fpn_channels: usize,
        d_model: usize,
        levels: TokenLevels,
        rng: &mut R,
    ) -> Self {
        let backbone = Backbone::new(backbone, rng);
        let fpn = Fpn::new(backbone.level_channels(), fpn_channels, rng);
        let tokenizer = PyramidTokenizer::new(fpn_channels, d_model, levels, rng);
        MultiScaleResidual {
            backbone,
            fpn,
            tokenizer,
        }
    }

    pub fn token_count(&self, input_len: usize) -> usize {
        self.tokenizer
            .token_count(self.backbone.level_lengths(input_len))
    }

    pub fn forward_maps(&self, g: &mut Graph, x: Tensor) -> Result<PyramidMaps> {
        let c = self.backbone.forward(g, x)?;
        let p = self.fpn.forward(g, &c)?;
        let tokens = self.tokenizer.forward(g, &p)?;
        Ok(PyramidMaps { c, p, tokens })
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        Ok(self.forward_maps(g, x)?.tokens)
    }
}

impl Module for MultiScaleResidual {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.backbone.named_params(&join(prefix, "backbone"), out);
        self.fpn.named_params(&join(prefix, "fpn"), out);
        self.tokenizer.named_params(&join(prefix, "tokenizer"), out);
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.backbone.params_mut(out);
        self.fpn.params_mut(out);
        self.tokenizer.params_mut(out);
    }
}
