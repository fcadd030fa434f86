//! Layers built from tensor ops: linear, convolution, layer norm,
//! multi-head self-attention and the pre-norm encoder layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Anything that owns trainable parameters.
///
/// Both visitors must yield parameters in the same order; optimizers and
/// checkpoints rely on it.
pub trait Module {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);

    fn param_count(&self) -> usize {
        let mut v = Vec::new();
        self.named_params("", &mut v);
        v.iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Param {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Param::new(shape, data).expect("shape and data agree")
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[d_out, d_in]`
    pub weight: Param,
    /// `[d_out]`
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: glorot_uniform(rng, &[d_out, d_in], d_in, d_out),
            bias: Param::zeros(&[d_out]),
        }
    }

    pub fn from_parts(weight: Param, bias: Param) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            (&[o, _], &[b]) if o == b => Ok(Linear { weight, bias }),
            (w, b) => Err(Error::dim(
                "linear",
                format!("weight {w:?} and bias {b:?} are inconsistent"),
            )),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x[T,d_in] · weightᵀ + bias`.
    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.matmul_nt(x, w)?;
        g.add_row_bias(y, b)
    }
}

impl Module for Linear {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `[c_out, c_in, kernel]`
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Conv1d {
            weight: glorot_uniform(rng, &[c_out, c_in, kernel], c_in * kernel, c_out * kernel),
            bias: Param::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel()) / self.stride + 1
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.conv1d(x, w, b, self.stride, self.pad)
    }
}

impl Module for Conv1d {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Param::filled(&[d], 1.0),
            beta: Param::zeros(&[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

impl Module for LayerNorm {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

/// Scaled dot-product attention over the full sequence (no mask):
/// `softmax(q·kᵀ/sqrt(d))·v`.
pub fn attention(g: &mut Graph, q: Tensor, k: Tensor, v: Tensor) -> Result<Tensor> {
    let (weights, v) = attention_weights(g, q, k, v)?;
    g.matmul(weights, v)
}

/// The `[T,T]` row-stochastic weight matrix of [`attention`].
pub fn attention_weights(
    g: &mut Graph,
    q: Tensor,
    k: Tensor,
    v: Tensor,
) -> Result<(Tensor, Tensor)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || qs != ks || ks != vs {
        return Err(Error::dim(
            "attention",
            format!("q {qs:?}, k {ks:?}, v {vs:?} must share one [T,d] shape"),
        ));
    }
    let d = qs[1];
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    Ok((g.softmax(scores, 1)?, v))
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(d_model: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(d_model, n_heads)?;
        Ok(MultiHeadAttention {
            n_heads,
            d_model,
            query: Linear::new(d_model, d_model, rng),
            key: Linear::new(d_model, d_model, rng),
            value: Linear::new(d_model, d_model, rng),
            output: Linear::new(d_model, d_model, rng),
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        check_heads(self.d_model, self.n_heads)?;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let cat = g.multi_head_attention(q, k, v, self.n_heads)?;
        self.output.forward(g, cat)
    }
}

pub(crate) fn check_heads(d_model: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by n_heads {n_heads}"
        )));
    }
    Ok(())
}

impl Module for MultiHeadAttention {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.query.named_params(&join(prefix, "query"), out);
        self.key.named_params(&join(prefix, "key"), out);
        self.value.named_params(&join(prefix, "value"), out);
        self.output.named_params(&join(prefix, "output"), out);
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.query.params_mut(out);
        self.key.params_mut(out);
        self.value.params_mut(out);
        self.output.params_mut(out);
    }
}

/// Pre-norm transformer encoder layer:
/// `y = x + MHA(LN(x))`, `z = y + FFN(LN(y))`, `FFN = Linear→ReLU→Linear`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            norm_attn: LayerNorm::new(d_model),
            attention: MultiHeadAttention::new(d_model, n_heads, rng)?,
            norm_ffn: LayerNorm::new(d_model),
            ffn_in: Linear::new(d_model, d_ff, rng),
            ffn_out: Linear::new(d_ff, d_model, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let h = self.norm_attn.forward(g, x)?;
        let h = self.attention.forward(g, h)?;
        let y = g.add(x, h)?;
        let h = self.norm_ffn.forward(g, y)?;
        let h = self.ffn_in.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.ffn_out.forward(g, h)?;
        g.add(y, h)
    }
}

impl Module for EncoderLayer {
    fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.norm_attn.named_params(&join(prefix, "norm_attn"), out);
        self.attention.named_params(&join(prefix, "attention"), out);
        self.norm_ffn.named_params(&join(prefix, "norm_ffn"), out);
        self.ffn_in.named_params(&join(prefix, "ffn_in"), out);
        self.ffn_out.named_params(&join(prefix, "ffn_out"), out);
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.norm_attn.params_mut(out);
        self.attention.params_mut(out);
        self.norm_ffn.params_mut(out);
        self.ffn_in.params_mut(out);
        self.ffn_out.params_mut(out);
    }
}

/// Fixed sinusoidal table `[T, d_model]`, row-major: sine on even
/// columns, cosine on odd, wavelengths from 2π to 10000·2π.
pub fn positional_encoding(t: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut pe = vec![0.0; t * d_model];
    for pos in 0..t {
        for i in 0..d_model / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / d_model as f64);
            let angle = pos as f64 * freq;
            pe[pos * d_model + 2 * i] = angle.sin();
            pe[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// Mean over the token axis: `[T,d]` → `[d]`.
pub fn global_mean_pool(g: &mut Graph, x: Tensor) -> Result<Tensor> {
    match g.shape(x) {
        &[0, _] => Err(Error::Empty("global_mean_pool")),
        &[_, _] => g.mean_rows(x),
        s => Err(Error::dim("global_mean_pool", format!("expected [T,d], got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn eye(n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        v
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut g = Graph::new();
        let id = Linear::from_parts(
            Param::new(&[3, 3], eye(3)).unwrap(),
            Param::zeros(&[3]),
        )
        .unwrap();
        let x = g.constant(&[2, 3], vec![1., -2., 3., 0.5, 0., -1.]).unwrap();
        let y = id.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let bias_only = Linear::from_parts(
            Param::zeros(&[2, 3]),
            Param::new(&[2], vec![4.0, -5.0]).unwrap(),
        )
        .unwrap();
        let y = bias_only.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &[4.0, -5.0, 4.0, -5.0]);
    }

    #[test]
    fn linear_matches_primitive_composition() {
        let mut r = rng();
        let layer = Linear::new(3, 2, &mut r);
        let layer = Linear::from_parts(layer.weight, Param::new(&[2], vec![0.3, -0.7]).unwrap())
            .unwrap();
        let xs = vec![0.2, -1.0, 0.5, 1.5, 0.1, -0.3];
        let mut g = Graph::new();
        let x = g.constant(&[2, 3], xs.clone()).unwrap();
        let y = layer.forward(&mut g, x).unwrap();
        let w = layer.weight.data();
        for t in 0..2 {
            for o in 0..2 {
                let mut acc = layer.bias.data()[o];
                for i in 0..3 {
                    acc += xs[t * 3 + i] * w[o * 3 + i];
                }
                assert!((g.value(y)[t * 2 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_token_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(&[1, 3], vec![1., 2., 3.]).unwrap();
        let k = g.constant(&[1, 3], vec![-1., 0., 4.]).unwrap();
        let v = g.constant(&[1, 3], vec![7., 8., 9.]).unwrap();
        let o = attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(o), &[7., 8., 9.]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(&[3, 2], vec![1., 0., -2., 5., 0.3, 0.3]).unwrap();
        let k = g.constant(&[3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let v = g.constant(&[3, 2], vec![1., 10., 2., 20., 6., 60.]).unwrap();
        let o = attention(&mut g, q, k, v).unwrap();
        for row in g.value(o).chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_tokens_closed_form() {
        // T=2, d=1: weights for query q_i are softmax(q_i·k_j) since sqrt(1)=1.
        let (q, k, v) = ([0.5, -1.0], [1.0, 2.0], [3.0, -1.0]);
        let mut g = Graph::new();
        let qt = g.constant(&[2, 1], q.to_vec()).unwrap();
        let kt = g.constant(&[2, 1], k.to_vec()).unwrap();
        let vt = g.constant(&[2, 1], v.to_vec()).unwrap();
        let o = attention(&mut g, qt, kt, vt).unwrap();
        for i in 0..2 {
            let e0 = (q[i] * k[0]).exp();
            let e1 = (q[i] * k[1]).exp();
            let expect = (e0 * v[0] + e1 * v[1]) / (e0 + e1);
            assert!((g.value(o)[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_mismatched_shapes() {
        let mut g = Graph::new();
        let q = g.constant(&[2, 2], vec![0.; 4]).unwrap();
        let k = g.constant(&[3, 2], vec![0.; 6]).unwrap();
        assert!(matches!(
            attention(&mut g, q, k, k),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mha_single_head_identity_projections_reduce_to_attention() {
        let d = 4;
        let ident = || {
            Linear::from_parts(Param::new(&[d, d], eye(d)).unwrap(), Param::zeros(&[d])).unwrap()
        };
        let mha = MultiHeadAttention {
            n_heads: 1,
            d_model: d,
            query: ident(),
            key: ident(),
            value: ident(),
            output: ident(),
        };
        let xs: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let mut g = Graph::new();
        let x = g.constant(&[3, d], xs).unwrap();
        let a = mha.forward(&mut g, x).unwrap();
        let b = attention(&mut g, x, x, x).unwrap();
        for (u, v) in g.value(a).iter().zip(g.value(b)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_two_heads_match_manual_per_head_computation() {
        let mut r = rng();
        let mha = MultiHeadAttention::new(4, 2, &mut r).unwrap();
        let xs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let x = g.constant(&[3, 4], xs.clone()).unwrap();
        let out = mha.forward(&mut g, x).unwrap();

        // manual: plain loops, independent of the graph ops
        let proj = |l: &Linear| -> Vec<f64> {
            let (w, b) = (l.weight.data(), l.bias.data());
            let mut y = vec![0.0; 12];
            for t in 0..3 {
                for o in 0..4 {
                    y[t * 4 + o] = b[o] + (0..4).map(|i| xs[t * 4 + i] * w[o * 4 + i]).sum::<f64>();
                }
            }
            y
        };
        let (q, k, v) = (proj(&mha.query), proj(&mha.key), proj(&mha.value));
        let mut cat = vec![0.0; 12];
        for h in 0..2 {
            for t in 0..3 {
                let mut s: Vec<f64> = (0..3)
                    .map(|u| {
                        (0..2).map(|c| q[t * 4 + h * 2 + c] * k[u * 4 + h * 2 + c]).sum::<f64>()
                            / 2f64.sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter_mut().map(|e| {
                    *e = (*e - m).exp();
                    *e
                }).sum();
                for c in 0..2 {
                    cat[t * 4 + h * 2 + c] =
                        (0..3).map(|u| s[u] / z * v[u * 4 + h * 2 + c]).sum::<f64>();
                }
            }
        }
        let (w, b) = (mha.output.weight.data(), mha.output.bias.data());
        for t in 0..3 {
            for o in 0..4 {
                let e = b[o] + (0..4).map(|i| cat[t * 4 + i] * w[o * 4 + i]).sum::<f64>();
                assert!((g.value(out)[t * 4 + o] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let mut r = rng();
        assert!(matches!(
            MultiHeadAttention::new(64, 6, &mut r),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encoder_layer_with_zero_output_projections_is_identity() {
        let mut r = rng();
        let mut layer = EncoderLayer::new(6, 3, 24, &mut r).unwrap();
        layer.attention.output.weight = Param::zeros(&[6, 6]);
        layer.ffn_out.weight = Param::zeros(&[6, 24]);
        let xs: Vec<f64> = (0..30).map(|i| (i as f64 * 0.71).cos()).collect();
        let mut g = Graph::new();
        let x = g.constant(&[5, 6], xs.clone()).unwrap();
        let y = layer.forward(&mut g, x).unwrap();
        let y = layer.forward(&mut g, y).unwrap();
        assert_eq!(g.shape(y), &[5, 6]);
        assert_eq!(g.value(y), xs.as_slice());
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 6).unwrap();
        assert_eq!(&pe[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe[6] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[7] - 1f64.cos()).abs() < 1e-15);
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(positional_encoding(3, 5), Err(Error::Config(_))));
    }

    #[test]
    fn mean_pool_cases() {
        let mut g = Graph::new();
        let one = g.constant(&[1, 3], vec![1., 2., 3.]).unwrap();
        let p = global_mean_pool(&mut g, one).unwrap();
        assert_eq!(g.value(p), &[1., 2., 3.]);
        let c = g.constant(&[4, 2], vec![2.5; 8]).unwrap();
        let p = global_mean_pool(&mut g, c).unwrap();
        assert_eq!(g.value(p), &[2.5, 2.5]);
        let s = g.constant(&[2, 2], vec![0., 2., 2., 0.]).unwrap();
        let p = global_mean_pool(&mut g, s).unwrap();
        assert_eq!(g.value(p), &[1., 1.]);
        let e = g.constant(&[0, 2], vec![]).unwrap();
        assert!(matches!(global_mean_pool(&mut g, e), Err(Error::Empty(_))));
    }
}
