//! Neural building blocks recorded on a [`Graph`].
//!
//! Each layer stores only parameter paths and dimensions; the tensors
//! themselves live in a [`ParameterSet`].

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::init_uniform;
use super::{Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};

/// Affine map `x W (+ b)` over row vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn register(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = format!("{prefix}/weight");
        ps.insert(&weight, init_uniform(rng, &[input_dim, output_dim], input_dim))?;
        let bias = if with_bias {
            let name = format!("{prefix}/bias");
            ps.insert(&name, init_uniform(rng, &[1, output_dim], input_dim))?;
            Some(name)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            input_dim,
            output_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.input_dim {
            return Err(Error::dim(format!(
                "`{}` expects width {}, got {cols}",
                self.weight, self.input_dim
            )));
        }
        let w = g.param(&self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two affine maps with a ReLU between them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn register(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            hidden: Linear::register(ps, rng, &format!("{prefix}/hidden"), input_dim, hidden_dim, true)?,
            output: Linear::register(ps, rng, &format!("{prefix}/output"), hidden_dim, output_dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        self.output.forward(g, h)
    }
}

/// Recurrent state of an [`LstmCell`] on one tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Standard LSTM cell with gate order (input, forget, candidate, output).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmCell {
    pub weight: String,
    pub bias: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn register(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        let weight = format!("{prefix}/weight");
        let bias = format!("{prefix}/bias");
        let fan_in = input_dim + hidden_dim;
        ps.insert(&weight, init_uniform(rng, &[fan_in, 4 * hidden_dim], fan_in))?;
        ps.insert(&bias, init_uniform(rng, &[1, 4 * hidden_dim], fan_in))?;
        Ok(LstmCell {
            weight,
            bias,
            input_dim,
            hidden_dim,
        })
    }

    pub fn zero_state(&self, g: &mut Graph) -> Result<LstmState> {
        let h = g.constant(Tensor::zeros(&[1, self.hidden_dim]))?;
        let c = g.constant(Tensor::zeros(&[1, self.hidden_dim]))?;
        Ok(LstmState { h, c })
    }

    pub fn state_from(&self, g: &mut Graph, h: &Tensor, c: &Tensor) -> Result<LstmState> {
        if h.numel() != self.hidden_dim || c.numel() != self.hidden_dim {
            return Err(Error::dim(format!(
                "lstm state of width {}/{} for hidden {}",
                h.numel(),
                c.numel(),
                self.hidden_dim
            )));
        }
        let h = g.constant(Tensor::row(h.data().to_vec()))?;
        let c = g.constant(Tensor::row(c.data().to_vec()))?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, g: &mut Graph, x: Var, prev: LstmState) -> Result<LstmState> {
        let (xr, xc) = (g.value(x).rows(), g.value(x).cols());
        if xr != 1 || xc != self.input_dim {
            return Err(Error::dim(format!(
                "lstm input {xr}x{xc}, expected 1x{}",
                self.input_dim
            )));
        }
        for v in [prev.h, prev.c] {
            if g.value(v).numel() != self.hidden_dim {
                return Err(Error::dim(format!(
                    "lstm state width {}, expected {}",
                    g.value(v).numel(),
                    self.hidden_dim
                )));
            }
        }
        let hd = self.hidden_dim;
        let xh = g.concat_cols(&[x, prev.h])?;
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let z = g.matmul(xh, w)?;
        let z = g.add(z, b)?;
        let i = g.slice_cols(z, 0, hd)?;
        let f = g.slice_cols(z, hd, hd)?;
        let cand = g.slice_cols(z, 2 * hd, hd)?;
        let o = g.slice_cols(z, 3 * hd, hd)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, prev.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn register(ps: &mut ParameterSet, prefix: &str, dim: usize) -> Result<Self> {
        let gain = format!("{prefix}/gain");
        let bias = format!("{prefix}/bias");
        let mut ones = Tensor::zeros(&[1, dim]);
        ones.fill(1.0);
        ps.insert(&gain, ones)?;
        ps.insert(&bias, Tensor::zeros(&[1, dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let rows = g.value(n).rows();
        let gain = g.param(&self.gain)?;
        let gain = if rows == 1 {
            gain
        } else {
            g.select_rows(gain, &vec![0; rows])?
        };
        let scaled = g.mul(n, gain)?;
        let b = g.param(&self.bias)?;
        g.add(scaled, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AttentionHead {
    query: Linear,
    key: Linear,
    value: Linear,
}

/// Post-norm transformer encoder layer: multi-head self-attention and a
/// position-wise feed-forward block, each wrapped in residual + layer norm.
/// No positional information is added here.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerEncoderLayer {
    heads: Vec<AttentionHead>,
    out: Linear,
    norm_attn: LayerNorm,
    ffn: FeedForward,
    norm_ffn: LayerNorm,
    pub model_dim: usize,
}

/// Output of one encoder layer together with per-head attention weights.
pub struct EncoderLayerOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

impl TransformerEncoderLayer {
    pub fn register(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        model_dim: usize,
        num_heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        if num_heads == 0 || model_dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {model_dim} not divisible into {num_heads} heads"
            )));
        }
        let head_dim = model_dim / num_heads;
        let mut heads = Vec::with_capacity(num_heads);
        for h in 0..num_heads {
            let p = format!("{prefix}/attn/head{h}");
            heads.push(AttentionHead {
                query: Linear::register(ps, rng, &format!("{p}/query"), model_dim, head_dim, true)?,
                key: Linear::register(ps, rng, &format!("{p}/key"), model_dim, head_dim, true)?,
                value: Linear::register(ps, rng, &format!("{p}/value"), model_dim, head_dim, true)?,
            });
        }
        Ok(TransformerEncoderLayer {
            heads,
            out: Linear::register(ps, rng, &format!("{prefix}/attn/out"), model_dim, model_dim, true)?,
            norm_attn: LayerNorm::register(ps, &format!("{prefix}/norm_attn"), model_dim)?,
            ffn: FeedForward::register(ps, rng, &format!("{prefix}/ffn"), model_dim, ffn_dim, model_dim)?,
            norm_ffn: LayerNorm::register(ps, &format!("{prefix}/norm_ffn"), model_dim)?,
            model_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, seq)?.output)
    }

    /// Stacks `rows` into a sequence and encodes it.
    pub fn forward_rows(&self, g: &mut Graph, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("encoder layer over an empty sequence".into()));
        }
        let seq = g.concat_rows(rows)?;
        self.forward(g, seq)
    }

    pub fn forward_with_attention(&self, g: &mut Graph, seq: Var) -> Result<EncoderLayerOutput> {
        let (n, d) = (g.value(seq).rows(), g.value(seq).cols());
        if n == 0 {
            return Err(Error::EmptyInput("encoder layer over an empty sequence".into()));
        }
        if d != self.model_dim {
            return Err(Error::dim(format!("sequence width {d}, layer width {}", self.model_dim)));
        }
        let head_dim = self.model_dim / self.heads.len();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.query.forward(g, seq)?;
            let k = head.key.forward(g, seq)?;
            let v = head.value.forward(g, seq)?;
            let scores = g.matmul_t(q, k)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores)?;
            contexts.push(g.matmul(weights, v)?);
            attention.push(weights);
        }
        let merged = if contexts.len() == 1 {
            contexts[0]
        } else {
            g.concat_cols(&contexts)?
        };
        let attended = self.out.forward(g, merged)?;
        let x = g.add(seq, attended)?;
        let x = self.norm_attn.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let y = g.add(x, f)?;
        let output = self.norm_ffn.forward(g, y)?;
        Ok(EncoderLayerOutput { output, attention })
    }
}

/// Stack of encoder layers sharing one width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerEncoder {
    pub layers: Vec<TransformerEncoderLayer>,
}

impl TransformerEncoder {
    pub fn register(
        ps: &mut ParameterSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        num_layers: usize,
        model_dim: usize,
        num_heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| TransformerEncoderLayer::register(ps, rng, &format!("{prefix}/layer{i}"), model_dim, num_heads, ffn_dim))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder { layers })
    }

    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        let mut x = seq;
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn zero_all(ps: &mut ParameterSet) {
        let names: Vec<String> = ps.names().cloned().collect();
        for n in names {
            ps.get_mut(&n).unwrap().fill(0.0);
        }
    }

    #[test]
    fn lstm_zero_params_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::new(1);
        let cell = LstmCell::register(&mut ps, &mut rng, "lstm", 3, 4).unwrap();
        zero_all(&mut ps);
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::row(vec![0.3, -1.2, 2.0])).unwrap();
        let s0 = cell.zero_state(&mut g).unwrap();
        let s1 = cell.step(&mut g, x, s0).unwrap();
        assert!(g.value(s1.h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(s1.c).data().iter().all(|&v| v == 0.0));

        let v = vec![1.0, -2.0, 0.5, 4.0];
        let prev = cell
            .state_from(&mut g, &Tensor::row(vec![0.0; 4]), &Tensor::row(v.clone()))
            .unwrap();
        let s2 = cell.step(&mut g, x, prev).unwrap();
        let halves: Vec<f64> = v.iter().map(|x| 0.5 * x).collect();
        assert_eq!(g.value(s2.c).data(), halves.as_slice());
    }

    #[test]
    fn lstm_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::new(1);
        let cell = LstmCell::register(&mut ps, &mut rng, "lstm", 3, 4).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::row(vec![0.3, -1.2])).unwrap();
        let s0 = cell.zero_state(&mut g).unwrap();
        assert!(matches!(cell.step(&mut g, x, s0), Err(Error::Dimension(_))));
    }

    #[test]
    fn encoder_layer_shape_and_attention_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParameterSet::new(3);
        let layer = TransformerEncoderLayer::register(&mut ps, &mut rng, "enc", 128, 4, 256).unwrap();
        let mut g = Graph::new(&ps);
        let seq = super::super::params::init_range(&mut rng, &[5, 128], 1.0);
        let x = g.constant(seq).unwrap();
        let out = layer.forward_with_attention(&mut g, x).unwrap();
        assert_eq!(g.value(out.output).shape(), &[5, 128]);
        for w in out.attention {
            let t = g.value(w);
            for r in 0..t.rows() {
                let s: f64 = t.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn encoder_layer_single_position() {
        // With one position the attention weight is exactly 1, so the layer
        // reduces to norm(x + out(value(x))) followed by the FFN block.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParameterSet::new(4);
        let layer = TransformerEncoderLayer::register(&mut ps, &mut rng, "enc", 8, 1, 16).unwrap();
        let x0 = super::super::params::init_range(&mut rng, &[1, 8], 1.0);
        let mut g = Graph::new(&ps);
        let x = g.constant(x0.clone()).unwrap();
        let out = layer.forward_with_attention(&mut g, x).unwrap();
        assert_eq!(g.value(out.attention[0]).data(), &[1.0]);

        // hand evaluation on plain slices
        let p = |n: &str| ps.get(n).unwrap().clone();
        let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..w.cols())
                .map(|j| b.data()[j] + (0..w.rows()).map(|i| x[i] * w.at(i, j)).sum::<f64>())
                .collect()
        };
        let norm = |x: &[f64], gain: &Tensor, bias: &Tensor| -> Vec<f64> {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
            x.iter()
                .enumerate()
                .map(|(i, a)| (a - m) / (v + 1e-5).sqrt() * gain.data()[i] + bias.data()[i])
                .collect()
        };
        let v = affine(x0.data(), &p("enc/attn/head0/value/weight"), &p("enc/attn/head0/value/bias"));
        let o = affine(&v, &p("enc/attn/out/weight"), &p("enc/attn/out/bias"));
        let r: Vec<f64> = x0.data().iter().zip(&o).map(|(a, b)| a + b).collect();
        let x1 = norm(&r, &p("enc/norm_attn/gain"), &p("enc/norm_attn/bias"));
        let h: Vec<f64> = affine(&x1, &p("enc/ffn/hidden/weight"), &p("enc/ffn/hidden/bias"))
            .into_iter()
            .map(|a| a.max(0.0))
            .collect();
        let f = affine(&h, &p("enc/ffn/output/weight"), &p("enc/ffn/output/bias"));
        let r2: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
        let expected = norm(&r2, &p("enc/norm_ffn/gain"), &p("enc/norm_ffn/bias"));
        for (a, b) in g.value(out.output).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_layer_rejects_empty_and_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParameterSet::new(5);
        let layer = TransformerEncoderLayer::register(&mut ps, &mut rng, "enc", 8, 2, 16).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::zeros(&[2, 6])).unwrap();
        assert!(matches!(layer.forward(&mut g, x), Err(Error::Dimension(_))));
    }
}
