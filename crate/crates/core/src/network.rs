//! Model blocks: the bidirectional LSTM acoustic encoder, the token softmax
//! head, the proxy sentiment classifier and the attention-based emotion
//! regressor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Array, Reduction, Tape, Var, LOG_ZERO};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::params::{Bound, ParameterStore};
use crate::tokens::NUM_TOKENS;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const TOKEN_PREFIX: &str = "token.";
pub const SENTIMENT_PREFIX: &str = "sentiment.";
pub const REGRESSOR_PREFIX: &str = "regressor.";

/// Sentiment classes in their fixed order.
pub const SENTIMENT_CLASSES: [&str; 3] = ["negative", "neutral", "positive"];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    /// Units per direction.
    pub hidden: usize,
    pub input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 5,
            hidden: 192,
            input_dim: 120,
        }
    }
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentimentHeadConfig {
    pub summarizer_hidden: usize,
    pub classes: usize,
}

impl Default for SentimentHeadConfig {
    fn default() -> Self {
        SentimentHeadConfig {
            summarizer_hidden: 192,
            classes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorConfig {
    pub conv_filters: [usize; 2],
    pub conv_strides: [usize; 2],
    /// Output channels of both convolutions.
    pub conv_channels: usize,
    pub attn_heads: usize,
    pub attn_dim: usize,
    pub leaky_alpha: f64,
    pub output_dim: usize,
    /// Added to the variance inside the per-example normalization.
    pub norm_eps: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            conv_filters: [6, 3],
            conv_strides: [3, 2],
            conv_channels: 64,
            attn_heads: 4,
            attn_dim: 64,
            leaky_alpha: 0.3,
            output_dim: 3,
            norm_eps: 1e-5,
        }
    }
}

impl RegressorConfig {
    /// Shortest contiguous encoding both convolutions accept.
    pub fn min_length(&self) -> usize {
        let [k1, k2] = self.conv_filters;
        let [s1, _] = self.conv_strides;
        k1 + (k2 - 1) * s1
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub sentiment: SentimentHeadConfig,
    pub regressor: RegressorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let e = &self.encoder;
        if e.layers == 0 || e.hidden == 0 || e.input_dim == 0 {
            return bad(format!("encoder dims must be positive: {e:?}"));
        }
        if self.sentiment.classes != 3 || self.sentiment.summarizer_hidden == 0 {
            return bad(format!("sentiment head needs 3 classes: {:?}", self.sentiment));
        }
        let r = &self.regressor;
        for i in 0..2 {
            if r.conv_strides[i] == 0 || r.conv_filters[i] < r.conv_strides[i] {
                return bad(format!("conv stage {i}: filter must be >= stride >= 1"));
            }
        }
        if r.attn_heads == 0 || r.attn_dim % r.attn_heads != 0 {
            return bad(format!("attn_dim {} not divisible by {} heads", r.attn_dim, r.attn_heads));
        }
        if !(r.leaky_alpha > 0.0 && r.leaky_alpha < 1.0) {
            return bad("leaky_alpha must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// Encoder output: one row per input frame; padding rows are zero.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub seq: Var,
    pub mask: Vec<bool>,
}

impl Encoding {
    pub fn valid_rows(&self) -> Vec<usize> {
        valid_rows(&self.mask)
    }
}

fn valid_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

struct LstmWeights {
    w_ih: Var,
    w_hh: Var,
    b: Var,
}

impl LstmWeights {
    fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(LstmWeights {
            w_ih: p.var(&format!("{prefix}.w_ih"))?,
            w_hh: p.var(&format!("{prefix}.w_hh"))?,
            b: p.var(&format!("{prefix}.b"))?,
        })
    }
}

/// Runs one LSTM direction over the rows of `x` (`L × D`). Gate order in the
/// fused weights is input, forget, cell, output. Returns the `L × H` hidden
/// states in input order and the final hidden state.
fn lstm_pass(tape: &mut Tape, x: Var, w: &LstmWeights, hidden: usize, reverse: bool) -> Result<(Var, Var)> {
    let len = tape.shape(x)[0];
    let xw = tape.matmul(x, w.w_ih)?;
    let xw = tape.add_row(xw, w.b)?;
    let mut h = tape.constant(Array::zeros(&[1, hidden]));
    let mut c = tape.constant(Array::zeros(&[1, hidden]));
    let mut outputs = vec![h; len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for t in order {
        let step_in = tape.slice(xw, 0, t..t + 1)?;
        let rec = tape.matmul(h, w.w_hh)?;
        let z = tape.add(step_in, rec)?;
        let gates = tape.sigmoid(z)?;
        let i = tape.slice(gates, 1, 0..hidden)?;
        let f = tape.slice(gates, 1, hidden..2 * hidden)?;
        let o = tape.slice(gates, 1, 3 * hidden..4 * hidden)?;
        let g = tape.slice(z, 1, 2 * hidden..3 * hidden)?;
        let g = tape.tanh(g)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(o, tc)?;
        outputs[t] = h;
    }
    let seq = tape.concat(&outputs, 0)?;
    Ok((seq, h))
}

pub fn encoder_forward(
    tape: &mut Tape,
    params: &Bound,
    feats: &FeatureMatrix,
    cfg: &EncoderConfig,
) -> Result<Encoding> {
    if feats.n_bins() != cfg.input_dim {
        return Err(Error::Dimension(format!(
            "encoder expects {} input features, got {}",
            cfg.input_dim,
            feats.n_bins()
        )));
    }
    let rows = valid_rows(feats.mask());
    let data = rows.iter().flat_map(|&t| feats.frame(t).iter().copied()).collect();
    let mut x = tape.constant(Array::matrix(rows.len(), cfg.input_dim, data)?);
    for layer in 0..cfg.layers {
        let fwd = LstmWeights::bind(params, &format!("encoder.l{layer}.fwd"))?;
        let bwd = LstmWeights::bind(params, &format!("encoder.l{layer}.bwd"))?;
        let (hf, _) = lstm_pass(tape, x, &fwd, cfg.hidden, false)?;
        let (hb, _) = lstm_pass(tape, x, &bwd, cfg.hidden, true)?;
        x = tape.concat(&[hf, hb], 1)?;
    }
    let seq = tape.scatter_rows(x, &rows, feats.n_frames())?;
    Ok(Encoding {
        seq,
        mask: feats.mask().to_vec(),
    })
}

/// Per-frame log-probabilities over the token inventory (`T × 29`).
pub fn token_head_forward(tape: &mut Tape, params: &Bound, enc: &Encoding) -> Result<Var> {
    let logits = tape.matmul(enc.seq, params.var("token.w")?)?;
    let logits = tape.add_row(logits, params.var("token.b")?)?;
    tape.log_softmax(logits, 1)
}

/// Class log-probabilities (`1 × 3`) from a unidirectional LSTM summary of
/// the valid encoder frames.
pub fn sentiment_head_forward(
    tape: &mut Tape,
    params: &Bound,
    enc: &Encoding,
    cfg: &SentimentHeadConfig,
) -> Result<Var> {
    let rows = enc.valid_rows();
    if rows.is_empty() {
        return Err(Error::EmptySequence);
    }
    let x = tape.gather_rows(enc.seq, &rows)?;
    let w = LstmWeights::bind(params, "sentiment.lstm")?;
    let (_, last) = lstm_pass(tape, x, &w, cfg.summarizer_hidden, false)?;
    let logits = tape.matmul(last, params.var("sentiment.out.w")?)?;
    let logits = tape.add_row(logits, params.var("sentiment.out.b")?)?;
    tape.log_softmax(logits, 1)
}

pub struct RegressorOutput {
    /// `1 × 3` activation/valence/dominance prediction.
    pub avd: Var,
    /// `1 × 128` pooled mean and variance features.
    pub pooled: Var,
    /// Attention input after the conv block and projection.
    pub attention_input: Var,
    /// Per-head `L × L` attention weights.
    pub attention: Vec<Var>,
    /// Validity of the attention positions.
    pub mask: Vec<bool>,
}

/// Output length of a valid (unpadded) convolution.
pub fn conv_output_len(len: usize, filter: usize, stride: usize) -> usize {
    if len < filter {
        0
    } else {
        (len - filter) / stride + 1
    }
}

fn row_mask_constant(tape: &mut Tape, mask: &[bool], cols: usize) -> Result<Var> {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, cols))
        .collect();
    Ok(tape.constant(Array::matrix(mask.len(), cols, data)?))
}

/// Masked convolution stage: valid convolution, per-example normalization
/// over valid positions, LeakyReLU, padding rows zeroed. An output position
/// is valid iff every input position under its window is.
fn conv_stage(
    tape: &mut Tape,
    params: &Bound,
    x: Var,
    mask: &[bool],
    stage: usize,
    cfg: &RegressorConfig,
) -> Result<(Var, Vec<bool>)> {
    let (k, s) = (cfg.conv_filters[stage], cfg.conv_strides[stage]);
    let out_len = conv_output_len(mask.len(), k, s);
    let out_mask: Vec<bool> = (0..out_len).map(|t| mask[t * s..t * s + k].iter().all(|&m| m)).collect();
    if !out_mask.iter().any(|&m| m) {
        return Err(Error::SequenceTooShort(mask.iter().filter(|&&m| m).count()));
    }
    let windows = tape.unfold(x, k, s)?;
    let y = tape.matmul(windows, params.var(&format!("regressor.conv{}.w", stage + 1))?)?;
    let y = tape.add_row(y, params.var(&format!("regressor.conv{}.b", stage + 1))?)?;
    let mean = tape.masked_reduce(y, 0, &out_mask, Reduction::Mean)?;
    let neg_mean = tape.scale(mean, -1.0)?;
    let centered = tape.add_row(y, neg_mean)?;
    let var = tape.masked_reduce(centered, 0, &out_mask, Reduction::Var)?;
    let var = tape.add_const(var, cfg.norm_eps)?;
    let std = tape.sqrt(var)?;
    let one = tape.constant(Array::scalar(1.0));
    let inv = tape.div(one, std)?;
    let normed = tape.mul_row(centered, inv)?;
    let act = tape.leaky_relu(normed, cfg.leaky_alpha)?;
    let keep = row_mask_constant(tape, &out_mask, cfg.conv_channels)?;
    Ok((tape.mul(act, keep)?, out_mask))
}

fn linear(tape: &mut Tape, params: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, params.var(&format!("{prefix}.w"))?)?;
    tape.add_row(y, params.var(&format!("{prefix}.b"))?)
}

pub fn regressor_forward(
    tape: &mut Tape,
    params: &Bound,
    enc: &Encoding,
    cfg: &RegressorConfig,
) -> Result<RegressorOutput> {
    let valid = enc.mask.iter().filter(|&&m| m).count();
    if valid < cfg.min_length() {
        return Err(Error::SequenceTooShort(valid));
    }
    let (h1, m1) = conv_stage(tape, params, enc.seq, &enc.mask, 0, cfg)?;
    let (h2, mask) = conv_stage(tape, params, h1, &m1, 1, cfg)?;
    let x = linear(tape, params, h2, "regressor.proj")?;

    let len = mask.len();
    let q = linear(tape, params, x, "regressor.attn.q")?;
    let k = linear(tape, params, x, "regressor.attn.k")?;
    let v = linear(tape, params, x, "regressor.attn.v")?;
    let key_bias = Array::row_vector(mask.iter().map(|&m| if m { 0.0 } else { LOG_ZERO }).collect());
    let key_bias = tape.constant(key_bias);
    let query_keep = row_mask_constant(tape, &mask, len)?;
    let head_dim = cfg.attn_dim / cfg.attn_heads;
    let mut heads = Vec::with_capacity(cfg.attn_heads);
    let mut attention = Vec::with_capacity(cfg.attn_heads);
    for h in 0..cfg.attn_heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let qh = tape.slice(q, 1, cols.clone())?;
        let kh = tape.slice(k, 1, cols.clone())?;
        let vh = tape.slice(v, 1, cols)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
        let scores = tape.add_row(scores, key_bias)?;
        let weights = tape.softmax(scores, 1)?;
        let weights = tape.mul(weights, query_keep)?;
        attention.push(weights);
        heads.push(tape.matmul(weights, vh)?);
    }
    let joined = tape.concat(&heads, 1)?;
    let attended = linear(tape, params, joined, "regressor.attn.o")?;

    let mean = tape.masked_reduce(attended, 0, &mask, Reduction::Mean)?;
    let var = tape.masked_reduce(attended, 0, &mask, Reduction::Var)?;
    let pooled = tape.concat(&[mean, var], 1)?;
    let avd = linear(tape, params, pooled, "regressor.out")?;
    Ok(RegressorOutput {
        avd,
        pooled,
        attention_input: x,
        attention,
        mask,
    })
}

enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Orthogonal { hidden: usize },
    LstmBias { hidden: usize },
    Zeros,
}

fn parameter_plan(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut plan = Vec::new();
    let lstm = |plan: &mut Vec<_>, prefix: String, input: usize, hidden: usize| {
        plan.push((
            format!("{prefix}.w_ih"),
            vec![input, 4 * hidden],
            Init::Xavier {
                fan_in: input,
                fan_out: 4 * hidden,
            },
        ));
        plan.push((format!("{prefix}.w_hh"), vec![hidden, 4 * hidden], Init::Orthogonal { hidden }));
        plan.push((format!("{prefix}.b"), vec![1, 4 * hidden], Init::LstmBias { hidden }));
    };
    let linear = |plan: &mut Vec<_>, prefix: &str, fan_in: usize, fan_out: usize| {
        plan.push((format!("{prefix}.w"), vec![fan_in, fan_out], Init::Xavier { fan_in, fan_out }));
        plan.push((format!("{prefix}.b"), vec![1, fan_out], Init::Zeros));
    };

    let e = &cfg.encoder;
    for layer in 0..e.layers {
        let input = if layer == 0 { e.input_dim } else { 2 * e.hidden };
        for dir in ["fwd", "bwd"] {
            lstm(&mut plan, format!("encoder.l{layer}.{dir}"), input, e.hidden);
        }
    }
    linear(&mut plan, "token", 2 * e.hidden, NUM_TOKENS);
    let s = &cfg.sentiment;
    lstm(&mut plan, "sentiment.lstm".into(), 2 * e.hidden, s.summarizer_hidden);
    linear(&mut plan, "sentiment.out", s.summarizer_hidden, s.classes);

    let r = &cfg.regressor;
    let mut channels = 2 * e.hidden;
    for stage in 0..2 {
        let k = r.conv_filters[stage];
        let name = format!("regressor.conv{}", stage + 1);
        plan.push((
            format!("{name}.w"),
            vec![k * channels, r.conv_channels],
            Init::Xavier {
                fan_in: k * channels,
                fan_out: k * r.conv_channels,
            },
        ));
        plan.push((format!("{name}.b"), vec![1, r.conv_channels], Init::Zeros));
        channels = r.conv_channels;
    }
    linear(&mut plan, "regressor.proj", r.conv_channels, r.attn_dim);
    for part in ["q", "k", "v", "o"] {
        linear(&mut plan, &format!("regressor.attn.{part}"), r.attn_dim, r.attn_dim);
    }
    linear(&mut plan, "regressor.out", 2 * r.attn_dim, r.output_dim);
    plan
}

/// Orthonormal `n × n` matrix from modified Gram–Schmidt on a Gaussian draw.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for i in 0..j {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[i]) {
                    *x -= dot * y;
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            // row-major with the orthonormal vectors as columns
            return (0..n).flat_map(|r| cols.iter().map(move |c| c[r])).collect();
        }
    }
}

pub fn init_parameters(seed: u64, cfg: &ModelConfig) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for (name, shape, init) in parameter_plan(cfg) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Xavier { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            }
            Init::Orthogonal { hidden } => {
                let blocks: Vec<Vec<f64>> = (0..4).map(|_| orthogonal(hidden, &mut rng)).collect();
                (0..hidden)
                    .flat_map(|r| blocks.iter().flat_map(move |b| b[r * hidden..(r + 1) * hidden].to_vec()))
                    .collect()
            }
            Init::LstmBias { hidden } => {
                let mut b = vec![0.0; n];
                b[hidden..2 * hidden].fill(1.0);
                b
            }
            Init::Zeros => vec![0.0; n],
        };
        store.insert(name, Array::new(shape, data)?)?;
    }
    Ok(store)
}
