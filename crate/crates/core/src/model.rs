//! GPT-2 style decoder: learned positions, pre-norm blocks, GELU MLP and an
//! output projection tied to the token embedding.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, matmul, matmul_backward_input, matmul_backward_weights, softmax_in_place};
use crate::prompt::PromptParams;
use crate::{Error, Result};

/// Floating point type the model can be evaluated in. Training runs in
/// `f32`; gradient checks run the same code in `f64`.
pub trait Scalar: Float + FromPrimitive + Sum + Default + Debug + Send + Sync + 'static {}

impl<T> Scalar for T where T: Float + FromPrimitive + Sum + Default + Debug + Send + Sync + 'static {}

#[inline]
pub(crate) fn cst<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("constant representable")
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// 24 layers, 1024 hidden, 16 heads over a 42384-entry vocabulary.
    pub fn paper() -> Self {
        ModelConfig {
            num_layers: 24,
            hidden_size: 1024,
            num_heads: 16,
            ffn_size: 4096,
            max_positions: 1024,
            vocab_size: 42384,
            dropout: 0.1,
        }
    }

    /// Laptop-sized preset: 2 layers, 64 hidden, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            max_positions: 128,
            vocab_size,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in checkpoint order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden_size, self.ffn_size);
        let mut shapes = vec![
            ("wte".to_string(), vec![self.vocab_size, h]),
            ("wpe".to_string(), vec![self.max_positions, h]),
        ];
        for i in 0..self.num_layers {
            for (name, shape) in LayerParams::<f32>::field_shapes(h, f) {
                shapes.push((format!("h.{i}.{name}"), shape));
            }
        }
        shapes.push(("ln_f.g".into(), vec![h]));
        shapes.push(("ln_f.b".into(), vec![h]));
        shapes
    }
}

/// Closed-form parameter count. The output projection is tied to `wte`
/// and contributes nothing extra.
pub fn count_params(config: &ModelConfig) -> usize {
    let (h, f) = (config.hidden_size, config.ffn_size);
    let embeddings = config.vocab_size * h + config.max_positions * h;
    let attention = 4 * (h * h + h);
    let mlp = h * f + f + f * h + h;
    let norms = 4 * h;
    embeddings + config.num_layers * (attention + mlp + norms) + 2 * h
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Vec<F>,
    pub ln1_b: Vec<F>,
    pub wq: Vec<F>,
    pub bq: Vec<F>,
    pub wk: Vec<F>,
    pub bk: Vec<F>,
    pub wv: Vec<F>,
    pub bv: Vec<F>,
    pub wo: Vec<F>,
    pub bo: Vec<F>,
    pub ln2_g: Vec<F>,
    pub ln2_b: Vec<F>,
    pub w_fc: Vec<F>,
    pub b_fc: Vec<F>,
    pub w_proj: Vec<F>,
    pub b_proj: Vec<F>,
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    Normal,
}

impl<F: Scalar> LayerParams<F> {
    fn field_shapes(h: usize, f: usize) -> [(&'static str, Vec<usize>); 16] {
        [
            ("ln_1.g", vec![h]),
            ("ln_1.b", vec![h]),
            ("attn.q.w", vec![h, h]),
            ("attn.q.b", vec![h]),
            ("attn.k.w", vec![h, h]),
            ("attn.k.b", vec![h]),
            ("attn.v.w", vec![h, h]),
            ("attn.v.b", vec![h]),
            ("attn.out.w", vec![h, h]),
            ("attn.out.b", vec![h]),
            ("ln_2.g", vec![h]),
            ("ln_2.b", vec![h]),
            ("mlp.fc.w", vec![h, f]),
            ("mlp.fc.b", vec![f]),
            ("mlp.proj.w", vec![f, h]),
            ("mlp.proj.b", vec![h]),
        ]
    }

    const INIT: [Init; 16] = [
        Init::One,
        Init::Zero,
        Init::Normal,
        Init::Zero,
        Init::Normal,
        Init::Zero,
        Init::Normal,
        Init::Zero,
        Init::Normal,
        Init::Zero,
        Init::One,
        Init::Zero,
        Init::Normal,
        Init::Zero,
        Init::Normal,
        Init::Zero,
    ];

    fn from_fields(mut fields: Vec<Vec<F>>) -> Self {
        assert_eq!(fields.len(), 16);
        let mut next = || fields.remove(0);
        LayerParams {
            ln1_g: next(),
            ln1_b: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_g: next(),
            ln2_b: next(),
            w_fc: next(),
            b_fc: next(),
            w_proj: next(),
            b_proj: next(),
        }
    }

    fn fields(&self) -> [&Vec<F>; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Vec<F>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub wte: Vec<F>,
    pub wpe: Vec<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Vec<F>,
    pub lnf_b: Vec<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut sample = |len: usize, init: Init| -> Vec<F> {
            match init {
                Init::Zero => vec![F::zero(); len],
                Init::One => vec![F::one(); len],
                Init::Normal => (0..len).map(|_| cst(normal.sample(&mut rng))).collect(),
            }
        };
        let (h, f) = (config.hidden_size, config.ffn_size);
        let wte = sample(config.vocab_size * h, Init::Normal);
        let wpe = sample(config.max_positions * h, Init::Normal);
        let layers = (0..config.num_layers)
            .map(|_| {
                let fields = LayerParams::<F>::field_shapes(h, f)
                    .iter()
                    .zip(LayerParams::<F>::INIT)
                    .map(|((_, shape), init)| sample(shape.iter().product(), init))
                    .collect();
                LayerParams::from_fields(fields)
            })
            .collect();
        Ok(ModelParams {
            config,
            wte,
            wpe,
            layers,
            lnf_g: vec![F::one(); h],
            lnf_b: vec![F::zero(); h],
        })
    }

    pub fn zeros(config: ModelConfig) -> Self {
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .map(|(_, shape)| vec![F::zero(); shape.iter().product()])
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Rebuilds parameters from tensors listed in [`ModelConfig::tensor_shapes`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Vec<F>>) -> Self {
        let mut it = tensors.into_iter();
        let wte = it.next().expect("wte");
        let wpe = it.next().expect("wpe");
        let layers = (0..config.num_layers)
            .map(|_| LayerParams::from_fields(it.by_ref().take(16).collect()))
            .collect();
        let lnf_g = it.next().expect("ln_f.g");
        let lnf_b = it.next().expect("ln_f.b");
        ModelParams {
            config,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
        }
    }

    pub fn tensors(&self) -> Vec<&Vec<F>> {
        let mut out = vec![&self.wte, &self.wpe];
        for layer in &self.layers {
            out.extend(layer.fields());
        }
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let tensors = self
            .tensors()
            .into_iter()
            .map(|t| t.iter().map(|v| cst::<G>(v.to_f64().expect("finite"))).collect())
            .collect();
        ModelParams::from_tensors(self.config, tensors)
    }
}

/// Model parameters together with an optional learned prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub model: ModelParams<F>,
    pub prompt: Option<PromptParams<F>>,
}

impl<F: Scalar> Weights<F> {
    pub fn new(model: ModelParams<F>) -> Self {
        Weights { model, prompt: None }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn zeros_like(&self) -> Self {
        Weights {
            model: ModelParams::zeros(self.model.config),
            prompt: self.prompt.as_ref().map(PromptParams::zeros_like),
        }
    }

    pub fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = self.model.config.tensor_shapes();
        if let Some(p) = &self.prompt {
            shapes.push((PromptParams::<F>::TENSOR_NAME.to_string(), vec![p.length, p.hidden]));
        }
        shapes
    }

    pub fn tensors(&self) -> Vec<&Vec<F>> {
        let mut out = self.model.tensors();
        if let Some(p) = &self.prompt {
            out.push(&p.embeddings);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut out = self.model.tensors_mut();
        if let Some(p) = &mut self.prompt {
            out.push(&mut p.embeddings);
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> Weights<G> {
        Weights {
            model: self.model.cast(),
            prompt: self.prompt.as_ref().map(PromptParams::cast),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// One input position: a vocabulary token or a learned prompt vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Item {
    Token(u32),
    Virtual(usize),
}

pub fn token_items(ids: &[u32]) -> Vec<Item> {
    ids.iter().copied().map(Item::Token).collect()
}

#[derive(Debug, Clone)]
struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

fn layer_norm<F: Scalar>(x: &[F], g: &[F], b: &[F], rows: usize, h: usize) -> (Vec<F>, LnCache<F>) {
    let mut out = vec![F::zero(); rows * h];
    let mut xhat = vec![F::zero(); rows * h];
    let mut rstd = vec![F::zero(); rows];
    let hf = cst::<F>(h as f64);
    for r in 0..rows {
        let row = &x[r * h..(r + 1) * h];
        let mean = row.iter().copied().sum::<F>() / hf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / hf;
        let rs = F::one() / (var + cst(LN_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..h {
            let n = (row[i] - mean) * rs;
            xhat[r * h + i] = n;
            out[r * h + i] = n * g[i] + b[i];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    cache: &LnCache<F>,
    g: &[F],
    dg: &mut [F],
    db: &mut [F],
    dx: &mut [F],
    rows: usize,
    h: usize,
) {
    let hf = cst::<F>(h as f64);
    let mut dxhat = vec![F::zero(); h];
    for r in 0..rows {
        let dyr = &dy[r * h..(r + 1) * h];
        let xh = &cache.xhat[r * h..(r + 1) * h];
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for i in 0..h {
            dg[i] = dg[i] + dyr[i] * xh[i];
            db[i] = db[i] + dyr[i];
            dxhat[i] = dyr[i] * g[i];
            mean_d = mean_d + dxhat[i];
            mean_dx = mean_dx + dxhat[i] * xh[i];
        }
        mean_d = mean_d / hf;
        mean_dx = mean_dx / hf;
        let rs = cache.rstd[r];
        for i in 0..h {
            dx[r * h + i] = dx[r * h + i] + rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let inner = cst::<F>(GELU_C) * (x + cst::<F>(GELU_A) * x * x * x);
    cst::<F>(0.5) * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = cst::<F>(GELU_C);
    let a = cst::<F>(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = cst::<F>(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + cst::<F>(3.0) * a * x * x)
}

/// Result of one multi-head attention sublayer.
#[derive(Debug, Clone)]
pub struct AttentionOutput<F> {
    /// `seq × hidden`, after the output projection.
    pub output: Vec<F>,
    /// Per head, `seq × seq` row-stochastic weights; zero above the diagonal.
    pub weights: Vec<Vec<F>>,
    /// Per head, `seq × seq` scaled scores before the softmax; `-inf` above the diagonal.
    pub scores: Vec<Vec<F>>,
}

struct AttentionCache<F> {
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// heads × seq × seq
    probs: Vec<F>,
    ctx: Vec<F>,
}

fn attention_core<F: Scalar>(
    x: &[F],
    seq: usize,
    layer: &LayerParams<F>,
    config: &ModelConfig,
    keep_scores: bool,
) -> (Vec<F>, AttentionCache<F>, Vec<Vec<F>>) {
    let h = config.hidden_size;
    let heads = config.num_heads;
    let d = config.head_dim();
    let q = matmul(x, &layer.wq, Some(&layer.bq), seq, h, h);
    let k = matmul(x, &layer.wk, Some(&layer.bk), seq, h, h);
    let v = matmul(x, &layer.wv, Some(&layer.bv), seq, h, h);
    let scale = F::one() / cst::<F>(d as f64).sqrt();
    let mut probs = vec![F::zero(); heads * seq * seq];
    let mut ctx = vec![F::zero(); seq * h];
    let mut scores = Vec::new();
    for hd in 0..heads {
        let off = hd * d;
        let p = &mut probs[hd * seq * seq..(hd + 1) * seq * seq];
        let mut s_full = if keep_scores {
            vec![F::neg_infinity(); seq * seq]
        } else {
            Vec::new()
        };
        for i in 0..seq {
            let qi = &q[i * h + off..i * h + off + d];
            let row = &mut p[i * seq..i * seq + i + 1];
            for (j, rj) in row.iter_mut().enumerate() {
                *rj = dot(qi, &k[j * h + off..j * h + off + d]) * scale;
            }
            if keep_scores {
                s_full[i * seq..i * seq + i + 1].copy_from_slice(row);
            }
            softmax_in_place(row);
            let c = &mut ctx[i * h + off..i * h + off + d];
            for (j, &pij) in row.iter().enumerate() {
                axpy(pij, &v[j * h + off..j * h + off + d], c);
            }
        }
        if keep_scores {
            scores.push(s_full);
        }
    }
    let out = matmul(&ctx, &layer.wo, Some(&layer.bo), seq, h, h);
    (out, AttentionCache { q, k, v, probs, ctx }, scores)
}

/// Causal multi-head self-attention over `x` (`seq × hidden`), using the
/// Q/K/V/output projections of `layer`.
pub fn multi_head_attention<F: Scalar>(
    x: &[F],
    seq: usize,
    layer: &LayerParams<F>,
    config: &ModelConfig,
) -> Result<AttentionOutput<F>> {
    if seq > config.max_positions {
        return Err(Error::LengthOverflow {
            len: seq,
            max: config.max_positions,
        });
    }
    assert_eq!(x.len(), seq * config.hidden_size, "input shape");
    let (output, cache, scores) = attention_core(x, seq, layer, config, true);
    let weights = cache.probs.chunks(seq * seq).map(<[F]>::to_vec).collect();
    Ok(AttentionOutput {
        output,
        weights,
        scores,
    })
}

/// Seeded inverted-dropout source.
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn mask<F: Scalar>(&mut self, len: usize) -> Vec<F> {
        use rand::Rng;
        let keep = cst::<F>(1.0 / (1.0 - self.rate));
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < self.rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect()
    }
}

fn apply_mask<F: Scalar>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    a: Vec<F>,
    attn: AttentionCache<F>,
    attn_mask: Option<Vec<F>>,
    ln2: LnCache<F>,
    b: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
    ffn_mask: Option<Vec<F>>,
}

/// Activations kept by [`forward_cached`] for [`backward`].
pub struct ForwardCache<F> {
    items: Vec<Item>,
    rows: Vec<usize>,
    emb_mask: Option<Vec<F>>,
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    z: Vec<F>,
}

impl<F> ForwardCache<F> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn check_items<F: Scalar>(items: &[Item], weights: &Weights<F>) -> Result<()> {
    let config = weights.config();
    if items.len() > config.max_positions {
        return Err(Error::LengthOverflow {
            len: items.len(),
            max: config.max_positions,
        });
    }
    let prompt_len = weights.prompt.as_ref().map_or(0, |p| p.length);
    for item in items {
        match *item {
            Item::Token(id) if id as usize >= config.vocab_size => {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: config.vocab_size,
                })
            }
            Item::Virtual(index) if index >= prompt_len => {
                return Err(Error::VirtualOutOfRange { index, len: prompt_len })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Token (or prompt) embedding plus learned position embedding.
pub fn embed<F: Scalar>(items: &[Item], weights: &Weights<F>) -> Result<Vec<F>> {
    check_items(items, weights)?;
    let h = weights.config().hidden_size;
    let mut x = vec![F::zero(); items.len() * h];
    for (t, item) in items.iter().enumerate() {
        let row = &mut x[t * h..(t + 1) * h];
        let src = match *item {
            Item::Token(id) => &weights.model.wte[id as usize * h..(id as usize + 1) * h],
            Item::Virtual(i) => weights.prompt.as_ref().expect("checked").row(i),
        };
        for ((o, &e), &p) in row.iter_mut().zip(src).zip(&weights.model.wpe[t * h..(t + 1) * h]) {
            *o = e + p;
        }
    }
    Ok(x)
}

/// Runs the decoder and returns logits (`rows.len() × vocab`) for the
/// requested positions together with the activations needed by [`backward`].
pub fn forward_cached<F: Scalar>(
    items: &[Item],
    weights: &Weights<F>,
    rows: &[usize],
    mut dropout: Option<&mut Dropout>,
) -> Result<(Vec<F>, ForwardCache<F>)> {
    let config = *weights.config();
    let (h, f) = (config.hidden_size, config.ffn_size);
    let seq = items.len();
    let mut x = embed(items, weights)?;
    let mut mask_for = |len: usize| -> Option<Vec<F>> {
        match dropout.as_deref_mut() {
            Some(d) if d.rate > 0.0 => Some(d.mask(len)),
            _ => None,
        }
    };
    let emb_mask = mask_for(seq * h);
    apply_mask(&mut x, &emb_mask);

    let mut layers = Vec::with_capacity(config.num_layers);
    for layer in &weights.model.layers {
        let (a, ln1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b, seq, h);
        let (mut o, attn, _) = attention_core(&a, seq, layer, &config, false);
        let attn_mask = mask_for(seq * h);
        apply_mask(&mut o, &attn_mask);
        axpy(F::one(), &o, &mut x);

        let (b, ln2) = layer_norm(&x, &layer.ln2_g, &layer.ln2_b, seq, h);
        let u = matmul(&b, &layer.w_fc, Some(&layer.b_fc), seq, h, f);
        let g: Vec<F> = u.iter().map(|&v| gelu(v)).collect();
        let mut m = matmul(&g, &layer.w_proj, Some(&layer.b_proj), seq, f, h);
        let ffn_mask = mask_for(seq * h);
        apply_mask(&mut m, &ffn_mask);
        axpy(F::one(), &m, &mut x);

        layers.push(LayerCache {
            ln1,
            a,
            attn,
            attn_mask,
            ln2,
            b,
            u,
            g,
            ffn_mask,
        });
    }
    let (z, lnf) = layer_norm(&x, &weights.model.lnf_g, &weights.model.lnf_b, seq, h);

    let v = config.vocab_size;
    let mut logits = vec![F::zero(); rows.len() * v];
    for (r, &pos) in rows.iter().enumerate() {
        assert!(pos < seq, "logit row {pos} outside sequence of length {seq}");
        let zr = &z[pos * h..(pos + 1) * h];
        for (tok, l) in logits[r * v..(r + 1) * v].iter_mut().enumerate() {
            *l = dot(zr, &weights.model.wte[tok * h..(tok + 1) * h]);
        }
    }
    let cache = ForwardCache {
        items: items.to_vec(),
        rows: rows.to_vec(),
        emb_mask,
        layers,
        lnf,
        z,
    };
    Ok((logits, cache))
}

/// Next-token logits (`seq × vocab`) for every position.
pub fn forward_items<F: Scalar>(items: &[Item], weights: &Weights<F>) -> Result<Vec<F>> {
    let rows: Vec<usize> = (0..items.len()).collect();
    Ok(forward_cached(items, weights, &rows, None)?.0)
}

/// Next-token logits (`seq × vocab`) for a plain token sequence.
pub fn forward<F: Scalar>(ids: &[u32], params: &ModelParams<F>) -> Result<Vec<F>> {
    let weights = Weights {
        model: params.clone(),
        prompt: None,
    };
    forward_items(&token_items(ids), &weights)
}

/// Logits at the final position only.
pub fn last_logits<F: Scalar>(items: &[Item], weights: &Weights<F>) -> Result<Vec<F>> {
    if items.is_empty() {
        return Err(Error::Config("cannot score an empty prefix".into()));
    }
    Ok(forward_cached(items, weights, &[items.len() - 1], None)?.0)
}

/// Accumulates parameter gradients into `grads` given the loss gradient
/// with respect to the logits returned by [`forward_cached`].
pub fn backward<F: Scalar>(weights: &Weights<F>, cache: &ForwardCache<F>, dlogits: &[F], grads: &mut Weights<F>) {
    let config = *weights.config();
    let (h, f, v) = (config.hidden_size, config.ffn_size, config.vocab_size);
    let heads = config.num_heads;
    let d = config.head_dim();
    let seq = cache.items.len();
    let params = &weights.model;
    assert_eq!(dlogits.len(), cache.rows.len() * v, "dlogits shape");

    let mut dz = vec![F::zero(); seq * h];
    for (r, &pos) in cache.rows.iter().enumerate() {
        let zr = &cache.z[pos * h..(pos + 1) * h];
        let dzr = &mut dz[pos * h..(pos + 1) * h];
        for (tok, &g) in dlogits[r * v..(r + 1) * v].iter().enumerate() {
            if g == F::zero() {
                continue;
            }
            axpy(g, &params.wte[tok * h..(tok + 1) * h], dzr);
            axpy(g, zr, &mut grads.model.wte[tok * h..(tok + 1) * h]);
        }
    }
    let mut dx = vec![F::zero(); seq * h];
    {
        let gm = &mut grads.model;
        layer_norm_backward(
            &dz,
            &cache.lnf,
            &params.lnf_g,
            &mut gm.lnf_g,
            &mut gm.lnf_b,
            &mut dx,
            seq,
            h,
        );
    }

    let scale = F::one() / cst::<F>(d as f64).sqrt();
    for (li, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut grads.model.layers[li];

        // MLP branch.
        let mut dm = dx.clone();
        apply_mask(&mut dm, &lc.ffn_mask);
        matmul_backward_weights(&lc.g, &dm, &mut gl.w_proj, Some(&mut gl.b_proj), seq, f, h);
        let mut du = vec![F::zero(); seq * f];
        matmul_backward_input(&dm, &layer.w_proj, &mut du, seq, f, h);
        for (g, &u) in du.iter_mut().zip(&lc.u) {
            *g = *g * gelu_grad(u);
        }
        matmul_backward_weights(&lc.b, &du, &mut gl.w_fc, Some(&mut gl.b_fc), seq, h, f);
        let mut db = vec![F::zero(); seq * h];
        matmul_backward_input(&du, &layer.w_fc, &mut db, seq, h, f);
        layer_norm_backward(
            &db,
            &lc.ln2,
            &layer.ln2_g,
            &mut gl.ln2_g,
            &mut gl.ln2_b,
            &mut dx,
            seq,
            h,
        );

        // Attention branch.
        let mut d_out = dx.clone();
        apply_mask(&mut d_out, &lc.attn_mask);
        let at = &lc.attn;
        matmul_backward_weights(&at.ctx, &d_out, &mut gl.wo, Some(&mut gl.bo), seq, h, h);
        let mut dctx = vec![F::zero(); seq * h];
        matmul_backward_input(&d_out, &layer.wo, &mut dctx, seq, h, h);

        let mut dq = vec![F::zero(); seq * h];
        let mut dk = vec![F::zero(); seq * h];
        let mut dv = vec![F::zero(); seq * h];
        let mut dp = vec![F::zero(); seq];
        for hd in 0..heads {
            let off = hd * d;
            let p = &at.probs[hd * seq * seq..(hd + 1) * seq * seq];
            for i in 0..seq {
                let dci = &dctx[i * h + off..i * h + off + d];
                let pi = &p[i * seq..i * seq + i + 1];
                let mut weighted = F::zero();
                for j in 0..=i {
                    dp[j] = dot(dci, &at.v[j * h + off..j * h + off + d]);
                    weighted = weighted + pi[j] * dp[j];
                    axpy(pi[j], dci, &mut dv[j * h + off..j * h + off + d]);
                }
                for j in 0..=i {
                    let ds = pi[j] * (dp[j] - weighted) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    axpy(
                        ds,
                        &at.k[j * h + off..j * h + off + d],
                        &mut dq[i * h + off..i * h + off + d],
                    );
                    axpy(
                        ds,
                        &at.q[i * h + off..i * h + off + d],
                        &mut dk[j * h + off..j * h + off + d],
                    );
                }
            }
        }
        let mut da = vec![F::zero(); seq * h];
        for (dproj, w, dw, dbias) in [
            (&dq, &layer.wq, &mut gl.wq, &mut gl.bq),
            (&dk, &layer.wk, &mut gl.wk, &mut gl.bk),
            (&dv, &layer.wv, &mut gl.wv, &mut gl.bv),
        ] {
            matmul_backward_weights(&lc.a, dproj, dw, Some(dbias), seq, h, h);
            matmul_backward_input(dproj, w, &mut da, seq, h, h);
        }
        layer_norm_backward(
            &da,
            &lc.ln1,
            &layer.ln1_g,
            &mut gl.ln1_g,
            &mut gl.ln1_b,
            &mut dx,
            seq,
            h,
        );
    }

    apply_mask(&mut dx, &cache.emb_mask);
    for (t, item) in cache.items.iter().enumerate() {
        let row = &dx[t * h..(t + 1) * h];
        axpy(F::one(), row, &mut grads.model.wpe[t * h..(t + 1) * h]);
        match *item {
            Item::Token(id) => axpy(
                F::one(),
                row,
                &mut grads.model.wte[id as usize * h..(id as usize + 1) * h],
            ),
            Item::Virtual(i) => axpy(
                F::one(),
                row,
                grads.prompt.as_mut().expect("prompt gradient buffer").row_mut(i),
            ),
        }
    }
}
