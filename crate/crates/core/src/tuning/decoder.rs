//! A small causal transformer with low-rank adapters, trained by hand-written
//! backpropagation in `f64`.
//!
//! Base weights are seeded and frozen. Only the low-rank factors and the two
//! modality adapters are trainable.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::features::Adapter;
use crate::params::{slice_of, slice_of_mut, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub d_video: usize,
    pub d_audio: usize,
    pub adapter_depth: usize,
    pub base_seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8192,
            d_model: 64,
            n_layers: 2,
            d_ff: 256,
            lora_rank: 8,
            lora_alpha: 16.0,
            d_video: 32,
            d_audio: 32,
            adapter_depth: 1,
            base_seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.lora_rank == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for sinusoidal positions".into()));
        }
        if self.vocab_size <= 2 * super::tokenizer::FIRST_HASHED as usize {
            return Err(Error::Config(format!("vocab_size {} is too small", self.vocab_size)));
        }
        Ok(())
    }

    fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// `x A B`, added (scaled) to a frozen projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl Lora {
    fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let u = Uniform::new(-bound, bound).unwrap();
        Self {
            a: Array2::from_shape_fn((d_in, rank), |_| u.sample(rng)),
            b: Array2::zeros((rank, d_out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLora {
    pub q: Lora,
    pub v: Lora,
    pub o: Lora,
    pub up: Lora,
}

/// Every trainable parameter. Gradients reuse the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub blocks: Vec<BlockLora>,
    pub head: Lora,
    pub video: Adapter,
    pub audio: Adapter,
}

impl Params for Lora {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice_of(&self.a));
        f(slice_of(&self.b));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_of_mut(&mut self.a));
        f(slice_of_mut(&mut self.b));
    }
}

impl Params for Trainable {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for b in &self.blocks {
            b.q.visit(f);
            b.v.visit(f);
            b.o.visit(f);
            b.up.visit(f);
        }
        self.head.visit(f);
        self.video.visit(f);
        self.audio.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for b in &mut self.blocks {
            b.q.visit_mut(f);
            b.v.visit_mut(f);
            b.o.visit_mut(f);
            b.up.visit_mut(f);
        }
        self.head.visit_mut(f);
        self.video.visit_mut(f);
        self.audio.visit_mut(f);
    }
}

impl Trainable {
    fn init(config: &DecoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (config.d_model, config.lora_rank);
        let blocks = (0..config.n_layers)
            .map(|_| BlockLora {
                q: Lora::new(d, d, r, &mut rng),
                v: Lora::new(d, d, r, &mut rng),
                o: Lora::new(d, d, r, &mut rng),
                up: Lora::new(d, config.d_ff, r, &mut rng),
            })
            .collect();
        let head = Lora::new(d, config.vocab_size, r, &mut rng);
        let video = Adapter::random(config.d_video, d, config.adapter_depth, seed ^ 0x5649_4445);
        let audio = Adapter::random(config.d_audio, d, config.adapter_depth, seed ^ 0x4155_4449);
        Self { blocks, head, video, audio }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    b1: Array2<f64>,
    w2: Array2<f64>,
    b2: Array2<f64>,
}

/// Frozen base weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    embed: Array2<f64>,
    blocks: Vec<Block>,
    head: Array2<f64>,
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

impl BaseWeights {
    fn init(config: &DecoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.base_seed);
        let (d, ff) = (config.d_model, config.d_ff);
        let sd = 1.0 / (d as f64).sqrt();
        let embed = normal_matrix(config.vocab_size, d, 1.0, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                wq: normal_matrix(d, d, sd, &mut rng),
                wk: normal_matrix(d, d, sd, &mut rng),
                wv: normal_matrix(d, d, sd, &mut rng),
                wo: normal_matrix(d, d, sd, &mut rng),
                w1: normal_matrix(d, ff, (2.0 / d as f64).sqrt(), &mut rng),
                b1: Array2::zeros((1, ff)),
                w2: normal_matrix(ff, d, 1.0 / (ff as f64).sqrt(), &mut rng),
                b2: Array2::zeros((1, d)),
            })
            .collect();
        let head = normal_matrix(d, config.vocab_size, sd, &mut rng);
        Self { embed, blocks, head }
    }
}

impl Params for BaseWeights {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice_of(&self.embed));
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.b1, &b.w2, &b.b2] {
                f(slice_of(m));
            }
        }
        f(slice_of(&self.head));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_of_mut(&mut self.embed));
        for b in &mut self.blocks {
            for m in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2] {
                f(slice_of_mut(m));
            }
        }
        f(slice_of_mut(&mut self.head));
    }
}

pub(crate) fn sinusoidal(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

const LN_EPS: f64 = 1e-5;

struct LnCache {
    y: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>) -> LnCache {
    let d = x.ncols() as f64;
    let mut y = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in y.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    LnCache { y, rstd }
}

fn layer_norm_backward(cache: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let (y, g) = (cache.y.row(i), dy.row(i));
        let mean_g = g.sum() / d;
        let mean_gy = g.dot(&y) / d;
        let r = cache.rstd[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = r * (g[j] - mean_g - y[j] * mean_gy);
        }
    }
    dx
}

fn round_f32(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v as f32 as f64);
}

/// Frozen `x W0` plus scaled low-rank `x A B`; returns output and `x A`.
fn lora_forward(x: &Array2<f64>, w0: &Array2<f64>, l: &Lora, scale: f64) -> (Array2<f64>, Array2<f64>) {
    let xa = x.dot(&l.a);
    let y = x.dot(w0) + xa.dot(&l.b) * scale;
    (y, xa)
}

/// Accumulates factor gradients and returns `dL/dx`.
#[allow(clippy::too_many_arguments)]
fn lora_backward(
    x: &Array2<f64>,
    xa: &Array2<f64>,
    dy: &Array2<f64>,
    w0: &Array2<f64>,
    l: &Lora,
    g: &mut Lora,
    scale: f64,
) -> Array2<f64> {
    g.b += &(xa.t().dot(dy) * scale);
    let dxa = dy.dot(&l.b.t()) * scale;
    g.a += &x.t().dot(&dxa);
    dy.dot(&w0.t()) + dxa.dot(&l.a.t())
}

struct BlockCache {
    ln1: LnCache,
    qa: Array2<f64>,
    va: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
    c: Array2<f64>,
    oa: Array2<f64>,
    ln2: LnCache,
    ua: Array2<f64>,
    u: Array2<f64>,
}

/// Activations from a full forward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    lnf: LnCache,
}

impl ForwardCache {
    /// Final-norm hidden states, one row per position.
    pub fn hidden(&self) -> &Array2<f64> {
        &self.lnf.y
    }
}

/// The stand-in language model.
#[derive(Debug, Clone)]
pub struct TinyDecoder {
    config: DecoderConfig,
    base: BaseWeights,
    pub trainable: Trainable,
    tokenizer: Tokenizer,
    /// Round activations to single precision during training passes.
    pub mixed_precision: bool,
}

impl TinyDecoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let base = BaseWeights::init(&config);
        let trainable = Trainable::init(&config, config.base_seed ^ 0x4c4f_5241);
        let tokenizer = Tokenizer::new(config.vocab_size);
        Ok(Self { config, base, trainable, tokenizer, mixed_precision: false })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn base(&self) -> &BaseWeights {
        &self.base
    }

    /// Hash of the frozen weights.
    pub fn base_hash(&self) -> String {
        self.base.bitwise_hash()
    }

    pub fn n_parameters(&self) -> usize {
        self.base.n_params() + self.trainable.n_params()
    }

    /// Fresh low-rank factors and adapters from `seed`.
    pub fn reinit_trainable(&mut self, seed: u64) {
        self.trainable = Trainable::init(&self.config, seed);
    }

    pub fn embed_tokens(&self, ids: &[u32]) -> Array2<f64> {
        self.base.embed.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>())
    }

    /// Runs the blocks over input embeddings (positions are added here).
    pub fn forward(&self, input: &Array2<f64>, train: bool) -> ForwardCache {
        let mixed = train && self.mixed_precision;
        let scale = self.config.lora_scale();
        let d = self.config.d_model;
        let len = input.nrows();
        let mut x = input + &sinusoidal(len, d);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(self.base.blocks.len());
        for (w, l) in self.base.blocks.iter().zip(&self.trainable.blocks) {
            let ln1 = layer_norm(&x);
            let (q, qa) = lora_forward(&ln1.y, &w.wq, &l.q, scale);
            let k = ln1.y.dot(&w.wk);
            let (v, va) = lora_forward(&ln1.y, &w.wv, &l.v, scale);
            let mut p = q.dot(&k.t()) * inv_sqrt_d;
            for i in 0..len {
                let mut row = p.row_mut(i);
                let max = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0;
                for j in 0..len {
                    row[j] = if j <= i { (row[j] - max).exp() } else { 0.0 };
                    sum += row[j];
                }
                row.mapv_inplace(|v| v / sum);
            }
            let c = p.dot(&v);
            let (o, oa) = lora_forward(&c, &w.wo, &l.o, scale);
            let x_mid = &x + &o;
            let ln2 = layer_norm(&x_mid);
            let (u0, ua) = lora_forward(&ln2.y, &w.w1, &l.up, scale);
            let u = u0 + &w.b1;
            let r = u.mapv(|v| v.max(0.0));
            let m = r.dot(&w.w2) + &w.b2;
            let mut x_out = &x_mid + &m;
            if mixed {
                round_f32(&mut x_out);
            }
            blocks.push(BlockCache { ln1, qa, va, q, k, v, p, c, oa, ln2, ua, u });
            x = x_out;
        }
        let lnf = layer_norm(&x);
        ForwardCache { blocks, lnf }
    }

    /// Vocabulary logits for the given rows of the final hidden state.
    pub fn logits(&self, cache: &ForwardCache, positions: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let h = cache.lnf.y.select(Axis(0), positions);
        let (logits, ha) = lora_forward(&h, &self.base.head, &self.trainable.head, self.config.lora_scale());
        (logits, ha)
    }

    /// Backpropagates `dlogits` (rows aligned with `positions`) and returns `dL/d input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        positions: &[usize],
        ha: &Array2<f64>,
        dlogits: &Array2<f64>,
        grads: &mut Trainable,
    ) -> Array2<f64> {
        let scale = self.config.lora_scale();
        let inv_sqrt_d = 1.0 / (self.config.d_model as f64).sqrt();
        let h = cache.lnf.y.select(Axis(0), positions);
        let dh = lora_backward(&h, ha, dlogits, &self.base.head, &self.trainable.head, &mut grads.head, scale);
        let mut dhf = Array2::zeros(cache.lnf.y.raw_dim());
        for (row, &p) in positions.iter().enumerate() {
            let mut target = dhf.row_mut(p);
            target += &dh.row(row);
        }
        let mut dx = layer_norm_backward(&cache.lnf, &dhf);
        for (i, bc) in cache.blocks.iter().enumerate().rev() {
            let (w, l) = (&self.base.blocks[i], &self.trainable.blocks[i]);
            let g = &mut grads.blocks[i];
            let mut dx_mid = dx.clone();
            let dr = dx.dot(&w.w2.t());
            let mut du = dr;
            du.zip_mut_with(&bc.u, |d, &u| {
                if u <= 0.0 {
                    *d = 0.0
                }
            });
            let da2 = lora_backward(&bc.ln2.y, &bc.ua, &du, &w.w1, &l.up, &mut g.up, scale);
            dx_mid += &layer_norm_backward(&bc.ln2, &da2);
            let dc = lora_backward(&bc.c, &bc.oa, &dx_mid, &w.wo, &l.o, &mut g.o, scale);
            let dp = dc.dot(&bc.v.t());
            let dv = bc.p.t().dot(&dc);
            let mut ds = &bc.p * &dp;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(bc.p.rows()) {
                let dot: f64 = row.sum();
                row.zip_mut_with(&prow, |d, &p| *d -= p * dot);
                row.mapv_inplace(|v| v * inv_sqrt_d);
            }
            let dq = ds.dot(&bc.k);
            let dk = ds.t().dot(&bc.q);
            let a = &bc.ln1.y;
            let mut da = lora_backward(a, &bc.qa, &dq, &w.wq, &l.q, &mut g.q, scale);
            da += &lora_backward(a, &bc.va, &dv, &w.wv, &l.v, &mut g.v, scale);
            da += &dk.dot(&w.wk.t());
            dx = dx_mid + layer_norm_backward(&bc.ln1, &da);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> TinyDecoder {
        let mut m = TinyDecoder::new(DecoderConfig {
            vocab_size: 160,
            d_model: 8,
            n_layers: 2,
            d_ff: 12,
            lora_rank: 2,
            lora_alpha: 4.0,
            d_video: 3,
            d_audio: 2,
            adapter_depth: 1,
            base_seed: 3,
        })
        .unwrap();
        // Nonzero B factors so every path carries gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = Normal::new(0.0, 0.3).unwrap();
        m.trainable.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v += n.sample(&mut rng)));
        m
    }

    fn loss(m: &TinyDecoder, x: &Array2<f64>, positions: &[usize], targets: &[usize]) -> f64 {
        let cache = m.forward(x, true);
        let (logits, _) = m.logits(&cache, positions);
        logits
            .rows()
            .into_iter()
            .zip(targets)
            .map(|(row, &t)| {
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                lse - row[t]
            })
            .sum()
    }

    #[test]
    fn default_model_is_about_a_million_parameters() {
        let m = TinyDecoder::new(DecoderConfig::default()).unwrap();
        let n = m.n_parameters();
        assert!((900_000..1_500_000).contains(&n), "{n}");
    }

    #[test]
    fn causal_prefix_is_unaffected_by_later_tokens() {
        let m = tiny();
        let x = m.embed_tokens(&[70, 71, 72, 73]);
        let mut y = x.clone();
        y.row_mut(3).fill(5.0);
        let a = m.forward(&x, false);
        let b = m.forward(&y, false);
        assert_eq!(a.hidden().slice(s![..3, ..]), b.hidden().slice(s![..3, ..]));
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let m = tiny();
        let x = m.embed_tokens(&[70, 90, 110, 75, 81]) * 0.7;
        let positions = [1, 4];
        let targets = [5, 100];
        let cache = m.forward(&x, true);
        let (logits, ha) = m.logits(&cache, &positions);
        let mut dl = logits.clone();
        for (mut row, &t) in dl.rows_mut().into_iter().zip(&targets) {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
            row[t] -= 1.0;
        }
        let mut grads = m.trainable.zeros_like();
        let dx = m.backward(&cache, &positions, &ha, &dl, &mut grads);
        let analytic = grads.to_flat();
        let theta = m.trainable.to_flat();
        let h = 1e-6;
        let mut checked = 0;
        for i in 0..theta.len() {
            let mut p = m.clone();
            let mut t = theta.clone();
            t[i] += h;
            p.trainable.set_flat(&t);
            let up = loss(&p, &x, &positions, &targets);
            t[i] -= 2.0 * h;
            p.trainable.set_flat(&t);
            let down = loss(&p, &x, &positions, &targets);
            let numeric = (up - down) / (2.0 * h);
            let g = analytic[i];
            let rel = (numeric - g).abs() / numeric.abs().max(g.abs()).max(1e-12);
            assert!(rel < 1e-4 || (numeric - g).abs() < 1e-8, "param {i}: {g} vs {numeric}");
            checked += 1;
        }
        assert!(checked > 100);
        for idx in [(0, 0), (2, 5), (4, 7)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let numeric = (loss(&m, &xp, &positions, &targets) - loss(&m, &xm, &positions, &targets)) / (2.0 * h);
            let rel = (numeric - dx[idx]).abs() / numeric.abs().max(1e-12);
            assert!(rel < 1e-4 || (numeric - dx[idx]).abs() < 1e-8, "input {idx:?}");
        }
    }
}
