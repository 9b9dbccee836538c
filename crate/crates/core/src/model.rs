//! Toy dual encoder trained with the retrieval + equivariance objective.
//!
//! Each modality has a linear map into a shared embedding space, optionally
//! preceded by one `tanh` hidden layer. Scores are cosine similarities divided
//! by a learned temperature `exp(log_temperature)`.
//!
//! Gradients are derived by hand: the loss module supplies `dL/dS` for the
//! score matrix `S`, and [`loss_and_grad`] chains it through the temperature,
//! the cosine normalization and both encoders. [`finite_diff_grad`] is the
//! independent central-difference oracle used to check it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_with_grad, EqSimConfig, LossBreakdown};
use crate::seeded_stream;
use crate::similarity::{batch_similarity, cosine_similarity, BatchSimilarities, EmbVector, SimilarityGrid, DEGENERATE_NORM};
use crate::synthgen::{Batch, BatchPool, Modality, PairSample, TrainStream, World};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        assert_eq!(data.len(), n * cols, "ragged matrix rows");
        Self { rows: n, cols, data }
    }

    fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    /// `self^T y`
    fn tmatvec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.data.chunks(self.cols).zip(y) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * yi;
            }
        }
        out
    }

    /// `self += a b^T`
    fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        for (row, &ai) in self.data.chunks_mut(self.cols).zip(a) {
            for (w, bj) in row.iter_mut().zip(b) {
                *w += ai * bj;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub hidden: Option<HiddenLayer>,
    /// `embed_dim x (hidden or input dim)`.
    pub weights: Matrix,
}

/// Activations kept for the backward pass.
struct EncodeTrace {
    input: Vec<f64>,
    hidden: Option<Vec<f64>>,
    output: Vec<f64>,
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        match &self.hidden {
            Some(h) => h.weights.cols,
            None => self.weights.cols,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows
    }

    fn trace(&self, x: &[f64]) -> EncodeTrace {
        let hidden = self.hidden.as_ref().map(|h| {
            h.weights
                .matvec(x)
                .into_iter()
                .zip(&h.bias)
                .map(|(a, b)| (a + b).tanh())
                .collect::<Vec<_>>()
        });
        let output = self.weights.matvec(hidden.as_deref().unwrap_or(x));
        EncodeTrace {
            input: x.to_vec(),
            hidden,
            output,
        }
    }

    fn backward(&self, trace: &EncodeTrace, d_out: &[f64], grad: &mut Encoder) {
        let z = trace.hidden.as_deref().unwrap_or(&trace.input);
        grad.weights.add_outer(d_out, z);
        if let (Some(gh), Some(z)) = (grad.hidden.as_mut(), &trace.hidden) {
            // tanh' = 1 - tanh^2
            let dz = self.weights.tmatvec(d_out);
            let da: Vec<f64> = dz.iter().zip(z).map(|(d, z)| d * (1.0 - z * z)).collect();
            gh.weights.add_outer(&da, &trace.input);
            for (b, d) in gh.bias.iter_mut().zip(&da) {
                *b += d;
            }
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.as_ref().map(|h| HiddenLayer {
                weights: Matrix::zeros(h.weights.rows, h.weights.cols),
                bias: vec![0.0; h.bias.len()],
            }),
            weights: Matrix::zeros(self.weights.rows, self.weights.cols),
        }
    }

    fn for_each_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        if let Some(h) = &mut self.hidden {
            h.weights.data.iter_mut().for_each(&mut *f);
            h.bias.iter_mut().for_each(&mut *f);
        }
        self.weights.data.iter_mut().for_each(f);
    }

    fn for_each(&self, f: &mut impl FnMut(f64)) {
        if let Some(h) = &self.hidden {
            h.weights.data.iter().for_each(|&v| f(v));
            h.bias.iter().for_each(|&v| f(v));
        }
        self.weights.data.iter().for_each(|&v| f(v));
    }
}

/// Shape of a freshly initialized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_img: usize,
    pub d_txt: usize,
    pub embed_dim: usize,
    pub hidden_dim: Option<usize>,
}

/// Conventional contrastive starting temperature.
pub const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub image: Encoder,
    pub text: Encoder,
    pub log_temperature: f64,
}

/// Same layout as [`EncoderParams`]; entries are `d total / d parameter`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub EncoderParams);

impl EncoderParams {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Self {
        let encoder = |d_in: usize, rng: &mut R| {
            let hidden = shape.hidden_dim.map(|h| HiddenLayer {
                weights: Matrix::uniform(h, d_in, rng),
                bias: vec![0.0; h],
            });
            let fan_in = shape.hidden_dim.unwrap_or(d_in);
            Encoder {
                hidden,
                weights: Matrix::uniform(shape.embed_dim, fan_in, rng),
            }
        };
        let image = encoder(shape.d_img, rng);
        let text = encoder(shape.d_txt, rng);
        Self {
            image,
            text,
            log_temperature: INIT_TEMPERATURE.ln(),
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            d_img: self.image.input_dim(),
            d_txt: self.text.input_dim(),
            embed_dim: self.image.output_dim(),
            hidden_dim: self.image.hidden.as_ref().map(|h| h.bias.len()),
        }
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn encoder(&self, modality: Modality) -> &Encoder {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
            log_temperature: 0.0,
        }
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_| n += 1);
        n
    }

    /// Visit every scalar in a fixed order: image, text, log temperature.
    pub fn for_each(&self, mut f: impl FnMut(f64)) {
        self.image.for_each(&mut f);
        self.text.for_each(&mut f);
        f(self.log_temperature);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        self.image.for_each_mut(&mut f);
        self.text.for_each_mut(&mut f);
        f(&mut self.log_temperature);
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each(|v| out.push(v));
        out
    }

    pub fn set_from_slice(&mut self, values: &[f64]) {
        let mut it = values.iter();
        self.for_each_mut(|v| *v = *it.next().expect("parameter vector too short"));
        assert!(it.next().is_none(), "parameter vector too long");
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|v| ok &= v.is_finite());
        ok
    }
}

impl GradientSet {
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.to_vec()
    }
}

pub fn encode(params: &EncoderParams, modality: Modality, x: &EmbVector) -> Result<EmbVector> {
    let enc = params.encoder(modality);
    if x.dim() != enc.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: enc.input_dim(),
            got: x.dim(),
        });
    }
    EmbVector::new(enc.trace(x.values()).output)
}

/// Raw cosine grid of an eval couple under the trained encoders.
pub fn eval_grid(params: &EncoderParams, sample: &PairSample) -> Result<SimilarityGrid> {
    let i1 = encode(params, Modality::Image, &sample.image1)?;
    let i2 = encode(params, Modality::Image, &sample.image2)?;
    let t1 = encode(params, Modality::Text, &sample.text1)?;
    let t2 = encode(params, Modality::Text, &sample.text2)?;
    Ok(SimilarityGrid::new(
        cosine_similarity(&i1, &t1)?,
        cosine_similarity(&i1, &t2)?,
        cosine_similarity(&i2, &t1)?,
        cosine_similarity(&i2, &t2)?,
    ))
}

fn check_batch(images: &[EmbVector], texts: &[EmbVector]) -> Result<()> {
    if images.len() != texts.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            texts: texts.len(),
        });
    }
    if images.len() < 2 {
        return Err(Error::BatchTooSmall(images.len()));
    }
    Ok(())
}

pub fn forward_batch(
    params: &EncoderParams,
    images: &[EmbVector],
    texts: &[EmbVector],
) -> Result<BatchSimilarities> {
    check_batch(images, texts)?;
    let u = images
        .iter()
        .map(|x| encode(params, Modality::Image, x))
        .collect::<Result<Vec<_>>>()?;
    let v = texts
        .iter()
        .map(|x| encode(params, Modality::Text, x))
        .collect::<Result<Vec<_>>>()?;
    batch_similarity(&u, &v, params.temperature())
}

fn total_of(params: &EncoderParams, images: &[EmbVector], texts: &[EmbVector], cfg: &EqSimConfig) -> Result<LossBreakdown> {
    total_loss(&forward_batch(params, images, texts)?, cfg)
}

fn unit(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < DEGENERATE_NORM {
        return Err(Error::DegenerateVector { norm });
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

/// Loss breakdown and exact gradient of `total` for one batch.
pub fn loss_and_grad(
    params: &EncoderParams,
    images: &[EmbVector],
    texts: &[EmbVector],
    cfg: &EqSimConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    let m = forward_batch(params, images, texts)?;
    let (breakdown, d_scores) = total_loss_with_grad(&m, cfg)?;
    let n = m.n();

    let img_traces: Vec<EncodeTrace> = images.iter().map(|x| params.image.trace(x.values())).collect();
    let txt_traces: Vec<EncodeTrace> = texts.iter().map(|x| params.text.trace(x.values())).collect();
    let img_units = img_traces.iter().map(|t| unit(&t.output)).collect::<Result<Vec<_>>>()?;
    let txt_units = txt_traces.iter().map(|t| unit(&t.output)).collect::<Result<Vec<_>>>()?;

    let inv_t = (-params.log_temperature).exp();
    let mut grad = params.zeros_like();
    // S = cos * exp(-log_t)  =>  dS/dlog_t = -S
    grad.log_temperature = -d_scores.iter().zip(m.as_slice()).map(|(g, s)| g * s).sum::<f64>();

    let dim = params.image.output_dim();
    let mut d_img = vec![vec![0.0; dim]; n];
    let mut d_txt = vec![vec![0.0; dim]; n];
    for i in 0..n {
        let (ui, nu) = &img_units[i];
        for j in 0..n {
            let (vj, nv) = &txt_units[j];
            let d_cos = d_scores[i * n + j] * inv_t;
            if d_cos == 0.0 {
                continue;
            }
            let cos = m.get(i, j) * params.temperature();
            // d cos(u, v) / du = (v_hat - cos u_hat) / |u|
            for k in 0..dim {
                d_img[i][k] += d_cos * (vj[k] - cos * ui[k]) / nu;
                d_txt[j][k] += d_cos * (ui[k] - cos * vj[k]) / nv;
            }
        }
    }
    for (trace, d) in img_traces.iter().zip(&d_img) {
        params.image.backward(trace, d, &mut grad.image);
    }
    for (trace, d) in txt_traces.iter().zip(&d_txt) {
        params.text.backward(trace, d, &mut grad.text);
    }
    Ok((breakdown, GradientSet(grad)))
}

/// Central differences of the total loss, one parameter at a time.
pub fn finite_diff_grad(
    params: &EncoderParams,
    images: &[EmbVector],
    texts: &[EmbVector],
    cfg: &EqSimConfig,
    h: f64,
) -> Result<GradientSet> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidParameter {
            name: "h",
            reason: format!("step must be in [1e-7, 1e-3], got {h}"),
        });
    }
    let base = params.to_vec();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut shifted = base.clone();
    for idx in 0..base.len() {
        shifted[idx] = base[idx] + h;
        probe.set_from_slice(&shifted);
        let plus = total_of(&probe, images, texts, cfg)?.total;
        shifted[idx] = base[idx] - h;
        probe.set_from_slice(&shifted);
        let minus = total_of(&probe, images, texts, cfg)?.total;
        shifted[idx] = base[idx];
        out.push((plus - minus) / (2.0 * h));
    }
    let mut grad = params.zeros_like();
    grad.set_from_slice(&out);
    Ok(GradientSet(grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        Self {
            kind,
            lr,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grad: &GradientSet) {
        let mut theta = params.to_vec();
        let g = grad.to_vec();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, gi) in theta.iter_mut().zip(&g) {
                    *p -= self.lr * gi;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for k in 0..theta.len() {
                    self.first[k] = beta1 * self.first[k] + (1.0 - beta1) * g[k];
                    self.second[k] = beta2 * self.second[k] + (1.0 - beta2) * g[k] * g[k];
                    let m_hat = self.first[k] / c1;
                    let v_hat = self.second[k] / c2;
                    theta[k] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        params.set_from_slice(&theta);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eqsim: EqSimConfig,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub embed_dim: usize,
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    /// Share of batch slots taken by edited couples.
    #[serde(default = "default_edit_fraction")]
    pub edit_fraction: f64,
    /// Draw this many batches once and cycle through them; `None` draws fresh batches every step.
    #[serde(default)]
    pub pool_batches: Option<usize>,
}

fn default_edit_fraction() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eqsim: EqSimConfig::default(),
            learning_rate: 0.01,
            steps: 2000,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerKind::default(),
            embed_dim: 32,
            hidden_dim: None,
            edit_fraction: default_edit_fraction(),
            pool_batches: Some(32),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.eqsim.validate()?;
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "learning_rate",
                reason: format!("must be >= 0, got {}", self.learning_rate),
            });
        }
        if self.embed_dim == 0 || self.hidden_dim == Some(0) {
            return Err(Error::InvalidParameter {
                name: "embed_dim/hidden_dim",
                reason: "layer widths must be positive".into(),
            });
        }
        if self.pool_batches == Some(0) {
            return Err(Error::InvalidParameter {
                name: "pool_batches",
                reason: "a pool needs at least one batch".into(),
            });
        }
        if self.eqsim.k_close >= self.batch_size {
            return Err(Error::BadK {
                k: self.eqsim.k_close,
                n: self.batch_size,
            });
        }
        Ok(())
    }

    pub fn shape(&self, d_img: usize, d_txt: usize) -> ModelShape {
        ModelShape {
            d_img,
            d_txt,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: EncoderParams,
    pub params: EncoderParams,
    pub history: Vec<LossBreakdown>,
}

/// Train from a fresh initialization drawn from the `init` sub-stream of `cfg.seed`.
pub fn train<I>(cfg: &TrainConfig, data: I, d_img: usize, d_txt: usize) -> Result<TrainOutcome>
where
    I: IntoIterator<Item = Result<Batch>>,
{
    cfg.validate()?;
    let init = EncoderParams::init(cfg.shape(d_img, d_txt), &mut seeded_stream(cfg.seed, "init"));
    train_from(cfg, init, data)
}

/// Train on batches from `world`, drawn from the `batches` sub-stream of `cfg.seed`.
pub fn train_on_world(cfg: &TrainConfig, world: &World) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stream = TrainStream::new(
        world.clone(),
        cfg.batch_size,
        cfg.edit_fraction,
        seeded_stream(cfg.seed, "batches"),
    )?;
    let (d_img, d_txt) = (world.config().d_img, world.config().d_txt);
    match cfg.pool_batches {
        None => train(cfg, stream, d_img, d_txt),
        Some(n) => train(cfg, BatchPool::draw(stream, n)?, d_img, d_txt),
    }
}

pub fn train_from<I>(cfg: &TrainConfig, init: EncoderParams, data: I) -> Result<TrainOutcome>
where
    I: IntoIterator<Item = Result<Batch>>,
{
    cfg.validate()?;
    let mut params = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.n_params());
    let mut history = Vec::with_capacity(cfg.steps);
    let mut batches = data.into_iter();
    for step in 0..cfg.steps {
        let batch = batches.next().ok_or(Error::InvalidParameter {
            name: "data",
            reason: format!("stream ended after {step} batches"),
        })??;
        if batch.images.len() != cfg.batch_size {
            return Err(Error::LengthMismatch {
                left: batch.images.len(),
                right: cfg.batch_size,
            });
        }
        let (breakdown, grad) = loss_and_grad(&params, &batch.images, &batch.texts, &cfg.eqsim)?;
        if !breakdown.is_finite() || !grad.0.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        history.push(breakdown);
        opt.step(&mut params, &grad);
        let t = params.temperature();
        if !params.is_finite() || !(t > 0.0 && t.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
    }
    Ok(TrainOutcome {
        initial: init,
        params,
        history,
    })
}
