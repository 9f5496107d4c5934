//! Embedding-space perturbation of the task-irrelevant modality.
//!
//! A binary row mask selects which sequence rows may move: for image-heavy
//! samples the text rows, for text-heavy samples the image rows, for VQA
//! nothing (both modalities carry the answer). The `NoMask` mode opens every
//! content row instead; the answer-query row is closed in every mode.
//!
//! Inside the open rows a delta is grown within the infinity-ball of radius
//! `epsilon` by raw-gradient ascent on the classification loss,
//!
//! ```text
//! delta <- clamp(delta + alpha * grad, [-epsilon, epsilon])
//! ```
//!
//! with no sign function, so step sizes stay proportional to local
//! sensitivity. Each ascent step runs on a throwaway tape against a detached
//! copy of the embeddings; model parameters accumulate no gradient from the
//! inner loop. The finished delta re-enters the caller's tape as a constant,
//! so the outer loss differentiates through the perturbed forward pass but
//! never through the search that produced it. `RandomGaussian` mode replaces
//! the search with plain noise of width `rg_sigma` under the same mask.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddedSequence, ModalitySpans, Model};
use crate::objectives::cross_entropy;
use crate::seeds::gauss;
use crate::synth::TaskKind;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvMode {
    /// Ascent restricted to the task-irrelevant modality.
    Masked,
    /// Ascent over every content row, VQA included.
    NoMask,
    /// Gaussian noise of width `rg_sigma` in place of the ascent, under the
    /// task-irrelevant mask.
    RandomGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvConfig {
    /// Infinity-norm radius of the perturbation ball.
    pub epsilon: f64,
    /// Ascent step size applied to the raw gradient.
    pub alpha: f64,
    /// Number of ascent steps.
    pub steps: usize,
    /// Width of the Gaussian the delta starts from, before projection.
    pub init_sigma: f64,
    pub mode: AdvMode,
    /// Noise width for [`AdvMode::RandomGaussian`].
    pub rg_sigma: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            epsilon: 1e-3,
            alpha: 0.1,
            steps: 2,
            init_sigma: 1e-3,
            mode: AdvMode::Masked,
            rg_sigma: 0.05,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.init_sigma.is_finite() && self.init_sigma >= 0.0) {
            return Err(Error::Config(format!("init_sigma must be >= 0, got {}", self.init_sigma)));
        }
        if self.mode == AdvMode::RandomGaussian && !(self.rg_sigma.is_finite() && self.rg_sigma > 0.0)
        {
            return Err(Error::Config(format!("rg_sigma must be > 0, got {}", self.rg_sigma)));
        }
        Ok(())
    }
}

/// Which rows of the sequence a mask opens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskCoverage {
    TextRows,
    ImageRows,
    AllRows,
    NoRows,
}

/// Row-level perturbation permit for one embedded sequence. Rows are either
/// fully open or fully protected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityMask {
    pub coverage: MaskCoverage,
    row_open: Vec<bool>,
}

/// Builds the mask for a sample's modality geometry. The answer-query row is
/// closed unconditionally.
pub fn build_mask(task: TaskKind, spans: &ModalitySpans, mode: AdvMode) -> ModalityMask {
    let n_rows = spans.query + 1;
    let mut row_open = vec![false; n_rows];
    let mut open = |r: std::ops::Range<usize>| {
        for f in &mut row_open[r] {
            *f = true;
        }
    };
    let coverage = match mode {
        AdvMode::NoMask => {
            open(0..spans.query);
            MaskCoverage::AllRows
        }
        AdvMode::Masked | AdvMode::RandomGaussian => match task {
            TaskKind::ImageHeavy => {
                open(spans.text.clone());
                MaskCoverage::TextRows
            }
            TaskKind::TextHeavy => {
                open(spans.image.clone());
                MaskCoverage::ImageRows
            }
            TaskKind::Vqa => MaskCoverage::NoRows,
        },
    };
    row_open[spans.query] = false;
    ModalityMask { coverage, row_open }
}

impl ModalityMask {
    pub fn n_rows(&self) -> usize {
        self.row_open.len()
    }

    pub fn row_is_open(&self, row: usize) -> bool {
        self.row_open.get(row).copied().unwrap_or(false)
    }

    /// No row may move: the perturbation is the identity.
    pub fn is_empty(&self) -> bool {
        !self.row_open.iter().any(|&b| b)
    }

    /// Row-constant 0/1 matrix matching the embedding shape.
    fn expand(&self, cols: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.row_open.len() * cols);
        for &open in &self.row_open {
            let v = if open { 1.0 } else { 0.0 };
            out.extend(std::iter::repeat(v).take(cols));
        }
        out
    }
}

/// One draw of the starting delta: i.i.d. Gaussian of width `init_sigma`,
/// projected into the epsilon-ball.
pub fn init_delta(n: usize, cfg: &AdvConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut delta: Vec<f64> = (0..n).map(|_| cfg.init_sigma * gauss(rng)).collect();
    clamp_ball(&mut delta, cfg.epsilon);
    delta
}

/// One raw-gradient ascent step with exact infinity-ball projection.
pub fn pgd_raw_step(delta: &[f64], grad: &[f64], cfg: &AdvConfig) -> Result<Vec<f64>> {
    if delta.len() != grad.len() {
        return Err(Error::Contract(format!(
            "gradient length {} does not match delta length {}",
            grad.len(),
            delta.len()
        )));
    }
    let mut next: Vec<f64> = delta.iter().zip(grad).map(|(d, g)| d + cfg.alpha * g).collect();
    clamp_ball(&mut next, cfg.epsilon);
    Ok(next)
}

fn clamp_ball(delta: &mut [f64], epsilon: f64) {
    for v in delta.iter_mut() {
        *v = v.clamp(-epsilon, epsilon);
    }
}

/// Result of perturbing one embedded sequence.
#[derive(Debug, Clone)]
pub struct PerturbOutcome {
    /// Lives on the caller's tape. When `perturbed` is false this is the
    /// same tensor handle that came in.
    pub embeddings: Tensor,
    pub perturbed: bool,
    /// Final masked delta, row-major; `None` when nothing moved.
    pub delta: Option<Vec<f64>>,
}

/// Classification loss of the model on `base + delta .* mask`, built on a
/// private tape; returns the loss value and the gradient on the delta.
fn inner_loss_and_grad(
    model: &Model,
    base: &Tensor,
    delta: &[f64],
    mask: &Tensor,
    answer: usize,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let d = Tensor::leaf(base.rows(), base.cols(), delta.to_vec())?;
    let masked = tape.mul(&d, mask)?;
    let e_tilde = tape.add(base, &masked)?;
    let logits = model.answer_logits(&tape, &e_tilde)?;
    let loss = cross_entropy(&tape, &logits, answer)?;
    let value = loss.item()?;
    let grad = tape.grad_wrt_input(&loss, &d)?;
    Ok((value, grad))
}

/// Perturbs an embedded sequence and replays it onto `outer`.
///
/// `answer` is the label the inner ascent tries to make less likely. The
/// returned trace holds the inner classification loss at the initial delta
/// and after every ascent step (`steps + 1` values); it is empty for
/// empty-mask skips and for the no-optimization Gaussian mode.
pub fn adversarial_perturb(
    model: &Model,
    task: TaskKind,
    answer: usize,
    emb: &EmbeddedSequence,
    cfg: &AdvConfig,
    outer: &Tape,
    rng: &mut ChaCha8Rng,
) -> Result<(PerturbOutcome, Vec<f64>)> {
    cfg.validate()?;
    let base = &emb.embeddings;
    let mask = build_mask(task, &emb.spans, cfg.mode);
    if mask.n_rows() != base.rows() {
        return Err(Error::Contract(format!(
            "mask covers {} rows but the sequence has {}",
            mask.n_rows(),
            base.rows()
        )));
    }
    if mask.is_empty() {
        return Ok((
            PerturbOutcome { embeddings: base.clone(), perturbed: false, delta: None },
            Vec::new(),
        ));
    }

    let cols = base.cols();
    let mask_flat = mask.expand(cols);

    let mut trace = Vec::new();
    let delta = match cfg.mode {
        AdvMode::RandomGaussian => {
            (0..base.len()).map(|_| cfg.rg_sigma * gauss(rng)).collect::<Vec<f64>>()
        }
        AdvMode::Masked | AdvMode::NoMask => {
            let mask_const = Tensor::constant(base.rows(), cols, mask_flat.clone())?;
            let detached = base.detach();
            let mut delta = init_delta(base.len(), cfg, rng);
            for _ in 0..cfg.steps {
                let (value, grad) =
                    inner_loss_and_grad(model, &detached, &delta, &mask_const, answer)?;
                trace.push(value);
                delta = pgd_raw_step(&delta, &grad, cfg)?;
            }
            let (final_value, _) =
                inner_loss_and_grad(model, &detached, &delta, &mask_const, answer)?;
            trace.push(final_value);
            delta
        }
    };

    let masked_delta: Vec<f64> = delta.iter().zip(&mask_flat).map(|(d, m)| d * m).collect();
    let delta_const = Tensor::constant(base.rows(), cols, masked_delta.clone())?;
    let embeddings = outer.add(base, &delta_const)?;
    Ok((PerturbOutcome { embeddings, perturbed: true, delta: Some(masked_delta) }, trace))
}
