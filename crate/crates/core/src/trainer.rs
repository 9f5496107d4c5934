//! Method grid, batch mixing, and the training loop.
//!
//! Eight named methods share one loop and differ only in derived flags:
//! whether batches are VQA-only, whether heuristic perturbation variants are
//! mixed in, which embedding-perturbation mode runs, and which divergence
//! ties perturbed predictions to clean ones. The per-batch loss is
//!
//! ```text
//! total = mean(sft) + mean(adv) + lambda * mean(consistency)
//! ```
//!
//! where the sft group covers originals plus heuristic variants, the adv
//! group covers perturbed embedding passes, and every consistency pair is
//! anchored at the clean original of the variant, never variant-to-variant.
//!
//! An epoch is one pass over the VQA training set, the corpus being
//! fine-tuned; the unimodal datasets cycle independently with reshuffles.
//! Everything downstream of the run seed is deterministic, so a config and
//! seed reproduce checkpoints and metrics bit for bit.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adv::{adversarial_perturb, AdvConfig, AdvMode};
use crate::checkpoint;
use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{
    consistency_divergence, cross_entropy, total_loss, ConsistencyConfig, DivergenceKind,
    LossBreakdown,
};
use crate::seeds::stream;
use crate::synth::{
    apply_perturbation, generate_dataset, GeneratorConfig, PerturbationKind, Sample, Split,
    TaskKind,
};
use crate::tensor::{Tape, Tensor};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Vanilla,
    #[serde(rename = "FFT_DVQA")]
    FftDvqa,
    #[serde(rename = "FFT_DAUG")]
    FftDaug,
    #[serde(rename = "FFT_KL")]
    FftKl,
    #[serde(rename = "FFT_JS")]
    FftJs,
    #[serde(rename = "FFT_RG")]
    FftRg,
    #[serde(rename = "FFT_ADV")]
    FftAdv,
    Ours,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Vanilla,
        Method::FftDvqa,
        Method::FftDaug,
        Method::FftKl,
        Method::FftJs,
        Method::FftRg,
        Method::FftAdv,
        Method::Ours,
    ];

    /// Canonical report label.
    pub fn label(self) -> &'static str {
        match self {
            Method::Vanilla => "Vanilla",
            Method::FftDvqa => "FFT_DVQA",
            Method::FftDaug => "FFT_DAUG",
            Method::FftKl => "FFT_KL",
            Method::FftJs => "FFT_JS",
            Method::FftRg => "FFT_RG",
            Method::FftAdv => "FFT_ADV",
            Method::Ours => "Ours",
        }
    }

    /// Flag-style name accepted on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::FftDvqa => "fft-dvqa",
            Method::FftDaug => "fft-daug",
            Method::FftKl => "fft-kl",
            Method::FftJs => "fft-js",
            Method::FftRg => "fft-rg",
            Method::FftAdv => "fft-adv",
            Method::Ours => "ours",
        }
    }

    pub fn from_cli(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.cli_name() == name)
    }

    pub fn flags(self) -> MethodFlags {
        match self {
            Method::Vanilla | Method::FftDvqa => MethodFlags {
                vqa_only: true,
                use_heuristic_aug: false,
                adversarial: None,
                consistency: None,
            },
            Method::FftDaug => MethodFlags {
                vqa_only: false,
                use_heuristic_aug: true,
                adversarial: None,
                consistency: None,
            },
            Method::FftKl => MethodFlags {
                vqa_only: false,
                use_heuristic_aug: true,
                adversarial: None,
                consistency: Some(DivergenceKind::Kl),
            },
            Method::FftJs => MethodFlags {
                vqa_only: false,
                use_heuristic_aug: true,
                adversarial: None,
                consistency: Some(DivergenceKind::Js),
            },
            Method::FftRg => MethodFlags {
                vqa_only: false,
                use_heuristic_aug: true,
                adversarial: Some(AdvMode::RandomGaussian),
                consistency: Some(DivergenceKind::Js),
            },
            Method::FftAdv => MethodFlags {
                vqa_only: false,
                use_heuristic_aug: true,
                adversarial: Some(AdvMode::NoMask),
                consistency: Some(DivergenceKind::Js),
            },
            Method::Ours => MethodFlags {
                vqa_only: false,
                use_heuristic_aug: true,
                adversarial: Some(AdvMode::Masked),
                consistency: Some(DivergenceKind::Js),
            },
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Behavior switches derived from the method name alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodFlags {
    pub vqa_only: bool,
    pub use_heuristic_aug: bool,
    pub adversarial: Option<AdvMode>,
    pub consistency: Option<DivergenceKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub batch_size: usize,
    pub img_ratio: f64,
    pub text_ratio: f64,
    /// Heuristic variants generated per clean unimodal sample per batch.
    pub per_sample_perturbed_variants: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            batch_size: 8,
            img_ratio: 0.25,
            text_ratio: 0.25,
            per_sample_perturbed_variants: 1,
        }
    }
}

impl MixtureConfig {
    /// Clean draws per batch: (image-heavy, text-heavy, vqa).
    pub fn counts(&self) -> (usize, usize, usize) {
        let n_img = (self.batch_size as f64 * self.img_ratio).round() as usize;
        let n_text = (self.batch_size as f64 * self.text_ratio).round() as usize;
        (n_img, n_text, self.batch_size - n_img - n_text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, r) in [("img_ratio", self.img_ratio), ("text_ratio", self.text_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        if self.img_ratio + self.text_ratio > 1.0 {
            return Err(Error::Config(format!(
                "img_ratio + text_ratio = {} exceeds 1",
                self.img_ratio + self.text_ratio
            )));
        }
        let (n_img, n_text, n_vqa) = self.counts();
        if n_img + n_text > self.batch_size {
            return Err(Error::Config("ratios round past the batch size".into()));
        }
        if n_vqa == 0 {
            return Err(Error::Config("every batch needs at least one VQA sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 2e-5 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Clean training corpora, one per task family.
#[derive(Debug, Clone)]
pub struct TaskDatasets {
    pub image_heavy: Vec<Sample>,
    pub text_heavy: Vec<Sample>,
    pub vqa: Vec<Sample>,
}

impl TaskDatasets {
    /// Self-generates all three training corpora from the generator config.
    pub fn generate(generator: &GeneratorConfig, n_per_task: usize) -> Result<TaskDatasets> {
        Ok(TaskDatasets {
            image_heavy: generate_dataset(generator, TaskKind::ImageHeavy, Split::Train, n_per_task)?,
            text_heavy: generate_dataset(generator, TaskKind::TextHeavy, Split::Train, n_per_task)?,
            vqa: generate_dataset(generator, TaskKind::Vqa, Split::Train, n_per_task)?,
        })
    }

    fn check(&self, flags: &MethodFlags) -> Result<()> {
        if self.vqa.is_empty() {
            return Err(Error::Data("VQA training set is empty".into()));
        }
        if !flags.vqa_only && (self.image_heavy.is_empty() || self.text_heavy.is_empty()) {
            return Err(Error::Data("mixture training needs unimodal datasets".into()));
        }
        Ok(())
    }
}

/// One training batch: clean draws plus heuristic variants, each variant
/// tagged with the index of its origin among `originals`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub originals: Vec<Sample>,
    pub heuristic_variants: Vec<(usize, Sample)>,
}

/// Shuffled cursor over one dataset; wraps with a reshuffle when exhausted.
struct Cursor {
    order: Vec<usize>,
    next: usize,
}

impl Cursor {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Cursor {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cursor { order, next: 0 }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.next == self.order.len() {
            self.order.shuffle(rng);
            self.next = 0;
        }
        let i = self.order[self.next];
        self.next += 1;
        i
    }
}

/// Draws method-shaped batches. Heuristic variant kinds are sampled
/// uniformly from the in-distribution operators of the origin's task; the
/// held-out operators never appear in training.
pub struct BatchSampler {
    counts: (usize, usize, usize),
    variants_per_sample: usize,
    flags: MethodFlags,
    img_cursor: Cursor,
    text_cursor: Cursor,
    vqa_cursor: Cursor,
}

impl BatchSampler {
    pub fn new(
        datasets: &TaskDatasets,
        mixture: &MixtureConfig,
        method: Method,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchSampler> {
        mixture.validate()?;
        let flags = method.flags();
        datasets.check(&flags)?;
        let counts = if flags.vqa_only { (0, 0, mixture.batch_size) } else { mixture.counts() };
        Ok(BatchSampler {
            counts,
            variants_per_sample: mixture.per_sample_perturbed_variants,
            flags,
            img_cursor: Cursor::new(datasets.image_heavy.len(), rng),
            text_cursor: Cursor::new(datasets.text_heavy.len(), rng),
            vqa_cursor: Cursor::new(datasets.vqa.len(), rng),
        })
    }

    /// Clean VQA draws per batch; the epoch anchor.
    pub fn vqa_per_batch(&self) -> usize {
        self.counts.2
    }

    pub fn next_batch(
        &mut self,
        datasets: &TaskDatasets,
        generator: &GeneratorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Batch> {
        let (n_img, n_text, n_vqa) = self.counts;
        let mut originals = Vec::with_capacity(n_img + n_text + n_vqa);
        for _ in 0..n_img {
            originals.push(datasets.image_heavy[self.img_cursor.draw(rng)].clone());
        }
        for _ in 0..n_text {
            originals.push(datasets.text_heavy[self.text_cursor.draw(rng)].clone());
        }
        for _ in 0..n_vqa {
            originals.push(datasets.vqa[self.vqa_cursor.draw(rng)].clone());
        }

        let mut heuristic_variants = Vec::new();
        if self.flags.use_heuristic_aug {
            for (i, origin) in originals.iter().enumerate() {
                if origin.task_kind == TaskKind::Vqa {
                    continue;
                }
                let kinds = PerturbationKind::in_distribution(origin.task_kind);
                for _ in 0..self.variants_per_sample {
                    let kind = kinds[rng.gen_range(0..kinds.len())];
                    let variant = apply_perturbation(origin, kind, generator, rng)?;
                    heuristic_variants.push((i, variant));
                }
            }
        }
        Ok(Batch { originals, heuristic_variants })
    }
}

/// Step metrics, one JSON line each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub sft: f64,
    pub adv: f64,
    pub consistency: f64,
    pub total: f64,
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Model plus everything the loop mutates between steps.
pub struct TrainState {
    model: Model,
    flags: MethodFlags,
    adv: AdvConfig,
    consistency: ConsistencyConfig,
    optimizer: OptimizerConfig,
    moments: HashMap<String, Moments>,
    step: u64,
    rng: ChaCha8Rng,
}

/// Adversarial settings with the mode the method grid dictates.
pub fn effective_adv_config(method: Method, base: &AdvConfig) -> AdvConfig {
    match method.flags().adversarial {
        Some(mode) => AdvConfig { mode, ..*base },
        None => *base,
    }
}

/// Consistency settings with the divergence the method grid dictates.
pub fn effective_consistency_config(method: Method, base: &ConsistencyConfig) -> ConsistencyConfig {
    match method.flags().consistency {
        Some(divergence) => ConsistencyConfig { divergence, ..*base },
        None => *base,
    }
}

impl TrainState {
    pub fn new(cfg: &TrainingConfig) -> Result<TrainState> {
        cfg.validate()?;
        Ok(TrainState {
            model: Model::new(cfg.model)?,
            flags: cfg.method.flags(),
            adv: effective_adv_config(cfg.method, &cfg.adversarial),
            consistency: effective_consistency_config(cfg.method, &cfg.consistency),
            optimizer: cfg.optimizer,
            moments: HashMap::new(),
            step: 0,
            rng: stream(cfg.seed, &format!("train/{}", cfg.method.label())),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn zero_grads(&self) {
        for (_, t) in self.model.trainable_parameters() {
            t.zero_grad();
        }
    }

    /// One optimizer step over whatever the gradient buffers hold. Adaptive
    /// moments with bias correction, fixed learning rate, frozen encoder
    /// untouched.
    pub fn apply_gradients(&mut self) -> Result<()> {
        let t = (self.step + 1) as i32;
        let lr = self.optimizer.learning_rate;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, tensor) in self.model.trainable_parameters() {
            let grad = tensor.grad().ok_or_else(|| {
                Error::Contract(format!("parameter {name} has no gradient to apply"))
            })?;
            let slot = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; grad.len()], v: vec![0.0; grad.len()] });
            if slot.m.len() != grad.len() {
                return Err(Error::Contract(format!(
                    "moment shape for {name} diverged from its gradient"
                )));
            }
            let mut data = tensor.to_vec();
            for j in 0..grad.len() {
                let g = grad[j];
                slot.m[j] = BETA1 * slot.m[j] + (1.0 - BETA1) * g;
                slot.v[j] = BETA2 * slot.v[j] + (1.0 - BETA2) * g * g;
                let m_hat = slot.m[j] / bc1;
                let v_hat = slot.v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            tensor.set_data(&data)?;
        }
        self.step += 1;
        Ok(())
    }

    /// Runs one batch through the objective and takes one optimizer step.
    /// Any error leaves parameters, moments and the step counter unchanged.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.zero_grads();
        let result = self.step_inner(batch);
        if result.is_err() {
            self.zero_grads();
        }
        result
    }

    fn step_inner(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        if batch.originals.is_empty() {
            return Err(Error::Contract("batch has no originals".into()));
        }
        let tape = Tape::new();
        let mut sft = Vec::new();
        let mut adv = Vec::new();
        let mut cons = Vec::new();

        let mut origin_embs = Vec::with_capacity(batch.originals.len());
        let mut origin_logits = Vec::with_capacity(batch.originals.len());
        for s in &batch.originals {
            let emb = self.model.embed(&tape, s)?;
            let logits = self.model.answer_logits(&tape, &emb.embeddings)?;
            sft.push(cross_entropy(&tape, &logits, s.answer)?);
            origin_embs.push(emb);
            origin_logits.push(logits);
        }

        let mut variant_embs = Vec::with_capacity(batch.heuristic_variants.len());
        for (origin_idx, variant) in &batch.heuristic_variants {
            let anchor = origin_logits.get(*origin_idx).ok_or_else(|| {
                Error::Contract(format!("variant points at missing origin {origin_idx}"))
            })?;
            if batch.originals[*origin_idx].id != variant.origin_id {
                return Err(Error::Contract(format!(
                    "variant {} is not derived from its paired origin",
                    variant.id
                )));
            }
            let emb = self.model.embed(&tape, variant)?;
            let logits = self.model.answer_logits(&tape, &emb.embeddings)?;
            sft.push(cross_entropy(&tape, &logits, variant.answer)?);
            if self.flags.consistency.is_some() {
                cons.push(consistency_divergence(&tape, anchor, &logits, &self.consistency)?);
            }
            variant_embs.push((*origin_idx, variant, emb));
        }

        if self.flags.adversarial.is_some() {
            let run_adv = |task: TaskKind,
                               answer: usize,
                               emb: &crate::model::EmbeddedSequence,
                               anchor: &Tensor,
                               state: &mut TrainState,
                               adv: &mut Vec<Tensor>,
                               cons: &mut Vec<Tensor>|
             -> Result<()> {
                let cfg = state.adv;
                let (out, _) = adversarial_perturb(
                    &state.model,
                    task,
                    answer,
                    emb,
                    &cfg,
                    &tape,
                    &mut state.rng,
                )?;
                if out.perturbed {
                    let logits = state.model.answer_logits(&tape, &out.embeddings)?;
                    adv.push(cross_entropy(&tape, &logits, answer)?);
                    if state.flags.consistency.is_some() {
                        cons.push(consistency_divergence(
                            &tape,
                            anchor,
                            &logits,
                            &state.consistency,
                        )?);
                    }
                }
                Ok(())
            };

            for (i, s) in batch.originals.iter().enumerate() {
                let anchor = origin_logits[i].clone();
                run_adv(s.task_kind, s.answer, &origin_embs[i], &anchor, self, &mut adv, &mut cons)?;
            }
            for (origin_idx, variant, emb) in &variant_embs {
                // The pair stays anchored to the clean origin, not to the
                // heuristic variant the ascent started from.
                let anchor = origin_logits[*origin_idx].clone();
                run_adv(variant.task_kind, variant.answer, emb, &anchor, self, &mut adv, &mut cons)?;
            }
        }

        let lambda = if self.flags.consistency.is_some() { self.consistency.lambda } else { 0.0 };
        let (total, breakdown) = total_loss(&tape, &sft, &adv, &cons, lambda)?;
        tape.backward(&total)?;
        self.apply_gradients()?;
        Ok(breakdown)
    }
}

/// Outputs of one training run.
pub struct RunArtifacts {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Steps in one epoch: a full pass over the VQA corpus at the batch's VQA
/// draw count.
pub fn steps_per_epoch(n_vqa: usize, vqa_per_batch: usize) -> usize {
    n_vqa.div_ceil(vqa_per_batch)
}

/// Trains one method from scratch and writes `model.bin` plus
/// `metrics.jsonl` into the config's output directory.
pub fn run_training(cfg: &TrainingConfig, datasets: &TaskDatasets) -> Result<RunArtifacts> {
    let mut state = TrainState::new(cfg)?;
    let mut sampler_rng = stream(cfg.seed, &format!("batches/{}", cfg.method.label()));
    let mut sampler = BatchSampler::new(datasets, &cfg.mixture, cfg.method, &mut sampler_rng)?;

    let out_dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let checkpoint_path = out_dir.join("model.bin");

    let total_steps = cfg.epochs * steps_per_epoch(datasets.vqa.len(), sampler.vqa_per_batch());
    let mut metrics = Vec::with_capacity(total_steps);
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    for _ in 0..total_steps {
        let batch = sampler.next_batch(datasets, &cfg.generator, &mut sampler_rng)?;
        let breakdown = state.train_step(&batch)?;
        let line = StepMetrics {
            step: state.step_count(),
            sft: breakdown.sft,
            adv: breakdown.adv,
            consistency: breakdown.consistency,
            total: breakdown.total,
        };
        serde_json::to_writer(&mut metrics_file, &line)?;
        metrics_file.write_all(b"\n")?;
        metrics.push(line);
    }
    metrics_file.flush()?;

    let model = state.into_model();
    checkpoint::save(&model, &checkpoint_path)?;
    Ok(RunArtifacts { model, metrics, checkpoint_path, metrics_path })
}
