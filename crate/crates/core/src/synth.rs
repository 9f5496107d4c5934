//! Synthetic two-modality multiple-choice benchmark.
//!
//! Three task families share one feature space and one token vocabulary:
//!
//! - **image-heavy**: the answer is the class of the image features
//!   (nearest prototype). With probability `p_spurious` the text carries an
//!   aligned option claim, so a model that reads claims instead of images
//!   looks perfect on clean data and collapses the moment a claim lies.
//! - **text-heavy**: the answer is the option token following the claim
//!   marker; the image is drawn from a random class and is irrelevant.
//! - **vqa**: the image class is XOR-combined with a text-carried offset
//!   (encoded by class-description words), so neither modality suffices
//!   alone. A fraction `p_spurious_vqa` of VQA text additionally carries an
//!   aligned claim; this mirrors how instruction-tuning corpora leak answer
//!   text, and it is what lets a VQA-only model inherit the shortcut.
//!
//! Perturbation operators edit exactly the task-irrelevant modality, so the
//! clean label function still yields the stored answer for every perturbed
//! sample. Two operator families are held out of training entirely and serve
//! as out-of-distribution probes.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{gauss, stream};

pub const DESC_TOKENS_PER_CLASS: usize = 4;
const TEMPLATE_LEN: usize = 4;
/// The text-task preamble is longer, so its claim marker never sits on the
/// rows where the other two families place theirs.
const TEXT_TEMPLATE_LEN: usize = 6;
const FACT_TOKENS: usize = 16;
const OOD_TOKENS: usize = 16;
/// Amplitude of the held-out striped image pattern.
const STRIPE_AMPLITUDE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    ImageHeavy,
    TextHeavy,
    #[serde(rename = "VQA")]
    Vqa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::ImageHeavy, TaskKind::TextHeavy, TaskKind::Vqa];

    /// Stable lowercase name used in ids, file names and report rows.
    pub fn slug(self) -> &'static str {
        match self {
            TaskKind::ImageHeavy => "image-heavy",
            TaskKind::TextHeavy => "text-heavy",
            TaskKind::Vqa => "vqa",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbationKind {
    /// Prepends 4-8 tokens from the fact range to image-heavy text.
    UnrelatedFacts,
    /// Prepends a claim for a wrong option plus 2-4 description tokens of
    /// that wrong class to image-heavy text. Never names the correct option.
    MisleadingDescription,
    /// Replaces text-heavy image features with i.i.d. uniform [0, 1) values.
    RandomPixels,
    /// Replaces text-heavy image features with a genuine sample of a
    /// different class.
    IrrelevantRealImage,
    /// All-zero canvas.
    FullBlack,
    /// All-one canvas.
    FullWhite,
    /// Interleaves held-out tokens into image-heavy text (OOD).
    OodNoisyText,
    /// Replaces text-heavy image features with a striped pattern built from
    /// values never produced by the generator (OOD).
    OodStructuredImage,
}

impl PerturbationKind {
    /// The task family this operator is defined for: text-side operators
    /// attack image-heavy samples, image-side operators attack text-heavy
    /// samples.
    pub fn applies_to(self) -> TaskKind {
        match self {
            PerturbationKind::UnrelatedFacts
            | PerturbationKind::MisleadingDescription
            | PerturbationKind::OodNoisyText => TaskKind::ImageHeavy,
            _ => TaskKind::TextHeavy,
        }
    }

    pub fn is_ood(self) -> bool {
        matches!(self, PerturbationKind::OodNoisyText | PerturbationKind::OodStructuredImage)
    }

    /// In-distribution operators for a task, in evaluation order.
    pub fn in_distribution(task: TaskKind) -> &'static [PerturbationKind] {
        match task {
            TaskKind::ImageHeavy => {
                &[PerturbationKind::UnrelatedFacts, PerturbationKind::MisleadingDescription]
            }
            TaskKind::TextHeavy => &[
                PerturbationKind::RandomPixels,
                PerturbationKind::IrrelevantRealImage,
                PerturbationKind::FullBlack,
                PerturbationKind::FullWhite,
            ],
            TaskKind::Vqa => &[],
        }
    }

    /// Held-out operators for a task.
    pub fn out_of_distribution(task: TaskKind) -> &'static [PerturbationKind] {
        match task {
            TaskKind::ImageHeavy => &[PerturbationKind::OodNoisyText],
            TaskKind::TextHeavy => &[PerturbationKind::OodStructuredImage],
            TaskKind::Vqa => &[],
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            PerturbationKind::UnrelatedFacts => "unrelated-facts",
            PerturbationKind::MisleadingDescription => "misleading-description",
            PerturbationKind::RandomPixels => "random-pixels",
            PerturbationKind::IrrelevantRealImage => "irrelevant-real-image",
            PerturbationKind::FullBlack => "full-black",
            PerturbationKind::FullWhite => "full-white",
            PerturbationKind::OodNoisyText => "ood-noisy-text",
            PerturbationKind::OodStructuredImage => "ood-structured-image",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// One multiple-choice sample. `origin_id` ties a perturbed sample back to
/// the clean sample it was derived from; for clean samples it equals `id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task_kind: TaskKind,
    pub image_features: Vec<f64>,
    pub text_tokens: Vec<usize>,
    pub n_options: usize,
    pub answer: usize,
    pub perturbation: Option<PerturbationKind>,
    pub origin_id: String,
}

impl Sample {
    pub fn is_clean(&self) -> bool {
        self.perturbation.is_none()
    }
}

/// Disjoint half-open token ranges carving up the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub options: (usize, usize),
    pub claim_marker: usize,
    /// Image-referencing preamble, shared by the image-heavy and VQA
    /// families so VQA training covers every token image-heavy eval uses.
    pub template_image: (usize, usize),
    pub template_text: (usize, usize),
    pub class_descriptions: (usize, usize),
    pub facts: (usize, usize),
    pub ood: (usize, usize),
}

impl VocabLayout {
    pub fn for_classes(n_classes: usize) -> Self {
        let k = n_classes;
        let claim_marker = k;
        let t_img = (k + 1, k + 1 + TEMPLATE_LEN);
        let t_text = (t_img.1, t_img.1 + TEXT_TEMPLATE_LEN);
        let desc = (t_text.1, t_text.1 + DESC_TOKENS_PER_CLASS * n_classes);
        let facts = (desc.1, desc.1 + FACT_TOKENS);
        let ood = (facts.1, facts.1 + OOD_TOKENS);
        VocabLayout {
            options: (0, k),
            claim_marker,
            template_image: t_img,
            template_text: t_text,
            class_descriptions: desc,
            facts,
            ood,
        }
    }

    /// Smallest vocabulary size the layout fits in.
    pub fn tokens_required(&self) -> usize {
        self.ood.1
    }

    /// Description tokens for one class.
    pub fn desc_range(&self, class: usize) -> std::ops::Range<usize> {
        let start = self.class_descriptions.0 + class * DESC_TOKENS_PER_CLASS;
        start..start + DESC_TOKENS_PER_CLASS
    }

    /// Which class a description token belongs to, if any.
    pub fn desc_class(&self, token: usize) -> Option<usize> {
        (self.class_descriptions.0..self.class_descriptions.1)
            .contains(&token)
            .then(|| (token - self.class_descriptions.0) / DESC_TOKENS_PER_CLASS)
    }

    fn ranges(&self) -> Vec<(usize, usize)> {
        vec![
            self.options,
            (self.claim_marker, self.claim_marker + 1),
            self.template_image,
            self.template_text,
            self.class_descriptions,
            self.facts,
            self.ood,
        ]
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.options != (0, n_classes) {
            return Err(Error::Config(format!(
                "option range {:?} must be (0, {n_classes})",
                self.options
            )));
        }
        if self.class_descriptions.1 - self.class_descriptions.0 != DESC_TOKENS_PER_CLASS * n_classes {
            return Err(Error::Config("class description range has the wrong size".into()));
        }
        let mut ranges = self.ranges();
        ranges.sort_unstable();
        for pair in ranges.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(Error::Config(format!(
                    "vocab ranges {:?} and {:?} overlap",
                    pair[0], pair[1]
                )));
            }
        }
        if ranges.iter().any(|r| r.0 >= r.1) {
            return Err(Error::Config("empty vocab range".into()));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a benchmark bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub d_feat: usize,
    pub feature_noise_sigma: f64,
    /// Probability that clean image-heavy training text carries an option
    /// claim aligned with the true answer.
    pub p_spurious: f64,
    /// Aligned-claim rate for VQA text. High enough that claim-following
    /// dominates what a VQA-only run learns, while the claim-free remainder
    /// keeps the task unsolvable from either modality alone.
    pub p_spurious_vqa: f64,
    pub max_text_tokens: usize,
    pub vocab: VocabLayout,
    /// One feature prototype per class, drawn once from `seed`.
    pub class_prototypes: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::new(0)
    }
}

impl GeneratorConfig {
    pub fn new(seed: u64) -> Self {
        let n_classes = 4;
        let d_feat = 16;
        let mut rng = stream(seed, "class-prototypes");
        let class_prototypes =
            (0..n_classes).map(|_| (0..d_feat).map(|_| gauss(&mut rng)).collect()).collect();
        GeneratorConfig {
            n_classes,
            d_feat,
            feature_noise_sigma: 0.1,
            p_spurious: 0.9,
            p_spurious_vqa: 0.95,
            max_text_tokens: 24,
            vocab: VocabLayout::for_classes(n_classes),
            class_prototypes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.d_feat == 0 {
            return Err(Error::Config("d_feat must be positive".into()));
        }
        for p in [self.p_spurious, self.p_spurious_vqa] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("claim probability {p} outside [0, 1]")));
            }
        }
        if !(self.feature_noise_sigma.is_finite() && self.feature_noise_sigma >= 0.0) {
            return Err(Error::Config("feature_noise_sigma must be >= 0".into()));
        }
        if self.max_text_tokens < 2 * TEMPLATE_LEN + 8 {
            return Err(Error::Config(format!(
                "max_text_tokens {} leaves no room for perturbed text",
                self.max_text_tokens
            )));
        }
        self.vocab.validate(self.n_classes)?;
        if self.class_prototypes.len() != self.n_classes
            || self.class_prototypes.iter().any(|p| p.len() != self.d_feat)
        {
            return Err(Error::Config("class_prototypes must be n_classes x d_feat".into()));
        }
        for a in 0..self.n_classes {
            for b in a + 1..self.n_classes {
                let d2 = dist2(&self.class_prototypes[a], &self.class_prototypes[b]);
                if d2.sqrt() < 8.0 * self.feature_noise_sigma {
                    return Err(Error::Config(format!(
                        "prototypes {a} and {b} are too close for noise sigma {}",
                        self.feature_noise_sigma
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn slug(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest class prototype (ties broken toward lower index).
pub fn nearest_prototype(cfg: &GeneratorConfig, features: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, proto) in cfg.class_prototypes.iter().enumerate() {
        let d = dist2(proto, features);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Class features: prototype plus Gaussian noise, redrawn until the nearest
/// prototype is the generating class so the image oracle is exact.
fn class_features(cfg: &GeneratorConfig, class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    for _ in 0..100 {
        let f: Vec<f64> = cfg.class_prototypes[class]
            .iter()
            .map(|p| p + cfg.feature_noise_sigma * gauss(rng))
            .collect();
        if nearest_prototype(cfg, &f) == class {
            return Ok(f);
        }
    }
    Err(Error::Data(format!(
        "could not draw separable features for class {class}; prototypes too close for sigma {}",
        cfg.feature_noise_sigma
    )))
}

fn pick_descriptions(cfg: &GeneratorConfig, class: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let range = cfg.vocab.desc_range(class);
    (0..n).map(|_| rng.gen_range(range.clone())).collect()
}

fn template(range: (usize, usize)) -> Vec<usize> {
    (range.0..range.1).collect()
}

fn make_sample(cfg: &GeneratorConfig, kind: TaskKind, split: Split, index: usize) -> Result<Sample> {
    let mut rng = stream(cfg.seed, &format!("sample/{}/{}/{index}", kind.slug(), split.slug()));
    let k = cfg.n_classes;
    let (image_features, text_tokens, answer) = match kind {
        TaskKind::ImageHeavy => {
            let class = rng.gen_range(0..k);
            let features = class_features(cfg, class, &mut rng)?;
            let mut text = template(cfg.vocab.template_image);
            if rng.gen::<f64>() < cfg.p_spurious {
                text.push(cfg.vocab.claim_marker);
                text.push(class);
            }
            (features, text, class)
        }
        TaskKind::TextHeavy => {
            let answer = rng.gen_range(0..k);
            let image_class = rng.gen_range(0..k);
            let features = class_features(cfg, image_class, &mut rng)?;
            let mut text = template(cfg.vocab.template_text);
            text.push(cfg.vocab.claim_marker);
            text.push(answer);
            text.extend(pick_descriptions(cfg, answer, 2, &mut rng));
            (features, text, answer)
        }
        TaskKind::Vqa => {
            let class = rng.gen_range(0..k);
            let features = class_features(cfg, class, &mut rng)?;
            let offset = rng.gen_range(0..k);
            let answer = (class ^ offset) % k;
            let mut text = template(cfg.vocab.template_image);
            // Claim directly after the template, descriptions after it, so a
            // leaked claim occupies the same rows on every task family.
            if rng.gen::<f64>() < cfg.p_spurious_vqa {
                text.push(cfg.vocab.claim_marker);
                text.push(answer);
            }
            text.extend(pick_descriptions(cfg, offset, 2, &mut rng));
            (features, text, answer)
        }
    };
    let id = format!("{}-{}-{index:05}", kind.slug(), split.slug());
    Ok(Sample {
        id: id.clone(),
        task_kind: kind,
        image_features,
        text_tokens,
        n_options: k,
        answer,
        perturbation: None,
        origin_id: id,
    })
}

/// Generates `n` clean samples of one task family. Fully determined by
/// `(cfg, kind, split, n)`; sample `i` does not depend on `n`.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    kind: TaskKind,
    split: Split,
    n: usize,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Parameter("dataset size must be positive".into()));
    }
    (0..n).map(|i| make_sample(cfg, kind, split, i)).collect()
}

/// Applies one perturbation operator to a clean sample.
///
/// The task-relevant modality is never touched, so the stored answer stays
/// correct by construction.
pub fn apply_perturbation(
    sample: &Sample,
    kind: PerturbationKind,
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    if sample.perturbation.is_some() {
        return Err(Error::Data(format!(
            "sample {} is already perturbed; operators apply to clean samples",
            sample.id
        )));
    }
    if kind.applies_to() != sample.task_kind {
        return Err(Error::Data(format!(
            "{} does not apply to {} samples",
            kind.slug(),
            sample.task_kind.slug()
        )));
    }

    let mut out = sample.clone();
    out.id = format!("{}#{}", sample.origin_id, kind.slug());
    out.perturbation = Some(kind);

    match kind {
        PerturbationKind::UnrelatedFacts => {
            let n = rng.gen_range(4..=8);
            let mut prefix: Vec<usize> =
                (0..n).map(|_| rng.gen_range(cfg.vocab.facts.0..cfg.vocab.facts.1)).collect();
            prefix.extend_from_slice(&out.text_tokens);
            out.text_tokens = prefix;
        }
        PerturbationKind::MisleadingDescription => {
            let wrong = {
                let r = rng.gen_range(0..cfg.n_classes - 1);
                if r >= sample.answer {
                    r + 1
                } else {
                    r
                }
            };
            let n_desc = rng.gen_range(2..=4);
            let mut prefix = vec![cfg.vocab.claim_marker, wrong];
            prefix.extend(pick_descriptions(cfg, wrong, n_desc, rng));
            prefix.extend_from_slice(&out.text_tokens);
            out.text_tokens = prefix;
        }
        PerturbationKind::OodNoisyText => {
            let mut text = Vec::with_capacity(2 * out.text_tokens.len());
            for &tok in &out.text_tokens {
                text.push(tok);
                if text.len() < cfg.max_text_tokens {
                    text.push(rng.gen_range(cfg.vocab.ood.0..cfg.vocab.ood.1));
                }
            }
            text.truncate(cfg.max_text_tokens);
            out.text_tokens = text;
        }
        PerturbationKind::RandomPixels => {
            out.image_features = (0..cfg.d_feat).map(|_| rng.gen::<f64>()).collect();
        }
        PerturbationKind::IrrelevantRealImage => {
            let current = nearest_prototype(cfg, &sample.image_features);
            let other = {
                let r = rng.gen_range(0..cfg.n_classes - 1);
                if r >= current {
                    r + 1
                } else {
                    r
                }
            };
            out.image_features = class_features(cfg, other, rng)?;
        }
        PerturbationKind::FullBlack => {
            out.image_features = vec![0.0; cfg.d_feat];
        }
        PerturbationKind::FullWhite => {
            out.image_features = vec![1.0; cfg.d_feat];
        }
        PerturbationKind::OodStructuredImage => {
            let period = [1usize, 2, 4][rng.gen_range(0..3)];
            out.image_features = (0..cfg.d_feat)
                .map(|i| if (i / period) % 2 == 0 { STRIPE_AMPLITUDE } else { -STRIPE_AMPLITUDE })
                .collect();
        }
    }

    if out.text_tokens.len() > cfg.max_text_tokens {
        return Err(Error::Data(format!(
            "perturbed text for {} exceeds the {}-token cap",
            out.id, cfg.max_text_tokens
        )));
    }
    Ok(out)
}

/// The clean label function for each task family, computed from raw sample
/// content. Used as an independent check that perturbations preserve labels.
pub fn oracle_label(cfg: &GeneratorConfig, sample: &Sample) -> Option<usize> {
    match sample.task_kind {
        TaskKind::ImageHeavy => Some(nearest_prototype(cfg, &sample.image_features)),
        TaskKind::TextHeavy => claim_after_marker(cfg, &sample.text_tokens),
        TaskKind::Vqa => {
            let class = nearest_prototype(cfg, &sample.image_features);
            let offset = sample.text_tokens.iter().find_map(|&t| cfg.vocab.desc_class(t))?;
            Some((class ^ offset) % cfg.n_classes)
        }
    }
}

/// The option token following the first claim marker, if present.
pub fn claim_after_marker(cfg: &GeneratorConfig, tokens: &[usize]) -> Option<usize> {
    tokens
        .windows(2)
        .find(|w| w[0] == cfg.vocab.claim_marker)
        .and_then(|w| (w[1] < cfg.n_classes).then_some(w[1]))
}

pub fn validate_sample(s: &Sample) -> Result<()> {
    if s.id.is_empty() || s.origin_id.is_empty() {
        return Err(Error::Data("sample ids must be non-empty".into()));
    }
    if s.n_options < 2 {
        return Err(Error::Data(format!("sample {}: n_options {} < 2", s.id, s.n_options)));
    }
    if s.answer >= s.n_options {
        return Err(Error::Data(format!(
            "sample {}: answer {} out of range for {} options",
            s.id, s.answer, s.n_options
        )));
    }
    if !s.image_features.iter().all(|v| v.is_finite()) {
        return Err(Error::Data(format!("sample {}: non-finite image features", s.id)));
    }
    match s.perturbation {
        None if s.origin_id != s.id => Err(Error::Data(format!(
            "sample {}: clean samples must have origin_id == id",
            s.id
        ))),
        Some(_) if s.origin_id == s.id => Err(Error::Data(format!(
            "sample {}: perturbed samples must reference a distinct origin",
            s.id
        ))),
        Some(k) if k.applies_to() != s.task_kind => Err(Error::Data(format!(
            "sample {}: perturbation {} does not apply to {}",
            s.id,
            k.slug(),
            s.task_kind.slug()
        ))),
        _ => Ok(()),
    }
}

/// Writes samples as JSON lines (UTF-8, LF terminated).
pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut file, s)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a JSONL dataset, enforcing per-sample invariants. Errors carry the
/// 1-based line number.
pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        validate_sample(&sample).map_err(|e| Error::Parse { line: i + 1, detail: e.to_string() })?;
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::stream;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig::new(0)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&cfg(), TaskKind::Vqa, Split::Train, 32).unwrap();
        let b = generate_dataset(&cfg(), TaskKind::Vqa, Split::Train, 32).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&GeneratorConfig::new(1), TaskKind::Vqa, Split::Train, 32).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_i_does_not_depend_on_dataset_size() {
        let small = generate_dataset(&cfg(), TaskKind::ImageHeavy, Split::Test, 5).unwrap();
        let large = generate_dataset(&cfg(), TaskKind::ImageHeavy, Split::Test, 50).unwrap();
        assert_eq!(small[..], large[..5]);
    }

    #[test]
    fn image_oracle_is_exact_on_clean_image_heavy() {
        let cfg = cfg();
        let data = generate_dataset(&cfg, TaskKind::ImageHeavy, Split::Test, 500).unwrap();
        for s in &data {
            assert_eq!(nearest_prototype(&cfg, &s.image_features), s.answer, "sample {}", s.id);
        }
    }

    #[test]
    fn shortcut_exists_at_the_configured_rate() {
        let cfg = cfg();
        let data = generate_dataset(&cfg, TaskKind::ImageHeavy, Split::Train, 2000).unwrap();
        let with_claim = data
            .iter()
            .filter(|s| claim_after_marker(&cfg, &s.text_tokens) == Some(s.answer))
            .count();
        let rate = with_claim as f64 / data.len() as f64;
        assert!((rate - cfg.p_spurious).abs() < 0.03, "aligned-claim rate {rate}");
        // The claim, when present, always names the answer: it predicts the
        // label at least at the planted rate.
        assert!(rate >= 0.85);
    }

    #[test]
    fn text_heavy_answers_follow_the_claim_rule() {
        let cfg = cfg();
        for s in generate_dataset(&cfg, TaskKind::TextHeavy, Split::Train, 200).unwrap() {
            assert_eq!(claim_after_marker(&cfg, &s.text_tokens), Some(s.answer));
        }
    }

    #[test]
    fn vqa_needs_both_modalities() {
        let cfg = cfg();
        let data = generate_dataset(&cfg, TaskKind::Vqa, Split::Train, 2000).unwrap();
        let mut image_alone = 0;
        let mut offsets_seen = std::collections::HashSet::new();
        for s in &data {
            let class = nearest_prototype(&cfg, &s.image_features);
            let offset = s.text_tokens.iter().find_map(|&t| cfg.vocab.desc_class(t)).unwrap();
            offsets_seen.insert(offset);
            assert_eq!((class ^ offset) % cfg.n_classes, s.answer);
            if class == s.answer {
                image_alone += 1;
            }
        }
        // The image class alone matches the answer only when the offset is 0.
        let frac = image_alone as f64 / data.len() as f64;
        assert!(frac < 0.35, "image-only agreement {frac}");
        assert_eq!(offsets_seen.len(), cfg.n_classes);
    }

    #[test]
    fn misleading_description_never_names_the_answer() {
        let cfg = cfg();
        let data = generate_dataset(&cfg, TaskKind::ImageHeavy, Split::Train, 300).unwrap();
        let mut rng = stream(9, "md-test");
        for s in &data {
            let p =
                apply_perturbation(s, PerturbationKind::MisleadingDescription, &cfg, &mut rng).unwrap();
            // The prepended claim is at the front.
            assert_eq!(p.text_tokens[0], cfg.vocab.claim_marker);
            let claimed = p.text_tokens[1];
            assert_ne!(claimed, s.answer);
            assert!(claimed < cfg.n_classes);
            // Description tokens belong to the wrongly claimed class.
            assert!(p.text_tokens[2..]
                .iter()
                .take_while(|&&t| cfg.vocab.desc_class(t).is_some())
                .all(|&t| cfg.vocab.desc_class(t) == Some(claimed)));
            assert_eq!(p.answer, s.answer);
            assert_eq!(p.origin_id, s.id);
            assert_eq!(p.perturbation, Some(PerturbationKind::MisleadingDescription));
        }
    }

    #[test]
    fn perturbations_preserve_the_clean_label_function() {
        let cfg = cfg();
        let mut rng = stream(4, "fidelity");
        for kind in [
            PerturbationKind::UnrelatedFacts,
            PerturbationKind::MisleadingDescription,
            PerturbationKind::OodNoisyText,
        ] {
            for s in generate_dataset(&cfg, TaskKind::ImageHeavy, Split::Test, 50).unwrap() {
                let p = apply_perturbation(&s, kind, &cfg, &mut rng).unwrap();
                assert_eq!(oracle_label(&cfg, &p), Some(p.answer), "{kind:?}");
                assert_eq!(p.image_features, s.image_features, "text-side op touched the image");
            }
        }
        for kind in [
            PerturbationKind::RandomPixels,
            PerturbationKind::IrrelevantRealImage,
            PerturbationKind::FullBlack,
            PerturbationKind::FullWhite,
            PerturbationKind::OodStructuredImage,
        ] {
            for s in generate_dataset(&cfg, TaskKind::TextHeavy, Split::Test, 50).unwrap() {
                let p = apply_perturbation(&s, kind, &cfg, &mut rng).unwrap();
                assert_eq!(oracle_label(&cfg, &p), Some(p.answer), "{kind:?}");
                assert_eq!(p.text_tokens, s.text_tokens, "image-side op touched the text");
            }
        }
    }

    #[test]
    fn unrelated_facts_prepends_four_to_eight_fact_tokens() {
        let cfg = cfg();
        let s = &generate_dataset(&cfg, TaskKind::ImageHeavy, Split::Test, 1).unwrap()[0];
        let mut rng = stream(11, "uf");
        let mut lengths = std::collections::HashSet::new();
        for _ in 0..100 {
            let p = apply_perturbation(s, PerturbationKind::UnrelatedFacts, &cfg, &mut rng).unwrap();
            let added = p.text_tokens.len() - s.text_tokens.len();
            assert!((4..=8).contains(&added));
            lengths.insert(added);
            assert!(p.text_tokens[..added]
                .iter()
                .all(|&t| (cfg.vocab.facts.0..cfg.vocab.facts.1).contains(&t)));
            assert_eq!(p.text_tokens[added..], s.text_tokens[..]);
        }
        assert!(lengths.len() > 2, "prefix length should vary");
    }

    #[test]
    fn canvas_conventions_are_fixed() {
        let cfg = cfg();
        let s = &generate_dataset(&cfg, TaskKind::TextHeavy, Split::Test, 1).unwrap()[0];
        let mut rng = stream(2, "canvas");
        let black = apply_perturbation(s, PerturbationKind::FullBlack, &cfg, &mut rng).unwrap();
        assert!(black.image_features.iter().all(|&v| v == 0.0));
        let white = apply_perturbation(s, PerturbationKind::FullWhite, &cfg, &mut rng).unwrap();
        assert!(white.image_features.iter().all(|&v| v == 1.0));
        let pixels = apply_perturbation(s, PerturbationKind::RandomPixels, &cfg, &mut rng).unwrap();
        assert!(pixels.image_features.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn irrelevant_real_image_changes_class() {
        let cfg = cfg();
        let mut rng = stream(3, "ri");
        for s in generate_dataset(&cfg, TaskKind::TextHeavy, Split::Test, 100).unwrap() {
            let before = nearest_prototype(&cfg, &s.image_features);
            let p =
                apply_perturbation(&s, PerturbationKind::IrrelevantRealImage, &cfg, &mut rng).unwrap();
            assert_ne!(nearest_prototype(&cfg, &p.image_features), before);
        }
    }

    #[test]
    fn ood_text_tokens_come_from_the_held_out_range_only() {
        let cfg = cfg();
        let mut rng = stream(5, "ood");
        // No clean sample of any kind uses the OOD range.
        for kind in TaskKind::ALL {
            for s in generate_dataset(&cfg, kind, Split::Train, 100).unwrap() {
                assert!(s.text_tokens.iter().all(|&t| !(cfg.vocab.ood.0..cfg.vocab.ood.1).contains(&t)));
            }
        }
        let s = &generate_dataset(&cfg, TaskKind::ImageHeavy, Split::Test, 1).unwrap()[0];
        let p = apply_perturbation(s, PerturbationKind::OodNoisyText, &cfg, &mut rng).unwrap();
        let inserted: Vec<usize> = p
            .text_tokens
            .iter()
            .copied()
            .filter(|t| (cfg.vocab.ood.0..cfg.vocab.ood.1).contains(t))
            .collect();
        assert!(!inserted.is_empty());
        // Original tokens survive in order.
        let kept: Vec<usize> = p
            .text_tokens
            .iter()
            .copied()
            .filter(|t| !(cfg.vocab.ood.0..cfg.vocab.ood.1).contains(t))
            .collect();
        assert_eq!(kept, s.text_tokens);
    }

    #[test]
    fn mismatched_operator_and_task_is_an_error() {
        let cfg = cfg();
        let mut rng = stream(6, "mismatch");
        let ih = &generate_dataset(&cfg, TaskKind::ImageHeavy, Split::Test, 1).unwrap()[0];
        let r = apply_perturbation(ih, PerturbationKind::RandomPixels, &cfg, &mut rng);
        assert!(matches!(r, Err(Error::Data(_))));
        let vqa = &generate_dataset(&cfg, TaskKind::Vqa, Split::Test, 1).unwrap()[0];
        for kind in [PerturbationKind::UnrelatedFacts, PerturbationKind::FullBlack] {
            assert!(apply_perturbation(vqa, kind, &cfg, &mut rng).is_err());
        }
        // Double perturbation is rejected.
        let p = apply_perturbation(ih, PerturbationKind::UnrelatedFacts, &cfg, &mut rng).unwrap();
        assert!(apply_perturbation(&p, PerturbationKind::UnrelatedFacts, &cfg, &mut rng).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_exact_and_validated() {
        let cfg = cfg();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut data = generate_dataset(&cfg, TaskKind::ImageHeavy, Split::Test, 20).unwrap();
        let mut rng = stream(7, "io");
        let extra: Vec<Sample> = data
            .iter()
            .map(|s| apply_perturbation(s, PerturbationKind::MisleadingDescription, &cfg, &mut rng).unwrap())
            .collect();
        data.extend(extra);
        write_dataset(&path, &data).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(data, back);

        // Bytes are stable across writes.
        let path2 = dir.path().join("data2.jsonl");
        write_dataset(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn read_rejects_bad_lines_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let cfg = cfg();
        let good = serde_json::to_string(&generate_dataset(&cfg, TaskKind::Vqa, Split::Test, 1).unwrap()[0]).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        // Invariant violations are caught, not just syntax.
        let mut tampered: Sample = serde_json::from_str(&good).unwrap();
        tampered.answer = tampered.n_options;
        std::fs::write(&path, serde_json::to_string(&tampered).unwrap() + "\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 1, .. })));

        let mut bad_origin: Sample = serde_json::from_str(&good).unwrap();
        bad_origin.origin_id = "somewhere-else".into();
        std::fs::write(&path, serde_json::to_string(&bad_origin).unwrap() + "\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn vocab_ranges_are_disjoint_and_sized() {
        let cfg = cfg();
        cfg.vocab.validate(cfg.n_classes).unwrap();
        assert!(cfg.vocab.tokens_required() <= 96);
        assert_eq!(cfg.vocab.desc_class(cfg.vocab.desc_range(2).start), Some(2));
        assert_eq!(cfg.vocab.desc_class(cfg.vocab.options.0), None);
    }

    #[test]
    fn task_kind_serializes_with_stable_names() {
        assert_eq!(serde_json::to_string(&TaskKind::Vqa).unwrap(), "\"VQA\"");
        assert_eq!(serde_json::to_string(&TaskKind::ImageHeavy).unwrap(), "\"ImageHeavy\"");
        let k: PerturbationKind = serde_json::from_str("\"MisleadingDescription\"").unwrap();
        assert_eq!(k, PerturbationKind::MisleadingDescription);
    }
}
