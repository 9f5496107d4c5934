//! Perturbation-based causal evaluation.
//!
//! Each diagnostic cell pairs a clean test set with copies perturbed in the
//! task-irrelevant modality and reports two numbers: accuracy on the
//! perturbed set and the prediction-change rate, the fraction of samples
//! whose argmax answer differs from their clean counterpart's. A competent
//! model keeps both the accuracy drop and the change rate near zero; a model
//! leaning on the irrelevant modality flips predictions wholesale.
//!
//! Reports are plain data: a versioned JSON document plus a flat CSV with
//! the fixed column order `dataset,perturbation,n,accuracy,delta_cp`. Given
//! the same checkpoint and generator settings, a report is byte-identical
//! across runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seeds::stream;
use crate::synth::{
    apply_perturbation, generate_dataset, GeneratorConfig, PerturbationKind, Sample, Split,
    TaskKind,
};
use crate::adv::AdvMode;
use crate::trainer::{run_training, TaskDatasets};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "dataset,perturbation,n,accuracy,delta_cp";

/// Which perturbation families a diagnostic run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    InDistribution,
    Ood,
    Both,
}

impl SuiteKind {
    pub fn cli_name(self) -> &'static str {
        match self {
            SuiteKind::InDistribution => "in-distribution",
            SuiteKind::Ood => "ood",
            SuiteKind::Both => "both",
        }
    }

    pub fn from_cli(name: &str) -> Option<SuiteKind> {
        [SuiteKind::InDistribution, SuiteKind::Ood, SuiteKind::Both]
            .into_iter()
            .find(|s| s.cli_name() == name)
    }

    fn kinds(self, task: TaskKind) -> Vec<PerturbationKind> {
        let mut out = Vec::new();
        if self != SuiteKind::Ood {
            out.extend_from_slice(PerturbationKind::in_distribution(task));
        }
        if self != SuiteKind::InDistribution {
            out.extend_from_slice(PerturbationKind::out_of_distribution(task));
        }
        out
    }
}

/// Accuracy over one sample list plus the per-sample winning option.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub argmax: Vec<usize>,
}

/// Restricted decoding over every sample; accuracy is the fraction whose
/// winning option equals the label.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation needs at least one sample".into()));
    }
    let mut correct = 0usize;
    let mut argmax = Vec::with_capacity(samples.len());
    for s in samples {
        let dist = model.predict(s)?;
        if dist.argmax == s.answer {
            correct += 1;
        }
        argmax.push(dist.argmax);
    }
    Ok(Evaluation { accuracy: correct as f64 / samples.len() as f64, argmax })
}

/// Rate of argmax flips over matched (clean, perturbed) pairs. Pairs are
/// matched by origin id, so the perturbed list may arrive in any order; the
/// match must be a bijection.
pub fn prediction_change_rate(
    clean: &[Sample],
    clean_argmax: &[usize],
    perturbed: &[Sample],
    perturbed_argmax: &[usize],
) -> Result<f64> {
    if clean.is_empty() || clean.len() != perturbed.len() {
        return Err(Error::Contract(format!(
            "change rate needs equal non-empty lists, got {} clean and {} perturbed",
            clean.len(),
            perturbed.len()
        )));
    }
    if clean.len() != clean_argmax.len() || perturbed.len() != perturbed_argmax.len() {
        return Err(Error::Contract("argmax lists do not cover their samples".into()));
    }
    let mut by_id: HashMap<&str, (usize, bool)> = HashMap::with_capacity(clean.len());
    for (i, s) in clean.iter().enumerate() {
        if by_id.insert(s.id.as_str(), (i, false)).is_some() {
            return Err(Error::Contract(format!("duplicate clean sample id {:?}", s.id)));
        }
    }
    let mut flips = 0usize;
    for (i, p) in perturbed.iter().enumerate() {
        let Some(slot) = by_id.get_mut(p.origin_id.as_str()) else {
            return Err(Error::Contract(format!(
                "perturbed sample {:?} has no clean counterpart {:?}",
                p.id, p.origin_id
            )));
        };
        if slot.1 {
            return Err(Error::Contract(format!(
                "clean sample {:?} is claimed by two perturbed samples",
                p.origin_id
            )));
        }
        slot.1 = true;
        if perturbed_argmax[i] != clean_argmax[slot.0] {
            flips += 1;
        }
    }
    Ok(flips as f64 / perturbed.len() as f64)
}

/// Prediction-change rate computed from fresh model evaluations.
pub fn delta_cp(model: &Model, clean: &[Sample], perturbed: &[Sample]) -> Result<f64> {
    let clean_eval = evaluate(model, clean)?;
    let pert_eval = evaluate(model, perturbed)?;
    prediction_change_rate(clean, &clean_eval.argmax, perturbed, &pert_eval.argmax)
}

/// One row of the diagnostic grid. Clean reference rows have no
/// perturbation and no change rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub dataset_id: TaskKind,
    pub perturbation: Option<PerturbationKind>,
    pub accuracy: f64,
    pub delta_cp: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub config_hash: String,
}

/// The full diagnostic grid for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub version: u32,
    pub method: String,
    pub checkpoint_id: String,
    pub suite: SuiteKind,
    /// Perturbed cells, in dataset-then-operator evaluation order.
    pub cells: Vec<EvalCell>,
    /// One clean cell per dataset, covering the same underlying samples the
    /// perturbed cells were derived from.
    pub clean_reference: Vec<EvalCell>,
    /// Lowest-accuracy operator per dataset, ties broken by evaluation
    /// order.
    pub worst_perturbation: BTreeMap<String, String>,
    pub metadata: ReportMetadata,
}

impl DiagnosticReport {
    pub fn clean_cell(&self, task: TaskKind) -> Option<&EvalCell> {
        self.clean_reference.iter().find(|c| c.dataset_id == task)
    }

    pub fn cell(&self, task: TaskKind, kind: PerturbationKind) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.dataset_id == task && c.perturbation == Some(kind))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<DiagnosticReport> {
        let report: DiagnosticReport = serde_json::from_str(text)?;
        if report.version != REPORT_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "report schema version {} is not {}",
                report.version, REPORT_SCHEMA_VERSION
            )));
        }
        Ok(report)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn read_json(path: &Path) -> Result<DiagnosticReport> {
        DiagnosticReport::from_json(&std::fs::read_to_string(path)?)
    }

    /// Flat CSV, clean rows first. The change-rate column is empty for
    /// clean rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for cell in self.clean_reference.iter().chain(self.cells.iter()) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                cell.dataset_id.slug(),
                cell.perturbation.map_or("none", |k| k.slug()),
                cell.n,
                cell.accuracy,
                cell.delta_cp.map(|d| d.to_string()).unwrap_or_default()
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// Report identity fields the caller supplies alongside the checkpoint.
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub suite: SuiteKind,
    pub n_per_task: usize,
    pub method: String,
    pub checkpoint_id: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Builds the full grid: fixed-seed test sets per dataset, one cell per
/// compatible perturbation operator, change rates against the matched clean
/// evaluation.
pub fn run_diagnostic_suite(
    model: &Model,
    generator: &GeneratorConfig,
    opts: &SuiteOptions,
) -> Result<DiagnosticReport> {
    if opts.n_per_task == 0 {
        return Err(Error::Parameter("diagnostic suite needs a positive test size".into()));
    }
    let mut cells = Vec::new();
    let mut clean_reference = Vec::new();
    let mut worst_perturbation = BTreeMap::new();
    for task in TaskKind::ALL {
        let clean = generate_dataset(generator, task, Split::Test, opts.n_per_task)?;
        let clean_eval = evaluate(model, &clean)?;
        clean_reference.push(EvalCell {
            dataset_id: task,
            perturbation: None,
            accuracy: clean_eval.accuracy,
            delta_cp: None,
            n: clean.len(),
        });

        let mut worst: Option<(f64, PerturbationKind)> = None;
        for kind in opts.suite.kinds(task) {
            let mut rng =
                stream(generator.seed, &format!("diagnostic/{}/{}", task.slug(), kind.slug()));
            let perturbed: Vec<Sample> = clean
                .iter()
                .map(|s| apply_perturbation(s, kind, generator, &mut rng))
                .collect::<Result<_>>()?;
            let pert_eval = evaluate(model, &perturbed)?;
            let rate = prediction_change_rate(
                &clean,
                &clean_eval.argmax,
                &perturbed,
                &pert_eval.argmax,
            )?;
            cells.push(EvalCell {
                dataset_id: task,
                perturbation: Some(kind),
                accuracy: pert_eval.accuracy,
                delta_cp: Some(rate),
                n: perturbed.len(),
            });
            if worst.map_or(true, |(acc, _)| pert_eval.accuracy < acc) {
                worst = Some((pert_eval.accuracy, kind));
            }
        }
        if let Some((_, kind)) = worst {
            worst_perturbation.insert(task.slug().to_string(), kind.slug().to_string());
        }
    }
    Ok(DiagnosticReport {
        version: REPORT_SCHEMA_VERSION,
        method: opts.method.clone(),
        checkpoint_id: opts.checkpoint_id.clone(),
        suite: opts.suite,
        cells,
        clean_reference,
        worst_perturbation,
        metadata: ReportMetadata { seed: opts.seed, config_hash: opts.config_hash.clone() },
    })
}

/// Merges reports into one comparison CSV keyed by (method, dataset,
/// perturbation). The first report owning a key wins; rows come out sorted
/// by key.
pub fn merge_reports_csv(reports: &[DiagnosticReport]) -> String {
    let mut rows: BTreeMap<(String, String, String), String> = BTreeMap::new();
    for report in reports {
        for cell in report.clean_reference.iter().chain(report.cells.iter()) {
            let key = (
                report.method.clone(),
                cell.dataset_id.slug().to_string(),
                cell.perturbation.map_or("none", |k| k.slug()).to_string(),
            );
            rows.entry(key).or_insert_with(|| {
                format!(
                    "{},{},{}",
                    cell.n,
                    cell.accuracy,
                    cell.delta_cp.map(|d| d.to_string()).unwrap_or_default()
                )
            });
        }
    }
    let mut out = String::from("method,");
    out.push_str(CSV_HEADER);
    out.push('\n');
    for ((method, dataset, perturbation), rest) in rows {
        let _ = writeln!(out, "{method},{dataset},{perturbation},{rest}");
    }
    out
}

/// Per-sample training cost of adversarial fine-tuning relative to plain
/// fine-tuning. `n_steps` inner ascent steps cost one forward each; the
/// outer pass costs one extra forward for the perturbed branch plus the
/// shared forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsOverhead {
    pub absolute: f64,
    pub ratio: f64,
    /// The ratio under the convention that a backward pass costs two
    /// forwards: (n_steps + 4) / 3.
    pub simplified_ratio: f64,
}

pub fn flops_overhead(n_steps: u32, forward: f64, backward: f64) -> Result<FlopsOverhead> {
    for (name, v) in [("forward", forward), ("backward", backward)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Parameter(format!("{name} cost must be positive, got {v}")));
        }
    }
    let n = f64::from(n_steps);
    let absolute = n * forward + 2.0 * forward + backward;
    Ok(FlopsOverhead {
        absolute,
        ratio: absolute / (forward + backward),
        simplified_ratio: (n + 4.0) / 3.0,
    })
}

/// One sweep row: a checkpoint trained with a fixed ascent step count and
/// its in-distribution diagnostic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    /// Mean accuracy over every cell in the row's report, clean and
    /// perturbed alike; the sweep's headline column.
    pub overall_accuracy: f64,
    pub clean_vqa_accuracy: f64,
    pub mean_perturbed_accuracy: f64,
    pub report: DiagnosticReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: u32,
    pub method: String,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn read_json(path: &Path) -> Result<SweepReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Trains one checkpoint per ascent step count, shared seed and data, and
/// diagnoses each on the in-distribution suite. Rows land in
/// `<out_dir>/steps-<T>/`.
pub fn iteration_sweep(
    base: &TrainingConfig,
    steps_list: &[usize],
    datasets: &TaskDatasets,
) -> Result<SweepReport> {
    if steps_list.is_empty() {
        return Err(Error::Parameter("sweep needs at least one step count".into()));
    }
    match base.method.flags().adversarial {
        Some(AdvMode::Masked) | Some(AdvMode::NoMask) => {}
        _ => {
            return Err(Error::Config(format!(
                "iteration sweep needs an ascent-based method, got {}",
                base.method
            )))
        }
    }
    let mut rows = Vec::with_capacity(steps_list.len());
    for &steps in steps_list {
        let mut cfg = base.clone();
        cfg.adversarial.steps = steps;
        cfg.paths.out_dir = base.paths.out_dir.join(format!("steps-{steps}"));
        let artifacts = run_training(&cfg, datasets)?;
        let checkpoint_id = sha256_hex(&std::fs::read(&artifacts.checkpoint_path)?);
        let report = run_diagnostic_suite(
            &artifacts.model,
            &cfg.generator,
            &SuiteOptions {
                suite: SuiteKind::InDistribution,
                n_per_task: cfg.test_size,
                method: cfg.method.label().to_string(),
                checkpoint_id,
                seed: cfg.seed,
                config_hash: cfg.hash(),
            },
        )?;
        let overall = mean(
            report.clean_reference.iter().chain(report.cells.iter()).map(|c| c.accuracy),
        );
        let clean_vqa = report
            .clean_cell(TaskKind::Vqa)
            .map(|c| c.accuracy)
            .ok_or_else(|| Error::Contract("sweep report is missing the clean VQA cell".into()))?;
        let perturbed = mean(report.cells.iter().map(|c| c.accuracy));
        rows.push(SweepRow {
            steps,
            overall_accuracy: overall,
            clean_vqa_accuracy: clean_vqa,
            mean_perturbed_accuracy: perturbed,
            report,
        });
    }
    Ok(SweepReport {
        version: REPORT_SCHEMA_VERSION,
        method: base.method.label().to_string(),
        seed: base.seed,
        rows,
    })
}

/// Hex SHA-256, the id scheme for checkpoints in reports.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}
