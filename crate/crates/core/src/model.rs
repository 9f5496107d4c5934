//! Toy multimodal transformer.
//!
//! Image features pass through a frozen random linear encoder into a short
//! run of visual token embeddings; text tokens go through a trainable
//! embedding table. Both modalities, plus one trailing answer-query slot,
//! form a single sequence processed by pre-norm bidirectional transformer
//! blocks. The answer is read from the query row through a zero-initialized
//! linear head, so a fresh model assigns exactly uniform probability to
//! every option.
//!
//! The frozen encoder never trains; everything downstream of it does. All
//! parameters are derived from the config seed, so two models built from
//! the same config are bitwise identical.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{gauss, stream};
use crate::synth::Sample;
use crate::tensor::{Tape, Tensor};

const LN_EPS: f64 = 1e-5;
/// Width multiplier for the feed-forward hidden layer.
const MLP_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Number of visual token slots produced by the frozen encoder.
    pub n_img_tokens: usize,
    pub max_text_tokens: usize,
    /// Raw image feature dimension.
    pub d_feat: usize,
    /// Per-slot output width of the frozen encoder.
    pub d_enc: usize,
    pub n_options: usize,
    pub seed: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 96,
            n_img_tokens: 8,
            max_text_tokens: 24,
            d_feat: 16,
            d_enc: 16,
            n_options: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("n_img_tokens", self.n_img_tokens),
            ("max_text_tokens", self.max_text_tokens),
            ("d_feat", self.d_feat),
            ("d_enc", self.d_enc),
            ("n_options", self.n_options),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_options > self.vocab_size {
            return Err(Error::Config(format!(
                "n_options {} exceeds vocab_size {}",
                self.n_options, self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Maximum sequence length: all visual slots, all text slots, the query.
    pub fn max_seq_len(&self) -> usize {
        self.n_img_tokens + self.max_text_tokens + 1
    }

    /// Positional-table row reserved for the answer query.
    fn query_pos_row(&self) -> usize {
        self.n_img_tokens + self.max_text_tokens
    }
}

/// Row spans of each modality inside an embedded sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySpans {
    pub image: Range<usize>,
    pub text: Range<usize>,
    pub query: usize,
}

/// Embedded input sequence plus its modality geometry. `embeddings` lives on
/// the tape that produced it.
#[derive(Debug, Clone)]
pub struct EmbeddedSequence {
    pub embeddings: Tensor,
    pub spans: ModalitySpans,
}

/// Softmax over the first `n_options` logits; the remaining vocabulary is
/// never decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    pub full_logits: Vec<f64>,
    pub option_probs: Vec<f64>,
    pub argmax: usize,
}

struct HeadParams {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

struct BlockParams {
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    heads: Vec<HeadParams>,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub struct Model {
    pub config: ModelConfig,
    frozen_encoder: Tensor,
    projector: Tensor,
    token_embedding: Tensor,
    positional_embedding: Tensor,
    blocks: Vec<BlockParams>,
    output_head: Tensor,
}

/// Fresh leaf drawn from the per-parameter stream `(seed, name)`.
fn init_leaf(seed: u32, name: &str, rows: usize, cols: usize, sigma: f64) -> Result<Tensor> {
    let mut rng = stream(seed as u64, name);
    let data = (0..rows * cols).map(|_| sigma * gauss(&mut rng)).collect();
    Tensor::leaf(rows, cols, data)
}

fn zeros_leaf(rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::leaf(rows, cols, vec![0.0; rows * cols])
}

fn ones_leaf(rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::leaf(rows, cols, vec![1.0; rows * cols])
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let dh = config.d_head();
        let hidden = MLP_MULT * d;
        let enc_out = config.n_img_tokens * config.d_enc;
        let seed = config.seed;

        let frozen = {
            let mut rng = stream(seed as u64, "frozen_encoder");
            let sigma = 1.0 / (config.d_feat as f64).sqrt();
            let data = (0..config.d_feat * enc_out).map(|_| sigma * gauss(&mut rng)).collect();
            Tensor::constant(config.d_feat, enc_out, data)?
        };

        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut heads = Vec::with_capacity(config.n_heads);
            for h in 0..config.n_heads {
                let p = |w: &str| format!("block{i}.head{h}.{w}");
                heads.push(HeadParams {
                    wq: init_leaf(seed, &p("wq"), d, dh, 1.0 / (d as f64).sqrt())?,
                    wk: init_leaf(seed, &p("wk"), d, dh, 1.0 / (d as f64).sqrt())?,
                    wv: init_leaf(seed, &p("wv"), d, dh, 1.0 / (d as f64).sqrt())?,
                    wo: init_leaf(seed, &p("wo"), dh, d, 1.0 / (dh as f64).sqrt())?,
                });
            }
            blocks.push(BlockParams {
                ln1_gamma: ones_leaf(1, d)?,
                ln1_beta: zeros_leaf(1, d)?,
                heads,
                ln2_gamma: ones_leaf(1, d)?,
                ln2_beta: zeros_leaf(1, d)?,
                w1: init_leaf(seed, &format!("block{i}.mlp.w1"), d, hidden, 1.0 / (d as f64).sqrt())?,
                b1: zeros_leaf(1, hidden)?,
                w2: init_leaf(seed, &format!("block{i}.mlp.w2"), hidden, d, 1.0 / (hidden as f64).sqrt())?,
                b2: zeros_leaf(1, d)?,
            });
        }

        Ok(Model {
            config,
            frozen_encoder: frozen,
            projector: init_leaf(seed, "projector", config.d_enc, d, 1.0 / (config.d_enc as f64).sqrt())?,
            token_embedding: init_leaf(seed, "token_embedding", config.vocab_size, d, 0.3)?,
            positional_embedding: init_leaf(seed, "positional_embedding", config.max_seq_len(), d, 0.3)?,
            blocks,
            // Zero head: a fresh model is exactly uniform over options.
            output_head: zeros_leaf(d, config.vocab_size)?,
        })
    }

    /// Every parameter in stable order, the frozen encoder first.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("frozen_encoder".into(), &self.frozen_encoder),
            ("projector".into(), &self.projector),
            ("token_embedding".into(), &self.token_embedding),
            ("positional_embedding".into(), &self.positional_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.gamma"), &b.ln1_gamma));
            out.push((format!("block{i}.ln1.beta"), &b.ln1_beta));
            for (h, hp) in b.heads.iter().enumerate() {
                out.push((format!("block{i}.head{h}.wq"), &hp.wq));
                out.push((format!("block{i}.head{h}.wk"), &hp.wk));
                out.push((format!("block{i}.head{h}.wv"), &hp.wv));
                out.push((format!("block{i}.head{h}.wo"), &hp.wo));
            }
            out.push((format!("block{i}.ln2.gamma"), &b.ln2_gamma));
            out.push((format!("block{i}.ln2.beta"), &b.ln2_beta));
            out.push((format!("block{i}.mlp.w1"), &b.w1));
            out.push((format!("block{i}.mlp.b1"), &b.b1));
            out.push((format!("block{i}.mlp.w2"), &b.w2));
            out.push((format!("block{i}.mlp.b2"), &b.b2));
        }
        out.push(("output_head".into(), &self.output_head));
        out
    }

    /// Parameters the optimizer may touch. The frozen encoder is excluded.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor)> {
        self.parameters().into_iter().filter(|(n, _)| n != "frozen_encoder").collect()
    }

    pub fn parameter(&self, name: &str) -> Option<Tensor> {
        self.parameters().into_iter().find(|(n, _)| n == name).map(|(_, t)| t.clone())
    }

    /// Overwrites one parameter's values in place. Shape must match.
    pub fn set_parameter_data(&self, name: &str, values: &[f64]) -> Result<()> {
        let t = self
            .parameter(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name:?}")))?;
        t.set_data(values)
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Frozen visual encoding, computed off the tape. One row per visual
    /// slot.
    fn encode_image(&self, features: &[f64]) -> Result<Tensor> {
        let cfg = &self.config;
        if features.len() != cfg.d_feat {
            return Err(Error::Shape {
                op: "encode_image",
                detail: format!("expected {} image features, got {}", cfg.d_feat, features.len()),
            });
        }
        let w = self.frozen_encoder.data();
        let enc_out = cfg.n_img_tokens * cfg.d_enc;
        let mut flat = vec![0.0; enc_out];
        for (k, &f) in features.iter().enumerate() {
            let row = &w[k * enc_out..(k + 1) * enc_out];
            for (o, &wv) in flat.iter_mut().zip(row) {
                *o += f * wv;
            }
        }
        Tensor::constant(cfg.n_img_tokens, cfg.d_enc, flat)
    }

    /// Builds the embedded input sequence for one sample: projected visual
    /// slots, text token embeddings, then the answer-query slot. Positional
    /// rows are assigned by modality, with the query pinned to the final
    /// table row regardless of text length.
    pub fn embed(&self, tape: &Tape, sample: &Sample) -> Result<EmbeddedSequence> {
        let cfg = &self.config;
        if sample.text_tokens.len() > cfg.max_text_tokens {
            return Err(Error::Shape {
                op: "embed",
                detail: format!(
                    "sample {} has {} text tokens, cap is {}",
                    sample.id,
                    sample.text_tokens.len(),
                    cfg.max_text_tokens
                ),
            });
        }
        if let Some(&bad) = sample.text_tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Shape {
                op: "embed",
                detail: format!("sample {} token {bad} outside vocab {}", sample.id, cfg.vocab_size),
            });
        }
        let n_img = cfg.n_img_tokens;
        let n_text = sample.text_tokens.len();

        let visual = self.encode_image(&sample.image_features)?;
        let projected = tape.matmul(&visual, &self.projector)?;
        let pos_img = tape.slice_rows(&self.positional_embedding, 0, n_img)?;
        let image_rows = tape.add(&projected, &pos_img)?;

        let query_row =
            tape.slice_rows(&self.positional_embedding, cfg.query_pos_row(), cfg.query_pos_row() + 1)?;

        let embeddings = if n_text > 0 {
            let tok = tape.gather(&self.token_embedding, &sample.text_tokens)?;
            let pos_text = tape.slice_rows(&self.positional_embedding, n_img, n_img + n_text)?;
            let text_rows = tape.add(&tok, &pos_text)?;
            tape.concat_rows(&[&image_rows, &text_rows, &query_row])?
        } else {
            tape.concat_rows(&[&image_rows, &query_row])?
        };

        Ok(EmbeddedSequence {
            embeddings,
            spans: ModalitySpans {
                image: 0..n_img,
                text: n_img..n_img + n_text,
                query: n_img + n_text,
            },
        })
    }

    /// Runs the transformer stack over an embedded sequence and returns the
    /// full-vocabulary logits of the answer-query row, shape 1 x vocab_size.
    pub fn answer_logits(&self, tape: &Tape, embeddings: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        if embeddings.cols() != cfg.d_model || embeddings.rows() > cfg.max_seq_len() {
            return Err(Error::Shape {
                op: "answer_logits",
                detail: format!(
                    "embeddings {}x{} incompatible with d_model {} and max length {}",
                    embeddings.rows(),
                    embeddings.cols(),
                    cfg.d_model,
                    cfg.max_seq_len()
                ),
            });
        }
        let seq = embeddings.rows();
        let scale = 1.0 / (cfg.d_head() as f64).sqrt();

        let mut x = embeddings.clone();
        for block in &self.blocks {
            let normed = tape.layer_norm(&x, &block.ln1_gamma, &block.ln1_beta, LN_EPS)?;
            let mut attn: Option<Tensor> = None;
            for head in &block.heads {
                let q = tape.matmul(&normed, &head.wq)?;
                let k = tape.matmul(&normed, &head.wk)?;
                let v = tape.matmul(&normed, &head.wv)?;
                let scores = tape.scale(&tape.matmul_nt(&q, &k)?, scale)?;
                let weights = tape.softmax_rows(&scores)?;
                let ctx = tape.matmul(&weights, &v)?;
                let out = tape.matmul(&ctx, &head.wo)?;
                attn = Some(match attn {
                    Some(acc) => tape.add(&acc, &out)?,
                    None => out,
                });
            }
            x = tape.add(&x, &attn.expect("n_heads >= 1"))?;

            let normed2 = tape.layer_norm(&x, &block.ln2_gamma, &block.ln2_beta, LN_EPS)?;
            let hidden = tape.relu(&tape.add(&tape.matmul(&normed2, &block.w1)?, &block.b1)?)?;
            let mlp = tape.add(&tape.matmul(&hidden, &block.w2)?, &block.b2)?;
            x = tape.add(&x, &mlp)?;
        }

        let query = tape.slice_rows(&x, seq - 1, seq)?;
        tape.matmul(&query, &self.output_head)
    }

    /// Embeds and runs one sample, returning logits plus the embedding so
    /// callers can build perturbed forward passes on the same tape.
    pub fn forward(&self, tape: &Tape, sample: &Sample) -> Result<(Tensor, EmbeddedSequence)> {
        let emb = self.embed(tape, sample)?;
        let logits = self.answer_logits(tape, &emb.embeddings)?;
        Ok((logits, emb))
    }

    /// Inference without recording a graph.
    pub fn predict(&self, sample: &Sample) -> Result<AnswerDistribution> {
        let tape = Tape::no_grad();
        let (logits, _) = self.forward(&tape, sample)?;
        answer_distribution(&logits.to_vec(), sample.n_options)
    }
}

/// Restricted decoding over a full-vocabulary logit row: softmax over the
/// first `n_options` entries, argmax ties broken toward the lowest index.
pub fn answer_distribution(full_logits: &[f64], n_options: usize) -> Result<AnswerDistribution> {
    if n_options == 0 || n_options > full_logits.len() {
        return Err(Error::Parameter(format!(
            "n_options {n_options} invalid for {} logits",
            full_logits.len()
        )));
    }
    let opts = &full_logits[..n_options];
    let max = opts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = opts.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let option_probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut argmax = 0;
    for (i, &p) in option_probs.iter().enumerate() {
        if p > option_probs[argmax] {
            argmax = i;
        }
    }
    Ok(AnswerDistribution { full_logits: full_logits.to_vec(), option_probs, argmax })
}
