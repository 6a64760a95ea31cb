//! Minibatch training with Adam, global-norm clipping, per-epoch dev evaluation and
//! early stopping on dev ACC.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::data::{make_batches, SequencePair, Side, Vocabulary};
use crate::decoding::{transliterate_all, Candidate, DecodeOptions};
use crate::error::{Error, Result};
use crate::metrics::{EvalItem, MetricsReport};
use crate::model::{loss_and_gradients, ModelDims, ModelParams};
use crate::numerics::{clip_global_norm, global_norm, AdamConfig, AdamState};

pub const CURVE_HEADER: &str = "epoch,train_nll,dev_acc,dev_fscore,dev_mrr,dev_map,wall_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub embed: usize,
    pub attention: usize,
    pub batch_size: usize,
    pub clip_threshold: f64,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beam_width_for_dev: usize,
    pub curve_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// When false the `wall_seconds` column is written as 0 so curve files are reproducible.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            embed: 64,
            attention: 128,
            batch_size: 128,
            clip_threshold: 1.0,
            adam: AdamConfig::default(),
            max_epochs: 50,
            patience: 5,
            seed: 0,
            beam_width_for_dev: 10,
            curve_path: None,
            checkpoint_path: None,
            wall_clock: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// Every settable key, in documentation order.
    pub const KEYS: [&'static str; 16] = [
        "hidden",
        "embed",
        "attention",
        "batch_size",
        "clip_threshold",
        "alpha",
        "beta1",
        "beta2",
        "epsilon",
        "max_epochs",
        "patience",
        "seed",
        "beam_width_for_dev",
        "curve_path",
        "checkpoint_path",
        "wall_clock",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "hidden" => self.hidden = parse(key, value)?,
            "embed" => self.embed = parse(key, value)?,
            "attention" => self.attention = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "clip_threshold" => self.clip_threshold = parse(key, value)?,
            "alpha" => self.adam.alpha = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "epsilon" => self.adam.epsilon = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "beam_width_for_dev" => self.beam_width_for_dev = parse(key, value)?,
            "curve_path" => self.curve_path = Some(PathBuf::from(value.trim())),
            "checkpoint_path" => self.checkpoint_path = Some(PathBuf::from(value.trim())),
            "wall_clock" => self.wall_clock = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies flat `key = value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("attention", self.attention),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("beam_width_for_dev", self.beam_width_for_dev),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config("patience must not exceed max_epochs".into()));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::Config("clip_threshold must be positive".into()));
        }
        let AdamConfig {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = self.adam;
        if !(alpha > 0.0 && epsilon > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
            return Err(Error::Config(format!("invalid Adam hyperparameters {:?}", self.adam)));
        }
        Ok(())
    }

    pub fn dims(&self, src_vocab: usize, tgt_vocab: usize) -> ModelDims {
        ModelDims {
            src_vocab,
            tgt_vocab,
            embed: self.embed,
            hidden: self.hidden,
            attention: self.attention,
        }
    }
}

/// One learning-curve row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_nll: f64,
    pub dev_acc: f64,
    pub dev_fscore: f64,
    pub dev_mrr: f64,
    pub dev_map: f64,
    pub wall_seconds: f64,
}

impl CurveRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.train_nll,
            self.dev_acc,
            self.dev_fscore,
            self.dev_mrr,
            self.dev_map,
            self.wall_seconds
        )
    }
}

pub fn format_curve(rows: &[CurveRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

/// Per-update diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub pre_clip_norm: f64,
    pub post_clip_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurveRow>,
    pub steps: Vec<StepLog>,
    pub best_epoch: usize,
    pub best: Checkpoint,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Decodes every source of `pairs` and scores the n-best lists against their references.
pub fn evaluate_with_outputs(
    ckpt: &Checkpoint,
    pairs: &[SequencePair],
    opts: &DecodeOptions,
) -> Result<(MetricsReport, Vec<Vec<Candidate>>)> {
    let sources: Vec<String> = pairs.iter().map(|p| p.source.clone()).collect();
    let outputs = transliterate_all(ckpt, &sources, opts)?;
    let items = pairs
        .iter()
        .zip(&outputs)
        .map(|(p, cands)| EvalItem::new(&p.targets, cands.iter().map(|c| c.text.as_str())))
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricsReport::compute(&items)?, outputs))
}

pub fn evaluate(ckpt: &Checkpoint, pairs: &[SequencePair], beam_width: usize) -> Result<MetricsReport> {
    evaluate_with_outputs(ckpt, pairs, &DecodeOptions::with_beam(beam_width)).map(|(r, _)| r)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Dev ACC decides; F-score breaks ties so that progress during an all-zero ACC warm-up
/// still counts.
fn improves(candidate: (f64, f64), best: (f64, f64)) -> bool {
    candidate.0 > best.0 || (candidate.0 == best.0 && candidate.1 > best.1)
}

/// Trains a model from scratch. Vocabularies come from `train_pairs` only.
///
/// The best checkpoint by dev ACC (ties broken by dev F-score) is written to `checkpoint_path` whenever it improves and
/// the curve file is rewritten after every epoch.
pub fn train(
    cfg: &TrainConfig,
    train_pairs: &[SequencePair],
    dev_pairs: &[SequencePair],
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_pairs.is_empty() || dev_pairs.is_empty() {
        return Err(Error::InvalidInput("training and dev corpora must be non-empty".into()));
    }
    let src_vocab = Vocabulary::build(train_pairs, Side::Source);
    let tgt_vocab = Vocabulary::build(train_pairs, Side::Target);
    let dims = cfg.dims(src_vocab.len(), tgt_vocab.len());
    let mut params = ModelParams::init(dims, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam, params.tensors());
    log::info!(
        "training {} parameters on {} pairs ({} source / {} target symbols)",
        params.parameter_count(),
        train_pairs.len(),
        src_vocab.len(),
        tgt_vocab.len()
    );

    let start = Instant::now();
    let mut curve = Vec::new();
    let mut steps = Vec::new();
    let mut best: Option<(usize, (f64, f64), Checkpoint)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(
            train_pairs,
            &src_vocab,
            &tgt_vocab,
            cfg.batch_size,
            epoch_seed(cfg.seed, epoch),
            true,
        )?;
        let (mut nll_sum, mut tokens) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let (loss, mut grads) = loss_and_gradients(&params, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            let pre = clip_global_norm(&mut grads, cfg.clip_threshold);
            let post = global_norm(&grads);
            steps.push(StepLog {
                epoch,
                batch: bi,
                loss,
                pre_clip_norm: pre,
                post_clip_norm: post,
            });
            adam.update(&mut params.tensors_mut(), &grads)?;
            nll_sum += loss * batch.target_tokens() as f64;
            tokens += batch.target_tokens();
        }

        let ckpt = Checkpoint::new(params.clone(), src_vocab.clone(), tgt_vocab.clone())?;
        let report = evaluate(&ckpt, dev_pairs, cfg.beam_width_for_dev)?;
        let row = CurveRow {
            epoch,
            train_nll: nll_sum / tokens as f64,
            dev_acc: report.acc,
            dev_fscore: report.fscore,
            dev_mrr: report.mrr,
            dev_map: report.map,
            wall_seconds: if cfg.wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {epoch}: train_nll {:.4} dev acc {:.4} f {:.4} mrr {:.4} map {:.4}",
            row.train_nll,
            row.dev_acc,
            row.dev_fscore,
            row.dev_mrr,
            row.dev_map
        );
        curve.push(row);
        if let Some(path) = &cfg.curve_path {
            write_file(path, format_curve(&curve).as_bytes())?;
        }

        let key = (report.acc, report.fscore);
        if best.as_ref().map_or(true, |(_, b, _)| improves(key, *b)) {
            if let Some(path) = &cfg.checkpoint_path {
                ckpt.save(path)?;
            }
            best = Some((epoch, key, ckpt));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("no dev improvement for {stale} epochs, stopping");
                break;
            }
        }
    }

    let (best_epoch, _, best) = best.expect("at least one epoch ran");
    Ok(TrainReport {
        curve,
        steps,
        best_epoch,
        best,
    })
}
