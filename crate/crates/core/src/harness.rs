//! Training, evaluation, checkpointing and diagnostics shared by the CLI and tests.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ddatr_tensor::{finite_difference_check_with, param_gradient_check};
use ddatr_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Branch};
use crate::config::{Ablation, RunConfig};
use crate::ddam::{Ddam, LdConv};
use crate::decoder::{Decoder, DecoderConfig, Termination};
use crate::dfam::Dfam;
use crate::encoder::{classification_loss, Fusion, LongitudinalEncoder};
use crate::error::{ModelError, Result};
use crate::labels::{labels_to_prompt, LabelVector, NUM_DISEASES};
use crate::metrics::{evaluate_reports, map_attributes, Counts, MetricsRecord, CSV_HEADER};
use crate::model::{Model, Sample};
use crate::optim::AdamW;
use crate::synth::{rule_label, StudyRecord};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;

pub const STEP_CSV_HEADER: [&str; 6] = ["epoch", "step", "lm", "ce_cur", "ce_prior", "total"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(ModelError::Config(format!("unknown precision {s:?}"))),
        }
    }
}

/// Which test records an evaluation sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Split {
    All,
    NoPrior,
    WithPrior,
    /// Largest subset whose share of with-prior records is `f`.
    Fraction(f64),
}

impl FromStr for Split {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "no-prior" => Ok(Self::NoPrior),
            "with-prior" => Ok(Self::WithPrior),
            _ => {
                let f: f64 = s
                    .strip_prefix("fraction=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| ModelError::Config(format!("unknown split {s:?}")))?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(ModelError::Config(format!("split fraction {f} outside [0, 1]")));
                }
                Ok(Self::Fraction(f))
            }
        }
    }
}

impl Split {
    pub fn select<'a>(&self, records: &'a [StudyRecord]) -> Vec<&'a StudyRecord> {
        let (with, without): (Vec<&StudyRecord>, Vec<&StudyRecord>) = records.iter().partition(|r| r.has_prior());
        match *self {
            Split::All => records.iter().collect(),
            Split::NoPrior => without,
            Split::WithPrior => with,
            Split::Fraction(f) => {
                let size = (1..=records.len()).rev().find(|&n| {
                    let k = (f * n as f64).round() as usize;
                    k <= with.len() && n - k <= without.len()
                });
                let Some(n) = size else { return Vec::new() };
                let k = (f * n as f64).round() as usize;
                let mut keep: Vec<&StudyRecord> = with[..k].iter().chain(&without[..n - k]).copied().collect();
                keep.sort_by(|a, b| a.study_id.cmp(&b.study_id));
                keep
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lm: f64,
    pub ce_cur: f64,
    pub ce_prior: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lm: f64,
    pub ce_cur: f64,
    pub ce_prior: f64,
    pub total: f64,
}

/// Model, parameters and optimizer state at one precision.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

struct SampleResult<T> {
    grads: Vec<(ddatr_tensor::ParamId, Tensor<T>)>,
    parts: [f64; 4],
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &RunConfig, vocab: Vocabulary) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Model::new(config, vocab, &mut store)?;
        Ok(Self {
            optimizer: AdamW::new(config.lr, config.weight_decay),
            model,
            store,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn samples(&self, records: &[StudyRecord]) -> Result<Vec<Sample<T>>> {
        records.iter().map(|r| self.model.sample(r)).collect()
    }

    fn sample_gradients(&self, s: &Sample<T>) -> Result<SampleResult<T>> {
        let g = Graph::with_params(&self.store);
        let f = self.model.forward(&g, s)?;
        let parts = [
            f.lm.item()?.as_f64(),
            f.ce_cur.item()?.as_f64(),
            f.ce_prior.map(|v| v.item()).transpose()?.map_or(0.0, |v| v.as_f64()),
            f.total.item()?.as_f64(),
        ];
        let grads = g.backward(f.total)?.into_param_grads();
        Ok(SampleResult { grads, parts })
    }

    /// One pass over `samples` in a seeded order. Per-sample gradients may be
    /// computed in parallel; they are reduced serially in batch order.
    pub fn train_epoch(&mut self, samples: &[Sample<T>], steps: &mut Vec<StepLog>) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(ModelError::Data("empty training set".into()));
        }
        let cfg = &self.model.config;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(self.epoch as u64));
        order.shuffle(&mut rng);
        let augment = cfg.augment;
        let batch = cfg.batch_size;
        let mut sums = [0.0f64; 4];
        for (step, chunk) in order.chunks(batch).enumerate() {
            let prepared: Vec<Sample<T>> = if augment {
                chunk.iter().map(|&i| augmented(&samples[i], &mut rng)).collect()
            } else {
                chunk.iter().map(|&i| samples[i].clone()).collect()
            };
            let results: Vec<Result<SampleResult<T>>> =
                prepared.par_iter().map(|s| self.sample_gradients(s)).collect();
            self.store.zero_grad();
            let mut parts = [0.0f64; 4];
            for r in results {
                let r = r?;
                for (id, g) in &r.grads {
                    self.store.accumulate_one(*id, g.data(), T::one());
                }
                for k in 0..4 {
                    parts[k] += r.parts[k];
                }
            }
            let n = chunk.len() as f64;
            self.optimizer.step(&mut self.store, 1.0 / n);
            let log = StepLog {
                epoch: self.epoch + 1,
                step: step + 1,
                lm: parts[0] / n,
                ce_cur: parts[1] / n,
                ce_prior: parts[2] / n,
                total: parts[3] / n,
            };
            if !log.total.is_finite() {
                return Err(ModelError::Data(format!("non-finite loss at epoch {} step {}", log.epoch, log.step)));
            }
            for k in 0..4 {
                sums[k] += parts[k];
            }
            steps.push(log);
        }
        self.epoch += 1;
        let n = samples.len() as f64;
        let e = EpochLog {
            epoch: self.epoch,
            lm: sums[0] / n,
            ce_cur: sums[1] / n,
            ce_prior: sums[2] / n,
            total: sums[3] / n,
        };
        self.history.push(e.clone());
        Ok(e)
    }

    /// Runs the configured number of epochs.
    pub fn fit(&mut self, records: &[StudyRecord]) -> Result<Vec<StepLog>> {
        let samples = self.samples(records)?;
        let mut steps = Vec::new();
        for _ in 0..self.model.config.epochs {
            self.train_epoch(&samples, &mut steps)?;
        }
        Ok(steps)
    }

    pub fn evaluate(&self, records: &[&StudyRecord]) -> Result<Evaluation> {
        evaluate(&self.model, &self.store, records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            precision: if T::BITS == 64 { Precision::F64 } else { Precision::F32 },
            config: self.model.config.clone(),
            vocab: self.model.vocab.tokens().to_vec(),
            params: self
                .store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
        }
    }

    /// Rebuilds the model from the stored config and overwrites every parameter.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Data(format!("checkpoint version {} is not {CHECKPOINT_VERSION}", ck.version)));
        }
        let mut t = Self::new(&ck.config, Vocabulary::new(&ck.vocab))?;
        if t.store.len() != ck.params.len() {
            return Err(ModelError::Data(format!(
                "checkpoint has {} tensors, model has {}",
                ck.params.len(),
                t.store.len()
            )));
        }
        for p in &ck.params {
            let id = t
                .store
                .id(&p.name)
                .ok_or_else(|| ModelError::Data(format!("unknown parameter {}", p.name)))?;
            let value = Tensor::new(p.shape.clone(), p.data.iter().map(|&v| T::cast(v)).collect())?;
            t.store.set(id, value)?;
        }
        t.optimizer = ck.optimizer.clone();
        t.epoch = ck.epoch;
        t.history = ck.history.clone();
        Ok(t)
    }
}

fn augmented<T: Scalar>(s: &Sample<T>, rng: &mut ChaCha8Rng) -> Sample<T> {
    let mut out = s.clone();
    out.current = augment_image(&s.current, rng);
    if let Some((img, _)) = out.prior.as_mut() {
        *img = augment_image(img, rng);
    }
    out
}

/// Random rotation within ±5° and a shift of up to an eighth of the side,
/// bilinear with edge clamping.
pub fn augment_image<T: Scalar, R: Rng + ?Sized>(img: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let angle = rng.random_range(-5.0f64..=5.0).to_radians();
    let max_shift = (h.min(w) / 8) as i64;
    let dy = rng.random_range(-max_shift..=max_shift) as f64;
    let dx = rng.random_range(-max_shift..=max_shift) as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let data = img.data();
    let px = |ch: usize, y: f64, x: f64| -> f64 {
        let y = y.clamp(0.0, h as f64 - 1.0);
        let x = x.clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |yy: usize, xx: usize| data[(ch * h + yy) * w + xx].as_f64();
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    };
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (ry, rx) = (y as f64 - cy - dy, x as f64 - cx - dx);
        T::cast(px(ch, cos * ry - sin * rx + cy, sin * ry + cos * rx + cx))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub precision: Precision,
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub params: Vec<NamedTensor>,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// One generated report and what the model predicted along the way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReport {
    pub study_id: String,
    pub has_prior: bool,
    pub report: String,
    pub gold: String,
    /// Classifier labels used as the prompt.
    pub prompt_labels: LabelVector,
    pub terminated_by: Termination,
    pub tokens: usize,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsRecord,
    /// Micro F1 over (record, finding) cells that carry a gold progression tag.
    pub progression_f1: f64,
    pub reports: Vec<GeneratedReport>,
}

/// Generates a report per record in parallel, keeping record order.
pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, records: &[&StudyRecord]) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(ModelError::Data("empty evaluation split".into()));
    }
    let reports: Vec<GeneratedReport> = records
        .par_iter()
        .map(|r| {
            let s = model.sample::<T>(r)?;
            let p = model.predict(store, &s)?;
            Ok(GeneratedReport {
                study_id: r.study_id.clone(),
                has_prior: s.prior.is_some(),
                report: p.text,
                gold: r.report.clone(),
                prompt_labels: p.labels,
                terminated_by: p.generation.terminated_by,
                tokens: p.generation.tokens.len(),
                log_prob: p.generation.score(),
            })
        })
        .collect::<Result<_>>()?;
    score_reports(records, reports)
}

/// Metrics of already generated reports against the gold records.
pub fn score_reports(records: &[&StudyRecord], reports: Vec<GeneratedReport>) -> Result<Evaluation> {
    let pred: Vec<String> = reports.iter().map(|r| r.report.clone()).collect();
    let gold: Vec<String> = records.iter().map(|r| r.report.clone()).collect();
    let n_with_prior = reports.iter().filter(|r| r.has_prior).count();
    let metrics = evaluate_reports(&pred, &gold, n_with_prior, rule_label)?;
    Ok(Evaluation {
        metrics,
        progression_f1: progression_f1(records, &pred),
        reports,
    })
}

pub fn progression_f1(records: &[&StudyRecord], predicted: &[String]) -> f64 {
    let mut c = Counts::default();
    for (r, p) in records.iter().zip(predicted) {
        let pl = map_attributes(&rule_label(p));
        let gl = map_attributes(&r.labels);
        for f in 0..NUM_DISEASES {
            if r.progressions[f].is_some() {
                c.add(pl[f], gl[f]);
            }
        }
    }
    c.prf().2
}

/// `metrics.json`, `metrics.csv`, `reports/<id>.txt` and `generations.jsonl`.
pub fn write_evaluation(dir: impl AsRef<Path>, eval: &Evaluation) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("reports"))?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&eval)?)?;
    write_metrics_csv(dir.join("metrics.csv"), &[("eval".to_string(), eval.metrics.clone())])?;
    let mut lines = String::new();
    for r in &eval.reports {
        fs::write(dir.join("reports").join(format!("{}.txt", r.study_id)), &r.report)?;
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(dir.join("generations.jsonl"), lines)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> ModelError {
    ModelError::Data(format!("csv: {e}"))
}

/// Rows keyed by a run label, one column per metrics field.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(String, MetricsRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(std::iter::once("run").chain(CSV_HEADER)).map_err(csv_error)?;
    for (label, m) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(
            [
                m.ce_precision_macro,
                m.ce_recall_macro,
                m.ce_f1_macro,
                m.ce_precision_micro,
                m.ce_recall_micro,
                m.ce_f1_micro,
                m.bleu1,
                m.bleu4,
                m.rouge_l,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        rec.push(m.n_samples.to_string());
        rec.push(m.n_with_prior.to_string());
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_steps_csv(path: impl AsRef<Path>, steps: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(STEP_CSV_HEADER).map_err(csv_error)?;
    for s in steps {
        w.write_record(&[
            s.epoch.to_string(),
            s.step.to_string(),
            s.lm.to_string(),
            s.ce_cur.to_string(),
            s.ce_prior.to_string(),
            s.total.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn probe<'g>(out: Var<'g, f64>, seed: u64) -> ddatr_tensor::Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = out.graph().constant(Tensor::randn(&out.shape(), 1.0, &mut rng));
    out.mul(&w)?.sum()
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn worst(input: f64, params: f64) -> f64 {
    input.max(params)
}

const STEP: f64 = 1e-5;
const COORDS: usize = 24;

/// Max relative finite-difference error per block, at 64-bit, w.r.t. both the
/// block inputs and its parameters. Zero-initialised gates are perturbed so
/// every path carries gradient.
pub fn gradcheck_blocks(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (c, ct, hw, l) = (4, 6, 4, 3);

    {
        let mut store = ParamStore::<f64>::new();
        let m = Dfam::new(&mut store, "dfam", c, ct, &mut rng);
        randomize(&mut store, &mut rng);
        let x = Tensor::randn(&[c, hw, hw], 1.0, &mut rng);
        let txt = Tensor::randn(&[ct, l], 1.0, &mut rng);
        let ei = finite_difference_check_with(
            Some(&store),
            |g, v| probe(m.forward(v, g.constant(txt.clone()), true)?, 1),
            &x,
            STEP,
        )?;
        let et = finite_difference_check_with(
            Some(&store),
            |g, v| probe(m.forward(g.constant(x.clone()), v, true)?, 1),
            &txt,
            STEP,
        )?;
        let ep = param_gradient_check(
            &store,
            |g| probe(m.forward(g.constant(x.clone()), g.constant(txt.clone()), true)?, 1),
            STEP,
            COORDS,
        )?;
        out.push(("dfam".to_string(), worst(ei.max(et), ep.max_error())));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let m = LdConv::new(&mut store, "ldconv", c, &mut rng);
        randomize(&mut store, &mut rng);
        let x = Tensor::randn(&[c, hw, hw], 1.0, &mut rng);
        let ei = finite_difference_check_with(Some(&store), |_, v| probe(m.forward(v)?, 2), &x, STEP)?;
        let ep = param_gradient_check(&store, |g| probe(m.forward(g.constant(x.clone()))?, 2), STEP, COORDS)?;
        out.push(("ldconv".to_string(), worst(ei, ep.max_error())));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let m = Ddam::new(&mut store, "ddam", c, &mut rng);
        randomize(&mut store, &mut rng);
        let cur = Tensor::randn(&[c, hw, hw], 1.0, &mut rng);
        let pri = Tensor::randn(&[c, hw, hw], 1.0, &mut rng);
        let ec = finite_difference_check_with(
            Some(&store),
            |g, v| probe(m.forward(v, Some(g.constant(pri.clone())), true, true)?, 3),
            &cur,
            STEP,
        )?;
        let ep_in = finite_difference_check_with(
            Some(&store),
            |g, v| probe(m.forward(g.constant(cur.clone()), Some(v), true, true)?, 3),
            &pri,
            STEP,
        )?;
        let ep = param_gradient_check(
            &store,
            |g| probe(m.forward(g.constant(cur.clone()), Some(g.constant(pri.clone())), true, true)?, 3),
            STEP,
            COORDS,
        )?;
        out.push(("ddam".to_string(), worst(ec.max(ep_in), ep.max_error())));
    }
    let bcfg = BackboneConfig {
        in_channels: 1,
        image_size: 16,
        widths: vec![2, 3, 4, 4],
    };
    {
        let mut store = ParamStore::<f64>::new();
        let b = Backbone::new(&mut store, Branch::Current, &bcfg, &mut rng)?;
        randomize(&mut store, &mut rng);
        let x = Tensor::randn(&bcfg.input_shape(2), 1.0, &mut rng);
        let ei = finite_difference_check_with(Some(&store), |_, v| probe(b.stage_forward(2, v)?, 4), &x, STEP)?;
        let stage_only = {
            let mut s = store.clone();
            let names: Vec<String> = s.iter().map(|(_, p)| p.name.clone()).collect();
            for n in names.iter().filter(|n| !n.contains(".stage2.")) {
                s.get_mut(s.id(n).expect("name")).requires_grad = false;
            }
            s
        };
        let ep = param_gradient_check(
            &stage_only,
            |g| probe(b.stage_forward(2, g.constant(x.clone()))?, 4),
            STEP,
            COORDS,
        )?;
        out.push(("backbone-stage".to_string(), worst(ei, ep.max_error())));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let fusion = Fusion::default();
        let enc = LongitudinalEncoder::new(&mut store, &bcfg, fusion, ct, false, false, &mut rng)?;
        let head_only = {
            let mut s = store.clone();
            let names: Vec<String> = s.iter().map(|(_, p)| p.name.clone()).collect();
            for n in names.iter().filter(|n| !n.starts_with("head.")) {
                s.get_mut(s.id(n).expect("name")).requires_grad = false;
            }
            s
        };
        let x = Tensor::randn(&bcfg.output_shape(4), 1.0, &mut rng);
        let gold = LabelVector(std::array::from_fn(|i| crate::labels::Attribute::ALL[i % 4]));
        let ei = finite_difference_check_with(
            Some(&head_only),
            |_, v| Ok(classification_loss(enc.classify(v, Branch::Current)?, &gold)?),
            &x,
            STEP,
        )?;
        let ep = param_gradient_check(
            &head_only,
            |g| Ok(classification_loss(enc.classify(g.constant(x.clone()), Branch::Current)?, &gold)?),
            STEP,
            COORDS,
        )?;
        out.push(("classifier".to_string(), worst(ei, ep.max_error())));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let dcfg = DecoderConfig {
            layers: 1,
            width: 8,
            heads: 2,
            ff_width: 12,
            max_len: 8,
            beam: 1,
        };
        let vocab = 12;
        let d = Decoder::new(&mut store, &dcfg, vocab, c, &mut rng)?;
        randomize(&mut store, &mut rng);
        let feat = Tensor::randn(&[c, 2, 2], 1.0, &mut rng);
        let prompt = labels_to_prompt(&LabelVector::blank());
        let gold = vec![9, 10, 11, crate::vocab::EOS];
        let ei = finite_difference_check_with(Some(&store), |_, v| Ok(d.decode_train(v, &prompt, &gold)?), &feat, STEP)?;
        let ep = param_gradient_check(
            &store,
            |g| Ok(d.decode_train(g.constant(feat.clone()), &prompt, &gold)?),
            STEP,
            COORDS,
        )?;
        out.push(("decoder".to_string(), worst(ei, ep.max_error())));
    }
    Ok(out)
}

/// A model and schedule small enough to train on one CPU core in a couple of
/// minutes per run.
pub fn desk_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        widths: vec![8, 16, 16, 32],
        text_width: 32,
        dec_layers: 1,
        dec_width: 32,
        dec_heads: 4,
        dec_ff_width: 64,
        lr: 2e-3,
        epochs: 8,
        teacher_forcing: true,
        ..RunConfig::default()
    }
}

pub const STANDARD_TRAIN: usize = 2000;
pub const STANDARD_TEST: usize = 400;

/// Patient-disjoint train and test records at a 50% prior fraction.
pub fn standard_corpus(seed: u64) -> Result<(Vec<StudyRecord>, Vec<StudyRecord>)> {
    let cfg = crate::synth::SynthConfig {
        seed,
        n_patients: (STANDARD_TRAIN + STANDARD_TEST) / 2,
        visits_per_patient: 2,
        prior_fraction: 0.5,
        ..Default::default()
    };
    let mut recs = crate::synth::generate_corpus(&cfg)?;
    let test = recs.split_off(STANDARD_TRAIN);
    Ok((recs, test))
}

/// Trains and evaluates one configuration; `test` is scored as given.
pub fn train_and_evaluate(
    config: &RunConfig,
    vocab: Vocabulary,
    train: &[StudyRecord],
    test: &[&StudyRecord],
) -> Result<(Trainer<f32>, Vec<StepLog>, Evaluation)> {
    let mut t = Trainer::<f32>::new(config, vocab)?;
    let steps = t.fit(train)?;
    let eval = t.evaluate(test)?;
    Ok((t, steps, eval))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub metrics: MetricsRecord,
    pub progression_f1: f64,
}

/// The full model and each ablation row, trained from the same seed.
pub fn ablate(
    config: &RunConfig,
    vocab: &Vocabulary,
    train: &[StudyRecord],
    test: &[&StudyRecord],
    rows: &[Ablation],
) -> Result<Vec<AblationRow>> {
    rows.iter()
        .map(|&a| {
            let (_, _, e) = train_and_evaluate(&config.clone().with_ablation(a), vocab.clone(), train, test)?;
            Ok(AblationRow {
                ablation: a,
                metrics: e.metrics,
                progression_f1: e.progression_f1,
            })
        })
        .collect()
}
