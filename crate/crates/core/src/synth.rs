//! Seeded longitudinal corpus of rendered studies and templated reports.

use std::path::Path;

use ddatr_tensor::{io, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::labels::{Attribute, LabelVector, NUM_DISEASES};
use crate::vocab::{split_words, Vocabulary};

pub const FINDINGS: [&str; NUM_DISEASES] = [
    "cardiomegaly",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "effusion",
    "opacity",
    "nodule",
    "mass",
    "fracture",
    "emphysema",
    "fibrosis",
    "hernia",
];

/// Findings that are reported as negative whenever absent.
pub const ALWAYS_REPORTED: [usize; 3] = [0, 5, 6];

const SEVERITY_WORDS: [&str; 3] = ["possible", "mild", "severe"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Progression {
    New,
    Resolved,
    Increased,
    Decreased,
    Unchanged,
}

impl Progression {
    pub const ALL: [Progression; 5] = [
        Progression::New,
        Progression::Resolved,
        Progression::Increased,
        Progression::Decreased,
        Progression::Unchanged,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Progression::New => "new",
            Progression::Resolved => "resolved",
            Progression::Increased => "increased",
            Progression::Decreased => "decreased",
            Progression::Unchanged => "unchanged",
        }
    }

    /// Tag linking a severity in the prior exam to one in the current exam.
    pub fn between(prior: u8, current: u8) -> Option<Self> {
        match (prior, current) {
            (0, 0) => None,
            (0, _) => Some(Progression::New),
            (_, 0) => Some(Progression::Resolved),
            (p, c) if c > p => Some(Progression::Increased),
            (p, c) if c < p => Some(Progression::Decreased),
            _ => Some(Progression::Unchanged),
        }
    }
}

/// The `k`-th 5-of-9 subset of a 3×3 block in lexicographic order.
fn five_of_nine(k: usize) -> [bool; 9] {
    let mut seen = 0;
    for bits in 0u16..512 {
        if bits.count_ones() == 5 {
            if seen == k {
                return std::array::from_fn(|i| bits & (1 << i) != 0);
            }
            seen += 1;
        }
    }
    unreachable!("only 126 five-element subsets")
}

/// Fixed location and 3×3 block glyph of one finding. Glyphs of different
/// findings differ and none contains another, so identity survives pooling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Renderer {
    pub glyph: [bool; 9],
    pub cy: f64,
    pub cx: f64,
    /// Side of one glyph block in pixels.
    pub block: f64,
}

impl Renderer {
    pub fn for_finding(f: usize, image_size: usize) -> Self {
        let cell = image_size as f64 / 4.0;
        let (row, col) = (f / 4, f % 4);
        Self {
            glyph: five_of_nine(f * 9),
            cy: cell * (row as f64 + 0.5),
            cx: cell * (col as f64 + 0.5),
            block: cell / 4.0,
        }
    }

    /// 1 inside a lit glyph block, else 0.
    pub fn coverage(&self, y: usize, x: usize) -> f64 {
        let half = 1.5 * self.block;
        let dy = y as f64 + 0.5 - (self.cy - half);
        let dx = x as f64 + 0.5 - (self.cx - half);
        if dy < 0.0 || dx < 0.0 || dy >= 2.0 * half || dx >= 2.0 * half {
            return 0.0;
        }
        let (by, bx) = ((dy / self.block) as usize, (dx / self.block) as usize);
        if self.glyph[by * 3 + bx] {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub visits_per_patient: usize,
    pub prior_fraction: f64,
    pub image_size: usize,
    pub noise_std: f64,
    /// Probability a finding is present at the first visit.
    pub present_prob: f64,
    pub onset_prob: f64,
    pub resolve_prob: f64,
    pub change_prob: f64,
    /// Probability that a patient carries a lesion-like structure at a finding site.
    pub distractor_prob: f64,
    /// Lesion intensity per severity level 1..=3.
    pub intensity: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_patients: 1000,
            visits_per_patient: 2,
            prior_fraction: 0.5,
            image_size: 32,
            noise_std: 0.02,
            present_prob: 0.2,
            onset_prob: 0.15,
            resolve_prob: 0.3,
            change_prob: 0.4,
            distractor_prob: 0.3,
            intensity: [0.12, 0.22, 0.34],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prior_fraction) || self.prior_fraction.is_nan() {
            return Err(ModelError::Config(format!("prior fraction {} outside [0, 1]", self.prior_fraction)));
        }
        if self.visits_per_patient == 0 || self.n_patients == 0 {
            return Err(ModelError::Config("corpus needs at least one patient and one visit".into()));
        }
        let total = self.n_patients * self.visits_per_patient;
        let wanted = self.prior_count();
        let available = self.n_patients * (self.visits_per_patient - 1);
        if wanted > available {
            return Err(ModelError::Config(format!(
                "prior fraction {} needs {wanted} of {total} records with a prior but only {available} visits have one",
                self.prior_fraction
            )));
        }
        if self.image_size < 16 {
            return Err(ModelError::Config("image size must be at least 16".into()));
        }
        Ok(())
    }

    pub fn prior_count(&self) -> usize {
        (self.prior_fraction * (self.n_patients * self.visits_per_patient) as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    pub patient_id: String,
    pub visit: usize,
    pub image: Tensor<f32>,
    pub report: String,
    pub labels: LabelVector,
    pub prior: Option<Prior>,
    pub progressions: [Option<Progression>; NUM_DISEASES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    pub study_id: String,
    pub image: Tensor<f32>,
    pub report: String,
    pub labels: LabelVector,
}

impl StudyRecord {
    pub fn has_prior(&self) -> bool {
        self.prior.is_some()
    }
}

pub fn study_id(patient: usize, visit: usize) -> String {
    format!("p{patient:05}_v{visit:02}")
}

/// Every word the report grammar can produce.
pub fn grammar_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = vec!["no", "acute", "findings", ",", "."];
    w.extend(SEVERITY_WORDS);
    w.extend(Progression::ALL.map(Progression::word));
    w.extend(FINDINGS);
    w
}

pub fn vocabulary() -> Vocabulary {
    Vocabulary::new(&grammar_words())
}

fn attribute(severity: u8, reported_absent: bool) -> Attribute {
    match severity {
        0 if reported_absent => Attribute::Negative,
        0 => Attribute::Blank,
        1 => Attribute::Uncertain,
        _ => Attribute::Positive,
    }
}

/// Report and labels for one exam. `prior` holds the previous severities when
/// the record is written with its prior.
pub fn write_report(
    current: &[u8; NUM_DISEASES],
    prior: Option<&[u8; NUM_DISEASES]>,
) -> (String, LabelVector, [Option<Progression>; NUM_DISEASES]) {
    let mut sentences = Vec::new();
    let mut labels = LabelVector::blank();
    let mut progressions = [None; NUM_DISEASES];
    for f in 0..NUM_DISEASES {
        let name = FINDINGS[f];
        let prog = prior.and_then(|p| Progression::between(p[f], current[f]));
        progressions[f] = prog;
        let sev = current[f];
        let sentence = match (sev, prog) {
            (0, Some(Progression::Resolved)) => Some(format!("no {name} , resolved .")),
            (0, _) if ALWAYS_REPORTED.contains(&f) => Some(format!("no {name} .")),
            (0, _) => None,
            (s, Some(p)) => Some(format!("{} {name} , {} .", SEVERITY_WORDS[s as usize - 1], p.word())),
            (s, None) => Some(format!("{} {name} .", SEVERITY_WORDS[s as usize - 1])),
        };
        labels.0[f] = attribute(sev, sentence.is_some());
        sentences.extend(sentence);
    }
    if sentences.is_empty() {
        sentences.push("no acute findings .".to_string());
    }
    (sentences.join(" "), labels, progressions)
}

/// Keyword and negation rules over the closed report grammar.
pub fn rule_label(report: &str) -> LabelVector {
    let mut labels = LabelVector::blank();
    let words = split_words(report);
    for sentence in words.split(|w| w == ".") {
        let Some(f) = sentence.iter().find_map(|w| FINDINGS.iter().position(|n| n == w)) else {
            continue;
        };
        labels.0[f] = if sentence.first().map(String::as_str) == Some("no") {
            Attribute::Negative
        } else if sentence.iter().any(|w| w == "possible") {
            Attribute::Uncertain
        } else {
            Attribute::Positive
        };
    }
    labels
}

struct Patient {
    background: Vec<f64>,
    visits: Vec<[u8; NUM_DISEASES]>,
    noise_seeds: Vec<u64>,
}

fn patient_seed(seed: u64, patient: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (patient as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn simulate_patient(cfg: &SynthConfig, patient: usize) -> Patient {
    let mut rng = ChaCha8Rng::seed_from_u64(patient_seed(cfg.seed, patient));
    let n = cfg.image_size;

    let mut background = vec![0.0; n * n];
    let base = rng.random_range(0.15..0.3);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..n as f64),
                rng.random_range(4.0..10.0),
                rng.random_range(-0.08..0.08),
            )
        })
        .collect();
    for y in 0..n {
        for x in 0..n {
            let mut v = base;
            for &(by, bx, s, a) in &blobs {
                let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                v += a * (-d2 / (2.0 * s * s)).exp();
            }
            background[y * n + x] = v;
        }
    }
    for f in 0..NUM_DISEASES {
        if rng.random_bool(cfg.distractor_prob) {
            let r = Renderer::for_finding(f, n);
            let amp = rng.random_range(0.5 * cfg.intensity[0]..cfg.intensity[1]);
            for y in 0..n {
                for x in 0..n {
                    background[y * n + x] += amp * r.coverage(y, x);
                }
            }
        }
    }

    let mut visits = Vec::with_capacity(cfg.visits_per_patient);
    let mut state = [0u8; NUM_DISEASES];
    for v in 0..cfg.visits_per_patient {
        for s in state.iter_mut() {
            *s = if v == 0 {
                if rng.random_bool(cfg.present_prob) {
                    rng.random_range(1..=3)
                } else {
                    0
                }
            } else if *s == 0 {
                if rng.random_bool(cfg.onset_prob) {
                    rng.random_range(1..=3)
                } else {
                    0
                }
            } else if rng.random_bool(cfg.resolve_prob) {
                0
            } else if rng.random_bool(cfg.change_prob) {
                let others: Vec<u8> = (1..=3).filter(|&x| x != *s).collect();
                others[rng.random_range(0..others.len())]
            } else {
                *s
            };
        }
        visits.push(state);
    }
    let noise_seeds = (0..cfg.visits_per_patient).map(|_| rng.random()).collect();
    Patient {
        background,
        visits,
        noise_seeds,
    }
}

fn render(cfg: &SynthConfig, p: &Patient, visit: usize) -> Tensor<f32> {
    let n = cfg.image_size;
    let mut img = p.background.clone();
    for (f, &sev) in p.visits[visit].iter().enumerate() {
        if sev == 0 {
            continue;
        }
        let r = Renderer::for_finding(f, n);
        let amp = cfg.intensity[sev as usize - 1];
        for y in 0..n {
            for x in 0..n {
                img[y * n + x] += amp * r.coverage(y, x);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seeds[visit]);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite noise");
    let data = img
        .into_iter()
        .map(|v| (v + if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 }).clamp(0.0, 1.0) as f32)
        .collect();
    Tensor::new(vec![1, n, n], data).expect("image geometry")
}

/// Patient chains with exactly `round(prior_fraction · N)` records keeping
/// their prior; the first visit of a chain never has one.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<StudyRecord>> {
    cfg.validate()?;
    let patients: Vec<Patient> = (0..cfg.n_patients).map(|p| simulate_patient(cfg, p)).collect();

    let mut candidates: Vec<(usize, usize)> = (0..cfg.n_patients)
        .flat_map(|p| (1..cfg.visits_per_patient).map(move |v| (p, v)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ab1e);
    candidates.shuffle(&mut rng);
    let keep: std::collections::HashSet<(usize, usize)> = candidates.into_iter().take(cfg.prior_count()).collect();

    let mut records = Vec::with_capacity(cfg.n_patients * cfg.visits_per_patient);
    for (pid, p) in patients.iter().enumerate() {
        let mut previous: Option<StudyRecord> = None;
        for v in 0..cfg.visits_per_patient {
            let with_prior = keep.contains(&(pid, v));
            let prior_state = with_prior.then(|| &p.visits[v - 1]);
            let (report, labels, progressions) = write_report(&p.visits[v], prior_state);
            let prior = if with_prior {
                let prev = previous.as_ref().expect("visit chain");
                Some(Prior {
                    study_id: prev.study_id.clone(),
                    image: prev.image.clone(),
                    report: prev.report.clone(),
                    labels: prev.labels,
                })
            } else {
                None
            };
            let rec = StudyRecord {
                study_id: study_id(pid + 1, v + 1),
                patient_id: format!("p{:05}", pid + 1),
                visit: v + 1,
                image: render(cfg, p, v),
                report,
                labels,
                prior,
                progressions,
            };
            previous = Some(rec.clone());
            records.push(rec);
        }
    }
    Ok(records)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    study_id: String,
    patient_id: String,
    visit: usize,
    image: String,
    report: String,
    prior_study: Option<String>,
    labels: LabelVector,
    prior_labels: Option<LabelVector>,
    progressions: [Option<Progression>; NUM_DISEASES],
}

/// `manifest.jsonl`, `vocab.txt`, `images/<id>.ddtr`, `reports/<id>.txt`.
pub fn write_corpus(dir: impl AsRef<Path>, records: &[StudyRecord]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("reports"))?;
    vocabulary().save(dir.join("vocab.txt"))?;
    let mut manifest = String::new();
    for r in records {
        let image = format!("images/{}.ddtr", r.study_id);
        let report = format!("reports/{}.txt", r.study_id);
        io::write(dir.join(&image), &r.image)?;
        std::fs::write(dir.join(&report), format!("{}\n", r.report))?;
        let line = ManifestLine {
            study_id: r.study_id.clone(),
            patient_id: r.patient_id.clone(),
            visit: r.visit,
            image,
            report,
            prior_study: r.prior.as_ref().map(|p| p.study_id.clone()),
            labels: r.labels,
            prior_labels: r.prior.as_ref().map(|p| p.labels),
            progressions: r.progressions,
        };
        manifest.push_str(&serde_json::to_string(&line)?);
        manifest.push('\n');
    }
    std::fs::write(dir.join("manifest.jsonl"), manifest)?;
    Ok(())
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Vec<StudyRecord>> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.jsonl");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ModelError::Data(format!("cannot read corpus manifest {}: {e}", path.display())))?;
    let lines: Vec<ManifestLine> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    let mut by_id = std::collections::HashMap::new();
    let mut records = Vec::with_capacity(lines.len());
    for line in lines {
        let image: Tensor<f32> = io::read(dir.join(&line.image))?;
        let report = std::fs::read_to_string(dir.join(&line.report))?.trim_end().to_string();
        let prior = match &line.prior_study {
            Some(id) => {
                let &idx = by_id
                    .get(id)
                    .ok_or_else(|| ModelError::Data(format!("{} references unknown prior {id}", line.study_id)))?;
                let p: &StudyRecord = &records[idx];
                Some(Prior {
                    study_id: id.clone(),
                    image: p.image.clone(),
                    report: p.report.clone(),
                    labels: line.prior_labels.unwrap_or(p.labels),
                })
            }
            None => None,
        };
        by_id.insert(line.study_id.clone(), records.len());
        records.push(StudyRecord {
            study_id: line.study_id,
            patient_id: line.patient_id,
            visit: line.visit,
            image,
            report,
            labels: line.labels,
            prior,
            progressions: line.progressions,
        });
    }
    Ok(records)
}
