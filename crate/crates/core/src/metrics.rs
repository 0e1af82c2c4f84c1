//! Clinical-efficacy scores over binarized labels, corpus BLEU and ROUGE-L.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::labels::{LabelVector, NUM_DISEASES};

pub const ROUGE_BETA: f64 = 1.2;

/// Positive and uncertain count as positive; negative and blank as negative.
pub fn map_attributes(labels: &LabelVector) -> [bool; NUM_DISEASES] {
    labels.binary()
}

/// Row-major `rows × cols` matrix of binary labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryLabelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BinaryLabelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ModelError::Dimension(format!("{} values for a {rows}×{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_labels(labels: &[LabelVector]) -> Self {
        Self {
            rows: labels.len(),
            cols: NUM_DISEASES,
            data: labels.iter().flat_map(map_attributes).collect(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, pred: bool, gold: bool) {
        match (pred, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    pub fn merge(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// (precision, recall, f1); zero wherever a denominator is zero.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CeScores {
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub precision_micro: f64,
    pub recall_micro: f64,
    pub f1_micro: f64,
}

/// Per-column counts.
pub fn column_counts(pred: &BinaryLabelMatrix, gold: &BinaryLabelMatrix) -> Result<Vec<Counts>> {
    if pred.rows != gold.rows || pred.cols != gold.cols {
        return Err(ModelError::Dimension(format!(
            "prediction {}×{} vs gold {}×{}",
            pred.rows, pred.cols, gold.rows, gold.cols
        )));
    }
    let mut counts = vec![Counts::default(); pred.cols];
    for r in 0..pred.rows {
        for (c, cnt) in counts.iter_mut().enumerate() {
            cnt.add(pred.get(r, c), gold.get(r, c));
        }
    }
    Ok(counts)
}

pub fn ce_scores(pred: &BinaryLabelMatrix, gold: &BinaryLabelMatrix) -> Result<CeScores> {
    if pred.rows == 0 {
        return Err(ModelError::Dimension("no samples".into()));
    }
    let counts = column_counts(pred, gold)?;
    let k = counts.len() as f64;
    let per: Vec<_> = counts.iter().map(Counts::prf).collect();
    let pooled = counts.iter().fold(Counts::default(), |a, &b| a.merge(b));
    let (pm, rm, fm) = pooled.prf();
    Ok(CeScores {
        precision_macro: per.iter().map(|x| x.0).sum::<f64>() / k,
        recall_macro: per.iter().map(|x| x.1).sum::<f64>() / k,
        f1_macro: per.iter().map(|x| x.2).sum::<f64>() / k,
        precision_micro: pm,
        recall_micro: rm,
        f1_micro: fm,
    })
}

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with uniform weights over orders `1..=n`, clipped counts
/// pooled over the corpus, closest-reference brevity penalty, no smoothing.
pub fn corpus_bleu<S: Eq + Hash>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>], n: usize) -> f64 {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for k in 1..=n {
            let cc = ngram_counts(cand, k);
            let mut max_ref: HashMap<&[S], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in cc {
                matched[k - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if c_len == 0 || matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * log_p.exp()
}

pub fn bleu<S: Eq + Hash + Clone>(candidate: &[S], references: &[Vec<S>], n: usize) -> f64 {
    corpus_bleu(&[candidate.to_vec()], &[references.to_vec()], n)
}

pub fn lcs_len<S: Eq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weighted by `β = 1.2`.
pub fn rouge_l<S: Eq>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// One evaluation run, in the emitted key order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub ce_precision_macro: f64,
    pub ce_recall_macro: f64,
    pub ce_f1_macro: f64,
    pub ce_precision_micro: f64,
    pub ce_recall_micro: f64,
    pub ce_f1_micro: f64,
    pub bleu1: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub n_samples: usize,
    pub n_with_prior: usize,
}

pub const CSV_HEADER: [&str; 11] = [
    "ce_precision_macro",
    "ce_recall_macro",
    "ce_f1_macro",
    "ce_precision_micro",
    "ce_recall_micro",
    "ce_f1_micro",
    "bleu1",
    "bleu4",
    "rougeL",
    "n_samples",
    "n_with_prior",
];

impl MetricsRecord {
    pub fn from_parts(ce: CeScores, bleu1: f64, bleu4: f64, rouge_l: f64, n_samples: usize, n_with_prior: usize) -> Self {
        Self {
            ce_precision_macro: ce.precision_macro,
            ce_recall_macro: ce.recall_macro,
            ce_f1_macro: ce.f1_macro,
            ce_precision_micro: ce.precision_micro,
            ce_recall_micro: ce.recall_micro,
            ce_f1_micro: ce.f1_micro,
            bleu1,
            bleu4,
            rouge_l,
            n_samples,
            n_with_prior,
        }
    }
}

/// Scores generated reports against gold reports, labelling both with `labeler`.
pub fn evaluate_reports(
    predicted: &[String],
    gold: &[String],
    n_with_prior: usize,
    labeler: impl Fn(&str) -> LabelVector,
) -> Result<MetricsRecord> {
    if predicted.len() != gold.len() {
        return Err(ModelError::Dimension(format!("{} predictions for {} references", predicted.len(), gold.len())));
    }
    if predicted.is_empty() {
        return Err(ModelError::Data("empty evaluation split".into()));
    }
    let pl: Vec<_> = predicted.iter().map(|r| labeler(r)).collect();
    let gl: Vec<_> = gold.iter().map(|r| labeler(r)).collect();
    let ce = ce_scores(&BinaryLabelMatrix::from_labels(&pl), &BinaryLabelMatrix::from_labels(&gl))?;
    let cand: Vec<Vec<String>> = predicted.iter().map(|r| crate::vocab::split_words(r)).collect();
    let refs: Vec<Vec<Vec<String>>> = gold.iter().map(|r| vec![crate::vocab::split_words(r)]).collect();
    let rouge = cand.iter().zip(&refs).map(|(c, r)| rouge_l(c, &r[0])).sum::<f64>() / cand.len() as f64;
    Ok(MetricsRecord::from_parts(
        ce,
        corpus_bleu(&cand, &refs, 1),
        corpus_bleu(&cand, &refs, 4),
        rouge,
        predicted.len(),
        n_with_prior,
    ))
}
