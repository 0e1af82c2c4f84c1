#![allow(dead_code)]

use ddatr::config::RunConfig;
use ddatr::labels::NUM_DISEASES;
use ddatr::model::Model;
use ddatr::synth::{generate_corpus, vocabulary, StudyRecord, SynthConfig};
use ddatr_tensor::{ParamStore, Scalar, Tensor};

pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        widths: vec![4, 6, 6, 8],
        text_width: 8,
        dec_layers: 1,
        dec_width: 8,
        dec_heads: 2,
        dec_ff_width: 16,
        max_gen_len: 12,
        epochs: 1,
        batch_size: 8,
        lr: 1e-3,
        ..RunConfig::default()
    }
}

pub fn corpus(seed: u64, patients: usize, prior_fraction: f64) -> Vec<StudyRecord> {
    generate_corpus(&SynthConfig {
        seed,
        n_patients: patients,
        prior_fraction,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn model<T: Scalar>(cfg: &RunConfig) -> (Model, ParamStore<T>) {
    let mut store = ParamStore::new();
    let m = Model::new(cfg, vocabulary(), &mut store).unwrap();
    (m, store)
}

/// Same shape and identical bit patterns.
pub fn bit_equal<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

/// Adds small noise to every trainable parameter so zero-initialized gates open.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

pub fn is_prior_side(name: &str) -> bool {
    name.starts_with("prior.") || name.starts_with("dfam") || name.starts_with("ddam") || name.starts_with("head.prior")
}

// Brute-force metric oracles.

pub struct OracleCe {
    pub counts: Vec<(u64, u64, u64)>,
    pub macro_prf: (f64, f64, f64),
    pub micro_prf: (f64, f64, f64),
}

fn oracle_prf(tp: u64, fp: u64, fneg: u64) -> (f64, f64, f64) {
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
    let f = if p > 0.0 || r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

pub fn oracle_ce(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> OracleCe {
    let cols = pred[0].len();
    let mut counts = Vec::new();
    for c in 0..cols {
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for r in 0..pred.len() {
            if pred[r][c] && gold[r][c] {
                tp += 1;
            }
            if pred[r][c] && !gold[r][c] {
                fp += 1;
            }
            if !pred[r][c] && gold[r][c] {
                fneg += 1;
            }
        }
        counts.push((tp, fp, fneg));
    }
    let per: Vec<_> = counts.iter().map(|&(a, b, c)| oracle_prf(a, b, c)).collect();
    let k = cols as f64;
    let macro_prf = (
        per.iter().map(|x| x.0).sum::<f64>() / k,
        per.iter().map(|x| x.1).sum::<f64>() / k,
        per.iter().map(|x| x.2).sum::<f64>() / k,
    );
    let tot = counts.iter().fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    OracleCe {
        counts,
        macro_prf,
        micro_prf: oracle_prf(tot.0, tot.1, tot.2),
    }
}

fn grams(s: &[u8], n: usize) -> Vec<Vec<u8>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn occurrences(list: &[Vec<u8>], g: &[u8]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

/// Corpus BLEU by explicit n-gram lists and linear counting.
pub fn oracle_bleu(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>], n: usize) -> f64 {
    let mut log_sum = 0.0;
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, rs) in cands.iter().zip(refs) {
        c_len += c.len();
        let mut best: Option<usize> = None;
        for r in rs {
            best = Some(match best {
                None => r.len(),
                Some(b) => {
                    let (db, dr) = ((b as i64 - c.len() as i64).abs(), (r.len() as i64 - c.len() as i64).abs());
                    if dr < db || (dr == db && r.len() < b) {
                        r.len()
                    } else {
                        b
                    }
                }
            });
        }
        r_len += best.unwrap_or(0);
    }
    for k in 1..=n {
        let (mut num, mut den) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            let cg = grams(c, k);
            den += cg.len();
            let mut seen: Vec<Vec<u8>> = Vec::new();
            for g in &cg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                let mine = occurrences(&cg, g);
                let cap = rs.iter().map(|r| occurrences(&grams(r, k), g)).max().unwrap_or(0);
                num += mine.min(cap);
            }
        }
        if num == 0 || den == 0 {
            return 0.0;
        }
        log_sum += (num as f64 / den as f64).ln();
    }
    if c_len == 0 {
        return 0.0;
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * (log_sum / n as f64).exp()
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn oracle_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_subseq = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

pub fn oracle_rouge(c: &[u8], r: &[u8]) -> f64 {
    let l = oracle_lcs(c, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let beta2 = 1.44;
    (1.0 + beta2) * p * rec / (rec + beta2 * p)
}

pub fn random_matrix<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize, p: f64) -> Vec<Vec<bool>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_bool(p)).collect()).collect()
}

pub fn random_words<R: rand::Rng>(rng: &mut R, max_len: usize, alphabet: u8) -> Vec<u8> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(0..alphabet)).collect()
}

pub const FINDINGS: usize = NUM_DISEASES;
