//! Prompt-conditioned transformer decoder with cross-attention to image features.

use ddatr_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::labels::{PromptSequence, NUM_DISEASES};
use crate::nn::{Init, Norm, Pointwise};
use crate::text::sinusoid;
use crate::vocab::{BOS, EOS, PROMPT_BASE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_len: usize,
    pub beam: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            ff_width: 128,
            max_len: 60,
            beam: 1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "decoder width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0 || self.ff_width == 0 || self.max_len == 0 || self.beam == 0 {
            return Err(ModelError::Config("decoder layers, widths, length and beam must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Pointwise,
    k: Pointwise,
    v: Pointwise,
    o: Pointwise,
}

impl Attn {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Self {
        let p = |store: &mut ParamStore<T>, s: &str, rng: &mut R| Pointwise::new(store, &format!("{name}.{s}"), d, d, Init::Lecun, rng);
        Self {
            q: p(store, "q", rng),
            k: p(store, "k", rng),
            v: p(store, "v", rng),
            o: p(store, "o", rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross_attn: Attn,
    ln_ff: Norm,
    ff1: Pointwise,
    ff2: Pointwise,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub vocab_size: usize,
    pub feature_channels: usize,
    pub embed: ParamId,
    mem_proj: Pointwise,
    layers: Vec<Layer>,
    final_norm: Norm,
    pub out: Pointwise,
}

/// Scaled dot-product attention split over `heads` column groups.
fn attend<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
    mask: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let d = q.shape()[1];
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.narrow(1, h * dh, dh)?;
        let kh = k.narrow(1, h * dh, dh)?;
        let vh = v.narrow(1, h * dh, dh)?;
        let mut s = qh.matmul(&kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            s = s.add(&m)?;
        }
        outs.push(s.softmax(1)?.matmul(&vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        Ok(Var::concat(&outs, 1)?)
    }
}

fn positions<T: Scalar>(start: usize, n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for p in start..start + n {
        data.extend(sinusoid(p, d).into_iter().map(T::cast));
    }
    Tensor::new(vec![n, d], data).expect("position table")
}

/// Additive causal mask: 0 on and below the diagonal, a large negative above.
fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n], |i| if i % n > i / n { T::cast(-1e9) } else { T::zero() })
}

pub fn prompt_ids(prompt: &PromptSequence) -> [usize; NUM_DISEASES] {
    prompt.map(|t| PROMPT_BASE + t.attribute().index())
}

/// Why generation stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Eos,
    LengthLimit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    /// Generated ids, including the final `<eos>` when one was produced.
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub terminated_by: Termination,
}

impl GenerationResult {
    pub fn score(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Next-token distribution over a growing prefix.
pub trait StepScorer {
    type State: Clone;
    /// Log-probabilities of every next token.
    fn log_probs(&self, state: &Self::State) -> Vec<f64>;
    fn advance(&self, state: &Self::State, token: usize) -> Result<Self::State>;
}

pub fn greedy<S: StepScorer>(scorer: &S, init: S::State, max_len: usize, eos: usize) -> Result<GenerationResult> {
    let mut state = init;
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();
    while tokens.len() < max_len {
        let lp = scorer.log_probs(&state);
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        tokens.push(best);
        log_probs.push(lp[best]);
        if best == eos {
            return Ok(GenerationResult {
                tokens,
                log_probs,
                terminated_by: Termination::Eos,
            });
        }
        state = scorer.advance(&state, best)?;
    }
    Ok(GenerationResult {
        tokens,
        log_probs,
        terminated_by: Termination::LengthLimit,
    })
}

struct Hyp<S> {
    state: Option<S>,
    tokens: Vec<usize>,
    log_probs: Vec<f64>,
    score: f64,
}

/// Beam search keeping the `width` best expansions per step; a hypothesis
/// leaves the beam when it emits `eos`.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    init: S::State,
    width: usize,
    max_len: usize,
    eos: usize,
) -> Result<GenerationResult> {
    let mut alive = vec![Hyp {
        state: Some(init),
        tokens: Vec::new(),
        log_probs: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp<S::State>> = Vec::new();
    for _ in 0..max_len {
        let mut cand: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let lp = scorer.log_probs(hyp.state.as_ref().expect("alive state"));
            for (t, &v) in lp.iter().enumerate() {
                cand.push((hyp.score + v, h, t, v));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cand.truncate(width);
        let mut next = Vec::new();
        for (score, h, t, v) in cand {
            let parent = &alive[h];
            let mut tokens = parent.tokens.clone();
            tokens.push(t);
            let mut log_probs = parent.log_probs.clone();
            log_probs.push(v);
            if t == eos {
                finished.push(Hyp {
                    state: None,
                    tokens,
                    log_probs,
                    score,
                });
            } else {
                next.push(Hyp {
                    state: Some(scorer.advance(parent.state.as_ref().expect("alive state"), t)?),
                    tokens,
                    log_probs,
                    score,
                });
            }
        }
        alive = next;
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        // scores only decrease, so no live hypothesis can still overtake
        if alive.is_empty() || best_done >= best_alive {
            break;
        }
    }
    let pick = |hyps: Vec<Hyp<S::State>>, term| {
        hyps.into_iter()
            .map(|h| (h.score, h.tokens, h.log_probs, term))
            .collect::<Vec<_>>()
    };
    let mut all = pick(finished, Termination::Eos);
    all.extend(pick(alive, Termination::LengthLimit));
    let (_, tokens, log_probs, terminated_by) = all
        .into_iter()
        .reduce(|a, b| if b.0 > a.0 { b } else { a })
        .ok_or_else(|| ModelError::Contract("beam search produced no hypothesis".into()))?;
    Ok(GenerationResult {
        tokens,
        log_probs,
        terminated_by,
    })
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &DecoderConfig,
        vocab_size: usize,
        feature_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let embed = store.add("dec.embed", Tensor::randn(&[vocab_size, d], 1.0, rng));
        let mem_proj = Pointwise::new(store, "dec.mem", feature_channels, d, Init::Lecun, rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = format!("dec.layer{l}");
            layers.push(Layer {
                ln_self: Norm::new(store, &format!("{n}.ln_self"), d),
                self_attn: Attn::new(store, &format!("{n}.self"), d, rng),
                ln_cross: Norm::new(store, &format!("{n}.ln_cross"), d),
                cross_attn: Attn::new(store, &format!("{n}.cross"), d, rng),
                ln_ff: Norm::new(store, &format!("{n}.ln_ff"), d),
                ff1: Pointwise::new(store, &format!("{n}.ff1"), d, config.ff_width, Init::He, rng),
                ff2: Pointwise::new(store, &format!("{n}.ff2"), config.ff_width, d, Init::Lecun, rng),
            });
        }
        let final_norm = Norm::new(store, "dec.ln_final", d);
        let out = Pointwise::new(store, "dec.out", d, vocab_size, Init::Lecun, rng);
        Ok(Self {
            config: config.clone(),
            vocab_size,
            feature_channels,
            embed,
            mem_proj,
            layers,
            final_norm,
            out,
        })
    }

    /// Flattened `C × H × W` feature projected to `HW × D` memory rows.
    pub fn memory<'g, T: Scalar>(&self, feature: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = feature.shape();
        if s.len() != 3 || s[0] != self.feature_channels {
            return Err(ModelError::Contract(format!(
                "decoder expects a {}-channel feature map, got {s:?}",
                self.feature_channels
            )));
        }
        let n = s[1] * s[2];
        let rows = feature.reshape(&[s[0], n])?.transpose()?;
        let pos = feature.graph().constant(positions(0, n, self.config.width));
        Ok(self.mem_proj.rows(rows)?.add(&pos)?)
    }

    fn embed_tokens<'g, T: Scalar>(&self, g: &'g Graph<'g, T>, ids: &[usize], start: usize) -> Result<Var<'g, T>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id: bad,
                size: self.vocab_size,
            });
        }
        let e = g.param(self.embed).gather_rows(ids)?;
        Ok(e.add(&g.constant(positions(start, ids.len(), self.config.width)))?)
    }

    /// Logits `[n, V]` for every input position under causal masking.
    pub fn logits<'g, T: Scalar>(&self, feature: Var<'g, T>, input: &[usize]) -> Result<Var<'g, T>> {
        let g = feature.graph();
        let mem = self.memory(feature)?;
        let mut x = self.embed_tokens(g, input, 0)?;
        let mask = g.constant(causal_mask(input.len()));
        let heads = self.config.heads;
        for l in &self.layers {
            let h = l.ln_self.layer(x)?;
            let a = &l.self_attn;
            let s = attend(a.q.rows(h)?, a.k.rows(h)?, a.v.rows(h)?, heads, Some(mask))?;
            x = x.add(&a.o.rows(s)?)?;
            let h = l.ln_cross.layer(x)?;
            let c = &l.cross_attn;
            let s = attend(c.q.rows(h)?, c.k.rows(mem)?, c.v.rows(mem)?, heads, None)?;
            x = x.add(&c.o.rows(s)?)?;
            let h = l.ln_ff.layer(x)?;
            x = x.add(&l.ff2.rows(l.ff1.rows(h)?.relu()?)?)?;
        }
        Ok(self.out.rows(self.final_norm.layer(x)?)?)
    }

    /// `[prompt] + [BOS] + gold[..-1]`.
    pub fn train_input(prompt: &PromptSequence, gold: &[usize]) -> Vec<usize> {
        let mut input: Vec<usize> = prompt_ids(prompt).to_vec();
        input.push(BOS);
        input.extend_from_slice(&gold[..gold.len().saturating_sub(1)]);
        input
    }

    /// Mean next-token cross-entropy over the gold positions only.
    pub fn decode_train<'g, T: Scalar>(
        &self,
        feature: Var<'g, T>,
        prompt: &PromptSequence,
        gold: &[usize],
    ) -> Result<Var<'g, T>> {
        if gold.is_empty() {
            return Err(ModelError::EmptyGold);
        }
        let input = Self::train_input(prompt, gold);
        let logits = self.logits(feature, &input)?;
        let predicted = logits.narrow(0, NUM_DISEASES, gold.len())?;
        Ok(predicted.cross_entropy_rows(gold)?.mean()?)
    }

    /// Incremental scorer over a fixed image feature and prompt.
    pub fn session<'a, T: Scalar>(
        &'a self,
        store: &'a ParamStore<T>,
        feature: &Tensor<T>,
        prompt: &PromptSequence,
    ) -> Result<(Session<'a, T>, SessionState<T>)> {
        let g = Graph::with_params(store).no_grad();
        let mem = self.memory(g.constant(feature.clone()))?;
        let mut mem_kv = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            mem_kv.push((
                l.cross_attn.k.rows(mem)?.to_tensor(),
                l.cross_attn.v.rows(mem)?.to_tensor(),
            ));
        }
        let session = Session {
            decoder: self,
            store,
            mem_kv,
        };
        let mut state = SessionState {
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            len: 0,
            log_probs: Vec::new(),
        };
        for id in prompt_ids(prompt).into_iter().chain([BOS]) {
            state = session.advance(&state, id)?;
        }
        Ok((session, state))
    }

    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        feature: &Tensor<T>,
        prompt: &PromptSequence,
    ) -> Result<GenerationResult> {
        let (session, state) = self.session(store, feature, prompt)?;
        if self.config.beam <= 1 {
            greedy(&session, state, self.config.max_len, EOS)
        } else {
            beam_search(&session, state, self.config.beam, self.config.max_len, EOS)
        }
    }
}

/// Decoder bound to one image feature; cross-attention keys and values are
/// computed once.
pub struct Session<'a, T: Scalar> {
    decoder: &'a Decoder,
    store: &'a ParamStore<T>,
    mem_kv: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Self-attention cache after consuming a prefix.
#[derive(Clone, Debug)]
pub struct SessionState<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    log_probs: Vec<f64>,
}

impl<T: Scalar> StepScorer for Session<'_, T> {
    type State = SessionState<T>;

    fn log_probs(&self, state: &Self::State) -> Vec<f64> {
        state.log_probs.clone()
    }

    fn advance(&self, state: &Self::State, token: usize) -> Result<Self::State> {
        let dec = self.decoder;
        let d = dec.config.width;
        let heads = dec.config.heads;
        let g = Graph::with_params(self.store).no_grad();
        let mut next = state.clone();
        let t = state.len + 1;
        let mut x = dec.embed_tokens(&g, &[token], state.len)?;
        for (li, l) in dec.layers.iter().enumerate() {
            let h = l.ln_self.layer(x)?;
            let a = &l.self_attn;
            next.keys[li].extend_from_slice(a.k.rows(h)?.value().data());
            next.values[li].extend_from_slice(a.v.rows(h)?.value().data());
            let k = g.constant(Tensor::new(vec![t, d], next.keys[li].clone())?);
            let v = g.constant(Tensor::new(vec![t, d], next.values[li].clone())?);
            let s = attend(a.q.rows(h)?, k, v, heads, None)?;
            x = x.add(&a.o.rows(s)?)?;
            let h = l.ln_cross.layer(x)?;
            let (mk, mv) = &self.mem_kv[li];
            let s = attend(l.cross_attn.q.rows(h)?, g.constant(mk.clone()), g.constant(mv.clone()), heads, None)?;
            x = x.add(&l.cross_attn.o.rows(s)?)?;
            let h = l.ln_ff.layer(x)?;
            x = x.add(&l.ff2.rows(l.ff1.rows(h)?.relu()?)?)?;
        }
        let logits = dec.out.rows(dec.final_norm.layer(x)?)?.to_tensor();
        next.len = t;
        next.log_probs = log_softmax(logits.data());
        Ok(next)
    }
}

pub fn log_softmax<T: Scalar>(x: &[T]) -> Vec<f64> {
    let m = x.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z = x.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v.as_f64() - z).collect()
}

/// `lm + w · (ce_cur + ce_prior)`, with an absent prior term counting as 0.
pub fn total_loss<'g, T: Scalar>(
    lm: Var<'g, T>,
    ce_cur: Var<'g, T>,
    ce_prior: Option<Var<'g, T>>,
    w: f64,
) -> Result<Var<'g, T>> {
    let ce = match ce_prior {
        Some(p) => ce_cur.add(&p)?,
        None => ce_cur,
    };
    Ok(lm.add(&ce.scale(w)?)?)
}
