//! The full report generator: text encoder, longitudinal encoder, decoder.

use ddatr_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::decoder::{total_loss, Decoder, GenerationResult};
use crate::encoder::{classification_loss, EncoderOutput, LongitudinalEncoder};
use crate::error::{ModelError, Result};
use crate::labels::{labels_to_prompt, LabelVector};
use crate::synth::StudyRecord;
use crate::text::TextEncoder;
use crate::vocab::{Vocabulary, EOS};

/// One study converted to model inputs.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub study_id: String,
    pub current: Tensor<T>,
    /// Prior image and prior-report token ids.
    pub prior: Option<(Tensor<T>, Vec<usize>)>,
    /// Gold report ids ending in `<eos>`.
    pub gold: Vec<usize>,
    pub labels: LabelVector,
    pub prior_labels: Option<LabelVector>,
}

pub struct Forward<'g, T: Scalar> {
    pub encoder: EncoderOutput<'g, T>,
    pub lm: Var<'g, T>,
    pub ce_cur: Var<'g, T>,
    pub ce_prior: Option<Var<'g, T>>,
    pub total: Var<'g, T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: LabelVector,
    pub generation: GenerationResult,
    pub text: String,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub encoder: LongitudinalEncoder,
    pub decoder: Decoder,
}

impl Model {
    /// Registers every trainable parameter in `store`, seeded by `config.seed`.
    pub fn new<T: Scalar>(config: &RunConfig, vocab: Vocabulary, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = LongitudinalEncoder::new(
            store,
            &config.backbone(),
            config.fusion(),
            config.text_width,
            config.use_prior,
            config.shared_backbone,
            &mut rng,
        )?;
        let c_final = *config.widths.last().expect("validated");
        let decoder = Decoder::new(store, &config.decoder(), vocab.len(), c_final, &mut rng)?;
        let text = TextEncoder::new(vocab.len(), config.text_width, config.seed);
        Ok(Self {
            config: config.clone(),
            vocab,
            text,
            encoder,
            decoder,
        })
    }

    pub fn sample<T: Scalar>(&self, rec: &StudyRecord) -> Result<Sample<T>> {
        let mut gold = self.vocab.tokenize(&rec.report, self.config.max_gen_len.saturating_sub(1).max(1))?;
        gold.push(EOS);
        let prior = match &rec.prior {
            Some(p) if self.config.use_prior => {
                Some((p.image.cast(), self.vocab.tokenize(&p.report, self.config.max_text_len)?))
            }
            _ => None,
        };
        Ok(Sample {
            study_id: rec.study_id.clone(),
            current: rec.image.cast(),
            prior_labels: prior.as_ref().and(rec.prior.as_ref()).map(|p| p.labels),
            prior,
            gold,
            labels: rec.labels,
        })
    }

    pub fn encode<'g, T: Scalar>(&self, g: &'g Graph<'g, T>, s: &Sample<T>) -> Result<EncoderOutput<'g, T>> {
        let current = g.constant(s.current.clone());
        let (img, txt) = match &s.prior {
            Some((img, ids)) => (Some(g.constant(img.clone())), Some(g.constant(self.text.encode::<T>(ids)?))),
            None => (None, None),
        };
        self.encoder.encode(current, img, txt)
    }

    /// Encoder, prompt construction and all loss terms for one sample.
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<'g, T>, s: &Sample<T>) -> Result<Forward<'g, T>> {
        let enc = self.encode(g, s)?;
        let prompt_labels = if self.config.teacher_forcing { s.labels } else { enc.predicted_labels() };
        let lm = self.decoder.decode_train(enc.current, &labels_to_prompt(&prompt_labels), &s.gold)?;
        let ce_cur = classification_loss(enc.cur_logits, &s.labels)?;
        let ce_prior = match (enc.prior_logits, &s.prior_labels) {
            (Some(l), Some(gold)) => Some(classification_loss(l, gold)?),
            (Some(_), None) => return Err(ModelError::Contract("prior logits without prior labels".into())),
            _ => None,
        };
        let total = total_loss(lm, ce_cur, ce_prior, self.config.loss_weight)?;
        Ok(Forward {
            encoder: enc,
            lm,
            ce_cur,
            ce_prior,
            total,
        })
    }

    /// Predicted labels become the prompt; the report is decoded from them.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, s: &Sample<T>) -> Result<Prediction> {
        let g = Graph::with_params(store).no_grad();
        let enc = self.encode(&g, s)?;
        let labels = enc.predicted_labels();
        let feature = enc.current.to_tensor();
        let generation = self.decoder.generate(store, &feature, &labels_to_prompt(&labels))?;
        let text = self.vocab.detokenize(&generation.tokens);
        Ok(Prediction {
            labels,
            generation,
            text,
        })
    }
}
