//! Prior and current branches fused stage by stage, plus the two classifier heads.

use ddatr_tensor::{ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Branch};
use crate::ddam::Ddam;
use crate::dfam::Dfam;
use crate::error::{ModelError, Result};
use crate::labels::{LabelVector, NUM_ATTRIBUTES, NUM_DISEASES};
use crate::nn::{Init, Pointwise};

/// Which fusion components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fusion {
    /// Fuse at every stage; otherwise only at the last one.
    pub multi_stage: bool,
    pub dfam: bool,
    pub ddam: bool,
    /// Learned gates in both modules; pass-through when off.
    pub dynamic: bool,
}

impl Default for Fusion {
    fn default() -> Self {
        Self {
            multi_stage: true,
            dfam: true,
            ddam: true,
            dynamic: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LongitudinalEncoder {
    pub config: BackboneConfig,
    pub fusion: Fusion,
    pub current: Backbone,
    /// Absent when the model is built without prior machinery.
    pub prior: Option<PriorBranch>,
    pub head_cur: Pointwise,
}

#[derive(Clone, Debug)]
pub struct PriorBranch {
    pub backbone: Backbone,
    /// Per stage; `None` where that stage does not fuse.
    pub dfams: Vec<Option<Dfam>>,
    pub ddams: Vec<Option<Ddam>>,
    pub head: Pointwise,
}

/// Everything the encoder computed for one study.
pub struct EncoderOutput<'g, T: Scalar> {
    pub current: Var<'g, T>,
    pub prior: Option<Var<'g, T>>,
    pub cur_logits: Var<'g, T>,
    pub prior_logits: Option<Var<'g, T>>,
    /// `F̂_cur^m` for every stage.
    pub cur_stages: Vec<Var<'g, T>>,
    /// `(F_prior^m, F̂_prior^m)` for every stage.
    pub prior_stages: Vec<(Var<'g, T>, Var<'g, T>)>,
}

impl<T: Scalar> EncoderOutput<'_, T> {
    pub fn predicted_labels(&self) -> LabelVector {
        let l = self.cur_logits.to_tensor();
        LabelVector::from_logits(&l.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>())
    }
}

impl LongitudinalEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &BackboneConfig,
        fusion: Fusion,
        text_width: usize,
        with_prior: bool,
        shared_backbone: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let current = Backbone::new(store, Branch::Current, config, rng)?;
        let c_final = *config.widths.last().expect("validated widths");
        let classes = NUM_DISEASES * NUM_ATTRIBUTES;
        let head_cur = Pointwise::new(store, "head.current", c_final, classes, Init::Lecun, rng);
        let prior = if with_prior {
            let backbone = if shared_backbone {
                current.shared_as(Branch::Prior)
            } else {
                Backbone::new(store, Branch::Prior, config, rng)?
            };
            let m_total = config.stages();
            let fuses = |m: usize| fusion.multi_stage || m == m_total;
            let mut dfams = Vec::with_capacity(m_total);
            let mut ddams = Vec::with_capacity(m_total);
            for m in 1..=m_total {
                let c = config.widths[m - 1];
                dfams.push((fusion.dfam && fuses(m)).then(|| Dfam::new(store, &format!("dfam{m}"), c, text_width, rng)));
                ddams.push((fusion.ddam && fuses(m)).then(|| Ddam::new(store, &format!("ddam{m}"), c, rng)));
            }
            let head = Pointwise::new(store, "head.prior", c_final, classes, Init::Lecun, rng);
            Some(PriorBranch {
                backbone,
                dfams,
                ddams,
                head,
            })
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            fusion,
            current,
            prior,
            head_cur,
        })
    }

    /// Global average pool, then a linear map to `14 × 4` logits.
    pub fn classify<'g, T: Scalar>(&self, feature: Var<'g, T>, head: Branch) -> Result<Var<'g, T>> {
        let expected = self.config.output_shape(self.config.stages());
        if feature.shape() != expected {
            return Err(ModelError::Contract(format!(
                "classifier expects a final-stage feature {expected:?}, got {:?}",
                feature.shape()
            )));
        }
        let head = match head {
            Branch::Current => self.head_cur,
            Branch::Prior => {
                self.prior
                    .as_ref()
                    .ok_or_else(|| ModelError::Contract("model has no prior head".into()))?
                    .head
            }
        };
        let c = expected[0];
        let pooled = feature.mean_axes(&[1, 2])?.reshape(&[1, c])?;
        Ok(head.rows(pooled)?.reshape(&[NUM_DISEASES, NUM_ATTRIBUTES])?)
    }

    /// Two-case encoding: with prior image and prior-text feature, or neither.
    pub fn encode<'g, T: Scalar>(
        &self,
        current: Var<'g, T>,
        prior_image: Option<Var<'g, T>>,
        prior_text: Option<Var<'g, T>>,
    ) -> Result<EncoderOutput<'g, T>> {
        let prior_in = match (prior_image, prior_text) {
            (Some(i), Some(t)) => Some((i, t)),
            (None, None) => None,
            _ => return Err(ModelError::PartialPrior),
        };
        let branch = match (&self.prior, prior_in) {
            (Some(b), Some(p)) => Some((b, p)),
            _ => None,
        };
        let m_total = self.config.stages();
        let mut cur = current;
        let mut cur_stages = Vec::with_capacity(m_total);
        let mut prior_stages = Vec::with_capacity(m_total);
        let mut prior_feat = branch.map(|(_, (img, _))| img);
        for m in 1..=m_total {
            let fused_prior = match (branch, prior_feat) {
                (Some((b, (_, text))), Some(p)) => {
                    let raw = b.backbone.stage_forward(m, p)?;
                    let fused = match &b.dfams[m - 1] {
                        Some(d) => raw.add(&d.forward(raw, text, self.fusion.dynamic)?)?,
                        None => raw,
                    };
                    prior_stages.push((raw, fused));
                    Some(fused)
                }
                _ => None,
            };
            prior_feat = fused_prior;
            let raw_cur = self.current.stage_forward(m, cur)?;
            cur = match (branch.and_then(|(b, _)| b.ddams[m - 1].as_ref()), fused_prior) {
                (Some(d), Some(p)) => d.forward(raw_cur, Some(p), true, self.fusion.dynamic)?,
                _ => raw_cur,
            };
            cur_stages.push(cur);
        }
        let cur_logits = self.classify(cur, Branch::Current)?;
        let prior_logits = match prior_feat {
            Some(p) => Some(self.classify(p, Branch::Prior)?),
            None => None,
        };
        Ok(EncoderOutput {
            current: cur,
            prior: prior_feat,
            cur_logits,
            prior_logits,
            cur_stages,
            prior_stages,
        })
    }

    pub fn has_prior_branch(&self) -> bool {
        self.prior.is_some()
    }
}

/// Mean over diseases of the per-disease attribute cross-entropy.
pub fn classification_loss<'g, T: Scalar>(logits: Var<'g, T>, gold: &LabelVector) -> Result<Var<'g, T>> {
    Ok(logits.cross_entropy_rows(&gold.indices())?.mean()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Attribute;
    use ddatr_tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            image_size: 16,
            widths: vec![4, 6, 8],
        }
    }

    fn build(store: &mut ParamStore<f64>, fusion: Fusion) -> LongitudinalEncoder {
        LongitudinalEncoder::new(store, &tiny(), fusion, 5, true, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn partial_prior_rejected() {
        let mut store = ParamStore::new();
        let e = build(&mut store, Fusion::default());
        let g = Graph::with_params(&store);
        let cur = g.constant(rand(&[1, 16, 16], 1));
        let img = g.constant(rand(&[1, 16, 16], 2));
        assert!(matches!(e.encode(cur, Some(img), None), Err(ModelError::PartialPrior)));
        let txt = g.constant(rand(&[5, 3], 3));
        assert!(matches!(e.encode(cur, None, Some(txt)), Err(ModelError::PartialPrior)));
    }

    #[test]
    fn residual_shapes_preserved() {
        let mut store = ParamStore::new();
        let e = build(&mut store, Fusion::default());
        let g = Graph::with_params(&store);
        let out = e
            .encode(g.constant(rand(&[1, 16, 16], 1)), Some(g.constant(rand(&[1, 16, 16], 2))), Some(g.constant(rand(&[5, 3], 3))))
            .unwrap();
        for (m, (raw, fused)) in out.prior_stages.iter().enumerate() {
            assert_eq!(raw.shape(), fused.shape());
            assert_eq!(out.cur_stages[m].shape(), tiny().output_shape(m + 1));
        }
        assert_eq!(out.cur_logits.shape(), vec![14, 4]);
        assert_eq!(out.prior_logits.unwrap().shape(), vec![14, 4]);
    }

    #[test]
    fn single_stage_fusion_only_builds_final_modules() {
        let mut store = ParamStore::new();
        let e = build(
            &mut store,
            Fusion {
                multi_stage: false,
                ..Fusion::default()
            },
        );
        let p = e.prior.as_ref().unwrap();
        assert_eq!(p.dfams.iter().filter(|d| d.is_some()).count(), 1);
        assert!(p.ddams[2].is_some() && p.ddams[0].is_none());
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let mut store = ParamStore::new();
        let e = build(&mut store, Fusion::default());
        store.set(e.head_cur.w, Tensor::zeros(&[56, 8])).unwrap();
        let g = Graph::with_params(&store);
        let logits = e.classify(g.constant(Tensor::zeros(&[8, 2, 2])), Branch::Current).unwrap();
        let p = logits.softmax(1).unwrap().to_tensor();
        assert!(p.data().iter().all(|&v| v == 0.25));
        let loss = classification_loss(logits, &LabelVector::blank()).unwrap().item().unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classifier_matches_scalar_oracle() {
        let mut store = ParamStore::new();
        let e = build(&mut store, Fusion::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        store.set(e.head_cur.b, Tensor::randn(&[56], 1.0, &mut rng)).unwrap();
        let f = rand(&[8, 2, 2], 4);
        let g = Graph::with_params(&store);
        let logits = e.classify(g.constant(f.clone()), Branch::Current).unwrap();
        let mut gold = LabelVector::blank();
        for (i, a) in gold.0.iter_mut().enumerate() {
            *a = Attribute::ALL[i % 4];
        }
        let loss = classification_loss(logits, &gold).unwrap().item().unwrap();

        let w = store.value(e.head_cur.w).data();
        let b = store.value(e.head_cur.b).data();
        let pooled: Vec<f64> = (0..8).map(|c| f.data()[c * 4..c * 4 + 4].iter().sum::<f64>() / 4.0).collect();
        let mut total = 0.0;
        for d in 0..14 {
            let row: Vec<f64> = (0..4)
                .map(|k| b[d * 4 + k] + (0..8).map(|c| w[(d * 4 + k) * 8 + c] * pooled[c]).sum::<f64>())
                .collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[gold.0[d].index()].exp() / z).ln();
            for k in 0..4 {
                assert!((logits.to_tensor().data()[d * 4 + k] - row[k]).abs() < 1e-12);
            }
        }
        assert!((loss - total / 14.0).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let g = Graph::<f64>::new();
        let gold = LabelVector([Attribute::Positive; 14]);
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0] {
            let t = Tensor::from_fn(&[14, 4], |i| if i % 4 == 1 { margin } else { 0.0 });
            let l = classification_loss(g.constant(t), &gold).unwrap().item().unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-7);
    }

    #[test]
    fn non_final_feature_rejected() {
        let mut store = ParamStore::new();
        let e = build(&mut store, Fusion::default());
        let g = Graph::with_params(&store);
        assert!(e.classify(g.constant(Tensor::zeros(&[4, 8, 8])), Branch::Current).is_err());
    }
}
