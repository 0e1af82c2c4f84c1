mod common;

use common::*;
use ddatr::labels::Attribute;
use ddatr::synth::{read_corpus, rule_label, write_corpus, Progression, SynthConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn labels_round_trip_through_reports(seed in any::<u64>(), f in 0.0f64..=0.5) {
        for r in corpus(seed, 20, f) {
            prop_assert_eq!(rule_label(&r.report), r.labels, "{}", r.report);
            if let Some(p) = &r.prior {
                prop_assert_eq!(rule_label(&p.report), p.labels);
            }
        }
    }

    #[test]
    fn progressions_agree_with_labels(seed in any::<u64>()) {
        for r in corpus(seed, 30, 0.5) {
            let Some(prior) = &r.prior else {
                prop_assert!(r.progressions.iter().all(Option::is_none));
                continue;
            };
            for (f, p) in r.progressions.iter().enumerate() {
                let was = prior.labels.0[f].is_positive() || prior.labels.0[f] == Attribute::Uncertain;
                let now = r.labels.0[f].is_positive() || r.labels.0[f] == Attribute::Uncertain;
                match p {
                    Some(Progression::New) => prop_assert!(!was && now),
                    Some(Progression::Resolved) => prop_assert!(was && !now),
                    Some(_) => prop_assert!(was && now),
                    None => prop_assert!(!was && !now),
                }
            }
        }
    }

    #[test]
    fn prior_is_previous_visit(seed in any::<u64>()) {
        let recs = corpus(seed, 10, 0.5);
        for pair in recs.windows(2) {
            if let Some(p) = &pair[1].prior {
                prop_assert_eq!(&p.study_id, &pair[0].study_id);
                prop_assert_eq!(&p.image, &pair[0].image);
                prop_assert_eq!(&p.report, &pair[0].report);
            }
        }
        prop_assert!(recs.iter().filter(|r| r.visit == 1).all(|r| r.prior.is_none()));
    }

    #[test]
    fn achieved_fraction_within_one_record(seed in any::<u64>(), f in 0.0f64..=0.5) {
        let recs = corpus(seed, 25, f);
        let with = recs.iter().filter(|r| r.has_prior()).count() as f64;
        prop_assert!((with - f * recs.len() as f64).abs() <= 1.0);
    }
}

#[test]
fn images_in_unit_range_and_noisy() {
    for r in corpus(3, 5, 0.5) {
        assert_eq!(r.image.shape(), &[1, 32, 32]);
        assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn disk_round_trip_preserves_records() {
    let recs = corpus(9, 6, 0.5);
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &recs).unwrap();
    assert_eq!(read_corpus(dir.path()).unwrap(), recs);
}

#[test]
fn config_rejects_bad_fraction() {
    let c = SynthConfig {
        prior_fraction: 1.5,
        ..SynthConfig::default()
    };
    assert!(c.validate().is_err());
}
