//! Disease attributes, label vectors and prompt tokens.

use serde::{Deserialize, Serialize};

/// Number of diseases tracked per study.
pub const NUM_DISEASES: usize = 14;
/// Attribute classes per disease.
pub const NUM_ATTRIBUTES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    #[default]
    Blank,
    Positive,
    Negative,
    Uncertain,
}

impl Attribute {
    pub const ALL: [Attribute; NUM_ATTRIBUTES] = [
        Attribute::Blank,
        Attribute::Positive,
        Attribute::Negative,
        Attribute::Uncertain,
    ];

    /// Class index used by the classifier heads.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Binarization used by the clinical-efficacy metrics.
    pub fn is_positive(self) -> bool {
        matches!(self, Attribute::Positive | Attribute::Uncertain)
    }
}

/// One attribute per disease, in the fixed disease order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct LabelVector(pub [Attribute; NUM_DISEASES]);

impl LabelVector {
    pub fn blank() -> Self {
        Self::default()
    }

    pub fn indices(&self) -> [usize; NUM_DISEASES] {
        self.0.map(Attribute::index)
    }

    pub fn binary(&self) -> [bool; NUM_DISEASES] {
        self.0.map(Attribute::is_positive)
    }

    /// Row-wise argmax of `14×4` logits; ties resolve to the lowest class.
    pub fn from_logits(logits: &[f64]) -> Self {
        assert_eq!(logits.len(), NUM_DISEASES * NUM_ATTRIBUTES, "logit count");
        let mut out = [Attribute::Blank; NUM_DISEASES];
        for (d, row) in logits.chunks_exact(NUM_ATTRIBUTES).enumerate() {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            out[d] = Attribute::ALL[best];
        }
        Self(out)
    }
}

/// `[BLA]`, `[POS]`, `[NEG]`, `[UNC]` in vocabulary order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptToken {
    Bla,
    Pos,
    Neg,
    Unc,
}

impl PromptToken {
    pub fn text(self) -> &'static str {
        match self {
            PromptToken::Bla => "[BLA]",
            PromptToken::Pos => "[POS]",
            PromptToken::Neg => "[NEG]",
            PromptToken::Unc => "[UNC]",
        }
    }

    pub fn attribute(self) -> Attribute {
        match self {
            PromptToken::Bla => Attribute::Blank,
            PromptToken::Pos => Attribute::Positive,
            PromptToken::Neg => Attribute::Negative,
            PromptToken::Unc => Attribute::Uncertain,
        }
    }

    pub fn from_attribute(a: Attribute) -> Self {
        match a {
            Attribute::Blank => PromptToken::Bla,
            Attribute::Positive => PromptToken::Pos,
            Attribute::Negative => PromptToken::Neg,
            Attribute::Uncertain => PromptToken::Unc,
        }
    }
}

/// Fourteen prompt tokens, position `i` bound to disease `i`.
pub type PromptSequence = [PromptToken; NUM_DISEASES];

pub fn labels_to_prompt(labels: &LabelVector) -> PromptSequence {
    labels.0.map(PromptToken::from_attribute)
}

pub fn prompt_to_labels(prompt: &PromptSequence) -> LabelVector {
    LabelVector(prompt.map(PromptToken::attribute))
}
