//! Frozen text encoder: seeded embeddings plus sinusoidal positions.

use ddatr_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};

/// Sinusoidal code of position `pos` at width `dim`.
pub fn sinusoid(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 / rate;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Never trained; lives outside every parameter store.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    width: usize,
    vocab_size: usize,
    table: Vec<f64>,
    positions: bool,
}

impl TextEncoder {
    pub fn new(vocab_size: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_c0de);
        let table = Tensor::<f64>::randn(&[vocab_size, width], 1.0, &mut rng).into_data();
        Self {
            width,
            vocab_size,
            table,
            positions: true,
        }
    }

    /// Disables positional codes, making the encoding order-free per column.
    pub fn without_positions(mut self) -> Self {
        self.positions = false;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `C_txt × L` matrix; column `j` encodes token `j`.
    pub fn encode<T: Scalar>(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(ModelError::MissingPriorText);
        }
        let l = ids.len();
        let mut data = vec![T::zero(); self.width * l];
        for (j, &id) in ids.iter().enumerate() {
            if id >= self.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    size: self.vocab_size,
                });
            }
            let row = &self.table[id * self.width..(id + 1) * self.width];
            let pos = if self.positions { sinusoid(j, self.width) } else { vec![0.0; self.width] };
            for c in 0..self.width {
                data[c * l + j] = T::cast(row[c] + pos[c]);
            }
        }
        Ok(Tensor::new(vec![self.width, l], data)?)
    }
}
