//! Feature alignment of prior image features with prior-report text.

use ddatr_tensor::{ParamStore, Scalar, Var};
use rand::Rng;

use crate::error::{ModelError, Result};
use crate::nn::{Gate, Init, Norm, Pointwise};

#[derive(Clone, Copy, Debug)]
pub struct Dfam {
    pub channels: usize,
    pub text_width: usize,
    pub pq: Pointwise,
    pub nq: Norm,
    pub pk: Pointwise,
    pub pv: Pointwise,
    pub pt: Pointwise,
    pub nt: Norm,
    pub pa: Pointwise,
    pub pf: Pointwise,
    pub gate: Gate,
}

/// Intermediate values of the attention step.
pub struct Attention<'g, T: Scalar> {
    /// `HW × L`, one distribution over tokens per pixel.
    pub weights: Var<'g, T>,
    /// `C × H × W` after the output projection.
    pub attended: Var<'g, T>,
}

impl Dfam {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        text_width: usize,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        Self {
            channels,
            text_width,
            pq: Pointwise::new(store, &format!("{name}.pq"), c, c, Init::Lecun, rng),
            nq: Norm::new(store, &format!("{name}.nq"), c),
            pk: Pointwise::new(store, &format!("{name}.pk"), text_width, c, Init::Lecun, rng),
            pv: Pointwise::new(store, &format!("{name}.pv"), text_width, c, Init::Lecun, rng),
            pt: Pointwise::new(store, &format!("{name}.pt"), c, c, Init::Lecun, rng),
            nt: Norm::new(store, &format!("{name}.nt"), c),
            pa: Pointwise::new(store, &format!("{name}.pa"), c, c, Init::He, rng),
            pf: Pointwise::new(store, &format!("{name}.pf"), c, c, Init::He, rng),
            gate: Gate::new(store, &format!("{name}.gate"), c, rng),
        }
    }

    /// Every pixel of `x` (`C×H×W`) attends over the tokens of `text` (`C_txt×L`).
    pub fn align_attention<'g, T: Scalar>(&self, x: Var<'g, T>, text: Var<'g, T>) -> Result<Attention<'g, T>> {
        let shape = x.shape();
        let ts = text.shape();
        if ts.len() != 2 || ts[1] == 0 {
            return Err(ModelError::MissingPriorText);
        }
        let (c, hw) = (shape[0], shape[1..].iter().product::<usize>());
        let q = self.nq.instance(self.pq.forward(x)?)?.reshape(&[c, hw])?;
        let k = self.pk.forward(text)?;
        let v = self.pv.forward(text)?;
        let weights = q
            .transpose()?
            .matmul(&k)?
            .scale(1.0 / (c as f64).sqrt())?
            .softmax(1)?;
        let a = weights.matmul(&v.transpose()?)?;
        let attended = self
            .nt
            .instance(self.pt.forward(a.transpose()?.reshape(&shape)?)?)?;
        Ok(Attention { weights, attended })
    }

    /// `F_fa = P^f(P^a(x) ⊙ F_att)`, then the gate `B2(B1(F_fa)) ⊙ F_fa`
    /// (or `F_fa` itself when `dynamic` is off).
    pub fn fuse_and_gate<'g, T: Scalar>(
        &self,
        x: Var<'g, T>,
        attended: Var<'g, T>,
        dynamic: bool,
    ) -> Result<Var<'g, T>> {
        let a = self.pa.forward(x)?.relu()?;
        let fa = self.pf.forward(a.mul(&attended)?)?.relu()?;
        if dynamic {
            Ok(self.gate.forward(fa)?.mul(&fa)?)
        } else {
            Ok(fa)
        }
    }

    /// `F_align`; the caller adds it to the prior feature.
    pub fn forward<'g, T: Scalar>(&self, x: Var<'g, T>, text: Var<'g, T>, dynamic: bool) -> Result<Var<'g, T>> {
        let att = self.align_attention(x, text)?;
        self.fuse_and_gate(x, att.attended, dynamic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NORM_EPS;
    use ddatr_tensor::{finite_difference_check_with, param_gradient_check, Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, ct: usize, seed: u64) -> (ParamStore<f64>, Dfam) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Dfam::new(&mut store, "dfam", c, ct, &mut rng);
        // perturb every parameter so the oracles see non-trivial values
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            let t = Tensor::<f64>::randn(&shape, 0.5, &mut rng);
            let base = store.value(id).clone();
            let v = Tensor::from_fn(&shape, |i| base.data()[i] + t.data()[i]);
            store.set(id, v).unwrap();
        }
        (store, d)
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    // ---- independent scalar oracles ----

    fn pw(store: &ParamStore<f64>, p: Pointwise, x: &[f64], c_in: usize, n: usize) -> Vec<f64> {
        let w = store.value(p.w).data();
        let b = store.value(p.b).data();
        let c_out = b.len();
        let mut y = vec![0.0; c_out * n];
        for o in 0..c_out {
            for j in 0..n {
                let mut acc = b[o];
                for i in 0..c_in {
                    acc += w[o * c_in + i] * x[i * n + j];
                }
                y[o * n + j] = acc;
            }
        }
        y
    }

    fn inorm(store: &ParamStore<f64>, nm: Norm, x: &mut [f64], c: usize, n: usize) {
        let g = store.value(nm.gamma).data();
        let b = store.value(nm.beta).data();
        for ch in 0..c {
            let row = &mut x[ch * n..(ch + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            for v in row.iter_mut() {
                *v = (*v - mean) / (var + NORM_EPS).sqrt() * g[ch] + b[ch];
            }
        }
    }

    /// Returns (weights HW×L, attended C×HW).
    fn attention_oracle(store: &ParamStore<f64>, d: &Dfam, x: &[f64], txt: &[f64], c: usize, hw: usize, l: usize) -> (Vec<f64>, Vec<f64>) {
        let mut q = pw(store, d.pq, x, c, hw);
        inorm(store, d.nq, &mut q, c, hw);
        let k = pw(store, d.pk, txt, d.text_width, l);
        let v = pw(store, d.pv, txt, d.text_width, l);
        let mut weights = vec![0.0; hw * l];
        let mut a = vec![0.0; c * hw];
        for p in 0..hw {
            let scores: Vec<f64> = (0..l)
                .map(|t| (0..c).map(|ch| q[ch * hw + p] * k[ch * l + t]).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..l {
                weights[p * l + t] = e[t] / z;
                for ch in 0..c {
                    a[ch * hw + p] += e[t] / z * v[ch * l + t];
                }
            }
        }
        let mut att = pw(store, d.pt, &a, c, hw);
        inorm(store, d.nt, &mut att, c, hw);
        (weights, att)
    }

    fn fuse_oracle(store: &ParamStore<f64>, d: &Dfam, x: &[f64], att: &[f64], c: usize, hw: usize) -> Vec<f64> {
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let a = relu(pw(store, d.pa, x, c, hw));
        let prod: Vec<f64> = a.iter().zip(att).map(|(p, q)| p * q).collect();
        let fa = relu(pw(store, d.pf, &prod, c, hw));
        let h = relu(pw(store, d.gate.b1, &fa, c, hw));
        let gate: Vec<f64> = pw(store, d.gate.b2, &h, c, hw).into_iter().map(f64::tanh).collect();
        gate.iter().zip(&fa).map(|(g, f)| g * f).collect()
    }

    #[test]
    fn attention_matches_scalar_loop_oracle() {
        let (c, h, w, l, ct) = (8, 4, 4, 5, 6);
        let (store, d) = setup(c, ct, 0);
        let x = rand(&[c, h, w], 1);
        let txt = rand(&[ct, l], 2);
        let g = Graph::with_params(&store);
        let att = d.align_attention(g.constant(x.clone()), g.constant(txt.clone())).unwrap();
        let (ow, oa) = attention_oracle(&store, &d, x.data(), txt.data(), c, h * w, l);
        let wt = att.weights.to_tensor();
        assert_eq!(wt.shape(), &[h * w, l]);
        for (a, b) in wt.data().iter().zip(&ow) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in att.attended.to_tensor().data().iter().zip(&oa) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn fuse_and_gate_matches_formula_replay() {
        let (c, hw) = (4, 9);
        let (store, d) = setup(c, 3, 3);
        let x = rand(&[c, 3, 3], 4);
        let att = rand(&[c, 3, 3], 5);
        let g = Graph::with_params(&store);
        let y = d.fuse_and_gate(g.constant(x.clone()), g.constant(att.clone()), true).unwrap();
        let o = fuse_oracle(&store, &d, x.data(), att.data(), c, hw);
        for (a, b) in y.to_tensor().data().iter().zip(&o) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_every_pixel_gets_value_column() {
        let (store, d) = setup(4, 3, 6);
        let g = Graph::with_params(&store);
        let x = g.constant(rand(&[4, 2, 3], 7));
        let txt = g.constant(rand(&[3, 1], 8));
        let att = d.align_attention(x, txt).unwrap();
        assert!(att.weights.to_tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_tokens_give_uniform_weights() {
        let (store, d) = setup(4, 3, 9);
        let g = Graph::with_params(&store);
        let col = rand(&[3, 1], 10);
        let txt = Tensor::from_fn(&[3, 4], |i| col.data()[i / 4]);
        let att = d.align_attention(g.constant(rand(&[4, 3, 3], 11)), g.constant(txt)).unwrap();
        for v in att.weights.to_tensor().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gate_gives_zero_alignment() {
        let mut store = ParamStore::<f32>::new();
        let d = Dfam::new(&mut store, "d", 4, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::randn(&[4, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let t = g.constant(Tensor::randn(&[3, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let y = d.forward(x, t, true).unwrap().to_tensor();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_attention_leaves_bias_path() {
        let (store, d) = setup(3, 2, 12);
        let g = Graph::with_params(&store);
        let y = d
            .fuse_and_gate(g.constant(rand(&[3, 2, 2], 13)), g.constant(Tensor::zeros(&[3, 2, 2])), false)
            .unwrap()
            .to_tensor();
        let b = store.value(d.pf.b).data();
        for ch in 0..3 {
            for p in 0..4 {
                assert_eq!(y.data()[ch * 4 + p], b[ch].max(0.0));
            }
        }
    }

    #[test]
    fn token_order_is_irrelevant_without_positions() {
        let (store, d) = setup(4, 3, 14);
        let txt = rand(&[3, 3], 15);
        let perm = Tensor::from_fn(&[3, 3], |i| txt.data()[(i / 3) * 3 + [2, 0, 1][i % 3]]);
        let x = rand(&[4, 2, 2], 16);
        let g = Graph::with_params(&store);
        let a = d.forward(g.constant(x.clone()), g.constant(txt), true).unwrap().to_tensor();
        let b = d.forward(g.constant(x), g.constant(perm), true).unwrap().to_tensor();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn full_block_gradient_check() {
        let (store, d) = setup(4, 5, 17);
        let txt = rand(&[5, 3], 18);
        let probe = rand(&[4, 6, 6], 19);
        let x0 = rand(&[4, 6, 6], 20);
        let err = finite_difference_check_with(
            Some(&store),
            |g, x| {
                let y = d.forward(x, g.constant(txt.clone()), true)?;
                y.mul(&g.constant(probe.clone()))?.sum()
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input: {err}");
        let report = param_gradient_check(
            &store,
            |g| {
                let y = d
                    .forward(g.constant(x0.clone()), g.constant(txt.clone()), true)
                    ?;
                y.mul(&g.constant(probe.clone()))?.sum()
            },
            1e-5,
            16,
        )
        .unwrap();
        assert!(report.max_error() < 1e-4, "{:?}", report.per_param);
    }
}
