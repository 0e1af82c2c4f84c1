//! Difference-aware enhancement of current features against the prior.

use ddatr_tensor::{ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{ModelError, Result};
use crate::nn::{Gate, Init, Pointwise};

pub const THETA_INIT: f64 = 0.1;

/// 3×3 convolution with a learnable central-difference descriptor:
/// `y = conv(x, W) + θ ⊙ conv(x_cd, W) + b`, where each tap of `x_cd` is the
/// neighbour minus the patch centre. Taps falling in the zero padding carry
/// no difference.
#[derive(Clone, Copy, Debug)]
pub struct LdConv {
    pub channels: usize,
    pub w: ParamId,
    pub theta: ParamId,
    pub b: ParamId,
}

impl LdConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Self {
        let std = (2.0 / (9 * c) as f64).sqrt();
        Self {
            channels: c,
            w: store.add(format!("{name}.w"), Tensor::randn(&[c, c, 3, 3], std, rng)),
            theta: store.add(format!("{name}.theta"), Tensor::full(&[c], T::cast(THETA_INIT))),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(ModelError::Tensor(ddatr_tensor::TensorError::ShapeMismatch {
                op: "ldconv",
                lhs: shape,
                rhs: vec![self.channels, self.channels, 3, 3],
            }));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let weight = g.param(self.w);
        let vanilla = x.conv2d(&weight, None, 1, 1)?;
        // Σ over in-bounds taps of W[o, i, ·] at each position, times the centre value
        let ones = g.constant(Tensor::ones(&[1, h, w]));
        let tap_sums = ones
            .conv2d(&weight.reshape(&[c * c, 1, 3, 3])?, None, 1, 1)?
            .reshape(&[c, c, h, w])?;
        let centre = tap_sums
            .mul(&x.reshape(&[1, c, h, w])?)?
            .sum_axes(&[1])?
            .reshape(&[c, h, w])?;
        let diff = vanilla.sub(&centre)?;
        let theta = g.param(self.theta).reshape(&[c, 1, 1])?;
        let bias = g.param(self.b).reshape(&[c, 1, 1])?;
        Ok(vanilla.add(&theta.mul(&diff)?)?.add(&bias)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Ddam {
    pub channels: usize,
    pub ldc_c: LdConv,
    pub ldc_p: LdConv,
    pub pd: Pointwise,
    pub gate: Gate,
}

/// Intermediate values of one difference-aware pass.
pub struct DdamTrace<'g, T: Scalar> {
    pub enc: Var<'g, T>,
    pub enp: Var<'g, T>,
    /// `1 × H × W` saliency.
    pub pd: Var<'g, T>,
    pub da: Var<'g, T>,
    pub out: Var<'g, T>,
}

/// `sigmoid(channel_mean(F_enc − F_enp))`.
pub fn pixel_difference<'g, T: Scalar>(enc: Var<'g, T>, enp: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(enc.sub(&enp)?.channel_mean()?.sigmoid()?)
}

impl Ddam {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            channels: c,
            ldc_c: LdConv::new(store, &format!("{name}.ldc_c"), c, rng),
            ldc_p: LdConv::new(store, &format!("{name}.ldc_p"), c, rng),
            pd: Pointwise::new(store, &format!("{name}.pd"), 2 * c, c, Init::He, rng),
            gate: Gate::new(store, &format!("{name}.gate"), c, rng),
        }
    }

    /// `P^d(cat(F_enc ⊙ F_pd, F_enp ⊙ F_pd))` followed by relu.
    pub fn difference_amplify<'g, T: Scalar>(
        &self,
        enc: Var<'g, T>,
        enp: Var<'g, T>,
        pd: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let cat = Var::concat(&[enc.mul(&pd)?, enp.mul(&pd)?], 0)?;
        Ok(self.pd.forward(cat)?.relu()?)
    }

    pub fn trace<'g, T: Scalar>(&self, cur: Var<'g, T>, prior: Var<'g, T>, dynamic: bool) -> Result<DdamTrace<'g, T>> {
        if cur.shape() != prior.shape() {
            return Err(ModelError::Tensor(ddatr_tensor::TensorError::ShapeMismatch {
                op: "ddam",
                lhs: cur.shape(),
                rhs: prior.shape(),
            }));
        }
        let enc = self.ldc_c.forward(cur)?;
        let enp = self.ldc_p.forward(prior)?;
        let pd = pixel_difference(enc, enp)?;
        let da = self.difference_amplify(enc, enp, pd)?;
        let injected = if dynamic { self.gate.forward(da)?.mul(&da)? } else { da };
        let out = cur.add(&injected)?;
        Ok(DdamTrace { enc, enp, pd, da, out })
    }

    /// `F̂_cur`. Without a prior the input is returned untouched and nothing
    /// is recorded.
    pub fn forward<'g, T: Scalar>(
        &self,
        cur: Var<'g, T>,
        prior: Option<Var<'g, T>>,
        has_prior: bool,
        dynamic: bool,
    ) -> Result<Var<'g, T>> {
        if !has_prior {
            return Ok(cur);
        }
        let prior = prior.ok_or_else(|| ModelError::Contract("prior flagged present but no prior feature given".into()))?;
        Ok(self.trace(cur, prior, dynamic)?.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ddatr_tensor::{finite_difference_check_with, param_gradient_check, Graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn randomized(c: usize, seed: u64) -> (ParamStore<f64>, Ddam) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Ddam::new(&mut store, "ddam", c, &mut rng);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.4, &mut rng)).unwrap();
        }
        (store, d)
    }

    /// Patchwise evaluation of both branches with explicit neighbour − centre.
    fn ldconv_oracle(store: &ParamStore<f64>, k: &LdConv, x: &Tensor<f64>) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let wt = store.value(k.w);
        let theta = store.value(k.theta).data();
        let b = store.value(k.b).data();
        let mut y = vec![0.0; c * h * w];
        for o in 0..c {
            for py in 0..h {
                for px in 0..w {
                    let (mut van, mut cd) = (0.0, 0.0);
                    for i in 0..c {
                        let centre = x.at(&[i, py, px]);
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (py as isize + ky as isize - 1, px as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let nb = x.at(&[i, iy as usize, ix as usize]);
                                let wv = wt.at(&[o, i, ky, kx]);
                                van += wv * nb;
                                cd += wv * (nb - centre);
                            }
                        }
                    }
                    y[(o * h + py) * w + px] = van + theta[o] * cd + b[o];
                }
            }
        }
        y
    }

    #[test]
    fn ldconv_matches_patch_loop_oracle() {
        let (store, d) = randomized(4, 0);
        let x = rand(&[4, 5, 5], 1);
        let g = Graph::with_params(&store);
        let y = d.ldc_c.forward(g.constant(x.clone())).unwrap().to_tensor();
        for (a, b) in y.data().iter().zip(ldconv_oracle(&store, &d.ldc_c, &x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ldconv_with_zero_theta_is_vanilla() {
        let (mut store, d) = randomized(3, 2);
        store.set(d.ldc_c.theta, Tensor::zeros(&[3])).unwrap();
        let x = rand(&[3, 4, 4], 3);
        let g = Graph::with_params(&store);
        let y = d.ldc_c.forward(g.constant(x.clone())).unwrap().to_tensor();
        let v = g
            .constant(x)
            .conv2d(&g.param(d.ldc_c.w), Some(&g.param(d.ldc_c.b)), 1, 1)
            .unwrap()
            .to_tensor();
        assert!(y.max_abs_diff(&v) < 1e-14);
    }

    #[test]
    fn ldconv_on_constant_input_is_vanilla() {
        let (store, d) = randomized(3, 4);
        let x = Tensor::full(&[3, 4, 4], 0.7);
        let g = Graph::with_params(&store);
        let y = d.ldc_c.forward(g.constant(x.clone())).unwrap().to_tensor();
        let v = g
            .constant(x)
            .conv2d(&g.param(d.ldc_c.w), Some(&g.param(d.ldc_c.b)), 1, 1)
            .unwrap()
            .to_tensor();
        assert!(y.max_abs_diff(&v) < 1e-14);
    }

    #[test]
    fn pixel_difference_cases() {
        let g = Graph::<f64>::new();
        let a = g.constant(rand(&[3, 2, 2], 5));
        let same = pixel_difference(a, a).unwrap().to_tensor();
        assert_eq!(same.shape(), &[1, 2, 2]);
        assert!(same.data().iter().all(|&v| v == 0.5));
        let big = g.constant(a.to_tensor().map(|v| v + 20.0));
        let sat = pixel_difference(big, a).unwrap().to_tensor();
        assert!(sat.data().iter().all(|&v| 1.0 - v < 1e-6 && v < 1.0 + 1e-15));
        let b = rand(&[3, 2, 2], 6);
        let r = pixel_difference(a, g.constant(b.clone())).unwrap().to_tensor();
        let at = a.to_tensor();
        for p in 0..4 {
            let m = (0..3).map(|c| at.data()[c * 4 + p] - b.data()[c * 4 + p]).sum::<f64>() / 3.0;
            assert!((r.data()[p] - 1.0 / (1.0 + (-m).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn saliency_is_monotone_in_the_difference() {
        let g = Graph::<f64>::new();
        let base = rand(&[2, 1, 1], 7);
        let mut last = 0.0;
        for step in 0..10 {
            let shifted = base.map(|v| v + step as f64 * 0.5);
            let pd = pixel_difference(g.constant(shifted), g.constant(base.clone())).unwrap().item().unwrap();
            assert!(pd > last);
            last = pd;
        }
    }

    #[test]
    fn closed_saliency_leaves_relu_bias() {
        let (store, d) = randomized(3, 8);
        let g = Graph::with_params(&store);
        let y = d
            .difference_amplify(g.constant(rand(&[3, 2, 2], 9)), g.constant(rand(&[3, 2, 2], 10)), g.constant(Tensor::zeros(&[1, 2, 2])))
            .unwrap()
            .to_tensor();
        let b = store.value(d.pd.b).data();
        for c in 0..3 {
            assert!(y.data()[c * 4..(c + 1) * 4].iter().all(|&v| v == b[c].max(0.0)));
        }
    }

    #[test]
    fn symmetric_projection_of_equal_halves() {
        // W = [I | I], zero bias: output = relu(2 · F_enc ⊙ 0.5) = relu(F_enc)
        let (mut store, d) = randomized(3, 11);
        let w = Tensor::from_fn(&[3, 6], |i| if i / 6 == (i % 6) % 3 { 1.0 } else { 0.0 });
        store.set(d.pd.w, w).unwrap();
        store.set(d.pd.b, Tensor::zeros(&[3])).unwrap();
        let g = Graph::with_params(&store);
        let e = g.constant(rand(&[3, 2, 2], 12));
        let pd = pixel_difference(e, e).unwrap();
        let y = d.difference_amplify(e, e, pd).unwrap().to_tensor();
        let expected = e.to_tensor().map(|v| v.max(0.0));
        assert!(y.max_abs_diff(&expected) < 1e-15);
    }

    /// Full-formula replay with independent arithmetic.
    #[test]
    fn forward_matches_formula_replay() {
        let (store, d) = randomized(3, 13);
        let cur = rand(&[3, 4, 4], 14);
        let prior = rand(&[3, 4, 4], 15);
        let g = Graph::with_params(&store);
        let y = d.forward(g.constant(cur.clone()), Some(g.constant(prior.clone())), true, true).unwrap().to_tensor();

        let enc = ldconv_oracle(&store, &d.ldc_c, &cur);
        let enp = ldconv_oracle(&store, &d.ldc_p, &prior);
        let (c, n) = (3, 16);
        let pd: Vec<f64> = (0..n)
            .map(|p| {
                let m = (0..c).map(|ch| enc[ch * n + p] - enp[ch * n + p]).sum::<f64>() / c as f64;
                1.0 / (1.0 + (-m).exp())
            })
            .collect();
        let mut cat = vec![0.0; 2 * c * n];
        for ch in 0..c {
            for p in 0..n {
                cat[ch * n + p] = enc[ch * n + p] * pd[p];
                cat[(c + ch) * n + p] = enp[ch * n + p] * pd[p];
            }
        }
        let lin = |id_w: ParamId, id_b: ParamId, x: &[f64], c_in: usize| -> Vec<f64> {
            let w = store.value(id_w).data();
            let b = store.value(id_b).data();
            (0..c * n)
                .map(|k| {
                    let (o, p) = (k / n, k % n);
                    b[o] + (0..c_in).map(|i| w[o * c_in + i] * x[i * n + p]).sum::<f64>()
                })
                .collect()
        };
        let da: Vec<f64> = lin(d.pd.w, d.pd.b, &cat, 2 * c).into_iter().map(|v| v.max(0.0)).collect();
        let h: Vec<f64> = lin(d.gate.b1.w, d.gate.b1.b, &da, c).into_iter().map(|v| v.max(0.0)).collect();
        let gate: Vec<f64> = lin(d.gate.b2.w, d.gate.b2.b, &h, c).into_iter().map(f64::tanh).collect();
        for k in 0..c * n {
            let expected = cur.data()[k] + gate[k] * da[k];
            assert!((y.data()[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_prior_is_identity() {
        let (store, d) = randomized(2, 16);
        let g = Graph::with_params(&store);
        let cur = g.leaf(rand(&[2, 3, 3], 17));
        let before = g.len();
        let y = d.forward(cur, None, false, true).unwrap();
        assert_eq!(g.len(), before);
        assert_eq!(y.to_tensor(), cur.to_tensor());
        assert!(matches!(d.forward(cur, None, true, true), Err(ModelError::Contract(_))));
    }

    #[test]
    fn zero_gate_is_identity_with_prior() {
        let mut store = ParamStore::<f32>::new();
        let d = Ddam::new(&mut store, "d", 3, &mut ChaCha8Rng::seed_from_u64(0));
        let g = Graph::with_params(&store);
        let cur = g.constant(Tensor::randn(&[3, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let prior = g.constant(Tensor::randn(&[3, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let y = d.forward(cur, Some(prior), true, true).unwrap();
        assert_eq!(y.to_tensor(), cur.to_tensor());
    }

    #[test]
    fn full_block_gradient_check() {
        let (store, d) = randomized(3, 18);
        let probe = rand(&[3, 4, 4], 19);
        let cur = rand(&[3, 4, 4], 20);
        let prior = rand(&[3, 4, 4], 21);
        for wrt_cur in [true, false] {
            let err = finite_difference_check_with(
                Some(&store),
                |g, x| {
                    let (c, p) = if wrt_cur { (x, g.constant(prior.clone())) } else { (g.constant(cur.clone()), x) };
                    d.forward(c, Some(p), true, true)?.mul(&g.constant(probe.clone()))?.sum()
                },
                if wrt_cur { &cur } else { &prior },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
        let report = param_gradient_check(
            &store,
            |g| {
                d.forward(g.constant(cur.clone()), Some(g.constant(prior.clone())), true, true)?
                    .mul(&g.constant(probe.clone()))?
                    .sum()
            },
            1e-5,
            20,
        )
        .unwrap();
        assert!(report.max_error() < 1e-4, "{:?}", report.per_param);
    }
}
