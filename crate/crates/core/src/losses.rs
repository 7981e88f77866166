//! Scalar objectives recorded on a tape.
//!
//! Colour arguments are `P x 3` (one sample per row, log space unless noted).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::{Real, Tape, Var};

/// Norm floor in the cosine loss.
pub const COSINE_EPS: f64 = 1e-8;

/// Weights of the reconstruction, cosine and regulariser terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rho: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl LossWeights {
    /// Training defaults: `rho = 1`, `gamma = 1`, `beta = 1e-6`.
    pub const TRAIN: LossWeights = LossWeights {
        rho: 1.0,
        gamma: 1.0,
        beta: 1e-6,
    };

    /// Test-time fitting: training weights without the KLD term.
    pub const TEST: LossWeights = LossWeights {
        rho: 1.0,
        gamma: 1.0,
        beta: 0.0,
    };

    /// Inverse rendering: `rho = 100`, `gamma = 1`, `beta = 1e-3`.
    pub const INVERSE: LossWeights = LossWeights {
        rho: 100.0,
        gamma: 1.0,
        beta: 1e-3,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rho", self.rho),
            ("gamma", self.gamma),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} = {v} must be non-negative"
                )));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::TRAIN
    }
}

/// The weighted total and its unweighted components.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub reconstruction: Var,
    pub cosine: Var,
    pub regulariser: Option<Var>,
}

fn check_pair<T: Real>(tape: &Tape<T>, what: &str, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.0 == 0 || sa.1 == 0 {
        return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(sa.0 * sa.1)
}

/// `a - mean(a)` for every entry.
fn centre<T: Real>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let (r, c) = tape.shape(a);
    let m = tape.mean(a);
    let left = tape.constant(Array2::from_elem((r, 1), T::one()));
    let right = tape.constant(Array2::from_elem((1, c), T::one()));
    let col = tape.matmul(left, m)?;
    let full = tape.matmul(col, right)?;
    tape.sub(a, full)
}

/// Population variance of all residuals `pred - target`:
/// `(1/M) sum R^2 - (1/M^2) (sum R)^2` with `M` the number of entries,
/// evaluated in the centred form for accuracy.
pub fn scale_invariant_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, "scale_invariant_loss", pred, target)?;
    let r = tape.sub(pred, target)?;
    let c = centre(tape, r)?;
    let sq = tape.square(c);
    Ok(tape.mean(sq))
}

/// `1 - mean_p cos(pred_p, target_p)` over per-row 3-vectors, with norms
/// clamped at [`COSINE_EPS`].
pub fn cosine_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, "cosine_loss", pred, target)?;
    let eps = T::lit(COSINE_EPS);
    let prod = tape.mul(pred, target)?;
    let dot = tape.row_sum(prod);
    let np = tape.row_norm(pred, eps);
    let nt = tape.row_norm(target, eps);
    let denom = tape.mul(np, nt)?;
    let cos = tape.div(dot, denom)?;
    let m = tape.mean(cos);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, T::one()))
}

/// Plain mean squared error.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, "mse_loss", pred, target)?;
    let r = tape.sub(pred, target)?;
    let sq = tape.square(r);
    Ok(tape.mean(sq))
}

/// Gaussian KL divergence to `N(0, I)` for `K` codes of dimension `D`
/// (`K x D` inputs): summed over codes, averaged over dimensions.
pub fn kld_loss<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    check_pair(tape, "kld_loss", mu, logvar)?;
    let d = tape.shape(mu).1;
    let var = tape.exp(logvar);
    let mu2 = tape.square(mu);
    let a = tape.add_scalar(logvar, T::one());
    let b = tape.sub(a, mu2)?;
    let c = tape.sub(b, var)?;
    let s = tape.sum(c);
    Ok(tape.scale(s, T::lit(-0.5 / d as f64)))
}

/// Mean squared Frobenius norm of `K` codes (`K x D`, one per row).
pub fn prior_loss<T: Real>(tape: &mut Tape<T>, codes: Var) -> Result<Var> {
    let (k, d) = tape.shape(codes);
    if k == 0 || d == 0 {
        return Err(Error::Shape("prior_loss needs at least one code".into()));
    }
    let sq = tape.square(codes);
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::lit(1.0 / k as f64)))
}

fn weighted<T: Real>(tape: &mut Tape<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut total = tape.scale(terms[0].1, T::lit(terms[0].0));
    for &(w, v) in &terms[1..] {
        let s = tape.scale(v, T::lit(w));
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// `rho * scale_inv + gamma * cosine + beta * KLD`.
pub fn train_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    mu: Var,
    logvar: Var,
    w: &LossWeights,
) -> Result<LossParts> {
    w.validate()?;
    let si = scale_invariant_loss(tape, pred, target)?;
    let cos = cosine_loss(tape, pred, target)?;
    let kld = kld_loss(tape, mu, logvar)?;
    let total = weighted(tape, &[(w.rho, si), (w.gamma, cos), (w.beta, kld)])?;
    Ok(LossParts {
        total,
        reconstruction: si,
        cosine: cos,
        regulariser: Some(kld),
    })
}

/// `rho * scale_inv + gamma * cosine` (the KLD term removed).
pub fn test_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    w: &LossWeights,
) -> Result<LossParts> {
    w.validate()?;
    let si = scale_invariant_loss(tape, pred, target)?;
    let cos = cosine_loss(tape, pred, target)?;
    let total = weighted(tape, &[(w.rho, si), (w.gamma, cos)])?;
    Ok(LossParts {
        total,
        reconstruction: si,
        cosine: cos,
        regulariser: None,
    })
}

/// `rho * MSE + gamma * cosine + beta * prior` on linear rendered pixels.
pub fn inverse_loss<T: Real>(
    tape: &mut Tape<T>,
    rendered: Var,
    target: Var,
    codes: Var,
    w: &LossWeights,
) -> Result<LossParts> {
    w.validate()?;
    let mse = mse_loss(tape, rendered, target)?;
    let cos = cosine_loss(tape, rendered, target)?;
    let prior = prior_loss(tape, codes)?;
    let total = weighted(tape, &[(w.rho, mse), (w.gamma, cos), (w.beta, prior)])?;
    Ok(LossParts {
        total,
        reconstruction: mse,
        cosine: cos,
        regulariser: Some(prior),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_array};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn eval2(
        f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
        a: &Array2<f64>,
        b: &Array2<f64>,
    ) -> f64 {
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let out = f(&mut t, va, vb).unwrap();
        t.scalar(out)
    }

    #[test]
    fn scale_invariant_examples() {
        let mut rng = seeded(1);
        let target = random_array(&mut rng, 10, 3, 2.0);
        assert_eq!(eval2(scale_invariant_loss, &target, &target), 0.0);
        let shifted = &target + 3.7;
        assert!(eval2(scale_invariant_loss, &shifted, &target) < 1e-24);
        let pred = Array2::from_shape_vec((1, 2), vec![0.0, 2.0]).unwrap();
        let zero = Array2::zeros((1, 2));
        assert!((eval2(scale_invariant_loss, &pred, &zero) - 1.0).abs() < 1e-15);
        let mut t = Tape::<f64>::new();
        let e = t.constant(Array2::zeros((0, 3)));
        assert!(scale_invariant_loss(&mut t, e, e).is_err());
    }

    #[test]
    fn scale_invariant_matches_variance_oracle() {
        let mut rng = seeded(2);
        let pred = random_array(&mut rng, 50, 3, 1.0);
        let target = random_array(&mut rng, 50, 3, 1.0);
        let r: Vec<f64> = (&pred - &target).iter().copied().collect();
        let m = r.len() as f64;
        let oracle = r.iter().map(|x| x * x).sum::<f64>() / m - (r.iter().sum::<f64>() / m).powi(2);
        assert!((eval2(scale_invariant_loss, &pred, &target) - oracle).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let mut rng = seeded(3);
        let target = random_array(&mut rng, 20, 3, 1.0);
        assert!(eval2(cosine_loss, &target, &target).abs() < 1e-12);
        assert!((eval2(cosine_loss, &(-&target), &target) - 2.0).abs() < 1e-12);
        assert!(eval2(cosine_loss, &(&target * 4.5), &target).abs() < 1e-12);
        let zero = Array2::zeros((20, 3));
        assert!((eval2(cosine_loss, &zero, &target) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kld_examples() {
        let z = Array2::zeros((2, 4));
        assert_eq!(eval2(kld_loss, &z, &z), 0.0);
        let one = Array2::from_elem((1, 1), 1.0);
        let zero = Array2::zeros((1, 1));
        assert!((eval2(kld_loss, &one, &zero) - 0.5).abs() < 1e-15);
        let mut rng = seeded(4);
        for _ in 0..100 {
            let mu = random_array(&mut rng, 3, 5, 1.0);
            let lv = random_array(&mut rng, 3, 5, 1.0);
            assert!(eval2(kld_loss, &mu, &lv) > 0.0);
        }
    }

    #[test]
    fn prior_examples() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Array2::zeros((2, 6)));
        let l = prior_loss(&mut t, z).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let mut single = Array2::zeros((1, 6));
        single[(0, 2)] = 2.0;
        let z = t.constant(single.clone());
        let l = prior_loss(&mut t, z).unwrap();
        assert_eq!(t.scalar(l), 4.0);
        let z = t.constant(single * 3.0);
        let l = prior_loss(&mut t, z).unwrap();
        assert_eq!(t.scalar(l), 36.0);
    }

    #[test]
    fn composites() {
        let mut rng = seeded(5);
        let pred = random_array(&mut rng, 8, 3, 1.0);
        let target = random_array(&mut rng, 8, 3, 1.0);
        let mu = random_array(&mut rng, 2, 6, 1.0);
        let lv = random_array(&mut rng, 2, 6, 1.0);
        let mut t = Tape::<f64>::new();
        let (p, g, m, l) = (
            t.constant(pred),
            t.constant(target),
            t.constant(mu),
            t.constant(lv),
        );
        let zero = LossWeights {
            rho: 0.0,
            gamma: 0.0,
            beta: 0.0,
        };
        let parts = train_loss(&mut t, p, g, m, l, &zero).unwrap();
        assert_eq!(t.scalar(parts.total), 0.0);
        let no_kld = LossWeights {
            beta: 0.0,
            ..LossWeights::TRAIN
        };
        let a = train_loss(&mut t, p, g, m, l, &no_kld).unwrap().total;
        let b = test_loss(&mut t, p, g, &LossWeights::TEST).unwrap().total;
        assert_eq!(t.scalar(a), t.scalar(b));
        assert_eq!(
            LossWeights::default(),
            LossWeights {
                rho: 1.0,
                gamma: 1.0,
                beta: 1e-6
            }
        );
        let bad = LossWeights {
            rho: -1.0,
            ..LossWeights::TRAIN
        };
        assert!(test_loss(&mut t, p, g, &bad).is_err());
        let parts = inverse_loss(&mut t, p, g, m, &LossWeights::INVERSE).unwrap();
        let expected = 100.0 * t.scalar(parts.reconstruction)
            + t.scalar(parts.cosine)
            + 1e-3 * t.scalar(parts.regulariser.unwrap());
        assert!((t.scalar(parts.total) - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients() {
        let mut rng = seeded(6);
        let a = random_array(&mut rng, 6, 3, 1.0);
        let b = random_array(&mut rng, 6, 3, 1.0);
        let c = random_array(&mut rng, 2, 6, 1.0);
        let d = random_array(&mut rng, 2, 6, 0.5);
        let report = check_gradients(
            &[a, b, c, d],
            |t, v| {
                let parts = train_loss(
                    t,
                    v[0],
                    v[1],
                    v[2],
                    v[3],
                    &LossWeights {
                        rho: 1.3,
                        gamma: 0.7,
                        beta: 0.4,
                    },
                )?;
                let inv = inverse_loss(t, v[0], v[1], v[2], &LossWeights::INVERSE)?;
                let mse = mse_loss(t, v[0], v[1])?;
                let s = t.add(parts.total, inv.total)?;
                t.add(s, mse)
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    proptest! {
        #[test]
        fn shift_invariance(seed in 0u64..10_000, c in -50f64..50.0) {
            let mut rng = seeded(seed);
            let pred = random_array(&mut rng, 16, 3, 2.0);
            let target = random_array(&mut rng, 16, 3, 2.0);
            let base = eval2(scale_invariant_loss, &pred, &target);
            prop_assert!((eval2(scale_invariant_loss, &(&pred + c), &target) - base).abs() < 1e-10);
            prop_assert!((eval2(scale_invariant_loss, &pred, &(&target + c)) - base).abs() < 1e-10);
        }

        #[test]
        fn cosine_positive_scaling(seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let pred = random_array(&mut rng, 8, 3, 1.0);
            let target = random_array(&mut rng, 8, 3, 1.0);
            let scales = Array2::from_shape_fn((8, 1), |_| rng.random_range(0.1..10.0));
            let scaled = &pred * &scales;
            let a = eval2(cosine_loss, &pred, &target);
            prop_assert!((eval2(cosine_loss, &scaled, &target) - a).abs() < 1e-12);
            prop_assert!((eval2(cosine_loss, &pred, &(&target * &scales)) - a).abs() < 1e-12);
        }

        #[test]
        fn kld_minimised_at_standard_normal(mu in -2f64..2.0, lv in -3f64..3.0) {
            let at = |m: f64, l: f64| eval2(kld_loss, &Array2::from_elem((1, 1), m), &Array2::from_elem((1, 1), l));
            prop_assert!(at(mu, lv) >= at(0.0, 0.0));
            prop_assert!(at(mu, lv) >= 0.0);
        }
    }
}
