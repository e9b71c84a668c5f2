//! Minimal reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Every op returns a new immutable [`Tensor`] that remembers its inputs when any
//! of them is trainable. [`Tensor::backward`] walks that record once, in reverse
//! topological order, and accumulates exact gradients into the trainable leaves.

mod optim;
mod tensor;

pub use optim::{adam_step, AdamConfig, AdamState};
pub use tensor::{no_grad, Reduction, Tensor};

use crate::error::Result;
use crate::scalar::Scalar;

/// A module owning named trainable tensors, visited in a fixed order.
pub trait ParamVisitor<S: Scalar> {
    fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>));
    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>));

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.visit_prefixed("", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.visit_prefixed_mut("", f);
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn zero_grad(&self) {
        self.visit(&mut |_, t| t.zero_grad());
    }
}

/// Joins a module prefix and a field name with a dot.
pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Negative log-likelihood of `targets` given `logits` (`T × V`), over positions where `mask` is set.
pub fn cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    mask: &[bool],
    reduction: Reduction,
) -> Result<Tensor<S>> {
    logits.cross_entropy(targets, mask, reduction)
}

/// Squared Euclidean distance.
pub fn l2_sq<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    a.l2_sq(b)
}

/// Below this magnitude central differences are dominated by round-off, so the
/// denominator is floored there.
const GRAD_FLOOR: f64 = 1e-6;

/// A difference quotient of `f` carries a few `ε·|f| / eps` of round-off; the floor is
/// raised to this many times that, so gradients the quotient cannot resolve are not
/// scored as mismatches.
const ROUNDOFF_MARGIN: f64 = 1e5;

fn grad_floor(value: f64, eps: f64) -> f64 {
    GRAD_FLOOR.max(ROUNDOFF_MARGIN * f64::EPSILON * value.abs() / eps)
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Central-difference gradient check of a scalar function of one tensor.
///
/// Returns the maximum over coordinates of `|analytic − numeric| / max(floor, |analytic| + |numeric|)`,
/// where the floor is `1e-6` or, for large `f`, a multiple of the quotient's round-off.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = Tensor::param(x.shape().to_vec(), x.to_vec())?;
    let out = f(&leaf)?;
    out.backward()?;
    let floor = grad_floor(out.item(), eps);
    let analytic = leaf.grad_or_zero();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut v = x.to_vec();
            v[i] += delta;
            let t = Tensor::constant(x.shape().to_vec(), v)?;
            Ok(no_grad(|| f(&t))?.item())
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric, floor));
    }
    Ok(worst)
}

/// Gradient check over every `stride`-th coordinate of every parameter of `module`.
pub fn grad_check_params<M, F>(module: &M, f: F, eps: f64, stride: usize) -> Result<f64>
where
    M: ParamVisitor<f64> + Clone,
    F: Fn(&M) -> Result<Tensor<f64>>,
{
    let mut fresh = module.clone();
    fresh.visit_mut(&mut |_, t| *t = Tensor::param(t.shape().to_vec(), t.to_vec()).expect("same shape"));
    let out = f(&fresh)?;
    out.backward()?;
    let floor = grad_floor(out.item(), eps);
    let mut analytic = Vec::new();
    fresh.visit(&mut |_, t| analytic.push(t.grad_or_zero()));

    let stride = stride.max(1);
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for ci in (0..grads.len()).step_by(stride) {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe = module.clone();
                let mut idx = 0;
                probe.visit_mut(&mut |_, t| {
                    if idx == pi {
                        let mut v = t.to_vec();
                        v[ci] += delta;
                        *t = Tensor::constant(t.shape().to_vec(), v).expect("same shape");
                    }
                    idx += 1;
                });
                Ok(no_grad(|| f(&probe))?.item())
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            worst = worst.max(relative_error(grads[ci], numeric, floor));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::param(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::param(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[5, 7]).scale(10.0);
        let y = x.softmax().unwrap();
        for r in 0..5 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, &[3, 4]);
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
        let i3 = Tensor::constant(vec![3, 3], eye).unwrap();
        assert_eq!(i3.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[4, 16]).scale(3.0);
        let ones = Tensor::constant(vec![16], vec![1.0; 16]).unwrap();
        let zeros = Tensor::zeros(vec![16]);
        let y = x.layer_norm(&ones, &zeros, 1e-5).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn shape_mismatch_names_op() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        assert!(a.l2_sq(&t(&[3], &[0.0; 3])).unwrap_err().to_string().contains("l2_sq"));
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let logits = Tensor::<f64>::zeros(vec![3, 5]);
        let ce = cross_entropy(&logits, &[0, 4, 2], &[true; 3], Reduction::Mean).unwrap();
        assert!((ce.item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut v = vec![0.0; 8];
        v[1] = 50.0;
        v[4 + 2] = 50.0;
        let logits = Tensor::<f64>::constant(vec![2, 4], v).unwrap();
        let ce = cross_entropy(&logits, &[1, 2], &[true, true], Reduction::Sum).unwrap();
        assert!(ce.item() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(&mut rng, &[3, 5]).scale(3.0);
        let targets = [2, 0, 4];
        let mask = [true, false, true];
        let got = cross_entropy(&logits, &targets, &mask, Reduction::Mean).unwrap().item();
        let mut total = 0.0;
        for r in [0usize, 2] {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += -(row[targets[r]].exp() / z).ln();
        }
        assert!((got - total / 2.0).abs() < 1e-10);
        let sum = cross_entropy(&logits, &targets, &mask, Reduction::Sum).unwrap().item();
        assert!((sum - total).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_all_masked_is_error() {
        let logits = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(cross_entropy(&logits, &[0, 1], &[false, false], Reduction::Mean).is_err());
    }

    #[test]
    fn l2_sq_values() {
        let a = t(&[2], &[1.0, 0.0]);
        let b = t(&[2], &[0.0, 1.0]);
        assert_eq!(l2_sq(&a, &b).unwrap().item(), 2.0);
        assert_eq!(l2_sq(&a, &a).unwrap().item(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[7]);
        let y = random(&mut rng, &[7]);
        let oracle: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        assert!((l2_sq(&x, &y).unwrap().item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        x.sum().backward().unwrap();
        assert_eq!(x.grad_or_zero(), vec![1.0; 6]);
    }

    #[test]
    fn backward_of_l2_sq_is_twice_difference() {
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let c = Tensor::constant(vec![3], vec![0.0, 1.0, 0.5]).unwrap();
        l2_sq(&x, &c).unwrap().backward().unwrap();
        assert_eq!(x.grad_or_zero(), vec![2.0, -6.0, 0.0]);
    }

    #[test]
    fn backward_twice_accumulates_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random(&mut rng, &[4, 3]);
        let x = random(&mut rng, &[2, 4]);
        let loss = x.matmul(&w).unwrap().gelu().softmax().unwrap().sum();
        loss.backward().unwrap();
        let once = w.grad_or_zero();
        loss.backward().unwrap();
        let twice = w.grad_or_zero();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let x = t(&[2], &[1.0, 2.0]);
        let unused = t(&[3], &[1.0, 2.0, 3.0]);
        x.sum().backward().unwrap();
        assert_eq!(unused.grad_or_zero(), vec![0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(&[2], &[1.0, 2.0]);
        assert!(x.scale(2.0).backward().is_err());
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = t(&[2], &[1.0, 2.0]);
        let y = no_grad(|| x.scale(3.0));
        assert!(!y.requires_grad());
        assert!(x.scale(3.0).requires_grad());
    }

    #[test]
    fn linear_function_checks_exactly() {
        let c = Tensor::constant(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]).unwrap();
        let x = t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let err = grad_check(|x| Ok(x.mul(&c)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn l2_objective_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = random(&mut rng, &[6]).detach();
        let x = random(&mut rng, &[6]);
        let err = grad_check(|x| x.l2_sq(&target), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    /// Every primitive op's reverse rule against central differences.
    #[test]
    fn every_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random(&mut rng, &[4, 3]).detach();
        let w2 = random(&mut rng, &[5, 4]).detach();
        let bias = random(&mut rng, &[3]).detach();
        let gain = random(&mut rng, &[4]).detach();
        let mask = Tensor::constant(vec![3, 3], vec![0.0, -1e30, -1e30, 0.0, 0.0, -1e30, 0.0, 0.0, 0.0]).unwrap();
        let x = random(&mut rng, &[3, 4]);
        type F = Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>>;
        let cases: Vec<(&str, F)> = vec![
            ("matmul", Box::new(move |x| Ok(x.matmul(&w)?.gelu().sum()))),
            ("matmul_t", Box::new(move |x| Ok(x.matmul_t(&w2)?.relu().sum()))),
            ("self_matmul_t", Box::new(|x| Ok(x.matmul_t(x)?.mul(&x.matmul_t(x)?)?.mean()))),
            ("add_row", Box::new(move |x| Ok(x.slice_cols(0, 3)?.add_row(&bias)?.softmax()?.mul(&x.slice_cols(1, 4)?)?.sum()))),
            ("layer_norm", Box::new(move |x| {
                let b = Tensor::zeros(vec![4]);
                Ok(x.layer_norm(&gain, &b, 1e-5)?.gelu().mul(x)?.sum())
            })),
            ("masked_softmax", Box::new(move |x| {
                let s = x.matmul_t(x)?.add(&mask)?.softmax()?;
                Ok(s.matmul(x)?.mul(x)?.sum())
            })),
            ("log_softmax", Box::new(|x| Ok(x.log_softmax()?.mul(x)?.sum()))),
            ("concat_slice", Box::new(|x| {
                let a = x.slice_rows(0, 2)?;
                let b = x.slice_rows(1, 3)?;
                let c = Tensor::concat_rows(&[a, b])?;
                let d = Tensor::concat_cols(&[c.slice_cols(2, 4)?, c.slice_cols(0, 1)?])?;
                Ok(d.mul(&d)?.sum())
            })),
            ("gather", Box::new(|x| Ok(x.gather_rows(&[2, 0, 2])?.transpose()?.mul(&x.gather_rows(&[1, 1, 0])?.transpose()?)?.sum()))),
            ("cross_entropy", Box::new(|x| x.scale(2.0).cross_entropy(&[3, 0, 1], &[true, false, true], Reduction::Mean))),
            ("normalize", Box::new(|x| {
                let z = x.normalize_rows()?;
                Ok(z.matmul_t(&z)?.sub(&z.matmul_t(x)?)?.sum())
            })),
        ];
        for (name, f) in cases {
            let err = grad_check(f, &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }
}
