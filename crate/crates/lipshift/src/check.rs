//! Independent verification utilities: central finite-difference gradient
//! checking and empirical Lipschitz-ratio probing (random pairs plus
//! gradient ascent on the ratio). These deliberately avoid the reverse-mode
//! path they are used to validate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central finite differences of a scalar function of several tensors.
pub fn central_diff_grads<S, F>(f: F, inputs: &[Tensor<S>], h: f64) -> Result<Vec<Tensor<S>>>
where
    S: Scalar,
    F: Fn(&[Tensor<S>]) -> Result<S>,
{
    let hs = S::from_f(h);
    let mut grads = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let mut g = Tensor::zeros(input.shape().to_vec());
        for e in 0..input.numel() {
            let mut work: Vec<Tensor<S>> = inputs.to_vec();
            work[idx].data_mut()[e] += hs;
            let fp = f(&work)?;
            work[idx].data_mut()[e] = input.data()[e] - hs;
            let fm = f(&work)?;
            g.data_mut()[e] = (fp - fm) / (hs + hs);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst relative disagreement between analytic and numerical gradients.
/// Denominator is floored at 1e-5 so finite-difference noise on near-zero
/// entries does not dominate.
pub fn max_rel_err<S: Scalar>(analytic: &[Tensor<S>], numerical: &[Tensor<S>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numerical) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let (av, nv) = (av.to_f(), nv.to_f());
            let denom = av.abs().max(nv.abs()).max(1e-5);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Runs backward through `f` and compares each input gradient against
/// central differences; returns the worst relative error.
pub fn gradcheck<S, F>(f: F, inputs: &[Tensor<S>], h: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor<S>> = vars.iter().map(|&v| tape.grad(v).clone()).collect();

    let numeric = central_diff_grads(
        |xs| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let r = f(&mut t, &vs)?;
            Ok(t.value(r).item())
        },
        inputs,
        h,
    )?;
    Ok(max_rel_err(&analytic, &numeric))
}

/// Outcome of an empirical Lipschitz probe.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzProbe {
    pub max_ratio: f64,
    pub random_pairs: usize,
    pub ascent_pairs: usize,
}

/// Probes the Lipschitz constant of `f` with random input pairs in [-2, 2]
/// and with pairs optimized by gradient ascent on the difference ratio.
pub fn empirical_lipschitz<S, F>(
    f: &F,
    input_shape: &[usize],
    random_pairs: usize,
    ascent_pairs: usize,
    ascent_steps: usize,
    seed: u64,
) -> Result<LipschitzProbe>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio = 0.0f64;
    let sample = |rng: &mut ChaCha8Rng| {
        Tensor::from_fn(input_shape.to_vec(), |_| S::from_f(rng.gen_range(-2.0..2.0)))
    };

    let plain_ratio = |x: &Tensor<S>, y: &Tensor<S>| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let yv = t.leaf(y.clone());
        let fx = f(&mut t, xv)?;
        let fy = f(&mut t, yv)?;
        let num = t.value(fx).sub(t.value(fy))?.norm_l2().to_f();
        let den = x.sub(y)?.norm_l2().to_f();
        Ok(if den == 0.0 { 0.0 } else { num / den })
    };

    for _ in 0..random_pairs {
        let x = sample(&mut rng);
        let y = sample(&mut rng);
        max_ratio = max_ratio.max(plain_ratio(&x, &y)?);
    }

    let step = S::from_f(0.05);
    for _ in 0..ascent_pairs {
        let mut x = sample(&mut rng);
        let mut y = sample(&mut rng);
        for _ in 0..ascent_steps {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let yv = t.leaf(y.clone());
            let fx = f(&mut t, xv)?;
            let fy = f(&mut t, yv)?;
            let dout = t.sub(fx, fy)?;
            let num = t.l2_norm(dout);
            let din = t.sub(xv, yv)?;
            let den = t.l2_norm(din);
            if t.value(den).item().to_f() < 1e-6 {
                break;
            }
            let ratio = t.div(num, den)?;
            max_ratio = max_ratio.max(t.value(ratio).item().to_f());
            t.backward(ratio)?;
            for (p, v) in [(&mut x, xv), (&mut y, yv)] {
                let g = t.grad(v);
                let n = g.norm_l2();
                if n.to_f() > 0.0 {
                    *p = p.add(&g.scale(step / n))?;
                }
            }
        }
        max_ratio = max_ratio.max(plain_ratio(&x, &y)?);
    }

    Ok(LipschitzProbe { max_ratio, random_pairs, ascent_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ReduceKind;
    use rand::Rng;

    #[test]
    fn gradcheck_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::from_fn(vec![5, 4], |_| rng.gen_range(-2.0..2.0));
        let b = Tensor::<f64>::from_fn(vec![4, 3], |_| rng.gen_range(-2.0..2.0));
        let err = gradcheck(
            |t, vs| {
                let c = t.matmul(vs[0], vs[1])?;
                // scalarize with a fixed weighting so every entry matters
                let w = Tensor::from_fn(vec![5, 3], |i| 0.1 * (i as f64 + 1.0));
                let m = t.mul_mask(c, w)?;
                Ok(t.sum_all(m))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn gradcheck_mul_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::from_fn(vec![3, 3], |_| rng.gen_range(-2.0..2.0));
        let b = Tensor::<f64>::from_fn(vec![3, 3], |_| rng.gen_range(-2.0..2.0));
        let err = gradcheck(
            |t, vs| {
                let c = t.mul(vs[0], vs[1])?;
                Ok(t.sum_all(c))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn gradcheck_reductions_and_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::from_fn(vec![4, 6], |_| rng.gen_range(-2.0..2.0));
        let v = Tensor::<f64>::from_fn(vec![6], |_| rng.gen_range(-2.0..2.0));
        let c = Tensor::<f64>::from_fn(vec![4], |_| rng.gen_range(0.5..2.0));
        let err = gradcheck(
            |t, vs| {
                let x = t.bmul_row(vs[0], vs[1])?;
                let x = t.badd_row(x, vs[1])?;
                let x = t.bdiv_col(x, vs[2])?;
                let m = t.reduce(x, ReduceKind::Mean, &[1])?;
                let s = t.sum_all(m);
                let sq = t.mul(s, s)?;
                Ok(sq)
            },
            &[a, v, c],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn gradcheck_spatial_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_fn(vec![2, 4, 4, 8], |_| rng.gen_range(-2.0..2.0));
        let err = gradcheck(
            |t, vs| {
                let s = t.shift(vs[0], 1)?;
                let m = t.maxmin(s)?;
                let p = t.avgpool(m, 2)?;
                let g = t.global_pool(p)?;
                let w = Tensor::from_fn(vec![2, 8], |i| ((i % 5) as f64) - 2.0);
                let gw = t.mul_mask(g, w)?;
                Ok(t.sum_all(gw))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn gradcheck_pairwise_dist_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::from_fn(vec![3, 4], |_| rng.gen_range(-2.0..2.0));
        let z = Tensor::<f64>::from_fn(vec![3, 3], |_| rng.gen_range(-2.0..2.0));
        let err = gradcheck(
            |t, vs| {
                let d = t.pairwise_row_dist(vs[0])?;
                let zc = t.add(vs[1], vs[1])?;
                let mixed = t.add(d, zc)?;
                t.softmax_ce(mixed, &[0, 2, 1])
            },
            &[w, z],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn empirical_lipschitz_of_contraction() {
        // f(x) = 0.5 x has ratio exactly 0.5 everywhere
        let probe = empirical_lipschitz::<f64, _>(
            &|t, x| Ok(t.scale(x, 0.5)),
            &[6],
            50,
            5,
            5,
            7,
        )
        .unwrap();
        assert!((probe.max_ratio - 0.5).abs() < 1e-9, "{probe:?}");
    }
}
