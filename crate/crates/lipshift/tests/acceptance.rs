//! End-to-end acceptance gate. Each test covers one numbered criterion and
//! prints a `[PASS]` line (visible with `cargo test -- --nocapture`).
//!
//! Criteria 8-11 share a single trained f32 model; the numerical criteria run
//! in f64 against independent oracles (exact SVD, central finite differences).

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lipshift::attack::{pgd_l2, AttackConfig};
use lipshift::certify::{certify_batch, clean_accuracy, vra, Verdict};
use lipshift::check::{empirical_lipschitz, gradcheck};
use lipshift::data::{synthetic_blobs, Dataset};
use lipshift::layers::{
    AvgPoolLayer, CenterNorm, LiResConv, LlnHead, PatchEmbed, PoolKind, ShiftLayer,
};
use lipshift::model::{ArchConfig, TapedParams};
use lipshift::ops;
use lipshift::spectral::{
    materialize, power_iteration, svd_oracle, MatrixOperator, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use lipshift::tape::Tape;
use lipshift::tensor::Tensor;
use lipshift::train::{emma_loss, train, EpsSchedule, TrainConfig, DEFAULT_EPS};
use lipshift::{Model32, Model64};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![rows, cols], |_| rng.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// 1. power iteration agrees with the exact SVD oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_spectral_oracle_agreement() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let rows = rng.gen_range(1..=96);
        let cols = rng.gen_range(1..=96);
        let m = random_matrix(rows, cols, 1000 + i);
        let exact = svd_oracle(&m).unwrap();
        let est = power_iteration(
            &MatrixOperator::new(m),
            DEFAULT_MAX_ITERS,
            DEFAULT_TOL,
            2000 + i,
        )
        .unwrap();
        let rel = (est.value - exact).abs() / exact.max(1e-12);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-4,
            "matrix {i} ({rows}x{cols}): power iteration {} vs oracle {exact}",
            est.value
        );
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "took {secs:.1}s, budget 30s");
    println!("[PASS] criterion 1: 200 matrices, worst rel err {worst:.2e}, {secs:.1}s");
}

// ---------------------------------------------------------------------------
// 2. analytic gradients match central finite differences
// ---------------------------------------------------------------------------

const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

#[test]
fn criterion_02_gradient_correctness() {
    let start = Instant::now();

    // per-layer checks: scalar root is a fixed random projection of the output
    let proj = |shape: Vec<usize>, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    };

    // CenterNorm w.r.t. input, gamma, beta
    {
        let cn = CenterNorm::<f64>::new(6);
        let inputs = vec![random_matrix(4, 6, 1), random_matrix(1, 6, 2).reshape(vec![6]).unwrap(), random_matrix(1, 6, 3).reshape(vec![6]).unwrap()];
        let mask = proj(vec![4, 6], 10);
        let err = gradcheck(
            |t, v| {
                let y = cn.forward_t(t, v[0], v[1], v[2])?;
                let m = t.mul_mask(y, mask.clone())?;
                Ok(t.sum_all(m))
            },
            &inputs,
            GRAD_H,
        )
        .unwrap();
        assert!(err <= GRAD_TOL, "centernorm grad err {err}");
    }

    // LiResConv w.r.t. input, weight, bias (including its spectral bound)
    {
        let layer = LiResConv::<f64>::new(6, 5);
        let inputs = vec![random_matrix(4, 6, 4), layer.w.clone(), layer.b.clone()];
        let mask = proj(vec![4, 6], 11);
        let err = gradcheck(
            |t, v| {
                let y = layer.forward_t(t, v[0], v[1], v[2], None)?;
                let m = t.mul_mask(y, mask.clone())?;
                let out = t.sum_all(m);
                let sigma = layer.bound_t(t, v[1], 0)?;
                t.add(out, sigma)
            },
            &inputs,
            GRAD_H,
        )
        .unwrap();
        assert!(err <= GRAD_TOL, "liresconv grad err {err}");
    }

    // PatchEmbed w.r.t. input, weight, bias
    {
        let layer = PatchEmbed::<f64>::new(2, 2, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_fn(vec![2, 4, 4, 2], |_| rng.gen_range(-1.0..1.0));
        let inputs = vec![x, layer.w.clone(), layer.b.clone()];
        let mask = proj(vec![2, 2, 2, 4], 12);
        let err = gradcheck(
            |t, v| {
                let y = layer.forward_t(t, v[0], v[1], v[2])?;
                let m = t.mul_mask(y, mask.clone())?;
                Ok(t.sum_all(m))
            },
            &inputs,
            GRAD_H,
        )
        .unwrap();
        assert!(err <= GRAD_TOL, "patch embed grad err {err}");
    }

    // head w.r.t. input, weight, bias plus the pair-constant matrix
    {
        let head = LlnHead::<f64>::new(3, 5, 9);
        let inputs = vec![random_matrix(4, 5, 8), head.w.clone(), head.b.clone()];
        let mask = proj(vec![4, 3], 13);
        let kmask = proj(vec![3, 3], 14);
        let err = gradcheck(
            |t, v| {
                let z = head.forward_t(t, v[0], v[1], v[2])?;
                let m = t.mul_mask(z, mask.clone())?;
                let a = t.sum_all(m);
                let k = head.pair_constants_t(t, v[1])?;
                let km = t.mul_mask(k, kmask.clone())?;
                let b = t.sum_all(km);
                t.add(a, b)
            },
            &inputs,
            GRAD_H,
        )
        .unwrap();
        assert!(err <= GRAD_TOL, "head grad err {err}");
    }

    // parameter-free spatial layers through the tape
    {
        let shift = ShiftLayer::new(8, 0.125).unwrap();
        let pool = AvgPoolLayer { kind: PoolKind::Kernel(2) };
        let global = AvgPoolLayer { kind: PoolKind::Global };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::from_fn(vec![2, 4, 4, 8], |_| rng.gen_range(-1.0..1.0));
        let masks = [proj(vec![2, 4, 4, 8], 16), proj(vec![2, 2, 2, 8], 17), proj(vec![2, 8], 18)];
        let err = gradcheck(
            |t, v| {
                let s = shift.forward_t(t, v[0])?;
                let s = t.maxmin(s)?;
                let a = t.mul_mask(s, masks[0].clone())?;
                let a = t.sum_all(a);
                let p = pool.forward_t(t, v[0])?;
                let b = t.mul_mask(p, masks[1].clone())?;
                let b = t.sum_all(b);
                let g = global.forward_t(t, v[0])?;
                let c = t.mul_mask(g, masks[2].clone())?;
                let c = t.sum_all(c);
                let ab = t.add(a, b)?;
                t.add(ab, c)
            },
            &[x],
            GRAD_H,
        )
        .unwrap();
        assert!(err <= GRAD_TOL, "spatial layer grad err {err}");
    }

    // the full desk model through the margin loss, including the bound product
    let model = Model64::build(ArchConfig::desk(), 21).unwrap();
    let ds = synthetic_blobs::<f64>(3, 2, 3, 8, 8, 1.2, 0.05, 22).unwrap();
    let nhwc = ops::nchw_to_nhwc(&ds.images).unwrap();
    let labels = ds.labels.clone();
    let mut inputs: Vec<Tensor<f64>> =
        model.params().into_iter().map(|(_, t)| t.clone()).collect();
    let n_params = inputs.len();
    inputs.push(nhwc);
    let err = gradcheck(
        |t, v| {
            let tp = TapedParams { vars: v[..n_params].to_vec() };
            let z = model.forward_t(t, &tp, v[n_params], false, 0)?;
            let tb = model.bound_t(t, &tp)?;
            let k = t.mul_scalar(tb.pair_constants, tb.scaled)?;
            emma_loss(t, z, k, &labels, 0.2, false)
        },
        &inputs,
        GRAD_H,
    )
    .unwrap();
    assert!(err <= GRAD_TOL, "full-model EMMA grad err {err}");

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "took {secs:.1}s, budget 120s");
    println!("[PASS] criterion 2: all layer + full-model gradchecks <= {GRAD_TOL:.0e} (model err {err:.2e}), {secs:.1}s");
}

// ---------------------------------------------------------------------------
// 3. declared per-layer bounds are never exceeded empirically
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_layer_bound_soundness() {
    const RANDOM: usize = 10_000;
    const ASCENT: usize = 1_000;
    const SLOP: f64 = 1.0 + 1e-4;
    let check_linear_oracle = |m: &Tensor<f64>, declared: f64, name: &str| {
        let sigma = svd_oracle(m).unwrap();
        let rel = (sigma - declared).abs() / sigma.max(1e-12);
        assert!(rel <= 1e-4, "{name}: declared {declared} vs oracle {sigma}");
    };

    // shift: parameter-free, bound exactly 1
    {
        let layer = ShiftLayer::new(8, 0.125).unwrap();
        let probe = empirical_lipschitz::<f64, _>(
            &|t, x| {
                let x4 = t.reshape(x, vec![1, 4, 4, 8])?;
                let y = layer.forward_t(t, x4)?;
                t.reshape(y, vec![4, 4, 8])
            },
            &[4, 4, 8],
            RANDOM,
            ASCENT,
            5,
            31,
        )
        .unwrap();
        assert!(probe.max_ratio <= layer.bound() * SLOP, "shift ratio {}", probe.max_ratio);
        check_linear_oracle(&materialize(&layer.operator(4, 4)).unwrap(), 1.0, "shift");
    }

    // centernorm with mixed gamma: bound max|gamma|
    {
        let mut cn = CenterNorm::<f64>::new(8);
        cn.gamma = random_matrix(1, 8, 32).reshape(vec![8]).unwrap().scale(1.5);
        let bound = cn.bound();
        let cnc = cn.clone();
        let probe = empirical_lipschitz::<f64, _>(
            &move |t, x| {
                let x2 = t.reshape(x, vec![1, 8])?;
                let g = t.leaf(cnc.gamma.clone());
                let b = t.leaf(cnc.beta.clone());
                let y = cnc.forward_t(t, x2, g, b)?;
                t.reshape(y, vec![8])
            },
            &[8],
            RANDOM,
            ASCENT,
            5,
            33,
        )
        .unwrap();
        assert!(probe.max_ratio <= bound * SLOP, "centernorm ratio {} bound {bound}", probe.max_ratio);
        // linear-layer oracle comparison holds exactly for uniform gamma
        let mut uniform = CenterNorm::<f64>::new(8);
        uniform.gamma = Tensor::full(vec![8], 1.37);
        check_linear_oracle(&materialize(&uniform.operator()).unwrap(), 1.37, "centernorm");
    }

    // residual conv with perturbed weights: bound sigma(I + W)
    {
        let mut layer = LiResConv::<f64>::new(8, 35);
        let noise = random_matrix(8, 8, 36).scale(0.05);
        layer.w = layer.w.add(&noise).unwrap();
        let declared = layer.bound(0).unwrap().bound();
        let lc = layer.clone();
        let probe = empirical_lipschitz::<f64, _>(
            &move |t, x| {
                let x2 = t.reshape(x, vec![1, 8])?;
                let w = t.leaf(lc.w.clone());
                let b = t.leaf(lc.b.clone());
                let y = lc.forward_t(t, x2, w, b, None)?;
                t.reshape(y, vec![8])
            },
            &[8],
            RANDOM,
            ASCENT,
            5,
            37,
        )
        .unwrap();
        assert!(probe.max_ratio <= declared * SLOP, "liresconv ratio {} bound {declared}", probe.max_ratio);
        check_linear_oracle(&layer.composite(), declared, "liresconv");
    }

    // patch embedding: bound sigma(weight)
    {
        let layer = PatchEmbed::<f64>::new(2, 2, 6, 38);
        let declared = layer.bound(0).unwrap().bound();
        let lc = layer.clone();
        let probe = empirical_lipschitz::<f64, _>(
            &move |t, x| {
                let x4 = t.reshape(x, vec![1, 4, 4, 2])?;
                let w = t.leaf(lc.w.clone());
                let b = t.leaf(lc.b.clone());
                let y = lc.forward_t(t, x4, w, b)?;
                t.reshape(y, vec![2, 2, 6])
            },
            &[4, 4, 2],
            RANDOM,
            ASCENT,
            5,
            39,
        )
        .unwrap();
        assert!(probe.max_ratio <= declared * SLOP, "patch ratio {} bound {declared}", probe.max_ratio);
        check_linear_oracle(&materialize(&layer.operator(4, 4)).unwrap(), declared, "patch embed");
    }

    // pooling layers
    for (pool, shape, declared, name) in [
        (AvgPoolLayer { kind: PoolKind::Kernel(2) }, vec![4usize, 4, 3], 0.5, "avgpool2"),
        (AvgPoolLayer { kind: PoolKind::Global }, vec![4, 4, 3], 0.25, "globalpool"),
    ] {
        let sc = shape.clone();
        let probe = empirical_lipschitz::<f64, _>(
            &move |t, x| {
                let x4 = t.reshape(x, vec![1, sc[0], sc[1], sc[2]])?;
                let y = pool.forward_t(t, x4)?;
                let numel: usize = t.value(y).numel();
                t.reshape(y, vec![numel])
            },
            &shape,
            RANDOM,
            ASCENT,
            5,
            41,
        )
        .unwrap();
        assert!(probe.max_ratio <= declared * SLOP, "{name} ratio {}", probe.max_ratio);
        check_linear_oracle(
            &materialize(&pool.operator(shape[0], shape[1], shape[2])).unwrap(),
            declared,
            name,
        );
    }

    // maxmin: nonlinear, bound 1
    {
        let probe = empirical_lipschitz::<f64, _>(
            &|t, x| t.maxmin(x),
            &[2, 8],
            RANDOM,
            ASCENT,
            5,
            43,
        )
        .unwrap();
        assert!(probe.max_ratio <= SLOP, "maxmin ratio {}", probe.max_ratio);
    }

    println!(
        "[PASS] criterion 3: {RANDOM} random + {ASCENT} ascent pairs per layer stay within declared bounds; linear layers match the SVD oracle"
    );
}

// ---------------------------------------------------------------------------
// 4. closed-form pooling bounds
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_pool_bounds_closed_form() {
    let pool2 = AvgPoolLayer { kind: PoolKind::Kernel(2) };
    let b2 = pool2.bound::<f64>(8, 8, 4, 0).unwrap().value;
    assert!((b2 - 0.5).abs() <= 1e-5, "2x2 pool bound {b2}");
    let global = AvgPoolLayer { kind: PoolKind::Global };
    let bg = global.bound::<f64>(8, 8, 4, 0).unwrap().value;
    assert!((bg - 0.125).abs() <= 1e-5, "global 8x8 pool bound {bg}");
    println!("[PASS] criterion 4: 2x2 pool bound {b2:.6} (0.5), global 8x8 bound {bg:.6} (0.125)");
}

// ---------------------------------------------------------------------------
// 5. MaxMin preserves gradient norms
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_maxmin_gradient_preservation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    for _ in 0..1000 {
        let x = Tensor::<f64>::from_fn(vec![1, 16], |_| rng.gen_range(-2.0..2.0));
        let v = Tensor::<f64>::from_fn(vec![1, 16], |_| rng.gen_range(-2.0..2.0));
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = tape.maxmin(xv).unwrap();
        // scalar root <y, v>: the input gradient is then J^T v, a permutation
        // of v, so its norm must match exactly
        let m = tape.mul_mask(y, v.clone()).unwrap();
        let root = tape.sum_all(m);
        tape.backward(root).unwrap();
        let jt_v = tape.grad(xv);
        assert!(
            (jt_v.norm_l2() - v.norm_l2()).abs() <= 1e-6,
            "|J^T v| {} vs |v| {}",
            jt_v.norm_l2(),
            v.norm_l2()
        );
    }
    println!("[PASS] criterion 5: 1000 random (x, v) pairs, gradient norm preserved to 1e-6");
}

// ---------------------------------------------------------------------------
// 6. epsilon ramp schedule
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_eps_schedule() {
    let t_total = 30usize;
    let s = EpsSchedule { eps: DEFAULT_EPS, total_epochs: t_total };
    assert_eq!(s.eps_at(0), 0.0);
    // the ramp tops out at two-thirds of training (not three-quarters, which
    // is a common misreading of this schedule), and stays flat afterwards
    let two_thirds = 2.0 * t_total as f64 / 3.0;
    assert!((s.eps_at_f(two_thirds) - DEFAULT_EPS).abs() <= 1e-9);
    assert!((s.eps_at(t_total) - DEFAULT_EPS).abs() <= 1e-9);
    let slope = DEFAULT_EPS / two_thirds;
    for i in 0..=100 {
        let t = two_thirds * i as f64 / 100.0;
        assert!(
            (s.eps_at_f(t) - slope * t).abs() <= 1e-9,
            "nonlinear at t={t}: {}",
            s.eps_at_f(t)
        );
    }
    println!("[PASS] criterion 6: ramp 0 -> 36/255 linear on [0, 2T/3], flat afterwards");
}

// ---------------------------------------------------------------------------
// 7. stochastic-depth discount on the certified bound
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_drop_scaling() {
    for p in [0.0, 0.1, 0.6] {
        let mut cfg = ArchConfig::desk();
        cfg.p_drop = p;
        let model = Model64::build(cfg, 77).unwrap();
        let report = model.lipschitz_report(0).unwrap();
        assert_eq!(
            report.scaled_bound,
            report.backbone_bound * (1.0 - p),
            "p_drop {p}"
        );
    }
    println!("[PASS] criterion 7: scaled_bound == (1 - p_drop) * backbone_bound for p in {{0, 0.1, 0.6}}");
}

// ---------------------------------------------------------------------------
// 8-11 share one trained model
// ---------------------------------------------------------------------------

struct TrainedFixture {
    model: Model32,
    eval: Dataset<f32>,
    clean_acc: f64,
    vra_at_eps: f64,
    train_secs: f64,
}

fn trained() -> &'static TrainedFixture {
    static FIXTURE: OnceLock<TrainedFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let full = synthetic_blobs::<f32>(256, 2, 3, 8, 8, 1.2, 0.05, 7).unwrap();
        let per = 3 * 8 * 8;
        let split = |lo: usize, hi: usize| {
            Dataset::new(
                Tensor::new(
                    vec![hi - lo, 3, 8, 8],
                    full.images.data()[lo * per..hi * per].to_vec(),
                )
                .unwrap(),
                full.labels[lo..hi].to_vec(),
                2,
            )
            .unwrap()
        };
        let (train_ds, eval) = (split(0, 192), split(192, 256));
        let mut model = Model32::build(ArchConfig::desk(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-2,
            seed: 1,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        train(&mut model, &train_ds, &eval, &cfg, None, 0).unwrap();
        let train_secs = start.elapsed().as_secs_f64();
        let clean_acc = clean_accuracy(&model, &eval).unwrap();
        let vra_at_eps = vra(&model, &eval, DEFAULT_EPS, false).unwrap();
        TrainedFixture { model, eval, clean_acc, vra_at_eps, train_secs }
    })
}

#[test]
fn criterion_08_desk_training_run() {
    let fx = trained();
    assert!(fx.train_secs <= 300.0, "training took {:.1}s, budget 300s", fx.train_secs);
    assert!(fx.clean_acc >= 0.95, "clean accuracy {}", fx.clean_acc);
    assert!(fx.vra_at_eps >= 0.50, "verified robust accuracy {}", fx.vra_at_eps);
    println!(
        "[PASS] criterion 8: 30 epochs in {:.1}s, clean {:.3}, vra {:.3} at eps 36/255",
        fx.train_secs, fx.clean_acc, fx.vra_at_eps
    );
}

#[test]
fn criterion_09_certificate_soundness() {
    let fx = trained();
    let eps = DEFAULT_EPS;
    let report = fx.model.lipschitz_report(0).unwrap();
    let certs = certify_batch(&fx.model, &report, &fx.eval.images, eps, false).unwrap();
    let idx: Vec<usize> = certs
        .iter()
        .zip(&fx.eval.labels)
        .filter(|(c, &l)| c.verdict == Verdict::Certified && c.predicted == l)
        .map(|(c, _)| c.sample)
        .collect();
    assert!(!idx.is_empty(), "no certified-correct samples to falsify");
    let (x, labels) = fx.eval.gather(&idx).unwrap();

    // strongest available falsifier: multi-restart PGD at the certified radius
    let atk = AttackConfig { seed: 9, ..AttackConfig::for_eps(eps) };
    let results = pgd_l2(&fx.model, &x, &labels, &atk).unwrap();
    let violations: Vec<_> = results.iter().filter(|r| r.success).collect();
    assert!(
        violations.is_empty(),
        "PGD flipped {} certified samples",
        violations.len()
    );

    // plus 1000 random directions on the eps-sphere per sample (batched)
    let n = idx.len();
    let per = x.numel() / n;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC9);
    for _ in 0..1000 {
        let probe = Tensor::<f32>::from_fn(x.shape().to_vec(), |_| 0.0f32);
        let mut probe = probe;
        for i in 0..n {
            let dir: Vec<f64> = (0..per).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for j in 0..per {
                let v = (x.data()[i * per + j] as f64 + eps * dir[j] / norm).clamp(0.0, 1.0);
                probe.data_mut()[i * per + j] = v as f32;
            }
        }
        let preds = fx.model.predict(&probe).unwrap();
        for (i, (&p, &l)) in preds.iter().zip(&labels).enumerate() {
            assert_eq!(p, l, "random probe flipped certified sample {}", idx[i]);
        }
    }

    // accuracy ordering
    let emp = {
        let ok = pgd_l2(&fx.model, &fx.eval.images, &fx.eval.labels, &atk)
            .unwrap()
            .iter()
            .filter(|r| r.clean_correct && !r.success)
            .count();
        ok as f64 / fx.eval.len() as f64
    };
    assert!(
        fx.vra_at_eps <= emp + 1e-12 && emp <= fx.clean_acc + 1e-12,
        "ordering violated: vra {} emp {} clean {}",
        fx.vra_at_eps,
        emp,
        fx.clean_acc
    );
    println!(
        "[PASS] criterion 9: {} certified samples, 0 violations under PGD + 1000 random probes; vra {:.3} <= empirical {:.3} <= clean {:.3}",
        idx.len(),
        fx.vra_at_eps,
        emp,
        fx.clean_acc
    );
}

#[test]
fn criterion_10_vra_monotone_in_radius() {
    let fx = trained();
    let radii = [0.0, 18.0 / 255.0, 36.0 / 255.0, 72.0 / 255.0];
    let vras: Vec<f64> = radii
        .iter()
        .map(|&e| vra(&fx.model, &fx.eval, e, false).unwrap())
        .collect();
    for w in vras.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "vra increased with radius: {vras:?}");
    }
    println!("[PASS] criterion 10: vra over radii {radii:?} = {vras:?} (non-increasing)");
}

#[test]
fn criterion_11_checkpoint_persistence() {
    let fx = trained();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.lsft");
    let p2 = dir.path().join("b.lsft");
    fx.model.save_checkpoint(&p1).unwrap();
    let reloaded = Model32::load_checkpoint(&p1).unwrap();
    reloaded.save_checkpoint(&p2).unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "save -> load -> save changed bytes"
    );
    let vra2 = vra(&reloaded, &fx.eval, DEFAULT_EPS, false).unwrap();
    assert_eq!(vra2, fx.vra_at_eps, "reloaded model changed the vra");
    println!("[PASS] criterion 11: checkpoint bit-identical after roundtrip, vra reproduced exactly ({vra2:.3})");
}

// ---------------------------------------------------------------------------
// 12. margin loss degenerates to cross-entropy at zero radius
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_emma_degeneracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCC);
    for trial in 0..50 {
        let (b, c) = (rng.gen_range(2..8), rng.gen_range(2..6));
        let z = Tensor::<f64>::from_fn(vec![b, c], |_| rng.gen_range(-3.0..3.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        // symmetric nonnegative pair constants with zero diagonal
        let mut k = Tensor::<f64>::zeros(vec![c, c]);
        for i in 0..c {
            for j in 0..i {
                let v = rng.gen_range(0.0..2.0);
                k.data_mut()[i * c + j] = v;
                k.data_mut()[j * c + i] = v;
            }
        }
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let kv = tape.leaf(k);
        let ce = tape.softmax_ce(zv, &labels).unwrap();
        let e0 = emma_loss(&mut tape, zv, kv, &labels, 0.0, false).unwrap();
        let diff = (tape.value(e0).item() - tape.value(ce).item()).abs();
        assert!(diff <= 1e-7, "trial {trial}: emma(0) differs from CE by {diff}");
        for eps in [0.05, 0.3, 1.0] {
            let e = emma_loss(&mut tape, zv, kv, &labels, eps, false).unwrap();
            assert!(
                tape.value(e).item() >= tape.value(ce).item() - 1e-12,
                "trial {trial}: emma({eps}) below CE"
            );
        }
    }
    println!("[PASS] criterion 12: emma(0) == CE to 1e-7 and emma(eps) >= CE on 50 random batches");
}
