#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::{Array, Array1, Array2, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stmil::mil_train::{ranking_loss, BagScores, RankingLossConfig};
use stmil::net::{init, layers, ClassifierParams, DropoutMasks, Mode, NetConfig};

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-5)`: relative where gradients are sizeable,
/// absolute (scaled) where both are tiny. Exactly-zero derivatives, such as
/// a bias feeding batch norm, come back from central differences as rounding
/// noise of order ulp(f) / 2h, well below the floor.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

#[derive(Debug, Default)]
pub struct GradReport {
    /// component -> (worst relative error, entries checked)
    pub components: BTreeMap<&'static str, (f64, usize)>,
    pub configs: usize,
}

impl GradReport {
    fn record(&mut self, component: &'static str, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        let slot = self.components.entry(component).or_insert((0.0, 0));
        slot.0 = slot.0.max(e);
        slot.1 += 1;
    }

    pub fn worst(&self) -> f64 {
        self.components.values().map(|v| v.0).fold(0.0, f64::max)
    }
}

fn randn<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(rng: &mut ChaCha8Rng, shape: Sh, lo: f64, hi: f64) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

/// Central differences of `f` at every entry of `x`, compared to `analytic`.
fn check<D: Dimension>(
    report: &mut GradReport,
    component: &'static str,
    x: &Array<f64, D>,
    analytic: &Array<f64, D>,
    f: impl Fn(&Array<f64, D>) -> f64,
) {
    assert_eq!(x.shape(), analytic.shape(), "{component}");
    let mut xp = x.as_standard_layout().into_owned();
    let a = analytic.as_standard_layout().into_owned();
    for i in 0..xp.len() {
        let orig = xp.as_slice().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + STEP;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - STEP;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        report.record(component, a.as_slice().unwrap()[i], (fp - fm) / (2.0 * STEP));
    }
}

fn weighted_sum<D: Dimension>(u: &Array<f64, D>, y: &Array<f64, D>) -> f64 {
    (u * y).sum()
}

fn check_pool(rng: &mut ChaCha8Rng, report: &mut GradReport) {
    let dims = (
        rng.random_range(1..6),
        rng.random_range(1..5),
        rng.random_range(1..4),
        rng.random_range(1..4),
    );
    let x = randn(rng, dims, -2.0, 2.0);
    let u: Array1<f64> = randn(rng, dims.0, -1.0, 1.0);
    let analytic = layers::pool_backward(u.view(), dims);
    check(report, "pool", &x, &analytic, |x| u.dot(&layers::pool(x.view())));
}

fn check_affine(rng: &mut ChaCha8Rng, report: &mut GradReport) {
    let (b, i, o) = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..7));
    let x: Array2<f64> = randn(rng, (b, i), -1.0, 1.0);
    let w: Array2<f64> = randn(rng, (o, i), -1.0, 1.0);
    let bias: Array1<f64> = randn(rng, o, -1.0, 1.0);
    let u: Array2<f64> = randn(rng, (b, o), -1.0, 1.0);
    let g = layers::affine_backward(x.view(), w.view(), u.view());
    let f = |x: &Array2<f64>, w: &Array2<f64>, bias: &Array1<f64>| {
        weighted_sum(&u, &layers::affine_forward(x.view(), w.view(), bias.view()))
    };
    check(report, "affine", &x, &g.dx, |x| f(x, &w, &bias));
    check(report, "affine", &w, &g.dw, |w| f(&x, w, &bias));
    check(report, "affine", &bias, &g.db, |bias| f(&x, &w, bias));
}

fn check_batchnorm(rng: &mut ChaCha8Rng, report: &mut GradReport) {
    let (b, n) = (rng.random_range(2..8), rng.random_range(1..6));
    let scale: Array1<f64> = randn(rng, n, 0.2, 3.0);
    let z: Array2<f64> = randn(rng, (b, n), -1.0, 1.0) * &scale;
    let gamma: Array1<f64> = randn(rng, n, 0.5, 1.5);
    let beta: Array1<f64> = randn(rng, n, -0.5, 0.5);
    let u: Array2<f64> = randn(rng, (b, n), -1.0, 1.0);

    let (_, cache) = layers::batchnorm_train(z.view(), gamma.view(), beta.view());
    let (dz, dg, db) = layers::batchnorm_backward(u.view(), &cache, gamma.view());
    let f = |z: &Array2<f64>, g: &Array1<f64>, bt: &Array1<f64>| {
        weighted_sum(&u, &layers::batchnorm_train(z.view(), g.view(), bt.view()).0)
    };
    check(report, "batchnorm_train", &z, &dz, |z| f(z, &gamma, &beta));
    check(report, "batchnorm_train", &gamma, &dg, |g| f(&z, g, &beta));
    check(report, "batchnorm_train", &beta, &db, |bt| f(&z, &gamma, bt));

    let mean: Array1<f64> = randn(rng, n, -0.5, 0.5);
    let var: Array1<f64> = randn(rng, n, 0.3, 2.0);
    let (_, cache) = layers::batchnorm_eval(z.view(), gamma.view(), beta.view(), mean.view(), var.view());
    let (dz, dg, db) = layers::batchnorm_backward(u.view(), &cache, gamma.view());
    let f = |z: &Array2<f64>, g: &Array1<f64>, bt: &Array1<f64>| {
        weighted_sum(
            &u,
            &layers::batchnorm_eval(z.view(), g.view(), bt.view(), mean.view(), var.view()).0,
        )
    };
    check(report, "batchnorm_eval", &z, &dz, |z| f(z, &gamma, &beta));
    check(report, "batchnorm_eval", &gamma, &dg, |g| f(&z, g, &beta));
    check(report, "batchnorm_eval", &beta, &db, |bt| f(&z, &gamma, bt));
}

/// Values bounded away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = rng.random_range(0.01..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn check_relu_and_dropout(rng: &mut ChaCha8Rng, report: &mut GradReport) {
    let shape = (rng.random_range(1..6), rng.random_range(1..6));
    let x = away_from_zero(rng, shape);
    let u: Array2<f64> = randn(rng, shape, -1.0, 1.0);
    let out = layers::relu(x.view());
    check(report, "relu", &x, &layers::relu_backward(u.view(), out.view()), |x| {
        weighted_sum(&u, &layers::relu(x.view()))
    });

    let p = [0.3, 0.5, 0.6][rng.random_range(0..3)];
    let mask: Array2<f64> = layers::dropout_mask(rng, shape, p);
    let analytic = layers::relu_backward((&u * &mask).view(), out.view());
    check(report, "dropout_masked", &x, &analytic, |x| {
        weighted_sum(&u, &(layers::relu(x.view()) * &mask))
    });
}

fn check_sigmoid(rng: &mut ChaCha8Rng, report: &mut GradReport) {
    for _ in 0..8 {
        let z: f64 = rng.random_range(-8.0..8.0);
        let s = layers::sigmoid(z);
        let fd = (layers::sigmoid(z + STEP) - layers::sigmoid(z - STEP)) / (2.0 * STEP);
        report.record("sigmoid", s * (1.0 - s), fd);
    }
}

fn random_net(rng: &mut ChaCha8Rng, input: usize) -> ClassifierParams<f64> {
    let depth = rng.random_range(1..4);
    let mut widths = vec![input];
    widths.extend((0..depth).map(|_| rng.random_range(2..7)));
    widths.push(1);
    let cfg = NetConfig {
        widths,
        dropout: [0.0f32, 0.3, 0.6][rng.random_range(0..3)],
        bn_momentum: 0.1,
    };
    let mut p = init::<f64>(rng.random(), &cfg).unwrap();
    for h in &mut p.hidden {
        h.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        h.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        h.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    p.out_bias[0] = rng.random_range(-0.5..0.5);
    p
}

/// Smallest |pre-ReLU value| over all hidden layers in TRAIN mode.
fn min_relu_input(p: &ClassifierParams<f64>, x: &Array2<f64>, masks: &DropoutMasks<f64>) -> f64 {
    let mut a = x.clone();
    let mut min = f64::INFINITY;
    for (h, m) in p.hidden.iter().zip(&masks.0) {
        let z = layers::affine_forward(a.view(), h.weight.view(), h.bias.view());
        let (y, _) = layers::batchnorm_train(z.view(), h.gamma.view(), h.beta.view());
        min = y.iter().fold(min, |acc, v| acc.min(v.abs()));
        a = layers::relu(y.view()) * m;
    }
    min
}

/// Central differences for every trainable entry of `p`.
fn check_params(
    report: &mut GradReport,
    component: &'static str,
    p: &ClassifierParams<f64>,
    analytic: &stmil::net::ParamGrads<f64>,
    f: impl Fn(&ClassifierParams<f64>) -> f64,
) {
    let mut q = p.clone();
    let a: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.to_vec()).collect();
    for (t, grads) in a.iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let orig = q.trainable_mut()[t][i];
            q.trainable_mut()[t][i] = orig + STEP;
            let fp = f(&q);
            q.trainable_mut()[t][i] = orig - STEP;
            let fm = f(&q);
            q.trainable_mut()[t][i] = orig;
            report.record(component, g, (fp - fm) / (2.0 * STEP));
        }
    }
}

fn check_classifier(rng: &mut ChaCha8Rng, report: &mut GradReport) {
    loop {
        let input = rng.random_range(2..7);
        let p = random_net(rng, input);
        let b = rng.random_range(2..7);
        let x: Array2<f64> = randn(rng, (b, input), -1.5, 1.5);
        let masks = p.sample_masks(rng, b);
        if min_relu_input(&p, &x, &masks) < 1e-3 {
            continue;
        }
        let u: Array1<f64> = randn(rng, b, -1.0, 1.0);
        let (_, tape) = p.forward(x.view(), Mode::Train, Some(&masks)).unwrap();
        let (g, dx) = p.backward(tape, u.view()).unwrap();
        let f = |q: &ClassifierParams<f64>, x: &Array2<f64>| {
            u.dot(&q.forward(x.view(), Mode::Train, Some(&masks)).unwrap().0)
        };
        check_params(report, "classifier", &p, &g, |q| f(q, &x));
        check(report, "classifier", &x, &dx, |x| f(&p, x));
        return;
    }
}

fn top_gap(s: &[f64]) -> f64 {
    let mut v = s.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v[0] - v[1]
}

fn check_ranking_loss(rng: &mut ChaCha8Rng, report: &mut GradReport) {
    let cfg = RankingLossConfig {
        margin: 1.0,
        lambda_sparsity: rng.random_range(0.0..0.1),
        lambda_smooth: rng.random_range(0.0..0.1),
        weight_decay: 0.0,
    };
    // directly on 49-cell score vectors
    loop {
        let p: Vec<f64> = (0..49).map(|_| rng.random_range(0.0..1.0)).collect();
        let n: Vec<f64> = (0..49).map(|_| rng.random_range(0.0..1.0)).collect();
        if top_gap(&p) < 1e-3 || top_gap(&n) < 1e-3 {
            continue;
        }
        let out = ranking_loss(&BagScores::new(p.clone(), 7).unwrap(), &BagScores::new(n.clone(), 7).unwrap(), &cfg);
        if out.hinge < 1e-3 {
            continue;
        }
        let f = |p: &Array1<f64>, n: &Array1<f64>| {
            ranking_loss(
                &BagScores::new(p.to_vec(), 7).unwrap(),
                &BagScores::new(n.to_vec(), 7).unwrap(),
                &cfg,
            )
            .loss
        };
        let (pa, na) = (Array1::from(p), Array1::from(n));
        check(report, "ranking_loss", &pa, &Array1::from(out.d_pos), |p| f(p, &na));
        check(report, "ranking_loss", &na, &Array1::from(out.d_neg), |n| f(&pa, n));
        break;
    }
    // composed with the classifier over a pair of small bags
    loop {
        let input = rng.random_range(2..6);
        let p = random_net(rng, input);
        let cols = rng.random_range(2..4);
        let cells = cols * cols;
        let xp: Array2<f64> = randn(rng, (cells, input), -1.5, 1.5);
        let xn: Array2<f64> = randn(rng, (cells, input), -1.5, 1.5);
        let (mp, mn) = (p.sample_masks(rng, cells), p.sample_masks(rng, cells));
        if min_relu_input(&p, &xp, &mp) < 1e-3 || min_relu_input(&p, &xn, &mn) < 1e-3 {
            continue;
        }
        let (sp, tp) = p.forward(xp.view(), Mode::Train, Some(&mp)).unwrap();
        let (sn, tn) = p.forward(xn.view(), Mode::Train, Some(&mn)).unwrap();
        if top_gap(sp.as_slice().unwrap()) < 1e-4 || top_gap(sn.as_slice().unwrap()) < 1e-4 {
            continue;
        }
        let out = ranking_loss(
            &BagScores::new(sp.to_vec(), cols).unwrap(),
            &BagScores::new(sn.to_vec(), cols).unwrap(),
            &cfg,
        );
        if out.hinge < 1e-3 {
            continue;
        }
        let (mut g, dxp) = p.backward(tp, Array1::from(out.d_pos).view()).unwrap();
        let (gn, dxn) = p.backward(tn, Array1::from(out.d_neg).view()).unwrap();
        g.add_assign(&gn);
        let f = |q: &ClassifierParams<f64>, xp: &Array2<f64>, xn: &Array2<f64>| {
            let sp = q.forward(xp.view(), Mode::Train, Some(&mp)).unwrap().0;
            let sn = q.forward(xn.view(), Mode::Train, Some(&mn)).unwrap().0;
            ranking_loss(
                &BagScores::new(sp.to_vec(), cols).unwrap(),
                &BagScores::new(sn.to_vec(), cols).unwrap(),
                &cfg,
            )
            .loss
        };
        check_params(report, "ranking_loss_through_classifier", &p, &g, |q| f(q, &xp, &xn));
        check(report, "ranking_loss_through_classifier", &xp, &dxp, |x| f(&p, x, &xn));
        check(report, "ranking_loss_through_classifier", &xn, &dxn, |x| f(&p, &xp, x));
        return;
    }
}

/// Runs every component check once per configuration.
pub fn gradient_suite(configs: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for _ in 0..configs {
        check_pool(&mut rng, &mut report);
        check_affine(&mut rng, &mut report);
        check_batchnorm(&mut rng, &mut report);
        check_relu_and_dropout(&mut rng, &mut report);
        check_sigmoid(&mut rng, &mut report);
        check_classifier(&mut rng, &mut report);
        check_ranking_loss(&mut rng, &mut report);
        report.configs += 1;
    }
    report
}
