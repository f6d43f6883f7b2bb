use std::f64::consts::{E, LN_2, PI};

use proptest::prelude::*;

use super::*;
use crate::autodiff::gradcheck::{central_difference, rel_err};
use crate::autodiff::Graph;
use crate::Tensor;

fn lp(mu: f64, s: f64) -> LogisticParams {
    LogisticParams::new(mu, s).unwrap()
}

fn random_mixture(rng: &mut RngStream, k: usize) -> MixtureOfLogistics {
    MixtureOfLogistics::new(
        (0..k).map(|_| 2.0 * rng.normal()).collect(),
        (0..k).map(|_| 1.2 * (2.0 * rng.uniform_open() - 1.0)).collect(),
        (0..k).map(|_| -5.0 + 5.0 * rng.uniform_open()).collect(),
    )
    .unwrap()
}

/// Composite Simpson rule.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn density_at_mode_is_one_over_four_s() {
    let v = logistic_log_density(0.3, lp(0.3, 1.0)).unwrap();
    assert!((v + 4f64.ln()).abs() < 1e-15);
    let v = logistic_log_density(-1.0, lp(-1.0, 2.0)).unwrap();
    assert!((v + 8f64.ln()).abs() < 1e-15);
}

#[test]
fn density_integrates_to_one() {
    let p = lp(0.0, 1.0);
    let total = simpson(
        |x| logistic_log_density(x, p).unwrap().exp(),
        -60.0,
        60.0,
        200_000,
    );
    assert!((total - 1.0).abs() < 1e-9, "{total}");
}

#[test]
fn density_rejects_non_finite_input() {
    assert!(logistic_log_density(f64::NAN, lp(0.0, 1.0)).is_err());
    assert!(LogisticParams::new(0.0, 0.0).is_err());
    assert!(LogisticParams::new(0.0, -1.0).is_err());
}

#[test]
fn sample_inverse_cdf_values() {
    assert_eq!(logistic_sample(lp(0.7, 3.0), 0.5).unwrap(), 0.7);
    let v = logistic_sample(lp(0.0, 1.0), 0.75).unwrap();
    assert!((v - 3f64.ln()).abs() < 1e-15);
    assert!(logistic_sample(lp(0.0, 1.0), 0.0).is_err());
    assert!(logistic_sample(lp(0.0, 1.0), 1.0).is_err());
}

#[test]
fn sample_variance_is_pi_squared_over_three() {
    let mut rng = RngStream::new(21, 0);
    let n = 1_000_000;
    let p = lp(0.0, 1.0);
    let xs: Vec<f64> = (0..n)
        .map(|_| logistic_sample(p, rng.uniform_open()).unwrap())
        .collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let target = PI * PI / 3.0;
    assert!(((var - target) / target).abs() < 0.02, "{var}");
}

#[test]
fn entropy_closed_form() {
    assert_eq!(logistic_entropy(lp(0.0, 1.0)), 2.0);
    assert!((logistic_entropy(lp(0.0, E)) - 3.0).abs() < 1e-15);
}

#[test]
fn entropy_matches_monte_carlo() {
    for (i, s) in [0.5, 0.1, 1.0, 10.0].into_iter().enumerate() {
        let p = lp(0.2, s);
        let mut rng = RngStream::new(31, i as u64);
        let n = 1_000_000;
        let mc = (0..n)
            .map(|_| {
                let x = logistic_sample(p, rng.uniform_open()).unwrap();
                -logistic_log_density(x, p).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        let exact = logistic_entropy(p);
        assert!(rel_err(mc, exact, 0.0) < 0.01, "s={s}: {mc} vs {exact}");
    }
}

#[test]
fn reparameterisation_gradients_are_exact() {
    for u in [0.1f64, 0.5, 0.93] {
        let mut g = Graph::new();
        let mu = g.input(Tensor::scalar(0.4));
        let s = g.input(Tensor::scalar(1.7));
        let eps = g.constant(Tensor::scalar((u / (1.0 - u)).ln()));
        let scaled = g.mul(s, eps).unwrap();
        let x = g.add(mu, scaled).unwrap();
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.wrt(mu).unwrap().item(), 1.0);
        assert_eq!(grads.wrt(s).unwrap().item(), (u / (1.0 - u)).ln());
    }
}

#[test]
fn single_component_mixture_equals_logistic() {
    let p = lp(0.25, 0.3);
    let m = MixtureOfLogistics::single(p);
    for x in [-1.0, 0.0, 0.25, 0.9] {
        assert_eq!(mol_log_density(x, &m), logistic_log_density(x, p).unwrap());
    }
    let dup = MixtureOfLogistics::new(vec![0.3, 0.3], vec![0.25; 2], vec![0.3f64.ln(); 2]).unwrap();
    for x in [-1.0, 0.0, 0.25, 0.9] {
        let d = mol_log_density(x, &dup) - logistic_log_density(x, p).unwrap();
        assert!(d.abs() < 1e-14);
    }
}

#[test]
fn mixture_rejects_bad_shapes() {
    assert!(MixtureOfLogistics::new(vec![], vec![], vec![]).is_err());
    assert!(MixtureOfLogistics::new(vec![0.0], vec![0.0, 1.0], vec![0.0]).is_err());
}

#[test]
fn mixture_weights_normalise() {
    let mut rng = RngStream::new(4, 4);
    for _ in 0..50 {
        let m = random_mixture(&mut rng, 10);
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn tape_mixture_density_matches_scalar_and_finite_differences() {
    let mut rng = RngStream::new(8, 1);
    let k = 4;
    let m = random_mixture(&mut rng, k);
    let logits = Tensor::new(vec![1, k, 1], m.logits.clone()).unwrap();
    let mus = Tensor::new(vec![1, k, 1], m.mus.clone()).unwrap();
    let log_ss = Tensor::new(vec![1, k, 1], m.log_ss.clone()).unwrap();
    let eval = |x0: f64, grad: bool| {
        let mut g = Graph::new();
        let x = if grad {
            g.input(Tensor::full(&[1, 1, 1], x0))
        } else {
            g.constant(Tensor::full(&[1, 1, 1], x0))
        };
        let (l, mu, s) = (
            g.constant(logits.clone()),
            g.constant(mus.clone()),
            g.constant(log_ss.clone()),
        );
        let y = tape::mol_log_density(&mut g, x, l, mu, s, 1).unwrap();
        let v = g.value(y).item();
        let d = grad.then(|| g.backward(y).unwrap().wrt(x).unwrap().item());
        (v, d)
    };
    for x0 in [-0.8, -0.1, 0.35, 0.77] {
        let (v, d) = eval(x0, true);
        assert!((v - mol_log_density(x0, &m)).abs() < 1e-12);
        let fd = central_difference(|x| eval(x, false).0, x0, 1e-5);
        assert!(rel_err(d.unwrap(), fd, 1e-8) < 1e-6, "{} vs {fd}", d.unwrap());
    }
}

#[test]
fn discretized_masses_sum_to_one() {
    let d = DiscretizationSpec::new(8).unwrap();
    let mut rng = RngStream::new(12, 0);
    for _ in 0..20 {
        let m = random_mixture(&mut rng, 10);
        let total: f64 = (0..d.bins())
            .map(|i| discretized_mol_log_prob(d.center(i), &m, &d).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }
}

#[test]
fn discretized_masses_symmetric_about_centre() {
    let d = DiscretizationSpec::new(8).unwrap();
    let m = MixtureOfLogistics::single(lp(0.0, 0.05));
    for i in 0..128 {
        let lo = discretized_mol_log_prob(d.center(i), &m, &d).unwrap();
        let hi = discretized_mol_log_prob(d.center(255 - i), &m, &d).unwrap();
        assert!((lo - hi).abs() < 1e-9 * lo.abs().max(1.0), "bin {i}");
    }
}

#[test]
fn discretized_wide_scale_flattens_interior_bins() {
    // With open-ended edge bins a very wide component does not give 1/256
    // per bin: the edges take the tails. Interior bins do become uniform.
    let d = DiscretizationSpec::new(8).unwrap();
    let m = MixtureOfLogistics::single(lp(0.0, 100.0));
    let masses: Vec<f64> = (0..256)
        .map(|i| discretized_mol_log_prob(d.center(i), &m, &d).unwrap().exp())
        .collect();
    let interior = &masses[1..255];
    let expect = d.bin_width() / (4.0 * 100.0);
    for &v in interior {
        assert!(((v - expect) / expect).abs() < 1e-3);
    }
    assert!((masses[0] - 0.5).abs() < 3e-3 && (masses[255] - 0.5).abs() < 3e-3);
}

#[test]
fn discretized_rejects_off_grid_values() {
    let d = DiscretizationSpec::new(8).unwrap();
    let m = MixtureOfLogistics::single(lp(0.0, 1.0));
    assert!(matches!(
        discretized_mol_log_prob(0.001, &m, &d),
        Err(Error::OffGrid { .. })
    ));
    assert_eq!(d.index_of(d.center(17)).unwrap(), 17);
    assert_eq!(d.center(0), -1.0);
    assert!((d.center(255) - 1.0).abs() < 1e-15);
}

#[test]
fn tape_discretized_matches_scalar() {
    let d = DiscretizationSpec::new(8).unwrap();
    let mut rng = RngStream::new(77, 0);
    let (k, t) = (3, 6);
    let ms: Vec<MixtureOfLogistics> = (0..t).map(|_| random_mixture(&mut rng, k)).collect();
    let pack = |f: &dyn Fn(&MixtureOfLogistics) -> &Vec<f64>| {
        Tensor::from_fn(&[1, k, t], |i| f(&ms[i % t])[i / t])
    };
    let bins = [0usize, 1, 100, 128, 254, 255];
    let x = Tensor::from_fn(&[1, 1, t], |i| d.center(bins[i]));
    let mut g = Graph::new();
    let l = g.constant(pack(&|m| &m.logits));
    let mu = g.constant(pack(&|m| &m.mus));
    let s = g.constant(pack(&|m| &m.log_ss));
    let y = tape::discretized_mol_log_prob(&mut g, &x, l, mu, s, &d).unwrap();
    for i in 0..t {
        let expect = discretized_mol_log_prob(x.data()[i], &ms[i], &d).unwrap();
        assert!((g.value(y).data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn degenerate_scale_sample_returns_location() {
    let m = MixtureOfLogistics::new(vec![0.0], vec![0.42], vec![-30.0]).unwrap();
    let mut rng = RngStream::new(0, 0);
    for _ in 0..100 {
        assert!((mol_sample(&m, &mut rng, None) - 0.42).abs() < 1e-6);
    }
}

#[test]
fn sample_mean_and_component_frequencies() {
    let m = MixtureOfLogistics::new(
        vec![0.0, 0.7, -0.4],
        vec![0.9, 2.5, -1.0],
        vec![0.0, -1.0, 0.5],
    )
    .unwrap();
    let w = m.weights();
    let n = 1_000_000;
    let mut rng = RngStream::new(55, 0);
    let mut counts = [0usize; 3];
    let mut sum = 0.0;
    for _ in 0..n {
        let u = rng.uniform_open();
        let v = rng.uniform_open();
        let mut acc = 0.0;
        let k = w
            .iter()
            .position(|wi| {
                acc += wi;
                u < acc
            })
            .unwrap_or(2);
        counts[k] += 1;
        sum += mol_sample_with(&m, u, v, false);
    }
    let mean = sum / n as f64;
    assert!(rel_err(mean, m.mean(), 0.0) < 0.01, "{mean} vs {}", m.mean());
    for k in 0..3 {
        let freq = counts[k] as f64 / n as f64;
        assert!(rel_err(freq, w[k], 0.0) < 0.01);
    }
}

#[test]
fn sample_is_clamped_with_domain() {
    let m = MixtureOfLogistics::single(lp(0.0, 50.0));
    let d = DiscretizationSpec::new(8).unwrap();
    let mut rng = RngStream::new(3, 3);
    for _ in 0..1000 {
        let x = mol_sample(&m, &mut rng, Some(&d));
        assert!((-1.0..=1.0).contains(&x));
    }
}

proptest! {
    #[test]
    fn log_density_finite_within_500_scales(mu in -5.0f64..5.0, log_s in -7.0f64..3.0, r in -500.0f64..500.0) {
        let p = LogisticParams { mu, log_s };
        let x = mu + r * log_s.exp();
        prop_assert!(logistic_log_density(x, p).unwrap().is_finite());
    }

    #[test]
    fn discretized_normalisation_holds(seed in 0u64..1000, k in 1usize..12) {
        let d = DiscretizationSpec::new(8).unwrap();
        let mut rng = RngStream::new(seed, 99);
        let m = random_mixture(&mut rng, k);
        let total: f64 = (0..d.bins())
            .map(|i| discretized_mol_log_prob(d.center(i), &m, &d).unwrap().exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn log_two_sanity() {
    // log1mexp underpins interior bin masses; at x = ln 2 both branches agree.
    let a = (-(-LN_2).exp_m1()).ln();
    assert!((crate::autodiff::log1mexp(LN_2) - a).abs() < 1e-15);
}
