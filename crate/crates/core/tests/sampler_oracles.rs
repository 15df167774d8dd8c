use std::collections::BTreeSet;

use bsem_core::data::{load_csv, Dataset};
use bsem_core::diagnostics::{ess, posterior_mean};
use bsem_core::expansion::Parameterization;
use bsem_core::model::{build_table, ParameterTable};
use bsem_core::priors::default_priors;
use bsem_core::sampler::{
    compile, draw_latents, initial_values, run, Chain, DrawStore, Inits, Plan, SamplerConfig,
};
use bsem_core::syntax::parse_model;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn setup(
    model: &str,
    names: &[&str],
    y: DMatrix<f64>,
    dp: &[(&str, &str)],
    cp: Parameterization,
) -> (ParameterTable, Plan, Vec<DMatrix<f64>>) {
    let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    let d = Dataset::from_matrix(names.clone(), y);
    let specs = parse_model(model).unwrap();
    let t = build_table(&specs, &names, &d.group_info(), &BTreeSet::new()).unwrap();
    let plan = compile(&t, &default_priors(dp).unwrap(), cp).unwrap();
    let data = d.group_matrices(&t.manifest).unwrap();
    (t, plan, data)
}

fn index(plan: &Plan, name: &str) -> usize {
    plan.names
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("no parameter {name} in {:?}", plan.names))
}

fn chains_of(d: &DrawStore, k: usize) -> Vec<Vec<f64>> {
    (0..d.n_chains()).map(|c| d.param(c, k)).collect()
}

/// Pooled mean and its Monte Carlo standard error.
fn mean_mcse(chains: &[Vec<f64>]) -> (f64, f64) {
    let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
    let pooled: Vec<f64> = chains.concat();
    let m = posterior_mean(&pooled);
    let v = pooled.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (pooled.len() - 1) as f64;
    (m, (v / ess(&refs).ess).sqrt())
}

/// Pooled variance and the MCSE of the mean squared deviation.
fn var_mcse(chains: &[Vec<f64>]) -> (f64, f64) {
    let m = posterior_mean(&chains.concat());
    let sq: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|x| (x - m).powi(2)).collect())
        .collect();
    mean_mcse(&sq)
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn cfg(seed: u64, sample: usize) -> SamplerConfig {
    SamplerConfig {
        seed,
        adapt: 500,
        burnin: 1000,
        sample,
        ..Default::default()
    }
}

#[test]
fn normal_mean_with_known_variance() {
    let y: Vec<f64> = normals(20, 11).iter().map(|e| 2.0 + e).collect();
    let (t, plan, data) = setup(
        "y ~ 1\ny ~~ 1*y",
        &["y"],
        DMatrix::from_column_slice(20, 1, &y),
        &[("nu", "dnorm(1,0.5)")],
        Parameterization::Srs,
    );
    assert_eq!(plan.n_free, 1);
    let out = run(&t, &plan, &data, &cfg(3, 10_000)).unwrap();
    let prec = 0.5 + 20.0;
    let mean = (0.5 * 1.0 + y.iter().sum::<f64>()) / prec;
    let ch = chains_of(&out.draws, 0);
    let (m, se) = mean_mcse(&ch);
    assert!(
        (m - mean).abs() < 3.0 * se,
        "mean {m} vs {mean} (mcse {se})"
    );
    let (v, se) = var_mcse(&ch);
    assert!(
        (v - 1.0 / prec).abs() < 3.0 * se,
        "var {v} vs {} (mcse {se})",
        1.0 / prec
    );
}

#[test]
fn precision_gamma_update() {
    // gamma(1, .5) on the precision, ten residuals with sum of squares 8
    let raw = normals(10, 12);
    let ss: f64 = raw.iter().map(|v| v * v).sum();
    let y: Vec<f64> = raw.iter().map(|v| v * (8.0 / ss).sqrt()).collect();
    let (t, plan, data) = setup(
        "y ~ 0*1\ny ~~ y",
        &["y"],
        DMatrix::from_column_slice(10, 1, &y),
        &[],
        Parameterization::Srs,
    );
    assert_eq!(plan.priors[0].source, "dgamma(1,.5)");
    let out = run(&t, &plan, &data, &cfg(4, 20_000)).unwrap();
    // precision ~ gamma(6, 4.5) so the variance is inverse-gamma(6, 4.5)
    let (a, b) = (6.0, 4.5);
    let ch = chains_of(&out.draws, 0);
    let (m, se) = mean_mcse(&ch);
    assert!((m - b / (a - 1.0)).abs() < 3.0 * se, "mean {m} (mcse {se})");
    let exact_var = b * b / ((a - 1.0) * (a - 1.0) * (a - 2.0));
    let (v, se) = var_mcse(&ch);
    assert!(
        (v - exact_var).abs() < 3.0 * se,
        "var {v} vs {exact_var} (mcse {se})"
    );
    let precision: Vec<Vec<f64>> = ch
        .iter()
        .map(|c| c.iter().map(|v| 1.0 / v).collect())
        .collect();
    let (pm, se) = mean_mcse(&precision);
    assert!(
        (pm - a / b).abs() < 3.0 * se,
        "precision mean {pm} (mcse {se})"
    );
}

fn latent_moments(
    model: &str,
    names: &[&str],
    y: DMatrix<f64>,
    theta0: impl Fn(&Plan) -> Vec<f64>,
    col: usize,
) -> (f64, f64) {
    let (t, plan, data) = setup(model, names, y, &[], Parameterization::Srs);
    let th = theta0(&plan);
    let mut chain = Chain::new(&t, &plan, &data, &th, ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut u = chain.u[0].clone();
    draw_latents(&chain.works[0], &plan, 0, &data[0], &mut u, &mut chain.rng).unwrap();
    let x: Vec<f64> = u.column(col).iter().copied().collect();
    let m = posterior_mean(&x);
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    (m, v)
}

const N_IID: usize = 200_000;

#[test]
fn single_indicator_latent_conditional() {
    let y = DMatrix::from_element(N_IID, 1, 2.0);
    let (m, v) = latent_moments(
        "f =~ 1*y\nf ~~ 1*f\ny ~~ 1*y\ny ~ 0*1",
        &["y"],
        y,
        |_| Vec::new(),
        0,
    );
    let se = (0.5 / N_IID as f64).sqrt();
    assert!((m - 1.0).abs() < 4.0 * se, "{m}");
    assert!(
        (v - 0.5).abs() < 4.0 * 0.5 * (2.0 / N_IID as f64).sqrt(),
        "{v}"
    );
}

#[test]
fn zero_loading_latent_is_its_prior() {
    let y = DMatrix::from_column_slice(N_IID, 1, &normals(N_IID, 13));
    let (m, v) = latent_moments(
        "f =~ 0*y\nf ~~ 2*f\ny ~~ 1*y\ny ~ 0*1",
        &["y"],
        y,
        |_| Vec::new(),
        0,
    );
    assert!(m.abs() < 4.0 * (2.0 / N_IID as f64).sqrt(), "{m}");
    assert!(
        (v - 2.0).abs() < 4.0 * 2.0 * (2.0 / N_IID as f64).sqrt(),
        "{v}"
    );
}

#[test]
fn phantom_with_zero_correlation_is_standard_normal() {
    let mut y = DMatrix::zeros(N_IID, 2);
    for (i, e) in normals(2 * N_IID, 14).iter().enumerate() {
        y[(i / 2, i % 2)] = *e;
    }
    let (m, v) = latent_moments(
        "y1 ~~ y2",
        &["y1", "y2"],
        y,
        |plan| {
            let mut th = vec![0.0; plan.n_free];
            th[index(plan, "y1~~y1")] = 1.0;
            th[index(plan, "y2~~y2")] = 1.5;
            th
        },
        0,
    );
    assert!(m.abs() < 4.0 / (N_IID as f64).sqrt(), "{m}");
    assert!((v - 1.0).abs() < 4.0 * (2.0 / N_IID as f64).sqrt(), "{v}");
}

fn one_factor_data(n: usize, seed: u64) -> DMatrix<f64> {
    let z = normals(5 * n, seed);
    let lam = [1.0, 0.8, 1.2, 0.9];
    DMatrix::from_fn(n, 4, |i, j| {
        3.0 + lam[j] * z[5 * i] + 0.6 * z[5 * i + 1 + j]
    })
}

const ONE_FACTOR: &str = "f =~ y1 + y2 + y3 + y4";
const Y4: [&str; 4] = ["y1", "y2", "y3", "y4"];

#[test]
fn adaptation_is_frozen_after_the_adapt_phase() {
    let (t, plan, data) = setup(
        ONE_FACTOR,
        &Y4,
        one_factor_data(100, 15),
        &[],
        Parameterization::Srs,
    );
    assert!(plan.n_mh > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let th = initial_values(&Inits::Simple, &t, &plan, &data, 0, &mut rng).unwrap();
    let mut chain = Chain::new(&t, &plan, &data, &th, rng).unwrap();
    for _ in 0..300 {
        chain.iterate(&plan, &data, true).unwrap();
    }
    let scales: Vec<u64> = chain.mh.iter().map(|s| s.log_scale.to_bits()).collect();
    let tries: Vec<u64> = chain.mh.iter().map(|s| s.tries).collect();
    for _ in 0..300 {
        chain.iterate(&plan, &data, false).unwrap();
    }
    let after: Vec<u64> = chain.mh.iter().map(|s| s.log_scale.to_bits()).collect();
    assert_eq!(scales, after);
    // conjugate variance updates keep an idle slot; the rest keep proposing
    assert!(
        chain
            .mh
            .iter()
            .zip(&tries)
            .filter(|(s, t)| s.tries > **t)
            .count()
            >= plan.n_mh / 2
    );
}

#[test]
fn empty_data_recovers_the_prior() {
    let dp = [
        ("nu", "dnorm(2,1)"),
        ("lambda", "dnorm(1,4)"),
        ("itheta", "dgamma(6,5)"),
        ("ipsi", "dgamma(6,5)"),
    ];
    let (t, plan, data) = setup(
        ONE_FACTOR,
        &Y4,
        DMatrix::zeros(0, 4),
        &dp,
        Parameterization::Srs,
    );
    let out = run(&t, &plan, &data, &cfg(7, 20_000)).unwrap();
    for k in 0..plan.n_free {
        let expected = match plan.kinds[k] {
            bsem_core::model::ParamKind::ManifestIntercept => 2.0,
            bsem_core::model::ParamKind::Loading => 1.0,
            // inverse-gamma(6, 5) variance
            _ => 1.0,
        };
        let (m, se) = mean_mcse(&chains_of(&out.draws, k));
        assert!(
            (m - expected).abs() < 3.0 * se,
            "{}: {m} vs {expected} (mcse {se})",
            plan.names[k]
        );
    }
}

/// The two parameterizations put different priors on the same covariance
/// matrix, so their posteriors differ by a prior-induced O(1/n) shift on top
/// of Monte Carlo noise. The comparison allows 3 combined MCSE plus a tenth
/// of a posterior standard deviation.
#[test]
fn srs_and_fa_agree() {
    // residual covariance of y1 and y2 well away from zero
    let mut y = one_factor_data(1000, 16);
    let shared = normals(1000, 19);
    for i in 0..1000 {
        y[(i, 0)] += 0.5 * shared[i];
        y[(i, 1)] += 0.5 * shared[i];
    }
    let model = format!("{ONE_FACTOR}\ny1 ~~ y2");
    let mut fits = Vec::new();
    for cp in [Parameterization::Srs, Parameterization::Fa] {
        let (t, plan, data) = setup(&model, &Y4, y.clone(), &[], cp);
        let out = run(&t, &plan, &data, &cfg(8, 10_000)).unwrap();
        fits.push(
            (0..plan.n_free)
                .map(|k| {
                    let ch = chains_of(&out.draws, k);
                    let sd = var_mcse(&ch).0.sqrt();
                    (plan.names[k].clone(), mean_mcse(&ch), sd)
                })
                .collect::<Vec<_>>(),
        );
    }
    for ((name, (a, sa), sd), (_, (b, sb), _)) in fits[0].iter().zip(&fits[1]) {
        let se = (sa * sa + sb * sb).sqrt();
        assert!(
            (a - b).abs() < 3.0 * se + 0.1 * sd,
            "{name}: srs {a} fa {b} (combined mcse {se}, sd {sd})"
        );
    }
}

#[test]
fn serial_and_threaded_chains_match() {
    let (t, plan, data) = setup(
        &format!("{ONE_FACTOR}\ny1 ~~ y2"),
        &Y4,
        one_factor_data(80, 17),
        &[],
        Parameterization::Srs,
    );
    let mut c = cfg(9, 500);
    c.threads = true;
    let a = run(&t, &plan, &data, &c).unwrap();
    c.threads = false;
    let b = run(&t, &plan, &data, &c).unwrap();
    assert_eq!(a.draws, b.draws);
    assert_eq!(a.draws.n_chains(), 3);
    assert_eq!(a.draws.n_iter, 500);
    assert_eq!(a.draws.n_params(), plan.n_free);
}

#[test]
fn all_fixed_model_returns_empty_store() {
    let (t, plan, data) = setup(
        "f =~ 1*y\nf ~~ 1*f\ny ~~ 1*y\ny ~ 0*1",
        &["y"],
        DMatrix::from_element(5, 1, 1.0),
        &[],
        Parameterization::Srs,
    );
    let out = run(&t, &plan, &data, &cfg(1, 100)).unwrap();
    assert_eq!(out.draws.n_params(), 0);
    assert!(out.report.converged);
}

fn hs_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/holzinger_swineford.csv")
}

#[test]
fn simple_inits_use_sample_moments() {
    let req: Vec<String> = ["x1", "x2", "x3"].iter().map(|s| s.to_string()).collect();
    let d = load_csv(&hs_path(), None, Some(&req)).unwrap();
    let specs = parse_model("visual =~ x1 + x2 + x3").unwrap();
    let t = build_table(&specs, &d.names, &d.group_info(), &BTreeSet::new()).unwrap();
    let plan = compile(
        &t,
        &default_priors::<&str>(&[]).unwrap(),
        Parameterization::Srs,
    )
    .unwrap();
    let data = d.group_matrices(&t.manifest).unwrap();
    let th = initial_values(
        &Inits::Simple,
        &t,
        &plan,
        &data,
        0,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let x1: Vec<f64> = data[0].column(0).iter().copied().collect();
    let mean = posterior_mean(&x1);
    let var = x1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x1.len() - 1) as f64;
    let nu = th[index(&plan, "x1~1")];
    let theta = th[index(&plan, "x1~~x1")];
    assert!((nu - mean).abs() < 1e-12);
    assert!((theta - var / 2.0).abs() < 1e-12);
    assert_eq!(format!("{nu:.2}"), "4.94");
    assert_eq!(format!("{theta:.2}"), "0.68");
}

#[test]
fn prior_inits_respect_bounds_and_seeds() {
    let y = one_factor_data(50, 18);
    let (t, plan, data) = setup(
        ONE_FACTOR,
        &Y4,
        y,
        &[("lambda", "dunif(0,1)")],
        Parameterization::Srs,
    );
    let draw = |seed: u64| -> Vec<Vec<f64>> {
        (0..3)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64 + 1);
                initial_values(&Inits::Prior, &t, &plan, &data, c, &mut rng).unwrap()
            })
            .collect()
    };
    let a = draw(21);
    assert_eq!(a, draw(21));
    assert!(a[0] != a[1] && a[1] != a[2] && a[0] != a[2]);
    for v in &a {
        for k in (0..plan.n_free).filter(|&k| plan.kinds[k] == bsem_core::model::ParamKind::Loading)
        {
            assert!(v[k] > 0.5 && v[k] < 1.0, "{}", v[k]);
        }
    }
}
