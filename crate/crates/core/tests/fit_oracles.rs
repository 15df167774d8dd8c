mod common;

use std::collections::BTreeSet;

use bsem_core::data::Dataset;
use bsem_core::expansion::Parameterization;
use bsem_core::fit::{self, ppp, FitOptions};
use bsem_core::model::build_table;
use bsem_core::priors::default_priors;
use bsem_core::run::{fit as fit_run, FitConfig, ModelSource};
use bsem_core::sampler::{compile, run, SamplerConfig};
use bsem_core::syntax::parse_model;
use common::*;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One-factor data: y_j = nu_j + lambda_j f + e_j.
fn one_factor_data(n: usize, seed: u64) -> DMatrix<f64> {
    let (nu, lambda, theta) = (
        [3.0, 5.0, 4.0, 2.0],
        [1.0, 0.8, 1.2, 0.7],
        [0.5f64, 0.6, 0.4, 0.7],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = DMatrix::zeros(n, 4);
    for i in 0..n {
        let f: f64 = StandardNormal.sample(&mut rng);
        for j in 0..4 {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[(i, j)] = nu[j] + lambda[j] * f + theta[j].sqrt() * e;
        }
    }
    y
}

#[test]
fn ppp_is_central_when_the_model_generated_the_data() {
    let names: Vec<String> = (1..=4).map(|j| format!("y{j}")).collect();
    let specs = parse_model("f =~ y1 + y2 + y3 + y4").unwrap();
    let mut total = 0.0;
    let reps = 4;
    for r in 0..reps {
        let d = Dataset::from_matrix(names.clone(), one_factor_data(200, 100 + r));
        let table = build_table(&specs, &names, &d.group_info(), &BTreeSet::new()).unwrap();
        let plan = compile(
            &table,
            &default_priors::<&str>(&[]).unwrap(),
            Parameterization::Srs,
        )
        .unwrap();
        let data = d.group_matrices(&table.manifest).unwrap();
        let cfg = SamplerConfig {
            seed: r,
            adapt: 500,
            burnin: 1000,
            sample: 1000,
            ..Default::default()
        };
        let out = run(&table, &plan, &data, &cfg).unwrap();
        let p = ppp(
            &table,
            &out.draws,
            &data,
            1000,
            &mut ChaCha8Rng::seed_from_u64(r),
        )
        .unwrap();
        println!("replicate {r}: ppp {p:.3}");
        assert!((0.02..=0.98).contains(&p));
        total += p;
    }
    let mean = total / reps as f64;
    assert!((0.25..=0.75).contains(&mean), "mean ppp {mean}");
}

#[test]
fn political_democracy_effective_parameters() {
    let mut cfg = FitConfig::new(ModelSource::Syntax(POLITICAL_DEMOCRACY.into()));
    cfg.dp = POLITICAL_DEMOCRACY_DP
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let r = fit_run(&cfg, &data_path("political_democracy.csv")).unwrap();
    let m = &r.measures;
    println!("{}", m.to_text());
    assert!((m.p_dic - 36.667).abs() < 3.0, "p_dic {}", m.p_dic);
    assert!(
        (m.p_waic.unwrap() - 38.184).abs() < 3.0,
        "p_waic {:?}",
        m.p_waic
    );
    assert!(
        (m.p_loo.unwrap() - 38.484).abs() < 3.0,
        "p_loo {:?}",
        m.p_loo
    );
    // loadings shared through labels report a single value
    let row = |n: &str| r.summary.iter().find(|s| s.name == n).unwrap().post_mean;
    assert_eq!(row("dem60=~y2"), row("dem65=~y6"));
}

#[test]
fn holzinger_free_marginal_likelihood() {
    let mut cfg = FitConfig::new(ModelSource::Syntax(HOLZINGER.into()));
    cfg.group = Some("school".into());
    cfg.fit = FitOptions {
        ppp_replicates: 100,
        ..cfg.fit
    };
    let r = fit_run(&cfg, &data_path("holzinger_swineford.csv")).unwrap();
    let ml = r
        .measures
        .margloglik
        .expect("laplace approximation available");
    assert!((ml + 3937.715).abs() < 5.0, "margloglik {ml}");
    assert!(r.measures.ppp.unwrap() < 0.05);
    assert_eq!(fit::bic(r.measures.logl, 60, 301), r.measures.bic);
}
