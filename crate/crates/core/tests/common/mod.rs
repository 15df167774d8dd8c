//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use bsem_core::syntax::{parse_model, render, FormulaSpec, Modifiers, Operator, Term};

use Operator::{Covariance as Cov, Intercept as Int, Loading as Load, Regression as Reg};

pub fn data_path(file: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/data")
        .join(file)
}

pub const POLITICAL_DEMOCRACY: &str = "
  # latent variable definitions
    ind60 =~ x1 + x2 + x3
    dem60 =~ y1 + a*y2 + b*y3 + c*y4
    dem65 =~ y5 + a*y6 + b*y7 + c*y8

  # regressions
    dem60 ~ ind60
    dem65 ~ ind60 + dem60

  # residual correlations
    y1 ~~ y5
    y2 ~~ y4 + y6
    y3 ~~ y7
    y4 ~~ y8
    y6 ~~ y8
";

pub const POLITICAL_DEMOCRACY_DP: [(&str, &str); 4] = [
    ("nu", "dnorm(5,1e-2)"),
    ("itheta", "dlnorm(1,.1)[sd]"),
    ("ipsi", "dlnorm(1,.1)[sd]"),
    ("rho", "dbeta(3,3)"),
];

pub const HOLZINGER: &str = " visual  =~ x1 + x2 + x3
          textual =~ x4 + x5 + x6
          speed   =~ x7 + x8 + x9 ";

pub const ABILITY: &str = "ability =~ abstract + verbal + numerical";
pub const SD_PRIORS: &str = r#"abstract ~~ prior("dunif(0,9)[sd]") * abstract
 verbal ~~ prior("dunif(0,8)[sd]") * verbal
 numerical ~~ prior("dunif(0,7)[sd]") * numerical"#;
pub const FACTOR_SD: &str = r#"ability ~~ prior("dunif(0,4.5)[sd]") * ability"#;
pub const INTERCEPTS: &str = r#"abstract ~ prior("dnorm(9,.25)T(0,18)") * 1
 verbal ~ prior("dnorm(8,.25)T(0,16)") * 1
 numerical ~ prior("dnorm(7,.25)T(0,14)") * 1"#;

pub fn informative_ability() -> String {
    [ABILITY, SD_PRIORS, FACTOR_SD, INTERCEPTS].join("\n")
}

fn t(name: &str) -> Term {
    Term::plain(name)
}

fn labeled(label: &str, name: &str) -> Term {
    Term {
        name: name.into(),
        modifiers: Modifiers {
            label: Some(label.into()),
            ..Default::default()
        },
    }
}

fn with_prior(prior: &str, name: &str) -> Term {
    Term {
        name: name.into(),
        modifiers: Modifiers {
            prior: Some(prior.into()),
            ..Default::default()
        },
    }
}

fn spec(lhs: &str, op: Operator, line: usize, terms: Vec<Term>) -> FormulaSpec {
    FormulaSpec {
        lhs: lhs.into(),
        op,
        terms,
        line,
    }
}

/// Every published model listing with its expected parse.
pub fn listings() -> Vec<(&'static str, String, Vec<FormulaSpec>)> {
    let ability_full = informative_ability();
    vec![
        (
            "visual",
            " visual =~ x1 + x2 + x3 ".into(),
            vec![spec("visual", Load, 1, vec![t("x1"), t("x2"), t("x3")])],
        ),
        (
            "visual with prior",
            r#" visual =~ x1 + prior("dnorm(1,1)")*x2 + x3 "#.into(),
            vec![spec(
                "visual",
                Load,
                1,
                vec![t("x1"), with_prior("dnorm(1,1)", "x2"), t("x3")],
            )],
        ),
        (
            "political democracy",
            POLITICAL_DEMOCRACY.into(),
            vec![
                spec("ind60", Load, 3, vec![t("x1"), t("x2"), t("x3")]),
                spec(
                    "dem60",
                    Load,
                    4,
                    vec![
                        t("y1"),
                        labeled("a", "y2"),
                        labeled("b", "y3"),
                        labeled("c", "y4"),
                    ],
                ),
                spec(
                    "dem65",
                    Load,
                    5,
                    vec![
                        t("y5"),
                        labeled("a", "y6"),
                        labeled("b", "y7"),
                        labeled("c", "y8"),
                    ],
                ),
                spec("dem60", Reg, 8, vec![t("ind60")]),
                spec("dem65", Reg, 9, vec![t("ind60"), t("dem60")]),
                spec("y1", Cov, 12, vec![t("y5")]),
                spec("y2", Cov, 13, vec![t("y4"), t("y6")]),
                spec("y3", Cov, 14, vec![t("y7")]),
                spec("y4", Cov, 15, vec![t("y8")]),
                spec("y6", Cov, 16, vec![t("y8")]),
            ],
        ),
        (
            "holzinger",
            HOLZINGER.into(),
            vec![
                spec("visual", Load, 1, vec![t("x1"), t("x2"), t("x3")]),
                spec("textual", Load, 2, vec![t("x4"), t("x5"), t("x6")]),
                spec("speed", Load, 3, vec![t("x7"), t("x8"), t("x9")]),
            ],
        ),
        (
            "ability",
            ABILITY.into(),
            vec![spec(
                "ability",
                Load,
                1,
                vec![t("abstract"), t("verbal"), t("numerical")],
            )],
        ),
        (
            "ability sd priors",
            SD_PRIORS.into(),
            vec![
                spec(
                    "abstract",
                    Cov,
                    1,
                    vec![with_prior("dunif(0,9)[sd]", "abstract")],
                ),
                spec(
                    "verbal",
                    Cov,
                    2,
                    vec![with_prior("dunif(0,8)[sd]", "verbal")],
                ),
                spec(
                    "numerical",
                    Cov,
                    3,
                    vec![with_prior("dunif(0,7)[sd]", "numerical")],
                ),
            ],
        ),
        (
            "ability factor sd",
            FACTOR_SD.into(),
            vec![spec(
                "ability",
                Cov,
                1,
                vec![with_prior("dunif(0,4.5)[sd]", "ability")],
            )],
        ),
        (
            "ability intercepts",
            INTERCEPTS.into(),
            vec![
                spec(
                    "abstract",
                    Int,
                    1,
                    vec![with_prior("dnorm(9,.25)T(0,18)", "1")],
                ),
                spec(
                    "verbal",
                    Int,
                    2,
                    vec![with_prior("dnorm(8,.25)T(0,16)", "1")],
                ),
                spec(
                    "numerical",
                    Int,
                    3,
                    vec![with_prior("dnorm(7,.25)T(0,14)", "1")],
                ),
            ],
        ),
        (
            "ability combined",
            ability_full,
            vec![
                spec(
                    "ability",
                    Load,
                    1,
                    vec![t("abstract"), t("verbal"), t("numerical")],
                ),
                spec(
                    "abstract",
                    Cov,
                    2,
                    vec![with_prior("dunif(0,9)[sd]", "abstract")],
                ),
                spec(
                    "verbal",
                    Cov,
                    3,
                    vec![with_prior("dunif(0,8)[sd]", "verbal")],
                ),
                spec(
                    "numerical",
                    Cov,
                    4,
                    vec![with_prior("dunif(0,7)[sd]", "numerical")],
                ),
                spec(
                    "ability",
                    Cov,
                    5,
                    vec![with_prior("dunif(0,4.5)[sd]", "ability")],
                ),
                spec(
                    "abstract",
                    Int,
                    6,
                    vec![with_prior("dnorm(9,.25)T(0,18)", "1")],
                ),
                spec(
                    "verbal",
                    Int,
                    7,
                    vec![with_prior("dnorm(8,.25)T(0,16)", "1")],
                ),
                spec(
                    "numerical",
                    Int,
                    8,
                    vec![with_prior("dnorm(7,.25)T(0,14)", "1")],
                ),
            ],
        ),
    ]
}

/// Parses against the fixture and checks render/parse stability. Returns a
/// description of the first mismatch.
pub fn golden_check(text: &str, expected: &[FormulaSpec]) -> Result<(), String> {
    let got = parse_model(text).map_err(|e| e.to_string())?;
    if got != expected {
        return Err(format!("parsed {got:?}"));
    }
    let once = render(&got);
    let again = parse_model(&once).map_err(|e| format!("re-parse: {e}"))?;
    if render(&again) != once {
        return Err("render is not a fixed point".into());
    }
    let strip = |v: &[FormulaSpec]| {
        v.iter()
            .map(|s| (s.lhs.clone(), s.op, s.terms.clone()))
            .collect::<Vec<_>>()
    };
    if strip(&again) != strip(&got) {
        return Err("re-parsed specs differ".into());
    }
    Ok(())
}
