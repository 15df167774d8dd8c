mod common;

use bsem_core::syntax::parse_model;
use common::{golden_check, listings};

fn listing(name: &str) {
    let (_, text, expected) = listings().into_iter().find(|l| l.0 == name).unwrap();
    if let Err(e) = golden_check(&text, &expected) {
        panic!("{name}: {e}\n{text}");
    }
}

#[test]
fn one_factor_visual() {
    listing("visual");
}

#[test]
fn loading_with_inline_prior() {
    listing("visual with prior");
}

#[test]
fn political_democracy() {
    listing("political democracy");
}

#[test]
fn holzinger_three_factor() {
    listing("holzinger");
}

#[test]
fn ability_pieces() {
    for name in [
        "ability",
        "ability sd priors",
        "ability factor sd",
        "ability intercepts",
    ] {
        listing(name);
    }
}

#[test]
fn ability_concatenated() {
    listing("ability combined");
}

#[test]
fn every_listing_is_covered() {
    assert_eq!(listings().len(), 9);
}

#[test]
fn render_is_stable_for_modifier_mixes() {
    let text = r#"f =~ 1*x1 + start(0.8)*x2 + lab*x3 + prior("dnorm(0,1)")*x4
f ~~ 0.5*f
x1 ~ 2*1"#;
    let got = parse_model(text).unwrap();
    golden_check(text, &got).unwrap();
}
