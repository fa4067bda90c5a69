//! Helpers shared between integration-test targets.
#![allow(dead_code)]

use ivpt_core::data::Sample;
use ivpt_core::model::Model;
use ivpt_core::tape::Tape;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn model_loss(model: &Model, batch: &[&Sample]) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let (loss, _) = model.batch_loss(&mut tape, &bound, batch).unwrap();
    tape.value(loss)[0]
}

pub fn perturbed(model: &Model, name: &str, coord: usize, delta: f64) -> Model {
    let mut m = model.clone();
    m.visit_trainable_mut(|n, t| {
        if n == name {
            t.values_mut()[coord] += delta;
        }
    });
    m
}

/// Central-difference check of every trainable coordinate against the
/// collected analytic gradients. Returns (worst relative error, the names of
/// the checked parameter tensors).
pub fn fd_check_model(model: &Model, batch: &[&Sample], h: f64) -> (f64, Vec<String>) {
    let mut model = model.clone();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let (loss, _) = model.batch_loss(&mut tape, &bound, batch).unwrap();
    tape.backward(loss).unwrap();
    model.collect_grads(&tape, &bound);

    let mut names = Vec::new();
    let mut grads: Vec<Vec<f64>> = Vec::new();
    model.clone().visit_trainable_mut(|name, t| {
        names.push(name);
        grads.push(t.grad().unwrap().to_vec());
    });

    let mut worst = 0.0f64;
    for (name, analytic) in names.iter().zip(grads.iter()) {
        for coord in 0..analytic.len() {
            let plus = model_loss(&perturbed(&model, name, coord, h), batch);
            let minus = model_loss(&perturbed(&model, name, coord, -h), batch);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[coord], numeric));
        }
    }
    (worst, names)
}
