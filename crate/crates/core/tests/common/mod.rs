#![allow(dead_code)]

use proptest::prelude::*;
use wonham::{GeneratorMatrix, Model, ModelPair, ObservationMap, SimplexPoint};

pub fn generator(rows: &[&[f64]]) -> GeneratorMatrix {
    GeneratorMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Symmetric two-state chain, `h = (0, 1)`, `ν = (0.5, 0.5)`.
pub fn reference() -> Model {
    Model::new(
        SimplexPoint::new(vec![0.5, 0.5]).unwrap(),
        generator(&[&[-1.0, 1.0], &[1.0, -1.0]]),
        ObservationMap::new(vec![0.0, 1.0]).unwrap(),
    )
    .unwrap()
}

pub fn three_state() -> Model {
    Model::new(
        SimplexPoint::new(vec![0.2, 0.3, 0.5]).unwrap(),
        generator(&[&[-1.0, 0.6, 0.4], &[0.5, -1.5, 1.0], &[0.3, 0.7, -1.0]]),
        ObservationMap::new(vec![-1.0, 0.0, 1.5]).unwrap(),
    )
    .unwrap()
}

/// Every component of the reference model moved by about 10%.
pub fn perturbed_reference() -> ModelPair {
    let mut approx = reference();
    approx.initial = SimplexPoint::new(vec![0.55, 0.45]).unwrap();
    approx.generator = generator(&[&[-1.1, 1.1], &[0.9, -0.9]]);
    approx.levels = ObservationMap::new(vec![0.05, 1.05]).unwrap();
    ModelPair::new(reference(), approx).unwrap()
}

fn rates(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.3f64..2.5, d * (d - 1))
}

pub fn arb_generator(d: usize) -> impl Strategy<Value = GeneratorMatrix> {
    rates(d).prop_map(move |off| {
        let mut rows = vec![vec![0.0; d]; d];
        let mut it = off.into_iter();
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, entry) in row.iter_mut().enumerate() {
                if i != j {
                    *entry = it.next().unwrap();
                }
            }
            row[i] = -row.iter().sum::<f64>();
        }
        GeneratorMatrix::from_rows(&rows).unwrap()
    })
}

pub fn arb_law(d: usize) -> impl Strategy<Value = SimplexPoint> {
    prop::collection::vec(0.05f64..1.0, d).prop_map(|w| {
        let s: f64 = w.iter().sum();
        SimplexPoint::new(w.iter().map(|x| x / s).collect()).unwrap()
    })
}

pub fn arb_model(d: usize) -> impl Strategy<Value = Model> {
    (arb_law(d), arb_generator(d), prop::collection::vec(-1.5f64..1.5, d))
        .prop_map(|(initial, generator, levels)| Model::new(initial, generator, ObservationMap::new(levels).unwrap()).unwrap())
}

pub fn arb_model_2_or_3() -> impl Strategy<Value = Model> {
    prop_oneof![arb_model(2), arb_model(3)]
}
