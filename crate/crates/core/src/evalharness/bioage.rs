//! Two-stage biological age: cross-validated ridge on embeddings, then
//! orthogonalization against chronological age.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::stats::{ols, predict_linear, ridge};
use crate::error::{Error, Result};

pub const BIOAGE_ALPHA: f64 = 1000.0;
pub const BIOAGE_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct BioAge {
    /// Out-of-fold ridge predictions.
    pub predicted: Vec<f64>,
    /// Residuals of `predicted` after regressing out chronological age.
    pub acceleration: Vec<f64>,
    /// Out-of-fold coefficient of determination.
    pub r2: f64,
}

pub fn bioage(embeddings: &[Vec<f64>], ages: &[f64], alpha: f64, folds: usize, seed: u64) -> Result<BioAge> {
    let n = ages.len();
    if embeddings.len() != n {
        return Err(Error::ShapeMismatch {
            op: "bioage",
            left: vec![embeddings.len()],
            right: vec![n],
        });
    }
    if n < 10 {
        return Err(Error::InsufficientData(format!("biological age needs n >= 10, got {n}")));
    }
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!("{folds} folds for {n} samples")));
    }
    if ages.iter().all(|&a| a == ages[0]) {
        return Err(Error::InsufficientData("chronological ages are constant".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        fold_of[i] = rank % folds;
    }
    let mut predicted = vec![0.0; n];
    for f in 0..folds {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for i in (0..n).filter(|&i| fold_of[i] != f) {
            x.push(embeddings[i].clone());
            y.push(ages[i]);
        }
        let coef = ridge(&x, &y, alpha)?;
        for i in (0..n).filter(|&i| fold_of[i] == f) {
            predicted[i] = predict_linear(&coef, &embeddings[i]);
        }
    }
    let age_feat: Vec<Vec<f64>> = ages.iter().map(|&a| vec![a]).collect();
    let fit = ols(&age_feat, &predicted)?;
    let acceleration = predicted.iter().zip(ages).map(|(p, &a)| p - predict_linear(&fit, &[a])).collect();
    let mean_age = ages.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = ages.iter().map(|a| (a - mean_age).powi(2)).sum();
    let ss_res: f64 = predicted.iter().zip(ages).map(|(p, a)| (p - a).powi(2)).sum();
    Ok(BioAge {
        predicted,
        acceleration,
        r2: 1.0 - ss_res / ss_tot,
    })
}
