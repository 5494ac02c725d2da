use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature order of every fusion row and coefficient vector.
pub const FUSION_FEATURES: [&str; 3] = ["idx", "graph", "gnn"];

pub const FUSION_ITERATIONS: usize = 500;
pub const FUSION_LR: f64 = 0.1;
pub const FUSION_L2: f64 = 1e-4;

/// Logistic regression over `[idx_score, graph_score, gnn_score]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub beta0: f64,
    pub beta: [f64; 3],
    pub features: [String; 3],
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl FusionModel {
    pub fn new(beta0: f64, beta: [f64; 3]) -> Self {
        Self {
            beta0,
            beta,
            features: FUSION_FEATURES.map(String::from),
        }
    }

    /// `sigmoid(beta0 + beta . [idx, graph, gnn])`.
    pub fn apply(&self, idx: f32, graph: f32, gnn: f32) -> f32 {
        let z = self.beta0
            + self.beta[0] * f64::from(idx)
            + self.beta[1] * f64::from(graph)
            + self.beta[2] * f64::from(gnn);
        sigmoid(z) as f32
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_slice(&fs::read(path)?)?;
        if model.features != FUSION_FEATURES.map(String::from) {
            return Err(Error::InvalidData(format!(
                "fusion model features {:?} differ from {:?}",
                model.features, FUSION_FEATURES
            )));
        }
        if !model.beta0.is_finite() || model.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidData(
                "fusion model has non-finite coefficients".into(),
            ));
        }
        Ok(model)
    }
}

/// Full-batch gradient descent on mean binary cross-entropy plus an L2
/// penalty on the feature weights (the intercept is not penalized).
///
/// Descent runs on z-scored features so that the fixed iteration budget is
/// not spent fighting feature offsets; the coefficients are mapped back to
/// the raw feature scale. Constant features get weight 0.
pub fn fusion_fit(rows: &[([f32; 3], bool)]) -> Result<FusionModel> {
    let positives = rows.iter().filter(|r| r.1).count();
    if positives == 0 || positives == rows.len() {
        return Err(Error::SingleClassData);
    }
    if rows.iter().any(|(x, _)| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidData("fusion features must be finite".into()));
    }
    let n = rows.len() as f64;
    let mut mean = [0.0f64; 3];
    let mut scale = [0.0f64; 3];
    for j in 0..3 {
        mean[j] = rows.iter().map(|(x, _)| f64::from(x[j])).sum::<f64>() / n;
        let var = rows
            .iter()
            .map(|(x, _)| (f64::from(x[j]) - mean[j]).powi(2))
            .sum::<f64>()
            / n;
        scale[j] = var.sqrt();
    }
    let z: Vec<([f64; 3], f64)> = rows
        .iter()
        .map(|(x, y)| {
            let mut zx = [0.0; 3];
            for j in 0..3 {
                if scale[j] > 1e-12 {
                    zx[j] = (f64::from(x[j]) - mean[j]) / scale[j];
                }
            }
            (zx, if *y { 1.0 } else { 0.0 })
        })
        .collect();
    let mut b0 = 0.0f64;
    let mut b = [0.0f64; 3];
    for _ in 0..FUSION_ITERATIONS {
        let mut g0 = 0.0;
        let mut g = [0.0f64; 3];
        for (x, y) in &z {
            let err = sigmoid(b0 + b[0] * x[0] + b[1] * x[1] + b[2] * x[2]) - y;
            g0 += err;
            for j in 0..3 {
                g[j] += err * x[j];
            }
        }
        b0 -= FUSION_LR * g0 / n;
        for j in 0..3 {
            b[j] -= FUSION_LR * (g[j] / n + 2.0 * FUSION_L2 * b[j]);
        }
    }
    let mut raw = [0.0f64; 3];
    let mut raw0 = b0;
    for j in 0..3 {
        if scale[j] > 1e-12 {
            raw[j] = b[j] / scale[j];
            raw0 -= raw[j] * mean[j];
        }
    }
    Ok(FusionModel::new(raw0, raw))
}
