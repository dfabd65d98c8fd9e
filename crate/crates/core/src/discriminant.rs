//! Gaussian discriminant baselines on the 2-D mean trace value.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sim::{Level, NUM_LEVELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DiscriminantKind {
    Lda,
    Qda,
}

pub type Cov2 = [[f64; 2]; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub level: Level,
    pub mean: [f64; 2],
    /// Regularized covariance (shared by all classes for LDA).
    pub cov: Cov2,
    pub prior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminantModel {
    pub kind: DiscriminantKind,
    pub qubit_index: usize,
    /// Classes seen in training, ascending level.
    pub classes: Vec<ClassGaussian>,
}

fn det(c: &Cov2) -> f64 {
    c[0][0] * c[1][1] - c[0][1] * c[1][0]
}

/// Add `λI` with `λ = 1e-6·trace/2`, then require positive definiteness.
fn regularize(mut c: Cov2) -> Result<Cov2> {
    let lambda = 1e-6 * (c[0][0] + c[1][1]) / 2.0;
    c[0][0] += lambda;
    c[1][1] += lambda;
    if !(c[0][0] > 0.0 && det(&c) > 0.0) || c.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("covariance {c:?} is singular after regularization")));
    }
    Ok(c)
}

fn scatter(points: &[[f64; 2]], mean: &[f64; 2]) -> Cov2 {
    let mut s = [[0.0; 2]; 2];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += d[i] * d[j];
            }
        }
    }
    s
}

pub fn train_discriminant(kind: DiscriminantKind, qubit_index: usize, mtvs: &[Complex64], labels: &[Level]) -> Result<DiscriminantModel> {
    if mtvs.len() != labels.len() {
        return Err(invalid("point and label counts differ"));
    }
    if mtvs.iter().any(|p| !p.re.is_finite() || !p.im.is_finite()) {
        return Err(invalid("non-finite MTV point"));
    }
    let mut groups: Vec<(Level, Vec<[f64; 2]>)> = Vec::new();
    for level in 0..NUM_LEVELS as Level {
        let pts: Vec<[f64; 2]> = mtvs.iter().zip(labels).filter(|(_, &l)| l == level).map(|(p, _)| [p.re, p.im]).collect();
        match pts.len() {
            0 => {}
            1 => return Err(Error::Data(format!("qubit {qubit_index}: level {level} has a single sample"))),
            _ => groups.push((level, pts)),
        }
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_LEVELS) {
        return Err(invalid(format!("label {bad} outside 0..=2")));
    }
    if groups.len() < 2 {
        return Err(Error::Data(format!("qubit {qubit_index}: need at least two classes")));
    }
    let total = mtvs.len() as f64;
    let means: Vec<[f64; 2]> = groups
        .iter()
        .map(|(_, pts)| {
            let n = pts.len() as f64;
            [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n]
        })
        .collect();
    let pooled = match kind {
        DiscriminantKind::Lda => {
            let mut s = [[0.0; 2]; 2];
            for ((_, pts), m) in groups.iter().zip(&means) {
                let sc = scatter(pts, m);
                for i in 0..2 {
                    for j in 0..2 {
                        s[i][j] += sc[i][j];
                    }
                }
            }
            let dof = total - groups.len() as f64;
            Some(regularize(s.map(|r| r.map(|v| v / dof)))?)
        }
        DiscriminantKind::Qda => None,
    };
    let classes = groups
        .iter()
        .zip(&means)
        .map(|((level, pts), m)| {
            let cov = match pooled {
                Some(c) => c,
                None => regularize(scatter(pts, m).map(|r| r.map(|v| v / (pts.len() as f64 - 1.0))))?,
            };
            Ok(ClassGaussian { level: *level, mean: *m, cov, prior: pts.len() as f64 / total })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscriminantModel { kind, qubit_index, classes })
}

impl ClassGaussian {
    /// Gaussian log-likelihood plus log prior, constants shared by all classes dropped.
    pub fn score(&self, x: [f64; 2]) -> f64 {
        let c = &self.cov;
        let d = det(c);
        let dx = [x[0] - self.mean[0], x[1] - self.mean[1]];
        // Σ⁻¹ = adj(Σ)/det.
        let maha = (c[1][1] * dx[0] * dx[0] - (c[0][1] + c[1][0]) * dx[0] * dx[1] + c[0][0] * dx[1] * dx[1]) / d;
        -0.5 * maha - 0.5 * d.ln() + self.prior.ln()
    }
}

impl DiscriminantModel {
    /// Highest-scoring level; ties go to the lower level.
    pub fn classify(&self, p: Complex64) -> Level {
        let x = [p.re, p.im];
        let mut best = (f64::NEG_INFINITY, self.classes[0].level);
        for c in &self.classes {
            let s = c.score(x);
            if s > best.0 {
                best = (s, c.level);
            }
        }
        best.1
    }
}
