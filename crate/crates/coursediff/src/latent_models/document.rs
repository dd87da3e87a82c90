//! Versioned JSON form of a fitted model, so later runs (DCF) can reuse it.

use super::{Convergence, LatentModel, ModelClass};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MODEL_FORMAT: &str = "coursediff-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentEntry {
    pub id: String,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseEntry {
    pub id: String,
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub class: ModelClass,
    pub n_dim: usize,
    pub intercept: f64,
    pub sigma2: Option<f64>,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub convergence: Convergence,
    pub warnings: Vec<String>,
    pub students: Vec<StudentEntry>,
    pub courses: Vec<CourseEntry>,
}

impl From<&LatentModel> for ModelDocument {
    fn from(m: &LatentModel) -> Self {
        let row = |x: &DMatrix<f64>, i: usize| x.row(i).iter().copied().collect::<Vec<_>>();
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            class: m.class,
            n_dim: m.n_dim,
            intercept: m.intercept,
            sigma2: m.sigma2,
            log_likelihood: m.log_likelihood,
            n_params: m.n_params,
            convergence: m.convergence.clone(),
            warnings: m.warnings.clone(),
            students: m
                .student_ids
                .iter()
                .enumerate()
                .map(|(s, id)| StudentEntry { id: id.clone(), theta: row(&m.theta, s) })
                .collect(),
            courses: m
                .course_ids
                .iter()
                .enumerate()
                .map(|(c, id)| CourseEntry {
                    id: id.clone(),
                    delta: row(&m.delta, c),
                    alpha: row(&m.alpha, c),
                })
                .collect(),
        }
    }
}

impl ModelDocument {
    pub fn into_model(self) -> Result<LatentModel> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Invalid(format!("unknown model format '{}'", self.format)));
        }
        if self.version != MODEL_FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported model version {}", self.version)));
        }
        let n = self.n_dim;
        let bad = self.students.iter().any(|s| s.theta.len() != n)
            || self.courses.iter().any(|c| c.delta.len() != n || c.alpha.len() != n);
        if n == 0 || bad {
            return Err(Error::Invalid("model vectors do not match its dimension".into()));
        }
        let theta = DMatrix::from_fn(self.students.len(), n, |s, k| self.students[s].theta[k]);
        let delta = DMatrix::from_fn(self.courses.len(), n, |c, k| self.courses[c].delta[k]);
        let alpha = DMatrix::from_fn(self.courses.len(), n, |c, k| self.courses[c].alpha[k]);
        Ok(LatentModel {
            class: self.class,
            n_dim: n,
            student_ids: self.students.into_iter().map(|s| s.id).collect(),
            course_ids: self.courses.into_iter().map(|c| c.id).collect(),
            theta,
            delta,
            alpha,
            intercept: self.intercept,
            sigma2: self.sigma2,
            log_likelihood: self.log_likelihood,
            n_params: self.n_params,
            convergence: self.convergence,
            warnings: self.warnings,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            row: e.line(),
            column: e.column().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grade_data::{CourseResponseMatrix, GradeScaleSpec};
    use crate::latent_models::fit_agm;

    #[test]
    fn round_trip_is_exact() {
        let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let cells = vec![Some(3.1), Some(2.2), None, Some(1.7), Some(0.4), Some(2.9), Some(1.3), Some(2.0), Some(0.1)];
        let m = CourseResponseMatrix::from_flat(ids("s", 3), ids("c", 3), cells, GradeScaleSpec::continuous(0.0)).unwrap();
        let model = fit_agm(&m, 1).unwrap();
        let doc = ModelDocument::from(&model);
        let back = ModelDocument::from_json(&doc.to_json()).unwrap().into_model().unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn wrong_version_rejected() {
        let mut doc = ModelDocument {
            format: MODEL_FORMAT.into(),
            version: 99,
            class: ModelClass::Irt,
            n_dim: 1,
            intercept: 0.0,
            sigma2: None,
            log_likelihood: 0.0,
            n_params: 0,
            convergence: Convergence::default(),
            warnings: vec![],
            students: vec![],
            courses: vec![],
        };
        assert!(doc.clone().into_model().is_err());
        doc.version = MODEL_FORMAT_VERSION;
        assert!(doc.into_model().is_ok());
    }
}
