//! The design artifact file: everything the online stage needs from the
//! offline stage, as human-readable TOML with row-major matrix literals.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::SymMatrix;
use crate::model::{IqcFilter, ModelError, Multiplier};
use crate::synthesis::{TerminalSet, TubeParams};

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact parse error: {0}")]
    Parse(String),
    #[error("artifact field '{field}' is malformed: {reason}")]
    Field { field: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterArtifact {
    pub a_psi: Vec<Vec<f64>>,
    pub b_psi1: Vec<Vec<f64>>,
    pub b_psi2: Vec<Vec<f64>>,
    pub c_psi: Vec<Vec<f64>>,
    pub d_psi1: Vec<Vec<f64>>,
    pub d_psi2: Vec<Vec<f64>>,
}

/// Serialized design. Field names are the artifact file schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignArtifact {
    pub rho: f64,
    pub gamma: f64,
    pub gamma_mat: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub p_e: Vec<Vec<f64>>,
    pub p_diff: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub k_omega: Vec<Vec<f64>>,
    pub s_mat: Vec<Vec<f64>>,
    pub x_omega: f64,
    pub s_omega: f64,
    pub m: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_iqc: Option<Vec<Vec<f64>>>,
    pub filter: FilterArtifact,
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, ArtifactError> {
    let nr = rows.len();
    let nc = rows.first().map(|r| r.len()).unwrap_or(0);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != nc {
            return Err(ArtifactError::Field {
                field: field.into(),
                reason: format!("row {i} has {} entries, expected {nc}", r.len()),
            });
        }
    }
    let mut m = DMatrix::zeros(nr, nc);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

fn sym_from_rows(rows: &[Vec<f64>], field: &str) -> Result<SymMatrix, ArtifactError> {
    let m = rows_to_matrix(rows, field)?;
    if m.nrows() != m.ncols() {
        return Err(ArtifactError::Field {
            field: field.into(),
            reason: "matrix is not square".into(),
        });
    }
    Ok(SymMatrix::symmetrize(m))
}

impl DesignArtifact {
    pub fn from_parts(
        tube: &TubeParams,
        terminal: &TerminalSet,
        filt: &IqcFilter,
        multiplier: &Multiplier,
        x_iqc: Option<&SymMatrix>,
    ) -> Self {
        Self {
            rho: tube.rho,
            gamma: tube.gamma,
            gamma_mat: matrix_to_rows(tube.gamma_mat.matrix()),
            p: matrix_to_rows(tube.p.matrix()),
            p_e: matrix_to_rows(tube.p_e.matrix()),
            p_diff: matrix_to_rows(tube.p_diff.matrix()),
            k: matrix_to_rows(&tube.k),
            c: tube.c.iter().copied().collect(),
            k_omega: matrix_to_rows(&terminal.k_omega),
            s_mat: matrix_to_rows(terminal.s_mat.matrix()),
            x_omega: terminal.x_omega,
            s_omega: terminal.s_omega,
            m: matrix_to_rows(multiplier.m.matrix()),
            x_iqc: x_iqc.map(|x| matrix_to_rows(x.matrix())),
            filter: FilterArtifact {
                a_psi: matrix_to_rows(&filt.a_psi),
                b_psi1: matrix_to_rows(&filt.b_psi1),
                b_psi2: matrix_to_rows(&filt.b_psi2),
                c_psi: matrix_to_rows(&filt.c_psi),
                d_psi1: matrix_to_rows(&filt.d_psi1),
                d_psi2: matrix_to_rows(&filt.d_psi2),
            },
        }
    }

    /// Rebuilds the typed design pieces. Only structural (dimension) checks
    /// are performed here; numeric consistency is the verifier's job.
    #[allow(clippy::type_complexity)]
    pub fn to_parts(
        &self,
    ) -> Result<(TubeParams, TerminalSet, IqcFilter, Multiplier, Option<SymMatrix>), ArtifactError>
    {
        let tube = TubeParams {
            rho: self.rho,
            p: sym_from_rows(&self.p, "p")?,
            p_e: sym_from_rows(&self.p_e, "p_e")?,
            p_diff: sym_from_rows(&self.p_diff, "p_diff")?,
            gamma: self.gamma,
            gamma_mat: sym_from_rows(&self.gamma_mat, "gamma_mat")?,
            k: rows_to_matrix(&self.k, "k")?,
            c: DVector::from_vec(self.c.clone()),
        };
        if tube.p.dim() < tube.p_e.dim() || tube.p_e.dim() != tube.p_diff.dim() {
            return Err(ArtifactError::Field {
                field: "p".into(),
                reason: "tube matrices have inconsistent dimensions".into(),
            });
        }
        if tube.k.ncols() != tube.p_e.dim() {
            return Err(ArtifactError::Field {
                field: "k".into(),
                reason: "gain width does not match the state dimension".into(),
            });
        }
        let terminal = TerminalSet {
            k_omega: rows_to_matrix(&self.k_omega, "k_omega")?,
            s_mat: sym_from_rows(&self.s_mat, "s_mat")?,
            x_omega: self.x_omega,
            s_omega: self.s_omega,
        };
        let filt = IqcFilter::new(
            rows_to_matrix(&self.filter.a_psi, "filter.a_psi")?,
            rows_to_matrix(&self.filter.b_psi1, "filter.b_psi1")?,
            rows_to_matrix(&self.filter.b_psi2, "filter.b_psi2")?,
            rows_to_matrix(&self.filter.c_psi, "filter.c_psi")?,
            rows_to_matrix(&self.filter.d_psi1, "filter.d_psi1")?,
            rows_to_matrix(&self.filter.d_psi2, "filter.d_psi2")?,
        )?;
        let multiplier = Multiplier::new(sym_from_rows(&self.m, "m")?);
        if multiplier.m.dim() != filt.n_z() {
            return Err(ArtifactError::Field {
                field: "m".into(),
                reason: "multiplier dimension does not match the filter output".into(),
            });
        }
        let x_iqc = match &self.x_iqc {
            Some(rows) => Some(sym_from_rows(rows, "x_iqc")?),
            None => None,
        };
        Ok((tube, terminal, filt, multiplier, x_iqc))
    }

    pub fn write_to(&self, path: &Path) -> Result<(), ArtifactError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| ArtifactError::Parse(format!("serialization failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, ArtifactError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| ArtifactError::Parse(e.to_string()))
    }
}
