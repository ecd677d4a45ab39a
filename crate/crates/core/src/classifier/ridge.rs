//! Closed-form ridge regression `W = (FᵀF + λI)⁻¹ FᵀY`.
//!
//! When there are fewer rows than columns the algebraically identical dual
//! form `W = Fᵀ(FFᵀ + λI)⁻¹Y` is used, so an `M x M` system is never built
//! for wide projections.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RidgeForm {
    /// Solve the `cols x cols` normal equations.
    Primal,
    /// Solve the `rows x rows` kernel system and map back through `Fᵀ`.
    Dual,
}

impl RidgeForm {
    pub fn auto(rows: usize, cols: usize) -> Self {
        if rows < cols {
            RidgeForm::Dual
        } else {
            RidgeForm::Primal
        }
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        let (row, col) = (pos % m.nrows(), pos / m.nrows());
        return Err(Error::Solver(format!("non-finite {what} entry at ({row}, {col})")));
    }
    Ok(())
}

/// A ridge problem with its Gram matrix precomputed, so several penalties can
/// be tried without recomputing `FᵀF` or `FFᵀ`.
#[derive(Debug, Clone)]
pub struct RidgeProblem<'a> {
    features: &'a DMatrix<f64>,
    targets: &'a DMatrix<f64>,
    form: RidgeForm,
    gram: DMatrix<f64>,
    rhs: DMatrix<f64>,
}

impl<'a> RidgeProblem<'a> {
    pub fn new(features: &'a DMatrix<f64>, targets: &'a DMatrix<f64>) -> Result<Self> {
        Self::with_form(
            features,
            targets,
            RidgeForm::auto(features.nrows(), features.ncols()),
        )
    }

    pub fn with_form(
        features: &'a DMatrix<f64>,
        targets: &'a DMatrix<f64>,
        form: RidgeForm,
    ) -> Result<Self> {
        if features.nrows() != targets.nrows() {
            return Err(Error::DimMismatch {
                expected: features.nrows(),
                actual: targets.nrows(),
            });
        }
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::invalid("ridge needs a non-empty feature matrix"));
        }
        check_finite(features, "feature")?;
        check_finite(targets, "target")?;
        let (gram, rhs) = match form {
            RidgeForm::Primal => (features.tr_mul(features), features.tr_mul(targets)),
            RidgeForm::Dual => (features * features.transpose(), targets.clone()),
        };
        Ok(RidgeProblem {
            features,
            targets,
            form,
            gram,
            rhs,
        })
    }

    pub fn form(&self) -> RidgeForm {
        self.form
    }

    /// Solves `(G + λI) X = rhs` by Cholesky. In dual form `X` are the
    /// per-row coefficients; in primal form `X` is the weight matrix.
    pub fn coefficients(&self, lambda: f64) -> Result<DMatrix<f64>> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        let mut a = self.gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        let chol = Cholesky::new(a).ok_or_else(|| {
            Error::Solver(format!("system is not positive definite at lambda {lambda}"))
        })?;
        let x = chol.solve(&self.rhs);
        check_finite(&x, "solution")?;
        Ok(x)
    }

    /// The `cols x targets` weight matrix for penalty `lambda`.
    pub fn solve(&self, lambda: f64) -> Result<DMatrix<f64>> {
        let x = self.coefficients(lambda)?;
        Ok(match self.form {
            RidgeForm::Primal => x,
            RidgeForm::Dual => self.features.tr_mul(&x),
        })
    }

    /// Scores `other · W` without materializing `W` in dual form.
    pub fn predict(&self, other: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
        let x = self.coefficients(lambda)?;
        Ok(match self.form {
            RidgeForm::Primal => other * x,
            RidgeForm::Dual => (other * self.features.transpose()) * x,
        })
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        self.targets
    }
}

/// Ridge weights with the form chosen from the shape of `features`.
pub fn fit_ridge(features: &DMatrix<f64>, targets: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    RidgeProblem::new(features, targets)?.solve(lambda)
}

pub fn fit_ridge_with(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    lambda: f64,
    form: RidgeForm,
) -> Result<DMatrix<f64>> {
    RidgeProblem::with_form(features, targets, form)?.solve(lambda)
}

/// Normwise relative residual of the normal equations,
/// `‖(FᵀF + λI)W − FᵀY‖ / (‖FᵀF + λI‖·‖W‖ + ‖FᵀY‖)` in Frobenius norm.
pub fn normal_equation_residual(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    lambda: f64,
    weights: &DMatrix<f64>,
) -> f64 {
    let mut a = features.tr_mul(features);
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let b = features.tr_mul(targets);
    let r = &a * weights - &b;
    r.norm() / (a.norm() * weights.norm() + b.norm())
}
