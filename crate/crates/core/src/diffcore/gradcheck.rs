use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// A named, ordered collection of trainable matrices.
pub trait Parameters: Clone {
    fn named(&self) -> Vec<(String, &Matrix)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn entry_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Free-form parameter set keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet(pub BTreeMap<String, Matrix>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: Matrix) -> Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    /// Registers every entry on `tape`.
    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.0
            .iter()
            .map(|(n, m)| (n.clone(), tape.param(n, m)))
            .collect()
    }
}

impl Parameters for ParamSet {
    fn named(&self) -> Vec<(String, &Matrix)> {
        self.0.iter().map(|(n, m)| (n.clone(), m)).collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.0.iter_mut().map(|(n, m)| (n.clone(), m)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat entry index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Compares reverse-mode gradients against central finite differences.
///
/// The relative error of an entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<P, F>(params: &P, eps: f64, loss: F) -> Result<GradCheckReport>
where
    P: Parameters,
    F: Fn(&P, &mut Tape) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let out = loss(params, &mut tape)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let analytic = tape.backward(out)?;

    let eval = |p: &P| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(p, &mut t)?;
        let v = t.value(v).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteLoss)
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    let mut work = params.clone();
    for (name, value) in params.named() {
        let zeros = Matrix::zeros(value.rows(), value.cols());
        let grad = analytic.get(&name).unwrap_or(&zeros);
        for e in 0..value.len() {
            let original = value.data()[e];
            set_entry(&mut work, &name, e, original + eps);
            let plus = eval(&work)?;
            set_entry(&mut work, &name, e, original - eps);
            let minus = eval(&work)?;
            set_entry(&mut work, &name, e, original);

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), e));
            }
        }
    }
    Ok(report)
}

fn set_entry<P: Parameters>(params: &mut P, name: &str, entry: usize, value: f64) {
    for (n, m) in params.named_mut() {
        if n == name {
            m.data_mut()[entry] = value;
            return;
        }
    }
}
