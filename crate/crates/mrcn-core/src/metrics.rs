//! Confusion-matrix accumulation over sparsely labeled rasters and the
//! derived accuracy measures.
//!
//! `counts[i][j]` counts pixels whose reference class is i and predicted
//! class is j; pixels with the 255 sentinel in the reference are never
//! counted. The average-accuracy measure divides each diagonal entry by
//! the PREDICTION marginal by default (a precision), with the
//! reference-marginal (recall) variant available for comparison.

use crate::error::Error;
use crate::raster::U8Raster;
use crate::Result;

pub const UNLABELED: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AaDenominator {
    Prediction,
    Reference,
}

impl AaDenominator {
    pub fn parse(s: &str) -> Result<AaDenominator> {
        Ok(match s {
            "prediction" => AaDenominator::Prediction,
            "reference" => AaDenominator::Reference,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown aa denominator '{s}' (expected prediction | reference)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn add(&mut self, reference: usize, predicted: usize) {
        self.counts[reference * self.classes + predicted] += 1;
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<ConfusionMatrix> {
        if counts.len() != classes * classes {
            return Err(Error::Data(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    /// Adds one count per labeled reference pixel.
    pub fn accumulate(&mut self, predicted: &U8Raster, reference: &U8Raster) -> Result<()> {
        if predicted.shape() != reference.shape() {
            return Err(Error::Data(format!(
                "prediction {:?} vs reference {:?}",
                predicted.shape(),
                reference.shape()
            )));
        }
        for (&p, &r) in predicted.data.iter().zip(&reference.data) {
            if r == UNLABELED {
                continue;
            }
            if (r as usize) >= self.classes || (p as usize) >= self.classes {
                return Err(Error::Data(format!(
                    "class value out of range: reference {r}, predicted {p}, classes {}",
                    self.classes
                )));
            }
            self.add(r as usize, p as usize);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn diagonal(&self) -> u64 {
        (0..self.classes).map(|i| self.count(i, i)).sum()
    }

    /// column sum: how many pixels were predicted as class i
    pub fn prediction_marginal(&self, i: usize) -> u64 {
        (0..self.classes).map(|r| self.count(r, i)).sum()
    }

    /// row sum: how many labeled pixels truly belong to class i
    pub fn reference_marginal(&self, i: usize) -> u64 {
        (0..self.classes).map(|p| self.count(i, p)).sum()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::Data("empty evaluation: no labeled pixels".into()))
        } else {
            Ok(())
        }
    }

    pub fn oa(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        Ok(self.diagonal() as f64 / self.total() as f64)
    }

    /// Chance-corrected agreement. When the chance term saturates the
    /// denominator (single-class degeneracy), defined as 1 for a perfect
    /// matrix and 0 otherwise.
    pub fn kappa(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let n = self.total() as f64;
        let diag = self.diagonal() as f64;
        let chance: f64 = (0..self.classes)
            .map(|i| self.prediction_marginal(i) as f64 * self.reference_marginal(i) as f64)
            .sum();
        let denom = n * n - chance;
        if denom == 0.0 {
            return Ok(if diag == n { 1.0 } else { 0.0 });
        }
        Ok((n * diag - chance) / denom)
    }

    /// Mean of per-class diagonal fractions; classes with a zero
    /// denominator contribute 0.
    pub fn aa(&self, denominator: AaDenominator) -> Result<f64> {
        self.ensure_nonempty()?;
        let sum: f64 = (0..self.classes)
            .map(|i| {
                let d = match denominator {
                    AaDenominator::Prediction => self.prediction_marginal(i),
                    AaDenominator::Reference => self.reference_marginal(i),
                };
                if d == 0 {
                    0.0
                } else {
                    self.count(i, i) as f64 / d as f64
                }
            })
            .sum();
        Ok(sum / self.classes as f64)
    }

    pub fn class_scores(&self, i: usize) -> ClassScores {
        let diag = self.count(i, i) as f64;
        let pm = self.prediction_marginal(i);
        let rm = self.reference_marginal(i);
        let precision = if pm == 0 { 0.0 } else { diag / pm as f64 };
        let recall = if rm == 0 { 0.0 } else { diag / rm as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores { precision, recall, f1 }
    }

    /// Mean harmonic mean of per-class precision and recall.
    pub fn f1(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let sum: f64 = (0..self.classes).map(|i| self.class_scores(i).f1).sum();
        Ok(sum / self.classes as f64)
    }

    /// Human-readable report with per-class rows and summary measures.
    pub fn report_table(&self, aa_denominator: AaDenominator) -> Result<String> {
        self.ensure_nonempty()?;
        let mut out = String::new();
        out.push_str("class  precision  recall     f1         labeled\n");
        for i in 0..self.classes {
            let s = self.class_scores(i);
            out.push_str(&format!(
                "{:<6} {:<10.4} {:<10.4} {:<10.4} {}\n",
                i,
                s.precision,
                s.recall,
                s.f1,
                self.reference_marginal(i)
            ));
        }
        out.push_str(&format!(
            "\nOA {:.4}  kappa {:.4}  AA {:.4}  F1 {:.4}  ({} pixels)\n",
            self.oa()?,
            self.kappa()?,
            self.aa(aa_denominator)?,
            self.f1()?,
            self.total()
        ));
        Ok(out)
    }

    /// Machine-readable form: one row per class, then a footer row.
    pub fn report_csv(&self, aa_denominator: AaDenominator) -> Result<String> {
        self.ensure_nonempty()?;
        let mut out = String::from("class,precision,recall,f1,labeled\n");
        for i in 0..self.classes {
            let s = self.class_scores(i);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i,
                s.precision,
                s.recall,
                s.f1,
                self.reference_marginal(i)
            ));
        }
        out.push_str(&format!(
            "summary,oa={},kappa={},aa={},f1={}\n",
            self.oa()?,
            self.kappa()?,
            self.aa(aa_denominator)?,
            self.f1()?
        ));
        Ok(out)
    }
}
