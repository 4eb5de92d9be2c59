//! Study containers, validation and file ingestion.
//!
//! The IPD trial (T = 1) is held record by record; the AGD trial (T = 2) is
//! held as per-arm summaries. Arm codes follow the usual convention:
//! 0 is the common comparator, 1 the IPD trial's active treatment and 2 the
//! AGD trial's active treatment.
//!
//! AGD covariate variances (`x_var`) and outcome variances (`y_var`) are read
//! as *sample* variances with an `n - 1` denominator.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MaicError, Result};
use crate::weighting::MomentSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpdRecord {
    pub y: f64,
    pub z: u8,
    pub x: Vec<f64>,
}

/// Individual patient data for the T = 1 trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpdStudy {
    records: Vec<IpdRecord>,
    covariate_names: Vec<String>,
    outcome_kind: OutcomeKind,
}

impl IpdStudy {
    pub fn new(
        records: Vec<IpdRecord>,
        covariate_names: Vec<String>,
        outcome_kind: OutcomeKind,
    ) -> Result<Self> {
        let p = covariate_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.z > 1 {
                return Err(MaicError::InvalidArmCode {
                    row: i + 1,
                    value: f64::from(r.z),
                });
            }
            if r.x.len() != p {
                return Err(MaicError::DimensionMismatch {
                    what: format!("covariates of record {}", i + 1),
                    expected: p,
                    found: r.x.len(),
                });
            }
            if outcome_kind == OutcomeKind::Binary && r.y != 0.0 && r.y != 1.0 {
                return Err(MaicError::InvalidOutcome {
                    row: i + 1,
                    value: r.y,
                });
            }
        }
        if !records.iter().any(|r| r.z == 1) {
            return Err(MaicError::EmptyStudy);
        }
        Ok(Self {
            records,
            covariate_names,
            outcome_kind,
        })
    }

    pub fn records(&self) -> &[IpdRecord] {
        &self.records
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn arm_count(&self, z: u8) -> usize {
        self.records.iter().filter(|r| r.z == z).count()
    }

    pub fn has_comparator(&self) -> bool {
        self.arm_count(0) > 0
    }

    /// Writes the study as CSV with columns `y`, `z` and one column per covariate.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string(), "z".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.y.to_string(), r.z.to_string()];
            row.extend(r.x.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Maps CSV columns onto the IPD fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub outcome: String,
    pub arm: String,
    pub covariates: Vec<String>,
    /// `None` infers binary when every outcome is 0 or 1.
    pub outcome_kind: Option<OutcomeKind>,
}

impl ColumnMapping {
    pub fn new(outcome: &str, arm: &str, covariates: &[String]) -> Self {
        Self {
            outcome: outcome.to_string(),
            arm: arm.to_string(),
            covariates: covariates.to_vec(),
            outcome_kind: None,
        }
    }
}

fn csv_err(e: csv::Error) -> MaicError {
    MaicError::Io(e.to_string())
}

/// Loads IPD from a CSV file with a header row. Row order is preserved.
pub fn load_ipd(path: impl AsRef<Path>, schema: &ColumnMapping) -> Result<IpdStudy> {
    let file = std::fs::File::open(path.as_ref())?;
    read_ipd(file, schema)
}

pub fn read_ipd<R: Read>(reader: R, schema: &ColumnMapping) -> Result<IpdStudy> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MaicError::MissingColumn(name.to_string()))
    };
    let y_col = col(&schema.outcome)?;
    let z_col = col(&schema.arm)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let row_no = i + 1;
        let num = |idx: usize, name: &str| -> Result<f64> {
            let raw = row.get(idx).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| MaicError::NonNumericValue {
                    column: name.to_string(),
                    row: row_no,
                    value: raw.to_string(),
                })
        };
        let y = num(y_col, &schema.outcome)?;
        let z_raw = num(z_col, &schema.arm)?;
        let z = if z_raw == 0.0 {
            0
        } else if z_raw == 1.0 {
            1
        } else {
            return Err(MaicError::InvalidArmCode {
                row: row_no,
                value: z_raw,
            });
        };
        let x = x_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&idx, name)| num(idx, name))
            .collect::<Result<Vec<_>>>()?;
        records.push(IpdRecord { y, z, x });
    }
    if records.is_empty() {
        return Err(MaicError::EmptyStudy);
    }
    let kind = schema.outcome_kind.unwrap_or_else(|| {
        if records.iter().all(|r| r.y == 0.0 || r.y == 1.0) {
            OutcomeKind::Binary
        } else {
            OutcomeKind::Continuous
        }
    });
    IpdStudy::new(records, schema.covariates.clone(), kind)
}

/// Published summaries for one arm of the AGD trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgdArm {
    pub n: usize,
    pub y_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_var: Option<f64>,
    pub x_mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_var: Option<Vec<f64>>,
}

impl AgdArm {
    fn validate(&self, label: &str, p: usize) -> Result<()> {
        if self.n == 0 {
            return Err(MaicError::SchemaError(format!("{label} arm has n = 0")));
        }
        if !self.y_mean.is_finite() {
            return Err(MaicError::SchemaError(format!(
                "{label} arm y_mean is not finite"
            )));
        }
        if let Some(v) = self.y_var {
            if v < 0.0 {
                return Err(MaicError::NegativeVariance(format!("{label}.y_var")));
            }
            if self.n < 2 {
                return Err(MaicError::SchemaError(format!(
                    "{label} arm reports y_var with n < 2"
                )));
            }
        }
        if self.x_mean.len() != p {
            return Err(MaicError::DimensionMismatch {
                what: format!("{label}.x_mean"),
                expected: p,
                found: self.x_mean.len(),
            });
        }
        if let Some(xv) = &self.x_var {
            if xv.len() != p {
                return Err(MaicError::DimensionMismatch {
                    what: format!("{label}.x_var"),
                    expected: p,
                    found: xv.len(),
                });
            }
            if let Some(j) = xv.iter().position(|&v| v < 0.0) {
                return Err(MaicError::NegativeVariance(format!("{label}.x_var[{j}]")));
            }
        }
        Ok(())
    }

    /// Outcome variance used by the AGD-side influence term.
    ///
    /// Binary outcomes without a reported variance fall back to the Bernoulli
    /// sample variance ȳ(1 − ȳ)·n/(n − 1).
    pub fn outcome_variance(&self, kind: OutcomeKind, label: &'static str) -> Result<f64> {
        match (self.y_var, kind) {
            (Some(v), _) => Ok(v),
            (None, OutcomeKind::Binary) if self.n >= 2 => {
                let m = self.y_mean;
                Ok(m * (1.0 - m) * self.n as f64 / (self.n as f64 - 1.0))
            }
            _ => Err(MaicError::MissingAgdVariance(label)),
        }
    }
}

/// Aggregate data for the T = 2 trial.
#[derive(Debug, Clone, PartialEq)]
pub struct AgdStudy {
    pub active_arm: AgdArm,
    pub comparator_arm: Option<AgdArm>,
    pub covariate_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgdArmsWire {
    active: AgdArm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    comparator: Option<AgdArm>,
}

#[derive(Serialize, Deserialize)]
struct AgdWire {
    covariates: Vec<String>,
    arms: AgdArmsWire,
}

impl AgdStudy {
    pub fn new(
        active_arm: AgdArm,
        comparator_arm: Option<AgdArm>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let p = covariate_names.len();
        active_arm.validate("active", p)?;
        if let Some(c) = &comparator_arm {
            c.validate("comparator", p)?;
        }
        Ok(Self {
            active_arm,
            comparator_arm,
            covariate_names,
        })
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    /// N₂₂ + N₂₀.
    pub fn total_n(&self) -> usize {
        self.active_arm.n + self.comparator_arm.as_ref().map_or(0, |a| a.n)
    }

    /// The arms that are present, active first.
    pub fn arms(&self) -> impl Iterator<Item = (&'static str, &AgdArm)> {
        std::iter::once(("active", &self.active_arm))
            .chain(self.comparator_arm.as_ref().map(|a| ("comparator", a)))
    }

    /// Covariates must agree by name and order before any analysis.
    pub fn check_alignment(&self, ipd: &IpdStudy) -> Result<()> {
        if self.covariate_names != ipd.covariate_names() {
            return Err(MaicError::CovariateMismatch {
                ipd: ipd.covariate_names().to_vec(),
                agd: self.covariate_names.clone(),
            });
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let wire: AgdWire =
            serde_json::from_str(s).map_err(|e| MaicError::SchemaError(e.to_string()))?;
        if wire.arms.active.y_var.is_none() {
            log::warn!(
                "AGD active arm has no y_var; binary outcomes fall back to the Bernoulli variance"
            );
        }
        Self::new(wire.arms.active, wire.arms.comparator, wire.covariates)
    }

    pub fn to_json_string(&self) -> String {
        let wire = AgdWire {
            covariates: self.covariate_names.clone(),
            arms: AgdArmsWire {
                active: self.active_arm.clone(),
                comparator: self.comparator_arm.clone(),
            },
        };
        serde_json::to_string_pretty(&wire).expect("AGD serialization cannot fail")
    }

    /// Collapses AGD-trial records into published-style summaries.
    pub fn summarize(records: &[AgdTrialRecord], covariate_names: Vec<String>) -> Result<Self> {
        let p = covariate_names.len();
        let summarize_arm = |z: u8| -> Option<AgdArm> {
            let rows: Vec<&AgdTrialRecord> = records.iter().filter(|r| r.z == z).collect();
            if rows.is_empty() {
                return None;
            }
            let n = rows.len();
            let nf = n as f64;
            let y_mean = rows.iter().map(|r| r.y).sum::<f64>() / nf;
            let mut x_mean = vec![0.0; p];
            for r in &rows {
                for (m, v) in x_mean.iter_mut().zip(&r.x) {
                    *m += v;
                }
            }
            x_mean.iter_mut().for_each(|m| *m /= nf);
            let (y_var, x_var) = if n >= 2 {
                let yv = rows.iter().map(|r| (r.y - y_mean).powi(2)).sum::<f64>() / (nf - 1.0);
                let mut xv = vec![0.0; p];
                for r in &rows {
                    for j in 0..p {
                        xv[j] += (r.x[j] - x_mean[j]).powi(2);
                    }
                }
                xv.iter_mut().for_each(|v| *v /= nf - 1.0);
                (Some(yv), Some(xv))
            } else {
                (None, None)
            };
            Some(AgdArm {
                n,
                y_mean,
                y_var,
                x_mean,
                x_var,
            })
        };
        let active = summarize_arm(2).ok_or(MaicError::NoActiveArm)?;
        Self::new(active, summarize_arm(0), covariate_names)
    }
}

impl Serialize for AgdStudy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        AgdWire {
            covariates: self.covariate_names.clone(),
            arms: AgdArmsWire {
                active: self.active_arm.clone(),
                comparator: self.comparator_arm.clone(),
            },
        }
        .serialize(s)
    }
}

/// Loads the AGD JSON document `{"covariates": [...], "arms": {"active": {...}, "comparator": {...}}}`.
pub fn load_agd(path: impl AsRef<Path>) -> Result<AgdStudy> {
    let text = std::fs::read_to_string(path.as_ref())?;
    AgdStudy::from_json_str(&text)
}

/// A patient record from the AGD trial; only available in simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgdTrialRecord {
    pub y: f64,
    /// 0 (comparator) or 2 (AGD active treatment).
    pub z: u8,
    pub x: Vec<f64>,
}

/// Both trials at the patient level, as only a simulation can provide.
#[derive(Debug, Clone)]
pub struct TwoStudyData {
    pub ipd: IpdStudy,
    pub agd_records: Vec<AgdTrialRecord>,
}

impl TwoStudyData {
    pub fn agd_summary(&self) -> Result<AgdStudy> {
        AgdStudy::summarize(&self.agd_records, self.ipd.covariate_names().to_vec())
    }
}

/// Target moments E{t(X) | T = 2} pooled over the AGD arms.
///
/// Second moments use x̄² + s²(n − 1)/n per arm, turning the reported sample
/// variance into a population second moment before pooling.
pub fn pooled_target_moments(agd: &AgdStudy, spec: MomentSpec) -> Result<Vec<f64>> {
    let p = agd.p();
    let total = agd.total_n() as f64;
    let mut first = vec![0.0; p];
    for (_, arm) in agd.arms() {
        for (acc, m) in first.iter_mut().zip(&arm.x_mean) {
            *acc += m * arm.n as f64;
        }
    }
    first.iter_mut().for_each(|v| *v /= total);
    if spec == MomentSpec::First {
        return Ok(first);
    }
    let mut second = vec![0.0; p];
    for (label, arm) in agd.arms() {
        let xv = arm
            .x_var
            .as_ref()
            .ok_or_else(|| MaicError::MissingVariance(label.to_string()))?;
        let n = arm.n as f64;
        for j in 0..p {
            let m2 = arm.x_mean[j].powi(2) + xv[j] * (n - 1.0) / n;
            second[j] += m2 * n;
        }
    }
    second.iter_mut().for_each(|v| *v /= total);
    first.extend(second);
    Ok(first)
}
