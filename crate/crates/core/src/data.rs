//! Datasets, unit roles, and the estimand catalog with fixed target weights.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Sizes of the treated, control and outside-study groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub treated: usize,
    pub control: usize,
    pub outside: usize,
}

impl RoleCounts {
    pub fn study(&self) -> usize {
        self.treated + self.control
    }
}

/// A validated dataset. Outcomes exist exactly for study units.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    x: DenseMatrix,
    t: Vec<bool>,
    s: Vec<bool>,
    y: Vec<Option<f64>>,
    counts: RoleCounts,
}

fn indicator(column: &'static str, row: usize, value: f64) -> Result<bool> {
    if value == 1.0 {
        Ok(true)
    } else if value == 0.0 {
        Ok(false)
    } else {
        Err(Error::NonBinaryIndicator { column, row, value })
    }
}

impl Dataset {
    /// Validates raw columns. `t` and `s` must hold only 0 or 1; `t` is
    /// ignored for units outside the study.
    pub fn new(
        ids: Vec<String>,
        x: DenseMatrix,
        t: &[f64],
        s: &[f64],
        y: Vec<Option<f64>>,
    ) -> Result<Self> {
        let n = x.rows();
        if n < 2 || x.cols() == 0 {
            return Err(Error::InvalidData(format!(
                "need at least 2 units and 1 covariate, got {n} units and {} covariates",
                x.cols()
            )));
        }
        for (name, len) in [("t", t.len()), ("s", s.len()), ("y", y.len()), ("id", ids.len())] {
            if len != n {
                return Err(Error::DimensionMismatch(format!(
                    "column {name} has {len} entries, covariates have {n} rows"
                )));
            }
        }
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteCovariate { row: i, col: j });
                }
            }
        }
        let s: Vec<bool> = s
            .iter()
            .enumerate()
            .map(|(i, &v)| indicator("s", i, v))
            .collect::<Result<_>>()?;
        let mut tt = Vec::with_capacity(n);
        for (i, &v) in t.iter().enumerate() {
            // Treatment is irrelevant outside the study; a NaN there is tolerated.
            if !s[i] && !v.is_finite() {
                tt.push(false);
            } else {
                tt.push(indicator("t", i, v)?);
            }
        }
        let mut counts = RoleCounts {
            treated: 0,
            control: 0,
            outside: 0,
        };
        for i in 0..n {
            match (s[i], &y[i]) {
                (true, None) => {
                    return Err(Error::MissingOutcome {
                        row: i,
                        id: ids[i].clone(),
                    })
                }
                (true, Some(v)) if !v.is_finite() => {
                    return Err(Error::InvalidData(format!(
                        "outcome of row {i} ({}) is not finite",
                        ids[i]
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::InvalidData(format!(
                        "row {i} ({}) is outside the study but has an outcome",
                        ids[i]
                    )))
                }
                _ => {}
            }
            if !s[i] {
                counts.outside += 1;
            } else if tt[i] {
                counts.treated += 1;
            } else {
                counts.control += 1;
            }
        }
        if counts.treated == 0 {
            return Err(Error::EmptyArm { arm: "treated" });
        }
        if counts.control == 0 {
            return Err(Error::EmptyArm { arm: "control" });
        }
        Ok(Self {
            ids,
            x,
            t: tt,
            s,
            y,
            counts,
        })
    }

    /// Convenience constructor with sequential ids.
    pub fn from_columns(x: DenseMatrix, t: &[f64], s: &[f64], y: Vec<Option<f64>>) -> Result<Self> {
        let ids = (0..x.rows()).map(|i| i.to_string()).collect();
        Self::new(ids, x, t, s, y)
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn treated(&self) -> &[bool] {
        &self.t
    }

    pub fn in_study(&self) -> &[bool] {
        &self.s
    }

    pub fn outcomes(&self) -> &[Option<f64>] {
        &self.y
    }

    pub fn counts(&self) -> RoleCounts {
        self.counts
    }

    /// True when unit `i` is a study unit in arm `arm`.
    pub fn in_arm(&self, i: usize, arm: u8) -> bool {
        self.s[i] && self.t[i] == (arm == 1)
    }

    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.in_arm(i, arm)).collect()
    }

    pub fn study_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.s[i]).collect()
    }

    /// Outcome of a study unit; panics for units outside the study.
    pub fn y(&self, i: usize) -> f64 {
        self.y[i].expect("outcome requested for a unit outside the study")
    }

    /// Same units with replaced covariates (e.g. a misspecified view).
    pub fn with_covariates(&self, x: DenseMatrix) -> Result<Self> {
        let t: Vec<f64> = self.t.iter().map(|&b| f64::from(u8::from(b))).collect();
        let s: Vec<f64> = self.s.iter().map(|&b| f64::from(u8::from(b))).collect();
        Self::new(self.ids.clone(), x, &t, &s, self.y.clone())
    }

    pub fn t_f64(&self) -> Vec<f64> {
        self.t.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn s_f64(&self) -> Vec<f64> {
        self.s.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Reads the `id,t,s,y,x1..xp` schema. Empty `y` cells are missing.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv(format!("header: {e}")))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("missing required column `{name}`")))
    };
    let (id_col, t_col, s_col, y_col) = (find("id")?, find("t")?, find("s")?, find("y")?);
    let mut x_cols: Vec<(usize, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(c, h)| {
            h.strip_prefix('x')
                .and_then(|k| k.parse::<usize>().ok())
                .map(|k| (k, c))
        })
        .collect();
    x_cols.sort();
    if x_cols.is_empty() {
        return Err(Error::Csv("no covariate columns `x1..xp`".into()));
    }
    for (pos, &(k, _)) in x_cols.iter().enumerate() {
        if k != pos + 1 {
            return Err(Error::Csv(format!(
                "covariate columns must be x1..x{}, found x{k}",
                x_cols.len()
            )));
        }
    }

    let parse = |row: usize, name: &str, cell: &str| -> Result<f64> {
        cell.parse::<f64>()
            .map_err(|_| Error::Csv(format!("row {row}, column `{name}`: cannot parse `{cell}`")))
    };
    let (mut ids, mut t, mut s, mut y, mut x) = (vec![], vec![], vec![], vec![], vec![]);
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(format!("row {row}: {e}")))?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        ids.push(cell(id_col).to_string());
        let s_val = parse(row, "s", cell(s_col))?;
        s.push(s_val);
        let t_cell = cell(t_col);
        t.push(if t_cell.is_empty() && s_val == 0.0 {
            f64::NAN
        } else {
            parse(row, "t", t_cell)?
        });
        let y_cell = cell(y_col);
        y.push(if y_cell.is_empty() || y_cell.eq_ignore_ascii_case("na") {
            None
        } else {
            Some(parse(row, "y", y_cell)?)
        });
        for &(k, c) in &x_cols {
            x.push(parse(row, &format!("x{k}"), cell(c))?);
        }
    }
    let n = ids.len();
    let x = DenseMatrix::from_vec(n, x_cols.len(), x)?;
    Dataset::new(ids, x, &t, &s, y)
}

/// Writes the dataset in the schema accepted by [`read_csv`].
pub fn write_csv<W: Write>(d: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "t".into(), "s".into(), "y".into()];
    header.extend((1..=d.p()).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
    for i in 0..d.n() {
        let mut rec = vec![
            d.ids[i].clone(),
            u8::from(d.t[i]).to_string(),
            u8::from(d.s[i]).to_string(),
            d.y[i].map(|v| format!("{v:?}")).unwrap_or_default(),
        ];
        rec.extend(d.x.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandKind {
    Sate,
    Satt,
    Tate,
    Owate,
    Osate,
    Kowate,
    Kosate,
}

impl EstimandKind {
    pub const ALL: [EstimandKind; 7] = [
        Self::Sate,
        Self::Satt,
        Self::Tate,
        Self::Owate,
        Self::Osate,
        Self::Kowate,
        Self::Kosate,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Sate => "SATE",
            Self::Satt => "SATT",
            Self::Tate => "TATE",
            Self::Owate => "OWATE",
            Self::Osate => "OSATE",
            Self::Kowate => "KOWATE",
            Self::Kosate => "KOSATE",
        }
    }

    pub fn is_variable(self) -> bool {
        matches!(self, Self::Kowate | Self::Kosate)
    }

    pub fn needs_propensity(self) -> bool {
        matches!(self, Self::Owate | Self::Osate)
    }
}

impl fmt::Display for EstimandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EstimandKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimand `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub kind: EstimandKind,
    /// Truncation level for OSATE.
    pub alpha: f64,
    /// Subsample size for KOSATE.
    pub subset_size: Option<usize>,
}

impl EstimandSpec {
    pub fn new(kind: EstimandKind) -> Self {
        Self {
            kind,
            alpha: 0.1,
            subset_size: None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_subset_size(mut self, size: usize) -> Self {
        self.subset_size = Some(size);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "truncation level must lie in (0, 0.5), got {}",
                self.alpha
            )));
        }
        if self.kind == EstimandKind::Kosate && self.subset_size.unwrap_or(0) == 0 {
            return Err(Error::InvalidConfig(
                "KOSATE needs a positive subset size".into(),
            ));
        }
        Ok(())
    }
}

/// Whether target weights sum to `n` (fixed formulas) or to 1 (variable sets).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    UnitMean,
    Simplex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetWeights {
    pub v: Vec<f64>,
    pub normalization: Normalization,
}

impl TargetWeights {
    pub fn new(v: Vec<f64>, normalization: Normalization) -> Result<Self> {
        let w = Self { v, normalization };
        w.check()?;
        Ok(w)
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    fn expected_sum(&self) -> f64 {
        match self.normalization {
            Normalization::UnitMean => self.v.len() as f64,
            Normalization::Simplex => 1.0,
        }
    }

    fn check(&self) -> Result<()> {
        if let Some(i) = self.v.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidData(format!(
                "target weight {i} is negative or not finite"
            )));
        }
        let sum: f64 = self.v.iter().sum();
        let want = self.expected_sum();
        if (sum - want).abs() > 1e-10 * want.max(1.0) {
            return Err(Error::InvalidData(format!(
                "target weights sum to {sum}, expected {want}"
            )));
        }
        Ok(())
    }

    /// Weights on the `Σ V = n` scale used by every quadratic program.
    pub fn unit_mean(&self) -> Vec<f64> {
        match self.normalization {
            Normalization::UnitMean => self.v.clone(),
            Normalization::Simplex => {
                let n = self.v.len() as f64;
                self.v.iter().map(|x| x * n).collect()
            }
        }
    }

    /// Weights on the `Σ V = 1` scale.
    pub fn simplex(&self) -> Vec<f64> {
        match self.normalization {
            Normalization::Simplex => self.v.clone(),
            Normalization::UnitMean => {
                let n = self.v.len() as f64;
                self.v.iter().map(|x| x / n).collect()
            }
        }
    }
}

/// Scales nonnegative mass to the unit-mean convention.
fn unit_mean_from_mass(mass: Vec<f64>, what: &str) -> Result<TargetWeights> {
    let n = mass.len() as f64;
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptyTarget(what.to_string()));
    }
    TargetWeights::new(
        mass.into_iter().map(|m| n * m / total).collect(),
        Normalization::UnitMean,
    )
}

/// Truncation indicator `α < φ < 1 − α`.
pub fn within_truncation(phi: f64, alpha: f64) -> bool {
    alpha < phi && phi < 1.0 - alpha
}

/// Target weights of the fixed-formula estimands, on the unit-mean scale.
/// Units outside the study get zero weight except under TATE, where only they
/// carry weight. Propensities are read only for study units.
pub fn fixed_target_weights(
    spec: &EstimandSpec,
    d: &Dataset,
    phi: Option<&[f64]>,
) -> Result<TargetWeights> {
    let n = d.n();
    let s = d.in_study();
    let propensity = || -> Result<&[f64]> {
        let phi = phi.ok_or(Error::MissingPropensity(spec.kind.label()))?;
        if phi.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "propensity vector of length {} for {n} units",
                phi.len()
            )));
        }
        Ok(phi)
    };
    match spec.kind {
        EstimandKind::Sate => unit_mean_from_mass(
            s.iter().map(|&si| if si { 1.0 } else { 0.0 }).collect(),
            "empty study sample",
        ),
        EstimandKind::Satt => unit_mean_from_mass(
            (0..n)
                .map(|i| if d.in_arm(i, 1) { 1.0 } else { 0.0 })
                .collect(),
            "no treated units",
        ),
        EstimandKind::Tate => unit_mean_from_mass(
            s.iter().map(|&si| if si { 0.0 } else { 1.0 }).collect(),
            "TATE needs units outside the study sample",
        ),
        EstimandKind::Owate => {
            let phi = propensity()?;
            unit_mean_from_mass(
                (0..n)
                    .map(|i| if s[i] { phi[i] * (1.0 - phi[i]) } else { 0.0 })
                    .collect(),
                "overlap weights vanish",
            )
        }
        EstimandKind::Osate => {
            spec.validate()?;
            let phi = propensity()?;
            unit_mean_from_mass(
                (0..n)
                    .map(|i| {
                        if s[i] && within_truncation(phi[i], spec.alpha) {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                &format!("no propensity inside ({}, {})", spec.alpha, 1.0 - spec.alpha),
            )
        }
        EstimandKind::Kowate | EstimandKind::Kosate => Err(Error::InvalidConfig(format!(
            "{} has no fixed target weights; they come from the joint problem",
            spec.kind
        ))),
    }
}
