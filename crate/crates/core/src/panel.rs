//! Panel data: donor block, treated row, observation mask and the
//! intervention split, plus the affine map onto `[-1, 1]`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Outcomes for one treated unit and `N − 1` donors over `T` periods.
///
/// The first `t0` periods are pre-intervention. Unobserved donor cells are
/// stored as `0`; the treated row must be fully observed before `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelMatrix {
    donors: DMatrix<f64>,
    mask: DMatrix<bool>,
    treated: DVector<f64>,
    treated_mask: Vec<bool>,
    t0: usize,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
}

impl PanelMatrix {
    /// Builds a panel, zero-filling unobserved donor cells.
    ///
    /// `unit_labels[0]` names the treated unit and the remaining labels name
    /// the donor rows in order.
    pub fn new(
        donors: DMatrix<f64>,
        mask: DMatrix<bool>,
        treated: DVector<f64>,
        treated_mask: Vec<bool>,
        t0: usize,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self> {
        let (n_donors, t_len) = donors.shape();
        if mask.shape() != donors.shape() {
            return Err(Error::shape(
                format!("mask {n_donors}x{t_len}"),
                format!("{}x{}", mask.nrows(), mask.ncols()),
            ));
        }
        if treated.len() != t_len || treated_mask.len() != t_len {
            return Err(Error::shape(
                format!("treated length {t_len}"),
                format!(
                    "{} values, {} mask flags",
                    treated.len(),
                    treated_mask.len()
                ),
            ));
        }
        if n_donors < 1 || t_len < 2 {
            return Err(Error::InvalidPanel(format!(
                "need at least 2 units and 2 periods, got {} units and {t_len} periods",
                n_donors + 1
            )));
        }
        if t0 < 1 || t0 >= t_len {
            return Err(Error::InvalidPanel(format!(
                "pre-intervention length must satisfy 1 <= t0 < T, got t0={t0}, T={t_len}"
            )));
        }
        if unit_labels.len() != n_donors + 1 {
            return Err(Error::shape(
                format!("{} unit labels", n_donors + 1),
                unit_labels.len().to_string(),
            ));
        }
        if time_labels.len() != t_len {
            return Err(Error::shape(
                format!("{t_len} time labels"),
                time_labels.len().to_string(),
            ));
        }
        if let Some(t) = (0..t0).find(|&t| !treated_mask[t]) {
            return Err(Error::MissingPreTreated(time_labels[t].clone()));
        }
        for ((x, m), lbl) in donors
            .iter()
            .zip(mask.iter())
            .zip(std::iter::repeat("donor"))
            .chain(
                treated
                    .iter()
                    .zip(treated_mask.iter())
                    .zip(std::iter::repeat("treated")),
            )
        {
            if *m && !x.is_finite() {
                return Err(Error::NonFinite(format!("{lbl} observation {x}")));
            }
        }

        let mut donors = donors;
        donors.zip_apply(&mask, |x, observed| {
            if !observed {
                *x = 0.0;
            }
        });
        let mut treated = treated;
        for (x, &observed) in treated.iter_mut().zip(&treated_mask) {
            if !observed {
                *x = 0.0;
            }
        }
        Ok(PanelMatrix {
            donors,
            mask,
            treated,
            treated_mask,
            t0,
            unit_labels,
            time_labels,
        })
    }

    /// Fully observed panel with default labels `treated`, `unit_1`, … and
    /// periods `1..=T`.
    pub fn from_dense(donors: DMatrix<f64>, treated: DVector<f64>, t0: usize) -> Result<Self> {
        let (n, t) = donors.shape();
        let mask = DMatrix::from_element(n, t, true);
        let mut units = vec!["treated".to_string()];
        units.extend((1..=n).map(|i| format!("unit_{i}")));
        let times = (1..=t).map(|t| t.to_string()).collect();
        Self::new(donors, mask, treated, vec![true; t], t0, units, times)
    }

    pub fn n_donors(&self) -> usize {
        self.donors.nrows()
    }

    pub fn n_units(&self) -> usize {
        self.donors.nrows() + 1
    }

    pub fn n_periods(&self) -> usize {
        self.donors.ncols()
    }

    /// Number of pre-intervention periods.
    pub fn t0(&self) -> usize {
        self.t0
    }

    /// Zero-filled donor observations `Y`.
    pub fn donors(&self) -> &DMatrix<f64> {
        &self.donors
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn treated(&self) -> &DVector<f64> {
        &self.treated
    }

    pub fn treated_mask(&self) -> &[bool] {
        &self.treated_mask
    }

    /// Treated observations for `t ≤ T₀`.
    pub fn treated_pre(&self) -> DVector<f64> {
        self.treated.rows(0, self.t0).into_owned()
    }

    /// Zero-filled donor columns for `t ≤ T₀`.
    pub fn donors_pre(&self) -> DMatrix<f64> {
        self.donors.columns(0, self.t0).into_owned()
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn treated_label(&self) -> &str {
        &self.unit_labels[0]
    }

    pub fn donor_labels(&self) -> &[String] {
        &self.unit_labels[1..]
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn observed_donor_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Value of unit `unit` (0 = treated) at period `t`, `None` if unobserved.
    pub fn value(&self, unit: usize, t: usize) -> Option<f64> {
        if unit == 0 {
            self.treated_mask[t].then(|| self.treated[t])
        } else {
            self.mask[(unit - 1, t)].then(|| self.donors[(unit - 1, t)])
        }
    }

    /// Rebuilds the panel with unit `unit` (index into [`Self::unit_labels`])
    /// as the treated row. The previous treated unit becomes a donor unless
    /// `drop_previous` is set.
    pub fn with_treated(&self, unit: usize, drop_previous: bool) -> Result<Self> {
        let n_units = self.n_units();
        if unit >= n_units {
            return Err(Error::InvalidParameter(format!(
                "unit index {unit} out of range for {n_units} units"
            )));
        }
        let t_len = self.n_periods();
        let donor_units: Vec<usize> = (0..n_units)
            .filter(|&u| u != unit && !(drop_previous && u == 0))
            .collect();
        let donors = DMatrix::from_fn(donor_units.len(), t_len, |i, t| {
            self.value(donor_units[i], t).unwrap_or(0.0)
        });
        let mask = DMatrix::from_fn(donor_units.len(), t_len, |i, t| {
            self.value(donor_units[i], t).is_some()
        });
        let treated = DVector::from_fn(t_len, |t, _| self.value(unit, t).unwrap_or(0.0));
        let treated_mask = (0..t_len).map(|t| self.value(unit, t).is_some()).collect();
        let mut labels = vec![self.unit_labels[unit].clone()];
        labels.extend(donor_units.iter().map(|&u| self.unit_labels[u].clone()));
        Self::new(
            donors,
            mask,
            treated,
            treated_mask,
            self.t0,
            labels,
            self.time_labels.clone(),
        )
    }

    /// Copy of the panel with the given donor values (mask unchanged).
    pub(crate) fn with_values(&self, donors: DMatrix<f64>, treated: DVector<f64>) -> Self {
        let mut out = self.clone();
        out.donors = donors;
        out.treated = treated;
        out.donors.zip_apply(&self.mask, |x, observed| {
            if !observed {
                *x = 0.0;
            }
        });
        for (x, &observed) in out.treated.iter_mut().zip(&self.treated_mask) {
            if !observed {
                *x = 0.0;
            }
        }
        out
    }
}

/// Affine map sending `[a, b]` onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsTransform {
    a: f64,
    b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl BoundsTransform {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(Error::InvalidParameter(format!(
                "bounds must satisfy a < b, got [{a}, {b}]"
            )));
        }
        Ok(BoundsTransform { a, b })
    }

    pub fn lower(&self) -> f64 {
        self.a
    }

    pub fn upper(&self) -> f64 {
        self.b
    }

    /// `(a + b) / 2`.
    pub fn center(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    /// `(b − a) / 2`.
    pub fn half_range(&self) -> f64 {
        0.5 * (self.b - self.a)
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.center()) / self.half_range()
    }

    pub fn inverse(&self, y: f64) -> f64 {
        y * self.half_range() + self.center()
    }

    pub fn apply(&self, x: f64, direction: Direction) -> f64 {
        match direction {
            Direction::Forward => self.forward(x),
            Direction::Inverse => self.inverse(x),
        }
    }
}

/// Smallest interval covering every observed entry, donors and treated.
/// A constant panel value `c` gives `[c − 1, c + 1]`.
pub fn fit_bounds(panel: &PanelMatrix) -> Result<BoundsTransform> {
    let observed = panel
        .donors
        .iter()
        .zip(panel.mask.iter())
        .filter(|(_, &m)| m)
        .map(|(x, _)| *x)
        .chain(
            panel
                .treated
                .iter()
                .zip(&panel.treated_mask)
                .filter(|(_, &m)| m)
                .map(|(x, _)| *x),
        );
    let (lo, hi) = observed.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    if lo > hi {
        return Err(Error::EmptyPanel);
    }
    if lo == hi {
        BoundsTransform::new(lo - 1.0, hi + 1.0)
    } else {
        BoundsTransform::new(lo, hi)
    }
}

/// Maps every observed entry through the transform; unobserved cells stay 0.
pub fn apply_bounds(
    panel: &PanelMatrix,
    transform: &BoundsTransform,
    direction: Direction,
) -> PanelMatrix {
    let donors = panel.donors.map(|x| transform.apply(x, direction));
    let treated = panel.treated.map(|x| transform.apply(x, direction));
    panel.with_values(donors, treated)
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("nan")
}

/// Reads a panel from CSV.
///
/// Rows are units (first column is the unit label) and the header holds the
/// period labels. Blank or `NaN` cells are missing. `t0_label` names the last
/// pre-intervention period.
pub fn read_csv<R: Read>(reader: R, treated_label: &str, t0_label: &str) -> Result<PanelMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let time_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let t0 = time_labels
        .iter()
        .position(|l| l == t0_label)
        .map(|i| i + 1)
        .ok_or_else(|| Error::MissingTimeLabel(t0_label.to_string()))?;

    let mut labels = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let mut cells = record.iter();
        let label = cells.next().unwrap_or_default().to_string();
        let mut row = Vec::with_capacity(time_labels.len());
        for (cell, period) in cells.zip(&time_labels) {
            if is_missing(cell) {
                row.push(None);
            } else {
                let x: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                    unit: label.clone(),
                    period: period.clone(),
                    value: cell.to_string(),
                })?;
                row.push(if x.is_nan() { None } else { Some(x) });
            }
        }
        labels.push(label);
        rows.push(row);
    }

    let treated_idx = labels
        .iter()
        .position(|l| l == treated_label)
        .ok_or_else(|| Error::MissingTreated(treated_label.to_string()))?;
    let t_len = time_labels.len();
    let donor_rows: Vec<usize> = (0..rows.len()).filter(|&i| i != treated_idx).collect();
    let donors = DMatrix::from_fn(donor_rows.len(), t_len, |i, t| {
        rows[donor_rows[i]][t].unwrap_or(0.0)
    });
    let mask = DMatrix::from_fn(donor_rows.len(), t_len, |i, t| {
        rows[donor_rows[i]][t].is_some()
    });
    let treated_row = &rows[treated_idx];
    let treated = DVector::from_fn(t_len, |t, _| treated_row[t].unwrap_or(0.0));
    let treated_mask = treated_row.iter().map(Option::is_some).collect();
    let mut unit_labels = vec![labels[treated_idx].clone()];
    unit_labels.extend(donor_rows.iter().map(|&i| labels[i].clone()));
    PanelMatrix::new(
        donors,
        mask,
        treated,
        treated_mask,
        t0,
        unit_labels,
        time_labels,
    )
}

pub fn load_csv(
    path: impl AsRef<Path>,
    treated_label: &str,
    t0_label: &str,
) -> Result<PanelMatrix> {
    read_csv(File::open(path)?, treated_label, t0_label)
}

/// Writes the panel in the format [`read_csv`] accepts, treated row first.
/// The header's first cell is `unit`.
pub fn write_csv_to<W: Write>(panel: &PanelMatrix, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["unit".to_string()];
    header.extend(panel.time_labels.iter().cloned());
    wtr.write_record(&header)?;
    for (u, label) in panel.unit_labels.iter().enumerate() {
        let mut record = vec![label.clone()];
        record.extend((0..panel.n_periods()).map(|t| match panel.value(u, t) {
            Some(x) => x.to_string(),
            None => String::new(),
        }));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv(panel: &PanelMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_csv_to(panel, File::create(path)?)
}
