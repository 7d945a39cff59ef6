//! File formats: long-form panel CSV and flat TOML parameter files.
//!
//! Panel CSV is long format with header `unit_id,time,z,y,x1..xp`,
//! UTF-8, comma-separated, `.` decimal. Every (unit, time) pair appears
//! exactly once, `z` and the covariates are constant within unit, and
//! the time values of every unit cover the full range `0..=T`.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::dgp::{CanonicalParams, DgpParams, LatentLaw};
use crate::error::{Error, Result};
use crate::panel::PanelData;

/// 17-significant-digit decimal rendering, enough for f64 round-trips to
/// be exact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders a panel in the long CSV schema.
pub fn panel_to_csv(panel: &PanelData) -> String {
    let p = panel.n_covariates();
    let mut header = String::from("unit_id,time,z,y");
    for j in 1..=p {
        header.push_str(&format!(",x{j}"));
    }
    let mut out = header;
    out.push('\n');
    for i in 0..panel.n() {
        for t in 0..panel.n_periods() {
            out.push_str(&format!(
                "{},{},{},{}",
                panel.unit_ids()[i],
                t,
                u8::from(panel.is_treated(i)),
                fmt_f64(panel.outcome(i, t))
            ));
            for j in 0..p {
                out.push(',');
                out.push_str(&fmt_f64(panel.covariates()[(i, j)]));
            }
            out.push('\n');
        }
    }
    out
}

/// Writes a panel as CSV.
pub fn write_panel(panel: &PanelData, path: &Path) -> Result<()> {
    std::fs::write(path, panel_to_csv(panel))?;
    Ok(())
}

/// Loads and validates a panel from CSV, inferring T from the data.
pub fn load_panel(path: &Path) -> Result<PanelData> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::InvalidData(format!("cannot open {}: {e}", path.display()))
    })?;
    parse_panel(file)
}

struct UnitAccum {
    order: usize,
    z: bool,
    x: Vec<f64>,
    outcomes: HashMap<usize, f64>,
}

/// Parses the long CSV schema from any reader. Every schema violation
/// reports the offending 1-based data row.
pub fn parse_panel<R: Read>(reader: R) -> Result<PanelData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::InvalidData(format!("cannot read header: {e}")))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[0] != "unit_id" || cols[1] != "time" || cols[2] != "z" || cols[3] != "y"
    {
        return Err(Error::InvalidData(format!(
            "header must be unit_id,time,z,y,x1..xp; got {}",
            cols.join(",")
        )));
    }
    let p = cols.len() - 4;
    for (j, col) in cols[4..].iter().enumerate() {
        let want = format!("x{}", j + 1);
        if *col != want {
            return Err(Error::InvalidData(format!(
                "covariate column {} must be named {want}, got {col}",
                j + 5
            )));
        }
    }

    let mut units: HashMap<String, UnitAccum> = HashMap::new();
    let mut t_max = 0usize;
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record =
            record.map_err(|e| Error::InvalidData(format!("row {row}: {e}")))?;
        if record.len() != cols.len() {
            return Err(Error::InvalidData(format!(
                "row {row}: expected {} fields, got {}",
                cols.len(),
                record.len()
            )));
        }
        let unit_id = record[0].to_string();
        let time: usize = record[1]
            .parse()
            .map_err(|_| Error::InvalidData(format!("row {row}: bad time '{}'", &record[1])))?;
        let z = match &record[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::InvalidData(format!(
                    "row {row}: z must be 0 or 1, got '{other}'"
                )))
            }
        };
        let y: f64 = record[3]
            .parse()
            .map_err(|_| Error::InvalidData(format!("row {row}: bad y '{}'", &record[3])))?;
        let mut x = Vec::with_capacity(p);
        for j in 0..p {
            let v: f64 = record[4 + j].parse().map_err(|_| {
                Error::InvalidData(format!("row {row}: bad x{} '{}'", j + 1, &record[4 + j]))
            })?;
            x.push(v);
        }
        t_max = t_max.max(time);

        let order = units.len();
        let entry = units.entry(unit_id.clone()).or_insert_with(|| UnitAccum {
            order,
            z,
            x: x.clone(),
            outcomes: HashMap::new(),
        });
        if entry.z != z {
            return Err(Error::InvalidData(format!(
                "row {row}: treatment flag changes within unit {unit_id}"
            )));
        }
        if entry.x != x {
            return Err(Error::InvalidData(format!(
                "row {row}: covariates change within unit {unit_id}"
            )));
        }
        if entry.outcomes.insert(time, y).is_some() {
            return Err(Error::InvalidData(format!(
                "row {row}: duplicate (unit_id, time) pair ({unit_id}, {time})"
            )));
        }
    }
    if units.is_empty() {
        return Err(Error::InvalidData("panel file has no data rows".into()));
    }
    if t_max == 0 {
        return Err(Error::InvalidData(
            "panel needs at least two periods (one pre, one post)".into(),
        ));
    }

    let mut ordered: Vec<(String, UnitAccum)> = units.into_iter().collect();
    ordered.sort_by_key(|(_, u)| u.order);
    let n = ordered.len();
    let t_pre = t_max;
    let mut ids = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut y = DMatrix::zeros(n, t_pre + 1);
    let mut x = DMatrix::zeros(n, p);
    for (i, (id, unit)) in ordered.into_iter().enumerate() {
        for t in 0..=t_pre {
            match unit.outcomes.get(&t) {
                Some(&v) => y[(i, t)] = v,
                None => {
                    return Err(Error::InvalidData(format!(
                        "unbalanced panel: unit {id} missing t={t}"
                    )))
                }
            }
        }
        for j in 0..p {
            x[(i, j)] = unit.x[j];
        }
        ids.push(id);
        z.push(unit.z);
    }
    let panel = PanelData::new(ids, z, y, x, t_pre, None)?;
    panel.check_group_convention()?;
    Ok(panel)
}

/// Flat key-value mirror of [`DgpParams`] for the TOML config format;
/// matrices are row-major lists.
#[derive(Debug, Deserialize, serde::Serialize)]
pub struct DgpConfig {
    pub n_units: usize,
    pub p_treated: f64,
    pub t_pre: usize,
    /// Latent dimension q.
    pub q: usize,
    /// Covariate dimension p.
    pub p: usize,
    /// Length T+1.
    pub beta0: Vec<f64>,
    /// (T+1) x q, row-major (one row per period).
    pub beta_theta: Vec<f64>,
    /// (T+1) x p, row-major.
    pub beta_x: Vec<f64>,
    pub mu_theta_control: Vec<f64>,
    pub mu_theta_treated: Vec<f64>,
    pub mu_x_control: Vec<f64>,
    pub mu_x_treated: Vec<f64>,
    /// q x q, row-major.
    pub sigma_theta_theta: Vec<f64>,
    /// p x p, row-major.
    pub sigma_xx: Vec<f64>,
    /// q x p, row-major.
    pub sigma_theta_x: Vec<f64>,
    pub sigma_e2: f64,
    pub tau: f64,
    pub latent_law: LatentLaw,
}

fn matrix_from_rows(
    name: &str,
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Config(format!(
            "{name}: expected {rows}x{cols} = {} entries, got {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

fn per_period_vectors(
    name: &str,
    periods: usize,
    dim: usize,
    data: &[f64],
) -> Result<Vec<DVector<f64>>> {
    if data.len() != periods * dim {
        return Err(Error::Config(format!(
            "{name}: expected {periods}x{dim} = {} entries, got {}",
            periods * dim,
            data.len()
        )));
    }
    Ok((0..periods)
        .map(|t| DVector::from_row_slice(&data[t * dim..(t + 1) * dim]))
        .collect())
}

impl DgpConfig {
    pub fn into_params(self) -> Result<DgpParams> {
        let t1 = self.t_pre + 1;
        Ok(DgpParams {
            n_units: self.n_units,
            p_treated: self.p_treated,
            t_pre: self.t_pre,
            beta0: self.beta0,
            beta_theta: per_period_vectors("beta_theta", t1, self.q, &self.beta_theta)?,
            beta_x: per_period_vectors("beta_x", t1, self.p, &self.beta_x)?,
            mu_theta: [
                DVector::from_row_slice(&self.mu_theta_control),
                DVector::from_row_slice(&self.mu_theta_treated),
            ],
            mu_x: [
                DVector::from_row_slice(&self.mu_x_control),
                DVector::from_row_slice(&self.mu_x_treated),
            ],
            sigma_theta_theta: matrix_from_rows(
                "sigma_theta_theta",
                self.q,
                self.q,
                &self.sigma_theta_theta,
            )?,
            sigma_xx: matrix_from_rows("sigma_xx", self.p, self.p, &self.sigma_xx)?,
            sigma_theta_x: matrix_from_rows(
                "sigma_theta_x",
                self.q,
                self.p,
                &self.sigma_theta_x,
            )?,
            sigma_e2: self.sigma_e2,
            tau: self.tau,
            latent_law: self.latent_law,
        })
    }

    pub fn from_params(params: &DgpParams) -> Self {
        let flatten_periods = |vs: &[DVector<f64>]| -> Vec<f64> {
            vs.iter()
                .flat_map(|v| v.iter().copied().collect::<Vec<_>>())
                .collect()
        };
        let flatten_matrix = |m: &DMatrix<f64>| -> Vec<f64> {
            let mut out = Vec::with_capacity(m.nrows() * m.ncols());
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push(m[(r, c)]);
                }
            }
            out
        };
        DgpConfig {
            n_units: params.n_units,
            p_treated: params.p_treated,
            t_pre: params.t_pre,
            q: params.q(),
            p: params.p(),
            beta0: params.beta0.clone(),
            beta_theta: flatten_periods(&params.beta_theta),
            beta_x: flatten_periods(&params.beta_x),
            mu_theta_control: params.mu_theta[0].iter().copied().collect(),
            mu_theta_treated: params.mu_theta[1].iter().copied().collect(),
            mu_x_control: params.mu_x[0].iter().copied().collect(),
            mu_x_treated: params.mu_x[1].iter().copied().collect(),
            sigma_theta_theta: flatten_matrix(&params.sigma_theta_theta),
            sigma_xx: flatten_matrix(&params.sigma_xx),
            sigma_theta_x: flatten_matrix(&params.sigma_theta_x),
            sigma_e2: params.sigma_e2,
            tau: params.tau,
            latent_law: params.latent_law,
        }
    }
}

/// Reads structural parameters from a flat TOML file.
pub fn load_dgp_params(path: &Path) -> Result<DgpParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: DgpConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.into_params()
}

/// Serializes structural parameters to the flat TOML schema.
pub fn dgp_params_to_toml(params: &DgpParams) -> Result<String> {
    toml::to_string(&DgpConfig::from_params(params))
        .map_err(|e| Error::Config(format!("cannot serialize parameters: {e}")))
}

/// Reads univariate two-period parameters from TOML.
pub fn load_canonical_params(path: &Path) -> Result<CanonicalParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let c: CanonicalParams = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    c.validate()?;
    Ok(c)
}
