//! Subprocess bridge to an external GFN2-xTB executable.
//!
//! Positions arrive in Bohr, are written to an XYZ file in Angstrom, and the
//! Turbomole-style `gradient` file is read back in Eh and Eh/Bohr. Every
//! runtime failure comes back as `OracleEval::failed`.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::geomstate::AtomLabels;
use crate::toyoracle::{relax_with, Oracle, OracleEval, RelaxSettings, Relaxation, Relaxer};

pub const BOHR_PER_ANGSTROM: f64 = 1.0 / 0.529177210903;
pub const PATH_ENV: &str = "OGD_XTB_PATH";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XtbConfig {
    pub executable_path: PathBuf,
    /// Parent for per-call scratch directories; the system temp dir if unset.
    pub workdir_root: Option<PathBuf>,
    /// Seconds.
    pub timeout: f64,
    pub extra_args: Vec<String>,
}

impl Default for XtbConfig {
    fn default() -> Self {
        Self {
            executable_path: PathBuf::from("xtb"),
            workdir_root: None,
            timeout: 120.0,
            extra_args: Vec::new(),
        }
    }
}

impl XtbConfig {
    /// Applies the `OGD_XTB_PATH` override, if set.
    pub fn with_env_override(mut self) -> Self {
        if let Some(path) = std::env::var_os(PATH_ENV).filter(|p| !p.is_empty()) {
            self.executable_path = PathBuf::from(path);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "xtb timeout must be > 0, got {}",
                self.timeout
            )));
        }
        Ok(())
    }

    /// The executable as an existing file, looked up on `PATH` for bare names.
    pub fn resolve_executable(&self) -> Result<PathBuf> {
        let path = &self.executable_path;
        if path.is_file() {
            return Ok(path.clone());
        }
        if path.components().count() == 1 {
            if let Some(dirs) = std::env::var_os("PATH") {
                for dir in std::env::split_paths(&dirs) {
                    let candidate = dir.join(path);
                    if candidate.is_file() {
                        return Ok(candidate);
                    }
                }
            }
        }
        Err(Error::ExecutableMissing(path.clone()))
    }
}

/// XYZ text with positions in Angstrom, fixed-point with ten decimals.
pub fn write_xyz(labels: &AtomLabels, positions_angstrom: &DMatrix<f64>) -> Result<String> {
    write_xyz_commented(labels, positions_angstrom, "")
}

/// As [`write_xyz`], with `comment` on the second line.
pub fn write_xyz_commented(
    labels: &AtomLabels,
    positions_angstrom: &DMatrix<f64>,
    comment: &str,
) -> Result<String> {
    let n = positions_angstrom.nrows();
    if n == 0 {
        return Err(Error::InvalidParameter("xyz needs at least one atom".into()));
    }
    if positions_angstrom.ncols() != 3 {
        return Err(Error::ShapeMismatch {
            expected: (n, 3),
            actual: positions_angstrom.shape(),
        });
    }
    if labels.len() != n {
        return Err(Error::LabelMismatch {
            labels: labels.len(),
            atoms: n,
        });
    }
    if positions_angstrom.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("xyz positions"));
    }
    if comment.contains('\n') {
        return Err(Error::InvalidParameter("xyz comment must be one line".into()));
    }
    let mut out = format!("{n}\n{comment}\n");
    for (i, symbol) in labels.0.iter().enumerate() {
        let r = positions_angstrom.row(i);
        out.push_str(&format!("{symbol} {:.10} {:.10} {:.10}\n", r[0], r[1], r[2]));
    }
    Ok(out)
}

pub fn parse_xyz(text: &str) -> Result<(AtomLabels, DMatrix<f64>)> {
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| Error::Parse("xyz: missing atom count".into()))?;
    lines
        .next()
        .ok_or_else(|| Error::Parse("xyz: missing comment line".into()))?;
    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(3 * n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("xyz: expected {n} atoms, found {i}")))?;
        let mut fields = line.split_whitespace();
        let symbol = fields
            .next()
            .ok_or_else(|| Error::Parse(format!("xyz: empty atom line {}", i + 3)))?;
        labels.push(symbol.to_string());
        for _ in 0..3 {
            let field = fields
                .next()
                .ok_or_else(|| Error::Parse(format!("xyz: short atom line {}", i + 3)))?;
            values.push(parse_number(field)?);
        }
    }
    Ok((AtomLabels(labels), DMatrix::from_row_slice(n, 3, &values)))
}

/// Accepts Fortran `D` exponents and never consults the locale.
fn parse_number(field: &str) -> Result<f64> {
    let normalized = field.replace(['D', 'd'], "E");
    normalized
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse(format!("not a number: `{field}`")))
}

/// Energy (Eh) and gradient (Eh/Bohr) from the last cycle of a Turbomole
/// `$grad` block.
pub fn parse_gradient(text: &str, n_atoms: usize) -> Result<(f64, DMatrix<f64>)> {
    let lines: Vec<&str> = text.lines().map(str::trim).collect();
    let start = lines
        .iter()
        .position(|l| l.starts_with("$grad"))
        .ok_or_else(|| Error::Parse("gradient: no $grad block".into()))?;
    let cycle = lines[start + 1..]
        .iter()
        .rposition(|l| l.starts_with("cycle"))
        .map(|i| start + 1 + i)
        .ok_or_else(|| Error::Parse("gradient: no cycle line".into()))?;

    let energy_field = lines[cycle]
        .split("energy =")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .ok_or_else(|| Error::Parse("gradient: no energy on cycle line".into()))?;
    let energy = parse_number(energy_field)?;

    let body = &lines[cycle + 1..];
    if body.len() < 2 * n_atoms {
        return Err(Error::Parse("gradient: truncated block".into()));
    }
    for line in &body[..n_atoms] {
        if line.split_whitespace().count() != 4 {
            return Err(Error::Parse(format!("gradient: bad coordinate line `{line}`")));
        }
    }
    let mut values = Vec::with_capacity(3 * n_atoms);
    for line in &body[n_atoms..2 * n_atoms] {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!("gradient: bad gradient line `{line}`")));
        }
        for f in fields {
            values.push(parse_number(f)?);
        }
    }
    if body.get(2 * n_atoms).is_some_and(|l| !l.starts_with('$')) {
        return Err(Error::Parse("gradient: atom count mismatch".into()));
    }
    Ok((energy, DMatrix::from_row_slice(n_atoms, 3, &values)))
}

fn stdout_reports_failure(stdout: &str) -> bool {
    let lower = stdout.to_ascii_lowercase();
    lower.contains("scf not converged") || lower.contains("abnormal termination")
}

/// One blocking call of the executable in a fresh scratch directory.
pub fn invoke(
    cfg: &XtbConfig,
    executable: &Path,
    labels: &AtomLabels,
    positions_bohr: &DMatrix<f64>,
) -> OracleEval {
    let n = positions_bohr.nrows();
    run_once(cfg, executable, labels, positions_bohr).unwrap_or_else(|| OracleEval::failed(n))
}

fn run_once(
    cfg: &XtbConfig,
    executable: &Path,
    labels: &AtomLabels,
    positions_bohr: &DMatrix<f64>,
) -> Option<OracleEval> {
    let n = positions_bohr.nrows();
    let xyz = write_xyz(labels, &(positions_bohr / BOHR_PER_ANGSTROM)).ok()?;
    let dir = match &cfg.workdir_root {
        Some(root) => tempfile::Builder::new().prefix("xtb-").tempdir_in(root),
        None => tempfile::Builder::new().prefix("xtb-").tempdir(),
    }
    .ok()?;
    fs::write(dir.path().join("input.xyz"), xyz).ok()?;
    let stdout_path = dir.path().join("xtb.out");
    let stdout = File::create(&stdout_path).ok()?;

    let mut child = Command::new(executable)
        .arg("input.xyz")
        .arg("--grad")
        .args(&cfg.extra_args)
        .current_dir(dir.path())
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(Stdio::null())
        .spawn()
        .ok()?;
    let status = match child.wait_timeout(Duration::from_secs_f64(cfg.timeout)) {
        Ok(Some(status)) => status,
        _ => {
            let _ = child.kill();
            let _ = child.wait();
            return None;
        }
    };
    if !status.success() {
        return None;
    }
    let out = fs::read_to_string(&stdout_path).unwrap_or_default();
    if stdout_reports_failure(&out) {
        return None;
    }
    let text = fs::read_to_string(dir.path().join("gradient")).ok()?;
    let (energy, gradient) = parse_gradient(&text, n).ok()?;
    Some(OracleEval {
        energy,
        gradient,
        converged: true,
    })
}

/// Oracle backed by the external executable. Labels default to carbon.
#[derive(Debug, Clone)]
pub struct XtbOracle {
    config: XtbConfig,
    executable: PathBuf,
    labels: Option<AtomLabels>,
}

impl XtbOracle {
    /// Fails eagerly when the executable cannot be found.
    pub fn new(config: XtbConfig, labels: Option<AtomLabels>) -> Result<Self> {
        config.validate()?;
        let executable = config.resolve_executable()?;
        Ok(Self {
            config,
            executable,
            labels,
        })
    }

    pub fn config(&self) -> &XtbConfig {
        &self.config
    }
}

impl Oracle for XtbOracle {
    fn evaluate(&self, positions: &DMatrix<f64>) -> OracleEval {
        let n = positions.nrows();
        match &self.labels {
            Some(labels) if labels.len() == n => {
                invoke(&self.config, &self.executable, labels, positions)
            }
            Some(_) => OracleEval::failed(n),
            None => invoke(
                &self.config,
                &self.executable,
                &AtomLabels::uniform("C", n),
                positions,
            ),
        }
    }
}

impl Relaxer for XtbOracle {
    fn relax(&self, positions: &DMatrix<f64>, max_iters: usize, tol: f64) -> Relaxation {
        relax_with(self, positions, &RelaxSettings::new(max_iters, tol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "$grad\n  cycle =      1    SCF energy =    -5.0705434630   |dG| =  0.010502\n  0.0 0.0 -0.7 o\n  0.0 1.4 0.5 h\n  0.0 -1.4 0.5 h\n  0.1D-01  -0.2D-02   0.3000000000000D+00\n  1.0E-3 2.0e-3 3\n -0.5 0.25 0.125\n$end\n";

    #[test]
    fn single_hydrogen_line() {
        let xyz = write_xyz(&AtomLabels::uniform("H", 1), &DMatrix::zeros(1, 3)).unwrap();
        assert_eq!(xyz, "1\n\nH 0.0000000000 0.0000000000 0.0000000000\n");
    }

    #[test]
    fn xyz_preconditions() {
        assert!(write_xyz(&AtomLabels(vec![]), &DMatrix::zeros(0, 3)).is_err());
        assert!(matches!(
            write_xyz(&AtomLabels::uniform("C", 2), &DMatrix::zeros(3, 3)),
            Err(Error::LabelMismatch { .. })
        ));
        let mut p = DMatrix::zeros(1, 3);
        p[(0, 1)] = f64::NAN;
        assert!(write_xyz(&AtomLabels::uniform("C", 1), &p).is_err());
    }

    #[test]
    fn xyz_round_trip() {
        let p = DMatrix::from_row_slice(2, 3, &[1.23456789012, -0.5, 3e-7, -12.75, 0.333333333333, 9.0]);
        let labels = AtomLabels(vec!["O".into(), "H".into()]);
        let (back_labels, back) = parse_xyz(&write_xyz(&labels, &p).unwrap()).unwrap();
        assert_eq!(back_labels, labels);
        assert!((back - p).amax() < 1e-9);
    }

    #[test]
    fn gradient_block_with_fortran_exponents() {
        let (e, g) = parse_gradient(SAMPLE, 3).unwrap();
        assert_eq!(e, -5.0705434630);
        assert_eq!(g[(0, 0)], 0.01);
        assert_eq!(g[(0, 1)], -0.002);
        assert_eq!(g[(0, 2)], 0.3);
        assert_eq!(g[(1, 2)], 3.0);
        assert_eq!(g[(2, 2)], 0.125);
    }

    #[test]
    fn gradient_block_rejects_wrong_atom_count_and_garbage() {
        assert!(parse_gradient(SAMPLE, 2).is_err());
        assert!(parse_gradient(SAMPLE, 4).is_err());
        assert!(parse_gradient("nothing here", 1).is_err());
        let broken = SAMPLE.replace("0.125", "0,125");
        assert!(parse_gradient(&broken, 3).is_err());
    }

    #[test]
    fn missing_executable_is_eager() {
        let cfg = XtbConfig {
            executable_path: PathBuf::from("/definitely/not/here/xtb"),
            ..Default::default()
        };
        assert!(matches!(
            XtbOracle::new(cfg, None),
            Err(Error::ExecutableMissing(_))
        ));
    }

    #[test]
    fn timeout_must_be_positive() {
        let cfg = XtbConfig {
            timeout: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
