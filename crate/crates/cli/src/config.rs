//! Run configuration: command-line flags over a TOML file over per-command defaults.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use fqh_graviton::circuits::MAX_QUBITS;
use fqh_graviton::dynamics::MAX_FULL_ELECTRONS;

use crate::CliError;

/// Every setting is optional here; the same struct parses flags and config files.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Number of electrons.
    #[arg(long)]
    pub n: Option<usize>,
    /// Cylinder circumference in magnetic lengths.
    #[arg(long)]
    pub l2: Option<f64>,
    /// Post-quench stretch Q.
    #[arg(long)]
    pub q: Option<f64>,
    /// Post-quench rotation angle.
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub tmax: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Trotter steps.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub shots: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Depolarizing probability after single-qubit gates.
    #[arg(long)]
    pub noise_p1: Option<f64>,
    /// Depolarizing probability after CNOTs.
    #[arg(long)]
    pub noise_p2: Option<f64>,
    /// Symmetric readout flip probability.
    #[arg(long)]
    pub readout: Option<f64>,
    /// Lorentzian broadening of the spectral function.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Comma-separated system sizes for trajectories and extrapolation.
    #[arg(long, value_delimiter = ',')]
    pub n_list: Option<Vec<usize>>,
    /// Order of the 1/N extrapolation polynomial.
    #[arg(long)]
    pub order: Option<usize>,
    /// Input table (trajectory CSV for extrapolate, metric trace CSV for bimetric-fit).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(skip)]
    pub omega_max: Option<f64>,
    #[arg(skip)]
    pub d_omega: Option<f64>,
    /// Fock sectors `K0 - k_span ..= K0 + k_span` enter the spectrum.
    #[arg(skip)]
    pub k_span: Option<i64>,
    #[arg(skip)]
    pub anneal: Option<usize>,
    #[arg(skip)]
    pub refine: Option<usize>,
    #[arg(skip)]
    pub l2_sweep: Option<Vec<f64>>,
    #[arg(skip)]
    pub sweep_n: Option<usize>,
    /// TOML file with any of the settings above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Quench,
    Spectrum,
    Variational,
    Extrapolate,
    Trotter,
    Compare,
    BimetricFit,
}

/// Fully resolved settings, echoed into `run_meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub n: usize,
    pub l2: f64,
    pub q: f64,
    pub phi: f64,
    pub tmax: f64,
    pub dt: f64,
    pub k: usize,
    pub shots: u64,
    pub seed: u64,
    pub noise_p1: f64,
    pub noise_p2: f64,
    pub readout: f64,
    pub eta: f64,
    pub out: PathBuf,
    pub threads: usize,
    pub n_list: Vec<usize>,
    pub order: usize,
    pub input: Option<PathBuf>,
    pub omega_max: f64,
    pub d_omega: f64,
    pub k_span: i64,
    pub anneal: usize,
    pub refine: usize,
    pub l2_sweep: Vec<f64>,
    pub sweep_n: usize,
}

impl Settings {
    pub fn defaults(cmd: Command) -> Self {
        let base = Settings {
            n: 9,
            l2: 5.477,
            q: 0.18,
            phi: 0.0,
            tmax: 10.0,
            dt: 0.05,
            k: 15,
            shots: 100_000,
            seed: 0,
            noise_p1: 0.0,
            noise_p2: 0.0,
            readout: 0.0,
            eta: 0.05,
            out: PathBuf::new(),
            threads: 1,
            n_list: vec![7, 9, 11, 13],
            order: 3,
            input: None,
            omega_max: 4.0,
            d_omega: 0.001,
            k_span: 2,
            anneal: 2000,
            refine: 200,
            l2_sweep: vec![2.75, 3.15, 5.477],
            sweep_n: 9,
        };
        match cmd {
            Command::Spectrum => Settings { n: 7, ..base },
            Command::Variational | Command::Extrapolate => Settings { tmax: 6.0, dt: 0.25, ..base },
            Command::Trotter => Settings { n: 5, tmax: 6.0, dt: 0.25, ..base },
            Command::Compare => Settings { n: 6, l2: 6.245, q: 0.26, dt: 0.1, ..base },
            Command::Quench | Command::BimetricFit => base,
        }
    }

    /// Merge flags over the config file over the defaults, then validate.
    pub fn resolve(cmd: Command, flags: &Overrides) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => read_config(path)?,
            None => Overrides::default(),
        };
        let d = Self::defaults(cmd);
        macro_rules! pick {
            ($f:ident) => {
                flags.$f.clone().or_else(|| file.$f.clone()).unwrap_or(d.$f)
            };
        }
        let out = flags
            .out
            .clone()
            .or_else(|| file.out.clone())
            .ok_or_else(|| CliError::Usage("an output directory is required (--out or `out` in the config file)".into()))?;
        let s = Settings {
            n: pick!(n),
            l2: pick!(l2),
            q: pick!(q),
            phi: pick!(phi),
            tmax: pick!(tmax),
            dt: pick!(dt),
            k: pick!(k),
            shots: pick!(shots),
            seed: pick!(seed),
            noise_p1: pick!(noise_p1),
            noise_p2: pick!(noise_p2),
            readout: pick!(readout),
            eta: pick!(eta),
            out,
            threads: pick!(threads),
            n_list: pick!(n_list),
            order: pick!(order),
            input: flags.input.clone().or_else(|| file.input.clone()),
            omega_max: pick!(omega_max),
            d_omega: pick!(d_omega),
            k_span: pick!(k_span),
            anneal: pick!(anneal),
            refine: pick!(refine),
            l2_sweep: pick!(l2_sweep),
            sweep_n: pick!(sweep_n),
        };
        s.validate(cmd)?;
        Ok(s)
    }

    pub fn validate(&self, cmd: Command) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Usage(msg));
        let positive = |name: &str, v: f64| if v.is_finite() && v > 0.0 { Ok(()) } else { bad(format!("{name} must be positive, got {v}")) };
        let probability =
            |name: &str, v: f64| if (0.0..=1.0).contains(&v) { Ok(()) } else { bad(format!("{name} must lie in [0, 1], got {v}")) };
        if self.n < 2 {
            return bad(format!("N must be at least 2, got {}", self.n));
        }
        positive("L2", self.l2)?;
        positive("dt", self.dt)?;
        positive("eta", self.eta)?;
        positive("omega range", self.omega_max)?;
        positive("omega step", self.d_omega)?;
        if !self.q.is_finite() || self.q < 0.0 {
            return bad(format!("Q must be finite and non-negative, got {}", self.q));
        }
        if !self.phi.is_finite() {
            return bad("phi must be finite".into());
        }
        if !self.tmax.is_finite() || self.tmax < 0.0 {
            return bad(format!("tmax must be finite and non-negative, got {}", self.tmax));
        }
        if self.shots == 0 {
            return bad("shots must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.k_span < 0 {
            return bad(format!("k_span must be non-negative, got {}", self.k_span));
        }
        probability("noise-p1", self.noise_p1)?;
        probability("noise-p2", self.noise_p2)?;
        probability("readout", self.readout)?;
        if self.anneal == 0 && self.refine == 0 {
            return bad("optimizer budget is empty".into());
        }
        if self.n_list.is_empty() || self.n_list.iter().any(|&n| n < 2) {
            return bad(format!("n-list needs sizes of at least 2, got {:?}", self.n_list));
        }
        if !(self.order == 2 || self.order == 3) {
            return bad(format!("order must be 2 or 3, got {}", self.order));
        }
        if self.l2_sweep.iter().any(|&l| !(l.is_finite() && l > 0.0)) || self.sweep_n < 2 {
            return bad("L2 sweep needs positive circumferences and N >= 2".into());
        }
        match cmd {
            Command::Compare if self.n > MAX_FULL_ELECTRONS => {
                bad(format!("compare builds the full Fock Hamiltonian and needs N <= {MAX_FULL_ELECTRONS}, got {}", self.n))
            }
            Command::Compare if self.phi != 0.0 => bad("compare quenches along Q only; phi must be 0".into()),
            Command::Trotter if self.n - 1 > MAX_QUBITS => bad(format!("trotter needs N - 1 <= {MAX_QUBITS} qubits, got {}", self.n - 1)),
            Command::BimetricFit if self.input.is_none() => bad("bimetric-fit needs --input with a metric trace CSV".into()),
            _ => Ok(()),
        }
    }

    /// `0, dt, 2 dt, …, tmax`.
    pub fn time_grid(&self) -> Vec<f64> {
        let steps = (self.tmax / self.dt + 1e-9).floor() as usize;
        (0..=steps).map(|i| i as f64 * self.dt).collect()
    }

    pub fn omega_grid(&self) -> Vec<f64> {
        let steps = (self.omega_max / self.d_omega + 1e-9).floor() as usize;
        (0..=steps).map(|i| i as f64 * self.d_omega).collect()
    }
}

fn read_config(path: &Path) -> Result<Overrides, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}
