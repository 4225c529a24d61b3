//! Run configuration files.
//!
//! A configuration is `key = value` lines followed by an `[atoms]` section
//! with one `symbol x y z Z` row per nucleus. `#` starts a comment.
//!
//! ```text
//! name = helium
//! box = -10 10
//! mode = augmented
//! reference_energy = -2.90372
//!
//! [atoms]
//! He 0 0 0 2
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ksfem_core::adapt::{AdaptiveFunction, DriverConfig, SolverMode};
use ksfem_core::augmented::ShiftRule;
use ksfem_core::mesh::BoxDomain;
use ksfem_core::potentials::{Atom, MolecularSystem};

use crate::CliError;

/// Keys accepted before the `[atoms]` section.
pub const KEYS: &[&str] = &[
    "name",
    "box",
    "orbitals",
    "occupation",
    "mode",
    "seed",
    "out",
    "reference_energy",
    "epsilon",
    "h_min",
    "h_max",
    "k_asm",
    "k_max",
    "driver_tol",
    "adaptive_function",
    "initial_cells",
    "growth",
    "max_cells",
    "sweeps",
    "scf_tol",
    "scf_max_iter",
    "mixing_depth",
    "mixing_beta",
    "eig_tol",
    "independent_electrons",
    "augmented_tol",
    "augmented_max_outer",
    "inner_tol",
    "inner_forcing",
    "coarse_cells",
    "shift",
    "metric_dir",
    "remesh_dir",
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub name: String,
    pub system: MolecularSystem,
    pub driver: DriverConfig,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    /// SHA-256 of the configuration text, hex encoded.
    pub config_hash: String,
}

impl RunConfig {
    pub fn set_mode(&mut self, mode: SolverMode) {
        self.driver.mode = mode;
    }

    /// Caps the number of adaptive levels at `k_max`, lowering the warm-up
    /// count when needed.
    pub fn set_levels(&mut self, k_max: usize) {
        self.driver.adapt.k_max = k_max;
        self.driver.adapt.k_asm = self.driver.adapt.k_asm.min(k_max);
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.driver.seed = seed;
        self.driver.scf.seed = seed;
        self.driver.augmented.seed = seed;
        self.driver.augmented.inner.seed = seed;
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig, CliError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
        origin: path.display().to_string(),
        line: 0,
        msg: format!("cannot read configuration: {e}"),
    })?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    parse_config_str(&text, stem, &path.display().to_string())
}

/// Parses configuration text; `default_name` is used when no `name` key is
/// given and `origin` labels error messages.
pub fn parse_config_str(text: &str, default_name: &str, origin: &str) -> Result<RunConfig, CliError> {
    let err = |line: usize, msg: String| CliError::Config {
        origin: origin.to_string(),
        line,
        msg,
    };
    let mut values: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut atoms = Vec::new();
    let mut in_atoms = false;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if line != "[atoms]" {
                return Err(err(lineno, format!("unknown section {line}")));
            }
            if in_atoms {
                return Err(err(lineno, "duplicate [atoms] section".into()));
            }
            in_atoms = true;
            continue;
        }
        if in_atoms {
            atoms.push(parse_atom(line).map_err(|m| err(lineno, m))?);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(lineno, format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(err(lineno, format!("unknown key '{key}'")));
        }
        if values.insert(key, (lineno, value.trim())).is_some() {
            return Err(err(lineno, format!("duplicate key '{key}'")));
        }
    }

    let get = |key: &str| values.get(key).copied();
    fn num<T: std::str::FromStr>(key: &str, (line, v): (usize, &str)) -> Result<T, (usize, String)> {
        v.parse().map_err(|_| (line, format!("invalid value '{v}' for {key}")))
    }
    let lift = |r: Result<(), (usize, String)>| r.map_err(|(l, m)| err(l, m));

    let (box_line, box_text) = get("box").ok_or_else(|| err(0, "missing required key 'box'".into()))?;
    let domain = parse_box(box_text).map_err(|m| err(box_line, m))?;
    if atoms.is_empty() {
        return Err(err(0, "the [atoms] section is missing or empty".into()));
    }
    for a in &atoms {
        if !domain.contains_strictly(&a.position, 0.0) {
            return Err(err(
                0,
                format!("atom {} at {:?} lies outside the box", a.symbol, a.position),
            ));
        }
    }

    let mut driver = DriverConfig::default();
    let mut seed = 0u64;
    let mut orbitals: Option<usize> = None;
    let mut occupation = 2.0;
    let mut out_dir = None;
    let mut name = default_name.to_string();
    let mut inner_tol = None;
    for (&key, &(line, v)) in &values {
        let entry = (line, v);
        lift((|| {
            let a = &mut driver.adapt;
            match key {
                "name" => name = v.to_string(),
                "box" => {}
                "orbitals" => orbitals = Some(num(key, entry)?),
                "occupation" => occupation = num(key, entry)?,
                "mode" => driver.mode = v.parse().map_err(|e: ksfem_core::Error| (line, e.to_string()))?,
                "seed" => seed = num(key, entry)?,
                "out" => out_dir = Some(PathBuf::from(v)),
                "reference_energy" => driver.reference_energy = Some(num(key, entry)?),
                "epsilon" => a.epsilon = num(key, entry)?,
                "h_min" => a.h_min = num(key, entry)?,
                "h_max" => a.h_max = num(key, entry)?,
                "k_asm" => a.k_asm = num(key, entry)?,
                "k_max" => a.k_max = num(key, entry)?,
                "driver_tol" => a.tol = num(key, entry)?,
                "adaptive_function" => a.function = v.parse::<AdaptiveFunction>().map_err(|e| (line, e.to_string()))?,
                "initial_cells" => a.initial_cells = num(key, entry)?,
                "growth" => a.growth = num(key, entry)?,
                "max_cells" => a.max_cells = num(key, entry)?,
                "sweeps" => a.sweeps = num(key, entry)?,
                "scf_tol" => driver.scf.tol = num(key, entry)?,
                "scf_max_iter" => driver.scf.max_iter = num(key, entry)?,
                "mixing_depth" => {
                    driver.scf.depth = num(key, entry)?;
                    driver.augmented.inner.depth = driver.scf.depth;
                }
                "mixing_beta" => {
                    driver.scf.beta = num(key, entry)?;
                    driver.augmented.inner.beta = driver.scf.beta;
                }
                "eig_tol" => driver.scf.eig_tol = num(key, entry)?,
                "independent_electrons" => {
                    let flag: bool = num(key, entry)?;
                    driver.scf.independent_electrons = flag;
                    driver.augmented.inner.independent_electrons = flag;
                }
                "augmented_tol" => driver.augmented.tol = num(key, entry)?,
                "augmented_max_outer" => driver.augmented.max_outer = num(key, entry)?,
                "inner_tol" => inner_tol = Some(num(key, entry)?),
                "inner_forcing" => driver.augmented.inner_forcing = num(key, entry)?,
                "coarse_cells" => driver.augmented.coarse_cells = num(key, entry)?,
                "shift" => driver.augmented.shift = v.parse::<ShiftRule>().map_err(|e| (line, e.to_string()))?,
                "metric_dir" => driver.metric_dir = Some(PathBuf::from(v)),
                "remesh_dir" => driver.remesh_dir = Some(PathBuf::from(v)),
                _ => unreachable!("key list and match arms disagree on '{key}'"),
            }
            Ok(())
        })())?;
    }
    if let Some(t) = inner_tol {
        driver.augmented.inner.tol = t;
    }
    if get("k_asm").is_none() {
        driver.adapt.k_asm = driver.adapt.k_asm.min(driver.adapt.k_max);
    }

    let nuclear: f64 = atoms.iter().map(|a| a.charge).sum();
    let n_orbitals = match orbitals {
        Some(n) => n,
        None => {
            let n = (nuclear / occupation).round();
            if (n * occupation - nuclear).abs() > 1e-9 {
                return Err(err(
                    0,
                    format!(
                        "{nuclear} electrons do not fill whole orbitals of occupation {occupation}; set 'orbitals'"
                    ),
                ));
            }
            n as usize
        }
    };
    let system = MolecularSystem::new(atoms, n_orbitals, occupation, domain).map_err(|e| err(0, e.to_string()))?;
    driver.adapt.validate().map_err(|e| err(0, e.to_string()))?;
    driver.scf.validate().map_err(|e| err(0, e.to_string()))?;
    driver.augmented.inner.validate().map_err(|e| err(0, e.to_string()))?;
    if !(driver.augmented.tol > 0.0) || driver.augmented.max_outer == 0 || driver.augmented.coarse_cells == 0 {
        return Err(err(
            0,
            "augmented tolerance, outer iteration cap and coarse cells must be positive".into(),
        ));
    }
    if !(driver.augmented.inner_forcing >= 0.0 && driver.augmented.inner_forcing.is_finite()) {
        return Err(err(0, "inner_forcing must be finite and nonnegative".into()));
    }

    let mut config = RunConfig {
        name,
        system,
        driver,
        out_dir,
        seed,
        config_hash: {
            use sha2::Digest;
            hex::encode(sha2::Sha256::digest(text.as_bytes()))
        },
    };
    config.set_seed(seed);
    Ok(config)
}

fn parse_atom(line: &str) -> Result<Atom, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(format!("atom rows are 'symbol x y z Z', got '{line}'"));
    }
    let mut v = [0.0; 4];
    for (slot, f) in v.iter_mut().zip(&fields[1..]) {
        *slot = f
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("invalid number '{f}' in atom row"))?;
    }
    if !(v[3] > 0.0) {
        return Err(format!("nuclear charge must be positive, got {}", v[3]));
    }
    Ok(Atom::new(fields[0], [v[0], v[1], v[2]], v[3]))
}

/// `lo hi` for a cube or `xlo xhi ylo yhi zlo zhi`.
fn parse_box(text: &str) -> Result<BoxDomain, String> {
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("invalid box bound '{t}'")))
        .collect::<Result<_, _>>()?;
    let (lo, hi) = match v.as_slice() {
        [a, b] => ([*a; 3], [*b; 3]),
        [x0, x1, y0, y1, z0, z1] => ([*x0, *y0, *z0], [*x1, *y1, *z1]),
        _ => return Err(format!("box takes 2 or 6 numbers, got {}", v.len())),
    };
    BoxDomain::new(lo, hi).map_err(|e| e.to_string())
}
