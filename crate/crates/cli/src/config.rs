//! Declarative experiment configuration: a flat key=value file with dotted
//! keys, resolved (with command-line overrides) into a fully explicit record
//! that is echoed into every report so runs can be replayed byte for byte.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dtm,
    Recursive,
    Reference,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Dtm => "dtm",
            Method::Recursive => "recursive",
            Method::Reference => "reference",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthPolicy {
    Fixed(usize),
    TargetEps(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationChoice {
    DtmOptimal,
    Geometric,
    Manual(Vec<u64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandChoice {
    None,
    Asymptotic,
    Subgaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum C3Choice {
    Calibrate,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandTarget {
    /// The truncated series the estimator actually targets.
    Xm,
    /// The full solution; the band is widened by the truncation gap.
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelForm {
    Constant,
    Separable,
    GaussianSmooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeTermForm {
    One,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub dim: usize,
    pub grid: usize,
    pub kernel_form: KernelForm,
    pub kernel_lambda: f64,
    pub kernel_w: Option<f64>,
    pub free_term_form: FreeTermForm,
}

/// Fully resolved experiment description. Everything a rerun needs is here,
/// including the seed (auto-generated seeds are recorded, never implicit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub method: Method,
    pub depth: DepthPolicy,
    pub budget: Option<u64>,
    pub allocation: AllocationChoice,
    pub replicates: u64,
    pub band: BandChoice,
    pub band_level: f64,
    pub band_sims: u64,
    pub band_c3: C3Choice,
    pub band_pilot_trials: u64,
    pub band_target: BandTarget,
    pub seed: u64,
    pub seed_generated: bool,
    pub reference_tol: f64,
    pub compute_reference: bool,
    pub sweep: Vec<u64>,
    pub trials: u64,
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub level: Option<f64>,
    pub sims: Option<u64>,
    pub trials: Option<u64>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

const KNOWN_KEYS: &[&str] = &[
    "domain.dim",
    "domain.grid",
    "kernel.form",
    "kernel.lambda",
    "kernel.w",
    "free_term.form",
    "method",
    "depth.policy",
    "depth.m",
    "depth.eps",
    "budget",
    "allocation",
    "allocation.counts",
    "replicates",
    "band",
    "band.level",
    "band.sims",
    "band.c3",
    "band.pilot_trials",
    "band.target",
    "seed",
    "reference.tol",
    "reference.compute",
    "sweep",
    "trials",
];

/// Parses the flat `key = value` format: one pair per line, `#` comments.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(bad(format!("line {}: unknown key '{key}'", lineno + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(bad(format!("line {}: duplicate key '{key}'", lineno + 1)));
        }
    }
    Ok(map)
}

struct Pairs(BTreeMap<String, String>);

impl Pairs {
    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|s| s.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| bad(format!("missing required key '{key}'")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| bad(format!("key '{key}': cannot parse '{v}'"))),
        }
    }

    fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn parse_list(&self, key: &str) -> Result<Vec<u64>, CliError> {
        match self.get(key) {
            None => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim()
                        .parse::<u64>()
                        .map_err(|_| bad(format!("key '{key}': cannot parse '{item}'")))
                })
                .collect(),
        }
    }
}

fn generate_seed() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    nanos ^ (std::process::id() as u64).rotate_left(32)
}

/// Resolves file text plus overrides into an explicit configuration.
pub fn resolve(text: &str, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let pairs = Pairs(parse_pairs(text)?);

    let kernel_form = match pairs.required("kernel.form")? {
        "constant" => KernelForm::Constant,
        "separable" => KernelForm::Separable,
        "gaussian_smooth" => KernelForm::GaussianSmooth,
        other => return Err(bad(format!("kernel.form: unknown form '{other}'"))),
    };
    if kernel_form == KernelForm::GaussianSmooth && pairs.get("kernel.w").is_none() {
        return Err(bad("kernel.form=gaussian_smooth requires kernel.w"));
    }
    let free_term_form = match pairs.required("free_term.form")? {
        "one" => FreeTermForm::One,
        "identity" => FreeTermForm::Identity,
        other => return Err(bad(format!("free_term.form: unknown form '{other}'"))),
    };
    let problem = ProblemConfig {
        dim: pairs.parse_or("domain.dim", 1usize)?,
        grid: pairs
            .parse::<usize>("domain.grid")?
            .ok_or_else(|| bad("missing required key 'domain.grid'"))?,
        kernel_form,
        kernel_lambda: pairs
            .parse::<f64>("kernel.lambda")?
            .ok_or_else(|| bad("missing required key 'kernel.lambda'"))?,
        kernel_w: pairs.parse::<f64>("kernel.w")?,
        free_term_form,
    };

    let method_word = overrides
        .method
        .clone()
        .or_else(|| pairs.get("method").map(str::to_string))
        .ok_or_else(|| bad("missing required key 'method'"))?;
    let method = match method_word.as_str() {
        "dtm" => Method::Dtm,
        "recursive" => Method::Recursive,
        "reference" => Method::Reference,
        other => return Err(bad(format!("method: unknown method '{other}'"))),
    };

    let allocation = match pairs.get("allocation") {
        None => match method {
            Method::Dtm => AllocationChoice::DtmOptimal,
            _ => AllocationChoice::Geometric,
        },
        Some("dtm_optimal") => AllocationChoice::DtmOptimal,
        Some("geometric") => AllocationChoice::Geometric,
        Some("manual") => {
            let counts = pairs.parse_list("allocation.counts")?;
            if counts.is_empty() {
                return Err(bad("allocation=manual requires allocation.counts"));
            }
            AllocationChoice::Manual(counts)
        }
        Some(other) => return Err(bad(format!("allocation: unknown scheme '{other}'"))),
    };

    let depth = match (pairs.get("depth.policy"), &allocation) {
        (Some("fixed"), _) => DepthPolicy::Fixed(
            pairs
                .parse::<usize>("depth.m")?
                .ok_or_else(|| bad("depth.policy=fixed requires depth.m"))?,
        ),
        (Some("target_eps"), _) => DepthPolicy::TargetEps(
            pairs
                .parse::<f64>("depth.eps")?
                .ok_or_else(|| bad("depth.policy=target_eps requires depth.eps"))?,
        ),
        (Some(other), _) => return Err(bad(format!("depth.policy: unknown policy '{other}'"))),
        (None, AllocationChoice::Manual(counts)) => DepthPolicy::Fixed(counts.len()),
        (None, _) if method == Method::Reference => DepthPolicy::TargetEps(1e-10),
        (None, _) => return Err(bad("missing required key 'depth.policy'")),
    };
    if let (DepthPolicy::Fixed(m), AllocationChoice::Manual(counts)) = (&depth, &allocation) {
        if *m != counts.len() {
            return Err(bad(format!(
                "depth.m = {m} does not match the {} manual counts",
                counts.len()
            )));
        }
    }
    if let DepthPolicy::Fixed(0) = depth {
        return Err(bad("depth.m must be >= 1"));
    }
    if let DepthPolicy::TargetEps(eps) = depth {
        if eps.is_nan() || eps <= 0.0 {
            return Err(bad("depth.eps must be positive"));
        }
    }

    let budget = pairs.parse::<u64>("budget")?;
    if method != Method::Reference
        && !matches!(allocation, AllocationChoice::Manual(_))
        && budget.is_none()
    {
        return Err(bad("missing required key 'budget'"));
    }

    let band = match pairs.get("band") {
        None | Some("none") => BandChoice::None,
        Some("asymptotic") => BandChoice::Asymptotic,
        Some("subgaussian") => BandChoice::Subgaussian,
        Some(other) => return Err(bad(format!("band: unknown band '{other}'"))),
    };
    let band_c3 = match pairs.get("band.c3") {
        None | Some("calibrate") => C3Choice::Calibrate,
        Some(v) => C3Choice::Fixed(
            v.parse::<f64>()
                .map_err(|_| bad(format!("band.c3: cannot parse '{v}'")))?,
        ),
    };
    let band_target = match pairs.get("band.target") {
        None | Some("xm") => BandTarget::Xm,
        Some("z") => BandTarget::Z,
        Some(other) => return Err(bad(format!("band.target: unknown target '{other}'"))),
    };

    let (seed, seed_generated) = match overrides.seed.or(pairs.parse::<u64>("seed")?) {
        Some(s) => (s, false),
        None => (generate_seed(), true),
    };

    let config = ExperimentConfig {
        problem,
        method,
        depth,
        budget,
        allocation,
        replicates: pairs.parse_or("replicates", 1u64)?,
        band,
        band_level: overrides
            .level
            .unwrap_or(pairs.parse_or("band.level", 0.95f64)?),
        band_sims: overrides
            .sims
            .unwrap_or(pairs.parse_or("band.sims", 2000u64)?),
        band_c3,
        band_pilot_trials: pairs.parse_or("band.pilot_trials", 300u64)?,
        band_target,
        seed,
        seed_generated,
        reference_tol: pairs.parse_or("reference.tol", 1e-10f64)?,
        compute_reference: pairs.parse_or("reference.compute", true)?,
        sweep: pairs.parse_list("sweep")?,
        trials: overrides.trials.unwrap_or(pairs.parse_or("trials", 0u64)?),
    };
    validate(&config)?;
    Ok(config)
}

fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.replicates == 0 {
        return Err(bad("replicates must be >= 1"));
    }
    if !(cfg.band_level > 0.0 && cfg.band_level < 1.0) {
        return Err(bad("band.level must lie in (0, 1)"));
    }
    if cfg.reference_tol.is_nan() || cfg.reference_tol <= 0.0 {
        return Err(bad("reference.tol must be positive"));
    }
    if cfg.band != BandChoice::None && cfg.method == Method::Reference {
        return Err(bad("bands require a sampling method (dtm or recursive)"));
    }
    if cfg.band == BandChoice::Asymptotic {
        if cfg.replicates < 2 {
            return Err(bad("band=asymptotic needs replicates >= 2"));
        }
        if cfg.band_sims < 1000 {
            return Err(bad("band.sims must be >= 1000"));
        }
    }
    if cfg.band == BandChoice::Subgaussian {
        if let C3Choice::Fixed(v) = cfg.band_c3 {
            if v.is_nan() || v <= 0.0 {
                return Err(bad("band.c3 must be positive"));
            }
        }
        if matches!(cfg.band_c3, C3Choice::Calibrate) && cfg.band_pilot_trials < 100 {
            return Err(bad("band.pilot_trials must be >= 100"));
        }
    }
    if let AllocationChoice::Manual(counts) = &cfg.allocation {
        if counts.iter().any(|&c| c < 2) {
            return Err(bad("allocation.counts entries must be >= 2"));
        }
    }
    Ok(())
}

/// Extra checks for the coverage command.
pub fn validate_for_coverage(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.trials < 100 {
        return Err(bad("coverage needs trials >= 100"));
    }
    if cfg.band == BandChoice::None {
        return Err(bad("coverage needs a band (asymptotic or subgaussian)"));
    }
    if cfg.method == Method::Reference {
        return Err(bad("coverage needs a sampling method"));
    }
    if !cfg.compute_reference {
        return Err(bad("coverage needs the reference oracle enabled"));
    }
    Ok(())
}

/// Extra checks for the compare command.
pub fn validate_for_compare(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.sweep.is_empty() {
        return Err(bad("compare needs a non-empty sweep"));
    }
    if cfg.replicates < 2 {
        return Err(bad("compare needs replicates >= 2 for error estimates"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "\
domain.dim = 1
domain.grid = 32
kernel.form = separable
kernel.lambda = 0.9
free_term.form = identity
method = recursive
depth.policy = fixed
depth.m = 3
budget = 1024
seed = 7
";

    #[test]
    fn parses_a_full_config() {
        let cfg = resolve(BASE, &Overrides::default()).unwrap();
        assert_eq!(cfg.method, Method::Recursive);
        assert_eq!(cfg.depth, DepthPolicy::Fixed(3));
        assert_eq!(cfg.budget, Some(1024));
        assert_eq!(cfg.seed, 7);
        assert!(!cfg.seed_generated);
        assert_eq!(cfg.allocation, AllocationChoice::Geometric);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            resolve("bogus = 1\n", &Overrides::default()),
            Err(CliError::Config(_))
        ));
        let bad_lambda = BASE.replace("kernel.lambda = 0.9", "kernel.lambda = fast");
        assert!(resolve(&bad_lambda, &Overrides::default()).is_err());
    }

    #[test]
    fn missing_required_keys_fail() {
        let no_method = BASE.replace("method = recursive\n", "");
        assert!(resolve(&no_method, &Overrides::default()).is_err());
        let no_grid = BASE.replace("domain.grid = 32\n", "");
        assert!(resolve(&no_grid, &Overrides::default()).is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = resolve(
            BASE,
            &Overrides {
                seed: Some(99),
                method: Some("dtm".into()),
                level: Some(0.9),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.method, Method::Dtm);
        assert_eq!(cfg.band_level, 0.9);
    }

    #[test]
    fn missing_seed_is_generated_and_flagged() {
        let text = BASE.replace("seed = 7\n", "");
        let cfg = resolve(&text, &Overrides::default()).unwrap();
        assert!(cfg.seed_generated);
    }

    #[test]
    fn manual_allocation_infers_depth() {
        let text = BASE
            .replace("depth.policy = fixed\ndepth.m = 3\n", "")
            .replace(
                "budget = 1024\n",
                "allocation = manual\nallocation.counts = 8,16,32\n",
            );
        let cfg = resolve(&text, &Overrides::default()).unwrap();
        assert_eq!(cfg.depth, DepthPolicy::Fixed(3));
        assert_eq!(cfg.allocation, AllocationChoice::Manual(vec![8, 16, 32]));
    }

    #[test]
    fn asymptotic_band_needs_replicates() {
        let text = format!("{BASE}band = asymptotic\n");
        assert!(resolve(&text, &Overrides::default()).is_err());
        let text = format!("{BASE}band = asymptotic\nreplicates = 50\n");
        assert!(resolve(&text, &Overrides::default()).is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = resolve(BASE, &Overrides::default()).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
