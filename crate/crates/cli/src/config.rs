//! Flag/config-file layering. Every option is an `Option` so that an
//! explicit flag wins over the `--config` file, which wins over the default.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{Map, Value};

/// A rejected input, named by its flag / config key.
#[derive(Debug)]
pub struct UsageError {
    pub key: String,
    pub message: String,
}

impl UsageError {
    pub fn new(key: impl Into<String>, message: impl fmt::Display) -> Self {
        UsageError { key: key.into(), message: message.to_string() }
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid value for `{}`: {}", self.key, self.message)
    }
}

pub trait Layered: DeserializeOwned + Sized {
    /// Fill every unset field of `self` from `file`.
    fn layer_under(&mut self, file: Self);
}

macro_rules! layered {
    ($ty:ty; $($f:ident),* $(,)?) => {
        impl Layered for $ty {
            fn layer_under(&mut self, file: Self) {
                $( if self.$f.is_none() { self.$f = file.$f; } )*
            }
        }
    };
}

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct AkpzMapArgs {
    /// Dimer model: honeycomb | square [default: honeycomb]
    #[arg(long)]
    pub model: Option<String>,
    /// Speed preset: im-z, re-z, im-log-z, re-z2, abs2, cft-domino, const:<c>, quadratic:<a,b,c> [default: im-z]
    #[arg(long)]
    pub speed: Option<String>,
    /// Grid subdivisions per side of the polygon's bounding box [default: 50]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Distance kept from the polygon boundary [default: 0.02]
    #[arg(long)]
    pub margin: Option<f64>,
    /// Relative band around det = 0 labelled DEGENERATE [default: 1e-6]
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Output directory; CSV goes to stdout when absent
    #[arg(long, visible_alias = "output-dir")]
    #[serde(alias = "output-dir")]
    pub out: Option<PathBuf>,
}
layered!(AkpzMapArgs; model, speed, resolution, margin, tolerance, out);

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct HarmonicityArgs {
    /// Dimer model: honeycomb | square [default: honeycomb]
    #[arg(long)]
    pub model: Option<String>,
    /// Speed preset; must be a function of z [default: im-z]
    #[arg(long)]
    pub speed: Option<String>,
    /// Grid subdivisions per side of the polygon's bounding box [default: 20]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Distance kept from the polygon boundary [default: 0.05]
    #[arg(long)]
    pub margin: Option<f64>,
    /// Output directory; CSV goes to stdout when absent
    #[arg(long, visible_alias = "output-dir")]
    #[serde(alias = "output-dir")]
    pub out: Option<PathBuf>,
}
layered!(HarmonicityArgs; model, speed, resolution, margin, out);

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SurfaceTensionArgs {
    /// Dimer model: honeycomb | square [default: honeycomb]
    #[arg(long)]
    pub model: Option<String>,
    /// Grid subdivisions per side of the polygon's bounding box [default: 20]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Distance kept from the polygon boundary [default: 0.02]
    #[arg(long)]
    pub margin: Option<f64>,
    /// zmap (closed form) | legendre (Ronkin maximisation, slow) [default: zmap]
    #[arg(long)]
    pub route: Option<String>,
    /// Single slope `rho1,rho2` instead of a grid
    #[arg(long)]
    pub rho: Option<String>,
    /// Output directory; CSV goes to stdout when absent
    #[arg(long, visible_alias = "output-dir")]
    #[serde(alias = "output-dir")]
    pub out: Option<PathBuf>,
}
layered!(SurfaceTensionArgs; model, resolution, margin, route, rho, out);

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct MakeShapeArgs {
    /// Dimer model: honeycomb | square [default: honeycomb]
    #[arg(long)]
    pub model: Option<String>,
    /// burgers (implicit z solve) | variational (minimise with the Burgers boundary) [default: burgers]
    #[arg(long)]
    pub method: Option<String>,
    /// Analytic data: const-i | const:<re,im> | affine:<a,b> [default: const-i]
    #[arg(long = "C")]
    #[serde(rename = "C")]
    pub c: Option<String>,
    /// Grid size `n1xn2` [default: 33x33]
    #[arg(long)]
    pub grid: Option<String>,
    /// Domain `x1lo,x2lo,x1hi,x2hi` [default: 1,-0.25,1.5,0.25]
    #[arg(long, allow_hyphen_values = true)]
    pub extent: Option<String>,
    /// Output directory; height CSV goes to stdout when absent
    #[arg(long, visible_alias = "output-dir")]
    #[serde(alias = "output-dir")]
    pub out: Option<PathBuf>,
}
layered!(MakeShapeArgs; model, method, c, grid, extent, out);

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ElPreserveArgs {
    /// Dimer model: honeycomb | square [default: honeycomb]
    #[arg(long)]
    pub model: Option<String>,
    /// Speed preset [default: im-z]
    #[arg(long)]
    pub speed: Option<String>,
    /// Initial shape: burgers:<C> | affine:<rho1,rho2> [default: burgers:const-i]
    #[arg(long)]
    pub shape: Option<String>,
    /// Grid size `n1xn2` [default: 65x65]
    #[arg(long)]
    pub grid: Option<String>,
    /// Domain `x1lo,x2lo,x1hi,x2hi` [default: 1,-0.25,1.5,0.25]
    #[arg(long, allow_hyphen_values = true)]
    pub extent: Option<String>,
    /// Final time, capped at 0.8 of the crossing horizon [default: the cap]
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub t_final: Option<f64>,
    /// char | viscous | both [default: char]
    #[arg(long)]
    pub solver: Option<String>,
    /// Viscosity [default: 4 dx^2]
    #[arg(long)]
    pub nu: Option<f64>,
    /// Viscous time step [default: half the CFL bound]
    #[arg(long)]
    pub dt: Option<f64>,
    /// Number of output times after t = 0 [default: 4]
    #[arg(long)]
    pub outputs: Option<usize>,
    /// Probe point `x1,x2` [default: node nearest the centre]
    #[arg(long, allow_hyphen_values = true)]
    pub probe: Option<String>,
    /// Output directory; trace CSV goes to stdout when absent
    #[arg(long, visible_alias = "output-dir")]
    #[serde(alias = "output-dir")]
    pub out: Option<PathBuf>,
}
layered!(ElPreserveArgs; model, speed, shape, grid, extent, t_final, solver, nu, dt, outputs, probe, out);

#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct AcceptArgs {
    /// Comma-separated criterion ids [default: all]
    #[arg(long, value_delimiter = ',')]
    pub only: Option<Vec<u8>>,
    /// Directory for acceptance.json
    #[arg(long, visible_alias = "output-dir")]
    #[serde(alias = "output-dir")]
    pub out: Option<PathBuf>,
}
layered!(AcceptArgs; only, out);

/// Reads `path` as a JSON object, checks the optional `experiment` key
/// against `experiment` and deserializes the rest. A bad entry is reported
/// under its own key.
pub fn load<T: Layered>(path: &Path, experiment: &str) -> Result<T, UsageError> {
    let text = std::fs::read_to_string(path).map_err(|e| UsageError::new("config", format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| UsageError::new("config", format!("{}: {e}", path.display())))?;
    let Value::Object(mut map) = value else {
        return Err(UsageError::new("config", "expected a JSON object"));
    };
    if let Some(e) = map.remove("experiment") {
        if e.as_str() != Some(experiment) {
            return Err(UsageError::new("experiment", format!("config is for {e}, not `{experiment}`")));
        }
    }
    for (key, v) in &map {
        let single = Map::from_iter([(key.clone(), v.clone())]);
        serde_json::from_value::<T>(Value::Object(single)).map_err(|e| UsageError::new(key.clone(), e))?;
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| UsageError::new("config", e))
}

pub fn parse_grid(key: &str, s: &str) -> Result<[usize; 2], UsageError> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let n: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| UsageError::new(key, format!("`{s}` is not `n1xn2`")))?;
    let g = match n[..] {
        [a] => [a, a],
        [a, b] => [a, b],
        _ => return Err(UsageError::new(key, format!("`{s}` is not `n1xn2`"))),
    };
    if g.iter().any(|&k| k < 3) {
        return Err(UsageError::new(key, "need at least 3 nodes per side"));
    }
    Ok(g)
}

pub fn parse_floats<const N: usize>(key: &str, s: &str) -> Result<[f64; N], UsageError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| UsageError::new(key, format!("`{s}` is not a list of {N} numbers")))?;
    v.try_into().map_err(|_| UsageError::new(key, format!("`{s}` is not a list of {N} numbers")))
}

pub fn parse_extent(key: &str, s: &str) -> Result<[[f64; 2]; 2], UsageError> {
    let [a, b, c, d] = parse_floats::<4>(key, s)?;
    if !(c > a && d > b) {
        return Err(UsageError::new(key, "upper corner must exceed lower corner"));
    }
    Ok([[a, b], [c, d]])
}

pub fn positive(key: &str, x: f64) -> Result<f64, UsageError> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(UsageError::new(key, format!("{x} is not a positive number")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_and_lists() {
        assert_eq!(parse_grid("grid", "65x33").unwrap(), [65, 33]);
        assert_eq!(parse_grid("grid", "17").unwrap(), [17, 17]);
        assert!(parse_grid("grid", "2x9").is_err());
        assert_eq!(parse_extent("extent", "1,-0.25,1.5,0.25").unwrap(), [[1.0, -0.25], [1.5, 0.25]]);
        assert_eq!(parse_extent("extent", "1,2,0,3").unwrap_err().key, "extent");
    }

    #[test]
    fn flags_win_over_file() {
        let mut flags = AkpzMapArgs { resolution: Some(7), ..Default::default() };
        let file = AkpzMapArgs { resolution: Some(50), model: Some("square".into()), ..Default::default() };
        flags.layer_under(file);
        assert_eq!(flags.resolution, Some(7));
        assert_eq!(flags.model.as_deref(), Some("square"));
    }

    #[test]
    fn bad_entries_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"model": "square", "resolution": "many"}"#).unwrap();
        assert_eq!(load::<AkpzMapArgs>(&path, "akpz-map").unwrap_err().key, "resolution");
        std::fs::write(&path, r#"{"modle": "square"}"#).unwrap();
        assert_eq!(load::<AkpzMapArgs>(&path, "akpz-map").unwrap_err().key, "modle");
        std::fs::write(&path, r#"{"experiment": "accept"}"#).unwrap();
        assert_eq!(load::<AkpzMapArgs>(&path, "akpz-map").unwrap_err().key, "experiment");
    }
}
