//! File formats and command implementations behind the command-line tool.
//!
//! Every output is a pure function of the inputs and the seed: floats are
//! written in shortest round-trip form, maps are ordered and manifests carry
//! no wall-clock data.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{ari, contingency, maximize_pear, n_clusters, psm_from_draws, thin_draws};
use crate::dp::{GammaPrior, NiwParams};
use crate::error::{Error, Result};
use crate::knots::KnotVector;
use crate::model::{trajectory_eval, ChildRecord, ChildRegression, Cohort};
use crate::sampler::{ChainConfig, ComponentDraw, Draw, InitStrategy, KernelFault, KnotMode, Priors, Sampler};
use crate::simgen::{generate_paired_cohorts, ChildTruth, SimSpec};

/// Scores outside `[-OUTLIER_LIMIT, OUTLIER_LIMIT]` are rejected unless allowed.
pub const OUTLIER_LIMIT: f64 = 6.0;
pub const DEFAULT_HORIZON: f64 = 1.0;
pub const DEFAULT_KNOTS: usize = 3;
pub const DEFAULT_MAX_PEAR_DRAWS: usize = 2000;
const TRAJECTORY_GRID: usize = 101;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Reads `child_id,age_years,haz` rows. Rows may come in any order; children
/// keep the order of their first row.
pub fn read_cohort_csv(path: &Path, horizon: f64, n_knots: usize, allow_outliers: bool) -> Result<Cohort> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected = ["child_id", "age_years", "haz"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header child_id,age_years,haz, found {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_err("empty child_id".into()));
        }
        let age: f64 = record[1]
            .parse()
            .map_err(|_| parse_err(format!("age {:?} is not a number", &record[1])))?;
        let haz: f64 = record[2]
            .parse()
            .map_err(|_| parse_err(format!("haz {:?} is not a number", &record[2])))?;
        if !(age >= 0.0 && age <= horizon) {
            return Err(parse_err(format!("age {age} outside [0, {horizon}]")));
        }
        if !haz.is_finite() {
            return Err(parse_err(format!("haz {haz} is not finite")));
        }
        if !allow_outliers && haz.abs() > OUTLIER_LIMIT {
            return Err(parse_err(format!(
                "haz {haz} outside [-{OUTLIER_LIMIT}, {OUTLIER_LIMIT}] (use --allow-outliers to keep it)"
            )));
        }
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            (Vec::new(), Vec::new())
        });
        entry.0.push(age);
        entry.1.push(haz);
    }
    if order.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "no observations".into(),
        });
    }
    let children = order
        .into_iter()
        .map(|id| {
            let (t, z) = rows.remove(&id).expect("every id has rows");
            ChildRecord::new(id, t, z, horizon)
        })
        .collect::<Result<Vec<_>>>()?;
    Cohort::new(children, horizon, n_knots)
}

pub fn write_cohort_csv(path: &Path, cohort: &Cohort) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["child_id", "age_years", "haz"]).map_err(err)?;
    for c in cohort.children() {
        for (t, z) in c.times().iter().zip(c.haz()) {
            w.write_record([c.id(), &t.to_string(), &z.to_string()]).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `child_id,group,alpha,beta_0..beta_K,xi_1..xi_K` with 1-based groups
/// and the random-regime knots.
pub fn write_truth_csv(path: &Path, truth: &[ChildTruth]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e| csv_error(path, e);
    let (d, k) = truth.first().map_or((0, 0), |t| (t.beta.len(), t.random_knots.len()));
    let mut header = vec!["child_id".to_string(), "group".into(), "alpha".into()];
    header.extend((0..d).map(|i| format!("beta_{i}")));
    header.extend((1..=k).map(|i| format!("xi_{i}")));
    w.write_record(&header).map_err(err)?;
    for t in truth {
        let mut row = vec![t.id.clone(), (t.group + 1).to_string(), t.alpha.to_string()];
        row.extend(t.beta.iter().map(f64::to_string));
        row.extend(t.random_knots.iter().map(f64::to_string));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `(child_id, group)` pairs from a truth sidecar.
pub fn read_truth_csv(path: &Path) -> Result<Vec<(String, usize)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column {name}"),
        })
    };
    let (id_col, group_col) = (col("child_id")?, col("group")?);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let group = record[group_col].parse::<usize>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("group {:?} is not a non-negative integer", &record[group_col]),
        })?;
        out.push((record[id_col].to_string(), group));
    }
    Ok(out)
}

const DRAWS_MAGIC: &[u8; 8] = b"BSDRAWS1";

/// Self-describing header of a draws file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsHeader {
    pub format_version: u32,
    pub n_children: usize,
    pub n_knots: usize,
    pub horizon: f64,
    pub knot_mode: String,
    pub n_draws: usize,
    pub child_ids: Vec<String>,
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawsFile {
    pub header: DrawsHeader,
    pub draws: Vec<Draw>,
}

const RECORD_LAYOUT: &str = "per draw, little-endian: iteration u64, n_clusters u32, lambda f64, \
mu_alpha f64, sigma2_alpha f64, sigma2_eps f64, allocations u32[N], then per cluster \
(mu f64[K+1], sigma f64[(K+1)^2] row-major, weight f64, size u32), alpha f64[N], \
beta f64[N*(K+1)], knots f64[N*K]";

pub fn write_draws(path: &Path, cohort: &Cohort, knot_mode: KnotMode, draws: &[Draw]) -> Result<()> {
    let header = DrawsHeader {
        format_version: 1,
        n_children: cohort.len(),
        n_knots: cohort.n_knots(),
        horizon: cohort.horizon(),
        knot_mode: knot_mode.to_string(),
        n_draws: draws.len(),
        child_ids: cohort.children().iter().map(|c| c.id().to_string()).collect(),
        layout: RECORD_LAYOUT.to_string(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut w = create(path)?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DRAWS_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for d in draws {
        buf.extend_from_slice(&d.iteration.to_le_bytes());
        buf.extend_from_slice(&(d.components.len() as u32).to_le_bytes());
        for v in [d.lambda, d.globals.mu_alpha, d.globals.sigma2_alpha, d.globals.sigma2_eps] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &s in &d.allocations {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for c in &d.components {
            for v in c.mu.iter().chain(&c.sigma).chain(std::iter::once(&c.weight)) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&(c.size as u32).to_le_bytes());
        }
        for v in d.alpha.iter().chain(&d.beta).chain(&d.knots) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        buf.clear();
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    finish(path, w)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::DrawsFormat {
                path: self.path.to_path_buf(),
                message: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn read_draws(path: &Path) -> Result<DrawsFile> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let format_err = |message: String| Error::DrawsFormat {
        path: path.to_path_buf(),
        message,
    };
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(8)? != DRAWS_MAGIC {
        return Err(format_err("not a draws file (bad magic)".into()));
    }
    let len = cur.u32()? as usize;
    let header: DrawsHeader =
        serde_json::from_slice(cur.take(len)?).map_err(|e| format_err(format!("header: {e}")))?;
    if header.format_version != 1 {
        return Err(format_err(format!("unsupported format version {}", header.format_version)));
    }
    if header.child_ids.len() != header.n_children {
        return Err(format_err("child id list does not match n_children".into()));
    }
    let (n, k) = (header.n_children, header.n_knots);
    let d = k + 1;
    let mut draws = Vec::with_capacity(header.n_draws);
    for _ in 0..header.n_draws {
        let iteration = cur.u64()?;
        let g = cur.u32()? as usize;
        let lambda = cur.f64()?;
        let (mu_alpha, sigma2_alpha, sigma2_eps) = (cur.f64()?, cur.f64()?, cur.f64()?);
        let allocations = (0..n)
            .map(|_| cur.u32().map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        if let Some(s) = allocations.iter().find(|&&s| s >= g) {
            return Err(format_err(format!("allocation {s} exceeds cluster count {g}")));
        }
        let components = (0..g)
            .map(|_| {
                Ok(ComponentDraw {
                    mu: cur.f64s(d)?,
                    sigma: cur.f64s(d * d)?,
                    weight: cur.f64()?,
                    size: cur.u32()? as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        draws.push(Draw {
            iteration,
            allocations,
            components,
            alpha: cur.f64s(n)?,
            beta: cur.f64s(n * d)?,
            knots: cur.f64s(n * k)?,
            globals: crate::model::GlobalParams {
                mu_alpha,
                sigma2_alpha,
                sigma2_eps,
            },
            lambda,
        });
    }
    if cur.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(DrawsFile { header, draws })
}

/// Optional prior overrides read from a configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSettings {
    pub mu_alpha_mean: Option<f64>,
    pub mu_alpha_var: Option<f64>,
    pub sigma_alpha_scale: Option<f64>,
    pub sigma_eps_scale: Option<f64>,
    pub lambda_shape: Option<f64>,
    pub lambda_rate: Option<f64>,
    pub niw_precision_scale: Option<f64>,
    pub niw_dof: Option<f64>,
}

/// Fit settings; every field is optional so that file values and command-line
/// flags can be layered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    pub seed: Option<u64>,
    pub iterations: Option<u64>,
    pub burnin: Option<u64>,
    pub thin: Option<u64>,
    pub knots: Option<String>,
    pub k: Option<usize>,
    pub horizon: Option<f64>,
    pub allow_outliers: Option<bool>,
    pub fixed_knots: Option<Vec<f64>>,
    /// `singletons` or `single`.
    pub init: Option<String>,
    #[serde(default)]
    pub priors: PriorSettings,
}

impl FitSettings {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| 1 + text[..s.start.min(text.len())].matches('\n').count() as u64);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    /// Fields set in `self` win over those in `fallback`.
    pub fn layered_over(self, fallback: FitSettings) -> FitSettings {
        let p = self.priors;
        let f = fallback.priors;
        FitSettings {
            seed: self.seed.or(fallback.seed),
            iterations: self.iterations.or(fallback.iterations),
            burnin: self.burnin.or(fallback.burnin),
            thin: self.thin.or(fallback.thin),
            knots: self.knots.or(fallback.knots),
            k: self.k.or(fallback.k),
            horizon: self.horizon.or(fallback.horizon),
            allow_outliers: self.allow_outliers.or(fallback.allow_outliers),
            fixed_knots: self.fixed_knots.or(fallback.fixed_knots),
            init: self.init.or(fallback.init),
            priors: PriorSettings {
                mu_alpha_mean: p.mu_alpha_mean.or(f.mu_alpha_mean),
                mu_alpha_var: p.mu_alpha_var.or(f.mu_alpha_var),
                sigma_alpha_scale: p.sigma_alpha_scale.or(f.sigma_alpha_scale),
                sigma_eps_scale: p.sigma_eps_scale.or(f.sigma_eps_scale),
                lambda_shape: p.lambda_shape.or(f.lambda_shape),
                lambda_rate: p.lambda_rate.or(f.lambda_rate),
                niw_precision_scale: p.niw_precision_scale.or(f.niw_precision_scale),
                niw_dof: p.niw_dof.or(f.niw_dof),
            },
        }
    }
}

/// Fully resolved fit configuration, echoed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedFit {
    pub seed: u64,
    pub iterations: u64,
    pub burnin: u64,
    pub thin: u64,
    pub knots: String,
    pub k: usize,
    pub horizon: f64,
    pub allow_outliers: bool,
    pub fixed_knots: Option<Vec<f64>>,
    pub init: String,
    pub mu_alpha_mean: f64,
    pub mu_alpha_var: f64,
    pub sigma_alpha_scale: f64,
    pub sigma_eps_scale: f64,
    pub lambda_shape: f64,
    pub lambda_rate: f64,
    pub niw_precision_scale: f64,
    pub niw_dof: f64,
}

impl ResolvedFit {
    /// Fills unset fields with built-in defaults.
    pub fn resolve(s: FitSettings) -> Result<Self> {
        let defaults = ChainConfig::full_schedule(0, KnotMode::Random);
        let priors = Priors::default();
        let k = s.k.unwrap_or(DEFAULT_KNOTS);
        let knots = s.knots.unwrap_or_else(|| "random".into());
        knots.parse::<KnotMode>()?;
        let init = s.init.unwrap_or_else(|| InitStrategy::default().to_string());
        init.parse::<InitStrategy>()?;
        let niw = NiwParams::weakly_informative(k + 1);
        Ok(Self {
            seed: s.seed.unwrap_or(0),
            iterations: s.iterations.unwrap_or(defaults.iterations),
            burnin: s.burnin.unwrap_or(defaults.burnin),
            thin: s.thin.unwrap_or(defaults.thin),
            knots,
            k,
            horizon: s.horizon.unwrap_or(DEFAULT_HORIZON),
            allow_outliers: s.allow_outliers.unwrap_or(false),
            fixed_knots: s.fixed_knots,
            init,
            mu_alpha_mean: s.priors.mu_alpha_mean.unwrap_or(priors.mu_alpha_mean),
            mu_alpha_var: s.priors.mu_alpha_var.unwrap_or(priors.mu_alpha_var),
            sigma_alpha_scale: s.priors.sigma_alpha_scale.unwrap_or(priors.sigma_alpha_scale),
            sigma_eps_scale: s.priors.sigma_eps_scale.unwrap_or(priors.sigma_eps_scale),
            lambda_shape: s.priors.lambda_shape.unwrap_or(priors.lambda.shape),
            lambda_rate: s.priors.lambda_rate.unwrap_or(priors.lambda.rate),
            niw_precision_scale: s.priors.niw_precision_scale.unwrap_or(niw.precision_scale()),
            niw_dof: s.priors.niw_dof.unwrap_or(niw.dof()),
        })
    }

    pub fn chain_config(&self) -> Result<ChainConfig> {
        let dim = self.k + 1;
        let fixed_knots = self
            .fixed_knots
            .as_ref()
            .map(|xi| {
                if xi.len() != self.k {
                    return Err(Error::config(format!("{} fixed knots given but k = {}", xi.len(), self.k)));
                }
                KnotVector::new(xi.clone(), self.horizon).map_err(|e| Error::config(format!("fixed knots: {e}")))
            })
            .transpose()?;
        let config = ChainConfig {
            iterations: self.iterations,
            burnin: self.burnin,
            thin: self.thin,
            seed: self.seed,
            knot_mode: self.knots.parse()?,
            fixed_knots,
            init: self.init.parse()?,
            priors: Priors {
                mu_alpha_mean: self.mu_alpha_mean,
                mu_alpha_var: self.mu_alpha_var,
                sigma_alpha_scale: self.sigma_alpha_scale,
                sigma_eps_scale: self.sigma_eps_scale,
                lambda: GammaPrior {
                    shape: self.lambda_shape,
                    rate: self.lambda_rate,
                },
                niw: Some(
                    NiwParams::new(
                        vec![0.0; dim],
                        self.niw_precision_scale,
                        self.niw_dof,
                        nalgebra::DMatrix::identity(dim, dim),
                    )
                    .map_err(|e| Error::config(e.to_string()))?,
                ),
            },
            fault: KernelFault::None,
        };
        config.validate()?;
        config.priors.validate(dim)?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn digest(path: &Path) -> Result<InputDigest> {
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

/// Provenance record written once into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
    pub warnings: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: serde_json::Value::Null,
            warnings: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(e.to_string()))?;
        text.push('\n');
        write_text(&path, &text)
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data serializes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOptions {
    pub seed: u64,
    pub n_children: Option<usize>,
    pub out: PathBuf,
}

pub fn cmd_simulate(opts: &SimulateOptions) -> Result<()> {
    let mut spec = SimSpec::default();
    if let Some(n) = opts.n_children {
        spec.n_children = n;
    }
    let pair = generate_paired_cohorts(&spec, opts.seed)?;
    ensure_dir(&opts.out)?;
    write_cohort_csv(&opts.out.join("d_fixed.csv"), &pair.fixed)?;
    write_cohort_csv(&opts.out.join("d_random.csv"), &pair.random)?;
    write_truth_csv(&opts.out.join("truth.csv"), &pair.truth)?;
    let mut manifest = RunManifest::new(
        "simulate",
        Some(opts.seed),
        serde_json::json!({
            "n_children": spec.n_children,
            "alpha_mean": spec.alpha_mean,
            "alpha_var": spec.alpha_var,
            "sigma2_eps": spec.sigma2_eps,
            "group_means": spec.group_means,
            "group_var": spec.group_var,
            "obs_per_child": [spec.min_obs, spec.max_obs],
            "horizon": spec.horizon,
            "k": spec.n_knots(),
            "fixed_knots": spec.fixed_knots,
        }),
    );
    manifest.outputs = vec!["d_fixed.csv".into(), "d_random.csv".into(), "truth.csv".into()];
    manifest.write(&opts.out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: FitSettings,
    pub out: PathBuf,
}

pub fn cmd_fit(opts: &FitOptions) -> Result<()> {
    let file = match &opts.config {
        Some(p) => FitSettings::from_toml_file(p)?,
        None => FitSettings::default(),
    };
    let resolved = ResolvedFit::resolve(opts.overrides.clone().layered_over(file))?;
    let config = resolved.chain_config()?;
    let cohort = read_cohort_csv(&opts.data, resolved.horizon, resolved.k, resolved.allow_outliers)?;
    ensure_dir(&opts.out)?;

    let started = std::time::Instant::now();
    let total = config.iterations;
    let output = Sampler::new(cohort.clone(), config.clone())?.run_with_progress(|it| {
        if it % 10_000 == 0 {
            log::info!("sweep {it}/{total}");
        }
    })?;
    log::info!("chain finished in {:.1?}", started.elapsed());

    write_draws(&opts.out.join("draws.bin"), &cohort, config.knot_mode, &output.draws)?;
    let path = opts.out.join("g_trace.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["iteration", "n_clusters"]).map_err(|e| csv_error(&path, e))?;
    for (i, g) in output.g_trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), g.to_string()])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = opts.out.join("acceptance.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["child_id", "accepted", "proposed", "rate"])
        .map_err(|e| csv_error(&path, e))?;
    for ((c, a), p) in cohort.children().iter().zip(&output.knot_accepted).zip(&output.knot_proposed) {
        let rate = if *p > 0 { (*a as f64 / *p as f64).to_string() } else { String::new() };
        w.write_record([c.id().to_string(), a.to_string(), p.to_string(), rate])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut manifest = RunManifest::new("fit", Some(resolved.seed), to_json(&resolved));
    manifest.inputs.push(digest(&opts.data)?);
    if let Some(p) = &opts.config {
        manifest.inputs.push(digest(p)?);
    }
    manifest.outputs = vec!["draws.bin".into(), "g_trace.csv".into(), "acceptance.csv".into()];
    manifest.results = serde_json::json!({
        "sweeps": output.g_trace.len(),
        "retained_draws": output.draws.len(),
        "g_mode": output.g_mode(),
        "knot_acceptance_rate": output.knot_acceptance_rate(),
    });
    manifest.warnings = output.warnings.clone();
    manifest.write(&opts.out)
}

/// Comparison of an estimated clustering with known groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthComparison {
    pub ari: f64,
    /// Rows: true groups in sidecar order of first appearance; columns: estimated groups.
    pub contingency: Vec<Vec<usize>>,
}

fn compare_with_truth(path: &Path, ids: &[String], estimate: &[usize]) -> Result<(Vec<usize>, TruthComparison)> {
    let truth: BTreeMap<String, usize> = read_truth_csv(path)?.into_iter().collect();
    let labels = ids
        .iter()
        .map(|id| {
            truth.get(id).copied().ok_or_else(|| Error::DrawsFormat {
                path: path.to_path_buf(),
                message: format!("child {id} missing from the truth file"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // rows ordered by the true group number
    let mut order: Vec<usize> = labels.clone();
    order.sort_unstable();
    order.dedup();
    let g_est = estimate.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; g_est]; order.len()];
    for (t, &e) in labels.iter().zip(estimate) {
        let row = order.binary_search(t).expect("label present");
        table[row][e] += 1;
    }
    let comparison = TruthComparison {
        ari: ari(estimate, &labels)?,
        contingency: table,
    };
    debug_assert_eq!(contingency(estimate, &labels)?.len(), g_est);
    Ok((labels, comparison))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOptions {
    pub draws: PathBuf,
    pub truth: Option<PathBuf>,
    pub out: PathBuf,
    pub max_draws: usize,
}

/// Consensus clustering and related summaries of a draws file.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub labels: Vec<usize>,
    pub pear: f64,
    pub n_candidates: usize,
    pub draws_used: usize,
}

pub fn classify_draws(draws: &[Draw], max_draws: usize) -> Result<Classification> {
    if draws.is_empty() {
        return Err(Error::domain("the draws file contains no draws"));
    }
    let allocations: Vec<Vec<usize>> = draws.iter().map(|d| d.allocations.clone()).collect();
    let used = thin_draws(&allocations, max_draws);
    let best = maximize_pear(&used)?;
    Ok(Classification {
        labels: best.labels,
        pear: best.pear,
        n_candidates: best.n_candidates,
        draws_used: used.len(),
    })
}

fn group_trajectories(file: &DrawsFile, labels: &[usize]) -> Result<Vec<[f64; 5]>> {
    let h = &file.header;
    let (n, k, d) = (h.n_children, h.n_knots, h.n_knots + 1);
    let groups = labels.iter().max().map_or(0, |m| m + 1);
    let grid: Vec<f64> = (0..TRAJECTORY_GRID)
        .map(|i| h.horizon * i as f64 / (TRAJECTORY_GRID - 1) as f64)
        .collect();
    let mut rows = Vec::with_capacity(groups * grid.len());
    for g in 0..groups {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == g).collect();
        // per-draw group-average trajectory, then mean and 95% band across draws
        let mut per_draw = vec![Vec::with_capacity(file.draws.len()); grid.len()];
        for draw in &file.draws {
            let mut acc = vec![0.0; grid.len()];
            for &i in &members {
                let knots = KnotVector::new(draw.knots[i * k..(i + 1) * k].to_vec(), h.horizon)
                    .or_else(|_| KnotVector::equally_spaced(k, h.horizon))?;
                let reg = ChildRegression::new(draw.alpha[i], draw.beta[i * d..(i + 1) * d].to_vec(), knots)?;
                for (a, &t) in acc.iter_mut().zip(&grid) {
                    *a += trajectory_eval(&reg, t)?;
                }
            }
            for (slot, a) in per_draw.iter_mut().zip(acc) {
                slot.push(a / members.len() as f64);
            }
        }
        for (t, mut values) in grid.iter().zip(per_draw) {
            values.sort_by(f64::total_cmp);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let q = |p: f64| values[((values.len() - 1) as f64 * p).round() as usize];
            rows.push([(g + 1) as f64, *t, mean, q(0.025), q(0.975)]);
        }
    }
    Ok(rows)
}

pub fn cmd_classify(opts: &ClassifyOptions) -> Result<()> {
    let file = read_draws(&opts.draws)?;
    if file.draws.is_empty() {
        return Err(Error::DrawsFormat {
            path: opts.draws.clone(),
            message: "no draws to classify".into(),
        });
    }
    let result = classify_draws(&file.draws, opts.max_draws)?;
    ensure_dir(&opts.out)?;
    let ids = &file.header.child_ids;

    let path = opts.out.join("assignments.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["child_id", "group"]).map_err(|e| csv_error(&path, e))?;
    for (id, l) in ids.iter().zip(&result.labels) {
        w.write_record([id.clone(), (l + 1).to_string()])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let allocations: Vec<Vec<usize>> = file.draws.iter().map(|d| d.allocations.clone()).collect();
    let psm = psm_from_draws(&allocations)?;
    let path = opts.out.join("psm.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["child_id".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(psm.row(i).iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_text(&opts.out.join("pear.txt"), &format!("{:?}\n", result.pear))?;

    let path = opts.out.join("group_trajectories.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["group", "age_years", "haz_mean", "haz_lower", "haz_upper"])
        .map_err(|e| csv_error(&path, e))?;
    for r in group_trajectories(&file, &result.labels)? {
        w.write_record([(r[0] as usize).to_string(), r[1].to_string(), r[2].to_string(), r[3].to_string(), r[4].to_string()])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut manifest = RunManifest::new(
        "classify",
        None,
        serde_json::json!({ "max_draws": opts.max_draws }),
    );
    manifest.inputs.push(digest(&opts.draws)?);
    manifest.outputs = vec![
        "assignments.csv".into(),
        "psm.csv".into(),
        "pear.txt".into(),
        "group_trajectories.csv".into(),
    ];
    let mut results = serde_json::json!({
        "pear": result.pear,
        "n_clusters": n_clusters(&result.labels),
        "n_candidates": result.n_candidates,
        "draws_used": result.draws_used,
    });
    if let Some(truth) = &opts.truth {
        manifest.inputs.push(digest(truth)?);
        let (_, comparison) = compare_with_truth(truth, ids, &result.labels)?;
        write_text(&opts.out.join("ari.txt"), &format!("{:?}\n", comparison.ari))?;
        let path = opts.out.join("contingency.csv");
        let mut w = csv_writer(&path)?;
        let g_est = comparison.contingency.first().map_or(0, Vec::len);
        let mut header = vec!["true_group".to_string()];
        header.extend((1..=g_est).map(|g| format!("estimated_{g}")));
        w.write_record(&header).map_err(|e| csv_error(&path, e))?;
        for (row_idx, row) in comparison.contingency.iter().enumerate() {
            let mut rec = vec![(row_idx + 1).to_string()];
            rec.extend(row.iter().map(usize::to_string));
            w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        manifest.outputs.extend(["ari.txt".to_string(), "contingency.csv".to_string()]);
        results["ari_truth"] = serde_json::json!(comparison.ari);
        println!("ARI against truth: {:.4}", comparison.ari);
    }
    manifest.results = results;
    println!(
        "PEAR {:.4} with {} clusters ({} candidates, {} draws)",
        result.pear,
        n_clusters(&result.labels),
        result.n_candidates,
        result.draws_used
    );
    manifest.write(&opts.out)
}

/// One row of the performance summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub g_min: usize,
    pub g_max: usize,
    pub g_mode: usize,
    pub g_hat: usize,
    pub pear: f64,
    pub ari_truth: Option<f64>,
}

pub fn summarize_draws(draws: &[Draw], max_draws: usize, truth: Option<&[usize]>) -> Result<FitSummary> {
    let result = classify_draws(draws, max_draws)?;
    let gs: Vec<usize> = draws.iter().map(Draw::n_clusters).collect();
    let g_max = *gs.iter().max().expect("non-empty");
    let mut counts = vec![0usize; g_max + 1];
    for &g in &gs {
        counts[g] += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    Ok(FitSummary {
        g_min: *gs.iter().min().expect("non-empty"),
        g_max,
        g_mode: counts.iter().position(|&c| c == top).expect("present"),
        g_hat: n_clusters(&result.labels),
        pear: result.pear,
        ari_truth: truth.map(|t| ari(&result.labels, t)).transpose()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummarizeOptions {
    pub draws: PathBuf,
    pub truth: Option<PathBuf>,
    pub out: PathBuf,
    pub max_draws: usize,
}

pub fn cmd_summarize(opts: &SummarizeOptions) -> Result<()> {
    let file = read_draws(&opts.draws)?;
    if file.draws.is_empty() {
        return Err(Error::DrawsFormat {
            path: opts.draws.clone(),
            message: "no draws to summarize".into(),
        });
    }
    let truth_labels = match &opts.truth {
        Some(p) => {
            let truth: BTreeMap<String, usize> = read_truth_csv(p)?.into_iter().collect();
            Some(
                file.header
                    .child_ids
                    .iter()
                    .map(|id| {
                        truth.get(id).copied().ok_or_else(|| Error::DrawsFormat {
                            path: p.clone(),
                            message: format!("child {id} missing from the truth file"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    let summary = summarize_draws(&file.draws, opts.max_draws, truth_labels.as_deref())?;
    ensure_dir(&opts.out)?;
    let path = opts.out.join("summary.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["knot_mode", "g_min", "g_max", "g_mode", "g_hat", "pear", "ari_truth"])
        .map_err(|e| csv_error(&path, e))?;
    w.write_record([
        file.header.knot_mode.clone(),
        summary.g_min.to_string(),
        summary.g_max.to_string(),
        summary.g_mode.to_string(),
        summary.g_hat.to_string(),
        summary.pear.to_string(),
        summary.ari_truth.map_or(String::new(), |a| a.to_string()),
    ])
    .map_err(|e| csv_error(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!(
        "{:<8} G_min {:>2}  G_max {:>2}  G_mode {:>2}  G_hat {:>2}  PEAR {:.4}{}",
        file.header.knot_mode,
        summary.g_min,
        summary.g_max,
        summary.g_mode,
        summary.g_hat,
        summary.pear,
        summary.ari_truth.map_or(String::new(), |a| format!("  ARI {a:.4}"))
    );
    let mut manifest = RunManifest::new("summarize", None, serde_json::json!({ "max_draws": opts.max_draws }));
    manifest.inputs.push(digest(&opts.draws)?);
    if let Some(t) = &opts.truth {
        manifest.inputs.push(digest(t)?);
    }
    manifest.outputs = vec!["summary.csv".into()];
    manifest.results = to_json(&summary);
    manifest.write(&opts.out)
}
