//! JSON experiment manifests and the file artifacts of runs, BO sweeps and
//! result tables.
//!
//! A manifest fully determines a run's numeric outputs: the ground truth,
//! the corruption and every random stream derive from it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bayes_opt::{self, bo_loop, BoConfig, BoOutcome, SearchSpace};
use crate::error::{invalid, Error, Result};
use crate::forward_ops::{corrupt, uniform_angles, Sinogram, Task};
use crate::image::{Image, Mask};
use crate::metrics::{self, format_metric};
use crate::objectives::TemperConfig;
use crate::phantom;
use crate::trainer::{self, Method, RunConfig, RunOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLogan,
    Disk,
    TextMask,
}

impl PhantomKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SheppLogan => "shepp-logan",
            Self::Disk => "disk",
            Self::TextMask => "text-mask",
        }
    }

    /// The phantom as an image; the text mask renders observed pixels as 1.
    pub fn render(&self, size: usize) -> Result<Image> {
        if size < 32 {
            return Err(invalid!("phantom size must be at least 32, got {size}"));
        }
        Ok(match self {
            Self::SheppLogan => phantom::shepp_logan(size),
            Self::Disk => phantom::disk(size, size as f64 / 4.0),
            Self::TextMask => phantom::text_mask(size).weights(),
        })
    }
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| invalid!("unknown phantom {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ImageSource {
    Phantom { phantom: PhantomKind, size: usize },
    File { path: PathBuf },
}

impl ImageSource {
    pub fn load(&self, base: &Path) -> Result<Image> {
        match self {
            Self::Phantom { phantom, size } => phantom.render(*size),
            Self::File { path } => Image::read_pgm(base.join(path)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Phantom { phantom, size } => format!("{}-{size}", phantom.name()),
            Self::File { path } => path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Denoise {
        noise_std: f64,
    },
    Sr,
    /// Without a mask file the text mask at the image size is used.
    Inpaint {
        #[serde(default)]
        mask: Option<PathBuf>,
    },
    Ct {
        angles: usize,
    },
}

impl TaskSpec {
    pub fn build(&self, image_size: (usize, usize), base: &Path) -> Result<Task> {
        Ok(match self {
            Self::Denoise { noise_std } => {
                if !(*noise_std >= 0.0 && noise_std.is_finite()) {
                    return Err(invalid!("noise_std must be non-negative, got {noise_std}"));
                }
                Task::Denoise { noise_std: *noise_std }
            }
            Self::Sr => Task::SuperResolution,
            Self::Inpaint { mask } => {
                let m = match mask {
                    Some(p) => Mask::read_pgm(base.join(p))?,
                    None if image_size.0 == image_size.1 => phantom::text_mask(image_size.0),
                    None => return Err(invalid!("the default text mask needs a square image")),
                };
                Task::Inpaint(m)
            }
            Self::Ct { angles } => {
                if *angles == 0 {
                    return Err(invalid!("CT needs at least one angle"));
                }
                Task::Ct { angles: uniform_angles(*angles) }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoSpec {
    #[serde(default = "default_bo_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Defaults to the method's standard bounds.
    #[serde(default)]
    pub space: Option<SearchSpace>,
    /// log10 seed points; defaults to the method's candidates.
    #[serde(default)]
    pub init: Option<Vec<[f64; 2]>>,
    /// Replace training with a cheap synthetic objective peaking at the
    /// centre of the space.
    #[serde(default)]
    pub stub: bool,
}

fn default_bo_iterations() -> usize {
    11
}

fn default_batch() -> usize {
    bayes_opt::MAX_BATCH
}

impl Default for BoSpec {
    fn default() -> Self {
        BoSpec { iterations: default_bo_iterations(), batch: default_batch(), space: None, init: None, stub: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub task: TaskSpec,
    /// Ground truth. Required unless `observation` is given.
    #[serde(default)]
    pub image: Option<ImageSource>,
    /// Measured data: a PGM, or a sinogram CSV for CT. When absent the
    /// observation is simulated from `image`.
    #[serde(default)]
    pub observation: Option<PathBuf>,
    pub run: RunConfig,
    #[serde(default)]
    pub bo: Option<BoSpec>,
    /// UCE bin count.
    #[serde(default = "default_bins")]
    pub uce_bins: usize,
}

fn default_bins() -> usize {
    metrics::UCE_BINS
}

/// Sets `key` (dot-separated path) in a JSON object. `value` is parsed as
/// JSON when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| invalid!("override {assignment:?} is not key=value"))?;
    if key.is_empty() {
        return Err(invalid!("override {assignment:?} has an empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(invalid!("override {key:?}: {} is not an object", parts[..i].join(".")));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

impl Manifest {
    pub fn from_value(v: Value) -> Result<Self> {
        let m: Manifest = serde_json::from_value(v).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest, applying `key=value` overrides before parsing.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        if let Some(s) = seed {
            apply_override(&mut v, &format!("run.seed={s}"))?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.is_none() && self.observation.is_none() {
            return Err(invalid!("manifest needs an `image`, an `observation`, or both"));
        }
        if self.uce_bins == 0 {
            return Err(invalid!("uce_bins must be positive"));
        }
        self.run.validate()
    }

    pub fn label(&self) -> String {
        match (&self.image, &self.observation) {
            (Some(img), _) => img.label(),
            (None, Some(p)) => p.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned()),
            (None, None) => "image".into(),
        }
    }

    /// The manifest with its seed cleared, as a grouping key.
    pub fn seedless_key(&self) -> String {
        let mut m = self.clone();
        m.run.seed = 0;
        serde_json::to_string(&m).expect("manifest serializes")
    }
}

/// Loaded inputs of an experiment.
#[derive(Clone, Debug)]
pub struct Problem {
    pub task: Task,
    pub observation: Image,
    pub ground_truth: Option<Image>,
}

pub fn prepare(m: &Manifest, base: &Path) -> Result<Problem> {
    let gt = m.image.as_ref().map(|s| s.load(base)).transpose()?;
    let observation = match &m.observation {
        None => {
            let x = gt.as_ref().expect("validated: image present");
            let task = m.task.build(x.dims(), base)?;
            let y = corrupt(x, &task, m.run.seed)?;
            return Ok(Problem { task, observation: y, ground_truth: gt });
        }
        Some(p) => p,
    };
    let path = base.join(observation);
    let (task, y) = match &m.task {
        TaskSpec::Ct { angles } => {
            let task = m.task.build((0, 0), base)?;
            let s = Sinogram::read_csv(&path, uniform_angles(*angles))?;
            (task, s.into_values())
        }
        spec => {
            let y = Image::read_pgm(&path)?;
            let dims = match spec {
                TaskSpec::Sr => Task::SuperResolution.image_dims(y.dims()),
                _ => y.dims(),
            };
            (spec.build(dims, base)?, y)
        }
    };
    if let Some(x) = &gt {
        if task.image_dims(y.dims()) != x.dims() {
            return Err(invalid!("ground truth {:?} does not match the observation", x.dims()));
        }
    }
    Ok(Problem { task, observation: y, ground_truth: gt })
}

/// Scalar outcome of a run, as written to `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub image: String,
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub uce: Option<f64>,
}

impl RunMetrics {
    fn columns(&self) -> Vec<(&'static str, String)> {
        let mut c = vec![
            ("image", self.image.clone()),
            ("task", self.task.clone()),
            ("method", self.method.clone()),
            ("seed", self.seed.to_string()),
            ("iterations", self.iterations.to_string()),
            ("final_loss", format_metric(self.final_loss)),
        ];
        for (name, v) in [("psnr", self.psnr), ("ssim", self.ssim), ("uce", self.uce)] {
            if let Some(v) = v {
                c.push((name, format_metric(v)));
            }
        }
        c
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let header: Vec<&str> = cols.iter().map(|c| c.0).collect();
        let row: Vec<&str> = cols.iter().map(|c| c.1.as_str()).collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

/// Reads a two-line `metrics.csv` into column-value pairs.
pub fn read_metrics_csv(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).map_err(crate::forward_ops::csv_err)?;
    let header = r.headers().map_err(crate::forward_ops::csv_err)?.clone();
    let row = r
        .records()
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: no data row", path.display())))?
        .map_err(crate::forward_ops::csv_err)?;
    Ok(header.iter().zip(row.iter()).map(|(k, v)| (k.to_string(), v.to_string())).collect())
}

pub fn compute_metrics(m: &Manifest, p: &Problem, out: &RunOutput) -> Result<RunMetrics> {
    let (psnr, ssim, uce) = match &p.ground_truth {
        Some(x) => {
            let psnr = metrics::psnr(x, &out.reconstruction)?;
            let ssim = metrics::ssim(x, &out.reconstruction)?;
            let uce = match &out.uncertainty {
                Some(u) => Some(metrics::uce(&metrics::squared_error(x, &out.reconstruction)?, u, m.uce_bins)?),
                None => None,
            };
            (Some(psnr), Some(ssim), uce)
        }
        None => (None, None, None),
    };
    Ok(RunMetrics {
        image: m.label(),
        task: p.task.name().to_string(),
        method: m.run.method.name().to_string(),
        seed: m.run.seed,
        iterations: m.run.iterations,
        final_loss: out.final_loss.elbo_t,
        psnr,
        ssim,
        uce,
    })
}

#[derive(Serialize)]
struct RunRecord<'a> {
    manifest: &'a Manifest,
    metrics: &'a RunMetrics,
    wall_time: f64,
}

/// Trains per the manifest and writes `recon.pgm`, `uncert.pgm` (predictive
/// standard deviation, when the method has one), `trace.csv`, `metrics.csv`
/// and `run.json` into `out`.
pub fn run_to_dir(m: &Manifest, base: &Path, out: &Path) -> Result<RunMetrics> {
    let t0 = Instant::now();
    let p = prepare(m, base)?;
    let result = trainer::run(&m.run, &p.task, &p.observation, p.ground_truth.as_ref())?;
    let metrics = compute_metrics(m, &p, &result)?;
    fs::create_dir_all(out)?;
    result.reconstruction.write_pgm16(out.join("recon.pgm"))?;
    if let Some(u) = &result.uncertainty {
        u.map(f64::sqrt).write_pgm16(out.join("uncert.pgm"))?;
    }
    write_trace(&result.trace, &out.join("trace.csv"))?;
    fs::write(out.join("metrics.csv"), metrics.to_csv())?;
    let record = RunRecord { manifest: m, metrics: &metrics, wall_time: t0.elapsed().as_secs_f64() };
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(metrics)
}

fn write_trace(rows: &[trainer::TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::forward_ops::csv_err)?;
    w.write_record(["iteration", "loss", "nll", "kl", "psnr", "wall_time"]).map_err(crate::forward_ops::csv_err)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            format_metric(r.loss),
            format_metric(r.nll),
            format_metric(r.kl),
            r.psnr.map(format_metric).unwrap_or_default(),
            format!("{:.3}", r.wall_time),
        ])
        .map_err(crate::forward_ops::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Copy of `run` with the method's two tuned hyperparameters set from a
/// log10 point.
pub fn with_hyperparameters(run: &RunConfig, point: [f64; 2]) -> Result<RunConfig> {
    let [a, b] = point.map(|v| 10f64.powf(v));
    let mut r = run.clone();
    match run.method {
        Method::Potobim => {
            let form = run.temper.as_ref().map(|t| t.prior_form).unwrap_or_default();
            r.temper = Some(TemperConfig::new(a, b)?.with_form(form));
        }
        Method::Mcd => {
            r.weight_decay = Some(a);
            r.dropout = Some(b);
        }
        Method::Sgld => {
            r.weight_decay = Some(a);
            r.lr_decay = Some(b.min(1.0));
        }
        Method::Dip => return Err(invalid!("dip has no hyperparameters to optimise")),
    }
    r.validate()?;
    Ok(r)
}

/// Stub objective: a smooth bump of height 30 at the centre of `space`.
pub fn stub_objective(space: &SearchSpace, p: [f64; 2]) -> f64 {
    let u = space.to_unit(p);
    30.0 - 10.0 * ((u[0] - 0.5).powi(2) + (u[1] - 0.5).powi(2))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BestPoint {
    pub method: String,
    pub axes: [String; 2],
    /// log10 coordinates.
    pub point: [f64; 2],
    pub values: [f64; 2],
    pub psnr: f64,
}

/// Number of concurrent BO evaluations: `TEMPEST_THREADS`, default 4.
pub fn bo_threads() -> Result<usize> {
    match std::env::var("TEMPEST_THREADS") {
        Err(_) => Ok(bayes_opt::DEFAULT_THREADS),
        Ok(s) => match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(invalid!("TEMPEST_THREADS must be a positive integer, got {s:?}")),
        },
    }
}

/// Runs BO over the manifest's method hyperparameters, maximizing PSNR
/// against the ground truth, and writes `history.jsonl`, `gp_grid.csv`
/// and `best.json` into `out`.
pub fn bo_to_dir(m: &Manifest, base: &Path, out: &Path, threads: usize) -> Result<BoOutcome> {
    let spec = m.bo.clone().unwrap_or_default();
    let method = m.run.method;
    let space = match &spec.space {
        Some(s) => s.clone(),
        None => SearchSpace::for_method(method)?,
    };
    space.validate()?;
    let init = match &spec.init {
        Some(i) => i.clone(),
        None => bayes_opt::init_points(method)?,
    };
    let cfg = BoConfig { iterations: spec.iterations, batch: spec.batch, threads, seed: m.run.seed };
    let outcome = if spec.stub {
        bo_loop(&space, |p| Ok(stub_objective(&space, p)), &init, &cfg)?
    } else {
        let p = prepare(m, base)?;
        let gt = p.ground_truth.clone().ok_or_else(|| invalid!("BO needs a ground-truth image"))?;
        let objective = |point: [f64; 2]| -> Result<f64> {
            let run = with_hyperparameters(&m.run, point)?;
            let r = trainer::run(&run, &p.task, &p.observation, None)?;
            metrics::psnr(&gt, &r.reconstruction)
        };
        bo_loop(&space, objective, &init, &cfg)?
    };
    fs::create_dir_all(out)?;
    let mut hist = Vec::new();
    outcome.write_history(&mut hist)?;
    fs::write(out.join("history.jsonl"), hist)?;
    let grid = bayes_opt::posterior_grid(&outcome.surrogate, &space);
    bayes_opt::write_grid_csv(&grid, fs::File::create(out.join("gp_grid.csv"))?)?;
    let best = BestPoint {
        method: method.name().to_string(),
        axes: [space.axes[0].name.clone(), space.axes[1].name.clone()],
        point: outcome.best_point,
        values: space.values(outcome.best_point),
        psnr: outcome.best_value,
    };
    fs::write(out.join("best.json"), serde_json::to_string_pretty(&best)?)?;
    Ok(outcome)
}

#[derive(Deserialize)]
struct StoredRun {
    manifest: Manifest,
}

/// One row of the consolidated table: metric means over runs whose
/// manifests differ only in the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub image: String,
    pub task: String,
    pub method: String,
    pub runs: usize,
    pub means: BTreeMap<String, f64>,
}

pub const TABLE_METRICS: [&str; 3] = ["psnr", "ssim", "uce"];

pub fn table(dirs: &[PathBuf]) -> Result<Vec<TableRow>> {
    if dirs.is_empty() {
        return Err(invalid!("table needs at least one run directory"));
    }
    let mut groups: Vec<(String, TableRow, BTreeMap<String, Vec<f64>>)> = Vec::new();
    for d in dirs {
        let stored: StoredRun = serde_json::from_str(&fs::read_to_string(d.join("run.json"))?)
            .map_err(|e| Error::Parse(format!("{}: {e}", d.join("run.json").display())))?;
        let metrics = read_metrics_csv(&d.join("metrics.csv"))?;
        let key = stored.manifest.seedless_key();
        let idx = match groups.iter().position(|g| g.0 == key) {
            Some(i) => i,
            None => {
                let get = |k: &str| metrics.get(k).cloned().unwrap_or_default();
                let row = TableRow {
                    image: get("image"),
                    task: get("task"),
                    method: get("method"),
                    runs: 0,
                    means: BTreeMap::new(),
                };
                groups.push((key, row, BTreeMap::new()));
                groups.len() - 1
            }
        };
        let g = &mut groups[idx];
        g.1.runs += 1;
        for name in TABLE_METRICS {
            if let Some(v) = metrics.get(name) {
                let v: f64 = v.parse().map_err(|_| Error::Parse(format!("{}: bad {name} {v:?}", d.display())))?;
                g.2.entry(name.to_string()).or_default().push(v);
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|(_, mut row, vals)| {
            row.means = vals.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect();
            row
        })
        .collect())
}

/// CSV rendering of [`table`]; `uce_scale` multiplies UCE (100 for percent).
pub fn table_csv(rows: &[TableRow], uce_scale: f64) -> String {
    let mut s = String::from("image,task,method,runs,psnr,ssim,uce\n");
    for r in rows {
        let cell = |k: &str| {
            r.means.get(k).map_or(String::new(), |&v| format_metric(if k == "uce" { v * uce_scale } else { v }))
        };
        s.push_str(&format!("{},{},{},{},{},{},{}\n", r.image, r.task, r.method, r.runs, cell("psnr"), cell("ssim"), cell("uce")));
    }
    s
}
