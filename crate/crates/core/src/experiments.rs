//! Closed registry of experiments, their configuration schemas, and the run
//! harness that writes CSV artifacts plus a manifest. A manifest is itself a
//! valid configuration: its `meta.*` lines are ignored when it is read back.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::amp::{vamp_se_run, VampConfig};
use crate::diagnostics::{detect_staircase, StructureReport};
use crate::error::{Error, Result};
use crate::linalg::{format_real, row_normalize, sample_haar_rows, write_matrix_csv, EncoderMatrix, Matrix, Provenance};
use crate::models::{
    format_kv, mse_monte_carlo, parse_kv, save_checkpoint, Autoencoder, DenoisedAE, LinearDecoderAE, McEstimate,
    Nonlinearity, ParametricNonlin, MC_CHUNK,
};
use crate::priors::{sample_matrix, Prior, PriorFamily};
use crate::rng::SeedSpec;
use crate::theory::{gaussian_mse, identity_mse, optimal_denoised_mse, state_evolution_params};
use crate::training::{
    gdmin_pair, init_denoised, init_linear, init_multilayer, sgd_train, sgd_train_observed, GdminConfig,
    SgdConfig, TrainableFlags, Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Count,
    Real,
    Seed,
    Text,
    RealList,
    Bool,
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        kind,
        default,
        help,
    }
}

type RunFn = fn(&Params, &Path, &mut Vec<String>) -> Result<()>;

pub struct ExperimentSpec {
    pub name: &'static str,
    pub summary: &'static str,
    own: &'static [KeySpec],
    sgd: bool,
    run: RunFn,
}

const SEED_KEY: KeySpec = key("seed", Kind::Seed, "0", "master seed");

const SGD_KEYS: &[KeySpec] = &[
    key("learning_rate", Kind::Real, "10", "SGD step size"),
    key("batch_size", Kind::Count, "256", "minibatch size"),
    key("n_iters", Kind::Count, "20000", "SGD iterations"),
    key("tau", Kind::Real, "0.1", "straight-through temperature"),
    key("eval_every", Kind::Count, "50", "iterations between held-out evaluations"),
    key("eval_samples", Kind::Count, "4096", "held-out samples per evaluation"),
    key("decay_start", Kind::Real, "0.7", "fraction of the run after which the step decays"),
    key("final_lr_factor", Kind::Real, "0.02", "step multiplier at the end of the run"),
    key("train_encoder", Kind::Bool, "true", "update B"),
    key("train_decoder", Kind::Bool, "true", "update the decoder matrices"),
    key("train_nonlin", Kind::Bool, "true", "update nonlinearity parameters"),
    key("train_merge", Kind::Bool, "true", "update merge coefficients"),
];

const P_GRID: &str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";

impl ExperimentSpec {
    pub fn keys(&self) -> Vec<KeySpec> {
        let mut out: Vec<KeySpec> = vec![SEED_KEY];
        out.extend_from_slice(self.own);
        if self.sgd {
            for k in SGD_KEYS {
                if !out.iter().any(|o| o.name == k.name) {
                    out.push(*k);
                }
            }
        }
        out
    }
}

pub fn registry() -> &'static [ExperimentSpec] {
    &REGISTRY
}

static REGISTRY: [ExperimentSpec; 8] = [
    ExperimentSpec {
        name: "fig1_sweep",
        summary: "linear decoder MSE vs p: Haar and identity encoders with fitted scalar decoders, optional SGD",
        own: &[
            key("d", Kind::Count, "200", "input dimension"),
            key("r", Kind::Real, "1", "compression rate"),
            key("family", Kind::Text, "sparse_rademacher", "prior family"),
            key("p_grid", Kind::RealList, P_GRID, "keep probabilities"),
            key("n_samples", Kind::Count, "20000", "Monte-Carlo samples per point"),
            key("n_fit", Kind::Count, "20000", "samples used to fit the scalar decoder"),
            key("sgd_iters", Kind::Count, "0", "SGD iterations per point, 0 to skip"),
            key("learning_rate", Kind::Real, "10", "SGD step size"),
            key("batch_size", Kind::Count, "256", "SGD minibatch size"),
        ],
        sgd: false,
        run: run_fig1,
    },
    ExperimentSpec {
        name: "fig2_trace",
        summary: "SGD loss trace with staircase detection and encoder structure",
        own: &[
            key("d", Kind::Count, "64", "input dimension"),
            key("r", Kind::Real, "1", "compression rate"),
            key("family", Kind::Text, "sparse_rademacher", "prior family"),
            key("p", Kind::Real, "0.9", "keep probability"),
            key("architecture", Kind::Text, "linear", "linear or denoised"),
            key("staircase_tol", Kind::Real, "0.05", "relative plateau tolerance"),
            key("n_final", Kind::Count, "20000", "Monte-Carlo samples for the final MSE"),
        ],
        sgd: true,
        run: run_fig2,
    },
    ExperimentSpec {
        name: "fig4_sweep",
        summary: "denoised MSE vs p: Haar encoder with the Bayes denoiser and identity encoder",
        own: &[
            key("d", Kind::Count, "200", "input dimension"),
            key("r", Kind::Real, "1", "compression rate"),
            key("family", Kind::Text, "sparse_rademacher", "prior family"),
            key("p_grid", Kind::RealList, P_GRID, "keep probabilities"),
            key("n_samples", Kind::Count, "20000", "Monte-Carlo samples per point"),
            key("n_fit", Kind::Count, "20000", "samples used to fit the identity decoder"),
        ],
        sgd: false,
        run: run_fig4,
    },
    ExperimentSpec {
        name: "fig5_trace",
        summary: "SGD on the parametric denoised decoder; distances of B^B^T and B^A^ to the identity",
        own: &[
            key("d", Kind::Count, "100", "input dimension"),
            key("r", Kind::Real, "1", "compression rate"),
            key("family", Kind::Text, "sparse_gaussian", "prior family"),
            key("p", Kind::Real, "0.4", "keep probability"),
            key("learning_rate", Kind::Real, "0.5", "SGD step size"),
            key("n_iters", Kind::Count, "10000", "SGD iterations"),
            key("eval_every", Kind::Count, "200", "iterations between evaluations"),
            key("n_final", Kind::Count, "20000", "Monte-Carlo samples for the final MSE"),
        ],
        sgd: true,
        run: run_fig5,
    },
    ExperimentSpec {
        name: "fig6_sweep",
        summary: "MSE vs r for the linear, denoised and multilayer decoders against the VAMP fixed point",
        own: &[
            key("d", Kind::Count, "500", "input dimension"),
            key("family", Kind::Text, "sparse_gaussian", "prior family"),
            key("p", Kind::Real, "0.3", "keep probability"),
            key("r_grid", Kind::RealList, "0.2,0.4,0.6,0.8,1.0", "compression rates"),
            key("n_samples", Kind::Count, "20000", "Monte-Carlo samples per point"),
            key("n_fit", Kind::Count, "20000", "samples used to fit the linear decoder"),
            key("ml_iters", Kind::Count, "4000", "multilayer SGD iterations"),
            key("ml_lr", Kind::Real, "0.2", "multilayer SGD step size"),
            key("ml_batch", Kind::Count, "128", "multilayer minibatch size"),
            key("ml_eval_every", Kind::Count, "500", "multilayer evaluation interval"),
            key("ml_eval_samples", Kind::Count, "2048", "multilayer held-out samples"),
            key("vamp_k", Kind::Count, "15", "VAMP iterations"),
            key("vamp_mc", Kind::Count, "1000000", "Monte-Carlo samples for B1"),
        ],
        sgd: false,
        run: run_fig6,
    },
    ExperimentSpec {
        name: "fig8_sweep",
        summary: "Haar encoder with the Bayes denoiser: Monte-Carlo MSE vs r against theory",
        own: &[
            key("d", Kind::Count, "400", "input dimension"),
            key("family", Kind::Text, "sparse_gaussian", "prior family"),
            key("p", Kind::Real, "0.4", "keep probability"),
            key("r_grid", Kind::RealList, "0.25,0.5,1.0", "compression rates"),
            key("n_samples", Kind::Count, "20000", "Monte-Carlo samples per point"),
        ],
        sgd: false,
        run: run_fig8,
    },
    ExperimentSpec {
        name: "fig9_curve",
        summary: "optimal denoised MSE vs p against the Gaussian MSE",
        own: &[
            key("r", Kind::Real, "1", "compression rate"),
            key("family", Kind::Text, "sparse_gaussian", "prior family"),
            key("p_grid", Kind::RealList, P_GRID, "keep probabilities"),
        ],
        sgd: false,
        run: run_fig9,
    },
    ExperimentSpec {
        name: "gdmin_theorem",
        summary: "GD-min at keep probability p in lockstep with p = 1 from a shared initialization",
        own: &[
            key("d", Kind::Count, "128", "input dimension"),
            key("r", Kind::Real, "0.5", "compression rate"),
            key("p", Kind::Real, "0.5", "keep probability"),
            key("n_steps", Kind::Count, "3000", "GD-min steps"),
            key("n_masks", Kind::Count, "32", "masks per step"),
            key("eta", Kind::Real, "0", "step size, 0 for 0.5/sqrt(d)"),
            key("noise_sigma", Kind::Real, "0", "standard deviation of the injected noise"),
            key("record_every", Kind::Count, "10", "steps between trajectory rows"),
            key("eval_masks", Kind::Count, "256", "masks for the final MSE"),
        ],
        sgd: false,
        run: run_gdmin,
    },
];

pub fn find_experiment(name: &str) -> Result<&'static ExperimentSpec> {
    REGISTRY.iter().find(|e| e.name == name).ok_or_else(|| {
        let names: Vec<&str> = REGISTRY.iter().map(|e| e.name).collect();
        Error::Usage(format!("unknown experiment {name:?}; known: {}", names.join(", ")))
    })
}

/// Flat `key=value` lines or a flat JSON object.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let t = text.trim_start();
    if t.starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(t).map_err(|e| Error::Parse(format!("config JSON: {e}")))?;
        let obj = v.as_object().ok_or_else(|| Error::Parse("config JSON must be an object".into()))?;
        let mut out = BTreeMap::new();
        for (k, v) in obj {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                serde_json::Value::Array(a) => a
                    .iter()
                    .map(|x| match x {
                        serde_json::Value::Number(n) => Ok(n.to_string()),
                        _ => Err(Error::Parse(format!("{k}: arrays must hold numbers"))),
                    })
                    .collect::<Result<Vec<_>>>()?
                    .join(","),
                _ => return Err(Error::Parse(format!("{k}: nested values are not allowed"))),
            };
            out.insert(k.clone(), s);
        }
        return Ok(out);
    }
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", i + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Parse(format!("line {}: duplicate key {}", i + 1, k.trim())));
        }
    }
    Ok(out)
}

fn check_kind(name: &str, kind: Kind, v: &str) -> Result<()> {
    let bad = |what: &str| Error::Parse(format!("{name}: expected {what}, got {v:?}"));
    match kind {
        Kind::Count => v.parse::<usize>().map(|_| ()).map_err(|_| bad("a non-negative integer")),
        Kind::Seed => v.parse::<u64>().map(|_| ()).map_err(|_| bad("a u64 seed")),
        Kind::Real => v
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .map(|_| ())
            .ok_or_else(|| bad("a finite real")),
        Kind::Bool => v.parse::<bool>().map(|_| ()).map_err(|_| bad("true or false")),
        Kind::RealList => parse_list(v).map(|_| ()).map_err(|_| bad("a comma-separated list of reals")),
        Kind::Text => Ok(()),
    }
}

fn parse_list(v: &str) -> Result<Vec<f64>> {
    let items: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}"))))
        .collect::<Result<_>>()?;
    if items.is_empty() || items.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parse("empty or non-finite list".into()));
    }
    Ok(items)
}

/// Fully resolved, schema-checked parameters of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub experiment: String,
    values: BTreeMap<String, String>,
}

impl Params {
    /// Defaults overlaid with `overrides`; unknown keys are rejected and
    /// `meta.*` keys ignored.
    pub fn resolve(spec: &ExperimentSpec, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let keys = spec.keys();
        let mut values: BTreeMap<String, String> =
            keys.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        for (k, v) in overrides {
            if k.starts_with("meta.") {
                continue;
            }
            if k == "experiment" {
                if v != spec.name {
                    return Err(Error::Usage(format!("config is for {v:?}, not {:?}", spec.name)));
                }
                continue;
            }
            let ks = keys
                .iter()
                .find(|s| s.name == k)
                .ok_or_else(|| Error::Usage(format!("unknown key {k:?} for {}", spec.name)))?;
            check_kind(k, ks.kind, v)?;
            values.insert(k.clone(), v.clone());
        }
        Ok(Self {
            experiment: spec.name.to_string(),
            values,
        })
    }

    fn raw(&self, k: &str) -> Result<&str> {
        self.values
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::State(format!("no parameter {k}")))
    }

    pub fn count(&self, k: &str) -> Result<usize> {
        self.raw(k)?.parse().map_err(|e| Error::Parse(format!("{k}: {e}")))
    }

    pub fn real(&self, k: &str) -> Result<f64> {
        self.raw(k)?.parse().map_err(|e| Error::Parse(format!("{k}: {e}")))
    }

    pub fn flag(&self, k: &str) -> Result<bool> {
        self.raw(k)?.parse().map_err(|e| Error::Parse(format!("{k}: {e}")))
    }

    pub fn list(&self, k: &str) -> Result<Vec<f64>> {
        parse_list(self.raw(k)?)
    }

    pub fn text(&self, k: &str) -> Result<String> {
        Ok(self.raw(k)?.to_string())
    }

    pub fn seed(&self) -> Result<SeedSpec> {
        Ok(SeedSpec::from_seed(
            self.raw("seed")?.parse().map_err(|e| Error::Parse(format!("seed: {e}")))?,
        ))
    }

    pub fn family(&self) -> Result<PriorFamily> {
        PriorFamily::parse(&self.text("family")?)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let spec = find_experiment(&self.experiment)?;
        let mut o = self.values.clone();
        o.insert(k.to_string(), v.to_string());
        *self = Self::resolve(spec, &o)?;
        Ok(())
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn sgd_config(&self, seed: SeedSpec) -> Result<SgdConfig> {
        let mut c = SgdConfig::new(seed);
        c.learning_rate = self.real("learning_rate")?;
        c.batch_size = self.count("batch_size")?;
        c.n_iters = self.count("n_iters")?;
        c.tau = self.real("tau")?;
        c.eval_every = self.count("eval_every")?;
        c.eval_samples = self.count("eval_samples")?;
        c.decay_start = self.real("decay_start")?;
        c.final_lr_factor = self.real("final_lr_factor")?;
        c.trainable = TrainableFlags {
            encoder: self.flag("train_encoder")?,
            decoder: self.flag("train_decoder")?,
            nonlin: self.flag("train_nonlin")?,
            merge: self.flag("train_merge")?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub manifest: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Runs the experiment into `out`, then writes the manifest (also on
/// failure, with `meta.status=error`).
pub fn run_experiment(params: &Params, out: &Path) -> Result<RunOutcome> {
    let spec = find_experiment(&params.experiment)?;
    std::fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut artifacts = Vec::new();
    let res = (spec.run)(params, out, &mut artifacts);
    let mut kv = params.values.clone();
    kv.insert("experiment".into(), spec.name.into());
    kv.insert("meta.version".into(), env!("CARGO_PKG_VERSION").into());
    kv.insert("meta.wall_time_s".into(), format!("{:.3}", start.elapsed().as_secs_f64()));
    kv.insert("meta.threads".into(), rayon::current_num_threads().to_string());
    kv.insert("meta.artifacts".into(), artifacts.join(","));
    match &res {
        Ok(()) => {
            kv.insert("meta.status".into(), "ok".into());
        }
        Err(e) => {
            kv.insert("meta.status".into(), "error".into());
            kv.insert("meta.error".into(), e.to_string().replace('\n', " "));
        }
    }
    let manifest = out.join(MANIFEST_FILE);
    std::fs::write(&manifest, format_kv(&kv))?;
    res?;
    Ok(RunOutcome {
        out_dir: out.to_path_buf(),
        artifacts,
        manifest,
    })
}

/// Reads a manifest (or any config carrying an `experiment` key).
pub fn params_from_manifest(path: &Path) -> Result<Params> {
    let map = parse_kv(&std::fs::read_to_string(path)?);
    let name = map
        .get("experiment")
        .ok_or_else(|| Error::Parse(format!("{} has no experiment key", path.display())))?;
    Params::resolve(find_experiment(name)?, &map)
}

fn write(out: &Path, name: &str, content: &str, artifacts: &mut Vec<String>) -> Result<()> {
    std::fs::write(out.join(name), content)?;
    artifacts.push(name.to_string());
    Ok(())
}

/// `key,value` table of scalar results.
#[derive(Default)]
struct Summary(Vec<(String, String)>);

impl Summary {
    fn real(&mut self, k: &str, v: f64) -> &mut Self {
        self.0.push((k.into(), format_real(v)));
        self
    }

    fn text(&mut self, k: &str, v: impl ToString) -> &mut Self {
        self.0.push((k.into(), v.to_string()));
        self
    }

    fn csv(&self) -> String {
        let mut s = String::from("key,value\n");
        for (k, v) in &self.0 {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}

/// Parses a `key,value` summary written by an experiment.
pub fn read_summary(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Option<f64>>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows
            .push(row.into_iter().map(|v| v.map(format_real).unwrap_or_default()).collect());
    }

    fn csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

fn rows_for(d: usize, r: f64) -> Result<usize> {
    let n = (r * d as f64).round() as usize;
    if n == 0 || n > d {
        return Err(Error::Domain(format!("need 1 <= round(r d) <= d, got r = {r}, d = {d}")));
    }
    Ok(n)
}

fn haar_encoder(n: usize, d: usize, seed: SeedSpec) -> Result<EncoderMatrix> {
    Ok(EncoderMatrix::new(sample_haar_rows(n, d, seed)?, Provenance::HaarSubsampled))
}

/// Least-squares `alpha` for the decoder `alpha B^T`, fitted on its own
/// samples.
pub fn fit_scalar_decoder(b: &Matrix, prior: &Prior, n_fit: usize, seed: SeedSpec) -> Result<f64> {
    let d = b.ncols();
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..n_fit.div_ceil(MC_CHUNK) {
        let len = MC_CHUNK.min(n_fit - c * MC_CHUNK);
        let mut rng = seed.child(c as u64).rng();
        let x = sample_matrix(prior, d, len, &mut rng)?;
        let z = crate::models::encode_batch(b, &x, &mut rng)?;
        let y = b.transpose() * z;
        num += x.dot(&y);
        den += y.norm_squared();
    }
    if !(den > 0.0) {
        return Err(Error::Numerical("degenerate scalar decoder fit".into()));
    }
    Ok(num / den)
}

fn scalar_linear(b: EncoderMatrix, prior: &Prior, n_fit: usize, seed: SeedSpec) -> Result<Autoencoder> {
    let alpha = fit_scalar_decoder(&b, prior, n_fit, seed)?;
    let a = b.transpose() * alpha;
    Ok(Autoencoder::Linear(LinearDecoderAE { b, a }))
}

fn haar_bayes(b: EncoderMatrix, prior: &Prior, r: f64) -> Result<Autoencoder> {
    let a = b.transpose();
    let f = Nonlinearity::bayes(prior.clone(), state_evolution_params(r)?);
    Ok(Autoencoder::Denoised(DenoisedAE { b, a, f }))
}

fn mc(model: &Autoencoder, prior: &Prior, n: usize, seed: SeedSpec) -> Result<McEstimate> {
    mse_monte_carlo(model, prior, n, seed)
}

fn run_fig1(p: &Params, out: &Path, art: &mut Vec<String>) -> Result<()> {
    let (d, r, fam, seed) = (p.count("d")?, p.real("r")?, p.family()?, p.seed()?);
    let n = rows_for(d, r)?;
    let (n_samples, n_fit, sgd_iters) = (p.count("n_samples")?, p.count("n_fit")?, p.count("sgd_iters")?);
    let mut t = Table::new(&[
        "p",
        "theory_gaussian",
        "theory_identity",
        "theory",
        "haar_mse",
        "haar_stderr",
        "identity_mse",
        "identity_stderr",
        "empirical",
        "empirical_stderr",
        "sgd_mse",
        "sgd_stderr",
    ]);
    let haar = haar_encoder(n, d, seed.named("haar"))?;
    let ident = EncoderMatrix::identity_like(n, d)?;
    for (i, &pk) in p.list("p_grid")?.iter().enumerate() {
        let prior = fam.at(pk)?;
        let s = seed.child(i as u64);
        let tg = gaussian_mse(r)?;
        let ti = identity_mse(&prior, r)?;
        let h = mc(&scalar_linear(haar.clone(), &prior, n_fit, s.named("fit_h"))?, &prior, n_samples, s.named("mc_h"))?;
        let id = mc(&scalar_linear(ident.clone(), &prior, n_fit, s.named("fit_i"))?, &prior, n_samples, s.named("mc_i"))?;
        let best = if h.estimate <= id.estimate { h } else { id };
        let sgd = if sgd_iters > 0 {
            let mut cfg = SgdConfig::new(s.named("sgd"));
            cfg.n_iters = sgd_iters;
            cfg.learning_rate = p.real("learning_rate")?;
            cfg.batch_size = p.count("batch_size")?;
            cfg.eval_every = sgd_iters;
            let model = Autoencoder::Linear(init_linear(n, d, s.named("init")));
            let (m, _) = sgd_train(&model, &prior, &cfg)?;
            Some(mc(&m, &prior, n_samples, s.named("mc_s"))?)
        } else {
            None
        };
        t.push(vec![
            Some(pk),
            Some(tg),
            Some(ti),
            Some(tg.min(ti)),
            Some(h.estimate),
            Some(h.stderr),
            Some(id.estimate),
            Some(id.stderr),
            Some(best.estimate),
            Some(best.stderr),
            sgd.map(|e| e.estimate),
            sgd.map(|e| e.stderr),
        ]);
    }
    write(out, "fig1_sweep.csv", &t.csv(), art)
}

fn run_fig2(p: &Params, out: &Path, art: &mut Vec<String>) -> Result<()> {
    let (d, r, pk, seed) = (p.count("d")?, p.real("r")?, p.real("p")?, p.seed()?);
    let prior = p.family()?.at(pk)?;
    let n = rows_for(d, r)?;
    let model = match p.text("architecture")?.as_str() {
        "linear" => Autoencoder::Linear(init_linear(n, d, seed.named("init"))),
        "denoised" => Autoencoder::Denoised(init_denoised(
            n,
            d,
            Nonlinearity::Parametric(ParametricNonlin::INIT),
            seed.named("init"),
        )),
        other => return Err(Error::Usage(format!("architecture must be linear or denoised, got {other:?}"))),
    };
    let cfg = p.sgd_config(seed.named("sgd"))?;
    let (trained, traj) = sgd_train(&model, &prior, &cfg)?;
    write(out, "trajectory.csv", &traj.to_csv(), art)?;
    save_checkpoint(&trained, &out.join("checkpoint"))?;
    art.push("checkpoint".into());
    let tg = gaussian_mse(r)?;
    let ti = identity_mse(&prior, r)?;
    let mut levels = vec![tg, ti];
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let segs = detect_staircase(&traj, &levels, p.real("staircase_tol")?)?;
    let mut st = String::from("level,start_iter,end_iter,n_points,escape_iter\n");
    for s in &segs {
        st.push_str(&format!(
            "{},{},{},{},{}\n",
            format_real(s.level),
            s.start_iter,
            s.end_iter,
            s.n_points,
            s.escape_iter.map(|e| e.to_string()).unwrap_or_default()
        ));
    }
    write(out, "staircase.csv", &st, art)?;
    let rep = StructureReport::new(trained.encoder());
    write(out, "structure.csv", &rep.to_csv(), art)?;
    let fin = mc(&trained, &prior, p.count("n_final")?, seed.named("final"))?;
    let gauss_plateau = segs.iter().find(|s| s.level == tg);
    let mut sum = Summary::default();
    sum.real("final_mse", fin.estimate)
        .real("final_stderr", fin.stderr)
        .real("theory_gaussian", tg)
        .real("theory_identity", ti)
        .real("theory", tg.min(ti))
        .text("verdict", rep.verdict)
        .real("orth_defect", rep.orth_defect)
        .real("perm_score", rep.perm_score)
        .text("aborted", traj.aborted.as_deref().unwrap_or(""));
    match gauss_plateau {
        Some(s) => {
            sum.text("gaussian_plateau_points", s.n_points)
                .text("gaussian_plateau_start", s.start_iter)
                .text("gaussian_plateau_end", s.end_iter)
                .text("gaussian_plateau_escape", s.escape_iter.map(|e| e.to_string()).unwrap_or_default());
        }
        None => {
            sum.text("gaussian_plateau_points", 0);
        }
    }
    write(out, "summary.csv", &sum.csv(), art)
}

fn run_fig4(p: &Params, out: &Path, art: &mut Vec<String>) -> Result<()> {
    let (d, r, fam, seed) = (p.count("d")?, p.real("r")?, p.family()?, p.seed()?);
    let n = rows_for(d, r)?;
    let (n_samples, n_fit) = (p.count("n_samples")?, p.count("n_fit")?);
    let mut t = Table::new(&[
        "p",
        "theory_gaussian",
        "theory_denoised",
        "theory_identity",
        "theory",
        "haar_mse",
        "haar_stderr",
        "identity_mse",
        "identity_stderr",
        "empirical",
        "empirical_stderr",
    ]);
    let haar = haar_encoder(n, d, seed.named("haar"))?;
    let ident = EncoderMatrix::identity_like(n, d)?;
    for (i, &pk) in p.list("p_grid")?.iter().enumerate() {
        let prior = fam.at(pk)?;
        let s = seed.child(i as u64);
        let tg = gaussian_mse(r)?;
        let td = optimal_denoised_mse(&prior, r)?;
        let ti = identity_mse(&prior, r)?;
        let h = mc(&haar_bayes(haar.clone(), &prior, r)?, &prior, n_samples, s.named("mc_h"))?;
        let id = mc(&scalar_linear(ident.clone(), &prior, n_fit, s.named("fit_i"))?, &prior, n_samples, s.named("mc_i"))?;
        let best = if h.estimate <= id.estimate { h } else { id };
        t.push(vec![
            Some(pk),
            Some(tg),
            Some(td),
            Some(ti),
            Some(td.min(ti)),
            Some(h.estimate),
            Some(h.stderr),
            Some(id.estimate),
            Some(id.stderr),
            Some(best.estimate),
            Some(best.stderr),
        ]);
    }
    write(out, "fig4_sweep.csv", &t.csv(), art)
}

/// Row-normalizes `m`, leaving zero rows at zero.
fn unit_rows(m: &Matrix) -> Matrix {
    row_normalize(m)
}

fn run_fig5(p: &Params, out: &Path, art: &mut Vec<String>) -> Result<()> {
    let (d, r, pk, seed) = (p.count("d")?, p.real("r")?, p.real("p")?, p.seed()?);
    let prior = p.family()?.at(pk)?;
    let n = rows_for(d, r)?;
    let model = Autoencoder::Denoised(init_denoised(
        n,
        d,
        Nonlinearity::Parametric(ParametricNonlin::INIT),
        seed.named("init"),
    ));
    let cfg = p.sgd_config(seed.named("sgd"))?;
    let mut observe = |m: &Autoencoder| -> Vec<(String, f64)> {
        let bh = unit_rows(m.encoder());
        let eye = Matrix::identity(n, n);
        let bbt = (&bh * bh.transpose() - &eye).norm();
        let ba = match m {
            Autoencoder::Denoised(dm) => (&bh * unit_rows(&dm.a) - &eye).norm(),
            Autoencoder::Linear(lm) => (&bh * unit_rows(&lm.a) - &eye).norm(),
            Autoencoder::Multilayer(_) => f64::NAN,
        };
        vec![("bbt_dist".into(), bbt), ("ba_dist".into(), ba)]
    };
    let (trained, traj) = sgd_train_observed(&model, &prior, &cfg, &mut observe)?;
    write(out, "trajectory.csv", &traj.to_csv(), art)?;
    let mut tr = String::from("iter,loss,bbt_dist,ba_dist\n");
    for pt in &traj.points {
        let cell = |k: &str| pt.diagnostics.get(k).map(|v| format_real(*v)).unwrap_or_default();
        tr.push_str(&format!("{},{},{},{}\n", pt.iter, format_real(pt.loss), cell("bbt_dist"), cell("ba_dist")));
    }
    write(out, "fig5_trace.csv", &tr, art)?;
    save_checkpoint(&trained, &out.join("checkpoint"))?;
    art.push("checkpoint".into());
    let fin = mc(&trained, &prior, p.count("n_final")?, seed.named("final"))?;
    let mut sum = Summary::default();
    sum.real("final_mse", fin.estimate)
        .real("final_stderr", fin.stderr)
        .real("theory_denoised", optimal_denoised_mse(&prior, r)?)
        .real("theory_gaussian", gaussian_mse(r)?)
        .text("aborted", traj.aborted.as_deref().unwrap_or(""));
    if let Some(last) = traj.points.last() {
        sum.real("final_bbt_dist", last.diagnostics["bbt_dist"])
            .real("final_ba_dist", last.diagnostics["ba_dist"]);
    }
    write(out, "summary.csv", &sum.csv(), art)
}

fn run_fig6(p: &Params, out: &Path, art: &mut Vec<String>) -> Result<()> {
    let (d, pk, seed) = (p.count("d")?, p.real("p")?, p.seed()?);
    let prior = p.family()?.at(pk)?;
    let (n_samples, n_fit) = (p.count("n_samples")?, p.count("n_fit")?);
    let vcfg = VampConfig {
        k_max: p.count("vamp_k")?,
        n_mc: p.count("vamp_mc")?,
        seed: seed.named("vamp"),
        ..VampConfig::default()
    };
    let mut t = Table::new(&[
        "r",
        "vamp",
        "vamp_delta",
        "theory_gaussian",
        "theory_denoised",
        "linear_mse",
        "linear_stderr",
        "denoised_mse",
        "denoised_stderr",
        "multilayer_mse",
        "multilayer_stderr",
    ]);
    let mut vtrace = String::from("r,k,gamma1,tau1,gamma2,tau2,mse\n");
    for (i, &r) in p.list("r_grid")?.iter().enumerate() {
        let s = seed.child(i as u64);
        let n = rows_for(d, r)?;
        let vamp = vamp_se_run(pk, r, &vcfg)?;
        for line in vamp.trace_csv().lines().skip(1) {
            vtrace.push_str(&format!("{},{}\n", format_real(r), line));
        }
        let haar = haar_encoder(n, d, s.named("haar"))?;
        let lin = mc(&scalar_linear(haar.clone(), &prior, n_fit, s.named("fit"))?, &prior, n_samples, s.named("mc_l"))?;
        let den = mc(&haar_bayes(haar.clone(), &prior, r)?, &prior, n_samples, s.named("mc_d"))?;
        let model = Autoencoder::Multilayer(init_multilayer(haar));
        let mut cfg = SgdConfig::new(s.named("ml"));
        cfg.learning_rate = p.real("ml_lr")?;
        cfg.batch_size = p.count("ml_batch")?;
        cfg.n_iters = p.count("ml_iters")?;
        cfg.eval_every = p.count("ml_eval_every")?;
        cfg.eval_samples = p.count("ml_eval_samples")?;
        cfg.trainable = TrainableFlags::for_model(&model);
        let (trained, traj) = sgd_train(&model, &prior, &cfg)?;
        let tag = format!("r{}", format_grid_value(r));
        write(out, &format!("multilayer_trajectory_{tag}.csv"), &traj.to_csv(), art)?;
        save_checkpoint(&trained, &out.join(format!("checkpoint_{tag}")))?;
        art.push(format!("checkpoint_{tag}"));
        let ml = mc(&trained, &prior, n_samples, s.named("mc_m"))?;
        t.push(vec![
            Some(r),
            Some(vamp.mse),
            Some(vamp.last_delta),
            Some(gaussian_mse(r)?),
            Some(optimal_denoised_mse(&prior, r)?),
            Some(lin.estimate),
            Some(lin.stderr),
            Some(den.estimate),
            Some(den.stderr),
            Some(ml.estimate),
            Some(ml.stderr),
        ]);
    }
    write(out, "vamp_trace.csv", &vtrace, art)?;
    write(out, "fig6_sweep.csv", &t.csv(), art)
}

fn format_grid_value(v: f64) -> String {
    let s = format!("{v}");
    s.replace('.', "p")
}

fn run_fig8(p: &Params, out: &Path, art: &mut Vec<String>) -> Result<()> {
    let (d, pk, seed) = (p.count("d")?, p.real("p")?, p.seed()?);
    let prior = p.family()?.at(pk)?;
    let n_samples = p.count("n_samples")?;
    let mut t = Table::new(&["r", "theory_denoised", "theory_gaussian", "haar_mse", "haar_stderr", "rel_err"]);
    for (i, &r) in p.list("r_grid")?.iter().enumerate() {
        let s = seed.child(i as u64);
        let n = rows_for(d, r)?;
        let th = optimal_denoised_mse(&prior, r)?;
        let h = mc(&haar_bayes(haar_encoder(n, d, s.named("haar"))?, &prior, r)?, &prior, n_samples, s.named("mc"))?;
        t.push(vec![
            Some(r),
            Some(th),
            Some(gaussian_mse(r)?),
            Some(h.estimate),
            Some(h.stderr),
            Some((h.estimate - th).abs() / th),
        ]);
    }
    write(out, "fig8_sweep.csv", &t.csv(), art)
}

fn run_fig9(p: &Params, out: &Path, art: &mut Vec<String>) -> Result<()> {
    let (r, fam) = (p.real("r")?, p.family()?);
    let mut t = Table::new(&["p", "optimal_denoised", "gaussian"]);
    for &pk in &p.list("p_grid")? {
        t.push(vec![Some(pk), Some(optimal_denoised_mse(&fam.at(pk)?, r)?), Some(gaussian_mse(r)?)]);
    }
    write(out, "fig9_curve.csv", &t.csv(), art)
}

fn run_gdmin(p: &Params, out: &Path, art: &mut Vec<String>) -> Result<()> {
    let (d, r, pk, seed) = (p.count("d")?, p.real("r")?, p.real("p")?, p.seed()?);
    let mut cfg = GdminConfig::new(d, pk, seed);
    let eta = p.real("eta")?;
    if eta > 0.0 {
        cfg.eta = eta;
    }
    cfg.n_steps = p.count("n_steps")?;
    cfg.n_masks = p.count("n_masks")?;
    cfg.noise_sigma = p.real("noise_sigma")?;
    cfg.record_every = p.count("record_every")?;
    cfg.eval_masks = p.count("eval_masks")?;
    let pair = gdmin_pair(d, r, &cfg)?;
    write(out, "trajectory.csv", &pair.run.trajectory.to_csv(), art)?;
    write(out, "trajectory_reference.csv", &pair.reference.trajectory.to_csv(), art)?;
    let mut dev = String::from("iter,deviation\n");
    for (t, v) in &pair.deviation {
        dev.push_str(&format!("{t},{}\n", format_real(*v)));
    }
    write(out, "deviation.csv", &dev, art)?;
    write_matrix_csv(&out.join("B_final.csv"), &pair.run.b)?;
    art.push("B_final.csv".into());
    let target = gaussian_mse(r)?;
    let last = pair
        .run
        .trajectory
        .points
        .last()
        .ok_or_else(|| Error::State("empty GD-min trajectory".into()))?;
    let mut sum = Summary::default();
    sum.real("final_mse", pair.run.final_mse)
        .real("target", target)
        .real("rel_err", (pair.run.final_mse - target).abs() / target)
        .real("final_sst_dev", last.diagnostics["ssT_dev"])
        .real("final_subspace_drift", last.diagnostics["subspace_drift"])
        .real("sup_deviation", pair.sup_deviation)
        .real("reference_final_mse", pair.reference.final_mse)
        .real("eta", cfg.eta);
    write(out, "summary.csv", &sum.csv(), art)
}

/// Output directory used when none is given.
pub fn default_out_dir(name: &str, seed: u64) -> PathBuf {
    PathBuf::from("runs").join(format!("{name}_seed{seed}"))
}

/// Lists the experiments and their keys, for `--help`-style output.
pub fn describe_registry() -> String {
    let mut s = String::new();
    for e in registry() {
        s.push_str(&format!("{}: {}\n", e.name, e.summary));
        for k in e.keys() {
            s.push_str(&format!("    {} = {}    {}\n", k.name, k.default, k.help));
        }
    }
    s
}

/// Convenience: the trajectory CSV at `path` as loss points.
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path)?;
    let mut t = Trajectory::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut it = line.split(',');
        let (Some(a), Some(b)) = (it.next(), it.next()) else {
            return Err(Error::Parse(format!("line {}: too few columns", i + 1)));
        };
        let iter = a.parse().map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        let loss = b.parse().map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        t.push(crate::training::TrajectoryPoint::new(iter, loss))?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let kv = parse_config("# c\nd = 16\np_grid=0.2,0.5\n").unwrap();
        assert_eq!(kv["d"], "16");
        let js = parse_config(r#"{"d": 16, "p_grid": [0.2, 0.5], "family": "sparse_gaussian"}"#).unwrap();
        assert_eq!(js["p_grid"], "0.2,0.5");
        assert!(parse_config("d=1\nd=2").is_err());
        assert!(parse_config(r#"{"a": {"b": 1}}"#).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let spec = find_experiment("fig9_curve").unwrap();
        let mut o = BTreeMap::new();
        o.insert("dd".to_string(), "3".to_string());
        assert!(matches!(Params::resolve(spec, &o), Err(Error::Usage(_))));
        o.clear();
        o.insert("meta.wall_time_s".to_string(), "3".to_string());
        o.insert("r".to_string(), "abc".to_string());
        assert!(matches!(Params::resolve(spec, &o), Err(Error::Parse(_))));
        o.insert("r".to_string(), "0.5".to_string());
        assert_eq!(Params::resolve(spec, &o).unwrap().real("r").unwrap(), 0.5);
        assert!(find_experiment("nope").is_err());
    }

    #[test]
    fn every_spec_resolves_with_defaults() {
        for e in registry() {
            let p = Params::resolve(e, &BTreeMap::new()).unwrap();
            assert!(p.seed().is_ok(), "{}", e.name);
            let names: Vec<_> = e.keys().iter().map(|k| k.name).collect();
            let mut sorted = names.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), names.len(), "duplicate keys in {}", e.name);
        }
    }

    #[test]
    fn fig9_runs_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = find_experiment("fig9_curve").unwrap();
        let mut o = BTreeMap::new();
        o.insert("p_grid".to_string(), "0.3,0.6".to_string());
        let p = Params::resolve(spec, &o).unwrap();
        let a = dir.path().join("a");
        let run = run_experiment(&p, &a).unwrap();
        let p2 = params_from_manifest(&run.manifest).unwrap();
        assert_eq!(p2, p);
        let b = dir.path().join("b");
        run_experiment(&p2, &b).unwrap();
        let ca = std::fs::read(a.join("fig9_curve.csv")).unwrap();
        assert_eq!(ca, std::fs::read(b.join("fig9_curve.csv")).unwrap());
        let text = String::from_utf8(ca).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn failed_run_writes_error_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = find_experiment("fig8_sweep").unwrap();
        let mut o = BTreeMap::new();
        o.insert("r_grid".to_string(), "1.5".to_string());
        o.insert("d".to_string(), "8".to_string());
        let p = Params::resolve(spec, &o).unwrap();
        assert!(run_experiment(&p, dir.path()).is_err());
        let kv = parse_kv(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap());
        assert_eq!(kv["meta.status"], "error");
    }
}
