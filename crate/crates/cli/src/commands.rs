use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use qdlab::dataset::{self, PruneScheme, TrajectoryDataset};
use qdlab::experiments::{
    self, sha256_hex, slug, to_csv, version_string, Artifact, CurveInput, GeneralizationConfig, MethodRun,
    ReportWriter,
};
use qdlab::qd::Evolution;
use qdlab::qdt::{self, EvalPlan, QdtModel, TrainingLog};
use qdlab::{build_cvt, Centroids, EnvSpec, Repertoire};

use crate::config::{DatasetMethod, ExperimentSection, RunConfig};

/// An error that exits with status 1: bad input rather than a failed run.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

pub fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>()
            || matches!(
                e.downcast_ref::<qdlab::Error>(),
                Some(
                    qdlab::Error::InvalidArgument(_)
                        | qdlab::Error::MissingArtifact { .. }
                        | qdlab::Error::DimensionMismatch { .. }
                )
            )
    })
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("missing {what}: {}", path.display())))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("out").to_string()
}

/// `dir/name.ext` -> `dir/name.suffix`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_file_name(format!("{}.{suffix}", stem(path)))
}

fn manifest_path(output: &Path) -> PathBuf {
    let name = output.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    output.with_file_name(format!("{name}.manifest.json"))
}

pub struct Ctx {
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub config_hash: String,
    /// 0 quiet, 1 summaries, 2 progress.
    pub verbosity: u8,
}

impl Ctx {
    pub fn new(run_dir: PathBuf, config: RunConfig, verbosity: u8) -> Result<Self> {
        std::fs::create_dir_all(&run_dir).with_context(|| format!("creating run directory {}", run_dir.display()))?;
        let config_hash = experiments::config_hash(&config)?;
        let echo = run_dir.join("config.json");
        std::fs::write(&echo, serde_json::to_string_pretty(&config)? + "\n")
            .with_context(|| format!("writing {}", echo.display()))?;
        Ok(Self {
            run_dir,
            config,
            config_hash,
            verbosity,
        })
    }

    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.run_dir.join(name)
    }

    fn say(&self, msg: impl fmt::Display) {
        if self.verbosity >= 1 {
            println!("{msg}");
        }
    }

    fn progress(&self, msg: impl fmt::Display) {
        if self.verbosity >= 2 {
            eprintln!("{msg}");
        }
    }

    fn env(&self) -> EnvSpec {
        self.config.env.spec()
    }

    /// The configured environment, checked against a dataset's header.
    fn env_for(&self, header: &dataset::DatasetHeader, source: &Path) -> Result<EnvSpec> {
        let env = self.env();
        if header.env != env.name() || header.episode_len != env.episode_len {
            return Err(invalid(format!(
                "{} holds {} episodes of length {}, but the config runs {} with episode_len = {}",
                source.display(),
                header.env,
                header.episode_len,
                env.name(),
                env.episode_len
            )));
        }
        Ok(env)
    }

    /// Goal grid shared by every evaluation of the run.
    fn goals(&self) -> Result<Centroids> {
        let n = self.config.eval.n_goals;
        Ok(build_cvt(&self.env().bd_space(), n, 100 * n, 100, self.config.eval.goal_seed)?)
    }

    fn stage(&self, command: &str) -> Stage<'_> {
        Stage {
            ctx: self,
            command: command.to_string(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Written next to the primary output of every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub wall_time_s: f64,
}

pub struct Stage<'a> {
    ctx: &'a Ctx,
    command: String,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Stage<'_> {
    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn output(&mut self, path: &Path) {
        if !self.outputs.iter().any(|p| p == path) {
            self.outputs.push(path.to_path_buf());
        }
    }

    fn entry(&self, path: &Path) -> Result<FileEntry> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        let shown = path.strip_prefix(&self.ctx.run_dir).unwrap_or(path);
        Ok(FileEntry {
            path: shown.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        })
    }

    fn finish(self, manifest: &Path) -> Result<Manifest> {
        let m = Manifest {
            command: self.command.clone(),
            args: std::env::args().skip(1).collect(),
            seed: self.ctx.config.seed,
            config_hash: self.ctx.config_hash.clone(),
            version: version_string(),
            inputs: self.inputs.iter().map(|p| self.entry(p)).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| self.entry(p)).collect::<Result<_>>()?,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        std::fs::write(manifest, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", manifest.display()))?;
        Ok(m)
    }
}

pub fn cvt(ctx: &Ctx, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| ctx.path("centroids.json"));
    let mut st = ctx.stage("cvt");
    let c = &ctx.config.cvt;
    let centroids = build_cvt(&ctx.env().bd_space(), c.n_cells, c.n_samples, c.max_iters, ctx.config.seed)?;
    ensure_parent(&out)?;
    centroids.save(&out)?;
    st.output(&out);
    st.finish(&manifest_path(&out))?;
    ctx.say(format_args!("{} cells -> {}", centroids.n_cells, out.display()));
    Ok(())
}

pub fn evolve(ctx: &Ctx, centroids: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.config;
    let centroid_path = centroids.unwrap_or_else(|| ctx.path("centroids.json"));
    require(&centroid_path, "centroids (run `qdlab cvt` first)")?;
    let env = ctx.env();
    let cells = Centroids::load(&centroid_path)?;
    if cells.dim != env.bd_dim() {
        return Err(invalid(format!(
            "{} has {}-D centroids but {} descriptors are {}-D",
            centroid_path.display(),
            cells.dim,
            env.name(),
            env.bd_dim()
        )));
    }
    let out = out.unwrap_or_else(|| ctx.path(format!("repertoire_{}_s{}.json", cfg.evolution.variant, cfg.seed)));
    let mut st = ctx.stage("evolve");
    st.input(&centroid_path);

    let mut evo = Evolution::new(&env, &cells, &cfg.evolution)?;
    while !evo.is_done() {
        let row = evo.step()?;
        let it = evo.iteration();
        if it % 25 == 0 || evo.is_done() {
            ctx.progress(format_args!(
                "iter {it:>4}  evals {:>8}  coverage {:.3}  max fitness {:.4}",
                row.env_interactions, row.coverage, row.max_fitness
            ));
        }
    }
    let (mut rep, metrics) = evo.finish();

    ensure_parent(&out)?;
    let same_dir = |a: &Path, b: &Path| match (a.parent().map(Path::canonicalize), b.parent().map(Path::canonicalize)) {
        (Some(Ok(x)), Some(Ok(y))) => x == y,
        _ => false,
    };
    if same_dir(&centroid_path, &out) {
        rep.centroids_ref = centroid_path.file_name().and_then(|s| s.to_str()).map(String::from);
    }
    rep.save(&out)?;
    let metrics_path = sibling(&out, "metrics.csv");
    metrics.write_csv(&metrics_path)?;
    st.output(&out);
    let reference = rep.centroids_ref.clone().expect("set by save");
    let written = out.parent().unwrap_or(Path::new(".")).join(reference);
    if !same_dir(&centroid_path, &out) {
        st.output(&written);
    }
    st.output(&metrics_path);
    st.finish(&manifest_path(&out))?;
    ctx.say(format_args!(
        "{}: {} elites, coverage {:.3}, max fitness {:.4} -> {}",
        rep.algo,
        rep.len(),
        rep.coverage(),
        rep.max_fitness().unwrap_or(f64::NAN),
        out.display()
    ));
    Ok(())
}

pub fn reassess(ctx: &Ctx, repertoire: PathBuf, out: Option<PathBuf>) -> Result<()> {
    require(&repertoire, "repertoire")?;
    let rep = Repertoire::load(&repertoire)?;
    let out = out.unwrap_or_else(|| sibling(&repertoire, "reassess.csv"));
    let mut st = ctx.stage("reassess");
    st.input(&repertoire);
    let rows = experiments::run_reassessment(
        &[(rep.algo.name().to_string(), ctx.config.seed, &rep)],
        ctx.config.experiment.reassess_evals,
    )?;
    ensure_parent(&out)?;
    std::fs::write(&out, to_csv(&rows)?).with_context(|| format!("writing {}", out.display()))?;
    st.output(&out);
    st.finish(&manifest_path(&out))?;
    for r in &rows {
        ctx.say(format_args!(
            "{:<8} coverage {:.3}  max fitness {:.4}  qd score {:.2}",
            r.phase, r.coverage, r.max_fitness, r.qd_score
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct ZoneRow {
    zone: usize,
    cell: usize,
    hits: usize,
    fitness: f64,
}

pub fn dataset_make(ctx: &Ctx, repertoire: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.config;
    let d = &cfg.dataset;
    require(&repertoire, "repertoire")?;
    let rep = Repertoire::load(&repertoire)?;
    let mut st = ctx.stage("dataset-make");
    st.input(&repertoire);
    let (label, ds, zones) = match d.method {
        DatasetMethod::Zones => {
            let (sel, ds) = dataset::make_dataset(&rep, d.n_zones, d.n_probe_episodes, d.n_trajectories, cfg.seed)?;
            (rep.algo.name().to_string(), ds, Some(sel))
        }
        DatasetMethod::Naive => (
            "naive".to_string(),
            dataset::make_naive_dataset(&rep, d.n_trajectories, cfg.seed)?,
            None,
        ),
    };
    let out = out.unwrap_or_else(|| ctx.path(format!("dataset_{label}_s{}.qdt1", cfg.seed)));
    ensure_parent(&out)?;
    ds.write(&out)?;
    st.output(&out);
    if let Some(sel) = &zones {
        let rows: Vec<ZoneRow> = sel
            .iter()
            .map(|s| ZoneRow {
                zone: s.zone,
                cell: s.cell,
                hits: s.hits,
                fitness: s.fitness,
            })
            .collect();
        let path = sibling(&out, "zones.csv");
        std::fs::write(&path, to_csv(&rows)?).with_context(|| format!("writing {}", path.display()))?;
        st.output(&path);
    }
    st.finish(&manifest_path(&out))?;
    match zones {
        Some(sel) => ctx.say(format_args!(
            "{} trajectories from {} zone policies -> {}",
            ds.len(),
            sel.len(),
            out.display()
        )),
        None => ctx.say(format_args!(
            "{} trajectories from {} elites -> {}",
            ds.len(),
            rep.len(),
            out.display()
        )),
    }
    Ok(())
}

fn dataset_space(ds: &TrajectoryDataset) -> Result<qdlab::BdSpace> {
    Ok(EnvSpec::by_name(&ds.header.env)?.bd_space())
}

pub fn dataset_prune(ctx: &Ctx, input: PathBuf, out: Option<PathBuf>) -> Result<()> {
    require(&input, "dataset")?;
    let scheme: PruneScheme = ctx.config.dataset.prune.parse()?;
    let ds = TrajectoryDataset::read(&input)?;
    let out = out.unwrap_or_else(|| input.with_file_name(format!("{}_{}.qdt1", stem(&input), slug(&scheme.to_string()))));
    let mut st = ctx.stage("dataset-prune");
    st.input(&input);
    let pruned = dataset::prune_dataset(&ds, scheme, &dataset_space(&ds)?, ctx.config.seed)?;
    ensure_parent(&out)?;
    pruned.write(&out)?;
    st.output(&out);
    st.finish(&manifest_path(&out))?;
    ctx.say(format_args!("{scheme}: kept {} of {} -> {}", pruned.len(), ds.len(), out.display()));
    Ok(())
}

pub fn dataset_inspect(ctx: &Ctx, input: PathBuf, bins: usize, out: Option<PathBuf>) -> Result<()> {
    require(&input, "dataset")?;
    let ds = TrajectoryDataset::read(&input)?;
    let text = dataset::inspect(&ds, &dataset_space(&ds)?, bins);
    match out {
        Some(out) => {
            let mut st = ctx.stage("dataset-inspect");
            st.input(&input);
            ensure_parent(&out)?;
            std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            st.output(&out);
            st.finish(&manifest_path(&out))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn train(ctx: &Ctx, input: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.config;
    require(&input, "dataset")?;
    let ds = TrajectoryDataset::read(&input)?;
    let env = ctx.env_for(&ds.header, &input)?;
    let goals = ctx.goals()?;
    let name = stem(&input);
    let name = name.strip_prefix("dataset_").unwrap_or(&name);
    let out = out.unwrap_or_else(|| ctx.path(format!("checkpoints/qdt_{name}.qdtw")));
    let mut st = ctx.stage("train");
    st.input(&input);
    let plan = EvalPlan {
        env: &env,
        goals: &goals,
        n_episodes: cfg.eval.n_episodes,
        seed: cfg.seed,
    };
    let outcome = qdt::fit(&ds, &cfg.qdt, Some(&plan), cfg.seed, |r| match r.mean_distance {
        Some(d) => ctx.progress(format_args!("epoch {:>3}  loss {:.5}  distance {d:.3}", r.epoch, r.train_loss)),
        None => ctx.progress(format_args!("epoch {:>3}  loss {:.5}", r.epoch, r.train_loss)),
    })?;
    ensure_parent(&out)?;
    outcome.best.save(&out)?;
    st.output(&out);
    let last = sibling(&out, "last.qdtw");
    outcome.last.save(&last)?;
    st.output(&last);
    let log = sibling(&out, "log.csv");
    outcome.log.write_csv(&log)?;
    st.output(&log);
    if let Some(grid) = &outcome.best_grid {
        let path = sibling(&out, "goals.csv");
        grid.write_csv(&path)?;
        st.output(&path);
    }
    st.finish(&manifest_path(&out))?;
    let distance = outcome.best_grid.as_ref().map_or(f64::NAN, |g| g.overall_distance());
    ctx.say(format_args!(
        "best epoch {} of {}, mean distance {distance:.3} -> {}",
        outcome.best_epoch,
        cfg.qdt.epochs,
        out.display()
    ));
    Ok(())
}

pub fn eval(ctx: &Ctx, checkpoint: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.config;
    require(&checkpoint, "checkpoint")?;
    let model = QdtModel::load(&checkpoint)?;
    let env = ctx.env();
    let goals = ctx.goals()?;
    let out = out.unwrap_or_else(|| sibling(&checkpoint, "eval.csv"));
    let mut st = ctx.stage("eval");
    st.input(&checkpoint);
    let grid = qdt::evaluate_grid(&model, &env, &goals, cfg.eval.n_episodes, cfg.seed)?;
    ensure_parent(&out)?;
    grid.write_csv(&out)?;
    st.output(&out);
    st.finish(&manifest_path(&out))?;
    ctx.say(format_args!(
        "{} goals: mean distance {:.3}, mean fitness {:.4}, mean spread {:.3} -> {}",
        grid.rows.len(),
        grid.overall_distance(),
        grid.overall_fitness(),
        grid.overall_spread(),
        out.display()
    ));
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ExperimentName {
    Accuracy,
    Generalization,
    Reassessment,
    TrainingCurves,
    Fitness,
}

impl ExperimentName {
    fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Accuracy => "accuracy",
            ExperimentName::Generalization => "generalization",
            ExperimentName::Reassessment => "reassessment",
            ExperimentName::TrainingCurves => "training-curves",
            ExperimentName::Fitness => "fitness",
        }
    }
}

fn method_label(variant: &str) -> String {
    variant.to_uppercase()
}

fn qdt_label(variant: &str) -> String {
    format!("QDT({})", variant.to_uppercase())
}

struct Artifacts<'a> {
    ctx: &'a Ctx,
    inputs: Vec<PathBuf>,
}

impl Artifacts<'_> {
    fn locate(&mut self, template: &str, variant: &str, seed: u64, what: &str) -> Result<PathBuf> {
        let path = ExperimentSection::resolve(template, &self.ctx.run_dir, variant, seed);
        require(&path, what)?;
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn repertoire(&mut self, variant: &str, seed: u64) -> Result<Repertoire> {
        let p = self.locate(&self.ctx.config.experiment.repertoire_path.clone(), variant, seed, "repertoire")?;
        Ok(Repertoire::load(&p)?)
    }

    fn checkpoint(&mut self, variant: &str, seed: u64) -> Result<QdtModel> {
        let p = self.locate(&self.ctx.config.experiment.checkpoint_path.clone(), variant, seed, "checkpoint")?;
        Ok(QdtModel::load(&p)?)
    }

    fn dataset(&mut self, variant: &str, seed: u64) -> Result<TrajectoryDataset> {
        let p = self.locate(&self.ctx.config.experiment.dataset_path.clone(), variant, seed, "dataset")?;
        Ok(TrajectoryDataset::read(&p)?)
    }

    fn training_log(&mut self, variant: &str, seed: u64) -> Result<TrainingLog> {
        let ckpt = ExperimentSection::resolve(&self.ctx.config.experiment.checkpoint_path, &self.ctx.run_dir, variant, seed);
        let path = sibling(&ckpt, "log.csv");
        require(&path, "training log")?;
        self.inputs.push(path.clone());
        Ok(TrainingLog::read_csv(&path)?)
    }
}

#[derive(Serialize)]
struct SeededFitnessRow {
    seed: u64,
    source: String,
    epoch: Option<usize>,
    max_fitness: f64,
}

pub fn experiment(ctx: &Ctx, name: ExperimentName, out: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.config;
    let e = &cfg.experiment;
    let env = ctx.env();
    let space = env.bd_space();
    let dir = out.unwrap_or_else(|| ctx.path(name.as_str()));
    let mut arts = Artifacts { ctx, inputs: Vec::new() };
    let mut writers: Vec<ReportWriter> = Vec::new();
    let started = ctx.stage(&format!("experiment {}", name.as_str()));

    match name {
        ExperimentName::Accuracy => {
            // load everything up front so a missing artifact fails before any work
            let mut reps = Vec::new();
            for v in &e.repertoire_variants {
                for &s in &e.seeds {
                    reps.push((method_label(v), s, arts.repertoire(v, s)?));
                }
            }
            let mut models = Vec::new();
            for v in &e.qdt_variants {
                for &s in &e.seeds {
                    models.push((qdt_label(v), s, arts.checkpoint(v, s)?));
                }
            }
            let goals = ctx.goals()?;
            let mut runs: Vec<MethodRun<'_>> = models
                .iter()
                .map(|(m, s, q)| MethodRun {
                    method: m.clone(),
                    seed: *s,
                    artifact: Artifact::Qdt(q),
                })
                .collect();
            runs.extend(reps.iter().map(|(m, s, r)| MethodRun {
                method: m.clone(),
                seed: *s,
                artifact: Artifact::Repertoire(r),
            }));
            let report = experiments::run_accuracy(&env, &goals, &runs, cfg.eval.n_episodes)?;
            let mut w = ReportWriter::new(&dir)?;
            report.write(&mut w, &space)?;
            writers.push(w);
            for s in &report.summary {
                ctx.say(format_args!(
                    "{:<16} distance {:.3} ± {:.3}",
                    s.method, s.distance_mean, s.distance_std
                ));
            }
        }
        ExperimentName::Generalization => {
            let datasets = e
                .seeds
                .iter()
                .map(|&s| Ok((s, arts.dataset(&e.focus_variant, s)?)))
                .collect::<Result<Vec<_>>>()?;
            let goals = ctx.goals()?;
            let gcfg = GeneralizationConfig {
                arms: e.prune_arms.clone(),
                n_episodes: cfg.eval.n_episodes,
            };
            for (seed, ds) in &datasets {
                ctx.env_for(&ds.header, Path::new(&e.dataset_path))?;
                let report = experiments::run_generalization(ds, &env, &goals, &cfg.qdt, &gcfg, *seed, |arm, r| {
                    ctx.progress(format_args!("s{seed} {arm:<16} epoch {:>3}  loss {:.5}", r.epoch, r.train_loss))
                })?;
                let mut w = ReportWriter::new(&dir.join(format!("s{seed}")))?;
                report.write(&mut w, &space)?;
                writers.push(w);
                for a in &report.summary {
                    ctx.say(format_args!(
                        "s{seed} {:<16} n {:>5}  distance {:.3}  removed {}",
                        a.arm,
                        a.n_records,
                        a.overall_distance,
                        a.removed_distance.map_or("-".into(), |d| format!("{d:.3}"))
                    ));
                }
            }
        }
        ExperimentName::Reassessment => {
            let mut reps = Vec::new();
            for v in &e.repertoire_variants {
                for &s in &e.seeds {
                    reps.push((method_label(v), s, arts.repertoire(v, s)?));
                }
            }
            let refs: Vec<(String, u64, &Repertoire)> = reps.iter().map(|(m, s, r)| (m.clone(), *s, r)).collect();
            let rows = experiments::run_reassessment(&refs, e.reassess_evals)?;
            let mut w = ReportWriter::new(&dir)?;
            w.csv("reassessment.csv", &rows)?;
            writers.push(w);
            for r in &rows {
                ctx.say(format_args!(
                    "{:<12} s{} {:<8} coverage {:.3}  max fitness {:.4}  qd score {:.2}",
                    r.method, r.seed, r.phase, r.coverage, r.max_fitness, r.qd_score
                ));
            }
        }
        ExperimentName::TrainingCurves => {
            let mut datasets = Vec::new();
            for v in &e.qdt_variants {
                for &s in &e.seeds {
                    datasets.push((v.clone(), s, arts.dataset(v, s)?));
                }
            }
            let goals = ctx.goals()?;
            let inputs: Vec<CurveInput<'_>> = datasets
                .iter()
                .map(|(v, s, ds)| CurveInput {
                    variant: qdt_label(v),
                    seed: *s,
                    dataset: ds,
                })
                .collect();
            let report = experiments::run_training_curves(&inputs, &env, &goals, &cfg.qdt, cfg.eval.n_episodes, |v, s, r| {
                ctx.progress(format_args!("{v} s{s} epoch {:>3}  loss {:.5}", r.epoch, r.train_loss))
            })?;
            let mut w = ReportWriter::new(&dir)?;
            report.write(&mut w)?;
            writers.push(w);
            for v in &e.qdt_variants {
                let label = qdt_label(v);
                if let Some(d) = report.final_distance(&label) {
                    ctx.say(format_args!("{label:<16} final distance {d:.3}"));
                }
            }
        }
        ExperimentName::Fitness => {
            let mut rows = Vec::new();
            let mut inputs = Vec::new();
            for &s in &e.seeds {
                let log = arts.training_log(&e.focus_variant, s)?;
                let rep = arts.repertoire(&e.focus_variant, s)?;
                inputs.push((s, log, rep));
            }
            for (s, log, rep) in &inputs {
                let reference = method_label(&e.focus_variant);
                let fit = experiments::run_fitness_eval(
                    &qdt_label(&e.focus_variant),
                    log,
                    Some((&reference, rep, *s)),
                    e.reassess_evals,
                )?;
                rows.extend(fit.into_iter().map(|r| SeededFitnessRow {
                    seed: *s,
                    source: r.source,
                    epoch: r.epoch,
                    max_fitness: r.max_fitness,
                }));
            }
            let mut w = ReportWriter::new(&dir)?;
            w.csv("fitness.csv", &rows)?;
            writers.push(w);
            for r in &rows {
                let epoch = r.epoch.map_or(String::new(), |e| format!(" epoch {e}"));
                ctx.say(format_args!("s{} {}{epoch}: {:.4}", r.seed, r.source, r.max_fitness));
            }
        }
    }

    let mut st = started;
    for p in arts.inputs {
        st.input(&p);
    }
    for w in writers {
        let wdir = w.dir().to_path_buf();
        let names: Vec<String> = w.files().iter().map(|f| f.name.clone()).collect();
        w.finish(name.as_str(), &ctx.config_hash)?;
        for n in names {
            st.output(&wdir.join(n));
        }
        st.output(&wdir.join("provenance.json"));
    }
    st.finish(&dir.join("manifest.json"))?;
    ctx.say(format_args!("{} -> {}", name.as_str(), dir.display()));
    Ok(())
}

fn collect_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for entry in entries {
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().to_string();
        if path.is_dir() {
            collect_manifests(&path, out)?;
        } else if name == "manifest.json" || name.ends_with(".manifest.json") {
            out.push(path);
        }
    }
    Ok(())
}

fn csv_as_markdown(text: &str) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        if i == 0 {
            out.push_str(&format!("|{}\n", " --- |".repeat(cells.len())));
        }
    }
    out
}

/// Summary tables a report picks up when their experiment has run.
const SUMMARY_TABLES: [&str; 5] = [
    "accuracy_summary.csv",
    "generalization_summary.csv",
    "reassessment.csv",
    "curve_summary.csv",
    "fitness.csv",
];

pub fn report(ctx: &Ctx, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| ctx.path("report.md"));
    let mut manifests = Vec::new();
    collect_manifests(&ctx.run_dir, &mut manifests)?;
    let own = manifest_path(&out);
    manifests.retain(|m| *m != own);
    let mut st = ctx.stage("report");

    let mut md = format!(
        "# Run report\n\nRun directory: `{}`  \nVersion: {}  \nConfig hash: `{}`\n\n## Stages\n\n",
        ctx.run_dir.display(),
        version_string(),
        ctx.config_hash
    );
    md.push_str("| manifest | command | seed | outputs | wall time (s) |\n| --- | --- | --- | --- | --- |\n");
    let mut tables = Vec::new();
    for path in &manifests {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        st.input(path);
        let shown = path.strip_prefix(&ctx.run_dir).unwrap_or(path);
        md.push_str(&format!(
            "| `{}` | {} | {} | {} | {:.1} |\n",
            shown.display(),
            m.command,
            m.seed,
            m.outputs.len(),
            m.wall_time_s
        ));
        let base = path.parent().unwrap_or(Path::new("."));
        for o in &m.outputs {
            let file = Path::new(&o.path);
            let name = file.file_name().and_then(|s| s.to_str()).unwrap_or("");
            if SUMMARY_TABLES.contains(&name) {
                let full = if file.is_absolute() { file.to_path_buf() } else { ctx.run_dir.join(file) };
                let full = if full.exists() { full } else { base.join(name) };
                tables.push((o.path.clone(), full));
            }
        }
    }
    for (label, path) in tables {
        if let Ok(text) = std::fs::read_to_string(&path) {
            md.push_str(&format!("\n## {label}\n\n{}", csv_as_markdown(&text)));
        }
    }
    ensure_parent(&out)?;
    std::fs::write(&out, &md).with_context(|| format!("writing {}", out.display()))?;
    st.output(&out);
    st.finish(&own)?;
    ctx.say(format_args!("{} manifests -> {}", manifests.len(), out.display()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_and_manifest_names() {
        let p = Path::new("/r/checkpoints/qdt_me-ls_s0.qdtw");
        assert_eq!(sibling(p, "log.csv"), Path::new("/r/checkpoints/qdt_me-ls_s0.log.csv"));
        assert_eq!(manifest_path(p), Path::new("/r/checkpoints/qdt_me-ls_s0.qdtw.manifest.json"));
    }

    #[test]
    fn markdown_tables() {
        let md = csv_as_markdown("a,b\n1,2\n");
        assert_eq!(md, "| a | b |\n| --- | --- |\n| 1 | 2 |\n");
    }

    #[test]
    fn missing_files_are_validation_errors() {
        let err = require(Path::new("/nonexistent/x.qdtw"), "checkpoint").unwrap_err();
        assert!(is_validation(&err));
        assert!(err.to_string().contains("/nonexistent/x.qdtw"));
        assert!(!is_validation(&anyhow::anyhow!("boom")));
    }
}
