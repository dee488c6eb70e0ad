use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use placerec::audit::gradient_audit;
use placerec::retrieval::{
    embed_split, mean_cross_modal_r1, recall_at_k, task_matrix, threshold_sweep, Criterion, TASKS,
};
use placerec::scenegen::{generate_world, read_dataset, split_of, write_dataset, Split};
use placerec::train::{pretrain_instance_models, train_scene_model, EpochRecord};
use placerec::{Checkpoint, Error, Parallelism, RecallReport, SceneTriplet, Stage, TrainConfig, WorldConfig};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::error::CliError;

pub type CliResult<T> = Result<T, CliError>;

pub fn checkpoint_path(run_dir: &Path, stage: Stage) -> PathBuf {
    let name = match stage {
        Stage::InstanceIT => "instanceIT.uloc",
        Stage::InstanceIP => "instanceIP.uloc",
        Stage::Scene => "scene.uloc",
    };
    run_dir.join(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::output(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))
}

/// Scenes of the configured dataset after a stub-width check against the
/// model config.
fn load_dataset(cfg: &RunConfig) -> CliResult<Vec<SceneTriplet>> {
    let scenes = read_dataset(&cfg.paths.dataset)?;
    let width = scenes
        .iter()
        .flat_map(|s| s.instances.first())
        .map(|r| r.stub_text_vec.len())
        .next();
    if let Some(w) = width {
        if w != cfg.train.model.stub_dim {
            return Err(CliError::Config(format!(
                "dataset stub width {w} differs from train.model.stubDim {}",
                cfg.train.model.stub_dim
            )));
        }
    }
    Ok(scenes)
}

pub fn parse_split(name: &str) -> CliResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!("unknown split `{other}`"))),
    }
}

// ------------------------------------------------------------------ generate

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct DatasetMeta<'a> {
    schema_version: u32,
    command: &'static str,
    config: &'a RunConfig,
    scenes: usize,
    splits: &'a SplitCounts,
}

pub fn meta_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn count_splits(scenes: &[SceneTriplet]) -> SplitCounts {
    let n = |s| scenes.iter().filter(|x| x.split == s).count();
    SplitCounts {
        train: n(Split::Train),
        val: n(Split::Val),
        test: n(Split::Test),
    }
}

pub fn generate(cfg: &RunConfig, par: Parallelism) -> CliResult<SplitCounts> {
    let scenes = placerec::scenegen::world::generate_world_with(&cfg.world, par)?;
    let path = &cfg.paths.dataset;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_dataset(&scenes, path)?;
    let counts = count_splits(&scenes);
    write_json(
        &meta_path(path),
        &DatasetMeta {
            schema_version: SCHEMA_VERSION,
            command: "generate",
            config: cfg,
            scenes: scenes.len(),
            splits: &counts,
        },
    )?;
    Ok(counts)
}

// --------------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    Instance,
    Scene,
    Both,
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "camelCase")]
enum LogEvent<'a> {
    #[serde(rename_all = "camelCase")]
    Config { config: &'a RunConfig },
    #[serde(rename_all = "camelCase")]
    Epoch {
        stage: Stage,
        #[serde(flatten)]
        record: &'a EpochRecord,
    },
    #[serde(rename_all = "camelCase")]
    Checkpoint { stage: Stage, path: &'a Path, epoch: usize },
}

struct TrainLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TrainLog {
    fn open(path: PathBuf) -> CliResult<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::output(&path, e))?;
        Ok(TrainLog {
            path,
            out: BufWriter::new(f),
        })
    }

    fn event(&mut self, e: &LogEvent) -> CliResult<()> {
        let line = serde_json::to_string(e).expect("log event serializes");
        writeln!(self.out, "{line}").map_err(|err| CliError::output(&self.path, err))
    }

    fn checkpoint(&mut self, ck: &Checkpoint, path: &Path) -> CliResult<()> {
        for record in &ck.history {
            self.event(&LogEvent::Epoch {
                stage: ck.stage,
                record,
            })?;
        }
        self.event(&LogEvent::Checkpoint {
            stage: ck.stage,
            path,
            epoch: ck.epoch,
        })?;
        self.out.flush().map_err(|err| CliError::output(&self.path, err))
    }
}

fn save(ck: &Checkpoint, run_dir: &Path, log: &mut TrainLog) -> CliResult<PathBuf> {
    let path = checkpoint_path(run_dir, ck.stage);
    ck.save(&path)?;
    log.checkpoint(ck, &path)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

/// Checkpoints written by a training run.
pub fn train(cfg: &RunConfig, stage: StageSel, par: Parallelism) -> CliResult<Vec<PathBuf>> {
    let scenes = load_dataset(cfg)?;
    let train = split_of(&scenes, Split::Train);
    let val = split_of(&scenes, Split::Val);
    let dir = &cfg.paths.run_dir;
    create_dir(dir)?;
    write_json(&dir.join("run_config.json"), cfg)?;
    let mut log = TrainLog::open(dir.join("train_log.jsonl"))?;
    log.event(&LogEvent::Config { config: cfg })?;

    let tc = &cfg.train;
    let mut written = Vec::new();
    let mut pretrained = None;
    let run_instance = stage == StageSel::Instance || (stage == StageSel::Both && !tc.no_pretrain);
    if run_instance {
        log::info!("pretraining instance models on {} scenes", train.len());
        let (it, ip) = pretrain_instance_models(&train, tc, par).map_err(CliError::training)?;
        written.push(save(&it, dir, &mut log)?);
        written.push(save(&ip, dir, &mut log)?);
        pretrained = Some((it, ip));
    }
    if stage != StageSel::Instance {
        if pretrained.is_none() && !tc.no_pretrain {
            let it = Checkpoint::load(&checkpoint_path(dir, Stage::InstanceIT))?;
            let ip = Checkpoint::load(&checkpoint_path(dir, Stage::InstanceIP))?;
            pretrained = Some((it, ip));
        }
        log::info!("training scene model on {} scenes", train.len());
        let refs = pretrained.as_ref().map(|(a, b)| (a, b));
        let ck = train_scene_model(&train, &val, refs, tc, par).map_err(CliError::training)?;
        written.push(save(&ck, dir, &mut log)?);
    }
    Ok(written)
}

// ---------------------------------------------------------------------- eval

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct HintSweepEntry {
    pub hints: usize,
    pub reports: Vec<RecallReport>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub config: RunConfig,
    pub checkpoint: PathBuf,
    pub model_config: TrainConfig,
    pub split: Split,
    pub num_scenes: usize,
    /// Standard protocol: distance threshold for every task, excluding the
    /// query itself on uni-modal tasks.
    pub task_matrix: Vec<RecallReport>,
    /// Cross-modal tasks under the exact-location criterion.
    pub exact_location: Vec<RecallReport>,
    pub mean_cross_modal_r1: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub threshold_sweep: Vec<RecallReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub hint_sweep: Vec<HintSweepEntry>,
}

fn load_scene_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::Io { .. } => CliError::Pipeline(e),
        other => CliError::evaluation(other),
    })?;
    if ck.stage != Stage::Scene {
        return Err(CliError::evaluation(Error::Format(format!(
            "{} holds a {:?} checkpoint, not a scene model",
            path.display(),
            ck.stage
        ))));
    }
    Ok(ck)
}

fn split_scenes(cfg: &RunConfig, split: Split) -> CliResult<Vec<SceneTriplet>> {
    let scenes = split_of(&load_dataset(cfg)?, split);
    if scenes.is_empty() {
        return Err(CliError::Pipeline(Error::Data(format!(
            "dataset has no {split:?} scenes"
        ))));
    }
    Ok(scenes)
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: Split, sweep: bool, par: Parallelism) -> CliResult<EvalReport> {
    let ck = load_scene_checkpoint(checkpoint)?;
    let scenes = split_scenes(cfg, split)?;
    let e = &cfg.eval;
    let model = &ck.config.model;
    let emb = embed_split(&scenes, &ck.params, model, e.hints, e.hint_seed, par).map_err(CliError::evaluation)?;
    let matrix = task_matrix(&emb, e.d, &e.ks, par).map_err(CliError::evaluation)?;
    let mut exact = Vec::new();
    for &(q, d) in TASKS.iter().filter(|(q, d)| q != d) {
        exact.push(
            recall_at_k(emb.get(q), emb.get(d), &e.ks, Criterion::ExactLocation, false, par)
                .map_err(CliError::evaluation)?,
        );
    }
    let mut report = EvalReport {
        schema_version: SCHEMA_VERSION,
        command: "eval",
        config: cfg.clone(),
        checkpoint: checkpoint.to_path_buf(),
        model_config: ck.config.clone(),
        split,
        num_scenes: scenes.len(),
        mean_cross_modal_r1: mean_cross_modal_r1(&matrix),
        task_matrix: matrix,
        exact_location: exact,
        threshold_sweep: Vec::new(),
        hint_sweep: Vec::new(),
    };
    if sweep {
        report.threshold_sweep = threshold_sweep(&emb, &e.thresholds, &e.ks, par).map_err(CliError::evaluation)?;
        for &hints in &e.hint_counts {
            let emb = embed_split(&scenes, &ck.params, model, hints, e.hint_seed, par).map_err(CliError::evaluation)?;
            let reports = task_matrix(&emb, e.d, &e.ks, par).map_err(CliError::evaluation)?;
            report.hint_sweep.push(HintSweepEntry { hints, reports });
        }
    }
    Ok(report)
}

pub fn save_report<T: Serialize>(path: &Path, report: &T) -> CliResult<()> {
    write_json(path, report)
}

// ---------------------------------------------------------------- embed-dump

pub fn embed_dump(cfg: &RunConfig, checkpoint: &Path, split: Split, out: &Path, par: Parallelism) -> CliResult<usize> {
    let ck = load_scene_checkpoint(checkpoint)?;
    let scenes = split_scenes(cfg, split)?;
    let e = &cfg.eval;
    let emb =
        embed_split(&scenes, &ck.params, &ck.config.model, e.hints, e.hint_seed, par).map_err(CliError::evaluation)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let f = File::create(out).map_err(|err| CliError::output(out, err))?;
    let mut w = BufWriter::new(f);
    placerec::retrieval::write_embedding_csv(&mut w, &[&emb.text, &emb.image, &emb.point])
        .and_then(|_| w.flush())
        .map_err(|err| CliError::output(out, err))?;
    let mut side = out.as_os_str().to_owned();
    side.push(".config.json");
    write_json(
        Path::new(&side),
        &serde_json::json!({
            "schemaVersion": SCHEMA_VERSION,
            "command": "embed-dump",
            "config": cfg,
            "checkpoint": checkpoint,
            "modelConfig": ck.config,
            "split": split,
        }),
    )?;
    Ok(emb.text.len() + emb.image.len() + emb.point.len())
}

// ----------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct GradCheckLine {
    pub graph: String,
    pub max_error: f64,
    pub worst_path: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct GradCheckSummary {
    pub schema_version: u32,
    pub command: &'static str,
    pub config: RunConfig,
    pub dim: usize,
    pub tolerance: f64,
    pub graphs: Vec<GradCheckLine>,
    pub pass: bool,
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Audits every trainable graph at width `dim` on a four-scene world drawn
/// with the configured world settings.
pub fn gradcheck(cfg: &RunConfig, dim: usize) -> CliResult<GradCheckSummary> {
    let world = WorldConfig {
        num_scenes: 4,
        area_extent: 300.0,
        split_fractions: (1.0, 0.0, 0.0),
        split_block: 4,
        ..cfg.world.clone()
    };
    let scenes = generate_world(&world)?;
    let mut tc = cfg.train.clone();
    tc.model.dim = dim;
    tc.model.ffn_hidden = 2 * dim;
    tc.model.validate()?;
    let entries = gradient_audit(&scenes, &tc, cfg.train.seed).map_err(CliError::training)?;
    let graphs: Vec<GradCheckLine> = entries
        .iter()
        .map(|e| GradCheckLine {
            graph: e.graph.clone(),
            max_error: e.report.max_error(),
            worst_path: e.report.worst().map(|(p, _)| p.to_string()),
        })
        .collect();
    let pass = graphs.iter().all(|g| g.max_error < GRAD_TOLERANCE);
    Ok(GradCheckSummary {
        schema_version: SCHEMA_VERSION,
        command: "gradcheck",
        config: cfg.clone(),
        dim,
        tolerance: GRAD_TOLERANCE,
        graphs,
        pass,
    })
}

// -------------------------------------------------------------------- ablate

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AlphaRow {
    pub alpha: f64,
    pub best_epoch: usize,
    /// R@1 per task under the standard protocol.
    pub r1: std::collections::BTreeMap<String, f64>,
    pub mean_cross_modal_r1: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AlphaTable {
    pub schema_version: u32,
    pub command: &'static str,
    pub config: RunConfig,
    pub rows: Vec<AlphaRow>,
}

/// Loss-weight sweep: instance pretraining once, then one scene model per
/// α, each scored on the test split.
pub fn ablate(cfg: &RunConfig, par: Parallelism) -> CliResult<AlphaTable> {
    let scenes = load_dataset(cfg)?;
    let train = split_of(&scenes, Split::Train);
    let val = split_of(&scenes, Split::Val);
    let test = split_of(&scenes, Split::Test);
    if test.is_empty() {
        return Err(CliError::Pipeline(Error::Data("dataset has no test scenes".into())));
    }
    let pretrained = if cfg.train.no_pretrain {
        None
    } else {
        Some(pretrain_instance_models(&train, &cfg.train, par).map_err(CliError::training)?)
    };
    let mut rows = Vec::new();
    for &alpha in &cfg.eval.alphas {
        log::info!("alpha {alpha}");
        let tc = TrainConfig {
            alpha,
            ..cfg.train.clone()
        };
        let refs = pretrained.as_ref().map(|(a, b)| (a, b));
        let ck = train_scene_model(&train, &val, refs, &tc, par).map_err(CliError::training)?;
        let e = &cfg.eval;
        let emb = embed_split(&test, &ck.params, &tc.model, e.hints, e.hint_seed, par).map_err(CliError::evaluation)?;
        let reports = task_matrix(&emb, e.d, &e.ks, par).map_err(CliError::evaluation)?;
        rows.push(AlphaRow {
            alpha,
            best_epoch: ck.epoch,
            r1: reports
                .iter()
                .map(|r| (r.task.clone(), r.at(1).unwrap_or(0.0)))
                .collect(),
            mean_cross_modal_r1: mean_cross_modal_r1(&reports),
        });
    }
    Ok(AlphaTable {
        schema_version: SCHEMA_VERSION,
        command: "ablate",
        config: cfg.clone(),
        rows,
    })
}
