//! Two-stage training: instance-level contrastive pretraining of an
//! image–text and an image–point model, then scene-level training of the
//! three-branch model initialized from those checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{
    encode_image_batch, encode_point_batch, encode_text_batch, ImageInstanceInput, PointInstanceInput,
    TextInstanceInput, IMAGE_PREFIX, POINT_PREFIX, TEXT_PREFIX,
};
use crate::loss::{batch_contrastive_node, check_alpha, combined_scene_loss_node};
use crate::model::{embed_scenes, init_block, init_scene_model, HintSelection, Modality, ModelConfig};
use crate::numcore::{adam_step, lr_at_epoch, AdamState, Graph, NodeId, Parallelism, ParamStore};
use crate::retrieval::{mean_cross_modal_r1, run_task_matrix, EvalSettings, RecallReport};
use crate::scenegen::SceneTriplet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr_base: f64,
    pub epochs_instance: usize,
    pub epochs_scene: usize,
    pub batch_instance: usize,
    pub batch_scene: usize,
    pub tau: f64,
    pub alpha: f64,
    pub hints_per_scene: usize,
    pub seed: u64,
    /// Start scene training from fresh branch weights.
    pub no_pretrain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr_base: 5e-4,
            epochs_instance: 20,
            epochs_scene: 20,
            batch_instance: 256,
            batch_scene: 64,
            tau: 0.1,
            alpha: 0.3,
            hints_per_scene: 6,
            seed: 42,
            no_pretrain: false,
        }
    }
}

impl TrainConfig {
    /// Smaller scene batches and shorter runs for a single desktop core.
    pub fn desk() -> Self {
        TrainConfig {
            batch_scene: 32,
            epochs_instance: 10,
            epochs_scene: 10,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        check_alpha(self.alpha)?;
        if !(self.lr_base > 0.0) || !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config("lrBase and tau must be positive".into()));
        }
        if self.batch_instance == 0 || self.batch_scene == 0 || self.hints_per_scene == 0 {
            return Err(Error::Config("batch sizes and hintsPerScene must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "instanceIT")]
    InstanceIT,
    #[serde(rename = "instanceIP")]
    InstanceIP,
    #[serde(rename = "scene")]
    Scene,
}

impl Stage {
    /// Parameter prefixes a checkpoint of this stage must carry.
    pub fn required_prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::InstanceIT => &[TEXT_PREFIX, IMAGE_PREFIX],
            Stage::InstanceIP => &[POINT_PREFIX, IMAGE_PREFIX],
            Stage::Scene => &[
                TEXT_PREFIX,
                IMAGE_PREFIX,
                POINT_PREFIX,
                "sap.text.",
                "sap.image.",
                "sap.point.",
            ],
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Validation R@1 per task; empty for instance stages.
    #[serde(default)]
    pub r1: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub config: TrainConfig,
    pub epoch: usize,
    pub stage: Stage,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct Sidecar {
    config: TrainConfig,
    epoch: usize,
    stage: Stage,
    history: Vec<EpochRecord>,
    num_scalars: usize,
}

/// `<checkpoint>.json`, next to the binary parameter file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn check(&self) -> Result<()> {
        for prefix in self.stage.required_prefixes() {
            if !self.params.paths().any(|p| p.starts_with(prefix)) {
                return Err(Error::Format(format!(
                    "{:?} checkpoint lacks {prefix}* parameters",
                    self.stage
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let meta = Sidecar {
            config: self.config.clone(),
            epoch: self.epoch,
            stage: self.stage,
            history: self.history.clone(),
            num_scalars: self.params.num_scalars(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let side = sidecar_path(path);
        std::fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = ParamStore::load(path)?;
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        if meta.num_scalars != params.num_scalars() {
            return Err(Error::Format("sidecar does not match parameter file".into()));
        }
        let ck = Checkpoint {
            params,
            config: meta.config,
            epoch: meta.epoch,
            stage: meta.stage,
            history: meta.history,
        };
        ck.check()?;
        Ok(ck)
    }
}

/// Seeded uniform choice of `min(k, available)` hint indices, returned in
/// ascending order. The draw depends on `seed` and the scene id only.
pub fn select_text_hints(scene: &SceneTriplet, k: usize, seed: u64) -> Vec<usize> {
    let n = scene.instances.len();
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene.scene_id);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn instance_pairs(train: &[SceneTriplet]) -> Vec<(usize, usize)> {
    train
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| (0..sc.instances.len()).map(move |i| (s, i)))
        .collect()
}

/// Contrastive loss of one batch of instance pairs.
pub fn instance_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TrainConfig,
    stage: Stage,
    train: &[SceneTriplet],
    batch: &[(usize, usize)],
) -> Result<NodeId> {
    let mc = &cfg.model;
    let images: Vec<ImageInstanceInput> = batch
        .iter()
        .map(|&(s, i)| ImageInstanceInput::from_record(&train[s].instances[i], mc.count_norm))
        .collect();
    let a = encode_image_batch(g, store, mc, &images)?;
    let b = match stage {
        Stage::InstanceIT => {
            let texts = batch
                .iter()
                .map(|&(s, i)| TextInstanceInput::from_record(&train[s].instances[i], mc.use_uv, mc.stub_dim))
                .collect::<Result<Vec<_>>>()?;
            encode_text_batch(g, store, &texts)?
        }
        Stage::InstanceIP => {
            let points: Vec<PointInstanceInput> = batch
                .iter()
                .map(|&(s, i)| {
                    PointInstanceInput::from_record(&train[s].instances[i], train[s].location, mc.count_norm)
                })
                .collect();
            encode_point_batch(g, store, mc, &points)?
        }
        Stage::Scene => return Err(Error::Contract("scene stage has no instance loss".into())),
    };
    batch_contrastive_node(g, a, b, cfg.tau)
}

fn pretrain_one(train: &[SceneTriplet], cfg: &TrainConfig, stage: Stage, par: Parallelism) -> Result<Checkpoint> {
    let (other, seed) = match stage {
        Stage::InstanceIT => (Modality::Text, cfg.seed),
        Stage::InstanceIP => (Modality::Point, cfg.seed.wrapping_add(1)),
        Stage::Scene => return Err(Error::Contract("not an instance stage".into())),
    };
    let mut store = ParamStore::new();
    init_block(&mut store, &cfg.model, Modality::Image, seed)?;
    init_block(&mut store, &cfg.model, other, seed)?;
    let mut pairs = instance_pairs(train);
    if pairs.is_empty() {
        return Err(Error::Data("training split has no instances".into()));
    }
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs_instance);
    for epoch in 0..cfg.epochs_instance {
        let lr = lr_at_epoch(epoch, cfg.lr_base);
        pairs.sort_unstable();
        pairs.shuffle(&mut epoch_rng(seed, 1000 + epoch as u64));
        let mut total = 0.0;
        for batch in pairs.chunks(cfg.batch_instance) {
            let mut g = Graph::with_parallelism(par);
            let loss = instance_loss(&mut g, &store, cfg, stage, train, batch)?;
            total += g.scalar(loss)? * batch.len() as f64;
            g.backward(loss, &mut store)?;
            adam_step(&mut store, &mut adam, lr)?;
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss: total / pairs.len() as f64,
            r1: BTreeMap::new(),
        };
        log::info!("{stage:?} epoch {epoch}: loss {:.5}", rec.loss);
        history.push(rec);
    }
    Ok(Checkpoint {
        params: store,
        config: cfg.clone(),
        epoch: cfg.epochs_instance,
        stage,
        history,
    })
}

/// Image–text and image–point models trained on single instance pairs.
pub fn pretrain_instance_models(
    train: &[SceneTriplet],
    cfg: &TrainConfig,
    par: Parallelism,
) -> Result<(Checkpoint, Checkpoint)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok((
        pretrain_one(train, cfg, Stage::InstanceIT, par)?,
        pretrain_one(train, cfg, Stage::InstanceIP, par)?,
    ))
}

/// Fresh scene model with branch weights copied from the instance stage:
/// text and image branches from the image–text model, the point branch from
/// the image–point model.
pub fn transfer_weights(cfg: &TrainConfig, it: &Checkpoint, ip: &Checkpoint) -> Result<ParamStore> {
    if it.stage != Stage::InstanceIT || ip.stage != Stage::InstanceIP {
        return Err(Error::Config("expected image-text and image-point checkpoints".into()));
    }
    for ck in [it, ip] {
        let m = &ck.config.model;
        if m.dim != cfg.model.dim || m.stub_dim != cfg.model.stub_dim || m.use_uv != cfg.model.use_uv {
            return Err(Error::Config(format!(
                "{:?} checkpoint (D={}, uv={}) does not match the scene model (D={}, uv={})",
                ck.stage, m.dim, m.use_uv, cfg.model.dim, cfg.model.use_uv
            )));
        }
    }
    let mut store = init_scene_model(&cfg.model, cfg.seed.wrapping_add(2))?;
    store.copy_prefix_from(&it.params, TEXT_PREFIX)?;
    store.copy_prefix_from(&it.params, IMAGE_PREFIX)?;
    store.copy_prefix_from(&ip.params, POINT_PREFIX)?;
    Ok(store)
}

/// `α·L(I,T) + (1−α)·L(I,P)` over a batch of scenes. Branches whose loss
/// term has zero weight are not evaluated.
pub fn scene_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TrainConfig,
    scenes: &[&SceneTriplet],
    hints: &HintSelection,
) -> Result<NodeId> {
    let mc = &cfg.model;
    let image = embed_scenes(g, store, mc, scenes, Modality::Image, None)?;
    let l_it = if cfg.alpha > 0.0 {
        let text = embed_scenes(g, store, mc, scenes, Modality::Text, Some(hints))?;
        Some(batch_contrastive_node(g, image, text, cfg.tau)?)
    } else {
        None
    };
    let l_ip = if cfg.alpha < 1.0 {
        let point = embed_scenes(g, store, mc, scenes, Modality::Point, None)?;
        Some(batch_contrastive_node(g, image, point, cfg.tau)?)
    } else {
        None
    };
    combined_scene_loss_node(g, l_it, l_ip, cfg.alpha)
}

/// Validation metrics of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub reports: Vec<RecallReport>,
    pub mean_r1: f64,
}

pub fn evaluate_epoch(
    store: &ParamStore,
    model: &ModelConfig,
    split: &[SceneTriplet],
    eval: &EvalSettings,
    par: Parallelism,
) -> Result<EvalSummary> {
    let reports = run_task_matrix(split, store, model, eval, par)?;
    Ok(EvalSummary {
        mean_r1: mean_cross_modal_r1(&reports),
        reports,
    })
}

/// Scene-level training. Keeps the parameters with the best mean
/// cross-modal validation R@1 (the last epoch's when `val` is empty).
pub fn train_scene_model(
    train: &[SceneTriplet],
    val: &[SceneTriplet],
    pretrained: Option<(&Checkpoint, &Checkpoint)>,
    cfg: &TrainConfig,
    par: Parallelism,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut store = match (pretrained, cfg.no_pretrain) {
        (Some((it, ip)), false) => transfer_weights(cfg, it, ip)?,
        (None, false) => return Err(Error::Config("scene training needs pretrained checkpoints".into())),
        (_, true) => init_scene_model(&cfg.model, cfg.seed.wrapping_add(2))?,
    };
    let eval = EvalSettings {
        hints: cfg.hints_per_scene,
        ..EvalSettings::default()
    };
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs_scene);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs_scene {
        let lr = lr_at_epoch(epoch, cfg.lr_base);
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(cfg.seed, 2000 + epoch as u64));
        let hint_seed = cfg.seed.wrapping_mul(7919).wrapping_add(epoch as u64 + 1);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_scene) {
            let scenes: Vec<&SceneTriplet> = batch.iter().map(|&i| &train[i]).collect();
            let hints: HintSelection = scenes
                .iter()
                .map(|s| select_text_hints(s, cfg.hints_per_scene, hint_seed))
                .collect();
            let mut g = Graph::with_parallelism(par);
            let loss = scene_loss(&mut g, &store, cfg, &scenes, &hints)?;
            total += g.scalar(loss)? * batch.len() as f64;
            g.backward(loss, &mut store)?;
            adam_step(&mut store, &mut adam, lr)?;
        }
        let mut rec = EpochRecord {
            epoch,
            lr,
            loss: total / train.len() as f64,
            r1: BTreeMap::new(),
        };
        let score = if val.is_empty() {
            epoch as f64
        } else {
            let summary = evaluate_epoch(&store, &cfg.model, val, &eval, par)?;
            for r in &summary.reports {
                rec.r1.insert(r.task.clone(), r.at(1).unwrap_or(0.0));
            }
            summary.mean_r1
        };
        log::info!("scene epoch {epoch}: loss {:.5}, val mean R@1 {score:.4}", rec.loss);
        history.push(rec);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, store.clone()));
        }
    }
    let (params, epoch) = match best {
        Some((_, e, p)) => (p, e + 1),
        None => (store, 0),
    };
    Ok(Checkpoint {
        params,
        config: cfg.clone(),
        epoch,
        stage: Stage::Scene,
        history,
    })
}
