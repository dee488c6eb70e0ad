//! Descriptor databases, exhaustive top-k search and Recall@k under the
//! distance-threshold and exact-location criteria.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed_scenes, HintSelection, Modality, ModelConfig};
use crate::numcore::{dot, Graph, Matrix, Parallelism, ParamStore};
use crate::par::map_ordered;
use crate::scenegen::SceneTriplet;
use crate::train::select_text_hints;

/// Scenes embedded per graph when building a database.
pub const DB_CHUNK: usize = 32;

/// Scene descriptors of one modality with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDB {
    pub modality: Modality,
    pub ids: Vec<u64>,
    pub locations: Vec<[f64; 2]>,
    /// `M × D`, unit rows.
    pub vectors: Matrix,
    /// Scenes left out because their descriptor could not be formed.
    pub skipped: Vec<u64>,
}

impl DescriptorDB {
    pub fn new(modality: Modality, ids: Vec<u64>, locations: Vec<[f64; 2]>, vectors: Matrix) -> Result<Self> {
        if ids.len() != locations.len() || ids.len() != vectors.rows() {
            return Err(Error::Dimension("database columns differ in length".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Data(format!("duplicate scene id {dup} in database")));
        }
        Ok(DescriptorDB {
            modality,
            ids,
            locations,
            vectors,
            skipped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Hint subsets for every scene, drawn with one seed.
pub fn hint_selection(scenes: &[SceneTriplet], hints: usize, seed: u64) -> HintSelection {
    scenes.iter().map(|s| select_text_hints(s, hints, seed)).collect()
}

fn embed_chunk(
    store: &ParamStore,
    cfg: &ModelConfig,
    scenes: &[&SceneTriplet],
    modality: Modality,
    hints: Option<&HintSelection>,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::with_parallelism(Parallelism::Sequential);
    let f = embed_scenes(&mut g, store, cfg, scenes, modality, hints)?;
    let v = g.value(f);
    if !v.is_finite() {
        return Err(Error::Numeric("scene descriptor".into()));
    }
    Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
}

/// One descriptor per scene. Scenes violating the descriptor contract are
/// skipped with a warning and listed in [`DescriptorDB::skipped`].
pub fn build_db(
    scenes: &[SceneTriplet],
    modality: Modality,
    store: &ParamStore,
    cfg: &ModelConfig,
    hints: Option<&HintSelection>,
    par: Parallelism,
) -> Result<DescriptorDB> {
    if let Some(h) = hints {
        if h.len() != scenes.len() {
            return Err(Error::Contract("one hint subset per scene".into()));
        }
    }
    let starts: Vec<usize> = (0..scenes.len()).step_by(DB_CHUNK).collect();
    let chunks = map_ordered(par, &starts, |_, &start| {
        let end = (start + DB_CHUNK).min(scenes.len());
        let refs: Vec<&SceneTriplet> = scenes[start..end].iter().collect();
        let sel = hints.map(|h| h[start..end].to_vec());
        match embed_chunk(store, cfg, &refs, modality, sel.as_ref()) {
            Ok(rows) => rows.into_iter().map(Ok).collect::<Vec<_>>(),
            // Retry one by one to isolate the offending scenes.
            Err(_) => (start..end)
                .map(|i| {
                    let one = hints.map(|h| vec![h[i].clone()]);
                    embed_chunk(store, cfg, &[&scenes[i]], modality, one.as_ref()).map(|mut v| v.remove(0))
                })
                .collect(),
        }
    });
    let mut ids = Vec::new();
    let mut locations = Vec::new();
    let mut data = Vec::new();
    let mut skipped = Vec::new();
    for (scene, res) in scenes.iter().zip(chunks.into_iter().flatten()) {
        match res {
            Ok(v) => {
                ids.push(scene.scene_id);
                locations.push(scene.location);
                data.extend(v);
            }
            Err(e) => {
                log::warn!("skipping scene {} ({}): {e}", scene.scene_id, modality.name());
                skipped.push(scene.scene_id);
            }
        }
    }
    let vectors = Matrix::from_vec(ids.len(), cfg.dim, data)?;
    let mut db = DescriptorDB::new(modality, ids, locations, vectors)?;
    db.skipped = skipped;
    Ok(db)
}

fn ranked(scores: &[f64], ids: &[u64], skip: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&j| Some(j) != skip).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    order
}

/// Exhaustive cosine search: `min(k, M)` entries, best first, ties broken
/// by ascending scene id.
pub fn query_topk(db: &DescriptorDB, q: &[f64], k: usize) -> Result<Vec<(u64, f64)>> {
    if db.is_empty() {
        return Err(Error::Data("empty database".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if q.len() != db.dim() {
        return Err(Error::Dimension(format!("query width {} vs {}", q.len(), db.dim())));
    }
    let scores: Vec<f64> = (0..db.len()).map(|j| dot(db.vectors.row(j), q)).collect();
    Ok(ranked(&scores, &db.ids, None)
        .into_iter()
        .take(k)
        .map(|j| (db.ids[j], scores[j]))
        .collect())
}

/// When a retrieved entry counts as a correct match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    /// Within `d` meters of the query's location.
    DistanceThreshold(f64),
    /// Same scene as the query.
    ExactLocation,
}

impl Criterion {
    pub fn parse(name: &str, d: f64) -> Result<Self> {
        match name {
            "exactLocation" => Ok(Criterion::ExactLocation),
            "distanceThreshold" if d >= 0.0 && d.is_finite() => Ok(Criterion::DistanceThreshold(d)),
            "distanceThreshold" => Err(Error::Config(format!("bad distance threshold {d}"))),
            other => Err(Error::Config(format!("unknown criterion `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::DistanceThreshold(_) => "distanceThreshold",
            Criterion::ExactLocation => "exactLocation",
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match *self {
            Criterion::DistanceThreshold(d) => Some(d),
            Criterion::ExactLocation => None,
        }
    }

    fn accepts(&self, q_id: u64, q_loc: [f64; 2], id: u64, loc: [f64; 2]) -> bool {
        match *self {
            Criterion::ExactLocation => q_id == id,
            Criterion::DistanceThreshold(d) => {
                let (dx, dy) = (q_loc[0] - loc[0], q_loc[1] - loc[1]);
                (dx * dx + dy * dy).sqrt() <= d
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecallReport {
    pub task: String,
    pub criterion: String,
    pub d: Option<f64>,
    pub recalls: BTreeMap<usize, f64>,
    pub num_queries: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<u64>,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recalls.get(&k).copied()
    }
}

pub fn task_name(query: Modality, db: Modality) -> String {
    format!("{}2{}", query.letter(), db.letter())
}

/// Fraction of queries with a correct entry among their top k, for each
/// `k` in `ks`. With `exclude_self` the database entry carrying the query's
/// scene id is removed before ranking.
pub fn recall_at_k(
    queries: &DescriptorDB,
    db: &DescriptorDB,
    ks: &[usize],
    criterion: Criterion,
    exclude_self: bool,
    par: Parallelism,
) -> Result<RecallReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("ks must be non-empty and positive".into()));
    }
    if let Criterion::DistanceThreshold(d) = criterion {
        if !(d >= 0.0) || !d.is_finite() {
            return Err(Error::Config(format!("bad distance threshold {d}")));
        }
    }
    if db.is_empty() {
        return Err(Error::Data("empty database".into()));
    }
    if queries.dim() != db.dim() {
        return Err(Error::Dimension("query and database widths differ".into()));
    }
    let kmax = *ks.iter().max().unwrap();
    let idx: Vec<usize> = (0..queries.len()).collect();
    // Rank (1-based) of the first correct entry per query, if within kmax.
    let first_hit = map_ordered(par, &idx, |_, &qi| {
        let q = queries.vectors.row(qi);
        let scores: Vec<f64> = (0..db.len()).map(|j| dot(db.vectors.row(j), q)).collect();
        let own = if exclude_self {
            db.ids.iter().position(|&id| id == queries.ids[qi])
        } else {
            None
        };
        ranked(&scores, &db.ids, own)
            .into_iter()
            .take(kmax)
            .position(|j| criterion.accepts(queries.ids[qi], queries.locations[qi], db.ids[j], db.locations[j]))
            .map(|p| p + 1)
    });
    let n = queries.len();
    let recalls = ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| matches!(h, Some(r) if *r <= k)).count();
            (k, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect();
    let mut skipped = queries.skipped.clone();
    skipped.extend(&db.skipped);
    Ok(RecallReport {
        task: task_name(queries.modality, db.modality),
        criterion: criterion.name().to_string(),
        d: criterion.threshold(),
        recalls,
        num_queries: n,
        m: db.len(),
        skipped,
    })
}

/// The default evaluation tasks: `(query, database, exclude_self)`.
pub const TASKS: [(Modality, Modality); 8] = [
    (Modality::Text, Modality::Image),
    (Modality::Image, Modality::Text),
    (Modality::Text, Modality::Point),
    (Modality::Point, Modality::Text),
    (Modality::Image, Modality::Point),
    (Modality::Point, Modality::Image),
    (Modality::Image, Modality::Image),
    (Modality::Point, Modality::Point),
];

/// Text tasks are scored by exact location, the rest by distance `d`;
/// same-modality tasks drop the query's own entry.
pub fn task_protocol(query: Modality, db: Modality, d: f64) -> (Criterion, bool) {
    let criterion = if query == Modality::Text || db == Modality::Text {
        Criterion::ExactLocation
    } else {
        Criterion::DistanceThreshold(d)
    };
    (criterion, query == db)
}

pub fn is_cross_modal(task: &str) -> bool {
    let b = task.as_bytes();
    b.len() == 3 && b[0] != b[2]
}

/// Evaluation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct EvalSettings {
    pub d: f64,
    pub ks: Vec<usize>,
    pub hints: usize,
    pub hint_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            d: 20.0,
            ks: vec![1, 3, 5],
            hints: 6,
            hint_seed: 0,
        }
    }
}

/// Databases of all three modalities for one split.
#[derive(Debug, Clone)]
pub struct EmbeddedSplit {
    pub text: DescriptorDB,
    pub image: DescriptorDB,
    pub point: DescriptorDB,
}

impl EmbeddedSplit {
    pub fn get(&self, m: Modality) -> &DescriptorDB {
        match m {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
            Modality::Point => &self.point,
        }
    }
}

pub fn embed_split(
    scenes: &[SceneTriplet],
    store: &ParamStore,
    cfg: &ModelConfig,
    hints: usize,
    hint_seed: u64,
    par: Parallelism,
) -> Result<EmbeddedSplit> {
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to embed".into()));
    }
    let sel = hint_selection(scenes, hints, hint_seed);
    Ok(EmbeddedSplit {
        text: build_db(scenes, Modality::Text, store, cfg, Some(&sel), par)?,
        image: build_db(scenes, Modality::Image, store, cfg, None, par)?,
        point: build_db(scenes, Modality::Point, store, cfg, None, par)?,
    })
}

/// Reports for the eight default tasks.
pub fn task_matrix(emb: &EmbeddedSplit, d: f64, ks: &[usize], par: Parallelism) -> Result<Vec<RecallReport>> {
    TASKS
        .iter()
        .map(|&(q, db)| {
            let (criterion, exclude_self) = task_protocol(q, db, d);
            recall_at_k(emb.get(q), emb.get(db), ks, criterion, exclude_self, par)
        })
        .collect()
}

/// Embeds a split and evaluates every default task.
pub fn run_task_matrix(
    scenes: &[SceneTriplet],
    store: &ParamStore,
    cfg: &ModelConfig,
    eval: &EvalSettings,
    par: Parallelism,
) -> Result<Vec<RecallReport>> {
    let emb = embed_split(scenes, store, cfg, eval.hints, eval.hint_seed, par)?;
    task_matrix(&emb, eval.d, &eval.ks, par)
}

/// Image / point tasks re-scored at each distance threshold.
pub fn threshold_sweep(emb: &EmbeddedSplit, ds: &[f64], ks: &[usize], par: Parallelism) -> Result<Vec<RecallReport>> {
    let mut out = Vec::new();
    for &d in ds {
        for &(q, db) in TASKS
            .iter()
            .filter(|(q, db)| *q != Modality::Text && *db != Modality::Text)
        {
            let (criterion, exclude_self) = task_protocol(q, db, d);
            out.push(recall_at_k(emb.get(q), emb.get(db), ks, criterion, exclude_self, par)?);
        }
    }
    Ok(out)
}

/// Mean R@1 over the six cross-modal tasks of a report set.
pub fn mean_cross_modal_r1(reports: &[RecallReport]) -> f64 {
    let r1: Vec<f64> = reports
        .iter()
        .filter(|r| is_cross_modal(&r.task))
        .filter_map(|r| r.at(1))
        .collect();
    if r1.is_empty() {
        0.0
    } else {
        r1.iter().sum::<f64>() / r1.len() as f64
    }
}

/// CSV rows `sceneId,modality,x,y,v_0..v_{D-1}` for every database.
pub fn write_embedding_csv<W: Write>(mut w: W, dbs: &[&DescriptorDB]) -> std::io::Result<()> {
    let dim = dbs.first().map_or(0, |db| db.dim());
    write!(w, "sceneId,modality,x,y")?;
    for i in 0..dim {
        write!(w, ",v_{i}")?;
    }
    writeln!(w)?;
    for db in dbs {
        for r in 0..db.len() {
            let [x, y] = db.locations[r];
            write!(w, "{},{},{x},{y}", db.ids[r], db.modality.name())?;
            for v in db.vectors.row(r) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db(rows: &[[f64; 2]], locs: &[[f64; 2]]) -> DescriptorDB {
        DescriptorDB::new(
            Modality::Image,
            (0..rows.len() as u64).collect(),
            locs.to_vec(),
            Matrix::from_rows(rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn topk_basics() {
        let d = db(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], &[[0.0, 0.0]; 3]);
        let top = query_topk(&d, &[0.0, 1.0], 5).unwrap();
        assert_eq!(top.len(), 3);
        assert_eq!((top[0].0, top[1].0, top[2].0), (1, 2, 0));
        assert_eq!(top[0].1, 1.0);
        let top = query_topk(&d, &[1.0, 0.0], 1).unwrap();
        assert_eq!(top, vec![(0, 1.0)]);
    }

    #[test]
    fn topk_errors() {
        let empty = DescriptorDB::new(Modality::Text, vec![], vec![], Matrix::zeros(0, 2)).unwrap();
        assert!(matches!(query_topk(&empty, &[1.0, 0.0], 1), Err(Error::Data(_))));
        let dup = DescriptorDB::new(Modality::Text, vec![1, 1], vec![[0.0; 2]; 2], Matrix::zeros(2, 2));
        assert!(matches!(dup, Err(Error::Data(_))));
    }

    #[test]
    fn three_scene_table() {
        // Locations (0,0), (5,0), (30,0); the query sits at scene 0.
        let locs = [[0.0, 0.0], [5.0, 0.0], [30.0, 0.0]];
        let q = DescriptorDB::new(
            Modality::Point,
            vec![0],
            vec![[0.0, 0.0]],
            Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // Which scene sits closest to the query decides the answer.
        for (top, want) in [(0, 1.0), (1, 1.0), (2, 0.0)] {
            let rows: Vec<[f64; 2]> = (0..3).map(|j| if j == top { [1.0, 0.0] } else { [s, -s] }).collect();
            let d = db(&rows, &locs);
            let r = recall_at_k(
                &q,
                &d,
                &[1],
                Criterion::DistanceThreshold(20.0),
                false,
                Parallelism::Sequential,
            )
            .unwrap();
            assert_eq!(r.at(1), Some(want), "top {top}");
            let r = recall_at_k(
                &q,
                &d,
                &[3],
                Criterion::DistanceThreshold(20.0),
                false,
                Parallelism::Sequential,
            )
            .unwrap();
            assert_eq!(r.at(3), Some(1.0));
        }
    }

    #[test]
    fn exclude_self_and_self_retrieval() {
        let locs = [[0.0, 0.0], [100.0, 0.0], [200.0, 0.0]];
        let d = db(&[[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]], &locs);
        let with = recall_at_k(
            &d,
            &d,
            &[1],
            Criterion::DistanceThreshold(20.0),
            false,
            Parallelism::Sequential,
        )
        .unwrap();
        assert_eq!(with.at(1), Some(1.0));
        let without = recall_at_k(
            &d,
            &d,
            &[1, 2],
            Criterion::DistanceThreshold(20.0),
            true,
            Parallelism::Sequential,
        )
        .unwrap();
        assert_eq!(without.at(1), Some(0.0));
        assert_eq!(without.m, 3);
    }

    #[test]
    fn criterion_parsing() {
        assert_eq!(
            Criterion::parse("exactLocation", 0.0).unwrap(),
            Criterion::ExactLocation
        );
        assert_eq!(
            Criterion::parse("distanceThreshold", 20.0).unwrap(),
            Criterion::DistanceThreshold(20.0)
        );
        assert!(matches!(Criterion::parse("nearby", 20.0), Err(Error::Config(_))));
        assert!(matches!(
            Criterion::parse("distanceThreshold", -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn protocol_assignment() {
        let crit: Vec<_> = TASKS
            .iter()
            .map(|&(q, d)| (task_name(q, d), task_protocol(q, d, 20.0)))
            .collect();
        for (name, (c, ex)) in &crit {
            let text = name.contains('T');
            assert_eq!(*c == Criterion::ExactLocation, text, "{name}");
            assert_eq!(*ex, name == "I2I" || name == "P2P", "{name}");
        }
        assert!(is_cross_modal("I2P") && !is_cross_modal("P2P"));
    }

    #[test]
    fn report_json_shape() {
        let d = db(&[[1.0, 0.0], [0.0, 1.0]], &[[0.0, 0.0], [50.0, 0.0]]);
        let r = recall_at_k(
            &d,
            &d,
            &[1, 3, 5],
            Criterion::ExactLocation,
            false,
            Parallelism::Sequential,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["task"], "I2I");
        assert_eq!(v["criterion"], "exactLocation");
        assert!(v["d"].is_null());
        assert_eq!(v["recalls"]["1"], 1.0);
        assert_eq!(v["numQueries"], 2);
        assert_eq!(v["M"], 2);
        let back: RecallReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_dump() {
        let d = db(&[[1.0, 0.0]], &[[3.5, -2.0]]);
        let mut out = Vec::new();
        write_embedding_csv(&mut out, &[&d]).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "sceneId,modality,x,y,v_0,v_1\n0,image,3.5,-2,1,0\n");
    }
}
