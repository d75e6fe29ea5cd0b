//! Stage runner.
//!
//! Every stage reads its inputs from the output tree, writes into its own
//! subdirectory and is recorded in `run_summary.json` with its duration and
//! the SHA-256 of every file it read and wrote. A failed stage leaves an
//! `INCOMPLETE` marker in its directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CohortKind, ConfigError, GroupScores, PlaneSelection, RunConfig};
use crate::encoder::{check_external, encode_bag, Encoder, EncoderError, EncoderSpec};
use crate::eval::{
    cross_validate, partial_volume_experiment, pearson, per_plane_predictions, plane_variability, spearman,
    stratified_splits, survival_analysis, EvalError,
};
use crate::experiment::{choose_plane, view_grid};
use crate::interpret::{build_heatmap, ig_group_assignment, integrated_gradients, InterpretError};
use crate::mil::{config_hash, from_checkpoint, predict, to_checkpoint, train, MilError, MilModel, TrainConfig};
use crate::phantom::{generate_classification_cohort, generate_survival_cohort, write_cohort, PhantomError};
use crate::preprocess::{build_patch_grid, segment_volume, MaskStack, PatchGrid, PatchMode, PreprocessError};
use crate::rng::derive_seed;
use crate::store::{
    decode_checkpoint, decode_feature_bag, decode_volume, encode_checkpoint, encode_feature_bag, encode_volume,
    CohortManifest, DType, FeatureBag, ManifestRecord, StoreError, Volume, VoxelData,
};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("stage {stage} needs {path}; run {needs} first")]
    MissingPrerequisite { stage: Stage, needs: Stage, path: PathBuf },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Mil(#[from] MilError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    fn is_numeric(&self) -> bool {
        match self {
            Error::Mil(MilError::NonFinite(_)) | Error::Encoder(EncoderError::NonFinite(_)) => true,
            Error::Interpret(InterpretError::NonFinite(_)) | Error::Eval(EvalError::NonFinite) => true,
            Error::Interpret(InterpretError::Model(MilError::NonFinite(_))) => true,
            Error::Eval(EvalError::Model(MilError::NonFinite(_))) => true,
            Error::Eval(EvalError::Interpret(InterpretError::NonFinite(_))) => true,
            _ => false,
        }
    }

    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            e if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    Segment,
    Patch,
    Encode,
    Train,
    Predict,
    Heatmap,
    IgGroups,
    Evaluate,
    PartialVolume,
    PlaneVariability,
    Bench,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Simulate,
        Stage::Segment,
        Stage::Patch,
        Stage::Encode,
        Stage::Train,
        Stage::Predict,
        Stage::Heatmap,
        Stage::IgGroups,
        Stage::Evaluate,
        Stage::PartialVolume,
        Stage::PlaneVariability,
        Stage::Bench,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Segment => "segment",
            Stage::Patch => "patch",
            Stage::Encode => "encode",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Heatmap => "heatmap",
            Stage::IgGroups => "ig-groups",
            Stage::Evaluate => "evaluate",
            Stage::PartialVolume => "partial-volume",
            Stage::PlaneVariability => "plane-variability",
            Stage::Bench => "bench",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL.iter().copied().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Parse a comma-separated stage list; `all` expands to the default chain.
pub fn parse_stages(list: &str) -> std::result::Result<Vec<Stage>, String> {
    const ALL: [Stage; 7] =
        [Stage::Simulate, Stage::Segment, Stage::Patch, Stage::Encode, Stage::Train, Stage::Predict, Stage::Evaluate];
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim) {
        if item == "all" {
            out.extend(ALL);
        } else {
            out.push(item.parse()?);
        }
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: String,
    pub seconds: f64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Default for Stage {
    fn default() -> Self {
        Stage::Simulate
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// SHA-256 of the resolved config, ignoring output root and workers.
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

/// Hash of the resolved config with machine-local fields blanked.
pub fn config_fingerprint(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.output = PathBuf::new();
    c.workers = 0;
    sha256_hex(c.to_toml().as_bytes())
}

/// Records every file a stage reads or writes.
struct Io<'a> {
    root: &'a Path,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Io<'a> {
    fn new(root: &'a Path) -> Self {
        Self { root, inputs: BTreeMap::new(), outputs: BTreeMap::new() }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        self.inputs.insert(self.key(path), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn read_text(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?).map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| Error::Io { path: parent.to_path_buf(), source })?;
        }
        std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        self.outputs.insert(self.key(path), sha256_hex(bytes));
        Ok(())
    }

    fn read_volume(&mut self, path: &Path) -> Result<Volume> {
        Ok(decode_volume(&self.read(path)?)?)
    }

    fn read_bag(&mut self, path: &Path) -> Result<FeatureBag> {
        Ok(decode_feature_bag(&self.read(path)?)?)
    }

    fn read_model(&mut self, path: &Path) -> Result<MilModel> {
        Ok(from_checkpoint(&decode_checkpoint(&self.read(path)?)?)?.0)
    }
}

/// Cohort rows with their volume paths resolved.
struct Cohort {
    manifest: CohortManifest,
    dir: PathBuf,
}

impl Cohort {
    fn records(&self) -> &[ManifestRecord] {
        self.manifest.records()
    }

    fn volume(&self, r: &ManifestRecord) -> PathBuf {
        self.dir.join(&r.volume_path)
    }

    fn label_volume(&self, r: &ManifestRecord) -> PathBuf {
        self.dir.join("labels").join(format!("{}.vmil", r.sample_id))
    }

    fn labels(&self) -> Result<Vec<u8>> {
        self.manifest.labels().map_err(|e| Error::Data(format!("cohort labels: {e}")))
    }
}

fn mask_to_volume(mask: &MaskStack, voxel_size: [f32; 3]) -> Volume {
    let data = mask.as_slice().iter().map(|&m| m as u8).collect();
    Volume::new(1, mask.dims(), voxel_size, VoxelData::U8(data)).expect("mask dims are consistent")
}

fn volume_to_mask(v: &Volume) -> Result<MaskStack> {
    if v.channels != 1 || v.dtype() != DType::U8 {
        return Err(Error::Data("mask volumes must be single-channel u8".into()));
    }
    Ok(MaskStack::from_mask(v.dims(), (0..v.data.len()).map(|i| v.data.get(i) != 0.0).collect()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// One configured run rooted at `cfg.output`.
pub struct Pipeline {
    cfg: RunConfig,
    root: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let root = cfg.output.clone();
        Self { cfg, root }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    fn manifest_path(&self) -> PathBuf {
        self.cfg.manifest.clone().unwrap_or_else(|| self.stage_dir(Stage::Simulate).join("manifest.tsv"))
    }

    /// File whose presence marks a finished stage.
    fn marker(&self, stage: Stage) -> PathBuf {
        let d = self.stage_dir(stage);
        match stage {
            Stage::Simulate => self.manifest_path(),
            Stage::Train => d.join("model.ckpt"),
            Stage::Predict => d.join("predictions.tsv"),
            Stage::Evaluate => d.join("metrics.tsv"),
            _ => d.join("index.tsv"),
        }
    }

    fn prerequisites(&self, stage: Stage) -> Vec<Stage> {
        let external = matches!(self.cfg.encoder, EncoderSpec::External { .. });
        match stage {
            Stage::Simulate => vec![],
            Stage::Segment | Stage::Bench => vec![Stage::Simulate],
            Stage::Patch => vec![Stage::Segment],
            Stage::Encode if external => vec![Stage::Simulate],
            Stage::Encode => vec![Stage::Patch],
            Stage::Train | Stage::Evaluate => vec![Stage::Encode],
            Stage::Predict => vec![Stage::Train, Stage::Encode],
            Stage::Heatmap => vec![Stage::Train, Stage::Encode],
            Stage::IgGroups => vec![Stage::Predict, Stage::Heatmap],
            Stage::PartialVolume | Stage::PlaneVariability => vec![Stage::Evaluate, Stage::Encode],
        }
    }

    fn check_prerequisites(&self, stage: Stage, done: &[Stage]) -> Result<()> {
        for need in self.prerequisites(stage) {
            if done.contains(&need) {
                continue;
            }
            let marker = self.marker(need);
            let incomplete = self.stage_dir(need).join("INCOMPLETE").exists();
            if !marker.exists() || (incomplete && !(need == Stage::Simulate && self.cfg.manifest.is_some())) {
                return Err(Error::MissingPrerequisite { stage, needs: need, path: marker });
            }
        }
        Ok(())
    }

    fn cohort(&self, io: &mut Io) -> Result<Cohort> {
        let path = self.manifest_path();
        let manifest = CohortManifest::from_tsv(&io.read_text(&path)?)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Cohort { manifest, dir })
    }

    fn n_cell_types(&self) -> usize {
        self.cfg.phantom.spec().cell_types.len()
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.cfg.train.clone() }
    }

    fn load_bags(&self, io: &mut Io, cohort: &Cohort) -> Result<Vec<FeatureBag>> {
        let dir = self.stage_dir(Stage::Encode);
        cohort.records().iter().map(|r| io.read_bag(&dir.join(format!("{}.fbag", r.sample_id)))).collect()
    }

    /// Run `stages` in order, with the configured worker count.
    pub fn run(&self, stages: &[Stage]) -> Result<RunSummary> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if self.cfg.workers > 0 {
            builder = builder.num_threads(self.cfg.workers);
        }
        let pool = builder.build().map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
        pool.install(|| self.run_inner(stages))
    }

    fn run_inner(&self, stages: &[Stage]) -> Result<RunSummary> {
        std::fs::create_dir_all(&self.root).map_err(|source| Error::Io { path: self.root.clone(), source })?;
        let resolved = self.root.join("resolved_config.toml");
        std::fs::write(&resolved, self.cfg.to_toml()).map_err(|source| Error::Io { path: resolved, source })?;
        let fingerprint = config_fingerprint(&self.cfg);
        let summary_path = self.root.join("run_summary.json");
        let mut summary = std::fs::read(&summary_path)
            .ok()
            .and_then(|b| serde_json::from_slice::<RunSummary>(&b).ok())
            .filter(|s| s.config_hash == fingerprint)
            .unwrap_or(RunSummary { config_hash: fingerprint, stages: Vec::new() });
        let mut done = Vec::new();
        let mut outcome = Ok(());
        for &stage in stages {
            log::info!("stage {stage}");
            let start = Instant::now();
            let mut io = Io::new(&self.root);
            let result = self.check_prerequisites(stage, &done).and_then(|_| self.run_stage(stage, &mut io));
            let status = match &result {
                Ok(()) => "ok".to_string(),
                Err(e) => format!("failed: {e}"),
            };
            summary.stages.retain(|r| r.stage != stage);
            summary.stages.push(StageRecord {
                stage,
                status,
                seconds: start.elapsed().as_secs_f64(),
                inputs: io.inputs,
                outputs: io.outputs,
            });
            if let Err(e) = result {
                let dir = self.stage_dir(stage);
                if dir.exists() {
                    let _ = std::fs::write(dir.join("INCOMPLETE"), format!("{e}\n"));
                }
                outcome = Err(e);
                break;
            }
            done.push(stage);
        }
        summary.stages.sort_by_key(|r| r.stage);
        let json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
        std::fs::write(&summary_path, json).map_err(|source| Error::Io { path: summary_path, source })?;
        outcome.map(|_| summary)
    }

    fn fresh_dir(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
        }
        std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
        Ok(dir)
    }

    fn run_stage(&self, stage: Stage, io: &mut Io) -> Result<()> {
        let dir = self.fresh_dir(stage)?;
        match stage {
            Stage::Simulate => self.simulate(io, &dir),
            Stage::Segment => self.segment(io, &dir),
            Stage::Patch => self.patch(io, &dir),
            Stage::Encode => self.encode(io, &dir),
            Stage::Train => self.train(io, &dir),
            Stage::Predict => self.predict(io, &dir),
            Stage::Heatmap => self.heatmap(io, &dir),
            Stage::IgGroups => self.ig_groups(io, &dir),
            Stage::Evaluate => self.evaluate(io, &dir),
            Stage::PartialVolume => self.partial_volume(io, &dir),
            Stage::PlaneVariability => self.plane_variability(io, &dir),
            Stage::Bench => self.bench(io, &dir),
        }
    }

    fn simulate(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let p = &self.cfg.phantom;
        let spec = p.spec();
        let samples = match p.cohort {
            CohortKind::Classification => generate_classification_cohort(&spec, p.n_per_class, self.cfg.seed)?,
            CohortKind::Survival => generate_survival_cohort(&spec, &p.survival, p.n_per_class, self.cfg.seed)?,
        };
        write_cohort(&samples, dir)?;
        for s in &samples {
            for sub in ["volumes", "labels"] {
                let path = dir.join(sub).join(format!("{}.vmil", s.sample_id));
                let bytes = std::fs::read(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
                io.outputs.insert(io.key(&path), sha256_hex(&bytes));
            }
        }
        let manifest = dir.join("manifest.tsv");
        let bytes = std::fs::read(&manifest).map_err(|source| Error::Io { path: manifest.clone(), source })?;
        io.outputs.insert(io.key(&manifest), sha256_hex(&bytes));
        Ok(())
    }

    fn segment(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let cohort = self.cohort(io)?;
        let mut index = String::from("sample_id\tkept_planes\treference_plane\ttissue_voxels\n");
        for r in cohort.records() {
            let v = io.read_volume(&cohort.volume(r))?;
            let mask = segment_volume(&v, &self.cfg.seg)?;
            if mask.is_empty() {
                log::warn!("sample {} has no tissue", r.sample_id);
            }
            io.write(&dir.join(format!("{}.mask.vmil", r.sample_id)), &encode_volume(&mask_to_volume(&mask, v.voxel_size))?)?;
            let reference = mask.reference_plane().map_or_else(|| "NA".to_string(), |z| z.to_string());
            let tissue: usize = mask.areas().iter().sum();
            writeln!(index, "{}\t{}\t{reference}\t{tissue}", r.sample_id, mask.kept_planes().len()).unwrap();
        }
        io.write(&dir.join("index.tsv"), index.as_bytes())
    }

    fn selected_mask(&self, io: &mut Io, cohort: &Cohort, i: usize, mask: MaskStack) -> Result<MaskStack> {
        let patch = &self.cfg.patch;
        if patch.mode != PatchMode::Planes2d || patch.planes == PlaneSelection::All {
            return Ok(mask);
        }
        let r = &cohort.records()[i];
        let labels =
            if patch.planes == PlaneSelection::Targeted { Some(io.read_volume(&cohort.label_volume(r))?) } else { None };
        let z = choose_plane(patch.planes, mask.kept_planes(), labels.as_ref(), self.n_cell_types(), self.cfg.seed, i)?;
        Ok(match z {
            Some(z) => mask.retain_planes(&[z]),
            None => mask,
        })
    }

    fn patch(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let cohort = self.cohort(io)?;
        let seg = self.stage_dir(Stage::Segment);
        let mut index = String::from("sample_id\tmode\tentries\n");
        for (i, r) in cohort.records().iter().enumerate() {
            let mask = volume_to_mask(&io.read_volume(&seg.join(format!("{}.mask.vmil", r.sample_id)))?)?;
            if mask.is_empty() {
                return Err(Error::Data(format!("sample {} has no tissue to patch", r.sample_id)));
            }
            let mask = self.selected_mask(io, &cohort, i, mask)?;
            let grid = view_grid(&mask, self.cfg.patch.mode, &self.cfg.patch)?;
            if grid.is_empty() {
                return Err(Error::Data(format!("no patches survive for sample {}", r.sample_id)));
            }
            io.write(&dir.join(format!("{}.grid.tsv", r.sample_id)), grid.to_tsv().as_bytes())?;
            writeln!(index, "{}\t{}\t{}", r.sample_id, grid.mode.as_str(), grid.len()).unwrap();
        }
        io.write(&dir.join("index.tsv"), index.as_bytes())
    }

    fn encode(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let cohort = self.cohort(io)?;
        let mut index = String::from("sample_id\tinstances\tdim\n");
        let external = match &self.cfg.encoder {
            EncoderSpec::External { path, .. } => Some(path.clone()),
            _ => None,
        };
        let encoder = if external.is_none() { Some(Encoder::new(self.cfg.encoder.clone())?) } else { None };
        let grids = self.stage_dir(Stage::Patch);
        for r in cohort.records() {
            let bag = match (&external, &encoder) {
                (Some(src), _) => {
                    let bag = io.read_bag(&src.join(format!("{}.fbag", r.sample_id)))?;
                    check_external(&bag, &self.cfg.encoder)?;
                    if bag.sample_id() != r.sample_id {
                        return Err(Error::Data(format!(
                            "imported bag for {} is labelled {}",
                            r.sample_id,
                            bag.sample_id()
                        )));
                    }
                    bag
                }
                (None, Some(enc)) => {
                    let v = io.read_volume(&cohort.volume(r))?;
                    let grid = PatchGrid::from_tsv(&io.read_text(&grids.join(format!("{}.grid.tsv", r.sample_id)))?)?;
                    let window = self.cfg.patch.norm.resolve(&v)?;
                    encode_bag(&r.sample_id, &v, &grid, enc, &window)?
                }
                (None, None) => unreachable!("encoder built when not importing"),
            };
            io.write(&dir.join(format!("{}.fbag", r.sample_id)), &encode_feature_bag(&bag)?)?;
            writeln!(index, "{}\t{}\t{}", r.sample_id, bag.len(), bag.dim()).unwrap();
        }
        io.write(&dir.join("index.tsv"), index.as_bytes())
    }

    fn train(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let cohort = self.cohort(io)?;
        let labels = cohort.labels()?;
        let bags = self.load_bags(io, &cohort)?;
        let tc = self.train_config(self.cfg.seed);
        let (model, opt, log) = train(&bags, &labels, &tc)?;
        let ckpt = to_checkpoint(&model, Some(&opt), config_hash(&(&tc, &self.cfg.encoder)), tc.seed)?;
        io.write(&dir.join("model.ckpt"), &encode_checkpoint(&ckpt)?)?;
        let mut text = String::from("epoch\tlr\tmean_loss\n");
        for e in &log.epochs {
            writeln!(text, "{}\t{}\t{}", e.epoch, e.lr, e.mean_loss).unwrap();
        }
        io.write(&dir.join("log.tsv"), text.as_bytes())
    }

    fn predict(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let cohort = self.cohort(io)?;
        let model = io.read_model(&self.stage_dir(Stage::Train).join("model.ckpt"))?;
        let bags = self.load_bags(io, &cohort)?;
        let mut text = String::from("sample_id\tp\tlogit\n");
        for bag in &bags {
            let p = predict(&model, bag)?;
            writeln!(text, "{}\t{}\t{}", p.sample_id, p.p, p.logit).unwrap();
        }
        io.write(&dir.join("predictions.tsv"), text.as_bytes())
    }

    fn heatmap(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let cohort = self.cohort(io)?;
        let model = io.read_model(&self.stage_dir(Stage::Train).join("model.ckpt"))?;
        let ig = &self.cfg.ig;
        let encoder = match &self.cfg.encoder {
            EncoderSpec::External { .. } => None,
            spec => Some(Encoder::new(spec.clone())?),
        };
        let mut index = String::from("sample_id\tinstances\tcompleteness_gap\theatmap_patches\n");
        for r in cohort.records() {
            let bag = io.read_bag(&self.stage_dir(Stage::Encode).join(format!("{}.fbag", r.sample_id)))?;
            let res = integrated_gradients(&model, bag.to_matrix().view(), ig.steps, ig.target)?;
            let mut table = String::from("origin_d\torigin_h\torigin_w\traw\tnormalized\n");
            for ((c, raw), norm) in bag.coords().iter().zip(&res.raw).zip(&res.normalized) {
                writeln!(table, "{}\t{}\t{}\t{raw}\t{norm}", c.origin[0], c.origin[1], c.origin[2]).unwrap();
            }
            io.write(&dir.join(format!("{}.ig.tsv", r.sample_id)), table.as_bytes())?;
            let wanted = ig.heatmap_samples.is_empty() || ig.heatmap_samples.contains(&r.sample_id);
            let mut heat_patches = "NA".to_string();
            if let (true, Some(enc)) = (wanted, &encoder) {
                let n = self.volume_heatmap(io, dir, &cohort, r, &model, enc)?;
                heat_patches = n.to_string();
            }
            writeln!(index, "{}\t{}\t{}\t{heat_patches}", r.sample_id, bag.len(), res.completeness_gap).unwrap();
        }
        io.write(&dir.join("index.tsv"), index.as_bytes())
    }

    /// Overlapping grid, per-patch IG and the voxel heatmap for one sample.
    fn volume_heatmap(
        &self,
        io: &mut Io,
        dir: &Path,
        cohort: &Cohort,
        r: &ManifestRecord,
        model: &MilModel,
        encoder: &Encoder,
    ) -> Result<usize> {
        let v = io.read_volume(&cohort.volume(r))?;
        let mask_path = self.stage_dir(Stage::Segment).join(format!("{}.mask.vmil", r.sample_id));
        let mask = volume_to_mask(&io.read_volume(&mask_path)?)?;
        let mode = self.cfg.patch.mode;
        let (shape, _) = self.cfg.patch.geometry(mode);
        let mut overlaps = self.cfg.ig.heatmap_overlaps(shape);
        if mode == PatchMode::Planes2d {
            overlaps[0] = 0;
        }
        let grid = build_patch_grid(&mask, mode, shape, overlaps)?;
        if grid.is_empty() {
            return Err(Error::Data(format!("no heatmap patches for sample {}", r.sample_id)));
        }
        let window = self.cfg.patch.norm.resolve(&v)?;
        let bag = encode_bag(&r.sample_id, &v, &grid, encoder, &window)?;
        let res = integrated_gradients(model, bag.to_matrix().view(), self.cfg.ig.steps, self.cfg.ig.target)?;
        let heat = build_heatmap(v.dims(), &grid, &res.raw)?;
        let (values, coverage) = heat.to_volumes(v.voxel_size);
        io.write(&dir.join(format!("{}.heatmap.vmil", r.sample_id)), &encode_volume(&values)?)?;
        io.write(&dir.join(format!("{}.coverage.vmil", r.sample_id)), &encode_volume(&coverage)?)?;
        let mut table = String::from("origin_d\torigin_h\torigin_w\traw\tnormalized\n");
        for ((e, raw), norm) in grid.entries.iter().zip(&res.raw).zip(&res.normalized) {
            writeln!(table, "{}\t{}\t{}\t{raw}\t{norm}", e[0], e[1], e[2]).unwrap();
        }
        io.write(&dir.join(format!("{}.heatmap_patches.tsv", r.sample_id)), table.as_bytes())?;
        Ok(grid.len())
    }

    fn ig_groups(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let cohort = self.cohort(io)?;
        let preds = read_predictions(&io.read_text(&self.stage_dir(Stage::Predict).join("predictions.tsv"))?)?;
        let column = match self.cfg.ig.group_scores {
            GroupScores::Raw => 3,
            GroupScores::Normalized => 4,
        };
        let mut scores = Vec::new();
        for r in cohort.records() {
            let text = io.read_text(&self.stage_dir(Stage::Heatmap).join(format!("{}.ig.tsv", r.sample_id)))?;
            scores.push((r.sample_id.clone(), read_column(&text, column)?));
        }
        let groups = ig_group_assignment(&scores)?;
        let mut text = String::from(
            "sample_id\trisk\tinstances\tmean_normalized_ig\thigh_fraction\tmiddle_fraction\tlow_fraction\thigh_low_ratio\n",
        );
        let (mut risks, mut means, mut highs) = (Vec::new(), Vec::new(), Vec::new());
        for st in &groups.stats {
            let risk = *preds
                .get(&st.sample_id)
                .ok_or_else(|| Error::Data(format!("no prediction for {}", st.sample_id)))?;
            let text_ig = io.read_text(&self.stage_dir(Stage::Heatmap).join(format!("{}.ig.tsv", st.sample_id)))?;
            let normalized = read_column(&text_ig, 4)?;
            let mean = normalized.iter().sum::<f64>() / normalized.len().max(1) as f64;
            writeln!(
                text,
                "{}\t{risk}\t{}\t{mean}\t{}\t{}\t{}\t{}",
                st.sample_id,
                st.instances,
                st.high_fraction,
                st.middle_fraction,
                st.low_fraction,
                fmt_opt(st.high_low_ratio)
            )
            .unwrap();
            risks.push(risk);
            means.push(mean);
            highs.push(st.high_fraction);
        }
        io.write(&dir.join("group_stats.tsv"), text.as_bytes())?;
        let corr = |x: &[f64]| match self.cfg.eval.correlation {
            crate::config::CorrelationKind::Pearson => pearson(x, &risks),
            crate::config::CorrelationKind::Spearman => spearman(x, &risks),
        };
        let mut assoc = String::from("quantity\tr\tp_value\tn\n");
        for (name, x) in [("mean_normalized_ig", &means), ("high_fraction", &highs)] {
            match corr(x) {
                Ok(c) => writeln!(assoc, "{name}\t{}\t{}\t{}", c.r, c.p_value, c.n).unwrap(),
                Err(e) => writeln!(assoc, "{name}\tNA\tNA\t{}\t# {e}", x.len()).unwrap(),
            }
        }
        io.write(&dir.join("association.tsv"), assoc.as_bytes())?;
        io.write(&dir.join("index.tsv"), format!("band\t{}\n", groups.band).as_bytes())
    }

    fn evaluate(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let cohort = self.cohort(io)?;
        let labels = cohort.labels()?;
        let bags = self.load_bags(io, &cohort)?;
        let ev = &self.cfg.eval;
        let survival: Option<(Vec<f64>, Vec<bool>)> = cohort
            .records()
            .iter()
            .map(|r| Some((r.time?, r.event?.is_observed())))
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().unzip());
        let mut metrics = String::from("repeat\tseed\tauc\tbalanced_accuracy\tf1\n");
        let mut logrank = String::from("repeat\tthreshold\tstatistic\tp_value\tdegenerate\n");
        let mut aucs = Vec::new();
        for rep in 0..ev.repeats {
            let seed = derive_seed(self.cfg.seed, rep as u64);
            let plan = stratified_splits(&labels, ev.folds, seed)?;
            let res = cross_validate(&bags, &labels, &self.train_config(seed), &plan)?;
            let probs = res.probabilities();
            let m = crate::eval::classification_metrics(&probs, &labels, ev.decision_threshold)?;
            aucs.push(m.auc);
            writeln!(metrics, "{rep}\t{seed}\t{}\t{}\t{}", m.auc, m.balanced_accuracy, m.f1).unwrap();
            let mut preds = String::from("sample_id\tlabel\tfold\tp\tlogit\n");
            for ((p, l), f) in res.predictions.iter().zip(&labels).zip(&res.fold_of) {
                writeln!(preds, "{}\t{l}\t{f}\t{}\t{}", p.sample_id, p.p, p.logit).unwrap();
            }
            io.write(&dir.join(format!("predictions_r{rep}.tsv")), preds.as_bytes())?;
            let hash = config_hash(&(&self.train_config(seed), &self.cfg.encoder));
            for (f, model) in res.models.iter().enumerate() {
                let ckpt = to_checkpoint(model, None, hash, derive_seed(seed, f as u64))?;
                io.write(&dir.join(format!("r{rep}_fold{f}.ckpt")), &encode_checkpoint(&ckpt)?)?;
            }
            if let Some((times, events)) = &survival {
                let s = survival_analysis(times, events, &probs)?;
                let lr = s.log_rank;
                writeln!(logrank, "{rep}\t{}\t{}\t{}\t{}", s.threshold, lr.statistic, lr.p_value, lr.degenerate).unwrap();
                let mut km = String::from("group\ttime\tsurvival\tat_risk\tevents\n");
                for (name, curve) in [("low", &s.low), ("high", &s.high)] {
                    writeln!(km, "{name}\t0\t1\tNA\t0").unwrap();
                    for i in 0..curve.times.len() {
                        writeln!(
                            km,
                            "{name}\t{}\t{}\t{}\t{}",
                            curve.times[i], curve.survival[i], curve.at_risk[i], curve.events[i]
                        )
                        .unwrap();
                    }
                }
                io.write(&dir.join(format!("km_r{rep}.tsv")), km.as_bytes())?;
            }
        }
        let (mean, sd) = crate::eval::mean_sd(&aucs);
        writeln!(metrics, "mean\tNA\t{mean}\tNA\tNA\nsd\tNA\t{sd}\tNA\tNA").unwrap();
        if survival.is_some() {
            io.write(&dir.join("logrank.tsv"), logrank.as_bytes())?;
        }
        io.write(&dir.join("metrics.tsv"), metrics.as_bytes())
    }

    /// Held-out model of every sample from the first evaluation repeat.
    fn held_out_models(&self, io: &mut Io, n: usize) -> Result<(Vec<MilModel>, Vec<usize>)> {
        let dir = self.stage_dir(Stage::Evaluate);
        let text = io.read_text(&dir.join("predictions_r0.tsv"))?;
        let folds: Vec<usize> = read_column(&text, 2)?.into_iter().map(|f| f as usize).collect();
        if folds.len() != n {
            return Err(Error::Data(format!("evaluation covers {} samples, cohort has {n}", folds.len())));
        }
        let k = folds.iter().max().map_or(0, |m| m + 1);
        let models = (0..k).map(|f| io.read_model(&dir.join(format!("r0_fold{f}.ckpt")))).collect::<Result<_>>()?;
        Ok((models, folds))
    }

    fn partial_volume(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let cohort = self.cohort(io)?;
        let labels = cohort.labels()?;
        let bags = self.load_bags(io, &cohort)?;
        let (models, folds) = self.held_out_models(io, bags.len())?;
        let per_sample: Vec<&MilModel> = folds.iter().map(|&f| &models[f]).collect();
        let ev = &self.cfg.eval;
        let res = partial_volume_experiment(
            &per_sample,
            &bags,
            &labels,
            ev.partial_fraction,
            ev.partial_iterations,
            self.cfg.seed,
            self.cfg.ig.steps,
            ev.rank_samples,
        )?;
        let mut aucs = String::from("iteration\tauc\n");
        for (i, a) in res.aucs.iter().enumerate() {
            writeln!(aucs, "{i}\t{a}").unwrap();
        }
        io.write(&dir.join("aucs.tsv"), aucs.as_bytes())?;
        let mut ranks = String::from("sample_id\tinstance\tfull_rank\tfull_size\tsub_rank\tsub_size\n");
        for r in &res.rank_table {
            writeln!(ranks, "{}\t{}\t{}\t{}\t{}\t{}", r.sample_id, r.instance, r.full_rank, r.full_size, r.sub_rank, r.sub_size)
                .unwrap();
        }
        io.write(&dir.join("rank_shift.tsv"), ranks.as_bytes())?;
        let summary = format!(
            "fraction\twhole_auc\tmin\tmedian\tmax\tfraction_below_whole\n{}\t{}\t{}\t{}\t{}\t{}\n",
            res.fraction, res.whole_auc, res.min, res.median, res.max, res.fraction_below_whole
        );
        io.write(&dir.join("index.tsv"), summary.as_bytes())
    }

    fn plane_variability(&self, io: &mut Io, dir: &Path) -> Result<()> {
        if self.cfg.patch.mode != PatchMode::Planes2d {
            return Err(Error::Usage("plane-variability needs patch.mode = \"planes2d\"".into()));
        }
        let cohort = self.cohort(io)?;
        let bags = self.load_bags(io, &cohort)?;
        let (models, folds) = self.held_out_models(io, bags.len())?;
        let mut traces = String::from("sample_id\tplane\trisk\n");
        let mut summary = String::from("sample_id\tplanes\tp5\tp95\tgap\tcrosses_threshold\tsingle_plane\n");
        for (bag, &f) in bags.iter().zip(&folds) {
            let trace = per_plane_predictions(&models[f], bag)?;
            for (z, r) in &trace {
                writeln!(traces, "{}\t{z}\t{r}", bag.sample_id()).unwrap();
            }
            let n = trace.len();
            let v = plane_variability(bag.sample_id(), trace, self.cfg.eval.plane_threshold)?;
            writeln!(
                summary,
                "{}\t{n}\t{}\t{}\t{}\t{}\t{}",
                v.sample_id, v.p5, v.p95, v.gap, v.crosses_threshold, v.single_plane
            )
            .unwrap();
        }
        io.write(&dir.join("traces.tsv"), traces.as_bytes())?;
        io.write(&dir.join("index.tsv"), summary.as_bytes())
    }

    /// Throughput of segmentation, patching, encoding and one training epoch.
    fn bench(&self, io: &mut Io, dir: &Path) -> Result<()> {
        let cohort = self.cohort(io)?;
        let encoder = match &self.cfg.encoder {
            EncoderSpec::External { .. } => return Err(Error::Usage("bench needs a built-in encoder".into())),
            spec => Encoder::new(spec.clone())?,
        };
        let (mut t_seg, mut t_grid, mut t_enc) = (0.0, 0.0, 0.0);
        let (mut patches, mut bags) = (0usize, Vec::new());
        for r in cohort.records() {
            let v = io.read_volume(&cohort.volume(r))?;
            let t = Instant::now();
            let mask = segment_volume(&v, &self.cfg.seg)?;
            t_seg += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let grid = view_grid(&mask, self.cfg.patch.mode, &self.cfg.patch)?;
            t_grid += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let window = self.cfg.patch.norm.resolve(&v)?;
            let bag = encode_bag(&r.sample_id, &v, &grid, &encoder, &window)?;
            t_enc += t.elapsed().as_secs_f64();
            patches += bag.len();
            bags.push(bag);
        }
        let n = bags.len();
        let mut text = String::from("step\titems\tunit\tseconds\titems_per_second\n");
        let mut row = |step: &str, items: usize, unit: &str, secs: f64| {
            writeln!(text, "{step}\t{items}\t{unit}\t{secs:.6}\t{:.3}", items as f64 / secs.max(1e-12)).unwrap();
        };
        row("segment", n, "samples", t_seg);
        row("patch", n, "samples", t_grid);
        row("encode", patches, "patches", t_enc);
        if let Ok(labels) = cohort.labels() {
            let tc = TrainConfig { epochs: 1, ..self.train_config(self.cfg.seed) };
            let t = Instant::now();
            train(&bags, &labels, &tc)?;
            row("train_epoch", n, "samples", t.elapsed().as_secs_f64());
        }
        io.write(&dir.join("index.tsv"), text.as_bytes())
    }
}

/// `sample_id -> p` from a predictions table.
fn read_predictions(text: &str) -> Result<BTreeMap<String, f64>> {
    let ids = text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split('\t').next().unwrap_or("").to_string());
    Ok(ids.zip(read_column(text, 1)?).collect())
}

/// Numeric column `col` of a headed TSV table.
fn read_column(text: &str, col: usize) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let field = l.split('\t').nth(col).ok_or_else(|| Error::Data(format!("line {}: missing column {col}", n + 1)))?;
            field.parse().map_err(|_| Error::Data(format!("line {}: bad number {field:?}", n + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!(parse_stages("train,bogus").is_err());
        assert_eq!(parse_stages("segment, patch").unwrap(), vec![Stage::Segment, Stage::Patch]);
    }

    #[test]
    fn exit_codes_classify_errors() {
        assert_eq!(Error::Usage("x".into()).exit_code(), 1);
        assert_eq!(Error::Data("x".into()).exit_code(), 2);
        assert_eq!(Error::Mil(MilError::NonFinite("logit")).exit_code(), 3);
        let missing = Error::MissingPrerequisite { stage: Stage::Predict, needs: Stage::Train, path: "x".into() };
        assert_eq!(missing.exit_code(), 2);
    }

    #[test]
    fn table_columns_parse() {
        let t = "a\tb\tc\nx\t1.5\t2\ny\t-3\t4\n";
        assert_eq!(read_column(t, 1).unwrap(), vec![1.5, -3.0]);
        assert!(read_column(t, 5).is_err());
        let p = read_predictions(t).unwrap();
        assert_eq!(p["y"], -3.0);
    }

    #[test]
    fn mask_volume_roundtrip() {
        let mut raw = vec![false; 2 * 3 * 4];
        raw[5] = true;
        raw[17] = true;
        let m = MaskStack::from_mask([2, 3, 4], raw);
        assert_eq!(volume_to_mask(&mask_to_volume(&m, [1.0; 3])).unwrap(), m);
    }
}
