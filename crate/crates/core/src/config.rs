//! Run configuration: one TOML document with a section per stage.
//!
//! Values resolve in three layers. A modality preset supplies defaults, the
//! config file overrides them, and command-line flags override both. Every
//! section rejects unknown keys.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderSpec;
use crate::interpret::{IgTarget, DEFAULT_STEPS};
use crate::mil::TrainConfig;
use crate::phantom::{PhantomSpec, SurvivalSpec, DESK_CELLS, DESK_DIMS, DESK_SCALE, DESK_THICKNESS};
use crate::preprocess::{NormParams, PatchMode, SegParams, UpperClip};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Otls,
    Microct,
    Phantom,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Otls => "otls",
            Preset::Microct => "microct",
            Preset::Phantom => "phantom",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "otls" => Ok(Preset::Otls),
            "microct" => Ok(Preset::Microct),
            "phantom" => Ok(Preset::Phantom),
            other => Err(format!("unknown preset {other:?} (expected otls, microct or phantom)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortKind {
    #[default]
    Classification,
    Survival,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub cohort: CohortKind,
    pub n_per_class: usize,
    pub dims: [usize; 3],
    pub cells_per_volume: usize,
    /// Multiplies the semi-major length distributions of both cell types.
    pub cell_scale: f64,
    pub shell_thickness: f64,
    pub survival: SurvivalSpec,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            cohort: CohortKind::Classification,
            n_per_class: 50,
            dims: DESK_DIMS,
            cells_per_volume: DESK_CELLS,
            cell_scale: DESK_SCALE,
            shell_thickness: DESK_THICKNESS,
            survival: SurvivalSpec::default(),
        }
    }
}

impl PhantomConfig {
    pub fn spec(&self) -> PhantomSpec {
        PhantomSpec::two_class(self.dims, self.cells_per_volume, self.cell_scale, self.shell_thickness)
    }
}

/// Which planes a 2D bag keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaneSelection {
    #[default]
    All,
    /// First kept plane.
    Top,
    /// Plane holding the most of every cell type; needs phantom labels.
    Targeted,
    Random,
}

impl FromStr for PlaneSelection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "top" => Ok(Self::Top),
            "targeted" => Ok(Self::Targeted),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown plane selection {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub mode: PatchMode,
    /// Cuboid shape `(d, h, w)`.
    pub shape: [usize; 3],
    pub overlaps: [usize; 3],
    /// Tile shape `(h, w)` in 2D mode; tiles never overlap.
    pub plane_shape: [usize; 2],
    pub planes: PlaneSelection,
    pub norm: NormParams,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            mode: PatchMode::Cuboids3d,
            shape: [64, 128, 128],
            overlaps: [32, 0, 0],
            plane_shape: [128, 128],
            planes: PlaneSelection::All,
            norm: NormParams { lower_clip: 100.0, upper_clip: UpperClip::TopPercent(1.0), invert: true },
        }
    }
}

impl PatchConfig {
    /// Patch shape and overlaps used for `mode`.
    pub fn geometry(&self, mode: PatchMode) -> ([usize; 3], [usize; 3]) {
        match mode {
            PatchMode::Cuboids3d => (self.shape, self.overlaps),
            PatchMode::Planes2d => ([1, self.plane_shape[0], self.plane_shape[1]], [0, 0, 0]),
        }
    }
}

/// Which IG scores feed the cohort high/middle/low grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupScores {
    #[default]
    Normalized,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IgConfig {
    pub steps: usize,
    pub target: IgTarget,
    pub group_scores: GroupScores,
    /// Heatmap patch overlap as a fraction of the patch shape per axis.
    pub heatmap_overlap: [f64; 3],
    /// Samples receiving a heatmap; empty means all.
    pub heatmap_samples: Vec<String>,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            target: IgTarget::Probability,
            group_scores: GroupScores::Normalized,
            heatmap_overlap: [0.5, 0.75, 0.75],
            heatmap_samples: Vec::new(),
        }
    }
}

impl IgConfig {
    /// Overlaps in voxels for a given patch shape.
    pub fn heatmap_overlaps(&self, shape: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for k in 0..3 {
            out[k] = ((self.heatmap_overlap[k] * shape[k] as f64).round() as usize).min(shape[k].saturating_sub(1));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    #[default]
    Pearson,
    Spearman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    /// Independent split seeds, derived from the run seed.
    pub repeats: usize,
    pub decision_threshold: f64,
    pub correlation: CorrelationKind,
    /// Pooled-variance t-test instead of Welch's.
    pub pooled_t: bool,
    pub partial_fraction: f64,
    pub partial_iterations: usize,
    /// Samples included in the IG rank-shift table.
    pub rank_samples: usize,
    pub plane_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            repeats: 1,
            decision_threshold: 0.5,
            correlation: CorrelationKind::Pearson,
            pooled_t: false,
            partial_fraction: 0.15,
            partial_iterations: 50,
            rank_samples: 5,
            plane_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output: PathBuf,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Existing cohort manifest. When unset the `simulate` stage provides one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub phantom: PhantomConfig,
    pub seg: SegParams,
    pub patch: PatchConfig,
    pub encoder: EncoderSpec,
    pub train: TrainConfig,
    pub ig: IgConfig,
    pub eval: EvalConfig,
}

pub const OUTPUT_ENV: &str = "VOLMIL_OUTPUT";

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Otls)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = RunConfig {
            preset,
            seed: 0,
            output: PathBuf::from("runs"),
            workers: 0,
            manifest: None,
            phantom: PhantomConfig::default(),
            seg: SegParams::default(),
            patch: PatchConfig::default(),
            encoder: EncoderSpec::default(),
            train: TrainConfig::default(),
            ig: IgConfig::default(),
            eval: EvalConfig::default(),
        };
        match preset {
            Preset::Otls => {}
            Preset::Microct => {
                cfg.patch.shape = [32, 128, 128];
                cfg.patch.overlaps = [0, 0, 0];
                cfg.patch.norm =
                    NormParams { lower_clip: 25_000.0, upper_clip: UpperClip::TopPercent(1.0), invert: false };
            }
            Preset::Phantom => {
                cfg.seg = SegParams {
                    air_mean_threshold: 0.0,
                    binarize_threshold: 0.0,
                    min_tissue_area: 0,
                    ..SegParams::default()
                };
                cfg.patch.shape = [16, 32, 32];
                cfg.patch.overlaps = [8, 0, 0];
                cfg.patch.plane_shape = [64, 64];
                cfg.train.epochs = 100;
                cfg.patch.norm =
                    NormParams { lower_clip: 0.0, upper_clip: UpperClip::Absolute(65_535.0), invert: false };
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: &dyn fmt::Display| ConfigError::Invalid(e.to_string());
        self.seg.validate().map_err(|e| invalid(&e))?;
        self.patch.norm.validate().map_err(|e| invalid(&e))?;
        self.encoder.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        let spec = self.phantom.spec();
        spec.validate().map_err(|e| invalid(&e))?;
        self.phantom.survival.validate(spec.classes.len()).map_err(|e| invalid(&e))?;
        if self.patch.shape.iter().chain(&self.patch.plane_shape).any(|&s| s == 0) {
            return Err(ConfigError::Invalid("patch shapes must be positive".into()));
        }
        if self.patch.overlaps.iter().zip(&self.patch.shape).any(|(o, s)| o >= s) {
            return Err(ConfigError::Invalid("patch overlaps must be smaller than the patch shape".into()));
        }
        if self.ig.steps == 0 {
            return Err(ConfigError::Invalid("ig.steps must be at least 1".into()));
        }
        if self.ig.heatmap_overlap.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(ConfigError::Invalid("ig.heatmap_overlap entries must lie in [0, 1)".into()));
        }
        if self.eval.folds < 2 || self.eval.repeats == 0 {
            return Err(ConfigError::Invalid("eval needs folds >= 2 and repeats >= 1".into()));
        }
        if !(self.eval.partial_fraction > 0.0 && self.eval.partial_fraction <= 1.0) {
            return Err(ConfigError::Invalid("eval.partial_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Command-line layer, applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub workers: Option<usize>,
    /// Replaces the whole encoder section.
    pub encoder: Option<EncoderSpec>,
    /// `section.key=value` assignments; values parse as TOML, else as strings.
    pub sets: Vec<String>,
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| ConfigError::Override(assignment.into()))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

/// Resolve preset, file text and overrides into a validated config.
pub fn parse_config(text: &str, ov: &Overrides) -> Result<RunConfig> {
    let mut file: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let preset = match ov.preset {
        Some(p) => p,
        None => match file.get("preset") {
            None => Preset::default(),
            Some(toml::Value::String(s)) => s.parse().map_err(ConfigError::Parse)?,
            Some(other) => return Err(ConfigError::Parse(format!("preset must be a string, got {other}"))),
        },
    };
    file.insert("preset".into(), toml::Value::String(preset.as_str().into()));
    let mut merged = toml::Table::try_from(RunConfig::preset(preset)).expect("defaults serialize");
    merge(&mut merged, file);
    for s in &ov.sets {
        apply_set(&mut merged, s)?;
    }
    let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &ov.output {
        cfg.output = out.clone();
    }
    if let Some(w) = ov.workers {
        cfg.workers = w;
    }
    if let Some(e) = &ov.encoder {
        cfg.encoder = e.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Read `path` (if any) and resolve. Without an output flag or file value,
/// the output root falls back to `$VOLMIL_OUTPUT`.
pub fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?,
        None => String::new(),
    };
    let mut ov = ov.clone();
    let file_sets_output = toml::from_str::<toml::Table>(&text).map(|t| t.contains_key("output")).unwrap_or(false);
    if ov.output.is_none() && !file_sets_output {
        if let Some(env) = std::env::var_os(OUTPUT_ENV) {
            ov.output = Some(PathBuf::from(env));
        }
    }
    parse_config(&text, &ov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_otls_defaults() {
        let cfg = parse_config("", &Overrides::default()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.patch.shape, [64, 128, 128]);
        assert_eq!(cfg.patch.overlaps, [32, 0, 0]);
        assert_eq!(cfg.patch.norm.lower_clip, 100.0);
        assert!(cfg.patch.norm.invert);
    }

    #[test]
    fn flag_seed_beats_file_seed() {
        let ov = Overrides { seed: Some(7), ..Default::default() };
        assert_eq!(parse_config("seed = 3", &ov).unwrap().seed, 7);
        assert_eq!(parse_config("seed = 3", &Overrides::default()).unwrap().seed, 3);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config("patchh = 1", &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("patchh"), "{err}");
        let err = parse_config("[train]\nepoch = 3", &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("epoch"), "{err}");
    }

    #[test]
    fn type_mismatch_rejected() {
        assert!(matches!(parse_config("seed = \"x\"", &Overrides::default()), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn module_invariants_checked() {
        let err = parse_config("[seg]\nmedian_kernel = 4", &Overrides::default()).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn preset_from_file_then_flags() {
        let cfg = parse_config("preset = \"microct\"\n[patch]\nplane_shape = [64, 64]", &Overrides::default()).unwrap();
        assert_eq!(cfg.patch.shape, [32, 128, 128]);
        assert_eq!(cfg.patch.norm.lower_clip, 25_000.0);
        assert_eq!(cfg.patch.plane_shape, [64, 64]);
        let ov = Overrides {
            preset: Some(Preset::Phantom),
            sets: vec!["train.epochs=3".into(), "patch.mode=planes2d".into(), "encoder.order=3".into()],
            ..Default::default()
        };
        let cfg = parse_config("preset = \"microct\"", &ov).unwrap();
        assert_eq!(cfg.preset, Preset::Phantom);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.patch.mode, PatchMode::Planes2d);
        assert_eq!(cfg.encoder, EncoderSpec::Moments { order: 3, threshold: 0.5 });
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = RunConfig::preset(Preset::Phantom);
        let text = cfg.to_toml();
        assert_eq!(parse_config(&text, &Overrides::default()).unwrap(), cfg);
    }

    #[test]
    fn heatmap_overlaps_in_voxels() {
        let ig = IgConfig::default();
        assert_eq!(ig.heatmap_overlaps([64, 128, 128]), [32, 96, 96]);
    }
}
