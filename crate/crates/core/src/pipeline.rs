//! The end-to-end experiment: eight stages run in dependency order, each
//! reading only its declared inputs and writing content-hashed artifacts into
//! one output directory. A manifest records what ran so a resumed run can skip
//! stages whose inputs are unchanged.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{train_classifier, Classifier, ClassifierConfig};
use crate::counterfactual::{self, AscentConfig, CounterfactualResult, MissCategory};
use crate::data::{load_idx, make_synthetic_with, split, write_file, ImageSet, SyntheticSpec};
use crate::error::{Error, Result};
use crate::flow::{train_flow, Flow, FlowConfig};
use crate::hitmiss::{build_hitmiss, HitMissDataset};
use crate::metrics::{detection_report, fmt2, write_detection_csv, write_scores_csv, DetectionRow, ScoredLabels};
use crate::prober::{train_prober, Prober, ProberConfig, Verdict};
use crate::stats::{
    plane_scan, run_hypothesis_tests, uncertainty_histograms, write_histogram_csv, write_hypothesis_csv,
    write_plane_csv, HypothesisRow, UncertaintyRecord,
};
use crate::{plot, stats};

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUT_ENV: &str = "PROBERLAB_OUT";

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX files (optionally gzipped), relative to `data_dir`.
    Idx {
        name: String,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Use only the first `n` training samples.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Gaussian blobs generated in memory and split into train and test.
    Synthetic {
        name: String,
        blobs: SyntheticSpec,
        test_fraction: f64,
    },
}

impl DatasetSpec {
    pub fn mnist() -> Self {
        DatasetSpec::Idx {
            name: "mnist".into(),
            train_images: "train-images-idx3-ubyte.gz".into(),
            train_labels: "train-labels-idx1-ubyte.gz".into(),
            test_images: "t10k-images-idx3-ubyte.gz".into(),
            test_labels: "t10k-labels-idx1-ubyte.gz".into(),
            train_limit: None,
            test_limit: None,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            DatasetSpec::Idx { name, .. } | DatasetSpec::Synthetic { name, .. } => name,
        }
    }

    /// The files a stage reading this dataset depends on.
    pub fn files(&self, data_dir: &Path) -> Vec<PathBuf> {
        match self {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => [train_images, train_labels, test_images, test_labels]
                .iter()
                .map(|p| data_dir.join(p))
                .collect(),
            DatasetSpec::Synthetic { .. } => Vec::new(),
        }
    }

    pub fn load(&self, data_dir: &Path) -> Result<(ImageSet, ImageSet)> {
        match self {
            DatasetSpec::Idx {
                name,
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = load_idx(data_dir.join(train_images), data_dir.join(train_labels))?;
                let mut test = load_idx(data_dir.join(test_images), data_dir.join(test_labels))?;
                if let Some(n) = train_limit {
                    train = train.take(*n);
                }
                if let Some(n) = test_limit {
                    test = test.take(*n);
                }
                train.name = format!("{name}-train");
                test.name = format!("{name}-test");
                Ok((train, test))
            }
            DatasetSpec::Synthetic {
                name,
                blobs,
                test_fraction,
            } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::InvalidConfig(format!("test_fraction {test_fraction} outside (0, 1)")));
                }
                let all = make_synthetic_with(blobs)?;
                let mut parts = split(&all, &[1.0 - test_fraction, *test_fraction], blobs.seed)?.into_iter();
                let (mut tr, mut te) = (parts.next().expect("two parts"), parts.next().expect("two parts"));
                tr.name = format!("{name}-train");
                te.name = format!("{name}-test");
                Ok((tr, te))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Lattice points per axis of the plane scan.
    pub plane_grid_n: usize,
    /// Test indices spanning the plane; chosen automatically when absent.
    #[serde(default)]
    pub plane_anchors: Option<[usize; 3]>,
    /// Cap on the number of prober-predicted misses sent to the ascent.
    #[serde(default)]
    pub cf_limit: Option<usize>,
    /// Rows drawn per counterfactual figure.
    pub figure_rows: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            plane_grid_n: 49,
            plane_anchors: None,
            cf_limit: None,
            figure_rows: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub data_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub classifier: ClassifierConfig,
    pub classifier_seed: u64,
    pub prober: ProberConfig,
    pub flow: FlowConfig,
    pub ascent: AscentConfig,
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// The full MNIST experiment.
    pub fn mnist(data_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: CONFIG_VERSION,
            data_dir: data_dir.into(),
            dataset: DatasetSpec::mnist(),
            classifier: ClassifierConfig::default(),
            classifier_seed: 0,
            prober: ProberConfig::default(),
            flow: FlowConfig::default(),
            ascent: AscentConfig::default(),
            analysis: AnalysisConfig::default(),
            output_dir: output_dir.into(),
        }
    }

    /// MNIST with a shorter flow schedule and a capped counterfactual set.
    pub fn mnist_quick(data_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        let mut c = Self::mnist(data_dir, output_dir);
        c.flow.epochs = 1;
        c.flow.max_train = Some(10_000);
        c.ascent.max_iters = 200;
        c.analysis.cf_limit = Some(60);
        c
    }

    /// A seconds-scale run on synthetic blobs, for smoke and determinism tests.
    pub fn synthetic(output_dir: impl Into<PathBuf>) -> Self {
        use crate::classifier::Architecture;
        use crate::data::ImageShape;
        let shape = ImageShape::new(6, 6, 1);

        Self {
            version: CONFIG_VERSION,
            data_dir: PathBuf::from("."),
            dataset: DatasetSpec::Synthetic {
                name: "blobs".into(),
                blobs: SyntheticSpec {
                    n_per_class: 400,
                    classes: 3,
                    shape,
                    seed: 1,
                    noise: 0.5,
                },
                test_fraction: 1.0 / 3.0,
            },
            classifier: ClassifierConfig {
                arch: Architecture::Mlp {
                    hidden: vec![16, 12],
                    dropout: 0.0,
                },
                epochs: 25,
                batch_size: 32,
                ..ClassifierConfig::default()
            },
            classifier_seed: 3,
            prober: ProberConfig {
                hidden: [12, 8],
                epochs: 10,
                batch_size: 32,
                ..ProberConfig::default()
            },
            flow: FlowConfig {
                coupling_layers: 4,
                hidden: 16,
                epochs: 2,
                batch_size: 32,
                ..FlowConfig::default()
            },
            ascent: AscentConfig {
                max_iters: 20,
                step_size: 0.05,
                ..AscentConfig::default()
            },
            analysis: AnalysisConfig {
                plane_grid_n: 9,
                figure_rows: 4,
                ..AnalysisConfig::default()
            },
            output_dir: output_dir.into(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        c.check_version()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), (self.to_json() + "\n").as_bytes())
    }

    fn check_version(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} (supported: {CONFIG_VERSION})",
                self.version
            )));
        }
        Ok(())
    }

    /// Replaces the output directory with `$PROBERLAB_OUT` when set.
    pub fn apply_env(&mut self) {
        if let Some(out) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(out);
        }
    }

    /// Everything that can be checked before any stage runs.
    pub fn validate(&self) -> Result<()> {
        self.check_version()?;
        for f in self.dataset.files(&self.data_dir) {
            if !f.is_file() {
                return Err(Error::InvalidConfig(format!("dataset file {} does not exist", f.display())));
            }
        }
        if self.classifier.epochs > 0 && self.classifier.batch_size == 0 {
            return Err(Error::InvalidConfig("classifier batch size must be positive".into()));
        }
        self.prober.validate()?;
        self.flow.validate()?;
        self.ascent.validate()?;
        if self.analysis.plane_grid_n < 2 {
            return Err(Error::InvalidConfig("plane_grid_n must be >= 2".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::InvalidConfig("output_dir is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainClassifier,
    BuildHitmiss,
    TrainProber,
    EvalDetection,
    UncertaintyTest,
    TrainFlow,
    GenCf,
    Reclassify,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::TrainClassifier,
        Stage::BuildHitmiss,
        Stage::TrainProber,
        Stage::EvalDetection,
        Stage::UncertaintyTest,
        Stage::TrainFlow,
        Stage::GenCf,
        Stage::Reclassify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainClassifier => "train-classifier",
            Stage::BuildHitmiss => "build-hitmiss",
            Stage::TrainProber => "train-prober",
            Stage::EvalDetection => "eval-detection",
            Stage::UncertaintyTest => "uncertainty-test",
            Stage::TrainFlow => "train-flow",
            Stage::GenCf => "gen-cf",
            Stage::Reclassify => "reclassify",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Artifact file names inside the output directory.
pub mod files {
    pub const CLASSIFIER: &str = "classifier.ckpt";
    pub const TABLE1: &str = "table1.csv";
    pub const HITMISS_TRAIN: &str = "hitmiss_train.bin";
    pub const HITMISS_TEST: &str = "hitmiss_test.bin";
    pub const PROBER: &str = "prober.ckpt";
    pub const PROBER_CURVE: &str = "prober_curve.csv";
    pub const TABLE2: &str = "table2.csv";
    pub const SCORES_TEST: &str = "scores_test.csv";
    pub const TABLE3: &str = "table3.csv";
    pub const FIG2_TRAIN_CSV: &str = "fig2_hist_train.csv";
    pub const FIG2_TEST_CSV: &str = "fig2_hist_test.csv";
    pub const FIG2_TRAIN_PNG: &str = "fig2_hist_train.png";
    pub const FIG2_TEST_PNG: &str = "fig2_hist_test.png";
    pub const FIG3_CSV: &str = "fig3_plane.csv";
    pub const FIG3_PNG: &str = "fig3_plane.png";
    pub const FLOW: &str = "flow.ckpt";
    pub const FLOW_CURVE: &str = "flow_curve.csv";
    pub const CF_DIR: &str = "cf";
    pub const CF_RECORDS: &str = "cf/records.json";
    pub const CF_RAW: &str = "cf/deltas.ckpt";
    pub const CF_SUMMARY: &str = "cf_summary.csv";
    pub const FIG4_PNG: &str = "fig4_true_miss.png";
    pub const FIG5_PNG: &str = "fig5_false_miss.png";
    pub const TABLE4: &str = "table4.csv";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Hash of the stage's configuration and input contents.
    pub key: String,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub seconds: f64,
    /// Whether this run reused the artifacts of an earlier one.
    pub reused: bool,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub code_version: String,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            version: MANIFEST_VERSION,
            code_version: code_version(),
            config_sha256: sha256_hex(config.to_json().as_bytes()),
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    pub fn completed(&self) -> Vec<&StageRecord> {
        self.stages.iter().filter(|r| r.status == StageStatus::Completed).collect()
    }

    fn upsert(&mut self, record: StageRecord) {
        match self.stages.iter_mut().find(|r| r.stage == record.stage) {
            Some(r) => *r = record,
            None => self.stages.push(record),
        }
        self.stages.sort_by_key(|r| Stage::ALL.iter().position(|s| *s == r.stage));
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_file(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                found: m.version,
                supported: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }
}

/// `git describe` of the source tree when available, else the crate version.
pub fn code_version() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Outcome of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub executed: Vec<Stage>,
    pub reused: Vec<Stage>,
}

/// Declared inputs, outputs and configuration of a stage.
struct StagePlan {
    stage: Stage,
    /// Files outside the output directory (dataset files).
    external: Vec<PathBuf>,
    /// Artifacts of earlier stages.
    upstream: Vec<&'static str>,
    outputs: Vec<&'static str>,
    config: serde_json::Value,
}

fn plan(config: &ExperimentConfig, stage: Stage) -> StagePlan {
    use files::*;
    use serde_json::json;
    let data = config.dataset.files(&config.data_dir);
    let ds = json!(config.dataset);
    let (external, upstream, outputs, cfg): (Vec<PathBuf>, Vec<&str>, Vec<&str>, serde_json::Value) = match stage {
        Stage::TrainClassifier => (
            data,
            vec![],
            vec![CLASSIFIER, TABLE1],
            json!({"dataset": ds, "classifier": config.classifier, "seed": config.classifier_seed}),
        ),
        Stage::BuildHitmiss => (data, vec![CLASSIFIER], vec![HITMISS_TRAIN, HITMISS_TEST], json!({"dataset": ds})),
        Stage::TrainProber => (vec![], vec![HITMISS_TRAIN], vec![PROBER, PROBER_CURVE], json!(config.prober)),
        Stage::EvalDetection => (
            vec![],
            vec![HITMISS_TRAIN, HITMISS_TEST, PROBER],
            vec![TABLE2, SCORES_TEST],
            json!({"dataset": config.dataset.name()}),
        ),
        Stage::UncertaintyTest => (
            data,
            vec![CLASSIFIER, HITMISS_TRAIN, HITMISS_TEST, PROBER],
            vec![
                TABLE3,
                FIG2_TRAIN_CSV,
                FIG2_TEST_CSV,
                FIG2_TRAIN_PNG,
                FIG2_TEST_PNG,
                FIG3_CSV,
                FIG3_PNG,
            ],
            json!({"dataset": ds, "grid_n": config.analysis.plane_grid_n, "anchors": config.analysis.plane_anchors}),
        ),
        Stage::TrainFlow => (
            data,
            vec![],
            vec![FLOW, FLOW_CURVE],
            json!({"dataset": ds, "flow": config.flow}),
        ),
        Stage::GenCf => (
            data,
            vec![CLASSIFIER, PROBER, FLOW],
            vec![CF_RECORDS, CF_RAW, CF_SUMMARY, FIG4_PNG, FIG5_PNG],
            json!({"dataset": ds, "ascent": config.ascent, "limit": config.analysis.cf_limit, "rows": config.analysis.figure_rows}),
        ),
        Stage::Reclassify => (vec![], vec![CLASSIFIER, CF_RECORDS, CF_RAW], vec![TABLE4], json!({})),
    };
    StagePlan {
        stage,
        external,
        upstream,
        outputs,
        config: cfg,
    }
}

/// Inputs hashed, in declaration order: external files by absolute path, upstream by name.
fn hash_inputs(p: &StagePlan, out: &Path) -> Result<Vec<Artifact>> {
    let mut inputs = Vec::new();
    for f in &p.external {
        inputs.push(Artifact {
            path: f.display().to_string(),
            sha256: file_sha256(f)?,
        });
    }
    for u in &p.upstream {
        inputs.push(Artifact {
            path: u.to_string(),
            sha256: file_sha256(&out.join(u))?,
        });
    }
    Ok(inputs)
}

fn stage_key(p: &StagePlan, inputs: &[Artifact]) -> String {
    let mut h = Sha256::new();
    h.update(p.stage.name().as_bytes());
    h.update(p.config.to_string().as_bytes());
    for a in inputs {
        // Names of external files can differ between machines; only contents count.
        h.update(a.sha256.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn outputs_intact(record: &StageRecord, out: &Path) -> bool {
    record.outputs.iter().all(|a| {
        file_sha256(&out.join(&a.path))
            .map(|h| h == a.sha256)
            .unwrap_or(false)
    })
}

/// Loaded datasets, shared by the stages of one run.
struct Context<'a> {
    config: &'a ExperimentConfig,
    out: PathBuf,
    data: Option<(ImageSet, ImageSet)>,
}

impl Context<'_> {
    fn data(&mut self) -> Result<&(ImageSet, ImageSet)> {
        if self.data.is_none() {
            self.data = Some(self.config.dataset.load(&self.config.data_dir)?);
        }
        Ok(self.data.as_ref().expect("just loaded"))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Runs every stage; with `resume`, stages whose configuration, inputs and
/// outputs match the existing manifest are skipped.
pub fn run_pipeline(config: &ExperimentConfig, resume: bool) -> Result<RunOutcome> {
    config.validate()?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest_path = out.join(MANIFEST_FILE);
    let previous = if resume && manifest_path.is_file() {
        Some(RunManifest::load(&manifest_path)?)
    } else {
        None
    };
    let mut manifest = RunManifest::new(config);
    let mut ctx = Context {
        config,
        out: out.clone(),
        data: None,
    };
    let (mut executed, mut reused) = (Vec::new(), Vec::new());
    for stage in Stage::ALL {
        let p = plan(config, stage);
        let inputs = hash_inputs(&p, &out).map_err(|e| stage_failed(stage, e))?;
        let key = stage_key(&p, &inputs);
        if let Some(prev) = previous.as_ref().and_then(|m| m.stage(stage)) {
            if prev.status == StageStatus::Completed && prev.key == key && outputs_intact(prev, &out) {
                log::info!("{stage}: unchanged, reusing artifacts");
                manifest.upsert(StageRecord {
                    reused: true,
                    ..prev.clone()
                });
                reused.push(stage);
                continue;
            }
        }
        execute(&mut ctx, &mut manifest, &p, inputs, key)?;
        executed.push(stage);
    }
    manifest.save(&manifest_path)?;
    Ok(RunOutcome {
        manifest,
        executed,
        reused,
    })
}

/// Runs one planned stage and records the outcome in the manifest, which is
/// saved either way.
fn execute(ctx: &mut Context, manifest: &mut RunManifest, p: &StagePlan, inputs: Vec<Artifact>, key: String) -> Result<()> {
    let stage = p.stage;
    let manifest_path = ctx.out.join(MANIFEST_FILE);
    log::info!("{stage}: running");
    let start = Instant::now();
    let result = run_stage(ctx, stage).and_then(|()| {
        p.outputs
            .iter()
            .map(|o| {
                Ok(Artifact {
                    path: o.to_string(),
                    sha256: file_sha256(&ctx.out.join(o))?,
                })
            })
            .collect::<Result<Vec<_>>>()
    });
    let seconds = start.elapsed().as_secs_f64();
    let (status, outputs, error) = match &result {
        Ok(outputs) => (StageStatus::Completed, outputs.clone(), None),
        Err(e) => (StageStatus::Failed, Vec::new(), Some(e.to_string())),
    };
    manifest.upsert(StageRecord {
        stage,
        status,
        key,
        inputs,
        outputs,
        seconds,
        reused: false,
        error,
    });
    manifest.save(&manifest_path)?;
    match result {
        Ok(_) => {
            log::info!("{stage}: done in {seconds:.1} s");
            Ok(())
        }
        Err(e) => Err(stage_failed(stage, e)),
    }
}

fn stage_failed(stage: Stage, e: Error) -> Error {
    match e {
        e @ Error::StageFailed { .. } => e,
        e => Error::StageFailed {
            stage: stage.name().to_string(),
            source: Box::new(e),
        },
    }
}

/// Runs one stage against the artifacts already in the output directory and
/// records it in the manifest there, keeping the records of other stages.
pub fn run_single_stage(config: &ExperimentConfig, stage: Stage) -> Result<()> {
    config.validate()?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = match RunManifest::load(&manifest_path) {
        Ok(m) if m.config_sha256 == sha256_hex(config.to_json().as_bytes()) => m,
        _ => RunManifest::new(config),
    };
    let p = plan(config, stage);
    let inputs = hash_inputs(&p, &out).map_err(|e| stage_failed(stage, e))?;
    let key = stage_key(&p, &inputs);
    let mut ctx = Context {
        config,
        out,
        data: None,
    };
    execute(&mut ctx, &mut manifest, &p, inputs, key)
}

/// Redraws the plane scan alone; the uncertainty stage also produces it.
pub fn run_plane_scan(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let mut ctx = Context {
        config,
        out: config.output_dir.clone(),
        data: None,
    };
    plane_scan_figure(&mut ctx).map_err(|e| stage_failed(Stage::UncertaintyTest, e))
}

fn run_stage(ctx: &mut Context, stage: Stage) -> Result<()> {
    match stage {
        Stage::TrainClassifier => stage_train_classifier(ctx),
        Stage::BuildHitmiss => stage_build_hitmiss(ctx),
        Stage::TrainProber => stage_train_prober(ctx),
        Stage::EvalDetection => stage_eval_detection(ctx),
        Stage::UncertaintyTest => stage_uncertainty(ctx),
        Stage::TrainFlow => stage_train_flow(ctx),
        Stage::GenCf => stage_gen_cf(ctx),
        Stage::Reclassify => stage_reclassify(ctx),
    }
}

fn stage_train_classifier(ctx: &mut Context) -> Result<()> {
    let config = ctx.config;
    let (train, test) = ctx.data()?;
    let model = train_classifier(train, Some(test), &config.classifier, config.classifier_seed)?;
    model.save(ctx.path(files::CLASSIFIER), config.classifier_seed, &config.classifier)?;
    let r = &model.record;
    let pct = |v: Option<f64>| v.map_or("NA".to_string(), |v| fmt2(100.0 * v));
    let table = format!(
        "dataset,train_top1,train_top5,test_top1,test_top5\n{},{},{},{},{}\n",
        config.dataset.name(),
        pct(r.train_top1),
        pct(r.train_top5),
        pct(r.test_top1),
        pct(r.test_top5)
    );
    write_file(&ctx.path(files::TABLE1), table.as_bytes())
}

fn stage_build_hitmiss(ctx: &mut Context) -> Result<()> {
    let classifier = Classifier::load(ctx.path(files::CLASSIFIER))?;
    let (train, test) = ctx.data()?;
    let dp_train = build_hitmiss(&classifier, train)?;
    let dp_test = build_hitmiss(&classifier, test)?;
    log::info!(
        "hit-miss: train {} hit / {} miss, test {} hit / {} miss",
        dp_train.hit_count(),
        dp_train.miss_count(),
        dp_test.hit_count(),
        dp_test.miss_count()
    );
    dp_train.save(ctx.path(files::HITMISS_TRAIN))?;
    dp_test.save(ctx.path(files::HITMISS_TEST))
}

fn stage_train_prober(ctx: &mut Context) -> Result<()> {
    let dp = HitMissDataset::load(ctx.path(files::HITMISS_TRAIN))?;
    let prober = train_prober(&dp, &ctx.config.prober)?;
    prober.save(ctx.path(files::PROBER), &ctx.config.prober)?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in prober.record.epoch_losses.iter().enumerate() {
        curve.push_str(&format!("{e},{l:.6}\n"));
    }
    write_file(&ctx.path(files::PROBER_CURVE), curve.as_bytes())
}

fn stage_eval_detection(ctx: &mut Context) -> Result<()> {
    let train = HitMissDataset::load(ctx.path(files::HITMISS_TRAIN))?;
    let test = HitMissDataset::load(ctx.path(files::HITMISS_TEST))?;
    let prober = Prober::load(ctx.path(files::PROBER))?;
    let report = detection_report(&prober, &test)?;
    let row = DetectionRow {
        dataset: ctx.config.dataset.name().to_string(),
        ir_train: train.imbalance_ratio(),
        ir_test: test.imbalance_ratio(),
        report,
    };
    write_detection_csv(ctx.path(files::TABLE2), &[row])?;
    let scores = ScoredLabels::from_outputs(&prober.predict_dataset(&test)?, &test)?;
    write_scores_csv(ctx.path(files::SCORES_TEST), &scores)
}

/// Uncertainty records from stored representations through the classifier head.
pub fn profile_from_hitmiss(
    classifier: &Classifier,
    prober: &Prober,
    dp: &HitMissDataset,
) -> Result<Vec<UncertaintyRecord>> {
    let outputs = prober.predict_dataset(dp)?;
    dp.records
        .iter()
        .zip(outputs)
        .map(|(r, o)| Ok(UncertaintyRecord::new(&classifier.probs_from_rep(&r.rep)?, o.verdict)))
        .collect()
}

/// First prober-hit, first prober-miss and the next prober-hit of another class.
pub fn default_plane_anchors(classifier: &Classifier, prober: &Prober, set: &ImageSet) -> Result<[usize; 3]> {
    let preds = classifier.predict_set(set)?;
    let outs = stats::prober_outputs(prober, &preds)?;
    let first = |f: &dyn Fn(usize) -> bool| (0..set.len()).find(|&i| f(i));
    let a = first(&|i| outs[i].verdict == Verdict::Hit);
    let b = first(&|i| outs[i].verdict == Verdict::Miss);
    let c = a.and_then(|a| {
        first(&|i| i != a && Some(i) != b && outs[i].verdict == Verdict::Hit && set.samples[i].label != set.samples[a].label)
    });
    match (a, b, c) {
        (Some(a), Some(b), Some(c)) => Ok([a, b, c]),
        _ if set.len() >= 3 => Ok([0, 1, 2]),
        _ => Err(Error::DegenerateDataset("plane scan needs three test images".into())),
    }
}

fn stage_uncertainty(ctx: &mut Context) -> Result<()> {
    let classifier = Classifier::load(ctx.path(files::CLASSIFIER))?;
    let prober = Prober::load(ctx.path(files::PROBER))?;
    let name = ctx.config.dataset.name().to_string();
    let mut rows = Vec::new();
    for (split, dp_file, csv, png) in [
        ("train", files::HITMISS_TRAIN, files::FIG2_TRAIN_CSV, files::FIG2_TRAIN_PNG),
        ("test", files::HITMISS_TEST, files::FIG2_TEST_CSV, files::FIG2_TEST_PNG),
    ] {
        let dp = HitMissDataset::load(ctx.path(dp_file))?;
        let profile = profile_from_hitmiss(&classifier, &prober, &dp)?;
        let label = format!("{name}-{split}");
        rows.push(HypothesisRow {
            dataset: label.clone(),
            tests: run_hypothesis_tests(&profile)?,
        });
        let h = uncertainty_histograms(&profile, classifier.class_count);
        write_histogram_csv(ctx.path(csv), &label, &h)?;
        plot::histogram_figure(&h, &ctx.path(png))?;
    }
    write_hypothesis_csv(ctx.path(files::TABLE3), &rows)?;
    plane_scan_figure(ctx)
}

fn plane_scan_figure(ctx: &mut Context) -> Result<()> {
    let classifier = Classifier::load(ctx.path(files::CLASSIFIER))?;
    let prober = Prober::load(ctx.path(files::PROBER))?;
    let grid_n = ctx.config.analysis.plane_grid_n;
    let anchors = ctx.config.analysis.plane_anchors;
    let (_, test) = ctx.data()?;
    let [i, j, k] = match anchors {
        Some(a) => a,
        None => default_plane_anchors(&classifier, &prober, test)?,
    };
    if [i, j, k].iter().any(|&x| x >= test.len()) {
        return Err(Error::InvalidConfig(format!("plane anchors {:?} outside the test set", [i, j, k])));
    }
    let (x1, x2, x3) = (test.input(i), test.input(j), test.input(k));
    let scan = plane_scan(&classifier, &prober, [&x1, &x2, &x3], grid_n)?;
    write_plane_csv(ctx.path(files::FIG3_CSV), &scan)?;
    plot::plane_figure(&scan, &ctx.path(files::FIG3_PNG))
}

fn stage_train_flow(ctx: &mut Context) -> Result<()> {
    let config = ctx.config;
    let (train, _) = ctx.data()?;
    let flow = train_flow(train, &config.flow)?;
    flow.save(ctx.path(files::FLOW), &config.flow)?;
    let mut curve = String::from("epoch,nll,bpd\n");
    for (e, nll) in flow.record.epoch_nll.iter().enumerate() {
        let bpd = flow.record.epoch_bpd.get(e).map_or("NA".to_string(), |b| format!("{b:.6}"));
        curve.push_str(&format!("{e},{nll:.6},{bpd}\n"));
    }
    write_file(&ctx.path(files::FLOW_CURVE), curve.as_bytes())
}

/// Columns of the per-sample counterfactual summary.
pub const CF_SUMMARY_HEADER: &str = "index,true_label,category,pred_before,max_prob_before,pred_after,max_prob_after,p_hit_before,p_hit_after,converged,iterations,max_abs_delta\n";

pub fn write_cf_summary(path: &Path, results: &[CounterfactualResult]) -> Result<()> {
    let mut out = String::from(CF_SUMMARY_HEADER);
    for r in results.iter().map(CounterfactualResult::record) {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{},{:.6},{:.6},{:.6},{},{},{:.6}\n",
            r.index,
            r.true_label,
            r.category,
            r.pred_before.label,
            r.pred_before.max_prob,
            r.pred_after.label,
            r.pred_after.max_prob,
            r.p_hit_before,
            r.p_hit_after,
            r.converged,
            r.iterations,
            r.max_abs_delta
        ));
    }
    write_file(path, out.as_bytes())
}

fn figure_for(ctx: &Context, results: &[CounterfactualResult], category: MissCategory, file: &str) -> Result<()> {
    let shape = ctx.data.as_ref().expect("data loaded").1.shape;
    let rows: Vec<[Vec<f64>; 3]> = results
        .iter()
        .filter(|r| r.category == category)
        .take(ctx.config.analysis.figure_rows)
        .map(|r| [r.x.clone(), r.cf.clone(), r.delta.clone()])
        .collect();
    if rows.is_empty() {
        // A blank panel keeps the declared output present.
        let blank = vec![0.0; shape.len()];
        return plot::triptych_grid(&[[blank.clone(), blank.clone(), blank]], shape, &ctx.path(file));
    }
    plot::triptych_grid(&rows, shape, &ctx.path(file))
}

fn stage_gen_cf(ctx: &mut Context) -> Result<()> {
    let classifier = Classifier::load(ctx.path(files::CLASSIFIER))?;
    let prober = Prober::load(ctx.path(files::PROBER))?;
    let flow = Flow::load(ctx.path(files::FLOW))?;
    let config = ctx.config;
    let (_, test) = ctx.data()?;
    let results = counterfactual::counterfactuals_for_misses(
        &classifier,
        &prober,
        &flow,
        test,
        config.analysis.cf_limit,
        &config.ascent,
    )?;
    let shape = test.shape;
    let (t, f) = counterfactual::category_counts(&results);
    log::info!("counterfactuals: {t} true misses, {f} false misses");
    let dir = ctx.path(files::CF_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let records: Vec<_> = results.iter().map(CounterfactualResult::record).collect();
    counterfactual::write_records(ctx.path(files::CF_RECORDS), &records)?;
    counterfactual::save_raw(ctx.path(files::CF_RAW), &results, shape)?;
    write_cf_summary(&ctx.path(files::CF_SUMMARY), &results)?;
    figure_for(ctx, &results, MissCategory::TrueMiss, files::FIG4_PNG)?;
    figure_for(ctx, &results, MissCategory::FalseMiss, files::FIG5_PNG)
}

fn stage_reclassify(ctx: &mut Context) -> Result<()> {
    let classifier = Classifier::load(ctx.path(files::CLASSIFIER))?;
    let records = counterfactual::read_records(ctx.path(files::CF_RECORDS))?;
    let raw = counterfactual::load_raw(ctx.path(files::CF_RAW))?;
    let reports = counterfactual::reclassify_saved(&raw, &records, &classifier)?;
    counterfactual::write_table4_csv(ctx.path(files::TABLE4), &reports)
}

/// A readable digest of the tables listed in a manifest. Numbers are copied
/// verbatim from the CSV files.
pub fn report(manifest_path: impl AsRef<Path>) -> Result<String> {
    let manifest_path = manifest_path.as_ref();
    let manifest = RunManifest::load(manifest_path)?;
    let out = manifest_path.parent().unwrap_or(Path::new("."));
    let completed = manifest.completed();
    if completed.is_empty() {
        return Ok("no completed stages\n".to_string());
    }
    let mut s = format!("run {} ({} completed stages)\n", manifest.code_version, completed.len());
    let sections = [
        (Stage::TrainClassifier, files::TABLE1, "Classifier accuracy (%)"),
        (Stage::EvalDetection, files::TABLE2, "Misclassification detection (%)"),
        (Stage::UncertaintyTest, files::TABLE3, "Uncertainty tests (reject at p < 0.05)"),
        (Stage::Reclassify, files::TABLE4, "Re-classification after counterfactuals (%)"),
    ];
    for (stage, file, title) in sections {
        if !completed.iter().any(|r| r.stage == stage) {
            continue;
        }
        let path = out.join(file);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        s.push_str(&format!("\n{title}\n"));
        let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|v| v.len()).max().unwrap_or(0))
            .collect();
        for r in &rows {
            let cells: Vec<String> = r.iter().enumerate().map(|(c, v)| format!("{v:<w$}", w = widths[c])).collect();
            s.push_str("  ");
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
    }
    Ok(s)
}
