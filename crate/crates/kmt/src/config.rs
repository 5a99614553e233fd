//! Experiment configuration: file schema (TOML or JSON), environment and
//! command-line overrides, and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kmt_core::corpus::{AugmentationSpec, ReversePos};
use kmt_core::error::{Error, Result};
use kmt_core::eval::EvalMode;
use kmt_core::model::ModelConfig;
use kmt_core::tasks::TaskSpec;
use kmt_core::tokenizer::AtomizationPolicy;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its streams from it.
    pub seed: u64,
    /// Run directory for artifacts and the manifest.
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub tokenizer: AtomizationPolicy,
    pub model: ModelConfig,
    #[serde(default)]
    pub tasks: TaskGridConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_persons: u32,
    /// Augmentation label, e.g. "single", "multi5+permute",
    /// "multi5+permute+reverse6", "multi5+fullname".
    pub augmentation: String,
    /// Attribute pools JSON; omitted = the built-in pools.
    #[serde(default)]
    pub pools_file: Option<PathBuf>,
    /// Sentence templates JSON; omitted = the built-in templates.
    #[serde(default)]
    pub templates_file: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGridConfig {
    /// Task names; empty selects the full grid.
    #[serde(default)]
    pub tasks: Vec<String>,
    /// Examples per task on the training split (single-subject tasks default
    /// to enumerating every training person).
    #[serde(default)]
    pub train_per_task: Option<usize>,
    /// Examples per task on the test split (same defaulting).
    #[serde(default)]
    pub test_per_task: Option<usize>,
    /// Fallback example count for two-person tasks, which cannot enumerate.
    #[serde(default = "default_pair_count")]
    pub pair_count: usize,
    /// Probability a generated example carries its hint (only applied to
    /// tasks that support hints).
    #[serde(default)]
    pub hint_probability: f64,
}

fn default_pair_count() -> usize {
    2000
}

impl Default for TaskGridConfig {
    fn default() -> Self {
        TaskGridConfig {
            tasks: Vec::new(),
            train_per_task: None,
            test_per_task: None,
            pair_count: default_pair_count(),
            hint_probability: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub pretrain: TrainOverrides,
    #[serde(default)]
    pub mixed: TrainOverrides,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

/// Optional overrides on top of a regime's defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub lr0: Option<f64>,
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    #[serde(default)]
    pub final_lr: Option<f64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    /// QA sequence fraction (mixed training only).
    #[serde(default)]
    pub qa_ratio: Option<f64>,
    #[serde(default)]
    pub answer_only_loss: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: kmt_core::train::TrainConfig) -> kmt_core::train::TrainConfig {
        if let Some(v) = self.steps {
            cfg.total_steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr0 {
            cfg.lr0 = v;
            // Keep finetune's relative floor unless overridden explicitly.
            if self.final_lr.is_none()
                && cfg.regime == kmt_core::train::Regime::LoraFinetune
            {
                cfg.final_lr = 0.1 * v;
            }
        }
        if let Some(v) = self.warmup_steps {
            cfg.warmup_steps = v;
        }
        if let Some(v) = self.final_lr {
            cfg.final_lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.qa_ratio {
            cfg.qa_ratio = v;
        }
        if let Some(v) = self.answer_only_loss {
            cfg.answer_only_loss = v;
        }
        cfg
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Base checkpoint stage: "pretrain" or "mixed".
    #[serde(default = "default_finetune_base")]
    pub base: String,
    /// Tasks to finetune on; empty = the whole configured grid.
    #[serde(default)]
    pub tasks: Vec<String>,
    #[serde(default = "default_attn_rank")]
    pub attn_rank: usize,
    #[serde(default = "default_embed_rank")]
    pub embed_rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_finetune_lr")]
    pub lr0: f64,
    #[serde(default)]
    pub overrides: TrainOverrides,
}

fn default_finetune_base() -> String {
    "pretrain".into()
}
fn default_attn_rank() -> usize {
    8
}
fn default_embed_rank() -> usize {
    128
}
fn default_alpha() -> f64 {
    4.0
}
fn default_finetune_lr() -> f64 {
    0.0003
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            base: default_finetune_base(),
            tasks: Vec::new(),
            attn_rank: default_attn_rank(),
            embed_rank: default_embed_rank(),
            alpha: default_alpha(),
            lr0: default_finetune_lr(),
            overrides: TrainOverrides::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    /// Per-task cap on scored examples.
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_mode")]
    pub mode: EvalMode,
    /// Which example split to score: "test" or "train".
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_beam() -> usize {
    kmt_core::eval::DEFAULT_BEAM_WIDTH
}
fn default_max_new() -> usize {
    kmt_core::eval::DEFAULT_MAX_NEW_TOKENS
}
fn default_cap() -> usize {
    kmt_core::eval::DEFAULT_EVAL_CAP
}
fn default_mode() -> EvalMode {
    EvalMode::AsEmitted
}
fn default_split() -> String {
    "test".into()
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            beam_width: default_beam(),
            max_new_tokens: default_max_new(),
            cap: default_cap(),
            mode: default_mode(),
            split: default_split(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// "mixed" (gen -> mixed-train -> evaluate) or "pretrain_finetune"
    /// (gen -> pretrain -> finetune -> evaluate).
    #[serde(default = "default_pipeline")]
    pub pipeline: String,
    /// |P_train| tiers for the train_set_size axis (persons = 2x each).
    #[serde(default)]
    pub train_set_sizes: Vec<u32>,
    /// Augmentation labels for the augmentation axis.
    #[serde(default)]
    pub augmentations: Vec<String>,
    /// QA ratios for the qa_ratio axis.
    #[serde(default)]
    pub qa_ratios: Vec<f64>,
}

fn default_pipeline() -> String {
    "mixed".into()
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            pipeline: default_pipeline(),
            train_set_sizes: Vec::new(),
            augmentations: Vec::new(),
            qa_ratios: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation labels
// ---------------------------------------------------------------------------

/// Parse an augmentation label ("single", "multi5+permute+reverse6", ...)
/// back into a spec; exact inverse of `AugmentationSpec::label()`.
pub fn parse_augmentation(label: &str) -> Result<AugmentationSpec> {
    let mut spec = AugmentationSpec::default();
    let mut parts = label.split('+');
    let head = parts.next().unwrap_or("");
    if head == "single" {
        spec.multiplicity = 1;
    } else if let Some(m) = head.strip_prefix("multi") {
        spec.multiplicity = m.parse::<u32>().map_err(|_| {
            Error::Config(format!("bad multiplicity in augmentation label {label:?}"))
        })?;
    } else {
        return Err(Error::Config(format!(
            "augmentation label {label:?} must start with \"single\" or \"multi<N>\""
        )));
    }
    for part in parts {
        match part {
            "permute" => spec.permute = true,
            "fullname" => spec.fullname = true,
            "reverse1" => spec.reverse_pos = ReversePos::After1,
            "reverse2" => spec.reverse_pos = ReversePos::After2,
            "reverse6" => spec.reverse_pos = ReversePos::After6,
            other => {
                return Err(Error::Config(format!(
                    "unknown augmentation flag {other:?} in {label:?} \
                     (expected permute, fullname, or reverse1/2/6)"
                )))
            }
        }
    }
    spec.validate()?;
    if spec.label() != label {
        return Err(Error::Config(format!(
            "augmentation label {label:?} is not in canonical form (use {:?})",
            spec.label()
        )));
    }
    Ok(spec)
}

/// Resolve task names to specs; empty input selects the full grid.
pub fn resolve_tasks(names: &[String]) -> Result<Vec<TaskSpec>> {
    if names.is_empty() {
        return Ok(TaskSpec::full_grid());
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let task: TaskSpec = name.parse().map_err(|_| {
            Error::Config(format!(
                "unknown task {name:?}; valid names look like extract.bdate, \
                 classify.birthmonth%2, rank.major, inverse.all.to.first"
            ))
        })?;
        if out.contains(&task) {
            return Err(Error::Config(format!("task {name:?} listed twice")));
        }
        out.push(task);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loading and overrides
// ---------------------------------------------------------------------------

/// CLI/environment overrides applied on top of the config file
/// (command line beats environment beats file).
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

impl Overrides {
    /// Read the `KMT_*` environment, then layer explicit CLI values on top.
    pub fn from_env_and_cli(
        cli_out: Option<PathBuf>,
        cli_seed: Option<u64>,
        cli_deterministic: bool,
    ) -> Result<Overrides> {
        let mut o = Overrides::default();
        if let Ok(v) = std::env::var("KMT_OUT") {
            o.out_dir = Some(PathBuf::from(v));
        }
        if let Ok(v) = std::env::var("KMT_SEED") {
            o.seed = Some(v.parse().map_err(|_| {
                Error::Config(format!("KMT_SEED must be an unsigned integer, got {v:?}"))
            })?);
        }
        if let Ok(v) = std::env::var("KMT_DETERMINISTIC") {
            o.deterministic = matches!(v.as_str(), "1" | "true" | "yes");
        }
        if cli_out.is_some() {
            o.out_dir = cli_out;
        }
        if cli_seed.is_some() {
            o.seed = cli_seed;
        }
        if cli_deterministic {
            o.deterministic = true;
        }
        Ok(o)
    }
}

impl ExperimentConfig {
    /// Load from a TOML or JSON file (decided by extension) and apply
    /// overrides.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let mut cfg: ExperimentConfig = match ext {
            "json" => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            "toml" => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            other => {
                return Err(Error::Config(format!(
                    "config {} has unsupported extension {other:?} (use .toml or .json)",
                    path.display()
                )))
            }
        };
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.n_persons == 0 {
            return Err(Error::Config("corpus.n_persons must be positive".into()));
        }
        parse_augmentation(&self.corpus.augmentation)?;
        self.model.validate()?;
        resolve_tasks(&self.tasks.tasks)?;
        if !(0.0..=1.0).contains(&self.tasks.hint_probability) {
            return Err(Error::Config(format!(
                "tasks.hint_probability {} outside [0, 1]",
                self.tasks.hint_probability
            )));
        }
        if self.tasks.pair_count == 0 {
            return Err(Error::Config("tasks.pair_count must be positive".into()));
        }
        match self.train.finetune.base.as_str() {
            "pretrain" | "mixed" => {}
            other => {
                return Err(Error::Config(format!(
                    "train.finetune.base must be \"pretrain\" or \"mixed\", got {other:?}"
                )))
            }
        }
        resolve_tasks(&self.train.finetune.tasks)?;
        match self.eval.split.as_str() {
            "test" | "train" => {}
            other => {
                return Err(Error::Config(format!(
                    "eval.split must be \"test\" or \"train\", got {other:?}"
                )))
            }
        }
        if self.eval.beam_width == 0 || self.eval.max_new_tokens == 0 || self.eval.cap == 0 {
            return Err(Error::Config(
                "eval.beam_width, eval.max_new_tokens, and eval.cap must be positive".into(),
            ));
        }
        if let Some(sweep) = &self.sweep {
            match sweep.pipeline.as_str() {
                "mixed" | "pretrain_finetune" => {}
                other => {
                    return Err(Error::Config(format!(
                        "sweep.pipeline must be \"mixed\" or \"pretrain_finetune\", got {other:?}"
                    )))
                }
            }
            for label in &sweep.augmentations {
                parse_augmentation(label)?;
            }
            for &r in &sweep.qa_ratios {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::Config(format!("sweep qa_ratio {r} outside [0, 1]")));
                }
            }
            for &s in &sweep.train_set_sizes {
                if s == 0 {
                    return Err(Error::Config("sweep train_set_size 0 is invalid".into()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augmentation_labels_roundtrip() {
        for label in [
            "single",
            "multi5",
            "multi5+permute",
            "multi5+fullname",
            "multi5+permute+reverse6",
            "multi2+permute+reverse1",
            "single+reverse2",
        ] {
            let spec = parse_augmentation(label).unwrap();
            assert_eq!(spec.label(), label);
        }
        assert!(parse_augmentation("multi0").is_err());
        assert!(parse_augmentation("mega5").is_err());
        assert!(parse_augmentation("multi5+sideways").is_err());
        // fullname and reverse are mutually exclusive.
        assert!(parse_augmentation("multi5+fullname+reverse6").is_err());
        // Non-canonical order is rejected with the canonical form suggested.
        assert!(parse_augmentation("multi5+reverse6+permute").is_err());
    }

    #[test]
    fn task_name_resolution() {
        assert_eq!(resolve_tasks(&[]).unwrap().len(), 36);
        let names = vec!["extract.bdate".to_string(), "rank.major".to_string()];
        let tasks = resolve_tasks(&names).unwrap();
        assert_eq!(tasks.len(), 2);
        assert!(resolve_tasks(&["extract.hairstyle".to_string()]).is_err());
        let dup = vec!["rank.major".to_string(), "rank.major".to_string()];
        assert!(resolve_tasks(&dup).is_err());
    }

    fn minimal_toml() -> String {
        r#"
            seed = 7
            out_dir = "/tmp/kmt-test-run"

            [corpus]
            n_persons = 50
            augmentation = "multi5+permute"

            [model]
            n_layers = 2
            n_heads = 4
            d_model = 64
            d_ff = 256
            vocab_size = 1000
            context_window = 128
        "#
        .to_string()
    }

    #[test]
    fn toml_and_json_configs_load_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("cfg.toml");
        std::fs::write(&toml_path, minimal_toml()).unwrap();
        let cfg = ExperimentConfig::load(&toml_path, &Overrides::default()).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.corpus.n_persons, 50);
        assert_eq!(cfg.eval.beam_width, 4);
        assert_eq!(cfg.eval.cap, 2000);
        assert_eq!(cfg.tasks.pair_count, 2000);
        assert_eq!(cfg.train.finetune.attn_rank, 8);
        assert_eq!(cfg.train.finetune.embed_rank, 128);
        assert_eq!(cfg.train.finetune.alpha, 4.0);

        // The same config as JSON parses identically.
        let json_path = dir.path().join("cfg.json");
        std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let cfg2 = ExperimentConfig::load(&json_path, &Overrides::default()).unwrap();
        assert_eq!(serde_json::to_value(&cfg).unwrap(), serde_json::to_value(&cfg2).unwrap());

        // Unknown fields are rejected, with the file named.
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, format!("{}\nunknown_key = 3\n", minimal_toml())).unwrap();
        let err = ExperimentConfig::load(&bad, &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("bad.toml"), "{err}");

        // Unsupported extension.
        let yml = dir.path().join("cfg.yml");
        std::fs::write(&yml, "x: 1").unwrap();
        assert!(ExperimentConfig::load(&yml, &Overrides::default()).is_err());
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, minimal_toml()).unwrap();
        let overrides = Overrides {
            out_dir: Some(PathBuf::from("/tmp/elsewhere")),
            seed: Some(99),
            deterministic: true,
        };
        let cfg = ExperimentConfig::load(&path, &overrides).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/elsewhere"));
    }

    #[test]
    fn validation_catches_bad_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        let mut text = minimal_toml();
        text.push_str("\n[tasks]\nhint_probability = 1.5\n");
        std::fs::write(&path, text).unwrap();
        let err = ExperimentConfig::load(&path, &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("hint_probability"), "{err}");

        let mut text = minimal_toml();
        text.push_str("\n[train.finetune]\nbase = \"scratch\"\n");
        std::fs::write(&path, text).unwrap();
        let err = ExperimentConfig::load(&path, &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("finetune.base"), "{err}");

        let mut text = minimal_toml();
        text.push_str("\n[sweep]\npipeline = \"cluster\"\n");
        std::fs::write(&path, text).unwrap();
        assert!(ExperimentConfig::load(&path, &Overrides::default()).is_err());
    }
}
