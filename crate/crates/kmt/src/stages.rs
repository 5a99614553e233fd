//! Pipeline stages: corpus generation, task emission, the three training
//! regimes, evaluation, and report consolidation. Each stage validates its
//! upstream artifacts against the run manifest, writes its outputs under the
//! run directory, and appends a manifest record with hashes and timing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

use kmt_core::corpus::{
    generate_documents, sample_persons, AttributePools, PersonRecord, TemplateSet,
};
use kmt_core::error::{Error, Result};
use kmt_core::eval::{DecodeSettings, EvalReport, ModelDecoder};
use kmt_core::model::{
    load_adapter, load_checkpoint, save_adapter, save_checkpoint, LoraConfig, ModelConfig,
};
use kmt_core::tasks::{split_persons, QaExample, Split, TaskSpec};
use kmt_core::tokenizer::Vocab;
use kmt_core::train::{
    pack_items, shuffle_items, write_curve_csv, BaseModel, PackItem, PackedSequence, SourceKind,
    TrainConfig, Trainer,
};

use crate::config::{parse_augmentation, resolve_tasks, ExperimentConfig};
use crate::manifest::{now_unix, record_for, ArtifactRecord, LockGuard, RunManifest};

pub const PERSONS_FILE: &str = "persons.jsonl";
pub const BIO_FILE: &str = "bio.txt";
pub const TASKS_TRAIN_FILE: &str = "tasks_train.jsonl";
pub const TASKS_TEST_FILE: &str = "tasks_test.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

// ---------------------------------------------------------------------------
// JSONL helpers
// ---------------------------------------------------------------------------

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::DataFile(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Run context
// ---------------------------------------------------------------------------

/// Exclusive handle on one run directory: config, manifest, and lock.
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub deterministic: bool,
    manifest: RunManifest,
    _lock: LockGuard,
}

impl RunContext {
    pub fn open(cfg: ExperimentConfig, deterministic: bool) -> Result<RunContext> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out_dir)?;
        let lock = LockGuard::acquire(&cfg.out_dir)?;
        let manifest = RunManifest::load_or_new(&cfg.out_dir, &cfg)?;
        Ok(RunContext { cfg, deterministic, manifest, _lock: lock })
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub(crate) fn record_stage(
        &mut self,
        stage: &str,
        started: Instant,
        started_unix: u64,
        inputs: Vec<ArtifactRecord>,
        outputs: Vec<ArtifactRecord>,
    ) -> Result<()> {
        self.manifest.stages.push(crate::manifest::StageRecord {
            stage: stage.to_string(),
            started_unix,
            wall_secs: started.elapsed().as_secs_f64(),
            seed: self.cfg.seed,
            deterministic: self.deterministic,
            inputs,
            outputs,
        });
        self.manifest.save(&self.cfg.out_dir)
    }

    fn load_pools(&self) -> Result<(AttributePools, ArtifactRecord)> {
        match &self.cfg.corpus.pools_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read pools file {}: {e}", path.display()))
                })?;
                let pools = AttributePools::from_json_str(&text)?;
                Ok((
                    pools,
                    ArtifactRecord {
                        path: path.display().to_string(),
                        sha256: kmt_core::sha256_hex(text.as_bytes()),
                    },
                ))
            }
            None => {
                let pools = AttributePools::builtin();
                let hash = pools.content_hash();
                Ok((pools, ArtifactRecord { path: "builtin:pools.json".into(), sha256: hash }))
            }
        }
    }

    fn load_templates(&self) -> Result<(TemplateSet, ArtifactRecord)> {
        match &self.cfg.corpus.templates_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read templates file {}: {e}", path.display()))
                })?;
                let templates = TemplateSet::from_json_str(&text)?;
                Ok((
                    templates,
                    ArtifactRecord {
                        path: path.display().to_string(),
                        sha256: kmt_core::sha256_hex(text.as_bytes()),
                    },
                ))
            }
            None => {
                let templates = TemplateSet::builtin();
                let hash = templates.content_hash();
                Ok((
                    templates,
                    ArtifactRecord { path: "builtin:templates.json".into(), sha256: hash },
                ))
            }
        }
    }

    fn load_vocab(&self) -> Result<Vocab> {
        let text = std::fs::read_to_string(self.out_dir().join(VOCAB_FILE))?;
        Vocab::from_json_str(&text)
    }

    // -----------------------------------------------------------------------
    // gen-corpus
    // -----------------------------------------------------------------------

    /// Sample the person population and render every biography entry.
    pub fn gen_corpus(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let started = now_unix();
        let (pools, pools_rec) = self.load_pools()?;
        let (templates, templates_rec) = self.load_templates()?;
        let spec = parse_augmentation(&self.cfg.corpus.augmentation)?;
        let n = self.cfg.corpus.n_persons;
        let seed = self.cfg.seed;

        let persons = sample_persons(&pools, n, seed)?;
        let mut bio = String::new();
        let mut doc_count = 0usize;
        for doc in generate_documents(&persons, &templates, &spec, seed) {
            bio.push_str(&doc?.text);
            bio.push('\n');
            doc_count += 1;
        }
        write_jsonl(&self.out_dir().join(PERSONS_FILE), &persons)?;
        std::fs::write(self.out_dir().join(BIO_FILE), &bio)?;

        eprintln!(
            "gen-corpus: {n} persons, {doc_count} biography entries ({}), {} KiB of text",
            spec.label(),
            bio.len() / 1024
        );
        let outputs = vec![
            record_for(self.out_dir(), PERSONS_FILE)?,
            record_for(self.out_dir(), BIO_FILE)?,
        ];
        self.record_stage("gen-corpus", t0, started, vec![pools_rec, templates_rec], outputs)
    }

    // -----------------------------------------------------------------------
    // gen-tasks
    // -----------------------------------------------------------------------

    /// Emit QA examples for the configured task grid on both split sides and
    /// build the closed vocabulary over all biography and task text.
    pub fn gen_tasks(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let started = now_unix();
        let mut inputs = vec![
            self.manifest.verify_input(self.out_dir(), PERSONS_FILE)?,
            self.manifest.verify_input(self.out_dir(), BIO_FILE)?,
        ];
        let (pools, pools_rec) = self.load_pools()?;
        inputs.push(pools_rec);

        let persons: Vec<PersonRecord> = read_jsonl(&self.out_dir().join(PERSONS_FILE))?;
        let split = split_persons(persons.len() as u32, self.cfg.seed);
        let tasks = resolve_tasks(&self.cfg.tasks.tasks)?;

        let mut train_examples: Vec<QaExample> = Vec::new();
        let mut test_examples: Vec<QaExample> = Vec::new();
        for &task in &tasks {
            let hint_p = if task.supports_hint() {
                self.cfg.tasks.hint_probability
            } else {
                0.0
            };
            for (side, cap, sink) in [
                (Split::Train, self.cfg.tasks.train_per_task, &mut train_examples),
                (Split::Test, self.cfg.tasks.test_per_task, &mut test_examples),
            ] {
                let ids = split.side(side);
                let count = if task.arity() == 2 {
                    Some(cap.unwrap_or(self.cfg.tasks.pair_count))
                } else {
                    cap.map(|c| c.min(ids.len()))
                };
                sink.extend(kmt_core::tasks::generate_examples(
                    task,
                    &persons,
                    &pools,
                    ids,
                    side,
                    hint_p,
                    count,
                    self.cfg.seed,
                )?);
            }
        }
        write_jsonl(&self.out_dir().join(TASKS_TRAIN_FILE), &train_examples)?;
        write_jsonl(&self.out_dir().join(TASKS_TEST_FILE), &test_examples)?;

        // Closed vocabulary: biography lines first, then task text from both
        // sides (questions, hints, answers), so the model can emit any
        // answer surface that scoring may expect.
        let bio_text = std::fs::read_to_string(self.out_dir().join(BIO_FILE))?;
        let mut task_lines: Vec<String> = Vec::new();
        for ex in train_examples.iter().chain(&test_examples) {
            task_lines.push(ex.question.clone());
            task_lines.push(ex.target_text());
        }
        let vocab = Vocab::build(
            bio_text.lines(),
            task_lines.iter().map(|s| s.as_str()),
            self.cfg.tokenizer,
        );
        std::fs::write(self.out_dir().join(VOCAB_FILE), vocab.to_json())?;

        eprintln!(
            "gen-tasks: {} tasks, {} train + {} test examples, vocabulary of {} tokens",
            tasks.len(),
            train_examples.len(),
            test_examples.len(),
            vocab.len()
        );
        let outputs = vec![
            record_for(self.out_dir(), TASKS_TRAIN_FILE)?,
            record_for(self.out_dir(), TASKS_TEST_FILE)?,
            record_for(self.out_dir(), VOCAB_FILE)?,
        ];
        self.record_stage("gen-tasks", t0, started, inputs, outputs)
    }

    // -----------------------------------------------------------------------
    // Training stages
    // -----------------------------------------------------------------------

    /// The model config actually trained: the configured shape with the
    /// vocabulary size pinned to the built vocabulary.
    fn effective_model_config(&self, vocab: &Vocab) -> ModelConfig {
        let mut mc = self.cfg.model;
        if mc.vocab_size != vocab.len() {
            eprintln!(
                "note: model.vocab_size {} replaced by built vocabulary size {}",
                mc.vocab_size,
                vocab.len()
            );
            mc.vocab_size = vocab.len();
        }
        mc
    }

    fn packed_bio(&self, vocab: &Vocab, window: usize) -> Result<Vec<PackedSequence>> {
        let bio_text = std::fs::read_to_string(self.out_dir().join(BIO_FILE))?;
        let mut items: Vec<PackItem> = bio_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| PackItem::from_text(l, vocab))
            .collect::<Result<_>>()?;
        shuffle_items(&mut items, self.cfg.seed, 0);
        pack_items(&items, SourceKind::Bio, window).map_err(grow_window_hint)
    }

    fn packed_qa(
        &self,
        vocab: &Vocab,
        window: usize,
        only_tasks: Option<&[TaskSpec]>,
        answer_only: bool,
    ) -> Result<(Vec<PackedSequence>, usize)> {
        let examples: Vec<QaExample> = read_jsonl(&self.out_dir().join(TASKS_TRAIN_FILE))?;
        let filtered: Vec<&QaExample> = match only_tasks {
            Some(tasks) => examples.iter().filter(|e| tasks.contains(&e.task)).collect(),
            None => examples.iter().collect(),
        };
        if filtered.is_empty() {
            return Err(Error::Config(
                "no training QA examples match the requested tasks; check tasks.tasks \
                 and train.finetune.tasks"
                    .into(),
            ));
        }
        let mut items: Vec<PackItem> = filtered
            .iter()
            .map(|e| PackItem::from_example(e, vocab, answer_only))
            .collect::<Result<_>>()?;
        shuffle_items(&mut items, self.cfg.seed, 1);
        let n = items.len();
        let packed = pack_items(&items, SourceKind::Qa, window).map_err(grow_window_hint)?;
        Ok((packed, n))
    }

    /// Pretrain on biography text alone.
    pub fn pretrain(&mut self) -> Result<()> {
        self.dense_training("pretrain")
    }

    /// Mixed biography + QA training from scratch.
    pub fn mixed_train(&mut self) -> Result<()> {
        self.dense_training("mixed")
    }

    fn dense_training(&mut self, which: &str) -> Result<()> {
        let t0 = Instant::now();
        let started = now_unix();
        let mut inputs = vec![
            self.manifest.verify_input(self.out_dir(), BIO_FILE)?,
            self.manifest.verify_input(self.out_dir(), VOCAB_FILE)?,
        ];
        let vocab = self.load_vocab()?;
        let model_config = self.effective_model_config(&vocab);
        let bio = self.packed_bio(&vocab, model_config.context_window)?;

        let (qa, train_cfg) = if which == "mixed" {
            inputs.push(self.manifest.verify_input(self.out_dir(), TASKS_TRAIN_FILE)?);
            let overrides = &self.cfg.train.mixed;
            let answer_only = overrides.answer_only_loss.unwrap_or(false);
            let (qa, n_examples) =
                self.packed_qa(&vocab, model_config.context_window, None, answer_only)?;
            eprintln!("mixed: {} QA examples in {} packed sequences", n_examples, qa.len());
            let base = TrainConfig::mixed(overrides.qa_ratio.unwrap_or(0.8));
            (qa, overrides.apply(base))
        } else {
            (Vec::new(), self.cfg.train.pretrain.apply(TrainConfig::pretrain()))
        };
        let mut train_cfg = train_cfg;
        train_cfg.seed = self.cfg.seed;

        let vocab_hash = vocab.content_hash();
        let mut trainer =
            Trainer::new(model_config, &vocab_hash, None, bio, qa, train_cfg)?;
        run_with_progress(&mut trainer, which)?;

        let stage_dir = self.out_dir().join(which);
        std::fs::create_dir_all(&stage_dir)?;
        save_checkpoint(
            &stage_dir.join("model.ckpt"),
            trainer.params(),
            &vocab_hash,
            trainer.steps_done(),
        )?;
        write_curve_csv(&stage_dir.join("curve.csv"), trainer.curve())?;

        let outputs = vec![
            record_for(self.out_dir(), &format!("{which}/model.ckpt"))?,
            record_for(self.out_dir(), &format!("{which}/curve.csv"))?,
        ];
        self.record_stage(which, t0, started, inputs, outputs)
    }

    /// LoRA finetuning on QA examples over a frozen base checkpoint.
    pub fn finetune(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let started = now_unix();
        let base_rel = format!("{}/model.ckpt", self.cfg.train.finetune.base);
        let mut inputs = vec![
            self.manifest.verify_input(self.out_dir(), &base_rel)?,
            self.manifest.verify_input(self.out_dir(), VOCAB_FILE)?,
            self.manifest.verify_input(self.out_dir(), TASKS_TRAIN_FILE)?,
        ];
        let (params, meta) = load_checkpoint(&self.out_dir().join(&base_rel))?;
        let vocab = self.load_vocab()?;
        let vocab_hash = vocab.content_hash();
        if meta.vocab_hash != vocab_hash {
            return Err(Error::Checkpoint(format!(
                "base checkpoint {base_rel} was trained under vocabulary {} but {} has {}; \
                 regenerate the checkpoint or the tasks",
                &meta.vocab_hash[..12],
                VOCAB_FILE,
                &vocab_hash[..12]
            )));
        }

        let ft = &self.cfg.train.finetune;
        let only: Option<Vec<TaskSpec>> = if ft.tasks.is_empty() {
            None
        } else {
            Some(resolve_tasks(&ft.tasks)?)
        };
        let answer_only = ft.overrides.answer_only_loss.unwrap_or(false);
        let (qa, n_examples) = self.packed_qa(
            &vocab,
            meta.config.context_window,
            only.as_deref(),
            answer_only,
        )?;
        eprintln!("finetune: {} QA examples in {} packed sequences", n_examples, qa.len());

        let lora = LoraConfig {
            attn_rank: ft.attn_rank,
            embed_rank: ft.embed_rank,
            alpha: ft.alpha,
        };
        let mut train_cfg = ft.overrides.apply(TrainConfig::lora_finetune(ft.lr0, lora));
        train_cfg.seed = self.cfg.seed;
        let base_hash = params.content_hash();
        let base = BaseModel { params, vocab_hash: meta.vocab_hash.clone() };
        let mut trainer =
            Trainer::new(meta.config, &vocab_hash, Some(base), Vec::new(), qa, train_cfg)?;
        run_with_progress(&mut trainer, "finetune")?;

        let stage_dir = self.out_dir().join("finetune");
        std::fs::create_dir_all(&stage_dir)?;
        let adapter = trainer.adapter().expect("finetune trainer has an adapter");
        save_adapter(
            &stage_dir.join("adapter.ckpt"),
            adapter,
            &vocab_hash,
            &base_hash,
            trainer.steps_done(),
        )?;
        write_curve_csv(&stage_dir.join("curve.csv"), trainer.curve())?;

        inputs.push(ArtifactRecord { path: format!("base:{base_rel}"), sha256: base_hash });
        let outputs = vec![
            record_for(self.out_dir(), "finetune/adapter.ckpt")?,
            record_for(self.out_dir(), "finetune/curve.csv")?,
        ];
        self.record_stage("finetune", t0, started, inputs, outputs)
    }

    // -----------------------------------------------------------------------
    // evaluate
    // -----------------------------------------------------------------------

    /// Pick the most advanced trained stage present in this run.
    pub fn default_eval_stage(&self) -> Result<String> {
        for (stage, artifact) in [
            ("finetune", "finetune/adapter.ckpt"),
            ("mixed", "mixed/model.ckpt"),
            ("pretrain", "pretrain/model.ckpt"),
        ] {
            if self.manifest.latest_output(artifact).is_some() {
                return Ok(stage.to_string());
            }
        }
        Err(Error::Config(
            "nothing to evaluate: run pretrain, mixed-train, or finetune first".into(),
        ))
    }

    /// Decode and score the configured example split against a trained
    /// stage ("pretrain", "mixed", or "finetune").
    pub fn evaluate(&mut self, stage: Option<&str>) -> Result<PathBuf> {
        let t0 = Instant::now();
        let started = now_unix();
        let stage = match stage {
            Some(s) => s.to_string(),
            None => self.default_eval_stage()?,
        };
        let tasks_rel = match self.cfg.eval.split.as_str() {
            "train" => TASKS_TRAIN_FILE,
            _ => TASKS_TEST_FILE,
        };
        let mut inputs = vec![
            self.manifest.verify_input(self.out_dir(), PERSONS_FILE)?,
            self.manifest.verify_input(self.out_dir(), tasks_rel)?,
            self.manifest.verify_input(self.out_dir(), VOCAB_FILE)?,
        ];
        let vocab = self.load_vocab()?;
        let vocab_hash = vocab.content_hash();

        // Load weights; for finetune, the adapter plus its exact base.
        let (params, adapter, ckpt_vocab_hash) = match stage.as_str() {
            "pretrain" | "mixed" => {
                let rel = format!("{stage}/model.ckpt");
                inputs.push(self.manifest.verify_input(self.out_dir(), &rel)?);
                let (params, meta) = load_checkpoint(&self.out_dir().join(&rel))?;
                (params, None, meta.vocab_hash)
            }
            "finetune" => {
                let rel = "finetune/adapter.ckpt".to_string();
                inputs.push(self.manifest.verify_input(self.out_dir(), &rel)?);
                let (adapter, meta) = load_adapter(&self.out_dir().join(&rel))?;
                let base_rel = format!("{}/model.ckpt", self.cfg.train.finetune.base);
                inputs.push(self.manifest.verify_input(self.out_dir(), &base_rel)?);
                let (params, base_meta) = load_checkpoint(&self.out_dir().join(&base_rel))?;
                let live_base_hash = params.content_hash();
                if meta.base_hash.as_deref() != Some(live_base_hash.as_str()) {
                    return Err(Error::Checkpoint(format!(
                        "adapter {rel} was trained against a different base than {base_rel}; \
                         re-run finetune"
                    )));
                }
                if base_meta.vocab_hash != meta.vocab_hash {
                    return Err(Error::Checkpoint(
                        "adapter and base checkpoint disagree on the vocabulary".into(),
                    ));
                }
                (params, Some(adapter), meta.vocab_hash)
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown evaluation stage {other:?} (expected pretrain, mixed, or finetune)"
                )))
            }
        };
        if ckpt_vocab_hash != vocab_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained under vocabulary {} but {} has {}; \
                 refusing to decode with mismatched token ids",
                &ckpt_vocab_hash[..12],
                VOCAB_FILE,
                &vocab_hash[..12]
            )));
        }

        let persons: Vec<PersonRecord> = read_jsonl(&self.out_dir().join(PERSONS_FILE))?;
        let examples: Vec<QaExample> = read_jsonl(&self.out_dir().join(tasks_rel))?;
        let (pools, pools_rec) = self.load_pools()?;
        inputs.push(pools_rec);

        let settings = DecodeSettings {
            beam_width: self.cfg.eval.beam_width,
            max_new_tokens: self.cfg.eval.max_new_tokens,
            mode: self.cfg.eval.mode,
        };
        let mut decoder = ModelDecoder {
            params: &params,
            adapter: adapter.as_ref(),
            beam_width: settings.beam_width,
            max_new_tokens: settings.max_new_tokens,
        };
        let report = kmt_core::eval::evaluate(
            &mut decoder,
            &vocab,
            &examples,
            &persons,
            &pools,
            self.cfg.eval.mode,
            settings,
            Some(self.cfg.eval.cap),
            self.cfg.seed,
        )?;

        let eval_dir_rel = format!("eval-{stage}");
        let eval_dir = self.out_dir().join(&eval_dir_rel);
        std::fs::create_dir_all(&eval_dir)?;
        let report_path = eval_dir.join("report.json");
        report.write_json(&report_path)?;
        report.write_csv(&eval_dir.join("report.csv"))?;

        for t in &report.tasks {
            eprintln!(
                "evaluate[{stage}]: {} n={} acc={:.3} baseline={:.3}",
                t.task.name(),
                t.n_examples,
                t.test_acc,
                t.baseline
            );
        }
        let outputs = vec![
            record_for(self.out_dir(), &format!("{eval_dir_rel}/report.json"))?,
            record_for(self.out_dir(), &format!("{eval_dir_rel}/report.csv"))?,
        ];
        self.record_stage("evaluate", t0, started, inputs, outputs)?;
        Ok(report_path)
    }

    // -----------------------------------------------------------------------
    // report
    // -----------------------------------------------------------------------

    /// Consolidate every evaluation report under the run directory into
    /// summary.csv, and re-render sweep tables/charts for any sweep outputs
    /// present.
    pub fn report(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let started = now_unix();
        let mut rows = String::from(
            "run,task,n,test_acc,acc_with_hint,acc_without_hint,hint_acc,baseline,\
             consistency_prediction\n",
        );
        let mut found = Vec::new();
        collect_reports(self.out_dir(), self.out_dir(), &mut found)?;
        found.sort_by(|a, b| a.0.cmp(&b.0));
        let n_reports = found.len();
        for (label, report) in &found {
            for t in &report.tasks {
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                rows.push_str(&format!(
                    "{label},{},{},{},{},{},{},{},{}\n",
                    t.task.name(),
                    t.n_examples,
                    t.test_acc,
                    opt(t.test_acc_with_hint),
                    opt(t.test_acc_without_hint),
                    opt(t.hint_acc),
                    t.baseline,
                    opt(t.consistency_prediction),
                ));
            }
        }
        std::fs::write(self.out_dir().join("summary.csv"), rows)?;
        let mut outputs = vec![record_for(self.out_dir(), "summary.csv")?];

        // Sweep outputs: re-render consolidated CSV and charts from cells.
        let sweep_dirs: Vec<PathBuf> = std::fs::read_dir(self.out_dir())?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("sweep-"))
                    && p.join(crate::sweep::CELLS_FILE).exists()
            })
            .collect();
        for dir in sweep_dirs {
            let rendered = crate::sweep::render_sweep_outputs(&dir)?;
            for rel in rendered {
                let full = dir.join(&rel);
                let rel_to_out = full
                    .strip_prefix(self.out_dir())
                    .unwrap_or(&full)
                    .to_string_lossy()
                    .to_string();
                outputs.push(record_for(self.out_dir(), &rel_to_out)?);
            }
        }
        eprintln!(
            "report: consolidated {} evaluation report(s) into summary.csv",
            n_reports
        );
        self.record_stage("report", t0, started, vec![], outputs)
    }
}

/// Recursively gather eval-*/report.json files (a few levels deep is enough
/// for sweep cells).
fn collect_reports(
    root: &Path,
    dir: &Path,
    out: &mut Vec<(String, EvalReport)>,
) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("eval-") {
            let report_path = path.join("report.json");
            if report_path.exists() {
                let report: EvalReport =
                    serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
                let label = path
                    .strip_prefix(root)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .replace(',', ";");
                out.push((label, report));
            }
        } else {
            collect_reports(root, &path, out)?;
        }
    }
    Ok(())
}

fn grow_window_hint(e: Error) -> Error {
    match e {
        Error::Train(msg) => {
            Error::Config(format!("{msg}; increase model.context_window"))
        }
        other => other,
    }
}

/// Drive a trainer to completion with coarse progress lines on stderr.
pub fn run_with_progress(trainer: &mut Trainer, label: &str) -> Result<()> {
    let total = trainer.config().total_steps;
    let tick = (total / 20).max(1);
    let start = Instant::now();
    while trainer.steps_done() < total {
        let point = trainer.step_once()?;
        if point.step % tick == 0 || point.step == total {
            let elapsed = start.elapsed().as_secs_f64();
            let rate = point.step as f64 / elapsed.max(1e-9);
            let eta = (total - point.step) as f64 / rate.max(1e-9);
            eprintln!(
                "{label}: step {}/{} loss {:.4} lr {:.2e} [{elapsed:.0}s elapsed, {eta:.0}s left]",
                point.step, total, point.loss, point.lr
            );
        }
    }
    // Runs the trainer's end-of-run integrity checks (no steps remain).
    trainer.run_to_end()
}
