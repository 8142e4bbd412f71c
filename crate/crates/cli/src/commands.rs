use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use celljepa::corpus::{load_matrix, save_matrix, synthesize_corpus, CellMatrix, SynthSpec};
use celljepa::encoder::{EncoderConfig, Vocab};
use celljepa::experiment::{evaluate_perturbations, perturbation_run, zero_shot};
use celljepa::metrics::{
    cluster_report, encode_labels, read_embedding_tsv, write_embedding_tsv, DeOptions, EmbeddingTable, MetricsReport,
};
use celljepa::trainer::{
    embed_cells, finetune, load_checkpoint, pretrain, save_checkpoint, split_perturbations, split_train_validation,
    train_perturbation, Checkpoint, EpochLog, Mode, PerturbationData, TrainConfig, TrainError, TrainState, SPLIT_SEED,
};

use crate::config::{Flat, Overrides};
use crate::error::CliError;
use crate::output::{
    require_dir, require_file, sidecar, write, write_config, write_json, JsonLines, Outputs, CONFIG_ECHO, LOG_FILE,
    TIMING_FILE,
};

/// Options shared by every command.
#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Flat JSON config with dotted keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random choice of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
}

impl Common {
    /// Gather overrides; a stochastic command needs a seed from `--seed`,
    /// the config file or `--set seed=..`.
    fn overrides(&self, stochastic: bool) -> Result<Overrides, CliError> {
        let mut ov = Overrides::load(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            ov.insert("seed", json!(seed));
        }
        if stochastic && !ov.contains("seed") {
            return Err(CliError::Usage("this command is stochastic; pass --seed".into()));
        }
        Ok(ov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    All,
    HeldOut,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedOptions {
    /// Seeds the gene subsampling of cells longer than `l_max`.
    pub seed: u64,
    pub batch_size: usize,
    pub cells: Subset,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            cells: Subset::All,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterOptions {
    pub seed: u64,
    pub k: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self { seed: 0, k: 15 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbEvalOptions {
    pub batch_size: usize,
    pub perturbations: Subset,
    pub de: DeOptions,
}

impl Default for PerturbEvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            perturbations: Subset::HeldOut,
            de: DeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareOptions {
    /// Shared by both arms; overrides `pretrain.seed` and `perturb.seed`.
    pub seed: u64,
    pub k: usize,
    pub de: DeOptions,
    /// Used on corpora without perturbation labels; `mode` is set per arm.
    pub pretrain: TrainConfig,
    /// Used on perturbation corpora; `mode` is set per arm.
    pub perturb: TrainConfig,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 15,
            de: DeOptions::default(),
            pretrain: TrainConfig::pretrain(),
            perturb: TrainConfig::perturbation(),
        }
    }
}

fn load_corpus(dir: &Path) -> Result<CellMatrix, CliError> {
    require_dir(dir)?;
    Ok(load_matrix(dir)?)
}

fn load_model(dir: &Path) -> Result<Checkpoint<f32>, CliError> {
    require_dir(dir)?;
    Ok(load_checkpoint(dir)?)
}

/// Tokens of the corpus genes under a model vocabulary.
fn tokens_for(genes: &[String], corpus: &CellMatrix) -> Result<Vec<u32>, CliError> {
    Vocab::new(genes)
        .resolve(corpus.gene_names())
        .map_err(|e| CliError::Data(format!("corpus does not fit the model vocabulary: {e}")))
}

/// Training on top of a checkpoint keeps its architecture; only dropout
/// may change.
fn check_architecture(cfg: &TrainConfig, ckpt: &EncoderConfig) -> Result<(), CliError> {
    let same = EncoderConfig {
        dropout: ckpt.dropout,
        ..cfg.encoder.clone()
    };
    if &same != ckpt {
        return Err(CliError::Usage("encoder settings other than dropout must match the checkpoint".into()));
    }
    Ok(())
}

/// Epoch hook writing `log.jsonl` and the wall-clock `timing.jsonl`.
struct EpochWriter {
    log: JsonLines,
    timing: JsonLines,
    start: Instant,
}

impl EpochWriter {
    fn create(dir: &Path) -> Result<Self, CliError> {
        Ok(Self {
            log: JsonLines::create(&dir.join(LOG_FILE))?,
            timing: JsonLines::create(&dir.join(TIMING_FILE))?,
            start: Instant::now(),
        })
    }

    fn record(&mut self, log: &EpochLog) -> Result<(), TrainError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TrainError::Io { path, source }
        };
        self.log.push(log).map_err(io(self.log.path()))?;
        let t = json!({ "epoch": log.epoch, "elapsed_s": self.start.elapsed().as_secs_f64() });
        self.timing.push(&t).map_err(io(self.timing.path()))
    }
}

fn summary(value: Value) {
    println!("{value}");
}

pub fn synth(common: &Common, out: &Path) -> Result<(), CliError> {
    let (spec, flat) = common.overrides(true)?.resolve(&SynthSpec::default())?;
    let corpus = synthesize_corpus(&spec)?;
    let mut outputs = Outputs::new(common.force);
    outputs.dir(out)?;
    save_matrix(&corpus, out)?;
    write_config(&out.join(CONFIG_ECHO), &flat)?;
    outputs.commit();
    summary(json!({ "cells": corpus.n_cells(), "genes": corpus.n_genes(), "entries": corpus.n_entries() }));
    Ok(())
}

fn save_run(out: &Path, state: &TrainState<f32>, cfg: &TrainConfig, genes: &[String], panel: Option<Vec<String>>) -> Result<(), CliError> {
    save_checkpoint(out, &Checkpoint::from_state(state, cfg, genes, panel))?;
    Ok(())
}

pub fn pretrain_cmd(common: &Common, data: &Path, out: &Path) -> Result<(), CliError> {
    let (cfg, flat) = common.overrides(true)?.resolve(&TrainConfig::pretrain())?;
    cfg.validate()?;
    let corpus = load_corpus(data)?;
    let tokens = tokens_for(corpus.gene_names(), &corpus)?;
    let (train, _) = split_train_validation(corpus.n_cells(), cfg.holdout_fraction, SPLIT_SEED);
    let mut state = TrainState::<f32>::init(&cfg, corpus.n_genes() + 2)?;

    let mut outputs = Outputs::new(common.force);
    outputs.dir(out)?;
    write_config(&out.join(CONFIG_ECHO), &flat)?;
    let mut w = EpochWriter::create(out)?;
    let logs = pretrain(&corpus, &tokens, &train, &cfg, &mut state, &mut |l, _| w.record(l))?;
    save_run(out, &state, &cfg, corpus.gene_names(), None)?;
    outputs.commit();
    summary(json!({ "mode": cfg.mode.as_str(), "cells": train.len(), "epochs": logs.len(), "final_loss": logs.last().map(|l| l.loss) }));
    Ok(())
}

pub fn finetune_cmd(common: &Common, data: &Path, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = load_model(checkpoint)?;
    let base = TrainConfig {
        encoder: ckpt.manifest.config.encoder.clone(),
        mode: ckpt.manifest.mode,
        ..TrainConfig::finetune()
    };
    let (cfg, flat) = common.overrides(true)?.resolve(&base)?;
    cfg.validate()?;
    check_architecture(&cfg, &ckpt.manifest.config.encoder)?;
    let corpus = load_corpus(data)?;
    let genes = ckpt.manifest.genes.clone();
    let tokens = tokens_for(&genes, &corpus)?;
    let (train, _) = split_train_validation(corpus.n_cells(), cfg.holdout_fraction, SPLIT_SEED);
    let mut state = ckpt.into_state(cfg.seed);
    state.student.config = cfg.encoder.clone();
    state.teacher.config = cfg.encoder.clone();

    let mut outputs = Outputs::new(common.force);
    outputs.dir(out)?;
    write_config(&out.join(CONFIG_ECHO), &flat)?;
    let mut w = EpochWriter::create(out)?;
    let logs = finetune(&corpus, &tokens, &train, &cfg, &mut state, &mut |l, _| w.record(l))?;
    save_run(out, &state, &cfg, &genes, None)?;
    outputs.commit();
    summary(json!({ "mode": cfg.mode.as_str(), "cells": train.len(), "epochs": logs.len(), "final_loss": logs.last().map(|l| l.loss) }));
    Ok(())
}

pub fn perturb_train(common: &Common, data: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let ckpt = checkpoint.map(load_model).transpose()?;
    let mut base = TrainConfig::perturbation();
    if let Some(c) = &ckpt {
        base.encoder = c.manifest.config.encoder.clone();
        base.mode = c.manifest.mode;
    }
    let (cfg, flat) = common.overrides(true)?.resolve(&base)?;
    cfg.validate()?;
    if let Some(c) = &ckpt {
        check_architecture(&cfg, &c.manifest.config.encoder)?;
    }
    let corpus = load_corpus(data)?;
    let genes: Vec<String> = match &ckpt {
        Some(c) => c.manifest.genes.clone(),
        None => corpus.gene_names().to_vec(),
    };
    let tokens = tokens_for(&genes, &corpus)?;
    let pdata = PerturbationData::new(&corpus, &tokens, cfg.encoder.l_max, None)?;
    let (train, held_out) = split_perturbations(pdata.names.len(), cfg.holdout_fraction, SPLIT_SEED);
    // a pre-trained student becomes both the starting point and the
    // frozen target encoder
    let mut state = match ckpt {
        Some(mut c) => {
            c.teacher = c.student.clone();
            c.into_state(cfg.seed)
        }
        None => TrainState::<f32>::init(&cfg, genes.len() + 2)?,
    };
    state.student.config = cfg.encoder.clone();
    state.teacher.config = cfg.encoder.clone();

    let mut outputs = Outputs::new(common.force);
    outputs.dir(out)?;
    write_config(&out.join(CONFIG_ECHO), &flat)?;
    let names = |idx: &[usize]| idx.iter().map(|&p| pdata.names[p].clone()).collect::<Vec<_>>();
    write_json(&out.join("split.json"), &json!({ "train": names(&train), "held_out": names(&held_out) }))?;
    let mut w = EpochWriter::create(out)?;
    let logs = train_perturbation(&pdata, &train, &cfg, &mut state, &mut |l, _| w.record(l))?;
    save_run(out, &state, &cfg, &genes, Some(pdata.panel_names(&corpus)))?;
    outputs.commit();
    summary(json!({
        "mode": cfg.mode.as_str(),
        "perturbations": train.len(),
        "held_out": held_out.len(),
        "epochs": logs.len(),
        "final_loss": logs.last().map(|l| l.loss),
    }));
    Ok(())
}

pub fn embed(common: &Common, data: &Path, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let (opts, flat) = common.overrides(true)?.resolve(&EmbedOptions::default())?;
    let ckpt = load_model(checkpoint)?;
    let corpus = load_corpus(data)?;
    let tokens = tokens_for(&ckpt.manifest.genes, &corpus)?;
    let cells: Vec<usize> = match opts.cells {
        Subset::All => (0..corpus.n_cells()).collect(),
        Subset::HeldOut => split_train_validation(corpus.n_cells(), ckpt.manifest.config.holdout_fraction, SPLIT_SEED).1,
    };
    let rows = embed_cells(&ckpt.student, &corpus, &tokens, &cells, opts.batch_size, opts.seed)?;
    let labels = match corpus.cell_types() {
        Some(types) => cells.iter().map(|&c| types[c].clone()).collect(),
        None => vec![String::new(); cells.len()],
    };
    let table = EmbeddingTable {
        cell_ids: cells.iter().map(|&c| corpus.cell_ids()[c].clone()).collect(),
        labels,
        rows,
    };
    let mut outputs = Outputs::new(common.force);
    outputs.file(out)?;
    write_embedding_tsv(out, &table)?;
    write_config(&sidecar(out), &flat)?;
    outputs.commit();
    summary(json!({ "cells": cells.len(), "dim": table.dim() }));
    Ok(())
}

fn write_report(out: &Path, report: &MetricsReport, flat: &Flat, outputs: &mut Outputs) -> Result<(), CliError> {
    outputs.file(out)?;
    let mut text = report.to_json();
    text.push('\n');
    write(out, &text)?;
    write_config(&sidecar(out), flat)
}

pub fn eval_cluster(common: &Common, embeddings: &Path, out: &Path) -> Result<(), CliError> {
    let (opts, flat) = common.overrides(true)?.resolve(&ClusterOptions::default())?;
    require_file(embeddings)?;
    let table = read_embedding_tsv(embeddings)?;
    if !table.has_labels() {
        return Err(CliError::Data(format!("{}: every row needs a label", embeddings.display())));
    }
    let labels = encode_labels(&table.labels);
    let report = cluster_report(&table.rows, &labels, opts.k, opts.seed)?.to_report();
    let mut outputs = Outputs::new(common.force);
    write_report(out, &report, &flat, &mut outputs)?;
    outputs.commit();
    summary(serde_json::to_value(&report).expect("report serializes"));
    Ok(())
}

pub fn eval_perturb(common: &Common, data: &Path, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let (opts, flat) = common.overrides(false)?.resolve(&PerturbEvalOptions::default())?;
    let ckpt = load_model(checkpoint)?;
    let panel = ckpt
        .manifest
        .panel
        .clone()
        .ok_or_else(|| CliError::Usage("checkpoint was not trained for perturbation prediction".into()))?;
    let corpus = load_corpus(data)?;
    let tokens = tokens_for(&ckpt.manifest.genes, &corpus)?;
    let cfg = ckpt.manifest.config.clone();
    let pdata = PerturbationData::new(&corpus, &tokens, cfg.encoder.l_max, Some(&panel))?;
    let perts: Vec<usize> = match opts.perturbations {
        Subset::All => (0..pdata.names.len()).collect(),
        Subset::HeldOut => split_perturbations(pdata.names.len(), cfg.holdout_fraction, SPLIT_SEED).1,
    };
    let state = ckpt.into_state(0);
    let report = evaluate_perturbations(&state, &pdata, &perts, opts.batch_size, &opts.de)?;
    let mut outputs = Outputs::new(common.force);
    write_report(out, &report, &flat, &mut outputs)?;
    outputs.commit();
    summary(serde_json::to_value(&report).expect("report serializes"));
    Ok(())
}

const ARMS: [Mode; 2] = [Mode::Jepa, Mode::ScgptBaseline];

/// Side-by-side text table of the two arms.
fn render_table(task: &str, reports: &[(Mode, MetricsReport)]) -> String {
    let mut keys: Vec<&String> = reports[0].1 .0.keys().collect();
    keys.retain(|k| !k.ends_with("_n_excluded") && k.as_str() != "n_perturbations");
    let width = keys.iter().map(|k| k.len()).max().unwrap_or(6).max(6);
    let mut s = format!("# {task}");
    if let Some(n) = reports[0].1.get("n_perturbations") {
        s.push_str(&format!(", {n} held-out perturbations"));
    }
    s.push_str(&format!("\n{:<width$}", "metric"));
    for (mode, _) in reports {
        s.push_str(&format!("  {:>14}", mode.as_str()));
    }
    s.push('\n');
    for k in keys {
        s.push_str(&format!("{k:<width$}"));
        for (_, r) in reports {
            match r.get(k) {
                Some(v) => s.push_str(&format!("  {v:>14.4}")),
                None => s.push_str(&format!("  {:>14}", "-")),
            }
        }
        s.push('\n');
    }
    s
}

pub fn compare(common: &Common, data: &Path, out: &Path) -> Result<(), CliError> {
    let (opts, flat) = common.overrides(true)?.resolve(&CompareOptions::default())?;
    let corpus = load_corpus(data)?;
    let perturbation = corpus.perturbations().is_some();
    if !perturbation && corpus.cell_types().is_none() {
        return Err(CliError::Data("corpus has neither cell-type nor perturbation labels".into()));
    }
    let task = if perturbation { "perturbation" } else { "zero-shot" };
    let mut outputs = Outputs::new(common.force);
    outputs.dir(out)?;
    write_config(&out.join(CONFIG_ECHO), &flat)?;

    let mut reports = Vec::new();
    for mode in ARMS {
        let arm = out.join(mode.as_str());
        std::fs::create_dir(&arm).map_err(|e| CliError::Data(format!("{}: {e}", arm.display())))?;
        let start = Instant::now();
        let (report, logs) = if perturbation {
            let cfg = TrainConfig {
                seed: opts.seed,
                mode,
                ..opts.perturb.clone()
            };
            let run = perturbation_run::<f32>(&corpus, &cfg, &opts.de)?;
            let genes = corpus.gene_names();
            save_run(&arm, &run.state, &cfg, genes, Some(run.data.panel_names(&corpus)))?;
            (run.report, run.logs)
        } else {
            let cfg = TrainConfig {
                seed: opts.seed,
                mode,
                ..opts.pretrain.clone()
            };
            let z = zero_shot::<f32>(&corpus, &cfg, opts.k)?;
            save_run(&arm, &z.state, &cfg, corpus.gene_names(), None)?;
            let table = EmbeddingTable {
                cell_ids: z.held_out.iter().map(|&c| corpus.cell_ids()[c].clone()).collect(),
                labels: z.held_out.iter().map(|&c| corpus.cell_types().expect("checked")[c].clone()).collect(),
                rows: z.embeddings,
            };
            write_embedding_tsv(&arm.join("embeddings.tsv"), &table)?;
            (z.report.to_report(), z.logs)
        };
        let mut log = JsonLines::create(&arm.join(LOG_FILE))?;
        for l in &logs {
            log.push(l).map_err(|e| CliError::Data(format!("{}: {e}", log.path().display())))?;
        }
        let mut timing = JsonLines::create(&arm.join(TIMING_FILE))?;
        timing
            .push(&json!({ "elapsed_s": start.elapsed().as_secs_f64() }))
            .map_err(|e| CliError::Data(format!("{}: {e}", timing.path().display())))?;
        reports.push((mode, report));
    }

    let table = render_table(task, &reports);
    let mut doc = serde_json::Map::new();
    doc.insert("task".into(), json!(task));
    for (mode, r) in &reports {
        doc.insert(mode.as_str().into(), serde_json::to_value(r).expect("report serializes"));
    }
    write_json(&out.join("compare.json"), &Value::Object(doc))?;
    write(&out.join("table.txt"), &table)?;
    outputs.commit();
    print!("{table}");
    Ok(())
}
