//! The five subcommands. Each returns `Ok(())` or a [`CliError`] whose
//! [`exit_code`](CliError::exit_code) the binary reports.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tod_core::corpus::{generate_synthetic, load_corpus_with, save_corpus, CorpusSplit, LocalKb};
use tod_core::params;
use tod_core::system::{
    build_vocab, evaluate, pretrain_encoder, score_predictions, train_system, DialogState, DialogSystem, MasterSeeds,
    PredictionRecord,
};
use tod_core::taxonomy::LabelSpace;
use tod_core::weak::ProvenanceReport;

use crate::artifacts::{self, ensure_dir, write_file, write_json};
use crate::config::RunConfig;
use crate::error::CliError;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";
pub const PROVENANCE: &str = "provenance.json";
pub const GENERATIONS: &str = "generations.jsonl";
pub const GENERATIONS_ORACLE: &str = "generations_oracle.jsonl";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const EVALUATION_TXT: &str = "evaluation.txt";

/// Which data produced a run and how each stage was seeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub master_seed: u64,
    pub seeds: MasterSeeds,
    pub pretrained: bool,
    pub dialogs: SplitSizes,
    pub weak: ProvenanceReport,
    pub encoder_digest: String,
    pub lm_digest: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub labeled: usize,
    pub unlabeled: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    fn of(split: &CorpusSplit) -> Self {
        SplitSizes { labeled: split.labeled.len(), unlabeled: split.unlabeled.len(), dev: split.dev.len(), test: split.test.len() }
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => ensure_dir(dir),
        _ => Ok(()),
    }
}

fn load_split(cfg: &RunConfig, space: &LabelSpace) -> Result<CorpusSplit, CliError> {
    Ok(load_corpus_with(&cfg.paths.corpus(), space)?)
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("log records serialize") + "\n").collect()
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let split = generate_synthetic(&cfg.data)?;
    let path = cfg.paths.corpus();
    ensure_parent(&path)?;
    save_corpus(&split, &path)?;
    let n = SplitSizes::of(&split);
    println!(
        "wrote {} dialogs to {} (labeled {}, unlabeled {}, dev {}, test {})",
        split.len(),
        path.display(),
        n.labeled,
        n.unlabeled,
        n.dev,
        n.test
    );
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let space = cfg.label_space()?;
    let split = load_split(cfg, &space)?;
    let vocab = build_vocab(&split, &space);
    let encoder = pretrain_encoder(&split, &vocab, &cfg.system)?;
    let dir = cfg.paths.checkpoints();
    ensure_dir(&dir)?;
    artifacts::save_vocab(&dir, &vocab)?;
    artifacts::save_params(&dir, artifacts::ENCODER, &encoder)?;
    println!("encoder {} -> {}", params::digest(&encoder), dir.join(artifacts::ENCODER).display());
    Ok(())
}

/// Pretrain, weak supervision, LM training, then evaluation on the test
/// split. Errors carry the stage name.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<(), CliError> {
    let clock = Instant::now();
    let stage = |name: &'static str| move |e: CliError| e.in_stage(name);
    let note = |name: &str| eprintln!("[{:>7.1}s] {name}", clock.elapsed().as_secs_f64());

    let space = cfg.label_space().map_err(stage("config"))?;
    let split = load_split(cfg, &space).map_err(stage("load-corpus"))?;
    note("corpus loaded");
    let vocab = build_vocab(&split, &space);
    let encoder = pretrain_encoder(&split, &vocab, &cfg.system).map_err(|e| CliError::from(e).in_stage("pretrain"))?;
    note(if cfg.system.skip_pretrain { "pretraining skipped" } else { "encoder pretrained" });
    let trained = train_system(&split, &space, vocab, encoder, &cfg.system).map_err(|e| CliError::from(e).in_stage("train"))?;
    note("classifier and language model trained");

    let ckpt = cfg.paths.checkpoints();
    artifacts::save_system(&ckpt, &trained.system, &trained.encoder, &cfg.system).map_err(stage("save-checkpoints"))?;
    artifacts::save_params(&ckpt, artifacts::UI_TEACHER, &trained.ui_teacher).map_err(stage("save-checkpoints"))?;

    let (eval, logs) =
        evaluate(&trained.system, &split.test, &cfg.system.combined).map_err(|e| CliError::from(e).in_stage("evaluate"))?;
    note("test split evaluated");

    let reports = cfg.paths.reports();
    let write = || -> Result<(), CliError> {
        ensure_dir(&reports)?;
        let provenance = RunProvenance {
            master_seed: cfg.system.seed,
            seeds: trained.seeds,
            pretrained: !cfg.system.skip_pretrain,
            dialogs: SplitSizes::of(&split),
            weak: trained.provenance.clone(),
            encoder_digest: params::digest(&trained.encoder),
            lm_digest: params::digest(&trained.system.lm),
        };
        write_json(&reports.join(PROVENANCE), &provenance)?;
        write_json(&reports.join(METRICS_JSON), &eval)?;
        write_file(&reports.join(METRICS_TXT), metrics_text(&eval))?;
        write_file(&reports.join(GENERATIONS), jsonl(&logs.predicted))?;
        write_file(&reports.join(GENERATIONS_ORACLE), jsonl(&logs.oracle))
    };
    write().map_err(stage("write-reports"))?;
    print!("{}", metrics_text(&eval));
    Ok(())
}

fn metrics_text(eval: &tod_core::system::Evaluation) -> String {
    format!(
        "predicted intents ({} dialogs, {} turns)\n{}oracle intents\n{}",
        eval.dialogs,
        eval.turns,
        eval.predicted.to_text(),
        eval.oracle.to_text()
    )
}

/// Score a predictions file against the corpus test split.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let space = cfg.label_space()?;
    let split = load_split(cfg, &space)?;
    let path = cfg.evaluate.predictions.clone().unwrap_or_else(|| cfg.paths.reports().join(GENERATIONS));
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<PredictionRecord>(l)
                .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = score_predictions(&split.test, &records, &cfg.system.combined)?;
    let reports = cfg.paths.reports();
    ensure_dir(&reports)?;
    write_json(&reports.join(EVALUATION_JSON), &report)?;
    write_file(&reports.join(EVALUATION_TXT), report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn chat_kb(cfg: &RunConfig, space: &LabelSpace) -> Result<LocalKb, CliError> {
    if let Some(p) = &cfg.chat.kb {
        let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
        return serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())));
    }
    let split = load_split(cfg, space)?;
    let dialog = match &cfg.chat.dialog {
        Some(id) => split.iter().find(|d| &d.dialog_id == id).ok_or_else(|| CliError::Config(format!("no dialog `{id}` in corpus")))?,
        None => split.test.first().ok_or_else(|| CliError::Data("corpus has no test dialogs to take a KB from".into()))?,
    };
    Ok(dialog.local_kb.clone())
}

fn print_kb(kb: &LocalKb, out: &mut impl Write) -> std::io::Result<()> {
    for e in &kb.entities {
        let attrs: Vec<String> = e.attributes.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(out, "{} ({}): {}", e.name, e.entity_type, attrs.join(", "))?;
    }
    Ok(())
}

fn join<'a>(xs: impl IntoIterator<Item = &'a String>) -> String {
    xs.into_iter().map(String::as_str).collect::<Vec<_>>().join(", ")
}

/// REPL over `input`: one user utterance per line; `:kb` prints the KB,
/// `:reset` clears the dialog history, `:quit` ends the session.
pub fn cmd_chat(cfg: &RunConfig, input: impl BufRead, mut out: impl Write) -> Result<(), CliError> {
    let system: DialogSystem = artifacts::load_system(&cfg.paths.checkpoints())?;
    let kb = chat_kb(cfg, &system.space)?;
    let mut state = DialogState::new(kb.clone());
    let stdout = |e| CliError::Io { path: "<stdout>".into(), source: e };
    for line in input.lines() {
        let line = line.map_err(|e| CliError::Io { path: "<stdin>".into(), source: e })?;
        let line = line.trim();
        match line {
            "" => continue,
            ":quit" => break,
            ":kb" => print_kb(&state.kb, &mut out).map_err(stdout)?,
            ":reset" => state = DialogState::new(kb.clone()),
            utterance => {
                let log = system.respond(&mut state, utterance)?;
                let triples: Vec<String> = log.kb.triples.iter().map(|t| format!("{} {} {}", t.0, t.1, t.2)).collect();
                let mut si = join(&log.si_context);
                if log.si_context != log.si {
                    si += &format!(" (predicted {})", join(&log.si));
                }
                let report = format!(
                    "ui: {}\nsi: {si}\nkb: {}\nconstraints: {}\nresponse: {}\n",
                    join(&log.ui),
                    triples.join("; "),
                    log.constraints.join(" | "),
                    log.response
                );
                out.write_all(report.as_bytes()).and_then(|_| out.flush()).map_err(stdout)?;
            }
        }
    }
    Ok(())
}
