//! Checkpoint directory layout and the trained-system manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tod_core::classifier::ClassifierParams;
use tod_core::encoder::EncoderParams;
use tod_core::lm::{LmConfig, LmParams};
use tod_core::params::{self, Tensors};
use tod_core::system::{DialogSystem, SystemConfig};
use tod_core::taxonomy::{LabelSpace, TaxonomyFile};
use tod_core::text::Vocab;

use crate::error::CliError;

pub const VOCAB: &str = "vocab.json";
pub const MANIFEST: &str = "system.json";
pub const ENCODER: &str = "encoder.ckpt";
pub const STUDENT: &str = "student.ckpt";
pub const UI_TEACHER: &str = "ui_teacher.ckpt";
pub const LM: &str = "lm.ckpt";

/// Everything needed to rebuild tensor shapes before loading weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: SystemConfig,
    pub taxonomy: TaxonomyFile,
    pub lm: LmConfig,
    pub encoder_digest: String,
    pub student_digest: String,
    pub lm_digest: String,
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    write_file(path, text + "\n")
}

fn require(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(CliError::Missing(p))
    }
}

pub fn save_vocab(dir: &Path, vocab: &Vocab) -> Result<(), CliError> {
    let p = dir.join(VOCAB);
    vocab.save(&p).map_err(CliError::io(&p))
}

pub fn load_vocab(dir: &Path) -> Result<Vocab, CliError> {
    Vocab::load(&require(dir, VOCAB)?).map_err(|e| CliError::Data(e.to_string()))
}

pub fn save_params<P: Tensors>(dir: &Path, name: &str, p: &P) -> Result<(), CliError> {
    Ok(params::save(p, &dir.join(name))?)
}

pub fn save_system(dir: &Path, system: &DialogSystem, encoder: &EncoderParams, config: &SystemConfig) -> Result<(), CliError> {
    ensure_dir(dir)?;
    save_vocab(dir, &system.vocab)?;
    save_params(dir, ENCODER, encoder)?;
    save_params(dir, STUDENT, &system.classifier)?;
    save_params(dir, LM, &system.lm)?;
    let manifest = Manifest {
        config: config.clone(),
        taxonomy: system.space.to_file(),
        lm: system.lm.config.clone(),
        encoder_digest: params::digest(encoder),
        student_digest: params::digest(&system.classifier),
        lm_digest: params::digest(&system.lm),
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Rebuild a trained system; a missing file is [`CliError::Missing`].
pub fn load_system(dir: &Path) -> Result<DialogSystem, CliError> {
    let manifest_path = require(dir, MANIFEST)?;
    let student_path = require(dir, STUDENT)?;
    let lm_path = require(dir, LM)?;
    let vocab = load_vocab(dir)?;
    let text = std::fs::read_to_string(&manifest_path).map_err(CliError::io(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;
    let space = LabelSpace::from_file(manifest.taxonomy).map_err(|e| CliError::Data(e.to_string()))?;
    if manifest.lm.vocab_size != vocab.len() {
        return Err(CliError::Data(format!(
            "manifest vocabulary size {} but {} has {} tokens",
            manifest.lm.vocab_size,
            VOCAB,
            vocab.len()
        )));
    }
    let enc = &manifest.config.encoder;
    let mut classifier = ClassifierParams::zeros(&space, EncoderParams::zeros(vocab.len(), enc.dim, enc.dropout));
    params::load_into(&mut classifier, &student_path)?;
    let mut lm = LmParams::zeros(manifest.lm).map_err(|e| CliError::Data(e.to_string()))?;
    params::load_into(&mut lm, &lm_path)?;
    Ok(DialogSystem { vocab, space, classifier, lm, decode: manifest.config.decode })
}
