use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mode, TrainConfig, TrainError, TrainState};
use crate::autodiff::Tensor;
use crate::encoder::EncoderParams;
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;
const SECTIONS: [&str; 2] = ["student", "teacher"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Element type of `params.bin`; always little-endian `f32`.
    pub dtype: String,
    pub mode: Mode,
    pub step: u64,
    pub epoch: usize,
    pub config: TrainConfig,
    /// Gene names in token order (token = index + 2).
    pub genes: Vec<String>,
    /// Gene panel of a perturbation model.
    pub panel: Option<Vec<String>>,
    pub params: Vec<ParamEntry>,
    /// Order of the parameter sections in `params.bin`.
    pub sections: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub student: EncoderParams<T>,
    pub teacher: EncoderParams<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_state(state: &TrainState<T>, config: &TrainConfig, genes: &[String], panel: Option<Vec<String>>) -> Self {
        let store = &state.student.store;
        let params = (0..store.len())
            .map(|i| ParamEntry {
                name: store.name(i).to_string(),
                shape: store.get(i).shape().to_vec(),
            })
            .collect();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                dtype: "f32".into(),
                mode: config.mode,
                step: state.step,
                epoch: state.epoch,
                config: config.clone(),
                genes: genes.to_vec(),
                panel,
                params,
                sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
            },
            student: state.student.clone(),
            teacher: state.teacher.clone(),
        }
    }

    /// Training state resuming from this checkpoint, with zeroed moments.
    pub fn into_state(self, seed: u64) -> TrainState<T> {
        TrainState::from_params(self.student, self.teacher, ChaCha8Rng::seed_from_u64(seed))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Write `manifest.json` and `params.bin` into `dir`, creating it.
pub fn save_checkpoint<T: Scalar>(dir: &Path, ckpt: &Checkpoint<T>) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut bytes = Vec::with_capacity(2 * 4 * ckpt.student.store.n_scalars());
    for net in [&ckpt.student, &ckpt.teacher] {
        for t in net.store.tensors() {
            for v in t.data() {
                bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    write_atomic(&dir.join(PARAMS_FILE), &bytes)?;
    let json = serde_json::to_string_pretty(&ckpt.manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
}

/// Read a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>, TrainError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.dtype != "f32" || manifest.sections != SECTIONS {
        return Err(TrainError::Checkpoint(format!(
            "unsupported layout: dtype {} sections {:?}",
            manifest.dtype, manifest.sections
        )));
    }
    let vocab_len = manifest.genes.len() + 2;
    let layout: EncoderParams<T> = EncoderParams::init(&manifest.config.encoder, vocab_len, &mut ChaCha8Rng::seed_from_u64(0))?;
    let store = &layout.store;
    if store.len() != manifest.params.len() {
        return Err(TrainError::Checkpoint(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for (i, e) in manifest.params.iter().enumerate() {
        if e.name != store.name(i) || e.shape != store.get(i).shape() {
            return Err(TrainError::Checkpoint(format!(
                "parameter {} {:?} does not match expected {} {:?}",
                e.name,
                e.shape,
                store.name(i),
                store.get(i).shape()
            )));
        }
    }
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(io_err(&ppath))?;
    let n = store.n_scalars();
    if bytes.len() != 2 * 4 * n {
        return Err(TrainError::Checkpoint(format!(
            "{}: {} bytes, expected {}",
            ppath.display(),
            bytes.len(),
            8 * n
        )));
    }
    let mut floats = bytes
        .chunks_exact(4)
        .map(|b| T::of(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))));
    let mut read_section = || -> Result<EncoderParams<T>, TrainError> {
        let tensors = store
            .tensors()
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), floats.by_ref().take(t.len()).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut p = layout.clone();
        p.store.assign(tensors)?;
        Ok(p)
    };
    let student = read_section()?;
    let teacher = read_section()?;
    Ok(Checkpoint {
        manifest,
        student,
        teacher,
    })
}
