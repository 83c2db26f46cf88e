//! Binary persistence: the "TCBD" dataset format and the "TCKP" checkpoint
//! format. Both are little-endian throughout with 32-bit float payloads and
//! length-prefixed strings. Readers track the byte offset so truncation
//! errors can say where the file went bad.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::TimeConvSpec;
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::optim::TrainState;
use crate::tensor::Tensor;

use super::Utterance;

const DATASET_MAGIC: &[u8; 4] = b"TCBD";
const DATASET_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"TCKP";
const CHECKPOINT_VERSION: u32 = 1;

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Corrupt {
                offset: self.offset,
                detail: format!("truncated while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let mut bytes = vec![0u8; len];
        self.read_exact(&mut bytes, what)?;
        String::from_utf8(bytes).map_err(|_| Error::Corrupt {
            offset: self.offset,
            detail: format!("{what} is not valid utf-8"),
        })
    }

    fn f32_vec(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; count * 4];
        self.read_exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_matrix(w: &mut impl Write, m: &Tensor<f32>) -> Result<()> {
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes utterances in the dataset format; see the README for the layout.
pub fn save_dataset(path: impl AsRef<Path>, utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(utts.len() as u32).to_le_bytes())?;
    for utt in utts {
        write_string(&mut w, &utt.id)?;
        w.write_all(&(utt.num_frames() as u32).to_le_bytes())?;
        w.write_all(&(utt.feat_dim() as u32).to_le_bytes())?;
        write_matrix(&mut w, &utt.frames)?;
        for &label in &utt.labels {
            w.write_all(&(label as u32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file back; bit-exact round trip with `save_dataset`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "not a dataset file: magic {magic:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {version} unsupported (expected {DATASET_VERSION})"
        )));
    }
    let count = r.u32("utterance count")? as usize;
    let mut utts = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.string("utterance id")?;
        let frames = r.u32("frame count")? as usize;
        let feat = r.u32("feat dim")? as usize;
        let data = r.f32_vec(frames * feat, "frame data")?;
        let mut labels = Vec::with_capacity(frames);
        for _ in 0..frames {
            labels.push(r.u32("label")? as usize);
        }
        utts.push(Utterance {
            id,
            frames: Tensor::new(frames, feat, data)?,
            labels,
        });
    }
    Ok(utts)
}

/// Exact byte size a dataset file will occupy; handy for format tests.
pub fn dataset_file_size(utts: &[Utterance]) -> u64 {
    let mut size = 4 + 4 + 4u64;
    for utt in utts {
        size += 4 + utt.id.len() as u64;
        size += 4 + 4;
        size += 4 * (utt.num_frames() as u64) * (utt.feat_dim() as u64);
        size += 4 * utt.num_frames() as u64;
    }
    size
}

/// A saved model: the config that shaped it, the parameter blocks, and the
/// training state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub state: TrainState,
}

fn write_config(w: &mut impl Write, config: &ModelConfig) -> Result<()> {
    w.write_all(&[config.variant.tag()])?;
    w.write_all(&(config.feat_dim as u32).to_le_bytes())?;
    w.write_all(&(config.tc.context_frames as u32).to_le_bytes())?;
    w.write_all(&(config.tc.tc_width as u32).to_le_bytes())?;
    w.write_all(&[u8::from(config.tc.tied_columns)])?;
    w.write_all(&(config.input_dnn_layers.len() as u32).to_le_bytes())?;
    for &width in &config.input_dnn_layers {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    w.write_all(&(config.cell_dim as u32).to_le_bytes())?;
    w.write_all(&(config.blstm_layers as u32).to_le_bytes())?;
    w.write_all(&(config.output_dnn_layers.len() as u32).to_le_bytes())?;
    for &width in &config.output_dnn_layers {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    w.write_all(&(config.num_classes as u32).to_le_bytes())?;
    w.write_all(&config.seed.to_le_bytes())?;
    w.write_all(&config.lstm_init_range.to_le_bytes())?;
    w.write_all(&config.dnn_init_std.to_le_bytes())?;
    Ok(())
}

fn read_config<R: Read>(r: &mut CountingReader<R>) -> Result<ModelConfig> {
    let variant = Variant::from_tag(r.u8("variant")?)?;
    let feat_dim = r.u32("feat_dim")? as usize;
    let context_frames = r.u32("context_frames")? as usize;
    let tc_width = r.u32("tc_width")? as usize;
    let tied = r.u8("tied_columns")? != 0;
    let input_count = r.u32("input layer count")? as usize;
    let mut input_dnn_layers = Vec::with_capacity(input_count);
    for _ in 0..input_count {
        input_dnn_layers.push(r.u32("input layer width")? as usize);
    }
    let cell_dim = r.u32("cell_dim")? as usize;
    let blstm_layers = r.u32("blstm_layers")? as usize;
    let output_count = r.u32("output layer count")? as usize;
    let mut output_dnn_layers = Vec::with_capacity(output_count);
    for _ in 0..output_count {
        output_dnn_layers.push(r.u32("output layer width")? as usize);
    }
    let num_classes = r.u32("num_classes")? as usize;
    let seed = r.u64("seed")?;
    let lstm_init_range = r.f64("lstm_init_range")?;
    let dnn_init_std = r.f64("dnn_init_std")?;
    Ok(ModelConfig {
        variant,
        feat_dim,
        tc: TimeConvSpec {
            context_frames,
            tc_width,
            tied_columns: tied,
        },
        input_dnn_layers,
        cell_dim,
        blstm_layers,
        output_dnn_layers,
        num_classes,
        seed,
        lstm_init_range,
        dnn_init_std,
    })
}

/// Writes config, named parameter matrices and training state.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ModelParams<f32>,
    state: &TrainState,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_config(&mut w, config)?;

    let matrices = params.named_matrices();
    w.write_all(&(matrices.len() as u32).to_le_bytes())?;
    for (name, m) in matrices {
        write_string(&mut w, &name)?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        write_matrix(&mut w, m)?;
    }

    w.write_all(&state.epoch.to_le_bytes())?;
    w.write_all(&state.lr.to_le_bytes())?;
    w.write_all(&state.best_dev_loss.to_le_bytes())?;
    w.write_all(&state.epochs_since_improvement.to_le_bytes())?;
    w.write_all(&state.rng_seed.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

/// Restores a checkpoint bitwise. The parameter structure is rebuilt from
/// the stored config, then every matrix must match it by name and shape.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint file: magic {magic:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config = read_config(&mut r)?;
    config.validate()?;

    let mut params = crate::model::zeros_params(&config)?;
    let matrix_count = r.u32("matrix count")? as usize;
    let expected = params.named_matrices().len();
    if matrix_count != expected {
        return Err(Error::Format(format!(
            "checkpoint has {matrix_count} matrices, config implies {expected}"
        )));
    }
    {
        let mut targets = params.named_matrices_mut();
        for (name, m) in targets.iter_mut() {
            let stored_name = r.string("matrix name")?;
            if stored_name != *name {
                return Err(Error::Format(format!(
                    "checkpoint matrix '{stored_name}' does not match expected '{name}'"
                )));
            }
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            if (rows, cols) != m.shape() {
                return Err(Error::Format(format!(
                    "matrix '{name}' is {rows}x{cols}, config implies {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            let data = r.f32_vec(rows * cols, "matrix data")?;
            m.data_mut().copy_from_slice(&data);
        }
    }

    let state = TrainState {
        epoch: r.u32("epoch")?,
        lr: r.f32("lr")?,
        best_dev_loss: r.f32("best_dev_loss")?,
        epochs_since_improvement: r.u32("epochs_since_improvement")?,
        rng_seed: r.u64("rng_seed")?,
    };
    Ok(Checkpoint {
        config,
        params,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{init_params, ModelConfig};

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("tcblstm-test-{}-{name}", std::process::id()));
        p
    }

    fn tiny_data() -> Vec<Utterance> {
        let spec = SyntheticSpec {
            num_classes: 3,
            feat_dim: 4,
            utterance_length: 20,
            train_utterances: 3,
            dev_utterances: 1,
            test_utterances: 1,
            noise_sigma: 0.2,
            latent_smoothing: 5,
            seed: 77,
        };
        generate_synthetic(&spec).unwrap().train
    }

    #[test]
    fn dataset_round_trip_is_identity() {
        let utts = tiny_data();
        let path = tmp("dataset.tcbd");
        save_dataset(&path, &utts).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(utts, loaded);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn dataset_file_size_matches_formula() {
        let utts = tiny_data();
        let path = tmp("sized.tcbd");
        save_dataset(&path, &utts).unwrap();
        let actual = std::fs::metadata(&path).unwrap().len();
        assert_eq!(actual, dataset_file_size(&utts));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let path = tmp("badmagic.tcbd");
        std::fs::write(&path, b"NOPE0000000").unwrap();
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            Error::Format(_)
        ));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_dataset_reports_byte_offset() {
        let utts = tiny_data();
        let path = tmp("trunc.tcbd");
        save_dataset(&path, &utts).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_dataset(&path).unwrap_err() {
            Error::Corrupt { offset, .. } => {
                assert!(offset <= (bytes.len() / 2) as u64);
                assert!(offset > 0);
            }
            other => panic!("expected corruption error, got {other}"),
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let config = ModelConfig::tiny_for_checks(crate::model::Variant::TcDnnBlstmDnn);
        let params: ModelParams<f32> = init_params(&config).unwrap();
        let state = TrainState {
            epoch: 3,
            lr: 0.025,
            best_dev_loss: 1.25,
            epochs_since_improvement: 1,
            rng_seed: 99,
        };
        let path = tmp("ckpt.tckp");
        save_checkpoint(&path, &config, &params, &state).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.params, params);
        assert_eq!(loaded.state, state);
        assert_eq!(loaded.params.checksum(), params.checksum());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn version_mismatch_names_versions() {
        let path = tmp("version.tckp");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
        std::fs::remove_file(&path).ok();
    }
}
