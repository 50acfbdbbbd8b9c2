//! Byte-level corpus ingestion and batch sampling.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Byte-level vocabulary size.
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corpus {path} is empty")]
    Empty { path: PathBuf },
    #[error("split of {len} bytes is too short for sequence length {seq_len}")]
    TooShort { len: usize, seq_len: usize },
}

/// Raw bytes with a deterministic 90/10 train/validation split: the last
/// tenth of the file is validation.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

impl Corpus {
    pub fn from_bytes(mut bytes: Vec<u8>) -> Self {
        let train_len = bytes.len() * 9 / 10;
        let val = bytes.split_off(train_len);
        Self { train: bytes, val }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads a corpus file; empty or unreadable files are errors.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    if bytes.is_empty() {
        return Err(CorpusError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok(Corpus::from_bytes(bytes))
}

/// Samples `batch` contiguous windows from `split` with uniformly random
/// start offsets; targets are the inputs shifted by one byte.
pub fn sample_batch(
    split: &[u8],
    seq_len: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>), CorpusError> {
    if split.len() <= seq_len {
        return Err(CorpusError::TooShort {
            len: split.len(),
            seq_len,
        });
    }
    let valid = split.len() - seq_len;
    let mut inputs = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    for _ in 0..batch {
        let start = rng.random_range(0..valid);
        inputs.extend(split[start..start + seq_len].iter().map(|&b| b as usize));
        targets.extend(
            split[start + 1..start + seq_len + 1]
                .iter()
                .map(|&b| b as usize),
        );
    }
    Ok((inputs, targets))
}
