//! Binary corpus files and their manifest.
//!
//! A corpus file is `LSTCLVID`, a `u32` version, then the `u32` counts
//! `n, t_total, height, width, channels, k_classes`, then per video its `u64`
//! seed, `u32` label and `t_total * height * width * channels` little-endian
//! `f32` values. Integers are little-endian.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lstcl_core::videogen::{generate_video, video_seed, GeneratorConfig, Video};

use crate::config::ExperimentConfig;
use crate::error::{CliError, IoContext, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"LSTCLVID";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "corpus.toml";
pub const TRAIN_FILE: &str = "train.bin";
pub const TEST_FILE: &str = "test.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub k_classes: usize,
    pub videos: Vec<Video>,
}

/// Generates videos `0..n` of corpus `seed` on the rayon pool; the result is
/// identical to [`lstcl_core::videogen::generate_corpus`].
pub fn generate(cfg: &GeneratorConfig, n: usize, seed: u64) -> Result<Vec<Video>> {
    if n == 0 {
        return Err(CliError::usage("a corpus needs at least one video"));
    }
    let patterns = cfg.class_patterns()?;
    Ok((0..n as u64).into_par_iter().map(|i| generate_video(cfg, &patterns, video_seed(seed, i))).collect())
}

pub fn encode(corpus: &Corpus) -> Result<Vec<u8>> {
    let Some(first) = corpus.videos.first() else {
        return Err(CliError::usage("cannot write an empty corpus"));
    };
    let dims = [first.t_total, first.height, first.width, first.channels];
    let mut out = Vec::with_capacity(corpus.videos.len() * (12 + first.frames.len() * 4) + 40);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = [corpus.videos.len(), dims[0], dims[1], dims[2], dims[3], corpus.k_classes];
    for v in header {
        out.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    for v in &corpus.videos {
        if [v.t_total, v.height, v.width, v.channels] != dims || v.frames.len() != dims.iter().product::<usize>() {
            return Err(CliError::Invariant(format!("video {} does not match the corpus shape", v.seed)));
        }
        out.extend_from_slice(&v.seed.to_le_bytes());
        out.extend_from_slice(&v.label.to_le_bytes());
        for x in &v.frames {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| CliError::usage(format!("{v} does not fit the corpus header")))
}

struct Cursor<'a> {
    rest: &'a [u8],
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.rest.len() < N {
            return Err(CliError::usage("corpus file is truncated"));
        }
        let (head, tail) = self.rest.split_at(N);
        self.rest = tail;
        Ok(head.try_into().expect("split at N"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Corpus> {
    let mut c = Cursor { rest: bytes };
    if &c.take::<8>()? != MAGIC {
        return Err(CliError::usage("not a corpus file"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CliError::usage(format!("unsupported corpus version {version}")));
    }
    let mut h = [0usize; 6];
    for v in &mut h {
        *v = c.u32()? as usize;
    }
    let [n, t_total, height, width, channels, k_classes] = h;
    let len = t_total * height * width * channels;
    if c.rest.len() != n * (12 + 4 * len) {
        return Err(CliError::usage(format!("corpus payload is {} bytes, header implies {}", c.rest.len(), n * (12 + 4 * len))));
    }
    let mut videos = Vec::with_capacity(n);
    for _ in 0..n {
        let seed = u64::from_le_bytes(c.take::<8>()?);
        let label = c.u32()?;
        if label as usize >= k_classes {
            return Err(CliError::usage(format!("label {label} outside {k_classes} classes")));
        }
        let (data, rest) = c.rest.split_at(4 * len);
        c.rest = rest;
        let frames = data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        videos.push(Video { frames, t_total, height, width, channels, label, seed });
    }
    Ok(Corpus { k_classes, videos })
}

pub fn write(path: &Path, corpus: &Corpus) -> Result<()> {
    write_atomic(path, &encode(corpus)?)
}

pub fn read(path: &Path) -> Result<Corpus> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).at(path)?).read_to_end(&mut bytes).at(path)?;
    decode(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path).at(path)?);
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).at(path)?;
    Ok(format!("{:x}", h.finalize()))
}

/// `corpus.toml`, written after both splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    /// Hash of the `[corpus]` section alone; pipelines check it against their config.
    pub corpus_hash: String,
    pub k_classes: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub train_sha256: String,
    pub test_sha256: String,
}

pub fn corpus_hash(cfg: &ExperimentConfig) -> String {
    format!("{:x}", Sha256::digest(toml::to_string(&cfg.corpus).expect("corpus serializes").as_bytes()))
}

/// Train and test splits loaded from a data directory.
pub struct Splits {
    pub k_classes: usize,
    pub train: Vec<Video>,
    pub test: Vec<Video>,
}

/// Generates both splits and writes them with their manifest.
pub fn generate_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let gen = cfg.generator();
    let c = &cfg.corpus;
    let train = generate(&gen, c.train_videos, c.train_seed)?;
    let test = generate(&gen, c.test_videos, c.test_seed)?;
    std::fs::create_dir_all(dir).at(dir)?;
    let (train_path, test_path) = (dir.join(TRAIN_FILE), dir.join(TEST_FILE));
    write(&train_path, &Corpus { k_classes: c.k_classes, videos: train })?;
    write(&test_path, &Corpus { k_classes: c.k_classes, videos: test })?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        corpus_hash: corpus_hash(cfg),
        k_classes: c.k_classes,
        train_videos: c.train_videos,
        test_videos: c.test_videos,
        train_sha256: sha256_file(&train_path)?,
        test_sha256: sha256_file(&test_path)?,
    };
    write_atomic(&dir.join(MANIFEST), toml::to_string(&manifest).expect("manifest serializes").as_bytes())?;
    Ok(manifest)
}

/// Loads the splits, refusing data generated from different corpus settings.
pub fn load_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<Splits> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).at(&path)?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if manifest.corpus_hash != corpus_hash(cfg) {
        return Err(CliError::usage(format!(
            "corpus in {} was generated from different [corpus] settings; rerun `gen`",
            dir.display()
        )));
    }
    let train = read(&dir.join(TRAIN_FILE))?;
    let test = read(&dir.join(TEST_FILE))?;
    if train.videos.len() != manifest.train_videos || test.videos.len() != manifest.test_videos {
        return Err(CliError::usage(format!("corpus files in {} disagree with the manifest", dir.display())));
    }
    Ok(Splits { k_classes: manifest.k_classes, train: train.videos, test: test.videos })
}

/// Paths of the three corpus files in `dir`.
pub fn files(dir: &Path) -> [PathBuf; 3] {
    [dir.join(TRAIN_FILE), dir.join(TEST_FILE), dir.join(MANIFEST)]
}

