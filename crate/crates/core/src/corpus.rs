//! Byte-level text corpora split into training and held-out shards.
//!
//! A corpus directory holds `train/` and `heldout/` subdirectories of text
//! shards. Shards are hashed on load and a held-out shard whose contents also
//! appear among the training shards is rejected.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusShard {
    pub path: PathBuf,
    pub len: usize,
    pub split: Split,
    pub sha256: [u8; 32],
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    train: Vec<Vec<u8>>,
    heldout: Vec<Vec<u8>>,
    shards: Vec<CorpusShard>,
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl Corpus {
    /// Reads every regular file under `dir/train` and `dir/heldout`, sorted by name.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Corpus(format!("{} is not a directory", dir.display())));
        }
        let mut corpus = Corpus::default();
        for split in [Split::Train, Split::Heldout] {
            let sub = dir.join(split.dir_name());
            if !sub.is_dir() {
                return Err(Error::Corpus(format!("missing {}", sub.display())));
            }
            let mut paths: Vec<PathBuf> = fs::read_dir(&sub)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            paths.retain(|p| p.is_file());
            paths.sort();
            for path in paths {
                let bytes = fs::read(&path)?;
                corpus.push(split, path, bytes);
            }
        }
        corpus.check()?;
        Ok(corpus)
    }

    /// In-memory corpus; each text is one shard.
    pub fn from_texts(train: &[&str], heldout: &[&str]) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (split, texts) in [(Split::Train, train), (Split::Heldout, heldout)] {
            for (i, t) in texts.iter().enumerate() {
                let path = PathBuf::from(format!("{}/{i}", split.dir_name()));
                corpus.push(split, path, t.as_bytes().to_vec());
            }
        }
        corpus.check()?;
        Ok(corpus)
    }

    fn push(&mut self, split: Split, path: PathBuf, bytes: Vec<u8>) {
        self.shards.push(CorpusShard {
            path,
            len: bytes.len(),
            split,
            sha256: digest(&bytes),
        });
        match split {
            Split::Train => self.train.push(bytes),
            Split::Heldout => self.heldout.push(bytes),
        }
    }

    fn check(&self) -> Result<()> {
        for split in [Split::Train, Split::Heldout] {
            if self.split(split).iter().all(|s| s.is_empty()) {
                return Err(Error::Corpus(format!("{} split is empty", split.dir_name())));
            }
        }
        let train: Vec<_> = self
            .shards
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.sha256)
            .collect();
        for s in self.shards.iter().filter(|s| s.split == Split::Heldout) {
            if train.contains(&s.sha256) {
                return Err(Error::Corpus(format!(
                    "held-out shard {} duplicates a training shard",
                    s.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn shards(&self) -> &[CorpusShard] {
        &self.shards
    }

    pub fn split(&self, split: Split) -> &[Vec<u8>] {
        match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
        }
    }

    pub fn bytes(&self, split: Split) -> usize {
        self.split(split).iter().map(Vec::len).sum()
    }

    /// A random window of `len` bytes from one shard, chosen with probability
    /// proportional to its usable length. Shards shorter than `len` are skipped.
    pub fn sample<R: Rng>(&self, split: Split, len: usize, rng: &mut R) -> Result<Vec<usize>> {
        let shards = self.split(split);
        let starts: Vec<usize> = shards.iter().map(|s| (s.len() + 1).saturating_sub(len)).collect();
        let total: usize = starts.iter().sum();
        if len == 0 || total == 0 {
            return Err(Error::Corpus(format!(
                "no {} shard holds {len} bytes",
                split.dir_name()
            )));
        }
        let mut pick = rng.gen_range(0..total);
        for (shard, &n) in shards.iter().zip(&starts) {
            if pick < n {
                return Ok(shard[pick..pick + len].iter().map(|&b| b as usize).collect());
            }
            pick -= n;
        }
        unreachable!("pick is below the total")
    }

    /// `count` windows of `len` bytes at evenly spaced offsets of the split's
    /// concatenated shards, never straddling a shard boundary.
    pub fn spaced(&self, split: Split, len: usize, count: usize) -> Result<Vec<Vec<usize>>> {
        let shards = self.split(split);
        let usable: Vec<usize> = shards.iter().map(|s| (s.len() / len.max(1)) * len).collect();
        let total: usize = usable.iter().sum();
        if len == 0 || total < len * count.max(1) {
            return Err(Error::Corpus(format!(
                "{} split too small for {count} × {len} bytes",
                split.dir_name()
            )));
        }
        let windows = total / len;
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut off = (i * windows / count) * len;
            for (shard, &n) in shards.iter().zip(&usable) {
                if off < n {
                    out.push(shard[off..off + len].iter().map(|&b| b as usize).collect());
                    break;
                }
                off -= n;
            }
        }
        Ok(out)
    }
}

const SHARD_BYTES: usize = 1 << 20;

const NOUNS: &[&str] = &[
    "river", "house", "garden", "letter", "window", "market", "forest", "bridge", "lamp", "boat", "road", "hill",
    "stone", "field", "door", "table", "book", "song", "horse", "tower", "harbor", "village", "storm", "candle",
    "basket", "mirror", "clock", "wall", "coat", "ship",
];
const VERBS: &[&str] = &[
    "found", "carried", "painted", "watched", "opened", "followed", "built", "sold", "lost", "crossed", "mended",
    "counted", "heard", "kept", "moved", "cleaned", "drew", "praised", "visited", "left",
];
const ADJS: &[&str] = &[
    "old", "small", "green", "quiet", "bright", "broken", "heavy", "narrow", "warm", "distant", "empty", "golden",
    "plain", "strange", "wet", "red",
];
const PLACES: &[&str] = &[
    "the square",
    "the mill",
    "the shore",
    "the gate",
    "the chapel",
    "the inn",
    "the ford",
    "the orchard",
];
const TIMES: &[&str] = &[
    "At dawn",
    "Later",
    "That evening",
    "In the spring",
    "Before noon",
    "After the rain",
    "Once",
    "By winter",
];
const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "du", "sa", "vor", "tel", "ni", "bra", "zu", "fen", "ol", "qua", "mir", "est", "dan",
    "ju", "pol", "ska",
];

fn invented_name<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(2..=4);
    let mut s: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
    s[..1].make_ascii_uppercase();
    s
}

fn pick<'a, R: Rng>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words.choose(rng).unwrap()
}

/// One document: a handful of invented names and a per-document favoured
/// subset of nouns recur throughout, so earlier text predicts later text at
/// distances well beyond a short attention window.
fn document<R: Rng>(rng: &mut R, target: usize) -> String {
    let names: Vec<String> = (0..rng.gen_range(3..=5)).map(|_| invented_name(rng)).collect();
    let theme: Vec<&str> = NOUNS.choose_multiple(rng, 6).copied().collect();
    let title = format!("= The {} of {} =\n", pick(rng, &theme), names[0]);
    let mut doc = title;
    while doc.len() < target {
        let a = &names[rng.gen_range(0..names.len())];
        let b = &names[rng.gen_range(0..names.len())];
        let noun = if rng.gen_bool(0.7) {
            pick(rng, &theme)
        } else {
            pick(rng, NOUNS)
        };
        let s = match rng.gen_range(0..6) {
            0 => format!("{a} {} the {} {noun}.", pick(rng, VERBS), pick(rng, ADJS)),
            1 => format!("The {noun} of {a} was {}.", pick(rng, ADJS)),
            2 => format!("{a} and {b} {} a {noun} near {}.", pick(rng, VERBS), pick(rng, PLACES)),
            3 => format!("{}, {a} {} the {noun}.", pick(rng, TIMES), pick(rng, VERBS)),
            4 => format!("Nobody {} the {noun} but {a}.", pick(rng, VERBS)),
            _ => format!("{a} said that {b} {} the {} {noun}.", pick(rng, VERBS), pick(rng, ADJS)),
        };
        doc.push_str(&s);
        doc.push(if rng.gen_bool(0.2) { '\n' } else { ' ' });
    }
    doc.push_str("\n\n");
    doc
}

/// Deterministic synthetic text of about `bytes` bytes.
pub fn synthetic_text(seed: u64, bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 4096);
    while out.len() < bytes {
        let target = rng.gen_range(1500..4000);
        out.push_str(&document(&mut rng, target));
    }
    out.truncate(bytes);
    out
}

/// Writes a synthetic corpus as 1 MiB shards under `dir/train` and `dir/heldout`.
/// The two splits come from independent generator streams.
pub fn write_synthetic(dir: &Path, seed: u64, train_bytes: usize, heldout_bytes: usize) -> Result<Vec<CorpusShard>> {
    let mut shards = Vec::new();
    for (split, bytes, stream) in [(Split::Train, train_bytes, 0u64), (Split::Heldout, heldout_bytes, 1)] {
        let sub = dir.join(split.dir_name());
        fs::create_dir_all(&sub)?;
        let text = synthetic_text(seed.wrapping_mul(2).wrapping_add(stream), bytes);
        for (i, chunk) in text.as_bytes().chunks(SHARD_BYTES).enumerate() {
            let path = sub.join(format!("shard-{i:04}.txt"));
            write_atomic(&path, chunk)?;
            shards.push(CorpusShard {
                path,
                len: chunk.len(),
                split,
                sha256: digest(chunk),
            });
        }
    }
    Ok(shards)
}
