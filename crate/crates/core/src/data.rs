//! Vocabulary, synthetic tasks, TSV corpora and token-budget batching.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Filler used when padding hypotheses for fuzzy matching; matches nothing.
pub const NULL: usize = 4;
/// First id available to content tokens.
pub const FIRST_CONTENT: usize = 5;

const RESERVED: [&str; FIRST_CONTENT] = ["<pad>", "<s>", "</s>", "<unk>", "<null>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the reserved symbols.
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.add(t);
        }
        v
    }

    /// `size` ids in total; content token `id` is spelled `t{id}`.
    pub fn synthetic(size: usize) -> Self {
        let mut v = Self::new();
        for id in FIRST_CONTENT..size {
            v.add(&format!("t{id}"));
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when unknown.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined content tokens, stopping at the first end sentinel.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds a vocabulary from its token list (as written by [`Vocab::tokens`]).
    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        if tokens.len() < FIRST_CONTENT || tokens[..FIRST_CONTENT].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::config("vocabulary does not start with the reserved symbols"));
        }
        let mut v = Self::new();
        for t in &tokens[FIRST_CONTENT..] {
            if v.index.contains_key(t) {
                return Err(Error::config(format!("duplicate vocabulary entry `{t}`")));
            }
            v.add(t);
        }
        Ok(v)
    }
}

/// Source and target content tokens, without sentinels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub pairs: Vec<Pair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Splits off the last `n` pairs as a held-out set sharing the vocabulary.
    pub fn split_off(&mut self, n: usize) -> Corpus {
        let at = self.pairs.len().saturating_sub(n);
        Corpus {
            vocab: self.vocab.clone(),
            pairs: self.pairs.split_off(at),
        }
    }

    pub fn max_len(&self) -> usize {
        self.pairs.iter().map(|p| p.src.len().max(p.tgt.len())).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    NoisyMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Total ids including the five reserved ones.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    /// NoisyMap substitution probability.
    pub noise: f64,
    /// NoisyMap multiplier; must be coprime with the content vocabulary size.
    pub map_a: usize,
    pub map_b: usize,
    /// Not read from config files; runs derive it from their root seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab_size: 50,
            min_len: 5,
            max_len: 20,
            count: 1000,
            noise: 0.1,
            map_a: 7,
            map_b: 3,
            seed: 0,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_CONTENT + 1 {
            return Err(Error::config(format!(
                "vocab_size {} leaves fewer than two content tokens",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "impossible length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise {} outside [0, 1]", self.noise)));
        }
        if self.kind == TaskKind::NoisyMap && gcd(self.map_a, self.content_size()) != 1 {
            return Err(Error::config(format!(
                "map_a {} is not coprime with content vocabulary size {}",
                self.map_a,
                self.content_size()
            )));
        }
        Ok(())
    }

    fn content_size(&self) -> usize {
        self.vocab_size - FIRST_CONTENT
    }

    /// Noise-free NoisyMap image of one content id.
    pub fn map_token(&self, id: usize) -> usize {
        let c = self.content_size();
        ((id - FIRST_CONTENT) * self.map_a + self.map_b) % c + FIRST_CONTENT
    }
}

/// Generates a paired corpus for one of the synthetic tasks.
pub fn gen_task(cfg: &TaskConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "task");
    let c = cfg.content_size();
    let mut pairs = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(FIRST_CONTENT..cfg.vocab_size)).collect();
        let tgt = match cfg.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::NoisyMap => src
                .iter()
                .map(|&s| {
                    let clean = cfg.map_token(s);
                    if cfg.noise > 0.0 && rng.gen::<f64>() < cfg.noise {
                        // uniform over the other c-1 content tokens
                        let r = rng.gen_range(0..c - 1) + FIRST_CONTENT;
                        if r >= clean {
                            r + 1
                        } else {
                            r
                        }
                    } else {
                        clean
                    }
                })
                .collect(),
        };
        pairs.push(Pair { src, tgt });
    }
    Ok(Corpus {
        vocab: Vocab::synthetic(cfg.vocab_size),
        pairs,
    })
}

/// Reads `source<TAB>target` lines. Blank lines are skipped.
pub fn read_tsv(path: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(src), Some(tgt), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected exactly one tab separating source and target".into(),
            });
        };
        let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        out.push((words(src), words(tgt)));
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(out)
}

/// Loads a training corpus, building the vocabulary from it.
pub fn load_tsv_corpus(path: &Path) -> Result<Corpus> {
    let raw = read_tsv(path)?;
    let mut vocab = Vocab::new();
    for (s, t) in &raw {
        for w in s.iter().chain(t) {
            vocab.add(w);
        }
    }
    Ok(encode_pairs(raw, vocab))
}

/// Loads an evaluation corpus against an existing vocabulary; unseen words map to [`UNK`].
pub fn load_tsv_with_vocab(path: &Path, vocab: &Vocab) -> Result<Corpus> {
    Ok(encode_pairs(read_tsv(path)?, vocab.clone()))
}

fn encode_pairs(raw: Vec<(Vec<String>, Vec<String>)>, vocab: Vocab) -> Corpus {
    let pairs = raw
        .iter()
        .map(|(s, t)| Pair {
            src: s.iter().map(|w| vocab.id(w)).collect(),
            tgt: t.iter().map(|w| vocab.id(w)).collect(),
        })
        .collect();
    Corpus { vocab, pairs }
}

pub fn write_tsv(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in &corpus.pairs {
        writeln!(f, "{}\t{}", corpus.vocab.decode(&p.src), corpus.vocab.decode(&p.tgt))?;
    }
    f.flush()?;
    Ok(())
}

/// Padded batch. Source rows are `x.. EOS PAD..`, target rows are
/// `BOS y.. EOS PAD..`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt: Vec<usize>,
    pub tgt_mask: Vec<bool>,
    /// Source lengths including the end sentinel.
    pub src_lengths: Vec<usize>,
    /// Target lengths including both sentinels.
    pub tgt_lengths: Vec<usize>,
    /// Position of each row's pair in the corpus it was drawn from.
    pub index: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[Pair], index: &[usize]) -> Result<Self> {
        if index.is_empty() {
            return Err(Error::contract("batch with no pairs"));
        }
        let size = index.len();
        let src_lengths: Vec<usize> = index.iter().map(|&i| pairs[i].src.len() + 1).collect();
        let tgt_lengths: Vec<usize> = index.iter().map(|&i| pairs[i].tgt.len() + 2).collect();
        let src_len = *src_lengths.iter().max().unwrap();
        let tgt_len = *tgt_lengths.iter().max().unwrap();
        let mut src = vec![PAD; size * src_len];
        let mut tgt = vec![PAD; size * tgt_len];
        for (r, &i) in index.iter().enumerate() {
            let p = &pairs[i];
            let srow = &mut src[r * src_len..(r + 1) * src_len];
            srow[..p.src.len()].copy_from_slice(&p.src);
            srow[p.src.len()] = EOS;
            let trow = &mut tgt[r * tgt_len..(r + 1) * tgt_len];
            trow[0] = BOS;
            trow[1..=p.tgt.len()].copy_from_slice(&p.tgt);
            trow[p.tgt.len() + 1] = EOS;
        }
        let mask = |lens: &[usize], width: usize| lens.iter().flat_map(|&l| (0..width).map(move |j| j < l)).collect::<Vec<_>>();
        Ok(Self {
            size,
            src_len,
            tgt_len,
            src_mask: mask(&src_lengths, src_len),
            tgt_mask: mask(&tgt_lengths, tgt_len),
            src,
            tgt,
            src_lengths,
            tgt_lengths,
            index: index.to_vec(),
        })
    }

    /// Number of decoder positions, `tgt_len - 1`.
    pub fn dec_len(&self) -> usize {
        self.tgt_len - 1
    }

    fn tgt_cols(&self, from: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.dec_len();
        (0..self.size).flat_map(move |b| (0..n).map(move |t| b * self.tgt_len + t + from))
    }

    /// Decoder inputs `[B, dec_len]`: target rows without their last column.
    pub fn dec_inputs(&self) -> Vec<usize> {
        self.tgt_cols(0).map(|i| self.tgt[i]).collect()
    }

    pub fn dec_mask(&self) -> Vec<bool> {
        self.tgt_cols(0).map(|i| self.tgt_mask[i]).collect()
    }

    /// Next-token labels `[B, dec_len]`: target rows shifted left by one.
    pub fn labels(&self) -> Vec<usize> {
        self.tgt_cols(1).map(|i| self.tgt[i]).collect()
    }

    pub fn label_mask(&self) -> Vec<bool> {
        self.tgt_cols(1).map(|i| self.tgt_mask[i]).collect()
    }

    /// Padded token cost used against the batch budget.
    pub fn cost(&self) -> usize {
        self.size * self.src_len.max(self.tgt_len)
    }

    /// Non-pad label count.
    pub fn num_labels(&self) -> usize {
        self.tgt_lengths.iter().map(|l| l - 1).sum()
    }
}

fn pair_cost(p: &Pair) -> usize {
    (p.src.len() + 1).max(p.tgt.len() + 2)
}

/// Groups `order` (already arranged) into consecutive batches whose padded
/// cost stays within `budget`. A pair that alone exceeds the budget becomes
/// a batch of one.
fn pack(pairs: &[Pair], order: &[usize], budget: usize) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut width = 0;
    for &i in order {
        let w = width.max(pair_cost(&pairs[i]));
        if !cur.is_empty() && w * (cur.len() + 1) > budget {
            out.push(Batch::from_pairs(pairs, &cur)?);
            cur.clear();
            width = 0;
        }
        width = width.max(pair_cost(&pairs[i]));
        cur.push(i);
    }
    if !cur.is_empty() {
        out.push(Batch::from_pairs(pairs, &cur)?);
    }
    Ok(out)
}

/// One epoch of length-bucketed batches under a token budget, in an order
/// fixed by `seed` and `epoch`.
pub fn batchify(pairs: &[Pair], budget: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    let mut r = rng::stream_at(seed, "batches", epoch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut r);
    // stable sort keeps the shuffled order among equal lengths
    order.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len()));
    let mut batches = pack(pairs, &order, budget)?;
    batches.shuffle(&mut r);
    Ok(batches)
}

/// Batches in corpus order, for evaluation.
pub fn batches_in_order(pairs: &[Pair], budget: usize) -> Result<Vec<Batch>> {
    let order: Vec<usize> = (0..pairs.len()).collect();
    pack(pairs, &order, budget)
}

/// Endless batch stream cycling through epochs.
#[derive(Clone)]
pub struct BatchStream<'a> {
    pairs: &'a [Pair],
    budget: usize,
    seed: u64,
    epoch: u64,
    queue: std::vec::IntoIter<Batch>,
}

impl<'a> BatchStream<'a> {
    pub fn new(pairs: &'a [Pair], budget: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus("no training pairs".into()));
        }
        Ok(Self {
            pairs,
            budget,
            seed,
            epoch: 0,
            queue: Vec::new().into_iter(),
        })
    }

    /// Skips ahead by `n` batches (used when resuming).
    pub fn skip_batches(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.next_batch()?;
        }
        Ok(())
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        loop {
            if let Some(b) = self.queue.next() {
                return Ok(b);
            }
            self.queue = batchify(self.pairs, self.budget, self.seed, self.epoch)?.into_iter();
            self.epoch += 1;
        }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.next_batch().ok()
    }
}
