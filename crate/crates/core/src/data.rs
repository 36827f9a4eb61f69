//! Corpora, vocabulary, batching and the built-in toy grammar.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::{Error, Result, Rng};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub type Sentence = Vec<String>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the `max_size - 4` most frequent tokens; ties go to the token
    /// seen first.
    pub fn build(sentences: &[Sentence], max_size: usize) -> Result<Self> {
        if max_size < 5 {
            return Err(Error::arg(format!(
                "vocabulary size must be at least 5, got {max_size}"
            )));
        }
        if sentences.is_empty() {
            return Err(Error::arg("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut order = 0;
        for tok in sentences.iter().flatten() {
            let e = counts.entry(tok.as_str()).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            e.0 += 1;
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(
                ranked
                    .into_iter()
                    .filter(|(t, _, _)| !RESERVED.contains(t))
                    .take(max_size - RESERVED.len())
                    .map(|(t, _, _)| t.to_string()),
            )
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    /// Rebuilds from an id-ordered token list whose first four entries are
    /// the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Sentence {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

fn tokenize(line: &str, max_len: usize) -> Sentence {
    line.split_whitespace()
        .take(max_len)
        .map(str::to_lowercase)
        .collect()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// One lowercased, whitespace-tokenized sentence per non-blank line,
/// truncated to `max_len` tokens.
pub fn load_corpus(path: impl AsRef<Path>, max_len: usize) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let sentences: Vec<Sentence> = read(path)?
        .lines()
        .map(|l| tokenize(l, max_len))
        .filter(|s| !s.is_empty())
        .collect();
    if sentences.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no usable sentences".into(),
        });
    }
    Ok(sentences)
}

pub fn write_corpus(path: impl AsRef<Path>, sentences: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in sentences {
        text.push_str(&s.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Tab-separated `utterance<TAB>response` lines; exact duplicate pairs are
/// kept once.
pub fn load_paired_corpus(
    path: impl AsRef<Path>,
    max_len: usize,
) -> Result<(Vec<Sentence>, Vec<Sentence>)> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut seen = HashSet::new();
    let (mut sources, mut targets) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((src, tgt)) = line.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected utterance<TAB>response".into(),
            });
        };
        let (src, tgt) = (tokenize(src, max_len), tokenize(tgt, max_len));
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty utterance or response".into(),
            });
        }
        if seen.insert((src.clone(), tgt.clone())) {
            sources.push(src);
            targets.push(tgt);
        }
    }
    if sources.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no usable pairs".into(),
        });
    }
    Ok((sources, targets))
}

/// `N × T` token matrix, each row `BOS w1 .. wL EOS` followed by PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_sentences(sentences: &[Vec<usize>]) -> Self {
        let width = sentences.iter().map(|s| s.len() + 2).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sentences.len());
        let mut lengths = Vec::with_capacity(sentences.len());
        for s in sentences {
            let mut row = Vec::with_capacity(width);
            row.push(BOS);
            row.extend_from_slice(s);
            row.push(EOS);
            lengths.push(row.len());
            row.resize(width, PAD);
            ids.push(row);
        }
        Self { ids, lengths }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Word ids of row `i` without BOS/EOS.
    pub fn sentence(&self, i: usize) -> &[usize] {
        &self.ids[i][1..self.lengths[i] - 1]
    }

    pub fn sentences(&self) -> Vec<&[usize]> {
        (0..self.len()).map(|i| self.sentence(i)).collect()
    }

    /// PAD appears only as a suffix and lengths agree with it.
    pub fn is_well_formed(&self) -> bool {
        self.ids.iter().zip(&self.lengths).all(|(row, &len)| {
            len >= 2
                && len <= row.len()
                && row[0] == BOS
                && row[len - 1] == EOS
                && row[..len].iter().all(|&t| t != PAD)
                && row[len..].iter().all(|&t| t == PAD)
        })
    }
}

/// Shuffled index groups of size `n`; a final group smaller than 2 is
/// dropped so every batch can feed the MMD estimator.
pub fn batch_indices(count: usize, n: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(n)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn make_batches(
    sentences: &[Sentence],
    vocab: &Vocab,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    let encoded: Vec<Vec<usize>> = sentences.iter().map(|s| vocab.encode(s)).collect();
    Ok(batch_indices(encoded.len(), n, rng)?
        .into_iter()
        .map(|idx| {
            let rows: Vec<Vec<usize>> = idx.iter().map(|&i| encoded[i].clone()).collect();
            Batch::from_sentences(&rows)
        })
        .collect())
}

/// Word classes of the toy grammar.
pub mod grammar {
    pub const DET: &[&str] = &["a", "the"];
    pub const ADJ: &[&str] = &["small", "big", "old", "young", "happy", "tired", "red", "quiet"];
    pub const NOUN: &[&str] = &[
        "man", "woman", "dog", "cat", "child", "boy", "girl", "bird", "horse", "player", "student",
        "chef", "ball", "car",
    ];
    pub const VERB_T: &[&str] = &[
        "sees", "holds", "chases", "likes", "watches", "carries", "pushes", "finds",
    ];
    pub const VERB_I: &[&str] = &["sleeps", "runs", "sits", "waits", "smiles", "jumps"];
    pub const ADV: &[&str] = &["quickly", "slowly", "quietly", "outside", "today", "again"];
    pub const PREP: &[&str] = &["in", "near", "on", "under", "behind", "with"];

    pub const P_ADJ: f64 = 0.4;
    pub const P_TRANSITIVE: f64 = 0.7;
    pub const P_ADV_AFTER_OBJECT: f64 = 0.3;
    pub const P_PP: f64 = 0.4;
}

/// Names the grammar to draw from; only the built-in one exists.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GrammarSpec {
    #[default]
    SubjectVerbObject,
}

fn pick<'a>(words: &[&'a str], rng: &mut Rng) -> &'a str {
    words[rng.random_range(0..words.len())]
}

fn noun_phrase(out: &mut Sentence, rng: &mut Rng) {
    use grammar::*;
    out.push(pick(DET, rng).into());
    if rng.random::<f64>() < P_ADJ {
        out.push(pick(ADJ, rng).into());
    }
    out.push(pick(NOUN, rng).into());
}

/// Samples `S -> NP VP [PP]`, `NP -> Det [Adj] Noun`,
/// `VP -> Vt NP [Adv] | Vi Adv`, `PP -> Prep NP`. Lengths fall in 4..=12.
pub fn synth_corpus(_grammar: GrammarSpec, count: usize, rng: &mut Rng) -> Vec<Sentence> {
    use grammar::*;
    (0..count)
        .map(|_| {
            let mut s = Vec::with_capacity(12);
            noun_phrase(&mut s, rng);
            if rng.random::<f64>() < P_TRANSITIVE {
                s.push(pick(VERB_T, rng).into());
                noun_phrase(&mut s, rng);
                if rng.random::<f64>() < P_ADV_AFTER_OBJECT {
                    s.push(pick(ADV, rng).into());
                }
            } else {
                s.push(pick(VERB_I, rng).into());
                s.push(pick(ADV, rng).into());
            }
            if rng.random::<f64>() < P_PP {
                s.push(pick(PREP, rng).into());
                noun_phrase(&mut s, rng);
            }
            s
        })
        .collect()
}

/// Recognizer for the toy grammar.
pub fn grammar_accepts(sentence: &[String]) -> bool {
    use grammar::*;
    let words: Vec<&str> = sentence.iter().map(String::as_str).collect();
    let is = |class: &[&str], w: Option<&&str>| w.is_some_and(|w| class.contains(w));

    fn np(words: &[&str], at: usize) -> Option<usize> {
        let is = |class: &[&str], i: usize| words.get(i).is_some_and(|w| class.contains(w));
        if !is(DET, at) {
            return None;
        }
        let mut i = at + 1;
        if is(ADJ, i) {
            i += 1;
        }
        is(NOUN, i).then_some(i + 1)
    }

    let Some(mut i) = np(&words, 0) else {
        return false;
    };
    if is(VERB_T, words.get(i)) {
        let Some(j) = np(&words, i + 1) else {
            return false;
        };
        i = j;
        if is(ADV, words.get(i)) {
            i += 1;
        }
    } else if is(VERB_I, words.get(i)) && is(ADV, words.get(i + 1)) {
        i += 2;
    } else {
        return false;
    }
    if i == words.len() {
        return true;
    }
    if !is(PREP, words.get(i)) {
        return false;
    }
    np(&words, i + 1) == Some(words.len())
}
