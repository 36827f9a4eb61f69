//! Subcommand implementations behind the `swae` binary. Each command is a
//! pure function of its inputs: a checkpoint (or config), a corpus and a
//! seed.

use std::fmt::Write as _;
use std::path::Path;

use swae::config::TrainConfig;
use swae::data::{Sentence, Vocab};
use swae::latent::{encode_posteriors, sigma_histogram, sigma_summary, standard_normal_vec, SigmaHistogram};
use swae::metrics::{avg_len, bleu, bleu_n, distinct_n, perplexity, unigram_kl, word_entropy, NgramLM};
use swae::persistence::{save_checkpoint, write_log};
use swae::train::{EpochSummary, LogRow, Trainer};
use swae::{seeded_rng, Error, Result};

/// Order and add-k constant of the perplexity LM.
pub const PPL_LM_ORDER: usize = 3;
pub const PPL_LM_K: f64 = 0.01;
/// Add-k constant of the unigram KL.
pub const UNIKL_K: f64 = 0.01;
/// σ threshold reported by `sigma-hist`.
pub const SIGMA_THRESHOLD: f64 = 0.1;

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn summaries(&self) -> &[EpochSummary] {
        &self.trainer.state.summaries
    }
}

/// Trains for `config.epochs` epochs. Writes the checkpoint and the log when
/// their paths are set.
pub fn cmd_train(config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    trainer.run()?;
    finish_training(trainer)
}

/// Continues a loaded checkpoint up to `epochs` total epochs.
pub fn cmd_resume(mut trainer: Trainer, epochs: usize) -> Result<TrainOutcome> {
    trainer.config.epochs = epochs;
    trainer.run()?;
    finish_training(trainer)
}

fn finish_training(mut trainer: Trainer) -> Result<TrainOutcome> {
    let log = std::mem::take(&mut trainer.log);
    if let Some(p) = &trainer.config.log {
        write_log(p, &log)?;
    }
    if let Some(p) = &trainer.config.checkpoint {
        save_checkpoint(p, &trainer)?;
    }
    Ok(TrainOutcome { trainer, log })
}

fn encode_all(vocab: &Vocab, sentences: &[Sentence]) -> Result<Vec<Vec<usize>>> {
    if sentences.is_empty() {
        return Err(Error::InvalidArgument("no input sentences".into()));
    }
    if let Some(i) = sentences.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("sentence {i} is empty")));
    }
    Ok(sentences.iter().map(|s| vocab.encode(s)).collect())
}

/// Greedy decodes of the posterior means (or deterministic codes).
fn decode_codes(t: &Trainer, sentences: &[Sentence]) -> Result<Vec<Sentence>> {
    let ids = encode_all(&t.vocab, sentences)?;
    let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    let codes = t.model.latent_means(&refs)?;
    let outs = t.model.decode_greedy_batch(&codes, t.config.max_len)?;
    Ok(outs.iter().map(|o| t.vocab.decode(o)).collect())
}

pub struct Reconstruction {
    pub outputs: Vec<Sentence>,
    pub bleu: f64,
}

/// Encodes each sentence (posterior mean for stochastic encoders), decodes
/// greedily and scores corpus BLEU against the inputs.
pub fn cmd_reconstruct(t: &Trainer, sentences: &[Sentence]) -> Result<Reconstruction> {
    if t.config.mode.is_dialog() {
        return Err(Error::InvalidArgument(format!(
            "reconstruct needs an autoencoder checkpoint, got {}",
            t.config.mode
        )));
    }
    let outputs = decode_codes(t, sentences)?;
    let bleu = bleu(&outputs, sentences)?;
    Ok(Reconstruction { outputs, bleu })
}

/// Greedy decodes of `count` draws from N(0, I).
pub fn cmd_sample(t: &Trainer, count: usize, seed: u64) -> Result<Vec<Sentence>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let zs: Vec<Vec<f64>> = (0..count)
        .map(|_| standard_normal_vec(t.model.dims.latent, &mut rng))
        .collect();
    let outs = t.model.decode_greedy_batch(&zs, t.config.max_len)?;
    Ok(outs.iter().map(|o| t.vocab.decode(o)).collect())
}

/// Decodes `steps` evenly spaced points on the line between the codes of
/// `a` and `b`.
pub fn cmd_interpolate(t: &Trainer, a: &Sentence, b: &Sentence, steps: usize) -> Result<Vec<Sentence>> {
    if steps < 2 {
        return Err(Error::InvalidArgument("steps must be at least 2".into()));
    }
    let ids = encode_all(&t.vocab, &[a.clone(), b.clone()])?;
    let codes = t.model.latent_means(&[&ids[0], &ids[1]])?;
    let zs: Vec<Vec<f64>> = (0..steps)
        .map(|i| {
            let s = i as f64 / (steps - 1) as f64;
            codes[0]
                .iter()
                .zip(&codes[1])
                .map(|(x, y)| (1.0 - s) * x + s * y)
                .collect()
        })
        .collect();
    let outs = t.model.decode_greedy_batch(&zs, t.config.max_len)?;
    Ok(outs.iter().map(|o| t.vocab.decode(o)).collect())
}

/// Reference data for `evaluate`.
pub enum Reference {
    Sentences(Vec<Sentence>),
    Pairs(Vec<Sentence>, Vec<Sentence>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Autoencoder {
        mode: String,
        samples: usize,
        bleu: f64,
        ppl: f64,
        unikl: f64,
        entropy: f64,
        avg_len: f64,
        entropy_base: f64,
    },
    Dialog {
        mode: String,
        bleu2: f64,
        bleu4: f64,
        entropy: f64,
        dist1: f64,
        dist2: f64,
        entropy_base: f64,
    },
}

impl EvalReport {
    pub fn columns(&self) -> Vec<(&'static str, f64)> {
        match *self {
            EvalReport::Autoencoder {
                bleu,
                ppl,
                unikl,
                entropy,
                avg_len,
                ..
            } => vec![
                ("BLEU", bleu),
                ("PPL", ppl),
                ("UniKL", unikl),
                ("Entropy", entropy),
                ("AvgLen", avg_len),
            ],
            EvalReport::Dialog {
                bleu2,
                bleu4,
                entropy,
                dist1,
                dist2,
                ..
            } => vec![
                ("BLEU-2", bleu2),
                ("BLEU-4", bleu4),
                ("Entropy", entropy),
                ("Dist-1", dist1),
                ("Dist-2", dist2),
            ],
        }
    }

    /// Header line and value line, tab-separated.
    pub fn to_tsv(&self) -> String {
        let cols = self.columns();
        let head: Vec<&str> = cols.iter().map(|c| c.0).collect();
        let vals: Vec<String> = cols.iter().map(|c| c.1.to_string()).collect();
        format!("{}\n{}\n", head.join("\t"), vals.join("\t"))
    }

    /// `key: value` lines preceded by `#` protocol notes. BLEU scores are
    /// given in [0, 1] with the ×100 value in parentheses.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self {
            EvalReport::Autoencoder {
                mode,
                samples,
                entropy_base,
                ..
            } => {
                let _ = writeln!(s, "# mode: {mode}");
                let _ = writeln!(s, "# BLEU: reconstruction of the reference corpus from the posterior mean, greedy decoding");
                let _ = writeln!(
                    s,
                    "# PPL, UniKL, Entropy, AvgLen: greedy decodes of {samples} samples from N(0, I)"
                );
                let _ = writeln!(
                    s,
                    "# PPL: order-{PPL_LM_ORDER} add-{PPL_LM_K} LM trained on the reference corpus"
                );
                let _ = writeln!(s, "# Entropy: log base {entropy_base}");
            }
            EvalReport::Dialog {
                mode, entropy_base, ..
            } => {
                let _ = writeln!(s, "# mode: {mode}");
                let _ = writeln!(s, "# responses: greedy decodes from the source code (posterior mean)");
                let _ = writeln!(s, "# Entropy: log base {entropy_base}");
            }
        }
        for (k, v) in self.columns() {
            if k.starts_with("BLEU") {
                let _ = writeln!(s, "{k}: {v:.6} ({:.2})", 100.0 * v);
            } else {
                let _ = writeln!(s, "{k}: {v:.6}");
            }
        }
        s
    }
}

pub struct EvalOptions {
    pub samples: usize,
    pub seed: u64,
    pub entropy_base: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            entropy_base: 2.0,
        }
    }
}

/// Autoencoder checkpoints: reconstruction BLEU on the reference plus
/// PPL/UniKL/Entropy/AvgLen of prior samples. Dialog checkpoints: BLEU-2,
/// BLEU-4, Entropy, Dist-1 and Dist-2 of responses to the reference sources.
pub fn cmd_evaluate(t: &Trainer, reference: &Reference, opts: &EvalOptions) -> Result<EvalReport> {
    let mode = t.config.mode.to_string();
    match (reference, t.config.mode.is_dialog()) {
        (Reference::Sentences(refs), false) => {
            if refs.is_empty() {
                return Err(Error::InvalidArgument("reference corpus is empty".into()));
            }
            let rec = cmd_reconstruct(t, refs)?;
            let samples = cmd_sample(t, opts.samples, opts.seed)?;
            let lm = NgramLM::train(refs, PPL_LM_ORDER, PPL_LM_K)?;
            let nonempty: Vec<Sentence> = samples.iter().filter(|s| !s.is_empty()).cloned().collect();
            Ok(EvalReport::Autoencoder {
                mode,
                samples: opts.samples,
                bleu: rec.bleu,
                ppl: perplexity(&lm, &samples)?,
                unikl: if nonempty.is_empty() {
                    f64::INFINITY
                } else {
                    unigram_kl(&nonempty, refs, UNIKL_K)?
                },
                entropy: if nonempty.is_empty() { 0.0 } else { word_entropy(&nonempty, opts.entropy_base)? },
                avg_len: avg_len(&samples)?,
                entropy_base: opts.entropy_base,
            })
        }
        (Reference::Pairs(src, tgt), true) => {
            if src.is_empty() || src.len() != tgt.len() {
                return Err(Error::InvalidArgument(
                    "reference pairs are empty or misaligned".into(),
                ));
            }
            let responses = decode_codes(t, src)?;
            let nonempty: Vec<Sentence> = responses.iter().filter(|s| !s.is_empty()).cloned().collect();
            Ok(EvalReport::Dialog {
                mode,
                bleu2: bleu_n(&responses, tgt, 2)?,
                bleu4: bleu_n(&responses, tgt, 4)?,
                entropy: if nonempty.is_empty() { 0.0 } else { word_entropy(&nonempty, opts.entropy_base)? },
                dist1: distinct_n(&responses, 1).unwrap_or(0.0),
                dist2: distinct_n(&responses, 2).unwrap_or(0.0),
                entropy_base: opts.entropy_base,
            })
        }
        (Reference::Pairs(..), false) => Err(Error::InvalidArgument(format!(
            "{mode} is an autoencoder; the reference must be a plain corpus"
        ))),
        (Reference::Sentences(_), true) => Err(Error::InvalidArgument(format!(
            "{mode} is a dialog model; the reference must be a paired corpus"
        ))),
    }
}

pub struct SigmaReport {
    pub histogram: SigmaHistogram,
    pub fraction_below: f64,
    pub median: f64,
    pub components: usize,
}

impl SigmaReport {
    pub fn summary_text(&self) -> String {
        format!(
            "components: {}\nfraction_below_{SIGMA_THRESHOLD}: {:.6}\nmedian_sigma: {:.6}\n",
            self.components, self.fraction_below, self.median
        )
    }
}

/// σ histogram and summary of the posteriors over `sentences`.
pub fn cmd_sigma_hist(t: &Trainer, sentences: &[Sentence]) -> Result<SigmaReport> {
    if !t.model.stochastic {
        return Err(Error::InvalidArgument(format!(
            "sigma-hist needs a stochastic encoder (vae, wae-s, ved, wed-s); {} encodes deterministically",
            t.config.mode
        )));
    }
    let ids = encode_all(&t.vocab, sentences)?;
    let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
    let posts = encode_posteriors(&t.model, &refs)?;
    let histogram = sigma_histogram(&posts)?;
    let (fraction_below, median) = sigma_summary(&posts, SIGMA_THRESHOLD);
    Ok(SigmaReport {
        components: posts.len() * t.model.dims.latent,
        histogram,
        fraction_below,
        median,
    })
}

/// Writes `text` to `path`, creating or truncating it.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Joins sentences one per line.
pub fn format_sentences(sentences: &[Sentence]) -> String {
    let mut s = String::new();
    for x in sentences {
        s.push_str(&x.join(" "));
        s.push('\n');
    }
    s
}

/// Lowercased whitespace tokenization, as in corpus files.
pub fn tokenize(text: &str) -> Sentence {
    text.split_whitespace().map(str::to_lowercase).collect()
}
