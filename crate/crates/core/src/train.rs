//! The training loop: batching, optimization, schedules and the per-step
//! log.

use std::fmt::Write as _;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::{adam_step, clip_global_norm, AdamConfig, OptimState, Tape};
use crate::config::TrainConfig;
use crate::data::{
    batch_indices, load_corpus, load_paired_corpus, synth_corpus, Batch, GrammarSpec, Sentence,
    Vocab,
};
use crate::objectives::{
    objective_graph, word_dropout_rate, AnnealSchedule, LossBreakdown, LossSettings, TrainBatch,
};
use crate::seqmodel::SeqModel;
use crate::{seeded_rng, Error, Result, Rng};

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_SYNTH: u64 = 3;
const STREAM_SHUFFLE_BASE: u64 = 1000;

fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream);
    rng
}

/// Raw training text: plain sentences or (source, target) pairs.
#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    Sentences(Vec<Sentence>),
    Pairs(Vec<(Sentence, Sentence)>),
}

impl Corpus {
    /// Reads `config.corpus`, or draws the synthetic corpus from `seed`.
    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        match (&config.corpus, config.mode.is_dialog()) {
            (Some(path), true) => {
                let (src, tgt) = load_paired_corpus(path, config.max_len)?;
                Ok(Corpus::Pairs(src.into_iter().zip(tgt).collect()))
            }
            (Some(path), false) => Ok(Corpus::Sentences(load_corpus(path, config.max_len)?)),
            (None, true) => Err(Error::Config(format!(
                "{} needs a paired corpus (corpus = path)",
                config.mode
            ))),
            (None, false) => Ok(Corpus::Sentences(synthetic_corpus(
                config.seed,
                config.synth_sentences,
            ))),
        }
    }

    fn all_sentences(&self) -> Vec<Sentence> {
        match self {
            Corpus::Sentences(s) => s.clone(),
            Corpus::Pairs(p) => p
                .iter()
                .flat_map(|(a, b)| [a.clone(), b.clone()])
                .collect(),
        }
    }
}

/// The synthetic corpus a config with no corpus path trains on.
pub fn synthetic_corpus(seed: u64, count: usize) -> Vec<Sentence> {
    synth_corpus(
        GrammarSpec::SubjectVerbObject,
        count,
        &mut stream_rng(seed, STREAM_SYNTH),
    )
}

/// One encoded training pair; `source == target` for autoencoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// One row of the tab-separated training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: LossBreakdown,
    /// Active regularizer weight: λ_VAE(t), λ_WAE, or 0 for plain
    /// autoencoders.
    pub lambda: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step\tepoch\trec\tkl\tmmd\taux_kl\tlambda\ttotal";

    pub fn to_tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.epoch, l.reconstruction, l.kl, l.mmd, l.aux_kl, self.lambda, l.total
        )
    }
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LogRow::HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_tsv());
    }
    s
}

/// Per-epoch means, per example unless noted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub reconstruction: f64,
    /// Reconstruction per target token (EOS included).
    pub reconstruction_per_token: f64,
    pub kl: f64,
    pub weighted_kl: f64,
    pub mmd: f64,
    pub aux_kl: f64,
    pub lambda: f64,
    pub lr: f64,
    pub frozen: bool,
}

/// Running sums over the current epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochAccumulator {
    pub examples: u64,
    pub tokens: u64,
    pub batches: u64,
    pub reconstruction: f64,
    pub kl: f64,
    pub weighted_kl: f64,
    pub mmd: f64,
    pub aux_kl: f64,
    pub lambda: f64,
}

/// Counters and schedule state; everything besides parameters, optimizer
/// moments and the RNG that a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: usize,
    pub lr: f64,
    pub schedule: AnnealSchedule,
    pub accum: EpochAccumulator,
    pub summaries: Vec<EpochSummary>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: SeqModel,
    pub optim: OptimState,
    pub rng: Rng,
    pub state: TrainState,
    pub examples: Vec<Example>,
    /// Rows produced by this process; a resumed trainer starts empty.
    pub log: Vec<LogRow>,
    order: Option<(u64, Vec<Vec<usize>>)>,
}

impl Trainer {
    /// Loads or synthesizes the corpus named by `config` and initializes a
    /// fresh model.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let corpus = Corpus::from_config(&config)?;
        Self::with_corpus(config, corpus)
    }

    pub fn with_corpus(config: TrainConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        match (&corpus, config.mode.is_dialog()) {
            (Corpus::Pairs(_), false) => {
                return Err(Error::Config(format!(
                    "{} trains on plain sentences, got a paired corpus",
                    config.mode
                )))
            }
            (Corpus::Sentences(_), true) => {
                return Err(Error::Config(format!(
                    "{} needs a paired corpus",
                    config.mode
                )))
            }
            _ => {}
        }
        let vocab = Vocab::build(&corpus.all_sentences(), config.vocab_size)?;
        let examples: Vec<Example> = match &corpus {
            Corpus::Sentences(s) => s
                .iter()
                .map(|x| {
                    let ids = vocab.encode(x);
                    Example {
                        source: ids.clone(),
                        target: ids,
                    }
                })
                .collect(),
            Corpus::Pairs(p) => p
                .iter()
                .map(|(a, b)| Example {
                    source: vocab.encode(a),
                    target: vocab.encode(b),
                })
                .collect(),
        };
        if examples.len() < 2 {
            return Err(Error::Config(format!(
                "corpus has {} usable examples; at least 2 are needed",
                examples.len()
            )));
        }
        let dims = config.dims(vocab.len());
        let model = SeqModel::new(
            dims,
            config.mode.is_stochastic(),
            &mut stream_rng(config.seed, STREAM_INIT),
        );
        let optim = OptimState::for_shapes(model.params.values.iter().map(Vec::len));
        let spe = steps_per_epoch(examples.len(), config.batch_size);
        let schedule = if config.uses_annealing() {
            AnnealSchedule::from_epochs(
                config.lambda_vae,
                config.anneal_midpoint_epochs,
                config.anneal_width_epochs,
                spe,
            )
        } else {
            AnnealSchedule::constant(config.lambda_vae)
        };
        let state = TrainState {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            lr: config.lr,
            schedule,
            accum: EpochAccumulator::default(),
            summaries: Vec::new(),
        };
        let rng = stream_rng(config.seed, STREAM_TRAIN);
        Ok(Self {
            config,
            vocab,
            model,
            optim,
            rng,
            state,
            examples,
            log: Vec::new(),
            order: None,
        })
    }

    /// Reassembles a trainer from saved parts.
    pub fn from_parts(
        config: TrainConfig,
        vocab: Vocab,
        model: SeqModel,
        optim: OptimState,
        rng: Rng,
        state: TrainState,
        examples: Vec<Example>,
    ) -> Self {
        Self {
            config,
            vocab,
            model,
            optim,
            rng,
            state,
            examples,
            log: Vec::new(),
            order: None,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.examples.len(), self.config.batch_size)
    }

    fn epoch_order(&mut self) -> Result<&[Vec<usize>]> {
        let epoch = self.state.epoch;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = stream_rng(self.config.seed, STREAM_SHUFFLE_BASE + epoch);
            let order = batch_indices(self.examples.len(), self.config.batch_size, &mut rng)?;
            self.order = Some((epoch, order));
        }
        Ok(&self.order.as_ref().expect("order set above").1)
    }

    /// Current regularizer weight for the log.
    fn active_lambda(&self) -> f64 {
        let m = self.config.mode;
        if m.is_vae() {
            self.state.schedule.lambda(self.state.step)
        } else if m.is_wae() {
            self.config.lambda_wae
        } else {
            0.0
        }
    }

    /// Runs one optimization step and returns its log row.
    pub fn step(&mut self) -> Result<LogRow> {
        let b = self.state.batch_in_epoch;
        let idx = self.epoch_order()?[b].clone();
        let src: Vec<Vec<usize>> = idx.iter().map(|&i| self.examples[i].source.clone()).collect();
        let tgt: Vec<Vec<usize>> = idx.iter().map(|&i| self.examples[i].target.clone()).collect();
        let batch = TrainBatch::paired(Batch::from_sentences(&src), Batch::from_sentences(&tgt))?;

        let lambda_vae = self.state.schedule.lambda(self.state.step);
        let objective = self.config.objective(lambda_vae);
        let settings = LossSettings {
            kernel: self.config.kernel(),
            cross_factor: self.config.cross_factor,
            word_dropout: if self.config.uses_word_dropout() {
                word_dropout_rate(self.state.epoch)
            } else {
                0.0
            },
        };

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let (total, loss) = objective_graph(
            &mut tape,
            &self.model,
            &bound,
            &batch,
            objective,
            settings,
            &mut self.rng,
        )?;
        tape.backward(total)?;
        let mut grads = self.model.params.grads(&tape, &bound.vars);
        drop(tape);
        clip_global_norm(&mut grads, self.config.clip_norm);
        adam_step(
            &mut self.model.params.values,
            &grads,
            &mut self.optim,
            self.state.lr,
            AdamConfig::default(),
        )?;

        let row = LogRow {
            step: self.state.step,
            epoch: self.state.epoch,
            loss,
            lambda: self.active_lambda(),
        };
        let a = &mut self.state.accum;
        a.examples += batch.len() as u64;
        a.tokens += tgt.iter().map(|t| t.len() as u64 + 1).sum::<u64>();
        a.batches += 1;
        a.reconstruction += loss.reconstruction;
        a.kl += loss.kl;
        a.weighted_kl += loss.lambda_vae * loss.kl;
        a.mmd += loss.mmd;
        a.aux_kl += loss.aux_kl;
        a.lambda += row.lambda;

        self.state.step += 1;
        self.state.batch_in_epoch += 1;
        if self.state.batch_in_epoch == self.steps_per_epoch() {
            self.end_epoch();
        }
        self.log.push(row);
        Ok(row)
    }

    fn end_epoch(&mut self) {
        let a = std::mem::take(&mut self.state.accum);
        let n = a.examples.max(1) as f64;
        let b = a.batches.max(1) as f64;
        let weighted_kl = a.weighted_kl / n;
        let s = &mut self.state;
        s.schedule.observe_epoch(weighted_kl, s.step);
        s.summaries.push(EpochSummary {
            epoch: s.epoch,
            reconstruction: a.reconstruction / n,
            reconstruction_per_token: a.reconstruction / a.tokens.max(1) as f64,
            kl: a.kl / n,
            weighted_kl,
            mmd: a.mmd / b,
            aux_kl: a.aux_kl / n,
            lambda: a.lambda / b,
            lr: s.lr,
            frozen: s.schedule.is_frozen(),
        });
        if self.config.mode.is_dialog() {
            s.lr = (s.lr * self.config.lr_decay).max(self.config.lr_min);
        }
        s.epoch += 1;
        s.batch_in_epoch = 0;
    }

    pub fn train_steps(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }

    /// Trains until `config.epochs` epochs have completed.
    pub fn run(&mut self) -> Result<()> {
        while self.state.epoch < self.config.epochs as u64 {
            self.step()?;
        }
        Ok(())
    }

    /// Reconstructs the RNG from saved components.
    pub fn rng_from_state(seed: [u8; 32], stream: u64, word_pos: u128) -> Rng {
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        rng
    }
}

pub fn steps_per_epoch(examples: usize, batch_size: usize) -> usize {
    let full = examples / batch_size;
    full + usize::from(examples % batch_size >= 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    fn tiny(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            seed: 11,
            embed_dim: 6,
            hidden_dim: 8,
            latent_dim: 3,
            batch_size: 4,
            synth_sentences: 10,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn epoch_counting_and_accumulators() {
        let mut t = Trainer::new(tiny(Mode::Vae)).unwrap();
        assert_eq!(t.steps_per_epoch(), 3);
        t.run().unwrap();
        assert_eq!(t.state.step, 6);
        assert_eq!(t.state.summaries.len(), 2);
        assert_eq!(t.state.batch_in_epoch, 0);
        assert_eq!(t.log.len(), 6);
        assert!(t.log.iter().all(|r| r.loss.total.is_finite()));
    }

    #[test]
    fn steps_per_epoch_drops_singletons() {
        assert_eq!(steps_per_epoch(10, 4), 3);
        assert_eq!(steps_per_epoch(9, 4), 2);
        assert_eq!(steps_per_epoch(8, 4), 2);
    }

    #[test]
    fn log_format() {
        let row = LogRow {
            step: 3,
            epoch: 1,
            loss: LossBreakdown {
                reconstruction: 1.5,
                total: 1.5,
                ..LossBreakdown::default()
            },
            lambda: 0.0,
        };
        let text = format_log(&[row]);
        assert_eq!(text, format!("{}\n3\t1\t1.5\t0\t0\t0\t0\t1.5\n", LogRow::HEADER));
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::RngCore;
        let mut rng = stream_rng(5, STREAM_TRAIN);
        rng.next_u64();
        let mut copy = Trainer::rng_from_state(rng.get_seed(), rng.get_stream(), rng.get_word_pos());
        assert_eq!(rng.next_u64(), copy.next_u64());
    }
}
