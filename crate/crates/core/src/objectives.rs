//! Training objectives for the four autoencoder variants and the VAE
//! training schedules.
//!
//! All losses are sums over the batch. With `rec` the teacher-forced
//! cross-entropy:
//!
//! | variant | z                         | total                               |
//! |---------|---------------------------|-------------------------------------|
//! | DAE     | encoder code              | `rec`                               |
//! | VAE     | sample from `q(z|x)`      | `rec + λ_VAE · KL(q ‖ N(0,I))`      |
//! | WAE-D   | encoder code              | `rec + λ_WAE · MMD`                 |
//! | WAE-S   | sample from `q(z|x)`      | `rec + λ_WAE · MMD + λ_KL · KL(q ‖ N(μ,I))` |

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::data::Batch;
use crate::latent::{
    aux_kl_tape, kl_standard_normal_tape, mmd_tape, reparameterize_tape, standard_normal_vec,
    KernelConfig,
};
use crate::seqmodel::{Bound, SeqModel};
use crate::{Error, Result, Rng};

/// Encoder input and decoder target of each example. For autoencoding both
/// hold the same sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainBatch {
    pub source: Batch,
    pub target: Batch,
}

impl TrainBatch {
    pub fn autoencoding(batch: Batch) -> Self {
        Self {
            source: batch.clone(),
            target: batch,
        }
    }

    pub fn paired(source: Batch, target: Batch) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::arg(format!(
                "paired batch: {} sources vs {} targets",
                source.len(),
                target.len()
            )));
        }
        Ok(Self { source, target })
    }

    pub fn from_sentences(sentences: &[Vec<usize>]) -> Self {
        Self::autoencoding(Batch::from_sentences(sentences))
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Dae,
    Vae { lambda: f64 },
    WaeD { lambda_wae: f64 },
    WaeS { lambda_wae: f64, lambda_kl: f64 },
}

impl Objective {
    pub fn needs_stochastic_encoder(&self) -> bool {
        matches!(self, Objective::Vae { .. } | Objective::WaeS { .. })
    }
}

/// Loss-independent knobs for one evaluation of an objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub kernel: KernelConfig,
    pub cross_factor: f64,
    pub word_dropout: f64,
}

impl LossSettings {
    pub fn new(kernel: KernelConfig) -> Self {
        Self {
            kernel,
            cross_factor: 2.0,
            word_dropout: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub mmd: f64,
    pub aux_kl: f64,
    pub total: f64,
    pub lambda_vae: f64,
    pub lambda_wae: f64,
    pub lambda_kl: f64,
}

impl LossBreakdown {
    /// `((rec + λ_VAE·kl) + λ_WAE·mmd) + λ_KL·aux_kl`, the same evaluation
    /// order the graph uses, so it reproduces `total` bit for bit.
    pub fn recomputed_total(&self) -> f64 {
        let mut t = self.reconstruction;
        t += self.lambda_vae * self.kl;
        t += self.lambda_wae * self.mmd;
        t += self.lambda_kl * self.aux_kl;
        t
    }
}

/// Builds the objective's graph on `tape`. Returns the scalar total and its
/// breakdown. Draws from `rng` in a fixed order: posterior noise,
/// word-dropout mask, prior samples.
pub fn objective_graph(
    tape: &mut Tape,
    model: &SeqModel,
    bound: &Bound,
    batch: &TrainBatch,
    objective: Objective,
    settings: LossSettings,
    rng: &mut Rng,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::arg("loss: empty batch"));
    }
    let n = batch.len();
    if matches!(objective, Objective::WaeD { .. } | Objective::WaeS { .. }) && n < 2 {
        return Err(Error::arg(format!(
            "loss: the MMD penalty needs a batch of at least 2, got {n}"
        )));
    }
    if objective.needs_stochastic_encoder() && !model.stochastic {
        return Err(Error::arg(format!(
            "loss: {objective:?} needs a stochastic encoder"
        )));
    }
    let sources = batch.source.sentences();
    let targets = batch.target.sentences();
    let h = model.encode_batch(tape, bound, &sources)?;
    let (mu, log_sigma) = model.heads(tape, bound, h)?;

    let z = if objective.needs_stochastic_encoder() {
        let ls = log_sigma.expect("stochastic encoder has a log-sigma head");
        reparameterize_tape(tape, mu, ls, rng)?
    } else {
        mu
    };
    let tf = model.decode_teacher_forced(tape, bound, z, &targets, settings.word_dropout, rng)?;
    let rec = model.reconstruction_nll(tape, &tf)?;

    let mut out = LossBreakdown {
        reconstruction: tape.scalar_value(rec),
        ..LossBreakdown::default()
    };
    let total = match objective {
        Objective::Dae => rec,
        Objective::Vae { lambda } => {
            let ls = log_sigma.expect("stochastic encoder has a log-sigma head");
            let kl = kl_standard_normal_tape(tape, mu, ls)?;
            out.kl = tape.scalar_value(kl);
            out.lambda_vae = lambda;
            let weighted = tape.scale(kl, lambda);
            tape.add(rec, weighted)?
        }
        Objective::WaeD { lambda_wae } => {
            let mmd = prior_mmd(tape, z, model.dims.latent, settings, rng)?;
            out.mmd = tape.scalar_value(mmd);
            out.lambda_wae = lambda_wae;
            let weighted = tape.scale(mmd, lambda_wae);
            tape.add(rec, weighted)?
        }
        Objective::WaeS {
            lambda_wae,
            lambda_kl,
        } => {
            let ls = log_sigma.expect("stochastic encoder has a log-sigma head");
            let mmd = prior_mmd(tape, z, model.dims.latent, settings, rng)?;
            let aux = aux_kl_tape(tape, ls)?;
            out.mmd = tape.scalar_value(mmd);
            out.aux_kl = tape.scalar_value(aux);
            out.lambda_wae = lambda_wae;
            out.lambda_kl = lambda_kl;
            let w_mmd = tape.scale(mmd, lambda_wae);
            let t = tape.add(rec, w_mmd)?;
            let w_aux = tape.scale(aux, lambda_kl);
            tape.add(t, w_aux)?
        }
    };
    out.total = tape.scalar_value(total);
    Ok((total, out))
}

/// MMD between the batch codes `z[N,Z]` and `N` fresh N(0, I) draws.
fn prior_mmd(
    tape: &mut Tape,
    z: Var,
    latent: usize,
    settings: LossSettings,
    rng: &mut Rng,
) -> Result<Var> {
    let n = tape.shape(z)[0];
    let prior: Vec<f64> = (0..n).flat_map(|_| standard_normal_vec(latent, rng)).collect();
    let prior = tape.constant(Tensor::new(vec![n, latent], prior)?);
    mmd_tape(tape, z, prior, settings.kernel, settings.cross_factor)
}

fn evaluate(
    model: &SeqModel,
    batch: &TrainBatch,
    objective: Objective,
    settings: LossSettings,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let (_, b) = objective_graph(&mut tape, model, &bound, batch, objective, settings, rng)?;
    Ok(b)
}

/// Cross-entropy of the deterministic encoding.
pub fn dae_loss(model: &SeqModel, batch: &TrainBatch, settings: LossSettings) -> Result<LossBreakdown> {
    // no draws happen for DAE without word dropout
    let mut rng = crate::seeded_rng(0);
    evaluate(model, batch, Objective::Dae, settings, &mut rng)
}

pub fn vae_loss(
    model: &SeqModel,
    batch: &TrainBatch,
    schedule: &AnnealSchedule,
    step: u64,
    settings: LossSettings,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let lambda = schedule.lambda(step);
    evaluate(model, batch, Objective::Vae { lambda }, settings, rng)
}

pub fn wae_d_loss(
    model: &SeqModel,
    batch: &TrainBatch,
    lambda_wae: f64,
    settings: LossSettings,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    evaluate(model, batch, Objective::WaeD { lambda_wae }, settings, rng)
}

pub fn wae_s_loss(
    model: &SeqModel,
    batch: &TrainBatch,
    lambda_wae: f64,
    lambda_kl: f64,
    settings: LossSettings,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    evaluate(
        model,
        batch,
        Objective::WaeS {
            lambda_wae,
            lambda_kl,
        },
        settings,
        rng,
    )
}

/// Sigmoid KL-weight schedule with the peaking stop.
///
/// `λ(t) = λ_max · sigmoid(slope · (t − midpoint))` until the per-epoch
/// weighted KL first drops below its running maximum; from then on λ stays
/// at its value at the freezing step. With `annealing = false` λ is the
/// constant `λ_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub lambda_max: f64,
    pub slope: f64,
    pub midpoint: f64,
    pub annealing: bool,
    pub frozen: Option<f64>,
    /// Running maximum of the per-epoch `λ·KL`; `None` before the first epoch.
    pub peak: Option<f64>,
}

impl AnnealSchedule {
    pub fn sigmoid(lambda_max: f64, slope: f64, midpoint: f64) -> Self {
        Self {
            lambda_max,
            slope,
            midpoint,
            annealing: true,
            frozen: None,
            peak: None,
        }
    }

    /// Midpoint after `midpoint_epochs`; λ goes from 10% to 90% of its
    /// maximum over `width_epochs`.
    pub fn from_epochs(
        lambda_max: f64,
        midpoint_epochs: f64,
        width_epochs: f64,
        steps_per_epoch: usize,
    ) -> Self {
        let spe = steps_per_epoch.max(1) as f64;
        let slope = 2.0 * 9f64.ln() / (width_epochs * spe);
        Self::sigmoid(lambda_max, slope, midpoint_epochs * spe)
    }

    pub fn constant(lambda: f64) -> Self {
        Self {
            annealing: false,
            ..Self::sigmoid(lambda, 0.0, 0.0)
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn lambda(&self, step: u64) -> f64 {
        if let Some(v) = self.frozen {
            return v;
        }
        if !self.annealing {
            return self.lambda_max;
        }
        let x = self.slope * (step as f64 - self.midpoint);
        self.lambda_max / (1.0 + (-x).exp())
    }

    /// Feeds one epoch's mean `λ·KL`. The first strict drop below the
    /// running maximum freezes λ at its value for `step`; ties do not count.
    pub fn observe_epoch(&mut self, weighted_kl: f64, step: u64) {
        if self.frozen.is_some() || !self.annealing {
            return;
        }
        match self.peak {
            Some(p) if weighted_kl < p => self.frozen = Some(self.lambda(step)),
            _ => self.peak = Some(weighted_kl),
        }
    }
}

pub fn anneal_lambda(schedule: &AnnealSchedule, step: u64) -> f64 {
    schedule.lambda(step)
}

pub fn peaking_monitor(schedule: &mut AnnealSchedule, epoch_weighted_kl: f64, step: u64) {
    schedule.observe_epoch(epoch_weighted_kl, step);
}

/// Word-dropout ramp: 0 at epoch 0, +0.05 per epoch, capped at 0.5.
pub fn word_dropout_rate(epoch: u64) -> f64 {
    (0.05 * epoch as f64).min(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let s = AnnealSchedule::sigmoid(2.0, 0.01, 500.0);
        assert_eq!(s.lambda(500), 1.0);
        assert!((s.lambda(100_000) - 2.0).abs() < 1e-12);
        let mut prev = -1.0;
        for t in 0..5000 {
            let l = s.lambda(t);
            assert!(l >= prev && (0.0..=2.0).contains(&l));
            prev = l;
        }
    }

    #[test]
    fn epoch_parameterization() {
        let s = AnnealSchedule::from_epochs(1.0, 3.0, 2.0, 100);
        assert!((s.lambda(300) - 0.5).abs() < 1e-12);
        assert!((s.lambda(200) - 0.1).abs() < 1e-9);
        assert!((s.lambda(400) - 0.9).abs() < 1e-9);
    }

    #[test]
    fn peaking_freezes_on_first_decrease() {
        let mut s = AnnealSchedule::sigmoid(1.0, 0.01, 100.0);
        for (i, v) in [0.1, 0.3].into_iter().enumerate() {
            s.observe_epoch(v, 100 * (i as u64 + 1));
            assert!(!s.is_frozen());
        }
        s.observe_epoch(0.2, 300);
        assert!(s.is_frozen());
        let frozen = s.lambda(300);
        assert_eq!(frozen, AnnealSchedule::sigmoid(1.0, 0.01, 100.0).lambda(300));
        for t in [301, 1000, 1_000_000] {
            assert_eq!(s.lambda(t), frozen);
        }
        s.observe_epoch(10.0, 400);
        assert_eq!(s.lambda(400), frozen);
    }

    #[test]
    fn peaking_ignores_increases_and_ties() {
        let mut s = AnnealSchedule::sigmoid(1.0, 0.01, 100.0);
        for (i, v) in [0.1, 0.2, 0.3, 0.4].into_iter().enumerate() {
            s.observe_epoch(v, i as u64);
        }
        assert!(!s.is_frozen());
        let mut c = AnnealSchedule::sigmoid(1.0, 0.01, 100.0);
        for i in 0..5 {
            c.observe_epoch(0.25, i);
        }
        assert!(!c.is_frozen());
    }

    #[test]
    fn dropout_ramp() {
        assert_eq!(word_dropout_rate(0), 0.0);
        assert_eq!(word_dropout_rate(1), 0.05);
        assert_eq!(word_dropout_rate(10), 0.5);
        assert_eq!(word_dropout_rate(100), 0.5);
        for e in 0..30 {
            assert!(word_dropout_rate(e + 1) >= word_dropout_rate(e));
        }
    }

    use crate::latent::{mmd_estimate, standard_normal_vec};
    use crate::params::Params;
    use crate::seqmodel::ModelDims;
    use crate::seeded_rng;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 10,
            embed: 4,
            hidden: 5,
            latent: 3,
        }
    }

    fn model(stochastic: bool) -> SeqModel {
        SeqModel::with_init_scale(dims(), stochastic, 0.4, &mut seeded_rng(21))
    }

    fn batch() -> TrainBatch {
        TrainBatch::from_sentences(&[vec![4, 5, 6], vec![7, 8], vec![9, 4, 4, 5]])
    }

    fn settings() -> LossSettings {
        LossSettings::new(KernelConfig::for_latent_dim(3))
    }

    #[test]
    fn dae_uniform_logits_and_sum_aggregation() {
        let mut m = model(false);
        let ow = m.params.index("output.weight").unwrap();
        m.params.values[ow].iter_mut().for_each(|v| *v = 0.0);
        let one = TrainBatch::from_sentences(&[vec![4, 5, 6, 7]]);
        let l = dae_loss(&m, &one, settings()).unwrap();
        assert!((l.reconstruction - 5.0 * 10f64.ln()).abs() < 1e-9);
        assert_eq!((l.kl, l.mmd, l.aux_kl), (0.0, 0.0, 0.0));

        let m = model(false);
        let single = dae_loss(&m, &batch(), settings()).unwrap();
        let rows = [vec![4, 5, 6], vec![7, 8], vec![9, 4, 4, 5]];
        let doubled: Vec<Vec<usize>> = rows.iter().chain(&rows).cloned().collect();
        let double = dae_loss(&m, &TrainBatch::from_sentences(&doubled), settings()).unwrap();
        assert!((double.reconstruction - 2.0 * single.reconstruction).abs() < 1e-10);
        assert!(single.reconstruction >= 0.0);
    }

    #[test]
    fn totals_recompute_exactly() {
        let (d, s) = (model(false), model(true));
        let b = batch();
        let sched = AnnealSchedule::sigmoid(1.0, 0.5, 2.0);
        let losses = [
            dae_loss(&d, &b, settings()).unwrap(),
            vae_loss(&s, &b, &sched, 3, settings(), &mut seeded_rng(1)).unwrap(),
            wae_d_loss(&d, &b, 3.0, settings(), &mut seeded_rng(2)).unwrap(),
            wae_s_loss(&s, &b, 10.0, 0.01, settings(), &mut seeded_rng(3)).unwrap(),
        ];
        for l in losses {
            assert_eq!(l.total.to_bits(), l.recomputed_total().to_bits(), "{l:?}");
        }
        assert_eq!(losses[1].lambda_vae, sched.lambda(3));
        assert_eq!(losses[2].kl, 0.0);
        assert_eq!(losses[3].kl, 0.0);
    }

    #[test]
    fn zero_weights_reduce_to_reconstruction() {
        let (d, s) = (model(false), model(true));
        let b = batch();
        let dae = dae_loss(&d, &b, settings()).unwrap();
        let wd0 = wae_d_loss(&d, &b, 0.0, settings(), &mut seeded_rng(4)).unwrap();
        assert_eq!(wd0.total, dae.total);
        let vae0 = vae_loss(&s, &b, &AnnealSchedule::constant(0.0), 0, settings(), &mut seeded_rng(5)).unwrap();
        assert_eq!(vae0.total, vae0.reconstruction);
        let ws0 = wae_s_loss(&s, &b, 0.0, 0.0, settings(), &mut seeded_rng(5)).unwrap();
        assert_eq!(ws0.total, ws0.reconstruction);
        assert_eq!(ws0.reconstruction, vae0.reconstruction);
    }

    #[test]
    fn mmd_field_matches_standalone_estimate() {
        let d = model(false);
        let b = batch();
        let l = wae_d_loss(&d, &b, 3.0, settings(), &mut seeded_rng(6)).unwrap();
        let codes = d.latent_means(&b.source.sentences()).unwrap();
        let mut rng = seeded_rng(6);
        let prior: Vec<Vec<f64>> = (0..3).map(|_| standard_normal_vec(3, &mut rng)).collect();
        let m = mmd_estimate(&codes, &prior, settings().kernel, 2.0).unwrap();
        assert!((l.mmd - m).abs() < 1e-12);
        assert!((l.total - (l.reconstruction + 3.0 * m)).abs() < 1e-9);
    }

    #[test]
    fn mmd_objectives_need_two_examples() {
        let one = TrainBatch::from_sentences(&[vec![4, 5]]);
        assert!(wae_d_loss(&model(false), &one, 1.0, settings(), &mut seeded_rng(0)).is_err());
        assert!(wae_s_loss(&model(true), &one, 1.0, 0.0, settings(), &mut seeded_rng(0)).is_err());
        assert!(vae_loss(&model(false), &batch(), &AnnealSchedule::constant(1.0), 0, settings(), &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn standard_posterior_has_zero_kl_terms() {
        let mut s = model(true);
        for name in ["head.mu.weight", "head.log_sigma.weight"] {
            let i = s.params.index(name).unwrap();
            s.params.values[i].iter_mut().for_each(|v| *v = 0.0);
        }
        let b = batch();
        let v = vae_loss(&s, &b, &AnnealSchedule::constant(1.0), 0, settings(), &mut seeded_rng(7)).unwrap();
        assert_eq!(v.kl, 0.0);
        let w = wae_s_loss(&s, &b, 1.0, 1.0, settings(), &mut seeded_rng(7)).unwrap();
        assert_eq!(w.aux_kl, 0.0);
    }

    #[test]
    fn tiny_sigma_wae_s_matches_wae_d() {
        let mut s = model(true);
        let lw = s.params.index("head.log_sigma.weight").unwrap();
        let lb = s.params.index("head.log_sigma.bias").unwrap();
        s.params.values[lw].iter_mut().for_each(|v| *v = 0.0);
        s.params.values[lb].iter_mut().for_each(|v| *v = 1e-8f64.ln());
        let mut p = Params::new();
        for i in 0..s.params.len() {
            if !s.params.names[i].starts_with("head.log_sigma") {
                p.push(&s.params.names[i], s.params.shapes[i].clone(), s.params.values[i].clone());
            }
        }
        let d = SeqModel::from_params(dims(), false, p).unwrap();
        let b = batch();
        let ws = wae_s_loss(&s, &b, 10.0, 0.0, settings(), &mut seeded_rng(8)).unwrap();
        // skip the posterior-noise draws WAE-S takes before the prior draws
        let mut rng = seeded_rng(8);
        let _ = standard_normal_vec(3 * 3, &mut rng);
        let wd = wae_d_loss(&d, &b, 10.0, settings(), &mut rng).unwrap();
        assert!((ws.total - wd.total).abs() < 1e-6, "{} vs {}", ws.total, wd.total);
    }

    #[test]
    fn loss_is_deterministic_given_seed() {
        let s = model(true);
        let b = batch();
        let a = wae_s_loss(&s, &b, 10.0, 0.1, settings(), &mut seeded_rng(9)).unwrap();
        let c = wae_s_loss(&s, &b, 10.0, 0.1, settings(), &mut seeded_rng(9)).unwrap();
        assert_eq!(a, c);
    }
}
