//! Single-layer LSTM encoder/decoder over word embeddings.
//!
//! The encoder's last hidden state feeds one or two linear heads (the latent
//! code, or a Gaussian posterior's mean and log-σ). The decoder consumes
//! `concat(embedding(prev_token), z)` at every step and predicts the next
//! token through a linear output layer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::data::{BOS, EOS, PAD, UNK};
use crate::params::Params;
use crate::{Error, Result, Rng};

const INIT_SCALE: f64 = 0.08;
const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab: 1000,
            embed: 32,
            hidden: 64,
            latent: 16,
        }
    }
}

/// Gate weights of one LSTM, packed column-wise as `[input | forget | cell | output]`.
///
/// `weight` is `(D + H) × 4H` and multiplies `concat(x, h)`; `bias` is `4H`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input: usize,
    pub hidden: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            weight: Tensor::zeros(vec![input + hidden, 4 * hidden]),
            bias: Tensor::zeros(vec![4 * hidden]),
        }
    }

    /// One recurrence step on single vectors.
    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.input || h.len() != self.hidden || c.len() != self.hidden {
            return Err(Error::arg(format!(
                "lstm_step: expected x[{}], h[{}], c[{}]; got x[{}], h[{}], c[{}]",
                self.input,
                self.hidden,
                self.hidden,
                x.len(),
                h.len(),
                c.len()
            )));
        }
        let mut tape = Tape::new();
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let x = tape.constant(Tensor::new(vec![1, self.input], x.to_vec())?);
        let h = tape.constant(Tensor::new(vec![1, self.hidden], h.to_vec())?);
        let c = tape.constant(Tensor::new(vec![1, self.hidden], c.to_vec())?);
        let (h2, c2) = lstm_cell(&mut tape, w, b, x, h, c, self.hidden)?;
        Ok((tape.value(h2).to_vec(), tape.value(c2).to_vec()))
    }
}

/// Batched LSTM step on the tape: `x[N,D]`, `h,c[N,H]` to `(h', c')`.
pub fn lstm_cell(
    tape: &mut Tape,
    w: Var,
    b: Var,
    x: Var,
    h: Var,
    c: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let xh = tape.concat_cols(&[x, h])?;
    let pre = tape.matmul(xh, w)?;
    let pre = tape.add_row(pre, b)?;
    let i = tape.slice_cols(pre, 0, hidden)?;
    let f = tape.slice_cols(pre, hidden, 2 * hidden)?;
    let g = tape.slice_cols(pre, 2 * hidden, 3 * hidden)?;
    let o = tape.slice_cols(pre, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c2 = tape.add(fc, ig)?;
    let tc = tape.tanh(c2);
    let h2 = tape.mul(o, tc)?;
    Ok((h2, c2))
}

/// Parameter handles of a model bound to a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    pub embedding: Var,
    pub enc_w: Var,
    pub enc_b: Var,
    pub dec_w: Var,
    pub dec_b: Var,
    pub mu_w: Var,
    pub mu_b: Var,
    pub log_sigma: Option<(Var, Var)>,
    pub out_w: Var,
    pub out_b: Var,
}

/// Per-step teacher-forced decoder outputs.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// `[N, V]` logits for each step.
    pub logits: Vec<Var>,
    /// Conditioning token fed at each step, per example (after word dropout).
    pub inputs: Vec<Vec<usize>>,
    /// Target token per step, per example (`PAD` past the end).
    pub targets: Vec<Vec<usize>>,
    /// 1.0 where the step is inside the example's target.
    pub mask: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqModel {
    pub dims: ModelDims,
    /// Whether the encoder has a log-σ head (Gaussian posterior).
    pub stochastic: bool,
    pub params: Params,
}

const NAMES: [&str; 11] = [
    "embedding",
    "encoder.weight",
    "encoder.bias",
    "decoder.weight",
    "decoder.bias",
    "head.mu.weight",
    "head.mu.bias",
    "head.log_sigma.weight",
    "head.log_sigma.bias",
    "output.weight",
    "output.bias",
];

impl SeqModel {
    pub fn new(dims: ModelDims, stochastic: bool, rng: &mut Rng) -> Self {
        Self::with_init_scale(dims, stochastic, INIT_SCALE, rng)
    }

    /// Uniform(−scale, scale) weights, zero biases, forget-gate bias +1.
    pub fn with_init_scale(dims: ModelDims, stochastic: bool, scale: f64, rng: &mut Rng) -> Self {
        let ModelDims {
            vocab: v,
            embed: e,
            hidden: h,
            latent: z,
        } = dims;
        let mut p = Params::new();
        let lstm_bias = || {
            let mut b = vec![0.0; 4 * h];
            b[h..2 * h].iter_mut().for_each(|x| *x = FORGET_BIAS);
            b
        };
        p.push_uniform(NAMES[0], vec![v, e], scale, rng);
        p.push_uniform(NAMES[1], vec![e + h, 4 * h], scale, rng);
        p.push(NAMES[2], vec![4 * h], lstm_bias());
        p.push_uniform(NAMES[3], vec![e + z + h, 4 * h], scale, rng);
        p.push(NAMES[4], vec![4 * h], lstm_bias());
        p.push_uniform(NAMES[5], vec![h, z], scale, rng);
        p.push_const(NAMES[6], vec![z], 0.0);
        if stochastic {
            p.push_uniform(NAMES[7], vec![h, z], scale, rng);
            p.push_const(NAMES[8], vec![z], 0.0);
        }
        p.push_uniform(NAMES[9], vec![h, v], scale, rng);
        p.push_const(NAMES[10], vec![v], 0.0);
        Self {
            dims,
            stochastic,
            params: p,
        }
    }

    /// Checks that `params` holds exactly the arrays this architecture needs.
    pub fn from_params(dims: ModelDims, stochastic: bool, params: Params) -> Result<Self> {
        let ModelDims {
            vocab: v,
            embed: e,
            hidden: h,
            latent: z,
        } = dims;
        let mut expected = vec![
            (NAMES[0], vec![v, e]),
            (NAMES[1], vec![e + h, 4 * h]),
            (NAMES[2], vec![4 * h]),
            (NAMES[3], vec![e + z + h, 4 * h]),
            (NAMES[4], vec![4 * h]),
            (NAMES[5], vec![h, z]),
            (NAMES[6], vec![z]),
        ];
        if stochastic {
            expected.push((NAMES[7], vec![h, z]));
            expected.push((NAMES[8], vec![z]));
        }
        expected.push((NAMES[9], vec![h, v]));
        expected.push((NAMES[10], vec![v]));
        if expected.len() != params.len() {
            return Err(Error::arg(format!(
                "model expects {} parameter arrays, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (name, shape)) in expected.iter().enumerate() {
            if params.names[i] != *name || params.shapes[i] != *shape {
                return Err(Error::arg(format!(
                    "parameter {i}: expected {name}{shape:?}, got {}{:?}",
                    params.names[i], params.shapes[i]
                )));
            }
        }
        Ok(Self {
            dims,
            stochastic,
            params,
        })
    }

    pub fn encoder_lstm(&self) -> LstmParams {
        self.lstm(1, self.dims.embed)
    }

    pub fn decoder_lstm(&self) -> LstmParams {
        self.lstm(3, self.dims.embed + self.dims.latent)
    }

    fn lstm(&self, first: usize, input: usize) -> LstmParams {
        LstmParams {
            input,
            hidden: self.dims.hidden,
            weight: self.params.tensor(first),
            bias: self.params.tensor(first + 1),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self.params.bind(tape, trainable);
        let (log_sigma, rest) = if self.stochastic {
            (Some((vars[7], vars[8])), 9)
        } else {
            (None, 7)
        };
        Bound {
            embedding: vars[0],
            enc_w: vars[1],
            enc_b: vars[2],
            dec_w: vars[3],
            dec_b: vars[4],
            mu_w: vars[5],
            mu_b: vars[6],
            log_sigma,
            out_w: vars[rest],
            out_b: vars[rest + 1],
            vars,
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.dims.vocab) {
            return Err(Error::arg(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.dims.vocab
            )));
        }
        Ok(())
    }

    fn zeros(tape: &mut Tape, n: usize, h: usize) -> Var {
        tape.constant(Tensor::zeros(vec![n, h]))
    }

    /// Row mask `[N, width]` with ones for examples still active at `t`.
    fn step_mask(tape: &mut Tape, lens: &[usize], t: usize, width: usize) -> Var {
        let values = lens
            .iter()
            .flat_map(|&l| std::iter::repeat_n(if t < l { 1.0 } else { 0.0 }, width))
            .collect();
        tape.constant(Tensor {
            shape: vec![lens.len(), width],
            values,
            grad: None,
        })
    }

    /// Runs the encoder over each sequence and returns the last hidden
    /// states as `[N, H]`.
    pub fn encode_batch(&self, tape: &mut Tape, b: &Bound, sources: &[&[usize]]) -> Result<Var> {
        if sources.is_empty() || sources.iter().any(|s| s.is_empty()) {
            return Err(Error::arg("encode: empty input sequence"));
        }
        for s in sources {
            self.check_ids(s)?;
        }
        let n = sources.len();
        let hid = self.dims.hidden;
        let lens: Vec<usize> = sources.iter().map(|s| s.len()).collect();
        let max_len = *lens.iter().max().unwrap();
        let mut h = Self::zeros(tape, n, hid);
        let mut c = Self::zeros(tape, n, hid);
        for t in 0..max_len {
            let ids: Vec<usize> = sources.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let x = tape.gather_rows(b.embedding, &ids)?;
            let (h2, c2) = lstm_cell(tape, b.enc_w, b.enc_b, x, h, c, hid)?;
            if lens.iter().all(|&l| t < l) {
                h = h2;
                c = c2;
            } else {
                let m = Self::step_mask(tape, &lens, t, hid);
                h = Self::blend(tape, m, h2, h)?;
                c = Self::blend(tape, m, c2, c)?;
            }
        }
        Ok(h)
    }

    /// `old + m * (new - old)`
    fn blend(tape: &mut Tape, m: Var, new: Var, old: Var) -> Result<Var> {
        let d = tape.sub(new, old)?;
        let md = tape.mul(m, d)?;
        Ok(tape.add(old, md)?)
    }

    /// Final encoder hidden state for one sentence.
    pub fn encode(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let h = self.encode_batch(&mut tape, &b, &[ids])?;
        Ok(tape.value(h).to_vec())
    }

    /// Deterministic code (or posterior mean) of each sentence.
    pub fn latent_means(&self, sentences: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let z = self.dims.latent;
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(256) {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let h = self.encode_batch(&mut tape, &b, chunk)?;
            let (mu, _) = self.heads(&mut tape, &b, h)?;
            out.extend(tape.value(mu).chunks(z).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Latent heads applied to `h[N,H]`: the mean (or deterministic code)
    /// and, for stochastic encoders, log σ.
    pub fn heads(&self, tape: &mut Tape, b: &Bound, h: Var) -> Result<(Var, Option<Var>)> {
        let mu = tape.matmul(h, b.mu_w)?;
        let mu = tape.add_row(mu, b.mu_b)?;
        let log_sigma = match b.log_sigma {
            Some((w, bias)) => {
                let ls = tape.matmul(h, w)?;
                Some(tape.add_row(ls, bias)?)
            }
            None => None,
        };
        Ok((mu, log_sigma))
    }

    /// Teacher-forced decoding of `targets` conditioned on `z[N,Z]`.
    ///
    /// Step `t` predicts `target[t]` (with EOS appended) from
    /// `concat(embedding(prev), z)`, where `prev` is BOS at step 0 and the
    /// previous target token afterwards, replaced by UNK with probability
    /// `word_dropout`. Draws are only taken from `rng` when the rate is
    /// strictly between 0 and 1.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        b: &Bound,
        z: Var,
        targets: &[&[usize]],
        word_dropout: f64,
        rng: &mut Rng,
    ) -> Result<TeacherForced> {
        if !(0.0..=1.0).contains(&word_dropout) {
            return Err(Error::arg(format!(
                "word dropout rate must lie in [0, 1], got {word_dropout}"
            )));
        }
        for t in targets {
            self.check_ids(t)?;
        }
        let n = targets.len();
        let zs = tape.shape(z);
        if zs != [n, self.dims.latent] {
            return Err(Error::arg(format!(
                "decode: z has shape {zs:?}, expected [{n}, {}]",
                self.dims.latent
            )));
        }
        let hid = self.dims.hidden;
        // targets with EOS; length L+1 each
        let lens: Vec<usize> = targets.iter().map(|t| t.len() + 1).collect();
        let steps = lens.iter().copied().max().unwrap_or(0);
        let mut out = TeacherForced {
            logits: Vec::with_capacity(steps),
            inputs: Vec::with_capacity(steps),
            targets: Vec::with_capacity(steps),
            mask: Vec::with_capacity(steps),
        };
        let mut h = Self::zeros(tape, n, hid);
        let mut c = Self::zeros(tape, n, hid);
        for t in 0..steps {
            let mut inputs = Vec::with_capacity(n);
            let mut tgt = Vec::with_capacity(n);
            let mut mask = Vec::with_capacity(n);
            for (seq, &len) in targets.iter().zip(&lens) {
                if t >= len {
                    inputs.push(PAD);
                    tgt.push(PAD);
                    mask.push(0.0);
                    continue;
                }
                let prev = if t == 0 { BOS } else { seq[t - 1] };
                let dropped = t > 0
                    && (word_dropout >= 1.0
                        || (word_dropout > 0.0 && rng.random::<f64>() < word_dropout));
                let prev = if dropped {
                    UNK
                } else {
                    prev
                };
                inputs.push(prev);
                tgt.push(if t < seq.len() { seq[t] } else { EOS });
                mask.push(1.0);
            }
            let emb = tape.gather_rows(b.embedding, &inputs)?;
            let x = tape.concat_cols(&[emb, z])?;
            let (h2, c2) = lstm_cell(tape, b.dec_w, b.dec_b, x, h, c, hid)?;
            if mask.iter().all(|&m| m == 1.0) {
                h = h2;
                c = c2;
            } else {
                let m = Self::step_mask(tape, &lens, t, hid);
                h = Self::blend(tape, m, h2, h)?;
                c = Self::blend(tape, m, c2, c)?;
            }
            let logits = tape.matmul(h, b.out_w)?;
            let logits = tape.add_row(logits, b.out_b)?;
            out.logits.push(logits);
            out.inputs.push(inputs);
            out.targets.push(tgt);
            out.mask.push(mask);
        }
        Ok(out)
    }

    /// Summed negative log-likelihood of the teacher-forced targets.
    pub fn reconstruction_nll(&self, tape: &mut Tape, tf: &TeacherForced) -> Result<Var> {
        let mut total: Option<Var> = None;
        for ((&logits, tgt), mask) in tf.logits.iter().zip(&tf.targets).zip(&tf.mask) {
            let lp = tape.log_softmax(logits);
            let picked = tape.pick(lp, tgt)?;
            let m = tape.constant(Tensor {
                shape: vec![mask.len()],
                values: mask.clone(),
                grad: None,
            });
            let masked = tape.mul(picked, m)?;
            let s = tape.sum(masked);
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let total = match total {
            Some(t) => t,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        Ok(tape.scale(total, -1.0))
    }

    /// Greedy decoding of a batch of latent codes. Returns tokens without EOS.
    pub fn decode_greedy_batch(&self, zs: &[Vec<f64>], max_len: usize) -> Result<Vec<Vec<usize>>> {
        self.decode_with(zs, max_len, argmax)
    }

    fn decode_with(
        &self,
        zs: &[Vec<f64>],
        max_len: usize,
        mut choose: impl FnMut(&[f64]) -> usize,
    ) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 {
            return Err(Error::arg("decode: max_len must be at least 1"));
        }
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(z) = zs.iter().find(|z| z.len() != self.dims.latent) {
            return Err(Error::arg(format!(
                "decode: latent vector has {} dims, expected {}",
                z.len(),
                self.dims.latent
            )));
        }
        let n = zs.len();
        let (hid, v) = (self.dims.hidden, self.dims.vocab);
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let base = tape.len();
        let mut h = Tensor::zeros(vec![n, hid]);
        let mut c = Tensor::zeros(vec![n, hid]);
        let z = Tensor {
            shape: vec![n, self.dims.latent],
            values: zs.iter().flatten().copied().collect(),
            grad: None,
        };
        let mut prev = vec![BOS; n];
        let mut done = vec![false; n];
        let mut outputs = vec![Vec::new(); n];
        for _ in 0..max_len {
            let zv = tape.constant(z.clone());
            let hv = tape.constant(h.clone());
            let cv = tape.constant(c.clone());
            let emb = tape.gather_rows(b.embedding, &prev)?;
            let x = tape.concat_cols(&[emb, zv])?;
            let (h2, c2) = lstm_cell(&mut tape, b.dec_w, b.dec_b, x, hv, cv, hid)?;
            let logits = tape.matmul(h2, b.out_w)?;
            let logits = tape.add_row(logits, b.out_b)?;
            let lv = tape.value(logits);
            for i in 0..n {
                if done[i] {
                    continue;
                }
                let tok = choose(&lv[i * v..(i + 1) * v]);
                if tok == EOS {
                    done[i] = true;
                } else {
                    outputs[i].push(tok);
                    prev[i] = tok;
                }
            }
            h = tape.tensor(h2).clone();
            c = tape.tensor(c2).clone();
            h.grad = None;
            c.grad = None;
            tape.truncate(base);
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }

    pub fn decode_greedy(&self, z: &[f64], max_len: usize) -> Result<Vec<usize>> {
        Ok(self
            .decode_greedy_batch(&[z.to_vec()], max_len)?
            .pop()
            .unwrap_or_default())
    }

    /// Ancestral sampling from `softmax(logits / temperature)`.
    pub fn decode_sample(
        &self,
        z: &[f64],
        max_len: usize,
        temperature: f64,
        rng: &mut Rng,
    ) -> Result<Vec<usize>> {
        if !(temperature > 0.0) {
            return Err(Error::arg(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(self
            .decode_with(&[z.to_vec()], max_len, |logits| {
                sample_softmax(logits, temperature, rng)
            })?
            .pop()
            .unwrap_or_default())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `softmax(logits / temperature)`.
pub fn sample_softmax(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // rounding fallthrough: last index with positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference_check;
    use crate::seeded_rng;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 12,
            embed: 4,
            hidden: 5,
            latent: 3,
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Independent scalar-loop evaluation of the packed-gate recurrence.
    fn reference_step(p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = p.hidden;
        let xh: Vec<f64> = x.iter().chain(h).copied().collect();
        let cols = 4 * hd;
        let pre: Vec<f64> = (0..cols)
            .map(|j| {
                p.bias.values[j]
                    + xh.iter()
                        .enumerate()
                        .map(|(i, v)| v * p.weight.values[i * cols + j])
                        .sum::<f64>()
            })
            .collect();
        let mut h2 = vec![0.0; hd];
        let mut c2 = vec![0.0; hd];
        for k in 0..hd {
            let i = sig(pre[k]);
            let f = sig(pre[hd + k]);
            let g = pre[2 * hd + k].tanh();
            let o = sig(pre[3 * hd + k]);
            c2[k] = f * c[k] + i * g;
            h2[k] = o * c2[k].tanh();
        }
        (h2, c2)
    }

    fn random_lstm(input: usize, hidden: usize, seed: u64) -> LstmParams {
        let mut rng = seeded_rng(seed);
        let mut p = Params::new();
        p.push_uniform("w", vec![input + hidden, 4 * hidden], 0.5, &mut rng);
        p.push_uniform("b", vec![4 * hidden], 0.5, &mut rng);
        LstmParams {
            input,
            hidden,
            weight: p.tensor(0),
            bias: p.tensor(1),
        }
    }

    #[test]
    fn lstm_zero_case() {
        let p = LstmParams::zeros(3, 2);
        let (h, c) = p.step(&[0.0; 3], &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(h, vec![0.0; 2]);
        assert_eq!(c, vec![0.0; 2]);
    }

    #[test]
    fn lstm_gate_limits_keep_cell() {
        let mut p = LstmParams::zeros(2, 2);
        for k in 0..2 {
            p.bias.values[k] = -1e3;
            p.bias.values[2 + k] = 1e3;
        }
        let c = [0.7, -0.3];
        let (_, c2) = p.step(&[0.4, 0.1], &[0.2, -0.5], &c).unwrap();
        assert_eq!(c2, c.to_vec());
    }

    #[test]
    fn lstm_matches_reference() {
        let p = random_lstm(3, 4, 9);
        let x = [0.3, -1.2, 0.8];
        let h = [0.1, -0.2, 0.3, 0.05];
        let c = [-0.4, 0.9, 0.0, 0.2];
        let (h2, c2) = p.step(&x, &h, &c).unwrap();
        let (rh, rc) = reference_step(&p, &x, &h, &c);
        for (a, b) in h2.iter().chain(&c2).zip(rh.iter().chain(&rc)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(p.step(&x[..2], &h, &c).is_err());
    }

    #[test]
    fn lstm_step_gradients() {
        let p = random_lstm(3, 2, 10);
        let x = tape_input(&[0.5, -0.4, 1.1]);
        let f = |w: &[f64]| {
            let mut tape = Tape::new();
            let (wv, bv) = w.split_at(p.weight.numel());
            let wt = tape.param(Tensor::new(p.weight.shape.clone(), wv.to_vec()).unwrap());
            let bt = tape.param(Tensor::new(p.bias.shape.clone(), bv.to_vec()).unwrap());
            let xv = tape.constant(x.clone());
            let hv = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.6]).unwrap());
            let cv = tape.constant(Tensor::new(vec![1, 2], vec![0.2, 0.4]).unwrap());
            let (h2, c2) = lstm_cell(&mut tape, wt, bt, xv, hv, cv, 2).unwrap();
            let s = tape.concat_cols(&[h2, c2]).unwrap();
            let s = tape.tanh(s);
            let loss = tape.sum(s);
            tape.backward(loss).unwrap();
            let mut g = tape.grad(wt).unwrap().to_vec();
            g.extend_from_slice(tape.grad(bt).unwrap());
            (tape.scalar_value(loss), g)
        };
        let w0: Vec<f64> = p.weight.values.iter().chain(&p.bias.values).copied().collect();
        assert!(finite_difference_check(f, &w0, 1e-5) < 1e-4);
    }

    fn tape_input(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn encode_base_case_and_errors() {
        let m = SeqModel::with_init_scale(dims(), false, 0.5, &mut seeded_rng(1));
        let e = &m.params.values[0];
        let x = &e[7 * 4..8 * 4];
        let (h, _) = m.encoder_lstm().step(x, &[0.0; 5], &[0.0; 5]).unwrap();
        assert_eq!(m.encode(&[7]).unwrap(), h);
        assert_eq!(m.encode(&[4, 9, 5]).unwrap(), m.encode(&[4, 9, 5]).unwrap());
        assert_ne!(m.encode(&[4, 9]).unwrap(), m.encode(&[9, 4]).unwrap());
        assert!(m.encode(&[]).is_err());
        assert!(m.encode(&[12]).is_err());
    }

    #[test]
    fn batched_encoding_matches_single() {
        let m = SeqModel::with_init_scale(dims(), true, 0.5, &mut seeded_rng(2));
        let seqs: Vec<Vec<usize>> = vec![vec![4, 5, 6, 7], vec![8], vec![9, 10]];
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let h = m.encode_batch(&mut tape, &b, &refs).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let single = m.encode(s).unwrap();
            let row = &tape.value(h)[i * 5..(i + 1) * 5];
            for (a, b) in row.iter().zip(&single) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    fn uniform_model() -> SeqModel {
        let mut m = SeqModel::with_init_scale(dims(), false, 0.5, &mut seeded_rng(3));
        let ow = m.params.index("output.weight").unwrap();
        m.params.values[ow].iter_mut().for_each(|v| *v = 0.0);
        m
    }

    #[test]
    fn uniform_logits_give_log_v_per_step() {
        let m = uniform_model();
        let sentence = [4usize, 5, 6, 7, 8];
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let z = tape.constant(Tensor::new(vec![1, 3], vec![0.1, 0.2, -0.3]).unwrap());
        let tf = m
            .decode_teacher_forced(&mut tape, &b, z, &[&sentence], 0.0, &mut seeded_rng(0))
            .unwrap();
        assert_eq!(tf.logits.len(), sentence.len() + 1);
        let nll = m.reconstruction_nll(&mut tape, &tf).unwrap();
        let want = (sentence.len() + 1) as f64 * 12f64.ln();
        assert!((tape.scalar_value(nll) - want).abs() < 1e-9);
    }

    #[test]
    fn word_dropout_limits_and_reproducibility() {
        let m = SeqModel::with_init_scale(dims(), false, 0.5, &mut seeded_rng(4));
        let targets: Vec<Vec<usize>> = vec![vec![4, 5, 6, 7, 8, 9, 10, 11]; 4];
        let refs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        let run = |rate: f64, seed: u64| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, false);
            let z = tape.constant(Tensor::zeros(vec![4, 3]));
            m.decode_teacher_forced(&mut tape, &b, z, &refs, rate, &mut seeded_rng(seed))
                .map(|tf| tf.inputs)
        };
        let none = run(0.0, 1).unwrap();
        assert!(none.iter().flatten().all(|&t| t != UNK));
        let all = run(1.0, 1).unwrap();
        assert!(all[0].iter().all(|&t| t == BOS));
        assert!(all[1..].iter().flatten().all(|&t| t == UNK));
        let half_a = run(0.5, 7).unwrap();
        assert_eq!(half_a, run(0.5, 7).unwrap());
        let dropped = half_a[1..].iter().flatten().filter(|&&t| t == UNK).count();
        assert!(dropped > 0 && dropped < 32);
        assert!(run(1.5, 1).is_err());
        assert!(run(-0.1, 1).is_err());
    }

    #[test]
    fn greedy_and_sampled_decoding() {
        let m = SeqModel::with_init_scale(dims(), false, 0.8, &mut seeded_rng(5));
        let z = [0.5, -1.0, 0.25];
        let a = m.decode_greedy(&z, 6).unwrap();
        assert!(a.len() <= 6);
        assert_eq!(a, m.decode_greedy(&z, 6).unwrap());
        assert!(m.decode_greedy(&z, 0).is_err());
        let s1 = m.decode_sample(&z, 6, 1.0, &mut seeded_rng(3)).unwrap();
        let s2 = m.decode_sample(&z, 6, 1.0, &mut seeded_rng(3)).unwrap();
        assert_eq!(s1, s2);
        let cold = m.decode_sample(&z, 6, 1e-6, &mut seeded_rng(3)).unwrap();
        assert_eq!(cold, a);
        assert!(m.decode_sample(&z, 6, 0.0, &mut seeded_rng(3)).is_err());
        let zs = vec![z.to_vec(), vec![0.0; 3]];
        let batch = m.decode_greedy_batch(&zs, 6).unwrap();
        assert_eq!(batch[0], a);
        assert_eq!(batch[1], m.decode_greedy(&zs[1], 6).unwrap());
    }

    #[test]
    fn argmax_ties_and_sampling_frequencies() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        let logits = [3f64.ln(), 0.0];
        let mut rng = seeded_rng(11);
        let zeros = (0..1000)
            .filter(|_| sample_softmax(&logits, 1.0, &mut rng) == 0)
            .count();
        let freq = zeros as f64 / 1000.0;
        assert!((freq - 0.75).abs() < 0.04, "{freq}");
    }

    #[test]
    fn overfits_single_sentence() {
        use crate::autograd::{adam_step, AdamConfig, OptimState};
        let mut m = SeqModel::new(dims(), false, &mut seeded_rng(6));
        let sentence = [4usize, 9, 6, 11, 5];
        let mut st = OptimState::default();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, true);
            let h = m.encode_batch(&mut tape, &b, &[&sentence]).unwrap();
            let (z, _) = m.heads(&mut tape, &b, h).unwrap();
            let tf = m
                .decode_teacher_forced(&mut tape, &b, z, &[&sentence], 0.0, &mut seeded_rng(0))
                .unwrap();
            let loss = m.reconstruction_nll(&mut tape, &tf).unwrap();
            tape.backward(loss).unwrap();
            let g = m.params.grads(&tape, &b.vars);
            adam_step(&mut m.params.values, &g, &mut st, 0.01, AdamConfig::default()).unwrap();
        }
        let z = m.latent_means(&[&sentence]).unwrap().pop().unwrap();
        assert_eq!(m.decode_greedy(&z, 10).unwrap(), sentence.to_vec());
    }

    #[test]
    fn from_params_validates_layout() {
        let m = SeqModel::new(dims(), true, &mut seeded_rng(7));
        assert!(SeqModel::from_params(dims(), true, m.params.clone()).is_ok());
        assert!(SeqModel::from_params(dims(), false, m.params.clone()).is_err());
        let mut other = dims();
        other.hidden = 6;
        assert!(SeqModel::from_params(other, true, m.params).is_err());
    }
}
