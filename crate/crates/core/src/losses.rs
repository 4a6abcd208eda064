//! Least-squares adversarial, cycle-consistency and identity objectives.
//!
//! Expectations are element means over score maps and mel matrices, so the
//! loss weights keep their meaning across segment lengths.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dsp::{mel_spectrogram_tape, MelSpectrogram};
use crate::error::{Error, Result};
use crate::model::{generator_forward, GeneratorConfig};
use crate::tensor::{Bound, Tape, Var};

/// Weights of the generator objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    /// The identity terms are dropped from this iteration on.
    pub identity_active_iterations: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cyc: 10.0, lambda_id: 5.0, identity_active_iterations: 1000 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cyc >= 0.0 && self.lambda_id >= 0.0 && self.lambda_cyc.is_finite() && self.lambda_id.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn identity_active(&self, iteration: u64) -> bool {
        iteration < self.identity_active_iterations
    }
}

fn mean_sq_offset(tape: &mut Tape, x: Var, target: f64) -> Var {
    let d = tape.add_scalar(x, -target);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// `mean((real - 1)²) + mean(fake²)` for one block.
pub fn adv_loss_d(tape: &mut Tape, real: Var, fake: Var) -> Var {
    let r = mean_sq_offset(tape, real, 1.0);
    let f = mean_sq_offset(tape, fake, 0.0);
    tape.add(r, f).expect("scalars")
}

/// `mean((fake - 1)²)` for one block.
pub fn adv_loss_g(tape: &mut Tape, fake: Var) -> Var {
    mean_sq_offset(tape, fake, 1.0)
}

/// Second adversarial pair on fully cycled waveforms: `(D′ term, G term)`.
pub fn adv2_losses(tape: &mut Tape, real: Var, cycled: Var) -> (Var, Var) {
    (adv_loss_d(tape, real, cycled), adv_loss_g(tape, cycled))
}

/// Element-mean absolute difference.
pub fn l1_mean(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!("L1 between {:?} and {:?}", tape.shape(a), tape.shape(b))));
    }
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Mel L1 between the source and its reconstruction after a full cycle.
pub fn cycle_loss(tape: &mut Tape, s: Var, reconstructed: Var) -> Result<Var> {
    l1_mean(tape, s, reconstructed)
}

/// Mel L1 between a target-domain input and the generator's output on it.
pub fn identity_loss(tape: &mut Tape, mel_y: Var, mel_g_of_y: Var) -> Result<Var> {
    l1_mean(tape, mel_y, mel_g_of_y)
}

/// Element-mean absolute difference of two mel-spectrograms.
pub fn mel_l1(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("L1 between {:?} and {:?}", a.shape(), b.shape())));
    }
    let sum: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.values().len() as f64)
}

/// Per-block discriminator terms. `adv_y` scores real y against G_{X→Y}
/// output, `adv_x` real x against G_{Y→X} output; the optional second pair
/// scores real audio against fully cycled audio.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiscriminatorTerms<T> {
    pub adv_y: Vec<T>,
    pub adv_x: Vec<T>,
    pub adv2_x: Option<Vec<T>>,
    pub adv2_y: Option<Vec<T>>,
}

impl<T: Copy> DiscriminatorTerms<T> {
    fn check(&self, k: usize) -> Result<()> {
        let bad = |what: &str, n: usize| Err(Error::Contract(format!("{what} has {n} block terms, expected {k}")));
        for (what, v) in [("adv_y", &self.adv_y), ("adv_x", &self.adv_x)] {
            if v.len() != k {
                return bad(what, v.len());
            }
        }
        match (&self.adv2_x, &self.adv2_y) {
            (Some(a), Some(b)) => {
                for (what, v) in [("adv2_x", a), ("adv2_y", b)] {
                    if v.len() != k {
                        return bad(what, v.len());
                    }
                }
            }
            (None, None) => {}
            _ => return Err(Error::Contract("second adversarial terms present for one direction only".into())),
        }
        Ok(())
    }

    fn all(&self) -> impl Iterator<Item = T> + '_ {
        let adv2 = self.adv2_x.iter().chain(&self.adv2_y).flatten();
        self.adv_y.iter().chain(&self.adv_x).chain(adv2).copied()
    }

    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> DiscriminatorTerms<U> {
        DiscriminatorTerms {
            adv_y: self.adv_y.iter().map(|&v| f(v)).collect(),
            adv_x: self.adv_x.iter().map(|&v| f(v)).collect(),
            adv2_x: self.adv2_x.as_ref().map(|v| v.iter().map(|&x| f(x)).collect()),
            adv2_y: self.adv2_y.as_ref().map(|v| v.iter().map(|&x| f(x)).collect()),
        }
    }
}

/// Plain sum over blocks and directions of the discriminator terms.
pub fn total_discriminator_loss(terms: &DiscriminatorTerms<f64>, k: usize) -> Result<f64> {
    terms.check(k)?;
    Ok(terms.all().sum())
}

/// Tape version of [`total_discriminator_loss`].
pub fn discriminator_objective(tape: &mut Tape, terms: &DiscriminatorTerms<Var>, k: usize) -> Result<Var> {
    terms.check(k)?;
    let mut it = terms.all();
    let first = it.next().ok_or_else(|| Error::Contract("no discriminator terms".into()))?;
    it.try_fold(first, |acc, v| tape.add(acc, v))
}

/// Generator objective components. Adversarial entries are already summed
/// over the K blocks; cycle and identity entries are unweighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorTerms<T> {
    pub adv_xy: Option<T>,
    pub adv_yx: Option<T>,
    pub cyc_fwd: Option<T>,
    pub cyc_bwd: Option<T>,
    pub id_fwd: Option<T>,
    pub id_bwd: Option<T>,
    pub adv2_x: Option<T>,
    pub adv2_y: Option<T>,
}

impl<T> Default for GeneratorTerms<T> {
    fn default() -> Self {
        GeneratorTerms {
            adv_xy: None,
            adv_yx: None,
            cyc_fwd: None,
            cyc_bwd: None,
            id_fwd: None,
            id_bwd: None,
            adv2_x: None,
            adv2_y: None,
        }
    }
}

impl<T: Copy> GeneratorTerms<T> {
    fn check(&self) -> Result<()> {
        let missing = |what: &str| Err(Error::Contract(format!("generator objective is missing {what}")));
        if self.adv_xy.is_none() || self.adv_yx.is_none() {
            return missing("an adversarial term");
        }
        if self.cyc_fwd.is_none() || self.cyc_bwd.is_none() {
            return missing("a cycle term");
        }
        if self.id_fwd.is_some() != self.id_bwd.is_some() {
            return missing("one identity direction");
        }
        if self.adv2_x.is_some() != self.adv2_y.is_some() {
            return missing("one second-adversarial direction");
        }
        Ok(())
    }

    /// `(term, weight)` pairs of the objective.
    fn weighted(&self, w: &LossWeights) -> [(Option<T>, f64); 8] {
        [
            (self.adv_xy, 1.0),
            (self.adv_yx, 1.0),
            (self.cyc_fwd, w.lambda_cyc),
            (self.cyc_bwd, w.lambda_cyc),
            (self.id_fwd, w.lambda_id),
            (self.id_bwd, w.lambda_id),
            (self.adv2_x, 1.0),
            (self.adv2_y, 1.0),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> GeneratorTerms<U> {
        GeneratorTerms {
            adv_xy: self.adv_xy.map(&mut f),
            adv_yx: self.adv_yx.map(&mut f),
            cyc_fwd: self.cyc_fwd.map(&mut f),
            cyc_bwd: self.cyc_bwd.map(&mut f),
            id_fwd: self.id_fwd.map(&mut f),
            id_bwd: self.id_bwd.map(&mut f),
            adv2_x: self.adv2_x.map(&mut f),
            adv2_y: self.adv2_y.map(&mut f),
        }
    }
}

/// Tape version of the weighted generator objective.
pub fn generator_objective(tape: &mut Tape, terms: &GeneratorTerms<Var>, w: &LossWeights) -> Result<Var> {
    terms.check()?;
    let mut total: Option<Var> = None;
    for (term, weight) in terms.weighted(w) {
        let Some(v) = term else { continue };
        let v = if weight == 1.0 { v } else { tape.scale(v, weight) };
        total = Some(match total {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
    }
    total.ok_or_else(|| Error::Contract("empty generator objective".into()))
}

/// Scalar summary of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub iteration: u64,
    pub l_d: f64,
    pub l_g: f64,
    pub terms: GeneratorTerms<f64>,
}

impl LossReport {
    pub fn adv(&self) -> f64 {
        self.terms.adv_xy.unwrap_or(0.0) + self.terms.adv_yx.unwrap_or(0.0)
    }

    pub fn adv2(&self) -> f64 {
        self.terms.adv2_x.unwrap_or(0.0) + self.terms.adv2_y.unwrap_or(0.0)
    }

    /// Unweighted forward plus backward cycle loss.
    pub fn cyc(&self) -> f64 {
        self.terms.cyc_fwd.unwrap_or(0.0) + self.terms.cyc_bwd.unwrap_or(0.0)
    }

    pub fn id(&self) -> f64 {
        self.terms.id_fwd.unwrap_or(0.0) + self.terms.id_bwd.unwrap_or(0.0)
    }

    pub const LOG_HEADER: &'static str = "iter,L_D,L_G,adv,adv2,cyc,id";

    pub fn all_finite(&self) -> bool {
        [self.l_d, self.l_g, self.adv(), self.adv2(), self.cyc(), self.id()].iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        [self.l_d, self.l_g, self.adv(), self.adv2(), self.cyc(), self.id()].iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl fmt::Display for LossReport {
    /// One log line: `iter,L_D,L_G,adv,adv2,cyc,id`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.iteration,
            self.l_d,
            self.l_g,
            self.adv(),
            self.adv2(),
            self.cyc(),
            self.id()
        )
    }
}

/// Weighted generator objective over scalar components.
pub fn total_generator_loss(terms: GeneratorTerms<f64>, w: &LossWeights) -> Result<LossReport> {
    terms.check()?;
    let l_g = terms.weighted(w).iter().filter_map(|&(t, wt)| t.map(|v| wt * v)).sum();
    Ok(LossReport { iteration: 0, l_d: 0.0, l_g, terms })
}

/// Mel frames of a generated waveform, trimmed to the `frames` of its input.
///
/// A `256·T` sample waveform yields `T + 1` centred frames; the last one
/// only covers padding and is dropped.
pub fn generated_mel(tape: &mut Tape, wav: Var, frames: usize) -> Result<Var> {
    let mel = mel_spectrogram_tape(tape, wav)?;
    tape.slice_cols(mel, 0, frames)
}

/// Result of one masked cycle.
#[derive(Debug, Clone, Copy)]
pub struct CycleOutputs {
    /// Forward generator output on the masked input.
    pub converted: Var,
    /// Backward generator output on the converted mel with an all-ones mask.
    pub cycled: Var,
    /// Mel of `cycled`, comparable to the source mel.
    pub reconstructed: Var,
}

/// `ỹ = G(s⊙m, m)`, `x̃ = G′(F(ỹ), 1)`, and `F(x̃)` for the cycle loss.
pub fn masked_cycle_step(
    tape: &mut Tape,
    s: Var,
    m: Var,
    forward: (&Bound, &GeneratorConfig),
    backward: (&Bound, &GeneratorConfig),
) -> Result<CycleOutputs> {
    let frames = match tape.shape(s) {
        &[_, t] => t,
        other => return Err(Error::dim(format!("mel must be [bins × T], got {other:?}"))),
    };
    let converted = generator_forward(tape, forward.0, forward.1, s, m)?;
    let converted_mel = generated_mel(tape, converted, frames)?;
    let shape = tape.shape(s).to_vec();
    let ones = tape.leaf(shape.clone(), vec![1.0; shape.iter().product()], false);
    let cycled = generator_forward(tape, backward.0, backward.1, converted_mel, ones)?;
    let reconstructed = generated_mel(tape, cycled, frames)?;
    Ok(CycleOutputs { converted, cycled, reconstructed })
}
