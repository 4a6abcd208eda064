//! The adversarial training loop, learning-rate schedule, checkpoints and
//! conversion with trained generators.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, TrainConfig, TrainParams, SCHEMA_VERSION};

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{TrainSegment, UtterancePool};
use crate::dsp::{mel_spectrogram, resample, AudioBuffer};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_d, adv_loss_g, cycle_loss, discriminator_objective, generated_mel, generator_objective,
    identity_loss, masked_cycle_step, DiscriminatorTerms, GeneratorTerms, LossReport,
};
use crate::model::{discriminator_forward, generator_forward, DiscriminatorConfig, GeneratorConfig};
use crate::tensor::{adam_step, AdamState, Bound, ParamSet, Tape, Var};
use crate::SAMPLE_RATE;

/// Losses above this magnitude abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

/// `initial · decay^epoch`.
pub fn lr_schedule(initial: f64, decay: f64, epoch: u64) -> f64 {
    initial * decay.powf(epoch as f64)
}

/// Iterations per epoch: one pass over the non-overlapping segments of the
/// larger pool, in batches.
pub fn epoch_length(pool_x: &UtterancePool, pool_y: &UtterancePool, batch_size: usize) -> u64 {
    let segments = pool_x.segments_per_epoch().max(pool_y.segments_per_epoch());
    segments.div_ceil(batch_size.max(1)).max(1) as u64
}

/// Conversion direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    XToY,
    YToX,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x2y" => Ok(Direction::XToY),
            "y2x" => Ok(Direction::YToX),
            other => Err(Error::Config(format!("direction must be `x2y` or `y2x`, got `{other}`"))),
        }
    }
}

/// One parameter set with its optimiser moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub params: ParamSet,
    pub opt: AdamState,
}

impl Network {
    fn new(params: ParamSet) -> Self {
        let opt = AdamState::for_params(&params);
        Network { params, opt }
    }
}

/// Both generators, all discriminators, optimiser state, iteration counter
/// and the sampling RNG.
#[derive(Debug, Clone)]
pub struct TrainState {
    config: TrainConfig,
    pub g_xy: Network,
    pub g_yx: Network,
    pub d_x: Network,
    pub d_y: Network,
    /// Second-adversarial discriminators, present when that loss is enabled.
    pub d2_x: Option<Network>,
    pub d2_y: Option<Network>,
    iteration: u64,
    iters_per_epoch: u64,
    rng: ChaCha8Rng,
}

/// Tape of one batch element after the generator forward pass.
struct ItemGraph {
    tape: Tape,
    g_xy: Vec<Var>,
    g_yx: Vec<Var>,
    fake_y: Var,
    fake_x: Var,
    cycled_x: Var,
    cycled_y: Var,
    terms: GeneratorTerms<Var>,
}

impl TrainState {
    /// Fresh networks drawn from the config seed.
    pub fn new(config: TrainConfig, iters_per_epoch: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let gcfg = config.generator_config();
        let dcfg = &config.discriminator;
        let g_xy = Network::new(gcfg.init(&mut rng)?);
        let g_yx = Network::new(gcfg.init(&mut rng)?);
        let d_x = Network::new(dcfg.init(&mut rng)?);
        let d_y = Network::new(dcfg.init(&mut rng)?);
        let (d2_x, d2_y) = if config.ablation.enable_adv2 {
            (Some(Network::new(dcfg.init(&mut rng)?)), Some(Network::new(dcfg.init(&mut rng)?)))
        } else {
            (None, None)
        };
        Ok(TrainState { config, g_xy, g_yx, d_x, d_y, d2_x, d2_y, iteration: 0, iters_per_epoch: iters_per_epoch.max(1), rng })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn iters_per_epoch(&self) -> u64 {
        self.iters_per_epoch
    }

    pub fn epoch(&self) -> u64 {
        self.iteration / self.iters_per_epoch
    }

    pub fn learning_rate(&self) -> f64 {
        lr_schedule(self.config.train.lr_initial, self.config.train.lr_decay_per_epoch, self.epoch())
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Named networks in checkpoint order.
    pub fn networks(&self) -> Vec<(&'static str, &Network)> {
        let mut v = vec![("g_xy", &self.g_xy), ("g_yx", &self.g_yx), ("d_x", &self.d_x), ("d_y", &self.d_y)];
        if let (Some(a), Some(b)) = (&self.d2_x, &self.d2_y) {
            v.push(("d2_x", a));
            v.push(("d2_y", b));
        }
        v
    }

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Network)> {
        let mut v = vec![
            ("g_xy", &mut self.g_xy),
            ("g_yx", &mut self.g_yx),
            ("d_x", &mut self.d_x),
            ("d_y", &mut self.d_y),
        ];
        if let (Some(a), Some(b)) = (self.d2_x.as_mut(), self.d2_y.as_mut()) {
            v.push(("d2_x", a));
            v.push(("d2_y", b));
        }
        v
    }

    /// Parameter count of every network combined.
    pub fn num_params(&self) -> usize {
        self.networks().iter().map(|(_, n)| n.params.num_params()).sum()
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch_x: &[TrainSegment], batch_y: &[TrainSegment]) -> Result<LossReport> {
        let b = batch_x.len();
        if b == 0 || b != batch_y.len() {
            return Err(Error::Contract(format!("batches of {b} and {} segments", batch_y.len())));
        }
        let frames = batch_x[0].mel.frames();
        if batch_x.iter().chain(batch_y).any(|s| s.mel.frames() != frames) {
            return Err(Error::Contract("segments in a batch must share one length".into()));
        }
        let gcfg = self.config.generator_config();
        let identity = self.config.loss.identity_active(self.iteration);
        let lr = self.learning_rate();
        let hyper = self.config.adam();
        let inv_b = 1.0 / b as f64;
        let reported = self.iteration + 1;

        let mut items = Vec::with_capacity(b);
        for (sx, sy) in batch_x.iter().zip(batch_y) {
            items.push(self.generator_pass(&gcfg, sx, sy, identity)?);
        }

        // discriminator step on detached generator outputs
        for (_, net) in self.networks_mut().into_iter().skip(2) {
            net.params.zero_grad();
        }
        let mut l_d = 0.0;
        for (item, (sx, sy)) in items.iter().zip(batch_x.iter().zip(batch_y)) {
            l_d += inv_b * self.discriminator_pass(item, sx, sy, inv_b)?;
        }
        if !l_d.is_finite() || l_d.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { iteration: reported, detail: format!("L_D = {l_d}") });
        }
        for (_, net) in self.networks_mut().into_iter().skip(2) {
            adam_step(&mut net.params, &mut net.opt, hyper, lr)?;
        }

        // generator step through the updated, frozen discriminators
        self.g_xy.params.zero_grad();
        self.g_yx.params.zero_grad();
        let mut sums = GeneratorTerms::<f64>::default();
        let mut l_g = 0.0;
        for item in items {
            let (total, terms) = self.generator_update(item, inv_b)?;
            l_g += inv_b * total;
            sums = add_terms(sums, terms.map(|v| v * inv_b));
        }
        let report = LossReport { iteration: reported, l_d, l_g, terms: sums };
        if !report.all_finite() || report.max_abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { iteration: reported, detail: format!("{} ({})", report, LossReport::LOG_HEADER) });
        }
        adam_step(&mut self.g_xy.params, &mut self.g_xy.opt, hyper, lr)?;
        adam_step(&mut self.g_yx.params, &mut self.g_yx.opt, hyper, lr)?;
        self.iteration += 1;
        Ok(report)
    }

    fn generator_pass(&self, gcfg: &GeneratorConfig, sx: &TrainSegment, sy: &TrainSegment, identity: bool) -> Result<ItemGraph> {
        let mut tape = Tape::new();
        let bxy = self.g_xy.params.bind(&mut tape);
        let byx = self.g_yx.params.bind(&mut tape);
        let shape = sx.mel.shape();
        let s_x = tape.leaf(shape, sx.mel.values().to_vec(), false);
        let m_x = tape.leaf(shape, sx.mask.to_values(), false);
        let s_y = tape.leaf(shape, sy.mel.values().to_vec(), false);
        let m_y = tape.leaf(shape, sy.mask.to_values(), false);

        let fwd = masked_cycle_step(&mut tape, s_x, m_x, (&bxy, gcfg), (&byx, gcfg))?;
        let bwd = masked_cycle_step(&mut tape, s_y, m_y, (&byx, gcfg), (&bxy, gcfg))?;
        let cyc_fwd = cycle_loss(&mut tape, s_x, fwd.reconstructed)?;
        let cyc_bwd = cycle_loss(&mut tape, s_y, bwd.reconstructed)?;
        let (id_fwd, id_bwd) = if identity {
            let frames = shape[1];
            let ones = tape.leaf(shape, vec![1.0; shape[0] * frames], false);
            let gy = generator_forward(&mut tape, &bxy, gcfg, s_y, ones)?;
            let gy_mel = generated_mel(&mut tape, gy, frames)?;
            let gx = generator_forward(&mut tape, &byx, gcfg, s_x, ones)?;
            let gx_mel = generated_mel(&mut tape, gx, frames)?;
            (Some(identity_loss(&mut tape, s_y, gy_mel)?), Some(identity_loss(&mut tape, s_x, gx_mel)?))
        } else {
            (None, None)
        };
        let terms = GeneratorTerms { cyc_fwd: Some(cyc_fwd), cyc_bwd: Some(cyc_bwd), id_fwd, id_bwd, ..Default::default() };
        let (g_xy, g_yx) = (bxy.into_vars(), byx.into_vars());
        Ok(ItemGraph {
            tape,
            g_xy,
            g_yx,
            fake_y: fwd.converted,
            fake_x: bwd.converted,
            cycled_x: fwd.cycled,
            cycled_y: bwd.cycled,
            terms,
        })
    }

    /// Accumulates discriminator gradients for one element; returns its `L_D`.
    fn discriminator_pass(&mut self, item: &ItemGraph, sx: &TrainSegment, sy: &TrainSegment, weight: f64) -> Result<f64> {
        let dcfg = self.config.discriminator.clone();
        let k = dcfg.num_blocks();
        let mut tape = Tape::new();
        let wav = |tape: &mut Tape, v: &[f64]| tape.leaf([1, v.len()], v.to_vec(), false);
        let real_x = wav(&mut tape, &sx.waveform);
        let real_y = wav(&mut tape, &sy.waveform);
        let fake_y = wav(&mut tape, item.tape.value(item.fake_y));
        let fake_x = wav(&mut tape, item.tape.value(item.fake_x));

        let bd_x = self.d_x.params.bind(&mut tape);
        let bd_y = self.d_y.params.bind(&mut tape);
        let adv_y = d_block_terms(&mut tape, &bd_y, &dcfg, real_y, fake_y)?;
        let adv_x = d_block_terms(&mut tape, &bd_x, &dcfg, real_x, fake_x)?;
        let (d_x_vars, d_y_vars) = (bd_x.into_vars(), bd_y.into_vars());

        let mut d2_vars = None;
        let (adv2_x, adv2_y) = match (&self.d2_x, &self.d2_y) {
            (Some(nx), Some(ny)) => {
                let cyc_x = wav(&mut tape, item.tape.value(item.cycled_x));
                let cyc_y = wav(&mut tape, item.tape.value(item.cycled_y));
                let b2x = nx.params.bind(&mut tape);
                let b2y = ny.params.bind(&mut tape);
                let ax = d_block_terms(&mut tape, &b2x, &dcfg, real_x, cyc_x)?;
                let ay = d_block_terms(&mut tape, &b2y, &dcfg, real_y, cyc_y)?;
                d2_vars = Some((b2x.into_vars(), b2y.into_vars()));
                (Some(ax), Some(ay))
            }
            _ => (None, None),
        };
        let terms = DiscriminatorTerms { adv_y, adv_x, adv2_x, adv2_y };
        let total = discriminator_objective(&mut tape, &terms, k)?;
        let value = tape.scalar(total);
        let scaled = tape.scale(total, weight);
        let grads = tape.backward(scaled)?;
        self.d_x.params.accumulate(&d_x_vars, &grads)?;
        self.d_y.params.accumulate(&d_y_vars, &grads)?;
        if let (Some((vx, vy)), Some(nx), Some(ny)) = (d2_vars, self.d2_x.as_mut(), self.d2_y.as_mut()) {
            nx.params.accumulate(&vx, &grads)?;
            ny.params.accumulate(&vy, &grads)?;
        }
        Ok(value)
    }

    /// Completes the generator objective on an element's tape and
    /// accumulates generator gradients.
    fn generator_update(&mut self, mut item: ItemGraph, weight: f64) -> Result<(f64, GeneratorTerms<f64>)> {
        let dcfg = self.config.discriminator.clone();
        let tape = &mut item.tape;
        let bd_x = self.d_x.params.bind_frozen(tape);
        let bd_y = self.d_y.params.bind_frozen(tape);
        let mut terms = item.terms;
        terms.adv_xy = Some(g_block_sum(tape, &bd_y, &dcfg, item.fake_y)?);
        terms.adv_yx = Some(g_block_sum(tape, &bd_x, &dcfg, item.fake_x)?);
        if let (Some(nx), Some(ny)) = (&self.d2_x, &self.d2_y) {
            let b2x = nx.params.bind_frozen(tape);
            let b2y = ny.params.bind_frozen(tape);
            terms.adv2_x = Some(g_block_sum(tape, &b2x, &dcfg, item.cycled_x)?);
            terms.adv2_y = Some(g_block_sum(tape, &b2y, &dcfg, item.cycled_y)?);
        }
        let total = generator_objective(tape, &terms, &self.config.loss)?;
        let values = terms.map(|v| tape.scalar(v));
        let total_value = tape.scalar(total);
        let scaled = tape.scale(total, weight);
        let grads = tape.backward(scaled)?;
        self.g_xy.params.accumulate(&item.g_xy, &grads)?;
        self.g_yx.params.accumulate(&item.g_yx, &grads)?;
        Ok((total_value, values))
    }

    /// Generator parameters and layout for one direction.
    pub fn generator(&self, direction: Direction) -> (&ParamSet, GeneratorConfig) {
        let params = match direction {
            Direction::XToY => &self.g_xy.params,
            Direction::YToX => &self.g_yx.params,
        };
        (params, self.config.generator_config())
    }

    /// Converts a whole utterance with an all-ones mask.
    pub fn convert(&self, input: &AudioBuffer, direction: Direction) -> Result<AudioBuffer> {
        let (params, cfg) = self.generator(direction);
        convert(params, &cfg, input)
    }
}

fn add_terms(a: GeneratorTerms<f64>, b: GeneratorTerms<f64>) -> GeneratorTerms<f64> {
    let add = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (None, None) => None,
        (x, y) => Some(x.unwrap_or(0.0) + y.unwrap_or(0.0)),
    };
    GeneratorTerms {
        adv_xy: add(a.adv_xy, b.adv_xy),
        adv_yx: add(a.adv_yx, b.adv_yx),
        cyc_fwd: add(a.cyc_fwd, b.cyc_fwd),
        cyc_bwd: add(a.cyc_bwd, b.cyc_bwd),
        id_fwd: add(a.id_fwd, b.id_fwd),
        id_bwd: add(a.id_bwd, b.id_bwd),
        adv2_x: add(a.adv2_x, b.adv2_x),
        adv2_y: add(a.adv2_y, b.adv2_y),
    }
}

/// Per-block least-squares discriminator terms, real against fake.
fn d_block_terms(tape: &mut Tape, d: &Bound, cfg: &DiscriminatorConfig, real: Var, fake: Var) -> Result<Vec<Var>> {
    let r = discriminator_forward(tape, d, cfg, real)?;
    let f = discriminator_forward(tape, d, cfg, fake)?;
    Ok(r.scores().into_iter().zip(f.scores()).map(|(r, f)| adv_loss_d(tape, r, f)).collect())
}

/// Generator-side adversarial loss summed over blocks.
fn g_block_sum(tape: &mut Tape, d: &Bound, cfg: &DiscriminatorConfig, fake: Var) -> Result<Var> {
    let out = discriminator_forward(tape, d, cfg, fake)?;
    let mut total: Option<Var> = None;
    for s in out.scores() {
        let l = adv_loss_g(tape, s);
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Contract("discriminator without blocks".into()))
}

/// Runs `iterations` steps, sampling batches from the state's RNG.
pub fn train_loop(
    state: &mut TrainState,
    pool_x: &UtterancePool,
    pool_y: &UtterancePool,
    iterations: u64,
    mut on_report: impl FnMut(&TrainState, &LossReport) -> Result<()>,
) -> Result<()> {
    let batch = state.config.train.batch_size;
    let max_mask = state.config.effective_max_mask();
    for _ in 0..iterations {
        let bx = pool_x.sample_batch(batch, max_mask, &mut state.rng)?;
        let by = pool_y.sample_batch(batch, max_mask, &mut state.rng)?;
        let report = state.train_step(&bx, &by)?;
        on_report(state, &report)?;
    }
    Ok(())
}

/// Mel-spectrogram of the input (resampled if needed) through one generator
/// with an all-ones mask. Output length is 256 samples per mel frame.
pub fn convert(params: &ParamSet, cfg: &GeneratorConfig, input: &AudioBuffer) -> Result<AudioBuffer> {
    let input = resample(input, SAMPLE_RATE)?;
    let mel = mel_spectrogram(&input)?;
    let ones = vec![1.0; mel.values().len()];
    let wav = cfg.infer(params, mel.values(), &ones, mel.frames())?;
    AudioBuffer::new(wav.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), SAMPLE_RATE)
}
