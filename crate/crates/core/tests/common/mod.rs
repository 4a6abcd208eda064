//! Central-difference gradient checks shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavecycle_core::dsp::mel_spectrogram_tape;
use wavecycle_core::losses::{
    adv2_losses, adv_loss_d, adv_loss_g, cycle_loss, discriminator_objective, generated_mel, generator_objective,
    identity_loss, masked_cycle_step, DiscriminatorTerms, GeneratorTerms, LossWeights,
};
use wavecycle_core::model::{discriminator_forward, generator_forward, DiscriminatorConfig, GeneratorConfig, MsdLayer};
use wavecycle_core::tensor::{Bound, Conv1dOpts, Conv2dOpts, ParamSet, Tape, Tensor, Var};
use wavecycle_core::Result;

pub const EPS: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// One input leaf: shape and values.
pub type Input = (Vec<usize>, Vec<f64>);

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Input {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| std * (rng.gen::<f64>() * 2.0 - 1.0) * 1.7).collect())
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect();
    (shape.to_vec(), v)
}

/// Largest relative error between backward-pass and central-difference
/// gradients, over every element of every input.
pub fn check_inputs(inputs: &[Input], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |vals: &[Input]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|(s, v)| tape.leaf(s.clone(), v.clone(), false)).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, v)| tape.leaf(s.clone(), v.clone(), true)).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let n = inputs[k].1.len();
        let zeros = vec![0.0; n];
        let analytic = grads.get(var).unwrap_or(&zeros).to_vec();
        for i in 0..n {
            let x0 = work[k].1[i];
            work[k].1[i] = x0 + EPS;
            let up = eval(&work);
            work[k].1[i] = x0 - EPS;
            let down = eval(&work);
            work[k].1[i] = x0;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * EPS)));
        }
    }
    worst
}

/// Weighted sum `Σ out ⊙ r` with fixed random `r`, reducing any output to a
/// scalar whose gradient exercises every output element.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let r = tape.leaf(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), false);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

/// Directional check over whole parameter sets: for random unit directions
/// `v` spanning every parameter, compares `∇f·v` with the central difference
/// of `f` along `v`. Per-element checks on a deep model are dominated by the
/// components whose true gradient is tiny, and by L1 and clamp kinks that a
/// full `ε` step on one bias can cross; a spread-out direction avoids both.
pub fn check_params(
    sets: &[ParamSet],
    directions: usize,
    seed: u64,
    f: impl Fn(&mut Tape, &[Bound]) -> Result<Var>,
) -> f64 {
    let eval = |sets: &[ParamSet]| -> f64 {
        let mut tape = Tape::new();
        let bounds: Vec<Bound> = sets.iter().map(|s| s.bind(&mut tape)).collect();
        let out = f(&mut tape, &bounds).expect("forward");
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let bounds: Vec<Bound> = sets.iter().map(|s| s.bind(&mut tape)).collect();
    let out = f(&mut tape, &bounds).expect("forward");
    let vars: Vec<Vec<Var>> = bounds.into_iter().map(Bound::into_vars).collect();
    let grads = tape.backward(out).expect("backward");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dirs: Vec<Vec<Vec<f64>>> = sets
            .iter()
            .map(|s| s.iter().map(|(_, t)| (0..t.numel()).map(|_| rng.sample::<f64, _>(normal)).collect()).collect())
            .collect();
        let norm = dirs.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let mut analytic = 0.0;
        for (si, set_dirs) in dirs.iter().enumerate() {
            for (ti, d) in set_dirs.iter().enumerate() {
                if let Some(g) = grads.get(vars[si][ti]) {
                    analytic += g.iter().zip(d).map(|(g, d)| g * d).sum::<f64>() / norm;
                }
            }
        }
        let shifted = |step: f64| -> Vec<ParamSet> {
            let mut w = sets.to_vec();
            for (si, set) in w.iter_mut().enumerate() {
                for (ti, t) in set.tensors_mut().enumerate() {
                    for (x, d) in t.data_mut().iter_mut().zip(&dirs[si][ti]) {
                        *x += step * d / norm;
                    }
                }
            }
            w
        };
        let numeric = (eval(&shifted(EPS)) - eval(&shifted(-EPS))) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

// ---------------------------------------------------------------------------
// Tiny model used by the loss-term checks.

pub const TINY_FRAMES: usize = 8;

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig { base_channels: 4, glu_channels: 2, ..GeneratorConfig::default() }
}

pub fn tiny_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig {
        mpd_channels: vec![2, 2],
        msd_layers: vec![MsdLayer::new(2, 5, 2, 1), MsdLayer::new(4, 5, 2, 2)],
        ..DiscriminatorConfig::default()
    }
}

/// Parameters redrawn at a larger scale so activations sit well above the
/// log floor of the mel transform.
pub fn live_params(set: ParamSet, std: f64, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in set.iter() {
        let (shape, v) = randn(rng, t.shape(), std);
        out.insert(name, Tensor::new(shape, v).unwrap());
    }
    out
}

pub struct TinyModel {
    pub g: GeneratorConfig,
    pub d: DiscriminatorConfig,
    pub g_xy: ParamSet,
    pub g_yx: ParamSet,
    pub d_x: ParamSet,
    pub d_y: ParamSet,
    pub d2_x: ParamSet,
    pub d2_y: ParamSet,
    pub s_x: Input,
    pub s_y: Input,
    pub mask: Input,
    pub wav_x: Input,
    pub wav_y: Input,
}

impl TinyModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = tiny_generator();
        let d = tiny_discriminator();
        let gp = |rng: &mut ChaCha8Rng| live_params(g.zeros().unwrap(), 0.15, rng);
        let g_xy = gp(&mut rng);
        let g_yx = gp(&mut rng);
        let dp = |rng: &mut ChaCha8Rng| live_params(d.zeros().unwrap(), 0.3, rng);
        let (d_x, d_y, d2_x, d2_y) = (dp(&mut rng), dp(&mut rng), dp(&mut rng), dp(&mut rng));
        let mel = |rng: &mut ChaCha8Rng| {
            let v = (0..80 * TINY_FRAMES).map(|_| rng.gen_range(-6.0..0.0)).collect();
            (vec![80, TINY_FRAMES], v)
        };
        let (s_x, s_y) = (mel(&mut rng), mel(&mut rng));
        let mut m = vec![1.0; 80 * TINY_FRAMES];
        for b in 0..80 {
            for t in 2..4 {
                m[b * TINY_FRAMES + t] = 0.0;
            }
        }
        let wav = |rng: &mut ChaCha8Rng| randn(rng, &[1, 256 * TINY_FRAMES], 0.3);
        let (wav_x, wav_y) = (wav(&mut rng), wav(&mut rng));
        TinyModel { g, d, g_xy, g_yx, d_x, d_y, d2_x, d2_y, s_x, s_y, mask: (vec![80, TINY_FRAMES], m), wav_x, wav_y }
    }

    pub fn leaf(tape: &mut Tape, x: &Input) -> Var {
        tape.leaf(x.0.clone(), x.1.clone(), false)
    }
}

fn block_sum(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one block");
    it.try_fold(first, |a, v| tape.add(a, v))
}

fn d_terms(tape: &mut Tape, d: &Bound, cfg: &DiscriminatorConfig, real: Var, fake: Var) -> Result<Vec<Var>> {
    let r = discriminator_forward(tape, d, cfg, real)?;
    let f = discriminator_forward(tape, d, cfg, fake)?;
    Ok(r.scores().into_iter().zip(f.scores()).map(|(r, f)| adv_loss_d(tape, r, f)).collect())
}

fn g_adv(tape: &mut Tape, d: &Bound, cfg: &DiscriminatorConfig, fake: Var) -> Result<Var> {
    let out = discriminator_forward(tape, d, cfg, fake)?;
    let terms = out.scores().into_iter().map(|s| adv_loss_g(tape, s)).collect();
    block_sum(tape, terms)
}

/// Named gradient checks over every differentiable op and every loss term.
/// Returns `(name, worst relative error)`.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = op_checks();
    out.extend(loss_checks());
    out
}

pub fn op_checks() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = Vec::new();
    let mut push = |name: &str, e: f64| r.push((name.to_string(), e));

    let a = randn(&mut rng, &[3, 4], 1.0);
    let b = randn(&mut rng, &[3, 4], 1.0);
    let kinky = away_from_zero(&mut rng, &[3, 4]);
    let pos: Input = (vec![3, 4], (0..12).map(|_| rng.gen_range(0.2..2.0)).collect());

    push("add", check_inputs(&[a.clone(), b.clone()], |t, v| { let o = t.add(v[0], v[1])?; project(t, o, 1) }));
    push("sub", check_inputs(&[a.clone(), b.clone()], |t, v| { let o = t.sub(v[0], v[1])?; project(t, o, 2) }));
    push("mul", check_inputs(&[a.clone(), b.clone()], |t, v| { let o = t.mul(v[0], v[1])?; project(t, o, 3) }));
    push("scale", check_inputs(&[a.clone()], |t, v| { let o = t.scale(v[0], -2.5); project(t, o, 4) }));
    push("add_scalar", check_inputs(&[a.clone()], |t, v| { let o = t.add_scalar(v[0], 0.7); project(t, o, 5) }));
    push("square", check_inputs(&[a.clone()], |t, v| { let o = t.square(v[0]); project(t, o, 6) }));
    push("abs", check_inputs(&[kinky.clone()], |t, v| { let o = t.abs(v[0]); project(t, o, 7) }));
    push("sqrt", check_inputs(&[pos.clone()], |t, v| { let o = t.sqrt(v[0]); project(t, o, 8) }));
    push("log_clamp", check_inputs(&[pos.clone()], |t, v| { let o = t.log_clamp(v[0], 1e-5); project(t, o, 9) }));
    push("sigmoid", check_inputs(&[a.clone()], |t, v| { let o = t.sigmoid(v[0]); project(t, o, 10) }));
    push("tanh", check_inputs(&[a.clone()], |t, v| { let o = t.tanh(v[0]); project(t, o, 11) }));
    push("leaky_relu", check_inputs(&[kinky], |t, v| { let o = t.leaky_relu(v[0], 0.1); project(t, o, 12) }));
    push("sum", check_inputs(&[a.clone()], |t, v| { let s = t.sum(v[0]); Ok(t.square(s)) }));
    push("mean", check_inputs(&[a.clone()], |t, v| { let s = t.mean(v[0]); Ok(t.square(s)) }));
    push("reshape", check_inputs(&[a.clone()], |t, v| { let o = t.reshape(v[0], [2, 6])?; project(t, o, 13) }));
    push(
        "gather",
        check_inputs(&[a.clone()], |t, v| {
            let idx: Arc<[usize]> = vec![0, 3, 3, 11, 5, 0].into();
            let o = t.gather(v[0], idx, [2, 3])?;
            project(t, o, 14)
        }),
    );
    push("slice_cols", check_inputs(&[a.clone()], |t, v| { let o = t.slice_cols(v[0], 1, 2)?; project(t, o, 15) }));
    push("transpose", check_inputs(&[a.clone()], |t, v| { let o = t.transpose(v[0])?; project(t, o, 16) }));
    push(
        "concat_channels",
        check_inputs(&[a.clone(), randn(&mut rng, &[2, 4], 1.0)], |t, v| {
            let o = t.concat_channels(&[v[0], v[1]])?;
            project(t, o, 17)
        }),
    );
    push("glu", check_inputs(&[randn(&mut rng, &[4, 5], 1.0)], |t, v| { let o = t.glu(v[0])?; project(t, o, 18) }));
    push(
        "matmul",
        check_inputs(&[a.clone(), randn(&mut rng, &[4, 2], 1.0)], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o, 19)
        }),
    );
    let consts: Arc<[f64]> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>().into();
    push(
        "matmul_const",
        check_inputs(&[a.clone()], |t, v| {
            let o = t.matmul_const(v[0], consts.clone(), (4, 2))?;
            project(t, o, 20)
        }),
    );
    let x1 = randn(&mut rng, &[4, 11], 1.0);
    let w1 = randn(&mut rng, &[6, 2, 3], 0.5);
    let b1 = randn(&mut rng, &[6], 0.5);
    push(
        "conv1d",
        check_inputs(&[x1.clone(), w1, b1], |t, v| {
            let opts = Conv1dOpts { stride: 2, pad_left: 2, pad_right: 1, dilation: 2, groups: 2 };
            let o = t.conv1d(v[0], v[1], Some(v[2]), opts)?;
            project(t, o, 21)
        }),
    );
    push(
        "conv1d_same_even",
        check_inputs(&[x1.clone(), randn(&mut rng, &[3, 4, 2], 0.5)], |t, v| {
            let o = t.conv1d(v[0], v[1], None, Conv1dOpts::same(2, 3))?;
            project(t, o, 22)
        }),
    );
    push(
        "conv2d",
        check_inputs(
            &[randn(&mut rng, &[2, 5, 6], 1.0), randn(&mut rng, &[3, 2, 3, 2], 0.5), randn(&mut rng, &[3], 0.5)],
            |t, v| {
                let o = t.conv2d(v[0], v[1], Some(v[2]), Conv2dOpts { stride: (2, 1), padding: (1, 1) })?;
                project(t, o, 23)
            },
        ),
    );
    push(
        "conv_transpose1d",
        check_inputs(
            &[randn(&mut rng, &[3, 5], 1.0), randn(&mut rng, &[3, 2, 4], 0.5), randn(&mut rng, &[2], 0.5)],
            |t, v| {
                let o = t.conv_transpose1d(v[0], v[1], Some(v[2]), 2, 1)?;
                project(t, o, 24)
            },
        ),
    );
    push("avg_pool1d", check_inputs(&[x1], |t, v| { let o = t.avg_pool1d(v[0], 4, 2)?; project(t, o, 25) }));
    push(
        "mel_spectrogram",
        check_inputs(&[randn(&mut rng, &[1, 1100], 0.3)], |t, v| {
            let o = mel_spectrogram_tape(t, v[0])?;
            project(t, o, 26)
        }),
    );
    r
}

/// Parameter-gradient checks of every loss term on the tiny model.
pub fn loss_checks() -> Vec<(String, f64)> {
    let m = TinyModel::new(5);
    let (g, d) = (&m.g, &m.d);
    let w = LossWeights::default();
    let k = d.num_blocks();
    let mut r = Vec::new();
    let n = 6;

    // adversarial, discriminator side: real y against G_xy(x)
    r.push((
        "adv_d".to_string(),
        check_params(&[m.g_xy.clone(), m.d_y.clone()], n, 1, |t, p| {
            let (s, mask, real) = (TinyModel::leaf(t, &m.s_x), TinyModel::leaf(t, &m.mask), TinyModel::leaf(t, &m.wav_y));
            let fake = generator_forward(t, &p[0], g, s, mask)?;
            let terms = d_terms(t, &p[1], d, real, fake)?;
            block_sum(t, terms)
        }),
    ));
    // adversarial, generator side
    r.push((
        "adv_g".to_string(),
        check_params(&[m.g_yx.clone(), m.d_x.clone()], n, 2, |t, p| {
            let (s, mask) = (TinyModel::leaf(t, &m.s_y), TinyModel::leaf(t, &m.mask));
            let fake = generator_forward(t, &p[0], g, s, mask)?;
            g_adv(t, &p[1], d, fake)
        }),
    ));
    // cycle consistency through both generators
    r.push((
        "cycle".to_string(),
        check_params(&[m.g_xy.clone(), m.g_yx.clone()], n, 3, |t, p| {
            let (s, mask) = (TinyModel::leaf(t, &m.s_x), TinyModel::leaf(t, &m.mask));
            let c = masked_cycle_step(t, s, mask, (&p[0], g), (&p[1], g))?;
            cycle_loss(t, s, c.reconstructed)
        }),
    ));
    // identity mapping
    r.push((
        "identity".to_string(),
        check_params(&[m.g_xy.clone()], n, 4, |t, p| {
            let s = TinyModel::leaf(t, &m.s_y);
            let ones = t.leaf([80, TINY_FRAMES], vec![1.0; 80 * TINY_FRAMES], false);
            let out = generator_forward(t, &p[0], g, s, ones)?;
            let mel = generated_mel(t, out, TINY_FRAMES)?;
            identity_loss(t, s, mel)
        }),
    ));
    // second adversarial pair on cycled audio, both sides
    for (name, side) in [("adv2_d", 0usize), ("adv2_g", 1)] {
        r.push((
            name.to_string(),
            check_params(&[m.g_xy.clone(), m.g_yx.clone(), m.d2_x.clone()], n, 5 + side as u64, |t, p| {
                let (s, mask, real) = (TinyModel::leaf(t, &m.s_x), TinyModel::leaf(t, &m.mask), TinyModel::leaf(t, &m.wav_x));
                let c = masked_cycle_step(t, s, mask, (&p[0], g), (&p[1], g))?;
                let rs = discriminator_forward(t, &p[2], d, real)?.scores();
                let cs = discriminator_forward(t, &p[2], d, c.cycled)?.scores();
                let mut terms = Vec::new();
                for (rv, cv) in rs.into_iter().zip(cs) {
                    let (ld, lg) = adv2_losses(t, rv, cv);
                    terms.push(if side == 0 { ld } else { lg });
                }
                block_sum(t, terms)
            }),
        ));
    }
    // full generator objective
    r.push((
        "generator_objective".to_string(),
        check_params(
            &[m.g_xy.clone(), m.g_yx.clone(), m.d_x.clone(), m.d_y.clone(), m.d2_x.clone(), m.d2_y.clone()],
            n,
            7,
            |t, p| {
                let (sx, sy, mask) = (TinyModel::leaf(t, &m.s_x), TinyModel::leaf(t, &m.s_y), TinyModel::leaf(t, &m.mask));
                let fwd = masked_cycle_step(t, sx, mask, (&p[0], g), (&p[1], g))?;
                let bwd = masked_cycle_step(t, sy, mask, (&p[1], g), (&p[0], g))?;
                let ones = t.leaf([80, TINY_FRAMES], vec![1.0; 80 * TINY_FRAMES], false);
                let gy = generator_forward(t, &p[0], g, sy, ones)?;
                let gy = generated_mel(t, gy, TINY_FRAMES)?;
                let gx = generator_forward(t, &p[1], g, sx, ones)?;
                let gx = generated_mel(t, gx, TINY_FRAMES)?;
                let terms = GeneratorTerms {
                    adv_xy: Some(g_adv(t, &p[3], d, fwd.converted)?),
                    adv_yx: Some(g_adv(t, &p[2], d, bwd.converted)?),
                    cyc_fwd: Some(cycle_loss(t, sx, fwd.reconstructed)?),
                    cyc_bwd: Some(cycle_loss(t, sy, bwd.reconstructed)?),
                    id_fwd: Some(identity_loss(t, sy, gy)?),
                    id_bwd: Some(identity_loss(t, sx, gx)?),
                    adv2_x: Some(g_adv(t, &p[4], d, fwd.cycled)?),
                    adv2_y: Some(g_adv(t, &p[5], d, bwd.cycled)?),
                };
                generator_objective(t, &terms, &w)
            },
        ),
    ));
    // full discriminator objective on fixed fakes
    r.push((
        "discriminator_objective".to_string(),
        check_params(&[m.d_x.clone(), m.d_y.clone(), m.d2_x.clone(), m.d2_y.clone()], n, 8, |t, p| {
            let (rx, ry) = (TinyModel::leaf(t, &m.wav_x), TinyModel::leaf(t, &m.wav_y));
            let fy = t.scale(rx, 0.5);
            let fx = t.scale(ry, -0.7);
            let terms = DiscriminatorTerms {
                adv_y: d_terms(t, &p[1], d, ry, fy)?,
                adv_x: d_terms(t, &p[0], d, rx, fx)?,
                adv2_x: Some(d_terms(t, &p[2], d, rx, fy)?),
                adv2_y: Some(d_terms(t, &p[3], d, ry, fx)?),
            };
            discriminator_objective(t, &terms, k)
        }),
    ));
    r
}
