use serde::{Deserialize, Serialize};

use super::{count_layer_params, init_params, zero_params, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Conv1dOpts, Conv2dOpts, ParamSet, Tape, Var};
use crate::{HOP_LENGTH, MEL_BINS};

const PRE_KERNEL: usize = 7;
const POST_KERNEL: usize = 7;

/// Architecture of the mel-to-waveform generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub mel_bins: usize,
    /// Feature maps after the GLU gate (the conv produces twice as many).
    pub glu_channels: usize,
    pub glu_kernel: [usize; 2],
    pub upsample_rates: Vec<usize>,
    pub upsample_kernels: Vec<usize>,
    pub mrf_kernels: Vec<usize>,
    pub mrf_dilations: Vec<usize>,
    /// Width of the pre-conv; halved after every upsampling block.
    pub base_channels: usize,
    pub leaky_slope: f64,
    /// 2D GLU encoder in front of the 1D stack. When off, the mel bins (and
    /// mask rows) feed the pre-conv directly as channels. Set from the
    /// training ablation flags rather than the config file.
    #[serde(skip, default = "enabled")]
    pub use_glu_encoder: bool,
    /// Feed the mask as a second input plane.
    #[serde(skip, default = "enabled")]
    pub mask_input: bool,
}

fn enabled() -> bool {
    true
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            mel_bins: MEL_BINS,
            glu_channels: 64,
            glu_kernel: [5, 15],
            upsample_rates: vec![8, 8, 2, 2],
            upsample_kernels: vec![16, 16, 4, 4],
            mrf_kernels: vec![2, 7, 11],
            mrf_dilations: vec![1, 3, 5],
            base_channels: 64,
            leaky_slope: 0.1,
            use_glu_encoder: true,
            mask_input: true,
        }
    }
}

impl GeneratorConfig {
    /// Full-width HiFi-GAN channel count.
    pub fn full() -> Self {
        GeneratorConfig { base_channels: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.mel_bins == 0 || self.base_channels == 0 || self.glu_channels == 0 {
            return bad("generator widths must be positive".into());
        }
        if self.upsample_rates.len() != self.upsample_kernels.len() {
            return bad("upsample_rates and upsample_kernels differ in length".into());
        }
        for (&u, &k) in self.upsample_rates.iter().zip(&self.upsample_kernels) {
            if u == 0 || k < u || (k - u) % 2 != 0 {
                return bad(format!("upsample kernel {k} incompatible with stride {u}"));
            }
            if k != 2 * u {
                return bad(format!("upsample kernel {k} must be twice the stride {u}"));
            }
        }
        let total: usize = self.upsample_rates.iter().product();
        if total != HOP_LENGTH {
            return bad(format!("upsample rates multiply to {total}, expected {HOP_LENGTH}"));
        }
        if self.mrf_kernels.len() != 3 {
            return bad(format!("MRF needs 3 residual branches, got {}", self.mrf_kernels.len()));
        }
        if self.mrf_kernels.contains(&0) || self.mrf_dilations.is_empty() || self.mrf_dilations.contains(&0) {
            return bad("MRF kernels and dilations must be positive".into());
        }
        if self.glu_kernel.iter().any(|&k| k % 2 == 0) {
            return bad(format!("GLU kernel {:?} must be odd", self.glu_kernel));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("leaky_slope must be finite and non-negative".into());
        }
        Ok(())
    }

    fn input_planes(&self) -> usize {
        if self.mask_input {
            2
        } else {
            1
        }
    }

    /// Channels after upsampling block `i`.
    pub fn block_channels(&self, i: usize) -> usize {
        (self.base_channels >> (i + 1)).max(1)
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let pre_in = if self.use_glu_encoder {
            let [kh, kw] = self.glu_kernel;
            layers.push(LayerSpec::new("enc", [2 * self.glu_channels, self.input_planes(), kh, kw], 2 * self.glu_channels));
            self.glu_channels * self.mel_bins
        } else {
            self.input_planes() * self.mel_bins
        };
        layers.push(LayerSpec::new("pre", [self.base_channels, pre_in, PRE_KERNEL], self.base_channels));
        let mut ch = self.base_channels;
        for (i, &k) in self.upsample_kernels.iter().enumerate() {
            let out = self.block_channels(i);
            layers.push(LayerSpec::new(format!("up{i}"), [ch, out, k], out));
            for (j, &kr) in self.mrf_kernels.iter().enumerate() {
                for l in 0..self.mrf_dilations.len() {
                    layers.push(LayerSpec::new(format!("mrf{i}.{j}.{l}.c1"), [out, out, kr], out));
                    layers.push(LayerSpec::new(format!("mrf{i}.{j}.{l}.c2"), [out, out, kr], out));
                }
            }
            ch = out;
        }
        layers.push(LayerSpec::new("post", [1, ch, POST_KERNEL], 1));
        layers
    }

    pub fn count_params(&self) -> usize {
        count_layer_params(&self.layers())
    }

    pub fn init<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        self.validate()?;
        Ok(init_params(&self.layers(), rng))
    }

    pub fn zeros(&self) -> Result<ParamSet> {
        self.validate()?;
        Ok(zero_params(&self.layers()))
    }

    /// Runs the generator outside any training graph and returns the waveform.
    pub fn infer(&self, params: &ParamSet, mel: &[f64], mask: &[f64], frames: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let s = tape.leaf([self.mel_bins, frames], mel.to_vec(), false);
        let m = tape.leaf([self.mel_bins, frames], mask.to_vec(), false);
        let out = generator_forward(&mut tape, &bound, self, s, m)?;
        Ok(tape.value(out).to_vec())
    }
}

/// Mel `[80 × T]` plus mask `[80 × T]` to waveform `[1 × 256·T]`.
///
/// The mask is re-applied to the mel, so content under masked columns never
/// reaches the network.
pub fn generator_forward(tape: &mut Tape, params: &Bound, cfg: &GeneratorConfig, mel: Var, mask: Var) -> Result<Var> {
    let shape = tape.shape(mel).to_vec();
    if tape.shape(mask) != shape || shape.len() != 2 || shape[0] != cfg.mel_bins {
        return Err(Error::dim(format!(
            "generator expects matching [{} × T] mel and mask, got {shape:?} and {:?}",
            cfg.mel_bins,
            tape.shape(mask)
        )));
    }
    let frames = shape[1];
    let slope = cfg.leaky_slope;
    let masked = tape.mul(mel, mask)?;
    let planes: Vec<Var> = if cfg.mask_input { vec![masked, mask] } else { vec![masked] };

    let features = if cfg.use_glu_encoder {
        let mut planes3 = Vec::with_capacity(planes.len());
        for p in planes {
            planes3.push(tape.reshape(p, [1, cfg.mel_bins, frames])?);
        }
        let x = tape.concat_channels(&planes3)?;
        let [kh, kw] = cfg.glu_kernel;
        let opts = Conv2dOpts { stride: (1, 1), padding: ((kh - 1) / 2, (kw - 1) / 2) };
        let h = tape.conv2d(x, params.var("enc.w"), Some(params.var("enc.b")), opts)?;
        let h = tape.glu(h)?;
        tape.reshape(h, [cfg.glu_channels * cfg.mel_bins, frames])?
    } else {
        tape.concat_channels(&planes)?
    };

    let mut x = tape.conv1d(
        features,
        params.var("pre.w"),
        Some(params.var("pre.b")),
        Conv1dOpts::padded((PRE_KERNEL - 1) / 2),
    )?;
    for (i, (&u, &k)) in cfg.upsample_rates.iter().zip(&cfg.upsample_kernels).enumerate() {
        x = tape.leaky_relu(x, slope);
        x = tape.conv_transpose1d(
            x,
            params.var(&format!("up{i}.w")),
            Some(params.var(&format!("up{i}.b"))),
            u,
            (k - u) / 2,
        )?;
        x = mrf_forward(tape, params, cfg, i, x)?;
    }
    x = tape.leaky_relu(x, slope);
    x = tape.conv1d(x, params.var("post.w"), Some(params.var("post.b")), Conv1dOpts::padded((POST_KERNEL - 1) / 2))?;
    Ok(tape.tanh(x))
}

/// Multi-receptive-field fusion after upsampling block `block`: the mean of
/// one residual stack per MRF kernel, each length-preserving.
pub fn mrf_forward(tape: &mut Tape, params: &Bound, cfg: &GeneratorConfig, block: usize, x: Var) -> Result<Var> {
    let slope = cfg.leaky_slope;
    let mut total: Option<Var> = None;
    for (j, &k) in cfg.mrf_kernels.iter().enumerate() {
        let mut h = x;
        for (l, &d) in cfg.mrf_dilations.iter().enumerate() {
            let name = format!("mrf{block}.{j}.{l}");
            let mut r = tape.leaky_relu(h, slope);
            r = tape.conv1d(
                r,
                params.var(&format!("{name}.c1.w")),
                Some(params.var(&format!("{name}.c1.b"))),
                Conv1dOpts::same(k, d),
            )?;
            r = tape.leaky_relu(r, slope);
            r = tape.conv1d(
                r,
                params.var(&format!("{name}.c2.w")),
                Some(params.var(&format!("{name}.c2.b"))),
                Conv1dOpts::same(k, 1),
            )?;
            h = tape.add(h, r)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, h)?,
            None => h,
        });
    }
    let total = total.ok_or_else(|| Error::Config("MRF without branches".into()))?;
    Ok(tape.scale(total, 1.0 / cfg.mrf_kernels.len() as f64))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig { base_channels: 4, glu_channels: 2, ..GeneratorConfig::default() }
    }

    fn inputs(frames: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mel = Tensor::randn([80, frames], 2.0, &mut rng).into_data();
        (mel, vec![1.0; 80 * frames])
    }

    #[test]
    fn output_length_is_hop_times_frames() {
        let cfg = tiny();
        let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for frames in [1, 3, 64] {
            let (mel, mask) = inputs(frames, frames as u64);
            let wav = cfg.infer(&params, &mel, &mask, frames).unwrap();
            assert_eq!(wav.len(), 256 * frames);
            assert!(wav.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn zero_network_is_silent() {
        let cfg = tiny();
        let params = cfg.zeros().unwrap();
        let (mel, mask) = inputs(4, 1);
        assert!(cfg.infer(&params, &mel, &mask, 4).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_content_is_ignored() {
        let cfg = tiny();
        let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (mut mel, mut mask) = inputs(6, 3);
        for b in 0..80 {
            mask[b * 6 + 2] = 0.0;
            mask[b * 6 + 3] = 0.0;
        }
        let base = cfg.infer(&params, &mel, &mask, 6).unwrap();
        for b in 0..80 {
            mel[b * 6 + 2] += 5.0;
        }
        assert_eq!(cfg.infer(&params, &mel, &mask, 6).unwrap(), base);
        let ones = vec![1.0; 80 * 6];
        assert_ne!(cfg.infer(&params, &mel, &ones, 6).unwrap(), base);
    }

    #[test]
    fn zero_mrf_is_identity() {
        let cfg = tiny();
        let params = cfg.zeros().unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = Tensor::randn([2, 17], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let xv = tape.constant(&x);
        let y = mrf_forward(&mut tape, &bound, &cfg, 0, xv).unwrap();
        for (a, b) in tape.value(y).iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mrf_preserves_length() {
        let cfg = tiny();
        let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for len in [1, 17, 64] {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant(&Tensor::randn([2, len], 1.0, &mut ChaCha8Rng::seed_from_u64(len as u64)));
            let y = mrf_forward(&mut tape, &bound, &cfg, 0, x).unwrap();
            assert_eq!(tape.shape(y), [2, len]);
        }
    }

    #[test]
    fn param_count_matches_init() {
        for cfg in [tiny(), GeneratorConfig { use_glu_encoder: false, ..tiny() }, GeneratorConfig::default()] {
            let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(params.num_params(), cfg.count_params());
        }
        assert_eq!(count_layer_params(&[]), 0);
    }

    #[test]
    fn encoder_param_term() {
        let with = GeneratorConfig::default();
        let enc = &with.layers()[0];
        assert_eq!(enc.name, "enc");
        // 128 output maps over 2 input planes with a 5x15 kernel, plus biases
        assert_eq!(enc.param_count(), 128 * 2 * 5 * 15 + 128);
    }

    #[test]
    fn doubling_width_roughly_quadruples_stack() {
        let small = GeneratorConfig { use_glu_encoder: false, base_channels: 64, ..GeneratorConfig::default() };
        let big = GeneratorConfig { base_channels: 128, ..small.clone() };
        let stack = |c: &GeneratorConfig| -> usize {
            c.layers().iter().filter(|l| l.name != "pre").map(LayerSpec::param_count).sum()
        };
        let ratio = stack(&big) as f64 / stack(&small) as f64;
        assert!((3.8..4.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        let bad_kernel = GeneratorConfig { upsample_kernels: vec![6, 16, 4, 4], ..GeneratorConfig::default() };
        assert!(matches!(bad_kernel.validate(), Err(Error::Config(_))));
        let bad_rate = GeneratorConfig { upsample_rates: vec![8, 8, 2], upsample_kernels: vec![16, 16, 4], ..GeneratorConfig::default() };
        assert!(bad_rate.validate().is_err());
    }
}
