use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{count_layer_params, init_params, zero_params, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Conv1dOpts, Conv2dOpts, ParamSet, Tape, Var};

/// One grouped conv layer of a scale discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsdLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl MsdLayer {
    pub const fn new(channels: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        MsdLayer { channels, kernel, stride, groups }
    }
}

/// Layout of one discriminator: period blocks followed by scale blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub mpd_periods: Vec<usize>,
    /// Widths of the strided (5, 1) convs; a stride-1 conv of the last width follows.
    pub mpd_channels: Vec<usize>,
    pub mpd_kernel: usize,
    pub mpd_stride: usize,
    pub msd_pool_factors: Vec<usize>,
    pub msd_layers: Vec<MsdLayer>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            mpd_periods: vec![2, 3, 5, 7, 11],
            mpd_channels: vec![16, 32, 64, 64],
            mpd_kernel: 5,
            mpd_stride: 3,
            msd_pool_factors: vec![1, 2, 4],
            msd_layers: vec![
                MsdLayer::new(16, 15, 1, 1),
                MsdLayer::new(16, 41, 2, 4),
                MsdLayer::new(32, 41, 2, 16),
                MsdLayer::new(32, 41, 4, 16),
                MsdLayer::new(64, 41, 4, 16),
                MsdLayer::new(64, 41, 1, 16),
                MsdLayer::new(64, 5, 1, 1),
            ],
            leaky_slope: 0.1,
        }
    }
}

impl DiscriminatorConfig {
    /// Full-width HiFi-GAN channel layout.
    pub fn full() -> Self {
        DiscriminatorConfig {
            mpd_channels: vec![32, 128, 512, 1024],
            msd_layers: vec![
                MsdLayer::new(128, 15, 1, 1),
                MsdLayer::new(128, 41, 2, 4),
                MsdLayer::new(256, 41, 2, 16),
                MsdLayer::new(512, 41, 4, 16),
                MsdLayer::new(1024, 41, 4, 16),
                MsdLayer::new(1024, 41, 1, 16),
                MsdLayer::new(1024, 5, 1, 1),
            ],
            ..Self::default()
        }
    }

    /// Number of blocks K: period blocks plus scale blocks.
    pub fn num_blocks(&self) -> usize {
        self.mpd_periods.len() + self.msd_pool_factors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.mpd_periods.contains(&0) || self.msd_pool_factors.contains(&0) {
            return bad("periods and pool factors must be positive");
        }
        if self.mpd_channels.is_empty() || self.mpd_channels.contains(&0) || self.msd_layers.is_empty() {
            return bad("discriminator needs at least one layer per block type");
        }
        if self.mpd_kernel.is_multiple_of(2) || self.mpd_stride == 0 {
            return bad("mpd kernel must be odd and stride positive");
        }
        let mut c_in = 1;
        for l in &self.msd_layers {
            if l.kernel % 2 == 0 || l.stride == 0 || l.groups == 0 || c_in % l.groups != 0 || l.channels % l.groups != 0 {
                return Err(Error::Config(format!("invalid msd layer {l:?} after {c_in} channels")));
            }
            c_in = l.channels;
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("leaky_slope must be finite and non-negative");
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        for b in 0..self.mpd_periods.len() {
            let mut c_in = 1;
            for (l, &c) in self.mpd_channels.iter().enumerate() {
                layers.push(LayerSpec::new(format!("mpd{b}.{l}"), [c, c_in, self.mpd_kernel, 1], c));
                c_in = c;
            }
            layers.push(LayerSpec::new(format!("mpd{b}.{}", self.mpd_channels.len()), [c_in, c_in, self.mpd_kernel, 1], c_in));
            layers.push(LayerSpec::new(format!("mpd{b}.post"), [1, c_in, 3, 1], 1));
        }
        for b in 0..self.msd_pool_factors.len() {
            let mut c_in = 1;
            for (l, layer) in self.msd_layers.iter().enumerate() {
                layers.push(LayerSpec::new(
                    format!("msd{b}.{l}"),
                    [layer.channels, c_in / layer.groups, layer.kernel],
                    layer.channels,
                ));
                c_in = layer.channels;
            }
            layers.push(LayerSpec::new(format!("msd{b}.post"), [1, c_in, 3], 1));
        }
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
}

/// Patch score map and intermediate activations of one block.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

/// K block outputs: period blocks first, then scale blocks.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub blocks: Vec<BlockOutput>,
}

impl DiscriminatorOutput {
    pub fn scores(&self) -> Vec<Var> {
        self.blocks.iter().map(|b| b.score).collect()
    }
}

fn wav_len(tape: &Tape, wav: Var) -> Result<usize> {
    match tape.shape(wav) {
        &[1, len] => Ok(len),
        s => Err(Error::dim(format!("discriminator expects a [1 × L] waveform, got {s:?}"))),
    }
}

/// Period block `block`: reflect-pad to a multiple of `period`, fold into
/// `[1 × L/p × p]`, then a strided 2D conv stack along the folded axis.
pub fn mpd_forward(tape: &mut Tape, params: &Bound, cfg: &DiscriminatorConfig, block: usize, wav: Var) -> Result<BlockOutput> {
    let period = *cfg
        .mpd_periods
        .get(block)
        .ok_or_else(|| Error::dim(format!("no period block {block}")))?;
    let len = wav_len(tape, wav)?;
    if len < period {
        return Err(Error::dim(format!("waveform of {len} samples shorter than period {period}")));
    }
    let pad = (period - len % period) % period;
    let padded = if pad == 0 {
        wav
    } else {
        let idx: Arc<[usize]> = (0..len + pad).map(|n| if n < len { n } else { 2 * (len - 1) - n }).collect();
        tape.gather(wav, idx, [1, len + pad])?
    };
    let mut x = tape.reshape(padded, [1, (len + pad) / period, period])?;
    let half = (cfg.mpd_kernel - 1) / 2;
    let mut features = Vec::new();
    for l in 0..=cfg.mpd_channels.len() {
        let stride = if l < cfg.mpd_channels.len() { cfg.mpd_stride } else { 1 };
        let name = format!("mpd{block}.{l}");
        let opts = Conv2dOpts { stride: (stride, 1), padding: (half, 0) };
        x = tape.conv2d(x, params.var(&format!("{name}.w")), Some(params.var(&format!("{name}.b"))), opts)?;
        x = tape.leaky_relu(x, cfg.leaky_slope);
        features.push(x);
    }
    let opts = Conv2dOpts { stride: (1, 1), padding: (1, 0) };
    let score = tape.conv2d(x, params.var(&format!("mpd{block}.post.w")), Some(params.var(&format!("mpd{block}.post.b"))), opts)?;
    Ok(BlockOutput { score, features })
}

/// Scale block `block`: average-pool by its factor, then the grouped conv stack.
pub fn msd_forward(tape: &mut Tape, params: &Bound, cfg: &DiscriminatorConfig, block: usize, wav: Var) -> Result<BlockOutput> {
    let factor = *cfg
        .msd_pool_factors
        .get(block)
        .ok_or_else(|| Error::dim(format!("no scale block {block}")))?;
    let len = wav_len(tape, wav)?;
    if len < factor {
        return Err(Error::dim(format!("waveform of {len} samples shorter than pool factor {factor}")));
    }
    let mut x = if factor == 1 { wav } else { tape.avg_pool1d(wav, factor, factor)? };
    let mut features = Vec::new();
    for (l, layer) in cfg.msd_layers.iter().enumerate() {
        let name = format!("msd{block}.{l}");
        let opts = Conv1dOpts::padded((layer.kernel - 1) / 2).stride(layer.stride).groups(layer.groups);
        x = tape.conv1d(x, params.var(&format!("{name}.w")), Some(params.var(&format!("{name}.b"))), opts)?;
        x = tape.leaky_relu(x, cfg.leaky_slope);
        features.push(x);
    }
    let score = tape.conv1d(
        x,
        params.var(&format!("msd{block}.post.w")),
        Some(params.var(&format!("msd{block}.post.b"))),
        Conv1dOpts::padded(1),
    )?;
    Ok(BlockOutput { score, features })
}

/// All period blocks then all scale blocks on one `[1 × L]` waveform.
pub fn discriminator_forward(tape: &mut Tape, params: &Bound, cfg: &DiscriminatorConfig, wav: Var) -> Result<DiscriminatorOutput> {
    let mut blocks = Vec::with_capacity(cfg.num_blocks());
    for b in 0..cfg.mpd_periods.len() {
        blocks.push(mpd_forward(tape, params, cfg, b, wav)?);
    }
    for b in 0..cfg.msd_pool_factors.len() {
        blocks.push(msd_forward(tape, params, cfg, b, wav)?);
    }
    Ok(DiscriminatorOutput { blocks })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn run(params: &ParamSet, cfg: &DiscriminatorConfig, wav: &[f64]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let w = tape.leaf([1, wav.len()], wav.to_vec(), false);
        let out = discriminator_forward(&mut tape, &bound, cfg, w).unwrap();
        out.blocks.iter().map(|b| tape.value(b.score).to_vec()).collect()
    }

    #[test]
    fn emits_eight_blocks() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.num_blocks(), 8);
        let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for len in [256, 2048] {
            let wav = Tensor::randn([len], 0.3, &mut ChaCha8Rng::seed_from_u64(len as u64)).into_data();
            let a = run(&params, &cfg, &wav);
            assert_eq!(a.len(), 8);
            assert_eq!(a, run(&params, &cfg, &wav));
        }
    }

    #[test]
    fn period_fold_extents() {
        let cfg = DiscriminatorConfig::default();
        let params = cfg.zeros().unwrap();
        for (len, rows) in [(16384, 8192), (5, 3)] {
            let mut tape = Tape::new();
            let bound = params.bind_frozen(&mut tape);
            let w = tape.leaf([1, len], vec![0.0; len], false);
            let out = mpd_forward(&mut tape, &bound, &cfg, 0, w).unwrap();
            let first = out.features[0];
            // first conv: stride 3, pad 2, kernel 5 over the folded rows
            assert_eq!(tape.shape(first), [16, (rows - 1) / 3 + 1, 2]);
            assert!(tape.value(out.score).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn reflect_pad_and_fold_is_lossless() {
        let cfg = DiscriminatorConfig { mpd_channels: vec![1], mpd_kernel: 1, mpd_stride: 1, ..DiscriminatorConfig::default() };
        let mut params = cfg.zeros().unwrap();
        params.get_mut("mpd0.0.w").unwrap().data_mut()[0] = 1.0;
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let w = tape.leaf([1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0], false);
        let out = mpd_forward(&mut tape, &bound, &cfg, 0, w).unwrap();
        assert_eq!(tape.shape(out.features[0]), [1, 3, 2]);
        assert_eq!(tape.value(out.features[0]), [1.0, 2.0, 3.0, 4.0, 5.0, 4.0]);
    }

    #[test]
    fn scale_block_pooling() {
        let cfg = DiscriminatorConfig::default();
        let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let w = tape.leaf([1, 16384], vec![0.25; 16384], false);
        let out = msd_forward(&mut tape, &bound, &cfg, 2, w).unwrap();
        assert_eq!(tape.shape(out.features[0]), [16, 4096]);
        let raw = msd_forward(&mut tape, &bound, &cfg, 0, w).unwrap();
        assert_eq!(tape.shape(raw.features[0]), [16, 16384]);
    }

    #[test]
    fn constant_input_gives_constant_interior_activation() {
        let cfg = DiscriminatorConfig::default();
        let params = cfg.init(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let w = tape.leaf([1, 512], vec![0.5; 512], false);
        let out = msd_forward(&mut tape, &bound, &cfg, 0, w).unwrap();
        let row = &tape.value(out.features[0])[..512];
        // away from the zero padding every tap sees the same constant
        for &v in &row[7..505] {
            assert!((v - row[7]).abs() < 1e-15);
        }
    }

    #[test]
    fn param_count_matches_init() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap().num_params(), cfg.count_params());
        assert!(DiscriminatorConfig::full().count_params() > cfg.count_params());
    }
}
