//! Time-conditional U-Net denoiser with a zero-convolution control branch fed
//! by the sketch and structure encoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::sinusoidal;
use crate::nn::{AttentionBlock, Conv2d, Graph, GroupNorm, Linear, ParamStore, ResBlock, Tensor, Var};
use crate::scalar::Scalar;

/// Sinusoid width per spacing component.
pub const SPACING_EMBED_PER_AXIS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_channels: usize,
    /// Image-to-latent factor of the condition encoders (matches the VAE).
    pub downsample_factor: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    /// Hidden width of the sketch and structure encoders.
    pub cond_channels: usize,
    /// Separate control branches for sketch and structure features.
    pub dual_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            downsample_factor: 4,
            base_channels: 64,
            channel_mult: vec![1, 2, 2],
            cond_channels: 32,
            dual_branch: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad("channel_mult must be non-empty and positive");
        }
        if self.base_channels == 0 || self.latent_channels == 0 || self.cond_channels < 2 {
            return bad("channel counts must be positive");
        }
        if !self.downsample_factor.is_power_of_two() {
            return bad("downsample_factor must be a power of two");
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_channels).collect()
    }

    fn emb_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Latent sides must be divisible by this.
    pub fn latent_multiple(&self) -> usize {
        1 << (self.channel_mult.len() - 1)
    }
}

/// Convolutional stack from an image-resolution map to latent-resolution
/// features, ending in a zero-initialized 1x1 convolution.
#[derive(Clone, Debug)]
struct CondEncoder {
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl CondEncoder {
    fn new<T: Scalar>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.cond_channels;
        let mut convs = vec![Conv2d::same3(s, rng, &format!("{name}.c0"), 1, c / 2)];
        let mut c_in = c / 2;
        for i in 0..cfg.downsample_factor.trailing_zeros() as usize {
            convs.push(Conv2d::new(s, rng, &format!("{name}.down{i}"), c_in, c, 3, 2, 1));
            c_in = c;
        }
        convs.push(Conv2d::same3(s, rng, &format!("{name}.c1"), c_in, c));
        let out = Conv2d::zero(s, rng, &format!("{name}.zero"), c, cfg.base_channels * cfg.channel_mult[0]);
        Self { convs, out }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, s, h);
            h = g.silu(h);
        }
        self.out.forward(g, s, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    res: ResBlock,
    attn: Option<AttentionBlock>,
    down: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct MidBlock {
    res_a: ResBlock,
    attn: AttentionBlock,
    res_b: ResBlock,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    res: ResBlock,
    attn: Option<AttentionBlock>,
    up: Option<Conv2d>,
}

fn encoder_levels<T: Scalar>(
    s: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &ModelConfig,
) -> (Conv2d, Vec<EncoderLevel>) {
    let w = cfg.widths();
    let conv_in = Conv2d::same3(s, rng, &format!("{prefix}.conv_in"), cfg.latent_channels, w[0]);
    let mut c_prev = w[0];
    let last = w.len() - 1;
    let levels = w
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let lvl = EncoderLevel {
                res: ResBlock::new(s, rng, &format!("{prefix}.enc{i}.res"), c_prev, c, Some(cfg.emb_dim())),
                attn: (i == last).then(|| AttentionBlock::new(s, rng, &format!("{prefix}.enc{i}.attn"), c)),
                down: (i < last).then(|| Conv2d::new(s, rng, &format!("{prefix}.enc{i}.down"), c, c, 3, 2, 1)),
            };
            c_prev = c;
            lvl
        })
        .collect();
    (conv_in, levels)
}

/// Trainable copy of the backbone encoder with zero-initialized outputs.
#[derive(Clone, Debug)]
struct ControlBranch {
    conv_in: Conv2d,
    levels: Vec<EncoderLevel>,
    mid_res: ResBlock,
    zero_skips: Vec<Conv2d>,
    zero_mid: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: ModelConfig,
    time_mlp: (Linear, Linear),
    spacing_mlp: (Linear, Linear),
    conv_in: Conv2d,
    enc: Vec<EncoderLevel>,
    mid: MidBlock,
    dec: Vec<DecoderLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    controls: Vec<ControlBranch>,
    sketch_enc: CondEncoder,
    structure_enc: CondEncoder,
}

/// Raw condition inputs for a batch.
#[derive(Clone, Debug)]
pub struct ConditionInputs<T> {
    /// Soft refined sketch `[n, 1, H, W]`.
    pub sketch: Tensor<T>,
    /// Reference map `[n, 1, H, W]`.
    pub reference: Tensor<T>,
    /// Voxel spacing per item.
    pub spacing: Vec<[f64; 3]>,
}

impl<T: Scalar> ConditionInputs<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            sketch: Tensor::zeros(self.sketch.shape()),
            reference: Tensor::zeros(self.reference.shape()),
            spacing: self.spacing.clone(),
        }
    }

    pub fn batch_len(&self) -> usize {
        self.sketch.shape()[0]
    }
}

/// Encoded condition features `C_s`, `C_r` and the spacing embedding.
pub struct ConditionBundle {
    pub c_s: Var,
    pub c_r: Var,
    pub v_embed: Var,
}

impl Denoiser {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let s = store;
        let w = cfg.widths();
        let e = cfg.emb_dim();
        let base = cfg.base_channels;
        let time_mlp = (
            Linear::new(s, rng, "time.l0", base, e),
            Linear::new(s, rng, "time.l1", e, e),
        );
        let spacing_mlp = (
            Linear::new(s, rng, "spacing.l0", 3 * SPACING_EMBED_PER_AXIS, e),
            Linear::new(s, rng, "spacing.l1", e, e),
        );
        let (conv_in, enc) = encoder_levels(s, rng, "unet", cfg);
        let c_low = *w.last().expect("levels");
        let mid = MidBlock {
            res_a: ResBlock::new(s, rng, "unet.mid.res_a", c_low, c_low, Some(e)),
            attn: AttentionBlock::new(s, rng, "unet.mid.attn", c_low),
            res_b: ResBlock::new(s, rng, "unet.mid.res_b", c_low, c_low, Some(e)),
        };
        let last = w.len() - 1;
        let mut c_cur = c_low;
        let mut dec = Vec::new();
        for i in (0..w.len()).rev() {
            let res = ResBlock::new(s, rng, &format!("unet.dec{i}.res"), c_cur + w[i], w[i], Some(e));
            let attn = (i == last).then(|| AttentionBlock::new(s, rng, &format!("unet.dec{i}.attn"), w[i]));
            let up = (i > 0).then(|| Conv2d::same3(s, rng, &format!("unet.dec{i}.up"), w[i], w[i - 1]));
            c_cur = if i > 0 { w[i - 1] } else { w[0] };
            dec.push(DecoderLevel { res, attn, up });
        }
        let norm_out = GroupNorm::new(s, rng, "unet.norm_out", w[0]);
        let conv_out = Conv2d::same3(s, rng, "unet.conv_out", w[0], cfg.latent_channels);

        let n_branches = if cfg.dual_branch { 2 } else { 1 };
        let mut controls = Vec::new();
        for b in 0..n_branches {
            let prefix = format!("ctrl{b}");
            let (conv_in, levels) = encoder_levels(s, rng, &prefix, cfg);
            let mid_res = ResBlock::new(s, rng, &format!("{prefix}.mid.res_a"), c_low, c_low, Some(e));
            let zero_skips = w
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv2d::zero(s, rng, &format!("{prefix}.zero{i}"), c, c))
                .collect();
            let zero_mid = Conv2d::zero(s, rng, &format!("{prefix}.zero_mid"), c_low, c_low);
            // start from the backbone encoder weights
            s.copy_within("unet.", &format!("{prefix}."));
            controls.push(ControlBranch {
                conv_in,
                levels,
                mid_res,
                zero_skips,
                zero_mid,
            });
        }
        let sketch_enc = CondEncoder::new(s, rng, "sketch_enc", cfg);
        let structure_enc = CondEncoder::new(s, rng, "structure_enc", cfg);
        Ok(Self {
            cfg: cfg.clone(),
            time_mlp,
            spacing_mlp,
            conv_in,
            enc,
            mid,
            dec,
            norm_out,
            conv_out,
            controls,
            sketch_enc,
            structure_enc,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn timestep_embedding<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, ts: &[usize]) -> Var {
        let tv: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let x = g.input(sinusoidal(&tv, self.cfg.base_channels, 10_000.0));
        let h = self.time_mlp.0.forward(g, s, x);
        let h = g.silu(h);
        self.time_mlp.1.forward(g, s, h)
    }

    fn spacing_embedding<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, spacing: &[[f64; 3]]) -> Var {
        let n = spacing.len();
        let per = SPACING_EMBED_PER_AXIS;
        let mut data = Vec::with_capacity(n * 3 * per);
        for v in spacing {
            for &c in v {
                // millimetres scaled so typical spacings span several periods
                let feats: Tensor<T> = sinusoidal(&[c * 100.0], per, 10_000.0);
                data.extend_from_slice(feats.data());
            }
        }
        let x = g.input(Tensor::from_vec([n, 3 * per, 1, 1], data).expect("spacing features"));
        let h = self.spacing_mlp.0.forward(g, s, x);
        let h = g.silu(h);
        self.spacing_mlp.1.forward(g, s, h)
    }

    /// `C_s` from the soft sketch.
    pub fn sketch_encode<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, sketch: Var) -> Var {
        self.sketch_enc.forward(g, s, sketch)
    }

    /// `C_r` from the reference map.
    pub fn structure_encode<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, reference: Var) -> Var {
        self.structure_enc.forward(g, s, reference)
    }

    pub fn condition<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        inputs: &ConditionInputs<T>,
        latent_hw: (usize, usize),
    ) -> Result<ConditionBundle> {
        let f = self.cfg.downsample_factor;
        let [n, c, h, w] = inputs.sketch.shape();
        let want = [n, 1, latent_hw.0 * f, latent_hw.1 * f];
        if c != 1 || [n, c, h, w] != want {
            return Err(Error::shape(&want, &inputs.sketch.shape()));
        }
        if inputs.reference.shape() != want {
            return Err(Error::shape(&want, &inputs.reference.shape()));
        }
        if inputs.spacing.len() != n || inputs.spacing.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter("one positive spacing triple per item required".into()));
        }
        let sk = g.input(inputs.sketch.clone());
        let rf = g.input(inputs.reference.clone());
        Ok(ConditionBundle {
            c_s: self.sketch_encode(g, s, sk),
            c_r: self.structure_encode(g, s, rf),
            v_embed: self.spacing_embedding(g, s, &inputs.spacing),
        })
    }

    fn run_control<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        branch: &ControlBranch,
        z_t: Var,
        cond: Var,
        emb: Var,
    ) -> (Vec<Var>, Var) {
        let h0 = branch.conv_in.forward(g, s, z_t);
        let mut h = g.add(h0, cond);
        let mut outs = Vec::with_capacity(branch.levels.len());
        for (lvl, zero) in branch.levels.iter().zip(&branch.zero_skips) {
            h = lvl.res.forward(g, s, h, Some(emb));
            if let Some(a) = &lvl.attn {
                h = a.forward(g, s, h);
            }
            outs.push(zero.forward(g, s, h));
            if let Some(d) = &lvl.down {
                h = d.forward(g, s, h);
            }
        }
        h = branch.mid_res.forward(g, s, h, Some(emb));
        let mid = branch.zero_mid.forward(g, s, h);
        (outs, mid)
    }

    /// `eps_hat(Z_t, t, bundle)`. Without a bundle the control branch is
    /// skipped and the spacing embedding omitted.
    pub fn predict_noise_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        z_t: Var,
        ts: &[usize],
        bundle: Option<&ConditionBundle>,
    ) -> Var {
        let mut emb = self.timestep_embedding(g, s, ts);
        if let Some(b) = bundle {
            emb = g.add(emb, b.v_embed);
        }
        let controls: Vec<(Vec<Var>, Var)> = match bundle {
            None => Vec::new(),
            Some(b) => {
                if self.cfg.dual_branch {
                    vec![
                        self.run_control(g, s, &self.controls[0], z_t, b.c_s, emb),
                        self.run_control(g, s, &self.controls[1], z_t, b.c_r, emb),
                    ]
                } else {
                    let cond = g.add(b.c_s, b.c_r);
                    vec![self.run_control(g, s, &self.controls[0], z_t, cond, emb)]
                }
            }
        };

        let mut h = self.conv_in.forward(g, s, z_t);
        let mut skips = Vec::with_capacity(self.enc.len());
        for lvl in &self.enc {
            h = lvl.res.forward(g, s, h, Some(emb));
            if let Some(a) = &lvl.attn {
                h = a.forward(g, s, h);
            }
            skips.push(h);
            if let Some(d) = &lvl.down {
                h = d.forward(g, s, h);
            }
        }
        h = self.mid.res_a.forward(g, s, h, Some(emb));
        h = self.mid.attn.forward(g, s, h);
        h = self.mid.res_b.forward(g, s, h, Some(emb));
        for (_, mid) in &controls {
            h = g.add(h, *mid);
        }
        for (k, lvl) in self.dec.iter().enumerate() {
            let i = self.enc.len() - 1 - k;
            let mut skip = skips[i];
            for (outs, _) in &controls {
                skip = g.add(skip, outs[i]);
            }
            let c = g.concat(h, skip);
            h = lvl.res.forward(g, s, c, Some(emb));
            if let Some(a) = &lvl.attn {
                h = a.forward(g, s, h);
            }
            if let Some(up) = &lvl.up {
                h = g.upsample2(h);
                h = up.forward(g, s, h);
            }
        }
        h = self.norm_out.forward(g, s, h);
        h = g.silu(h);
        self.conv_out.forward(g, s, h)
    }

    pub fn check_latent(&self, shape4: [usize; 4]) -> Result<()> {
        let m = self.cfg.latent_multiple();
        if shape4[1] != self.cfg.latent_channels || shape4[2] % m != 0 || shape4[3] % m != 0 || shape4[2] == 0 {
            return Err(Error::InvalidParameter(format!(
                "latent {shape4:?} needs {} channels and sides divisible by {m}",
                self.cfg.latent_channels
            )));
        }
        Ok(())
    }

    /// Inference-only noise prediction.
    pub fn predict_noise<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        z_t: &Tensor<T>,
        ts: &[usize],
        cond: Option<&ConditionInputs<T>>,
    ) -> Result<Tensor<T>> {
        self.check_latent(z_t.shape())?;
        let [n, _, h, w] = z_t.shape();
        if ts.len() != n {
            return Err(Error::InvalidParameter(format!("{} timesteps for batch of {n}", ts.len())));
        }
        let mut g = Graph::new();
        let bundle = match cond {
            Some(c) => Some(self.condition(&mut g, s, c, (h, w))?),
            None => None,
        };
        let zv = g.input(z_t.clone());
        let out = self.predict_noise_graph(&mut g, s, zv, ts, bundle.as_ref());
        Ok(g.value(out).clone())
    }
}
