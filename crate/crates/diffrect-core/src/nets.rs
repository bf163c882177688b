//! The learnable components: segmentation U-Net, semantic context embedding
//! block, conditional denoiser, and the latent decoder head.
//!
//! All networks are functions over a `Tape` + `ParamStore`; they own no
//! state. Parameter names are hierarchical (`seg.enc0.conv1.w`, ...), so the
//! whole model is one flat store and checkpointing is structure-agnostic.
//!
//! Spatial bookkeeping: the embedding block downsamples by 2 after each of
//! its four stages, skipping the halving once a dimension reaches 1. The
//! "latent resolution" used everywhere (feature bundles, decoder upsample
//! factor) is defined by that same rule, which reduces to H/16 for the usual
//! power-of-two sizes.

use ndarray::{Array1, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contract;
use crate::error::Result;
use crate::params::ParamStore;

/// Segmentation U-Net: `depth` encoder stages of width `base_width·2^i`,
/// a bottleneck of width `base_width·2^depth`, and a mirrored decoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig { in_channels: 1, num_classes: 4, base_width: 16, depth: 4 }
    }
}

impl SegNetConfig {
    fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Total channels of the multi-scale feature bundle (all encoder stages
    /// plus the bottleneck).
    pub fn feat_channels(&self) -> usize {
        (0..=self.depth).map(|i| self.width(i)).sum()
    }
}

/// Semantic context embedding block: four stages of two 3×3 convs with
/// per-channel (batch-at-1) normalization and leaky rectifiers, each stage
/// followed by 2× downsampling, with the guidance scalar τ injected per
/// stage as a learned channel bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedBlockConfig {
    /// (mid, out) channels per stage; the last `out` is the latent width.
    pub stage_channels: Vec<(usize, usize)>,
    pub guidance_embed_dim: usize,
    /// τ lives in [0,1]; it is multiplied by this before sinusoidal
    /// embedding so it sweeps the frequency bank like a timestep does.
    pub guidance_scale: f64,
}

impl Default for EmbedBlockConfig {
    fn default() -> Self {
        EmbedBlockConfig {
            stage_channels: vec![(8, 8), (16, 16), (32, 32), (64, 256)],
            guidance_embed_dim: 16,
            guidance_scale: 100.0,
        }
    }
}

impl EmbedBlockConfig {
    pub fn out_channels(&self) -> usize {
        self.stage_channels.last().expect("at least one stage").1
    }
}

/// Conditional denoiser working at latent resolution: an input projection
/// over the channel-concatenated (noisy latent, condition, image features),
/// two encoder levels with skip connections, a bottleneck, and a mirrored
/// decoder. Each level receives the timestep as a learned channel bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub widths: [usize; 3],
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { widths: [48, 64, 96], time_embed_dim: 32 }
    }
}

/// Everything learnable, bundled for initialization and checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct NetsConfig {
    pub seg: SegNetConfig,
    pub embed: EmbedBlockConfig,
    pub denoiser: DenoiserConfig,
}

impl NetsConfig {
    pub fn latent_channels(&self) -> usize {
        self.embed.out_channels()
    }
}

/// Multi-scale segmentation-encoder features resampled to latent resolution
/// and detached: they condition the denoiser but carry no gradients back
/// into the segmentation net.
#[derive(Debug, Clone)]
pub struct ImageFeatureBundle {
    pub map: Array3<f64>,
}

/// One spatial halving per embedding stage, skipped at size 1. Errors on an
/// odd size > 1, which cannot be halved without resampling labels.
pub fn latent_dim(mut h: usize) -> Result<usize> {
    contract!(h >= 1, "spatial dim must be positive");
    for _ in 0..4 {
        if h == 1 {
            continue;
        }
        contract!(h % 2 == 0, "spatial dim {h} is odd and cannot be downsampled");
        h /= 2;
    }
    Ok(h)
}

/// Interleaved sin/cos embedding at geometrically spaced frequencies,
/// `out[2i] = sin(x·ω_i)`, `out[2i+1] = cos(x·ω_i)`, ω_i = 10000^(−2i/dim).
pub fn embed_sinusoidal(x: f64, dim: usize) -> Result<Array1<f64>> {
    contract!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and ≥ 2, got {dim}");
    let mut out = Array1::zeros(dim);
    for i in 0..dim / 2 {
        let omega = (-(2.0 * i as f64 / dim as f64) * 10000f64.ln()).exp();
        out[2 * i] = (x * omega).sin();
        out[2 * i + 1] = (x * omega).cos();
    }
    Ok(out)
}

const GN_GROUPS: usize = 8;

/// Largest divisor of `c` that is ≤ `desired` and leaves every group with at
/// least two values to normalize over. Standardizing a single value yields a
/// constant output and a dead gradient, so on tiny spatial maps (1×1 latents)
/// the group count is reduced rather than letting the layer collapse.
fn norm_groups(desired: usize, c: usize, hw: usize) -> usize {
    let mut g = desired.min(c).max(1);
    loop {
        if c % g == 0 && (c / g) * hw >= 2 {
            return g;
        }
        if g == 1 {
            return 1;
        }
        g -= 1;
    }
}

/// conv → group norm → SiLU, the standard block of the U-Nets here.
fn conv_gn_silu(tape: &Tape, store: &ParamStore, name: &str, x: Var, k: usize, out_ch: usize) -> Var {
    let h = tape.conv2d(
        x,
        tape.param(store, &format!("{name}.w")),
        tape.param(store, &format!("{name}.b")),
        k,
    );
    let sh = tape.shape(h);
    let n = tape.group_norm(
        h,
        tape.param(store, &format!("{name}n.g")),
        tape.param(store, &format!("{name}n.beta")),
        norm_groups(GN_GROUPS, out_ch, sh[1] * sh[2]),
    );
    tape.silu(n)
}

fn register_conv_gn(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) {
    store.add_conv(name, cout, cin, k, rng);
    store.add_norm(&format!("{name}n"), cout);
}

/// Registers every parameter of every network, in a fixed order so
/// initialization is reproducible.
pub fn init_params(cfg: &NetsConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let seg = &cfg.seg;
    // Segmentation U-Net encoder, bottleneck, decoder, head.
    let mut cin = seg.in_channels;
    for i in 0..=seg.depth {
        let w = seg.width(i);
        let name = if i == seg.depth { "seg.bott".to_string() } else { format!("seg.enc{i}") };
        register_conv_gn(&mut store, &format!("{name}.conv0"), w, cin, 3, rng);
        register_conv_gn(&mut store, &format!("{name}.conv1"), w, w, 3, rng);
        cin = w;
    }
    for i in (0..seg.depth).rev() {
        let w = seg.width(i);
        let above = seg.width(i + 1);
        store.add_conv(&format!("seg.dec{i}.reduce"), w, w + above, 1, rng);
        register_conv_gn(&mut store, &format!("seg.dec{i}.conv"), w, w, 3, rng);
    }
    store.add_conv("seg.head", seg.num_classes, seg.base_width, 1, rng);

    // Embedding block: two 3×3 convs per stage with per-channel norms, plus
    // the per-stage τ projection.
    let mut cin = 3;
    for (i, &(mid, out)) in cfg.embed.stage_channels.iter().enumerate() {
        register_conv_gn(&mut store, &format!("bsem.stage{i}.conv0"), mid, cin, 3, rng);
        register_conv_gn(&mut store, &format!("bsem.stage{i}.conv1"), out, mid, 3, rng);
        store.add_linear(&format!("bsem.stage{i}.tau"), mid, cfg.embed.guidance_embed_dim, rng);
        cin = out;
    }

    // Denoiser.
    let den = &cfg.denoiser;
    let latent = cfg.latent_channels();
    let stem_in = latent * 2 + seg.feat_channels();
    let [w0, w1, w2] = den.widths;
    register_conv_gn(&mut store, "den.stem", w0, stem_in, 1, rng);
    for (name, win, wout) in [("den.enc0", w0, w0), ("den.enc1", w0, w1), ("den.bott", w1, w2)] {
        register_conv_gn(&mut store, &format!("{name}.conv0"), wout, win, 3, rng);
        register_conv_gn(&mut store, &format!("{name}.conv1"), wout, wout, 3, rng);
        store.add_linear(&format!("{name}.time"), wout, den.time_embed_dim, rng);
    }
    for (name, skip, above) in [("den.dec1", w1, w2), ("den.dec0", w0, w1)] {
        store.add_conv(&format!("{name}.reduce"), skip, skip + above, 1, rng);
        register_conv_gn(&mut store, &format!("{name}.conv"), skip, skip, 3, rng);
        store.add_linear(&format!("{name}.time"), skip, den.time_embed_dim, rng);
    }
    store.add_conv("den.head", latent, w0, 3, rng);

    // Latent decoder head.
    store.add_conv("dec.proj", seg.num_classes, latent, 1, rng);
    store
}

/// Plain (non-tape) 2× average pooling used for feature resampling.
fn avg_pool2_value(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
        (x[[ci, 2 * y, 2 * xx]]
            + x[[ci, 2 * y, 2 * xx + 1]]
            + x[[ci, 2 * y + 1, 2 * xx]]
            + x[[ci, 2 * y + 1, 2 * xx + 1]])
            / 4.0
    })
}

/// Full segmentation forward pass: returns `[C,H,W]` logits and the detached
/// multi-scale feature bundle at latent resolution.
pub fn seg_forward(
    tape: &Tape,
    store: &ParamStore,
    cfg: &SegNetConfig,
    image: &Array3<f64>,
) -> Result<(Var, ImageFeatureBundle)> {
    let (c, h, w) = image.dim();
    contract!(c == cfg.in_channels, "expected {} input channels, got {c}", cfg.in_channels);
    contract!(image.iter().all(|v| v.is_finite()), "non-finite image input");
    contract!(
        h % (1 << cfg.depth) == 0 && w % (1 << cfg.depth) == 0,
        "input {h}x{w} not divisible by 2^depth = {}",
        1 << cfg.depth
    );
    let (lh, lw) = (latent_dim(h)?, latent_dim(w)?);

    let mut x = tape.input3(image.clone());
    let mut skips = Vec::new();
    let mut stage_values = Vec::new();
    for i in 0..=cfg.depth {
        let name = if i == cfg.depth { "seg.bott".to_string() } else { format!("seg.enc{i}") };
        let wch = cfg.width(i);
        x = conv_gn_silu(tape, store, &format!("{name}.conv0"), x, 3, wch);
        x = conv_gn_silu(tape, store, &format!("{name}.conv1"), x, 3, wch);
        stage_values.push(tape.value3(x));
        if i < cfg.depth {
            skips.push(x);
            x = tape.avg_pool2(x);
        }
    }
    for i in (0..cfg.depth).rev() {
        let wch = cfg.width(i);
        let up = tape.up_nearest2(x);
        let cat = tape.concat_c(&[skips[i], up]);
        let red = tape.conv2d(
            cat,
            tape.param(store, &format!("seg.dec{i}.reduce.w")),
            tape.param(store, &format!("seg.dec{i}.reduce.b")),
            1,
        );
        x = conv_gn_silu(tape, store, &format!("seg.dec{i}.conv"), red, 3, wch);
    }
    let logits = tape.conv2d(
        x,
        tape.param(store, "seg.head.w"),
        tape.param(store, "seg.head.b"),
        1,
    );

    // Resample every stage map down to latent resolution and stack.
    let mut planes = Vec::new();
    for mut v in stage_values {
        while v.dim().1 > lh || v.dim().2 > lw {
            v = avg_pool2_value(&v);
        }
        planes.push(v);
    }
    let total: usize = planes.iter().map(|p| p.dim().0).sum();
    let mut map = Array3::zeros((total, lh, lw));
    let mut at = 0;
    for p in planes {
        let pc = p.dim().0;
        map.slice_mut(ndarray::s![at..at + pc, .., ..]).assign(&p);
        at += pc;
    }
    Ok((logits, ImageFeatureBundle { map }))
}

/// Embeds a colored mask (values in [−1,1], `[3,H,W]`) with guidance τ into
/// the latent space. Masks of a pair are embedded by separate calls sharing
/// weights and τ.
pub fn bsem_forward(
    tape: &Tape,
    store: &ParamStore,
    cfg: &EmbedBlockConfig,
    m: &Array3<f64>,
    tau: f64,
) -> Result<Var> {
    let (c, h, w) = m.dim();
    contract!(c == 3, "embedding block expects a [3,H,W] colored mask, got {c} channels");
    contract!(tau.is_finite(), "non-finite guidance τ");
    // Fail early on shapes the stage loop cannot halve.
    let _ = (latent_dim(h)?, latent_dim(w)?);
    let emb = tape.input1(embed_sinusoidal(tau * cfg.guidance_scale, cfg.guidance_embed_dim)?);
    let mut x = tape.input3(m.clone());
    for (i, &(mid, out)) in cfg.stage_channels.iter().enumerate() {
        let name = format!("bsem.stage{i}");
        let h0 = tape.conv2d(
            x,
            tape.param(store, &format!("{name}.conv0.w")),
            tape.param(store, &format!("{name}.conv0.b")),
            3,
        );
        // Per-channel normalization: batch statistics at batch size 1.
        let sh0 = tape.shape(h0);
        let n0 = tape.group_norm(
            h0,
            tape.param(store, &format!("{name}.conv0n.g")),
            tape.param(store, &format!("{name}.conv0n.beta")),
            norm_groups(mid, mid, sh0[1] * sh0[2]),
        );
        let a0 = tape.leaky_relu(n0, 0.01);
        let tau_bias = tape.add(
            tape.matvec(tape.param(store, &format!("{name}.tau.w")), emb),
            tape.param(store, &format!("{name}.tau.b")),
        );
        let a0 = tape.add_chan_bias(a0, tau_bias);
        let h1 = tape.conv2d(
            a0,
            tape.param(store, &format!("{name}.conv1.w")),
            tape.param(store, &format!("{name}.conv1.b")),
            3,
        );
        let sh1 = tape.shape(h1);
        let n1 = tape.group_norm(
            h1,
            tape.param(store, &format!("{name}.conv1n.g")),
            tape.param(store, &format!("{name}.conv1n.beta")),
            norm_groups(out, out, sh1[1] * sh1[2]),
        );
        x = tape.leaky_relu(n1, 0.01);
        let (_, ch, cw) = (tape.shape(x)[0], tape.shape(x)[1], tape.shape(x)[2]);
        if ch > 1 && cw > 1 {
            x = tape.avg_pool2(x);
        }
    }
    Ok(x)
}

/// Predicts the noise in `z_noisy` given the timestep, the conditioning
/// latent, and image features. Output shape equals `z_noisy`.
pub fn denoiser_forward(
    tape: &Tape,
    store: &ParamStore,
    cfg: &NetsConfig,
    z_noisy: Var,
    t: usize,
    z_cond: Var,
    feats: &ImageFeatureBundle,
) -> Result<Var> {
    let zs = tape.shape(z_noisy);
    let cs = tape.shape(z_cond);
    let latent = cfg.latent_channels();
    contract!(
        zs == cs && zs[0] == latent,
        "latent shape mismatch: noisy {zs:?}, cond {cs:?}, expected {latent} channels"
    );
    contract!(
        feats.map.dim().1 == zs[1] && feats.map.dim().2 == zs[2],
        "feature bundle {:?} does not match latent {}x{}",
        feats.map.dim(),
        zs[1],
        zs[2]
    );
    let den = &cfg.denoiser;
    let [w0, w1, w2] = den.widths;
    let temb = tape.input1(embed_sinusoidal(t as f64, den.time_embed_dim)?);
    let time_bias = |name: &str| {
        tape.add(
            tape.matvec(tape.param(store, &format!("{name}.time.w")), temb),
            tape.param(store, &format!("{name}.time.b")),
        )
    };

    let fv = tape.input3(feats.map.clone());
    let cat = tape.concat_c(&[z_noisy, z_cond, fv]);
    let mut x = conv_gn_silu(tape, store, "den.stem", cat, 1, w0);

    let mut skips = Vec::new();
    let mut pooled = Vec::new();
    for (name, wch) in [("den.enc0", w0), ("den.enc1", w1)] {
        x = conv_gn_silu(tape, store, &format!("{name}.conv0"), x, 3, wch);
        x = tape.add_chan_bias(x, time_bias(name));
        x = conv_gn_silu(tape, store, &format!("{name}.conv1"), x, 3, wch);
        skips.push(x);
        let sh = tape.shape(x);
        let can_pool = sh[1] > 1 && sh[2] > 1 && sh[1] % 2 == 0 && sh[2] % 2 == 0;
        pooled.push(can_pool);
        if can_pool {
            x = tape.avg_pool2(x);
        }
    }
    x = conv_gn_silu(tape, store, "den.bott.conv0", x, 3, w2);
    x = tape.add_chan_bias(x, time_bias("den.bott"));
    x = conv_gn_silu(tape, store, "den.bott.conv1", x, 3, w2);

    for (i, (name, wch)) in [("den.dec1", w1), ("den.dec0", w0)].into_iter().enumerate() {
        let level = 1 - i;
        if pooled[level] {
            x = tape.up_nearest2(x);
        }
        let cat = tape.concat_c(&[skips[level], x]);
        let red = tape.conv2d(
            cat,
            tape.param(store, &format!("{name}.reduce.w")),
            tape.param(store, &format!("{name}.reduce.b")),
            1,
        );
        let mut h = conv_gn_silu(tape, store, &format!("{name}.conv"), red, 3, wch);
        h = tape.add_chan_bias(h, time_bias(name));
        x = h;
    }
    let head = tape.conv2d(
        x,
        tape.param(store, "den.head.w"),
        tape.param(store, "den.head.b"),
        3,
    );
    // Residual from the noisy latent: at high noise the optimal prediction is
    // close to the input itself, so the head only has to learn the correction.
    Ok(tape.add(head, z_noisy))
}

/// Projects a latent to class logits and bilinearly upsamples by `factor`
/// back to image resolution.
pub fn decode_latent(
    tape: &Tape,
    store: &ParamStore,
    cfg: &NetsConfig,
    r: Var,
    factor: usize,
) -> Result<Var> {
    let rs = tape.shape(r);
    contract!(
        rs[0] == cfg.latent_channels(),
        "decoder expects {} channels, got {}",
        cfg.latent_channels(),
        rs[0]
    );
    contract!(
        tape.value(r).iter().all(|v| v.is_finite()),
        "non-finite latent input to decoder"
    );
    let proj = tape.conv2d(
        r,
        tape.param(store, "dec.proj.w"),
        tape.param(store, "dec.proj.b"),
        1,
    );
    Ok(tape.up_bilinear(proj, factor))
}
