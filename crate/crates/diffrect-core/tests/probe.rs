//! Temporary diagnostic: measures rectified-label quality against weak
//! pseudo-label quality at the warmup boundary and at the end of training.

use diffrect_core::autodiff::Tape;
use diffrect_core::data::{synth_generate, Dataset};
use diffrect_core::mask::LabelMask;
use diffrect_core::metrics::{self, GuidanceMode};
use diffrect_core::nets::{DenoiserConfig, EmbedBlockConfig, NetsConfig, SegNetConfig};
use diffrect_core::schedule::make_cosine_schedule;
use diffrect_core::trainer::{self, AblationMode, TrainConfig};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn cfg_full(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 900,
        lr: 0.02,
        t_steps: 5,
        rect_warmup: 900,
        eval_every: 600,
        labeled_ratio: 0.05,
        guidance: GuidanceMode::Dice,
        ablation: AblationMode::Full,
        seed,
        nets: NetsConfig {
            seg: SegNetConfig { in_channels: 1, num_classes: 3, base_width: 4, depth: 2 },
            embed: EmbedBlockConfig {
                stage_channels: vec![(4, 4), (4, 4), (8, 8), (8, 16)],
                guidance_embed_dim: 8,
                guidance_scale: 100.0,
            },
            denoiser: DenoiserConfig { widths: [8, 8, 16], time_embed_dim: 8 },
        },
        ..TrainConfig::default()
    }
}

fn fg_dice(a: &LabelMask, b: &LabelMask) -> f64 {
    let d = metrics::dice(a, b).unwrap();
    d[1..].iter().sum::<f64>() / (d.len() - 1) as f64
}

#[test]
fn probe_rect_quality() {
    let samples = synth_generate(20, 3, 128, 33).unwrap();
    let ds = Dataset::assemble(samples, 3, 128, 33, 0.2).unwrap();
    let cfg = cfg_full(101);
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("last.ckpt");
    trainer::fit_segment(&cfg, &ds, dir.path(), None, Some(300)).unwrap();
    let s300 = trainer::load_checkpoint(&ckpt).unwrap();
    trainer::fit_segment(&cfg, &ds, dir.path(), Some(&ckpt), Some(600)).unwrap();
    let s600 = trainer::load_checkpoint(&ckpt).unwrap();
    let report = trainer::fit(&cfg, &ds, dir.path(), Some(&ckpt)).unwrap();
    let s900 = trainer::load_checkpoint(&ckpt).unwrap();
    eprintln!("final val dice {:.4}", report.final_dice);

    let sched = make_cosine_schedule(cfg.t_steps).unwrap();
    for (tag, state) in [("300", &s300), ("600", &s600), ("900", &s900)] {
        let mut dec_state = trainer::load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
        dec_state.store = state.store.clone();
        dec_state.cfg.ablation = AblationMode::LccOnly;
        let (mut dw, mut dr, mut dd) = (Vec::new(), Vec::new(), Vec::new());
        for s in ds.train_samples() {
            let tape = Tape::inference();
            let image = s.image.clone().insert_axis(Axis(0));
            let (logits, feats) = state.seg(&tape, &image).unwrap();
            let y_w = LabelMask::from_scores(tape.value3(logits).view()).unwrap();
            dw.push(fg_dice(&y_w, &s.mask));
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let y_r = trainer::rectify(state, &y_w, &feats, &sched, &mut rng).unwrap();
            dr.push(fg_dice(&y_r, &s.mask));
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let y_d = trainer::rectify(&dec_state, &y_w, &feats, &sched, &mut rng).unwrap();
            dd.push(fg_dice(&y_d, &s.mask));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        eprintln!(
            "{tag}: weak {:.4} | rectified(sampled) {:.4} | rectified(decode) {:.4}",
            mean(&dw),
            mean(&dr),
            mean(&dd)
        );
    }
}
