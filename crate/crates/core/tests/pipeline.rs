//! End-to-end runs of the library on a small phantom set.

use acdae_core::evaluation::{evaluate, psnr};
use acdae_core::inference::{reconstruct_baseline, synthesize_follow_up};
use acdae_core::phantom::{build_pairs, generate_dataset};
use acdae_core::training::{load_checkpoint, train};
use acdae_core::{ArchConfig, Config, DiseaseState, FidExtractor, ImageGrid, MetricsReport, PairSample, PhantomConfig, ProgressionAttributes};

fn small() -> Config {
    let mut c = Config::default();
    c.data = PhantomConfig { image_size: 16, slices: 4, train_subjects: 10, test_subjects: 6, seed: 3, ..PhantomConfig::default() };
    c.model = ArchConfig {
        image_size: 16,
        base_channels: 8,
        d: 16,
        d_prime: 4,
        norm_groups: 4,
        time_embed_dim: 16,
        cond_hidden: 16,
        ..ArchConfig::default()
    };
    c.diffusion.steps = 100;
    c.train.batch_size = 8;
    c.train.learning_rate = 2e-3;
    c.train.checkpoint_interval = 0;
    c.inference.sample_steps = 5;
    c.eval.fid_extractor = FidExtractor::PooledPixels;
    c
}

fn pairs(c: &Config) -> Vec<PairSample> {
    let (train_set, _) = generate_dataset(&c.data).unwrap();
    build_pairs(&train_set, c.data.pairing, &c.data, c.model.age_bins).unwrap()
}

#[test]
fn training_lowers_reconstruction_loss() {
    let mut c = small();
    c.train.epochs = 6;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&pairs(&c), &c, dir.path(), None).unwrap();
    let h = &out.state.history;
    assert_eq!(h.len(), 6);
    assert!(h[5].l_mse < 0.5 * h[0].l_mse, "{} -> {}", h[0].l_mse, h[5].l_mse);
    assert_eq!(std::fs::read_to_string(&out.log_path).unwrap().lines().count(), 6);
}

#[test]
fn same_seed_reproduces_the_run() {
    let mut c = small();
    c.train.epochs = 1;
    c.train.max_steps = Some(4);
    let p = pairs(&c);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(&p, &c, a.path(), None).unwrap();
    let rb = train(&p, &c, b.path(), None).unwrap();
    assert_eq!(ra.state.history, rb.state.history);
    assert_eq!(ra.state.params, rb.state.params);
    c.train.seed = 1;
    let rc = train(&p, &c, tempfile::tempdir().unwrap().path(), None).unwrap();
    assert_ne!(ra.state.history, rc.state.history);
}

#[test]
fn trained_model_synthesizes_and_scores() {
    let mut c = small();
    c.train.epochs = 4;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&pairs(&c), &c, dir.path(), None).unwrap();
    let params = load_checkpoint(&out.final_checkpoint).unwrap().params;
    let sched = c.diffusion.schedule().unwrap();
    let (_, test) = generate_dataset(&c.data).unwrap();

    // A few dozen steps are enough to beat an empty image, not to tell
    // subjects apart.
    let x_b = test[0].scans[0].volume.slice(1);
    let rec = reconstruct_baseline(&x_b, &params, &sched, 5, 0).unwrap();
    assert!(rec.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    let blank = ImageGrid::zeros(16, 16);
    assert!(psnr(&rec, &x_b).unwrap() > psnr(&blank, &x_b).unwrap() + 3.0);

    let attrs = ProgressionAttributes::new(7, c.model.age_bins, DiseaseState::Ad).unwrap();
    let a = synthesize_follow_up(&x_b, &attrs, &params, &sched, 5, 9).unwrap();
    assert_eq!(a, synthesize_follow_up(&x_b, &attrs, &params, &sched, 5, 9).unwrap());

    let report = evaluate(&params, &sched, &test, &c, 2).unwrap();
    assert_eq!(report, evaluate(&params, &sched, &test, &c, 1).unwrap());
    assert!(!report.pairs.is_empty() && report.pairs.iter().all(|p| p.psnr_db.is_finite() && p.ssim <= 1.0));
    assert_eq!(MetricsReport::from_text(&report.to_text()).unwrap(), report);
}
