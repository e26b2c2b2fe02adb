//! End-to-end finite-difference check of the assembled training loss:
//! photometric + Eikonal + depth-normal terms through compositing,
//! localization, and both network forwards on one tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdfrec_core::config::RunConfig;
use sdfrec_core::field::FieldConfig;
use sdfrec_core::scene::{generate_dataset, DepthMode};
use sdfrec_core::train::{NormalMode, Trainer};

fn small_run(mode: NormalMode, out: &std::path::Path) -> Trainer {
    let ds = generate_dataset("sphere", 2, 24, DepthMode::Metric, 0.0, 7, &out.join("ds")).unwrap();
    let mut cfg = RunConfig::default();
    cfg.scene.views = 2;
    cfg.scene.resolution = 24;
    cfg.model = FieldConfig {
        sdf_hidden: 48,
        feature_dim: 24,
        rgb_hidden: 32,
        pos_freqs: 4,
        view_freqs: 2,
        ..FieldConfig::default()
    };
    cfg.sampling.n_coarse = 12;
    cfg.sampling.n_rounds = 2;
    cfg.sampling.n_per_round = 6;
    cfg.train.rays_per_step = 6;
    cfg.train.epochs = 1;
    cfg.train.mode = mode;
    cfg.train.checkpoint_every = 0;
    Trainer::new(ds, None, &out.join("run"), cfg).unwrap()
}

fn fd_check_mode(mode: NormalMode) {
    let dir = tempfile::tempdir().unwrap();
    let trainer = small_run(mode, dir.path());
    let batch = trainer.make_probe_batch();
    let (_, grad) = trainer.probe_loss_and_grad(&batch).unwrap();

    let mut trainer = trainer;
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = trainer.model.params.len();
    let mut checked = 0;
    let mut max_rel: f64 = 0.0;
    while checked < 120 {
        let i = rng.gen_range(0..n);
        if grad[i].abs() < 1e-12 {
            continue; // probe parameters the batch actually touches
        }
        let orig = trainer.model.params.values()[i];
        trainer.model.params.values_mut()[i] = orig + h;
        let (fp, _) = trainer.probe_loss_and_grad(&batch).unwrap();
        trainer.model.params.values_mut()[i] = orig - h;
        let (fm, _) = trainer.probe_loss_and_grad(&batch).unwrap();
        trainer.model.params.values_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-3);
        let rel = (grad[i] - fd).abs() / denom;
        max_rel = max_rel.max(rel);
        assert!(
            rel <= 1e-4,
            "{mode}: param {i}: grad {} vs fd {} (rel {rel:.2e})",
            grad[i],
            fd
        );
        checked += 1;
    }
    println!("{mode}: max relative error {max_rel:.2e} over {checked} probes");
}

#[test]
fn assembled_loss_gradient_matches_fd_localized() {
    fd_check_mode(NormalMode::Localized);
}

#[test]
fn assembled_loss_gradient_matches_fd_accumulated() {
    fd_check_mode(NormalMode::Accumulated);
}

#[test]
fn assembled_loss_gradient_matches_fd_off() {
    fd_check_mode(NormalMode::Off);
}
