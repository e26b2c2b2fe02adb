//! The optimization loop: three-term loss, ray batching, Adam, logging.
//!
//! A step samples pixels from one view (round-robin), builds rays, renders
//! them through the field on per-chunk tapes, and applies one optimizer
//! update. Chunk boundaries are fixed by configuration, not by worker
//! count, and per-chunk gradients are reduced in ascending chunk order, so
//! a run is bitwise deterministic for a fixed seed at any thread count.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sdfrec_autodiff::{NodeId, Tape};

use crate::config::RunConfig;
use crate::field::{encode_direction, SdfFieldModel};
use crate::formats::{Dataset, JsonlWriter};
use crate::normals::{estimate_dataset_normals, normal_to_world, NormalMap};
use crate::render::{sample_hierarchical, sphere_near_far, SamplingConfig, ALPHA_EPS};
use crate::scene::ViewRecord;
use crate::surface::{crossing_point_tape, localize};
use crate::{Error, Result};

/// How the rendered normal entering the consistency loss is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalMode {
    /// No normal supervision.
    Off,
    /// Volumetric accumulation of per-sample gradients (ablation baseline).
    Accumulated,
    /// Gradient at the localized zero-crossing surface point.
    Localized,
}

impl std::fmt::Display for NormalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormalMode::Off => "off",
            NormalMode::Accumulated => "accumulated",
            NormalMode::Localized => "localized",
        })
    }
}

/// Optimizer and batching knobs (the `train` config section).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Rays sampled per step (m).
    pub rays_per_step: usize,
    /// One epoch = one round-robin pass of steps over all views.
    pub epochs: usize,
    pub learning_rate: f64,
    pub learning_rate_min: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub mode: NormalMode,
    /// Checkpoint every K steps (0 = only final).
    pub checkpoint_every: usize,
    /// Fraction of rays drawn from foreground-mask pixels.
    pub foreground_fraction: f64,
    /// Rays per tape chunk; fixed chunking keeps runs deterministic
    /// across worker counts.
    pub chunk_rays: usize,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            rays_per_step: 16,
            epochs: 625,
            learning_rate: 5e-4,
            learning_rate_min: 2.5e-5,
            warmup_steps: 500,
            seed: 0,
            mode: NormalMode::Localized,
            checkpoint_every: 2000,
            foreground_fraction: 0.75,
            chunk_rays: 4,
            grad_clip: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// loss terms (value-level definitions; the tape mirrors these exactly)
// ---------------------------------------------------------------------------

/// `(1/m) sum_i |C_i - Chat_i|_1` over RGB triples.
pub fn loss_color(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    assert_eq!(rendered.len(), target.len());
    let m = rendered.len().max(1);
    rendered
        .iter()
        .zip(target)
        .map(|(r, t)| (0..3).map(|c| (r[c] - t[c]).abs()).sum::<f64>())
        .sum::<f64>()
        / m as f64
}

/// `(1/n) sum_x (|grad f(x)| - 1)^2` over sample gradients.
pub fn loss_eikonal(gradients: &[[f64; 3]]) -> f64 {
    assert!(!gradients.is_empty());
    gradients
        .iter()
        .map(|g| {
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            (n - 1.0) * (n - 1.0)
        })
        .sum::<f64>()
        / gradients.len() as f64
}

/// `(1/m) sum_valid |n_gt - n_hat|_2`; `m` counts sampled pixels, not just
/// valid ones. Zero valid pixels contribute zero (a warning is logged by
/// the caller).
pub fn loss_dnc(pairs: &[([f64; 3], [f64; 3])], m: usize) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|(a, b)| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / m.max(1) as f64
}

/// `L = L_color + alpha L_eik + beta L_dnc`.
pub fn total_loss(color: f64, eikonal: f64, dnc: f64, alpha: f64, beta: f64) -> f64 {
    color + alpha * eikonal + beta * dnc
}

// ---------------------------------------------------------------------------
// Adam with warmup + cosine decay
// ---------------------------------------------------------------------------

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1c = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2c = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Linear warmup then cosine decay to the floor.
pub fn lr_schedule(cfg: &OptimConfig, step: usize, total_steps: usize) -> f64 {
    let warm = cfg.warmup_steps.min(total_steps.saturating_sub(1)).max(1);
    if step < warm {
        return cfg.learning_rate * (step + 1) as f64 / warm as f64;
    }
    let span = (total_steps.saturating_sub(warm)).max(1) as f64;
    let frac = (step - warm) as f64 / span;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos());
    cfg.learning_rate_min + (cfg.learning_rate - cfg.learning_rate_min) * cos
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_color: f64,
    pub loss_eik: f64,
    pub loss_dnc: f64,
    pub s: f64,
    pub ms: f64,
}

struct RayTask {
    pixel: usize,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    target: [f64; 3],
    /// World-frame estimated normal for supervision, if this pixel has one.
    gt_normal: Option<Vector3<f64>>,
    near: f64,
    far: f64,
    /// Sample depths; empty when the ray misses the bounding ball.
    ts: Vec<f64>,
}

thread_local! {
    /// Per-worker tape reused across chunks and steps.
    static CHUNK_TAPE: std::cell::RefCell<Tape> = std::cell::RefCell::new(Tape::new());
}

struct ChunkResult {
    grad: Vec<f64>,
    color_sum: f64,
    eik_sum: f64,
    dnc_sum: f64,
    dnc_valid: usize,
}

/// Frozen ray batch for derivative probes (see `Trainer::make_probe_batch`).
#[doc(hidden)]
pub struct ProbeBatch {
    rays: Vec<RayTask>,
    n_eik: usize,
}

pub struct Trainer {
    pub model: SdfFieldModel,
    dataset: Dataset,
    normal_maps: Option<Vec<NormalMap>>,
    normal_reads: AtomicUsize,
    run: RunConfig,
    adam: Adam,
    step: usize,
    total_steps: usize,
    fg_pixels: Vec<Vec<u32>>,
    out_dir: PathBuf,
    log: Option<JsonlWriter>,
    warned_no_valid: bool,
}

impl Trainer {
    /// Build a trainer over an in-memory dataset. When `mode` is not `off`
    /// the depth-derived normal maps are estimated up front and cached to
    /// `normal_est_%03d.pfm` in `dataset_dir` when given.
    pub fn new(
        dataset: Dataset,
        dataset_dir: Option<&Path>,
        out_dir: &Path,
        run: RunConfig,
    ) -> Result<Self> {
        run.validate()?;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        if dataset.views.len() < 2 {
            return Err(Error::Config("training needs at least 2 views".into()));
        }
        let normal_maps = if run.train.mode == NormalMode::Off {
            None
        } else {
            let maps = estimate_dataset_normals(&dataset)?;
            if let Some(dir) = dataset_dir {
                crate::normals::write_normal_estimates(dir, &maps)?;
            }
            Some(maps)
        };
        let fg_pixels = dataset
            .views
            .iter()
            .map(|v| {
                v.mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(i, _)| i as u32)
                    .collect()
            })
            .collect();
        let model = SdfFieldModel::new(run.model.clone())?;
        let total_steps = run.train.epochs * dataset.views.len();
        let n_params = model.params.len();
        let log = JsonlWriter::create(&out_dir.join("train_log.jsonl"))?;
        Ok(Trainer {
            model,
            dataset,
            normal_maps,
            normal_reads: AtomicUsize::new(0),
            run,
            adam: Adam::new(n_params),
            step: 0,
            total_steps,
            fg_pixels,
            out_dir: out_dir.to_path_buf(),
            log: Some(log),
            warned_no_valid: false,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    /// Count of normal-map pixel fetches; stays zero in `off` mode.
    pub fn normal_map_reads(&self) -> usize {
        self.normal_reads.load(Ordering::Relaxed)
    }

    fn gt_normal_world(&self, view_idx: usize, pixel: usize) -> Option<Vector3<f64>> {
        let maps = self.normal_maps.as_ref()?;
        let map = &maps[view_idx];
        self.normal_reads.fetch_add(1, Ordering::Relaxed);
        let view = &self.dataset.views[view_idx];
        let (w, u, v) = (view.camera.width, pixel % view.camera.width, pixel / view.camera.width);
        let _ = w;
        let n_cam = map.at(u, v)?;
        Some(normal_to_world(&view.camera, n_cam))
    }

    /// Deterministic per-(seed, step, lane) stream.
    fn rng_for(seed: u64, step: usize, lane: u64) -> ChaCha8Rng {
        let mut x = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(step as u64)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9)
            .wrapping_add(lane);
        x ^= x >> 31;
        x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 29;
        ChaCha8Rng::seed_from_u64(x)
    }

    /// Sample pixels for this step: foreground-biased, then uniform.
    fn sample_pixels(&self, view_idx: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let m = self.run.train.rays_per_step;
        let view = &self.dataset.views[view_idx];
        let total = view.camera.width * view.camera.height;
        let fg = &self.fg_pixels[view_idx];
        let k_fg = if fg.is_empty() {
            0
        } else {
            (m as f64 * self.run.train.foreground_fraction).round() as usize
        };
        (0..m)
            .map(|i| {
                if i < k_fg {
                    fg[rng.gen_range(0..fg.len())] as usize
                } else {
                    rng.gen_range(0..total)
                }
            })
            .collect()
    }

    /// Ray geometry and supervision targets; sample depths are filled in
    /// by the chunk-batched sampling pass.
    fn build_ray(&self, view_idx: usize, pixel: usize) -> RayTask {
        let view = &self.dataset.views[view_idx];
        let (w, h) = (view.camera.width, view.camera.height);
        let (u, v) = (pixel % w, pixel / w);
        debug_assert!(v < h);
        let (origin, dir) = view
            .camera
            .ray_for_pixel(u, v, 0.5, 0.5)
            .expect("sampled pixel in range");
        let target = if view.mask[pixel] {
            view.rgb[pixel]
        } else {
            self.dataset.background()
        };
        let gt_normal = if view.mask[pixel] && self.run.train.mode != NormalMode::Off {
            self.gt_normal_world(view_idx, pixel)
        } else {
            None
        };
        let (near, far) = match sphere_near_far(origin, dir) {
            Some((near, far)) if far - near > 1e-6 => (near, far),
            _ => (0.0, 0.0),
        };
        RayTask {
            pixel,
            origin,
            dir,
            target,
            gt_normal,
            near,
            far,
            ts: Vec::new(),
        }
    }

    /// Hierarchical sampling for a chunk of rays, batched per round.
    /// Per-ray streams are seeded by the global ray index, so the result
    /// does not depend on chunk size.
    fn sample_chunk(&self, base: usize, rays: &mut [RayTask]) {
        let mut idx = Vec::new();
        let mut geoms = Vec::new();
        let mut rngs = Vec::new();
        for (j, r) in rays.iter().enumerate() {
            if r.far - r.near > 1e-6 {
                idx.push(j);
                geoms.push((r.origin, r.dir, r.near, r.far));
                rngs.push(Self::rng_for(
                    self.run.train.seed,
                    self.step,
                    1000 + (base + j) as u64,
                ));
            }
        }
        if geoms.is_empty() {
            return;
        }
        let sampled = crate::render::sample_hierarchical_batch(
            &self.model,
            &geoms,
            &self.run.sampling,
            &mut rngs,
        );
        for (j, ts) in idx.into_iter().zip(sampled) {
            rays[j].ts = ts;
        }
    }

    /// Fixed ray batch for derivative probing: the sample depths are
    /// frozen, so finite differences and the tape see the same graph
    /// (sampling itself is a detached, non-differentiable choice).
    #[doc(hidden)]
    pub fn make_probe_batch(&self) -> ProbeBatch {
        let view_idx = self.step % self.dataset.views.len();
        let mut pix_rng = Self::rng_for(self.run.train.seed, self.step, 0);
        let pixels = self.sample_pixels(view_idx, &mut pix_rng);
        let mut rays: Vec<RayTask> = pixels
            .iter()
            .map(|&p| self.build_ray(view_idx, p))
            .collect();
        self.sample_chunk(0, &mut rays);
        let n_eik = rays.iter().map(|r| r.ts.len()).sum();
        ProbeBatch { rays, n_eik }
    }

    /// Total loss and its parameter gradient over a frozen ray batch.
    #[doc(hidden)]
    pub fn probe_loss_and_grad(&self, batch: &ProbeBatch) -> Result<(f64, Vec<f64>)> {
        let chunk = self.run.train.chunk_rays.max(1);
        let m = self.run.train.rays_per_step;
        let mut grad = vec![0.0; self.model.params.len()];
        let (mut color_sum, mut eik_sum, mut dnc_sum) = (0.0, 0.0, 0.0);
        for rays in batch.rays.chunks(chunk) {
            let r = self.process_chunk(rays, batch.n_eik)?;
            for (g, d) in grad.iter_mut().zip(&r.grad) {
                *g += d;
            }
            color_sum += r.color_sum;
            eik_sum += r.eik_sum;
            dnc_sum += r.dnc_sum;
        }
        let loss = total_loss(
            color_sum / m as f64,
            if batch.n_eik > 0 {
                eik_sum / batch.n_eik as f64
            } else {
                0.0
            },
            dnc_sum / m as f64,
            self.run.loss.eikonal_weight,
            self.run.loss.normal_weight,
        );
        Ok((loss, grad))
    }

    /// One optimization step; returns the logged metrics.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let t0 = Instant::now();
        let step = self.step;
        let view_idx = step % self.dataset.views.len();
        let mut pix_rng = Self::rng_for(self.run.train.seed, step, 0);
        let pixels = self.sample_pixels(view_idx, &mut pix_rng);

        // Phase 1: sampling, batched over the whole step's rays (per-ray
        // streams are seeded by ray index, so results are layout-free).
        let t_sample = Instant::now();
        let chunk = self.run.train.chunk_rays.max(1);
        let mut rays: Vec<RayTask> = pixels
            .par_iter()
            .map(|&p| self.build_ray(view_idx, p))
            .collect();
        self.sample_chunk(0, &mut rays);
        let rays = rays;
        let n_eik: usize = rays.iter().map(|r| r.ts.len()).sum();
        let sample_ms = t_sample.elapsed().as_secs_f64() * 1e3;

        // Phase 2: per-chunk tapes, gradients reduced in chunk order.
        let t_tape = Instant::now();
        let results: Vec<Result<ChunkResult>> = rays
            .par_chunks(chunk)
            .map(|rays| self.process_chunk(rays, n_eik))
            .collect();
        if std::env::var_os("SDFREC_TIMING").is_some() {
            eprintln!(
                "step {step}: sampling {sample_ms:.1} ms, tape {:.1} ms",
                t_tape.elapsed().as_secs_f64() * 1e3
            );
        }

        let m = self.run.train.rays_per_step;
        let mut grad = vec![0.0; self.model.params.len()];
        let (mut color_sum, mut eik_sum, mut dnc_sum, mut dnc_valid) = (0.0, 0.0, 0.0, 0usize);
        for r in results {
            let r = r?;
            for (g, d) in grad.iter_mut().zip(&r.grad) {
                *g += d;
            }
            color_sum += r.color_sum;
            eik_sum += r.eik_sum;
            dnc_sum += r.dnc_sum;
            dnc_valid += r.dnc_valid;
        }
        let loss_color = color_sum / m as f64;
        let loss_eik = if n_eik > 0 { eik_sum / n_eik as f64 } else { 0.0 };
        let loss_dnc = dnc_sum / m as f64;
        if self.run.train.mode != NormalMode::Off && dnc_valid == 0 && !self.warned_no_valid {
            eprintln!("warning: step {step}: no valid pixels for the normal loss");
            self.warned_no_valid = true;
        }
        let total = total_loss(
            loss_color,
            loss_eik,
            loss_dnc,
            self.run.loss.eikonal_weight,
            self.run.loss.normal_weight,
        );
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let dump = self.dump_diagnostics(step, view_idx, &rays)?;
            return Err(Error::NumericAbort { step, dump });
        }

        let clip = self.run.train.grad_clip;
        if clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let scale = clip / norm;
                for g in grad.iter_mut() {
                    *g *= scale;
                }
            }
        }
        let lr = lr_schedule(&self.run.train, step, self.total_steps);
        self.adam.step(self.model.params.values_mut(), &grad, lr);
        self.step += 1;

        let metrics = StepMetrics {
            step,
            loss_color,
            loss_eik,
            loss_dnc,
            s: self.model.s_value(),
            ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(log) = self.log.as_mut() {
            log.write(&metrics)?;
        }
        let every = self.run.train.checkpoint_every;
        if every > 0 && self.step % every == 0 {
            self.save_checkpoint(&format!("ckpt_{:06}.ckpt", self.step))?;
        }
        Ok(metrics)
    }

    /// Run all configured epochs, then write the final checkpoint.
    pub fn run_to_completion(&mut self) -> Result<StepMetrics> {
        let mut last = None;
        while self.step < self.total_steps {
            last = Some(self.train_step()?);
        }
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        self.save_checkpoint("model.ckpt")?;
        last.ok_or_else(|| Error::Config("zero training steps configured".into()))
    }

    pub fn save_checkpoint(&self, name: &str) -> Result<()> {
        self.model.save_checkpoint(&self.out_dir.join(name), self.step)
    }

    fn dump_diagnostics(
        &self,
        step: usize,
        view_idx: usize,
        rays: &[RayTask],
    ) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct RayDump {
            pixel: usize,
            origin: [f64; 3],
            dir: [f64; 3],
            target: [f64; 3],
            near: f64,
            far: f64,
            ts: Vec<f64>,
            sdf: Vec<f64>,
        }
        let dump_path = self.out_dir.join(format!("diagnostic_step_{step}.json"));
        let dumps: Vec<RayDump> = rays
            .iter()
            .map(|r| {
                let pts: Vec<[f64; 3]> = r
                    .ts
                    .iter()
                    .map(|&t| {
                        let p = r.origin + t * r.dir;
                        [p.x, p.y, p.z]
                    })
                    .collect();
                RayDump {
                    pixel: r.pixel,
                    origin: [r.origin.x, r.origin.y, r.origin.z],
                    dir: [r.dir.x, r.dir.y, r.dir.z],
                    target: r.target,
                    near: r.near,
                    far: r.far,
                    ts: r.ts.clone(),
                    sdf: self.model.sdf_values(&pts),
                }
            })
            .collect();
        let doc = serde_json::json!({
            "step": step,
            "view": view_idx,
            "s": self.model.s_value(),
            "rays": dumps,
        });
        std::fs::write(&dump_path, serde_json::to_string_pretty(&doc)?)
            .map_err(|e| Error::io(&dump_path, e))?;
        Ok(dump_path)
    }

    /// Build one chunk's tape, run backward, and return partial sums.
    /// Term scales (1/m, alpha/n_eik, beta/m) are applied on the tape so
    /// each chunk's backward seeds with 1.
    fn process_chunk(&self, rays: &[RayTask], n_eik: usize) -> Result<ChunkResult> {
        let m = self.run.train.rays_per_step as f64;
        let alpha = self.run.loss.eikonal_weight;
        let beta = self.run.loss.normal_weight;
        let bg = self.dataset.background();
        let mode = self.run.train.mode;
        let params = &self.model.params;
        CHUNK_TAPE.with(|cell| {
            let mut tape_cell = cell.borrow_mut();
            let tape = &mut *tape_cell;
            tape.clear();
            self.process_chunk_on(tape, rays, n_eik, m, alpha, beta, bg, mode, params)
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn process_chunk_on(
        &self,
        tape: &mut Tape,
        rays: &[RayTask],
        n_eik: usize,
        m: f64,
        alpha: f64,
        beta: f64,
        bg: [f64; 3],
        mode: NormalMode,
        params: &sdfrec_autodiff::ParameterStore,
    ) -> Result<ChunkResult> {

        // Constant color loss of ball-missing rays (render == background).
        let mut const_color = 0.0;
        let active: Vec<&RayTask> = rays
            .iter()
            .filter(|r| {
                if r.ts.len() < 2 {
                    const_color += loss_color(&[bg], &[r.target]) ;
                    false
                } else {
                    true
                }
            })
            .collect();
        if active.is_empty() {
            return Ok(ChunkResult {
                grad: vec![0.0; params.len()],
                color_sum: const_color,
                eik_sum: 0.0,
                dnc_sum: 0.0,
                dnc_valid: 0,
            });
        }

        // Batched SDF forward over every sample of every active ray.
        let mut flat_pts = Vec::new();
        let mut dir_rows = Vec::new();
        let mut offsets = Vec::with_capacity(active.len());
        let mut off = 0usize;
        for r in &active {
            offsets.push(off);
            let enc = encode_direction([r.dir.x, r.dir.y, r.dir.z], self.run.model.view_freqs);
            for &t in &r.ts {
                let p = r.origin + t * r.dir;
                flat_pts.extend_from_slice(&[p.x, p.y, p.z]);
                dir_rows.extend_from_slice(&enc);
            }
            off += r.ts.len();
        }
        let total_rows = off;
        let pts = tape.constant(total_rows, 3, &flat_pts);
        let seeded = tape.seed_spatial(pts);
        let (f_all, feat_all) = self.model.sdf_forward_tape(tape, seeded);
        let grads_all = tape.extract_spatial(f_all);

        let dir_enc = tape.constant(total_rows, self.run.model.view_encoding_dim(), &dir_rows);
        let colors_all =
            self.model
                .color_forward_tape(tape, pts, dir_enc, grads_all, feat_all);
        let s_node = self.model.s_tape(tape);

        // Eikonal over every sample of the step's rays.
        let g2 = tape.dot_rows(grads_all, grads_all);
        let gn = tape.sqrt(g2);
        let dev = tape.add_const(gn, -1.0);
        let dev2 = tape.square(dev);
        let eik_sum_node = tape.sum_all(dev2);

        // Per-ray compositing, color terms, and normal supervision.
        let bg_node = tape.constant(1, 3, &bg);
        let mut color_nodes: Vec<NodeId> = Vec::with_capacity(active.len());
        let mut normal_pred_rows: Vec<NodeId> = Vec::new();
        let mut normal_gt: Vec<f64> = Vec::new();
        for (ri, r) in active.iter().enumerate() {
            let n_r = r.ts.len();
            let f_r = tape.slice_rows(f_all, offsets[ri], n_r);
            let alphas = tape.alpha_from_sdf(f_r, s_node, ALPHA_EPS);
            let weights = tape.composite_weights(alphas);
            let c_r = tape.slice_rows(colors_all, offsets[ri], n_r - 1);
            let ws = tape.weighted_sum(weights, c_r);
            let opac = tape.sum_all(weights);
            let neg = tape.scale(opac, -1.0);
            let rest = tape.add_const(neg, 1.0);
            let bg_term = tape.mul_scalar(bg_node, rest);
            let rendered = tape.add(ws, bg_term);
            let target = tape.constant(1, 3, &r.target);
            let diff = tape.sub(rendered, target);
            let absdiff = tape.abs(diff);
            color_nodes.push(tape.sum_all(absdiff));

            if let Some(n_gt) = r.gt_normal {
                match mode {
                    NormalMode::Off => {}
                    NormalMode::Localized => {
                        let fs = tape.values(f_r).to_vec();
                        if let Some((k, _t)) = localize(&r.ts, &fs, r.near, r.far) {
                            let (_t_node, point) = crossing_point_tape(
                                tape,
                                f_r,
                                k,
                                &r.ts,
                                r.origin,
                                r.dir,
                            );
                            normal_pred_rows.push(point);
                            normal_gt.extend_from_slice(&[n_gt.x, n_gt.y, n_gt.z]);
                        }
                    }
                    NormalMode::Accumulated => {
                        let g_r = tape.slice_rows(grads_all, offsets[ri], n_r - 1);
                        let acc = tape.weighted_sum(weights, g_r);
                        let acc_v = tape.values(acc);
                        let norm =
                            (acc_v[0] * acc_v[0] + acc_v[1] * acc_v[1] + acc_v[2] * acc_v[2])
                                .sqrt();
                        if norm >= 1e-9 {
                            normal_pred_rows.push(acc);
                            normal_gt.extend_from_slice(&[n_gt.x, n_gt.y, n_gt.z]);
                        }
                    }
                }
            }
        }

        // Normal loss: for localized mode re-evaluate the field at the
        // surface points (second batched forward); both modes then share
        // the normalize-and-compare tail.
        let mut dnc_sum_node = None;
        let mut dnc_valid = 0usize;
        if !normal_pred_rows.is_empty() {
            let pred = if mode == NormalMode::Localized {
                let pts_hit = tape.concat_rows(&normal_pred_rows);
                let seeded_hit = tape.seed_spatial(pts_hit);
                let (f_hit, _) = self.model.sdf_forward_tape(tape, seeded_hit);
                tape.extract_spatial(f_hit)
            } else {
                tape.concat_rows(&normal_pred_rows)
            };
            // degenerate gradients are excluded from the loss
            let vals = tape.values(pred).to_vec();
            let valid: Vec<usize> = (0..vals.len() / 3)
                .filter(|&i| {
                    let g = &vals[3 * i..3 * i + 3];
                    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt() >= 1e-9
                })
                .collect();
            dnc_valid = valid.len();
            if !valid.is_empty() {
                let pred = tape.gather_rows(pred, &valid);
                let gt_rows: Vec<f64> = valid
                    .iter()
                    .flat_map(|&i| normal_gt[3 * i..3 * i + 3].to_vec())
                    .collect();
                let q = tape.dot_rows(pred, pred);
                let nrm = tape.sqrt(q);
                let inv = tape.pointwise(sdfrec_autodiff::Unary::Recip, nrm);
                let unit = tape.row_scale(pred, inv);
                let gt_node = tape.constant(valid.len(), 3, &gt_rows);
                let d = tape.sub(gt_node, unit);
                let d2 = tape.dot_rows(d, d);
                let dist = tape.sqrt(d2);
                dnc_sum_node = Some(tape.sum_all(dist));
            }
        }

        // Total chunk scalar with the step-level scales baked in.
        let mut csum = color_nodes[0];
        for &c in &color_nodes[1..] {
            csum = tape.add(csum, c);
        }
        let color_term = tape.scale(csum, 1.0 / m);
        let eik_term = tape.scale(eik_sum_node, alpha / n_eik.max(1) as f64);
        let mut loss_node = tape.add(color_term, eik_term);
        if let Some(d) = dnc_sum_node {
            let dnc_term = tape.scale(d, beta / m);
            loss_node = tape.add(loss_node, dnc_term);
        }

        let grad = tape.backward(params, loss_node)?;
        Ok(ChunkResult {
            grad,
            color_sum: const_color
                + color_nodes
                    .iter()
                    .map(|&c| tape.values(c)[0])
                    .sum::<f64>(),
            eik_sum: tape.values(eik_sum_node)[0],
            dnc_sum: dnc_sum_node.map_or(0.0, |d| tape.values(d)[0]),
            dnc_valid,
        })
    }
}

/// Render normals for every masked pixel of a view using the trained
/// field, in the camera frame and oriented toward the camera; used by the
/// evaluation tooling to score rendered-normal accuracy per mode.
pub fn render_normal_map(
    model: &SdfFieldModel,
    view: &ViewRecord,
    sampling: &SamplingConfig,
    mode: NormalMode,
    seed: u64,
) -> Vec<Option<Vector3<f64>>> {
    let (w, h) = (view.camera.width, view.camera.height);
    let s = model.s_value();
    (0..w * h)
        .into_par_iter()
        .map(|pixel| {
            if !view.mask[pixel] {
                return None;
            }
            let (u, v) = (pixel % w, pixel / w);
            let (o, d) = view.camera.ray_for_pixel(u, v, 0.5, 0.5).ok()?;
            let (near, far) = sphere_near_far(o, d)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ pixel as u64);
            let ts = sample_hierarchical(model, o, d, near, far, sampling, &mut rng);
            if ts.len() < 2 {
                return None;
            }
            let pts: Vec<[f64; 3]> = ts
                .iter()
                .map(|&t| {
                    let p = o + t * d;
                    [p.x, p.y, p.z]
                })
                .collect();
            let fs = model.sdf_values(&pts);
            let n_world = match mode {
                NormalMode::Off | NormalMode::Localized => {
                    let (k, t) = localize(&ts, &fs, near, far)?;
                    let _ = k;
                    let p = o + t * d;
                    let jet = model.sdf_jet([p.x, p.y, p.z]);
                    let g = Vector3::new(jet.d[0], jet.d[1], jet.d[2]);
                    let n = g.norm();
                    if n < 1e-9 {
                        return None;
                    }
                    g / n
                }
                NormalMode::Accumulated => {
                    let alphas = crate::render::alphas_from_sdf_values(&fs, s);
                    let (weights, _) = crate::render::composite_weights(&alphas);
                    let jets = model.sdf_jets(&pts[..pts.len() - 1]);
                    let grads: Vec<[f64; 3]> = jets.iter().map(|j| j.d).collect();
                    let n = crate::render::accumulated_normal(&weights, &grads)?;
                    Vector3::from(n)
                }
            };
            let mut n_cam = view.camera.rotation().transpose() * n_world;
            let p_cam = view
                .camera
                .camera_from_world_point(o + (near + far) * 0.5 * d);
            if n_cam.dot(&p_cam) > 0.0 {
                n_cam = -n_cam;
            }
            Some(n_cam)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_loss_trivial_and_oracle() {
        assert_eq!(loss_color(&[[0.3, 0.4, 0.5]], &[[0.3, 0.4, 0.5]]), 0.0);
        assert_eq!(loss_color(&[[0.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<[f64; 3]> = (0..32)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let b: Vec<[f64; 3]> = (0..32)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        // independent scalar-loop oracle
        let mut oracle = 0.0;
        for i in 0..32 {
            for c in 0..3 {
                oracle += (a[i][c] - b[i][c]).abs();
            }
        }
        oracle /= 32.0;
        assert!((loss_color(&a, &b) - oracle).abs() <= 1e-12);
    }

    #[test]
    fn eikonal_loss_trivial_fields() {
        // exact unit-gradient field
        let g: Vec<[f64; 3]> = (0..100)
            .map(|i| {
                let t = i as f64;
                let v = Vector3::new(t.sin(), t.cos(), 0.0);
                [v.x, v.y, v.z]
            })
            .collect();
        assert!(loss_eikonal(&g) <= 1e-10);
        // f = 2 x0 has gradient (2, 0, 0) everywhere
        let g2 = vec![[2.0, 0.0, 0.0]; 7];
        assert!((loss_eikonal(&g2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dnc_loss_antiparallel_and_orthogonal() {
        let m = 1;
        assert_eq!(loss_dnc(&[([0.0, 0.0, 1.0], [0.0, 0.0, 1.0])], m), 0.0);
        assert!((loss_dnc(&[([0.0, 0.0, 1.0], [0.0, 0.0, -1.0])], m) - 2.0).abs() < 1e-15);
        let got = loss_dnc(&[([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])], m);
        assert!((got - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn total_loss_uses_paper_weights() {
        assert!((total_loss(1.0, 1.0, 1.0, 0.1, 0.5) - 1.6).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.1, 0.5), 0.0);
        // beta = 0 reproduces the no-normal-loss arm
        assert_eq!(total_loss(0.3, 0.2, 123.0, 0.1, 0.0), 0.3 + 0.02);
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let cfg = OptimConfig::default();
        let total = 5000;
        assert!(lr_schedule(&cfg, 0, total) < cfg.learning_rate / 100.0);
        assert!((lr_schedule(&cfg, 499, total) - cfg.learning_rate).abs() < 1e-12);
        assert!(lr_schedule(&cfg, 2500, total) < cfg.learning_rate);
        let last = lr_schedule(&cfg, total - 1, total);
        assert!(last >= cfg.learning_rate_min * 0.99 && last < cfg.learning_rate * 0.1);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut adam = Adam::new(2);
        let mut params = vec![2.0, -3.0];
        for _ in 0..2000 {
            let grad: Vec<f64> = params.iter().map(|&p| 2.0 * p).collect();
            adam.step(&mut params, &grad, 1e-2);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-3), "{params:?}");
    }
}
