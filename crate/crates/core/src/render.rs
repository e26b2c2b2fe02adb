//! Ray sampling and SDF-based alpha compositing.
//!
//! Value-level routines live here and drive both hierarchical sampling and
//! the test oracles; the training loop records the same arithmetic on the
//! tape via the fused `alpha_from_sdf` / `composite_weights` operations.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sdfrec_autodiff::sigmoid;

use crate::field::SdfFieldModel;

/// Margin so silhouette-grazing rays still bracket the surface.
pub const BOUNDING_RADIUS: f64 = 1.05;

/// Intersection interval of a unit-direction ray with the bounding ball,
/// clamped to non-negative distances. `None` when the ray misses.
pub fn sphere_near_far(o: Vector3<f64>, v: Vector3<f64>) -> Option<(f64, f64)> {
    debug_assert!((v.norm() - 1.0).abs() < 1e-9);
    let b = o.dot(&v);
    let c = o.dot(&o) - BOUNDING_RADIUS * BOUNDING_RADIUS;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let far = -b + sq;
    if far <= 0.0 {
        return None;
    }
    Some(((-b - sq).max(0.0), far))
}

/// Discrete opacity for consecutive SDF samples at sharpness `s`:
/// `alpha_i = clamp((phi(s f_i) - phi(s f_{i+1})) / max(phi(s f_i), eps), 0, 1)`.
pub const ALPHA_EPS: f64 = 1e-8;

pub fn alpha_from_sdf(f_i: f64, f_next: f64, s: f64) -> f64 {
    let pi = sigmoid(s * f_i);
    let pj = sigmoid(s * f_next);
    ((pi - pj) / pi.max(ALPHA_EPS)).clamp(0.0, 1.0)
}

pub fn alphas_from_sdf_values(f: &[f64], s: f64) -> Vec<f64> {
    f.windows(2).map(|w| alpha_from_sdf(w[0], w[1], s)).collect()
}

/// Front-to-back compositing: returns per-sample weights and accumulated
/// opacity (their sum).
pub fn composite_weights(alphas: &[f64]) -> (Vec<f64>, f64) {
    let mut weights = Vec::with_capacity(alphas.len());
    let mut trans = 1.0;
    let mut total = 0.0;
    for &a in alphas {
        let w = trans * a;
        weights.push(w);
        total += w;
        trans *= 1.0 - a;
    }
    (weights, total)
}

/// Weighted accumulation of per-sample values (e.g. colors).
pub fn composite_values<const N: usize>(weights: &[f64], values: &[[f64; N]]) -> [f64; N] {
    assert_eq!(weights.len(), values.len());
    let mut out = [0.0; N];
    for (w, v) in weights.iter().zip(values) {
        for k in 0..N {
            out[k] += w * v[k];
        }
    }
    out
}

/// Volumetric normal accumulation (ablation baseline): weighted sum of
/// per-sample gradients, normalized. `None` when the sum degenerates.
pub fn accumulated_normal(weights: &[f64], gradients: &[[f64; 3]]) -> Option<[f64; 3]> {
    let acc = composite_values(weights, gradients);
    let norm = (acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]).sqrt();
    if norm < 1e-9 {
        return None;
    }
    Some([acc[0] / norm, acc[1] / norm, acc[2] / norm])
}

/// Per-ray sample-count schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_rounds: usize,
    pub n_per_round: usize,
}

impl Default for SamplingConfig {
    /// Desk-scale default: 32 coarse + 4 rounds of 16 = 96 samples/ray.
    fn default() -> Self {
        SamplingConfig {
            n_coarse: 32,
            n_rounds: 4,
            n_per_round: 16,
        }
    }
}

impl SamplingConfig {
    /// Parity configuration: 16 coarse, 16 rounds, 256 samples total.
    pub fn paper() -> Self {
        SamplingConfig {
            n_coarse: 16,
            n_rounds: 16,
            n_per_round: 15,
        }
    }

    pub fn total_samples(&self) -> usize {
        self.n_coarse + self.n_rounds * self.n_per_round
    }
}

/// Duplicate-merge tolerance for sorted sample depths.
pub const MERGE_EPS: f64 = 1e-9;

/// Incremental per-ray sampling state shared by the single-ray and
/// chunk-batched drivers.
struct RaySampler {
    o: Vector3<f64>,
    v: Vector3<f64>,
    near: f64,
    far: f64,
    ts: Vec<f64>,
    fs: Vec<f64>,
    rng: ChaCha8Rng,
}

impl RaySampler {
    fn coarse(
        o: Vector3<f64>,
        v: Vector3<f64>,
        near: f64,
        far: f64,
        cfg: &SamplingConfig,
        rng: ChaCha8Rng,
    ) -> Self {
        let ts = (0..cfg.n_coarse)
            .map(|i| near + (far - near) * i as f64 / (cfg.n_coarse - 1).max(1) as f64)
            .collect();
        RaySampler {
            o,
            v,
            near,
            far,
            ts,
            fs: Vec::new(),
            rng,
        }
    }

    fn points_of(&self, ts: &[f64]) -> Vec<[f64; 3]> {
        ts.iter()
            .map(|&t| {
                let p = self.o + t * self.v;
                [p.x, p.y, p.z]
            })
            .collect()
    }

    /// Depths for the next round by inverse-transform sampling of the
    /// current weights (uniform fallback when all weights vanish).
    fn next_round(&mut self, cfg: &SamplingConfig, s: f64) -> Vec<f64> {
        let alphas = alphas_from_sdf_values(&self.fs, s);
        let (weights, total) = composite_weights(&alphas);
        if total <= 1e-12 {
            (0..cfg.n_per_round)
                .map(|k| {
                    let u = (k as f64 + self.rng.gen::<f64>()) / cfg.n_per_round as f64;
                    self.near + (self.far - self.near) * u
                })
                .collect()
        } else {
            sample_inverse_cdf(&self.ts, &weights, total, cfg.n_per_round, &mut self.rng)
        }
    }

    /// Insert freshly evaluated samples, keeping depths sorted and merging
    /// duplicates within `MERGE_EPS`.
    fn absorb(&mut self, new_ts: &[f64], new_fs: &[f64]) {
        self.ts.extend_from_slice(new_ts);
        self.fs.extend_from_slice(new_fs);
        let mut order: Vec<usize> = (0..self.ts.len()).collect();
        order.sort_by(|&a, &b| self.ts[a].total_cmp(&self.ts[b]));
        let mut ts2 = Vec::with_capacity(self.ts.len());
        let mut fs2 = Vec::with_capacity(self.ts.len());
        for &i in &order {
            if ts2
                .last()
                .map_or(true, |&last: &f64| self.ts[i] - last > MERGE_EPS)
            {
                ts2.push(self.ts[i]);
                fs2.push(self.fs[i]);
            }
        }
        self.ts = ts2;
        self.fs = fs2;
    }
}

/// Hierarchical sampling: equidistant coarse samples, then rounds of
/// inverse-transform sampling of the current weight distribution. Sample
/// depths come back sorted and deduplicated; `rng` drives the stratified
/// placement, so a fixed seed reproduces the exact sample set.
pub fn sample_hierarchical(
    model: &SdfFieldModel,
    o: Vector3<f64>,
    v: Vector3<f64>,
    near: f64,
    far: f64,
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    sample_hierarchical_batch(model, &[(o, v, near, far)], cfg, std::slice::from_mut(rng))
        .pop()
        .expect("one ray in, one sample set out")
}

/// Chunk-batched variant: identical per-ray results to
/// [`sample_hierarchical`], with each round's field evaluations gathered
/// into one batch across rays.
pub fn sample_hierarchical_batch(
    model: &SdfFieldModel,
    rays: &[(Vector3<f64>, Vector3<f64>, f64, f64)],
    cfg: &SamplingConfig,
    rngs: &mut [ChaCha8Rng],
) -> Vec<Vec<f64>> {
    assert_eq!(rays.len(), rngs.len());
    let s = model.s_value();
    let mut samplers: Vec<RaySampler> = rays
        .iter()
        .zip(rngs.iter_mut())
        .map(|(&(o, v, near, far), rng)| {
            assert!(near < far, "sample_hierarchical requires near < far");
            RaySampler::coarse(o, v, near, far, cfg, rng.clone())
        })
        .collect();

    // round 0 evaluates the coarse grids; later rounds evaluate new points
    let mut pending: Vec<Vec<f64>> = samplers.iter().map(|s| s.ts.clone()).collect();
    for sampler in samplers.iter_mut() {
        sampler.ts.clear();
    }
    for round in 0..=cfg.n_rounds {
        let mut batch: Vec<[f64; 3]> = Vec::new();
        for (sampler, ts) in samplers.iter().zip(&pending) {
            batch.extend(sampler.points_of(ts));
        }
        let values = model.sdf_values(&batch);
        let mut cursor = 0usize;
        for (sampler, ts) in samplers.iter_mut().zip(&pending) {
            let fs = &values[cursor..cursor + ts.len()];
            cursor += ts.len();
            sampler.absorb(ts, fs);
        }
        if round < cfg.n_rounds {
            for (sampler, slot) in samplers.iter_mut().zip(pending.iter_mut()) {
                *slot = sampler.next_round(cfg, s);
            }
        }
    }
    // hand the advanced rng states back to the callers
    for (sampler, rng) in samplers.iter().zip(rngs.iter_mut()) {
        *rng = sampler.rng.clone();
    }
    samplers.into_iter().map(|s| s.ts).collect()
}

/// Stratified inverse-transform sampling of the piecewise-constant weight
/// distribution over the bins `[t_i, t_{i+1})`.
fn sample_inverse_cdf(
    ts: &[f64],
    weights: &[f64],
    total: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    let last = *cdf.last().unwrap();
    for c in cdf.iter_mut() {
        *c /= last;
    }
    (0..count)
        .map(|k| {
            let u = (k as f64 + rng.gen::<f64>()) / count as f64;
            let mut lo = 0usize;
            let mut hi = cdf.len() - 1;
            while lo + 1 < hi {
                let mid = (lo + hi) / 2;
                if cdf[mid] <= u {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let denom = (cdf[lo + 1] - cdf[lo]).max(1e-300);
            let frac = ((u - cdf[lo]) / denom).clamp(0.0, 1.0);
            let t0 = ts[lo];
            let t1 = ts[(lo + 1).min(ts.len() - 1)];
            t0 + frac * (t1 - t0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, SdfFieldModel};
    use rand::SeedableRng;

    #[test]
    fn near_far_axial_interior_and_miss() {
        let (near, far) =
            sphere_near_far(Vector3::new(0.0, 0.0, -2.0), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((near - 0.95).abs() < 1e-12 && (far - 3.05).abs() < 1e-12);

        let (near, far) = sphere_near_far(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(near, 0.0);
        assert!((far - 1.05).abs() < 1e-12);

        assert!(
            sphere_near_far(Vector3::new(0.0, 1.2, -2.0), Vector3::new(0.0, 0.0, 1.0)).is_none()
        );
    }

    #[test]
    fn alpha_trivial_cases() {
        assert_eq!(alpha_from_sdf(0.3, 0.3, 25.0), 0.0);
        // sharp-surface limit
        assert!(alpha_from_sdf(0.1, -0.1, 1e6) > 1.0 - 1e-9);
        // sigmoid midpoint
        for s in [0.5, 3.0, 700.0] {
            assert_eq!(sigmoid(s * 0.0), 0.5);
        }
    }

    #[test]
    fn alpha_is_monotone_in_sample_drop() {
        let s = 40.0;
        let f_i = 0.25;
        let mut prev = -1.0;
        for k in 0..50 {
            let f_next = f_i - 0.02 * k as f64;
            let a = alpha_from_sdf(f_i, f_next, s);
            assert!(a >= prev - 1e-15, "alpha not monotone at {k}");
            prev = a;
        }
    }

    #[test]
    fn composite_trivial_and_oracle() {
        let (w, total) = composite_weights(&[0.0, 0.0, 0.0]);
        assert_eq!(w, vec![0.0, 0.0, 0.0]);
        assert_eq!(total, 0.0);

        let (w, _) = composite_weights(&[1.0, 0.7, 0.2]);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 0.0);
        assert_eq!(w[2], 0.0);

        // brute-force product-form oracle on random alphas
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let alphas: Vec<f64> = (0..32).map(|_| rng.gen::<f64>()).collect();
        let (w, total) = composite_weights(&alphas);
        let mut check_total = 0.0;
        for i in 0..32 {
            let mut expect = alphas[i];
            for j in 0..i {
                expect *= 1.0 - alphas[j];
            }
            assert!((w[i] - expect).abs() <= 1e-12);
            check_total += expect;
        }
        assert!((total - check_total).abs() <= 1e-12);
        assert!(total <= 1.0 + 1e-6);
    }

    #[test]
    fn accumulated_normal_cases() {
        // single nonzero weight returns that sample's direction
        let n = accumulated_normal(&[0.0, 0.4, 0.0], &[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 1.0, 0.0]])
            .unwrap();
        assert_eq!(n, [0.0, 1.0, 0.0]);
        // symmetric opposing gradients cancel
        assert!(accumulated_normal(&[0.5, 0.5], &[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]).is_none());
    }

    #[test]
    fn hierarchical_sampling_counts_and_order() {
        let cfg = SamplingConfig::default();
        assert_eq!(cfg.total_samples(), 96);
        assert_eq!(SamplingConfig::paper().total_samples(), 256);

        let model = SdfFieldModel::new(FieldConfig {
            sdf_hidden: 32,
            feature_dim: 16,
            rgb_hidden: 16,
            ..FieldConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let o = Vector3::new(0.0, 0.0, -2.0);
        let v = Vector3::new(0.0, 0.0, 1.0);
        let (near, far) = sphere_near_far(o, v).unwrap();
        let ts = sample_hierarchical(&model, o, v, near, far, &cfg, &mut rng);
        assert!(ts.len() <= cfg.total_samples());
        assert!(ts.len() > cfg.n_coarse);
        for w in ts.windows(2) {
            assert!(w[1] - w[0] > MERGE_EPS, "not strictly sorted");
        }
        assert!(ts[0] >= near - 1e-12 && *ts.last().unwrap() <= far + 1e-12);
    }

    #[test]
    fn inverse_cdf_concentrates_in_heavy_bin() {
        let ts = [0.0, 1.0, 2.0, 3.0];
        let weights = [0.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = sample_inverse_cdf(&ts, &weights, 1.0, 50, &mut rng);
        for s in samples {
            assert!((1.0..=2.0).contains(&s), "sample {s} escaped the bin");
        }
    }
}
