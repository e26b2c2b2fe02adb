//! The two-network scene representation.
//!
//! An SDF network maps an encoded 3D point to a signed distance and a
//! 256-d geometry feature; a renderer network maps (point, encoded view
//! direction, field gradient, feature) to RGB. A single raw parameter
//! reparameterized as `s = exp(10 rho)` controls the sharpness of the
//! SDF-to-opacity conversion and trains with everything else.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sdfrec_autodiff::{Jet, NodeId, ParamRef, ParameterStore, Tape};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Positional encoding frequency count for points.
    pub pos_freqs: usize,
    /// Positional encoding frequency count for view directions.
    pub view_freqs: usize,
    /// Width of the SDF network hidden layers.
    pub sdf_hidden: usize,
    /// Number of SDF hidden layers.
    pub sdf_layers: usize,
    /// Hidden layer (0-based input side) receiving the encoded-input skip.
    pub skip_layer: usize,
    /// Geometry feature dimension produced next to the distance.
    pub feature_dim: usize,
    /// Width of the renderer hidden layers.
    pub rgb_hidden: usize,
    /// Renderer weight-layer count, including the RGB output layer.
    pub rgb_layers: usize,
    /// Softplus sharpness for all hidden activations.
    pub softplus_beta: f64,
    /// Radius of the sphere the field is initialized to.
    pub init_radius: f64,
    /// Initial standard deviation 1/s of the opacity sigmoid.
    pub inv_s_init: f64,
    pub init_seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            pos_freqs: 6,
            view_freqs: 4,
            sdf_hidden: 256,
            sdf_layers: 8,
            skip_layer: 4,
            feature_dim: 256,
            rgb_hidden: 256,
            rgb_layers: 4,
            softplus_beta: 100.0,
            init_radius: 0.5,
            inv_s_init: 0.3,
            init_seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn point_encoding_dim(&self) -> usize {
        3 * (1 + 2 * self.pos_freqs)
    }

    pub fn view_encoding_dim(&self) -> usize {
        3 * (1 + 2 * self.view_freqs)
    }

    pub fn rgb_input_dim(&self) -> usize {
        3 + self.view_encoding_dim() + 3 + self.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.sdf_layers < 2 || self.skip_layer == 0 || self.skip_layer >= self.sdf_layers {
            return Err(Error::Config(format!(
                "skip layer {} must lie strictly inside the {} hidden layers",
                self.skip_layer, self.sdf_layers
            )));
        }
        if self.rgb_layers < 2 {
            return Err(Error::Config("renderer needs at least 2 layers".into()));
        }
        if !(self.inv_s_init > 0.0) {
            return Err(Error::Config("inv_s_init must be positive".into()));
        }
        if !(self.init_radius > 0.0 && self.init_radius < 1.0) {
            return Err(Error::Config("init_radius must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of a unit view direction, matching the tape's
/// point encoding layout.
pub fn encode_direction(v: [f64; 3], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * (1 + 2 * freqs));
    out.extend_from_slice(&v);
    for f in 0..freqs {
        let w = std::f64::consts::PI * (1u64 << f) as f64;
        for k in 0..3 {
            out.push((w * v[k]).sin());
        }
        for k in 0..3 {
            out.push((w * v[k]).cos());
        }
    }
    out
}

#[derive(Clone)]
pub struct SdfFieldModel {
    pub config: FieldConfig,
    pub params: ParameterStore,
    sdf_layers: Vec<(ParamRef, ParamRef)>,
    rgb_layers: Vec<(ParamRef, ParamRef)>,
    rho: ParamRef,
}

impl SdfFieldModel {
    /// Allocate parameters and apply the sphere-like geometric init.
    pub fn new(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let enc = config.point_encoding_dim();
        let h = config.sdf_hidden;

        let mut sdf_layers = Vec::new();
        for i in 0..config.sdf_layers {
            let d_in = if i == 0 {
                enc
            } else if i == config.skip_layer {
                h + enc
            } else {
                h
            };
            sdf_layers.push((
                params.alloc(&format!("sdf.l{i}.w"), d_in, h),
                params.alloc(&format!("sdf.l{i}.b"), h, 1),
            ));
        }
        sdf_layers.push((
            params.alloc("sdf.head.w", h, 1 + config.feature_dim),
            params.alloc("sdf.head.b", 1 + config.feature_dim, 1),
        ));

        let mut rgb_layers = Vec::new();
        for i in 0..config.rgb_layers {
            let d_in = if i == 0 {
                config.rgb_input_dim()
            } else {
                config.rgb_hidden
            };
            let d_out = if i + 1 == config.rgb_layers {
                3
            } else {
                config.rgb_hidden
            };
            rgb_layers.push((
                params.alloc(&format!("rgb.l{i}.w"), d_in, d_out),
                params.alloc(&format!("rgb.l{i}.b"), d_out, 1),
            ));
        }
        let rho = params.alloc("variance.rho", 1, 1);

        let mut model = SdfFieldModel {
            config,
            params,
            sdf_layers,
            rgb_layers,
            rho,
        };
        model.geometric_init();
        Ok(model)
    }

    /// Initialize so the field approximates `|x| - init_radius` and the
    /// renderer starts near mid-gray.
    pub fn geometric_init(&mut self) {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.init_seed);
        let h = self.config.sdf_hidden;
        let r = self.config.init_radius;
        let n_sdf = self.sdf_layers.len();

        let layers = self.sdf_layers.clone();
        for (i, (w, b)) in layers.iter().enumerate() {
            let (rows, cols) = (w.rows, w.cols);
            if i + 1 == n_sdf {
                // Head: distance column gets the mean-sqrt(pi/in) init that
                // reproduces a norm under softplus stacks; features small.
                let mean = (std::f64::consts::PI / rows as f64).sqrt();
                let ws = self.params.slice_mut(*w);
                for row in 0..rows {
                    for col in 0..cols {
                        ws[row * cols + col] = if col == 0 {
                            mean + 1e-4 * normal(&mut rng)
                        } else {
                            (2.0 / cols as f64).sqrt() * 0.1 * normal(&mut rng)
                        };
                    }
                }
                let bs = self.params.slice_mut(*b);
                bs[0] = -r;
                for v in bs.iter_mut().skip(1) {
                    *v = 0.0;
                }
            } else {
                let sigma = (2.0 / cols as f64).sqrt();
                let ws = self.params.slice_mut(*w);
                for row in 0..rows {
                    // Rows carrying sinusoidal encoding features start at
                    // zero so the init sees only the raw coordinates.
                    let is_enc_row = if i == 0 {
                        row >= 3
                    } else if i == self.config.skip_layer {
                        row >= h + 3
                    } else {
                        false
                    };
                    for col in 0..cols {
                        ws[row * cols + col] = if is_enc_row {
                            0.0
                        } else {
                            sigma * normal(&mut rng)
                        };
                    }
                }
                for v in self.params.slice_mut(*b) {
                    *v = 0.0;
                }
            }
        }

        let layers = self.rgb_layers.clone();
        for (w, b) in layers.iter() {
            let sigma = (2.0 / w.cols as f64).sqrt();
            let ws = self.params.slice_mut(*w);
            for v in ws.iter_mut() {
                *v = sigma * normal(&mut rng);
            }
            for v in self.params.slice_mut(*b) {
                *v = 0.0;
            }
        }

        let s0 = 1.0 / self.config.inv_s_init;
        self.params.slice_mut(self.rho)[0] = s0.ln() / 10.0;

        self.calibrate_head(r, &mut rng);
    }

    /// Solve the head's distance column as a ridge least-squares fit of
    /// `|x| - r` in the frozen random-feature basis of the trunk. This
    /// pins the initial zero level set to the target sphere far better
    /// than scale heuristics can.
    fn calibrate_head(&mut self, r: f64, rng: &mut ChaCha8Rng) {
        use nalgebra::{DMatrix, DVector};
        use rand::Rng;

        let n_pts = 4000usize;
        let mut pts = Vec::with_capacity(n_pts);
        let mut targets = Vec::with_capacity(n_pts);
        while pts.len() < n_pts {
            let p: [f64; 3] = [
                rng.gen_range(-1.05..1.05),
                rng.gen_range(-1.05..1.05),
                rng.gen_range(-1.05..1.05),
            ];
            let norm2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
            if norm2 < 1.05 * 1.05 {
                pts.push(p);
                targets.push(norm2.sqrt() - r);
            }
        }

        let h = self.config.sdf_hidden;
        let dim = h + 1; // features plus bias
        let mut gram = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        let mut tape = Tape::new();
        let mut row = vec![0.0; dim];
        for (chunk, tchunk) in pts.chunks(256).zip(targets.chunks(256)) {
            tape.clear();
            let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
            let node = tape.constant(chunk.len(), 3, &flat);
            let trunk = self.sdf_trunk_tape(&mut tape, node);
            let feats = tape.values(trunk);
            for (ri, &y) in tchunk.iter().enumerate() {
                row[..h].copy_from_slice(&feats[ri * h..(ri + 1) * h]);
                row[h] = 1.0;
                for i in 0..dim {
                    rhs[i] += row[i] * y;
                    for j in i..dim {
                        gram[(i, j)] += row[i] * row[j];
                    }
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
        }
        let ridge = 1e-8 * gram.trace() / dim as f64;
        for i in 0..dim {
            gram[(i, i)] += ridge;
        }
        let solution = gram
            .cholesky()
            .map(|ch| ch.solve(&rhs))
            .unwrap_or_else(|| DVector::zeros(dim));

        let (w, b) = *self.sdf_layers.last().unwrap();
        let cols = w.cols;
        let ws = self.params.slice_mut(w);
        for row in 0..w.rows {
            ws[row * cols] = solution[row];
        }
        self.params.slice_mut(b)[0] = solution[h];
    }

    /// Trainable opacity sharpness `s = exp(10 rho)`.
    pub fn s_value(&self) -> f64 {
        (10.0 * self.params.slice(self.rho)[0]).exp()
    }

    pub fn s_tape(&self, tape: &mut Tape) -> NodeId {
        let rho = tape.param_vector(&self.params, self.rho);
        let scaled = tape.scale(rho, 10.0);
        tape.exp(scaled)
    }

    /// Hidden trunk up to the head's input activations (`R x hidden`).
    fn sdf_trunk_tape(&self, tape: &mut Tape, points: NodeId) -> NodeId {
        let beta = self.config.softplus_beta;
        let enc = tape.pos_encode(points, self.config.pos_freqs, true);
        let mut hcur = enc;
        for (i, &(w, b)) in self.sdf_layers[..self.sdf_layers.len() - 1]
            .iter()
            .enumerate()
        {
            if i == self.config.skip_layer {
                hcur = tape.concat_cols(&[hcur, enc]);
            }
            hcur = tape.linear(&self.params, w, Some(b), hcur, true);
            hcur = tape.softplus(hcur, beta);
        }
        hcur
    }

    /// SDF network forward over a batch of points already on the tape.
    /// Returns `(f: R x 1, feature: R x feature_dim)`.
    pub fn sdf_forward_tape(&self, tape: &mut Tape, points: NodeId) -> (NodeId, NodeId) {
        let trunk = self.sdf_trunk_tape(tape, points);
        let (w, b) = *self.sdf_layers.last().unwrap();
        let out = tape.linear(&self.params, w, Some(b), trunk, true);
        let f = tape.slice_cols(out, 0, 1);
        let feat = tape.slice_cols(out, 1, self.config.feature_dim);
        (f, feat)
    }

    /// Renderer forward (value-only path): inputs are batch nodes of
    /// points, encoded directions, field gradients, and features.
    pub fn color_forward_tape(
        &self,
        tape: &mut Tape,
        points: NodeId,
        dir_enc: NodeId,
        gradients: NodeId,
        features: NodeId,
    ) -> NodeId {
        let beta = self.config.softplus_beta;
        let mut hcur = tape.concat_cols(&[points, dir_enc, gradients, features]);
        let n = self.rgb_layers.len();
        for (i, &(w, b)) in self.rgb_layers.iter().enumerate() {
            hcur = tape.linear(&self.params, w, Some(b), hcur, false);
            if i + 1 < n {
                hcur = tape.softplus(hcur, beta);
            }
        }
        tape.sigmoid(hcur)
    }

    /// Value-only SDF evaluation for a batch of points.
    pub fn sdf_values(&self, pts: &[[f64; 3]]) -> Vec<f64> {
        let mut out = Vec::with_capacity(pts.len());
        SCRATCH_TAPE.with(|cell| {
            let mut tape = cell.borrow_mut();
            for chunk in pts.chunks(512) {
                tape.clear();
                let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
                let node = tape.constant(chunk.len(), 3, &flat);
                let (f, _) = self.sdf_forward_tape(&mut tape, node);
                out.extend_from_slice(tape.values(f));
            }
        });
        out
    }

    pub fn sdf_value(&self, p: [f64; 3]) -> f64 {
        self.sdf_values(&[p])[0]
    }

    /// SDF value and spatial gradient for a batch of points.
    pub fn sdf_jets(&self, pts: &[[f64; 3]]) -> Vec<Jet> {
        let mut out = Vec::with_capacity(pts.len());
        SCRATCH_TAPE.with(|cell| {
            let mut tape = cell.borrow_mut();
            for chunk in pts.chunks(128) {
                tape.clear();
                let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
                let node = tape.constant(chunk.len(), 3, &flat);
                let seeded = tape.seed_spatial(node);
                let (f, _) = self.sdf_forward_tape(&mut tape, seeded);
                for row in 0..chunk.len() {
                    out.push(tape.jet_at(f, row, 0));
                }
            }
        });
        out
    }

    pub fn sdf_jet(&self, p: [f64; 3]) -> Jet {
        self.sdf_jets(&[p])[0]
    }

    /// Value-only color evaluation for ad hoc probing.
    pub fn color_value(&self, x: [f64; 3], v: [f64; 3], n: [f64; 3], feat: &[f64]) -> [f64; 3] {
        assert_eq!(feat.len(), self.config.feature_dim);
        let mut tape = Tape::new();
        let xp = tape.constant(1, 3, &x);
        let dv = encode_direction(v, self.config.view_freqs);
        let dp = tape.constant(1, dv.len(), &dv);
        let np = tape.constant(1, 3, &n);
        let fp = tape.constant(1, feat.len(), feat);
        let c = self.color_forward_tape(&mut tape, xp, dp, np, fp);
        let cv = tape.values(c);
        [cv[0], cv[1], cv[2]]
    }

    // -- checkpoints --------------------------------------------------------

    pub fn save_checkpoint(&self, path: &Path, step: usize) -> Result<()> {
        let layout: Vec<LayoutEntry> = self
            .params
            .layout()
            .map(|(name, r)| LayoutEntry {
                name: name.to_string(),
                offset: r.offset,
                rows: r.rows,
                cols: r.cols,
            })
            .collect();
        let header = CheckpointHeader {
            format: FORMAT_TAG.to_string(),
            step,
            param_count: self.params.len(),
            model: self.config.clone(),
            layout,
        };
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = serde_json::to_string(&header)?;
        text.push('\n');
        file.write_all(text.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for v in self.params.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, usize)> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut data = Vec::new();
        file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
        let nl = data
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: "missing header line".into(),
            })?;
        let header: CheckpointHeader = serde_json::from_slice(&data[..nl])?;
        if header.format != FORMAT_TAG {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("unexpected format tag {}", header.format),
            });
        }
        let mut model = SdfFieldModel::new(header.model.clone())?;
        if model.params.len() != header.param_count {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!(
                    "parameter count mismatch: file {} vs model {}",
                    header.param_count,
                    model.params.len()
                ),
            });
        }
        let body = &data[nl + 1..];
        if body.len() != header.param_count * 8 {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!(
                    "payload is {} bytes, expected {}",
                    body.len(),
                    header.param_count * 8
                ),
            });
        }
        for (i, chunk) in body.chunks_exact(8).enumerate() {
            model.params.values_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        model.params.validate().map_err(Error::from)?;
        Ok((model, header.step))
    }
}

thread_local! {
    /// Scratch tape reused by the value-only evaluation paths; keeping the
    /// arena capacity across calls avoids per-call allocation churn.
    static SCRATCH_TAPE: std::cell::RefCell<Tape> = std::cell::RefCell::new(Tape::new());
}

const FORMAT_TAG: &str = "sdfrec.checkpoint.v1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    step: usize,
    param_count: usize,
    model: FieldConfig,
    layout: Vec<LayoutEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayoutEntry {
    name: String,
    offset: usize,
    rows: usize,
    cols: usize,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_config() -> FieldConfig {
        FieldConfig {
            sdf_hidden: 64,
            feature_dim: 32,
            rgb_hidden: 48,
            ..FieldConfig::default()
        }
    }

    #[test]
    fn encoding_dims_match_contract() {
        let c = FieldConfig::default();
        assert_eq!(c.point_encoding_dim(), 39);
        assert_eq!(c.view_encoding_dim(), 27);
        assert_eq!(c.rgb_input_dim(), 3 + 27 + 3 + 256);
    }

    #[test]
    fn geometric_init_approximates_sphere() {
        let model = SdfFieldModel::new(FieldConfig::default()).unwrap();
        let f0 = model.sdf_value([0.0, 0.0, 0.0]);
        assert!(
            (f0 + 0.5).abs() <= 0.1,
            "f(0) = {f0}, expected about -0.5"
        );
        assert!(model.sdf_value([0.0, 0.0, 1.0]) > 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = Vec::new();
        while pts.len() < 1000 {
            let p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            if (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) < 1.0 {
                pts.push(p);
            }
        }
        let vals = model.sdf_values(&pts);
        let mean_err: f64 = pts
            .iter()
            .zip(&vals)
            .map(|(p, f)| {
                let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                (f - (norm - 0.5)).abs()
            })
            .sum::<f64>()
            / pts.len() as f64;
        assert!(mean_err <= 0.1, "mean |f - (|x|-r)| = {mean_err}");

        let jets = model.sdf_jets(&pts[..1000]);
        for (p, j) in pts.iter().zip(&jets) {
            let g = (j.d[0] * j.d[0] + j.d[1] * j.d[1] + j.d[2] * j.d[2]).sqrt();
            assert!(
                (0.5..=1.5).contains(&g),
                "|grad| = {g} at {p:?} after init"
            );
        }
    }

    #[test]
    fn feature_vector_has_contracted_length() {
        let model = SdfFieldModel::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let pts = tape.constant(2, 3, &[0.1, 0.2, 0.3, -0.2, 0.0, 0.4]);
        let seeded = tape.seed_spatial(pts);
        let (f, feat) = model.sdf_forward_tape(&mut tape, seeded);
        assert_eq!(tape.shape(f), (2, 1));
        assert_eq!(tape.shape(feat), (2, 32));
    }

    #[test]
    fn sdf_is_locally_lipschitz() {
        let model = SdfFieldModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-4;
        let mut max_ratio: f64 = 0.0;
        for _ in 0..100 {
            let p = [
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
            ];
            let q = [p[0] + h, p[1], p[2]];
            let d = (model.sdf_value(p) - model.sdf_value(q)).abs();
            max_ratio = max_ratio.max(d / h);
        }
        assert!(max_ratio.is_finite());
        assert!(max_ratio < 100.0, "empirical Lipschitz constant {max_ratio}");
    }

    #[test]
    fn color_output_stays_in_unit_cube_and_is_deterministic() {
        let model = SdfFieldModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let feat: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = [0.1, -0.3, 0.2];
        let v = [0.0, 0.0, 1.0];
        let n = [0.3, 0.4, -0.5];
        let c1 = model.color_value(x, v, n, &feat);
        let c2 = model.color_value(x, v, n, &feat);
        assert_eq!(c1, c2);
        for c in c1 {
            assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn color_gradient_wrt_normal_is_nonzero() {
        let model = SdfFieldModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let feat: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = [0.1, -0.3, 0.2];
        let v = [0.0, 0.0, 1.0];
        let n = [0.3, 0.4, -0.5];
        let h = 1e-6;
        let mut total = 0.0;
        for k in 0..3 {
            let mut np = n;
            let mut nm = n;
            np[k] += h;
            nm[k] -= h;
            let cp = model.color_value(x, v, np, &feat);
            let cm = model.color_value(x, v, nm, &feat);
            for c in 0..3 {
                total += ((cp[c] - cm[c]) / (2.0 * h)).abs();
            }
        }
        assert!(total > 1e-4, "renderer ignores its normal input");
    }

    #[test]
    fn s_is_positive_and_matches_reparameterization() {
        let model = SdfFieldModel::new(small_config()).unwrap();
        let s = model.s_value();
        assert!(s > 0.0);
        assert!((1.0 / s - 0.3).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = SdfFieldModel::new(small_config()).unwrap();
        model.save_checkpoint(&path, 321).unwrap();
        let (loaded, step) = SdfFieldModel::load_checkpoint(&path).unwrap();
        assert_eq!(step, 321);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params.values(), model.params.values());
    }

    #[test]
    fn tape_and_plain_paths_agree_bitwise() {
        let model = SdfFieldModel::new(small_config()).unwrap();
        let pts = [[0.2, -0.1, 0.4], [-0.5, 0.3, 0.1]];
        let vals = model.sdf_values(&pts);
        let jets = model.sdf_jets(&pts);
        for (v, j) in vals.iter().zip(&jets) {
            assert_eq!(*v, j.v);
        }
    }
}
