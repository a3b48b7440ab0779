//! Affine-stack encoders with exact manual backpropagation and Adam.
//!
//! An encoder is `input -> [affine -> activation -> dropout]* -> affine -> L2
//! normalize`. Parameters live in one flat buffer; for layer `l` the weight
//! block (`in × out`, row-major) is followed by the bias block (`out`). The
//! same layout is used by checkpoints and by the optimizer, so flattening
//! for multi-objective gradient work is free.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, SeededRng, ZERO_NORM};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => std::f64::consts::SQRT_2,
            Activation::Tanh | Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub dropout_p: f64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths,
            output_dim,
            activation: Activation::Relu,
            dropout_p: 0.0,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::config("encoder", "all dimensions must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(
                "encoder.dropout_p",
                format!("must lie in [0, 1), got {}", self.dropout_p),
            ));
        }
        Ok(())
    }

    /// `(in, out)` for every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlot {
    in_dim: usize,
    out_dim: usize,
    offset: usize,
}

impl LayerSlot {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.in_dim * self.out_dim
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.in_dim * self.out_dim;
        start..start + self.out_dim
    }
}

fn slots_for(config: &EncoderConfig) -> Vec<LayerSlot> {
    let mut offset = 0;
    config
        .layer_dims()
        .into_iter()
        .map(|(in_dim, out_dim)| {
            let slot = LayerSlot {
                in_dim,
                out_dim,
                offset,
            };
            offset += in_dim * out_dim + out_dim;
            slot
        })
        .collect()
}

/// Encoder weights. Also used as the container for parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    slots: Vec<LayerSlot>,
    values: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            config: config.clone(),
            slots: slots_for(config),
            values: vec![0.0; config.param_count()],
        }
    }

    pub fn from_flat(config: &EncoderConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(Error::DimensionMismatch {
                expected: config.param_count(),
                actual: values.len(),
            });
        }
        Ok(Self {
            config: config.clone(),
            slots: slots_for(config),
            values,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    /// `(in, out)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.slots[l].in_dim, self.slots[l].out_dim)
    }

    /// Row-major `in × out` weight block of layer `l`.
    pub fn weights(&self, l: usize) -> &[f64] {
        &self.values[self.slots[l].weight_range()]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.slots[l].weight_range();
        &mut self.values[r]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        &self.values[self.slots[l].bias_range()]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.slots[l].bias_range();
        &mut self.values[r]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self += s * other`; shapes must agree.
    pub fn add_scaled(&mut self, other: &Self, s: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.config != other.config {
            return Err(Error::ShapeMismatch {
                context: "encoder parameters",
                expected: (self.values.len(), self.slots.len()),
                actual: (other.values.len(), other.slots.len()),
            });
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h = FnvHasher::default();
        for v in &self.values {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Fan-in scaled uniform weights, zero biases.
pub fn init_params(config: &EncoderConfig, rng: &mut SeededRng) -> Result<EncoderParams> {
    config.validate()?;
    let mut params = EncoderParams::zeros(config);
    let last = params.num_layers() - 1;
    for l in 0..params.num_layers() {
        let (in_dim, _) = params.layer_shape(l);
        let gain = if l == last {
            1.0
        } else {
            config.activation.init_gain()
        };
        let bound = gain * (3.0 / in_dim as f64).sqrt();
        for w in params.weights_mut(l) {
            *w = rng.uniform_range(-bound, bound);
        }
    }
    Ok(params)
}

/// Cached state of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    params: EncoderParams,
    /// Input to each affine layer (`inputs[0]` is the raw batch).
    inputs: Vec<DenseMatrix>,
    /// Pre-activations of the hidden layers.
    pre_acts: Vec<DenseMatrix>,
    /// Inverted-dropout multipliers per hidden layer, `None` when inactive.
    masks: Vec<Option<Vec<f64>>>,
    pre_norm: DenseMatrix,
    norms: Vec<f64>,
    output: DenseMatrix,
    consumed: bool,
}

impl ForwardTape {
    pub fn output(&self) -> &DenseMatrix {
        &self.output
    }

    pub fn pre_norm(&self) -> &DenseMatrix {
        &self.pre_norm
    }

    pub fn dropout_masks(&self) -> &[Option<Vec<f64>>] {
        &self.masks
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn batch_size(&self) -> usize {
        self.output.rows()
    }
}

/// Forward pass producing unit-norm feature rows.
pub fn encode(
    params: &EncoderParams,
    x: &DenseMatrix,
    train_mode: bool,
    rng: &mut SeededRng,
) -> Result<(DenseMatrix, ForwardTape)> {
    let cfg = params.config();
    if x.cols() != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            context: "encoder input",
            expected: (x.rows(), cfg.input_dim),
            actual: x.shape(),
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("encoder input"));
    }
    let b = x.rows();
    let last = params.num_layers() - 1;
    let dropout_active = train_mode && cfg.dropout_p > 0.0;
    let keep_scale = 1.0 / (1.0 - cfg.dropout_p);

    let mut inputs = Vec::with_capacity(params.num_layers());
    let mut pre_acts = Vec::with_capacity(last);
    let mut masks = Vec::with_capacity(last);
    let mut h = x.clone();
    for l in 0..=last {
        let z = affine(&h, params, l);
        inputs.push(h);
        if l == last {
            h = z;
            break;
        }
        let mut a = z.clone();
        a.data_mut()
            .iter_mut()
            .for_each(|v| *v = cfg.activation.apply(*v));
        if dropout_active {
            let mask: Vec<f64> = (0..a.data().len())
                .map(|_| {
                    if rng.uniform() < cfg.dropout_p {
                        0.0
                    } else {
                        keep_scale
                    }
                })
                .collect();
            for (v, m) in a.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            masks.push(Some(mask));
        } else {
            masks.push(None);
        }
        pre_acts.push(z);
        h = a;
    }

    let pre_norm = h;
    let mut output = pre_norm.clone();
    let mut norms = Vec::with_capacity(b);
    for r in 0..b {
        let row = output.row_mut(r);
        let n = crate::numerics::norm(row);
        if n < ZERO_NORM || !n.is_finite() {
            return Err(Error::ZeroVector { norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }

    let tape = ForwardTape {
        params: params.clone(),
        inputs,
        pre_acts,
        masks,
        pre_norm,
        norms,
        output: output.clone(),
        consumed: false,
    };
    Ok((output, tape))
}

fn affine(h: &DenseMatrix, params: &EncoderParams, l: usize) -> DenseMatrix {
    let (in_dim, out_dim) = params.layer_shape(l);
    let w = params.weights(l);
    let bias = params.bias(l);
    let mut z = DenseMatrix::zeros(h.rows(), out_dim);
    for r in 0..h.rows() {
        let zr = z.row_mut(r);
        zr.copy_from_slice(bias);
        for (k, &hk) in h.row(r).iter().enumerate().take(in_dim) {
            if hk == 0.0 {
                continue;
            }
            let wk = &w[k * out_dim..(k + 1) * out_dim];
            for (o, wv) in zr.iter_mut().zip(wk) {
                *o += hk * wv;
            }
        }
    }
    z
}

/// Reverse pass for `tape`; returns parameter and input gradients.
pub fn backward(
    tape: &mut ForwardTape,
    grad_features: &DenseMatrix,
) -> Result<(EncoderParams, DenseMatrix)> {
    let mut out = backward_multi(tape, std::slice::from_ref(grad_features))?;
    Ok(out.pop().expect("one gradient in, one out"))
}

/// Reverse pass for several upstream gradients sharing one forward pass.
/// The tape is consumed once for the whole set.
pub fn backward_multi(
    tape: &mut ForwardTape,
    grads: &[DenseMatrix],
) -> Result<Vec<(EncoderParams, DenseMatrix)>> {
    if tape.consumed {
        return Err(Error::TapeReused);
    }
    for g in grads {
        if g.shape() != tape.output.shape() {
            return Err(Error::ShapeMismatch {
                context: "backward grad_features",
                expected: tape.output.shape(),
                actual: g.shape(),
            });
        }
    }
    tape.consumed = true;
    Ok(grads.iter().map(|g| backprop(tape, g)).collect())
}

fn backprop(tape: &ForwardTape, grad_features: &DenseMatrix) -> (EncoderParams, DenseMatrix) {
    let params = &tape.params;
    let activation = params.config().activation;
    let mut grads = params.zeros_like();

    // d(z/|z|)/dz applied to g: (g - y (y·g)) / |z|
    let mut dz = grad_features.clone();
    for r in 0..dz.rows() {
        let y = tape.output.row(r);
        let yg = crate::numerics::dot(y, grad_features.row(r));
        let n = tape.norms[r];
        for (d, yi) in dz.row_mut(r).iter_mut().zip(y) {
            *d = (*d - yi * yg) / n;
        }
    }

    for l in (0..params.num_layers()).rev() {
        let (in_dim, out_dim) = params.layer_shape(l);
        let input = &tape.inputs[l];
        {
            let gw = grads.weights_mut(l);
            for r in 0..input.rows() {
                let dzr = dz.row(r);
                for (k, &hk) in input.row(r).iter().enumerate() {
                    if hk == 0.0 {
                        continue;
                    }
                    let gk = &mut gw[k * out_dim..(k + 1) * out_dim];
                    for (g, d) in gk.iter_mut().zip(dzr) {
                        *g += hk * d;
                    }
                }
            }
        }
        {
            let gb = grads.bias_mut(l);
            for r in 0..dz.rows() {
                for (g, d) in gb.iter_mut().zip(dz.row(r)) {
                    *g += d;
                }
            }
        }

        let w = params.weights(l);
        let mut dh = DenseMatrix::zeros(dz.rows(), in_dim);
        for r in 0..dz.rows() {
            let dzr = dz.row(r);
            let dhr = dh.row_mut(r);
            for (k, o) in dhr.iter_mut().enumerate() {
                *o = crate::numerics::dot(&w[k * out_dim..(k + 1) * out_dim], dzr);
            }
        }

        if l == 0 {
            return (grads, dh);
        }
        let z = &tape.pre_acts[l - 1];
        let mask = tape.masks[l - 1].as_deref();
        for (i, v) in dh.data_mut().iter_mut().enumerate() {
            let m = mask.map_or(1.0, |m| m[i]);
            *v *= m * activation.derivative(z.data()[i]);
        }
        dz = dh;
    }
    unreachable!("encoder has at least one layer")
}

/// Adam optimizer state over one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn for_params(params: &EncoderParams, lr: f64) -> Self {
        Self::new(params.len(), lr)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "adam step",
                expected: (self.m.len(), self.m.len()),
                actual: (params.len(), grads.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut AdamState,
) -> Result<()> {
    params.check_same_shape(grads)?;
    state.step(params.as_mut_slice(), grads.as_slice())
}

const CHECKPOINT_FORMAT: &str = "mtkd-encoder";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    config: EncoderConfig,
    layers: Vec<CheckpointLayer>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    file: String,
    in_dim: usize,
    out_dim: usize,
}

/// Writes `manifest.json` plus one `layer_<l>.bin` per layer into `dir`.
///
/// Each blob holds the layer's weights (`in × out`, row-major) followed by
/// its bias, all as little-endian `f64`.
pub fn save_checkpoint(params: &EncoderParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::new();
    for l in 0..params.num_layers() {
        let (in_dim, out_dim) = params.layer_shape(l);
        let file = format!("layer_{l}.bin");
        let mut bytes = Vec::with_capacity((in_dim * out_dim + out_dim) * 8);
        for v in params.weights(l).iter().chain(params.bias(l)) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        layers.push(CheckpointLayer {
            file,
            in_dim,
            out_dim,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        layers,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<EncoderParams> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersionMismatch(format!(
            "{} v{}",
            manifest.format, manifest.version
        )));
    }
    manifest.config.validate()?;
    let dims = manifest.config.layer_dims();
    if dims.len() != manifest.layers.len() {
        return Err(Error::Malformed("layer count disagrees with config".into()));
    }
    let mut values = Vec::with_capacity(manifest.config.param_count());
    for (layer, &(in_dim, out_dim)) in manifest.layers.iter().zip(&dims) {
        if (layer.in_dim, layer.out_dim) != (in_dim, out_dim) {
            return Err(Error::Malformed(format!("layer {} shape disagrees", layer.file)));
        }
        let p = dir.join(&layer.file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() != (in_dim * out_dim + out_dim) * 8 {
            return Err(Error::Malformed(format!("{} has wrong length", layer.file)));
        }
        values.extend(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
        );
    }
    EncoderParams::from_flat(&manifest.config, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let cfg = EncoderConfig::new(5, vec![7, 3], 4);
        let a = init_params(&cfg, &mut SeededRng::new(11)).unwrap();
        let b = init_params(&cfg, &mut SeededRng::new(11)).unwrap();
        assert_eq!(a, b);
        for l in 0..a.num_layers() {
            assert!(a.bias(l).iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.len(), cfg.param_count());
    }

    #[test]
    fn identity_encoder_normalizes_input() {
        let cfg = EncoderConfig::new(2, vec![], 2).with_activation(Activation::Identity);
        let mut p = init_params(&cfg, &mut SeededRng::new(0)).unwrap();
        p.weights_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let (y, tape) = encode(&p, &x, false, &mut SeededRng::new(0)).unwrap();
        assert_eq!(y.row(0), &[0.6, 0.8]);
        assert_eq!(tape.pre_norm().row(0), &[3.0, 4.0]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cfg = EncoderConfig::new(4, vec![8], 3).with_dropout(0.5);
        let p = init_params(&cfg, &mut SeededRng::new(1)).unwrap();
        let x = random_matrix(5, 4, &mut SeededRng::new(2));
        let (a, ta) = encode(&p, &x, false, &mut SeededRng::new(3)).unwrap();
        let (b, _) = encode(&p, &x, false, &mut SeededRng::new(99)).unwrap();
        assert_eq!(a, b);
        assert!(ta.dropout_masks().iter().all(Option::is_none));
        assert!(a.rows_unit_norm(1e-10));
    }

    #[test]
    fn zero_output_row_is_an_error() {
        let cfg = EncoderConfig::new(2, vec![], 2);
        let p = EncoderParams::zeros(&cfg);
        let x = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            encode(&p, &x, false, &mut SeededRng::new(0)),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let cfg = EncoderConfig::new(3, vec![5, 4], 2);
        let p = init_params(&cfg, &mut SeededRng::new(4)).unwrap();
        let x = random_matrix(3, 3, &mut SeededRng::new(5));
        let (_, mut tape) = encode(&p, &x, false, &mut SeededRng::new(0)).unwrap();
        let (gp, gx) = backward(&mut tape, &DenseMatrix::zeros(3, 2)).unwrap();
        assert!(gp.as_slice().iter().all(|&v| v == 0.0));
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_cannot_be_reused() {
        let cfg = EncoderConfig::new(2, vec![], 2);
        let p = init_params(&cfg, &mut SeededRng::new(4)).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let (_, mut tape) = encode(&p, &x, false, &mut SeededRng::new(0)).unwrap();
        let g = DenseMatrix::zeros(1, 2);
        backward(&mut tape, &g).unwrap();
        assert!(matches!(backward(&mut tape, &g), Err(Error::TapeReused)));
        let (_, mut tape) = encode(&p, &x, false, &mut SeededRng::new(0)).unwrap();
        assert!(matches!(
            backward(&mut tape, &DenseMatrix::zeros(2, 2)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dropout_rate_matches_probability() {
        let p_drop = 0.3;
        let cfg = EncoderConfig::new(4, vec![1000], 2).with_dropout(p_drop);
        let params = init_params(&cfg, &mut SeededRng::new(8)).unwrap();
        let x = random_matrix(100, 4, &mut SeededRng::new(9));
        let (_, tape) = encode(&params, &x, true, &mut SeededRng::new(10)).unwrap();
        let mask = tape.dropout_masks()[0].as_ref().unwrap();
        assert_eq!(mask.len(), 100_000);
        let zeros = mask.iter().filter(|&&m| m == 0.0).count() as f64 / mask.len() as f64;
        assert!((zeros - p_drop).abs() < 0.01, "zero rate {zeros}");
        let kept = mask.iter().find(|&&m| m != 0.0).unwrap();
        assert!((kept - 1.0 / (1.0 - p_drop)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let cfg = EncoderConfig::new(2, vec![], 1);
        let mut p = init_params(&cfg, &mut SeededRng::new(0)).unwrap();
        let before = p.clone();
        let mut st = AdamState::for_params(&p, 1e-4);
        let zero = p.zeros_like();
        adam_step(&mut p, &zero, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);

        let mut x = [0.0];
        let mut st = AdamState::new(1, 1e-4);
        st.step(&mut x, &[1.0]).unwrap();
        assert!((x[0] + 1e-4).abs() < 1e-9);
        for _ in 0..10 {
            let before = x[0];
            st.step(&mut x, &[1.0]).unwrap();
            assert!((before - x[0] - 1e-4).abs() < 1e-9);
        }
        assert!(st.step(&mut x, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = EncoderConfig::new(3, vec![4], 2).with_activation(Activation::Tanh);
        let p = init_params(&cfg, &mut SeededRng::new(21)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&p, dir.path()).unwrap();
        let q = load_checkpoint(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());

        fs::write(dir.path().join("layer_1.bin"), [0u8; 7]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Malformed(_))));
    }
}
