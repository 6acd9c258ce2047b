//! Residual convolutional encoder producing the pre-bottleneck sequence
//! (probe point `p_enc`).
//!
//! Feature inputs use a 9-layer stack. With one reduction layer:
//!
//! ```text
//! conv3 -> conv3 (res) -> conv4/s2 -> conv3 (res) -> conv3 (res) -> 4 x ff (res)
//! ```
//!
//! With two, the second strided conv takes the place of a conv stage and one
//! feed-forward layer is dropped so the depth stays at 9:
//!
//! ```text
//! conv3 -> conv3 (res) -> conv4/s2 -> conv4/s2 -> conv3 (res) -> conv3 (res) -> 3 x ff (res)
//! ```
//!
//! Raw-waveform input uses nine filter-4 stride-2 convs (a factor of 512,
//! about 31 Hz at 16 kHz) followed by four feed-forward layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Conv1dAttrs, Graph, Scalar, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    Waveform,
    LogMel,
    Mfcc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input: InputKind,
    pub width: usize,
    pub n_reduction_layers: usize,
    pub conv_filter: usize,
    pub strided_filter: usize,
    /// Multiplier on the He init gain of residual layers; below 1 keeps the
    /// residual stack from growing the activation scale at init.
    pub residual_init_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input: InputKind::Mfcc,
            width: 64,
            n_reduction_layers: 2,
            conv_filter: 3,
            strided_filter: 4,
            residual_init_gain: 1.0,
        }
    }
}

/// Number of strided layers in the raw-waveform topology.
pub const WAVEFORM_STRIDED_LAYERS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub residual: bool,
}

impl LayerSpec {
    pub fn attrs(&self) -> Conv1dAttrs {
        if self.stride == 1 {
            Conv1dAttrs::same(self.kernel)
        } else {
            // pad K-1 in total, left share (K-s)/2: output length ceil(T/s)
            let total = self.kernel - 1;
            let left = (self.kernel - self.stride) / 2;
            Conv1dAttrs {
                stride: self.stride,
                dilation: 1,
                pad_left: left,
                pad_right: total - left,
            }
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.conv_filter == 0 || self.strided_filter < 2 {
            return Err(Error::Config("encoder widths and filters must be positive".into()));
        }
        if self.conv_filter.is_multiple_of(2) {
            return Err(Error::Config("encoder conv_filter must be odd".into()));
        }
        if !(self.residual_init_gain > 0.0 && self.residual_init_gain.is_finite()) {
            return Err(Error::Config("residual_init_gain must be positive".into()));
        }
        if self.input != InputKind::Waveform && !(1..=2).contains(&self.n_reduction_layers) {
            return Err(Error::Config(format!(
                "n_reduction_layers must be 1 or 2, got {}",
                self.n_reduction_layers
            )));
        }
        Ok(())
    }

    pub fn layers(&self, input_dim: usize) -> Vec<LayerSpec> {
        let w = self.width;
        let conv = |in_dim, residual| LayerSpec {
            kernel: self.conv_filter,
            stride: 1,
            in_dim,
            out_dim: w,
            residual,
        };
        let strided = |in_dim| LayerSpec {
            kernel: self.strided_filter,
            stride: 2,
            in_dim,
            out_dim: w,
            residual: false,
        };
        let ff = LayerSpec {
            kernel: 1,
            stride: 1,
            in_dim: w,
            out_dim: w,
            residual: true,
        };
        let mut out = Vec::new();
        match self.input {
            InputKind::Waveform => {
                out.push(strided(input_dim));
                for _ in 1..WAVEFORM_STRIDED_LAYERS {
                    out.push(strided(w));
                }
            }
            _ => {
                out.push(conv(input_dim, false));
                out.push(conv(w, true));
                out.push(strided(w));
                if self.n_reduction_layers == 2 {
                    out.push(strided(w));
                }
                out.push(conv(w, true));
                out.push(conv(w, true));
            }
        }
        let n_ff = match self.input {
            InputKind::Waveform => 4,
            _ => 5 - self.n_reduction_layers,
        };
        out.extend(std::iter::repeat_n(ff, n_ff));
        out
    }

    pub fn downsample_factor(&self) -> usize {
        match self.input {
            InputKind::Waveform => 1 << WAVEFORM_STRIDED_LAYERS,
            _ => 1 << self.n_reduction_layers,
        }
    }

    /// Input frames seen by one output step.
    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.layers(1))
    }

    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        input_dim: usize,
        rng: &mut impl Rng,
    ) {
        for (i, l) in self.layers(input_dim).iter().enumerate() {
            let fan_in = l.kernel * l.in_dim;
            store.init_uniform(
                rng,
                format!("enc.{i}.w"),
                &[l.kernel, l.in_dim, l.out_dim],
                fan_in,
                2f64.sqrt() * if l.residual { self.residual_init_gain } else { 1.0 },
            );
            store.init_zeros(format!("enc.{i}.b"), &[l.out_dim]);
        }
    }
}

pub fn receptive_field(layers: &[LayerSpec]) -> usize {
    let (mut rf, mut jump) = (1, 1);
    for l in layers {
        rf += (l.kernel - 1) * jump;
        jump *= l.stride;
    }
    rf
}

/// Inclusive range of input indices that can influence output step `t`
/// (before clipping to the signal).
pub fn input_window(layers: &[LayerSpec], t: usize) -> (i64, i64) {
    let (mut lo, mut hi) = (t as i64, t as i64);
    for l in layers.iter().rev() {
        let a = l.attrs();
        lo = lo * l.stride as i64 - a.pad_left as i64;
        hi = hi * l.stride as i64 - a.pad_left as i64 + l.kernel as i64 - 1;
    }
    (lo, hi)
}

/// One encoder layer: `relu(conv(x))`, plus `x` for residual layers.
pub fn layer_forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &LayerSpec,
    w: Var,
    b: Var,
    x: Var,
) -> Result<Var> {
    let y = g.conv1d(x, w, Some(b), spec.attrs())?;
    let y = g.relu(y);
    if spec.residual {
        g.add(x, y)
    } else {
        Ok(y)
    }
}

/// Encodes `x: [B, T, input_dim]` into `[B, ceil(T / factor), width]`.
pub fn encode<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("encode", format!("expected [B,T,F], got {shape:?}")));
    }
    let rf = cfg.receptive_field();
    if shape[1] < rf {
        return Err(Error::InvalidArgument(format!(
            "encoder input has {} frames, shorter than the receptive field of {rf}",
            shape[1]
        )));
    }
    let mut h = x;
    for (i, spec) in cfg.layers(shape[2]).iter().enumerate() {
        let w = p.var(&format!("enc.{i}.w"))?;
        let b = p.var(&format!("enc.{i}.b"))?;
        h = layer_forward(g, spec, w, b, h)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::params::gradcheck_store;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n_red: usize) -> EncoderConfig {
        EncoderConfig {
            width: 8,
            n_reduction_layers: n_red,
            ..Default::default()
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Tensor<f64> {
        Tensor::new([1, t, f], (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(store: &ParamStore<f64>, c: &EncoderConfig, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = encode(&mut g, &p, c, xv).unwrap();
        g.value(h).clone()
    }

    #[test]
    fn nine_layers_and_rates() {
        assert_eq!(cfg(1).layers(39).len(), 9);
        assert_eq!(cfg(2).layers(39).len(), 9);
        assert_eq!(100.0 / cfg(1).downsample_factor() as f64, 50.0);
        assert_eq!(100.0 / cfg(2).downsample_factor() as f64, 25.0);
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(cfg(1).receptive_field(), 16);
        assert_eq!(cfg(2).receptive_field(), 30);
        let single = LayerSpec {
            kernel: 3,
            stride: 1,
            in_dim: 1,
            out_dim: 1,
            residual: false,
        };
        assert_eq!(receptive_field(&[single]), 3);
        for c in [cfg(1), cfg(2)] {
            let (lo, hi) = input_window(&c.layers(1), 5);
            assert_eq!((hi - lo + 1) as usize, c.receptive_field());
        }
    }

    #[test]
    fn output_length_is_ceil() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n_red in [1, 2] {
            let c = cfg(n_red);
            let mut store = ParamStore::new();
            c.init_params(&mut store, 5, &mut rng);
            for t in 30..38 {
                let h = run(&store, &c, &random_input(&mut rng, t, 5));
                assert_eq!(h.shape(), &[1, t.div_ceil(c.downsample_factor()), 8]);
            }
        }
    }

    #[test]
    fn too_short_rejected() {
        let c = cfg(2);
        let mut store = ParamStore::<f64>::new();
        c.init_params(&mut store, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 29, 5]));
        assert!(encode(&mut g, &p, &c, x).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let c = cfg(1);
        let mut store = ParamStore::new();
        c.init_params(&mut store, 5, &mut ChaCha8Rng::seed_from_u64(1));
        let h = run(&store, &c, &Tensor::zeros([1, 20, 5]));
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturbation_respects_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n_red in [1, 2] {
            let c = cfg(n_red);
            let mut store = ParamStore::new();
            c.init_params(&mut store, 4, &mut rng);
            for e in store.entries_mut() {
                if e.name.ends_with(".b") {
                    e.value = e.value.map(|_| 0.1);
                }
            }
            let t_in = 64;
            let x = random_input(&mut rng, t_in, 4);
            let base = run(&store, &c, &x);
            let t_out = 6;
            let (lo, hi) = input_window(&c.layers(4), t_out);
            let mut changed_inside = false;
            for f in 0..t_in {
                let mut xp = x.clone();
                for d in 0..4 {
                    xp.data_mut()[f * 4 + d] += 0.5;
                }
                let out = run(&store, &c, &xp);
                let same = out.row(t_out) == base.row(t_out);
                let inside = (lo..=hi).contains(&(f as i64));
                if !inside {
                    assert!(same, "frame {f} outside [{lo},{hi}] moved output {t_out}");
                }
                if f as i64 == (lo + hi) / 2 {
                    changed_inside = !same;
                }
            }
            assert!(changed_inside, "centre frame had no effect");
        }
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let spec = LayerSpec {
            kernel: 3,
            stride: 1,
            in_dim: 4,
            out_dim: 4,
            residual: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input(&mut rng, 10, 4);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::zeros([3, 4, 4]));
        let b = g.constant(Tensor::zeros([4]));
        let y = layer_forward(&mut g, &spec, w, b, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = EncoderConfig {
            width: 3,
            ..cfg(1)
        };
        let mut store = ParamStore::new();
        c.init_params(&mut store, 2, &mut rng);
        for e in store.entries_mut() {
            if e.name.ends_with(".b") {
                let n = e.value.len();
                let vals = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
                e.value = Tensor::new(e.value.shape().to_vec(), vals).unwrap();
            }
        }
        let x = random_input(&mut rng, 16, 2);
        let err = gradcheck_store(
            &store,
            |g, p| {
                let xv = g.constant(x.clone());
                let h = encode(g, p, &c, xv)?;
                Ok(g.sum_squares(h))
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
