//! Latent bottlenecks (AE, free-bits VAE, VQ-VAE) and the time-jitter
//! regularizer. All operate on `[B, T', *]` sequences.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Conv1dAttrs, Graph, Scalar, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BottleneckMode {
    Ae,
    Vae,
    Vq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BottleneckConfig {
    pub mode: BottleneckMode,
    pub latent_dim: usize,
    /// Codebook rows (VQ only).
    pub codebook_size: usize,
    pub codebook_init: CodebookInit,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            mode: BottleneckMode::Vq,
            latent_dim: 64,
            codebook_size: 64,
            codebook_init: CodebookInit::Normal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookInit {
    /// Rows drawn from N(0, 1/D).
    Normal,
    /// Rows replaced, before the first step, by projected encoder vectors
    /// sampled from the first training batch.
    Data,
}

pub const LOGVAR_LIMIT: f64 = 10.0;

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.mode == BottleneckMode::Vq && self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn projection_dim(&self) -> usize {
        match self.mode {
            BottleneckMode::Vae => 2 * self.latent_dim,
            _ => self.latent_dim,
        }
    }

    pub fn init_params<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        width: usize,
        rng: &mut impl Rng,
    ) {
        let out = self.projection_dim();
        store.init_uniform(rng, "bn.proj.w", &[1, width, out], width, 1.0);
        store.init_zeros("bn.proj.b", &[out]);
        if self.mode == BottleneckMode::Vq {
            let d = self.latent_dim;
            let std = (1.0 / d as f64).sqrt();
            let data = (0..self.codebook_size * d)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    T::from_f64_lossy(e * std)
                })
                .collect();
            store.insert(
                "bn.codebook",
                Tensor::new([self.codebook_size, d], data).unwrap(),
                true,
            );
        }
    }
}

/// Graph outputs of a bottleneck. `z_proj` is probe point `p_proj`, `z_bn`
/// is `p_bn`.
pub struct BottleneckOut {
    pub z_proj: Var,
    pub z_bn: Var,
    pub token_ids: Option<Vec<usize>>,
    /// `[B]`: KL summed over latent dims, averaged over time.
    pub kl: Option<Var>,
    pub vq_loss: Option<Var>,
    pub commit_loss: Option<Var>,
}

impl BottleneckOut {
    fn plain(z_proj: Var, z_bn: Var) -> Self {
        Self {
            z_proj,
            z_bn,
            token_ids: None,
            kl: None,
            vq_loss: None,
            commit_loss: None,
        }
    }
}

pub(crate) fn project<T: Scalar>(g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
    let w = p.var("bn.proj.w")?;
    let b = p.var("bn.proj.b")?;
    g.conv1d(h, w, Some(b), Conv1dAttrs::valid())
}

/// Runs the configured bottleneck. `noise` is the sampling stream in
/// training mode and `None` in evaluation mode.
pub fn bottleneck<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &BottleneckConfig,
    h: Var,
    noise: Option<&mut R>,
) -> Result<BottleneckOut> {
    let y = project(g, p, h)?;
    match cfg.mode {
        BottleneckMode::Ae => Ok(BottleneckOut::plain(y, y)),
        BottleneckMode::Vae => vae_bottleneck(g, y, cfg.latent_dim, noise),
        BottleneckMode::Vq => vq_quantize(g, y, p.var("bn.codebook")?),
    }
}

/// Splits `y: [B,T',2D]` into mean and clamped log-variance, samples in
/// training mode and returns the mean otherwise.
pub fn vae_bottleneck<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    y: Var,
    d: usize,
    noise: Option<&mut R>,
) -> Result<BottleneckOut> {
    let shape = g.shape(y).to_vec();
    if shape.len() != 3 || shape[2] != 2 * d {
        return Err(Error::shape("vae_bottleneck", format!("{shape:?} for latent dim {d}")));
    }
    let mu = g.slice_last(y, 0, d)?;
    let raw = g.slice_last(y, d, 2 * d)?;
    let lim = T::from_f64_lossy(LOGVAR_LIMIT);
    let logvar = g.clamp(raw, -lim, lim);
    let half = g.scale(logvar, T::from_f64_lossy(0.5));
    let sigma = g.exp(half);
    if !g.value(sigma).all_finite() || !g.value(mu).all_finite() {
        return Err(Error::Numeric("VAE posterior parameters are not finite".into()));
    }

    let z = match noise {
        Some(rng) => {
            let n = g.value(mu).len();
            let eps = (0..n)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    T::from_f64_lossy(e)
                })
                .collect();
            let eps = g.constant(Tensor::new(shape[..2].iter().copied().chain([d]).collect::<Vec<_>>(), eps)?);
            let se = g.mul(sigma, eps)?;
            g.add(mu, se)?
        }
        None => mu,
    };

    // 0.5 * (mu^2 + sigma^2 - 1 - logvar)
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, logvar)?;
    let b = g.offset(b, -T::one());
    let kl_elem = g.scale(b, T::from_f64_lossy(0.5));
    let per_step = g.mean_last(kl_elem)?;
    let per_example = g.mean_last(per_step)?;
    let kl = g.scale(per_example, T::from_f64_lossy(d as f64));

    Ok(BottleneckOut {
        z_proj: mu,
        z_bn: z,
        token_ids: None,
        kl: Some(kl),
        vq_loss: None,
        commit_loss: None,
    })
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, 1))` for one dimension.
pub fn gaussian_kl(mu: f64, logvar: f64) -> f64 {
    0.5 * (mu * mu + logvar.exp() - 1.0 - logvar)
}

/// `max(B, kl)` averaged over the batch. The gradient is zero where
/// `kl <= B`.
pub fn free_bits_penalty<T: Scalar>(g: &mut Graph<T>, kl: Var, free_nats: f64) -> Result<Var> {
    let m = g.max_scalar(kl, T::from_f64_lossy(free_nats));
    g.mean(m)
}

pub fn bits_to_nats(bits: f64) -> f64 {
    bits * std::f64::consts::LN_2
}

/// Index of the nearest row of `codebook` (`[K, D]`) for each `D`-sized
/// chunk of `z`; ties go to the lowest index.
pub fn nearest_prototypes<T: Scalar>(z: &[T], codebook: &Tensor<T>) -> Result<Vec<usize>> {
    if codebook.rank() != 2 || codebook.shape()[0] == 0 {
        return Err(Error::InvalidArgument("codebook is empty".into()));
    }
    let d = codebook.shape()[1];
    if d == 0 || !z.len().is_multiple_of(d) {
        return Err(Error::shape(
            "vq_quantize",
            format!("{} values vs codebook {:?}", z.len(), codebook.shape()),
        ));
    }
    Ok(z.chunks(d)
        .map(|v| {
            let mut best = (f64::INFINITY, 0);
            for k in 0..codebook.shape()[0] {
                let dist: f64 = v
                    .iter()
                    .zip(codebook.row(k))
                    .map(|(&a, &b)| {
                        let x = a.as_f64() - b.as_f64();
                        x * x
                    })
                    .sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            best.1
        })
        .collect())
}

/// Nearest-prototype quantization with straight-through gradients.
///
/// `z_bn` carries the selected prototypes forward and passes its gradient
/// unchanged to `z_e`. The codebook only learns through `vq_loss`
/// (`|sg(z_e) - e|^2`), the encoder additionally through `commit_loss`
/// (`|z_e - sg(e)|^2`); both are averaged over `B * T'`.
pub fn vq_quantize<T: Scalar>(g: &mut Graph<T>, z_e: Var, codebook: Var) -> Result<BottleneckOut> {
    let shape = g.shape(z_e).to_vec();
    let ids = nearest_prototypes(g.value(z_e).data(), g.value(codebook))?;
    let n = ids.len();
    let e_rows = g.embedding(codebook, &ids)?;
    let e_q = g.reshape(e_rows, shape)?;
    let z_q_value = g.value(e_q).clone();
    let z_bn = g.straight_through(z_e, z_q_value)?;

    let inv_n = T::from_f64_lossy(1.0 / n as f64);
    let ze_sg = g.stop_gradient(z_e);
    let diff = g.sub(ze_sg, e_q)?;
    let ss = g.sum_squares(diff);
    let vq_loss = g.scale(ss, inv_n);
    let eq_sg = g.stop_gradient(e_q);
    let diff = g.sub(z_e, eq_sg)?;
    let ss = g.sum_squares(diff);
    let commit_loss = g.scale(ss, inv_n);

    Ok(BottleneckOut {
        z_proj: z_e,
        z_bn,
        token_ids: Some(ids),
        kl: None,
        vq_loss: Some(vq_loss),
        commit_loss: Some(commit_loss),
    })
}

/// Source index for each of `t` steps under time jitter. Two independent
/// `Bernoulli(p)` flags per step pick the previous or next neighbour; when
/// both fire the previous one wins, and an out-of-range neighbour leaves the
/// step in place. Indices always refer to the original sequence.
pub fn jitter_indices(t: usize, p: f64, rng: &mut impl Rng) -> Vec<usize> {
    (0..t)
        .map(|i| {
            let prev = rng.gen::<f64>() < p;
            let next = rng.gen::<f64>() < p;
            if prev {
                if i > 0 {
                    i - 1
                } else {
                    i
                }
            } else if next && i + 1 < t {
                i + 1
            } else {
                i
            }
        })
        .collect()
}

/// Applies time jitter to `z: [B, T', D]`, one index draw per example.
pub fn time_jitter<T: Scalar>(g: &mut Graph<T>, z: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("time_jitter", format!("{shape:?}")));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let ids: Vec<usize> = (0..b)
        .flat_map(|bi| {
            jitter_indices(t, p, rng)
                .into_iter()
                .map(move |s| bi * t + s)
                .collect::<Vec<_>>()
        })
        .collect();
    let flat = g.reshape(z, [b * t, d])?;
    let picked = g.embedding(flat, &ids)?;
    g.reshape(picked, shape)
}
