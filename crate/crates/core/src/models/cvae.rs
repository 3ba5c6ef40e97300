//! Conditional VAE on embeddings: class-conditional encoder/decoder with a
//! reparameterized latent and an MSE + KL objective.
//!
//! The loss decomposes per sample, and the backward pass can return one
//! flat gradient per sample (encoder block first, then decoder), which is
//! what DP-SGD clips. Gradient flow: MSE -> decoder -> z -> (mu, logvar)
//! -> encoder, with the KL term feeding (mu, logvar) directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::onehot_rows;
use crate::numerics::rng::{gaussian_sample, RngStream};
use crate::numerics::{Activation, Matrix, MlpStack};

/// logvar is clamped to this symmetric interval before any exp.
pub const LOGVAR_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvaeDims {
    pub d: usize,
    pub k: usize,
    pub latent: usize,
    pub h1: usize,
    pub h2: usize,
}

impl CvaeDims {
    /// Default widths: h1=128, h2=64, latent=32.
    pub fn with_defaults(d: usize, k: usize) -> Self {
        Self { d, k, latent: 32, h1: 128, h2: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.latent == 0 || self.h1 == 0 || self.h2 == 0 {
            return Err(Error::Shape(format!("cvae dims must all be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Encoder `[d+K -> h1 -> h2 -> 2L]` and decoder `[L+K -> h2 -> h1 -> d]`,
/// symmetric in hidden widths. The first `L` encoder outputs are `mu`, the
/// rest `logvar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeParams {
    pub encoder: MlpStack,
    pub decoder: MlpStack,
    pub dims: CvaeDims,
}

/// Loss and gradients from one batch.
#[derive(Debug, Clone)]
pub struct CvaeBackward {
    pub loss: f64,
    pub per_sample_losses: Vec<f64>,
    /// Flat per-sample gradients, encoder block then decoder block.
    pub per_sample_grads: Vec<Vec<f64>>,
}

struct CvaeForward {
    enc_cache: crate::numerics::ForwardCache,
    dec_cache: crate::numerics::ForwardCache,
    mu: Matrix,
    logvar_raw: Matrix,
    logvar: Matrix,
    eps: Matrix,
    mse: Vec<f64>,
    kl: Vec<f64>,
}

impl CvaeParams {
    pub fn init(dims: CvaeDims, rng: &mut RngStream) -> Result<Self> {
        dims.validate()?;
        let acts = [Activation::Relu, Activation::Relu, Activation::Identity];
        let encoder = MlpStack::glorot(
            &[dims.d + dims.k, dims.h1, dims.h2, 2 * dims.latent],
            &acts,
            rng,
        )?;
        let decoder = MlpStack::glorot(
            &[dims.latent + dims.k, dims.h2, dims.h1, dims.d],
            &acts,
            rng,
        )?;
        Ok(Self { encoder, decoder, dims })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    /// Verify that both stacks match `dims` (used after deserialization).
    pub fn check_shapes(&self) -> Result<()> {
        self.dims.validate()?;
        let CvaeDims { d, k, latent, h1, h2 } = self.dims;
        let enc: Vec<usize> = std::iter::once(self.encoder.in_dim())
            .chain(self.encoder.layers.iter().map(|l| l.out_dim()))
            .collect();
        let dec: Vec<usize> = std::iter::once(self.decoder.in_dim())
            .chain(self.decoder.layers.iter().map(|l| l.out_dim()))
            .collect();
        if enc != [d + k, h1, h2, 2 * latent] || dec != [latent + k, h2, h1, d] {
            return Err(Error::Shape(format!(
                "cvae stacks {enc:?}/{dec:?} do not match dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Flat layout: all encoder parameters, then all decoder parameters.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.encoder.flatten();
        out.extend(self.decoder.flatten());
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let ne = self.encoder.param_count();
        if flat.len() != ne + self.decoder.param_count() {
            return Err(Error::Shape(format!(
                "cvae set_from_flat: expected {} params, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        self.encoder.set_from_flat(&flat[..ne])?;
        self.decoder.set_from_flat(&flat[ne..])
    }

    /// Encode a batch: returns `(z, mu, logvar)` with `z = mu +
    /// exp(logvar/2) * eps` and logvar already clamped.
    pub fn encode(&self, x: &Matrix, y: &[u32], rng: &mut RngStream) -> Result<(Matrix, Matrix, Matrix)> {
        let fwd = self.forward_internal(x, y, rng)?;
        let z = reparameterize(&fwd.mu, &fwd.logvar, &fwd.eps);
        Ok((z, fwd.mu, fwd.logvar))
    }

    /// Decode latents under labels: `decoder(concat(z, onehot(y)))`.
    pub fn decode(&self, z: &Matrix, y: &[u32]) -> Result<Matrix> {
        let onehot = onehot_rows(y, self.dims.k)?;
        self.decoder.forward(&z.hcat(&onehot)?)
    }

    /// Mean loss and per-sample losses: `MSE_i + beta * KL_i`.
    pub fn loss(&self, x: &Matrix, y: &[u32], beta: f64, rng: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        let fwd = self.forward_internal(x, y, rng)?;
        let per: Vec<f64> =
            fwd.mse.iter().zip(&fwd.kl).map(|(m, k)| m + beta * k).collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        Ok((mean, per))
    }

    /// Per-sample gradients for DP-SGD.
    pub fn loss_and_grads(
        &self,
        x: &Matrix,
        y: &[u32],
        beta: f64,
        rng: &mut RngStream,
    ) -> Result<CvaeBackward> {
        let fwd = self.forward_internal(x, y, rng)?;
        let n = x.rows();
        let dec_upstream = self.reconstruction_upstream(&fwd, x, 1.0);
        let dec_back = self.decoder.backward(&fwd.dec_cache, &dec_upstream)?;
        let enc_upstream = self.latent_upstream(&fwd, &dec_back.input_grad, beta, 1.0);
        let enc_back = self.encoder.backward(&fwd.enc_cache, &enc_upstream)?;

        let per_sample_losses: Vec<f64> =
            fwd.mse.iter().zip(&fwd.kl).map(|(m, k)| m + beta * k).collect();
        let loss = per_sample_losses.iter().sum::<f64>() / n as f64;
        let per_sample_grads = enc_back
            .per_sample
            .into_iter()
            .zip(dec_back.per_sample)
            .map(|(mut e, d)| {
                e.extend(d);
                e
            })
            .collect();
        Ok(CvaeBackward { loss, per_sample_losses, per_sample_grads })
    }

    /// Mean-loss gradient without per-sample storage (non-private paths).
    pub fn loss_and_batch_grad(
        &self,
        x: &Matrix,
        y: &[u32],
        beta: f64,
        rng: &mut RngStream,
    ) -> Result<(f64, Vec<f64>)> {
        let fwd = self.forward_internal(x, y, rng)?;
        let n = x.rows();
        let inv_n = 1.0 / n as f64;
        let dec_upstream = self.reconstruction_upstream(&fwd, x, inv_n);
        let (dec_grad, dec_input_grad) = self.decoder.backward_batch(&fwd.dec_cache, &dec_upstream)?;
        let enc_upstream = self.latent_upstream(&fwd, &dec_input_grad, beta, inv_n);
        let (enc_grad, _) = self.encoder.backward_batch(&fwd.enc_cache, &enc_upstream)?;

        let loss = fwd
            .mse
            .iter()
            .zip(&fwd.kl)
            .map(|(m, k)| m + beta * k)
            .sum::<f64>()
            * inv_n;
        let mut grad = enc_grad;
        grad.extend(dec_grad);
        Ok((loss, grad))
    }

    fn forward_internal(&self, x: &Matrix, y: &[u32], rng: &mut RngStream) -> Result<CvaeForward> {
        if x.cols() != self.dims.d {
            return Err(Error::Shape(format!(
                "cvae input width {} does not match d={}",
                x.cols(),
                self.dims.d
            )));
        }
        let n = x.rows();
        let l = self.dims.latent;
        let onehot = onehot_rows(y, self.dims.k)?;
        if y.len() != n {
            return Err(Error::Shape(format!("{n} rows but {} labels", y.len())));
        }

        let enc_cache = self.encoder.forward_cached(&x.hcat(&onehot)?)?;
        let enc_out = enc_cache.output();
        let mu = enc_out.slice_cols(0, l);
        let logvar_raw = enc_out.slice_cols(l, 2 * l);
        let mut logvar = logvar_raw.clone();
        for v in logvar.data_mut() {
            *v = v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        }

        let eps = gaussian_sample(rng, n, l);
        let z = reparameterize(&mu, &logvar, &eps);
        let dec_cache = self.decoder.forward_cached(&z.hcat(&onehot)?)?;
        let xhat = dec_cache.output();

        let inv_d = 1.0 / self.dims.d as f64;
        let mut mse = Vec::with_capacity(n);
        let mut kl = Vec::with_capacity(n);
        for i in 0..n {
            let m: f64 = xhat
                .row(i)
                .iter()
                .zip(x.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                * inv_d;
            if !m.is_finite() {
                return Err(Error::Numeric(format!(
                    "reconstruction term non-finite at sample {i}"
                )));
            }
            let k = kl_to_standard_normal(mu.row(i), logvar.row(i));
            if !k.is_finite() {
                return Err(Error::Numeric(format!("KL term non-finite at sample {i}")));
            }
            mse.push(m);
            kl.push(k);
        }
        Ok(CvaeForward { enc_cache, dec_cache, mu, logvar_raw, logvar, eps, mse, kl })
    }

    /// `scale * (2/d) (xhat - x)`, the MSE gradient fed to the decoder.
    fn reconstruction_upstream(&self, fwd: &CvaeForward, x: &Matrix, scale: f64) -> Matrix {
        let xhat = fwd.dec_cache.output();
        let c = scale * 2.0 / self.dims.d as f64;
        let mut up = xhat.clone();
        for (u, &xv) in up.data_mut().iter_mut().zip(x.data()) {
            *u = c * (*u - xv);
        }
        up
    }

    /// Builds the encoder upstream `[dL/dmu | dL/dlogvar_raw]` from the
    /// decoder's input gradient plus the (scaled) KL contributions. The
    /// clamp zeroes logvar gradients where the raw value was outside range.
    fn latent_upstream(
        &self,
        fwd: &CvaeForward,
        dec_input_grad: &Matrix,
        beta: f64,
        scale: f64,
    ) -> Matrix {
        let n = fwd.mu.rows();
        let l = self.dims.latent;
        let mut up = Matrix::zeros(n, 2 * l);
        for i in 0..n {
            let dz = &dec_input_grad.row(i)[..l];
            let mu = fwd.mu.row(i);
            let lv = fwd.logvar.row(i);
            let raw = fwd.logvar_raw.row(i);
            let eps = fwd.eps.row(i);
            let row = up.row_mut(i);
            for j in 0..l {
                row[j] = dz[j] + scale * beta * mu[j];
                let pass = raw[j].abs() <= LOGVAR_CLAMP;
                if pass {
                    let half_std = 0.5 * (0.5 * lv[j]).exp();
                    row[l + j] = dz[j] * half_std * eps[j]
                        + scale * beta * 0.5 * (lv[j].exp() - 1.0);
                }
            }
        }
        up
    }
}

fn reparameterize(mu: &Matrix, logvar: &Matrix, eps: &Matrix) -> Matrix {
    let mut z = mu.clone();
    for ((zv, &lv), &e) in z.data_mut().iter_mut().zip(logvar.data()).zip(eps.data()) {
        *zv += (0.5 * lv).exp() * e;
    }
    z
}

/// `KL(N(mu, diag(exp(logvar))) || N(0, I)) = 0.5 * sum(mu^2 + e^lv - 1 - lv)`.
pub fn kl_to_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}
