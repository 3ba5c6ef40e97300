//! Conditional GAN baseline: MLP generator and discriminator conditioned by
//! one-hot concatenation, trained with the non-saturating BCE objective.
//!
//! Only the discriminator touches real data, so only its gradients are
//! exposed per-sample (for DP-SGD); generator updates are post-processing
//! and use batch gradients. Each real sample is paired with one fake sample
//! drawn under the same label, keeping the per-record loss decomposable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::onehot_rows;
use crate::numerics::rng::{gaussian_sample, RngStream};
use crate::numerics::{Activation, Matrix, MlpStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CganDims {
    pub d: usize,
    pub k: usize,
    pub z_g: usize,
    pub g1: usize,
    pub g2: usize,
    pub f1: usize,
    pub f2: usize,
}

impl CganDims {
    /// Default widths: z_g=100, generator (256, 512), discriminator (512, 256).
    pub fn with_defaults(d: usize, k: usize) -> Self {
        Self { d, k, z_g: 100, g1: 256, g2: 512, f1: 512, f2: 256 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.d, self.k, self.z_g, self.g1, self.g2, self.f1, self.f2];
        if all.iter().any(|&v| v == 0) {
            return Err(Error::Shape(format!("cgan dims must all be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Generator `[z_g+K -> g1 -> g2 -> d]` and discriminator
/// `[d+K -> f1 -> f2 -> 1]` (logit output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CganParams {
    pub generator: MlpStack,
    pub discriminator: MlpStack,
    pub dims: CganDims,
}

/// Discriminator loss and gradients from one real batch with paired fakes.
#[derive(Debug, Clone)]
pub struct DiscBackward {
    pub loss: f64,
    /// Per real record: BCE(real, 1) + BCE(paired fake, 0).
    pub per_sample_losses: Vec<f64>,
    /// Flat per-record discriminator gradients.
    pub per_sample_grads: Vec<Vec<f64>>,
}

/// Numerically stable `-t ln sigma(l) - (1-t) ln(1 - sigma(l))`.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl CganParams {
    pub fn init(dims: CganDims, rng: &mut RngStream) -> Result<Self> {
        dims.validate()?;
        let acts = [Activation::Relu, Activation::Relu, Activation::Identity];
        let generator =
            MlpStack::glorot(&[dims.z_g + dims.k, dims.g1, dims.g2, dims.d], &acts, rng)?;
        let discriminator =
            MlpStack::glorot(&[dims.d + dims.k, dims.f1, dims.f2, 1], &acts, rng)?;
        Ok(Self { generator, discriminator, dims })
    }

    pub fn param_count(&self) -> usize {
        self.generator.param_count() + self.discriminator.param_count()
    }

    /// Verify that both stacks match `dims` (used after deserialization).
    pub fn check_shapes(&self) -> Result<()> {
        self.dims.validate()?;
        let CganDims { d, k, z_g, g1, g2, f1, f2 } = self.dims;
        let gen: Vec<usize> = std::iter::once(self.generator.in_dim())
            .chain(self.generator.layers.iter().map(|l| l.out_dim()))
            .collect();
        let disc: Vec<usize> = std::iter::once(self.discriminator.in_dim())
            .chain(self.discriminator.layers.iter().map(|l| l.out_dim()))
            .collect();
        if gen != [z_g + k, g1, g2, d] || disc != [d + k, f1, f2, 1] {
            return Err(Error::Shape(format!(
                "cgan stacks {gen:?}/{disc:?} do not match dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Fake embeddings for the given labels (forward only).
    pub fn generate(&self, y: &[u32], rng: &mut RngStream) -> Result<Matrix> {
        let onehot = onehot_rows(y, self.dims.k)?;
        let z = gaussian_sample(rng, y.len(), self.dims.z_g);
        self.generator.forward(&z.hcat(&onehot)?)
    }

    /// Discriminator loss without gradients.
    pub fn disc_loss(&self, x_real: &Matrix, y: &[u32], rng: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        let (s_real, s_fake, _, _, _) = self.disc_forward(x_real, y, rng)?;
        let per = Self::disc_per_sample(&s_real, &s_fake)?;
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        Ok((mean, per))
    }

    /// Per-record discriminator gradients (DP path).
    pub fn disc_loss_and_grads(
        &self,
        x_real: &Matrix,
        y: &[u32],
        rng: &mut RngStream,
    ) -> Result<DiscBackward> {
        let (s_real, s_fake, real_cache, fake_cache, n) = self.disc_forward(x_real, y, rng)?;
        let per_sample_losses = Self::disc_per_sample(&s_real, &s_fake)?;
        let loss = per_sample_losses.iter().sum::<f64>() / n as f64;

        let up_real = Matrix::from_vec(n, 1, s_real.iter().map(|&s| sigmoid(s) - 1.0).collect())?;
        let up_fake = Matrix::from_vec(n, 1, s_fake.iter().map(|&s| sigmoid(s)).collect())?;
        let back_real = self.discriminator.backward(&real_cache, &up_real)?;
        let back_fake = self.discriminator.backward(&fake_cache, &up_fake)?;
        let per_sample_grads = back_real
            .per_sample
            .into_iter()
            .zip(back_fake.per_sample)
            .map(|(mut r, f)| {
                for (a, b) in r.iter_mut().zip(&f) {
                    *a += b;
                }
                r
            })
            .collect();
        Ok(DiscBackward { loss, per_sample_losses, per_sample_grads })
    }

    /// Mean discriminator gradient (non-private path).
    pub fn disc_loss_and_batch_grad(
        &self,
        x_real: &Matrix,
        y: &[u32],
        rng: &mut RngStream,
    ) -> Result<(f64, Vec<f64>)> {
        let (s_real, s_fake, real_cache, fake_cache, n) = self.disc_forward(x_real, y, rng)?;
        let per = Self::disc_per_sample(&s_real, &s_fake)?;
        let loss = per.iter().sum::<f64>() / n as f64;
        let inv_n = 1.0 / n as f64;
        let up_real =
            Matrix::from_vec(n, 1, s_real.iter().map(|&s| inv_n * (sigmoid(s) - 1.0)).collect())?;
        let up_fake =
            Matrix::from_vec(n, 1, s_fake.iter().map(|&s| inv_n * sigmoid(s)).collect())?;
        let (mut grad, _) = self.discriminator.backward_batch(&real_cache, &up_real)?;
        let (fake_grad, _) = self.discriminator.backward_batch(&fake_cache, &up_fake)?;
        for (a, b) in grad.iter_mut().zip(&fake_grad) {
            *a += b;
        }
        Ok((loss, grad))
    }

    /// Generator loss without gradients.
    pub fn gen_loss(&self, y: &[u32], rng: &mut RngStream) -> Result<f64> {
        let onehot = onehot_rows(y, self.dims.k)?;
        let z = gaussian_sample(rng, y.len(), self.dims.z_g);
        let fake = self.generator.forward(&z.hcat(&onehot)?)?;
        let s = self.discriminator.forward(&fake.hcat(&onehot)?)?;
        let loss =
            s.data().iter().map(|&l| bce_with_logits(l, 1.0)).sum::<f64>() / y.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("generator loss non-finite".into()));
        }
        Ok(loss)
    }

    /// Non-saturating generator update: mean gradient of `-ln D(G(z)|y)`
    /// w.r.t. generator parameters.
    pub fn gen_loss_and_grad(&self, y: &[u32], rng: &mut RngStream) -> Result<(f64, Vec<f64>)> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Shape("generator update needs a non-empty batch".into()));
        }
        let onehot = onehot_rows(y, self.dims.k)?;
        let z = gaussian_sample(rng, n, self.dims.z_g);
        let gen_cache = self.generator.forward_cached(&z.hcat(&onehot)?)?;
        let disc_cache = self.discriminator.forward_cached(&gen_cache.output().hcat(&onehot)?)?;
        let s = disc_cache.output();
        let loss =
            s.data().iter().map(|&l| bce_with_logits(l, 1.0)).sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("generator loss non-finite".into()));
        }
        let inv_n = 1.0 / n as f64;
        let up = Matrix::from_vec(
            n,
            1,
            s.data().iter().map(|&l| inv_n * (sigmoid(l) - 1.0)).collect(),
        )?;
        let (_, disc_input_grad) = self.discriminator.backward_batch(&disc_cache, &up)?;
        let d_fake = disc_input_grad.slice_cols(0, self.dims.d);
        let (grad, _) = self.generator.backward_batch(&gen_cache, &d_fake)?;
        Ok((loss, grad))
    }

    #[allow(clippy::type_complexity)]
    fn disc_forward(
        &self,
        x_real: &Matrix,
        y: &[u32],
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, Vec<f64>, crate::numerics::ForwardCache, crate::numerics::ForwardCache, usize)>
    {
        let n = x_real.rows();
        if n == 0 {
            return Err(Error::Shape("discriminator update needs a non-empty batch".into()));
        }
        if x_real.cols() != self.dims.d {
            return Err(Error::Shape(format!(
                "real batch width {} does not match d={}",
                x_real.cols(),
                self.dims.d
            )));
        }
        let onehot = onehot_rows(y, self.dims.k)?;
        let z = gaussian_sample(rng, n, self.dims.z_g);
        let fake = self.generator.forward(&z.hcat(&onehot)?)?;
        let real_cache = self.discriminator.forward_cached(&x_real.hcat(&onehot)?)?;
        let fake_cache = self.discriminator.forward_cached(&fake.hcat(&onehot)?)?;
        let s_real = real_cache.output().data().to_vec();
        let s_fake = fake_cache.output().data().to_vec();
        Ok((s_real, s_fake, real_cache, fake_cache, n))
    }

    fn disc_per_sample(s_real: &[f64], s_fake: &[f64]) -> Result<Vec<f64>> {
        s_real
            .iter()
            .zip(s_fake)
            .enumerate()
            .map(|(i, (&r, &f))| {
                let l = bce_with_logits(r, 1.0) + bce_with_logits(f, 0.0);
                if l.is_finite() {
                    Ok(l)
                } else {
                    Err(Error::Numeric(format!("discriminator loss non-finite at sample {i}")))
                }
            })
            .collect()
    }
}
