use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Variance-preserving schedule, `z_t = α_t z + σ_t ε` for `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut prod = 1.0;
        let mut alphas = Vec::with_capacity(steps);
        let mut sigmas = Vec::with_capacity(steps);
        for b in &betas {
            prod *= 1.0 - b;
            alphas.push(prod.sqrt());
            sigmas.push((1.0 - prod).sqrt());
        }
        Self { betas, alphas, sigmas }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.check(t)?])
    }

    /// ᾱ_t = α_t², with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas[t - 1] * self.alphas[t - 1]
        }
    }

    /// Canonical text form for artifact hashing.
    pub fn canonical(&self) -> String {
        let first = self.betas.first().copied().unwrap_or(0.0);
        let last = self.betas.last().copied().unwrap_or(0.0);
        format!("linear;T={};beta={first:e}..{last:e}", self.steps())
    }
}

/// `α_t z + σ_t ε`, one timestep per batch item.
pub fn noise_latent(z: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z.dims() != eps.dims() {
        return Err(Error::shape(
            "noise_latent",
            format!("latent {:?} vs noise {:?}", z.dims(), eps.dims()),
        ));
    }
    let n = z.dims()[0];
    if t.len() != n {
        return Err(Error::shape(
            "noise_latent",
            format!("{} timesteps for batch {n}", t.len()),
        ));
    }
    let per = z.len() / n;
    let mut out = Vec::with_capacity(z.len());
    for (i, &ti) in t.iter().enumerate() {
        let (a, s) = (schedule.alpha(ti)? as f32, schedule.sigma(ti)? as f32);
        let zs = &z.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(zs.iter().zip(es).map(|(&zv, &ev)| a * zv + s * ev));
    }
    Tensor::new(z.dims().to_vec(), out)
}

/// Standard normal noise drawn from its own seeded stream.
pub fn sample_noise(seed: u64, dims: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| {
        let v: f32 = StandardNormal.sample(&mut rng);
        v
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_preserving_and_monotone() {
        let s = NoiseSchedule::default();
        for t in 1..=s.steps() {
            let (a, g) = (s.alpha(t).unwrap(), s.sigma(t).unwrap());
            assert!((a * a + g * g - 1.0).abs() < 1e-12);
            if t > 1 {
                assert!(a <= s.alpha(t - 1).unwrap());
                assert!(g >= s.sigma(t - 1).unwrap());
            }
        }
        assert!(s.alpha(0).is_err());
        assert!(s.alpha(1001).is_err());
    }

    #[test]
    fn zero_noise_scales_latent() {
        let s = NoiseSchedule::default();
        let z = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32 - 3.0);
        let out = noise_latent(&z, &[500], &Tensor::zeros(&[1, 2, 2, 2]), &s).unwrap();
        let a = s.alpha(500).unwrap() as f32;
        assert!(out.bit_eq(&z.scale(a)));
    }
}
