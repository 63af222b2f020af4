//! Sampling, with the two-path noise prediction for transferred adapters.
//!
//! The green path runs the clean network up to the end of the removed region
//! and yields the tap. The red path runs the retained blocks with adapters and
//! splices that tap in, exactly as the hollowed network did during training.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::hash::name_seed;
use crate::hollow::{validate_plan, HollowPlan};
use crate::lora::{LoraAdapterSet, Provenance};
use crate::model::{
    build_unet_graph, run_lean, sample_noise, tap_forward, unet_forward, BlockGraph, NoiseSchedule, ParamStore, Route,
    UnetInputs,
};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    /// Ancestral sampling (stochastic).
    Ddpm,
    /// Deterministic DDIM.
    Ddim,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            _ => Err(Error::Config(format!("unknown sampler `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// 1.0 disables guidance; otherwise mixes in a zero-context prediction.
    pub guidance: f32,
    pub seed: u64,
    /// Clamp the predicted clean latent to [-1, 1] at every step.
    pub clip: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 50,
            guidance: 1.0,
            seed: 0,
            clip: true,
        }
    }
}

/// Two-path noise prediction on the full network.
///
/// Adapters must be transferred (or fresh, which makes both paths collapse to
/// the plain forward).
pub fn two_path_eps(
    graph: &BlockGraph,
    params: &ParamStore,
    plan: &HollowPlan,
    adapters: &LoraAdapterSet,
    z_t: &Tensor,
    t: &[usize],
    cond: &Tensor,
) -> Result<Tensor> {
    match adapters.provenance {
        Provenance::Transferred | Provenance::Fresh => {}
        p => {
            return Err(Error::Adapter(format!(
                "two-path inference needs transferred adapters, got {p}"
            )))
        }
    }
    validate_plan(graph, plan)?;
    let tap = tap_forward(graph, params, plan, z_t, t, cond)?;
    let ug = build_unet_graph(graph, Route::Hollowed(plan), Some(adapters), z_t.dims()[0], &[])?;
    let inputs = UnetInputs::new(graph, z_t.clone(), t, cond)?.with_tap(tap);
    let exec = run_lean(&ug, &inputs, params, Some(adapters))?;
    Ok(exec.value(ug.eps.expect("hollowed route")).clone())
}

/// A noise predictor: the plain network, optionally adapted, or the two-path scheme.
#[derive(Clone, Copy)]
pub struct EpsModel<'a> {
    pub graph: &'a BlockGraph,
    pub params: &'a ParamStore,
    pub adapters: Option<&'a LoraAdapterSet>,
    pub plan: Option<&'a HollowPlan>,
}

impl EpsModel<'_> {
    pub fn eps(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        match (self.plan, self.adapters) {
            (Some(plan), Some(a)) => two_path_eps(self.graph, self.params, plan, a, z_t, t, cond),
            (Some(plan), None) => {
                let none = LoraAdapterSet::empty(Provenance::Fresh);
                two_path_eps(self.graph, self.params, plan, &none, z_t, t, cond)
            }
            (None, a) => Ok(unet_forward(self.graph, self.params, z_t, t, cond, a, &[])?.0),
        }
    }
}

/// Descending timesteps `t_1 > … > t_k` evenly covering `1..=T`, ending at 1.
pub fn timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!(
            "sampler steps must be in 1..={total}, got {steps}"
        )));
    }
    let mut ts: Vec<usize> = (0..steps).map(|i| 1 + i * total / steps).collect();
    ts.reverse();
    Ok(ts)
}

/// Draws `n` latents for the prompt embedding `cond` (`[1, L, D]`).
pub fn sample(
    model: &EpsModel<'_>,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    n: usize,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let c = &model.graph.config;
    let dims = [n, c.latent_channels, c.latent_size, c.latent_size];
    let ts = timesteps(schedule.steps(), cfg.steps)?;
    let uncond = Tensor::zeros(cond.dims());
    let eta = match cfg.kind {
        SamplerKind::Ddim => 0.0,
        SamplerKind::Ddpm => 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "sampler"));
    let mut z = sample_noise(name_seed(cfg.seed, "init"), &dims);
    for (i, &t) in ts.iter().enumerate() {
        let tv = vec![t; n];
        let mut eps = model.eps(&z, &tv, cond)?;
        if cfg.guidance != 1.0 {
            let e0 = model.eps(&z, &tv, &uncond)?;
            let g = cfg.guidance;
            eps = e0.zip_map(&eps, |u, c| u + g * (c - u))?;
        }
        let ab = schedule.alpha_bar(t);
        let ab_prev = ts.get(i + 1).map_or(1.0, |&p| schedule.alpha_bar(p));
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let sig = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sig * sig).max(0.0).sqrt();
        let (a_prev, a, s) = (ab_prev.sqrt() as f32, a as f32, s as f32);
        let (dir, sig) = (dir as f32, sig as f32);
        let mut out = Vec::with_capacity(z.len());
        for (&zv, &ev) in z.data().iter().zip(eps.data()) {
            let mut x0 = (zv - s * ev) / a;
            if cfg.clip {
                x0 = x0.clamp(-1.0, 1.0);
            }
            let mut v = a_prev * x0 + dir * ev;
            if sig > 0.0 {
                let w: f32 = StandardNormal.sample(&mut rng);
                v += sig * w;
            }
            out.push(v);
        }
        z = Tensor::new(dims.to_vec(), out)?;
        if !z.is_finite() {
            return Err(Error::Numerical(format!("sampler diverged at t = {t}")));
        }
    }
    Ok(z)
}

/// 8-bit interleaved samples of a `[C, H, W]` image in [-1, 1].
pub fn to_bytes(image: &Tensor) -> Result<(usize, usize, usize, Vec<u8>)> {
    let d = image.dims();
    if d.len() != 3 || !(d[0] == 1 || d[0] == 3) {
        return Err(Error::shape("image", format!("expected [1|3, H, W], got {d:?}")));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let data = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            let v = (data[ch * h * w + i] + 1.0) * 0.5;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((c, h, w, out))
}

/// Writes a binary PPM (RGB) or PGM (grayscale) file.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w, bytes) = to_bytes(image)?;
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hollow::{hollowed_forward, parse_plan, HollowedView};
    use crate::lora::init_adapters;
    use crate::model::ArchConfig;

    #[test]
    fn timestep_grid() {
        assert_eq!(timesteps(1000, 4).unwrap(), vec![751, 501, 251, 1]);
        assert_eq!(timesteps(1000, 1000).unwrap().len(), 1000);
        assert!(timesteps(1000, 0).is_err());
        assert!(timesteps(1000, 1001).is_err());
    }

    #[test]
    fn two_path_matches_hollowed_forward() {
        let g = BlockGraph::new(&ArchConfig::toy16()).unwrap();
        let params = ParamStore::init(&g, 1);
        let plan = parse_plan(&g, "2-2,3-1,3-2,4-1").unwrap();
        let mut set = init_adapters(&g, Some(&plan), 2, 3).unwrap();
        let mut v = set.tensors();
        for t in v.values_mut() {
            *t = t.map(|x| x + 0.05);
        }
        set.set_tensors(&v).unwrap();
        let z = sample_noise(1, &[1, 3, 16, 16]);
        let c = sample_noise(2, &[1, 8, 32]);
        set.provenance = Provenance::TrainedOnHollowed;
        assert!(two_path_eps(&g, &params, &plan, &set, &z, &[300], &c).is_err());
        let view = HollowedView::new(&g, &plan).unwrap();
        let tap = tap_forward(&g, &params, &plan, &z, &[300], &c).unwrap();
        let want = hollowed_forward(&view, &params, &tap, &z, &[300], &c, Some(&set)).unwrap();
        set.provenance = Provenance::Transferred;
        let got = two_path_eps(&g, &params, &plan, &set, &z, &[300], &c).unwrap();
        assert!(got.bit_eq(&want));
    }

    #[test]
    fn image_bytes() {
        let img = Tensor::new(vec![1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(to_bytes(&img).unwrap().3, vec![0, 128, 255]);
    }
}
