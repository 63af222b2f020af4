//! Procedural shapes: the class distribution for pre-training and prior
//! samples, and subjects with a handful of instance images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hollownet::hash::name_seed;
use hollownet::model::{embed_prompt, PromptSpec};
use hollownet::numerics::Tensor;
use hollownet::trainer::ClassSource;
use hollownet::{Error, Result};

pub const CLASSES: [&str; 6] = ["circle", "square", "triangle", "ring", "cross", "diamond"];

pub fn class_index(name: &str) -> Result<usize> {
    CLASSES
        .iter()
        .position(|&c| c == name)
        .ok_or_else(|| Error::Config(format!("unknown class `{name}`; expected one of {CLASSES:?}")))
}

/// Everything that fixes the appearance of one rendered shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Look {
    pub shape: usize,
    pub fg: [f32; 3],
    pub bg: [f32; 3],
    /// Stripe frequency (radians per pixel) and direction.
    pub stripes: Option<(f32, f32)>,
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
}

fn inside(shape: usize, dx: f32, dy: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= 1.0,
        1 => dx.abs().max(dy.abs()) <= 0.85,
        2 => (-0.9..=0.8).contains(&dy) && dx.abs() <= 0.55 * (dy + 0.9),
        3 => (0.25..=1.0).contains(&(dx * dx + dy * dy)),
        4 => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
        _ => dx.abs() + dy.abs() <= 1.0,
    }
}

/// `[3, size, size]` in [-1, 1].
pub fn render(look: &Look, size: usize) -> Tensor {
    let mut out = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (dx, dy) = ((px - look.cx) / look.radius, (py - look.cy) / look.radius);
            let mut c = look.bg;
            if inside(look.shape, dx, dy) {
                c = look.fg;
                if let Some((f, a)) = look.stripes {
                    if (f * (px * a.cos() + py * a.sin())).sin() > 0.0 {
                        c = c.map(|v| 0.4 * v);
                    }
                }
            }
            for ch in 0..3 {
                out[ch * size * size + y * size + x] = c[ch];
            }
        }
    }
    Tensor::new(vec![3, size, size], out).expect("image dims")
}

/// Share of an image's variation left unexplained by the closest template of
/// class `shape`, as an RMS ratio in [0, 1].
///
/// Templates cover the class range of position and radius on a quarter-pixel
/// grid; the foreground and background colours are fitted per channel. Flat
/// images score 1.
pub fn template_distance(image: &Tensor, shape: usize) -> Result<f64> {
    let d = image.dims();
    if d.len() != 3 || d[0] != 3 || d[1] != d[2] {
        return Err(Error::Config(format!(
            "template distance needs a [3, S, S] image, got {d:?}"
        )));
    }
    let (size, px) = (d[1], d[1] * d[1]);
    let s = size as f32;
    let data = image.data();
    let mut total = 0.0f64;
    for ch in data.chunks_exact(px) {
        let m = ch.iter().map(|&v| v as f64).sum::<f64>() / px as f64;
        total += ch.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
    }
    if total < 1e-6 * data.len() as f64 {
        return Ok(1.0);
    }
    let sq: f64 = data.iter().map(|&v| (v as f64).powi(2)).sum();
    let mut best = total;
    let mut mask = vec![false; px];
    let steps = |lo: f32, hi: f32| (0..).map(move |k| lo + 0.25 * k as f32).take_while(move |&v| v <= hi);
    for cx in steps(0.5 * s - 2.0, 0.5 * s + 2.0) {
        for cy in steps(0.5 * s - 2.0, 0.5 * s + 2.0) {
            for r in steps(0.28 * s, 0.4 * s) {
                for (i, m) in mask.iter_mut().enumerate() {
                    let (x, y) = ((i % size) as f32 + 0.5, (i / size) as f32 + 0.5);
                    *m = inside(shape, (x - cx) / r, (y - cy) / r);
                }
                let n_in = mask.iter().filter(|&&m| m).count();
                if n_in == 0 || n_in == px {
                    continue;
                }
                // Fitting a region mean removes n·mean² from its sum of squares.
                let mut explained = 0.0;
                for ch in data.chunks_exact(px) {
                    let (mut a, mut b) = (0.0f64, 0.0f64);
                    for (&v, &m) in ch.iter().zip(&mask) {
                        if m {
                            a += v as f64
                        } else {
                            b += v as f64
                        }
                    }
                    explained += a * a / n_in as f64 + b * b / (px - n_in) as f64;
                }
                best = best.min((sq - explained).max(0.0));
            }
        }
    }
    Ok((best / total).sqrt())
}

/// Corners of the colour cube, pulled in slightly.
const PALETTE: [[f32; 3]; 8] = {
    let mut p = [[0.0; 3]; 8];
    let mut i = 0;
    while i < 8 {
        let mut ch = 0;
        while ch < 3 {
            p[i][ch] = if i >> ch & 1 == 1 { 0.8 } else { -0.8 };
            ch += 1;
        }
        i += 1;
    }
    p
};

fn colours(rng: &mut ChaCha8Rng) -> ([f32; 3], [f32; 3]) {
    let fg = rng.gen_range(0..PALETTE.len());
    let bg = (fg + rng.gen_range(1..PALETTE.len())) % PALETTE.len();
    (PALETTE[fg], PALETTE[bg])
}

fn stripes(rng: &mut ChaCha8Rng) -> (f32, f32) {
    (rng.gen_range(0.8..2.0), rng.gen_range(0.0..std::f32::consts::PI))
}

/// A random member of class `shape`: palette colours, stripes half the time,
/// near the centre.
pub fn class_look(shape: usize, size: usize, rng: &mut ChaCha8Rng) -> Look {
    let (fg, bg) = colours(rng);
    let s = size as f32;
    Look {
        shape,
        fg,
        bg,
        stripes: rng.gen_bool(0.5).then(|| stripes(rng)),
        cx: 0.5 * s + rng.gen_range(-2.0..=2.0),
        cy: 0.5 * s + rng.gen_range(-2.0..=2.0),
        radius: rng.gen_range(0.28 * s..0.4 * s),
    }
}

/// One subject: a fixed palette and texture on a fixed shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSubject {
    pub class: String,
    pub look: Look,
    pub seed: u64,
}

impl SyntheticSubject {
    pub fn new(class: &str, seed: u64, size: usize) -> Result<Self> {
        let shape = class_index(class)?;
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, "subject"));
        let (fg, bg) = colours(&mut rng);
        let s = size as f32;
        let look = Look {
            shape,
            fg,
            bg,
            stripes: Some(stripes(&mut rng)),
            cx: 0.5 * s,
            cy: 0.5 * s,
            radius: rng.gen_range(0.3 * s..0.38 * s),
        };
        Ok(Self {
            class: class.to_owned(),
            look,
            seed,
        })
    }

    /// The `i`-th view: the subject moved by a few pixels and slightly rescaled.
    pub fn view(&self, i: usize, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, &format!("view-{i}")));
        let mut look = self.look.clone();
        look.cx += rng.gen_range(-2.0..=2.0);
        look.cy += rng.gen_range(-2.0..=2.0);
        look.radius *= rng.gen_range(0.92..=1.08);
        render(&look, size)
    }

    /// Instance images; the view after them is held out.
    pub fn instances(&self, n: usize, size: usize) -> Vec<Tensor> {
        (0..n).map(|i| self.view(i, size)).collect()
    }

    pub fn held_out(&self, n: usize, size: usize) -> Tensor {
        self.view(n, size)
    }
}

/// Instance images plus the class distribution they belong to.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub subject: SyntheticSubject,
    pub instances: Vec<Tensor>,
    pub held_out: Tensor,
}

/// Deterministic per seed; between 4 and 6 instances unless `n` is given.
pub fn make_toy_dataset(class: &str, seed: u64, size: usize, n: Option<usize>) -> Result<ToyDataset> {
    let subject = SyntheticSubject::new(class, seed, size)?;
    let n = n.unwrap_or_else(|| ChaCha8Rng::seed_from_u64(name_seed(seed, "count")).gen_range(4..=6));
    if n == 0 {
        return Err(Error::Config("a subject needs at least one instance image".into()));
    }
    Ok(ToyDataset {
        instances: subject.instances(n, size),
        held_out: subject.held_out(n, size),
        subject,
    })
}

/// Random class images with their generic prompts `a <class>`.
pub struct ClassImages {
    size: usize,
    conds: Vec<Tensor>,
}

impl ClassImages {
    pub fn new(size: usize, table_seed: u64, dim: usize, len: usize) -> Result<Self> {
        let conds = CLASSES
            .iter()
            .enumerate()
            .map(|(i, c)| embed_prompt(&PromptSpec::prior(c, 1 + i as u32), table_seed, dim, len))
            .collect::<Result<_>>()?;
        Ok(Self { size, conds })
    }
}

impl ClassSource for ClassImages {
    fn draw(&mut self, rng: &mut ChaCha8Rng, batch: usize) -> Result<(Tensor, Tensor)> {
        let mut imgs = Vec::with_capacity(batch);
        let mut conds = Vec::with_capacity(batch);
        for _ in 0..batch {
            let k = rng.gen_range(0..CLASSES.len());
            let img = render(&class_look(k, self.size, rng), self.size);
            imgs.push(img.reshape(&[1, 3, self.size, self.size])?);
            conds.push(self.conds[k].clone());
        }
        Ok((Tensor::stack_batch(&imgs)?, Tensor::stack_batch(&conds)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn differing(a: &Tensor, b: &Tensor) -> f64 {
        let n = a.len() / 3;
        (0..n)
            .filter(|&p| (0..3).any(|c| (a.data()[c * n + p] - b.data()[c * n + p]).abs() > 1e-3))
            .count() as f64
            / n as f64
    }

    #[test]
    fn template_distance_separates_shapes_from_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut look = class_look(1, 16, &mut rng);
        look.stripes = None;
        let img = render(&look, 16);
        assert!(template_distance(&img, 1).unwrap() < 1e-6);
        assert!(template_distance(&img, 4).unwrap() > 0.3);
        let noise = Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(-1.0..1.0));
        assert!(template_distance(&noise, 1).unwrap() > 0.8);
        assert_eq!(template_distance(&Tensor::full(&[3, 16, 16], 0.2), 1).unwrap(), 1.0);
    }

    #[test]
    fn deterministic_and_distinct() {
        let a = make_toy_dataset("circle", 3, 16, None).unwrap();
        let b = make_toy_dataset("circle", 3, 16, None).unwrap();
        assert!((4..=6).contains(&a.instances.len()));
        for (x, y) in a.instances.iter().zip(&b.instances) {
            assert!(x.bit_eq(y));
            assert_eq!(x.dims(), &[3, 16, 16]);
            assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..a.instances.len() {
            for j in 0..i {
                assert!(!a.instances[i].bit_eq(&a.instances[j]));
            }
        }
        for seed in 4..12 {
            let o = make_toy_dataset("circle", seed, 16, None).unwrap();
            assert!(differing(&a.instances[0], &o.instances[0]) >= 0.1, "seed {seed}");
        }
    }

    #[test]
    fn class_images_have_matching_prompts() {
        let mut src = ClassImages::new(16, 7, 32, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, c) = src.draw(&mut rng, 5).unwrap();
        assert_eq!(x.dims(), &[5, 3, 16, 16]);
        assert_eq!(c.dims(), &[5, 8, 32]);
        assert!(class_index("hexagon").is_err());
    }
}
