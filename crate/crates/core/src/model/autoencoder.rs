use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Stand-in for a latent autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AutoencoderStub {
    /// Latents are the images.
    Identity,
    /// Average-pool by `factor` to encode, nearest-upsample to decode.
    FixedDownsample { factor: usize },
}

impl AutoencoderStub {
    pub fn factor(&self) -> usize {
        match self {
            AutoencoderStub::Identity => 1,
            AutoencoderStub::FixedDownsample { factor } => *factor,
        }
    }

    /// `[N,C,H,W]` image to latent.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.factor();
        let d = x.dims();
        if d.len() != 4 || d[2] % f != 0 || d[3] % f != 0 {
            return Err(Error::shape(
                "encode",
                format!("{d:?} is not an [N,C,H,W] image divisible by {f}"),
            ));
        }
        if f == 1 {
            return Ok(x.clone());
        }
        let (nc, h, w) = (d[0] * d[1], d[2], d[3]);
        let (ho, wo) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f32;
        let src = x.data();
        let mut out = Vec::with_capacity(nc * ho * wo);
        for p in 0..nc {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0f32;
                    for di in 0..f {
                        for dj in 0..f {
                            s += plane[(i * f + di) * w + j * f + dj];
                        }
                    }
                    out.push(s * inv);
                }
            }
        }
        Tensor::new(vec![d[0], d[1], ho, wo], out)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let f = self.factor();
        let d = z.dims();
        if d.len() != 4 {
            return Err(Error::shape("decode", format!("{d:?} is not [N,C,H,W]")));
        }
        if f == 1 {
            return Ok(z.clone());
        }
        let (nc, h, w) = (d[0] * d[1], d[2], d[3]);
        let src = z.data();
        let mut out = Vec::with_capacity(nc * h * w * f * f);
        for p in 0..nc {
            for i in 0..h * f {
                for j in 0..w * f {
                    out.push(src[p * h * w + (i / f) * w + j / f]);
                }
            }
        }
        Tensor::new(vec![d[0], d[1], h * f, w * f], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_round_trip() {
        let x = Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f32).sin());
        let ae = AutoencoderStub::Identity;
        assert!(ae.decode(&ae.encode(&x).unwrap()).unwrap().bit_eq(&x));
    }

    #[test]
    fn pooling() {
        let ae = AutoencoderStub::FixedDownsample { factor: 2 };
        let c = Tensor::full(&[1, 1, 4, 4], 0.25);
        assert!(ae.decode(&ae.encode(&c).unwrap()).unwrap().bit_eq(&c));
        let board = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f32);
        let z = ae.encode(&board).unwrap();
        assert_eq!(z.dims(), &[1, 1, 2, 2]);
        assert!(z.data().iter().all(|&v| v == 0.5));
        assert!(ae.encode(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }
}
