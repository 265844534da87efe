//! Synthetic grayscale textures and image resampling.

mod pgm;

pub use pgm::{decode_pgm, encode_pgm, list_pgm_files, read_pgm, write_pgm};

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Blob,
    Ring,
}

impl ShapeClass {
    pub fn label(self) -> usize {
        match self {
            ShapeClass::Blob => 0,
            ShapeClass::Ring => 1,
        }
    }

    pub fn from_label(label: usize) -> Option<Self> {
        match label {
            0 => Some(ShapeClass::Blob),
            1 => Some(ShapeClass::Ring),
            _ => None,
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeClass::Blob => "blob",
            ShapeClass::Ring => "ring",
        })
    }
}

impl FromStr for ShapeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blob" => Ok(ShapeClass::Blob),
            "ring" => Ok(ShapeClass::Ring),
            other => Err(param_err(format!("unknown shape class `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Side length of the rendered (high-resolution) image.
    pub size: usize,
    pub n_blobs: usize,
    /// Radial rays attached to each shape.
    pub spicule_count: usize,
    /// Amplitude of the smooth background value noise, in `[0, 1]`.
    pub noise_amp: f64,
    pub class: ShapeClass,
    /// Place the first shape at the image centre instead of a random spot.
    pub centered: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(size: usize, class: ShapeClass, seed: u64) -> Self {
        Self {
            size,
            n_blobs: 2,
            spicule_count: 3,
            noise_amp: 0.1,
            class,
            centered: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || self.size % 2 != 0 {
            return Err(param_err(format!(
                "synthetic image size must be even and ≥ 8, got {}",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_amp) {
            return Err(param_err(format!(
                "noise amplitude {} outside [0, 1]",
                self.noise_amp
            )));
        }
        Ok(())
    }
}

struct Shape {
    cy: f64,
    cx: f64,
    sy: f64,
    sx: f64,
    cos: f64,
    sin: f64,
    amp: f64,
}

impl Shape {
    /// Elliptical radius in units of the shape's own axes.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        ((u / self.sx).powi(2) + (v / self.sy).powi(2)).sqrt()
    }
}

const RING_RADIUS: f64 = 2.0;
const RING_WIDTH: f64 = 0.45;

/// Renders a `size × size` image in `[0, 1]`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Tensor> {
    spec.validate()?;
    let n = spec.size;
    let nf = n as f64;
    let mut rng = Rng::new(spec.seed);
    let mut img = Tensor::zeros(&[n, n]);

    let mut shapes = Vec::with_capacity(spec.n_blobs);
    for i in 0..spec.n_blobs {
        let (cy, cx) = if i == 0 && spec.centered {
            ((nf - 1.0) / 2.0, (nf - 1.0) / 2.0)
        } else {
            (
                nf * (0.2 + 0.6 * rng.uniform()),
                nf * (0.2 + 0.6 * rng.uniform()),
            )
        };
        let scale = match spec.class {
            ShapeClass::Blob => 0.06 + 0.08 * rng.uniform(),
            ShapeClass::Ring => 0.04 + 0.04 * rng.uniform(),
        };
        let aspect = 0.6 + 0.8 * rng.uniform();
        let theta = std::f64::consts::PI * rng.uniform();
        shapes.push(Shape {
            cy,
            cx,
            sy: nf * scale,
            sx: nf * scale * aspect,
            cos: theta.cos(),
            sin: theta.sin(),
            amp: 0.5 + 0.4 * rng.uniform(),
        });
    }

    for s in &shapes {
        for y in 0..n {
            for x in 0..n {
                let r = s.radius(y as f64, x as f64);
                let v = match spec.class {
                    ShapeClass::Blob => (-0.5 * r * r).exp(),
                    ShapeClass::Ring => (-0.5 * ((r - RING_RADIUS) / RING_WIDTH).powi(2)).exp(),
                };
                img.row_mut(y)[x] += s.amp * v;
            }
        }
    }

    for s in &shapes {
        let reach = RING_RADIUS * s.sx.max(s.sy);
        // Rays leave a ring from its rim rather than its hollow centre.
        let start = match spec.class {
            ShapeClass::Blob => 0.0,
            ShapeClass::Ring => RING_RADIUS * s.sx.min(s.sy),
        };
        for _ in 0..spec.spicule_count {
            let phi = 2.0 * std::f64::consts::PI * rng.uniform();
            let len = reach * (1.0 + 1.5 * rng.uniform());
            let (dy, dx) = (phi.sin(), phi.cos());
            let width = 0.6 + 0.6 * rng.uniform();
            for y in 0..n {
                for x in 0..n {
                    let (py, px) = (y as f64 - s.cy, x as f64 - s.cx);
                    let t = py * dy + px * dx;
                    if !(start..=start + len).contains(&t) {
                        continue;
                    }
                    let perp = (py * dx - px * dy).abs();
                    let v = 0.35 * s.amp * (1.0 - (t - start) / len) * (-0.5 * (perp / width).powi(2)).exp();
                    img.row_mut(y)[x] += v;
                }
            }
        }
    }

    if spec.noise_amp > 0.0 {
        let cells = 8usize;
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.uniform()).collect();
        let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let step = nf / cells as f64;
        for y in 0..n {
            let fy = y as f64 / step;
            let (iy, ty) = ((fy as usize).min(cells - 1), smooth(fy - (fy as usize).min(cells - 1) as f64));
            for x in 0..n {
                let fx = x as f64 / step;
                let ix = (fx as usize).min(cells - 1);
                let tx = smooth(fx - ix as f64);
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                img.row_mut(y)[x] += spec.noise_amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }

    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(img)
}

/// Box-filter downsample by an integer factor.
pub fn downsample(img: &Tensor, factor: usize) -> Result<Tensor> {
    if img.rank() != 2 || factor == 0 || img.rows() % factor != 0 || img.cols() % factor != 0 {
        return Err(dim_err(format!(
            "cannot downsample image {:?} by {factor}",
            img.shape()
        )));
    }
    let (h, w) = (img.rows() / factor, img.cols() / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for r in 0..factor {
                s += img.row(i * factor + r)[j * factor..(j + 1) * factor].iter().sum::<f64>();
            }
            out.row_mut(i)[j] = s * inv;
        }
    }
    Ok(out)
}

pub fn downsample2x(img: &Tensor) -> Result<Tensor> {
    downsample(img, 2)
}

/// Nearest-neighbour upsample by an integer factor.
pub fn upsample_nearest(img: &Tensor, factor: usize) -> Tensor {
    Tensor::from_fn(img.rows() * factor, img.cols() * factor, |i, j| {
        img.get(i / factor, j / factor)
    })
}

/// A labelled set alternating blob / ring, one seed per image.
pub fn labelled_set(count: usize, size: usize, seed: u64, template: &SyntheticSpec) -> Result<Vec<(Tensor, usize)>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|i| {
            let class = if i % 2 == 0 { ShapeClass::Blob } else { ShapeClass::Ring };
            let spec = SyntheticSpec {
                size,
                class,
                seed: rng.next_u64(),
                ..template.clone()
            };
            Ok((gen_synthetic(&spec)?, class.label()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_blob_peaks_at_centre() {
        for seed in 0..10 {
            let spec = SyntheticSpec {
                n_blobs: 1,
                spicule_count: 0,
                noise_amp: 0.0,
                centered: true,
                ..SyntheticSpec::new(64, ShapeClass::Blob, seed)
            };
            let img = gen_synthetic(&spec).unwrap();
            let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
            for i in 0..64 {
                for j in 0..64 {
                    if img.get(i, j) > best {
                        best = img.get(i, j);
                        at = (i, j);
                    }
                }
            }
            let c = 31.5;
            assert!((at.0 as f64 - c).abs() <= 1.0 && (at.1 as f64 - c).abs() <= 1.0, "{at:?}");
        }
    }

    #[test]
    fn deterministic_and_clamped() {
        for class in [ShapeClass::Blob, ShapeClass::Ring] {
            let spec = SyntheticSpec {
                noise_amp: 0.8,
                n_blobs: 5,
                ..SyntheticSpec::new(32, class, 9)
            };
            let a = gen_synthetic(&spec).unwrap();
            let b = gen_synthetic(&spec).unwrap();
            assert_eq!(a.data(), b.data());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_synthetic(&SyntheticSpec::new(7, ShapeClass::Blob, 0)).is_err());
        assert!(gen_synthetic(&SyntheticSpec::new(6, ShapeClass::Blob, 0)).is_err());
        let spec = SyntheticSpec {
            noise_amp: 1.5,
            ..SyntheticSpec::new(8, ShapeClass::Blob, 0)
        };
        assert!(gen_synthetic(&spec).is_err());
    }

    #[test]
    fn downsample_contracts() {
        let c = Tensor::full(&[6, 4], 0.3);
        let d = downsample2x(&c).unwrap();
        assert_eq!(d.shape(), &[3, 2]);
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let checker = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(downsample2x(&checker).unwrap().data(), &[0.5]);
        assert!(downsample2x(&Tensor::zeros(&[3, 4])).is_err());

        let img = gen_synthetic(&SyntheticSpec::new(32, ShapeClass::Ring, 4)).unwrap();
        let small = downsample2x(&img).unwrap();
        assert!((small.mean() - img.mean()).abs() <= 1e-12);
    }

    #[test]
    fn labelled_set_alternates() {
        let set = labelled_set(4, 16, 1, &SyntheticSpec::new(16, ShapeClass::Blob, 0)).unwrap();
        let labels: Vec<usize> = set.iter().map(|(_, l)| *l).collect();
        assert_eq!(labels, vec![0, 1, 0, 1]);
        assert_ne!(set[0].0, set[2].0);
    }
}
