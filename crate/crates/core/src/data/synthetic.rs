//! Synthetic multi-modal brain phantoms with nested tumor compartments.
//!
//! A brain ellipsoid sits in air. Each tumor is an ellipsoid whose
//! normalized radius `s` picks the compartment: necrotic core innermost,
//! then enhancing core, non-enhancing core, and an edema shell outside.
//! Every class has a distinct intensity signature across the four
//! channels (FLAIR, T2, T1, T1c), plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, MultiModalVolume};

pub const BACKGROUND: u8 = 0;
pub const EDEMA: u8 = 1;
pub const NON_ENHANCING: u8 = 2;
pub const NECROTIC: u8 = 3;
pub const ENHANCING: u8 = 4;

pub const NOISE_SIGMA: f64 = 0.1;
pub const MIN_EXTENT: usize = 16;

const AIR: [f64; 4] = [0.0; 4];
/// Mean intensity per class in (FLAIR, T2, T1, T1c) order, indexed by label.
pub const SIGNATURES: [[f64; 4]; 5] = [
    [1.0, 1.0, 1.0, 1.0],
    [2.2, 2.4, 0.8, 0.9],
    [1.6, 1.8, 0.6, 1.0],
    [0.7, 2.8, 0.4, 0.5],
    [1.5, 1.4, 1.1, 3.0],
];

/// Tumor voxels are kept within this fraction of brain voxels.
pub const TUMOR_FRACTION: (f64, f64) = (0.01, 0.10);

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius; `<= 1` inside.
    fn s(&self, z: f64, y: f64, x: f64) -> f64 {
        let p = [z, y, x];
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }
}

#[derive(Clone, Copy, Debug)]
struct Tumor {
    shape: Ellipsoid,
    /// upper `s` bounds of necrotic, enhancing and non-enhancing compartments
    bounds: [f64; 3],
}

impl Tumor {
    fn label(&self, s: f64) -> u8 {
        if s <= self.bounds[0] {
            NECROTIC
        } else if s <= self.bounds[1] {
            ENHANCING
        } else if s <= self.bounds[2] {
            NON_ENHANCING
        } else {
            EDEMA
        }
    }
}

fn center(v: f64) -> f64 {
    (v - 1.0) / 2.0
}

fn brain_for((d, h, w): (usize, usize, usize)) -> Ellipsoid {
    Ellipsoid {
        center: [center(d as f64), center(h as f64), center(w as f64)],
        radii: [0.45 * d as f64, 0.42 * h as f64, 0.40 * w as f64],
    }
}

fn sample_tumors(
    rng: &mut ChaCha8Rng,
    brain: &Ellipsoid,
    dims: (usize, usize, usize),
) -> Vec<Tumor> {
    let (d, h, w) = dims;
    let count = rng.random_range(1..=3);
    let budget = TUMOR_FRACTION.1 * 0.9 * brain.volume();
    let mut used = 0.0;
    let mut tumors = Vec::new();
    for i in 0..count {
        let plane = h.min(w) as f64;
        let mut shape = Ellipsoid {
            center: [0.0; 3],
            radii: [
                rng.random_range(0.15..0.22) * d as f64,
                rng.random_range(0.12..0.18) * plane,
                rng.random_range(0.12..0.18) * plane,
            ],
        };
        // shrink until the tumor fits the remaining budget
        while used + shape.volume() > budget {
            for r in &mut shape.radii {
                *r *= 0.9;
            }
        }
        if i > 0 && shape.radii.iter().any(|&r| r < 2.5) {
            break;
        }
        // keep the whole tumor inside the brain
        for k in 0..3 {
            let room = (brain.radii[k] - shape.radii[k]).max(0.0) * 0.6;
            shape.center[k] = brain.center[k] + rng.random_range(-1.0..=1.0) * room;
        }
        let a = rng.random_range(0.30..0.40);
        let b = a + rng.random_range(0.15..0.22);
        let c = b + rng.random_range(0.12..0.18);
        used += shape.volume();
        tumors.push(Tumor {
            shape,
            bounds: [a, b, c],
        });
    }
    tumors
}

/// One phantom case of `dims = (D, H, W)`, deterministic in `seed`.
pub fn gen_synthetic_case(
    seed: u64,
    dims: (usize, usize, usize),
) -> Result<(MultiModalVolume, LabelVolume)> {
    let (d, h, w) = dims;
    if d < MIN_EXTENT || h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::InvalidArgument(format!(
            "synthetic dims must be at least {MIN_EXTENT} each, got {d}x{h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brain = brain_for(dims);
    let tumors = sample_tumors(&mut rng, &brain, dims);

    let plane = h * w;
    let n = d * plane;
    let mut labels = vec![BACKGROUND; n];
    let mut data = vec![0.0f32; 4 * n];
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (zf, yf, xf) = (z as f64, y as f64, x as f64);
                let idx = z * plane + y * w + x;
                let in_brain = brain.s(zf, yf, xf) <= 1.0;
                let innermost = tumors
                    .iter()
                    .map(|t| (t.shape.s(zf, yf, xf), t))
                    .filter(|(s, _)| *s <= 1.0)
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                let label = match innermost {
                    Some((s, t)) if in_brain => t.label(s),
                    _ => BACKGROUND,
                };
                labels[idx] = label;
                let mean = if in_brain {
                    &SIGNATURES[label as usize]
                } else {
                    &AIR
                };
                for (m, mu) in mean.iter().enumerate() {
                    data[m * n + idx] = (mu + noise.sample(&mut rng)) as f32;
                }
            }
        }
    }
    let volume = MultiModalVolume::new(Tensor::new(&[4, d, h, w], data)?)?;
    Ok((volume, LabelVolume::new(dims, labels)?))
}
