//! Paired synthetic head phantoms: one random ellipse geometry rendered
//! with CT-like and MRI-like contrast.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::physics::ImageGrid;

/// Tissue class of a phantom region; each class maps to one intensity per
/// modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tissue {
    Scalp,
    Skull,
    Brain,
    /// Soft-tissue structure with its own (CT, MRI) intensities.
    Structure {
        ct: f32,
        mri: f32,
    },
    Lesion,
}

impl Tissue {
    /// `(CT, MRI)` intensity. Every tissue is nonzero in both modalities so
    /// the two renderings share their support.
    pub fn intensities(self) -> (f32, f32) {
        match self {
            Tissue::Scalp => (0.25, 0.65),
            Tissue::Skull => (1.0, 0.12),
            Tissue::Brain => (0.32, 0.45),
            Tissue::Structure { ct, mri } => (ct, mri),
            Tissue::Lesion => (0.38, 0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    /// Centre in normalized coordinates, image spans `[-1, 1]`.
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub tissue: Tissue,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Painter's-order list of ellipses; later ones overwrite earlier ones.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomGeometry {
    pub ellipses: Vec<Ellipse>,
}

impl PhantomGeometry {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ellipses = Vec::new();
        let a = rng.gen_range(0.78..0.9);
        let b = rng.gen_range(0.85..0.95);
        let theta = rng.gen_range(-0.2..0.2);
        let (cx, cy) = (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04));
        let skull = rng.gen_range(0.06..0.1);
        let layer = |scale_a: f64, scale_b: f64, tissue| Ellipse {
            cx,
            cy,
            a: a - scale_a,
            b: b - scale_b,
            theta,
            tissue,
        };
        ellipses.push(layer(0.0, 0.0, Tissue::Scalp));
        ellipses.push(layer(0.04, 0.04, Tissue::Skull));
        ellipses.push(layer(0.04 + skull, 0.04 + skull, Tissue::Brain));
        let (ia, ib) = (a - 0.04 - skull, b - 0.04 - skull);
        let count = rng.gen_range(2..=4);
        for _ in 0..count {
            let r = rng.gen_range(0.0..0.55);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let ct = rng.gen_range(0.18..0.3);
            let mri = rng.gen_range(0.15..0.85);
            ellipses.push(Ellipse {
                cx: cx + r * ia * phi.cos(),
                cy: cy + r * ib * phi.sin(),
                a: rng.gen_range(0.08..0.25),
                b: rng.gen_range(0.06..0.18),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
                tissue: Tissue::Structure { ct, mri },
            });
        }
        if rng.gen_bool(0.5) {
            let r = rng.gen_range(0.0..0.5);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let s = rng.gen_range(0.05..0.11);
            ellipses.push(Ellipse {
                cx: cx + r * ia * phi.cos(),
                cy: cy + r * ib * phi.sin(),
                a: s,
                b: s * rng.gen_range(0.7..1.0),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
                tissue: Tissue::Lesion,
            });
        }
        Self { ellipses }
    }

    /// Anti-aliased rendering with 4x4 supersampling per pixel.
    pub fn render(&self, size: usize, pick: impl Fn(Tissue) -> f32) -> ImageGrid {
        const SS: usize = 4;
        ImageGrid::from_fn(size, size, |i, j| {
            let mut acc = 0.0f64;
            for si in 0..SS {
                for sj in 0..SS {
                    let y = ((i as f64 + (si as f64 + 0.5) / SS as f64) / size as f64) * 2.0 - 1.0;
                    let x = ((j as f64 + (sj as f64 + 0.5) / SS as f64) / size as f64) * 2.0 - 1.0;
                    let hit = self.ellipses.iter().rev().find(|e| e.contains(x, y));
                    acc += hit.map(|e| pick(e.tissue) as f64).unwrap_or(0.0);
                }
            }
            ((acc / (SS * SS) as f64) as f32).clamp(0.0, 1.0)
        })
    }
}

/// Ground-truth CT and MRI images of one synthetic anatomy.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub ct_gt: ImageGrid,
    pub mri_gt: ImageGrid,
    pub seed: u64,
}

pub fn gen_phantom_pair(seed: u64, size: usize) -> PhantomPair {
    let geom = PhantomGeometry::random(seed);
    PhantomPair {
        ct_gt: geom.render(size, |t| t.intensities().0),
        mri_gt: geom.render(size, |t| t.intensities().1),
        seed,
    }
}
