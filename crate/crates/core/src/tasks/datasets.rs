use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::forward::DomainPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Smooth blobs; target is the inverted, gamma-warped source.
    ContrastSwap,
    /// Filled shapes; source is an edge-enhanced, speckled rendering.
    SpeckleToSmooth,
    /// Textured cells with thin dark strokes; target is the stroke mask.
    ShapeToMask,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ContrastSwap => "contrast_swap",
            TaskKind::SpeckleToSmooth => "speckle_to_smooth",
            TaskKind::ShapeToMask => "shape_to_mask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "contrast_swap" => Some(TaskKind::ContrastSwap),
            "speckle_to_smooth" => Some(TaskKind::SpeckleToSmooth),
            "shape_to_mask" => Some(TaskKind::ShapeToMask),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::param("image_size", "images must be at least 4x4"));
        }
        if self.channels == 0 {
            return Err(Error::param("channels", "need at least one channel"));
        }
        Ok(())
    }
}

/// Seed of pair `index`, so any pair can be regenerated on its own.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser over the combined value.
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic paired dataset; pairs are generated independently from
/// [`pair_seed`].
pub fn gen_dataset(spec: &SyntheticTaskSpec) -> Result<Vec<DomainPair>> {
    spec.validate()?;
    (0..spec.n)
        .into_par_iter()
        .map(|i| gen_pair(spec, pair_seed(spec.seed, i)))
        .collect()
}

/// One pair of the given task from its own seed.
pub fn gen_pair(spec: &SyntheticTaskSpec, seed: u64) -> Result<DomainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    match spec.kind {
        TaskKind::ContrastSwap => {
            let mut src = Field::zeros((c, h, w));
            for mut plane in src.outer_iter_mut() {
                plane.assign(&blobs(h, w, &mut rng));
            }
            let gamma = 1.6;
            let tgt = src.mapv(|s| 2.0 * ((1.0 - s) / 2.0).powf(gamma) - 1.0);
            DomainPair::new(src, tgt)
        }
        TaskKind::SpeckleToSmooth => {
            let scene = shapes_scene(h, w, &mut rng);
            let sharp = &scene + &(&scene - &box_blur(&scene));
            let speckle = Gamma::new(4.0, 0.25).expect("valid gamma parameters");
            let mut src = Field::zeros((c, h, w));
            let mut tgt = Field::zeros((c, h, w));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let intensity = ((sharp[[y, x]] + 1.0) / 2.0).clamp(0.0, 1.0);
                        let g: f64 = speckle.sample(&mut rng);
                        src[[ch, y, x]] = (2.0 * intensity * g - 1.0).clamp(-1.0, 1.0);
                        tgt[[ch, y, x]] = scene[[y, x]];
                    }
                }
            }
            DomainPair::new(src, tgt)
        }
        TaskKind::ShapeToMask => {
            let (texture, mask) = cracked_texture(h, w, &mut rng);
            let src = Field::from_shape_fn((c, h, w), |(_, y, x)| texture[[y, x]]);
            let tgt = Field::from_shape_fn((c, h, w), |(_, y, x)| 2.0 * mask[[y, x]] - 1.0);
            DomainPair::new(src, tgt)?.with_mask(mask)
        }
    }
}

fn blobs<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Array2<f64> {
    let size = h.min(w) as f64;
    let k = rng.random_range(4..=7);
    let params: Vec<(f64, f64, f64, f64)> = (0..k)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(0.08..0.25) * size,
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let v: f64 = params
            .iter()
            .map(|&(cy, cx, r, a)| {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                a * (-d2 / (2.0 * r * r)).exp()
            })
            .sum();
        (1.5 * v).tanh()
    })
}

fn shapes_scene<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Array2<f64> {
    let background = rng.random_range(-0.9..-0.5);
    let mut scene = Array2::from_elem((h, w), background);
    let size = h.min(w) as f64;
    for _ in 0..rng.random_range(2..=4) {
        let value = rng.random_range(-0.2..0.9);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let r = rng.random_range(0.1..0.3) * size;
        let round = rng.random_bool(0.5);
        let (ry, rx) = (r, rng.random_range(0.5..1.5) * r);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let inside = if round {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= ry && dx.abs() <= rx
                };
                if inside {
                    scene[[y, x]] = value;
                }
            }
        }
    }
    scene
}

fn box_blur(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut sum = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                sum += img[[yy, xx]];
            }
        }
        sum / 9.0
    })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let s = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + s * vx, a.1 + s * vy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Voronoi texture with brighter cell borders and dark polyline strokes.
fn cracked_texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> (Array2<f64>, Array2<f64>) {
    let size = h.min(w) as f64;
    let seeds: Vec<((f64, f64), f64)> = (0..rng.random_range(5..=9))
        .map(|_| {
            (
                (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)),
                rng.random_range(0.0..0.5),
            )
        })
        .collect();
    let grain = Normal::new(0.0, 0.05).expect("valid normal");
    let mut texture = Array2::from_shape_fn((h, w), |(y, x)| {
        let p = (x as f64, y as f64);
        let mut d: Vec<(f64, f64)> = seeds
            .iter()
            .map(|&(s, v)| (((p.0 - s.0).powi(2) + (p.1 - s.1).powi(2)).sqrt(), v))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let border = if d[1].0 - d[0].0 < 1.0 { 0.2 } else { 0.0 };
        d[0].1 + border
    });
    for v in texture.iter_mut() {
        *v += grain.sample(rng);
    }

    let mut mask = Array2::zeros((h, w));
    while mask.iter().all(|&m: &f64| m == 0.0) {
        for _ in 0..rng.random_range(1..=3) {
            let mut pts = vec![(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64))];
            let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
            for _ in 0..rng.random_range(2..=4) {
                angle += rng.random_range(-0.8..0.8);
                let step = rng.random_range(0.15..0.35) * size;
                let last = pts[pts.len() - 1];
                pts.push((last.0 + step * angle.cos(), last.1 + step * angle.sin()));
            }
            for y in 0..h {
                for x in 0..w {
                    let p = (x as f64, y as f64);
                    if pts.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= 1.0) {
                        mask[[y, x]] = 1.0;
                    }
                }
            }
        }
    }
    let crack = Normal::new(-0.6, 0.1).expect("valid normal");
    for ((y, x), &m) in mask.indexed_iter() {
        if m == 1.0 {
            texture[[y, x]] = crack.sample(rng);
        }
        texture[[y, x]] = texture[[y, x]].clamp(-1.0, 1.0);
    }
    (texture, mask)
}

/// Translate the source by `(shift, shift)` pixels with edge replication.
pub fn misalign(pair: &DomainPair, shift: usize) -> Result<DomainPair> {
    let [c, h, w] = pair.shape();
    if 4 * shift >= h.min(w) {
        return Err(Error::param(
            "shift",
            format!("{shift} must be below min(H, W) / 4 = {}", h.min(w) as f64 / 4.0),
        ));
    }
    let src = Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        pair.x_src[[ch, y.saturating_sub(shift), x.saturating_sub(shift)]]
    });
    Ok(DomainPair {
        x_src: src,
        x_tgt: pair.x_tgt.clone(),
        mask: pair.mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind,
            n: 6,
            height: 36,
            width: 36,
            channels: 1,
            seed: 11,
        }
    }

    fn correlation(a: &Field, b: &Field) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.sum() / n, b.sum() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn deterministic_per_seed() {
        for kind in [TaskKind::ContrastSwap, TaskKind::SpeckleToSmooth, TaskKind::ShapeToMask] {
            let a = gen_dataset(&spec(kind)).unwrap();
            let b = gen_dataset(&spec(kind)).unwrap();
            assert_eq!(a, b);
            let other = gen_dataset(&SyntheticTaskSpec { seed: 12, ..spec(kind) }).unwrap();
            assert_ne!(a, other);
            for p in &a {
                p.check_range(-1.0, 1.0).unwrap();
            }
        }
    }

    #[test]
    fn pairs_regenerate_from_their_seed() {
        let s = spec(TaskKind::SpeckleToSmooth);
        let data = gen_dataset(&s).unwrap();
        assert_eq!(gen_pair(&s, pair_seed(s.seed, 4)).unwrap(), data[4]);
    }

    #[test]
    fn mask_targets_are_binary() {
        for p in gen_dataset(&spec(TaskKind::ShapeToMask)).unwrap() {
            assert!(p.x_tgt.iter().all(|&v| v == -1.0 || v == 1.0));
            let mask = p.mask.as_ref().unwrap();
            assert!(mask.iter().any(|&m| m == 1.0));
            for ((y, x), &m) in mask.indexed_iter() {
                assert_eq!(p.x_tgt[[0, y, x]], 2.0 * m - 1.0);
            }
        }
    }

    #[test]
    fn contrast_swap_is_strongly_correlated() {
        let data = gen_dataset(&SyntheticTaskSpec { n: 40, ..spec(TaskKind::ContrastSwap) }).unwrap();
        for p in &data {
            assert!(correlation(&p.x_src, &p.x_tgt).abs() > 0.5);
        }
    }

    #[test]
    fn misalign_examples() {
        let p = gen_dataset(&spec(TaskKind::ShapeToMask)).unwrap().remove(0);
        assert_eq!(misalign(&p, 0).unwrap(), p);
        assert!(misalign(&p, 9).is_err());
        let once = misalign(&p, 4).unwrap();
        let twice = misalign(&misalign(&p, 2).unwrap(), 2).unwrap();
        for y in 4..36 {
            for x in 4..36 {
                assert_eq!(once.x_src[[0, y, x]], twice.x_src[[0, y, x]]);
            }
        }
        assert_eq!(once.x_src[[0, 10, 12]], p.x_src[[0, 6, 8]]);
        assert_eq!(once.x_tgt, p.x_tgt);
    }
}
