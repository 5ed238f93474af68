//! Stochastic input perturbations for the two views of each sample.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed, Rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub variance: f64,
    pub clip: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            variance: 0.01,
            clip: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub rotation_deg_max: f64,
    /// Translation bound as a fraction of the image width.
    pub translate_frac_max: f64,
    /// Probability of each of the horizontal and vertical flips.
    pub flip_prob: f64,
    pub gaussian_noise: NoiseConfig,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            rotation_deg_max: 10.0,
            translate_frac_max: 0.02,
            flip_prob: 0.5,
            gaussian_noise: NoiseConfig::default(),
        }
    }
}

impl PerturbConfig {
    /// A configuration that leaves every input untouched.
    pub fn none() -> Self {
        Self {
            rotation_deg_max: 0.0,
            translate_frac_max: 0.0,
            flip_prob: 0.0,
            gaussian_noise: NoiseConfig {
                enabled: false,
                ..NoiseConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.gaussian_noise;
        let ok = self.rotation_deg_max >= 0.0
            && self.translate_frac_max >= 0.0
            && (0.0..=1.0).contains(&self.flip_prob)
            && n.variance >= 0.0
            && n.clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "perturbation magnitudes must be >= 0 and flip_prob in [0, 1]: {self:?}"
            )))
        }
    }

    /// Largest integer shift in pixels for an image of width `w`.
    pub fn max_shift(&self, w: usize) -> i64 {
        (self.translate_frac_max * w as f64).round() as i64
    }
}

/// Sampled perturbation parameters for one sample and one view.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbDraw {
    pub angle_deg: f64,
    pub dx: i64,
    pub dy: i64,
    pub hflip: bool,
    pub vflip: bool,
    pub noise: Option<Tensor>,
}

impl PerturbDraw {
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            dx: 0,
            dy: 0,
            hflip: false,
            vflip: false,
            noise: None,
        }
    }

    /// Samples a draw for one input of per-sample shape `shape`.
    /// Geometric parameters are only drawn for `[C, H, W]` inputs.
    pub fn sample(cfg: &PerturbConfig, shape: &[usize], rng: &mut Rng) -> Self {
        let mut d = Self::identity();
        if shape.len() == 3 {
            let r = cfg.rotation_deg_max;
            d.angle_deg = rng.random_range(-r..=r);
            let m = cfg.max_shift(shape[2]);
            d.dx = rng.random_range(-m..=m);
            d.dy = rng.random_range(-m..=m);
            d.hflip = rng.random::<f64>() < cfg.flip_prob;
            d.vflip = rng.random::<f64>() < cfg.flip_prob;
        }
        if cfg.gaussian_noise.enabled {
            d.noise = Some(noise_tensor(shape, &cfg.gaussian_noise, rng));
        }
        d
    }

    /// Applies the draw to one sample: rotate, translate, flip, then add noise.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = if x.rank() == 3 {
            let (h, w) = (x.shape()[1], x.shape()[2]);
            if h < 2 || w < 2 {
                return Err(Error::UnsupportedInput(format!(
                    "image transforms need H, W >= 2, got {:?}",
                    x.shape()
                )));
            }
            let r = rotate_nearest(x, self.angle_deg);
            let t = translate(&r, self.dx, self.dy);
            flip(&t, self.hflip, self.vflip)
        } else {
            x.clone()
        };
        if let Some(n) = &self.noise {
            out = out.zip_map(n, "noise", |a, b| a + b)?;
        }
        Ok(out)
    }
}

fn noise_tensor(shape: &[usize], cfg: &NoiseConfig, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    if cfg.variance == 0.0 {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, cfg.variance.sqrt()).expect("finite variance");
    let data = (0..n)
        .map(|_| normal.sample(rng).clamp(-cfg.clip, cfg.clip))
        .collect();
    Tensor::from_vec(shape, data)
}

/// `x + clip(n, -clip, clip)` with `n ~ N(0, variance)` drawn per element.
pub fn gaussian_noise(x: &Tensor, cfg: &PerturbConfig, rng: &mut Rng) -> Tensor {
    let noise = noise_tensor(x.shape(), &cfg.gaussian_noise, rng);
    x.zip_map(&noise, "gaussian_noise", |a, b| a + b)
        .expect("noise matches input shape")
}

/// Draws and applies a geometric transform to a `[C, H, W]` image.
pub fn random_transform(x: &Tensor, cfg: &PerturbConfig, rng: &mut Rng) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::UnsupportedInput(format!(
            "random_transform needs [C, H, W], got {:?}",
            x.shape()
        )));
    }
    let geometric = PerturbConfig {
        gaussian_noise: NoiseConfig {
            enabled: false,
            ..cfg.gaussian_noise.clone()
        },
        ..cfg.clone()
    };
    PerturbDraw::sample(&geometric, x.shape(), rng).apply(x)
}

/// Nearest-neighbour rotation about the image centre with zero fill.
pub fn rotate_nearest(x: &Tensor, angle_deg: f64) -> Tensor {
    if angle_deg == 0.0 {
        return x.clone();
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            // inverse map: rotate the output coordinate back by -angle
            let (ry, rx) = (y as f64 - cy, xx as f64 - cx);
            let sx = (cos * rx + sin * ry + cx).round();
            let sy = (-sin * rx + cos * ry + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            for ch in 0..c {
                out[(ch * h + y) * w + xx] = x.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Integer shift by `(dx, dy)` pixels with zero fill: `out[y][x] = in[y - dy][x - dx]`.
pub fn translate(x: &Tensor, dx: i64, dy: i64) -> Tensor {
    if dx == 0 && dy == 0 {
        return x.clone();
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for xx in 0..w {
                let sx = xx as i64 - dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                out[(ch * h + y) * w + xx] = x.data()[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn flip(x: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    if !horizontal && !vertical {
        return x.clone();
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for xx in 0..w {
                let sx = if horizontal { w - 1 - xx } else { xx };
                out[(ch * h + y) * w + xx] = x.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Which of the two consistency views a draw belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Student = 0,
    Teacher = 1,
}

/// Substream for one (sample, view) at a given training step.
pub fn sample_rng(seed: u64, step: u64, sample_id: u64, view: View) -> Rng {
    keyed(seed, Stream::Perturb, &[step, sample_id, view as u64])
}

/// Perturbs one view of a batch; every sample gets its own keyed draw.
pub fn perturb_view(
    x: &Tensor,
    ids: &[u64],
    cfg: &PerturbConfig,
    seed: u64,
    step: u64,
    view: View,
) -> Result<(Tensor, Vec<PerturbDraw>)> {
    if ids.len() != x.rows() {
        return Err(Error::Contract(format!(
            "{} sample ids for a batch of {}",
            ids.len(),
            x.rows()
        )));
    }
    let sample_shape = &x.shape()[1..];
    let mut data = Vec::with_capacity(x.len());
    let mut draws = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        let mut rng = sample_rng(seed, step, id, view);
        let draw = PerturbDraw::sample(cfg, sample_shape, &mut rng);
        let sample = Tensor::from_vec(sample_shape, x.row(i).to_vec());
        data.extend_from_slice(draw.apply(&sample)?.data());
        draws.push(draw);
    }
    Ok((Tensor::from_vec(x.shape(), data), draws))
}

/// Student view, teacher view and the draws that produced them.
pub type PerturbedPair = (Tensor, Tensor, Vec<(PerturbDraw, PerturbDraw)>);

/// Student and teacher views of a batch with independent per-sample draws.
pub fn perturb_pair(
    x: &Tensor,
    ids: &[u64],
    cfg: &PerturbConfig,
    seed: u64,
    step: u64,
) -> Result<PerturbedPair> {
    let (s, ds) = perturb_view(x, ids, cfg, seed, step, View::Student)?;
    let (t, dt) = perturb_view(x, ids, cfg, seed, step, View::Teacher)?;
    Ok((s, t, ds.into_iter().zip(dt).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn img(rows: &[&[f64]]) -> Tensor {
        let t = Tensor::from_rows(rows);
        t.reshape(&[1, t.shape()[0], t.shape()[1]]).unwrap()
    }

    #[test]
    fn noise_is_clipped() {
        let cfg = PerturbConfig {
            gaussian_noise: NoiseConfig {
                enabled: true,
                variance: 25.0,
                clip: 0.2,
            },
            ..PerturbConfig::default()
        };
        let x = Tensor::zeros(&[1000]);
        let y = gaussian_noise(&x, &cfg, &mut Rng::seed_from_u64(1));
        assert!(y.data().iter().all(|v| v.abs() <= 0.2));
        // at sd 5 most samples saturate
        assert!(y.data().iter().filter(|v| v.abs() == 0.2).count() > 900);
    }

    #[test]
    fn zero_variance_noise_is_identity() {
        let cfg = PerturbConfig {
            gaussian_noise: NoiseConfig {
                enabled: true,
                variance: 0.0,
                clip: 0.2,
            },
            ..PerturbConfig::default()
        };
        let x = Tensor::from_vec(&[3], vec![0.1, -4.0, 2.5]);
        assert_eq!(gaussian_noise(&x, &cfg, &mut Rng::seed_from_u64(1)), x);
    }

    #[test]
    fn identity_draw_is_identity() {
        let x = img(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(PerturbDraw::identity().apply(&x).unwrap(), x);
    }

    #[test]
    fn horizontal_flip_and_translation() {
        let x = img(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(flip(&x, true, false).data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(translate(&x, 1, 0).data(), &[0.0, 1.0, 0.0, 3.0]);
        assert_eq!(flip(&x, false, true).data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn right_angle_rotation_permutes_pixels() {
        let x = img(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let r = rotate_nearest(&x, 90.0);
        let mut sorted = r.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![1.0, 2.0, 3.0, 4.0]);
        assert_ne!(r, x);
    }

    #[test]
    fn tiny_images_are_rejected() {
        let x = Tensor::zeros(&[1, 1, 5]);
        let err = random_transform(&x, &PerturbConfig::default(), &mut Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::UnsupportedInput(_))));
    }

    #[test]
    fn zero_image_stays_zero() {
        let x = Tensor::zeros(&[2, 6, 6]);
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..50 {
            let y = random_transform(&x, &PerturbConfig::default(), &mut rng).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn draws_respect_bounds() {
        let cfg = PerturbConfig {
            translate_frac_max: 0.1,
            gaussian_noise: NoiseConfig {
                enabled: true,
                ..NoiseConfig::default()
            },
            ..PerturbConfig::default()
        };
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let d = PerturbDraw::sample(&cfg, &[1, 20, 20], &mut rng);
            assert!(d.angle_deg.abs() <= 10.0);
            assert!(d.dx.abs() <= 2 && d.dy.abs() <= 2);
            assert!(d.noise.unwrap().data().iter().all(|v| v.abs() <= 0.2));
        }
    }

    #[test]
    fn zero_magnitudes_leave_both_views_unchanged() {
        let x = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(f64::from).collect());
        let (s, t, _) = perturb_pair(&x, &[0, 1], &PerturbConfig::none(), 5, 0).unwrap();
        assert_eq!(s, x);
        assert_eq!(t, x);
    }

    #[test]
    fn views_use_disjoint_substreams() {
        let x = Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(f64::from).collect());
        let cfg = PerturbConfig::default();
        let (s1, _, _) = perturb_pair(&x, &[3, 4], &cfg, 9, 1).unwrap();
        let (s_only, _) = perturb_view(&x, &[3, 4], &cfg, 9, 1, View::Student).unwrap();
        assert_eq!(s1, s_only);
        let (t_other_step, _) = perturb_view(&x, &[3, 4], &cfg, 9, 2, View::Teacher).unwrap();
        let (t1, _) = perturb_view(&x, &[3, 4], &cfg, 9, 1, View::Teacher).unwrap();
        assert_ne!(t_other_step, t1);
    }

    #[test]
    fn keyed_draws_commute_with_batch_permutation() {
        let x = Tensor::from_vec(&[4, 1, 5, 5], (0..100).map(|v| v as f64 * 0.1).collect());
        let ids = [10u64, 11, 12, 13];
        let perm = [2usize, 0, 3, 1];
        let cfg = PerturbConfig::default();
        let (a, _) = perturb_view(&x, &ids, &cfg, 1, 7, View::Student).unwrap();
        let permuted = x.select_rows(&perm).unwrap();
        let pids: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();
        let (b, _) = perturb_view(&permuted, &pids, &cfg, 1, 7, View::Student).unwrap();
        assert_eq!(a.select_rows(&perm).unwrap(), b);
    }
}
