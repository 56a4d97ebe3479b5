use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;
use crate::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Nearest,
    /// Corner-aligned: output corners sample input corners exactly.
    Bilinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation drawn from `±rotation_deg` degrees.
    pub rotation_deg: f64,
    /// Shifts drawn from `±fraction` of the image width/height.
    pub width_shift: f64,
    pub height_shift: f64,
    /// Shear factor drawn from `±shear`.
    pub shear: f64,
    /// Per-axis zoom drawn from `1 ± zoom`.
    pub zoom: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Per-channel additive offset drawn from `±channel_shift`.
    pub channel_shift: f64,
    /// Random crops per test image; 0 means one pass over the whole image.
    pub crops: usize,
    pub pre_crop: usize,
    pub crop: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 15.0,
            width_shift: 0.1,
            height_shift: 0.1,
            shear: 0.1,
            zoom: 0.1,
            horizontal_flip: true,
            vertical_flip: false,
            channel_shift: 0.05,
            crops: 3,
            pre_crop: 540,
            crop: 501,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No geometric or photometric change.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
            shear: 0.0,
            zoom: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            channel_shift: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation", self.rotation_deg),
            ("width shift", self.width_shift),
            ("height shift", self.height_shift),
            ("shear", self.shear),
            ("zoom", self.zoom),
            ("channel shift", self.channel_shift),
        ];
        let mut problems: Vec<String> = ranges
            .iter()
            .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(n, v)| format!("{n} range {v} must be non-negative"))
            .collect();
        if self.zoom >= 1.0 {
            problems.push(format!("zoom range {} must be below 1", self.zoom));
        }
        if self.crop == 0 || self.crop > self.pre_crop {
            problems.push(format!("crop {} must be in 1..={}", self.crop, self.pre_crop));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// `a + t·(b − a)`, exact when `a == b`.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn check_image(img: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if img.rank() != 3 {
        return Err(Error::dim(op, img.shape(), &[0, 0, 0]));
    }
    Ok((img.shape()[0], img.shape()[1], img.shape()[2]))
}

fn resize_one(img: &[f64], (h, w, c): (usize, usize, usize), (th, tw): (usize, usize), method: Resample) -> Vec<f64> {
    let mut out = vec![0.0; th * tw * c];
    let px = |y: usize, x: usize, ch: usize| img[(y * w + x) * c + ch];
    let coord = |i: usize, src: usize, dst: usize| -> f64 {
        if dst == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        }
    };
    for y in 0..th {
        for x in 0..tw {
            for ch in 0..c {
                out[(y * tw + x) * c + ch] = match method {
                    Resample::Nearest => px(y * h / th, x * w / tw, ch),
                    Resample::Bilinear => {
                        let (sy, sx) = (coord(y, h, th), coord(x, w, tw));
                        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                        let top = lerp(px(y0, x0, ch), px(y0, x1, ch), fx);
                        let bottom = lerp(px(y1, x0, ch), px(y1, x1, ch), fx);
                        lerp(top, bottom, fy)
                    }
                };
            }
        }
    }
    out
}

/// Enlarges `[N, H, W, C]` images to `[N, H', W', C]`.
pub fn upsample(images: &Tensor, target: (usize, usize), method: Resample) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::dim("upsample", images.shape(), &[0, target.0, target.1, 0]));
    }
    let [n, h, w, c] = [images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]];
    if target.0 < h || target.1 < w {
        return Err(Error::Contract(format!(
            "upsample cannot shrink {h}×{w} to {}×{}",
            target.0, target.1
        )));
    }
    if target == (h, w) {
        return Ok(images.clone());
    }
    let per = h * w * c;
    let mut data = Vec::with_capacity(n * target.0 * target.1 * c);
    for i in 0..n {
        data.extend(resize_one(&images.data()[i * per..(i + 1) * per], (h, w, c), target, method));
    }
    Tensor::new([n, target.0, target.1, c], data)
}

/// Mirrors a continuous coordinate into `[0, n-1]`.
fn reflect(x: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let r = x.rem_euclid(period);
    if r > (n - 1) as f64 {
        period - r
    } else {
        r
    }
}

fn sample_bilinear(img: &[f64], (h, w, c): (usize, usize, usize), y: f64, x: f64, ch: usize) -> f64 {
    let (y, x) = (reflect(y, h), reflect(x, w));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let px = |yy: usize, xx: usize| img[(yy * w + xx) * c + ch];
    lerp(lerp(px(y0, x0), px(y0, x1), fx), lerp(px(y1, x0), px(y1, x1), fx), fy)
}

fn symmetric(rng: &mut SeededRng, range: f64) -> f64 {
    if range > 0.0 {
        rng.random_range(-range..=range)
    } else {
        0.0
    }
}

/// One concrete draw of the augmentation transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    pub rotation_rad: f64,
    /// `(dy, dx)` in pixels.
    pub shift: (f64, f64),
    pub shear: f64,
    /// `(zy, zx)` scale factors.
    pub zoom: (f64, f64),
    pub flip_h: bool,
    pub flip_v: bool,
    pub channel_offsets: Vec<f64>,
}

impl Warp {
    pub fn identity(channels: usize) -> Self {
        Warp {
            rotation_rad: 0.0,
            shift: (0.0, 0.0),
            shear: 0.0,
            zoom: (1.0, 1.0),
            flip_h: false,
            flip_v: false,
            channel_offsets: vec![0.0; channels],
        }
    }

    pub fn sample(cfg: &AugmentConfig, (h, w, c): (usize, usize, usize), rng: &mut SeededRng) -> Self {
        let rotation_rad = symmetric(rng, cfg.rotation_deg).to_radians();
        let dy = symmetric(rng, cfg.height_shift) * h as f64;
        let dx = symmetric(rng, cfg.width_shift) * w as f64;
        let shear = symmetric(rng, cfg.shear);
        let zy = 1.0 + symmetric(rng, cfg.zoom);
        let zx = 1.0 + symmetric(rng, cfg.zoom);
        let flip_h = cfg.horizontal_flip && rng.random_bool(0.5);
        let flip_v = cfg.vertical_flip && rng.random_bool(0.5);
        Warp {
            rotation_rad,
            shift: (dy, dx),
            shear,
            zoom: (zy, zx),
            flip_h,
            flip_v,
            channel_offsets: (0..c).map(|_| symmetric(rng, cfg.channel_shift)).collect(),
        }
    }

    fn is_affine_identity(&self) -> bool {
        self.rotation_rad == 0.0 && self.shift == (0.0, 0.0) && self.shear == 0.0 && self.zoom == (1.0, 1.0)
    }

    /// Applies the warp to one `[H, W, C]` image; the result stays in `[0, 1]`.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w, c) = check_image(image, "warp")?;
        if self.channel_offsets.len() != c {
            return Err(Error::dim("warp", &[c], &[self.channel_offsets.len()]));
        }
        let src = image.data();
        let mut out = if self.is_affine_identity() {
            src.to_vec()
        } else {
            // Output pixel p samples input R·S·Z·(p − centre) + centre + shift.
            let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
            let (sin, cos) = self.rotation_rad.sin_cos();
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = ((y as f64 - cy) * self.zoom.0, (x as f64 - cx) * self.zoom.1);
                    let dx = dx + self.shear * dy;
                    let iy = sin * dx + cos * dy + cy + self.shift.0;
                    let ix = cos * dx - sin * dy + cx + self.shift.1;
                    for ch in 0..c {
                        out[(y * w + x) * c + ch] = sample_bilinear(src, (h, w, c), iy, ix, ch);
                    }
                }
            }
            out
        };
        if self.flip_h || self.flip_v {
            let copy = out.clone();
            for y in 0..h {
                for x in 0..w {
                    let sy = if self.flip_v { h - 1 - y } else { y };
                    let sx = if self.flip_h { w - 1 - x } else { x };
                    let (d, s) = ((y * w + x) * c, (sy * w + sx) * c);
                    out[d..d + c].copy_from_slice(&copy[s..s + c]);
                }
            }
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v = (*v + self.channel_offsets[i % c]).clamp(0.0, 1.0);
        }
        Tensor::new([h, w, c], out)
    }
}

/// Random affine warp (rotation, shift, shear, zoom) with reflect padding,
/// optional flips and a clipped per-channel offset, for one `[H, W, C]` image.
pub fn geometric_augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Tensor> {
    let dims = check_image(image, "geometric_augment")?;
    Warp::sample(cfg, dims, rng).apply(image)
}

/// Average of the model's probabilities over random crops of one upsampled
/// `[H, W, C]` image. With `crops = 0` the whole image is resized to the crop
/// resolution and predicted once.
pub fn random_crop_tta<C: Classifier>(model: &C, image: &Tensor, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Tensor> {
    let (h, w, c) = check_image(image, "random_crop_tta")?;
    if cfg.crop == 0 || cfg.crop > cfg.pre_crop {
        return Err(Error::Contract(format!(
            "crop {} larger than the {}-pixel image it is cut from",
            cfg.crop, cfg.pre_crop
        )));
    }
    let batch = image.reshape([1, h, w, c])?;
    if cfg.crops == 0 {
        let resized = upsample(&batch, (cfg.crop, cfg.crop), Resample::Bilinear)?;
        return model.predict(&resized, 1)?.reshape([model.classes()]);
    }
    let big = upsample(&batch, (cfg.pre_crop, cfg.pre_crop), Resample::Bilinear)?;
    let (p, s) = (cfg.pre_crop, cfg.crop);
    let mut crops = Vec::with_capacity(cfg.crops * s * s * c);
    for _ in 0..cfg.crops {
        let oy = rng.random_range(0..=p - s);
        let ox = rng.random_range(0..=p - s);
        for y in 0..s {
            let row = ((oy + y) * p + ox) * c;
            crops.extend_from_slice(&big.data()[row..row + s * c]);
        }
    }
    let preds = model.predict(&Tensor::new([cfg.crops, s, s, c], crops)?, cfg.crops)?;
    // Running mean: identical rows average to themselves exactly.
    let mut mean = preds.row(0).to_vec();
    for k in 1..cfg.crops {
        for (m, v) in mean.iter_mut().zip(preds.row(k)) {
            *m += (v - *m) / (k + 1) as f64;
        }
    }
    Tensor::new([model.classes()], mean)
}

/// [`random_crop_tta`] over every image of `[N, H, W, C]`.
pub fn tta_predict<C: Classifier>(model: &C, images: &Tensor, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::dim("tta_predict", images.shape(), &[0, 0, 0, 0]));
    }
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n * model.classes());
    for i in 0..n {
        let img = images.gather_rows(&[i]).reshape(images.shape()[1..].to_vec())?;
        out.extend_from_slice(random_crop_tta(model, &img, cfg, rng)?.data());
    }
    Tensor::new([n, model.classes()], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> SeededRng {
        SeededRng::seed_from_u64(4)
    }

    #[test]
    fn nearest_duplicates_blocks() {
        let img = Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample(&img, (4, 4), Resample::Nearest).unwrap();
        #[rustfmt::skip]
        let expected = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(up.data(), &expected);
    }

    #[test]
    fn upsample_identity_constant_and_shrink() {
        let img = Tensor::uniform([2, 3, 3, 2], 1.0, &mut rng());
        assert_eq!(upsample(&img, (3, 3), Resample::Bilinear).unwrap(), img);
        let flat = Tensor::full([1, 3, 5, 1], 0.3);
        let up = upsample(&flat, (11, 17), Resample::Bilinear).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));
        assert!(matches!(upsample(&img, (2, 3), Resample::Nearest), Err(Error::Contract(_))));
    }

    #[test]
    fn bilinear_hits_corners_and_midpoints() {
        let img = Tensor::new([1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
        let up = upsample(&img, (1, 3), Resample::Bilinear).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn degenerate_config_is_identity() {
        let img = Tensor::uniform([5, 4, 3], 1.0, &mut rng()).map(f64::abs);
        let out = geometric_augment(&img, &AugmentConfig::identity(), &mut rng()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn horizontal_flip() {
        let img = Tensor::new([1, 2, 1], vec![0.1, 0.2]).unwrap();
        let cfg = AugmentConfig {
            horizontal_flip: true,
            ..AugmentConfig::identity()
        };
        let mut r = rng();
        let outs: Vec<_> = (0..20).map(|_| geometric_augment(&img, &cfg, &mut r).unwrap()).collect();
        assert!(outs.iter().any(|o| o.data() == [0.2, 0.1]));
        assert!(outs.iter().all(|o| o.data() == [0.2, 0.1] || o.data() == [0.1, 0.2]));
    }

    #[test]
    fn full_turn_is_identity() {
        let img = Tensor::uniform([6, 7, 2], 1.0, &mut rng()).map(f64::abs);
        let warp = Warp {
            rotation_rad: 360f64.to_radians(),
            ..Warp::identity(2)
        };
        assert!(warp.apply(&img).unwrap().max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        let img = Tensor::new([3, 3, 1], vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let warp = Warp {
            rotation_rad: 90f64.to_radians(),
            ..Warp::identity(1)
        };
        let out = warp.apply(&img).unwrap();
        let hot: Vec<usize> = (0..9).filter(|&i| out.data()[i] > 0.5).collect();
        assert_eq!(hot.len(), 1);
        assert_ne!(hot[0], 1);
    }

    #[test]
    fn augmented_values_stay_in_unit_range() {
        let img = Tensor::uniform([8, 8, 3], 1.0, &mut rng()).map(f64::abs);
        let cfg = AugmentConfig {
            channel_shift: 0.5,
            ..AugmentConfig::default()
        };
        let mut r = rng();
        for _ in 0..20 {
            let out = geometric_augment(&img, &cfg, &mut r).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn reflect_mirrors_into_range() {
        assert_eq!(reflect(-1.0, 4), 1.0);
        assert_eq!(reflect(4.0, 4), 2.0);
        assert_eq!(reflect(6.0, 4), 0.0);
        assert_eq!(reflect(2.5, 4), 2.5);
    }

    #[test]
    fn default_magnitudes() {
        let d = AugmentConfig::default();
        assert_eq!((d.crops, d.pre_crop, d.crop), (3, 540, 501));
        assert!(d.validate().is_ok());
        let bad = AugmentConfig {
            crop: 600,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
