use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{channel_layout, LabeledExample, Normalization};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Resize → random horizontal flip → random rotation → normalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Output side length; images are resized to `resize × resize`.
    pub resize: usize,
    pub flip_prob: f64,
    /// Rotation angle is drawn uniformly from `[-deg, deg]`.
    pub rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize: 224,
            flip_prob: 0.5,
            rotation_deg: 15.0,
        }
    }
}

impl AugmentConfig {
    /// Deterministic preprocessing: resize and normalize only.
    pub fn plain(resize: usize) -> Self {
        Self {
            resize,
            flip_prob: 0.0,
            rotation_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize == 0 {
            return Err(Error::Config("augment.resize must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("augment.flip_prob must lie in [0, 1]".into()));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg <= 180.0) {
            return Err(Error::Config("augment.rotation_deg must lie in [0, 180]".into()));
        }
        Ok(())
    }

    /// Applies the pipeline to one example; the label is carried through.
    /// With `flip_prob == 0` and `rotation_deg == 0` the RNG is not touched.
    pub fn apply(&self, example: &LabeledExample, norm: &Normalization, rng: &mut Rng) -> Result<LabeledExample> {
        self.validate()?;
        let mut img = resize_bilinear(&example.image, self.resize, self.resize)?;
        if self.flip_prob > 0.0 && rng.random_bool(self.flip_prob) {
            img = flip_horizontal(&img)?;
        }
        if self.rotation_deg > 0.0 {
            let angle = rng.random_range(-self.rotation_deg..=self.rotation_deg);
            img = rotate_nearest(&img, angle)?;
        }
        Ok(LabeledExample {
            image: norm.apply(&img)?,
            class_id: example.class_id,
            source_id: example.source_id.clone(),
        })
    }
}

/// Bilinear resampling with half-pixel centres; same-size input is
/// returned unchanged.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, _) = channel_layout(img)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if out_h == 0 || out_w == 0 {
        return Err(Error::Data("resize target must be non-empty".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::new(&[c, out_h, out_w], out)?)
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    channel_layout(img)?;
    let w = img.shape()[2];
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Rotates counter-clockwise by `degrees` about the image centre using
/// nearest-neighbour sampling; pixels mapped from outside become 0.
pub fn rotate_nearest(img: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, _) = channel_layout(img)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut map = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse rotation in image coordinates (y grows downward)
            let sx = (cos * dx - sin * dy + cx).round();
            let sy = (sin * dx + cos * dy + cy).round();
            let inside = sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64;
            map.push(inside.then(|| sy as usize * w + sx as usize));
        }
    }
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        out.extend(map.iter().map(|m| m.map_or(0.0, |i| plane[i])));
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}
