//! Grad-CAM++ saliency over the fine patch grid.
//!
//! Channel weights use the closed form with element powers of the first
//! gradient: `a = g² / (2g² + (Σ_spatial A)·g³ + eps)`, zero where `g = 0`;
//! `w_k = Σ_spatial relu(g)·a`; map = `relu(Σ_k w_k A_k)`, max-normalized.
//!
//! The closed form assumes non-negative feature maps. Transformer token
//! activations are signed, so the map is built from their positive part
//! `A⁺ = max(A, 0)` with the matching gradient (`g` where `A > 0`, else 0).

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::model::{Ctx, MsDeit, Trainable};
use crate::tensor::{Tape, Tensor};

const EPS: f64 = 1e-7;
/// Weight of the colormap when blended over the input image.
const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `g×g`, entries in `[0, 1]`.
    pub grid: Tensor,
    pub target_class: usize,
    pub layer: String,
    /// `H×W` nearest-neighbour upsampling of `grid`.
    pub overlay: Tensor,
    /// Set when every gradient at the layer was zero; the map is then all
    /// zeros.
    pub zero_gradient: bool,
}

impl SaliencyMap {
    /// Row-major position of the largest grid entry (first on ties).
    pub fn argmax_cell(&self) -> (usize, usize) {
        let g = self.grid.shape()[1];
        let d = self.grid.data();
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[best] {
                best = i;
            }
        }
        (best / g, best % g)
    }
}

/// Name of fine-branch tap `layer`: 0 is the local-window attention output,
/// `i > 0` the output of encoder block `i - 1`.
pub fn layer_name(layer: usize) -> String {
    if layer == 0 {
        "small.lwa".into()
    } else {
        format!("small.block{}", layer - 1)
    }
}

/// Index of the last fine-branch encoder block output.
pub fn default_layer(model: &MsDeit) -> usize {
    model.config().depth
}

/// Grad-CAM++ for one normalized `C×H×W` image.
pub fn gradcam_pp(model: &MsDeit, image: &Tensor, target_class: usize, layer: usize) -> Result<SaliencyMap> {
    let cfg = model.config();
    if target_class >= cfg.num_classes {
        return Err(Error::Argument(format!(
            "target class {target_class} out of range for {} classes",
            cfg.num_classes
        )));
    }
    if layer > cfg.depth {
        return Err(Error::Argument(format!(
            "layer {layer} out of range; the fine branch has taps 0..={}",
            cfg.depth
        )));
    }
    model.check_image(image)?;

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::Adapters);
    // a leaf input makes every activation gradient-carrying
    let img = tape.leaf(image.clone());
    let mut ctx = Ctx::eval(&mut tape, bound);
    let logits = model.forward_image(&mut ctx, img)?.logits;
    let tap = ctx.small_taps[layer];
    let mut onehot = Tensor::zeros(&[1, cfg.num_classes]);
    onehot.data_mut()[target_class] = 1.0;
    let picked = tape.mul_const(logits, &onehot)?;
    let score = tape.sum(picked);
    tape.backward(score)?;

    let g = cfg.grid_small();
    let e = cfg.embed_dim;
    let raw = &tape.value(tap).data()[2 * e..];
    let grad: Vec<f64> = match tape.grad(tap) {
        Some(t) => t.data()[2 * e..]
            .iter()
            .zip(raw)
            .map(|(&gv, &a)| if a > 0.0 { gv } else { 0.0 })
            .collect(),
        None => vec![0.0; g * g * e],
    };
    let act: Vec<f64> = raw.iter().map(|&a| a.max(0.0)).collect();
    let zero_gradient = grad.iter().all(|&v| v == 0.0);

    let cam = cam_from(&act, &grad, g * g, e);
    let grid = Tensor::new(&[g, g], cam)?;
    let overlay = upsample_nearest(&grid, cfg.image_size, cfg.image_size)?;
    Ok(SaliencyMap {
        grid,
        target_class,
        layer: layer_name(layer),
        overlay,
        zero_gradient,
    })
}

/// Grad-CAM++ map from row-major `cells×channels` activations and gradients.
pub fn cam_from(act: &[f64], grad: &[f64], cells: usize, channels: usize) -> Vec<f64> {
    let mut weights = vec![0.0; channels];
    for (k, w) in weights.iter_mut().enumerate() {
        let sum_a: f64 = (0..cells).map(|i| act[i * channels + k]).sum();
        for i in 0..cells {
            let gv = grad[i * channels + k];
            if gv == 0.0 {
                continue;
            }
            let g2 = gv * gv;
            let g3 = g2 * gv;
            let a = g2 / (2.0 * g2 + sum_a * g3 + EPS);
            *w += gv.max(0.0) * a;
        }
    }
    let mut cam: Vec<f64> = (0..cells)
        .map(|i| {
            let s: f64 = (0..channels).map(|k| weights[k] * act[i * channels + k]).sum();
            s.max(0.0)
        })
        .collect();
    let max = cam.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 && max.is_finite() {
        for v in &mut cam {
            *v /= max;
        }
    } else {
        cam.iter_mut().for_each(|v| *v = 0.0);
    }
    cam
}

/// Nearest-neighbour upsampling of a `g×g` grid to `h×w`.
pub fn upsample_nearest(grid: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (gh, gw) = grid.dims2()?;
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        grid.at2(y * gh / h, x * gw / w)
    }))
}

/// Blue (0) to red (1).
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

/// Writes the input image with the colormapped saliency blended on top as
/// an `H×W` RGB PNG. `image` holds unnormalized values in `[0, 1]`.
pub fn export_overlay(map: &SaliencyMap, image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(Error::Data(format!("cannot overlay an image of shape {s:?}"))),
    };
    if map.overlay.shape() != [h, w] {
        return Err(Error::Contract(format!(
            "saliency overlay {:?} does not match image {h}×{w}",
            map.overlay.shape()
        )));
    }
    let d = image.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let heat = colormap(map.overlay.at2(y, x));
        let px = |ch: usize| {
            let src = d[(if c == 1 { 0 } else { ch }) * h * w + y * w + x].clamp(0.0, 1.0);
            let v = (1.0 - OVERLAY_ALPHA) * src + OVERLAY_ALPHA * heat[ch];
            (v * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}
