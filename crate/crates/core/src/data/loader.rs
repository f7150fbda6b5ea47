use std::path::Path;

use image::{ImageBuffer, Rgb};

use super::{resize_bilinear, LabeledExample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Decodes a PNG/JPEG file into a `3×H×W` tensor in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let rgb = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Data(format!("{} has no pixels", path.as_ref().display())));
    }
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * h * w + y as usize * w + x as usize] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Encodes a `C×H×W` tensor in `[0, 1]` as an RGB PNG (one channel is
/// replicated to grey).
pub fn write_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(Error::Data(format!("cannot encode image of shape {s:?}"))),
    };
    let d = image.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| {
            let v = d[ch * h * w + y as usize * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        if c == 1 {
            Rgb([at(0); 3])
        } else {
            Rgb([at(0), at(1), at(2)])
        }
    });
    buf.save(path.as_ref())?;
    Ok(())
}

/// Loads `root/<class_name>/<file>.png|jpg`, resizing every image to
/// `image_size`. Classes are the sorted subdirectory names; source ids are
/// `<class>/<file>`.
pub fn load_dir(root: impl AsRef<Path>, image_size: usize) -> Result<(Vec<LabeledExample>, Vec<String>)> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset directory {} not found", root.display())));
    }
    let mut class_names = Vec::new();
    let mut examples = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let class_id = class_names.len();
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("non-UTF-8 class directory {}", dir.display())))?
            .to_string();
        for file in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
            let fname = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let image = resize_bilinear(&read_image(&file)?, image_size, image_size)?;
            examples.push(LabeledExample {
                image,
                class_id,
                source_id: format!("{name}/{fname}"),
            });
        }
        class_names.push(name);
    }
    if class_names.len() < 2 {
        return Err(Error::Config(format!(
            "{} must contain at least two class directories",
            root.display()
        )));
    }
    Ok((examples, class_names))
}

/// Writes examples in the layout `load_dir` reads.
pub fn write_dir(examples: &[LabeledExample], class_names: &[String], root: impl AsRef<Path>) -> Result<()> {
    for name in class_names {
        std::fs::create_dir_all(root.as_ref().join(name))?;
    }
    for (i, e) in examples.iter().enumerate() {
        let class = class_names
            .get(e.class_id)
            .ok_or_else(|| Error::Data(format!("class {} out of range", e.class_id)))?;
        write_image(&e.image, root.as_ref().join(class).join(format!("{i:05}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (examples, m) = synth_dataset(3, 2, 16, 4).unwrap();
        write_dir(&examples, &m.class_names, dir.path()).unwrap();
        let (loaded, names) = load_dir(dir.path(), 16).unwrap();
        assert_eq!(names, m.class_names);
        assert_eq!(loaded.len(), 6);
        for (a, b) in loaded.iter().zip(&examples) {
            assert_eq!(a.class_id, b.class_id);
            // 8-bit quantization
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn missing_directory_is_a_config_error() {
        assert!(matches!(load_dir("/nonexistent/fedsim", 16), Err(Error::Config(_))));
    }
}
