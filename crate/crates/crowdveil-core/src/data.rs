//! Synthetic crowd scenes and the on-disk dataset layout.
//!
//! Scenes are pure functions of their arguments: a smooth low-frequency
//! background with dark elliptical "head" blobs at annotated points, each
//! blob jittered in size/intensity. Pixel values are quantized to the 8-bit
//! grid (`k/255`) at generation time so PNG round-trips are bit-exact.
//!
//! On disk, a split lives at `<root>/<split>/images/<id>.png` (8-bit RGB)
//! plus `<root>/<split>/annotations.json` mapping scene id → `[[x, y], ...]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Ground-truth head locations. `(x, y)` in pixel coordinates, x = column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointAnnotation {
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotation {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Every coordinate must lie inside `[0, w-1] × [0, h-1]`.
    pub fn validate_bounds(&self, height: usize, width: usize) -> Result<()> {
        for &(x, y) in &self.points {
            if !(x.is_finite() && y.is_finite())
                || x < 0.0
                || y < 0.0
                || x > (width - 1) as f64
                || y > (height - 1) as f64
            {
                return Err(Error::Data(format!(
                    "point ({x}, {y}) outside {width}x{height} image bounds"
                )));
            }
        }
        Ok(())
    }
}

/// One image with its annotation. Image layout is `[H, W, 3]`, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub image: Array3<f64>,
    pub annotation: PointAnnotation,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// An ordered list of scenes belonging to one split. Ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 16 || width < 16 {
        return Err(Error::Config(format!(
            "image dimensions must be at least 16x16, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Generate one synthetic scene. Deterministic in all arguments; the returned
/// image is quantized to the 8-bit grid so saving and reloading is lossless.
pub fn generate_scene(
    num_points: usize,
    height: usize,
    width: usize,
    blob_sigma: f64,
    seed: u64,
) -> Result<Scene> {
    check_dims(height, width)?;
    if !(blob_sigma > 0.0) {
        return Err(Error::Config(format!("blob_sigma must be positive, got {blob_sigma}")));
    }
    let mut rng = derive_rng(seed, &format!("scene/{num_points}/{height}x{width}/{blob_sigma}"));

    // Low-frequency background: a mid-gray base plus a few smooth cosine
    // gratings, with a gentle per-channel tint. Smoothness keeps Grad-CAM
    // attention on the heads rather than on texture.
    let mut image = Array3::<f64>::zeros((height, width, 3));
    let n_waves = 4;
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            let fx = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / width as f64;
            let fy = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / height as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.03..0.08);
            (fx, fy, phase, amp)
        })
        .collect();
    let tint: [f64; 3] = [
        rng.gen_range(-0.03..0.03),
        rng.gen_range(-0.03..0.03),
        rng.gen_range(-0.03..0.03),
    ];
    for i in 0..height {
        for j in 0..width {
            let mut base = 0.68;
            for &(fx, fy, phase, amp) in &waves {
                base += amp * (fx * j as f64 + fy * i as f64 + phase).cos();
            }
            for c in 0..3 {
                image[[i, j, c]] = (base + tint[c]).clamp(0.35, 0.95);
            }
        }
    }

    // Heads: dark elliptical Gaussian blobs with jittered size and depth.
    let margin = 2.0;
    let points: Vec<(f64, f64)> = (0..num_points)
        .map(|_| {
            let x = rng.gen_range(margin..(width as f64 - 1.0 - margin));
            let y = rng.gen_range(margin..(height as f64 - 1.0 - margin));
            (x, y)
        })
        .collect();
    for &(px, py) in &points {
        let sx = blob_sigma * rng.gen_range(0.75..1.3);
        let sy = blob_sigma * rng.gen_range(0.75..1.3);
        let depth = rng.gen_range(0.45..0.8);
        let channel_jitter: [f64; 3] = [
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ];
        let reach = (4.0 * sx.max(sy)).ceil() as isize;
        let ci = py.round() as isize;
        let cj = px.round() as isize;
        for i in (ci - reach).max(0)..=(ci + reach).min(height as isize - 1) {
            for j in (cj - reach).max(0)..=(cj + reach).min(width as isize - 1) {
                let dx = (j as f64 - px) / sx;
                let dy = (i as f64 - py) / sy;
                let attenuation = (-0.5 * (dx * dx + dy * dy)).exp();
                for c in 0..3 {
                    let d = (depth + channel_jitter[c]).clamp(0.3, 0.9);
                    let v = &mut image[[i as usize, j as usize, c]];
                    *v *= 1.0 - d * attenuation;
                }
            }
        }
    }

    // Quantize to the 8-bit grid so disk round-trips are identity.
    image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);

    Ok(Scene {
        id: format!("scene_{seed:08}"),
        image,
        annotation: PointAnnotation { points },
    })
}

/// Generate a whole split; scene `i` uses seed `base_seed + i` and a
/// point count sampled uniformly from `count_range` (inclusive).
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    n_scenes: usize,
    count_min: usize,
    count_max: usize,
    height: usize,
    width: usize,
    blob_sigma: f64,
    split: Split,
    base_seed: u64,
) -> Result<Dataset> {
    if count_max < count_min {
        return Err(Error::Config(format!(
            "count range inverted: {count_min}..{count_max}"
        )));
    }
    let mut scenes = Vec::with_capacity(n_scenes);
    let mut count_rng = derive_rng(base_seed, &format!("counts/{split}"));
    for i in 0..n_scenes {
        let n = count_rng.gen_range(count_min..=count_max);
        let scene_seed = base_seed
            .wrapping_mul(1_000_003)
            .wrapping_add(match split {
                Split::Train => 0,
                Split::Test => 500_000,
            })
            .wrapping_add(i as u64);
        let mut scene = generate_scene(n, height, width, blob_sigma, scene_seed)?;
        scene.id = format!("{split}_{i:04}");
        scenes.push(scene);
    }
    Ok(Dataset { split, scenes })
}

/// Render the ground-truth density map: one Gaussian per point, each
/// renormalized over its truncated in-image support so the map total equals
/// the point count exactly.
pub fn render_density(
    annotation: &PointAnnotation,
    height: usize,
    width: usize,
    kernel_sigma: f64,
) -> Result<Array2<f64>> {
    if !(kernel_sigma > 0.0) {
        return Err(Error::Config(format!(
            "kernel_sigma must be positive, got {kernel_sigma}"
        )));
    }
    annotation.validate_bounds(height, width)?;
    let mut d = Array2::<f64>::zeros((height, width));
    let reach = (4.0 * kernel_sigma).ceil() as isize;
    for &(px, py) in &annotation.points {
        let ci = py.round() as isize;
        let cj = px.round() as isize;
        let lo_i = (ci - reach).max(0);
        let hi_i = (ci + reach).min(height as isize - 1);
        let lo_j = (cj - reach).max(0);
        let hi_j = (cj + reach).min(width as isize - 1);
        // Normalize by the kernel's in-image truncated mass so every point
        // contributes exactly 1 to the map total, even at borders.
        let mut mass = 0.0;
        for i in lo_i..=hi_i {
            for j in lo_j..=hi_j {
                let dx = j as f64 - px;
                let dy = i as f64 - py;
                mass += (-(dx * dx + dy * dy) / (2.0 * kernel_sigma * kernel_sigma)).exp();
            }
        }
        let scale = 1.0 / mass;
        for i in lo_i..=hi_i {
            for j in lo_j..=hi_j {
                let dx = j as f64 - px;
                let dy = i as f64 - py;
                d[[i as usize, j as usize]] +=
                    scale * (-(dx * dx + dy * dy) / (2.0 * kernel_sigma * kernel_sigma)).exp();
            }
        }
    }
    Ok(d)
}

/// Sum-pool a map by an integer `factor`; trailing edges form truncated
/// cells. Conserves the total, so pooled density targets keep their count.
pub fn sum_pool(map: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    assert!(factor >= 1, "sum_pool: factor must be at least 1");
    let mut out = Array2::<f64>::zeros((h.div_ceil(factor), w.div_ceil(factor)));
    for i in 0..h {
        for j in 0..w {
            out[[i / factor, j / factor]] += map[[i, j]];
        }
    }
    out
}

/// Bilinear resize of an `[H, W, C]` image (align-corners-false convention).
pub fn bilinear_resize(img: &Array3<f64>, new_h: usize, new_w: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    assert!(new_h >= 1 && new_w >= 1);
    let mut out = Array3::<f64>::zeros((new_h, new_w, c));
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for i in 0..new_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for j in 0..new_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - wx) + img[[y0, x1, ch]] * wx;
                let bot = img[[y1, x0, ch]] * (1.0 - wx) + img[[y1, x1, ch]] * wx;
                out[[i, j, ch]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Convert `[H, W, C]` (storage layout) to `[C, H, W]` (compute layout).
pub fn hwc_to_chw(img: &Array3<f64>) -> Array3<f64> {
    img.view().permuted_axes([2, 0, 1]).as_standard_layout().to_owned()
}

/// Convert `[C, H, W]` back to `[H, W, C]`.
pub fn chw_to_hwc(img: &Array3<f64>) -> Array3<f64> {
    img.view().permuted_axes([1, 2, 0]).as_standard_layout().to_owned()
}

/// Quantize [0,1] values onto the 8-bit grid (what a PNG round-trip does).
pub fn quantize8(img: &Array3<f64>) -> Array3<f64> {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn image_to_u8(img: &Array3<f64>) -> Vec<u8> {
    img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn u8_to_image(buf: &[u8], h: usize, w: usize) -> Array3<f64> {
    let v: Vec<f64> = buf.iter().map(|&b| b as f64 / 255.0).collect();
    Array3::from_shape_vec((h, w, 3), v).expect("decoded image shape")
}

/// Write a split under `root`: PNG images plus one annotations file.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let split_dir = root.join(ds.split.dir_name());
    let img_dir = split_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut seen = std::collections::BTreeSet::new();
    let mut annotations: BTreeMap<String, Vec<[f64; 2]>> = BTreeMap::new();
    for scene in &ds.scenes {
        if !seen.insert(scene.id.clone()) {
            return Err(Error::Data(format!("duplicate scene id {}", scene.id)));
        }
        let path = img_dir.join(format!("{}.png", scene.id));
        let (h, w, _) = scene.image.dim();
        let buf = image_to_u8(&scene.image);
        let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("raw buffer matches dimensions");
        img.save(&path)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
        annotations.insert(
            scene.id.clone(),
            scene.annotation.points.iter().map(|&(x, y)| [x, y]).collect(),
        );
    }
    let ann_path = split_dir.join("annotations.json");
    let json = serde_json::to_string_pretty(&annotations)
        .map_err(|e| Error::Data(format!("encoding annotations: {e}")))?;
    fs::write(&ann_path, json).map_err(|e| Error::io(&ann_path, e))?;
    Ok(())
}

/// Load one split from `root`. A missing split directory is an empty dataset;
/// an image without an annotation (or vice versa) is a data error naming the
/// offending scene id.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let split_dir = root.join(split.dir_name());
    if !split_dir.exists() {
        return Ok(Dataset { split, scenes: Vec::new() });
    }
    let ann_path = split_dir.join("annotations.json");
    let img_dir = split_dir.join("images");

    let annotations: BTreeMap<String, Vec<[f64; 2]>> = if ann_path.exists() {
        let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("parsing {}: {e}", ann_path.display())))?
    } else {
        BTreeMap::new()
    };

    let mut image_ids = std::collections::BTreeSet::new();
    if img_dir.exists() {
        for entry in fs::read_dir(&img_dir).map_err(|e| Error::io(&img_dir, e))? {
            let entry = entry.map_err(|e| Error::io(&img_dir, e))?;
            let path = entry.path();
            if path.extension().and_then(|s| s.to_str()) == Some("png") {
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Data(format!("bad image name {}", path.display())))?;
                image_ids.insert(id.to_string());
            }
        }
    }

    for id in &image_ids {
        if !annotations.contains_key(id) {
            return Err(Error::Data(format!(
                "image {id} in split {split} has no annotation entry"
            )));
        }
    }
    for id in annotations.keys() {
        if !image_ids.contains(id) {
            return Err(Error::Data(format!(
                "annotation {id} in split {split} has no image file"
            )));
        }
    }

    let mut scenes = Vec::with_capacity(annotations.len());
    for (id, pts) in &annotations {
        let path = img_dir.join(format!("{id}.png"));
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("decoding {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let image = u8_to_image(img.as_raw(), h, w);
        let annotation = PointAnnotation {
            points: pts.iter().map(|p| (p[0], p[1])).collect(),
        };
        annotation
            .validate_bounds(h, w)
            .map_err(|e| Error::Data(format!("scene {id}: {e}")))?;
        scenes.push(Scene { id: id.clone(), image, annotation });
    }
    Ok(Dataset { split, scenes })
}

/// Content fingerprint over ids, annotations, and quantized pixels.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(ds.split.dir_name().as_bytes());
    for scene in &ds.scenes {
        h.update(scene.id.as_bytes());
        for &(x, y) in &scene.annotation.points {
            h.update(x.to_le_bytes());
            h.update(y.to_le_bytes());
        }
        h.update(image_to_u8(&scene.image));
    }
    format!("{:x}", h.finalize())
}
