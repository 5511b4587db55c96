//! Dataset ingestion and every sampler the trainer uses.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! root/images/<name>.png   8-bit RGB
//! root/segs/<name>.png     8-bit class indices (domain A only)
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use log::warn;
use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{GatherPlan, GatherTap};
use crate::config::ExperimentConfig;
use crate::image::{Image, ImageError, SegmentationMap};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: missing images/ directory")]
    NoImagesDir(String),
    #[error("{domain} dataset at {root} is empty")]
    Empty { domain: Domain, root: String },
    #[error("missing segmentation {expected} for domain-A image {image}")]
    MissingSegmentation { image: String, expected: String },
    #[error("{file}: label {label} is not below num_classes={num_classes}")]
    LabelOutOfRange { file: String, label: u8, num_classes: usize },
    #[error("{file}: segmentation is {seg_h}x{seg_w} but its image is {img_h}x{img_w}")]
    SizeMismatch { file: String, seg_h: usize, seg_w: usize, img_h: usize, img_w: usize },
    #[error("cannot downsample {from_h}x{from_w} segmentation to larger {to_h}x{to_w}")]
    TargetTooLarge { from_h: usize, from_w: usize, to_h: usize, to_w: usize },
    #[error("cannot sample {n} unique indices from {available} positions")]
    TooManyIndices { n: usize, available: usize },
    #[error("patch size {patch} exceeds image size {height}x{width}")]
    PatchTooLarge { patch: usize, height: usize, width: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    A,
    B,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub name: String,
    pub image: PathBuf,
    pub segmentation: Option<PathBuf>,
}

/// Validated dataset for one domain. Segmentations are decoded and checked at
/// load time; images are decoded on demand unless [`DomainDataset::preload`]
/// has been called.
pub struct DomainDataset {
    root: PathBuf,
    domain: Domain,
    image_size: usize,
    records: Vec<ImageRecord>,
    segs: Vec<SegmentationMap>,
    cache: Vec<Image>,
    warnings: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// PNG files of an image directory, sorted by name. A directory with an
/// `images/` subfolder is treated as a dataset root.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let images = dir.join("images");
    if images.is_dir() {
        list_pngs(&images)
    } else {
        list_pngs(dir)
    }
}

impl DomainDataset {
    /// Load and validate `root` as a dataset of `domain`.
    pub fn load(root: &Path, domain: Domain, cfg: &ExperimentConfig) -> Result<Self, DataError> {
        Self::load_with(root, domain, cfg.image_size, cfg.num_classes)
    }

    pub fn load_with(
        root: &Path,
        domain: Domain,
        image_size: usize,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        let images_dir = root.join("images");
        if !images_dir.is_dir() {
            return Err(DataError::NoImagesDir(root.display().to_string()));
        }
        let segs_dir = root.join("segs");
        let mut warnings = Vec::new();
        if domain == Domain::B && segs_dir.exists() {
            let msg = format!("{}: ignoring segs/ in a domain-B dataset", root.display());
            warn!("{msg}");
            warnings.push(msg);
        }
        let mut records = Vec::new();
        let mut segs = Vec::new();
        for image in list_pngs(&images_dir)? {
            let name = image.file_name().expect("listed file").to_string_lossy().into_owned();
            let segmentation = match domain {
                Domain::B => None,
                Domain::A => {
                    let seg_path = segs_dir.join(&name);
                    if !seg_path.is_file() {
                        return Err(DataError::MissingSegmentation {
                            image: image.display().to_string(),
                            expected: seg_path.display().to_string(),
                        });
                    }
                    let seg = SegmentationMap::load_png(&seg_path)?;
                    let (img_w, img_h) = image::image_dimensions(&image)
                        .map_err(|source| ImageError::Codec { path: image.display().to_string(), source })?;
                    let (img_w, img_h) = (img_w as usize, img_h as usize);
                    if seg.height() != img_h || seg.width() != img_w {
                        return Err(DataError::SizeMismatch {
                            file: seg_path.display().to_string(),
                            seg_h: seg.height(),
                            seg_w: seg.width(),
                            img_h,
                            img_w,
                        });
                    }
                    let max = seg.max_label();
                    if max as usize >= num_classes {
                        return Err(DataError::LabelOutOfRange {
                            file: seg_path.display().to_string(),
                            label: max,
                            num_classes,
                        });
                    }
                    segs.push(seg.center_crop_resize(image_size));
                    Some(seg_path)
                }
            };
            records.push(ImageRecord { name, image, segmentation });
        }
        if records.is_empty() {
            return Err(DataError::Empty { domain, root: root.display().to_string() });
        }
        Ok(DomainDataset {
            root: root.to_path_buf(),
            domain,
            image_size,
            records,
            segs,
            cache: Vec::new(),
            warnings,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Decoded image `i`, normalized to `[-1, 1]`, center-cropped and scaled
    /// to `image_size`.
    pub fn image(&self, i: usize) -> Result<Image, DataError> {
        if let Some(img) = self.cache.get(i) {
            return Ok(img.clone());
        }
        Ok(Image::load_png(&self.records[i].image)?.center_crop_resize(self.image_size))
    }

    pub fn segmentation(&self, i: usize) -> Option<&SegmentationMap> {
        self.segs.get(i)
    }

    /// Decode every image into memory.
    pub fn preload(&mut self) -> Result<(), DataError> {
        if self.cache.len() == self.records.len() {
            return Ok(());
        }
        let mut cache = Vec::with_capacity(self.records.len());
        for i in 0..self.records.len() {
            cache.push(self.image(i)?);
        }
        self.cache = cache;
        Ok(())
    }
}

/// Independently drawn images from both domains; no pairing between them.
#[derive(Clone, Debug)]
pub struct UnpairedBatch {
    pub indices_a: Vec<usize>,
    pub indices_b: Vec<usize>,
    pub images_a: Vec<Image>,
    pub segs_a: Vec<SegmentationMap>,
    pub images_b: Vec<Image>,
}

/// Draw `batch_size` index pairs uniformly with replacement from each domain.
pub fn sample_unpaired_indices(
    len_a: usize,
    len_b: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let a = (0..batch_size).map(|_| rng.random_range(0..len_a)).collect();
    let b = (0..batch_size).map(|_| rng.random_range(0..len_b)).collect();
    (a, b)
}

pub fn sample_unpaired_batch(
    ds_a: &DomainDataset,
    ds_b: &DomainDataset,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<UnpairedBatch, DataError> {
    for ds in [ds_a, ds_b] {
        if ds.is_empty() {
            return Err(DataError::Empty { domain: ds.domain, root: ds.root.display().to_string() });
        }
    }
    let (indices_a, indices_b) = sample_unpaired_indices(ds_a.len(), ds_b.len(), batch_size, rng);
    let mut images_a = Vec::with_capacity(batch_size);
    let mut segs_a = Vec::with_capacity(batch_size);
    for &i in &indices_a {
        images_a.push(ds_a.image(i)?);
        let seg = ds_a.segmentation(i).cloned().unwrap_or_else(|| {
            SegmentationMap::filled(ds_a.image_size, ds_a.image_size, 0)
        });
        segs_a.push(seg);
    }
    let images_b = indices_b.iter().map(|&i| ds_b.image(i)).collect::<Result<_, _>>()?;
    Ok(UnpairedBatch { indices_a, indices_b, images_a, segs_a, images_b })
}

/// Nearest-neighbour downsampling that samples the source at the center of
/// each target cell: `out[r][c] = seg[floor((r + 0.5) H / h)][floor((c + 0.5) W / w)]`.
pub fn downsample_segmentation(
    seg: &SegmentationMap,
    target: (usize, usize),
) -> Result<SegmentationMap, DataError> {
    let (h, w) = target;
    let (src_h, src_w) = (seg.height(), seg.width());
    if h > src_h || w > src_w || h == 0 || w == 0 {
        return Err(DataError::TargetTooLarge { from_h: src_h, from_w: src_w, to_h: h, to_w: w });
    }
    let mut out = SegmentationMap::filled(h, w, 0);
    for r in 0..h {
        let sr = (2 * r + 1) * src_h / (2 * h);
        for c in 0..w {
            let sc = (2 * c + 1) * src_w / (2 * w);
            out.set(r, c, seg.get(sr, sc));
        }
    }
    Ok(out)
}

/// `n` distinct flat indices into an `h x w` map, uniformly at random and in
/// random order.
pub fn sample_feature_indices(
    layer_shape: (usize, usize),
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, DataError> {
    let available = layer_shape.0 * layer_shape.1;
    if n > available {
        return Err(DataError::TooManyIndices { n, available });
    }
    Ok(index::sample(rng, available, n).into_vec())
}

/// One crop: where it came from and how it was rotated (degrees, CCW).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSpec {
    pub image: usize,
    pub top: usize,
    pub left: usize,
    pub rotation: f64,
}

/// Crop locations and rotations for a batch of source images.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub specs: Vec<PatchSpec>,
}

/// Materialized crops together with their layout.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub layout: PatchLayout,
    pub crops: Vec<Image>,
}

/// Draw `patches_per_image` crops per image: top-left corners uniform over
/// all valid positions, rotations uniform over `rotation_set`.
pub fn sample_patch_layout(
    n_images: usize,
    image_height: usize,
    image_width: usize,
    patch_size: usize,
    patches_per_image: usize,
    rotation_set: &[f64],
    rng: &mut impl Rng,
) -> Result<PatchLayout, DataError> {
    if patch_size > image_height || patch_size > image_width || patch_size == 0 {
        return Err(DataError::PatchTooLarge { patch: patch_size, height: image_height, width: image_width });
    }
    assert!(!rotation_set.is_empty(), "rotation_set must not be empty");
    let mut specs = Vec::with_capacity(n_images * patches_per_image);
    for image in 0..n_images {
        for _ in 0..patches_per_image {
            let top = rng.random_range(0..=image_height - patch_size);
            let left = rng.random_range(0..=image_width - patch_size);
            let rotation = rotation_set[rng.random_range(0..rotation_set.len())];
            specs.push(PatchSpec { image, top, left, rotation });
        }
    }
    Ok(PatchLayout { patch_size, image_height, image_width, specs })
}

/// Number of quarter turns if `degrees` is a right angle.
fn quarter_turns(degrees: f64) -> Option<usize> {
    let q = degrees / 90.0;
    (q.fract() == 0.0).then(|| q.rem_euclid(4.0) as usize)
}

/// Source `(row, col)` inside an `s x s` square for output `(r, c)` after a
/// counter-clockwise rotation by `k` quarter turns.
fn quarter_turn_source(k: usize, s: usize, r: usize, c: usize) -> (usize, usize) {
    match k {
        0 => (r, c),
        1 => (c, s - 1 - r),
        2 => (s - 1 - r, s - 1 - c),
        _ => (s - 1 - c, r),
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= len as isize { period - m } else { m }) as usize
}

impl PatchLayout {
    /// Resampling plan that turns a `[N, C, H, W]` batch into the crops.
    /// Right-angle rotations copy pixels exactly; other angles are sampled
    /// bilinearly, reflecting at the image border.
    pub fn gather_plan(&self) -> GatherPlan {
        let s = self.patch_size;
        let (h, w) = (self.image_height, self.image_width);
        let exact = self.specs.iter().all(|p| quarter_turns(p.rotation).is_some());
        let taps_per_pixel = if exact { 1 } else { 4 };
        let mut taps = Vec::with_capacity(self.specs.len() * s * s * taps_per_pixel);
        for spec in &self.specs {
            for r in 0..s {
                for c in 0..s {
                    match quarter_turns(spec.rotation) {
                        Some(k) => {
                            let (sr, sc) = quarter_turn_source(k, s, r, c);
                            let pixel = (spec.top + sr) * w + spec.left + sc;
                            taps.push(GatherTap { image: spec.image, pixel, weight: 1.0 });
                            for _ in 1..taps_per_pixel {
                                taps.push(GatherTap { image: spec.image, pixel, weight: 0.0 });
                            }
                        }
                        None => {
                            let half = s as f64 / 2.0;
                            let (dy, dx) = (r as f64 + 0.5 - half, c as f64 + 0.5 - half);
                            let (sin, cos) = (spec.rotation * PI / 180.0).sin_cos();
                            let sy = spec.top as f64 + half + dy * cos + dx * sin - 0.5;
                            let sx = spec.left as f64 + half + dx * cos - dy * sin - 0.5;
                            let (y0, x0) = (sy.floor(), sx.floor());
                            let (fy, fx) = (sy - y0, sx - x0);
                            for (oy, ox, wgt) in [
                                (0, 0, (1.0 - fy) * (1.0 - fx)),
                                (0, 1, (1.0 - fy) * fx),
                                (1, 0, fy * (1.0 - fx)),
                                (1, 1, fy * fx),
                            ] {
                                let yy = reflect_index(y0 as isize + oy, h);
                                let xx = reflect_index(x0 as isize + ox, w);
                                taps.push(GatherTap { image: spec.image, pixel: yy * w + xx, weight: wgt });
                            }
                        }
                    }
                }
            }
        }
        GatherPlan { outputs: self.specs.len(), side: s, taps_per_pixel, taps }
    }

    /// Apply the layout to in-memory images.
    pub fn materialize(&self, images: &[Image]) -> Vec<Image> {
        let plan = self.gather_plan();
        let s2 = self.patch_size * self.patch_size;
        let tpp = plan.taps_per_pixel;
        (0..plan.outputs)
            .map(|k| {
                let mut data = vec![0.0f32; 3 * s2];
                for p in 0..s2 {
                    for tap in &plan.taps[(k * s2 + p) * tpp..(k * s2 + p + 1) * tpp] {
                        if tap.weight == 0.0 {
                            continue;
                        }
                        let src = &images[tap.image];
                        let (y, x) = (tap.pixel / self.image_width, tap.pixel % self.image_width);
                        for ch in 0..3 {
                            data[ch * s2 + p] += (tap.weight * src.get(ch, y, x) as f64) as f32;
                        }
                    }
                }
                Image::new(self.patch_size, self.patch_size, data)
            })
            .collect()
    }

    pub fn shared_plan(&self) -> Rc<GatherPlan> {
        Rc::new(self.gather_plan())
    }
}

/// Random crops with random per-crop rotations from every image in `images`.
pub fn extract_patches(
    images: &[Image],
    cfg: &ExperimentConfig,
    rng: &mut impl Rng,
) -> Result<PatchBatch, DataError> {
    assert!(!images.is_empty(), "no images to crop");
    let (h, w) = (images[0].height(), images[0].width());
    let layout = sample_patch_layout(
        images.len(),
        h,
        w,
        cfg.patch_size,
        cfg.patches_per_image,
        &cfg.rotation_set,
        rng,
    )?;
    let crops = layout.materialize(images);
    Ok(PatchBatch { layout, crops })
}

/// Rotate a square image counter-clockwise by a multiple of 90 degrees.
pub fn rotate_square(img: &Image, degrees: f64) -> Image {
    assert_eq!(img.height(), img.width(), "rotate_square needs a square image");
    let k = quarter_turns(degrees).expect("rotate_square needs a right angle");
    let s = img.height();
    let mut out = img.clone();
    for r in 0..s {
        for c in 0..s {
            let (sr, sc) = quarter_turn_source(k, s, r, c);
            out.set_pixel(r, c, img.pixel(sr, sc));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn chi_square_p(counts: &[usize], expected: f64) -> f64 {
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    fn gradient_image(size: usize) -> Image {
        let mut img = Image::filled(size, size, [0.0; 3]);
        for r in 0..size {
            for c in 0..size {
                let v = (r * size + c) as f32 / (size * size) as f32;
                img.set_pixel(r, c, [v, -v, (r as f32 - c as f32) / size as f32]);
            }
        }
        img
    }

    #[test]
    fn downsample_identity_and_uniform() {
        let seg = SegmentationMap::new(3, 5, (0..15).map(|v| v as u8).collect());
        assert_eq!(downsample_segmentation(&seg, (3, 5)).unwrap(), seg);
        let flat = SegmentationMap::filled(9, 7, 4);
        for (h, w) in [(1, 1), (3, 2), (9, 7), (4, 5)] {
            assert!(downsample_segmentation(&flat, (h, w)).unwrap().labels().iter().all(|&l| l == 4));
        }
    }

    #[test]
    fn downsample_picks_block_centers() {
        let seg = SegmentationMap::new(4, 4, (0..16).map(|v| v as u8).collect());
        let out = downsample_segmentation(&seg, (2, 2)).unwrap();
        assert_eq!(out.labels(), &[5, 7, 13, 15]);
    }

    #[test]
    fn downsample_rejects_upsampling() {
        let seg = SegmentationMap::filled(4, 4, 0);
        assert!(matches!(downsample_segmentation(&seg, (8, 4)), Err(DataError::TargetTooLarge { .. })));
    }

    #[test]
    fn feature_indices_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all = sample_feature_indices((3, 4), 12, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        let one = sample_feature_indices((3, 4), 1, &mut rng).unwrap();
        assert!(one.len() == 1 && one[0] < 12);
        assert!(matches!(
            sample_feature_indices((3, 4), 13, &mut rng),
            Err(DataError::TooManyIndices { n: 13, available: 12 })
        ));
    }

    #[test]
    fn feature_index_inclusion_frequency() {
        // Without replacement each cell is included with probability n / (h w) = 16 / 64.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 64];
        let trials = 10_000;
        for _ in 0..trials {
            let idx = sample_feature_indices((8, 8), 16, &mut rng).unwrap();
            let mut seen = idx.clone();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 16);
            for i in idx {
                counts[i] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / trials as f64;
            assert!((f - 0.25).abs() <= 0.02, "inclusion frequency {f}");
        }
    }

    #[test]
    fn unpaired_indices_are_uniform_and_seeded() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_unpaired_indices(4, 7, 3, &mut rng)
        };
        assert_eq!(draw(5), draw(5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let (a, _) = sample_unpaired_indices(4, 7, 1, &mut rng);
            counts[a[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / 2500.0 - 1.0).abs() < 0.05, "count {c}");
        }
        assert!(chi_square_p(&counts, 2500.0) > 0.01);
    }

    #[test]
    fn full_size_patches_only_rotate() {
        let img = gradient_image(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = sample_patch_layout(1, 8, 8, 8, 20, &[0.0, 90.0, 180.0, 270.0], &mut rng).unwrap();
        assert!(layout.specs.iter().all(|p| p.top == 0 && p.left == 0));
        let crops = layout.materialize(&[img.clone()]);
        for (spec, crop) in layout.specs.iter().zip(&crops) {
            assert_eq!(crop, &rotate_square(&img, spec.rotation));
        }
    }

    #[test]
    fn unrotated_crops_are_verbatim() {
        let img = gradient_image(16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = sample_patch_layout(1, 16, 16, 5, 30, &[0.0], &mut rng).unwrap();
        for (spec, crop) in layout.specs.iter().zip(layout.materialize(&[img.clone()])) {
            for r in 0..5 {
                for c in 0..5 {
                    assert_eq!(crop.pixel(r, c), img.pixel(spec.top + r, spec.left + c));
                }
            }
        }
    }

    #[test]
    fn rotation_round_trip_is_exact() {
        let img = gradient_image(7);
        for r in [0.0, 90.0, 180.0, 270.0] {
            let back = rotate_square(&rotate_square(&img, r), 360.0 - r);
            assert_eq!(back, img);
        }
        assert_eq!(rotate_square(&rotate_square(&img, 90.0), 90.0), rotate_square(&img, 180.0));
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let mut img = Image::filled(3, 3, [0.0; 3]);
        img.set_pixel(0, 2, [1.0, 1.0, 1.0]); // top-right corner
        let rot = rotate_square(&img, 90.0);
        assert_eq!(rot.pixel(0, 0), [1.0, 1.0, 1.0]); // moves to top-left
    }

    #[test]
    fn arbitrary_angles_stay_finite_and_bounded() {
        let img = gradient_image(12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = sample_patch_layout(1, 12, 12, 12, 10, &[15.0, 45.0, 137.0], &mut rng).unwrap();
        let plan = layout.gather_plan();
        assert_eq!(plan.taps_per_pixel, 4);
        for crop in layout.materialize(&[img]) {
            assert!(crop.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0 + 1e-6));
        }
    }

    #[test]
    fn reflect_index_wraps() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(2, 5), 2);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn patch_too_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_patch_layout(1, 8, 8, 9, 1, &[0.0], &mut rng),
            Err(DataError::PatchTooLarge { .. })
        ));
    }
}
