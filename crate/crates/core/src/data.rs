//! Dataset plumbing: triplet directory scanning, deterministic train/test
//! splits, PNG decode/encode, mask binarization, and the [-1,1] model range.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Mask pixels at or above this 8-bit value are shadow.
pub const MASK_THRESHOLD: u8 = 128;

/// Reference split sizes: 1330 of 1870 triples train, the rest test.
pub const SPLIT_TRAIN: usize = 1330;
pub const SPLIT_TOTAL: usize = 1870;

/// One aligned supervision unit.
#[derive(Clone, Debug)]
pub struct ShadowTriplet {
    pub id: String,
    /// (1,3,H,W) in [0,255]
    pub shadow: Tensor,
    /// (1,1,H,W) strictly binary
    pub mask: Tensor,
    /// (1,3,H,W) in [0,255]
    pub free: Tensor,
}

/// Resolved source files of one triplet.
#[derive(Clone, Debug)]
pub struct TripletPaths {
    pub id: String,
    pub shadow: PathBuf,
    pub mask: PathBuf,
    pub free: PathBuf,
}

/// Scanned dataset with disjoint train/test id sets and a completeness
/// report of ids that were missing one of their three files.
#[derive(Clone, Debug, Default)]
pub struct DatasetIndex {
    pub train: Vec<TripletPaths>,
    pub test: Vec<TripletPaths>,
    pub excluded: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn list_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Intersects three parallel directories by filename; ids present in fewer
/// than all three land in the exclusion report.
fn align_triplets(
    prefix: &str,
    shadow_dir: &Path,
    mask_dir: &Path,
    free_dir: &Path,
    excluded: &mut Vec<String>,
) -> Result<Vec<TripletPaths>> {
    let shadow = list_files(shadow_dir)?;
    let mask = list_files(mask_dir)?;
    let free = list_files(free_dir)?;
    let mut ids: Vec<&String> = shadow.keys().chain(mask.keys()).chain(free.keys()).collect();
    ids.sort();
    ids.dedup();
    let mut out = Vec::new();
    for id in ids {
        match (shadow.get(id), mask.get(id), free.get(id)) {
            (Some(s), Some(m), Some(f)) => out.push(TripletPaths {
                id: format!("{prefix}{id}"),
                shadow: s.clone(),
                mask: m.clone(),
                free: f.clone(),
            }),
            (s, m, f) => {
                let mut missing = Vec::new();
                if s.is_none() {
                    missing.push("shadow");
                }
                if m.is_none() {
                    missing.push("mask");
                }
                if f.is_none() {
                    missing.push("free");
                }
                excluded.push(format!("{prefix}{id} (missing {})", missing.join("+")));
            }
        }
    }
    Ok(out)
}

/// Deterministic ratio split of ids that are not already split by the
/// dataset layout: 1330/1870 of the ids train, the rest test.
pub fn split_ids(mut items: Vec<TripletPaths>, seed: u64) -> (Vec<TripletPaths>, Vec<TripletPaths>) {
    items.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let n_train =
        ((items.len() as f64) * (SPLIT_TRAIN as f64) / (SPLIT_TOTAL as f64)).round() as usize;
    let test = items.split_off(n_train.min(items.len()));
    (items, test)
}

/// Scans an ISTD-style root. When `root/train/train_A` exists the dataset's
/// own train/test directory split is respected; otherwise the root must
/// hold three flat subdirectories (see [`scan_flat`]).
pub fn scan_istd(root: &Path, seed: u64) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    if root.join("train").join("train_A").is_dir() {
        let mut excluded = Vec::new();
        let mut index = DatasetIndex::default();
        for (split, bucket) in [("train", true), ("test", false)] {
            let base = root.join(split);
            if !base.is_dir() {
                continue;
            }
            let triples = align_triplets(
                &format!("{split}/"),
                &base.join(format!("{split}_A")),
                &base.join(format!("{split}_B")),
                &base.join(format!("{split}_C")),
                &mut excluded,
            )?;
            if bucket {
                index.train = triples;
            } else {
                index.test = triples;
            }
        }
        index.excluded = excluded;
        if index.is_empty() {
            return Err(Error::Dataset(format!(
                "no complete triplets under {}",
                root.display()
            )));
        }
        return Ok(index);
    }
    scan_flat(root, "shadow", "mask", "free", seed)
}

/// Scans a flat three-directory layout (`root/<shadow>`, `root/<mask>`,
/// `root/<free>`) and splits 1330:540 by seeded shuffle.
pub fn scan_flat(root: &Path, shadow: &str, mask: &str, free: &str, seed: u64) -> Result<DatasetIndex> {
    let dirs = [root.join(shadow), root.join(mask), root.join(free)];
    if dirs.iter().any(|d| !d.is_dir()) {
        return Err(Error::Dataset(format!(
            "dataset root {} has neither an ISTD train/test layout nor flat {shadow}/{mask}/{free} directories",
            root.display()
        )));
    }
    let mut excluded = Vec::new();
    let all = align_triplets("", &dirs[0], &dirs[1], &dirs[2], &mut excluded)?;
    if all.is_empty() {
        return Err(Error::Dataset(format!(
            "no complete triplets under {}",
            root.display()
        )));
    }
    let (train, test) = split_ids(all, seed);
    Ok(DatasetIndex {
        train,
        test,
        excluded,
    })
}

// ---------------------------------------------------------------------------
// Image <-> tensor
// ---------------------------------------------------------------------------

pub fn tensor_from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    let plane = h * w;
    for (p, px) in img.pixels().enumerate() {
        t.data_mut()[p] = px[0] as f32;
        t.data_mut()[plane + p] = px[1] as f32;
        t.data_mut()[2 * plane + p] = px[2] as f32;
    }
    t
}

/// Rounds and clamps a [0,255]-range tensor to 8-bit RGB.
pub fn rgb8_from_tensor(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::contract(format!("rgb8_from_tensor needs (1,3,H,W), got {s}")));
    }
    let plane = s.plane();
    let mut buf = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            buf.push(t.data()[c * plane + p].round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage::from_raw(s.w as u32, s.h as u32, buf)
        .ok_or_else(|| Error::contract("rgb8_from_tensor buffer size"))
}

/// Binarizes an 8-bit grayscale mask at [`MASK_THRESHOLD`].
pub fn tensor_from_mask(img: &GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 1, h, w));
    for (p, px) in img.pixels().enumerate() {
        t.data_mut()[p] = if px[0] >= MASK_THRESHOLD { 1.0 } else { 0.0 };
    }
    t
}

/// Renders a [0,1]-valued map (attention, mask) as 8-bit grayscale.
pub fn gray8_from_map(t: &Tensor) -> Result<GrayImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::contract(format!("gray8_from_map needs (1,1,H,W), got {s}")));
    }
    let buf: Vec<u8> = t
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::from_raw(s.w as u32, s.h as u32, buf)
        .ok_or_else(|| Error::contract("gray8_from_map buffer size"))
}

pub fn load_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    Ok(tensor_from_rgb8(&img.to_rgb8()))
}

pub fn save_rgb_png(t: &Tensor, path: &Path) -> Result<()> {
    rgb8_from_tensor(t)?.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

pub fn save_gray_png(t: &Tensor, path: &Path) -> Result<()> {
    gray8_from_map(t)?.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

/// Loads and aligns one triplet; `target_size` is (H, W). The mask is
/// resized as 8-bit grayscale and re-binarized, so it stays strictly binary.
pub fn load_triplet(paths: &TripletPaths, target_size: Option<(usize, usize)>) -> Result<ShadowTriplet> {
    let open = |p: &Path| {
        image::open(p).map_err(|e| Error::Image {
            path: p.into(),
            source: e,
        })
    };
    let shadow = open(&paths.shadow)?.to_rgb8();
    let mask = open(&paths.mask)?.to_luma8();
    let free = open(&paths.free)?.to_rgb8();
    if shadow.dimensions() != mask.dimensions() || shadow.dimensions() != free.dimensions() {
        return Err(Error::Dataset(format!(
            "triplet {}: sizes differ (shadow {:?}, mask {:?}, free {:?})",
            paths.id,
            shadow.dimensions(),
            mask.dimensions(),
            free.dimensions()
        )));
    }
    let (shadow, mask, free) = match target_size {
        Some((h, w)) => (
            image::imageops::resize(&shadow, w as u32, h as u32, FilterType::Triangle),
            image::imageops::resize(&mask, w as u32, h as u32, FilterType::Triangle),
            image::imageops::resize(&free, w as u32, h as u32, FilterType::Triangle),
        ),
        None => (shadow, mask, free),
    };
    Ok(ShadowTriplet {
        id: paths.id.clone(),
        shadow: tensor_from_rgb8(&shadow),
        mask: tensor_from_mask(&mask),
        free: tensor_from_rgb8(&free),
    })
}

// ---------------------------------------------------------------------------
// Model range
// ---------------------------------------------------------------------------

/// Affine map [0,255] -> [-1,1].
pub fn to_model_range(image: &Tensor) -> Tensor {
    crate::tensor::map(image, |v| v / 127.5 - 1.0)
}

/// Inverse of [`to_model_range`] with rounding to the 8-bit grid and
/// clamping, so out-of-range model outputs export cleanly.
pub fn from_model_range(image: &Tensor) -> Tensor {
    crate::tensor::map(image, |v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0))
}
