//! Synthetic multi-class cloud scenes, dataset directory IO, patch
//! cropping, and split handling.
//!
//! A scene is rendered from procedural geometry (fractal value noise plus
//! quantile thresholds), and the label mask derives from that same
//! geometry, never from pixel heuristics: labels are exact by
//! construction. Classes: 0 clear sky, 1 thick cloud, 2 thin cloud,
//! 3 cloud shadow, with per-pixel precedence thick > thin > shadow >
//! clear.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, SeedRng};
use crate::tensor::cst::{read_cst, write_cst};
use crate::tensor::Tensor;

pub const CLASS_CLEAR: u8 = 0;
pub const CLASS_THICK: u8 = 1;
pub const CLASS_THIN: u8 = 2;
pub const CLASS_SHADOW: u8 = 3;

/// Shadows sit at a fixed offset from their parent thick cloud.
pub const SHADOW_OFFSET: (usize, usize) = (12, 12);

#[derive(Debug, Clone)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim(format!(
                "mask {}x{} wants {} bytes, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        Ok(Mask { h, w, data })
    }
}

#[derive(Debug, Clone)]
pub struct SceneSample {
    /// [3, H, W] image with values in [0, 1].
    pub image: Tensor<f32>,
    pub mask: Mask,
}

/// The geometric source a scene is rendered from. Kept resolvable from the
/// seed so tests can re-derive the mask independently of the image.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub h: usize,
    pub w: usize,
    /// Fractal cloudiness field, normalized to [0, 1].
    pub cloud: Vec<f32>,
    /// Pixels with cloud >= thick_thresh are thick cloud.
    pub thick_thresh: f32,
    /// Pixels with cloud >= cloud_thresh are cloud (thick or thin).
    pub cloud_thresh: f32,
}

fn value_noise(rng: &mut SeedRng, h: usize, w: usize) -> Vec<f32> {
    let mut field = vec![0.0f32; h * w];
    let octaves: [(usize, f32); 3] = [(8, 1.0), (16, 0.5), (32, 0.25)];
    for &(cells, amp) in &octaves {
        let gh = cells.min(h.max(2) - 1) + 1;
        let gw = cells.min(w.max(2) - 1) + 1;
        let lattice: Vec<f32> = (0..(gh + 1) * (gw + 1))
            .map(|_| rng.random::<f32>())
            .collect();
        for y in 0..h {
            let fy = y as f32 / h as f32 * gh as f32;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..w {
                let fx = x as f32 / w as f32 * gw as f32;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let at = |yy: usize, xx: usize| lattice[yy * (gw + 1) + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                field[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in &field {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    for v in &mut field {
        *v = (*v - lo) / span;
    }
    field
}

/// Quantile threshold putting a `fraction` of `values` at or above it.
fn threshold_for(sorted: &[f32], fraction: f64) -> f32 {
    let n = sorted.len();
    if fraction <= 0.0 {
        return f32::INFINITY;
    }
    let keep = ((fraction * n as f64).round() as usize).min(n);
    if keep == 0 {
        f32::INFINITY
    } else {
        sorted[n - keep]
    }
}

pub fn scene_geometry(seed: u64, h: usize, w: usize, cloud_cover: f64) -> SceneGeometry {
    let mut rng = rng_from(derive_seed(seed, "scene.cloud"));
    let cloud = value_noise(&mut rng, h, w);
    let mut sorted = cloud.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cover = cloud_cover.clamp(0.0, 1.0);
    SceneGeometry {
        h,
        w,
        cloud_thresh: threshold_for(&sorted, cover),
        // thick clouds take half the requested cover
        thick_thresh: threshold_for(&sorted, cover / 2.0),
        cloud: cloud.clone(),
    }
}

/// Labels from geometry alone. Thick-cloud pixels shifted by the light
/// vector shade clear ground; cloud always wins over shadow.
pub fn mask_from_geometry(geo: &SceneGeometry) -> Mask {
    let (h, w) = (geo.h, geo.w);
    let mut data = vec![CLASS_CLEAR; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = geo.cloud[y * w + x];
            data[y * w + x] = if v >= geo.thick_thresh {
                CLASS_THICK
            } else if v >= geo.cloud_thresh {
                CLASS_THIN
            } else {
                CLASS_CLEAR
            };
        }
    }
    let (dy, dx) = SHADOW_OFFSET;
    for y in dy..h {
        for x in dx..w {
            let parent = geo.cloud[(y - dy) * w + (x - dx)] >= geo.thick_thresh;
            if parent && data[y * w + x] == CLASS_CLEAR {
                data[y * w + x] = CLASS_SHADOW;
            }
        }
    }
    Mask { h, w, data }
}

fn image_from_geometry(geo: &SceneGeometry, seed: u64, mask: &Mask) -> Tensor<f32> {
    let (h, w) = (geo.h, geo.w);
    let mut rng = rng_from(derive_seed(seed, "scene.terrain"));
    let t1 = value_noise(&mut rng, h, w);
    let t2 = value_noise(&mut rng, h, w);
    let mut img = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        // terrain palette: muted green-brown driven by two noise fields
        let mut rgb = [
            0.20 + 0.25 * t1[i] + 0.10 * t2[i],
            0.25 + 0.30 * t1[i],
            0.15 + 0.20 * t2[i],
        ];
        match mask.data[i] {
            CLASS_THICK => {
                let b = 0.85 + 0.15 * geo.cloud[i];
                rgb = [b, b, b];
            }
            CLASS_THIN => {
                let a = 0.45;
                for c in &mut rgb {
                    *c = *c * (1.0 - a) + 0.90 * a;
                }
            }
            CLASS_SHADOW => {
                for c in &mut rgb {
                    *c *= 0.45;
                }
            }
            _ => {}
        }
        for (ch, &v) in rgb.iter().enumerate() {
            img[ch * h * w + i] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(img, &[3, h, w]).expect("consistent by construction")
}

/// Procedural scene generation. The realized cloud cover (thick + thin
/// fraction) tracks the request to within quantile rounding.
pub fn synth_scene(seed: u64, h: usize, w: usize, cloud_cover: f64) -> SceneSample {
    let geo = scene_geometry(seed, h, w, cloud_cover);
    let mask = mask_from_geometry(&geo);
    let image = image_from_geometry(&geo, seed, &mask);
    SceneSample { image, mask }
}

/// Fraction of pixels labelled cloud (thick or thin).
pub fn cloud_cover_of(mask: &Mask) -> f64 {
    let clouds = mask
        .data
        .iter()
        .filter(|&&v| v == CLASS_THICK || v == CLASS_THIN)
        .count();
    clouds as f64 / mask.data.len() as f64
}

/// Cover band grammar of the `gen-data` flag: low / medium / high or an
/// explicit fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoverSpec {
    Low,
    Medium,
    High,
    Fixed(f64),
}

impl std::str::FromStr for CoverSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(CoverSpec::Low),
            "medium" => Ok(CoverSpec::Medium),
            "high" => Ok(CoverSpec::High),
            other => {
                let v: f64 = other.parse().map_err(|_| {
                    Error::config(format!(
                        "cover must be low|medium|high or a fraction, got \"{other}\""
                    ))
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(format!("cover {v} outside [0, 1]")));
                }
                Ok(CoverSpec::Fixed(v))
            }
        }
    }
}

impl CoverSpec {
    /// Draw a concrete cover value; bands are Low [0, 0.35),
    /// Medium [0.35, 0.65], High (0.65, 1].
    pub fn sample(&self, rng: &mut SeedRng) -> f64 {
        match self {
            CoverSpec::Low => rng.random_range(0.0..0.35),
            CoverSpec::Medium => rng.random_range(0.35..=0.65),
            CoverSpec::High => rng.random_range(0.65..1.0) + 1e-9,
            CoverSpec::Fixed(v) => *v,
        }
    }
}

/// Non-overlapping grid crops; the trailing remainder is discarded.
/// `drop_empty` removes patches whose mask is single-class background.
pub fn crop_patches(
    image: &Tensor<f32>,
    mask: &Mask,
    patch: usize,
    drop_empty: bool,
) -> Result<Vec<SceneSample>> {
    if image.rank() != 3 {
        return Err(Error::dim(format!(
            "crop_patches expects [C, H, W], got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    if mask.h != h || mask.w != w {
        return Err(Error::dim(format!(
            "mask {}x{} does not match image {}x{}",
            mask.h, mask.w, h, w
        )));
    }
    if patch == 0 || patch > h.min(w) {
        return Err(Error::dim(format!(
            "patch {} too large for {}x{}",
            patch, h, w
        )));
    }
    let img = image.data();
    let mut out = Vec::new();
    for py in 0..h / patch {
        for px in 0..w / patch {
            let mut mdata = vec![0u8; patch * patch];
            for y in 0..patch {
                for x in 0..patch {
                    mdata[y * patch + x] =
                        mask.data[(py * patch + y) * w + px * patch + x];
                }
            }
            if drop_empty && mdata.iter().all(|&v| v == CLASS_CLEAR) {
                continue;
            }
            let mut idata = vec![0.0f32; c * patch * patch];
            for ch in 0..c {
                for y in 0..patch {
                    for x in 0..patch {
                        idata[(ch * patch + y) * patch + x] =
                            img[(ch * h + py * patch + y) * w + px * patch + x];
                    }
                }
            }
            out.push(SceneSample {
                image: Tensor::from_vec(idata, &[c, patch, patch])?,
                mask: Mask::new(patch, patch, mdata)?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub ratios: (u32, u32, u32),
    pub seed: u64,
}

pub struct Splits {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

/// Seeded shuffle, then a contiguous partition by ratios (largest-remainder
/// apportionment, ties to the earlier split). Disjoint and exhaustive.
pub fn split(mut samples: Vec<SceneSample>, spec: &SplitSpec) -> Result<Splits> {
    let (rt, rv, rs) = spec.ratios;
    let total_ratio = (rt + rv + rs) as f64;
    if total_ratio == 0.0 {
        return Err(Error::config("split ratios sum to zero".to_string()));
    }
    if samples.is_empty() {
        return Err(Error::data("split of an empty sample list".to_string()));
    }
    let mut rng = rng_from(spec.seed);
    // Fisher-Yates
    for i in (1..samples.len()).rev() {
        let j = rng.random_range(0..=i);
        samples.swap(i, j);
    }
    let n = samples.len();
    let quota: Vec<f64> = [rt, rv, rs]
        .iter()
        .map(|&r| n as f64 * r as f64 / total_ratio)
        .collect();
    let mut sizes: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (quota[b] - quota[b].floor())
            .partial_cmp(&(quota[a] - quota[a].floor()))
            .unwrap()
            .then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        // never grow a split whose ratio is zero
        if [rt, rv, rs][i] > 0 {
            sizes[i] += 1;
            leftover -= 1;
        }
    }
    // any residue (all-but-one ratios zero already full) goes to train
    sizes[0] += leftover;

    let mut it = samples.into_iter();
    let train: Vec<_> = it.by_ref().take(sizes[0]).collect();
    let val: Vec<_> = it.by_ref().take(sizes[1]).collect();
    let test: Vec<_> = it.collect();
    Ok(Splits { train, val, test })
}

// ---------------------------------------------------------------------------
// PGM masks (P5, maxval 255, labels stored as raw class ids)

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    buf.extend_from_slice(&mask.data);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::data(format!("pgm {}: {}", path.display(), msg));

    // header: "P5", whitespace-separated width/height/maxval, with
    // '#'-comment support
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fail("not a binary PGM (P5)"));
    }
    let mut pos = 2usize;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("malformed header"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| fail("malformed header"))?
            .parse()
            .map_err(|_| fail("malformed header"))?;
        fields.push(v);
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(fail(&format!("maxval must be 255, got {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    if bytes.len() != pos + w * h {
        return Err(fail(&format!(
            "expected {} payload bytes, found {}",
            w * h,
            bytes.len().saturating_sub(pos)
        )));
    }
    Mask::new(h, w, bytes[pos..].to_vec())
}

// ---------------------------------------------------------------------------
// Dataset directories: paired NNNN.cst (image) + NNNN.pgm (mask)

pub fn save_dir(samples: &[SceneSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        write_cst(&dir.join(format!("{i:04}.cst")), &s.image)?;
        write_pgm(&dir.join(format!("{i:04}.pgm")), &s.mask)?;
    }
    Ok(())
}

pub fn load_dir(dir: &Path, num_classes: usize) -> Result<Vec<SceneSample>> {
    let mut stems: BTreeMap<String, (bool, bool)> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        let slot = stems.entry(stem.to_string()).or_insert((false, false));
        match ext {
            "cst" => slot.0 = true,
            "pgm" => slot.1 = true,
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (stem, (has_img, has_mask)) in &stems {
        match (has_img, has_mask) {
            (true, true) => {}
            (true, false) => {
                return Err(Error::data(format!("missing mask for image \"{stem}\"")))
            }
            (false, true) => {
                return Err(Error::data(format!("missing image for mask \"{stem}\"")))
            }
            (false, false) => continue,
        }
        let image = read_cst(&dir.join(format!("{stem}.cst")))?;
        if image.rank() != 3 {
            return Err(Error::data(format!(
                "image \"{stem}\" must be [C, H, W], got {:?}",
                image.shape()
            )));
        }
        let mask = read_pgm(&dir.join(format!("{stem}.pgm")))?;
        if mask.h != image.dim(1) || mask.w != image.dim(2) {
            return Err(Error::data(format!(
                "\"{stem}\": mask {}x{} does not match image {:?}",
                mask.h,
                mask.w,
                image.shape()
            )));
        }
        if let Some(bad) = mask.data.iter().find(|&&v| usize::from(v) >= num_classes) {
            return Err(Error::data(format!(
                "\"{stem}\": label {bad} out of range (C = {num_classes})"
            )));
        }
        out.push(SceneSample { image, mask });
    }
    if out.is_empty() {
        return Err(Error::data(format!(
            "no samples found in {}",
            dir.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cover_zero_is_all_clear() {
        let s = synth_scene(1, 64, 64, 0.0);
        assert!(s.mask.data.iter().all(|&v| v == CLASS_CLEAR));
    }

    #[test]
    fn cover_one_saturates() {
        let s = synth_scene(2, 64, 64, 1.0);
        let clear = s.mask.data.iter().filter(|&&v| v == CLASS_CLEAR).count();
        assert!(clear as f64 / s.mask.data.len() as f64 <= 0.01);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synth_scene(7, 32, 48, 0.4);
        let b = synth_scene(7, 32, 48, 0.4);
        assert_eq!(a.mask.data, b.mask.data);
        assert_eq!(a.image.to_vec(), b.image.to_vec());
        let c = synth_scene(8, 32, 48, 0.4);
        assert_ne!(a.mask.data, c.mask.data);
    }

    #[test]
    fn realized_cover_tracks_request() {
        for seed in 0..100u64 {
            let requested = 0.05 + 0.9 * (seed as f64 / 99.0);
            let s = synth_scene(seed, 48, 48, requested);
            let realized = cloud_cover_of(&s.mask);
            assert!(
                (realized - requested).abs() <= 0.10,
                "seed {seed}: requested {requested:.2}, realized {realized:.2}"
            );
        }
    }

    #[test]
    fn labels_rederive_from_geometry() {
        let seed = 11u64;
        let s = synth_scene(seed, 40, 40, 0.5);
        let geo = scene_geometry(seed, 40, 40, 0.5);
        let remask = mask_from_geometry(&geo);
        assert_eq!(s.mask.data, remask.data);
        // every thick-alpha pixel is labelled thick, unconditionally
        for (i, &v) in geo.cloud.iter().enumerate() {
            if v >= geo.thick_thresh {
                assert_eq!(s.mask.data[i], CLASS_THICK);
            }
        }
    }

    #[test]
    fn shadows_offset_from_thick_clouds() {
        let s = synth_scene(3, 64, 64, 0.3);
        let (dy, dx) = SHADOW_OFFSET;
        let w = 64;
        let mut shadows = 0;
        for y in dy..64 {
            for x in dx..64 {
                if s.mask.data[y * w + x] == CLASS_SHADOW {
                    shadows += 1;
                    assert_eq!(s.mask.data[(y - dy) * w + (x - dx)], CLASS_THICK);
                }
            }
        }
        assert!(shadows > 0, "expected some shadow pixels at cover 0.3");
    }

    #[test]
    fn image_values_stay_in_range() {
        let s = synth_scene(9, 32, 32, 0.5);
        assert!(s
            .image
            .to_vec()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
    }

    #[test]
    fn crop_grid_arithmetic() {
        let s = synth_scene(5, 1024 / 8, 1024 / 8, 0.4); // 128x128 scene
        let got = crop_patches(&s.image, &s.mask, 64, false).unwrap();
        assert_eq!(got.len(), 4);

        let s = synth_scene(5, 70, 70, 0.4);
        let got = crop_patches(&s.image, &s.mask, 51, false).unwrap();
        assert_eq!(got.len(), 1);

        let s = synth_scene(5, 64, 64, 0.0);
        let got = crop_patches(&s.image, &s.mask, 32, true).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn split_ratios() {
        let samples: Vec<SceneSample> = (0..10).map(|i| synth_scene(i, 8, 8, 0.5)).collect();
        let s = split(
            samples,
            &SplitSpec {
                ratios: (6, 2, 2),
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));

        let samples: Vec<SceneSample> = (0..10).map(|i| synth_scene(i, 8, 8, 0.5)).collect();
        let s = split(
            samples,
            &SplitSpec {
                ratios: (7, 3, 0),
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 3, 0));

        let samples: Vec<SceneSample> = (0..11).map(|i| synth_scene(i, 8, 8, 0.5)).collect();
        let s = split(
            samples,
            &SplitSpec {
                ratios: (7, 3, 0),
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(s.test.len(), 0);
        assert_eq!(s.train.len() + s.val.len(), 11);
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let fingerprint = |v: &[SceneSample]| -> Vec<Vec<u8>> {
            v.iter().map(|s| s.mask.data.clone()).collect()
        };
        let mk = || -> Vec<SceneSample> { (0..23).map(|i| synth_scene(i, 8, 8, 0.5)).collect() };
        let spec = SplitSpec {
            ratios: (6, 2, 2),
            seed: 99,
        };
        let a = split(mk(), &spec).unwrap();
        let b = split(mk(), &spec).unwrap();
        assert_eq!(fingerprint(&a.train), fingerprint(&b.train));
        assert_eq!(fingerprint(&a.test), fingerprint(&b.test));
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 23);

        let zero = split(mk(), &SplitSpec { ratios: (0, 0, 0), seed: 1 });
        assert!(zero.is_err());
    }

    #[test]
    fn pgm_roundtrip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mask = Mask::new(2, 3, vec![0, 1, 2, 3, 0, 1]).unwrap();
        write_pgm(&p, &mask).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!((back.h, back.w), (2, 3));
        assert_eq!(back.data, mask.data);

        fs::write(&p, b"P5\n3 2\n65535\n______").unwrap();
        let err = read_pgm(&p).unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");

        fs::write(&p, b"P6\n3 2\n255\n______").unwrap();
        assert!(read_pgm(&p).is_err());
    }

    #[test]
    fn dir_roundtrip_and_pairing_errors() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<SceneSample> = (0..3).map(|i| synth_scene(i, 16, 16, 0.5)).collect();
        save_dir(&samples, dir.path()).unwrap();
        let back = load_dir(dir.path(), 4).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.mask.data, b.mask.data);
            assert_eq!(a.image.to_vec(), b.image.to_vec());
        }

        // orphaned image is an error naming the stem
        write_cst(&dir.path().join("0007.cst"), &samples[0].image).unwrap();
        let err = load_dir(dir.path(), 4).unwrap_err();
        assert!(err.to_string().contains("0007"), "{err}");
        fs::remove_file(dir.path().join("0007.cst")).unwrap();

        // out-of-range label names the file
        let bad = Mask::new(16, 16, vec![9; 256]).unwrap();
        write_pgm(&dir.path().join("0001.pgm"), &bad).unwrap();
        let err = load_dir(dir.path(), 4).unwrap_err();
        assert!(err.to_string().contains("0001"), "{err}");
    }

    #[test]
    fn cover_spec_parsing() {
        use std::str::FromStr;
        assert_eq!(CoverSpec::from_str("low").unwrap(), CoverSpec::Low);
        assert_eq!(CoverSpec::from_str("0.42").unwrap(), CoverSpec::Fixed(0.42));
        assert!(CoverSpec::from_str("1.5").is_err());
        assert!(CoverSpec::from_str("dense").is_err());

        let mut rng = rng_from(1);
        for _ in 0..50 {
            let v = CoverSpec::Low.sample(&mut rng);
            assert!((0.0..0.35).contains(&v));
            let v = CoverSpec::Medium.sample(&mut rng);
            assert!((0.35..=0.65).contains(&v));
            let v = CoverSpec::High.sample(&mut rng);
            assert!(v > 0.65 && v <= 1.0);
        }
    }
}
