//! Seeded synthetic segmentation data: binary shapes on flat backgrounds,
//! affine augmentation, degradations, resizing and a 50/50 split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::pgm;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    /// `[x, y]` in the unit square (x along columns).
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Disk { center: [f64; 2], radius: f64 },
    /// Axis-aligned; `half_extent` is `[half width, half height]`.
    Rectangle { center: [f64; 2], half_extent: [f64; 2] },
    MultiBlob { blobs: Vec<Blob> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    MultiBlob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub geometry: Geometry,
    pub fg: f64,
    pub bg: f64,
}

const FIT_SLACK: f64 = 1e-12;

fn disk_fits(c: [f64; 2], r: f64) -> bool {
    r > 0.0 && c.iter().all(|&v| v - r >= -FIT_SLACK && v + r <= 1.0 + FIT_SLACK)
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("shape: {m}")));
        if !(0.0..=1.0).contains(&self.fg) || !(0.0..=1.0).contains(&self.bg) {
            return bad("fg and bg must be in [0, 1]");
        }
        if self.fg == self.bg {
            return bad("fg must differ from bg");
        }
        let fits = match &self.geometry {
            Geometry::Disk { center, radius } => disk_fits(*center, *radius),
            Geometry::Rectangle { center, half_extent } => (0..2).all(|k| {
                half_extent[k] > 0.0
                    && center[k] - half_extent[k] >= -FIT_SLACK
                    && center[k] + half_extent[k] <= 1.0 + FIT_SLACK
            }),
            Geometry::MultiBlob { blobs } => {
                !blobs.is_empty() && blobs.iter().all(|b| disk_fits(b.center, b.radius))
            }
        };
        if !fits {
            return bad("geometry must lie inside the unit square");
        }
        Ok(())
    }

    /// Membership of the normalized point `(x, y)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let in_disk = |c: [f64; 2], r: f64| (x - c[0]).powi(2) + (y - c[1]).powi(2) <= r * r;
        match &self.geometry {
            Geometry::Disk { center, radius } => in_disk(*center, *radius),
            Geometry::Rectangle { center, half_extent } => {
                (x - center[0]).abs() <= half_extent[0] && (y - center[1]).abs() <= half_extent[1]
            }
            Geometry::MultiBlob { blobs } => blobs.iter().any(|b| in_disk(b.center, b.radius)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeSpec {
    pub gaussian_sigma: f64,
    pub salt_pepper_frac: f64,
    /// Box blur half-width in pixels.
    pub blur_radius: usize,
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0) || !(0.0..1.0).contains(&self.salt_pepper_frac) {
            return Err(Error::Invalid(
                "degrade: need gaussian_sigma >= 0 and salt_pepper_frac in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineSpec {
    /// Counter-clockwise degrees about the image center.
    pub rotation: f64,
    /// `[dx, dy]` in pixels.
    pub translation: [f64; 2],
    pub scale: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Default for AffineSpec {
    fn default() -> Self {
        AffineSpec {
            rotation: 0.0,
            translation: [0.0, 0.0],
            scale: 1.0,
            flip_h: false,
            flip_v: false,
        }
    }
}

impl AffineSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=2.0).contains(&self.scale) || !self.rotation.is_finite() {
            return Err(Error::Invalid("affine: scale must be in [0.5, 2] and rotation finite".into()));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        *self == AffineSpec::default()
    }

    /// Source coordinates `(row, col)` that land on output pixel `(i, j)`.
    fn inverse(&self, i: f64, j: f64, height: usize, width: usize) -> (f64, f64) {
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let mut x = j - cx - self.translation[0];
        let mut y = i - cy - self.translation[1];
        x /= self.scale;
        y /= self.scale;
        if self.rotation != 0.0 {
            // Rows grow downward, so a counter-clockwise turn on screen is
            // clockwise in (x, y); undo it here.
            let (s, c) = self.rotation.to_radians().sin_cos();
            let (xr, yr) = (c * x - s * y, s * x + c * y);
            x = xr;
            y = yr;
        }
        if self.flip_h {
            x = -x;
        }
        if self.flip_v {
            y = -y;
        }
        (y + cy, x + cx)
    }
}

/// Provenance of one generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub shape: ShapeSpec,
    pub affine: AffineSpec,
    pub degrade: DegradeSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Field,
    /// Binary ground truth.
    pub mask: Field,
    pub provenance: Option<Provenance>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Field, mask: Field) -> Result<Self> {
        image.ensure_same_shape(&mask, "sample")?;
        if !mask.is_binary() {
            return Err(Error::Invalid("sample mask must be binary".into()));
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
            provenance: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Knobs for drawing sample specs. Ranges are inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Total samples; the train split gets the extra one when odd.
    pub n: usize,
    pub height: usize,
    pub width: usize,
    /// Side length shapes are drawn, augmented and degraded at before
    /// resizing to `height × width`.
    pub render_size: usize,
    pub seed: u64,
    pub kinds: Vec<ShapeKind>,
    pub fg_range: [f64; 2],
    pub bg_range: [f64; 2],
    pub sigma_range: [f64; 2],
    pub salt_pepper_range: [f64; 2],
    pub max_blur_radius: usize,
    pub rotation_range: [f64; 2],
    /// Translation bound as a fraction of the render size.
    pub max_translation: f64,
    pub scale_range: [f64; 2],
    pub allow_flips: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 400,
            height: 32,
            width: 32,
            render_size: 64,
            seed: 0,
            kinds: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::MultiBlob],
            fg_range: [0.8, 1.0],
            bg_range: [0.0, 0.2],
            sigma_range: [0.0, 0.2],
            salt_pepper_range: [0.0, 0.1],
            max_blur_radius: 1,
            rotation_range: [-30.0, 30.0],
            max_translation: 0.1,
            scale_range: [0.8, 1.2],
            allow_flips: true,
        }
    }
}

impl GenConfig {
    /// 3000/3000 samples at 64×64.
    pub fn full_scale() -> Self {
        GenConfig {
            n: 6000,
            height: 64,
            width: 64,
            render_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data.{m}")));
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if self.n == 0 {
            return bad("n must be >= 1");
        }
        if self.height < 3 || self.width < 3 || self.render_size < 3 {
            return bad("height, width and render_size must be >= 3");
        }
        if self.kinds.is_empty() {
            return bad("kinds must not be empty");
        }
        let unit = |r: [f64; 2]| ordered(r) && r[0] >= 0.0 && r[1] <= 1.0;
        if !unit(self.fg_range) || !unit(self.bg_range) {
            return bad("fg_range and bg_range must be ordered within [0, 1]");
        }
        if self.fg_range[0] <= self.bg_range[1] && self.bg_range[0] <= self.fg_range[1] {
            return bad("fg_range and bg_range must not overlap");
        }
        if !ordered(self.sigma_range) || self.sigma_range[0] < 0.0 {
            return bad("sigma_range must be ordered and >= 0");
        }
        if !ordered(self.salt_pepper_range)
            || self.salt_pepper_range[0] < 0.0
            || self.salt_pepper_range[1] >= 1.0
        {
            return bad("salt_pepper_range must be ordered within [0, 1)");
        }
        if !ordered(self.rotation_range) {
            return bad("rotation_range must be ordered");
        }
        if !(0.0..=0.5).contains(&self.max_translation) {
            return bad("max_translation must be in [0, 0.5]");
        }
        if !ordered(self.scale_range) || self.scale_range[0] < 0.5 || self.scale_range[1] > 2.0 {
            return bad("scale_range must be ordered within [0.5, 2]");
        }
        Ok(())
    }
}

/// Rasterizes by testing each pixel center against the shape.
pub fn render_shape(spec: &ShapeSpec, height: usize, width: usize) -> Result<(Field, Field)> {
    spec.validate()?;
    let mask = Field::from_fn(height, width, |i, j| {
        let x = (j as f64 + 0.5) / width as f64;
        let y = (i as f64 + 0.5) / height as f64;
        if spec.contains(x, y) {
            1.0
        } else {
            0.0
        }
    });
    let image = mask.map(|m| spec.bg + (spec.fg - spec.bg) * m);
    Ok((image, mask))
}

fn box_blur(image: &Field, radius: usize) -> Field {
    let r = radius as isize;
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    Field::from_fn(image.height(), image.width(), |i, j| {
        let mut acc = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                acc += image.clamped(i as isize + di, j as isize + dj);
            }
        }
        acc / norm
    })
}

/// Box blur, then additive Gaussian noise, then salt-and-pepper, clamped
/// to `[0, 1]`.
pub fn degrade(image: &Field, spec: &DegradeSpec, seed: u64) -> Result<Field> {
    spec.validate()?;
    let mut out = if spec.blur_radius > 0 {
        box_blur(image, spec.blur_radius)
    } else {
        image.clone()
    };
    let mut rng = seed::rng(seed);
    if spec.gaussian_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.gaussian_sigma).expect("sigma validated");
        for v in out.values_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    if spec.salt_pepper_frac > 0.0 {
        for v in out.values_mut() {
            if rng.random_bool(spec.salt_pepper_frac) {
                *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            }
        }
    }
    for v in out.values_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

fn bilinear(img: &Field, y: f64, x: f64, fill: f64) -> f64 {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let tap = |i: isize, j: isize| {
        if (0..h).contains(&i) && (0..w).contains(&j) {
            img.get(i as usize, j as usize)
        } else {
            fill
        }
    };
    let (i, j) = (y0 as isize, x0 as isize);
    let mut v = tap(i, j) * (1.0 - fy) * (1.0 - fx);
    if fx != 0.0 {
        v += tap(i, j + 1) * (1.0 - fy) * fx;
    }
    if fy != 0.0 {
        v += tap(i + 1, j) * fy * (1.0 - fx);
        if fx != 0.0 {
            v += tap(i + 1, j + 1) * fy * fx;
        }
    }
    v
}

fn nearest(img: &Field, y: f64, x: f64, fill: f64) -> f64 {
    let (i, j) = (y.round(), x.round());
    if i >= 0.0 && j >= 0.0 && (i as usize) < img.height() && (j as usize) < img.width() {
        img.get(i as usize, j as usize)
    } else {
        fill
    }
}

/// Applies the same affine map to both fields by inverse mapping. Pixels
/// that map from outside the frame take `fill` in the image and 0 in the mask.
pub fn augment(image: &Field, mask: &Field, spec: &AffineSpec, fill: f64) -> Result<(Field, Field)> {
    spec.validate()?;
    image.ensure_same_shape(mask, "augment")?;
    if spec.is_identity() {
        return Ok((image.clone(), mask.clone()));
    }
    let (h, w) = image.shape();
    let mut out_img = Field::zeros(h, w);
    let mut out_mask = Field::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = spec.inverse(i as f64, j as f64, h, w);
            out_img.set(i, j, bilinear(image, y, x, fill));
            out_mask.set(i, j, nearest(mask, y, x, 0.0));
        }
    }
    Ok((out_img, out_mask))
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

/// Bilinear resampling with pixel-center alignment and replicated borders.
pub fn resize_bilinear(img: &Field, height: usize, width: usize) -> Field {
    if img.shape() == (height, width) {
        return img.clone();
    }
    let (sh, sw) = img.shape();
    Field::from_fn(height, width, |i, j| {
        let y = source_coord(i, sh, height).clamp(0.0, (sh - 1) as f64);
        let x = source_coord(j, sw, width).clamp(0.0, (sw - 1) as f64);
        bilinear(img, y, x, 0.0)
    })
}

pub fn resize_nearest(img: &Field, height: usize, width: usize) -> Field {
    if img.shape() == (height, width) {
        return img.clone();
    }
    let (sh, sw) = img.shape();
    Field::from_fn(height, width, |i, j| {
        let y = ((i as f64 + 0.5) * sh as f64 / height as f64).floor() as usize;
        let x = ((j as f64 + 0.5) * sw as f64 / width as f64).floor() as usize;
        img.get(y.min(sh - 1), x.min(sw - 1))
    })
}

fn draw(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn draw_disk(rng: &mut impl Rng, r_lo: f64, r_hi: f64) -> ([f64; 2], f64) {
    let radius = rng.random_range(r_lo..=r_hi);
    let center = [
        rng.random_range(radius..=1.0 - radius),
        rng.random_range(radius..=1.0 - radius),
    ];
    (center, radius)
}

fn draw_shape(cfg: &GenConfig, rng: &mut impl Rng) -> ShapeSpec {
    let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
    let geometry = match kind {
        ShapeKind::Disk => {
            let (center, radius) = draw_disk(rng, 0.2, 0.4);
            Geometry::Disk { center, radius }
        }
        ShapeKind::Rectangle => {
            let half_extent = [rng.random_range(0.18..=0.4), rng.random_range(0.18..=0.4)];
            let center = [
                rng.random_range(half_extent[0]..=1.0 - half_extent[0]),
                rng.random_range(half_extent[1]..=1.0 - half_extent[1]),
            ];
            Geometry::Rectangle { center, half_extent }
        }
        ShapeKind::MultiBlob => {
            let count = rng.random_range(2..=3);
            let blobs = (0..count)
                .map(|_| {
                    let (center, radius) = draw_disk(rng, 0.12, 0.25);
                    Blob { center, radius }
                })
                .collect();
            Geometry::MultiBlob { blobs }
        }
    };
    ShapeSpec {
        geometry,
        fg: draw(rng, cfg.fg_range),
        bg: draw(rng, cfg.bg_range),
    }
}

fn draw_affine(cfg: &GenConfig, rng: &mut impl Rng) -> AffineSpec {
    let shift = cfg.max_translation * cfg.render_size as f64;
    AffineSpec {
        rotation: draw(rng, cfg.rotation_range),
        translation: [draw(rng, [-shift, shift]), draw(rng, [-shift, shift])],
        scale: draw(rng, cfg.scale_range),
        flip_h: cfg.allow_flips && rng.random_bool(0.5),
        flip_v: cfg.allow_flips && rng.random_bool(0.5),
    }
}

fn draw_degrade(cfg: &GenConfig, rng: &mut impl Rng) -> DegradeSpec {
    DegradeSpec {
        gaussian_sigma: draw(rng, cfg.sigma_range),
        salt_pepper_frac: draw(rng, cfg.salt_pepper_range),
        blur_radius: rng.random_range(0..=cfg.max_blur_radius),
    }
}

fn quantized(f: &Field) -> Field {
    pgm::decode(&pgm::encode(f)).expect("encoder output decodes")
}

/// Draws, renders, augments, degrades and resizes one sample. The result is
/// a pure function of `(cfg, id)`.
pub fn generate_sample(cfg: &GenConfig, index: usize) -> Result<Sample> {
    let id = sample_id(index);
    let sample_seed = seed::derive(cfg.seed, &format!("sample-{id}"));
    let mut rng = seed::rng(sample_seed);
    let shape = draw_shape(cfg, &mut rng);
    let affine = draw_affine(cfg, &mut rng);
    let degrade_spec = draw_degrade(cfg, &mut rng);
    let noise_seed = rng.random();

    let size = cfg.render_size;
    let (image, mask) = render_shape(&shape, size, size)?;
    let (image, mask) = augment(&image, &mask, &affine, shape.bg)?;
    let image = degrade(&image, &degrade_spec, noise_seed)?;
    let image = quantized(&resize_bilinear(&image, cfg.height, cfg.width));
    let mask = resize_nearest(&mask, cfg.height, cfg.width);
    Ok(Sample {
        id,
        image,
        mask,
        provenance: Some(Provenance {
            shape,
            affine,
            degrade: degrade_spec,
            seed: sample_seed,
        }),
    })
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    /// Relative to the dataset root.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub shape: ShapeSpec,
    pub affine: AffineSpec,
    pub degrade: DegradeSpec,
    pub image: FileRef,
    pub mask: FileRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: GenConfig,
    pub train: usize,
    pub test: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_names(split: Split, id: &str) -> (String, String) {
    (
        format!("{}/img_{id}.pgm", split.dir()),
        format!("{}/mask_{id}.pgm", split.dir()),
    )
}

/// Generates every sample (in parallel, each from its own derived seed) and
/// splits them 50/50 by a seeded shuffle.
pub fn build_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples: Vec<Sample> = (0..cfg.n)
        .into_par_iter()
        .map(|k| generate_sample(cfg, k))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut seed::rng(seed::derive(cfg.seed, "split")));
    let n_train = cfg.n.div_ceil(2);
    let mut is_train = vec![false; cfg.n];
    for &k in &order[..n_train] {
        is_train[k] = true;
    }

    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(cfg.n - n_train);
    let mut entries = Vec::with_capacity(cfg.n);
    for (k, s) in samples.into_iter().enumerate() {
        let split = if is_train[k] { Split::Train } else { Split::Test };
        let (img_path, mask_path) = file_names(split, &s.id);
        let prov = s.provenance.clone().expect("generated samples carry provenance");
        entries.push(ManifestEntry {
            id: s.id.clone(),
            split,
            seed: prov.seed,
            shape: prov.shape,
            affine: prov.affine,
            degrade: prov.degrade,
            image: FileRef {
                path: img_path,
                sha256: sha256_hex(&pgm::encode(&s.image)),
            },
            mask: FileRef {
                path: mask_path,
                sha256: sha256_hex(&pgm::encode(&s.mask)),
            },
        });
        match split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    let manifest = Manifest {
        config: cfg.clone(),
        train: train.len(),
        test: test.len(),
        entries,
    };
    Ok(Dataset { train, test, manifest })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `root/{train,test}/{img,mask}_<id>.pgm` and `root/manifest.json`.
pub fn write_dataset(ds: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.dir());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (split, samples) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
        for s in samples {
            let (img, mask) = file_names(split, &s.id);
            pgm::write_pgm(&s.image, root.join(img))?;
            pgm::write_pgm(&s.mask, root.join(mask))?;
        }
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, ds.manifest.to_json()).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    let path = root.as_ref().join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::format("manifest", e.to_string()))
}

fn load_checked(root: &Path, file: &FileRef) -> Result<Field> {
    let path: PathBuf = root.join(&file.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != file.sha256 {
        return Err(Error::format("checksum", format!("{} does not match the manifest", file.path)));
    }
    pgm::decode(&bytes)
}

/// Reads a dataset written by [`write_dataset`], verifying checksums.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.entries {
        let mut s = Sample::new(e.id.clone(), load_checked(root, &e.image)?, load_checked(root, &e.mask)?)?;
        s.provenance = Some(Provenance {
            shape: e.shape.clone(),
            affine: e.affine.clone(),
            degrade: e.degrade.clone(),
            seed: e.seed,
        });
        match e.split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok(Dataset { train, test, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(center: [f64; 2], radius: f64) -> ShapeSpec {
        ShapeSpec {
            geometry: Geometry::Disk { center, radius },
            fg: 1.0,
            bg: 0.0,
        }
    }

    fn count(f: &Field) -> f64 {
        f.values().iter().sum()
    }

    #[test]
    fn disk_area_matches_analytic() {
        let (image, mask) = render_shape(&disk([0.5, 0.5], 0.25), 64, 64).unwrap();
        let expected = std::f64::consts::PI * (0.25f64 * 64.0).powi(2);
        assert!((count(&mask) - expected).abs() <= 0.03 * expected);
        assert_eq!(image, mask);
    }

    #[test]
    fn full_rectangle_fills_frame() {
        let spec = ShapeSpec {
            geometry: Geometry::Rectangle {
                center: [0.5, 0.5],
                half_extent: [0.5, 0.5],
            },
            fg: 0.8,
            bg: 0.2,
        };
        let (image, mask) = render_shape(&spec, 9, 7).unwrap();
        assert!(mask.values().iter().all(|&v| v == 1.0));
        assert!(image.values().iter().all(|&v| v == 0.8));
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(render_shape(&disk([0.1, 0.5], 0.3), 8, 8).is_err());
        let same = ShapeSpec { fg: 0.3, bg: 0.3, ..disk([0.5, 0.5], 0.2) };
        assert!(render_shape(&same, 8, 8).is_err());
    }

    #[test]
    fn degrade_identity_and_determinism() {
        let img = Field::from_fn(16, 16, |i, j| ((i * 16 + j) % 7) as f64 / 7.0);
        assert_eq!(degrade(&img, &DegradeSpec::default(), 3).unwrap(), img);
        let spec = DegradeSpec {
            gaussian_sigma: 0.1,
            salt_pepper_frac: 0.05,
            blur_radius: 1,
        };
        let a = degrade(&img, &spec, 9).unwrap();
        assert_eq!(a, degrade(&img, &spec, 9).unwrap());
        assert_ne!(a, degrade(&img, &spec, 10).unwrap());
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn salt_pepper_rate() {
        let img = Field::filled(64, 64, 0.5);
        let spec = DegradeSpec {
            salt_pepper_frac: 0.1,
            ..DegradeSpec::default()
        };
        let out = degrade(&img, &spec, 1234).unwrap();
        let changed = out.values().iter().filter(|&&v| v != 0.5).count() as f64;
        let expected = 0.1 * 4096.0;
        assert!((changed - expected).abs() <= 0.2 * expected, "{changed}");
    }

    #[test]
    fn box_blur_preserves_constants() {
        let img = Field::filled(6, 6, 0.4);
        let spec = DegradeSpec {
            blur_radius: 2,
            ..DegradeSpec::default()
        };
        let out = degrade(&img, &spec, 0).unwrap();
        assert!(out.values().iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn augment_identity_and_flip_involution() {
        let img = Field::from_fn(10, 13, |i, j| (i * 13 + j) as f64 / 130.0);
        let mask = img.map(|v| if v > 0.4 { 1.0 } else { 0.0 });
        let id = AffineSpec::default();
        assert_eq!(augment(&img, &mask, &id, 0.0).unwrap(), (img.clone(), mask.clone()));
        let flip = AffineSpec {
            flip_h: true,
            ..AffineSpec::default()
        };
        let (a, am) = augment(&img, &mask, &flip, 0.0).unwrap();
        assert_eq!(a.get(2, 0), img.get(2, 12));
        let (b, bm) = augment(&a, &am, &flip, 0.0).unwrap();
        assert_eq!(b, img);
        assert_eq!(bm, mask);
    }

    #[test]
    fn quarter_turn_transposes_rectangle() {
        let spec = ShapeSpec {
            geometry: Geometry::Rectangle {
                center: [0.5, 0.5],
                half_extent: [0.35, 0.15],
            },
            fg: 1.0,
            bg: 0.0,
        };
        let (img, mask) = render_shape(&spec, 40, 40).unwrap();
        let rot = AffineSpec {
            rotation: 90.0,
            ..AffineSpec::default()
        };
        let (_, turned) = augment(&img, &mask, &rot, 0.0).unwrap();
        let extent = |m: &Field, rows: bool| {
            let mut hit = vec![false; 40];
            for i in 0..40 {
                for j in 0..40 {
                    if m.get(i, j) > 0.5 {
                        hit[if rows { i } else { j }] = true;
                    }
                }
            }
            hit.iter().filter(|&&b| b).count()
        };
        assert_eq!(extent(&turned, true), extent(&mask, false));
        assert_eq!(extent(&turned, false), extent(&mask, true));
        assert!((count(&turned) - count(&mask)).abs() <= 0.02 * count(&mask));
    }

    #[test]
    fn augment_moves_mask_with_image() {
        // Encode the row index in the image; the mask picks one row. After
        // any map, masked pixels must sample from that row.
        let img = Field::from_fn(21, 21, |i, _| i as f64);
        let mask = Field::from_fn(21, 21, |i, _| if i == 10 { 1.0 } else { 0.0 });
        let spec = AffineSpec {
            rotation: 37.0,
            translation: [1.5, -2.0],
            scale: 1.3,
            flip_h: true,
            flip_v: false,
        };
        let (a, am) = augment(&img, &mask, &spec, -100.0).unwrap();
        let (b, bm) = augment(&img, &mask, &spec, 100.0).unwrap();
        assert_eq!(am, bm);
        let mut checked = 0;
        for n in 0..a.len() {
            // Pixels that blend in the fill value differ between the runs.
            if am.values()[n] == 1.0 && a.values()[n] == b.values()[n] {
                assert!((a.values()[n] - 10.0).abs() <= 0.5 + 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn resize_cases() {
        let img = Field::from_fn(8, 8, |i, j| (i + j) as f64);
        assert_eq!(resize_bilinear(&img, 8, 8), img);
        let small = resize_bilinear(&img, 4, 4);
        // Exact halving averages 2×2 blocks.
        assert!((small.get(0, 0) - 1.0).abs() < 1e-12);
        let mask = img.map(|v| if v > 7.0 { 1.0 } else { 0.0 });
        assert!(resize_nearest(&mask, 3, 5).is_binary());
    }

    #[test]
    fn small_build_splits_and_repeats() {
        let cfg = GenConfig {
            n: 10,
            seed: 7,
            height: 16,
            width: 16,
            render_size: 32,
            ..GenConfig::default()
        };
        let a = build_dataset(&cfg).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (5, 5));
        let b = build_dataset(&cfg).unwrap();
        assert_eq!(a.manifest.to_json(), b.manifest.to_json());
        for s in a.train.iter().chain(&a.test) {
            assert!(s.mask.is_binary());
            assert!(s.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let odd = GenConfig { n: 7, ..cfg };
        let c = build_dataset(&odd).unwrap();
        assert_eq!((c.train.len(), c.test.len()), (4, 3));
    }

    #[test]
    fn disk_roundtrip_and_checksums() {
        let cfg = GenConfig {
            n: 6,
            seed: 1,
            height: 12,
            width: 12,
            render_size: 24,
            ..GenConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        for (x, y) in back.train.iter().zip(&ds.train) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
        let e = &ds.manifest.entries[0];
        let bytes = fs::read(dir.path().join(&e.mask.path)).unwrap();
        assert!(bytes[pgm::header(12, 12).len()..].iter().all(|&b| b == 0 || b == 255));

        fs::write(dir.path().join(&e.image.path), b"P5\n3 3\n255\n000000000").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { field: "checksum", .. })));
    }
}
