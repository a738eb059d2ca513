//! Dataset loading and writing.
//!
//! Supported sources:
//!
//! * a directory tree `root/<split>/<class>/*.pgm|*.ppm` (binary P5/P6, 8-bit);
//! * a packed file `root/<split>.bin`;
//! * a procedurally generated corpus.
//!
//! The only preprocessing is the `p / maxval` mapping to `[0, 1]`.
//!
//! Packed layout, all integers little-endian `u32`:
//!
//! ```text
//! "ULDD" | count | channels | height | width | count·c·h·w raw u8 pixels
//! [ class_count | class_count × (len | UTF-8 name) | count × label ]
//! ```
//!
//! The trailing label block is optional.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::Image;
use crate::episodes::{Episode, LabeledSet, UnlabeledPool};
use crate::error::{Error, Result};

pub const PACKED_MAGIC: &[u8; 4] = b"ULDD";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// Omniglot character split by 1-based class index: train `[1, 1150)`,
/// val `[1150, 1200)`, test `[1200, 1623]`.
pub fn omniglot_split(class_index: usize) -> Option<Split> {
    match class_index {
        1..=1149 => Some(Split::Train),
        1150..=1199 => Some(Split::Val),
        1200..=1623 => Some(Split::Test),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    /// Empty for unlabeled loads.
    pub class_names: Vec<String>,
    pub shape: (usize, usize, usize),
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Unlabeled(UnlabeledPool),
    Labeled(LabeledSet),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Unlabeled(p) => p.len(),
            Dataset::Labeled(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------- PNM

fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn header_uint(path: &Path, bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, start as u64, format!("expected {what}")))
}

/// Decodes a binary PGM (P5) or PPM (P6) with `maxval <= 255`.
pub fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::format(
                path,
                0,
                "not a binary PGM/PPM (expected P5 or P6)",
            ))
        }
    };
    let mut pos = 2;
    let width = header_uint(path, bytes, &mut pos, "width")?;
    let height = header_uint(path, bytes, &mut pos, "height")?;
    let maxval = header_uint(path, bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            path,
            pos as u64,
            format!("unsupported maxval {maxval}"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, pos as u64, "zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height * channels;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| {
        Error::format(
            path,
            pos as u64,
            format!("truncated raster: need {n} bytes"),
        )
    })?;
    let scale = maxval as f32;
    // PNM is interleaved; Image is planar
    let img = Image::from_fn(channels, height, width, |c, y, x| {
        raster[(y * width + x) * channels + c] as f32 / scale
    });
    Ok(img)
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(path, &bytes)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes P5 for one channel, P6 for three. Values are clamped to `[0, 1]`.
pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.shape();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::invalid(format!(
                "cannot write {c}-channel image as PNM"
            )))
        }
    };
    let mut buf = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                buf.push(to_u8(img.get(ch, y, x)));
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Tiles `rows` into one image with a one-pixel gap, clamped for display.
pub fn tile_grid(rows: &[Vec<Image>]) -> Result<Image> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::invalid("empty image grid"))?;
    let (c, h, w) = first.shape();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gh = rows.len() * (h + 1) - 1;
    let gw = cols * (w + 1) - 1;
    let mut out = Image::zeros(c, gh, gw);
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            img.check_same_shape(first, "tile_grid")?;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(
                            ch,
                            r * (h + 1) + y,
                            k * (w + 1) + x,
                            img.get(ch, y, x).clamp(0.0, 1.0),
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- packed

/// Writes images, and optionally their labels, in the packed format.
pub fn write_packed(
    path: &Path,
    images: &[Image],
    labels: Option<(&[String], &[usize])>,
) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot pack zero images"))?;
    let (c, h, w) = first.shape();
    let mut buf = Vec::with_capacity(20 + images.len() * c * h * w);
    buf.extend_from_slice(PACKED_MAGIC);
    for v in [images.len(), c, h, w] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in images {
        img.check_same_shape(first, "write_packed")?;
        buf.extend(img.pixels().iter().map(|&v| to_u8(v)));
    }
    if let Some((names, labels)) = labels {
        if labels.len() != images.len() {
            return Err(Error::invalid("label count differs from image count"));
        }
        buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for n in names {
            buf.extend_from_slice(&(n.len() as u32).to_le_bytes());
            buf.extend_from_slice(n.as_bytes());
        }
        for &l in labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub struct PackedData {
    pub images: Vec<Image>,
    pub class_names: Vec<String>,
    pub labels: Option<Vec<usize>>,
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {left} left"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn read_packed(path: &Path) -> Result<PackedData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != PACKED_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected ULDD"));
    }
    let count = r.u32("count")?;
    let (c, h, w) = (r.u32("channels")?, r.u32("height")?, r.u32("width")?);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::format(path, 8, "zero image dimension"));
    }
    let per = c * h * w;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = r.take(per, "pixels")?;
        images.push(Image::new(
            c,
            h,
            w,
            raw.iter().map(|&p| p as f32 / 255.0).collect(),
        )?);
    }
    if r.pos == bytes.len() {
        return Ok(PackedData {
            images,
            class_names: Vec::new(),
            labels: None,
        });
    }
    let classes = r.u32("class count")?;
    let mut class_names = Vec::with_capacity(classes);
    for _ in 0..classes {
        let len = r.u32("class name length")?;
        let at = r.pos as u64;
        let name = std::str::from_utf8(r.take(len, "class name")?)
            .map_err(|_| Error::format(path, at, "class name is not UTF-8"))?;
        class_names.push(name.to_owned());
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos as u64;
        let l = r.u32("label")?;
        if l >= classes {
            return Err(Error::format(
                path,
                at,
                format!("label {l} exceeds class count {classes}"),
            ));
        }
        labels.push(l);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            r.pos as u64,
            "trailing bytes after label block",
        ));
    }
    Ok(PackedData {
        images,
        class_names,
        labels: Some(labels),
    })
}

// ---------------------------------------------------------------- directory trees

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_pnm(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("pgm" | "ppm")
    )
}

/// Reads `dir/<class>/*.pgm|*.ppm`. Classes and files are in lexicographic order.
pub fn read_class_tree(dir: &Path) -> Result<(Vec<Image>, Vec<usize>, Vec<String>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    let mut first: Option<(PathBuf, (usize, usize, usize))> = None;
    for class_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let label = names.len();
        names.push(
            class_dir
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned(),
        );
        for file in sorted_entries(&class_dir)?
            .into_iter()
            .filter(|p| is_pnm(p))
        {
            let img = read_pnm(&file)?;
            match &first {
                None => first = Some((file.clone(), img.shape())),
                Some((p0, s0)) if *s0 != img.shape() => {
                    return Err(Error::invalid(format!(
                        "inconsistent image shapes: {} is {:?} but {} is {:?}",
                        p0.display(),
                        s0,
                        file.display(),
                        img.shape()
                    )));
                }
                Some(_) => {}
            }
            images.push(img);
            labels.push(label);
        }
    }
    if images.is_empty() {
        return Err(Error::invalid(format!(
            "no PGM/PPM images under {}",
            dir.display()
        )));
    }
    Ok((images, labels, names))
}

/// Loads `split` from `root`, preferring `root/<split>.bin` over the directory tree.
///
/// With `as_labeled = false` every label is dropped before returning.
pub fn load_dataset(
    root: &Path,
    split: Split,
    as_labeled: bool,
) -> Result<(Dataset, DatasetManifest)> {
    let packed = root.join(format!("{}.bin", split.as_str()));
    let (images, labels, names) = if packed.is_file() {
        let d = read_packed(&packed)?;
        match d.labels {
            Some(l) => (d.images, Some(l), d.class_names),
            None => (d.images, None, Vec::new()),
        }
    } else {
        let (images, labels, names) = read_class_tree(&root.join(split.as_str()))?;
        (images, Some(labels), names)
    };
    let shape = images
        .first()
        .map(Image::shape)
        .ok_or_else(|| Error::invalid(format!("{} split is empty", split.as_str())))?;
    let count = images.len();
    if as_labeled {
        let labels = labels.ok_or_else(|| {
            Error::invalid(format!(
                "{} has no label block; cannot load as labeled",
                packed.display()
            ))
        })?;
        let set = LabeledSet::new(images, labels, names.clone())?;
        let manifest = DatasetManifest {
            root: root.to_path_buf(),
            split,
            class_names: names,
            shape,
            count,
        };
        Ok((Dataset::Labeled(set), manifest))
    } else {
        let pool = UnlabeledPool::new(images)?;
        let manifest = DatasetManifest {
            root: root.to_path_buf(),
            split,
            class_names: Vec::new(),
            shape,
            count,
        };
        Ok((Dataset::Unlabeled(pool), manifest))
    }
}

/// Converts `root/<split>/<class>/*` into `out`, keeping labels.
pub fn pack_directory(split_dir: &Path, out: &Path) -> Result<usize> {
    let (images, labels, names) = read_class_tree(split_dir)?;
    write_packed(out, &images, Some((&names, &labels)))?;
    Ok(images.len())
}

/// Writes a labeled set as `dir/<class>/<i>.pgm|ppm`.
pub fn write_class_tree(dir: &Path, set: &LabeledSet) -> Result<()> {
    let ext = if set.shape().0 == 1 { "pgm" } else { "ppm" };
    for (c, name) in set.class_names().iter().enumerate() {
        let cdir = dir.join(name);
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        for (k, &i) in set.items_of(c).iter().enumerate() {
            write_pnm(&cdir.join(format!("{k:04}.{ext}")), &set.images()[i])?;
        }
    }
    Ok(())
}

/// Resizes every image in place of a copy of `set`.
pub fn resize_set(set: &LabeledSet, height: usize, width: usize) -> Result<LabeledSet> {
    let images = set
        .images()
        .iter()
        .map(|im| im.resize(height, width))
        .collect::<Result<Vec<_>>>()?;
    LabeledSet::new(images, set.labels().to_vec(), set.class_names().to_vec())
}

/// Writes an episode's images plus a `manifest.txt` listing
/// `set index label rotation source file` per item.
pub fn dump_episode(dir: &Path, episode: &Episode) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = if episode.support[0].image.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    };
    let mut manifest = format!(
        "# seed {} n_way {} k_shot {} m_query {}\n# set index label rotation source file\n",
        episode.seed,
        episode.n_way,
        episode.k_shot,
        episode.m_query()
    );
    for (i, s) in episode.support.iter().enumerate() {
        let file = format!("support_{i:03}.{ext}");
        write_pnm(&dir.join(&file), &s.image.clamped())?;
        manifest.push_str(&format!("support {i} {} - {} {file}\n", s.label, s.source));
    }
    for (i, q) in episode.query.iter().enumerate() {
        let file = format!("query_{i:03}.{ext}");
        write_pnm(&dir.join(&file), &q.image.clamped())?;
        let rot = q.rotation.map_or("-".to_string(), |r| r.to_string());
        manifest.push_str(&format!(
            "query {i} {} {rot} {} {file}\n",
            q.label, q.source
        ));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

// ---------------------------------------------------------------- synthetic corpus

#[derive(Clone, Copy, Debug)]
enum Motif {
    /// Oriented bar through `(cy, cx)` at angle `theta`, half-length `len`.
    Bar {
        cy: f32,
        cx: f32,
        theta: f32,
        len: f32,
    },
    Disk {
        cy: f32,
        cx: f32,
        r: f32,
    },
    Ring {
        cy: f32,
        cx: f32,
        r: f32,
    },
    /// Checkerboard patch of the given cell size and phase inside a square.
    Checker {
        cy: f32,
        cx: f32,
        half: f32,
        cell: f32,
        phase: bool,
    },
}

struct ClassSpec {
    motifs: Vec<Motif>,
    /// Per-channel tint, all ones for grayscale.
    tint: [f32; 3],
}

fn random_motif<R: Rng>(rng: &mut R) -> Motif {
    let cy = rng.random_range(0.25..0.75);
    let cx = rng.random_range(0.25..0.75);
    match rng.random_range(0..4) {
        0 => Motif::Bar {
            cy,
            cx,
            theta: rng.random_range(0.0..std::f32::consts::PI),
            len: rng.random_range(0.2..0.4),
        },
        1 => Motif::Disk {
            cy,
            cx,
            r: rng.random_range(0.08..0.16),
        },
        2 => Motif::Ring {
            cy,
            cx,
            r: rng.random_range(0.12..0.22),
        },
        _ => Motif::Checker {
            cy,
            cx,
            half: rng.random_range(0.12..0.2),
            cell: rng.random_range(0.06..0.1),
            phase: rng.random_bool(0.5),
        },
    }
}

/// Coverage of motif `m` at unit-square point `(y, x)` with stroke half-width `sw`.
fn motif_value(m: &Motif, y: f32, x: f32, sw: f32) -> f32 {
    let soft = |d: f32| (1.0 - (d / sw).max(0.0)).clamp(0.0, 1.0);
    match *m {
        Motif::Bar { cy, cx, theta, len } => {
            let (s, c) = theta.sin_cos();
            let (dy, dx) = (y - cy, x - cx);
            let along = dx * c + dy * s;
            let across = (-dx * s + dy * c).abs();
            let over = (along.abs() - len).max(0.0);
            soft((across * across + over * over).sqrt() - sw)
        }
        Motif::Disk { cy, cx, r } => soft(((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r),
        Motif::Ring { cy, cx, r } => {
            soft((((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r).abs() - sw * 0.6)
        }
        Motif::Checker {
            cy,
            cx,
            half,
            cell,
            phase,
        } => {
            let (dy, dx) = (y - cy, x - cx);
            if dy.abs() > half || dx.abs() > half {
                return 0.0;
            }
            let iy = ((dy + half) / cell).floor() as i32;
            let ix = ((dx + half) / cell).floor() as i32;
            if ((iy + ix) % 2 == 0) ^ phase {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Within-class variation of the synthetic corpus. Ranges are symmetric
/// around zero for shift and angle, `[lo, hi)` otherwise; lengths are in
/// units of the image side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticStyle {
    pub shift: f32,
    /// Radians.
    pub angle: f32,
    pub scale: (f32, f32),
    pub stroke: (f32, f32),
    pub gain: (f32, f32),
    pub background: (f32, f32),
    /// Probability of an extra, untransformed motif that belongs to no class.
    pub distractor_prob: f64,
    pub distractor_level: (f32, f32),
    pub noise_sigma: f32,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        Self {
            shift: 0.06,
            angle: 0.35,
            scale: (0.9, 1.1),
            stroke: (0.035, 0.06),
            gain: (0.45, 1.0),
            background: (0.0, 0.2),
            distractor_prob: 0.5,
            distractor_level: (0.3, 0.6),
            noise_sigma: 0.06,
        }
    }
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates `classes × per_class` images of shape `(c, h, w)` with the
/// default [`SyntheticStyle`].
///
/// Each class is a fixed random arrangement of two or three motifs (oriented
/// bars, disks, rings, checker patches). Each instance draws its own shift,
/// rotation, scale, stroke width, contrast and background level, may carry a
/// dimmer distractor motif, and gets additive Gaussian noise, clamped to `[0, 1]`.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<LabeledSet> {
    generate_synthetic_styled(classes, per_class, shape, seed, &SyntheticStyle::default())
}

pub fn generate_synthetic_styled(
    classes: usize,
    per_class: usize,
    shape: (usize, usize, usize),
    seed: u64,
    style: &SyntheticStyle,
) -> Result<LabeledSet> {
    let (c, h, w) = shape;
    if classes == 0 || per_class == 0 || h == 0 || w == 0 || !(c == 1 || c == 3) {
        return Err(Error::invalid(format!(
            "generate_synthetic: need positive counts and 1 or 3 channels, got {classes} classes × {per_class}, shape {shape:?}"
        )));
    }
    if !(style.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&style.distractor_prob) {
        return Err(Error::invalid(
            "generate_synthetic: noise σ must be ≥ 0 and distractor probability in [0, 1]",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<ClassSpec> = (0..classes)
        .map(|_| {
            let k = rng.random_range(2..=3);
            let mut tint = [1.0f32; 3];
            if c == 3 {
                for t in &mut tint {
                    *t = rng.random_range(0.35..1.0);
                }
            }
            ClassSpec {
                motifs: (0..k).map(|_| random_motif(&mut rng)).collect(),
                tint,
            }
        })
        .collect();
    let noise = Normal::new(0.0f32, style.noise_sigma).expect("σ checked above");
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (label, spec) in specs.iter().enumerate() {
        for _ in 0..per_class {
            let shift_y = draw(&mut rng, (-style.shift, style.shift));
            let shift_x = draw(&mut rng, (-style.shift, style.shift));
            let angle = draw(&mut rng, (-style.angle, style.angle));
            let scale = draw(&mut rng, style.scale);
            let sw = draw(&mut rng, style.stroke);
            let gain = draw(&mut rng, style.gain);
            let background = draw(&mut rng, style.background);
            let distractor = rng.random_bool(style.distractor_prob).then(|| {
                (
                    random_motif(&mut rng),
                    draw(&mut rng, style.distractor_level),
                )
            });
            let (sa, ca) = angle.sin_cos();
            let mut img = Image::from_fn(c, h, w, |ch, y, x| {
                // pixel center in the unit square, undo the instance transform
                let (py, px) = (
                    (y as f32 + 0.5) / h as f32 - 0.5,
                    (x as f32 + 0.5) / w as f32 - 0.5,
                );
                let (py, px) = (py - shift_y, px - shift_x);
                let (ry, rx) = (
                    (ca * py - sa * px) / scale + 0.5,
                    (sa * py + ca * px) / scale + 0.5,
                );
                let mut v = spec
                    .motifs
                    .iter()
                    .map(|m| motif_value(m, ry, rx, sw))
                    .fold(0.0f32, f32::max);
                if let Some((m, level)) = &distractor {
                    // untransformed, so it carries no class information
                    let (uy, ux) = ((y as f32 + 0.5) / h as f32, (x as f32 + 0.5) / w as f32);
                    v = v.max(level * motif_value(m, uy, ux, sw));
                }
                background + (1.0 - background) * gain * v * spec.tint[ch]
            });
            for p in img.pixels_mut() {
                *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            images.push(img);
            labels.push(label);
        }
    }
    let names = (0..classes).map(|i| format!("class_{i:03}")).collect();
    LabeledSet::new(images, labels, names)
}
