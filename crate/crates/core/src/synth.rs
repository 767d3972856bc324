//! Synthetic two-domain detection data: rectangles and ellipses over a smooth
//! background, a photometric domain shift, and the on-disk dataset format.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::Target;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

pub const NUM_SHAPE_CLASSES: usize = 2;
pub const CLASS_RECTANGLE: usize = 0;
pub const CLASS_ELLIPSE: usize = 1;
/// Fog strengths above this are refused by [`DomainShift::validate`].
pub const MAX_FOG: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    pub max_pair_iou: f64,
    /// Minimum distance between object centers in pixels.
    pub min_center_dist: f64,
    /// Background base gray level range, 0-255.
    pub background_range: (u8, u8),
    /// Amplitude of the low-frequency background lattice, 0-255.
    pub background_noise: u8,
    /// Minimum gap between object and background mean intensity, 0-255.
    pub min_contrast: u8,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_objects: 1,
            max_objects: 4,
            min_size: 12,
            max_size: 28,
            max_pair_iou: 0.1,
            min_center_dist: 12.0,
            background_range: (60, 190),
            background_noise: 40,
            min_contrast: 90,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < crate::image::MIN_SIDE || self.height < crate::image::MIN_SIDE {
            return bad(format!("scene {}x{} too small", self.width, self.height));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects".into());
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size > self.width.min(self.height) {
            return bad(format!("object size range {}..={} invalid", self.min_size, self.max_size));
        }
        if !(0.0..=1.0).contains(&self.max_pair_iou) {
            return bad("max_pair_iou outside [0,1]".into());
        }
        if self.background_range.0 > self.background_range.1 {
            return bad("background range reversed".into());
        }
        Ok(())
    }
}

/// Photometric transform separating the target domain from the source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShift {
    pub brightness: f64,
    pub contrast: f64,
    /// Standard deviation of zero-mean uniform pixel noise.
    pub noise: f64,
    pub fog: f64,
    pub fog_gray: f64,
    /// Rotation about the gray axis, degrees.
    pub hue_degrees: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            noise: 0.0,
            fog: 0.0,
            fog_gray: 0.7,
            hue_degrees: 0.0,
        }
    }

    /// Shift used by the default benchmark: low contrast under fog. Noise
    /// and hue rotation are left off because they mostly add false
    /// positives that self-training then reinforces.
    pub fn benchmark() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.7,
            noise: 0.0,
            fog: 0.4,
            fog_gray: 0.7,
            hue_degrees: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.brightness.abs() <= 0.5
            && self.contrast > 0.0
            && self.contrast <= 2.0
            && (0.0..=0.2).contains(&self.noise)
            && (0.0..=MAX_FOG).contains(&self.fog)
            && (0.0..=1.0).contains(&self.fog_gray)
            && self.hue_degrees.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("domain shift out of bounds: {self:?}")))
        }
    }

    pub fn is_identity(&self) -> bool {
        self.brightness == 0.0
            && self.contrast == 1.0
            && self.noise == 0.0
            && self.fog == 0.0
            && self.hue_degrees == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image: Image,
    pub objects: Vec<Target>,
    pub domain: Domain,
}

/// Pixel-space placement of one object: `[x0, x0 + w) x [y0, y0 + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub class_id: usize,
}

impl Placement {
    /// Whether the object covers pixel `(x, y)`. Ellipses test the pixel
    /// center in doubled integer coordinates.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        if self.class_id == CLASS_RECTANGLE {
            return true;
        }
        let dx = (2 * x + 1) as i64 - (2 * self.x0 + self.w) as i64;
        let dy = (2 * y + 1) as i64 - (2 * self.y0 + self.h) as i64;
        let (w, h) = (self.w as i64, self.h as i64);
        dx * dx * h * h + dy * dy * w * w <= w * w * h * h
    }

    pub fn bbox(&self, width: usize, height: usize) -> BBox {
        let (fw, fh) = (width as f64, height as f64);
        BBox {
            cx: (self.x0 as f64 + self.w as f64 / 2.0) / fw,
            cy: (self.y0 as f64 + self.h as f64 / 2.0) / fh,
            w: self.w as f64 / fw,
            h: self.h as f64 / fh,
        }
    }

    fn iou(&self, o: &Placement) -> f64 {
        let ix = (self.x0 + self.w).min(o.x0 + o.w).saturating_sub(self.x0.max(o.x0));
        let iy = (self.y0 + self.h).min(o.y0 + o.h).saturating_sub(self.y0.max(o.y0));
        let inter = (ix * iy) as f64;
        inter / ((self.w * self.h + o.w * o.h) as f64 - inter)
    }

    fn center_dist(&self, o: &Placement) -> f64 {
        let dx = (2 * self.x0 + self.w) as f64 - (2 * o.x0 + o.w) as f64;
        let dy = (2 * self.y0 + self.h) as f64 - (2 * o.y0 + o.h) as f64;
        (dx * dx + dy * dy).sqrt() / 2.0
    }
}

/// A rendered scene before conversion to floating point.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// `H x W x 3` bytes.
    pub pixels: Vec<u8>,
    pub placements: Vec<Placement>,
}

const LATTICE: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 200;

/// Draw placements and colors, then render with integer arithmetic only.
pub fn render_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Scene {
    let (w, h) = (spec.width, spec.height);

    let base = rng.random_range(spec.background_range.0..=spec.background_range.1) as i32;
    let amp = spec.background_noise as i32;
    let mut lattice = [[[0i32; 3]; LATTICE]; LATTICE];
    for row in lattice.iter_mut() {
        for node in row.iter_mut() {
            let common = rng.random_range(-amp..=amp);
            for v in node.iter_mut() {
                *v = (base + common + rng.random_range(-amp / 4..=amp / 4)).clamp(0, 255);
            }
        }
    }
    let mut pixels = vec![0u8; w * h * 3];
    // bilinear over a LATTICE x LATTICE grid spanning the image, 8.8 fixed point
    let (sx, sy) = ((w - 1).max(1) as i64, (h - 1).max(1) as i64);
    let span = (LATTICE - 1) as i64;
    for y in 0..h {
        let fy = y as i64 * span * 256 / sy;
        let (iy, ty) = (((fy >> 8) as usize).min(LATTICE - 2), fy - (((fy >> 8).min(span - 1)) << 8));
        for x in 0..w {
            let fx = x as i64 * span * 256 / sx;
            let (ix, tx) = (((fx >> 8) as usize).min(LATTICE - 2), fx - (((fx >> 8).min(span - 1)) << 8));
            for c in 0..3 {
                let v00 = lattice[iy][ix][c] as i64;
                let v01 = lattice[iy][ix + 1][c] as i64;
                let v10 = lattice[iy + 1][ix][c] as i64;
                let v11 = lattice[iy + 1][ix + 1][c] as i64;
                let top = v00 * (256 - tx) + v01 * tx;
                let bot = v10 * (256 - tx) + v11 * tx;
                let v = (top * (256 - ty) + bot * ty + (1 << 15)) >> 16;
                pixels[(y * w + x) * 3 + c] = v.clamp(0, 255) as u8;
            }
        }
    }

    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placements: Vec<Placement> = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let ow = rng.random_range(spec.min_size..=spec.max_size);
            let oh = rng.random_range(spec.min_size..=spec.max_size);
            let p = Placement {
                x0: rng.random_range(0..=w - ow),
                y0: rng.random_range(0..=h - oh),
                w: ow,
                h: oh,
                class_id: rng.random_range(0..NUM_SHAPE_CLASSES),
            };
            let fits = placements
                .iter()
                .all(|q| p.iou(q) <= spec.max_pair_iou && p.center_dist(q) >= spec.min_center_dist);
            if fits {
                placements.push(p);
                break;
            }
        }
    }

    for p in &placements {
        let color = loop {
            let c: [i32; 3] = std::array::from_fn(|_| rng.random_range(0..=255));
            if ((c[0] + c[1] + c[2]) / 3 - base).abs() >= spec.min_contrast as i32 {
                break c;
            }
        };
        for y in p.y0..p.y0 + p.h {
            for x in p.x0..p.x0 + p.w {
                if p.covers(x, y) {
                    for ch in 0..3 {
                        pixels[(y * w + x) * 3 + ch] = color[ch] as u8;
                    }
                }
            }
        }
    }

    Scene {
        width: w,
        height: h,
        pixels,
        placements,
    }
}

pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<LabeledImage> {
    spec.validate()?;
    let scene = render_scene(spec, rng);
    let image = Image::from_u8(scene.width, scene.height, 3, &scene.pixels)?;
    let objects = scene
        .placements
        .iter()
        .map(|p| Target {
            bbox: p.bbox(scene.width, scene.height),
            class_id: p.class_id,
        })
        .collect();
    Ok(LabeledImage {
        image,
        objects,
        domain: Domain::Source,
    })
}

/// Pixel transform in the order hue, contrast, brightness, fog, noise, then
/// clamp to `[0, 1]`. Labels are untouched. Only noise consumes the rng.
pub fn apply_shift<R: Rng + ?Sized>(img: &LabeledImage, shift: &DomainShift, rng: &mut R) -> LabeledImage {
    let mut out = img.clone();
    out.domain = Domain::Target;
    if shift.is_identity() {
        return out;
    }
    let channels = out.image.channels();
    let theta = shift.hue_degrees.to_radians();
    let (cos, sin) = (theta.cos(), theta.sin());
    let third = 1.0 / 3.0;
    let k = (1.0f64 / 3.0).sqrt() * sin;
    let a = cos + (1.0 - cos) * third;
    let b = (1.0 - cos) * third - k;
    let c = (1.0 - cos) * third + k;
    let rot = [[a, b, c], [c, a, b], [b, c, a]];
    let half_width = shift.noise * 3f64.sqrt();

    for px in out.image.data_mut().chunks_mut(channels) {
        let mut v: Vec<f64> = px.iter().map(|&x| x as f64).collect();
        if channels == 3 && shift.hue_degrees != 0.0 {
            let r = [v[0], v[1], v[2]];
            for (i, row) in rot.iter().enumerate() {
                v[i] = row[0] * r[0] + row[1] * r[1] + row[2] * r[2];
            }
        }
        for x in v.iter_mut() {
            *x = (*x - 0.5) * shift.contrast + 0.5 + shift.brightness;
            *x = (1.0 - shift.fog) * *x + shift.fog * shift.fog_gray;
            if half_width > 0.0 {
                *x += rng.random_range(-half_width..=half_width);
            }
        }
        for (dst, x) in px.iter_mut().zip(v) {
            *dst = x.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// A set of labelled images sharing a domain, plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub domain: Domain,
    pub seed: u64,
    pub spec: SceneSpec,
    pub shift: DomainShift,
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// `count` scenes, image `i` drawn from stream `i` of the seeded generator,
/// rendered in parallel. Target-domain images get `shift`; all images are
/// quantized to 8 bits.
pub fn generate_dataset(
    spec: &SceneSpec,
    shift: &DomainShift,
    domain: Domain,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    shift.validate()?;
    let items = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut item = generate_scene(spec, &mut rng)?;
            if domain == Domain::Target {
                item = apply_shift(&item, shift, &mut rng);
            }
            item.image.quantize_u8();
            item.domain = domain;
            Ok(item)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        domain,
        seed,
        spec: *spec,
        shift: if domain == Domain::Target { *shift } else { DomainShift::identity() },
        items,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    domain: Domain,
    seed: u64,
    count: usize,
    width: usize,
    height: usize,
    spec: SceneSpec,
    shift: DomainShift,
}

const MANIFEST: &str = "manifest.json";
const FORMAT_TAG: &str = "mixadapt-dataset-1";

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:04}.ppm"))
}

fn label_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("labels").join(format!("{i:04}.txt"))
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "PPM needs 3 channels, image has {}",
            image.channels()
        )));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(image.to_u8());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: msg.to_string(),
    };
    // header: magic, width, height, maxval separated by whitespace, with
    // optional comment lines
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM dimension"));
    let (w, h) = (dim(&fields[1])?, dim(&fields[2])?);
    if fields[3] != "255" {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated PPM data"))?;
    Image::from_u8(w, h, 3, body)
}

pub fn format_labels(objects: &[Target]) -> String {
    let mut s = String::new();
    for o in objects {
        let b = &o.bbox;
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", o.class_id, b.cx, b.cy, b.w, b.h);
    }
    s
}

pub fn parse_labels(path: &Path, text: &str) -> Result<Vec<Target>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(err(format!("expected `class cx cy w h`, found {} fields", parts.len())));
        }
        let class_id: usize = parts[0]
            .parse()
            .map_err(|_| err(format!("bad class id `{}`", parts[0])))?;
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts[1..]) {
            *slot = p.parse().map_err(|_| err(format!("bad number `{p}`")))?;
        }
        let bbox = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?;
        out.push(Target { bbox, class_id });
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let (width, height) = data
        .items
        .first()
        .map(|it| (it.image.width(), it.image.height()))
        .unwrap_or((data.spec.width, data.spec.height));
    for (i, item) in data.items.iter().enumerate() {
        write_ppm(&image_path(dir, i), &item.image)?;
        let lp = label_path(dir, i);
        fs::write(&lp, format_labels(&item.objects)).map_err(|e| Error::io(&lp, e))?;
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        domain: data.domain,
        seed: data.seed,
        count: data.items.len(),
        width,
        height,
        spec: data.spec,
        shift: data.shift,
    };
    let mp = dir.join(MANIFEST);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&mp, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mp = dir.join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Parse {
            path: mp,
            line: 1,
            msg: format!("unknown dataset format `{}`", manifest.format),
        });
    }
    let items = (0..manifest.count)
        .into_par_iter()
        .map(|i| {
            let image = read_ppm(&image_path(dir, i))?;
            let lp = label_path(dir, i);
            let text = fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
            Ok(LabeledImage {
                image,
                objects: parse_labels(&lp, &text)?,
                domain: manifest.domain,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        domain: manifest.domain,
        seed: manifest.seed,
        spec: manifest.spec,
        shift: manifest.shift,
        items,
    })
}

/// Sizes and seeds of the four splits of a paired benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub scene: SceneSpec,
    pub shift: DomainShift,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            shift: DomainShift::benchmark(),
            source_train: 200,
            source_test: 100,
            target_train: 200,
            target_test: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub source_train: Dataset,
    pub source_test: Dataset,
    /// Labels are kept on disk for the oracle; adaptation never reads them.
    pub target_train: Dataset,
    pub target_test: Dataset,
}

pub const SPLITS: [&str; 4] = ["source_train", "source_test", "target_train", "target_test"];

impl Benchmark {
    /// Each split uses its own derived seed so split sizes can change
    /// without reshuffling the others.
    pub fn generate(spec: &BenchmarkSpec) -> Result<Self> {
        let seed = |k: u64| spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        let g = |domain, n, k| generate_dataset(&spec.scene, &spec.shift, domain, n, seed(k));
        Ok(Self {
            source_train: g(Domain::Source, spec.source_train, 1)?,
            source_test: g(Domain::Source, spec.source_test, 2)?,
            target_train: g(Domain::Target, spec.target_train, 3)?,
            target_test: g(Domain::Target, spec.target_test, 4)?,
        })
    }

    pub fn splits(&self) -> [(&'static str, &Dataset); 4] {
        [
            (SPLITS[0], &self.source_train),
            (SPLITS[1], &self.source_test),
            (SPLITS[2], &self.target_train),
            (SPLITS[3], &self.target_test),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, d) in self.splits() {
            write_dataset(&dir.join(name), d)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            source_train: read_dataset(&dir.join(SPLITS[0]))?,
            source_test: read_dataset(&dir.join(SPLITS[1]))?,
            target_train: read_dataset(&dir.join(SPLITS[2]))?,
            target_test: read_dataset(&dir.join(SPLITS[3]))?,
        })
    }
}
