//! Procedural visual-inspection corpus: textured objects, four defect
//! morphologies with pixel-exact masks, deterministic splits and the
//! on-disk dataset format (`manifest.json`, `images/`, `masks/`).

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{Image, Mask};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Fraction of normal images (by sorted id) assigned to the reference split.
pub const NORMAL_REFERENCE_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Disc,
    Tile,
    Wood,
}

impl ObjectKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Disc => "disc",
            ObjectKind::Tile => "tile",
            ObjectKind::Wood => "wood",
        }
    }

    pub const ALL: [ObjectKind; 3] = [ObjectKind::Disc, ObjectKind::Tile, ObjectKind::Wood];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    /// Dark radial blob.
    Hole,
    /// Thin bright anti-aliased polyline.
    Scratch,
    /// Hue-shifted blob.
    Stain,
    /// Branched dark polyline.
    Crack,
}

impl DefectKind {
    /// Admissible mask area as a fraction of the image area.
    pub fn area_bounds(self) -> (f64, f64) {
        match self {
            DefectKind::Hole => (0.01, 0.10),
            DefectKind::Scratch => (0.01, 0.10),
            DefectKind::Stain => (0.02, 0.15),
            DefectKind::Crack => (0.01, 0.12),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectCategory {
    pub name: String,
    pub kind: DefectKind,
    /// Blend strength of the defect appearance, in `(0, 1]`.
    #[serde(default = "one")]
    pub strength: f32,
    /// Size multiplier applied to the kind's nominal dimensions.
    #[serde(default = "one")]
    pub scale: f32,
}

fn one() -> f32 {
    1.0
}

impl DefectCategory {
    pub fn new(name: &str, kind: DefectKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            strength: 1.0,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub image_size: usize,
    pub object_kinds: Vec<ObjectKind>,
    pub defect_categories: Vec<DefectCategory>,
    pub defects_per_category: usize,
    pub normals_count: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            object_kinds: vec![ObjectKind::Disc],
            defect_categories: vec![
                DefectCategory::new("hole", DefectKind::Hole),
                DefectCategory::new("scratch", DefectKind::Scratch),
                DefectCategory::new("stain", DefectKind::Stain),
                DefectCategory::new("crack", DefectKind::Crack),
            ],
            defects_per_category: 12,
            normals_count: 60,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.image_size >= 16, Config, "corpus.image_size must be >= 16, got {}", self.image_size);
        ensure!(self.image_size % 4 == 0, Config, "corpus.image_size must be a multiple of 4");
        ensure!(!self.object_kinds.is_empty(), Config, "corpus.object_kinds is empty");
        ensure!(!self.defect_categories.is_empty(), Config, "corpus.defect_categories is empty");
        ensure!(self.defects_per_category >= 1, Config, "corpus.defects_per_category must be >= 1");
        ensure!(self.normals_count >= 1, Config, "corpus.normals_count must be >= 1");
        let mut names: Vec<&str> = self.defect_categories.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        for w in names.windows(2) {
            ensure!(w[0] != w[1], Config, "duplicate defect category name {:?}", w[0]);
        }
        for c in &self.defect_categories {
            ensure!(!c.name.is_empty() && c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-'),
                Config, "defect category name {:?} must be non-empty [A-Za-z0-9-]", c.name);
            ensure!(c.strength > 0.0 && c.strength <= 1.0, Config, "category {} strength must be in (0, 1]", c.name);
            ensure!(c.scale > 0.25 && c.scale <= 2.0, Config, "category {} scale must be in (0.25, 2]", c.name);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Normal,
    Defect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Reference,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub role: Role,
    pub category: Option<String>,
    pub image_path: String,
    pub mask_path: Option<String>,
    pub split: Split,
    /// Object family shown in the image; used to build prompts.
    pub object: String,
    /// Normal record the defect was composited onto, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub image_size: usize,
    /// How normal images are paired with masks at generation time.
    pub normal_pairing: String,
    /// Fraction of defect pairs per category in the reference split.
    pub reference_fraction: f64,
    /// Fraction of normals (by sorted id) in the reference split.
    pub normal_reference_fraction: f64,
    pub records: Vec<DatasetRecord>,
}

/// Records plus decoded pixel data, keyed by record id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: BTreeMap<String, Image>,
    pub masks: BTreeMap<String, Mask>,
}

impl Dataset {
    pub fn empty(image_size: usize) -> Self {
        Self {
            manifest: Manifest {
                version: MANIFEST_VERSION,
                image_size,
                normal_pairing: "round-robin".into(),
                reference_fraction: 1.0 / 3.0,
                normal_reference_fraction: NORMAL_REFERENCE_FRACTION,
                records: Vec::new(),
            },
            images: BTreeMap::new(),
            masks: BTreeMap::new(),
        }
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.manifest.records
    }

    pub fn record(&self, id: &str) -> Option<&DatasetRecord> {
        self.manifest.records.iter().find(|r| r.id == id)
    }

    pub fn image(&self, id: &str) -> Result<&Image> {
        self.images
            .get(id)
            .ok_or_else(|| Error::Data(format!("no image for record {id}")))
    }

    pub fn mask(&self, id: &str) -> Result<&Mask> {
        self.masks
            .get(id)
            .ok_or_else(|| Error::Data(format!("no mask for record {id}")))
    }

    /// Adds a record with its pixels, deriving file paths from the id.
    pub fn push(&mut self, mut record: DatasetRecord, image: Image, mask: Option<Mask>) {
        record.image_path = format!("images/{}.png", record.id);
        record.mask_path = mask.as_ref().map(|_| format!("masks/{}.png", record.id));
        self.images.insert(record.id.clone(), image);
        if let Some(m) = mask {
            self.masks.insert(record.id.clone(), m);
        }
        self.manifest.records.push(record);
    }

    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self
            .records()
            .iter()
            .filter_map(|r| r.category.clone())
            .collect();
        cats.sort();
        cats.dedup();
        cats
    }

    pub fn objects(&self) -> Vec<String> {
        let mut objs: Vec<String> = self.records().iter().map(|r| r.object.clone()).collect();
        objs.sort();
        objs.dedup();
        objs
    }

    /// Normal records, optionally restricted to one split, sorted by id.
    pub fn normals(&self, split: Option<Split>) -> Vec<&DatasetRecord> {
        let mut v: Vec<&DatasetRecord> = self
            .records()
            .iter()
            .filter(|r| r.role == Role::Normal && split.map_or(true, |s| r.split == s))
            .collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    /// Defect records of `category` (all categories when `None`), optionally
    /// restricted to one split, sorted by id.
    pub fn defects(&self, category: Option<&str>, split: Option<Split>) -> Vec<&DatasetRecord> {
        let mut v: Vec<&DatasetRecord> = self
            .records()
            .iter()
            .filter(|r| {
                r.role == Role::Defect
                    && category.map_or(true, |c| r.category.as_deref() == Some(c))
                    && split.map_or(true, |s| r.split == s)
            })
            .collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    /// Checks the record invariants against the loaded pixel data.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in self.records() {
            ensure!(seen.insert(r.id.as_str()), Data, "duplicate record id {}", r.id);
            let img = self.image(&r.id)?;
            ensure!(
                img.height == self.manifest.image_size && img.width == self.manifest.image_size,
                Data,
                "record {} has size {}x{}, manifest says {}",
                r.id, img.height, img.width, self.manifest.image_size
            );
            match r.role {
                Role::Normal => {
                    ensure!(r.mask_path.is_none(), Data, "normal record {} lists a mask", r.id);
                }
                Role::Defect => {
                    ensure!(r.mask_path.is_some(), Data, "defect record {} has no mask_path", r.id);
                    ensure!(r.category.is_some(), Data, "defect record {} has no category", r.id);
                    let m = self.mask(&r.id)?;
                    ensure!(m.area() >= 1, Data, "defect record {} has an empty mask", r.id);
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        for sub in ["images", "masks"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for r in self.records() {
            self.image(&r.id)?.save_png(&dir.join(&r.image_path))?;
            if let Some(mp) = &r.mask_path {
                self.mask(&r.id)?.save_png(&dir.join(mp))?;
            }
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("bad manifest {}: {e}", path.display())))?;
        ensure!(
            manifest.version <= MANIFEST_VERSION,
            Data,
            "manifest version {} is newer than supported {MANIFEST_VERSION}",
            manifest.version
        );
        let mut ds = Dataset {
            manifest,
            images: BTreeMap::new(),
            masks: BTreeMap::new(),
        };
        for r in &ds.manifest.records {
            let ip = dir.join(&r.image_path);
            ensure!(ip.exists(), Data, "manifest lists {} but the file is missing", ip.display());
            ds.images.insert(r.id.clone(), Image::load_png(&ip)?);
            if let Some(mp) = &r.mask_path {
                let mp = dir.join(mp);
                ensure!(mp.exists(), Data, "mask file {} for record {} is missing", mp.display(), r.id);
                ds.masks.insert(r.id.clone(), Mask::load_png(&mp)?);
            }
        }
        ds.validate()?;
        Ok(ds)
    }
}

/// Procedurally generates the corpus. Pure function of `config`; every
/// record draws from its own derived RNG stream. Splits are assigned with
/// [`apply_split`] using a one-third reference fraction.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Dataset> {
    config.validate()?;
    let s = config.image_size;
    let mut ds = Dataset::empty(s);
    for &object in &config.object_kinds {
        let ol = rng::label(object.name());
        let mut normal_ids = Vec::with_capacity(config.normals_count);
        for i in 0..config.normals_count {
            let mut r = rng::stream(config.seed, &[ol, 0, i as u64]);
            let img = render_normal(object, s, &mut r);
            let id = format!("{}_normal_{i:03}", object.name());
            normal_ids.push(id.clone());
            ds.push(
                DatasetRecord {
                    id,
                    role: Role::Normal,
                    category: None,
                    image_path: String::new(),
                    mask_path: None,
                    split: Split::Reference,
                    object: object.name().into(),
                    source: None,
                },
                img,
                None,
            );
        }
        for (ci, cat) in config.defect_categories.iter().enumerate() {
            for i in 0..config.defects_per_category {
                let mut r = rng::stream(config.seed, &[ol, 1 + ci as u64, i as u64]);
                // Sources cycle through normals, offset per category.
                let src_idx = (ci * config.defects_per_category + i) % normal_ids.len();
                let src_id = normal_ids[src_idx].clone();
                let base = ds.image(&src_id)?.clone();
                let (img, mask) = composite_defect(&base, cat, object, &mut r)?;
                ds.push(
                    DatasetRecord {
                        id: format!("{}_{}_{i:03}", object.name(), cat.name),
                        role: Role::Defect,
                        category: Some(cat.name.clone()),
                        image_path: String::new(),
                        mask_path: None,
                        split: Split::Heldout,
                        object: object.name().into(),
                        source: Some(src_id),
                    },
                    img,
                    Some(mask),
                );
            }
        }
    }
    apply_split(&mut ds, 1.0 / 3.0)?;
    Ok(ds)
}

/// Deterministic per-category split by sorted id: the first
/// `ceil(fraction * n)` defect pairs go to the reference set.
pub fn split_reference(
    dataset: &Dataset,
    fraction: f64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    ensure!(fraction > 0.0 && fraction < 1.0, InvalidArgument, "split fraction must be in (0, 1), got {fraction}");
    let mut reference = Vec::new();
    let mut heldout = Vec::new();
    for object in dataset.objects() {
        for cat in dataset.categories() {
            let mut recs: Vec<&DatasetRecord> = dataset
                .defects(Some(&cat), None)
                .into_iter()
                .filter(|r| r.object == object)
                .collect();
            if recs.is_empty() {
                continue;
            }
            recs.sort_by(|a, b| a.id.cmp(&b.id));
            ensure!(recs.len() >= 2, Data, "category {cat} of {object} has {} defect pair(s); need >= 2 to split", recs.len());
            let n_ref = reference_count(recs.len(), fraction);
            for (i, r) in recs.into_iter().enumerate() {
                let mut r = r.clone();
                r.split = if i < n_ref { Split::Reference } else { Split::Heldout };
                if i < n_ref {
                    reference.push(r);
                } else {
                    heldout.push(r);
                }
            }
        }
    }
    Ok((reference, heldout))
}

fn reference_count(n: usize, fraction: f64) -> usize {
    // Guard against 12 * (1/3) evaluating to 4.000000000000001.
    let n_ref = ((n as f64 * fraction) - 1e-9).ceil() as usize;
    n_ref.clamp(1, n - 1)
}

/// Writes the split into the dataset's records (defects per category,
/// normals by [`NORMAL_REFERENCE_FRACTION`]).
pub fn apply_split(dataset: &mut Dataset, fraction: f64) -> Result<()> {
    let (reference, heldout) = split_reference(dataset, fraction)?;
    let assign: BTreeMap<String, Split> = reference
        .into_iter()
        .chain(heldout)
        .map(|r| (r.id, r.split))
        .collect();
    let mut normals: Vec<String> = dataset.normals(None).iter().map(|r| r.id.clone()).collect();
    normals.sort();
    let mut per_object: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for id in normals {
        let obj = dataset.record(&id).unwrap().object.clone();
        per_object.entry(obj).or_default().push(id);
    }
    let mut normal_assign = BTreeMap::new();
    for ids in per_object.values() {
        let n_ref = ((ids.len() as f64 * NORMAL_REFERENCE_FRACTION).ceil() as usize).min(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let s = if i < n_ref { Split::Reference } else { Split::Heldout };
            normal_assign.insert(id.clone(), s);
        }
    }
    for r in &mut dataset.manifest.records {
        if let Some(s) = assign.get(&r.id).or_else(|| normal_assign.get(&r.id)) {
            r.split = *s;
        }
    }
    dataset.manifest.reference_fraction = fraction;
    dataset.manifest.normal_reference_fraction = NORMAL_REFERENCE_FRACTION;
    Ok(())
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Renders one defect-free instance with per-instance texture jitter.
pub fn render_normal(kind: ObjectKind, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f32;
    let mut img = Image::filled(3, size, size, 0.0);
    let tint: [f32; 3] = [
        rng.gen_range(-0.06..0.06),
        rng.gen_range(-0.06..0.06),
        rng.gen_range(-0.06..0.06),
    ];
    let phase = rng.gen_range(0.0..2.0 * PI);
    match kind {
        ObjectKind::Disc => {
            let cx = s / 2.0 + rng.gen_range(-1.5..1.5);
            let cy = s / 2.0 + rng.gen_range(-1.5..1.5);
            let radius = s * rng.gen_range(0.36..0.42);
            let freq = rng.gen_range(0.55..0.75);
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    let d = (fx * fx + fy * fy).sqrt();
                    let edge = ((radius - d) / 1.2).clamp(0.0, 1.0);
                    let shade = 0.12 * (1.0 - d / radius).max(0.0);
                    let tex = 0.05 * (freq * d + phase).sin();
                    let disc = [0.45 + shade + tex, 0.30 + shade + tex, 0.05 + shade * 0.5 + tex];
                    let bg = [-0.55, -0.45, -0.35];
                    for c in 0..3 {
                        img.set(c, y, x, lerp(bg[c], disc[c], edge) + tint[c]);
                    }
                }
            }
        }
        ObjectKind::Tile => {
            let period = rng.gen_range(7.0..9.0f32);
            let off = rng.gen_range(0.0..period);
            for y in 0..size {
                for x in 0..size {
                    let gx = ((x as f32 + off) % period).min(period - (x as f32 + off) % period);
                    let gy = ((y as f32 + off) % period).min(period - (y as f32 + off) % period);
                    let grout = if gx.min(gy) < 0.8 { 1.0 } else { 0.0 };
                    let tex = 0.04 * (0.9 * x as f32 + 0.7 * y as f32 + phase).sin();
                    let tile = [0.15 + tex, 0.35 + tex, 0.40 + tex];
                    let line = [-0.30, -0.25, -0.20];
                    for c in 0..3 {
                        img.set(c, y, x, lerp(tile[c], line[c], grout) + tint[c]);
                    }
                }
            }
        }
        ObjectKind::Wood => {
            let freq = rng.gen_range(0.45..0.65f32);
            let warp = rng.gen_range(1.0..2.5f32);
            for y in 0..size {
                for x in 0..size {
                    let u = freq * (x as f32 + warp * (0.3 * y as f32 + phase).sin());
                    let ring = 0.5 + 0.5 * u.sin();
                    let wood = [0.30 + 0.18 * ring, 0.05 + 0.12 * ring, -0.30 + 0.08 * ring];
                    for c in 0..3 {
                        img.set(c, y, x, wood[c] + tint[c]);
                    }
                }
            }
        }
    }
    for v in &mut img.data {
        *v = (*v + rng.gen_range(-0.02..0.02f32)).clamp(-1.0, 1.0);
    }
    img.quantize();
    img
}

/// Geometry of one defect instance; `coverage(y, x)` is the per-pixel
/// appearance weight, nonzero only inside the mask.
struct Defect {
    mask: Mask,
    weight: Vec<f32>,
}

fn dist_to_segment(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn polyline(rng: &mut ChaCha8Rng, start: (f32, f32), length: f32, segments: usize, wobble: f32) -> Vec<(f32, f32)> {
    let mut pts = vec![start];
    let mut angle = rng.gen_range(0.0..2.0 * PI);
    let seg = length / segments as f32;
    for _ in 0..segments {
        angle += rng.gen_range(-wobble..wobble);
        let last = *pts.last().unwrap();
        pts.push((last.0 + seg * angle.cos(), last.1 + seg * angle.sin()));
    }
    pts
}

fn line_defect(size: usize, lines: &[Vec<(f32, f32)>], half_width: f32) -> Defect {
    let mut mask = Mask::zeros(size, size);
    let mut weight = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let d = lines
                .iter()
                .flat_map(|l| l.windows(2).map(|w| dist_to_segment(px, py, w[0], w[1])))
                .fold(f32::INFINITY, f32::min);
            if d <= half_width + 0.5 {
                mask.set(y, x, 1.0);
                weight[y * size + x] = (1.0 - (d - half_width).max(0.0) * 0.6).clamp(0.4, 1.0);
            }
        }
    }
    Defect { mask, weight }
}

fn blob_defect(size: usize, center: (f32, f32), radii: (f32, f32), rot: f32, lobes: f32, lobe_phase: f32, soft: bool) -> Defect {
    let mut mask = Mask::zeros(size, size);
    let mut weight = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 + 0.5 - center.0, y as f32 + 0.5 - center.1);
            let (u, v) = (dx * rot.cos() + dy * rot.sin(), -dx * rot.sin() + dy * rot.cos());
            let theta = v.atan2(u);
            let wobble = 1.0 + 0.15 * (lobes * theta + lobe_phase).sin();
            let r = ((u / radii.0).powi(2) + (v / radii.1).powi(2)).sqrt() / wobble;
            if r <= 1.0 {
                mask.set(y, x, 1.0);
                weight[y * size + x] = if soft { 0.55 + 0.45 * (1.0 - r) } else { 0.75 + 0.25 * (1.0 - r) };
            }
        }
    }
    Defect { mask, weight }
}

fn sample_defect(kind: DefectKind, size: usize, scale: f32, rng: &mut ChaCha8Rng) -> Defect {
    let s = size as f32;
    let unit = s / 32.0 * scale;
    let center = (s * rng.gen_range(0.3..0.7), s * rng.gen_range(0.3..0.7));
    match kind {
        DefectKind::Hole => {
            let r = unit * rng.gen_range(2.2..4.2);
            blob_defect(size, center, (r, r * rng.gen_range(0.8..1.0)), rng.gen_range(0.0..PI), 3.0, rng.gen_range(0.0..2.0 * PI), false)
        }
        DefectKind::Stain => {
            let r = unit * rng.gen_range(3.0..5.0);
            blob_defect(size, center, (r, r * rng.gen_range(0.55..0.9)), rng.gen_range(0.0..PI), 5.0, rng.gen_range(0.0..2.0 * PI), true)
        }
        DefectKind::Scratch => {
            let len = unit * rng.gen_range(10.0..18.0);
            let segs = rng.gen_range(2..4);
            let start = (center.0, center.1);
            let line = polyline(rng, start, len, segs, 0.35);
            line_defect(size, &[line], 0.45 * scale.max(0.5))
        }
        DefectKind::Crack => {
            let len = unit * rng.gen_range(10.0..16.0);
            let main = polyline(rng, center, len, 5, 0.9);
            let mut lines = vec![main.clone()];
            let branches = rng.gen_range(1..3);
            for _ in 0..branches {
                let at = main[rng.gen_range(1..main.len() - 1)];
                let blen = len * rng.gen_range(0.3..0.5);
                lines.push(polyline(rng, at, blen, 2, 0.8));
            }
            line_defect(size, &lines, 0.4 * scale.max(0.5))
        }
    }
}

/// Composites a defect of `category` onto `base`, returning the defect
/// image and its binary mask. Pixels outside the mask are copied verbatim.
pub fn composite_defect(
    base: &Image,
    category: &DefectCategory,
    _object: ObjectKind,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, Mask)> {
    let size = base.height;
    let (lo, hi) = category.kind.area_bounds();
    let mut defect = None;
    for _ in 0..1000 {
        let d = sample_defect(category.kind, size, category.scale, rng);
        let frac = d.mask.area_fraction();
        if frac >= lo && frac <= hi {
            defect = Some(d);
            break;
        }
    }
    let defect = defect.ok_or_else(|| {
        Error::Config(format!(
            "category {}: could not place a defect within area bounds {lo}..{hi} at size {size}",
            category.name
        ))
    })?;
    let mut img = base.clone();
    let p = base.plane_len();
    let strength = category.strength;
    for i in 0..p {
        if defect.mask.data[i] == 0.0 {
            continue;
        }
        let w = defect.weight[i] * strength;
        for c in 0..3 {
            let v = base.data[c * p + i];
            let out = match category.kind {
                DefectKind::Hole => lerp(v, [-0.92, -0.92, -0.95][c], w),
                DefectKind::Crack => lerp(v, [-0.85, -0.88, -0.90][c], w),
                DefectKind::Scratch => lerp(v, [0.92, 0.92, 0.88][c], w),
                DefectKind::Stain => (v + w * [0.45, 0.05, 0.55][c] * if c == 1 { -1.0 } else { 1.0 }).clamp(-1.0, 1.0),
            };
            img.data[c * p + i] = out;
        }
    }
    img.quantize();
    Ok((img, defect.mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            defect_categories: vec![
                DefectCategory::new("hole", DefectKind::Hole),
                DefectCategory::new("scratch", DefectKind::Scratch),
            ],
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn record_counts_by_enumeration() {
        let ds = generate_corpus(&small_config()).unwrap();
        let normals = ds.records().iter().filter(|r| r.role == Role::Normal).count();
        let defects = ds.records().iter().filter(|r| r.role == Role::Defect).count();
        assert_eq!((ds.records().len(), normals, defects), (84, 60, 24));
        assert_eq!(ds.defects(Some("hole"), None).len(), 12);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_corpus(&small_config()).unwrap();
        let b = generate_corpus(&small_config()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusConfig { seed: 9, ..small_config() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn defects_only_touch_masked_pixels() {
        let ds = generate_corpus(&CorpusConfig::default()).unwrap();
        for r in ds.defects(None, None) {
            let img = ds.image(&r.id).unwrap();
            let src = ds.image(r.source.as_ref().unwrap()).unwrap();
            let m = ds.mask(&r.id).unwrap();
            let p = img.plane_len();
            let mut changed_inside = 0;
            for i in 0..p {
                for c in 0..3 {
                    let same = img.data[c * p + i].to_bits() == src.data[c * p + i].to_bits();
                    if m.data[i] == 0.0 {
                        assert!(same, "{} differs outside its mask", r.id);
                    } else if !same {
                        changed_inside += 1;
                    }
                }
            }
            assert!(changed_inside > 0, "{} is invisible", r.id);
        }
    }

    #[test]
    fn mask_areas_within_kind_bounds() {
        let ds = generate_corpus(&CorpusConfig {
            object_kinds: ObjectKind::ALL.to_vec(),
            ..CorpusConfig::default()
        })
        .unwrap();
        for r in ds.defects(None, None) {
            let kind = CorpusConfig::default()
                .defect_categories
                .iter()
                .find(|c| Some(&c.name) == r.category.as_ref())
                .unwrap()
                .kind;
            let (lo, hi) = kind.area_bounds();
            let f = ds.mask(&r.id).unwrap().area_fraction();
            assert!(f >= lo && f <= hi, "{}: area {f}", r.id);
        }
    }

    #[test]
    fn one_third_split_of_twelve() {
        let ds = generate_corpus(&small_config()).unwrap();
        let (reference, heldout) = split_reference(&ds, 1.0 / 3.0).unwrap();
        let hole_ref = reference.iter().filter(|r| r.category.as_deref() == Some("hole")).count();
        let hole_held = heldout.iter().filter(|r| r.category.as_deref() == Some("hole")).count();
        assert_eq!((hole_ref, hole_held), (4, 8));
        let again = split_reference(&ds, 1.0 / 3.0).unwrap();
        assert_eq!(again.0, reference);
    }

    #[test]
    fn half_split_of_two_and_undersized_category() {
        let cfg = CorpusConfig {
            defects_per_category: 2,
            ..small_config()
        };
        let ds = generate_corpus(&cfg).unwrap();
        let (r, h) = split_reference(&ds, 0.5).unwrap();
        assert_eq!((r.len(), h.len()), (2, 2));
        let cfg = CorpusConfig {
            defects_per_category: 1,
            ..small_config()
        };
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small_config();
        c.image_size = 8;
        assert!(matches!(generate_corpus(&c), Err(Error::Config(_))));
        let mut c = small_config();
        c.defect_categories[1].name = "hole".into();
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<CorpusConfig>(r#"{"defect_categories":[{"name":"x","kind":"dent"}]}"#).is_err());
    }

    #[test]
    fn save_load_round_trip_and_missing_mask() {
        let ds = generate_corpus(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let files = fs::read_dir(dir.path().join("images")).unwrap().count();
        assert_eq!(files, 84);
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let victim = ds.defects(None, None)[0].mask_path.clone().unwrap();
        fs::remove_file(dir.path().join(victim)).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Data(_))));
    }
}
