//! Manifests, rotation augmentation, the four-way train/test split, random
//! crop+flip patches, and the synthetic dataset generator.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{read_pdt, write_pdt, Rng, Tensor};

pub const MANIFEST_HEADER: [&str; 3] = ["path", "label", "category"];

/// Where a record's pixels come from.
#[derive(Clone, Debug)]
pub enum ImageSource {
    File(PathBuf),
    Memory(Arc<Tensor>),
}

/// One labelled image: label 1 is high quality, 0 low quality.
#[derive(Clone, Debug)]
pub struct ManifestRecord {
    pub source: ImageSource,
    pub label: usize,
    pub category: String,
    /// Clockwise quarter turns applied on load.
    pub quarter_turns: u8,
}

impl ManifestRecord {
    pub fn in_memory(image: Tensor, label: usize, category: &str) -> Self {
        ManifestRecord {
            source: ImageSource::Memory(Arc::new(image)),
            label,
            category: category.to_string(),
            quarter_turns: 0,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.source {
            ImageSource::File(p) => Some(p),
            ImageSource::Memory(_) => None,
        }
    }

    /// Reads (if needed), validates, and rotates the image.
    pub fn image(&self) -> Result<Tensor> {
        let raw = match &self.source {
            ImageSource::File(p) => read_pdt(p)?,
            ImageSource::Memory(t) => (**t).clone(),
        };
        if raw.rank() != 3 || raw.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "{}: expected a [3, S, S] image, got {:?}",
                self.describe(),
                raw.shape()
            )));
        }
        rotate_quarter(&raw, self.quarter_turns)
    }

    fn describe(&self) -> String {
        match &self.source {
            ImageSource::File(p) => p.display().to_string(),
            ImageSource::Memory(_) => "<memory>".into(),
        }
    }
}

/// A decoded image with its label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Arc<Tensor>,
    pub label: usize,
    pub category: String,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        Dataset { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for r in &self.records {
            c[r.label.min(1)] += 1;
        }
        c
    }

    /// Decodes every image; all must share one `[3, S, S]` shape. Returns the samples and `S`.
    pub fn load(&self) -> Result<(Vec<Sample>, usize)> {
        let mut size = None;
        let mut out = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let image = r.image()?;
            let &[_, h, w] = image.shape() else { unreachable!() };
            if h != w {
                return Err(Error::Domain(format!("{}: image is {h}x{w}, not square", r.describe())));
            }
            match size {
                None => size = Some(h),
                Some(s) if s != h => {
                    return Err(Error::Shape(format!(
                        "{}: image size {h} differs from the dataset's {s}",
                        r.describe()
                    )))
                }
                _ => {}
            }
            out.push(Sample {
                image: Arc::new(image),
                label: r.label,
                category: r.category.clone(),
            });
        }
        Ok((out, size.unwrap_or(0)))
    }
}

/// Parses a `path,label,category` CSV. Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    let mut saw_header = false;
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if !saw_header {
            if row.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected header {}", MANIFEST_HEADER.join(",")),
                });
            }
            saw_header = true;
            continue;
        }
        if row.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 columns, found {}", row.len()),
            });
        }
        let label = match &row[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        };
        let p = PathBuf::from(&row[0]);
        let p = if p.is_absolute() { p } else { base.join(p) };
        records.push(ManifestRecord {
            source: ImageSource::File(p),
            label,
            category: row[2].to_string(),
            quarter_turns: 0,
        });
    }
    if !saw_header {
        return Err(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        });
    }
    Ok(Dataset { records })
}

/// Writes a manifest for file-backed records, with paths relative to `dir` where possible.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in records {
        let p = r
            .path()
            .ok_or_else(|| Error::Contract("cannot write an in-memory record to a manifest".into()))?;
        if r.quarter_turns != 0 {
            return Err(Error::Contract("rotated records have no manifest form".into()));
        }
        let rel = p.strip_prefix(dir).unwrap_or(p);
        w.write_record([rel.to_string_lossy().as_ref(), &r.label.to_string(), &r.category])
            .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rotates every `[C, S, S]` plane clockwise by `turns` quarter turns.
///
/// One turn sends pixel `(y, x)` to `(x, S - 1 - y)`.
pub fn rotate_quarter(image: &Tensor, turns: u8) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!(
            "rotation expects [C, H, W], got {:?}",
            image.shape()
        )));
    };
    let turns = turns % 4;
    if turns == 0 {
        return Ok(image.clone());
    }
    if h != w {
        return Err(Error::Domain(format!("cannot rotate a non-square {h}x{w} image")));
    }
    let s = h;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let plane = ch * s * s;
        for y in 0..s {
            for x in 0..s {
                let (ty, tx) = match turns {
                    1 => (x, s - 1 - y),
                    2 => (s - 1 - y, s - 1 - x),
                    _ => (s - 1 - x, y),
                };
                out[plane + ty * s + tx] = src[plane + y * s + x];
            }
        }
    }
    Tensor::from_vec(image.shape(), out)
}

/// Each record followed by its 90, 180 and 270 degree rotations.
pub fn rotate_augment(d: &Dataset) -> Result<Dataset> {
    let mut out = Vec::with_capacity(4 * d.len());
    for r in &d.records {
        if let ImageSource::Memory(t) = &r.source {
            if t.rank() != 3 || t.shape()[1] != t.shape()[2] {
                return Err(Error::Domain(format!(
                    "cannot rotate a non-square image {:?}",
                    t.shape()
                )));
            }
        }
        for k in 0..4u8 {
            let mut rot = r.clone();
            rot.quarter_turns = (r.quarter_turns + k) % 4;
            out.push(rot);
        }
    }
    Ok(Dataset { records: out })
}

/// Shuffles and cuts `items` into four batches whose sizes differ by at most one
/// (the larger ones first); batches 1-3 are returned as train, batch 4 as test.
pub fn split_items<T: Clone>(items: &[T], rng: &mut Rng) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 4 {
        return Err(Error::Domain(format!(
            "need at least 4 items to split, got {}",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    rng.shuffle(&mut order);
    let sizes = batch_sizes(items.len(), 4);
    let test_start = items.len() - sizes[3];
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&order[..test_start]), pick(&order[test_start..])))
}

/// Sizes of `parts` nearly-equal consecutive batches of `n`.
pub fn batch_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

pub fn split_batches(d: &Dataset, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_items(&d.records, rng)?;
    Ok((Dataset::new(train), Dataset::new(test)))
}

/// A crop offset and horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AugmentationChoice {
    pub offset_y: usize,
    pub offset_x: usize,
    pub flip: bool,
}

/// Number of crop positions per axis: `S - crop` offsets in `[0, S - crop)`, or 1 when `S == crop`.
pub fn offset_positions(size: usize, crop: usize) -> usize {
    (size - crop).max(1)
}

impl AugmentationChoice {
    pub fn random(size: usize, crop: usize, rng: &mut Rng) -> Self {
        let n = offset_positions(size, crop);
        let offset_y = rng.below(n);
        let offset_x = rng.below(n);
        AugmentationChoice {
            offset_y,
            offset_x,
            flip: rng.coin(),
        }
    }

    pub fn center(size: usize, crop: usize) -> Self {
        let o = (size - crop) / 2;
        AugmentationChoice {
            offset_y: o,
            offset_x: o,
            flip: false,
        }
    }
}

/// Every choice for a `size` image and `crop` patch.
pub fn all_choices(size: usize, crop: usize) -> Vec<AugmentationChoice> {
    let n = offset_positions(size, crop);
    let mut v = Vec::with_capacity(n * n * 2);
    for offset_y in 0..n {
        for offset_x in 0..n {
            for flip in [false, true] {
                v.push(AugmentationChoice {
                    offset_y,
                    offset_x,
                    flip,
                });
            }
        }
    }
    v
}

/// Crops `[C, S, S]` to `[C, crop, crop]` at the choice's offset, mirroring columns if `flip`.
pub fn apply_choice(image: &Tensor, crop: usize, choice: AugmentationChoice) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!(
            "patch expects [C, H, W], got {:?}",
            image.shape()
        )));
    };
    if crop == 0 || crop > h || crop > w {
        return Err(Error::Domain(format!("crop {crop} does not fit a {h}x{w} image")));
    }
    if choice.offset_y + crop > h || choice.offset_x + crop > w {
        return Err(Error::Domain(format!("offset {choice:?} out of range")));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        for y in 0..crop {
            let row = &src[(ch * h + choice.offset_y + y) * w + choice.offset_x..][..crop];
            if choice.flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::from_vec(&[c, crop, crop], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchMode {
    /// Uniform random offset and fair-coin flip.
    Train,
    /// Center crop, no flip.
    Test,
}

pub fn sample_patch(image: &Tensor, crop: usize, rng: &mut Rng, mode: PatchMode) -> Result<Tensor> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::Shape(format!(
            "patch expects [C, H, W], got {:?}",
            image.shape()
        )));
    };
    if crop == 0 || crop > h || crop > w {
        return Err(Error::Domain(format!("crop {crop} does not fit a {h}x{w} image")));
    }
    let choice = match mode {
        PatchMode::Train => AugmentationChoice::random(h.min(w), crop, rng),
        PatchMode::Test => AugmentationChoice::center(h.min(w), crop),
    };
    apply_choice(image, crop, choice)
}

/// Parameters of the synthetic quality dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_high: usize,
    pub n_low: usize,
    pub size: usize,
    /// 0 separates the classes maximally; 1 makes them identical.
    pub difficulty: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn balanced(n_per_class: usize, size: usize, difficulty: f64, seed: u64) -> Self {
        SyntheticConfig {
            n_high: n_per_class,
            n_low: n_per_class,
            size,
            difficulty,
            seed,
        }
    }
}

/// Peak amplitude of the low-quality noise at difficulty 0.
const NOISE_AMPLITUDE: f64 = 0.25;

/// Generates image `index`: a smooth field, plus uniform pixel noise for label 0.
pub fn synthetic_image(cfg: &SyntheticConfig, index: usize, label: usize) -> Result<Tensor> {
    let s = cfg.size;
    let mut rng = Rng::derive(cfg.seed, &[index as u64]);
    let mut t = Tensor::zeros(&[3, s, s])?;
    let tau = std::f64::consts::TAU;
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            let amp = 0.03 + 0.05 * rng.uniform();
            let fy = (0.5 + 1.5 * rng.uniform()) * tau / s as f64;
            let fx = (0.5 + 1.5 * rng.uniform()) * tau / s as f64;
            [amp, fy, fx, tau * rng.uniform()]
        })
        .collect();
    let noise = NOISE_AMPLITUDE * (1.0 - cfg.difficulty);
    let data = t.data_mut();
    for ch in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let mut v = 0.5;
                for &[amp, fy, fx, ph] in &waves[3 * ch..3 * ch + 3] {
                    v += amp * (fy * y as f64 + fx * x as f64 + ph).sin();
                }
                if label == 0 {
                    v += noise * (2.0 * rng.uniform() - 1.0);
                }
                data[(ch * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(t)
}

/// Writes `img_<index>.pdt` files and `manifest.csv` into `dir`; high-quality images come first.
pub fn gen_synthetic(cfg: &SyntheticConfig, dir: &Path) -> Result<Dataset> {
    if cfg.n_high == 0 && cfg.n_low == 0 {
        return Err(Error::Domain("synthetic dataset needs at least one image".into()));
    }
    if cfg.size < 8 {
        return Err(Error::Domain(format!("synthetic size must be >= 8, got {}", cfg.size)));
    }
    if !(0.0..=1.0).contains(&cfg.difficulty) {
        return Err(Error::Domain(format!(
            "difficulty must be in [0, 1], got {}",
            cfg.difficulty
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(cfg.n_high + cfg.n_low);
    for index in 0..cfg.n_high + cfg.n_low {
        let label = usize::from(index < cfg.n_high);
        let path = dir.join(format!("img_{index}.pdt"));
        write_pdt(&path, &synthetic_image(cfg, index, label)?)?;
        records.push(ManifestRecord {
            source: ImageSource::File(path),
            label,
            category: "synthetic".into(),
            quarter_turns: 0,
        });
    }
    write_manifest(&dir.join("manifest.csv"), &records)?;
    Ok(Dataset { records })
}

/// Distinct patches among all choices, compared by a 64-bit digest of their bits.
pub fn distinct_patches(image: &Tensor, crop: usize) -> Result<usize> {
    let size = image.shape().get(1).copied().unwrap_or(0);
    let mut seen = HashSet::new();
    for ch in all_choices(size, crop) {
        let p = apply_choice(image, crop, ch)?;
        let mut h = DefaultHasher::new();
        for v in p.data() {
            v.to_bits().hash(&mut h);
        }
        seen.insert(h.finish());
    }
    Ok(seen.len())
}
