//! Image io, preprocessing, paired datasets, batch sampling and the
//! synthetic multi-style dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SOURCE_DIR: &str = "source";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SYNTHETIC_SIZE: usize = 64;

// ---- png io ----

/// Decodes PNG bytes into a `(3, H, W)` tensor in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

/// Width and height from the PNG header, without decoding pixels.
pub fn png_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    let reader = image::ImageReader::with_format(std::io::Cursor::new(bytes), image::ImageFormat::Png);
    let (w, h) = reader.into_dimensions()?;
    Ok((w as usize, h as usize))
}

fn rgb_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |k| {
        let (c, p) = (k / (h * w), k % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

fn tensor_to_rgb(x: &Tensor) -> Result<image::RgbImage> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "encode_png",
                shape: x.shape().to_vec(),
                reason: "expected (3, H, W)".into(),
            })
        }
    };
    if c != 3 {
        return Err(Error::InvalidShape { op: "encode_png", shape: x.shape().to_vec(), reason: "expected 3 channels".into() });
    }
    let d = x.data();
    let raw = (0..h * w * 3).map(|k| quantize(d[(k % 3) * h * w + k / 3])).collect();
    image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::InvalidArgument("image buffer".into()))
}

/// Nearest 8-bit level of a value clamped to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `(3, H, W)` or `(1, 3, H, W)` tensor as 8-bit RGB PNG.
pub fn encode_png(x: &Tensor) -> Result<Vec<u8>> {
    let img = tensor_to_rgb(x)?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_png(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn save_png(path: &Path, x: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_png(x)?)?;
    Ok(())
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize_tensor(x: &Tensor) -> Tensor {
    x.map(|v| quantize(v) as f32 / 255.0)
}

// ---- preprocessing ----

/// Content region of a padded `edge x edge` image, anchored top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadMask {
    pub height: usize,
    pub width: usize,
    pub edge: usize,
}

impl PadMask {
    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, edge: height.max(width) }
    }

    pub fn is_empty_pad(&self) -> bool {
        self.height == self.edge && self.width == self.edge
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.height && j < self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub image: Tensor,
    pub mask: PadMask,
}

fn dims3(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape { op, shape: x.shape().to_vec(), reason: "expected (C, H, W)".into() }),
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize to a zero-sized image".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let rows: Vec<_> = (0..out_h).map(|o| axis(o, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|o| axis(o, w, out_w)).collect();
    let d = x.data();
    Ok(Tensor::from_fn([c, out_h, out_w], |k| {
        let (ch, i, j) = (k / (out_h * out_w), (k / out_w) % out_h, k % out_w);
        let (r0, r1, fy) = rows[i];
        let (c0, c1, fx) = cols[j];
        let p = |r: usize, q: usize| d[ch * h * w + r * w + q];
        let top = p(r0, c0) * (1.0 - fx) + p(r0, c1) * fx;
        let bot = p(r1, c0) * (1.0 - fx) + p(r1, c1) * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

/// Resizes so the longer side equals `edge`, then zero-pads bottom and right
/// to `edge x edge`.
pub fn resize_pad(x: &Tensor, edge: usize) -> Result<Padded> {
    let (c, h, w) = dims3(x, "resize_pad")?;
    if edge == 0 {
        return Err(Error::InvalidArgument("edge must be positive".into()));
    }
    let (nh, nw) = if h >= w {
        (edge, ((w as f64 * edge as f64 / h as f64).round() as usize).clamp(1, edge))
    } else {
        (((h as f64 * edge as f64 / w as f64).round() as usize).clamp(1, edge), edge)
    };
    let resized = resize_bilinear(x, nh, nw)?;
    let image = if (nh, nw) == (edge, edge) {
        resized
    } else {
        let r = resized.data();
        Tensor::from_fn([c, edge, edge], |k| {
            let (ch, i, j) = (k / (edge * edge), (k / edge) % edge, k % edge);
            if i < nh && j < nw {
                r[ch * nh * nw + i * nw + j]
            } else {
                0.0
            }
        })
    };
    Ok(Padded { image, mask: PadMask { height: nh, width: nw, edge } })
}

/// Zero-pads bottom and right to a multiple of `m`, keeping the scale.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> Result<Padded> {
    let (c, h, w) = dims3(x, "pad_to_multiple")?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let d = x.data();
    let image = Tensor::from_fn([c, ph, pw], |k| {
        let (ch, i, j) = (k / (ph * pw), (k / pw) % ph, k % pw);
        if i < h && j < w {
            d[ch * h * w + i * w + j]
        } else {
            0.0
        }
    });
    Ok(Padded { image, mask: PadMask { height: h, width: w, edge: ph.max(pw) } })
}

/// Top-left `height x width` region of a `(C, H, W)` or `(N, C, H, W)` tensor.
pub fn crop(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (lead, h, w) = match *x.shape() {
        [c, h, w] => (vec![c], h, w),
        [n, c, h, w] => (vec![n, c], h, w),
        _ => return Err(Error::InvalidShape { op: "crop", shape: x.shape().to_vec(), reason: "expected an image".into() }),
    };
    if height > h || width > w || height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("crop {height}x{width} outside {h}x{w}")));
    }
    let d = x.data();
    let mut shape = lead;
    shape.extend([height, width]);
    Ok(Tensor::from_fn(shape, |k| {
        let (plane, i, j) = (k / (height * width), (k / width) % height, k % width);
        d[plane * h * w + i * w + j]
    }))
}

// ---- synthetic styles ----

/// Tone curve `clip(gain_c * x_c^gamma + lift, 0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyle {
    pub name: String,
    pub gamma: f64,
    pub gain: [f64; 3],
    pub lift: f64,
}

impl SyntheticStyle {
    pub fn identity(name: &str) -> Self {
        Self { name: name.into(), gamma: 1.0, gain: [1.0; 3], lift: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma.is_finite()
            && self.gamma > 0.0
            && self.gain.iter().all(|g| g.is_finite() && *g > 0.0)
            && self.lift.is_finite()
            && !self.name.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid style {self:?}")))
        }
    }
}

/// Applies a style to a `(3, H, W)` or `(N, 3, H, W)` image.
pub fn apply_style(x: &Tensor, s: &SyntheticStyle) -> Result<Tensor> {
    s.validate()?;
    let (h, w) = match *x.shape() {
        [3, h, w] | [_, 3, h, w] => (h, w),
        _ => return Err(Error::InvalidShape { op: "apply_style", shape: x.shape().to_vec(), reason: "expected 3 channels".into() }),
    };
    let plane = h * w;
    let d = x.data();
    Ok(Tensor::from_fn(x.shape().to_vec(), |k| {
        let c = (k / plane) % 3;
        let v = d[k].max(0.0) as f64;
        (s.gain[c] * v.powf(s.gamma) + s.lift).clamp(0.0, 1.0) as f32
    }))
}

/// Three named styles followed by seeded random ones when `k > 3`.
pub fn default_styles(k: usize) -> Vec<SyntheticStyle> {
    let mut styles = vec![
        SyntheticStyle { name: "bright".into(), gamma: 0.6, gain: [1.0, 1.0, 0.95], lift: 0.03 },
        SyntheticStyle { name: "warm".into(), gamma: 1.3, gain: [1.15, 0.95, 0.75], lift: 0.02 },
        SyntheticStyle { name: "cool".into(), gamma: 0.9, gain: [0.75, 0.95, 1.15], lift: 0.05 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5747);
    while styles.len() < k {
        let i = styles.len();
        styles.push(SyntheticStyle {
            name: format!("style{i}"),
            gamma: rng.random_range(0.5..1.6),
            gain: [0, 1, 2].map(|_| rng.random_range(0.7..1.2)),
            lift: rng.random_range(0.0..0.08),
        });
    }
    styles.truncate(k);
    styles
}

// ---- datasets ----

/// A paired sample: shared source, its target under one task.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub id: String,
    pub source: Arc<Tensor>,
    pub target: Arc<Tensor>,
    pub task: usize,
    pub mask: PadMask,
}

/// Filename-sorted paired multitask dataset.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub tasks: Vec<String>,
    /// Distinct source images with their ids, in order.
    pub sources: Vec<(String, Arc<Tensor>)>,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == name)
    }

    /// Samples of the given tasks, with task ids renumbered in `keep` order.
    pub fn restrict_tasks(&self, keep: &[usize]) -> Result<Dataset> {
        if keep.iter().any(|&t| t >= self.tasks.len()) || keep.is_empty() {
            return Err(Error::InvalidArgument(format!("task selection {keep:?} out of {}", self.tasks.len())));
        }
        let samples = self
            .samples
            .iter()
            .filter_map(|s| keep.iter().position(|&k| k == s.task).map(|t| PairedSample { task: t, ..s.clone() }))
            .collect();
        Ok(Dataset { tasks: keep.iter().map(|&k| self.tasks[k].clone()).collect(), sources: self.sources.clone(), samples })
    }

    /// Samples whose source id is in `ids`.
    pub fn restrict_ids(&self, ids: &[String]) -> Dataset {
        let set: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        Dataset {
            tasks: self.tasks.clone(),
            sources: self.sources.iter().filter(|(id, _)| set.contains(id.as_str())).cloned().collect(),
            samples: self.samples.iter().filter(|s| set.contains(s.id.as_str())).cloned().collect(),
        }
    }

    /// `(C, H, W)` shared by every image, or an error.
    pub fn image_shape(&self) -> Result<Vec<usize>> {
        let first = self.sources.first().ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        let shape = first.1.shape().to_vec();
        for s in &self.samples {
            if s.source.shape() != shape.as_slice() || s.target.shape() != shape.as_slice() {
                return Err(Error::Dataset(format!("image {} has shape {:?}, expected {shape:?}", s.id, s.target.shape())));
            }
        }
        Ok(shape)
    }

    /// Mean PSNR of the untouched source against each target, per task.
    pub fn identity_psnr(&self) -> Result<Vec<f64>> {
        let mut sums = vec![(0.0, 0usize); self.tasks.len()];
        for s in &self.samples {
            let (src, tgt) = (crop(&s.source, s.mask.height, s.mask.width)?, crop(&s.target, s.mask.height, s.mask.width)?);
            let p = crate::metrics::psnr(&src, &tgt, 1.0)?;
            sums[s.task].0 += p;
            sums[s.task].1 += 1;
        }
        Ok(sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect())
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(dir.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut names = Vec::new();
    for entry in rd {
        let p = entry?.path();
        if p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Loads `root/source/*.png` with the same-named `root/<task>/*.png` targets.
pub fn load_paired_dir(root: &Path, tasks: &[String]) -> Result<Dataset> {
    if tasks.is_empty() {
        return Err(Error::Dataset("no task names given".into()));
    }
    let ids = png_stems(&root.join(SOURCE_DIR))?;
    if ids.is_empty() {
        return Err(Error::Dataset(format!("no source images under {}", root.join(SOURCE_DIR).display())));
    }
    for task in tasks {
        let dir = root.join(task);
        for id in &ids {
            let p = dir.join(format!("{id}.png"));
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
        }
    }
    let mut ds = Dataset { tasks: tasks.to_vec(), ..Dataset::default() };
    let mut source_ix = Vec::new();
    for id in &ids {
        let src = Arc::new(load_png(&root.join(SOURCE_DIR).join(format!("{id}.png")))?);
        ds.sources.push((id.clone(), src.clone()));
        source_ix.push(src);
    }
    for (t, task) in tasks.iter().enumerate() {
        for (id, src) in ids.iter().zip(&source_ix) {
            let path = root.join(task).join(format!("{id}.png"));
            let tgt = load_png(&path)?;
            if tgt.shape() != src.shape() {
                return Err(Error::Dataset(format!(
                    "{}: dimensions {:?} differ from the source {:?}",
                    path.display(),
                    tgt.shape(),
                    src.shape()
                )));
            }
            let (h, w) = (src.shape()[1], src.shape()[2]);
            ds.samples.push(PairedSample {
                id: id.clone(),
                source: src.clone(),
                target: Arc::new(tgt),
                task: t,
                mask: PadMask::full(h, w),
            });
        }
    }
    Ok(ds)
}

/// Resizes and pads every image to `edge x edge`, recording content masks.
pub fn preprocess(ds: &Dataset, edge: usize) -> Result<Dataset> {
    let mut sources = Vec::new();
    let mut map = BTreeMap::new();
    for (id, src) in &ds.sources {
        let p = resize_pad(src, edge)?;
        let img = Arc::new(p.image);
        map.insert(id.clone(), (img.clone(), p.mask));
        sources.push((id.clone(), img));
    }
    let mut samples = Vec::new();
    for s in &ds.samples {
        let (src, mask) = map.get(&s.id).cloned().ok_or_else(|| Error::Dataset(format!("sample {} has no source", s.id)))?;
        let tgt = resize_pad(&s.target, edge)?;
        samples.push(PairedSample { id: s.id.clone(), source: src, target: Arc::new(tgt.image), task: s.task, mask });
    }
    Ok(Dataset { tasks: ds.tasks.clone(), sources, samples })
}

// ---- synthetic dataset ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

/// JSON description of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub tasks: Vec<String>,
    pub styles: Vec<SyntheticStyle>,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.files.iter().filter(|f| f.split == split).map(|f| f.id.clone()).collect()
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(p.clone()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SyntheticDataset {
    pub fn split(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn total_samples(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Writes `source/`, one directory per task and `manifest.json`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for ds in [&self.train, &self.val, &self.test] {
            for (id, src) in &ds.sources {
                save_png(&root.join(SOURCE_DIR).join(format!("{id}.png")), src)?;
            }
            for s in &ds.samples {
                save_png(&root.join(&ds.tasks[s.task]).join(format!("{}.png", s.id)), &s.target)?;
            }
        }
        std::fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }
}

/// Smooth value noise: a random coarse grid bilinearly upsampled.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f32> {
    let grid = Tensor::from_fn([1, cells, cells], |_| rng.random_range(-1.0f32..1.0));
    resize_bilinear(&grid, size, size).expect("positive size").into_data()
}

/// One procedural `(3, size, size)` base image in `[0, 1]`.
pub fn synthetic_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let plane = size * size;
    let mut img = vec![0.0f32; 3 * plane];
    let base: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(0.2..0.7));
    let gx: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-0.3..0.3));
    let gy: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-0.3..0.3));
    let s = (size.max(2) - 1) as f32;
    for c in 0..3 {
        for i in 0..size {
            for j in 0..size {
                img[c * plane + i * size + j] = base[c] + gx[c] * (j as f32 / s - 0.5) + gy[c] * (i as f32 / s - 0.5);
            }
        }
    }
    for _ in 0..rng.random_range(2..6) {
        let color: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(0.0..1.0));
        let alpha = rng.random_range(0.4f32..0.9);
        let (cy, cx) = (rng.random_range(0.0..size as f32), rng.random_range(0.0..size as f32));
        let r = rng.random_range(size as f32 * 0.08..size as f32 * 0.3);
        let circle = rng.random_bool(0.5);
        for i in 0..size {
            for j in 0..size {
                let (dy, dx) = (i as f32 - cy, j as f32 - cx);
                let inside = if circle { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= r * 0.7 };
                if inside {
                    for c in 0..3 {
                        let v = &mut img[c * plane + i * size + j];
                        *v = (1.0 - alpha) * *v + alpha * color[c];
                    }
                }
            }
        }
    }
    let texture = value_noise(rng, size, 8);
    let amp = rng.random_range(0.03f32..0.1);
    for c in 0..3 {
        for p in 0..plane {
            let grain = rng.random_range(-0.02f32..0.02);
            let v = &mut img[c * plane + p];
            *v = (*v + amp * texture[p] + grain).clamp(0.02, 0.98);
        }
    }
    Tensor::new(vec![3, size, size], img).expect("sized buffer")
}

/// `n` base images styled by every style, split 80/10/10 by base image.
/// Images are quantized to 8 bits so the PNG copy on disk is exact.
pub fn make_synthetic_dataset(n: usize, styles: &[SyntheticStyle], seed: u64) -> Result<SyntheticDataset> {
    make_synthetic_dataset_sized(n, styles, seed, SYNTHETIC_SIZE)
}

pub fn make_synthetic_dataset_sized(n: usize, styles: &[SyntheticStyle], seed: u64, size: usize) -> Result<SyntheticDataset> {
    if n == 0 || styles.is_empty() || size == 0 {
        return Err(Error::InvalidArgument("need at least one image, one style and a positive size".into()));
    }
    for s in styles {
        s.validate()?;
    }
    let tasks: Vec<String> = styles.iter().map(|s| s.name.clone()).collect();
    if tasks.iter().collect::<std::collections::HashSet<_>>().len() != tasks.len() || tasks.iter().any(|t| t == SOURCE_DIR) {
        return Err(Error::Config("style names must be unique and not \"source\"".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (n - 1).to_string().len().max(4);
    let mut all = Dataset { tasks: tasks.clone(), ..Dataset::default() };
    for i in 0..n {
        let id = format!("img{i:0width$}");
        let src = Arc::new(quantize_tensor(&synthetic_image(&mut rng, size)));
        all.sources.push((id.clone(), src.clone()));
        for (t, style) in styles.iter().enumerate() {
            let tgt = quantize_tensor(&apply_style(&src, style)?);
            all.samples.push(PairedSample {
                id: id.clone(),
                source: src.clone(),
                target: Arc::new(tgt),
                task: t,
                mask: PadMask::full(size, size),
            });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let files: Vec<ManifestEntry> =
        all.sources.iter().zip(&split).map(|((id, _), &s)| ManifestEntry { id: id.clone(), split: s }).collect();
    let manifest = Manifest { seed, image_size: size, tasks, styles: styles.to_vec(), files };
    let part = |s| all.restrict_ids(&manifest.ids(s));
    Ok(SyntheticDataset { train: part(Split::Train), val: part(Split::Val), test: part(Split::Test), manifest })
}

/// Loads one split of a directory carrying a manifest.
pub fn load_split(root: &Path, split: Split) -> Result<Dataset> {
    let manifest = Manifest::load(root).map_err(|e| match e {
        Error::MissingFile(p) => Error::Dataset(format!("split {split:?} unavailable: no manifest at {}", p.display())),
        other => other,
    })?;
    let ids = manifest.ids(split);
    if ids.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} is empty")));
    }
    Ok(load_paired_dir(root, &manifest.tasks)?.restrict_ids(&ids))
}

/// Task names from a directory: its manifest, or every non-source subdirectory.
pub fn discover_tasks(root: &Path) -> Result<Vec<String>> {
    if let Ok(m) = Manifest::load(root) {
        return Ok(m.tasks);
    }
    let mut tasks = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|_| Error::MissingFile(root.to_path_buf()))? {
        let p: PathBuf = entry?.path();
        if p.is_dir() {
            if let Some(name) = p.file_name().and_then(|s| s.to_str()).filter(|n| *n != SOURCE_DIR) {
                tasks.push(name.to_string());
            }
        }
    }
    tasks.sort();
    Ok(tasks)
}

// ---- batch sampling ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Paired,
    Unpaired,
}

fn epoch_permutation(len: usize, seed: u64, stream: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((epoch as u128) << 40);
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(&mut rng);
    p
}

/// Indices of batch `step` of a `len`-sample pool reshuffled every epoch.
pub fn batch_indices(len: usize, batch: usize, seed: u64, stream: u64, step: u64) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if batch == 0 || batch > len {
        return Err(Error::InvalidArgument(format!("batch {batch} must be in 1..={len}")));
    }
    let per_epoch = len.div_ceil(batch) as u64;
    let (epoch, b) = (step / per_epoch, (step % per_epoch) as usize);
    let perm = epoch_permutation(len, seed, stream, epoch);
    Ok(perm[b * batch..((b + 1) * batch).min(len)].to_vec())
}

pub const PAIRED_STREAM: u64 = 1;
pub const SOURCE_STREAM: u64 = 2;
pub const TARGET_STREAM: u64 = 3;

/// A stacked batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, 3, H, W)`.
    pub source: Tensor,
    /// `(B, 3, H, W)`; aligned with `source` only in paired mode.
    pub target: Tensor,
    /// Task of each target.
    pub tasks: Vec<usize>,
    pub ids: Vec<String>,
    pub masks: Vec<PadMask>,
}

/// Deterministic batch source: batch `step` is a pure function of
/// `(dataset, batch, seed, mode, step)`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    data: Arc<Dataset>,
    batch: usize,
    seed: u64,
    mode: SampleMode,
}

impl BatchSampler {
    pub fn new(data: Arc<Dataset>, batch: usize, seed: u64, mode: SampleMode) -> Result<Self> {
        if data.is_empty() || data.sources.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        let pool = match mode {
            SampleMode::Paired => data.len(),
            SampleMode::Unpaired => data.len().min(data.sources.len()),
        };
        if batch == 0 || batch > pool {
            return Err(Error::InvalidArgument(format!("batch {batch} must be in 1..={pool}")));
        }
        data.image_shape()?;
        Ok(Self { data, batch, seed, mode })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    /// Batches per epoch of the paired (or target) stream.
    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch)
    }

    /// `(source indices, sample indices)` of batch `step`.
    pub fn indices(&self, step: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        match self.mode {
            SampleMode::Paired => {
                let ix = batch_indices(self.data.len(), self.batch, self.seed, PAIRED_STREAM, step)?;
                Ok((Vec::new(), ix))
            }
            SampleMode::Unpaired => {
                let s = batch_indices(self.data.sources.len(), self.batch, self.seed, SOURCE_STREAM, step)?;
                let t = batch_indices(self.data.len(), self.batch, self.seed, TARGET_STREAM, step)?;
                let n = s.len().min(t.len());
                Ok((s[..n].to_vec(), t[..n].to_vec()))
            }
        }
    }

    pub fn batch(&self, step: u64) -> Result<Batch> {
        let (src_ix, ix) = self.indices(step)?;
        let samples: Vec<&PairedSample> = ix.iter().map(|&i| &self.data.samples[i]).collect();
        let target = Tensor::stack(&samples.iter().map(|s| s.target.as_ref()).collect::<Vec<_>>())?;
        let tasks = samples.iter().map(|s| s.task).collect();
        let (source, ids, masks) = match self.mode {
            SampleMode::Paired => (
                Tensor::stack(&samples.iter().map(|s| s.source.as_ref()).collect::<Vec<_>>())?,
                samples.iter().map(|s| s.id.clone()).collect(),
                samples.iter().map(|s| s.mask).collect(),
            ),
            SampleMode::Unpaired => {
                let srcs: Vec<&(String, Arc<Tensor>)> = src_ix.iter().map(|&i| &self.data.sources[i]).collect();
                let shape = srcs[0].1.shape();
                (
                    Tensor::stack(&srcs.iter().map(|s| s.1.as_ref()).collect::<Vec<_>>())?,
                    srcs.iter().map(|s| s.0.clone()).collect(),
                    srcs.iter().map(|_| PadMask::full(shape[1], shape[2])).collect(),
                )
            }
        };
        Ok(Batch { source, target, tasks, ids, masks })
    }

    /// Infinite stream starting at batch `from`.
    pub fn stream(&self, from: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        (from..).map(move |s| self.batch(s))
    }
}

/// Stream of batches for a dataset.
pub fn sample_batches(
    dataset: Arc<Dataset>,
    batch: usize,
    seed: u64,
    mode: SampleMode,
) -> Result<impl Iterator<Item = Result<Batch>>> {
    let sampler = BatchSampler::new(dataset, batch, seed, mode)?;
    Ok((0u64..).map(move |s| sampler.batch(s)))
}

#[cfg(test)]
mod tests;
