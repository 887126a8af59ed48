//! Checkpoint-backed enhancement of whole images, shared by the CLI and the
//! service so both produce the same bytes.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::{crop, decode_png, encode_png, pad_to_multiple, resize_pad};
use crate::error::{Error, Result};
use crate::models::{Gsgn, LatentStyle, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// A style after resolution against a checkpoint's task list.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedStyle {
    /// Task name when the style is a pure named task.
    pub name: Option<String>,
    pub style: LatentStyle,
}

/// An immutable generator snapshot ready for inference.
#[derive(Debug)]
pub struct Enhancer {
    model: Gsgn,
    params: ParamStore,
    tasks: Vec<String>,
    hash: u64,
}

impl Enhancer {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, params) = ck.generator()?;
        if ck.tasks.is_empty() || ck.tasks.iter().any(String::is_empty) {
            return Err(Error::Checkpoint("checkpoint needs non-empty task names".into()));
        }
        Ok(Self { model, params, tasks: ck.tasks.clone(), hash: ck.content_hash()? })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// 64-bit content hash of the checkpoint this snapshot was built from.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn model_id(&self) -> String {
        format!("gsgn-{:016x}", self.hash)
    }

    /// Named task, or comma-separated raw weights (`0.5,0.5,0`).
    pub fn parse_style(&self, spec: &str) -> Result<ResolvedStyle> {
        let spec = spec.trim();
        if let Some(i) = self.tasks.iter().position(|t| t == spec) {
            return self.named(i);
        }
        let weights: std::result::Result<Vec<f32>, _> = spec.split(',').map(|s| s.trim().parse::<f32>()).collect();
        match weights {
            Ok(w) => self.weights(w, false),
            Err(_) => Err(Error::InvalidArgument(format!(
                "unknown style {spec:?}; expected one of [{}] or {} comma-separated weights",
                self.tasks.join(", "),
                self.tasks.len()
            ))),
        }
    }

    pub fn named(&self, index: usize) -> Result<ResolvedStyle> {
        Ok(ResolvedStyle { name: self.tasks.get(index).cloned(), style: LatentStyle::one_hot(self.tasks.len(), index)? })
    }

    pub fn style_by_name(&self, name: &str) -> Result<ResolvedStyle> {
        let i = self
            .tasks
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown style {name:?}; expected one of [{}]", self.tasks.join(", "))))?;
        self.named(i)
    }

    /// A weight vector of the checkpoint's task count, optionally clamped to `[0, 1]`.
    pub fn weights(&self, mut w: Vec<f32>, clamp: bool) -> Result<ResolvedStyle> {
        if w.len() != self.tasks.len() {
            return Err(Error::InvalidArgument(format!(
                "style has {} weights but the checkpoint has {} tasks",
                w.len(),
                self.tasks.len()
            )));
        }
        if clamp {
            for v in w.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        let style = LatentStyle::from_weights(w)?;
        let name = style.z.iter().position(|&v| v == 1.0).filter(|_| style.is_one_hot()).map(|i| self.tasks[i].clone());
        Ok(ResolvedStyle { name, style })
    }

    /// Default style when none is given: the first task.
    pub fn default_style(&self) -> Result<ResolvedStyle> {
        self.named(0)
    }

    /// Enhances a `(3, H, W)` image. With `edge` the image is first resized so
    /// its longer side equals `edge`; otherwise the scale is kept. Either way
    /// the padding is cropped from the result.
    pub fn enhance(&self, x: &Tensor, style: &ResolvedStyle, edge: Option<usize>) -> Result<Tensor> {
        let m = self.config().size_multiple();
        let padded = match edge {
            Some(e) => {
                if e % m != 0 {
                    return Err(Error::InvalidArgument(format!("edge {e} is not divisible by {m}")));
                }
                resize_pad(x, e)?
            }
            None => pad_to_multiple(x, m)?,
        };
        let (ph, pw) = (padded.image.shape()[1], padded.image.shape()[2]);
        let input = padded.image.reshape([1, 3, ph, pw])?;
        let z = if self.config().is_adaptive() { Some(style.style.batch(1)?) } else { None };
        let y = self.model.infer(&self.params, &input, z.as_ref())?;
        let y = crop(&y, padded.mask.height, padded.mask.width)?;
        let (h, w) = (padded.mask.height, padded.mask.width);
        y.reshape([3, h, w])
    }

    pub fn enhance_png(&self, png: &[u8], style: &ResolvedStyle, edge: Option<usize>) -> Result<Vec<u8>> {
        encode_png(&self.enhance(&decode_png(png)?, style, edge)?)
    }

    /// `n` frames at `alpha = i / (n - 1)` between two styles.
    pub fn interpolate(&self, x: &Tensor, from: &ResolvedStyle, to: &ResolvedStyle, n: usize, edge: Option<usize>) -> Result<Vec<(f32, Tensor)>> {
        if n < 2 {
            return Err(Error::InvalidArgument("interpolation needs at least 2 steps".into()));
        }
        (0..n)
            .map(|i| {
                let alpha = i as f32 / (n - 1) as f32;
                let style = LatentStyle::interpolate(&from.style, &to.style, alpha)?;
                let frame = self.enhance(x, &ResolvedStyle { name: None, style }, edge)?;
                Ok((alpha, frame))
            })
            .collect()
    }
}

/// Frames laid side by side, left to right.
pub fn contact_sheet(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("no frames".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || frames.iter().any(|f| f.shape() != shape.as_slice()) {
        return Err(Error::InvalidArgument("frames must share one (C, H, W) shape".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let total = w * frames.len();
    Ok(Tensor::from_fn([c, h, total], |k| {
        let (ch, i, j) = (k / (h * total), (k / total) % h, k % total);
        frames[j / w].data()[ch * h * w + i * w + j % w]
    }))
}

/// Mean absolute difference between two same-shaped images.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "mean_abs_diff", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len().max(1) as f64)
}
