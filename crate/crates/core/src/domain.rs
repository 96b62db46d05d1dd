//! Validated domain types shared by the detector, the generator and the
//! metric stack.

use std::sync::Arc;

use crate::error::{validation, RcdError, Result};
use crate::scalar::{sigmoid, Scalar};

/// Spatial stride of the deepest encoder stage; model inputs must be a
/// multiple of it.
pub const MODEL_STRIDE: usize = 32;

/// H×W×3 image with channel-last values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(validation("image dimensions must be positive"));
        }
        if pixels.len() != height * width * 3 {
            return Err(validation(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Checks the geometry the encoder needs: both sides at least 8 and
    /// divisible by [`MODEL_STRIDE`].
    pub fn check_model_geometry(&self) -> Result<()> {
        check_model_geometry(self.height, self.width)
    }

    /// Quantizes to 8-bit RGB bytes, row-major.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }
}

pub fn check_model_geometry(height: usize, width: usize) -> Result<()> {
    if height < 8 || width < 8 || !height.is_multiple_of(MODEL_STRIDE) || !width.is_multiple_of(MODEL_STRIDE) {
        return Err(validation(format!(
            "input {height}x{width} must have both sides >= 8 and divisible by {MODEL_STRIDE}"
        )));
    }
    Ok(())
}

/// Co-registered pre-/post-change images.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterPair {
    pub id: String,
    pre: RasterImage,
    post: RasterImage,
}

impl RasterPair {
    pub fn new(id: impl Into<String>, pre: RasterImage, post: RasterImage) -> Result<Self> {
        if pre.height != post.height || pre.width != post.width {
            return Err(validation(format!(
                "pre image {}x{} and post image {}x{} differ in size",
                pre.height, pre.width, post.height, post.width
            )));
        }
        Ok(Self {
            id: id.into(),
            pre,
            post,
        })
    }

    pub fn pre(&self) -> &RasterImage {
        &self.pre
    }

    pub fn post(&self) -> &RasterImage {
        &self.post
    }

    pub fn height(&self) -> usize {
        self.pre.height
    }

    pub fn width(&self) -> usize {
        self.pre.width
    }

    /// The same pair with the two acquisition times exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            id: self.id.clone(),
            pre: self.post.clone(),
            post: self.pre.clone(),
        }
    }
}

/// Normalizes a class name: trimmed and lowercased.
pub fn normalize_class_name(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Ordered set of change-category names. Index 0 is reserved for
/// "no change" and never stored; class `i` lives at `names[i - 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out: Vec<String> = Vec::new();
        for raw in names {
            let name = normalize_class_name(raw.as_ref());
            if name.is_empty() {
                return Err(RcdError::Vocabulary("empty class name".into()));
            }
            if out.contains(&name) {
                return Err(RcdError::Vocabulary(format!("duplicate class `{name}`")));
            }
            out.push(name);
        }
        Ok(Self { names: out })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Name of class `index` (1-based).
    pub fn name(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.names.get(i))
            .map(String::as_str)
    }

    /// 1-based index of a (normalized) class name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        let name = normalize_class_name(name);
        self.names.iter().position(|n| *n == name).map(|i| i + 1)
    }

    /// Iterates `(index, name)` with 1-based indices.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.names.iter().enumerate().map(|(i, n)| (i + 1, n.as_str()))
    }

    pub(crate) fn push_unique(&mut self, name: &str) -> usize {
        let name = normalize_class_name(name);
        match self.names.iter().position(|n| *n == name) {
            Some(i) => i + 1,
            None => {
                self.names.push(name);
                self.names.len()
            }
        }
    }
}

/// Per-pixel class indices; 0 means no change.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
    vocab: Arc<ClassVocabulary>,
}

impl SemanticLabelMap {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u16>,
        vocab: Arc<ClassVocabulary>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(validation(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) > vocab.len()) {
            return Err(RcdError::Vocabulary(format!(
                "label {bad} exceeds vocabulary size {}",
                vocab.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            vocab,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn vocab(&self) -> &Arc<ClassVocabulary> {
        &self.vocab
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Sorted nonzero labels present in the map.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.vocab.len() + 1];
        for &l in &self.labels {
            seen[usize::from(l)] = true;
        }
        (1..seen.len()).filter(|&i| seen[i]).collect()
    }

    /// Mask of pixels carrying `class_index`.
    pub fn binarize_for_class(&self, class_index: usize) -> Result<BinaryChangeMap> {
        if class_index == 0 || class_index > self.vocab.len() {
            return Err(RcdError::Vocabulary(format!(
                "class index {class_index} outside 1..={}",
                self.vocab.len()
            )));
        }
        let mask = self
            .labels
            .iter()
            .map(|&l| u8::from(usize::from(l) == class_index))
            .collect();
        Ok(BinaryChangeMap {
            height: self.height,
            width: self.width,
            mask,
        })
    }

    /// Any nonzero label becomes 1.
    pub fn to_binary(&self) -> BinaryChangeMap {
        BinaryChangeMap {
            height: self.height,
            width: self.width,
            mask: self.labels.iter().map(|&l| u8::from(l > 0)).collect(),
        }
    }
}

/// {0, 1} change mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryChangeMap {
    height: usize,
    width: usize,
    mask: Vec<u8>,
}

impl BinaryChangeMap {
    pub fn new(height: usize, width: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(validation(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                mask.len()
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(validation("binary mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            mask,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mask: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.mask[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Labels every set pixel with `class_index`.
    pub fn to_semantic(
        &self,
        class_index: usize,
        vocab: Arc<ClassVocabulary>,
    ) -> Result<SemanticLabelMap> {
        let label = u16::try_from(class_index)
            .map_err(|_| RcdError::Vocabulary(format!("class index {class_index} too large")))?;
        SemanticLabelMap::new(
            self.height,
            self.width,
            self.mask.iter().map(|&m| if m == 1 { label } else { 0 }).collect(),
            vocab,
        )
    }
}

/// Pre-sigmoid per-pixel scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap<T> {
    height: usize,
    width: usize,
    logits: Vec<T>,
}

impl<T: Scalar> LogitMap<T> {
    pub fn new(height: usize, width: usize, logits: Vec<T>) -> Result<Self> {
        if logits.len() != height * width {
            return Err(validation(format!(
                "logit map {height}x{width} needs {} values, got {}",
                height * width,
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(validation("logit map contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            logits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// `mask[p] = 1` iff `sigmoid(l[p]) >= tau`.
    pub fn threshold(&self, tau: f64) -> Result<BinaryChangeMap> {
        threshold_logits(self, tau)
    }
}

/// Decision rule after the sigmoid. The comparison is inclusive, so a zero
/// logit at `tau = 0.5` is a positive.
pub fn threshold_logits<T: Scalar>(l: &LogitMap<T>, tau: f64) -> Result<BinaryChangeMap> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(validation(format!("threshold {tau} outside (0, 1)")));
    }
    if l.logits.iter().any(|v| !v.is_finite()) {
        return Err(validation("logit map contains non-finite values"));
    }
    let tau = T::of(tau);
    Ok(BinaryChangeMap {
        height: l.height,
        width: l.width,
        mask: l.logits.iter().map(|&v| u8::from(sigmoid(v) >= tau)).collect(),
    })
}
