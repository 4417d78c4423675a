//! Small single-channel CNN with optional reflection-invariant first-layer kernels.
//!
//! Topology: one valid 3×3 (default) convolution, 2×2 max pool, one dense
//! hidden layer, linear logits. With `invariant` set, each feature map is
//! `σ(f∗img + b) + σ(f∗flip(img) + b)`; flipping the input swaps the two
//! summands, so every later value is bitwise unchanged.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{flip_violation, RunRecord};
use crate::nn::{Activation, AdamState, Mlp, NnError};

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("image needs {expected} pixels, got {got}")]
    PixelCount { expected: usize, got: usize },
    #[error("pixel {index} = {value} lies outside [0, 1]")]
    PixelRange { index: usize, value: f64 },
    #[error("{kernel}×{kernel} filter does not fit a {height}×{width} image")]
    FilterTooLarge { kernel: usize, height: usize, width: usize },
    #[error("kernel size must be odd and at least 3, got {0}")]
    BadKernel(usize),
    #[error("not a binary PGM (P5) file")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("PGM maxval is 0")]
    ZeroMaxval,
    #[error("truncated PGM payload: expected {expected} bytes, got {got}")]
    TruncatedFile { expected: usize, got: usize },
    #[error("label {label} outside [0, {classes})")]
    BadLabel { label: usize, classes: usize },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, CnnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    /// Mirror left and right (reverse each row).
    #[default]
    Horizontal,
    /// Mirror top and bottom.
    Vertical,
}

/// Single-channel image, row-major, pixels in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(CnnError::PixelCount {
                expected: height * width,
                got: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(CnnError::PixelRange { index, value });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn flip(&self, axis: FlipAxis) -> Image {
        let (h, w) = (self.height, self.width);
        let mut pixels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                pixels.push(match axis {
                    FlipAxis::Horizontal => self.get(r, w - 1 - c),
                    FlipAxis::Vertical => self.get(h - 1 - r, c),
                });
            }
        }
        Image {
            height: h,
            width: w,
            pixels,
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        self.flip(FlipAxis::Horizontal)
    }
}

pub fn flip_image(img: &Image, axis: FlipAxis) -> Image {
    img.flip(axis)
}

/// Plain real-valued 2-D array for feature maps and filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Valid cross-correlation, stride 1.
pub fn conv2d_valid(img: &Image, filter: &Map) -> Result<Map> {
    let k = filter.rows;
    if filter.cols != k || k > img.height || k > img.width {
        return Err(CnnError::FilterTooLarge {
            kernel: k.max(filter.cols),
            height: img.height,
            width: img.width,
        });
    }
    let (oh, ow) = (img.height - k + 1, img.width - k + 1);
    let mut out = Map::zeros(oh, ow);
    for r in 0..oh {
        for c in 0..ow {
            let mut s = 0.0;
            for u in 0..k {
                let row = &img.pixels[(r + u) * img.width + c..(r + u) * img.width + c + k];
                let frow = &filter.data[u * k..(u + 1) * k];
                for (p, f) in row.iter().zip(frow) {
                    s += p * f;
                }
            }
            out.data[r * ow + c] = s;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub num_filters: usize,
    pub invariant: bool,
    #[serde(default)]
    pub flip_axis: FlipAxis,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 3 || self.kernel_size.is_multiple_of(2) {
            return Err(CnnError::BadKernel(self.kernel_size));
        }
        Ok(())
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            num_filters: 8,
            invariant: true,
            flip_axis: FlipAxis::Horizontal,
        }
    }
}

/// Per filter `f`: `σ(f∗img + b) + σ(f∗flip(img) + b)`, or plain `σ(f∗img + b)`
/// when the spec is not invariant.
pub fn invariant_conv_forward(img: &Image, spec: &ConvSpec, filters: &[Map], biases: &[f64], act: Activation) -> Result<Vec<Map>> {
    let flipped = spec.invariant.then(|| img.flip(spec.flip_axis));
    filters
        .iter()
        .zip(biases)
        .map(|(f, &b)| {
            let mut z = conv2d_valid(img, f)?;
            match &flipped {
                Some(fi) => {
                    let z2 = conv2d_valid(fi, f)?;
                    for (v, &w) in z.data.iter_mut().zip(&z2.data) {
                        *v = act.value(*v + b) + act.value(w + b);
                    }
                }
                None => z.data.iter_mut().for_each(|v| *v = act.value(*v + b)),
            }
            Ok(z)
        })
        .collect()
}

/// 2×2 max pool, stride 2; trailing odd rows or columns are dropped. Returns
/// the pooled map and the flat index of each window's first maximum.
pub fn max_pool2(map: &Map) -> (Map, Vec<usize>) {
    let (ph, pw) = (map.rows / 2, map.cols / 2);
    let mut out = Map::zeros(ph, pw);
    let mut arg = Vec::with_capacity(ph * pw);
    for r in 0..ph {
        for c in 0..pw {
            let mut best = 2 * r * map.cols + 2 * c;
            for idx in [
                2 * r * map.cols + 2 * c + 1,
                (2 * r + 1) * map.cols + 2 * c,
                (2 * r + 1) * map.cols + 2 * c + 1,
            ] {
                if map.data[idx] > map.data[best] {
                    best = idx;
                }
            }
            out.data[r * pw + c] = map.data[best];
            arg.push(best);
        }
    }
    (out, arg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallCnn {
    pub conv: ConvSpec,
    pub filters: Vec<Map>,
    pub conv_bias: Vec<f64>,
    pub conv_activation: Activation,
    pub head: Mlp,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
}

struct CnnCache {
    pre: Vec<Map>,
    pre_flipped: Option<Vec<Map>>,
    flipped: Option<Image>,
    argmax: Vec<Vec<usize>>,
    head: crate::nn::ForwardCache,
}

impl SmallCnn {
    pub fn new(conv: ConvSpec, height: usize, width: usize, hidden: usize, class_count: usize, seed: u64) -> Result<Self> {
        conv.validate()?;
        let k = conv.kernel_size;
        if k > height || k > width {
            return Err(CnnError::FilterTooLarge { kernel: k, height, width });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (k * k + conv.num_filters * k * k) as f64).sqrt();
        let filters = (0..conv.num_filters)
            .map(|_| Map {
                rows: k,
                cols: k,
                data: (0..k * k).map(|_| rng.random_range(-bound..bound)).collect(),
            })
            .collect();
        let (conv_h, conv_w) = (height - k + 1, width - k + 1);
        let pooled = (conv_h / 2) * (conv_w / 2);
        let head = Mlp::with_rng(
            &[conv.num_filters * pooled, hidden, class_count],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )?;
        Ok(Self {
            conv_bias: vec![0.0; conv.num_filters],
            conv,
            filters,
            conv_activation: Activation::Tanh,
            head,
            height,
            width,
            class_count,
        })
    }

    fn check(&self, img: &Image) -> Result<()> {
        if img.height != self.height || img.width != self.width {
            return Err(CnnError::Dataset(format!(
                "model expects {}×{} images, got {}×{}",
                self.height, self.width, img.height, img.width
            )));
        }
        Ok(())
    }

    fn features(&self, img: &Image) -> Result<(Vec<f64>, CnnCache)> {
        self.check(img)?;
        let act = self.conv_activation;
        let flipped = self.conv.invariant.then(|| img.flip(self.conv.flip_axis));
        let pre: Vec<Map> = self.filters.iter().map(|f| conv2d_valid(img, f)).collect::<Result<_>>()?;
        let pre_flipped = match &flipped {
            Some(fi) => Some(self.filters.iter().map(|f| conv2d_valid(fi, f)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let mut flat = Vec::new();
        let mut argmax = Vec::with_capacity(pre.len());
        for (i, z) in pre.iter().enumerate() {
            let b = self.conv_bias[i];
            let mut m = z.clone();
            match &pre_flipped {
                Some(pf) => {
                    for (v, &w) in m.data.iter_mut().zip(&pf[i].data) {
                        *v = act.value(*v + b) + act.value(w + b);
                    }
                }
                None => m.data.iter_mut().for_each(|v| *v = act.value(*v + b)),
            }
            let (pooled, arg) = max_pool2(&m);
            flat.extend_from_slice(&pooled.data);
            argmax.push(arg);
        }
        let (_, head) = self.head.forward(&flat)?;
        let logits = head.output().to_vec();
        Ok((
            logits,
            CnnCache {
                pre,
                pre_flipped,
                flipped,
                argmax,
                head,
            },
        ))
    }

    pub fn logits(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(self.features(img)?.0)
    }

    pub fn predict(&self, img: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(img)?))
    }

    pub fn param_count(&self) -> usize {
        let k = self.conv.kernel_size;
        self.filters.len() * (k * k + 1) + self.head.param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.filters.iter().flat_map(|f| f.data.iter().copied()).collect();
        p.extend_from_slice(&self.conv_bias);
        p.extend(self.head.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(NnError::ParamLength {
                expected: self.param_count(),
                got: p.len(),
            }
            .into());
        }
        let kk = self.conv.kernel_size * self.conv.kernel_size;
        let nf = self.filters.len();
        for (i, f) in self.filters.iter_mut().enumerate() {
            f.data.copy_from_slice(&p[i * kk..(i + 1) * kk]);
        }
        self.conv_bias.copy_from_slice(&p[nf * kk..nf * kk + nf]);
        self.head.set_params(&p[nf * kk + nf..])?;
        Ok(())
    }

    /// Softmax cross-entropy at one image; adds `scale · ∂loss/∂θ` into `acc`.
    pub fn accumulate_grad(&self, img: &Image, label: usize, scale: f64, acc: &mut [f64]) -> Result<f64> {
        if label >= self.class_count {
            return Err(CnnError::BadLabel {
                label,
                classes: self.class_count,
            });
        }
        let (logits, cache) = self.features(img)?;
        let probs = softmax(&logits);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let mut dlogits: Vec<f64> = probs.iter().map(|p| scale * p).collect();
        dlogits[label] -= scale;

        let k = self.conv.kernel_size;
        let kk = k * k;
        let nf = self.filters.len();
        let (conv_acc, head_acc) = acc.split_at_mut(nf * kk + nf);
        let dflat = self.head.backward_into(&cache.head, &dlogits, head_acc)?;

        let act = self.conv_activation;
        let pooled_len = cache.argmax.first().map_or(0, |a| a.len());
        for f in 0..nf {
            let b = self.conv_bias[f];
            let z = &cache.pre[f];
            for (slot, &idx) in cache.argmax[f].iter().enumerate() {
                let g = dflat[f * pooled_len + slot];
                if g == 0.0 {
                    continue;
                }
                let (r, c) = (idx / z.cols, idx % z.cols);
                let mut terms = vec![(g * act.derivative(z.data[idx] + b), img)];
                if let (Some(pf), Some(fi)) = (&cache.pre_flipped, &cache.flipped) {
                    terms.push((g * act.derivative(pf[f].data[idx] + b), fi));
                }
                for (d, src) in terms {
                    for u in 0..k {
                        for v in 0..k {
                            conv_acc[f * kk + u * k + v] += d * src.get(r + u, c + v);
                        }
                    }
                    conv_acc[nf * kk + f] += d;
                }
            }
        }
        Ok(loss)
    }

    /// Mean cross-entropy and its gradient, reduced in index order.
    pub fn loss_and_grad(&self, images: &[Image], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let m = images.len() as f64;
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        for (img, &y) in images.iter().zip(labels) {
            loss += self.accumulate_grad(img, y, 1.0 / m, &mut grad)? / m;
        }
        Ok((loss, grad))
    }

    pub fn accuracy(&self, images: &[Image], labels: &[usize]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for (img, &y) in images.iter().zip(labels) {
            if self.predict(img)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }

    /// Zero for an empty set.
    pub fn flip_violation(&self, images: &[Image]) -> f64 {
        flip_violation(|img| self.predict(img).expect("image shape"), images, self.conv.flip_axis).unwrap_or(0.0)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnTrainConfig {
    pub conv: ConvSpec,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Flip each image with probability 0.5 every epoch.
    pub augment: bool,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        Self {
            conv: ConvSpec::default(),
            hidden: 16,
            epochs: 200,
            lr: 1e-3,
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CnnTrainReport {
    pub model: SmallCnn,
    pub records: Vec<RunRecord>,
    /// Set when every label is the same class.
    pub degenerate: bool,
}

/// Full-batch Adam on mean softmax cross-entropy. `monitor` images feed the
/// per-epoch flip violation; `trunk_evals` counts image forward passes.
pub fn cnn_train(
    images: &[Image],
    labels: &[usize],
    class_count: usize,
    cfg: &CnnTrainConfig,
    monitor: &[Image],
) -> Result<CnnTrainReport> {
    let first = images.first().ok_or_else(|| CnnError::Dataset("no images".into()))?;
    if images.len() != labels.len() {
        return Err(CnnError::Dataset("images and labels differ in length".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
        return Err(CnnError::BadLabel {
            label,
            classes: class_count,
        });
    }
    let degenerate = labels.iter().all(|&l| l == labels[0]);
    let mut model = SmallCnn::new(cfg.conv.clone(), first.height, first.width, cfg.hidden, class_count, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = AdamState::new(model.param_count(), cfg.lr);
    let mut params = model.params();
    let mut passes = 0u64;
    let mut records = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let batch: Vec<Image> = if cfg.augment {
            images
                .iter()
                .map(|img| {
                    if rng.random_bool(0.5) {
                        img.flip(cfg.conv.flip_axis)
                    } else {
                        img.clone()
                    }
                })
                .collect()
        } else {
            images.to_vec()
        };
        let (loss, grad) = model.loss_and_grad(&batch, labels)?;
        passes += batch.len() as u64;
        adam.step(&mut params, &grad)?;
        model.set_params(&params)?;
        records.push(RunRecord {
            epoch,
            train_loss: loss,
            violation: model.flip_violation(monitor),
            trunk_evals: passes,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(CnnTrainReport {
        model,
        records,
        degenerate,
    })
}

/// Binary PGM (P5); 8-bit or big-endian 16-bit samples, scaled by `1/maxval`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(CnnError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(CnnError::MalformedHeader(format!("missing field {}", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CnnError::MalformedHeader("number out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(CnnError::MalformedHeader("no whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 {
        return Err(CnnError::ZeroMaxval);
    }
    if maxval > 65535 {
        return Err(CnnError::MalformedHeader(format!("maxval {maxval} exceeds 65535")));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let expected = width * height * bps;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(CnnError::TruncatedFile {
            expected,
            got: payload.len(),
        });
    }
    let scale = maxval as f64;
    let pixels = payload[..expected]
        .chunks_exact(bps)
        .map(|c| {
            let v = if bps == 1 {
                c[0] as u32
            } else {
                u32::from(c[0]) << 8 | u32::from(c[1])
            };
            (v as f64 / scale).min(1.0)
        })
        .collect();
    Image::new(height, width, pixels)
}

pub fn load_pgm(path: &Path) -> Result<Image> {
    parse_pgm(&fs::read(path)?)
}

/// Loads every `subjectNN.*` file in `dir` as a PGM. Labels are dense indices
/// over the sorted subject numbers.
pub fn load_subject_dir(dir: &Path) -> Result<(Vec<Image>, Vec<usize>, Vec<u32>)> {
    let mut entries: Vec<(u32, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(rest) = name.strip_prefix("subject") else { continue };
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() || !rest[digits.len()..].starts_with('.') {
            continue;
        }
        entries.push((
            digits.parse().map_err(|_| CnnError::Dataset(format!("bad subject id in {name}")))?,
            path,
        ));
    }
    if entries.is_empty() {
        return Err(CnnError::Dataset(format!("no subjectNN.* files in {}", dir.display())));
    }
    entries.sort();
    let mut subjects: Vec<u32> = entries.iter().map(|e| e.0).collect();
    subjects.dedup();
    let mut images = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for (id, path) in &entries {
        let img = load_pgm(path)?;
        if let Some(first) = images.first() {
            let first: &Image = first;
            if (first.height, first.width) != (img.height, img.width) {
                return Err(CnnError::Dataset(format!("{} has a different size", path.display())));
            }
        }
        images.push(img);
        labels.push(subjects.binary_search(id).expect("collected above"));
    }
    Ok((images, labels, subjects))
}

/// Random mirror-symmetric templates, one per class, plus symmetrized noise.
pub fn synth_symmetric_dataset(classes: usize, per_class: usize, h: usize, w: usize, seed: u64) -> (Vec<Image>, Vec<usize>) {
    assert!(classes >= 2, "at least two classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("finite std");
    let symmetrize = |v: Vec<f64>| -> Vec<f64> {
        let img = Image {
            height: h,
            width: w,
            pixels: v,
        };
        let f = img.flip_horizontal();
        img.pixels.iter().zip(&f.pixels).map(|(a, b)| (a + b) / 2.0).collect()
    };
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| symmetrize((0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect();
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (label, t) in templates.iter().enumerate() {
        for _ in 0..per_class {
            let n = symmetrize((0..h * w).map(|_| noise.sample(&mut rng)).collect());
            let pixels = t.iter().zip(&n).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect();
            images.push(Image {
                height: h,
                width: w,
                pixels,
            });
            labels.push(label);
        }
    }
    (images, labels)
}

/// Chimeras whose first half (along the flip axis) comes from one image and
/// second half from an image of another class. These are far from
/// mirror-symmetric, so a flip can change the prediction of a plain CNN; on
/// the symmetric training images flip-violation is zero for every classifier.
pub fn chimera_probe_set(images: &[Image], labels: &[usize], axis: FlipAxis, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..images.len())
        .map(|i| {
            let others: Vec<usize> = (0..images.len()).filter(|&j| labels[j] != labels[i]).collect();
            let j = if others.is_empty() {
                i
            } else {
                others[rng.random_range(0..others.len())]
            };
            let (a, b) = (&images[i], &images[j]);
            let mut px = b.pixels.clone();
            for r in 0..a.height {
                for c in 0..a.width {
                    let first = match axis {
                        FlipAxis::Horizontal => c < a.width / 2,
                        FlipAxis::Vertical => r < a.height / 2,
                    };
                    if first {
                        px[r * a.width + c] = a.pixels[r * a.width + c];
                    }
                }
            }
            Image {
                height: a.height,
                width: a.width,
                pixels: px,
            }
        })
        .collect()
}
