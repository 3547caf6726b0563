use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pnm::PnmImage;
use super::render::{render_text, to_byte, Style};
use crate::ctc::{Charset, LabelSeq};
use crate::error::{Result, SvtrError};
use crate::tensor::kernels::map_indices;
use crate::tensor::Tensor;

pub const LABELS_FILE: &str = "labels.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[3, H, W]` in [0, 1].
    pub image: Tensor,
    pub label: LabelSeq,
    pub id: String,
}

/// `n` rendered samples with uniformly drawn lengths and symbols.
pub fn gen_dataset(
    n: usize,
    charset: &Charset,
    len_range: RangeInclusive<usize>,
    h: usize,
    w: usize,
    style: &Style,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if *len_range.start() == 0 || len_range.is_empty() {
        return Err(SvtrError::Contract(format!("label lengths {len_range:?} must be a non-empty range from 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symbols = charset.symbols();
    let plans: Vec<(String, u64)> = (0..n)
        .map(|_| {
            let len = rng.random_range(len_range.clone());
            let text: String = (0..len).map(|_| symbols[rng.random_range(0..symbols.len())]).collect();
            (text, rng.random())
        })
        .collect();
    map_indices(n, n * h * w * 8, |i| {
        let (text, render_seed) = &plans[i];
        Ok(LabeledSample {
            image: render_text(text, h, w, style, *render_seed)?,
            label: charset.encode(text)?,
            id: format!("synth_{i:06}"),
        })
    })
    .into_iter()
    .collect()
}

/// Writes `<id>.ppm` per sample and a `labels.tsv` index.
pub fn write_dataset(dir: &Path, samples: &[LabeledSample], charset: &Charset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SvtrError::io(dir, e))?;
    let mut index = String::new();
    for s in samples {
        let file = format!("{}.ppm", s.id);
        to_pnm(&s.image)?.write(&dir.join(&file))?;
        index.push_str(&format!("{file}\t{}\n", charset.decode(&s.label)));
    }
    let path = dir.join(LABELS_FILE);
    std::fs::write(&path, index).map_err(|e| SvtrError::io(&path, e))
}

/// `[3, H, W]` or `[1, H, W]` tensor to an 8-bit image.
pub fn to_pnm(image: &Tensor) -> Result<PnmImage> {
    let s = image.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(SvtrError::Shape(format!("expected [1|3, H, W] image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let data = (0..plane)
        .flat_map(|p| (0..c).map(move |ch| to_byte(d[ch * plane + p] as f64)))
        .collect();
    Ok(PnmImage {
        width: w,
        height: h,
        channels: c,
        data,
    })
}

/// Nearest-neighbour resize into a `[3, h, w]` tensor scaled to [0, 1].
pub fn from_pnm(img: &PnmImage, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        let sy = (rest / w) * img.height / h;
        let sx = (rest % w) * img.width / w;
        let c = if img.channels == 1 { 0 } else { ch };
        img.data[(sy * img.width + sx) * img.channels + c] as f32 / 255.0
    })
}

/// Reads `dir/labels.tsv` (`path<TAB>text` per line) and the referenced
/// PGM/PPM images, in file order.
pub fn load_dataset(dir: &Path, charset: &Charset, h: usize, w: usize, max_label_len: usize) -> Result<Vec<LabeledSample>> {
    let index = dir.join(LABELS_FILE);
    let text = std::fs::read_to_string(&index).map_err(|e| SvtrError::io(&index, e))?;
    let bad = |line: usize, message: String| SvtrError::Dataset {
        path: index.clone(),
        line,
        message,
    };
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line
            .split_once('\t')
            .ok_or_else(|| bad(n + 1, format!("expected path<TAB>text, got {line:?}")))?;
        let label = charset.try_encode(label).map_err(|chars| {
            let list: Vec<String> = chars.iter().map(|c| format!("{c:?}")).collect();
            bad(n + 1, format!("characters not in charset: {}", list.join(", ")))
        })?;
        if label.is_empty() || label.len() > max_label_len {
            return Err(bad(n + 1, format!("label length {} outside 1..={max_label_len}", label.len())));
        }
        entries.push((n + 1, file.to_string(), label));
    }
    map_indices(entries.len(), entries.len() * h * w * 8, |i| {
        let (_, file, label) = &entries[i];
        let img = PnmImage::read(&dir.join(file))?;
        let id = Path::new(file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| file.clone());
        Ok(LabeledSample {
            image: from_pnm(&img, h, w),
            label: label.clone(),
            id,
        })
    })
    .into_iter()
    .collect()
}

/// Stacks `[3, H, W]` images into `[b, 3, H, W]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut b = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(SvtrError::Shape(format!("cannot stack {:?} with {s:?}", img.shape())));
            }
            Some(_) => {}
        }
        data.extend_from_slice(img.data());
        b += 1;
    }
    let s = shape.ok_or_else(|| SvtrError::Shape("cannot stack zero images".into()))?;
    if s.len() != 3 {
        return Err(SvtrError::Shape(format!("expected [c, h, w] images, got {s:?}")));
    }
    Tensor::new(&[b, s[0], s[1], s[2]], data)
}
