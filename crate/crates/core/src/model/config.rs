//! Architecture description, presets and the flat `key = value` config format.
//!
//! ```text
//! # comments start with '#'
//! base = svtr-t              # optional preset the other keys override
//! embed_dims = 64,128,256
//! depths = 3,6,3
//! heads = 2,4,8
//! combined_dim = 192
//! permutation = [L]6[G]6     # also "LLG", "[LG]6", "L6G6"
//! window = 7x11
//! mlp_ratio = 4
//! charset_size = 37
//! input_h = 32
//! input_w = 128
//! max_label_len = 25
//! dropout_rate = 0.1
//! attn_dropout_rate = 0.1
//! ```

use std::fmt;
use std::path::Path;

use crate::error::{Result, SvtrError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Local,
    Global,
}

impl BlockKind {
    pub fn letter(self) -> char {
        match self {
            BlockKind::Local => 'L',
            BlockKind::Global => 'G',
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvtrConfig {
    /// Channels per stage.
    pub embed_dims: [usize; 3],
    /// Mixing blocks per stage.
    pub depths: [usize; 3],
    pub heads: [usize; 3],
    /// Width of the combined sequence representation.
    pub combined_dim: usize,
    /// Block kinds over the whole network, consumed stage by stage.
    pub permutation: Vec<BlockKind>,
    /// Local mixing window as (height, width); both odd.
    pub window: (usize, usize),
    pub mlp_ratio: f64,
    /// Classes including the blank.
    pub charset_size: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub max_label_len: usize,
    pub dropout_rate: f64,
    pub attn_dropout_rate: f64,
}

/// Token grid and width of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageGeometry {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

impl StageGeometry {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

pub const PRESET_NAMES: [&str; 5] = ["svtr-t", "svtr-s", "svtr-b", "svtr-l", "svtr-micro"];

const KEYS: [&str; 13] = [
    "embed_dims",
    "depths",
    "heads",
    "combined_dim",
    "permutation",
    "window",
    "mlp_ratio",
    "charset_size",
    "input_h",
    "input_w",
    "max_label_len",
    "dropout_rate",
    "attn_dropout_rate",
];

fn runs(local: usize, global: usize) -> Vec<BlockKind> {
    let mut p = vec![BlockKind::Local; local];
    p.extend(vec![BlockKind::Global; global]);
    p
}

impl SvtrConfig {
    #[allow(clippy::too_many_arguments)]
    fn variant(dims: [usize; 3], depths: [usize; 3], heads: [usize; 3], combined: usize, local: usize, global: usize) -> Self {
        Self {
            embed_dims: dims,
            depths,
            heads,
            combined_dim: combined,
            permutation: runs(local, global),
            window: (7, 11),
            mlp_ratio: 4.0,
            charset_size: 37,
            input_h: 32,
            input_w: 128,
            max_label_len: 25,
            dropout_rate: 0.1,
            attn_dropout_rate: 0.1,
        }
    }

    pub fn tiny() -> Self {
        Self::variant([64, 128, 256], [3, 6, 3], [2, 4, 8], 192, 6, 6)
    }

    pub fn small() -> Self {
        Self::variant([96, 192, 256], [3, 6, 6], [3, 6, 8], 192, 8, 7)
    }

    pub fn base() -> Self {
        Self::variant([128, 256, 384], [3, 6, 9], [4, 8, 12], 256, 8, 10)
    }

    pub fn large() -> Self {
        Self::variant([192, 256, 512], [3, 9, 9], [6, 8, 16], 384, 10, 11)
    }

    /// Desk-scale model for tests and overfit runs: 16×64 input, labels up to 5.
    pub fn micro() -> Self {
        Self {
            embed_dims: [8, 16, 24],
            depths: [1, 1, 1],
            heads: [1, 2, 2],
            combined_dim: 16,
            permutation: runs(1, 2),
            window: (7, 11),
            mlp_ratio: 4.0,
            charset_size: 37,
            input_h: 16,
            input_w: 64,
            max_label_len: 5,
            dropout_rate: 0.0,
            attn_dropout_rate: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "svtr-t" => Ok(Self::tiny()),
            "svtr-s" => Ok(Self::small()),
            "svtr-b" => Ok(Self::base()),
            "svtr-l" => Ok(Self::large()),
            "svtr-micro" => Ok(Self::micro()),
            _ => Err(SvtrError::Config(format!(
                "unknown preset {name:?}, expected one of {}",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    /// A preset name or a config file path.
    pub fn resolve(spec: &str) -> Result<Self> {
        if PRESET_NAMES.contains(&spec) {
            return Self::preset(spec);
        }
        let path = Path::new(spec);
        if !path.exists() {
            return Err(SvtrError::Config(format!(
                "{spec:?} is neither a preset ({}) nor an existing file",
                PRESET_NAMES.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| SvtrError::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses the text format; keys override the `base` preset (default `svtr-t`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut base = "svtr-t".to_string();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SvtrError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "base" {
                base = v.to_string();
            } else {
                pairs.push((n + 1, k.to_string(), v.to_string()));
            }
        }
        let mut cfg = Self::preset(&base)?;
        for (line, k, v) in pairs {
            cfg.set(&k, &v)
                .map_err(|e| SvtrError::Config(format!("line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<N: std::str::FromStr>(v: &str) -> std::result::Result<N, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        fn triple(v: &str) -> std::result::Result<[usize; 3], String> {
            let parts: Vec<usize> = v.split(',').map(|p| num(p.trim())).collect::<std::result::Result<_, _>>()?;
            parts.try_into().map_err(|_| format!("expected three comma-separated values, got {v:?}"))
        }
        match key {
            "embed_dims" => self.embed_dims = triple(value)?,
            "depths" => self.depths = triple(value)?,
            "heads" => self.heads = triple(value)?,
            "combined_dim" => self.combined_dim = num(value)?,
            "permutation" => self.permutation = parse_permutation(value)?,
            "window" => {
                let (h, w) = value
                    .split_once(['x', 'X'])
                    .ok_or_else(|| format!("window must look like 7x11, got {value:?}"))?;
                self.window = (num(h.trim())?, num(w.trim())?);
            }
            "mlp_ratio" => self.mlp_ratio = parse_ratio(value)?,
            "charset_size" => self.charset_size = num(value)?,
            "input_h" => self.input_h = num(value)?,
            "input_w" => self.input_w = num(value)?,
            "max_label_len" => self.max_label_len = num(value)?,
            "dropout_rate" => self.dropout_rate = num(value)?,
            "attn_dropout_rate" => self.attn_dropout_rate = num(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SvtrError::Config(m));
        let total: usize = self.depths.iter().sum();
        if self.permutation.len() != total {
            return err(format!(
                "permutation has {} blocks, depths {:?} need {total}",
                self.permutation.len(),
                self.depths
            ));
        }
        for i in 0..3 {
            let (d, h) = (self.embed_dims[i], self.heads[i]);
            if d == 0 || h == 0 || d % h != 0 {
                return err(format!("stage {i}: dim {d} is not a positive multiple of {h} heads"));
            }
            let hidden = d as f64 * self.mlp_ratio;
            if !(self.mlp_ratio > 0.0) || hidden.fract() != 0.0 {
                return err(format!("stage {i}: mlp_ratio {} gives non-integral hidden width {hidden}", self.mlp_ratio));
            }
        }
        if !self.embed_dims[0].is_multiple_of(2) {
            return err(format!("embed_dims[0] = {} must be even", self.embed_dims[0]));
        }
        if self.combined_dim == 0 {
            return err("combined_dim must be positive".into());
        }
        if self.input_h == 0 || !self.input_h.is_multiple_of(16) {
            return err(format!("input_h = {} must be a positive multiple of 16", self.input_h));
        }
        if self.input_w == 0 || !self.input_w.is_multiple_of(4) {
            return err(format!("input_w = {} must be a positive multiple of 4", self.input_w));
        }
        if self.input_w / 4 < self.max_label_len {
            return err(format!(
                "input_w / 4 = {} is shorter than max_label_len = {}",
                self.input_w / 4,
                self.max_label_len
            ));
        }
        if self.charset_size < 2 {
            return err(format!("charset_size = {} must be at least 2", self.charset_size));
        }
        let (wh, ww) = self.window;
        if wh % 2 == 0 || ww % 2 == 0 {
            return err(format!("window {wh}x{ww} must have odd sides"));
        }
        for (name, r) in [("dropout_rate", self.dropout_rate), ("attn_dropout_rate", self.attn_dropout_rate)] {
            if !(0.0..1.0).contains(&r) {
                return err(format!("{name} = {r} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn stage_geometry(&self) -> [StageGeometry; 3] {
        let w = self.input_w / 4;
        let h0 = self.input_h / 4;
        let h1 = h0.div_ceil(2);
        let h2 = h1.div_ceil(2);
        [h0, h1, h2]
            .iter()
            .zip(self.embed_dims)
            .map(|(&h, dim)| StageGeometry { h, w, dim })
            .collect::<Vec<_>>()
            .try_into()
            .expect("three stages")
    }

    /// Block kinds of stage `stage`.
    pub fn stage_blocks(&self, stage: usize) -> &[BlockKind] {
        let start: usize = self.depths[..stage].iter().sum();
        &self.permutation[start..start + self.depths[stage]]
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (dim as f64 * self.mlp_ratio) as usize
    }

    /// Output frames per image.
    pub fn frames(&self) -> usize {
        self.input_w / 4
    }

    pub fn permutation_string(&self) -> String {
        format_permutation(&self.permutation)
    }

    /// Serializes every field in the text format.
    pub fn to_text(&self) -> String {
        let join = |a: [usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        let values = [
            join(self.embed_dims),
            join(self.depths),
            join(self.heads),
            self.combined_dim.to_string(),
            self.permutation_string(),
            format!("{}x{}", self.window.0, self.window.1),
            self.mlp_ratio.to_string(),
            self.charset_size.to_string(),
            self.input_h.to_string(),
            self.input_w.to_string(),
            self.max_label_len.to_string(),
            self.dropout_rate.to_string(),
            self.attn_dropout_rate.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Names of fields that differ from `other`.
    pub fn diff(&self, other: &SvtrConfig) -> Vec<String> {
        let a = self.to_text();
        let b = other.to_text();
        a.lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| {
                let key = x.split(" = ").next().unwrap_or(x);
                format!("{key} ({} vs {})", &x[key.len() + 3..], &y[key.len() + 3..])
            })
            .collect()
    }
}

impl fmt::Display for SvtrConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn parse_ratio(v: &str) -> std::result::Result<f64, String> {
    match v.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| format!("bad ratio {v:?}"))?;
            let d: f64 = d.trim().parse().map_err(|_| format!("bad ratio {v:?}"))?;
            Ok(n / d)
        }
        None => v.parse().map_err(|_| format!("bad ratio {v:?}")),
    }
}

/// Parses `[L]6[G]6`, `[LG]6`, `L6G6` or `LLGG`.
pub fn parse_permutation(text: &str) -> std::result::Result<Vec<BlockKind>, String> {
    let kind = |c: char| match c {
        'L' | 'l' => Ok(BlockKind::Local),
        'G' | 'g' => Ok(BlockKind::Global),
        _ => Err(format!("unexpected {c:?} in permutation {text:?}")),
    };
    let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace() && *c != ',').collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let group: Vec<BlockKind> = if chars[i] == '[' {
            let close = chars[i..]
                .iter()
                .position(|&c| c == ']')
                .ok_or_else(|| format!("unclosed '[' in {text:?}"))?;
            let g = chars[i + 1..i + close].iter().map(|&c| kind(c)).collect::<std::result::Result<Vec<_>, _>>()?;
            i += close + 1;
            g
        } else {
            let g = vec![kind(chars[i])?];
            i += 1;
            g
        };
        let digits: String = chars[i..].iter().take_while(|c| c.is_ascii_digit()).collect();
        i += digits.len();
        let count = if digits.is_empty() { 1 } else { digits.parse::<usize>().map_err(|e| e.to_string())? };
        for _ in 0..count {
            out.extend_from_slice(&group);
        }
    }
    Ok(out)
}

/// Run-length form, e.g. `[L]6[G]6`.
pub fn format_permutation(kinds: &[BlockKind]) -> String {
    let mut s = String::new();
    let mut i = 0;
    while i < kinds.len() {
        let run = kinds[i..].iter().take_while(|&&k| k == kinds[i]).count();
        s.push_str(&format!("[{}]{run}", kinds[i].letter()));
        i += run;
    }
    if s.is_empty() {
        s.push_str("[]0");
    }
    s
}
