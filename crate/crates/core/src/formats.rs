//! File formats: PGM images, text model files, run configurations,
//! manifests, RD-curve CSV and interpolation filter sets.
//!
//! Every parser reports the 1-based line of the first problem. Floating
//! point values are written with 17 significant digits, which reproduces
//! every `f64` exactly when read back.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::chroma::{Autoencoder, ChromaHybridModel};
use crate::collapse::{AffineMap, ConvStack, LinearFcn};
use crate::error::{Error, Result};
use crate::interp::{FractionalPosition, QuarterPelFilterSet, FILTER_SIZE};
use crate::metrics::RdCurve;
use crate::tensor::{Kernel, Matrix, Plane, Vector};

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::parse(line, format!("not a number: {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse().map_err(|_| Error::parse(line, format!("not a non-negative integer: {tok:?}")))
}

// ---------------------------------------------------------------- PGM

/// Largest dimension accepted from a PGM header.
const MAX_PGM_SIDE: usize = 1 << 15;

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl HeaderReader<'_> {
    fn token(&mut self) -> Result<&str> {
        loop {
            match self.bytes.get(self.pos) {
                None => return Err(Error::parse(self.line, "truncated PGM header")),
                Some(b'#') => {
                    while let Some(&c) = self.bytes.get(self.pos) {
                        if c == b'\n' {
                            break;
                        }
                        self.pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => {
                    if *c == b'\n' {
                        self.line += 1;
                    }
                    self.pos += 1;
                }
                Some(_) => break,
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|c| !c.is_ascii_whitespace() && *c != b'#') {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::parse(self.line, "non-ASCII header token"))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?.to_owned();
        tok.parse().map_err(|_| Error::parse(self.line, format!("bad {what}: {tok:?}")))
    }
}

/// Decode a plain (P2) or binary (P5) PGM. `maxval <= 255` gives an 8-bit
/// plane; `maxval <= 1023` a 10-bit plane (two bytes per sample in P5).
pub fn read_pgm(bytes: &[u8]) -> Result<Plane> {
    let mut r = HeaderReader { bytes, pos: 0, line: 1 };
    let magic = r.token()?.to_owned();
    let binary = match magic.as_str() {
        "P2" => false,
        "P5" => true,
        other => return Err(Error::parse(1, format!("not a PGM file (magic {other:?})"))),
    };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 || width > MAX_PGM_SIDE || height > MAX_PGM_SIDE {
        return Err(Error::parse(r.line, format!("unsupported image size {width}x{height}")));
    }
    let bit_depth = match maxval {
        1..=255 => 8,
        256..=1023 => 10,
        _ => return Err(Error::parse(r.line, format!("maxval {maxval} is not supported (8- or 10-bit only)"))),
    };
    let count = width * height;
    let mut samples = Vec::with_capacity(count);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        if !r.bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::parse(r.line, "missing separator before raster"));
        }
        let data = &bytes[r.pos + 1..];
        let bps = if maxval > 255 { 2 } else { 1 };
        if data.len() < count * bps {
            return Err(Error::parse(r.line, format!("raster has {} bytes, need {}", data.len(), count * bps)));
        }
        for i in 0..count {
            let v = if bps == 2 {
                u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as usize
            } else {
                data[i] as usize
            };
            if v > maxval {
                return Err(Error::parse(r.line, format!("sample {v} exceeds maxval {maxval}")));
            }
            samples.push(v as f64);
        }
    } else {
        for _ in 0..count {
            let v = r.number("sample")?;
            if v > maxval {
                return Err(Error::parse(r.line, format!("sample {v} exceeds maxval {maxval}")));
            }
            samples.push(v as f64);
        }
    }
    Plane::new(width, height, bit_depth, samples)
}

/// Encode as binary PGM. Samples are rounded and clamped to the plane's
/// range; 10-bit planes use `maxval 1023` and two bytes per sample.
pub fn write_pgm(plane: &Plane) -> Vec<u8> {
    let clipped = plane.clipped();
    let maxval = plane.max_value() as u32;
    let mut out = format!("P5\n{} {}\n{}\n", plane.width(), plane.height(), maxval).into_bytes();
    for &v in clipped.samples() {
        if maxval > 255 {
            out.extend_from_slice(&(v as u16).to_be_bytes());
        } else {
            out.push(v as u8);
        }
    }
    out
}

pub fn read_pgm_file(path: &Path) -> Result<Plane> {
    read_pgm(&read_file(path)?)
}

pub fn write_pgm_file(path: &Path, plane: &Plane) -> Result<()> {
    write_file(path, &write_pgm(plane))
}

// ---------------------------------------------------------------- model files

pub const MODEL_MAGIC: &str = "LNCM 1";

/// One record of a model file.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine(AffineMap),
    Conv(Kernel),
    Autoencoder(Autoencoder),
    /// Scaled dot-product attention over `dim`-component queries and keys.
    Attention { dim: usize, temperature: f64 },
}

/// An ordered list of layers, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub layers: Vec<Layer>,
}

fn push_row(out: &mut String, values: &[f64]) {
    let row: Vec<String> = values.iter().map(|&v| fmt_f64(v)).collect();
    out.push_str(&row.join(" "));
    out.push('\n');
}

fn push_bias(out: &mut String, b: &[f64]) {
    let _ = writeln!(out, "bias {}", b.len());
    push_row(out, b);
}

impl ModelFile {
    /// Canonical text: one matrix row (or kernel row) per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{MODEL_MAGIC}\n");
        for layer in &self.layers {
            match layer {
                Layer::Affine(m) => {
                    let _ = writeln!(out, "layer affine {} {}", m.output_dim(), m.input_dim());
                    for r in 0..m.output_dim() {
                        push_row(&mut out, m.weights().row(r));
                    }
                    push_bias(&mut out, m.bias().as_slice());
                }
                Layer::Conv(k) => {
                    let _ = writeln!(out, "layer conv {} {} {} {}", k.out_channels(), k.in_channels(), k.kh(), k.kw());
                    for row in k.taps().chunks(k.kw()) {
                        push_row(&mut out, row);
                    }
                    if let Some(b) = k.bias() {
                        push_bias(&mut out, b);
                    }
                }
                Layer::Autoencoder(ae) => {
                    let (e, d) = (ae.encoder(), ae.decoder());
                    let _ = writeln!(out, "layer autoencoder {} {}", e.output_dim(), e.input_dim());
                    for r in 0..e.output_dim() {
                        push_row(&mut out, e.weights().row(r));
                    }
                    for r in 0..d.output_dim() {
                        push_row(&mut out, d.weights().row(r));
                    }
                    let bias: Vec<f64> = e.bias().as_slice().iter().chain(d.bias().as_slice()).copied().collect();
                    push_bias(&mut out, &bias);
                }
                Layer::Attention { dim, temperature } => {
                    let _ = writeln!(out, "layer attention {dim}");
                    push_row(&mut out, &[*temperature]);
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MODEL_MAGIC => {}
            _ => return Err(Error::parse(1, format!("expected header {MODEL_MAGIC:?}"))),
        }
        let mut layers = Vec::new();
        let values = |lines: &mut std::iter::Peekable<_>, count: usize, at: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count.min(1 << 20));
            while out.len() < count {
                let (ln, l): (usize, &str) = lines
                    .next()
                    .ok_or_else(|| Error::parse(at, format!("expected {count} values, file ended after {}", out.len())))?;
                if l.starts_with("layer") || l.starts_with("bias") {
                    return Err(Error::parse(ln, format!("expected {count} values, got {}", out.len())));
                }
                for tok in l.split_whitespace() {
                    if out.len() == count {
                        return Err(Error::parse(ln, "too many values"));
                    }
                    out.push(parse_f64(tok, ln)?);
                }
            }
            Ok(out)
        };
        while let Some((ln, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks[0] != "layer" || toks.len() < 2 {
                return Err(Error::parse(ln, format!("expected a layer record, got {line:?}")));
            }
            let dims: Vec<usize> = toks[2..].iter().map(|t| parse_usize(t, ln)).collect::<Result<_>>()?;
            let want = |n: usize| -> Result<()> {
                if dims.len() != n || dims.contains(&0) || dims.iter().any(|&d| d > 1 << 16) {
                    return Err(Error::parse(ln, format!("layer {} needs {n} positive dimensions", toks[1])));
                }
                Ok(())
            };
            let bias_len = |lines: &mut std::iter::Peekable<_>| -> Result<Option<(usize, usize)>> {
                let next: Option<&(usize, &str)> = lines.peek();
                match next {
                    Some(&(bl, l)) if l.starts_with("bias") => {
                        let t: Vec<&str> = l.split_whitespace().collect();
                        if t.len() != 2 || t[0] != "bias" {
                            return Err(Error::parse(bl, "expected \"bias <count>\""));
                        }
                        let n = parse_usize(t[1], bl)?;
                        lines.next();
                        Ok(Some((bl, n)))
                    }
                    _ => Ok(None),
                }
            };
            let layer = match toks[1] {
                "affine" => {
                    want(2)?;
                    let (o, i) = (dims[0], dims[1]);
                    let w = values(&mut lines, o * i, ln)?;
                    let b = match bias_len(&mut lines)? {
                        Some((bl, n)) if n != o => return Err(Error::parse(bl, format!("bias needs {o} values, header says {n}"))),
                        Some((bl, _)) => values(&mut lines, o, bl)?,
                        None => vec![0.0; o],
                    };
                    Layer::Affine(AffineMap::new(Matrix::new(o, i, w)?, Vector::new(b)?)?)
                }
                "conv" => {
                    want(4)?;
                    let (o, i, kh, kw) = (dims[0], dims[1], dims[2], dims[3]);
                    let taps = values(&mut lines, o * i * kh * kw, ln)?;
                    let bias = match bias_len(&mut lines)? {
                        Some((bl, n)) if n != o => return Err(Error::parse(bl, format!("bias needs {o} values, header says {n}"))),
                        Some((bl, _)) => Some(values(&mut lines, o, bl)?),
                        None => None,
                    };
                    Layer::Conv(Kernel::new(o, i, kh, kw, taps, bias)?)
                }
                "autoencoder" => {
                    want(2)?;
                    let (c, f) = (dims[0], dims[1]);
                    let e = values(&mut lines, c * f, ln)?;
                    let d = values(&mut lines, f * c, ln)?;
                    let b = match bias_len(&mut lines)? {
                        Some((bl, n)) if n != c + f => {
                            return Err(Error::parse(bl, format!("bias needs {} values, header says {n}", c + f)))
                        }
                        Some((bl, _)) => values(&mut lines, c + f, bl)?,
                        None => vec![0.0; c + f],
                    };
                    Layer::Autoencoder(Autoencoder::new(
                        AffineMap::new(Matrix::new(c, f, e)?, Vector::new(b[..c].to_vec())?)?,
                        AffineMap::new(Matrix::new(f, c, d)?, Vector::new(b[c..].to_vec())?)?,
                    )?)
                }
                "attention" => {
                    want(1)?;
                    let t = values(&mut lines, 1, ln)?[0];
                    if t <= 0.0 {
                        return Err(Error::parse(ln, format!("temperature must be positive, got {t}")));
                    }
                    if let Some((bl, _)) = bias_len(&mut lines)? {
                        return Err(Error::parse(bl, "attention layers have no bias"));
                    }
                    Layer::Attention { dim: dims[0], temperature: t }
                }
                other => return Err(Error::parse(ln, format!("unknown layer kind {other:?}"))),
            };
            layers.push(layer);
        }
        if layers.is_empty() {
            return Err(Error::parse(1, "model file has no layers"));
        }
        Ok(Self { layers })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }
}

/// A model file interpreted as one of the library's model types.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    /// Only affine layers.
    Fcn(LinearFcn),
    /// Only conv layers.
    Conv(ConvStack),
    /// conv, affine, autoencoder, attention, affine.
    Chroma(Box<ChromaHybridModel>),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Fcn(_) => "affine",
            Model::Conv(_) => "conv",
            Model::Chroma(_) => "chroma",
        }
    }

    pub fn to_file(&self) -> ModelFile {
        let layers = match self {
            Model::Fcn(f) => f.layers().iter().cloned().map(Layer::Affine).collect(),
            Model::Conv(c) => c.layers().iter().cloned().map(Layer::Conv).collect(),
            Model::Chroma(m) => vec![
                Layer::Conv(m.conv_branch().clone()),
                Layer::Affine(m.boundary_encoder().clone()),
                Layer::Autoencoder(m.bottleneck().clone()),
                Layer::Attention {
                    dim: m.bottleneck().bottleneck_dim(),
                    temperature: m.temperature(),
                },
                Layer::Affine(m.head().clone()),
            ],
        };
        ModelFile { layers }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        let layers = file.layers;
        if layers.iter().all(|l| matches!(l, Layer::Affine(_))) {
            let maps = layers
                .into_iter()
                .map(|l| match l {
                    Layer::Affine(m) => m,
                    _ => unreachable!(),
                })
                .collect();
            return Ok(Model::Fcn(LinearFcn::new(maps)?));
        }
        if layers.iter().all(|l| matches!(l, Layer::Conv(_))) {
            let ks = layers
                .into_iter()
                .map(|l| match l {
                    Layer::Conv(k) => k,
                    _ => unreachable!(),
                })
                .collect();
            return Ok(Model::Conv(ConvStack::new(ks)?));
        }
        match <[Layer; 5]>::try_from(layers) {
            Ok([Layer::Conv(k), Layer::Affine(lift), Layer::Autoencoder(ae), Layer::Attention { dim, temperature }, Layer::Affine(head)]) => {
                if dim != ae.bottleneck_dim() {
                    return Err(Error::Data(format!("attention dim {dim} does not match code size {}", ae.bottleneck_dim())));
                }
                Ok(Model::Chroma(Box::new(ChromaHybridModel::new(k, lift, ae, temperature, head)?)))
            }
            _ => Err(Error::Data(
                "layers are neither all affine, all conv, nor the conv/affine/autoencoder/attention/affine chroma layout"
                    .into(),
            )),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_file(ModelFile::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_file().write(path)
    }
}

// ---------------------------------------------------------------- run config

/// Settings for the training and evaluation commands, read from
/// `key = value` lines. `#` starts a comment. Unknown or repeated keys are
/// errors.
///
/// | key | meaning | default |
/// |-----|---------|---------|
/// | `seed` | RNG seed | 0 |
/// | `epochs` | training epochs (interp: full-batch steps) | per task |
/// | `lr` | base learning rate | per task |
/// | `batch_size` | minibatch size | per task |
/// | `hidden` | intra hidden width | 96 |
/// | `lambda` | ridge penalty of the direct intra fit | 1e-6 |
/// | `block_sizes` | intra block sizes, comma-separated, from 4, 8, 16 | 4,8,16 |
/// | `stride` | block harvesting stride (intra, chroma from files) | 4 |
/// | `images` | manifest of PGM training frames | synthetic |
/// | `synthetic_images` | synthetic frames when `images` is unset | intra 4, interp 8 |
/// | `image_size` | side of synthetic frames | intra 256, interp 512 |
/// | `scale` | interp decimation factor | 4 |
/// | `positions` | `all` or comma-separated tags like `dx2dy2` | all |
/// | `chroma_manifest` | manifest of `Y U V` PGM triplets | synthetic |
/// | `chroma_per_size` | synthetic blocks per size | 200 |
/// | `ae_steps` | autoencoder training steps | 1500 |
/// | `ae_lr` | autoencoder learning rate | 0.03 |
/// | `output` | output directory | `.` |
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub hidden: Option<usize>,
    pub lambda: Option<f64>,
    pub block_sizes: Option<Vec<usize>>,
    pub stride: Option<usize>,
    pub images: Option<PathBuf>,
    pub synthetic_images: Option<usize>,
    pub image_size: Option<usize>,
    pub scale: Option<usize>,
    pub positions: Option<Vec<FractionalPosition>>,
    pub chroma_manifest: Option<PathBuf>,
    pub chroma_per_size: Option<usize>,
    pub ae_steps: Option<usize>,
    pub ae_lr: Option<f64>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(ln, format!("expected \"key = value\", got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(Error::parse(ln, format!("empty value for {key:?}")));
            }
            macro_rules! set {
                ($field:ident, $v:expr) => {{
                    if cfg.$field.is_some() {
                        return Err(Error::parse(ln, format!("duplicate key {key:?}")));
                    }
                    cfg.$field = Some($v);
                }};
            }
            let uint = || parse_usize(value, ln);
            let float = || parse_f64(value, ln);
            match key {
                "seed" => set!(seed, value.parse().map_err(|_| Error::parse(ln, format!("bad seed {value:?}")))?),
                "epochs" => set!(epochs, uint()?),
                "lr" => set!(lr, float()?),
                "batch_size" => set!(batch_size, uint()?),
                "hidden" => set!(hidden, uint()?),
                "lambda" => set!(lambda, float()?),
                "block_sizes" => set!(
                    block_sizes,
                    value.split(',').map(|t| parse_usize(t.trim(), ln)).collect::<Result<Vec<_>>>()?
                ),
                "stride" => set!(stride, uint()?),
                "images" => set!(images, PathBuf::from(value)),
                "synthetic_images" => set!(synthetic_images, uint()?),
                "image_size" => set!(image_size, uint()?),
                "scale" => set!(scale, uint()?),
                "positions" => set!(
                    positions,
                    if value == "all" {
                        FractionalPosition::all()
                    } else {
                        value
                            .split(',')
                            .map(|t| FractionalPosition::parse_tag(t.trim()).map_err(|e| Error::parse(ln, e.to_string())))
                            .collect::<Result<Vec<_>>>()?
                    }
                ),
                "chroma_manifest" => set!(chroma_manifest, PathBuf::from(value)),
                "chroma_per_size" => set!(chroma_per_size, uint()?),
                "ae_steps" => set!(ae_steps, uint()?),
                "ae_lr" => set!(ae_lr, float()?),
                "output" => set!(output, PathBuf::from(value)),
                _ => return Err(Error::parse(ln, format!("unknown key {key:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&read_text(path)?)?;
        // relative paths in a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.images, &mut cfg.chroma_manifest, &mut cfg.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

// ---------------------------------------------------------------- manifests

/// Non-comment lines of a manifest, each split into whitespace-separated
/// paths resolved against `base`. Every line must hold `fields` paths.
pub fn parse_manifest(text: &str, base: &Path, fields: usize) -> Result<Vec<Vec<PathBuf>>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != fields {
            return Err(Error::parse(i + 1, format!("expected {fields} paths, got {}", toks.len())));
        }
        out.push(toks.iter().map(|t| base.join(t)).collect());
    }
    if out.is_empty() {
        return Err(Error::parse(1, "manifest lists no files"));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path, fields: usize) -> Result<Vec<Vec<PathBuf>>> {
    parse_manifest(&read_text(path)?, path.parent().unwrap_or(Path::new("")), fields)
}

// ---------------------------------------------------------------- RD CSV

pub fn parse_rd_csv(text: &str) -> Result<RdCurve> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, h)) if h.replace(' ', "") == "rate,psnr" => {}
        Some((ln, _)) => return Err(Error::parse(ln, "header must be \"rate,psnr\"")),
        None => return Err(Error::parse(1, "empty CSV")),
    }
    let mut points = Vec::new();
    for (ln, l) in lines {
        let (r, p) = l.split_once(',').ok_or_else(|| Error::parse(ln, "expected \"rate,psnr\""))?;
        points.push((parse_f64(r.trim(), ln)?, parse_f64(p.trim(), ln)?));
    }
    RdCurve::new(points)
}

pub fn rd_csv(curve: &RdCurve) -> String {
    let mut out = String::from("rate,psnr\n");
    for &(r, p) in curve.points() {
        let _ = writeln!(out, "{},{}", fmt_f64(r), fmt_f64(p));
    }
    out
}

// ---------------------------------------------------------------- filter sets

pub const FILTER_MAGIC: &str = "LNCF 1";

/// `LNCF 1`, then for each position a `filter <dx> <dy>` line (quarter
/// units) followed by 13 lines of 13 taps.
pub fn filter_set_text(set: &QuarterPelFilterSet) -> String {
    let mut out = format!("{FILTER_MAGIC}\n");
    for (pos, k) in set.iter() {
        let _ = writeln!(out, "filter {} {}", pos.dx(), pos.dy());
        for row in k.taps().chunks(FILTER_SIZE) {
            push_row(&mut out, row);
        }
    }
    out
}

pub fn parse_filter_set(text: &str) -> Result<QuarterPelFilterSet> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim_end() == FILTER_MAGIC => {}
        _ => return Err(Error::parse(1, format!("expected header {FILTER_MAGIC:?}"))),
    }
    let mut entries = Vec::new();
    while let Some((ln, l)) = lines.next() {
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() != 3 || t[0] != "filter" {
            return Err(Error::parse(ln, "expected \"filter <dx> <dy>\""));
        }
        let q = |s: &str| s.parse::<u8>().map_err(|_| Error::parse(ln, format!("bad quarter offset {s:?}")));
        let pos = FractionalPosition::new(q(t[1])?, q(t[2])?).map_err(|e| Error::parse(ln, e.to_string()))?;
        let mut taps = Vec::with_capacity(FILTER_SIZE * FILTER_SIZE);
        for _ in 0..FILTER_SIZE {
            let (rl, row) = lines.next().ok_or_else(|| Error::parse(ln, "filter ended early"))?;
            let vals: Vec<f64> = row.split_whitespace().map(|v| parse_f64(v, rl)).collect::<Result<_>>()?;
            if vals.len() != FILTER_SIZE {
                return Err(Error::parse(rl, format!("expected {FILTER_SIZE} taps, got {}", vals.len())));
            }
            taps.extend(vals);
        }
        entries.push((pos, Kernel::new(1, 1, FILTER_SIZE, FILTER_SIZE, taps, None)?));
    }
    QuarterPelFilterSet::new(entries)
}

/// One row per tap: `dx,dy,row,col,tap`.
pub fn filter_taps_csv(set: &QuarterPelFilterSet) -> String {
    let mut out = String::from("dx,dy,row,col,tap\n");
    for (pos, k) in set.iter() {
        for (i, t) in k.taps().iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", pos.dx(), pos.dy(), i / FILTER_SIZE, i % FILTER_SIZE, fmt_f64(*t));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_plain_and_binary() {
        let plain = b"P2\n# a comment\n3 2\n255\n0 1 2\n253 254 255\n";
        let p = read_pgm(plain).unwrap();
        assert_eq!((p.width(), p.height(), p.bit_depth()), (3, 2, 8));
        assert_eq!(p.samples(), &[0.0, 1.0, 2.0, 253.0, 254.0, 255.0]);
        let bin = write_pgm(&p);
        assert!(bin.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(read_pgm(&bin).unwrap(), p);

        let ten = Plane::from_fn(4, 3, 10, |x, y| (x * 300 + y) as f64).unwrap();
        let bytes = write_pgm(&ten);
        assert!(bytes.starts_with(b"P5\n4 3\n1023\n"));
        assert_eq!(bytes.len(), 12 + 24);
        assert_eq!(read_pgm(&bytes).unwrap(), ten);
        let plain10 = b"P2 2 1 1023 1023 512";
        assert_eq!(read_pgm(plain10).unwrap().bit_depth(), 10);
    }

    #[test]
    fn pgm_errors_carry_lines() {
        for (bytes, line) in [
            (&b"P6\n1 1\n255\n\0"[..], 1),
            (b"P2\n2 2\n255\n1 2\n3", 5),
            (b"P2\n1 1\n255\n\n300\n", 5),
            (b"P2\n1 1\n65535\n0\n", 3),
            (b"P5\n4 4\n255\n\0\0", 3),
            (b"P2\n0 4\n255\n", 3),
        ] {
            match read_pgm(bytes) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{:?}", String::from_utf8_lossy(bytes)),
                other => panic!("{:?}: {other:?}", String::from_utf8_lossy(bytes)),
            }
        }
    }

    fn sample_model() -> ModelFile {
        ModelFile {
            layers: vec![
                Layer::Affine(
                    AffineMap::new(
                        Matrix::new(2, 3, vec![0.1, -2.5e-300, 3.0, 1.0 / 3.0, -0.0, 7.0]).unwrap(),
                        Vector::new(vec![1e300, -1.0]).unwrap(),
                    )
                    .unwrap(),
                ),
                Layer::Conv(Kernel::new(2, 1, 2, 3, (0..12).map(|i| f64::from(i) / 7.0).collect(), None).unwrap()),
                Layer::Attention { dim: 3, temperature: 3f64.sqrt() },
            ],
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = sample_model();
        let text = m.to_text();
        let back = ModelFile::parse(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
        assert!(text.contains("layer conv 2 1 2 3\n"));
    }

    #[test]
    fn model_parse_errors() {
        let good = sample_model().to_text();
        let cases = [
            (good.replacen("LNCM 1", "LNCM 2", 1), 1),
            (good.replacen("layer conv", "layer pool", 1), 7),
            (good.replacen("7.0000000000000000e0", "NaN", 1), 4),
            (good.replacen("bias 2", "bias 3", 1), 5),
            ("LNCM 1\n".to_string(), 1),
            ("LNCM 1\nlayer affine 2 2\n1 2 3\n".to_string(), 2),
            ("LNCM 1\nlayer affine 1 2\n1 2 3\n".to_string(), 3),
            ("LNCM 1\nlayer attention 3\n-1\n".to_string(), 2),
        ];
        for (text, line) in cases {
            match ModelFile::parse(&text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn model_kinds() {
        let fcn = Model::Fcn(
            LinearFcn::new(vec![AffineMap::new(Matrix::identity(2), Vector::zeros(2)).unwrap()]).unwrap(),
        );
        assert_eq!(Model::from_file(fcn.to_file()).unwrap(), fcn);
        assert!(Model::from_file(sample_model()).is_err());
    }

    #[test]
    fn run_config_is_fail_closed() {
        let cfg = RunConfig::parse("# training\nseed = 7\nlr = 0.01 # base\nblock_sizes = 4, 16\npositions = dx2dy2,dx1dy0\n")
            .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.lr, Some(0.01));
        assert_eq!(cfg.block_sizes, Some(vec![4, 16]));
        assert_eq!(cfg.positions.as_ref().map(Vec::len), Some(2));
        for (text, line) in [
            ("seed = 1\nsed = 2\n", 2),
            ("seed = 1\nseed = 2\n", 2),
            ("epochs = many\n", 1),
            ("\n\nlr\n", 3),
            ("positions = dx0dy0\n", 1),
            ("lr = inf\n", 1),
        ] {
            match RunConfig::parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn manifests_and_csv() {
        let m = parse_manifest("a.pgm\n# skip\n\nsub/b.pgm\n", Path::new("/data"), 1).unwrap();
        assert_eq!(m, vec![vec![PathBuf::from("/data/a.pgm")], vec![PathBuf::from("/data/sub/b.pgm")]]);
        assert!(matches!(parse_manifest("y.pgm u.pgm\n", Path::new(""), 3), Err(Error::Parse { line: 1, .. })));
        assert!(parse_manifest("# nothing\n", Path::new(""), 1).is_err());

        let text = "rate,psnr\n100,30\n200,33\n400,36\n800,39\n";
        let c = parse_rd_csv(text).unwrap();
        assert_eq!(parse_rd_csv(&rd_csv(&c)).unwrap(), c);
        assert!(matches!(parse_rd_csv("psnr,rate\n1,2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_rd_csv("rate,psnr\n1,2\n3;4\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_rd_csv("rate,psnr\n1,2\n"), Err(Error::Data(_))));
    }

    #[test]
    fn filter_set_round_trip() {
        let set = QuarterPelFilterSet::new(
            FractionalPosition::all()
                .into_iter()
                .map(|p| {
                    let taps = (0..169).map(|i| (i as f64 - 84.0) / (1.0 + p.index() as f64)).collect();
                    (p, Kernel::new(1, 1, 13, 13, taps, None).unwrap())
                })
                .collect(),
        )
        .unwrap();
        let text = filter_set_text(&set);
        assert_eq!(parse_filter_set(&text).unwrap(), set);
        assert_eq!(filter_taps_csv(&set).lines().count(), 1 + 15 * 169);
        let cut: String = text.lines().take(1 + 14 * 14).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_filter_set(&cut), Err(Error::Data(_))));
        assert!(matches!(parse_filter_set(&text.replacen("filter 1 0", "filter 0 0", 1)), Err(Error::Parse { line: 2, .. })));
    }
}
