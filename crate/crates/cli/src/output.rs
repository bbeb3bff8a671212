use anyhow::{bail, Context, Result};
use divis::Tensor;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

const RAW_MAGIC: &[u8; 4] = b"DVF8";

/// Create `dir`, refusing to reuse a non-empty directory unless `force`,
/// in which case its previous contents are removed.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = !dir.is_dir() || fs::read_dir(dir)?.next().is_some();
        if occupied {
            if !force {
                bail!("output directory {} already exists and is not empty (use --force to replace it)", dir.display());
            }
            if dir.is_dir() {
                fs::remove_dir_all(dir)?;
            } else {
                fs::remove_file(dir)?;
            }
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn to_byte(v: f64, mean: f64, gain: f64) -> u8 {
    (mean + gain * v).round().clamp(0.0, 255.0) as u8
}

/// 8-bit display copy: PGM for one channel, PPM for three. Pixel values are
/// `mean + gain * x`, clipped to [0, 255].
pub fn write_image(path: &Path, image: &Tensor, mean: f64, gain: f64) -> Result<()> {
    let [c, h, w] = chw(image)?;
    let d = image.data();
    let mut out = match c {
        1 => format!("P5\n{w} {h}\n255\n").into_bytes(),
        3 => format!("P6\n{w} {h}\n255\n").into_bytes(),
        _ => bail!("cannot display a {c}-channel image"),
    };
    for p in 0..h * w {
        for ch in 0..c {
            out.push(to_byte(d[ch * h * w + p], mean, gain));
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn chw(image: &Tensor) -> Result<[usize; 3]> {
    match *image.shape() {
        [c, h, w] => Ok([c, h, w]),
        [h, w] => Ok([1, h, w]),
        ref s => bail!("expected a [C,H,W] image, got shape {s:?}"),
    }
}

/// Lossless sidecar: magic, u32 rank, u64 dims, then f64 values, all
/// little-endian.
pub fn write_raw(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = RAW_MAGIC.to_vec();
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let bad = || format!("{} is not a raw float image", path.display());
    if bytes.len() < 8 || &bytes[..4] != RAW_MAGIC {
        bail!(bad());
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into()?) as usize;
    let body = 8 + 8 * rank;
    if bytes.len() < body {
        bail!(bad());
    }
    let dims: Vec<usize> = (0..rank).map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize).collect();
    let n: usize = dims.iter().product();
    if bytes.len() != body + 8 * n {
        bail!("{}: payload does not match dims {dims:?}", path.display());
    }
    let data = bytes[body..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(&dims, data)?)
}

/// Raw sidecars in `dir`, sorted by file name.
pub fn read_raw_dir(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading template directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "f64"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .f64 images in {}", dir.display());
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            Ok((name, read_raw(&p)?))
        })
        .collect()
}

/// `template_XX.pgm` plus `template_XX.f64` for every image.
pub fn write_templates(dir: &Path, images: &[Tensor], mean: f64, gain: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, im) in images.iter().enumerate() {
        let ext = if chw(im)?[0] == 3 { "ppm" } else { "pgm" };
        write_image(&dir.join(format!("template_{i:02}.{ext}")), im, mean, gain)?;
        write_raw(&dir.join(format!("template_{i:02}.f64")), im)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut c = Csv { text: String::new() };
        c.row(header.iter().map(|s| s.to_string()));
        c
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, cells: I) {
        let cells: Vec<String> = cells.into_iter().map(|c| quote(&c)).collect();
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.text).with_context(|| format!("writing {}", path.display()))
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
