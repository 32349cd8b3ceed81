//! Files: PNG images, checkpoints, manifests and atomic writes.

use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use derain_core::checkpoint;
use derain_core::synth::RainParams;
use derain_core::train::{AdamState, ImagePair};
use derain_core::{Network, Shape, Tensor};
use image::{ColorType, ImageFormat, RgbImage};

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place. The target is either untouched or complete.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Decodes an 8-bit RGB or gray PNG into `(1, 3, H, W)` with values in
/// `[0, 1]`. Gray is replicated to three channels; alpha is dropped.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .with_guessed_format()?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => bail!("{}: unsupported pixel format {other:?} (8-bit gray or RGB expected)", path.display()),
    }
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

/// Quantizes to 8 bits with round-half-up after clamping to `[0, 1]`.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        bail!("expected a (1, 3, H, W) image tensor, got {s}");
    }
    let mut img = RgbImage::new(s.w as u32, s.h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = t.at(0, c, y as usize, x as usize).clamp(0.0, 1.0);
            px[c] = (f64::from(v) * 255.0 + 0.5).floor().min(255.0) as u8;
        }
    }
    Ok(img)
}

pub fn encode_png(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    tensor_to_rgb(t)?.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(bytes)
}

pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(t)?)
}

pub fn save_checkpoint(net: &Network<f32>, adam: Option<&AdamState<f32>>, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint::encode(net, adam))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, Option<AdamState<f32>>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    checkpoint::decode(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// One manifest row. Paths are resolved against the manifest's directory.
/// Rain parameters are absent for pairs that were not generated here.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub clean_path: PathBuf,
    pub rainy_path: PathBuf,
    pub params: Option<RainParams>,
}

pub const MANIFEST_HEADER: [&str; 7] = ["clean_path", "rainy_path", "angle", "length", "density", "intensity", "seed"];

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(ci), Some(ri)) = (col("clean_path"), col("rainy_path")) else {
        bail!("{}: manifest needs clean_path and rainy_path columns", path.display());
    };
    let param_cols: Option<Vec<usize>> = MANIFEST_HEADER[2..].iter().map(|h| col(h)).collect();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let params = match &param_cols {
            Some(cols) if cols.iter().all(|&i| !field(i).is_empty()) => {
                let bad = || anyhow::anyhow!("{}: row {}: malformed rain parameters", path.display(), line + 2);
                Some(RainParams {
                    angle_deg: field(cols[0]).parse().map_err(|_| bad())?,
                    streak_length_px: field(cols[1]).parse().map_err(|_| bad())?,
                    density: field(cols[2]).parse().map_err(|_| bad())?,
                    intensity: field(cols[3]).parse().map_err(|_| bad())?,
                    seed: field(cols[4]).parse().map_err(|_| bad())?,
                })
            }
            _ => None,
        };
        rows.push(ManifestRow {
            clean_path: base.join(field(ci)),
            rainy_path: base.join(field(ri)),
            params,
        });
    }
    if rows.is_empty() {
        bail!("{}: manifest has no rows", path.display());
    }
    Ok(rows)
}

/// Serializes rows with paths written relative to `base` when possible.
pub fn manifest_csv(rows: &[ManifestRow], base: &Path) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    for r in rows {
        let mut rec = vec![rel(&r.clean_path), rel(&r.rainy_path)];
        match &r.params {
            Some(p) => rec.extend([
                p.angle_deg.to_string(),
                p.streak_length_px.to_string(),
                p.density.to_string(),
                p.intensity.to_string(),
                p.seed.to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 5)),
        }
        w.write_record(&rec)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

pub fn load_pairs(rows: &[ManifestRow]) -> Result<Vec<ImagePair<f32>>> {
    rows.iter()
        .map(|r| {
            let clean = load_image(&r.clean_path)?;
            let rainy = load_image(&r.rainy_path)?;
            ImagePair::new(rainy, clean)
                .with_context(|| format!("{} and {} differ in size", r.rainy_path.display(), r.clean_path.display()))
        })
        .collect()
}
