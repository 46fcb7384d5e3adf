//! Dataset directory layout.
//!
//! ```text
//! root/
//!   manifest.json      [{"id", "image_file", "mask_file"?, "domain"}, ...]
//!   <image>.pgm        P5, 16-bit big-endian, maxval 65535, loaded as k/65535
//!   <mask>.pgm         P5, 8-bit, 0 = background, 255 = foreground
//! ```
//!
//! Writing quantizes intensities to the 16-bit grid after clamping to [0, 1],
//! so `load(write(ds))` is bit-exact for any dataset that was itself loaded.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, Mask, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
    pub domain: String,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;

    let mut samples = Vec::with_capacity(entries.len());
    for entry in entries {
        let image = read_image_pgm(&root.join(&entry.image_file))?;
        let truth = match &entry.mask_file {
            Some(f) if root.join(f).exists() => Some(read_mask_pgm(&root.join(f))?),
            _ => None,
        };
        samples.push(Sample::new(entry.id, image, truth, entry.domain)?);
    }
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Dataset::new(name, samples)
}

pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for s in ds.samples() {
        let stem = sanitize(&s.id);
        let image_file = format!("{stem}.pgm");
        write_image_pgm(&s.image, &root.join(&image_file))?;
        let mask_file = match &s.truth {
            Some(m) => {
                let f = format!("{stem}_mask.pgm");
                write_mask_pgm(m, &root.join(&f))?;
                Some(f)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image_file,
            mask_file,
            domain: s.domain.clone(),
        });
    }
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn quantize_intensity(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn encode_image_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for &p in img.pixels() {
        out.extend_from_slice(&quantize_intensity(p).to_be_bytes());
    }
    out
}

pub fn encode_mask_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.labels().iter().map(|&v| v * 255));
    out
}

pub fn write_image_pgm(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_image_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_mask_pgm(mask: &Mask, path: &Path) -> Result<()> {
    fs::write(path, encode_mask_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_image_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, body) = parse_pgm_header(&bytes, path)?;
    if maxval != 65535 {
        return Err(Error::format(
            path.display().to_string(),
            format!("image maxval must be 65535, got {maxval}"),
        ));
    }
    if body.len() != w * h * 2 {
        return Err(Error::format(path.display().to_string(), "truncated pixel data"));
    }
    let pixels = body
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
        .collect();
    Image::new(h, w, pixels)
}

pub fn read_mask_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, body) = parse_pgm_header(&bytes, path)?;
    if maxval != 255 {
        return Err(Error::format(
            path.display().to_string(),
            format!("mask maxval must be 255, got {maxval}"),
        ));
    }
    if body.len() != w * h {
        return Err(Error::format(path.display().to_string(), "truncated mask data"));
    }
    let labels = body
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(Error::format(
                path.display().to_string(),
                format!("mask value {other} is neither 0 nor 255"),
            )),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(h, w, labels)
}

/// Returns (width, height, maxval, pixel bytes).
fn parse_pgm_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let bad = |d: &str| Error::format(path.display().to_string(), d.to_string());
    if !bytes.starts_with(b"P5") {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header field"))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing raster separator"));
    }
    Ok((fields[0], fields[1], fields[2], &bytes[pos + 1..]))
}
