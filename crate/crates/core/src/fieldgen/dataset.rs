//! Dataset container and grid interchange.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic "SMDS" | version u32 | count u32 | h u32 | w u32 | scale u32
//! | norm min f64 | norm max f64 | meta len u32 | meta (UTF-8 JSON)
//! | count x (lr f32 array, hr f32 array)
//! ```
//!
//! h and w are the fine-grid dimensions; each lr array is (h/scale) by
//! (w/scale). Reads validate the full length up front and never hand
//! back a partial dataset.

use std::path::Path;

use super::pairs::{SamplePair, SourceDesc};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SMDS";
pub const VERSION: u32 = 1;

/// An in-memory dataset: header fields plus all pairs.
#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub version: u32,
    pub hr_h: usize,
    pub hr_w: usize,
    pub scale: usize,
    pub norm_min: f64,
    pub norm_max: f64,
    pub meta: String,
    pub pairs: Vec<SamplePair>,
}

impl DatasetFile {
    pub fn lr_h(&self) -> usize {
        self.hr_h / self.scale
    }

    pub fn lr_w(&self) -> usize {
        self.hr_w / self.scale
    }
}

pub fn write_dataset(path: &Path, ds: &DatasetFile) -> Result<()> {
    let lr_len = ds.lr_h() * ds.lr_w();
    let hr_len = ds.hr_h * ds.hr_w;
    let mut buf = Vec::with_capacity(44 + ds.meta.len() + ds.pairs.len() * 4 * (lr_len + hr_len));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&ds.version.to_le_bytes());
    buf.extend_from_slice(&(ds.pairs.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.hr_h as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.hr_w as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.scale as u32).to_le_bytes());
    buf.extend_from_slice(&ds.norm_min.to_le_bytes());
    buf.extend_from_slice(&ds.norm_max.to_le_bytes());
    buf.extend_from_slice(&(ds.meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(ds.meta.as_bytes());
    for (i, p) in ds.pairs.iter().enumerate() {
        if p.lr.len() != lr_len || p.hr.len() != hr_len {
            return Err(Error::Invariant(format!(
                "write_dataset: pair {i} has grid sizes {}/{}, header says {lr_len}/{hr_len}",
                p.lr.len(),
                p.hr.len()
            )));
        }
        for v in p.lr.iter().chain(p.hr.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::Format(format!(
                "dataset truncated at byte {}: needed {n} more bytes, file ends at {}",
                self.off,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        off: 0,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad dataset magic {magic:?} at byte 0, expected \"SMDS\""
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}, this build reads {VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let hr_h = r.u32()? as usize;
    let hr_w = r.u32()? as usize;
    let scale = r.u32()? as usize;
    if scale == 0 || hr_h % scale != 0 || hr_w % scale != 0 {
        return Err(Error::Format(format!(
            "dataset header at byte 12: grid {hr_h}x{hr_w} not divisible by scale {scale}"
        )));
    }
    let norm_min = r.f64()?;
    let norm_max = r.f64()?;
    let meta_len = r.u32()? as usize;
    let meta_off = r.off;
    let meta = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|e| Error::Format(format!("metadata at byte {meta_off} is not UTF-8: {e}")))?
        .to_string();

    let generator = serde_json::from_str::<serde_json::Value>(&meta)
        .ok()
        .and_then(|v| v.get("generator").cloned())
        .map(|v| match v {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        })
        .unwrap_or_else(|| "unknown".to_string());

    let lr_len = (hr_h / scale) * (hr_w / scale);
    let hr_len = hr_h * hr_w;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let mut read_grid = |len: usize| -> Result<Vec<f32>> {
            let raw = r.take(len * 4)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let lr = read_grid(lr_len)?;
        let hr = read_grid(hr_len)?;
        pairs.push(SamplePair {
            lr,
            hr,
            source: SourceDesc {
                generator: generator.clone(),
                seed: i as u64,
            },
        });
    }
    if r.off != bytes.len() {
        return Err(Error::Format(format!(
            "dataset has {} trailing bytes after byte {}",
            bytes.len() - r.off,
            r.off
        )));
    }
    Ok(DatasetFile {
        version,
        hr_h,
        hr_w,
        scale,
        norm_min,
        norm_max,
        meta,
        pairs,
    })
}

/// Write one grid as CSV: a "h,w" header line, then one row per line.
pub fn write_grid_csv(path: &Path, h: usize, w: usize, data: &[f32]) -> Result<()> {
    if data.len() != h * w {
        return Err(Error::Invariant(format!(
            "write_grid_csv: {} values for a {h}x{w} grid",
            data.len()
        )));
    }
    let mut out = String::new();
    out.push_str(&format!("{h},{w}\n"));
    for row in data.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a CSV grid written by `write_grid_csv` (or any comma-separated
/// row-major dump with a leading dimensions line).
pub fn read_grid_csv(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{name}: empty grid file")))?;
    let dims: Vec<&str> = header.split(',').map(str::trim).collect();
    if dims.len() != 2 {
        return Err(Error::Data(format!(
            "{name}: header must be \"h,w\", got {header:?}"
        )));
    }
    let h: usize = dims[0]
        .parse()
        .map_err(|_| Error::Data(format!("{name}: bad row count {:?}", dims[0])))?;
    let w: usize = dims[1]
        .parse()
        .map_err(|_| Error::Data(format!("{name}: bad column count {:?}", dims[1])))?;
    let mut data = Vec::with_capacity(h * w);
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        for tok in line.split(',') {
            let v: f32 = tok.trim().parse().map_err(|_| {
                Error::Data(format!("{name}: line {}: bad value {tok:?}", ln + 2))
            })?;
            data.push(v);
        }
    }
    if data.len() != h * w {
        return Err(Error::Data(format!(
            "{name}: header says {h}x{w} = {} values, found {}",
            h * w,
            data.len()
        )));
    }
    Ok((h, w, data))
}

/// Load external pairs from a directory of `<stem>_lr.csv` and
/// `<stem>_hr.csv` files. Returns the pairs with their common fine-grid
/// dimensions and scale.
pub fn import_csv_pairs(dir: &Path) -> Result<(Vec<SamplePair>, usize, usize, usize)> {
    let mut stems: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_lr.csv") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!(
            "{}: no *_lr.csv files to import",
            dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(stems.len());
    let mut dims: Option<(usize, usize, usize, usize)> = None;
    for (i, stem) in stems.iter().enumerate() {
        let (lh, lw, lr) = read_grid_csv(&dir.join(format!("{stem}_lr.csv")))?;
        let hr_path = dir.join(format!("{stem}_hr.csv"));
        if !hr_path.exists() {
            return Err(Error::Data(format!(
                "{stem}_lr.csv has no matching {stem}_hr.csv"
            )));
        }
        let (hh, hw, hr) = read_grid_csv(&hr_path)?;
        match dims {
            None => dims = Some((lh, lw, hh, hw)),
            Some(d) if d != (lh, lw, hh, hw) => {
                return Err(Error::Data(format!(
                    "{stem}: grid sizes {lh}x{lw}/{hh}x{hw} differ from the first pair's {}x{}/{}x{}",
                    d.0, d.1, d.2, d.3
                )));
            }
            _ => {}
        }
        pairs.push(SamplePair {
            lr,
            hr,
            source: SourceDesc {
                generator: format!("import:{stem}"),
                seed: i as u64,
            },
        });
    }
    let (lh, lw, hh, hw) = dims.unwrap();
    if lh == 0 || lw == 0 || hh % lh != 0 || hw % lw != 0 || hh / lh != hw / lw {
        return Err(Error::Data(format!(
            "imported grids {lh}x{lw}/{hh}x{hw} do not share an integer scale"
        )));
    }
    let scale = hh / lh;
    if !matches!(scale, 2 | 4 | 8) {
        return Err(Error::Data(format!(
            "imported scale {scale} is not one of 2, 4, 8"
        )));
    }
    if hh % 16 != 0 || hw % 16 != 0 {
        return Err(Error::Data(format!(
            "imported fine grid {hh}x{hw} must be divisible by 16"
        )));
    }
    Ok((pairs, hh, hw, scale))
}
