use std::collections::HashSet;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{Image, PatchDataset, PatchItem, SplitTag};

const PNG_BYTE_LIMIT: usize = 64 << 20;

/// One parsed manifest row; `path` is relative to the manifest's folder
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub line: usize,
    pub id: String,
    pub path: String,
    pub label: Option<usize>,
}

/// Parses manifest CSV text (`id,path,label` header, blank label =
/// unlabeled) without touching any image files.
pub fn decode_manifest(text: &[u8], origin: &Path) -> Result<Vec<ManifestRow>> {
    let err = |line: usize, message: String| Error::Manifest {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text);
    let headers = reader
        .headers()
        .map_err(|e| err(1, format!("unreadable header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| err(1, format!("missing `{name}` column")))
    };
    let (id_col, path_col, label_col) = (col("id")?, col("path")?, col("label")?);

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            err(line, format!("malformed row: {e}"))
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = record.get(id_col).unwrap_or("").trim();
        let path = record.get(path_col).unwrap_or("").trim();
        let label = record.get(label_col).unwrap_or("").trim();
        if id.is_empty() {
            return Err(err(line, "empty id".into()));
        }
        if path.is_empty() {
            return Err(err(line, format!("item `{id}` has an empty path")));
        }
        let label = if label.is_empty() {
            None
        } else {
            Some(
                label
                    .parse::<usize>()
                    .map_err(|_| err(line, format!("label `{label}` is not a class index")))?,
            )
        };
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        rows.push(ManifestRow {
            line,
            id: id.to_string(),
            path: path.to_string(),
            label,
        });
    }
    Ok(rows)
}

/// Loads a manifest CSV or a folder-per-class tree.
///
/// For manifests the class count is one more than the largest label (at
/// least 2). For folder trees the class index is the lexicographic rank of
/// the folder name.
pub fn load_manifest(path: &Path) -> Result<PatchDataset> {
    if path.is_dir() {
        return load_folder_tree(path);
    }
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rows = decode_manifest(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::with_capacity(rows.len());
    for row in rows {
        let img_path = resolve(base, &row.path);
        items.push(PatchItem {
            id: row.id,
            image: read_png(&img_path)?,
            label: row.label,
        });
    }
    let k = items
        .iter()
        .filter_map(|it| it.label)
        .max()
        .map_or(2, |m| (m + 1).max(2));
    PatchDataset::new(items, k, SplitTag::Train)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn load_folder_tree(root: &Path) -> Result<PatchDataset> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut items = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let class_name = class_dir.file_name().unwrap_or_default().to_string_lossy();
        for file in sorted_entries(class_dir)? {
            let is_png = file
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                continue;
            }
            let file_name = file.file_name().unwrap_or_default().to_string_lossy();
            items.push(PatchItem {
                id: format!("{class_name}/{file_name}"),
                image: read_png(&file)?,
                label: Some(label),
            });
        }
    }
    PatchDataset::new(items, classes.len().max(2), SplitTag::Train)
}

fn read_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_png(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Decodes an 8-bit grayscale or RGB PNG. Alpha channels are dropped and
/// palettes expanded.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let fail = |m: String| Error::Image {
        path: PathBuf::from("<memory>"),
        message: m,
    };
    let mut decoder =
        png::Decoder::new_with_limits(Cursor::new(bytes), png::Limits { bytes: PNG_BYTE_LIMIT });
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fail("image too large".into()))?;
    if size > PNG_BYTE_LIMIT {
        return Err(fail("image too large".into()));
    }
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(fail(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(fail(format!("unsupported color type {other:?}"))),
    };
    let line = info.line_size;
    let mut pixels = Vec::with_capacity(w * h * keep);
    for row in buf.chunks(line).take(h) {
        for px in row[..w * src_channels].chunks_exact(src_channels) {
            pixels.extend_from_slice(&px[..keep]);
        }
    }
    Image::new(h, w, keep, pixels)
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(if image.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::Image {
            path: PathBuf::from("<memory>"),
            message: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(fail)?;
        writer.write_image_data(&image.pixels).map_err(fail)?;
    }
    Ok(out)
}

/// Writes every item as `<dir>/<n>.png` plus `<dir>/manifest.csv`.
pub fn save_manifest(ds: &PatchDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::io(&manifest, e.into()))?;
    let csv_err = |e: csv::Error| Error::io(&manifest, e.into());
    w.write_record(["id", "path", "label"]).map_err(csv_err)?;
    for (n, it) in ds.items().iter().enumerate() {
        let file = format!("{n:06}.png");
        let path = dir.join(&file);
        fs::write(&path, encode_png(&it.image)?).map_err(|e| Error::io(&path, e))?;
        let label = it.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([it.id.as_str(), file.as_str(), label.as_str()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
