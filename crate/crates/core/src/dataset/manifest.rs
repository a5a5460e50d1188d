//! Line-oriented dataset manifests: `path,identity,camera,split`, with `-`
//! for absent labels. Relative paths resolve against the manifest's folder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::folder::decode_image;
use super::{Dataset, Image, LoadOptions, Sample, Split};
use crate::error::{Error, Result};

const ABSENT: &str = "-";

fn opt_field(v: Option<usize>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |v| v.to_string())
}

fn parse_opt(field: &str, line_no: usize) -> Result<Option<i64>> {
    if field == ABSENT {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Dataset(format!("manifest line {line_no}: bad integer '{field}'")))
}

/// Write the manifest for samples that already live on disk.
pub fn write_manifest(ds: &Dataset, manifest_path: &Path) -> Result<()> {
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let mut out = String::new();
    for s in ds.samples() {
        let p = s.path.as_ref().ok_or_else(|| {
            Error::Dataset("manifest export requires every sample to have a path".into())
        })?;
        let rel = p.strip_prefix(base).unwrap_or(p);
        let rel = rel.to_str().ok_or_else(|| {
            Error::Dataset(format!("non UTF-8 path {}", rel.display()))
        })?;
        if rel.contains(',') {
            return Err(Error::Dataset(format!("path contains a comma: {rel}")));
        }
        writeln!(
            out,
            "{rel},{},{},{}",
            opt_field(s.identity),
            opt_field(s.camera),
            s.split
        )
        .expect("writing to a String");
    }
    std::fs::write(manifest_path, out).map_err(|e| Error::io(manifest_path, e))
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = img.shape();
    if c != 3 {
        return Err(Error::ShapeMismatch {
            expected: "3 channels".into(),
            got: format!("{c} channels"),
        });
    }
    let out = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch| (img.get(ch, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    out.save(path)?;
    Ok(())
}

/// Write every image as PNG under `dir/images/` plus `dir/manifest.csv`.
///
/// Returns the manifest path and the dataset with sample paths filled in.
pub fn export_manifest(ds: &Dataset, dir: &Path) -> Result<(PathBuf, Dataset)> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut samples = Vec::with_capacity(ds.len());
    let mut per_id: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    for s in ds.samples() {
        let counter = per_id.entry(s.identity).or_default();
        let file = match s.identity {
            Some(id) => format!("{id:04}_{:03}.png", *counter),
            None => format!("img_{:05}.png", *counter),
        };
        *counter += 1;
        let p = images.join(file);
        save_png(&s.image, &p)?;
        let mut s = s.clone();
        s.path = Some(p);
        samples.push(s);
    }
    let exported = Dataset::new(ds.name(), samples)?;
    let manifest = dir.join("manifest.csv");
    write_manifest(&exported, &manifest)?;
    Ok((manifest, exported))
}

/// Load a dataset from a manifest. Identities are re-indexed to `0..n`.
pub fn read_manifest(manifest_path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let text =
        std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Dataset(format!(
                "manifest line {}: expected 4 fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let path = base.join(fields[0]);
        if !seen.insert(path.clone()) {
            return Err(Error::DuplicatePath(path));
        }
        let identity = parse_opt(fields[1], i + 1)?;
        let camera = parse_opt(fields[2], i + 1)?.map(|c| c as usize);
        let split: Split = fields[3].parse()?;
        rows.push((path, identity, camera, split));
    }
    let ids: BTreeMap<i64, usize> = rows
        .iter()
        .filter_map(|r| r.1)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let mut samples = Vec::with_capacity(rows.len());
    for (path, identity, camera, split) in rows {
        let image = decode_image(&path, opts)?;
        samples.push(Sample {
            path: Some(path),
            image,
            identity: identity.map(|id| ids[&id]),
            camera,
            split,
        });
    }
    let name = base
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("manifest")
        .to_string();
    Dataset::new(name, samples)
}
