//! Image folder ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;

use super::{Dataset, Image, Sample, Split};
use crate::error::{Error, Result};

/// Filename convention of a folder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Naming {
    /// `<personID>_c<cameraID>..._<frame>.<ext>` (Market-1501 style).
    ReidUnderscore,
    /// Any image files, no labels.
    FlatUnlabeled,
}

impl FromStr for Naming {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reid_underscore" | "reid" => Ok(Naming::ReidUnderscore),
            "flat_unlabeled" | "flat" => Ok(Naming::FlatUnlabeled),
            other => Err(Error::InvalidArgument(format!("unknown naming '{other}'"))),
        }
    }
}

/// Which files go to which split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitSpec {
    /// Every image directly under the folder gets this split.
    All(Split),
    /// Subdirectory name to split, e.g. `bounding_box_test -> gallery`.
    Subdirs(Vec<(String, Split)>),
}

impl FromStr for SplitSpec {
    type Err = Error;

    /// Either a bare split name or `dir=split,dir=split,...`.
    fn from_str(s: &str) -> Result<Self> {
        if !s.contains('=') {
            return Ok(SplitSpec::All(s.parse()?));
        }
        let mut entries = Vec::new();
        for part in s.split(',').filter(|p| !p.is_empty()) {
            let (dir, split) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad split entry '{part}'")))?;
            entries.push((dir.trim().to_string(), split.trim().parse()?));
        }
        Ok(SplitSpec::Subdirs(entries))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub height: usize,
    pub width: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
        }
    }
}

/// Files that were skipped while loading.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub skipped: Vec<(PathBuf, String)>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Parse `<personID>_c<cameraID>...` from a file stem.
pub(crate) fn parse_reid_name(path: &Path) -> Option<(i64, usize)> {
    let stem = path.file_stem()?.to_str()?;
    let mut parts = stem.split('_');
    let pid: i64 = parts.next()?.parse().ok()?;
    let cam_token = parts.next()?.strip_prefix('c')?;
    let digits: String = cam_token.chars().take_while(|c| c.is_ascii_digit()).collect();
    let cam = digits.parse().ok()?;
    Some((pid, cam))
}

pub(crate) fn decode_image(path: &Path, opts: &LoadOptions) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let rgb = if rgb.width() as usize != opts.width || rgb.height() as usize != opts.height {
        image::imageops::resize(
            &rgb,
            opts.width as u32,
            opts.height as u32,
            FilterType::Triangle,
        )
    } else {
        rgb
    };
    let (w, h) = (opts.width, opts.height);
    let mut img = Image::filled(3, h, w, 0.0);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    Ok(img)
}

/// Load a folder of images.
///
/// Files are visited in lexicographic path order. Unreadable images (and, for
/// `reid_underscore`, unparseable names) are skipped and reported. Identities
/// are re-indexed to `0..n` in ascending order of the original person IDs.
pub fn load_image_folder(
    path: &Path,
    naming: Naming,
    split_spec: &SplitSpec,
    opts: &LoadOptions,
) -> Result<(Dataset, LoadReport)> {
    if !path.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", path.display())));
    }
    let mut files: Vec<(PathBuf, Split)> = Vec::new();
    match split_spec {
        SplitSpec::All(split) => {
            files.extend(list_images(path)?.into_iter().map(|p| (p, *split)));
        }
        SplitSpec::Subdirs(entries) => {
            for (dir, split) in entries {
                files.extend(list_images(&path.join(dir))?.into_iter().map(|p| (p, *split)));
            }
        }
    }
    let mut seen = BTreeSet::new();
    for (p, _) in &files {
        let canonical = p.canonicalize().map_err(|e| Error::io(p, e))?;
        if !seen.insert(canonical) {
            return Err(Error::DuplicatePath(p.clone()));
        }
    }
    files.sort();

    let mut report = LoadReport::default();
    let mut raw = Vec::new();
    for (p, split) in files {
        let labels = match naming {
            Naming::ReidUnderscore => match parse_reid_name(&p) {
                Some((pid, cam)) => Some((pid, cam)),
                None => {
                    log::warn!("skipping {}: name does not match <id>_c<cam>_...", p.display());
                    report.skipped.push((p, "unparseable name".into()));
                    continue;
                }
            },
            Naming::FlatUnlabeled => None,
        };
        match decode_image(&p, opts) {
            Ok(img) => raw.push((p, split, labels, img)),
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", p.display());
                report.skipped.push((p, e.to_string()));
            }
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }

    let pid_index: BTreeMap<i64, usize> = raw
        .iter()
        .filter_map(|(_, _, l, _)| l.map(|(pid, _)| pid))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, pid)| (pid, i))
        .collect();
    let samples = raw
        .into_iter()
        .map(|(p, split, labels, image)| Sample {
            path: Some(p),
            image,
            identity: labels.map(|(pid, _)| pid_index[&pid]),
            camera: labels.map(|(_, cam)| cam),
            split,
        })
        .collect();
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok((Dataset::new(name, samples)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, shade: u8) {
        let img = image::RgbImage::from_pixel(8, 12, image::Rgb([shade, shade / 2, 255 - shade]));
        img.save(path).unwrap();
    }

    #[test]
    fn reid_folder_reindexes_identities() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("0001_c1_01.png"), 10);
        write_png(&dir.path().join("0001_c2_03.png"), 20);
        write_png(&dir.path().join("0002_c1_07.png"), 30);
        let (ds, report) = load_image_folder(
            dir.path(),
            Naming::ReidUnderscore,
            &SplitSpec::All(Split::Gallery),
            &LoadOptions::default(),
        )
        .unwrap();
        assert!(report.skipped.is_empty());
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_identities(), 2);
        let cams: BTreeSet<_> = ds.samples().iter().filter_map(|s| s.camera).collect();
        assert_eq!(cams, BTreeSet::from([1, 2]));
        let ids: Vec<_> = ds.samples().iter().map(|s| s.identity.unwrap()).collect();
        assert_eq!(ids, vec![0, 0, 1]);
        assert_eq!(ds.image_shape(), (3, 32, 32));
    }

    #[test]
    fn flat_folder_is_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..5 {
            write_png(&dir.path().join(format!("img{i}.png")), i * 40);
        }
        let (ds, _) = load_image_folder(
            dir.path(),
            Naming::FlatUnlabeled,
            &SplitSpec::All(Split::MetaTrain),
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(ds.len(), 5);
        assert!(ds.samples().iter().all(|s| s.identity.is_none()));
        assert!(!ds.is_labeled());
    }

    #[test]
    fn corrupt_file_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..9 {
            write_png(&dir.path().join(format!("{i:04}_c1_01.png")), 25 * i as u8);
        }
        std::fs::write(dir.path().join("0009_c1_01.png"), b"not a png").unwrap();
        let (ds, report) = load_image_folder(
            dir.path(),
            Naming::ReidUnderscore,
            &SplitSpec::All(Split::Gallery),
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(ds.len(), 9);
        assert_eq!(report.skipped.len(), 1);
    }

    #[test]
    fn empty_folder_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.png"), b"junk").unwrap();
        let err = load_image_folder(
            dir.path(),
            Naming::FlatUnlabeled,
            &SplitSpec::All(Split::Gallery),
            &LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    #[test]
    fn same_subdir_twice_is_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("q")).unwrap();
        write_png(&dir.path().join("q/0001_c1_01.png"), 1);
        let spec: SplitSpec = "q=query,q=gallery".parse().unwrap();
        let err = load_image_folder(
            dir.path(),
            Naming::ReidUnderscore,
            &spec,
            &LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicatePath(_)));
    }

    #[test]
    fn reload_gives_identical_order() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["0003_c2_01.png", "0001_c1_01.png", "0002_c1_05.png"] {
            write_png(&dir.path().join(name), 100);
        }
        let load = || {
            load_image_folder(
                dir.path(),
                Naming::ReidUnderscore,
                &SplitSpec::All(Split::Query),
                &LoadOptions::default(),
            )
            .unwrap()
            .0
        };
        let (a, b) = (load(), load());
        assert_eq!(a, b);
        let names: Vec<_> = a
            .samples()
            .iter()
            .map(|s| s.path.as_ref().unwrap().file_name().unwrap().to_owned())
            .collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn parses_market_style_names() {
        assert_eq!(
            parse_reid_name(Path::new("0002_c1s1_000451_03.jpg")),
            Some((2, 1))
        );
        assert_eq!(parse_reid_name(Path::new("-1_c3s2_0.jpg")), Some((-1, 3)));
        assert_eq!(parse_reid_name(Path::new("frame.png")), None);
    }
}
