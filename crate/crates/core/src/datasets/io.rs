//! On-disk dataset layout.
//!
//! A dataset directory holds the raster images (PNG or JPEG), an optional
//! `annotations.csv` with one `image_id,x,y` row per dot (x is the column,
//! y the row), and a `manifest.csv` index of `id,path,annotated` rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{Dataset, DomainTag, Dot, DotAnnotationSet, Image, Sample};

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const IMAGES_DIR: &str = "images";

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn read_image(path: &Path, id: &str) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_rgb8(id, h as usize, w as usize, img.as_raw())
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width() as u32,
        img.height() as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a single-channel map as an 8-bit grayscale raster, scaled so its
/// maximum is white.
pub fn write_density_png(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let gray: Vec<u8> = values
        .iter()
        .map(|v| (v.max(0.0) * scale).round().min(255.0) as u8)
        .collect();
    image::save_buffer(path, &gray, width as u32, height as u32, image::ColorType::L8).map_err(
        |source| Error::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

/// Parses an annotation file into per-image dot lists, preserving row order.
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<Dot>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: e.to_string(),
        })?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        reason: e.to_string(),
    })?;
    let expected = ["image_id", "x", "y"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("expected header `image_id,x,y`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out: BTreeMap<String, Vec<Dot>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", record.len())));
        }
        let coord = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = record[i]
                .parse()
                .map_err(|_| bad(format!("{name} `{}` is not a number", &record[i])))?;
            if !v.is_finite() {
                return Err(bad(format!("{name} `{}` is not finite", &record[i])));
            }
            Ok(v)
        };
        let (x, y) = (coord(1, "x")?, coord(2, "y")?);
        out.entry(record[0].to_string())
            .or_default()
            .push(Dot::new(y, x));
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    w.write_record(["image_id", "x", "y"]).map_err(wrap)?;
    for s in samples {
        if let Some(dots) = s.dots() {
            for d in &dots.points {
                w.write_record([s.id().to_string(), d.col.to_string(), d.row.to_string()])
                    .map_err(wrap)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("unreadable file name {}", path.display())))?
            .to_string();
        if files.insert(id.clone(), path).is_some() {
            return Err(Error::invalid(format!(
                "two images in {} share the id `{id}`",
                dir.display()
            )));
        }
    }
    Ok(files)
}

fn assemble(
    name: &str,
    files: BTreeMap<String, PathBuf>,
    annotations: Option<&Path>,
    domain: DomainTag,
) -> Result<Dataset> {
    let dots = annotations.map(read_annotations).transpose()?;
    if let Some(dots) = &dots {
        let missing: Vec<String> = dots
            .keys()
            .filter(|id| !files.contains_key(*id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingImages(missing));
        }
    }
    let mut samples = Vec::with_capacity(files.len());
    for (id, path) in files {
        let image = read_image(&path, &id)?;
        let set = dots
            .as_ref()
            .map(|d| DotAnnotationSet::new(&id, d.get(&id).cloned().unwrap_or_default()));
        samples.push(Sample::new(image, set, domain)?);
    }
    Dataset::new(name, samples)
}

/// Loads every image in `image_dir`, ordered by id (the file stem).
///
/// With an annotation file every image is labelled; images without rows
/// have zero objects.
pub fn load_dataset(image_dir: &Path, annotations: Option<&Path>, domain: DomainTag) -> Result<Dataset> {
    if !image_dir.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", image_dir.display())));
    }
    let name = image_dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    assemble(&name, image_files(image_dir)?, annotations, domain)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub annotated: bool,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: e.to_string(),
        })?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: "expected `id,path,annotated`".into(),
            });
        }
        let annotated = match &record[2] {
            "true" | "1" => true,
            "false" | "0" => false,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("annotated flag `{other}` is not a boolean"),
                })
            }
        };
        out.push(ManifestEntry {
            id: record[0].to_string(),
            path: PathBuf::from(&record[1]),
            annotated,
        });
    }
    Ok(out)
}

/// Writes images, annotations (when labelled) and a manifest under `dir`.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::from("id,path,annotated\n");
    for s in d.samples() {
        let rel = PathBuf::from(IMAGES_DIR).join(format!("{}.png", s.id()));
        write_image(&dir.join(&rel), s.image())?;
        manifest.push_str(&format!("{},{},{}\n", s.id(), rel.display(), s.dots().is_some()));
    }
    let labelled: Vec<Sample> = d.samples().iter().filter(|s| s.dots().is_some()).cloned().collect();
    if !labelled.is_empty() || d.is_empty() {
        write_annotations(&dir.join(ANNOTATIONS_FILE), &labelled)?;
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Opens a dataset directory: through its manifest when present, otherwise
/// as a plain image directory (or its `images/` subdirectory). A sibling
/// `annotations.csv` is attached when it exists.
pub fn open_dataset_dir(dir: &Path, domain: DomainTag) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", dir.display())));
    }
    let annotations = dir.join(ANNOTATIONS_FILE);
    let annotations = annotations.is_file().then_some(annotations);
    let manifest = dir.join(MANIFEST_FILE);
    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    if manifest.is_file() {
        let entries = read_manifest(&manifest)?;
        let mut files = BTreeMap::new();
        let mut unlabeled = BTreeSet::new();
        for e in entries {
            if !e.annotated {
                unlabeled.insert(e.id.clone());
            }
            files.insert(e.id, dir.join(e.path));
        }
        let missing: Vec<String> = files
            .iter()
            .filter(|(_, p)| !p.is_file())
            .map(|(id, _)| id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingImages(missing));
        }
        let ds = assemble(&name, files, annotations.as_deref(), domain)?;
        if unlabeled.is_empty() {
            return Ok(ds);
        }
        let samples = ds
            .into_samples()
            .into_iter()
            .map(|s| if unlabeled.contains(s.id()) { s.without_dots() } else { Ok(s) })
            .collect::<Result<Vec<_>>>()?;
        return Dataset::new(name, samples);
    }
    let images = dir.join(IMAGES_DIR);
    let image_dir = if images.is_dir() { images } else { dir.to_path_buf() };
    assemble(&name, image_files(&image_dir)?, annotations.as_deref(), domain)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(dir: &Path, id: &str, h: usize, w: usize) {
        let img = Image::from_rgb8(id, h, w, &vec![128u8; 3 * h * w]).unwrap();
        write_image(&dir.join(format!("{id}.png")), &img).unwrap();
    }

    #[test]
    fn labelled_and_unlabelled_loading() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["b", "a", "c"] {
            write_png(dir.path(), id, 8, 10);
        }
        let ann = dir.path().join("ann.csv");
        fs::write(&ann, "image_id,x,y\na,1,2\nb,3.5,4\nc,9,7\nc,0,0\n").unwrap();
        let d = load_dataset(dir.path(), Some(&ann), DomainTag::Source).unwrap();
        assert_eq!(d.len(), 3);
        let ids: Vec<_> = d.samples().iter().map(|s| s.id()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(d.samples()[2].count(), Some(2));
        assert_eq!(d.samples()[0].dots().unwrap().points[0], Dot::new(2.0, 1.0));

        let t = load_dataset(dir.path(), None, DomainTag::Target).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.samples().iter().all(|s| s.dots().is_none()));
    }

    #[test]
    fn dot_on_right_edge_is_out_of_frame() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a", 8, 10);
        let ann = dir.path().join("ann.csv");
        fs::write(&ann, "image_id,x,y\na,10,2\n").unwrap();
        let err = load_dataset(dir.path(), Some(&ann), DomainTag::Source).unwrap_err();
        assert!(matches!(err, Error::OutOfFrame { .. }));
    }

    #[test]
    fn missing_images_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a", 4, 4);
        let ann = dir.path().join("ann.csv");
        fs::write(&ann, "image_id,x,y\na,1,1\nzz,1,1\nyy,0,0\n").unwrap();
        match load_dataset(dir.path(), Some(&ann), DomainTag::Source) {
            Err(Error::MissingImages(ids)) => assert_eq!(ids, ["yy", "zz"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a", 4, 4);
        let ann = dir.path().join("ann.csv");
        fs::write(&ann, "image_id,x,y\na,1,1\na,one,1\n").unwrap();
        match load_dataset(dir.path(), Some(&ann), DomainTag::Source) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_then_open_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let img = Image::from_rgb8("x1", 4, 4, &rgb).unwrap();
        let s = Sample::labeled(img, vec![Dot::new(1.25, 3.5)], DomainTag::Source).unwrap();
        let d = Dataset::new("d", vec![s.clone()]).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = open_dataset_dir(dir.path(), DomainTag::Source).unwrap();
        assert_eq!(back.samples(), &[s]);
    }
}
