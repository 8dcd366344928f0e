//! On-disk dataset layout and manifest file.
//!
//! Layout: `<root>/<split>/<person_id>/<img>.png` with the parsing map at
//! `<root>/<split>_seg/<person_id>/<img>.png` (8-bit single channel labels).
//!
//! The manifest (`manifest.tsv` under the root) holds `#`-prefixed header
//! lines `# num_classes=<n>` and `# identity_labels=<l1,l2,...>`, then one
//! tab-separated record per line:
//! `image_path  seg_path  person_id  clothes_id  camera_id  split`,
//! with paths relative to the root.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rayon::prelude::*;

use super::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::mask::LabelSet;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const WORKERS_ENV: &str = "QARED_NUM_WORKERS";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordDescriptor {
    pub image: PathBuf,
    pub seg: PathBuf,
    pub person_id: usize,
    pub clothes_id: usize,
    pub camera_id: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<RecordDescriptor>,
    /// Number of parsing classes including background; labels are `< num_classes`.
    pub num_classes: u8,
    pub identity_labels: LabelSet,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# num_classes={}\n# identity_labels={}\n",
            self.num_classes, self.identity_labels
        );
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.image.display(),
                r.seg.display(),
                r.person_id,
                r.clothes_id,
                r.camera_id,
                r.split
            ));
        }
        s
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let mut num_classes = None;
        let mut labels = None;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                if let Some((k, v)) = header.trim().split_once('=') {
                    match k.trim() {
                        "num_classes" => {
                            num_classes = Some(v.trim().parse::<u8>().map_err(|_| {
                                Error::Validation(format!("bad num_classes '{}'", v.trim()))
                            })?)
                        }
                        "identity_labels" => {
                            let ls = v
                                .split(',')
                                .map(LabelSet::parse_label)
                                .collect::<Result<Vec<u8>>>()?;
                            labels = Some(LabelSet::new(ls)?);
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Validation(format!(
                    "manifest line {}: expected 6 tab-separated fields, got {}",
                    lineno + 1,
                    f.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<usize>().map_err(|_| {
                    Error::Validation(format!("manifest line {}: bad integer '{s}'", lineno + 1))
                })
            };
            records.push(RecordDescriptor {
                image: PathBuf::from(f[0]),
                seg: PathBuf::from(f[1]),
                person_id: num(f[2])?,
                clothes_id: num(f[3])?,
                camera_id: num(f[4])?,
                split: f[5].parse()?,
            });
        }
        let num_classes = num_classes
            .ok_or_else(|| Error::Validation("manifest lacks '# num_classes=' header".into()))?;
        let identity_labels = labels.unwrap_or_else(LabelSet::default_identity);
        identity_labels.check_range(num_classes)?;
        Ok(Self {
            root: root.to_path_buf(),
            records,
            num_classes,
            identity_labels,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&root, &text)
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            for p in [&r.image, &r.seg] {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(())
    }
}

fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn read_seg(path: &Path) -> Result<Array2<u8>> {
    let dynimg = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let img = match dynimg {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => {
            return Err(Error::Validation(format!(
                "seg file {} is not a single-channel 8-bit image",
                path.display()
            )))
        }
    };
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

/// Reads an image/seg pair and checks they align.
pub fn read_pair(image: &Path, seg: &Path) -> Result<(Array3<f64>, Array2<u8>)> {
    for p in [image, seg] {
        if !p.is_file() {
            return Err(Error::MissingFile(p.to_path_buf()));
        }
    }
    let img = read_rgb(image)?;
    let s = read_seg(seg)?;
    if s.dim() != (img.dim().1, img.dim().2) {
        return Err(Error::Validation(format!(
            "seg {} size {:?} differs from image size {:?}",
            seg.display(),
            s.dim(),
            (img.dim().1, img.dim().2)
        )));
    }
    Ok((img, s))
}

pub fn write_rgb(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_seg(path: &Path, seg: &Array2<u8>) -> Result<()> {
    let (h, w) = seg.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in seg.indexed_iter() {
        out.put_pixel(x as u32, y as u32, Luma([v]));
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes samples in the on-disk layout and emits the manifest file.
pub fn write_dataset(
    root: &Path,
    samples: &[SampleRecord],
    num_classes: u8,
    identity_labels: LabelSet,
) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut per_dir: BTreeMap<(Split, usize), usize> = BTreeMap::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let n = per_dir.entry((s.split, s.person_id)).or_insert(0);
        let name = format!("{:04}_c{}_o{}_{:03}.png", s.person_id, s.camera_id, s.clothes_id, n);
        *n += 1;
        let pid = format!("{:04}", s.person_id);
        let image = PathBuf::from(s.split.as_str()).join(&pid).join(&name);
        let seg = PathBuf::from(format!("{}_seg", s.split)).join(&pid).join(&name);
        for rel in [&image, &seg] {
            let dir = root.join(rel).parent().unwrap().to_path_buf();
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_rgb(&root.join(&image), &s.image)?;
        write_seg(&root.join(&seg), &s.seg)?;
        records.push(RecordDescriptor {
            image,
            seg,
            person_id: s.person_id,
            clothes_id: s.clothes_id,
            camera_id: s.camera_id,
            split: s.split,
        });
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        records,
        num_classes,
        identity_labels,
    };
    manifest.write()?;
    Ok(manifest)
}

/// Maps arbitrary ids onto `0..P` in ascending order of the original id.
pub fn remap_ids(ids: &[usize]) -> Vec<usize> {
    let mut uniq: Vec<usize> = ids.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    ids.iter()
        .map(|id| uniq.binary_search(id).unwrap())
        .collect()
}

/// Loads every record, scaling images to `[0, 1]` and remapping person ids to
/// a contiguous 0-based range. Parallelism is capped by `QARED_NUM_WORKERS`.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<SampleRecord>> {
    manifest.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let loaded: Vec<(Array3<f64>, Array2<u8>)> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|r| read_pair(&manifest.root.join(&r.image), &manifest.root.join(&r.seg)))
            .collect::<Result<Vec<_>>>()
    })?;
    let ids: Vec<usize> = manifest.records.iter().map(|r| r.person_id).collect();
    let remapped = remap_ids(&ids);
    let mut out = Vec::with_capacity(loaded.len());
    for ((r, (image, seg)), pid) in manifest.records.iter().zip(loaded).zip(remapped) {
        let rec = SampleRecord {
            image,
            seg,
            person_id: pid,
            clothes_id: r.clothes_id,
            camera_id: r.camera_id,
            split: r.split,
        };
        rec.validate(manifest.num_classes)?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remapping_is_contiguous() {
        assert_eq!(remap_ids(&[7, 7, 9]), vec![0, 0, 1]);
        assert_eq!(remap_ids(&[]), Vec::<usize>::new());
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let m = DatasetManifest {
            root: PathBuf::from("/nonexistent"),
            records: vec![],
            num_classes: 5,
            identity_labels: LabelSet::default_identity(),
        };
        assert!(load_dataset(&m).unwrap().is_empty());
    }

    #[test]
    fn text_round_trip() {
        let m = DatasetManifest {
            root: PathBuf::from("r"),
            records: vec![RecordDescriptor {
                image: "train/0001/a.png".into(),
                seg: "train_seg/0001/a.png".into(),
                person_id: 1,
                clothes_id: 0,
                camera_id: 2,
                split: Split::Train,
            }],
            num_classes: 5,
            identity_labels: LabelSet::default_identity(),
        };
        assert_eq!(DatasetManifest::parse(Path::new("r"), &m.to_text()).unwrap(), m);
    }

    #[test]
    fn malformed_line_is_rejected() {
        let text = "# num_classes=5\na\tb\t1\n";
        assert!(matches!(
            DatasetManifest::parse(Path::new("."), text),
            Err(Error::Validation(_))
        ));
    }
}
