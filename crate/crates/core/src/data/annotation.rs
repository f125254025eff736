//! Line-oriented text annotation files.
//!
//! ```text
//! GSNPOSE-ANNOT v1
//! image_size 64
//! stride 4
//! joints 16
//! joint 0 r-ankle
//! ...
//! edge 0 1
//! ...
//! flip 0 5
//! ...
//! root 6
//! records 100
//! rec <id> <seed> <head_size> <person_scale> <image> <x> <y> <v> ...
//! ```
//!
//! `<image>` is `-` (no image), `file:<path>` (an 8-bit PGM, relative to the
//! annotation file) or `inline:<hex bytes>` (row-major 8-bit pixels). Numbers
//! are written in shortest round-trip form, so reading back is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{pgm, Dataset, PoseSample};
use crate::error::{Error, Result};
use crate::heatmap::Joint;
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

pub const MAGIC: &str = "GSNPOSE-ANNOT";
pub const VERSION: &str = "v1";

/// Where `write_annotations` puts sample images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImageStorage {
    None,
    Inline,
    /// PGM files in this directory, named by sample id.
    Files(PathBuf),
}

pub fn write_annotations(data: &Dataset, path: &Path, images: &ImageStorage) -> Result<()> {
    let g = &data.skeleton;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "image_size {}", data.image_size);
    let _ = writeln!(out, "stride {}", data.stride);
    let _ = writeln!(out, "joints {}", g.n_nodes());
    for (i, name) in g.names().iter().enumerate() {
        let _ = writeln!(out, "joint {i} {name}");
    }
    for &(a, b) in g.edges() {
        let _ = writeln!(out, "edge {a} {b}");
    }
    for &(a, b) in g.flip_pairs() {
        let _ = writeln!(out, "flip {a} {b}");
    }
    let _ = writeln!(out, "root {}", g.root());
    let _ = writeln!(out, "records {}", data.samples.len());

    let base = path.parent().unwrap_or(Path::new(""));
    if let ImageStorage::Files(dir) = images {
        fs::create_dir_all(base.join(dir)).map_err(|e| Error::io(base.join(dir), e))?;
    }
    let s = data.image_size;
    for sample in &data.samples {
        if sample.joints.len() != g.n_nodes() {
            return Err(Error::invalid(format!(
                "sample {} has {} joints, skeleton has {}",
                sample.id,
                sample.joints.len(),
                g.n_nodes()
            )));
        }
        let image = match (images, &sample.image) {
            (ImageStorage::None, _) | (_, None) => "-".to_string(),
            (ImageStorage::Inline, Some(img)) => {
                check_image(img, s)?;
                let mut hex = String::with_capacity(2 * s * s + 7);
                hex.push_str("inline:");
                for &v in img.data() {
                    let _ = write!(hex, "{:02x}", pgm::to_byte(v));
                }
                hex
            }
            (ImageStorage::Files(dir), Some(img)) => {
                check_image(img, s)?;
                let rel = dir.join(format!("{:06}.pgm", sample.id));
                pgm::write_unit(&base.join(&rel), s, s, img.data())?;
                format!("file:{}", rel.display())
            }
        };
        let _ = write!(
            out,
            "rec {} {} {} {} {}",
            sample.id, sample.seed, sample.head_size, sample.person_scale, image
        );
        for j in &sample.joints {
            let _ = write!(out, " {} {} {}", j.x, j.y, u8::from(j.visible));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_image(img: &Tensor, s: usize) -> Result<()> {
    if img.shape() != [1, s, s] {
        return Err(Error::shape("write_annotations", img.shape(), &[1, s, s]));
    }
    Ok(())
}

struct Lines<'a> {
    path: &'a Path,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Line {
            path: self.path.to_path_buf(),
            line: self.line,
            detail: detail.into(),
        }
    }

    fn next(&mut self) -> Option<&'a str> {
        for (i, l) in self.iter.by_ref() {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            self.line = i + 1;
            return Some(l);
        }
        None
    }

    fn peek_key(&self) -> Option<&'a str> {
        let mut it = self.iter.clone();
        it.find_map(|(_, l)| {
            let l = l.trim();
            (!l.is_empty() && !l.starts_with('#')).then(|| l.split_whitespace().next().unwrap_or(""))
        })
    }

    /// Reads `<key> <values...>` and returns the values.
    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let l = self.next().ok_or_else(|| self.err(format!("missing {key:?}")))?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected {key:?}, found {l:?}")));
        }
        Ok(parts.collect())
    }

    fn usize_field(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        match v.as_slice() {
            [x] => x.parse().map_err(|_| self.err(format!("{key}: not an integer: {x:?}"))),
            _ => Err(self.err(format!("{key}: expected one value"))),
        }
    }

    fn pair(&mut self, key: &str) -> Result<(usize, usize)> {
        let v = self.keyed(key)?;
        match v.as_slice() {
            [a, b] => match (a.parse(), b.parse()) {
                (Ok(a), Ok(b)) => Ok((a, b)),
                _ => Err(self.err(format!("{key}: bad indices"))),
            },
            _ => Err(self.err(format!("{key}: expected two indices"))),
        }
    }
}

pub fn read_annotations(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

/// Parses annotation text; `path` locates `file:` images and labels errors.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Dataset> {
    let mut lines = Lines {
        path,
        iter: text.lines().enumerate(),
        line: 0,
    };
    let head = lines.next().ok_or_else(|| lines.err("empty file"))?;
    let mut parts = head.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(lines.err(format!("not an annotation file (expected {MAGIC:?})")));
    }
    match parts.next() {
        Some(VERSION) => {}
        found => {
            return Err(Error::Version {
                found: found.unwrap_or("").to_string(),
                expected: VERSION.to_string(),
            })
        }
    }

    let image_size = lines.usize_field("image_size")?;
    let stride = lines.usize_field("stride")?;
    if stride == 0 || image_size == 0 || image_size % stride != 0 {
        return Err(lines.err(format!("image size {image_size} not divisible by stride {stride}")));
    }
    let n = lines.usize_field("joints")?;
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let v = lines.keyed("joint")?;
        match v.as_slice() {
            [idx, name] if idx.parse() == Ok(i) => names.push(name.to_string()),
            _ => return Err(lines.err(format!("expected \"joint {i} <name>\""))),
        }
    }
    let mut edges = Vec::new();
    while lines.peek_key() == Some("edge") {
        edges.push(lines.pair("edge")?);
    }
    let mut flips = Vec::new();
    while lines.peek_key() == Some("flip") {
        flips.push(lines.pair("flip")?);
    }
    let root = lines.usize_field("root")?;
    let skeleton =
        SkeletonGraph::tree(names, edges, flips, root).map_err(|e| lines.err(e.to_string()))?;
    let count = lines.usize_field("records")?;

    let base = path.parent().unwrap_or(Path::new(""));
    let mut samples = Vec::with_capacity(count);
    for record in 0..count {
        let bad = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            record,
            detail,
        };
        let l = lines.next().ok_or_else(|| bad("missing (file truncated)".into()))?;
        samples.push(parse_record(l, n, image_size, base).map_err(bad)?);
    }
    if let Some(extra) = lines.next() {
        return Err(lines.err(format!("unexpected content after {count} records: {extra:?}")));
    }
    Ok(Dataset {
        skeleton,
        image_size,
        stride,
        samples,
    })
}

fn parse_record(l: &str, n: usize, size: usize, base: &Path) -> std::result::Result<PoseSample, String> {
    let f: Vec<&str> = l.split_whitespace().collect();
    if f.first() != Some(&"rec") {
        return Err(format!("expected \"rec\", found {l:?}"));
    }
    if f.len() != 6 + 3 * n {
        return Err(format!(
            "expected {n} joints ({} fields), found {} fields",
            6 + 3 * n,
            f.len()
        ));
    }
    let num = |i: usize, what: &str| -> std::result::Result<f64, String> {
        f[i].parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("{what}: bad number {:?}", f[i]))
    };
    let id = f[1].parse().map_err(|_| format!("bad id {:?}", f[1]))?;
    let seed = f[2].parse().map_err(|_| format!("bad seed {:?}", f[2]))?;
    let head_size = num(3, "head_size")?;
    let person_scale = num(4, "person_scale")?;
    if head_size <= 0.0 || person_scale <= 0.0 {
        return Err("head_size and person_scale must be positive".into());
    }
    let image = parse_image(f[5], size, base)?;
    let mut joints = Vec::with_capacity(n);
    for j in 0..n {
        let k = 6 + 3 * j;
        let visible = match f[k + 2] {
            "0" => false,
            "1" => true,
            v => return Err(format!("joint {j}: visibility must be 0 or 1, found {v:?}")),
        };
        joints.push(Joint::new(num(k, "x")?, num(k + 1, "y")?, visible));
    }
    Ok(PoseSample {
        id,
        seed,
        image,
        joints,
        head_size,
        person_scale,
    })
}

fn parse_image(field: &str, size: usize, base: &Path) -> std::result::Result<Option<Tensor>, String> {
    let pixels = if field == "-" {
        return Ok(None);
    } else if let Some(hex) = field.strip_prefix("inline:") {
        if hex.len() != 2 * size * size {
            return Err(format!("inline image has {} hex digits, expected {}", hex.len(), 2 * size * size));
        }
        (0..size * size)
            .map(|i| {
                u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                    .map(|b| f64::from(b) / 255.0)
                    .map_err(|_| "inline image: bad hex".to_string())
            })
            .collect::<std::result::Result<Vec<_>, _>>()?
    } else if let Some(rel) = field.strip_prefix("file:") {
        let (w, h, px) = pgm::read(&base.join(rel)).map_err(|e| e.to_string())?;
        if (w, h) != (size, size) {
            return Err(format!("image {rel} is {w}×{h}, expected {size}×{size}"));
        }
        px
    } else {
        return Err(format!("bad image reference {field:?}"));
    };
    Tensor::new([1, size, size], pixels).map(Some).map_err(|e| e.to_string())
}
