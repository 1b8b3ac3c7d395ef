//! Labelled samples, per-domain splits and the external `.img`/`.lbl`
//! exchange format.
//!
//! A dataset directory holds `manifest.txt` plus one `<name>.img` and one
//! `<name>.lbl` per sample. Manifest lines are `<name> <domain_id> <split>`
//! where split is `train` or `test`; blank lines and `#` comments are
//! skipped. Both binary files start with a 16-byte little-endian header
//! (`magic[4]`, `H u32`, `W u32`, `C u32`) followed by `H*W*C` float32
//! values in row-major `H x W x C` order. Image magic is `FDIM`, label magic
//! is `FDLB`; label channels are classes with values 0 or 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::spectral::Image;

/// One binary mask per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    masks: Vec<BinaryMask>,
}

impl Label {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::shape("label", "no classes"))?;
        if masks.iter().any(|m| !m.same_shape(first)) {
            return Err(Error::shape("label", "class masks differ in size"));
        }
        Ok(Self { masks })
    }

    pub fn num_classes(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.masks[0].height(), self.masks[0].width())
    }

    /// Class-major `0/1` array (`classes x H x W`).
    pub fn to_planar(&self) -> Vec<f64> {
        self.masks.iter().flat_map(|m| m.to_f64()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Shared with every style-transformed copy of the image.
    pub label: Arc<Label>,
    pub domain_id: u32,
    pub sample_id: u32,
}

/// Train/test split of one domain. Splits are disjoint by `sample_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub domain_id: u32,
    pub name: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DomainData {
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.test)
    }
}

/// Letter name for a domain index: 0 → "A", 1 → "B", ...
pub fn domain_letter(id: u32) -> String {
    char::from_u32('A' as u32 + id).map(String::from).unwrap_or_else(|| id.to_string())
}

const IMG_MAGIC: &[u8; 4] = b"FDIM";
const LBL_MAGIC: &[u8; 4] = b"FDLB";

fn encode_array(magic: &[u8; 4], h: usize, w: usize, c: usize, values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * h * w * c);
    out.extend_from_slice(magic);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode_array(bytes: &[u8], magic: &[u8; 4], path: &Path, what: &'static str) -> Result<(usize, usize, usize, Vec<f64>)> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(Error::format(what, path, "missing or wrong header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != 4 * h * w * c {
        return Err(Error::format(
            what,
            path,
            format!("{} payload bytes for {h}x{w}x{c}", body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((h, w, c, values))
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let (h, w, c) = img.dims();
    encode_array(IMG_MAGIC, h, w, c, img.data().iter().copied())
}

pub fn encode_label(label: &Label) -> Vec<u8> {
    let (h, w) = label.dims();
    let c = label.num_classes();
    let values = (0..h * w).flat_map(|p| label.masks.iter().map(move |m| if m.data()[p] { 1.0 } else { 0.0 }));
    encode_array(LBL_MAGIC, h, w, c, values)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes every sample of every domain plus the manifest. Sample names are
/// `<domain letter>_<split>_<sample_id>`.
pub fn save_external(domains: &[DomainData], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# name domain_id split\n");
    for d in domains {
        for (split, samples) in [("train", &d.train), ("test", &d.test)] {
            for s in samples {
                let name = format!("{}_{split}_{:04}", domain_letter(d.domain_id), s.sample_id);
                write(&dir.join(format!("{name}.img")), &encode_image(&s.image))?;
                write(&dir.join(format!("{name}.lbl")), &encode_label(&s.label))?;
                manifest.push_str(&format!("{name} {} {split}\n", d.domain_id));
            }
        }
    }
    write(&dir.join("manifest.txt"), manifest.as_bytes())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_sample(dir: &Path, name: &str, domain_id: u32, sample_id: u32) -> Result<Sample> {
    let img_path = dir.join(format!("{name}.img"));
    let lbl_path = dir.join(format!("{name}.lbl"));
    if !lbl_path.exists() {
        return Err(Error::format("dataset", &lbl_path, format!("sample `{name}` has no label file")));
    }
    let (h, w, c, values) = decode_array(&read(&img_path)?, IMG_MAGIC, &img_path, "image")?;
    let image = Image::new(h, w, c, values).map_err(|e| Error::format("image", &img_path, e.to_string()))?;
    let (lh, lw, lc, lvalues) = decode_array(&read(&lbl_path)?, LBL_MAGIC, &lbl_path, "label")?;
    if (lh, lw) != (h, w) {
        return Err(Error::format(
            "label",
            &lbl_path,
            format!("sample `{name}`: label is {lh}x{lw} but image is {h}x{w}"),
        ));
    }
    if let Some(bad) = lvalues.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::format("label", &lbl_path, format!("sample `{name}`: non-binary value {bad}")));
    }
    let masks = (0..lc)
        .map(|cls| BinaryMask::new(lh, lw, (0..lh * lw).map(|p| lvalues[p * lc + cls] == 1.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        image,
        label: Arc::new(Label::new(masks)?),
        domain_id,
        sample_id,
    })
}

/// Reads a directory written in the exchange format, grouped by domain in
/// ascending id order.
pub fn load_external(dir: &Path) -> Result<Vec<DomainData>> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        return Err(Error::format("dataset", dir, "no manifest.txt"));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut domains: BTreeMap<u32, DomainData> = BTreeMap::new();
    let mut next_id: BTreeMap<u32, u32> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |detail: &str| Error::format("manifest", &manifest_path, format!("line {}: {detail}", lineno + 1));
        let [name, domain, split] = fields.as_slice() else {
            return Err(bad("expected `<name> <domain_id> <split>`"));
        };
        let domain_id: u32 = domain.parse().map_err(|_| bad("domain id is not an integer"))?;
        let counter = next_id.entry(domain_id).or_default();
        let sample = load_sample(dir, name, domain_id, sample_id_from_name(name).unwrap_or(*counter))?;
        *counter += 1;
        let entry = domains.entry(domain_id).or_insert_with(|| DomainData {
            domain_id,
            name: domain_letter(domain_id),
            train: Vec::new(),
            test: Vec::new(),
        });
        match *split {
            "train" => entry.train.push(sample),
            "test" => entry.test.push(sample),
            other => return Err(bad(&format!("unknown split `{other}`"))),
        }
    }
    if domains.is_empty() {
        return Err(Error::format("dataset", dir, "manifest lists no samples"));
    }
    Ok(domains.into_values().collect())
}

fn sample_id_from_name(name: &str) -> Option<u32> {
    name.rsplit('_').next()?.parse().ok()
}
