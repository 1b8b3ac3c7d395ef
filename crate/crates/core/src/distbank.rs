//! The shared distribution bank: amplitude spectra contributed by every
//! client, foreign-spectrum sampling and meta-test image generation.
//!
//! Phase never enters this module's types. A client computes the full
//! spectrum of each local image, keeps the phase to itself and publishes
//! only the amplitude.
//!
//! On disk a bank is a directory with one `client_<id>.fdbk` file per
//! client: a little-endian header (`"FDBK"`, version `u16`, client id `u32`,
//! `H u32`, `W u32`, `C u32`, count `u32`) followed by `count` float32
//! amplitude arrays in row-major `H x W x C` order, ordered by sample index.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::spectral::{forward_dft, transform_spectrum, Amplitude, FreqMask, Image, Spectrum};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub client_id: u32,
    pub sample_index: u32,
    pub amplitude: Amplitude,
}

impl BankEntry {
    /// Bytes needed to ship this entry as float32 plus its ids.
    pub fn payload_bytes(&self) -> usize {
        8 + 4 * self.amplitude.data().len()
    }
}

/// Amplitude-only entries for a client's images, indexed by position.
pub fn contribute(client_id: u32, images: &[&Image]) -> Result<Vec<BankEntry>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let Spectrum { amplitude, .. } = forward_dft(img)?;
            Ok(BankEntry {
                client_id,
                sample_index: i as u32,
                amplitude,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistributionBank {
    clients: BTreeMap<u32, Vec<BankEntry>>,
}

impl DistributionBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a client with no entries yet.
    pub fn register(&mut self, client_id: u32) {
        self.clients.entry(client_id).or_default();
    }

    pub fn insert(&mut self, entries: Vec<BankEntry>) -> Result<()> {
        for e in entries {
            let list = self.clients.entry(e.client_id).or_default();
            if list.iter().any(|x| x.sample_index == e.sample_index) {
                return Err(Error::DuplicateEntry {
                    client_id: e.client_id,
                    sample_index: e.sample_index,
                });
            }
            let at = list.partition_point(|x| x.sample_index < e.sample_index);
            list.insert(at, e);
        }
        Ok(())
    }

    /// Computes and stores the amplitude spectra of a client's images.
    pub fn contribute(&mut self, client_id: u32, images: &[&Image]) -> Result<()> {
        self.register(client_id);
        self.insert(contribute(client_id, images)?)
    }

    pub fn client_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.clients.keys().copied()
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn entries(&self, client_id: u32) -> Option<&[BankEntry]> {
        self.clients.get(&client_id).map(Vec::as_slice)
    }

    pub fn count(&self, client_id: u32) -> usize {
        self.clients.get(&client_id).map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.clients.values().map(Vec::len).sum()
    }

    /// One uniformly drawn entry from every registered client except
    /// `local`, keyed by client id.
    pub fn sample_foreign(&self, local: u32, rng: &mut impl Rng) -> Result<BTreeMap<u32, &BankEntry>> {
        self.clients
            .iter()
            .filter(|(&id, _)| id != local)
            .map(|(&id, list)| {
                if list.is_empty() {
                    return Err(Error::EmptyClient(id));
                }
                Ok((id, &list[rng.random_range(0..list.len())]))
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (&id, list) in &self.clients {
            let path = dir.join(format!("client_{id}.fdbk"));
            fs::write(&path, encode_client(id, list)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut bank = Self::new();
        let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "fdbk"))
            .collect();
        paths.sort();
        for path in paths {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (id, entries) = decode_client(&bytes, &path)?;
            if bank.clients.contains_key(&id) {
                return Err(Error::format("bank", &path, format!("client {id} appears twice")));
            }
            bank.register(id);
            bank.insert(entries)?;
        }
        if bank.clients.is_empty() {
            return Err(Error::format("bank", dir, "no .fdbk files"));
        }
        Ok(bank)
    }
}

pub const BANK_MAGIC: &[u8; 4] = b"FDBK";
pub const BANK_VERSION: u16 = 1;

fn encode_client(client_id: u32, entries: &[BankEntry]) -> Result<Vec<u8>> {
    let (h, w, c) = entries.first().map_or((0, 0, 0), |e| e.amplitude.dims());
    let mut out = Vec::with_capacity(26 + entries.len() * h * w * c * 4);
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    for v in [client_id, h as u32, w as u32, c as u32, entries.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, e) in entries.iter().enumerate() {
        if e.amplitude.dims() != (h, w, c) || e.sample_index != i as u32 {
            return Err(Error::Config(format!(
                "client {client_id}: entries must share one shape and have contiguous sample indices"
            )));
        }
        for &v in e.amplitude.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_client(bytes: &[u8], path: &Path) -> Result<(u32, Vec<BankEntry>)> {
    if bytes.len() < 26 || &bytes[..4] != BANK_MAGIC {
        return Err(Error::format("bank", path, "missing FDBK header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BANK_VERSION {
        return Err(Error::format("bank", path, format!("unsupported version {version}")));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap());
    let (id, h, w, c, count) = (field(0), field(1) as usize, field(2) as usize, field(3) as usize, field(4) as usize);
    let per = h * w * c;
    let body = &bytes[26..];
    if body.len() != 4 * per * count {
        return Err(Error::format("bank", path, format!("{} payload bytes for {count} arrays of {h}x{w}x{c}", body.len())));
    }
    let entries = (0..count)
        .map(|i| {
            let values = body[4 * per * i..4 * per * (i + 1)]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            Ok(BankEntry {
                client_id: id,
                sample_index: i as u32,
                amplitude: Amplitude::new(h, w, c, values).map_err(|e| Error::format("bank", path, e.to_string()))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((id, entries))
}

/// How the interpolation ratio is chosen for each transformed image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LambdaMode {
    Fixed(f64),
    /// Uniform on `[lo, hi]`, drawn independently per foreign client.
    Uniform(f64, f64),
}

impl Default for LambdaMode {
    fn default() -> Self {
        LambdaMode::Uniform(0.0, 1.0)
    }
}

impl LambdaMode {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        match *self {
            LambdaMode::Fixed(v) if ok(v) => Ok(()),
            LambdaMode::Uniform(lo, hi) if ok(lo) && ok(hi) && lo <= hi => Ok(()),
            _ => Err(Error::Config(format!("lambda mode `{self}` must lie within [0, 1]"))),
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            LambdaMode::Fixed(v) => v,
            LambdaMode::Uniform(lo, hi) if lo == hi => lo,
            LambdaMode::Uniform(lo, hi) => rng.random_range(lo..=hi),
        }
    }
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaMode::Fixed(v) => write!(f, "fixed:{v}"),
            LambdaMode::Uniform(lo, hi) => write!(f, "uniform:{lo},{hi}"),
        }
    }
}

impl FromStr for LambdaMode {
    type Err = Error;

    /// Parses `fixed:<v>` or `uniform:<lo>,<hi>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad lambda mode `{s}`; expected fixed:<v> or uniform:<lo>,<hi>"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let mode = match s.split_once(':') {
            Some(("fixed", v)) => LambdaMode::Fixed(num(v)?),
            Some(("uniform", range)) => {
                let (lo, hi) = range.split_once(',').ok_or_else(bad)?;
                LambdaMode::Uniform(num(lo)?, num(hi)?)
            }
            _ => return Err(bad()),
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// One style-transformed copy of `local` per foreign client, in ascending
/// client-id order. Entries are drawn first, then one λ per copy.
pub fn generate_from_spectrum(
    local: &Spectrum,
    bank: &DistributionBank,
    local_client: u32,
    mask: &FreqMask,
    lambda: LambdaMode,
    rng: &mut impl Rng,
) -> Result<Vec<Image>> {
    let foreign = bank.sample_foreign(local_client, rng)?;
    foreign
        .values()
        .map(|entry| transform_spectrum(local, &entry.amplitude, mask, lambda.draw(rng)))
        .collect()
}

pub fn generate_meta_test(
    img: &Image,
    bank: &DistributionBank,
    local_client: u32,
    mask: &FreqMask,
    lambda: LambdaMode,
    rng: &mut impl Rng,
) -> Result<Vec<Image>> {
    generate_from_spectrum(&forward_dft(img)?, bank, local_client, mask, lambda, rng)
}

/// Meta-test samples for a labelled sample; every output shares the
/// source's label allocation.
pub fn generate_meta_test_samples(
    sample: &Sample,
    local: &Spectrum,
    bank: &DistributionBank,
    mask: &FreqMask,
    lambda: LambdaMode,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    Ok(generate_from_spectrum(local, bank, sample.domain_id, mask, lambda, rng)?
        .into_iter()
        .map(|image| Sample {
            image,
            label: Arc::clone(&sample.label),
            domain_id: sample.domain_id,
            sample_id: sample.sample_id,
        })
        .collect())
}
