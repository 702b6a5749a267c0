//! Synthetic two-domain volumes, patient-wise splits, normalization and the
//! dataset container format.
//!
//! Every scan is Gaussian background noise plus a domain intensity offset
//! plus a few solid spherical blobs ("lymph nodes"). A blob is either normal
//! (`+blob_delta`) or metastatic (`+blob_delta + metastatic_delta`). A scan's
//! latent class is 1 iff it contains at least one metastatic blob. Domain 1
//! records keep only that class label; domain 2 records keep only the voxel
//! mask of all blobs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, f64_from_hex, f64_to_hex, Header};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "MDMT-DATASET";
pub const FORMAT_VERSION: u32 = 1;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u8,
    pub n_patients: usize,
    /// Volume extents (D, H, W).
    pub shape: [usize; 3],
    pub noise_mean: f64,
    pub noise_std: f64,
    /// Additive shift applied to every voxel of this domain.
    pub intensity_offset: f64,
    /// Inclusive range of blobs per scan.
    pub blob_count: [usize; 2],
    /// Inclusive range of blob radii in voxels.
    pub blob_radius: [f64; 2],
    pub blob_delta: f64,
    /// Extra intensity of a metastatic blob on top of `blob_delta`.
    pub metastatic_delta: f64,
    /// Fraction of scans whose latent class is positive.
    pub positive_fraction: f64,
    pub seed: u64,
}

impl DomainSpec {
    /// Desk-scale stand-in for the weakly labelled domain.
    pub fn desk_domain1() -> Self {
        DomainSpec {
            domain_id: 1,
            n_patients: 60,
            shape: [16, 16, 8],
            noise_mean: 0.0,
            noise_std: 1.0,
            intensity_offset: 0.0,
            blob_count: [1, 3],
            blob_radius: [1.5, 2.5],
            blob_delta: 1.5,
            metastatic_delta: 1.0,
            positive_fraction: 0.46,
            seed: 11,
        }
    }

    /// Desk-scale stand-in for the ROI-annotated domain.
    pub fn desk_domain2() -> Self {
        DomainSpec {
            domain_id: 2,
            n_patients: 40,
            intensity_offset: 0.5,
            blob_count: [2, 4],
            seed: 22,
            ..Self::desk_domain1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("{field}: {msg}")));
        if !matches!(self.domain_id, 1 | 2) {
            return bad("domain_id", format!("must be 1 or 2, got {}", self.domain_id));
        }
        if self.n_patients == 0 {
            return bad("n_patients", "must be at least 1".into());
        }
        if self.shape.contains(&0) {
            return bad("shape", format!("zero extent in {:?}", self.shape));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", format!("must be positive, got {}", self.noise_std));
        }
        for (name, v) in [
            ("noise_mean", self.noise_mean),
            ("intensity_offset", self.intensity_offset),
            ("blob_delta", self.blob_delta),
            ("metastatic_delta", self.metastatic_delta),
        ] {
            if !v.is_finite() {
                return bad(name, format!("must be finite, got {v}"));
            }
        }
        if self.blob_count[0] > self.blob_count[1] {
            return bad("blob_count", format!("min > max in {:?}", self.blob_count));
        }
        let [rmin, rmax] = self.blob_radius;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return bad("blob_radius", format!("invalid range {:?}", self.blob_radius));
        }
        let smallest = *self.shape.iter().min().expect("three extents") as f64;
        if 2.0 * rmax + 1.0 > smallest {
            return bad(
                "blob_radius",
                format!("radius {rmax} does not fit in shape {:?}", self.shape),
            );
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(
                "positive_fraction",
                format!("must be in [0, 1], got {}", self.positive_fraction),
            );
        }
        if self.positive_count() > 0 && self.blob_count[1] == 0 {
            return bad("blob_count", "positive scans need at least one blob".into());
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn positive_count(&self) -> usize {
        (self.n_patients as f64 * self.positive_fraction).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub metastatic: bool,
}

impl Blob {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let d2: f64 = [z, y, x]
            .iter()
            .zip(&self.center)
            .map(|(&p, c)| (p as f64 - c).powi(2))
            .sum();
        d2 <= self.radius * self.radius
    }
}

/// Class implied by a blob set: positive iff any blob is metastatic.
pub fn latent_label(blobs: &[Blob]) -> u8 {
    u8::from(blobs.iter().any(|b| b.metastatic))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub patient_id: u32,
    pub volume: Vec<f64>,
    pub label: Option<u8>,
    /// Hard ROI mask, one byte (0/1) per voxel.
    pub mask: Option<Vec<u8>>,
}

impl Record {
    /// The volume as a `1×D×H×W` network input.
    pub fn volume_tensor(&self, shape: [usize; 3]) -> Tensor {
        let [d, h, w] = shape;
        Tensor::new(vec![1, d, h, w], self.volume.clone()).expect("record matches dataset shape")
    }

    pub fn mask_tensor(&self, shape: [usize; 3]) -> Option<Tensor> {
        let [d, h, w] = shape;
        self.mask.as_ref().map(|m| {
            Tensor::new(vec![1, d, h, w], m.iter().map(|&b| f64::from(b)).collect())
                .expect("mask matches dataset shape")
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub records: Vec<Record>,
    /// Split of each record, parallel to `records`; empty until assigned.
    pub splits: Vec<Split>,
    pub stats: Option<NormStats>,
    pub normalized: bool,
    /// Free-form tag stored in the file header, e.g. the hash of the
    /// experiment config that produced the file.
    pub provenance: Option<String>,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, domain: u8, stream: u64) -> u64 {
    mix(mix(seed ^ mix(u64::from(domain))) ^ stream)
}

const LABEL_STREAM: u64 = u64::MAX;

/// Which patients are latent-positive: the first `round(n·fraction)` of a
/// seeded permutation.
fn positive_flags(spec: &DomainSpec) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, spec.domain_id, LABEL_STREAM));
    let mut ids: Vec<usize> = (0..spec.n_patients).collect();
    ids.shuffle(&mut rng);
    let mut flags = vec![false; spec.n_patients];
    for &i in &ids[..spec.positive_count()] {
        flags[i] = true;
    }
    flags
}

fn patient_rng(spec: &DomainSpec, patient_id: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, spec.domain_id, u64::from(patient_id)))
}

fn place_blobs(spec: &DomainSpec, positive: bool, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let [cmin, cmax] = spec.blob_count;
    let mut count = rng.gen_range(cmin..=cmax);
    if positive {
        count = count.max(1);
    }
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for i in 0..count {
        let [rmin, rmax] = spec.blob_radius;
        let radius = if rmin == rmax {
            rmin
        } else {
            rng.gen_range(rmin..=rmax)
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let center = spec
                .shape
                .map(|s| rng.gen_range(radius..=(s as f64 - 1.0 - radius)));
            let clear = blobs.iter().all(|b| {
                let d2: f64 = b.center.iter().zip(&center).map(|(a, c)| (a - c).powi(2)).sum();
                d2.sqrt() >= b.radius + radius + 1.0
            });
            if clear {
                placed = Some(center);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place blob {i} of {count} in {:?} after {PLACEMENT_ATTEMPTS} attempts",
                spec.shape
            ))
        })?;
        blobs.push(Blob {
            center,
            radius,
            metastatic: positive && i == 0,
        });
    }
    Ok(blobs)
}

/// The latent blob set of one patient, independent of the rest of the
/// dataset.
pub fn generate_latent(spec: &DomainSpec, patient_id: u32) -> Result<Vec<Blob>> {
    spec.validate()?;
    let positive = positive_flags(spec)
        .get(patient_id as usize)
        .copied()
        .ok_or_else(|| Error::config(format!("patient {patient_id} out of range")))?;
    place_blobs(spec, positive, &mut patient_rng(spec, patient_id))
}

fn generate_record(spec: &DomainSpec, patient_id: u32, positive: bool) -> Result<Record> {
    let mut rng = patient_rng(spec, patient_id);
    let blobs = place_blobs(spec, positive, &mut rng)?;
    let [d, h, w] = spec.shape;
    let base = spec.noise_mean + spec.intensity_offset;
    let mut volume: Vec<f64> = (0..spec.voxels())
        .map(|_| base + spec.noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut mask = vec![0u8; spec.voxels()];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if let Some(b) = blobs.iter().find(|b| b.contains(z, y, x)) {
                    volume[i] += spec.blob_delta;
                    if b.metastatic {
                        volume[i] += spec.metastatic_delta;
                    }
                    mask[i] = 1;
                }
                i += 1;
            }
        }
    }
    let (label, mask) = match spec.domain_id {
        1 => (Some(latent_label(&blobs)), None),
        _ => (None, Some(mask)),
    };
    Ok(Record {
        patient_id,
        volume,
        label,
        mask,
    })
}

/// Generates every patient of a domain. Pure function of `spec`.
pub fn generate_domain(spec: &DomainSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let flags = positive_flags(spec);
    let records = flags
        .par_iter()
        .enumerate()
        .map(|(i, &positive)| generate_record(spec, i as u32, positive))
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainDataset {
        spec: spec.clone(),
        records,
        splits: Vec::new(),
        stats: None,
        normalized: false,
        provenance: None,
    })
}

/// Split sizes for `n` patients: train and val are rounded, test takes the
/// remainder.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::config(format!("split fractions {fractions:?} outside [0, 1]")));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} do not sum to 1")));
    }
    let train = (n as f64 * fractions[0]).round() as usize;
    let val = (n as f64 * fractions[1]).round() as usize;
    let counts = [train, val, n.saturating_sub(train + val)];
    if train + val > n || counts.contains(&0) {
        return Err(Error::config(format!(
            "{n} patients cannot fill splits {fractions:?} with at least one each (got {counts:?})"
        )));
    }
    Ok(counts)
}

/// Assigns each patient to exactly one split via a seeded permutation.
pub fn split_patientwise(ds: &DomainDataset, fractions: [f64; 3], seed: u64) -> Result<DomainDataset> {
    let n = ds.records.len();
    let [train, val, _] = split_counts(n, fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(DomainDataset {
        splits,
        stats: None,
        normalized: false,
        ..ds.clone()
    })
}

impl DomainDataset {
    pub fn domain_id(&self) -> u8 {
        self.spec.domain_id
    }

    pub fn shape(&self) -> [usize; 3] {
        self.spec.shape
    }

    pub fn is_split(&self) -> bool {
        self.splits.len() == self.records.len()
    }

    pub fn split_of(&self, index: usize) -> Option<Split> {
        self.splits.get(index).copied()
    }

    pub fn records_in(&self, split: Split) -> Vec<&Record> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(r, _)| r)
            .collect()
    }

    pub fn patient_ids(&self, split: Split) -> Vec<u32> {
        self.records_in(split).iter().map(|r| r.patient_id).collect()
    }
}

/// Mean and population standard deviation over every voxel of the split.
pub fn compute_stats(ds: &DomainDataset, split: Split) -> Result<NormStats> {
    if !ds.is_split() {
        return Err(Error::config("dataset has no split assignment"));
    }
    let records = ds.records_in(split);
    let n: usize = records.iter().map(|r| r.volume.len()).sum();
    if n == 0 {
        return Err(Error::config(format!("{split} split is empty")));
    }
    let mean = records.iter().flat_map(|r| &r.volume).sum::<f64>() / n as f64;
    let var = records
        .iter()
        .flat_map(|r| &r.volume)
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::numeric(format!(
            "{split} split has zero variance; cannot normalize"
        )));
    }
    Ok(NormStats { mean, std })
}

/// `x → (x − μ) / σ` on every record of every split.
pub fn normalize(ds: &DomainDataset, stats: NormStats) -> Result<DomainDataset> {
    if !(stats.std > 0.0 && stats.std.is_finite() && stats.mean.is_finite()) {
        return Err(Error::numeric(format!("invalid normalization stats {stats:?}")));
    }
    if ds.normalized {
        return Err(Error::config("dataset is already normalized"));
    }
    let mut out = ds.clone();
    for r in &mut out.records {
        for v in &mut r.volume {
            *v = (*v - stats.mean) / stats.std;
        }
    }
    out.stats = Some(stats);
    out.normalized = true;
    Ok(out)
}

/// Normalizes with the dataset's own training-split statistics.
pub fn normalize_with_train_stats(ds: &DomainDataset) -> Result<DomainDataset> {
    let stats = match ds.stats {
        Some(s) => s,
        None => compute_stats(ds, Split::Train)?,
    };
    normalize(ds, stats)
}

/// Per-split patient lists, written next to each dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub domain_id: u8,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitManifest {
    pub fn from_dataset(ds: &DomainDataset) -> Self {
        SplitManifest {
            domain_id: ds.domain_id(),
            train: ds.patient_ids(Split::Train),
            val: ds.patient_ids(Split::Val),
            test: ds.patient_ids(Split::Test),
        }
    }
}

/// Header text for the dataset container. Records are listed as
/// `record=<patient_id>,<split|->,<label|->,<mask 0|1>`.
fn dataset_header(ds: &DomainDataset) -> Header {
    let mut h = Header::new();
    h.push("domain_id", ds.domain_id());
    let [d, hh, w] = ds.shape();
    h.push("shape", format!("{d},{hh},{w}"));
    h.push("spec", serde_json::to_string(&ds.spec).expect("spec serializes"));
    h.push("normalized", u8::from(ds.normalized));
    match ds.stats {
        Some(s) => {
            h.push("stats_mean", f64_to_hex(s.mean));
            h.push("stats_std", f64_to_hex(s.std));
        }
        None => {
            h.push("stats_mean", "none");
            h.push("stats_std", "none");
        }
    }
    if let Some(p) = &ds.provenance {
        h.push("provenance", p);
    }
    h.push("records", ds.records.len());
    for (i, r) in ds.records.iter().enumerate() {
        let split = ds.split_of(i).map_or("-", Split::name);
        let label = r.label.map_or("-".to_string(), |l| l.to_string());
        h.push(
            "record",
            format!("{},{split},{label},{}", r.patient_id, u8::from(r.mask.is_some())),
        );
    }
    h
}

pub fn encode_dataset(ds: &DomainDataset) -> Vec<u8> {
    let mut payload = Vec::new();
    for r in &ds.records {
        container::push_f64s(&mut payload, &r.volume);
        if let Some(m) = &r.mask {
            payload.extend_from_slice(m);
        }
    }
    container::encode(MAGIC, FORMAT_VERSION, &dataset_header(ds), &payload)
}

/// Payload bytes implied by the format: 8 per voxel plus 1 per mask voxel.
pub fn payload_len(ds: &DomainDataset) -> usize {
    ds.records
        .iter()
        .map(|r| r.volume.len() * 8 + r.mask.as_ref().map_or(0, Vec::len))
        .sum()
}

pub fn write_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<DomainDataset> {
    let (h, payload) = container::read(path, MAGIC, FORMAT_VERSION)?;
    let bad = |msg: String| Error::format(path, msg);
    let spec: DomainSpec = serde_json::from_str(h.require("spec", path)?)
        .map_err(|e| bad(format!("bad spec header: {e}")))?;
    spec.validate()
        .map_err(|e| bad(format!("invalid spec in header: {e}")))?;
    let domain_id: u8 = h.parse("domain_id", path)?;
    let shape_raw = h.require("shape", path)?;
    let shape: Vec<usize> = shape_raw
        .split(',')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(format!("bad shape `{shape_raw}`")))?;
    if domain_id != spec.domain_id || shape != spec.shape {
        return Err(bad("domain_id/shape disagree with embedded spec".into()));
    }
    let normalized = match h.require("normalized", path)? {
        "0" => false,
        "1" => true,
        other => return Err(bad(format!("bad normalized flag `{other}`"))),
    };
    let stats = match (h.require("stats_mean", path)?, h.require("stats_std", path)?) {
        ("none", "none") => None,
        (m, s) => Some(NormStats {
            mean: f64_from_hex(m).ok_or_else(|| bad(format!("bad stats_mean `{m}`")))?,
            std: f64_from_hex(s).ok_or_else(|| bad(format!("bad stats_std `{s}`")))?,
        }),
    };
    let n: usize = h.parse("records", path)?;
    let lines: Vec<&str> = h.all("record").collect();
    if lines.len() != n {
        return Err(bad(format!("header declares {n} records, lists {}", lines.len())));
    }
    let voxels = spec.voxels();
    let mut offset = 0;
    let mut records = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let [pid, split, label, has_mask] = fields[..] else {
            return Err(bad(format!("bad record line `{line}`")));
        };
        let patient_id = pid.parse().map_err(|_| bad(format!("bad patient id `{pid}`")))?;
        match split {
            "-" => {}
            s => splits.push(Split::parse(s).ok_or_else(|| bad(format!("bad split `{s}`")))?),
        }
        let label = match label {
            "-" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => return Err(bad(format!("bad label `{other}`"))),
        };
        let volume = container::take_f64s(path, &payload, &mut offset, voxels)?;
        if volume.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite voxel in patient {patient_id}")));
        }
        let mask = match has_mask {
            "0" => None,
            "1" => {
                let end = offset + voxels;
                let m = payload
                    .get(offset..end)
                    .ok_or_else(|| bad("payload shorter than header declares".into()))?
                    .to_vec();
                if m.iter().any(|&b| b > 1) {
                    return Err(bad(format!("non-binary mask in patient {patient_id}")));
                }
                offset = end;
                Some(m)
            }
            other => return Err(bad(format!("bad mask flag `{other}`"))),
        };
        records.push(Record {
            patient_id,
            volume,
            label,
            mask,
        });
    }
    if offset != payload.len() {
        return Err(bad("trailing bytes after records".into()));
    }
    if !splits.is_empty() && splits.len() != records.len() {
        return Err(bad("split assignment covers only some records".into()));
    }
    Ok(DomainDataset {
        spec,
        records,
        splits,
        stats,
        normalized,
        provenance: h.get("provenance").map(str::to_string),
    })
}
