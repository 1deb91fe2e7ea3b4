//! Synthetic longitudinal brain-like phantoms: an ellipsoidal head with a
//! central ventricle that grows with age and paired hippocampus/amygdala
//! blobs that shrink, at rates ordered by disease state.
//!
//! Coordinates are normalised to `[-1, 1]` on every axis. Intensities are
//! chosen so that a boundary pixel crosses its region's intensity band
//! exactly when the region covers half of it, which keeps the analytic
//! label volumes and intensity-band segmentation consistent.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, LabelVolume, Volume};
use crate::networks::{DiseaseState, ProgressionAttributes};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_TISSUE: u8 = 1;
pub const LABEL_VENTRICLE: u8 = 2;
pub const LABEL_HIPPOCAMPUS: u8 = 3;
pub const LABEL_AMYGDALA: u8 = 4;

pub const INTENSITY_TISSUE: f64 = 0.4;
pub const INTENSITY_VENTRICLE: f64 = 0.1;
pub const INTENSITY_HIPPOCAMPUS: f64 = 0.6;
pub const INTENSITY_AMYGDALA: f64 = 0.95;
const TEXTURE_AMPLITUDE: f64 = 0.005;
const SUPERSAMPLE: usize = 5;
const REFERENCE_AGE: f64 = 63.0;

const MAGIC: &[u8; 4] = b"ACD1";
const HEADER_LEN: usize = 16;

/// Relative radius change per year: `(ventricle, hippocampus, amygdala)`.
pub fn progression_rates(state: DiseaseState) -> (f64, f64, f64) {
    match state {
        DiseaseState::Cn => (0.010, -0.005, -0.005),
        DiseaseState::Mci => (0.020, -0.010, -0.010),
        DiseaseState::Ad => (0.035, -0.020, -0.020),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingPolicy {
    /// Every (earlier, later) scan combination.
    AllOrdered,
    /// First scan paired with each later scan.
    BaselineToEach,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub slices: usize,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub min_scans: usize,
    pub max_scans: usize,
    pub interval_mean: f64,
    pub interval_sd: f64,
    pub interval_min: f64,
    pub interval_max: f64,
    pub age_min: f64,
    pub age_max: f64,
    pub seed: u64,
    pub pairing: PairingPolicy,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            slices: 16,
            train_subjects: 200,
            test_subjects: 60,
            min_scans: 2,
            max_scans: 3,
            interval_mean: 2.93,
            interval_sd: 1.35,
            interval_min: 1.0,
            interval_max: 6.0,
            age_min: 63.0,
            age_max: 87.0,
            seed: 0,
            pairing: PairingPolicy::AllOrdered,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data: {m}")));
        if self.image_size < 8 || self.slices == 0 {
            return bad("image_size must be >= 8 and slices >= 1");
        }
        if self.min_scans < 2 || self.max_scans < self.min_scans {
            return bad("need 2 <= min_scans <= max_scans");
        }
        if !(self.interval_min > 0.0 && self.interval_min <= self.interval_max && self.interval_sd >= 0.0) {
            return bad("interval bounds must satisfy 0 < interval_min <= interval_max and interval_sd >= 0");
        }
        if !(self.age_min < self.age_max) {
            return bad("age_min must be below age_max");
        }
        if self.interval_min * (self.max_scans - 1) as f64 > self.age_max - self.age_min {
            return bad("age range cannot hold max_scans scans at the minimum interval");
        }
        Ok(())
    }

    /// Age bin of `age` among `bins` equal-width bins over the age range.
    pub fn age_bin(&self, age: f64, bins: usize) -> usize {
        let frac = (age - self.age_min) / (self.age_max - self.age_min);
        ((frac * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub age: f64,
    pub volume: Volume,
    pub labels: LabelVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub identity_seed: u64,
    pub disease_state: DiseaseState,
    pub scans: Vec<Scan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub x_b: ImageGrid,
    pub x_f: ImageGrid,
    pub attrs: ProgressionAttributes,
    pub disease_state: DiseaseState,
    pub subject_id: String,
    pub slice_index: usize,
    pub baseline_age: f64,
    pub follow_up_age: f64,
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn scaled(&self, s: f64) -> Ellipsoid {
        Ellipsoid { center: self.center, axes: self.axes.map(|a| a * s) }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Identity-determined geometry of one subject at the reference age.
struct Anatomy {
    head: Ellipsoid,
    contour: Vec<(f64, f64, f64)>,
    texture: Vec<[f64; 4]>,
    ventricle: Ellipsoid,
    hippocampi: [Ellipsoid; 2],
    amygdalae: [Ellipsoid; 2],
}

impl Anatomy {
    fn new(identity_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
        let mut j = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let head = Ellipsoid { center: [0.0; 3], axes: [j(0.82, 0.88), j(0.88, 0.94), j(0.86, 0.94)] };
        let contour = (2..=4).map(|k| (k as f64, j(0.0, 0.02), j(0.0, std::f64::consts::TAU))).collect();
        let texture = (0..4)
            .map(|_| [j(6.0, 18.0), j(6.0, 18.0), j(2.0, 8.0), j(0.0, std::f64::consts::TAU)])
            .collect();
        // Layout keeps every structure apart even at the most extreme
        // growth/shrinkage reachable inside the age range.
        let vr = j(0.24, 0.28);
        let ventricle = Ellipsoid { center: [0.0, j(-0.02, 0.02), 0.0], axes: [vr, vr * 0.65, vr * 1.3] };
        let hs = j(0.95, 1.05);
        let (hy, hz) = (j(0.48, 0.52), j(-0.13, -0.07));
        let hippo = |sx: f64| Ellipsoid { center: [sx * 0.3, hy, hz], axes: [0.2 * hs, 0.12 * hs, 0.35 * hs] };
        let as_ = j(0.95, 1.05);
        let (ay, az) = (j(-0.5, -0.46), j(0.17, 0.23));
        let amyg = |sx: f64| Ellipsoid { center: [sx * 0.32, ay, az], axes: [0.14 * as_, 0.13 * as_, 0.28 * as_] };
        Anatomy {
            head,
            contour,
            texture,
            ventricle,
            hippocampi: [hippo(-1.0), hippo(1.0)],
            amygdalae: [amyg(-1.0), amyg(1.0)],
        }
    }

    fn in_head(&self, p: [f64; 3]) -> bool {
        let theta = p[1].atan2(p[0]);
        let bump: f64 = self.contour.iter().map(|&(k, a, ph)| a * (k * theta + ph).cos()).sum();
        let h = &self.head;
        let rho = (0..3).map(|i| (p[i] / h.axes[i]).powi(2)).sum::<f64>().sqrt();
        rho <= 1.0 + bump
    }

    fn texture_at(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self.texture.iter().map(|t| (t[0] * p[0] + t[1] * p[1] + t[2] * p[2] + t[3]).sin()).sum();
        TEXTURE_AMPLITUDE * s / self.texture.len() as f64
    }
}

fn validate_ages(ages: &[f64], lo: f64, hi: f64) -> Result<()> {
    if ages.len() < 2 {
        return Err(Error::InvalidArgument("a subject needs at least two scans".into()));
    }
    for &a in ages {
        if !(lo..=hi).contains(&a) {
            return Err(Error::InvalidArgument(format!("age {a} outside [{lo}, {hi}]")));
        }
    }
    if ages.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("ages must be strictly increasing".into()));
    }
    Ok(())
}

fn render(anatomy: &Anatomy, state: DiseaseState, age: f64, size: usize, slices: usize) -> (Volume, LabelVolume) {
    let (kv, kh, ka) = progression_rates(state);
    let dt = age - REFERENCE_AGE;
    let vent = anatomy.ventricle.scaled(1.0 + kv * dt);
    let hip = anatomy.hippocampi.each_ref().map(|e| e.scaled(1.0 + kh * dt));
    let amy = anatomy.amygdalae.each_ref().map(|e| e.scaled(1.0 + ka * dt));

    let mut volume = Volume::zeros(size, size, slices);
    let mut labels = LabelVolume { h: size, w: size, d: slices, labels: vec![0; size * size * slices] };
    let px = 2.0 / size as f64;
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for c in 0..slices {
        let z = (c as f64 + 0.5) * 2.0 / slices as f64 - 1.0;
        for y in 0..size {
            for x in 0..size {
                let mut counts = [0usize; 5];
                let mut intensity = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let p = [
                            -1.0 + (x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) * px,
                            -1.0 + (y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) * px,
                            z,
                        ];
                        let (label, v) = if !anatomy.in_head(p) {
                            (LABEL_BACKGROUND, 0.0)
                        } else if vent.contains(p) {
                            (LABEL_VENTRICLE, INTENSITY_VENTRICLE)
                        } else if hip.iter().any(|e| e.contains(p)) {
                            (LABEL_HIPPOCAMPUS, INTENSITY_HIPPOCAMPUS)
                        } else if amy.iter().any(|e| e.contains(p)) {
                            (LABEL_AMYGDALA, INTENSITY_AMYGDALA)
                        } else {
                            (LABEL_TISSUE, INTENSITY_TISSUE + anatomy.texture_at(p))
                        };
                        counts[label as usize] += 1;
                        intensity += v;
                    }
                }
                let idx = volume.index(y, x, c);
                volume.voxels[idx] = (intensity / n_sub).clamp(0.0, 1.0) as f32;
                let half = |n: usize| n as f64 / n_sub >= 0.5;
                labels.labels[idx] = if half(counts[2]) {
                    LABEL_VENTRICLE
                } else if half(counts[3]) {
                    LABEL_HIPPOCAMPUS
                } else if half(counts[4]) {
                    LABEL_AMYGDALA
                } else if half(counts[0]) {
                    LABEL_BACKGROUND
                } else {
                    LABEL_TISSUE
                };
            }
        }
    }
    (volume, labels)
}

/// Renders one subject at the given ages.
pub fn generate_subject(
    identity_seed: u64,
    disease_state: DiseaseState,
    ages: &[f64],
    config: &PhantomConfig,
) -> Result<SubjectRecord> {
    validate_ages(ages, config.age_min, config.age_max)?;
    let anatomy = Anatomy::new(identity_seed);
    let scans = ages
        .iter()
        .map(|&age| {
            let (volume, labels) = render(&anatomy, disease_state, age, config.image_size, config.slices);
            Scan { age, volume, labels }
        })
        .collect();
    Ok(SubjectRecord {
        subject_id: format!("sub-{identity_seed:016x}"),
        identity_seed,
        disease_state,
        scans,
    })
}

/// Train and test subjects, a pure function of `config`.
pub fn generate_dataset(config: &PhantomConfig) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let interval = Normal::new(config.interval_mean, config.interval_sd.max(1e-12))
        .map_err(|e| Error::Config(format!("data: interval distribution: {e}")))?;
    let mut make = |prefix: &str, count: usize| -> Result<Vec<SubjectRecord>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            // Kept below 2^63 so manifests store it as a TOML integer.
            let identity_seed: u64 = rng.gen::<u64>() >> 1;
            let state = DiseaseState::ALL[rng.gen_range(0..3)];
            let scans = rng.gen_range(config.min_scans..=config.max_scans);
            let gaps: Vec<f64> = (1..scans)
                .map(|_| interval.sample(&mut rng).clamp(config.interval_min, config.interval_max))
                .collect();
            let span: f64 = gaps.iter().sum::<f64>().min(config.age_max - config.age_min);
            let mut age = rng.gen_range(config.age_min..=config.age_max - span);
            let mut ages = vec![age];
            for g in gaps {
                age = (age + g).min(config.age_max);
                ages.push(age);
            }
            // Rounding to 0.01 y keeps manifests exact and readable.
            let ages: Vec<f64> = ages.iter().map(|a| (a * 100.0).round() / 100.0).collect();
            let mut subject = generate_subject(identity_seed, state, &ages, config)?;
            subject.subject_id = format!("{prefix}-{i:04}");
            out.push(subject);
        }
        Ok(out)
    };
    let train = make("train", config.train_subjects)?;
    let test = make("test", config.test_subjects)?;
    Ok((train, test))
}

/// Expands subjects into per-slice baseline/follow-up pairs.
pub fn build_pairs(
    subjects: &[SubjectRecord],
    policy: PairingPolicy,
    config: &PhantomConfig,
    age_bins: usize,
) -> Result<Vec<PairSample>> {
    let mut out = Vec::new();
    for s in subjects {
        let firsts: Vec<usize> = match policy {
            PairingPolicy::AllOrdered => (0..s.scans.len()).collect(),
            PairingPolicy::BaselineToEach => vec![0],
        };
        for &i in &firsts {
            for j in i + 1..s.scans.len() {
                let (b, f) = (&s.scans[i], &s.scans[j]);
                let attrs = ProgressionAttributes::new(config.age_bin(f.age, age_bins), age_bins, s.disease_state)?;
                for c in 0..b.volume.d {
                    out.push(PairSample {
                        x_b: b.volume.slice(c),
                        x_f: f.volume.slice(c),
                        attrs: attrs.clone(),
                        disease_state: s.disease_state,
                        subject_id: s.subject_id.clone(),
                        slice_index: c,
                        baseline_age: b.age,
                        follow_up_age: f.age,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectManifest {
    subject_id: String,
    identity_seed: u64,
    disease_state: DiseaseState,
    scans: Vec<ScanManifest>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanManifest {
    age: f64,
    volume: String,
    labels: String,
}

fn header(h: usize, w: usize, d: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    for v in [h, w, d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(v.h, v.w, v.d);
    out.reserve(v.voxels.len() * 4);
    for x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_labels(v: &LabelVolume) -> Vec<u8> {
    let mut out = header(v.h, v.w, v.d);
    out.extend_from_slice(&v.labels);
    out
}

fn parse_header(path: &Path, bytes: &[u8], elem: usize) -> Result<(usize, usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("file has {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic (expected \"ACD1\")"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, d) = (field(0), field(1), field(2));
    let expected = HEADER_LEN + h * w * d * elem;
    if bytes.len() != expected {
        return Err(Error::format(path, format!("expected {expected} bytes for a {h}x{w}x{d} volume, found {}", bytes.len())));
    }
    Ok((h, w, d))
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let (h, w, d) = parse_header(path, bytes, 4)?;
    let voxels = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Volume { h, w, d, voxels })
}

pub fn decode_labels(path: &Path, bytes: &[u8]) -> Result<LabelVolume> {
    let (h, w, d) = parse_header(path, bytes, 1)?;
    Ok(LabelVolume { h, w, d, labels: bytes[HEADER_LEN..].to_vec() })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one directory per subject under `dir`.
pub fn write_dataset(subjects: &[SubjectRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in subjects {
        let sub = dir.join(&s.subject_id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut scans = Vec::with_capacity(s.scans.len());
        for (i, scan) in s.scans.iter().enumerate() {
            let (vf, lf) = (format!("scan_{i}.acd"), format!("labels_{i}.acd"));
            write(&sub.join(&vf), &encode_volume(&scan.volume))?;
            write(&sub.join(&lf), &encode_labels(&scan.labels))?;
            scans.push(ScanManifest { age: scan.age, volume: vf, labels: lf });
        }
        let manifest = SubjectManifest {
            subject_id: s.subject_id.clone(),
            identity_seed: s.identity_seed,
            disease_state: s.disease_state,
            scans,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::format(&sub, e.to_string()))?;
        write(&sub.join("manifest.toml"), text.as_bytes())?;
    }
    Ok(())
}

/// Reads every subject directory under `dir` (sorted by name).
pub fn read_dataset(dir: &Path) -> Result<Vec<SubjectRecord>> {
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.toml").is_file())
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(Error::format(dir, "no subject directories with a manifest.toml"));
    }
    subs.iter().map(|sub| read_subject(sub)).collect()
}

fn read_subject(sub: &Path) -> Result<SubjectRecord> {
    let mpath = sub.join("manifest.toml");
    let text = String::from_utf8(read(&mpath)?).map_err(|_| Error::format(&mpath, "manifest is not UTF-8"))?;
    let m: SubjectManifest = toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let mut scans = Vec::with_capacity(m.scans.len());
    for s in &m.scans {
        let vp = sub.join(&s.volume);
        let lp = sub.join(&s.labels);
        let volume = decode_volume(&vp, &read(&vp)?)?;
        let labels = decode_labels(&lp, &read(&lp)?)?;
        if (labels.h, labels.w, labels.d) != (volume.h, volume.w, volume.d) {
            return Err(Error::format(&lp, "label volume shape differs from its scan"));
        }
        scans.push(Scan { age: s.age, volume, labels });
    }
    if scans.len() < 2 || scans.windows(2).any(|w| w[1].age <= w[0].age) {
        return Err(Error::format(&mpath, "need at least two scans with strictly increasing ages"));
    }
    Ok(SubjectRecord { subject_id: m.subject_id, identity_seed: m.identity_seed, disease_state: m.disease_state, scans })
}
