//! Image-similarity metrics, the Fréchet feature-distance proxy, slice
//! stacking, band segmentation of phantom volumes and region-wise
//! volumetric error, assembled into a [`MetricsReport`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::alignment::{attention_alignment_loss, build_progression_mask, reconstruction_loss};
use crate::config::{Config, EvalConfig, FidExtractor};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::{ImageGrid, LabelVolume, Volume};
use crate::inference::{attention_taps, synthesize_slices};
use crate::networks::{image_batch, DiseaseState, ModelParameters, Net, ProgressionAttributes, SUPERVISED_TAPS};
use crate::phantom::{PhantomConfig, SubjectRecord, LABEL_AMYGDALA, LABEL_HIPPOCAMPUS, LABEL_VENTRICLE};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const FID_RIDGE: f64 = 1e-6;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    reconstruction_loss(a, b)
}

pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP_DB } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB) })
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> Vec<f64> {
    let r = SSIM_RADIUS as f64;
    let w: Vec<f64> = (0..2 * SSIM_RADIUS + 1).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mirror index with the edge sample repeated (`-1 → 0`, `n → n-1`).
pub fn symmetric_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn blur(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = taps.iter().enumerate().map(|(k, t)| t * src[y * w + symmetric_index(x as isize + k as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps.iter().enumerate().map(|(k, t)| t * rows[symmetric_index(y as isize + k as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Mean local SSIM, Gaussian window, dynamic range 1.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = (a.h, a.w);
    let taps = gaussian_taps();
    let x: Vec<f64> = a.pixels.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.pixels.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = blur(&x, h, w, &taps);
    let my = blur(&y, h, w, &taps);
    let sxx = blur(&prod(&x, &x), h, w, &taps);
    let syy = blur(&prod(&y, &y), h, w, &taps);
    let sxy = blur(&prod(&x, &y), h, w, &taps);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for i in 0..h * w {
        let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
        total += (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    Ok(total / (h * w) as f64)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map(Vec::len).unwrap_or(0);
    if dim == 0 || a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch("feature vectors must share a positive dimension".into()));
    }
    if a.len() < dim + 1 || b.len() < dim + 1 {
        return Err(Error::InvalidArgument(format!(
            "feature sets of size {} and {} are too small for dimension {dim}; need at least {}",
            a.len(),
            b.len(),
            dim + 1
        )));
    }
    let (mu_a, cov_a) = gaussian_fit(a, dim);
    let (mu_b, cov_b) = gaussian_fit(b, dim);
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn gaussian_fit(x: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len() as f64;
    let mut mu = DVector::zeros(dim);
    for v in x {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in x {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    cov += DMatrix::identity(dim, dim) * FID_RIDGE;
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Feature source for [`fid_proxy`].
#[derive(Clone, Copy)]
pub enum Features<'a> {
    Latent(&'a ModelParameters<f32>),
    PooledPixels,
}

impl Features<'_> {
    pub fn kind(&self) -> FidExtractor {
        match self {
            Features::Latent(_) => FidExtractor::Latent,
            Features::PooledPixels => FidExtractor::PooledPixels,
        }
    }
}

/// 4×4 block means, row-major.
pub fn pooled_pixels(img: &ImageGrid) -> Vec<f64> {
    let (ph, pw) = (img.h / 4, img.w / 4);
    let mut out = vec![0.0; ph * pw];
    for y in 0..ph * 4 {
        for x in 0..pw * 4 {
            out[(y / 4) * pw + x / 4] += img.get(y, x) as f64 / 16.0;
        }
    }
    out
}

pub fn extract_features(images: &[ImageGrid], features: Features) -> Result<Vec<Vec<f64>>> {
    match features {
        Features::PooledPixels => Ok(images.iter().map(pooled_pixels).collect()),
        Features::Latent(params) => {
            let net = Net::new(params);
            let mut out = Vec::with_capacity(images.len());
            for chunk in images.chunks(64) {
                let refs: Vec<&ImageGrid> = chunk.iter().collect();
                let mut g = net.graph();
                let x = g.input(image_batch(&refs, params.config.image_size)?);
                let z = net.encoder(&mut g, x);
                out.extend(g.value(z).chunks(params.config.d).map(|v| v.iter().map(|&f| f as f64).collect()));
            }
            Ok(out)
        }
    }
}

pub fn fid_proxy(set_a: &[ImageGrid], set_b: &[ImageGrid], features: Features) -> Result<f64> {
    frechet_distance(&extract_features(set_a, features)?, &extract_features(set_b, features)?)
}

pub fn stack_slices(slices: &[ImageGrid], d: usize) -> Result<Volume> {
    if slices.len() != d || d == 0 {
        return Err(Error::ShapeMismatch(format!("expected {d} slices, got {}", slices.len())));
    }
    let (h, w) = (slices[0].h, slices[0].w);
    let mut voxels = Vec::with_capacity(h * w * d);
    for s in slices {
        slices[0].ensure_same_shape(s)?;
        voxels.extend_from_slice(&s.pixels);
    }
    Ok(Volume { h, w, d, voxels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Ventricle,
    Hippocampus,
    Amygdala,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Ventricle, Region::Hippocampus, Region::Amygdala];

    pub fn label(self) -> u8 {
        match self {
            Region::Ventricle => LABEL_VENTRICLE,
            Region::Hippocampus => LABEL_HIPPOCAMPUS,
            Region::Amygdala => LABEL_AMYGDALA,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Ventricle => "ventricle",
            Region::Hippocampus => "hippocampus",
            Region::Amygdala => "amygdala",
        }
    }

    /// Closed intensity band `[lo, hi]`.
    pub fn band(self, eval: &EvalConfig) -> [f64; 2] {
        match self {
            Region::Ventricle => eval.ventricle_band,
            Region::Hippocampus => eval.hippocampus_band,
            Region::Amygdala => eval.amygdala_band,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionCounts {
    pub ventricle: usize,
    pub hippocampus: usize,
    pub amygdala: usize,
}

impl RegionCounts {
    pub fn get(&self, r: Region) -> usize {
        match r {
            Region::Ventricle => self.ventricle,
            Region::Hippocampus => self.hippocampus,
            Region::Amygdala => self.amygdala,
        }
    }

    fn set(&mut self, r: Region, v: usize) {
        match r {
            Region::Ventricle => self.ventricle = v,
            Region::Hippocampus => self.hippocampus = v,
            Region::Amygdala => self.amygdala = v,
        }
    }
}

/// Ball dilation in voxel units.
pub fn dilate(mask: &[bool], h: usize, w: usize, d: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let offsets: Vec<(isize, isize, isize)> = (-r..=r)
        .flat_map(|dz| (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dz, dy, dx))))
        .filter(|(dz, dy, dx)| dz * dz + dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; mask.len()];
    for c in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[(c * h + y) * w + x] {
                    continue;
                }
                for &(dz, dy, dx) in &offsets {
                    let (cc, yy, xx) = (c as isize + dz, y as isize + dy, x as isize + dx);
                    if (0..d as isize).contains(&cc) && (0..h as isize).contains(&yy) && (0..w as isize).contains(&xx) {
                        out[(cc as usize * h + yy as usize) * w + xx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Counts voxels inside the dilated baseline prior of each region whose
/// intensity lies in that region's band.
pub fn segment_regions(vol: &Volume, priors: &LabelVolume, eval: &EvalConfig) -> Result<RegionCounts> {
    if (vol.h, vol.w, vol.d) != (priors.h, priors.w, priors.d) {
        return Err(Error::ShapeMismatch(format!(
            "volume is {}x{}x{}, priors are {}x{}x{}",
            vol.h, vol.w, vol.d, priors.h, priors.w, priors.d
        )));
    }
    let mut counts = RegionCounts::default();
    for r in Region::ALL {
        let [lo, hi] = r.band(eval);
        let region = dilate(&priors.mask(r.label()), vol.h, vol.w, vol.d, eval.dilation_radius);
        let n = region.iter().zip(&vol.voxels).filter(|(&m, &v)| m && (lo..=hi).contains(&(v as f64))).count();
        counts.set(r, n);
    }
    Ok(counts)
}

/// `|(V̂_f − V_b)/V_b − (V_f − V_b)/V_b|`.
pub fn volumetric_mae(v_b: f64, v_f: f64, v_f_hat: f64) -> Result<f64> {
    if !(v_b > 0.0) {
        return Err(Error::InvalidArgument("baseline region volume must be positive".into()));
    }
    Ok(((v_f_hat - v_b) / v_b - (v_f - v_b) / v_b).abs())
}

/// Mean over samples and supervised taps of the channel-averaged cosine
/// between attention and the progression mask, i.e. one minus the
/// alignment loss. Pairs with degenerate masks are skipped.
pub fn attention_mask_agreement(
    pairs: &[(&ImageGrid, &ImageGrid, &ProgressionAttributes)],
    params: &ModelParameters<f32>,
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<f64> {
    let shapes = params.config.tap_shapes();
    let (mut total, mut n) = (0.0, 0usize);
    for (x_b, x_f, attrs) in pairs {
        let mask = build_progression_mask(x_b, x_f, &shapes)?;
        if mask.degenerate {
            continue;
        }
        let taps = attention_taps(x_b, attrs, params, sched, t, seed)?;
        total += 1.0 - attention_alignment_loss(&taps[..SUPERVISED_TAPS], &mask)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no pair with a non-degenerate progression mask".into()));
    }
    Ok(total / n as f64)
}

pub const GROUP_CN: &str = "CN";
pub const GROUP_IMPAIRED: &str = "MCI&AD";

pub fn group_of(state: DiseaseState) -> &'static str {
    match state {
        DiseaseState::Cn => GROUP_CN,
        DiseaseState::Mci | DiseaseState::Ad => GROUP_IMPAIRED,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub subject_id: String,
    pub disease_state: DiseaseState,
    /// Index of the follow-up scan; the baseline is scan 0.
    pub scan_index: usize,
    pub slice_index: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub subject_id: String,
    pub disease_state: DiseaseState,
    pub scan_index: usize,
    pub target_age: f64,
    pub region: Region,
    pub v_b: usize,
    pub v_f: usize,
    pub v_f_hat: usize,
    pub mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero below two values.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub psnr_db: Summary,
    pub ssim: Summary,
    pub mse: Summary,
    pub ventricle_mae: Summary,
    pub hippocampus_mae: Summary,
    pub amygdala_mae: Summary,
    /// Absent when the group has too few slices for the feature dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid_proxy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid_extractor: FidExtractor,
    pub fid_note: String,
    pub groups: Vec<GroupSummary>,
    pub pairs: Vec<PairRecord>,
    pub volumes: Vec<VolumeRecord>,
}

impl MetricsReport {
    /// Group aggregates recomputed from the per-pair and per-volume records.
    pub fn aggregate(pairs: &[PairRecord], volumes: &[VolumeRecord], group: &str) -> GroupSummary {
        let p: Vec<&PairRecord> = pairs.iter().filter(|r| group_of(r.disease_state) == group).collect();
        let mae = |region: Region| {
            let v: Vec<f64> =
                volumes.iter().filter(|r| r.region == region && group_of(r.disease_state) == group).map(|r| r.mae).collect();
            Summary::of(&v)
        };
        GroupSummary {
            group: group.to_string(),
            psnr_db: Summary::of(&p.iter().map(|r| r.psnr_db).collect::<Vec<_>>()),
            ssim: Summary::of(&p.iter().map(|r| r.ssim).collect::<Vec<_>>()),
            mse: Summary::of(&p.iter().map(|r| r.mse).collect::<Vec<_>>()),
            ventricle_mae: mae(Region::Ventricle),
            hippocampus_mae: mae(Region::Hippocampus),
            amygdala_mae: mae(Region::Amygdala),
            fid_proxy: None,
        }
    }

    pub fn group(&self, name: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group == name)
    }

    /// Mean PSNR over every pair record.
    pub fn mean_psnr(&self) -> f64 {
        Summary::of(&self.pairs.iter().map(|r| r.psnr_db).collect::<Vec<_>>()).mean
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report is representable as TOML")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))
    }

    /// One CSV row per volumetric record.
    pub fn region_table(&self) -> String {
        let mut out = String::from("subject_id,disease_state,scan_index,target_age,region,v_b,v_f,v_f_hat,mae\n");
        for r in &self.volumes {
            out.push_str(&format!(
                "{},{},{},{:.2},{},{},{},{},{:.6}\n",
                r.subject_id,
                r.disease_state,
                r.scan_index,
                r.target_age,
                r.region.as_str(),
                r.v_b,
                r.v_f,
                r.v_f_hat,
                r.mae
            ));
        }
        out
    }
}

struct SubjectEval {
    pairs: Vec<PairRecord>,
    volumes: Vec<VolumeRecord>,
    predicted: Vec<ImageGrid>,
    truth: Vec<ImageGrid>,
}

fn evaluate_subject<P>(s: &SubjectRecord, predict: &P, eval: &EvalConfig) -> Result<SubjectEval>
where
    P: Fn(&SubjectRecord, usize) -> Result<Volume>,
{
    let base = &s.scans[0];
    let v_b = segment_regions(&base.volume, &base.labels, eval)?;
    let mut out = SubjectEval { pairs: Vec::new(), volumes: Vec::new(), predicted: Vec::new(), truth: Vec::new() };
    for j in 1..s.scans.len() {
        let truth = &s.scans[j].volume;
        let pred = predict(s, j)?;
        if (pred.h, pred.w, pred.d) != (truth.h, truth.w, truth.d) {
            return Err(Error::ShapeMismatch(format!("prediction for {} scan {j} has the wrong shape", s.subject_id)));
        }
        for c in 0..truth.d {
            let (p, t) = (pred.slice(c), truth.slice(c));
            out.pairs.push(PairRecord {
                subject_id: s.subject_id.clone(),
                disease_state: s.disease_state,
                scan_index: j,
                slice_index: c,
                psnr_db: psnr(&p, &t)?,
                ssim: ssim(&p, &t)?,
                mse: mse(&p, &t)?,
            });
            out.predicted.push(p);
            out.truth.push(t);
        }
        let v_f = segment_regions(truth, &base.labels, eval)?;
        let v_hat = segment_regions(&pred, &base.labels, eval)?;
        for r in Region::ALL {
            let (b, f, fh) = (v_b.get(r), v_f.get(r), v_hat.get(r));
            out.volumes.push(VolumeRecord {
                subject_id: s.subject_id.clone(),
                disease_state: s.disease_state,
                scan_index: j,
                target_age: s.scans[j].age,
                region: r,
                v_b: b,
                v_f: f,
                v_f_hat: fh,
                mae: volumetric_mae(b as f64, f as f64, fh as f64)
                    .map_err(|_| Error::InvalidArgument(format!("{}: baseline {} volume is empty", s.subject_id, r.as_str())))?,
            });
        }
    }
    Ok(out)
}

/// Scores the volumes returned by `predict(subject, follow_up_index)`
/// against each subject's follow-up scans. Subjects are spread over
/// `workers` threads; the report does not depend on the worker count.
pub fn evaluate_predictions<P>(
    test: &[SubjectRecord],
    predict: P,
    eval: &EvalConfig,
    features: Features,
    workers: usize,
) -> Result<MetricsReport>
where
    P: Fn(&SubjectRecord, usize) -> Result<Volume> + Sync,
{
    let test = &test[..eval.max_subjects.unwrap_or(test.len()).min(test.len())];
    if !test.iter().any(|s| s.scans.len() > 1) {
        return Err(Error::InvalidArgument("test set has no baseline/follow-up pair".into()));
    }
    let workers = workers.clamp(1, test.len());
    let mut results: Vec<Option<Result<SubjectEval>>> = (0..test.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                let predict = &predict;
                scope.spawn(move || {
                    (k..test.len()).step_by(workers).map(|i| (i, evaluate_subject(&test[i], predict, eval))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut pairs = Vec::new();
    let mut volumes = Vec::new();
    let mut slices: Vec<(&'static str, ImageGrid, ImageGrid)> = Vec::new();
    for (s, r) in test.iter().zip(results) {
        let r = r.expect("every subject is assigned to a worker")?;
        pairs.extend(r.pairs);
        volumes.extend(r.volumes);
        slices.extend(r.predicted.into_iter().zip(r.truth).map(|(p, t)| (group_of(s.disease_state), p, t)));
    }
    let mut groups = Vec::new();
    for name in [GROUP_CN, GROUP_IMPAIRED] {
        let mut g = MetricsReport::aggregate(&pairs, &volumes, name);
        if g.psnr_db.n == 0 {
            continue;
        }
        let (pred, truth): (Vec<ImageGrid>, Vec<ImageGrid>) =
            slices.iter().filter(|(gn, _, _)| *gn == name).map(|(_, p, t)| (p.clone(), t.clone())).unzip();
        g.fid_proxy = match fid_proxy(&pred, &truth, features) {
            Ok(v) => Some(v),
            Err(Error::InvalidArgument(_)) => None,
            Err(e) => return Err(e),
        };
        groups.push(g);
    }
    let fid_note = format!(
        "fid_proxy is the Frechet distance between Gaussian fits of {} features; it is not comparable to Inception-based FID",
        match features.kind() {
            FidExtractor::Latent => "semantic-encoder latent",
            FidExtractor::PooledPixels => "4x4 average-pooled pixel",
        }
    );
    Ok(MetricsReport { fid_extractor: features.kind(), fid_note, groups, pairs, volumes })
}

/// Target-age attributes for follow-up scan `j` of a subject.
pub fn follow_up_attributes(s: &SubjectRecord, j: usize, data: &PhantomConfig, bins: usize) -> Result<ProgressionAttributes> {
    ProgressionAttributes::new(data.age_bin(s.scans[j].age, bins), bins, s.disease_state)
}

/// Synthesizes every follow-up of every test subject from its baseline
/// and scores the result.
pub fn evaluate(
    params: &ModelParameters<f32>,
    sched: &NoiseSchedule,
    test: &[SubjectRecord],
    config: &Config,
    workers: usize,
) -> Result<MetricsReport> {
    let features = match config.eval.fid_extractor {
        FidExtractor::Latent => Features::Latent(params),
        FidExtractor::PooledPixels => Features::PooledPixels,
    };
    let bins = params.config.age_bins;
    let predict = |s: &SubjectRecord, j: usize| {
        let attrs = follow_up_attributes(s, j, &config.data, bins)?;
        let base = &s.scans[0].volume;
        let slices = synthesize_slices(
            &base.slices(),
            &attrs,
            params,
            sched,
            config.inference.sample_steps,
            config.inference.seed,
            base.d,
        )?;
        stack_slices(&slices, base.d)
    };
    evaluate_predictions(test, predict, &config.eval, features, workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_dataset;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageGrid {
        ImageGrid::new(h, w, (0..h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    fn loop_mse(a: &ImageGrid, b: &ImageGrid) -> f64 {
        let mut s = 0.0;
        for i in 0..a.pixels.len() {
            let d = a.pixels[i] as f64 - b.pixels[i] as f64;
            s += d * d;
        }
        s / a.pixels.len() as f64
    }

    /// Per-pixel SSIM with an explicit 2-D window and reflected indices.
    fn loop_ssim(a: &ImageGrid, b: &ImageGrid) -> f64 {
        let (h, w) = (a.h as isize, a.w as isize);
        let mut wsum = 0.0;
        let mut win = [[0.0f64; 11]; 11];
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5))).exp();
                wsum += *v;
            }
        }
        let refl = |i: isize, n: isize| {
            let mut i = i;
            while i < 0 || i >= n {
                i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
            }
            i as usize
        };
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5..=5isize {
                    for dx in -5..=5isize {
                        let k = win[(dy + 5) as usize][(dx + 5) as usize] / wsum;
                        let (yi, xi) = (refl(y + dy, h), refl(x + dx, w));
                        let p = a.get(yi, xi) as f64;
                        let q = b.get(yi, xi) as f64;
                        mx += k * p;
                        my += k * q;
                        xx += k * p * p;
                        yy += k * q * q;
                        xy += k * p * q;
                    }
                }
                let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total / (h * w) as f64
    }

    #[test]
    fn psnr_examples() {
        let a = ImageGrid::filled(4, 4, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = ImageGrid::filled(4, 4, 0.2);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &ImageGrid::zeros(3, 4)).is_err());
    }

    #[test]
    fn metrics_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (h, w) in [(32, 32), (8, 8), (13, 7), (4, 20)] {
            let a = random_image(&mut rng, h, w);
            let b = random_image(&mut rng, h, w);
            let m = loop_mse(&a, &b);
            assert!((mse(&a, &b).unwrap() - m).abs() < 1e-12);
            assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
            assert!((ssim(&a, &b).unwrap() - loop_ssim(&a, &b)).abs() < 1e-9, "{h}x{w}");
        }
    }

    #[test]
    fn ssim_constant_images() {
        assert!((ssim(&ImageGrid::filled(16, 16, 0.4), &ImageGrid::filled(16, 16, 0.4)).unwrap() - 1.0).abs() < 1e-12);
        let c1 = 1e-4;
        let got = ssim(&ImageGrid::zeros(16, 16), &ImageGrid::filled(16, 16, 1.0)).unwrap();
        assert!((got - c1 / (1.0 + c1)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn symmetric_index_mirrors_edges() {
        let got: Vec<usize> = (-3..8).map(|i| symmetric_index(i, 5)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 4, 4, 3, 2]);
        assert_eq!(symmetric_index(-7, 3), 0);
    }

    fn gaussian_samples(rng: &mut ChaCha8Rng, n: usize, mean: [f64; 2], chol: [[f64; 2]; 2]) -> Vec<Vec<f64>> {
        use rand_distr::StandardNormal;
        (0..n)
            .map(|_| {
                let (u, v): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                vec![mean[0] + chol[0][0] * u, mean[1] + chol[1][0] * u + chol[1][1] * v]
            })
            .collect()
    }

    #[test]
    fn frechet_matches_closed_form_for_commuting_covariances() {
        // Diagonal covariances: d = |Δμ|² + Σ (σa − σb)².
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian_samples(&mut rng, 4000, [0.0, 0.0], [[1.0, 0.0], [0.0, 2.0]]);
        let b = gaussian_samples(&mut rng, 4000, [3.0, -2.0], [[2.0, 0.0], [0.0, 1.0]]);
        let exact = 13.0 + 1.0 + 1.0;
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - exact).abs() / exact < 0.05, "{got}");
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        assert!(frechet_distance(&a[..2], &b).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 12, 12);
            let b = random_image(&mut rng, 12, 12);
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn volumetric_mae_is_scale_invariant(b in 1.0f64..1e4, f in 0.0f64..1e4, fh in 0.0f64..1e4, k in 0.1f64..100.0) {
            let m = volumetric_mae(b, f, fh).unwrap();
            prop_assert!((volumetric_mae(k * b, k * f, k * fh).unwrap() - m).abs() <= 1e-9 * (1.0 + m));
        }

        #[test]
        fn frechet_is_nonnegative(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian_samples(&mut rng, 20, [0.0, 0.1], [[1.0, 0.0], [0.5, 0.1]]);
            let b = gaussian_samples(&mut rng, 20, [0.0, 0.0], [[0.01, 0.0], [0.0, 1.0]]);
            prop_assert!(frechet_distance(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn volumetric_mae_examples() {
        assert_eq!(volumetric_mae(100.0, 110.0, 110.0).unwrap(), 0.0);
        assert!((volumetric_mae(100.0, 110.0, 105.0).unwrap() - 0.05).abs() < 1e-12);
        assert!(volumetric_mae(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn stacking_round_trips() {
        let s = vec![ImageGrid::filled(2, 3, 0.1), ImageGrid::filled(2, 3, 0.9)];
        let v = stack_slices(&s, 2).unwrap();
        assert_eq!(v.voxels[v.index(1, 2, 1)], 0.9);
        assert_eq!(v.voxels[v.index(0, 0, 0)], 0.1);
        assert_eq!(v.slices(), s);
        assert!(stack_slices(&s, 3).is_err());
    }

    #[test]
    fn dilation_radius() {
        let mut m = vec![false; 7 * 7 * 7];
        m[(3 * 7 + 3) * 7 + 3] = true;
        let d = dilate(&m, 7, 7, 7, 2);
        // lattice points in a ball of radius 2
        assert_eq!(d.iter().filter(|&&v| v).count(), 33);
        assert_eq!(dilate(&m, 7, 7, 7, 0), m);
    }

    #[test]
    fn segmentation_recovers_label_counts() {
        let cfg = PhantomConfig { train_subjects: 0, test_subjects: 4, ..PhantomConfig::default() };
        let (_, test) = generate_dataset(&cfg).unwrap();
        let eval = EvalConfig::default();
        for s in &test {
            for scan in &s.scans {
                let c = segment_regions(&scan.volume, &scan.labels, &eval).unwrap();
                for r in Region::ALL {
                    let truth = scan.labels.count(r.label()) as f64;
                    assert!(truth > 0.0);
                    assert!((c.get(r) as f64 - truth).abs() <= 0.02 * truth, "{} {:?}: {} vs {truth}", s.subject_id, r, c.get(r));
                }
            }
        }
        let zero = Volume::zeros(32, 32, 16);
        assert_eq!(segment_regions(&zero, &test[0].scans[0].labels, &eval).unwrap(), RegionCounts::default());
    }

    #[test]
    fn ground_truth_self_evaluation() {
        let cfg = PhantomConfig { train_subjects: 0, test_subjects: 14, ..PhantomConfig::default() };
        let (_, test) = generate_dataset(&cfg).unwrap();
        let eval = EvalConfig::default();
        let truth = |s: &SubjectRecord, j: usize| Ok(s.scans[j].volume.clone());
        let r = evaluate_predictions(&test, truth, &eval, Features::PooledPixels, 1).unwrap();
        assert!(r.pairs.iter().all(|p| p.psnr_db == PSNR_CAP_DB && (p.ssim - 1.0).abs() < 1e-9 && p.mse == 0.0));
        assert!(r.volumes.iter().all(|v| v.mae == 0.0));
        for g in &r.groups {
            let mut again = MetricsReport::aggregate(&r.pairs, &r.volumes, &g.group);
            again.fid_proxy = g.fid_proxy;
            assert_eq!(&again, g);
            assert!(g.fid_proxy.map_or(true, |f| f < 1e-6));
        }
        assert!(r.groups.iter().any(|g| g.fid_proxy.is_some()));
        let r3 = evaluate_predictions(&test, truth, &eval, Features::PooledPixels, 3).unwrap();
        assert_eq!(r3, r);
        assert_eq!(MetricsReport::from_text(&r.to_text()).unwrap(), r);
        assert_eq!(r.region_table().lines().count(), 1 + r.volumes.len());
        let empty = vec![SubjectRecord { scans: vec![test[0].scans[0].clone()], ..test[0].clone() }];
        assert!(evaluate_predictions(&empty, truth, &eval, Features::PooledPixels, 1).is_err());
    }
}
