//! The training loop: per-sample branch and noise-level sampling, loss
//! assembly, Adam updates, checkpoints and the per-epoch JSON-lines log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::{attention_node, batch_loss, build_progression_mask, LossBreakdown, LossWeights, SampleTerms};
use crate::config::Config;
use crate::diffusion::{diffuse_slice, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::CustomOp;
use crate::networks::{image_batch, init_parameters, ModelParameters, Net, SUPERVISED_TAPS};
use crate::phantom::PairSample;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const PARAM_MAGIC: &[u8; 4] = b"ACKP";
const MANIFEST_FILE: &str = "manifest.toml";
const PARAMS_FILE: &str = "params.ackp";
const HISTORY_TAIL: usize = 50;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParameters<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected Adam update; parameters without a gradient are
    /// left untouched.
    pub fn update(&mut self, params: &mut ModelParameters<f32>, grads: &[Option<Vec<f32>>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut params.values_mut()[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + ADAM_EPS as f32);
            }
        }
    }
}

/// Serializable position of the training RNG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::InvalidArgument("malformed rng state in checkpoint".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParameters<f32>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub global_step: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &Config) -> Result<Self> {
        let params = init_parameters(&config.model, config.train.init_seed)?;
        Ok(Self {
            adam: AdamState::new(&params),
            params,
            rng: ChaCha8Rng::seed_from_u64(config.train.seed),
            epoch: 0,
            global_step: 0,
            history: Vec::new(),
        })
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Batch-mean components.
    pub breakdown: LossBreakdown,
    pub per_sample: Vec<LossBreakdown>,
    /// Follow-up samples whose mask was degenerate.
    pub skipped_alignment: usize,
    /// Samples routed to the baseline-reconstruction branch.
    pub baseline_branch: usize,
}

/// One record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_mse: f64,
    pub l_attn_align: f64,
    pub l_attn_imax: f64,
    pub total: f64,
    pub skipped_alignment_count: usize,
    pub baseline_branch_count: usize,
    pub samples: usize,
    pub steps: u64,
    pub lambda_imax: f64,
    pub lambda_align: f64,
    pub lambda_mse: f64,
}

/// Multiplies each row of an `(N, k)` node by a fixed factor.
struct RowScale<T> {
    factors: Vec<T>,
}

impl<T: Real> CustomOp<T> for RowScale<T> {
    fn name(&self) -> &'static str {
        "row_scale"
    }

    fn backward(&self, _: &[&[T]], _: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let k = grad_out.len() / self.factors.len();
        vec![Some(grad_out.iter().enumerate().map(|(i, &g)| g * self.factors[i / k]).collect())]
    }
}

/// Per-sample random draws for one batch, in consumption order.
#[derive(Debug, Clone)]
pub struct SampleDraw {
    pub baseline_branch: bool,
    pub t: usize,
    pub eps: Vec<f32>,
}

pub fn draw_samples(rng: &mut ChaCha8Rng, n: usize, pixels: usize, steps: usize, p_baseline: f64) -> Vec<SampleDraw> {
    (0..n)
        .map(|_| {
            let baseline_branch = rng.gen::<f64>() < p_baseline;
            let t = rng.gen_range(1..=steps);
            let eps = (0..pixels).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            SampleDraw { baseline_branch, t, eps }
        })
        .collect()
}

/// Forward pass and gradients of the batch objective for the given draws.
/// Generic so the identical computation can be verified in `f64`.
pub fn batch_gradients<T: Real>(
    params: &ModelParameters<T>,
    batch: &[&PairSample],
    draws: &[SampleDraw],
    sched: &NoiseSchedule,
    lambdas: LossWeights,
) -> Result<(Vec<LossBreakdown>, Vec<Option<Vec<T>>>)> {
    let cfg = &params.config;
    let n = batch.len();
    let size = cfg.image_size;
    let px = size * size;
    let net = Net::new(params);
    let mut g = net.graph();

    let xb: Vec<_> = batch.iter().map(|s| &s.x_b).collect();
    let x_b = g.input(image_batch::<T>(&xb, size)?);
    let attrs: Vec<T> = batch.iter().flat_map(|s| s.attrs.concat()).map(|v| T::of(v as f64)).collect();
    let attrs = g.input(Tensor::new(vec![n, cfg.attr_dim()], attrs));

    let mut masks = Vec::with_capacity(n);
    let mut x_t = Vec::with_capacity(n * px);
    let mut buf = vec![0.0f32; px];
    for (s, d) in batch.iter().zip(draws) {
        let target = if d.baseline_branch { &s.x_b } else { &s.x_f };
        diffuse_slice(&target.pixels, &d.eps, sched.alpha_at(d.t)?, &mut buf);
        x_t.extend(buf.iter().map(|&v| T::of(v as f64)));
        masks.push(if d.baseline_branch { None } else { Some(build_progression_mask(&s.x_b, &s.x_f, &cfg.tap_shapes())?) });
    }
    let x_t = g.input(Tensor::new(vec![n, 1, size, size], x_t));

    let z_b = net.encoder(&mut g, x_b);
    let z_prime = net.condition(&mut g, attrs);
    let factors: Vec<T> = draws.iter().map(|d| if d.baseline_branch { T::zero() } else { T::one() }).collect();
    let masked = {
        let dp = cfg.d_prime;
        let v: Vec<T> = g.value(z_prime).iter().enumerate().map(|(i, &x)| x * factors[i / dp]).collect();
        g.custom(&[z_prime], vec![n, dp], v, Box::new(RowScale { factors }))
    };
    let z = g.prefix_add(z_b, masked);
    let t: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let out = net.denoiser(&mut g, x_t, &t, z);
    let attention: Vec<_> = (0..SUPERVISED_TAPS)
        .map(|l| attention_node(&net, &mut g, z_prime, out.decoder_layers[l], l))
        .collect();

    let terms: Vec<SampleTerms> = batch
        .iter()
        .zip(draws)
        .zip(&masks)
        .map(|((s, d), m)| SampleTerms {
            target: if d.baseline_branch { &s.x_b.pixels } else { &s.x_f.pixels },
            mask: m.as_ref(),
            attention: !d.baseline_branch,
        })
        .collect();
    let loss = batch_loss(&mut g, &attention, out.x0_hat, &terms, lambdas);
    let grads = g.backward(loss.total).params(params.len());
    Ok((loss.per_sample, grads))
}

fn batch_mean(per_sample: &[LossBreakdown], lambdas: LossWeights) -> LossBreakdown {
    let n = per_sample.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    LossBreakdown::new(
        mean(|b| b.l_attn_imax),
        mean(|b| b.l_attn_align),
        mean(|b| b.l_mse),
        lambdas,
        per_sample.iter().any(|b| b.skipped_alignment),
    )
}

fn check_finite(b: &LossBreakdown, step: u64) -> Result<()> {
    for (name, v) in [("l_mse", b.l_mse), ("l_attn_align", b.l_attn_align), ("l_attn_imax", b.l_attn_imax), ("total", b.total)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite {name} ({v}) at step {step}")));
        }
    }
    Ok(())
}

/// Draws noise for `batch`, computes the batch-mean objective and applies
/// one Adam step.
pub fn train_step(
    batch: &[&PairSample],
    state: &mut TrainState,
    sched: &NoiseSchedule,
    config: &Config,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let px = config.model.image_size * config.model.image_size;
    let draws = draw_samples(&mut state.rng, batch.len(), px, sched.steps, config.train.baseline_branch_fraction);
    let (per_sample, grads) = batch_gradients(&state.params, batch, &draws, sched, config.loss)?;
    let breakdown = batch_mean(&per_sample, config.loss);
    check_finite(&breakdown, state.global_step + 1)?;
    state.adam.update(&mut state.params, &grads, config.train.learning_rate);
    state.global_step += 1;
    Ok(StepReport {
        breakdown,
        skipped_alignment: per_sample.iter().filter(|b| b.skipped_alignment).count(),
        baseline_branch: draws.iter().filter(|d| d.baseline_branch).count(),
        per_sample,
    })
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Full training run writing checkpoints and `train_log.jsonl` under
/// `out_dir`. With `resume`, continues from that checkpoint's epoch.
pub fn train(pairs: &[PairSample], config: &Config, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let sched = config.diffusion.schedule()?;
    let mut state = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.into_state()?
        }
        None => TrainState::new(config)?,
    };
    if state.params.config != config.model {
        return Err(Error::Config("model section differs from the resumed checkpoint".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let max_steps = config.train.max_steps.unwrap_or(u64::MAX);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    while state.epoch < config.train.epochs && state.global_step < max_steps {
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut sums = [0.0f64; 3];
        let (mut samples, mut skipped, mut baseline, mut steps) = (0usize, 0usize, 0usize, 0u64);
        for chunk in order.chunks(config.train.batch_size) {
            if state.global_step >= max_steps {
                break;
            }
            let batch: Vec<&PairSample> = chunk.iter().map(|&i| &pairs[i]).collect();
            let r = train_step(&batch, &mut state, &sched, config)?;
            for b in &r.per_sample {
                sums[0] += b.l_mse;
                sums[1] += b.l_attn_align;
                sums[2] += b.l_attn_imax;
            }
            samples += r.per_sample.len();
            skipped += r.skipped_alignment;
            baseline += r.baseline_branch;
            steps += 1;
        }
        state.epoch += 1;
        let n = samples.max(1) as f64;
        let lw = config.loss;
        let (mse, align, imax) = (sums[0] / n, sums[1] / n, sums[2] / n);
        let record = EpochRecord {
            epoch: state.epoch,
            l_mse: mse,
            l_attn_align: align,
            l_attn_imax: imax,
            total: lw.combine(imax, align, mse),
            skipped_alignment_count: skipped,
            baseline_branch_count: baseline,
            samples,
            steps,
            lambda_imax: lw.lambda_imax,
            lambda_align: lw.lambda_align,
            lambda_mse: lw.lambda_mse,
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        state.history.push(record);
        let interval = config.train.checkpoint_interval;
        if interval > 0 && state.epoch % interval == 0 && state.epoch < config.train.epochs {
            save_checkpoint(&state, config, &out_dir.join(format!("epoch-{:04}", state.epoch)))?;
        }
    }
    let final_checkpoint = out_dir.join("final");
    save_checkpoint(&state, config, &final_checkpoint)?;
    Ok(TrainOutcome { state, final_checkpoint, log_path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub epoch: usize,
    pub global_step: u64,
    pub adam_step: u64,
    pub rng: RngState,
    pub config: Config,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ModelParameters<f32>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn into_state(self) -> Result<TrainState> {
        let adam = self.adam.unwrap_or_else(|| AdamState::new(&self.params));
        Ok(TrainState {
            rng: self.manifest.rng.restore()?,
            epoch: self.manifest.epoch,
            global_step: self.manifest.global_step,
            history: self.manifest.history,
            params: self.params,
            adam,
        })
    }
}

/// Writes named `f32` arrays in the `ACKP` container.
pub fn encode_arrays(arrays: &[(String, &[usize], &[f32])]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, shape, data) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape.iter() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_arrays(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::format(path, format!("truncated: needed {} bytes at offset {pos}, file has {}", n, bytes.len())));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != PARAM_MAGIC {
        return Err(Error::format(path, "bad magic (expected \"ACKP\")"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| Error::format(path, "array name is not UTF-8"))?;
        let ndim = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32_at(take(4)?));
        }
        let n: usize = shape.iter().product();
        let data = take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)));
    }
    if pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

/// Writes `manifest.toml` and `params.ackp` (parameters plus Adam moments)
/// into the directory `path`.
pub fn save_checkpoint(state: &TrainState, config: &Config, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        epoch: state.epoch,
        global_step: state.global_step,
        adam_step: state.adam.step,
        rng: RngState::capture(&state.rng),
        config: config.clone(),
        history: state.history.iter().rev().take(HISTORY_TAIL).rev().cloned().collect(),
    };
    let mut arrays: Vec<(String, &[usize], &[f32])> =
        state.params.iter().map(|(n, t)| (n.to_string(), t.shape.as_slice(), t.data.as_slice())).collect();
    for (i, (n, t)) in state.params.iter().enumerate() {
        arrays.push((format!("adam.m.{n}"), t.shape.as_slice(), state.adam.m[i].as_slice()));
        arrays.push((format!("adam.v.{n}"), t.shape.as_slice(), state.adam.v[i].as_slice()));
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::format(path, e.to_string()))?;
    let mp = path.join(MANIFEST_FILE);
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    let pp = path.join(PARAMS_FILE);
    fs::write(&pp, encode_arrays(&arrays)).map_err(|e| Error::io(&pp, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mp = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let raw: toml::Value = toml::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    let version = raw.get("version").and_then(|v| v.as_integer()).ok_or_else(|| Error::format(&mp, "missing version"))?;
    if version != CHECKPOINT_VERSION as i64 {
        return Err(Error::Version { what: "checkpoint", found: version as u32, expected: CHECKPOINT_VERSION });
    }
    let manifest: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    let pp = path.join(PARAMS_FILE);
    let bytes = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    let arrays = decode_arrays(&pp, &bytes)?;
    let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for (name, t) in arrays {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            m.push((rest.to_string(), t.data));
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            v.push((rest.to_string(), t.data));
        } else {
            params.push((name, t));
        }
    }
    let params = ModelParameters::from_entries(manifest.config.model.clone(), params)
        .map_err(|e| Error::format(&pp, e.to_string()))?;
    let adam = if m.is_empty() && v.is_empty() {
        None
    } else {
        let names = params.names();
        let ordered = |xs: &[(String, Vec<f32>)]| xs.iter().map(|x| &x.0).eq(names.iter());
        if !ordered(&m) || !ordered(&v) {
            return Err(Error::format(&pp, "optimizer moments do not match the parameter list"));
        }
        Some(AdamState { step: manifest.adam_step, m: m.into_iter().map(|x| x.1).collect(), v: v.into_iter().map(|x| x.1).collect() })
    };
    Ok(Checkpoint { manifest, params, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageGrid;
    use crate::networks::{ArchConfig, DiseaseState, ProgressionAttributes};

    pub(crate) fn toy_config() -> Config {
        let mut c = Config::default();
        c.model = ArchConfig {
            image_size: 8,
            base_channels: 4,
            d: 8,
            d_prime: 3,
            age_bins: 4,
            norm_groups: 2,
            time_embed_dim: 6,
            cond_hidden: 5,
            ..ArchConfig::default()
        };
        c.data.image_size = 8;
        c.diffusion.steps = 50;
        c.inference.sample_steps = 5;
        c.train.batch_size = 4;
        c.train.learning_rate = 1e-3;
        c
    }

    fn pair(seed: u64, identical: bool) -> PairSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xb: Vec<f32> = (0..64).map(|_| rng.gen::<f32>()).collect();
        let xf: Vec<f32> = if identical { xb.clone() } else { xb.iter().map(|v| (v * 0.8 + 0.1).min(1.0)).collect() };
        PairSample {
            x_b: ImageGrid::new(8, 8, xb).unwrap(),
            x_f: ImageGrid::new(8, 8, xf).unwrap(),
            attrs: ProgressionAttributes::new((seed % 4) as usize, 4, DiseaseState::ALL[(seed % 3) as usize]).unwrap(),
            disease_state: DiseaseState::ALL[(seed % 3) as usize],
            subject_id: format!("s{seed}"),
            slice_index: 0,
            baseline_age: 70.0,
            follow_up_age: 72.0,
        }
    }

    #[test]
    fn ablated_weights_make_total_equal_mse() {
        let mut c = toy_config();
        c.loss = LossWeights { lambda_imax: 0.0, lambda_align: 0.0, lambda_mse: 1.0 };
        c.train.baseline_branch_fraction = 0.0;
        let pairs: Vec<_> = (0..4).map(|s| pair(s, false)).collect();
        let batch: Vec<_> = pairs.iter().collect();
        let mut st = TrainState::new(&c).unwrap();
        let sched = c.diffusion.schedule().unwrap();
        for _ in 0..3 {
            let r = train_step(&batch, &mut st, &sched, &c).unwrap();
            assert_eq!(r.breakdown.total, r.breakdown.l_mse);
            assert_eq!(r.baseline_branch, 0);
        }
    }

    #[test]
    fn identical_pairs_are_counted_not_fatal() {
        let mut c = toy_config();
        c.train.baseline_branch_fraction = 0.0;
        let pairs = vec![pair(1, true), pair(2, false), pair(3, true)];
        let batch: Vec<_> = pairs.iter().collect();
        let mut st = TrainState::new(&c).unwrap();
        let r = train_step(&batch, &mut st, &c.diffusion.schedule().unwrap(), &c).unwrap();
        assert_eq!(r.skipped_alignment, 2);
        assert!(r.per_sample[0].skipped_alignment && !r.per_sample[1].skipped_alignment);
        assert_eq!(r.per_sample[0].l_attn_align, 0.0);
        assert!(r.breakdown.is_finite());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _: [u64; 7] = rng.gen();
        let s = RngState::capture(&rng);
        let mut back = s.restore().unwrap();
        assert_eq!(rng.gen::<u64>(), back.gen::<u64>());
    }

    #[test]
    fn container_rejects_corruption() {
        let data = [1.0f32, 2.0, 3.0];
        let bytes = encode_arrays(&[("a".into(), &[3], &data)]);
        let p = Path::new("x.ackp");
        assert_eq!(decode_arrays(p, &bytes).unwrap()[0].1.data, data);
        assert!(decode_arrays(p, &bytes[..bytes.len() - 1]).unwrap_err().to_string().contains("truncated"));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(decode_arrays(p, &bad).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn checkpoint_round_trip_and_version_guard() {
        let c = toy_config();
        let pairs: Vec<_> = (0..4).map(|s| pair(s, false)).collect();
        let batch: Vec<_> = pairs.iter().collect();
        let mut st = TrainState::new(&c).unwrap();
        train_step(&batch, &mut st, &c.diffusion.schedule().unwrap(), &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&st, &c, dir.path()).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.params, st.params);
        assert_eq!(ck.adam.as_ref().unwrap(), &st.adam);
        assert_eq!(ck.manifest.config, c);
        let mut rs = ck.into_state().unwrap();
        assert_eq!(rs.rng.gen::<u64>(), st.rng.gen::<u64>());

        let mp = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).unwrap().replace("version = 1", "version = 7");
        fs::write(&mp, text).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Version { found: 7, expected: 1, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
