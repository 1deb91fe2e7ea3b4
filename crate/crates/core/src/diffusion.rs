//! Noise schedules, the forward noising process and the deterministic
//! (zero-variance) reverse step driven by a clean-image prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Cumulative signal coefficients `alpha[t]` for `t = 0..=T`, with
/// `alpha[0] = 1` and strictly decreasing afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub name: String,
    pub steps: usize,
    pub alpha: Vec<f64>,
}

/// A reverse transition `t_from → t_to` with `t_to < t_from`. Non-adjacent
/// pairs implement strided sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepIndexPair {
    t_from: usize,
    t_to: usize,
}

impl StepIndexPair {
    pub fn new(t_from: usize, t_to: usize, sched: &NoiseSchedule) -> Result<Self> {
        if t_from == 0 || t_from > sched.steps {
            return Err(Error::InvalidArgument(format!(
                "t_from {t_from} outside [1, {}]",
                sched.steps
            )));
        }
        if t_to >= t_from {
            return Err(Error::InvalidArgument(format!("t_to {t_to} must be below t_from {t_from}")));
        }
        Ok(Self { t_from, t_to })
    }

    pub fn t_from(&self) -> usize {
        self.t_from
    }

    pub fn t_to(&self) -> usize {
        self.t_to
    }
}

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

pub fn make_schedule(name: &str, steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    let betas: Vec<f64> = match name {
        "linear" => (0..steps)
            .map(|i| {
                if steps == 1 {
                    LINEAR_BETA_START
                } else {
                    LINEAR_BETA_START
                        + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        "cosine" => {
            let f = |t: usize| {
                let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-12, COSINE_MAX_BETA)).collect()
        }
        other => return Err(Error::InvalidArgument(format!("unknown schedule '{other}'"))),
    };
    let mut alpha = Vec::with_capacity(steps + 1);
    alpha.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha.push(acc);
    }
    Ok(NoiseSchedule { name: name.to_string(), steps, alpha })
}

impl NoiseSchedule {
    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        self.alpha
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("t = {t} outside [0, {}]", self.steps)))
    }
}

/// `√α·x0 + √(1−α)·ε`, elementwise.
pub fn diffuse_slice(x0: &[f32], eps: &[f32], alpha: f64, out: &mut [f32]) {
    let a = alpha.sqrt();
    let s = (1.0 - alpha).sqrt();
    for ((o, &x), &e) in out.iter_mut().zip(x0).zip(eps) {
        *o = (a * x as f64 + s * e as f64) as f32;
    }
}

/// Mean of the reverse transition given the clean-image estimate.
pub fn ddim_step_slice(x_t: &[f32], x0_hat: &[f32], alpha_from: f64, alpha_to: f64, out: &mut [f32]) {
    let sa_from = alpha_from.sqrt();
    let noise_scale = (1.0 - alpha_to).sqrt() / (1.0 - alpha_from).sqrt();
    let sa_to = alpha_to.sqrt();
    for ((o, &xt), &x0) in out.iter_mut().zip(x_t).zip(x0_hat) {
        let (xt, x0) = (xt as f64, x0 as f64);
        *o = (sa_to * x0 + noise_scale * (xt - sa_from * x0)) as f32;
    }
}

pub fn forward_diffuse(x0: &ImageGrid, t: usize, eps: &ImageGrid, sched: &NoiseSchedule) -> Result<ImageGrid> {
    x0.ensure_same_shape(eps)?;
    let alpha = sched.alpha_at(t)?;
    let mut pixels = vec![0.0; x0.pixels.len()];
    diffuse_slice(&x0.pixels, &eps.pixels, alpha, &mut pixels);
    Ok(ImageGrid { h: x0.h, w: x0.w, pixels, clean: false })
}

pub fn ddim_reverse_step(
    x_t: &ImageGrid,
    x0_hat: &ImageGrid,
    pair: StepIndexPair,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    x_t.ensure_same_shape(x0_hat)?;
    let alpha_from = sched.alpha_at(pair.t_from)?;
    let alpha_to = sched.alpha_at(pair.t_to)?;
    if alpha_from >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha[{}] = 1 leaves no noise to remove",
            pair.t_from
        )));
    }
    let mut pixels = vec![0.0; x_t.pixels.len()];
    ddim_step_slice(&x_t.pixels, &x0_hat.pixels, alpha_from, alpha_to, &mut pixels);
    Ok(ImageGrid { h: x_t.h, w: x_t.w, pixels, clean: false })
}

/// Uniform-stride decreasing timesteps `T = t_0 > t_1 > … > t_{T_s} = 0`.
pub fn inference_timesteps(steps: usize, sample_steps: usize) -> Result<Vec<usize>> {
    if sample_steps < 1 || sample_steps > steps {
        return Err(Error::InvalidArgument(format!(
            "sampling steps {sample_steps} outside [1, {steps}]"
        )));
    }
    Ok((0..=sample_steps).map(|i| steps * (sample_steps - i) / sample_steps).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f32, hi: f32) -> ImageGrid {
        ImageGrid::new(h, w, (0..h * w).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn linear_single_step() {
        let s = make_schedule("linear", 1).unwrap();
        assert_eq!(s.alpha, vec![1.0, 1.0 - 1e-4]);
    }

    #[test]
    fn linear_thousand_steps_reaches_noise() {
        let s = make_schedule("linear", 1000).unwrap();
        // Independent evaluation of the cumulative product.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha[1000] - prod).abs() < 1e-15);
        assert!(s.alpha[1000] < 1e-3);
    }

    #[test]
    fn schedules_are_strictly_decreasing() {
        for name in ["linear", "cosine"] {
            for steps in [1, 2, 10, 100, 1000] {
                let s = make_schedule(name, steps).unwrap();
                assert_eq!(s.alpha[0], 1.0);
                assert_eq!(s.alpha.len(), steps + 1);
                assert!(s.alpha.windows(2).all(|w| w[1] < w[0]), "{name} {steps}");
                assert!(s.alpha[steps] > 0.0);
            }
        }
    }

    #[test]
    fn schedule_errors() {
        assert!(make_schedule("sigmoid", 10).is_err());
        assert!(make_schedule("linear", 0).is_err());
    }

    #[test]
    fn forward_diffuse_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = random_image(&mut rng, 4, 4, 0.0, 1.0);
        let eps = random_image(&mut rng, 4, 4, -2.0, 2.0);
        let s = make_schedule("linear", 10).unwrap();
        assert_eq!(forward_diffuse(&x0, 0, &eps, &s).unwrap().pixels, x0.pixels);

        let quarter = NoiseSchedule { name: "test".into(), steps: 2, alpha: vec![1.0, 0.25, 0.0] };
        let ones = ImageGrid::filled(3, 3, 1.0);
        let out = forward_diffuse(&ones, 1, &ones, &quarter).unwrap();
        for v in out.pixels {
            assert!((v - 1.366_025_4).abs() < 1e-6);
        }
        assert_eq!(forward_diffuse(&x0, 2, &eps, &quarter).unwrap().pixels, eps.pixels);
        assert!(forward_diffuse(&x0, 11, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 1, &ImageGrid::zeros(2, 2), &s).is_err());
    }

    #[test]
    fn reverse_step_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = make_schedule("linear", 50).unwrap();
        let x_t = random_image(&mut rng, 3, 5, -2.0, 2.0);
        let x0 = random_image(&mut rng, 3, 5, 0.0, 1.0);
        // alpha[t_to] = 1: the estimate itself.
        let p = StepIndexPair::new(7, 0, &s).unwrap();
        assert_eq!(ddim_reverse_step(&x_t, &x0, p, &s).unwrap().pixels, x0.pixels);
        // Zero estimate: pure rescaling of x_t.
        let p = StepIndexPair::new(30, 12, &s).unwrap();
        let zero = ImageGrid::zeros(3, 5);
        let out = ddim_reverse_step(&x_t, &zero, p, &s).unwrap();
        let k = ((1.0 - s.alpha[12]) / (1.0 - s.alpha[30])).sqrt();
        for (o, x) in out.pixels.iter().zip(&x_t.pixels) {
            assert!((*o as f64 - k * *x as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn reverse_step_with_true_estimate_rediffuses_to_target_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = make_schedule("cosine", 100).unwrap();
        for _ in 0..20 {
            let x0 = random_image(&mut rng, 4, 4, 0.0, 1.0);
            let eps = random_image(&mut rng, 4, 4, -3.0, 3.0);
            let from = rng.gen_range(1..=100);
            let to = rng.gen_range(0..from);
            let x_t = forward_diffuse(&x0, from, &eps, &s).unwrap();
            let out = ddim_reverse_step(&x_t, &x0, StepIndexPair::new(from, to, &s).unwrap(), &s).unwrap();
            // Evaluate the substituted closed form directly.
            for i in 0..16 {
                let want = s.alpha[to].sqrt() * x0.pixels[i] as f64
                    + (1.0 - s.alpha[to]).sqrt() * eps.pixels[i] as f64;
                assert!((out.pixels[i] as f64 - want).abs() < 1e-4, "{from}->{to}");
            }
        }
    }

    #[test]
    fn reverse_step_rejects_bad_input() {
        let s = make_schedule("linear", 10).unwrap();
        assert!(StepIndexPair::new(0, 0, &s).is_err());
        assert!(StepIndexPair::new(5, 5, &s).is_err());
        assert!(StepIndexPair::new(11, 3, &s).is_err());
        let flat = NoiseSchedule { name: "flat".into(), steps: 1, alpha: vec![1.0, 1.0] };
        let p = StepIndexPair::new(1, 0, &flat).unwrap();
        let x = ImageGrid::zeros(2, 2);
        assert!(ddim_reverse_step(&x, &x, p, &flat).is_err());
    }

    #[test]
    fn full_chain_with_oracle_estimate_recovers_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = make_schedule("linear", 1000).unwrap();
        let x0 = random_image(&mut rng, 8, 8, 0.0, 1.0);
        let mut x = random_image(&mut rng, 8, 8, -3.0, 3.0);
        for t in (1..=1000).rev() {
            x = ddim_reverse_step(&x, &x0, StepIndexPair::new(t, t - 1, &s).unwrap(), &s).unwrap();
        }
        let err = x.pixels.iter().zip(&x0.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1e-5, "max abs error {err}");
    }

    #[test]
    fn timestep_subsequence_contract() {
        for (steps, n) in [(1000, 100), (1000, 1), (7, 7), (10, 3), (1000, 999)] {
            let ts = inference_timesteps(steps, n).unwrap();
            assert_eq!(ts.len(), n + 1);
            assert_eq!(ts[0], steps);
            assert_eq!(*ts.last().unwrap(), 0);
            assert!(ts.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(inference_timesteps(10, 0).is_err());
        assert!(inference_timesteps(10, 11).is_err());
    }

    proptest! {
        #[test]
        fn forward_diffuse_is_linear(a in -3.0f32..3.0, t in 0usize..=20, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = make_schedule("linear", 20).unwrap();
            let x0 = random_image(&mut rng, 3, 3, 0.0, 1.0);
            let eps = random_image(&mut rng, 3, 3, -2.0, 2.0);
            let scale = |g: &ImageGrid| ImageGrid { pixels: g.pixels.iter().map(|v| v * a).collect(), ..g.clone() };
            let lhs = forward_diffuse(&scale(&x0), t, &scale(&eps), &s).unwrap();
            let rhs = forward_diffuse(&x0, t, &eps, &s).unwrap();
            for (l, r) in lhs.pixels.iter().zip(&rhs.pixels) {
                prop_assert!((l - a * r).abs() <= 1e-5 * (1.0 + r.abs() * a.abs()));
            }
        }
    }
}
