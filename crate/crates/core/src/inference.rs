//! Follow-up synthesis by deterministic iterative denoising, baseline
//! reconstruction, and attention-map extraction for analysis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alignment::attention_node;
use crate::diffusion::{ddim_step_slice, diffuse_slice, inference_timesteps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::networks::{
    compose_follow_up_latent, encode_condition, encode_semantic, image_batch, AttentionTap, ConditionVector,
    LatentVector, ModelParameters, Net, ProgressionAttributes,
};
use crate::tensor::Tensor;

/// Standard-normal image drawn from `(seed, stream)`.
pub fn seeded_noise(h: usize, w: usize, seed: u64, stream: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Runs the reverse chain for a batch of latents; item `i` starts from the
/// noise of `(seed, streams[i])`. Items are processed independently, so a
/// batch gives the same bits as running each item alone.
pub fn sample_batch(
    latents: &[LatentVector],
    streams: &[u64],
    params: &ModelParameters<f32>,
    sched: &NoiseSchedule,
    sample_steps: usize,
    seed: u64,
) -> Result<Vec<ImageGrid>> {
    let cfg = &params.config;
    if sample_steps == 0 || sample_steps > sched.steps {
        return Err(Error::InvalidArgument(format!("sample_steps {sample_steps} outside [1, {}]", sched.steps)));
    }
    if latents.len() != streams.len() {
        return Err(Error::ShapeMismatch("one noise stream per latent required".into()));
    }
    if let Some(z) = latents.iter().find(|z| z.values.len() != cfg.d) {
        return Err(Error::ShapeMismatch(format!("latent has {} values, model expects {}", z.values.len(), cfg.d)));
    }
    let n = latents.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let size = cfg.image_size;
    let px = size * size;
    let mut x: Vec<f32> = streams.iter().flat_map(|&s| seeded_noise(size, size, seed, s)).collect();
    let z: Vec<f32> = latents.iter().flat_map(|z| z.values.iter().copied()).collect();
    let ts = inference_timesteps(sched.steps, sample_steps)?;
    let net = Net::new(params);
    let mut x0 = vec![0.0f32; n * px];
    for pair in ts.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let mut g = net.graph();
        let xt = g.input(Tensor::new(vec![n, 1, size, size], x.clone()));
        let zn = g.input(Tensor::new(vec![n, cfg.d], z.clone()));
        let out = net.denoiser(&mut g, xt, &vec![t; n], zn);
        x0.copy_from_slice(g.value(out.x0_hat));
        let (a_from, a_to) = (sched.alpha_at(t)?, sched.alpha_at(t_next)?);
        let mut next = vec![0.0f32; n * px];
        for i in 0..n {
            let r = i * px..(i + 1) * px;
            ddim_step_slice(&x[r.clone()], &x0[r.clone()], a_from, a_to, &mut next[r]);
        }
        x = next;
    }
    Ok(x0.chunks(px).map(|p| ImageGrid::new(size, size, p.to_vec()).map(|g| g.clamped(0.0, 1.0))).collect::<Result<_>>()?)
}

pub fn follow_up_latent(
    x_b: &ImageGrid,
    attrs: &ProgressionAttributes,
    params: &ModelParameters<f32>,
) -> Result<(LatentVector, ConditionVector)> {
    let z_b = encode_semantic(x_b, params)?;
    let z_prime = encode_condition(attrs, params)?;
    Ok((compose_follow_up_latent(&z_b, &z_prime)?, z_prime))
}

pub fn synthesize_follow_up(
    x_b: &ImageGrid,
    attrs: &ProgressionAttributes,
    params: &ModelParameters<f32>,
    sched: &NoiseSchedule,
    sample_steps: usize,
    seed: u64,
) -> Result<ImageGrid> {
    let (z_f, _) = follow_up_latent(x_b, attrs, params)?;
    Ok(sample_batch(&[z_f], &[0], params, sched, sample_steps, seed)?.remove(0))
}

pub fn reconstruct_baseline(
    x_b: &ImageGrid,
    params: &ModelParameters<f32>,
    sched: &NoiseSchedule,
    sample_steps: usize,
    seed: u64,
) -> Result<ImageGrid> {
    let z_b = encode_semantic(x_b, params)?;
    Ok(sample_batch(&[z_b], &[0], params, sched, sample_steps, seed)?.remove(0))
}

/// Synthesizes every slice of a baseline volume in batches of
/// `batch` slices; slice `c` uses noise stream `c`.
pub fn synthesize_slices(
    slices: &[ImageGrid],
    attrs: &ProgressionAttributes,
    params: &ModelParameters<f32>,
    sched: &NoiseSchedule,
    sample_steps: usize,
    seed: u64,
    batch: usize,
) -> Result<Vec<ImageGrid>> {
    let cfg = &params.config;
    let z_prime = encode_condition(attrs, params)?;
    let net = Net::new(params);
    let mut out = Vec::with_capacity(slices.len());
    for (k, chunk) in slices.chunks(batch.max(1)).enumerate() {
        if let Some(s) = chunk.iter().find(|s| !s.clean) {
            return Err(Error::InvalidArgument(format!("baseline slice of size {}x{} is not a clean image", s.h, s.w)));
        }
        let mut g = net.graph();
        let refs: Vec<&ImageGrid> = chunk.iter().collect();
        let x = g.input(image_batch(&refs, cfg.image_size)?);
        let zb = net.encoder(&mut g, x);
        let latents: Vec<LatentVector> = g
            .value(zb)
            .chunks(cfg.d)
            .map(|v| compose_follow_up_latent(&LatentVector { values: v.to_vec() }, &z_prime))
            .collect::<Result<_>>()?;
        let streams: Vec<u64> = (0..chunk.len()).map(|i| (k * batch.max(1) + i) as u64).collect();
        out.extend(sample_batch(&latents, &streams, params, sched, sample_steps, seed)?);
    }
    Ok(out)
}

/// Cross-attention at every decoder layer for one denoising pass at step
/// `t` on the forward-diffused baseline.
pub fn attention_taps(
    x_b: &ImageGrid,
    attrs: &ProgressionAttributes,
    params: &ModelParameters<f32>,
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<Vec<AttentionTap>> {
    let cfg = &params.config;
    if t == 0 || t > sched.steps {
        return Err(Error::InvalidArgument(format!("attention step {t} outside [1, {}]", sched.steps)));
    }
    let (z_f, z_prime) = follow_up_latent(x_b, attrs, params)?;
    let size = cfg.image_size;
    let eps = seeded_noise(size, size, seed, 0);
    let mut xt = vec![0.0; size * size];
    diffuse_slice(&x_b.pixels, &eps, sched.alpha_at(t)?, &mut xt);
    let net = Net::new(params);
    let mut g = net.graph();
    let x = g.input(Tensor::new(vec![1, 1, size, size], xt));
    let z = g.input(Tensor::new(vec![1, cfg.d], z_f.values));
    let zp = g.input(Tensor::new(vec![1, cfg.d_prime], z_prime.values));
    let out = net.denoiser(&mut g, x, &[t], z);
    let mut taps = Vec::with_capacity(out.decoder_layers.len());
    for (l, &node) in out.decoder_layers.iter().enumerate() {
        let a = attention_node(&net, &mut g, zp, node, l);
        let s = g.shape(node).to_vec();
        taps.push(AttentionTap {
            layer_index: l,
            d_k: s[1],
            h: s[2],
            w: s[3],
            features: g.value(node).to_vec(),
            attention: Some(g.value(a).to_vec()),
        });
    }
    Ok(taps)
}

/// Mean over the `d′` rows of a filled tap, as an `h × w` image.
pub fn channel_mean(tap: &AttentionTap) -> Result<Vec<f32>> {
    let a = tap.attention.as_ref().ok_or_else(|| Error::InvalidArgument("tap has no attention".into()))?;
    let s = tap.s();
    let rows = a.len() / s;
    let mut out = vec![0.0f32; s];
    for row in a.chunks(s) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v / rows as f32;
        }
    }
    Ok(out)
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(v: &[f32]) -> Vec<f32> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn bilinear_resize(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let p = |yy: usize, xx: usize| src[yy * w + xx] as f64;
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// Channel-averaged, min-max normalised attention of decoder layer
/// `layer_index`, upsampled to the image size.
pub fn extract_attention_map(
    x_b: &ImageGrid,
    attrs: &ProgressionAttributes,
    params: &ModelParameters<f32>,
    sched: &NoiseSchedule,
    t: usize,
    layer_index: usize,
    seed: u64,
) -> Result<ImageGrid> {
    let layers = params.config.decoder_layers();
    if layer_index >= layers {
        return Err(Error::InvalidArgument(format!("layer {layer_index} outside 0..{layers}")));
    }
    let taps = attention_taps(x_b, attrs, params, sched, t, seed)?;
    let tap = &taps[layer_index];
    let map = min_max_normalize(&channel_mean(tap)?);
    let size = params.config.image_size;
    let up = bilinear_resize(&map, tap.h, tap.w, size, size);
    Ok(ImageGrid::new(size, size, up)?.clamped(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::networks::{denoise, init_parameters, ArchConfig, DiseaseState};

    fn toy() -> ModelParameters<f32> {
        let cfg = ArchConfig {
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
        let mut p = init_parameters(&cfg, 21).unwrap();
        p.get_mut("unet.out.w").data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i as f32) * 0.7).sin() * 0.2);
        p.get_mut("unet.out.b").data[0] = 0.4;
        p
    }

    fn img(seed: u64) -> ImageGrid {
        let p: Vec<f32> = seeded_noise(8, 8, seed, 9).iter().map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0)).collect();
        ImageGrid::new(8, 8, p).unwrap()
    }

    #[test]
    fn synthesis_is_deterministic_and_in_range() {
        let p = toy();
        let s = make_schedule("linear", 40).unwrap();
        let a = ProgressionAttributes::new(1, 4, DiseaseState::Ad).unwrap();
        let x = synthesize_follow_up(&img(1), &a, &p, &s, 8, 3).unwrap();
        assert_eq!(x, synthesize_follow_up(&img(1), &a, &p, &s, 8, 3).unwrap());
        assert!(x.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(x, synthesize_follow_up(&img(1), &a, &p, &s, 8, 4).unwrap());
        assert!(synthesize_follow_up(&img(1), &a, &p, &s, 0, 3).is_err());
        assert!(synthesize_follow_up(&img(1), &a, &p, &s, 41, 3).is_err());
    }

    #[test]
    fn single_step_chain_is_one_clamped_denoise() {
        let p = toy();
        let s = make_schedule("linear", 40).unwrap();
        let a = ProgressionAttributes::new(2, 4, DiseaseState::Cn).unwrap();
        let (z_f, _) = follow_up_latent(&img(2), &a, &p).unwrap();
        let x_t = ImageGrid { h: 8, w: 8, pixels: seeded_noise(8, 8, 5, 0), clean: false };
        let (x0, _) = denoise(&x_t, 40, &z_f, 40, &p).unwrap();
        let got = synthesize_follow_up(&img(2), &a, &p, &s, 1, 5).unwrap();
        assert_eq!(got, x0.clamped(0.0, 1.0));
    }

    #[test]
    fn zero_init_model_reconstructs_zero() {
        let cfg = toy().config;
        let p = init_parameters(&cfg, 1).unwrap();
        let s = make_schedule("linear", 40).unwrap();
        let x = reconstruct_baseline(&img(3), &p, &s, 1, 0).unwrap();
        assert!(x.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_slices_match_individual_synthesis() {
        let p = toy();
        let s = make_schedule("cosine", 30).unwrap();
        let a = ProgressionAttributes::new(3, 4, DiseaseState::Mci).unwrap();
        let slices: Vec<ImageGrid> = (0..5).map(img).collect();
        let batched = synthesize_slices(&slices, &a, &p, &s, 4, 11, 3).unwrap();
        for (c, sl) in slices.iter().enumerate() {
            let (z, _) = follow_up_latent(sl, &a, &p).unwrap();
            let one = sample_batch(&[z], &[c as u64], &p, &s, 4, 11).unwrap().remove(0);
            assert_eq!(one, batched[c]);
        }
    }

    #[test]
    fn attention_map_contract() {
        let mut p = toy();
        let s = make_schedule("linear", 40).unwrap();
        let a = ProgressionAttributes::new(0, 4, DiseaseState::Ad).unwrap();
        for layer in 0..4 {
            let m = extract_attention_map(&img(4), &a, &p, &s, 20, layer, 0).unwrap();
            assert_eq!((m.h, m.w), (8, 8));
            assert!(m.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(m, extract_attention_map(&img(4), &a, &p, &s, 20, layer, 0).unwrap());
        }
        assert!(extract_attention_map(&img(4), &a, &p, &s, 20, 4, 0).is_err());
        for l in 0..4 {
            p.get_mut(&format!("attn.q{l}.w")).data.iter_mut().for_each(|v| *v = 0.0);
            p.get_mut(&format!("attn.q{l}.b")).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let m = extract_attention_map(&img(4), &a, &p, &s, 20, 3, 0).unwrap();
        assert!(m.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_and_normalize_examples() {
        assert_eq!(min_max_normalize(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
        let up = bilinear_resize(&[0.0, 1.0, 0.0, 1.0], 2, 2, 4, 4);
        assert_eq!(&up[0..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(bilinear_resize(&[0.3; 4], 2, 2, 8, 8), vec![0.3f32; 64].iter().map(|&v| (v as f64) as f32).collect::<Vec<_>>());
    }
}
