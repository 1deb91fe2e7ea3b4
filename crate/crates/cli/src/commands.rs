use std::fs;
use std::path::{Path, PathBuf};

use acdae_core::config::{Config, FidExtractor};
use acdae_core::evaluation::{evaluate, MetricsReport, GROUP_CN, GROUP_IMPAIRED};
use acdae_core::image::write_pgm;
use acdae_core::inference::{extract_attention_map, follow_up_latent, sample_batch, synthesize_slices};
use acdae_core::phantom::{build_pairs, encode_volume, generate_dataset, read_dataset, write_dataset};
use acdae_core::training::{load_checkpoint, train as run_training, Checkpoint};
use acdae_core::{evaluation, ProgressionAttributes, SubjectRecord};

use crate::{AttnMap, Eval, Failure, GenData, Infer, Train};

type CliResult<T = ()> = Result<T, Failure>;

const WORKERS_VAR: &str = "ACD_NUM_WORKERS";

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_dir() {
        return Err(Failure::Usage(format!("{}: checkpoint directory not found", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

fn split_dir(data: &Path, split: &str) -> CliResult<PathBuf> {
    let dir = data.join(split);
    if !dir.is_dir() {
        return Err(Failure::Data(format!("{}: missing '{split}' directory; run gen-data first", data.display())));
    }
    Ok(dir)
}

fn find_subject(data: &Path, id: &str) -> CliResult<SubjectRecord> {
    for split in ["test", "train"] {
        let dir = data.join(split);
        if dir.join(id).join("manifest.toml").is_file() {
            let all = read_dataset(&dir)?;
            return Ok(all.into_iter().find(|s| s.subject_id == id).expect("manifest present on disk"));
        }
    }
    Err(Failure::Usage(format!("unknown subject '{id}' in {}", data.display())))
}

fn workers() -> CliResult<usize> {
    match std::env::var(WORKERS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Usage(format!("{WORKERS_VAR} must be a positive integer, got '{v}'"))),
        },
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

pub fn gen_data(a: GenData) -> CliResult {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.data.seed = seed;
    }
    config.validate()?;
    let (train, test) = generate_dataset(&config.data)?;
    let bins = config.model.age_bins;
    let train_pairs = build_pairs(&train, config.data.pairing, &config.data, bins)?.len();
    let test_pairs = build_pairs(&test, config.data.pairing, &config.data, bins)?.len();
    write_dataset(&train, &a.out.join("train"))?;
    write_dataset(&test, &a.out.join("test"))?;
    write_file(&a.out.join("config.toml"), config.to_toml().as_bytes())?;
    println!("train: {} subjects, {train_pairs} pairs", train.len());
    println!("test: {} subjects, {test_pairs} pairs", test.len());
    Ok(())
}

pub fn train(a: Train) -> CliResult {
    let mut config = load_config(a.config.as_deref())?;
    if a.ablate_alignment {
        config.loss.lambda_imax = 0.0;
        config.loss.lambda_align = 0.0;
    }
    if a.ablate_imax {
        config.loss.lambda_imax = 0.0;
    }
    config.validate()?;
    if let Some(r) = &a.resume {
        load_ckpt(r)?;
    }
    let subjects = read_dataset(&split_dir(&a.data, "train")?)?;
    let pairs = build_pairs(&subjects, config.data.pairing, &config.data, config.model.age_bins)?;
    if let Some(p) = pairs.first() {
        if p.x_b.h != config.model.image_size {
            return Err(Failure::Usage(format!(
                "dataset slices are {}x{} but model.image_size is {}",
                p.x_b.h, p.x_b.w, config.model.image_size
            )));
        }
    }
    let lw = config.loss;
    println!(
        "training on {} pairs, lambda = ({}, {}, {})",
        pairs.len(),
        lw.lambda_imax,
        lw.lambda_align,
        lw.lambda_mse
    );
    let out = run_training(&pairs, &config, &a.out, a.resume.as_deref())?;
    for h in &out.state.history {
        println!(
            "epoch {:>3}  total {:.6}  mse {:.6}  align {:.4}  imax {:.4}  skipped {}",
            h.epoch, h.total, h.l_mse, h.l_attn_align, h.l_attn_imax, h.skipped_alignment_count
        );
    }
    println!("checkpoint: {}", out.final_checkpoint.display());
    Ok(())
}

fn target_attributes(config: &Config, s: &SubjectRecord, age: f64, disease: acdae_core::DiseaseState) -> CliResult<ProgressionAttributes> {
    let base_age = s.scans[0].age;
    if !(age > base_age) {
        return Err(Failure::Usage(format!(
            "follow-up must postdate baseline (target age {age}, baseline age {base_age})"
        )));
    }
    if age > config.data.age_max {
        return Err(Failure::Usage(format!("target age {age} exceeds data.age_max {}", config.data.age_max)));
    }
    Ok(ProgressionAttributes::new(config.data.age_bin(age, config.model.age_bins), config.model.age_bins, disease)?)
}

pub fn infer(a: Infer) -> CliResult {
    let ckpt = load_ckpt(&a.ckpt)?;
    let mut config = ckpt.manifest.config.clone();
    if let Some(s) = a.seed {
        config.inference.seed = s;
    }
    if let Some(t) = a.sample_steps {
        config.inference.sample_steps = t;
    }
    config.validate()?;
    let subject = find_subject(&a.data, &a.subject)?;
    let attrs = target_attributes(&config, &subject, a.target_age, a.disease)?;
    let sched = config.diffusion.schedule()?;
    let base = &subject.scans[0].volume;
    let slices = synthesize_slices(
        &base.slices(),
        &attrs,
        &ckpt.params,
        &sched,
        config.inference.sample_steps,
        config.inference.seed,
        base.d,
    )?;
    let volume = evaluation::stack_slices(&slices, base.d)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("follow_up.acd"), &encode_volume(&volume))?;
    for (c, s) in slices.iter().enumerate() {
        s.write_pgm(&a.out.join(format!("slice_{c:02}.pgm")))?;
    }
    println!("wrote {} slices for {} at age {} ({}) to {}", slices.len(), a.subject, a.target_age, a.disease, a.out.display());
    Ok(())
}

fn summary_rows(r: &MetricsReport) -> Vec<(String, String)> {
    let mut rows = Vec::new();
    for name in [GROUP_CN, GROUP_IMPAIRED] {
        let Some(g) = r.group(name) else { continue };
        let fmt = |s: &evaluation::Summary| format!("{:.4} ± {:.4}", s.mean, s.std);
        rows.push((format!("{name} psnr_db"), fmt(&g.psnr_db)));
        rows.push((format!("{name} ssim"), fmt(&g.ssim)));
        rows.push((format!("{name} mse"), fmt(&g.mse)));
        rows.push((format!("{name} ventricle_mae"), fmt(&g.ventricle_mae)));
        rows.push((format!("{name} hippocampus_mae"), fmt(&g.hippocampus_mae)));
        rows.push((format!("{name} amygdala_mae"), fmt(&g.amygdala_mae)));
        rows.push((format!("{name} fid_proxy"), g.fid_proxy.map_or("n/a".into(), |v| format!("{v:.4}"))));
    }
    rows
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}{suffix}"))
}

pub fn eval(a: Eval) -> CliResult {
    let workers = workers()?;
    let compare = a.ckpt.len() == 2;
    let mut runs = Vec::new();
    for path in &a.ckpt {
        let ckpt = load_ckpt(path)?;
        let mut config = ckpt.manifest.config.clone();
        if let Some(t) = a.sample_steps {
            config.inference.sample_steps = t;
        }
        if let Some(m) = a.max_subjects {
            config.eval.max_subjects = Some(m);
        }
        if compare {
            // Latent features differ per model; pooled pixels share one space.
            config.eval.fid_extractor = FidExtractor::PooledPixels;
        }
        config.validate()?;
        runs.push((path.clone(), ckpt, config));
    }
    let test = read_dataset(&split_dir(&a.data, "test")?)?;
    if test.is_empty() {
        return Err(Failure::Data("test set is empty".into()));
    }
    let mut reports = Vec::new();
    for (_, ckpt, config) in &runs {
        let sched = config.diffusion.schedule()?;
        reports.push(evaluate(&ckpt.params, &sched, &test, config, workers)?);
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    if !compare {
        let r = &reports[0];
        write_file(&a.out, r.to_text().as_bytes())?;
        write_file(&sibling(&a.out, ".regions.csv"), r.region_table().as_bytes())?;
        for (k, v) in summary_rows(r) {
            println!("{k:<24} {v}");
        }
        println!("{}", r.fid_note);
        return Ok(());
    }
    let (ra, rb) = (summary_rows(&reports[0]), summary_rows(&reports[1]));
    let mut text = format!(
        "# side-by-side aggregates\n# a = {}\n# b = {}\n# {}\n{:<24} {:<22} {:<22}\n",
        runs[0].0.display(),
        runs[1].0.display(),
        reports[0].fid_note,
        "metric",
        "a",
        "b"
    );
    for ((k, va), (_, vb)) in ra.iter().zip(&rb) {
        text.push_str(&format!("{k:<24} {va:<22} {vb:<22}\n"));
    }
    write_file(&a.out, text.as_bytes())?;
    for (r, tag) in reports.iter().zip(["a", "b"]) {
        write_file(&sibling(&a.out, &format!(".{tag}.txt")), r.to_text().as_bytes())?;
        write_file(&sibling(&a.out, &format!(".{tag}.regions.csv")), r.region_table().as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

pub fn attn_map(a: AttnMap) -> CliResult {
    let ckpt = load_ckpt(&a.ckpt)?;
    let config = ckpt.manifest.config.clone();
    config.validate()?;
    let layers = config.model.decoder_layers();
    if a.layer >= layers {
        return Err(Failure::Usage(format!("layer {} outside 0..{layers}", a.layer)));
    }
    let subject = find_subject(&a.data, &a.subject)?;
    let last = subject.scans.len() - 1;
    let j = a.scan.unwrap_or(last);
    if j == 0 || j > last {
        return Err(Failure::Usage(format!("scan index {j} outside 1..={last}")));
    }
    let d = subject.scans[0].volume.d;
    let c = a.slice.unwrap_or(d / 2);
    if c >= d {
        return Err(Failure::Usage(format!("slice {c} outside 0..{d}")));
    }
    let sched = config.diffusion.schedule()?;
    let t = a.step.or(config.inference.attention_step).unwrap_or(sched.steps / 2);
    if t == 0 || t > sched.steps {
        return Err(Failure::Usage(format!("attention step {t} outside 1..={}", sched.steps)));
    }
    let attrs = target_attributes(&config, &subject, subject.scans[j].age, subject.disease_state)?;
    let x_b = subject.scans[0].volume.slice(c);
    let x_f = subject.scans[j].volume.slice(c);
    let seed = config.inference.seed;
    let map = extract_attention_map(&x_b, &attrs, &ckpt.params, &sched, t, a.layer, seed)?;
    let (z_f, _) = follow_up_latent(&x_b, &attrs, &ckpt.params)?;
    let pred = sample_batch(&[z_f], &[c as u64], &ckpt.params, &sched, config.inference.sample_steps, seed)?.remove(0);

    let overlay: Vec<f32> = x_b.pixels.iter().zip(&map.pixels).map(|(b, m)| 0.5 * b + 0.5 * m).collect();
    let d_pred: Vec<f32> = pred.pixels.iter().zip(&x_b.pixels).map(|(p, b)| p - b).collect();
    let d_gt: Vec<f32> = x_f.pixels.iter().zip(&x_b.pixels).map(|(f, b)| f - b).collect();
    // One scale for both panels so they are visually comparable.
    let scale = d_pred.iter().chain(&d_gt).fold(0.0f32, |m, v| m.max(v.abs()));
    let signed = |v: &[f32]| -> Vec<f32> { v.iter().map(|x| if scale > 0.0 { 0.5 + 0.5 * x / scale } else { 0.5 }).collect() };

    create_dir(&a.out)?;
    let (h, w) = (x_b.h, x_b.w);
    write_pgm(&a.out.join("overlay.pgm"), h, w, &overlay)?;
    write_pgm(&a.out.join("diff_pred.pgm"), h, w, &signed(&d_pred))?;
    write_pgm(&a.out.join("diff_gt.pgm"), h, w, &signed(&d_gt))?;
    println!(
        "wrote overlay.pgm, diff_pred.pgm, diff_gt.pgm for {} slice {c} scan {j} layer {} at t = {t} to {}",
        a.subject,
        a.layer,
        a.out.display()
    );
    Ok(())
}
