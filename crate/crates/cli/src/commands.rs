use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use derain_core::gradcheck::tiny_network_check;
use derain_core::synth::{make_dataset, synth_clean, RainParams};
use derain_core::train::{train, AdamState, LogEntry};
use derain_core::{psnr, ssim, FusionMode, Network, Shape, SsimConfig, TapScope, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, RunConfig};
use crate::io::{self, ManifestRow};
use crate::{Command, SynthArgs, TrainArgs};

/// A numeric check that ran to completion but did not pass.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// Largest accepted relative gradient error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const FEATURE_STATS_HEADER: &str = "scope,block,node,feature,channel,mean,std";
pub const FEATURE_STATS_FILE: &str = "feature_stats.csv";

pub fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Params { config } => params(config.as_deref(), out),
        Command::Train(args) => train_cmd(args, out, err),
        Command::Derain {
            ckpt,
            input,
            out: dst,
            dump_features,
        } => derain(&ckpt, &input, &dst, dump_features.as_deref(), out),
        Command::Eval { ckpt, pairs, out: dst } => eval(&ckpt, &pairs, dst.as_deref(), out),
        Command::Gradcheck { tiny } => gradcheck(tiny, out),
        Command::Synth(args) => synth(args, out),
        Command::Bench { ckpt, size, runs } => bench(&ckpt, size, runs, out),
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
    Ok(cfg)
}

fn params(config: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.net.validate().map_err(|e| ConfigError(e.to_string()))?;
    let net = Network::<f32>::new(cfg.net)?;
    writeln!(out, "{:<16} {:>14} {:>8}", "layer", "shape", "params")?;
    for (name, p) in net.layers() {
        let s = p.weight.shape();
        let shape = format!("{}x{}x{}x{}", s.n, s.c, s.h, s.w);
        writeln!(out, "{name:<16} {shape:>14} {:>8}", p.num_params())?;
    }
    writeln!(out, "{:<16} {:>14} {:>8}", "total", "", net.count_parameters())?;
    Ok(())
}

fn train_cmd(args: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let mut set = |k: &str, v: Option<String>| match v {
        Some(v) => cfg.set(k, &v),
        None => Ok(()),
    };
    set("total_iters", args.iters.map(|v| v.to_string()))?;
    set("base_lr", args.lr.map(|v| v.to_string()))?;
    set("batch_size", args.batch_size.map(|v| v.to_string()))?;
    set("patch", args.patch.map(|v| v.to_string()))?;
    set("fusion_mode", args.fusion_mode.clone())?;
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;

    let rows = io::read_manifest(&args.data)?;
    let pairs = io::load_pairs(&rows)?;
    let mut net = Network::<f32>::new(cfg.net)?;
    let mut adam = AdamState::for_network(&net);

    writeln!(out, "{}", LogEntry::CSV_HEADER)?;
    let mut log = format!("{}\n", LogEntry::CSV_HEADER);
    let mut write_err = None;
    let result = train(&mut net, &mut adam, &pairs, &cfg.train, |e| {
        let line = e.to_csv();
        if let Err(e) = writeln!(out, "{line}") {
            write_err.get_or_insert(e);
        }
        log.push_str(&line);
        log.push('\n');
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }

    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    // On divergence the network was rolled back to its last good snapshot,
    // which is still worth keeping.
    io::save_checkpoint(&net, Some(&adam), &args.out)?;
    io::write_atomic(&log_path, log.as_bytes())?;
    let report = result?;
    writeln!(
        err,
        "trained {} iterations: mean loss {:.5} over the first 50, {:.5} over the last 50",
        report.losses.len(),
        report.head_mean(50),
        report.tail_mean(50)
    )?;
    Ok(())
}

fn derain(ckpt: &Path, input: &Path, dst: &Path, dump: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (net, _) = io::load_checkpoint(ckpt)?;
    let x = io::load_image(input)?;
    let result = net.forward(&x, dump.is_some())?;
    io::save_image(&result.y, dst)?;
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(FEATURE_STATS_FILE);
        io::write_atomic(&path, feature_stats_csv(&result.taps).as_bytes())?;
        writeln!(out, "{} fusion nodes written to {}", result.taps.len(), path.display())?;
    }
    Ok(())
}

/// One row per (fusion node, feature, channel). Across-block nodes have an
/// empty block column.
pub fn feature_stats_csv(taps: &[derain_core::FusionTap]) -> String {
    let mut s = format!("{FEATURE_STATS_HEADER}\n");
    for tap in taps {
        let (scope, block) = match tap.scope {
            TapScope::Within { block } => ("within", block.to_string()),
            TapScope::Across => ("across", String::new()),
        };
        for (feature, stats) in tap.stats.named() {
            for (c, (m, sd)) in stats.mean.iter().zip(&stats.std).enumerate() {
                s.push_str(&format!("{scope},{block},{},{feature},{c},{m:e},{sd:e}\n", tap.node));
            }
        }
    }
    s
}

fn eval(ckpt: &Path, pairs: &Path, dst: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (net, _) = io::load_checkpoint(ckpt)?;
    let rows = io::read_manifest(pairs)?;
    let base = pairs.parent().unwrap_or(Path::new("."));
    let cfg = SsimConfig::default();
    let mut report = String::from("image,psnr_db,ssim\n");
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    for r in &rows {
        let clean = io::load_image(&r.clean_path)?;
        let rainy = io::load_image(&r.rainy_path)?;
        let y = net.forward(&rainy, false)?.y;
        let p = psnr(&y, &clean)?;
        let s = ssim(&y, &clean, &cfg)?.value;
        sum_p += p;
        sum_s += s;
        let name = r.rainy_path.strip_prefix(base).unwrap_or(&r.rainy_path);
        report.push_str(&format!("{},{p:.4},{s:.6}\n", name.display()));
    }
    let n = rows.len() as f64;
    report.push_str(&format!("mean,{:.4},{:.6}\n", sum_p / n, sum_s / n));
    out.write_all(report.as_bytes())?;
    if let Some(dst) = dst {
        io::write_atomic(dst, report.as_bytes())?;
    }
    Ok(())
}

fn gradcheck(tiny: bool, out: &mut dyn Write) -> Result<()> {
    let runs: Vec<(FusionMode, u64)> = if tiny {
        vec![(FusionMode::Tree, 0)]
    } else {
        FusionMode::ALL.iter().flat_map(|&m| (0..3).map(move |s| (m, s))).collect()
    };
    let mut failures = 0;
    writeln!(out, "fusion_mode,seed,parameters,max_relative_error,status")?;
    for (mode, seed) in runs {
        let r = tiny_network_check(mode, seed)?;
        let ok = r.max_relative_error < GRADCHECK_TOLERANCE;
        failures += usize::from(!ok);
        writeln!(
            out,
            "{mode},{seed},{},{:e},{}",
            r.checked,
            r.max_relative_error,
            if ok { "ok" } else { "FAIL" }
        )?;
    }
    if failures > 0 {
        return Err(NumericFailure(format!("{failures} gradient check(s) above {GRADCHECK_TOLERANCE:e}")).into());
    }
    Ok(())
}

fn synth(args: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let params = RainParams {
        angle_deg: args.angle,
        streak_length_px: args.length,
        density: args.density,
        intensity: args.intensity,
        seed: args.seed,
    };
    params.validate().map_err(|e| ConfigError(e.to_string()))?;
    let cleans: Vec<(String, Tensor<f32>)> = match &args.clean_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("listing {}", dir.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
            paths.sort();
            if paths.is_empty() {
                bail!("{}: no PNG files", dir.display());
            }
            paths
                .iter()
                .map(|p| {
                    let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    Ok((stem, io::load_image(p)?))
                })
                .collect::<Result<_>>()?
        }
        None => {
            if args.generate == 0 || args.size < 8 {
                return Err(ConfigError("--generate must be positive and --size at least 8".into()).into());
            }
            (0..args.generate)
                .map(|i| (format!("scene{i:03}"), synth_clean(args.size, args.size, args.seed.wrapping_add(i as u64))))
                .collect()
        }
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let tensors: Vec<Tensor<f32>> = cleans.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let dataset = make_dataset(&tensors, &[params], &mut rng)?;
    let mut rows = Vec::with_capacity(dataset.len());
    for (pair, record) in &dataset {
        let stem = &cleans[record.clean_index].0;
        let clean_path = args.out.join(format!("{stem}_clean.png"));
        let rainy_path = args.out.join(format!("{stem}_rain.png"));
        io::save_image(&pair.clean, &clean_path)?;
        io::save_image(&pair.rainy, &rainy_path)?;
        rows.push(ManifestRow {
            clean_path,
            rainy_path,
            params: Some(record.params),
        });
    }
    let manifest = args.out.join("manifest.csv");
    io::write_atomic(&manifest, &io::manifest_csv(&rows, &args.out)?)?;
    writeln!(out, "{} pairs written to {}", rows.len(), manifest.display())?;
    Ok(())
}

/// Mean and minimum wall time of `runs` forward passes on a random
/// `size x size` image, after one warm-up pass.
pub fn time_inference(net: &Network<f32>, size: usize, runs: usize) -> Result<(f64, f64)> {
    if size == 0 || runs == 0 {
        return Err(ConfigError("--size and --runs must be positive".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(Shape::new(1, net.config.input_channels, size, size), |_, _, _, _| {
        rng.random_range(0.0..1.0f32)
    });
    net.forward(&x, false)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(net.forward(&x, false)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / runs as f64;
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((mean, min))
}

fn bench(ckpt: &Path, size: usize, runs: usize, out: &mut dyn Write) -> Result<()> {
    let (net, _) = io::load_checkpoint(ckpt)?;
    let (mean, min) = time_inference(&net, size, runs)?;
    writeln!(out, "size,runs,mean_ms,min_ms")?;
    writeln!(out, "{size},{runs},{mean:.3},{min:.3}")?;
    Ok(())
}
