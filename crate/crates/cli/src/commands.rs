//! The five subcommands. Each takes a resolved config and returns whether
//! its checks passed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ncconv::data::Dataset;
use ncconv::gradcheck::run_suite;
use ncconv::network::{
    append_metrics_csv, evaluate, fit, load_checkpoint, save_checkpoint, ConvKind, EvalMetrics, MetricsRecord, NormKind,
};
use ncconv::theory::{
    check_output_normality, identity_suite, measure_grad_norm_reduction, write_trace_csv, InputDistribution,
    ProbeWeights,
};
use ncconv::{naive_conv2d, randn, Conv, ConvGeometry, DType, Model, NcConv, Rng, Scalar, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::config::{BenchGeometry, RunConfig};
use crate::data::load_datasets;
use crate::{CliError, CliResult, Outcome};

/// RNG stream for weight initialization.
const INIT_STREAM: u64 = 1;
/// RNG stream for benchmark inputs.
const BENCH_STREAM: u64 = 4;
/// Bench correctness gate: im2col against the naive loop in 32-bit.
pub const BENCH_TOLERANCE: f64 = 1e-4;

fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    write_json(&cfg.out_dir.join("resolved_config.json"), cfg)?;
    Ok(cfg.out_dir.clone())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> CliResult<Outcome> {
    let out = prepare_out(cfg)?;
    let cases = run_suite(&cfg.gradcheck)?;
    for c in &cases {
        println!(
            "{} {:<40} max_rel_error {:.3e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_error
        );
    }
    let failed = cases.iter().filter(|c| !c.pass).count();
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    println!("gradcheck: {} cases, {failed} failed, worst {worst:.3e}", cases.len());
    write_json(&out.join("gradcheck.json"), &cases)?;
    Ok(Outcome::from_pass(failed == 0))
}

pub fn verify_theory(cfg: &RunConfig) -> CliResult<Outcome> {
    let out = prepare_out(cfg)?;
    let th = &cfg.theory;
    if th.patch_lens.contains(&0) {
        return Err(CliError::Usage("theory.patch_lens must be positive".into()));
    }
    let reports = identity_suite(&th.patch_lens, th.instances, cfg.seed)?;
    write_json(&out.join("identities.json"), &reports)?;
    let mut pass = true;
    for name in ["centering", "scaling"] {
        let rows: Vec<_> = reports.iter().filter(|r| r.identity == name).collect();
        let failed = rows.iter().filter(|r| !r.pass).count();
        let worst = rows.iter().map(|r| r.gap).fold(0.0, f64::max);
        pass &= failed == 0;
        println!(
            "{} identity {name}: {} instances, {failed} failed, worst gap {worst:.3e}",
            if failed == 0 { "PASS" } else { "FAIL" },
            rows.len()
        );
        let mut printed: Vec<f64> = rows.iter().filter_map(|r| r.printed_form_gap).collect();
        if !printed.is_empty() {
            printed.sort_by(f64::total_cmp);
            println!("     identity {name}: 1/sigma form median gap {:.3e}", printed[printed.len() / 2]);
        }
    }

    let mut rng = Rng::with_stream(cfg.seed, 5);
    let mut normality = vec![];
    for &i in &th.patch_lens {
        let g = ConvGeometry::square(i, 1, 1, 1, 0, (1, 1))?;
        let r = check_output_normality(&g, th.normality_samples, InputDistribution::Gaussian, ProbeWeights::Gaussian, &mut rng)?;
        let status = match (r.bounds_apply, r.pass()) {
            (false, _) => "INFO",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        println!(
            "{status} normality I={i} n={}: mean {:.4e} (bound {:.4e}) variance {:.4}",
            r.samples, r.mean, r.mean_bound, r.variance
        );
        pass &= r.pass();
        normality.push(r);
    }
    write_json(&out.join("normality.json"), &normality)?;

    if th.trace_steps > 0 {
        match cfg.dtype {
            DType::F32 => grad_trace::<f32>(cfg, &out)?,
            DType::F64 => grad_trace::<f64>(cfg, &out)?,
        }
    }
    Ok(Outcome::from_pass(pass))
}

/// Observational trace: NC without norm layers against standard conv with
/// GroupNorm, same architecture otherwise, same batches.
fn grad_trace<T: Scalar>(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let (train, _) = load_datasets(&cfg.data, cfg.seed)?;
    let (c, h, w) = train.image_shape();
    let mut nc_arch = cfg.model.clone();
    nc_arch.conv = ConvKind::Nc;
    nc_arch.norm = NormKind::None;
    let mut gn_arch = cfg.model.clone();
    gn_arch.conv = ConvKind::Standard;
    gn_arch.norm = NormKind::Gn;
    let mut nc = Model::<T>::build(nc_arch.to_spec([c, h, w])?, &mut Rng::with_stream(cfg.seed, INIT_STREAM))?;
    let mut gn = Model::<T>::build(gn_arch.to_spec([c, h, w])?, &mut Rng::with_stream(cfg.seed, INIT_STREAM))?;
    let th = &cfg.theory;
    let rows = measure_grad_norm_reduction(
        &mut [("nc", &mut nc), ("gn", &mut gn)],
        &train,
        th.trace_steps,
        th.trace_batch,
        th.trace_lr,
        cfg.seed,
    )?;
    write_trace_csv(out.join("grad_trace.csv"), &rows)?;
    for model in ["nc", "gn"] {
        let norms: Vec<f64> = rows.iter().filter(|r| r.model == model).map(|r| r.input_grad_norm).collect();
        let mean = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
        println!("INFO trace {model}: mean conv-input gradient norm {mean:.4e} over {} rows", norms.len());
    }
    Ok(())
}

fn build_model<T: Scalar>(cfg: &RunConfig, data: &Dataset) -> CliResult<Model<T>> {
    let (c, h, w) = data.image_shape();
    let spec = cfg.model.to_spec([c, h, w])?;
    Ok(Model::build(spec, &mut Rng::with_stream(cfg.seed, INIT_STREAM))?)
}

pub fn train(cfg: &RunConfig) -> CliResult<Outcome> {
    cfg.train.validate()?;
    let (train_set, val_set) = load_datasets(&cfg.data, cfg.seed)?;
    let out = prepare_out(cfg)?;
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(cfg, &out, &train_set, &val_set),
        DType::F64 => train_typed::<f64>(cfg, &out, &train_set, &val_set),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, out: &Path, train_set: &Dataset, val_set: &Dataset) -> CliResult<Outcome> {
    let mut model = build_model::<T>(cfg, train_set)?;
    let metrics = out.join("metrics.csv");
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let start_epoch = match &cfg.resume {
        Some(r) => {
            load_checkpoint(&mut model, &r.checkpoint)?;
            r.completed_epochs
        }
        None => {
            if metrics.exists() {
                fs::remove_file(&metrics)?;
            }
            0
        }
    };
    log::info!(
        "training {} parameters on {} samples, validating on {}",
        model.param_count(),
        train_set.len(),
        val_set.len()
    );
    let val = (!val_set.is_empty()).then_some(val_set);
    let mut on_epoch = |rec: &MetricsRecord, m: &mut Model<T>| -> ncconv::Result<()> {
        append_metrics_csv(&metrics, std::slice::from_ref(rec))?;
        save_checkpoint(m, ckpt_dir.join(format!("epoch_{:04}.ckpt", rec.epoch + 1)))
    };
    let records = fit(&mut model, train_set, val, &cfg.train, start_epoch, cfg.deterministic, &mut on_epoch)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let finite = records.iter().all(MetricsRecord::losses_valid);
    let best_val = records.iter().filter_map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    let summary = json!({
        "dtype": cfg.dtype,
        "param_count": model.param_count(),
        "start_epoch": start_epoch,
        "epochs_run": records.len(),
        "train_samples": train_set.len(),
        "val_samples": val_set.len(),
        "all_losses_finite": finite,
        "best_val_loss": best_val.is_finite().then_some(best_val),
        "final": records.last(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    if let Some(last) = records.last() {
        println!(
            "train: {} epochs, final train_loss {:.4} val_loss {} val_top1 {}",
            records.len(),
            last.train_loss,
            fmt_opt(last.val_loss),
            fmt_opt(last.val_top1)
        );
    }
    Ok(Outcome::from_pass(finite))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

pub fn eval(cfg: &RunConfig) -> CliResult<Outcome> {
    let ckpt = cfg
        .eval
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Usage("eval.checkpoint is required".into()))?;
    let (train_set, val_set) = load_datasets(&cfg.data, cfg.seed)?;
    if val_set.is_empty() {
        return Err(CliError::Usage("validation set is empty".into()));
    }
    let out = prepare_out(cfg)?;
    let m = match cfg.dtype {
        DType::F32 => eval_typed::<f32>(cfg, &ckpt, &train_set, &val_set)?,
        DType::F64 => eval_typed::<f64>(cfg, &ckpt, &train_set, &val_set)?,
    };
    let report = json!({
        "checkpoint": ckpt,
        "samples": m.samples,
        "loss": m.loss,
        "top1_acc": m.top1,
        "top5_acc": m.top5,
        "top1_err": m.top1_err(),
        "top5_err": m.top5_err(),
    });
    write_json(&out.join("eval.json"), &report)?;
    println!(
        "eval: {} samples, loss {:.4}, top1 acc {:.4} err {:.4}, top5 acc {:.4} err {:.4}",
        m.samples,
        m.loss,
        m.top1,
        m.top1_err(),
        m.top5,
        m.top5_err()
    );
    Ok(Outcome::from_pass(m.loss.is_finite()))
}

fn eval_typed<T: Scalar>(cfg: &RunConfig, ckpt: &Path, train_set: &Dataset, val_set: &Dataset) -> CliResult<EvalMetrics> {
    let mut model = build_model::<T>(cfg, train_set)?;
    load_checkpoint(&mut model, ckpt)?;
    Ok(evaluate(&mut model, val_set)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub size: usize,
    pub batch: usize,
    pub method: &'static str,
    pub repeats: usize,
    pub median_ms: f64,
    pub per_image_us: f64,
}

fn median_ms(repeats: usize, mut f: impl FnMut() -> ncconv::Result<()>) -> ncconv::Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Max absolute difference relative to the oracle's largest magnitude.
fn rel_max_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let scale = b.max_abs().max(1.0) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
        / scale
}

pub fn bench(cfg: &RunConfig) -> CliResult<Outcome> {
    let b = &cfg.bench;
    if b.repeats == 0 || b.batch == 0 {
        return Err(CliError::Usage("bench.repeats and bench.batch must be positive".into()));
    }
    let geoms: Vec<(BenchGeometry, ConvGeometry)> = b
        .geometries
        .iter()
        .map(|bg| {
            ConvGeometry::square(bg.in_channels, bg.out_channels, bg.kernel, bg.stride, bg.padding, (bg.size, bg.size))
                .map(|g| (*bg, g))
        })
        .collect::<ncconv::Result<_>>()?;
    let out = prepare_out(cfg)?;
    let mut rng = Rng::with_stream(cfg.seed, BENCH_STREAM);
    let mut rows = vec![];
    for (bg, g) in &geoms {
        let x: Tensor<f32> = randn(&[b.batch, g.in_channels, bg.size, bg.size], &mut rng, 0.0, 1.0);
        let w: Tensor<f32> = randn(&[g.out_channels, g.patch_len()], &mut rng, 0.0, 1.0 / (g.patch_len() as f64).sqrt());
        let mut conv = Conv::with_weights(*g, w.clone())?;
        let mut nc = NcConv::with_weights(*g, w.clone(), ncconv::conv::DEFAULT_EPSILON)?;
        let diff = rel_max_diff(&conv.forward(&x)?, &naive_conv2d(&x, &w, g)?);
        if diff > BENCH_TOLERANCE {
            println!("FAIL bench {bg:?}: im2col differs from naive loop by {diff:.3e}");
            return Ok(Outcome::CheckFailed);
        }
        let naive = median_ms(b.repeats, || naive_conv2d(&x, &w, g).map(drop))?;
        let im2col = median_ms(b.repeats, || conv.forward(&x).map(drop))?;
        let ncf = median_ms(b.repeats, || nc.forward(&x).map(drop))?;
        for (method, ms) in [("naive", naive), ("im2col", im2col), ("nc", ncf)] {
            rows.push(BenchRow {
                in_channels: bg.in_channels,
                out_channels: bg.out_channels,
                kernel: bg.kernel,
                stride: bg.stride,
                padding: bg.padding,
                size: bg.size,
                batch: b.batch,
                method,
                repeats: b.repeats,
                median_ms: ms,
                per_image_us: ms * 1e3 / b.batch as f64,
            });
        }
        println!(
            "bench c{}->{} k{} s{} p{} {}px: naive {naive:.3} ms, im2col {im2col:.3} ms, nc {ncf:.3} ms (check {diff:.1e})",
            bg.in_channels, bg.out_channels, bg.kernel, bg.stride, bg.padding, bg.size
        );
    }
    let mut w = csv::Writer::from_path(out.join("bench.csv")).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(Outcome::Pass)
}
