use std::collections::BTreeMap;
use std::io::{ErrorKind, Write};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dualvit::{checkpoint, config, dataset, describe};
use dualvit_core::complexity::{count_macs, CostEntry};
use dualvit_core::data::{make_synthetic, Dataset};
use dualvit_core::gradcheck::{check_target_variant, GradCheckConfig, GradCheckReport};
use dualvit_core::train::{evaluate, train_toy, StepRecord, TrainConfig, TrainError};
use dualvit_core::{AblationVariant, DualVit, ModelConfig, Preset};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::args::{AblateArgs, Cli, Command, DataArgs, EvalArgs, GenDataArgs, GradcheckArgs, ModelArgs, TrainArgs};
use crate::table;

/// How a command that ran to completion ended.
pub enum Status {
    Ok,
    CheckFailed,
}

struct Ctx {
    json: bool,
    seed: Option<u64>,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> Result<()> {
        let body = if self.json { serde_json::to_string_pretty(value)? } else { text() };
        match writeln!(std::io::stdout().lock(), "{body}") {
            // a closed pipe (`| head`) is not an error worth reporting
            Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(e.into()),
            _ => Ok(()),
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

pub fn run(cli: Cli) -> Result<Status> {
    let ctx = Ctx { json: cli.json, seed: cli.seed };
    match cli.command {
        Command::Describe { model, res } => describe_cmd(&ctx, &model, res),
        Command::Count { model, res, breakdown, variant } => count(&ctx, &model, res, breakdown, variant),
        Command::Gradcheck(args) => gradcheck(&ctx, &args),
        Command::Train(args) => train(&ctx, &args),
        Command::Eval(args) => eval(&ctx, &args),
        Command::Ablate(args) => ablate(&ctx, &args),
        Command::GenData(args) => gen_data(&ctx, &args),
    }
}

/// Caps the rayon pool at `DUALVIT_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DUALVIT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("DUALVIT_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn resolve_model(ctx: &Ctx, args: &ModelArgs, default: Preset) -> Result<(String, ModelConfig)> {
    let (name, base) = match &args.config {
        Some(path) => (path.display().to_string(), config::load(path)?),
        None => {
            let preset = args.preset.unwrap_or(default);
            (preset.name().to_string(), preset.config())
        }
    };
    let mut resolved = config::apply_overrides(&base, &args.overrides)?;
    if let Some(seed) = ctx.seed {
        resolved.seed = seed;
    }
    Ok((name, resolved))
}

fn describe_cmd(ctx: &Ctx, args: &ModelArgs, res: Option<usize>) -> Result<Status> {
    let (name, c) = resolve_model(ctx, args, Preset::Small)?;
    let d = describe::describe(&name, &c, res.unwrap_or(c.resolution))?;
    ctx.emit(&d, || {
        let flag = if d.pos_embed { "on" } else { "off" };
        format!(
            "{} at {}x{}: {} semantic tokens, {} classes, positional embedding {flag}\n{}",
            d.model,
            d.resolution,
            d.resolution,
            d.semantic_tokens,
            d.num_classes,
            table::render(&describe::Description::header(), &d.rows())
        )
    })?;
    Ok(Status::Ok)
}

fn group_of(path: &str) -> &str {
    path.split('.').next().unwrap_or(path)
}

fn count(ctx: &Ctx, args: &ModelArgs, res: Option<usize>, breakdown: bool, variant: AblationVariant) -> Result<Status> {
    let (name, c) = resolve_model(ctx, args, Preset::Small)?;
    let res = res.unwrap_or(c.resolution);
    // reject a bad resolution before paying for initialization
    c.geometry(res)?;
    let model = DualVit::<f32>::build_variant(&c, variant)?;
    let report = count_macs(&model, res)?;
    let out = json!({
        "model": name,
        "variant": variant,
        "resolution": res,
        "params": report.params,
        "macs": report.macs,
        "mega_params": report.mega_params(),
        "giga_macs": report.giga_macs(),
        "breakdown": report.breakdown,
    });
    ctx.emit(&out, || {
        let rows: Vec<CostEntry> = if breakdown {
            report.breakdown.clone()
        } else {
            let mut groups: Vec<CostEntry> = Vec::new();
            for e in &report.breakdown {
                match groups.last_mut() {
                    Some(g) if g.path == group_of(&e.path) => {
                        g.params += e.params;
                        g.macs += e.macs;
                    }
                    _ => groups.push(CostEntry { path: group_of(&e.path).to_string(), ..e.clone() }),
                }
            }
            groups
        };
        let rows: Vec<Vec<String>> =
            rows.iter().map(|e| vec![e.path.clone(), e.params.to_string(), e.macs.to_string()]).collect();
        format!(
            "{name} (variant {variant}) at {res}x{res}: {:.3}M params, {:.3} GMACs\n{}",
            report.mega_params(),
            report.giga_macs(),
            table::render(&["module", "params", "MACs"], &rows)
        )
    })?;
    Ok(Status::Ok)
}

fn gradcheck(ctx: &Ctx, args: &GradcheckArgs) -> Result<Status> {
    if !(args.tol > 0.0 && args.step > 0.0) || args.samples == 0 {
        bail!("--tol, --step and --samples must be positive");
    }
    let config = GradCheckConfig { step: args.step, samples: args.samples, tolerance: args.tol, seed: ctx.seed() };
    let start = Instant::now();
    let reports: Vec<GradCheckReport> = args
        .block
        .targets()
        .par_iter()
        .map(|&t| check_target_variant(t, args.variant, &config))
        .collect::<Result<_, _>>()?;
    let passed = reports.iter().all(GradCheckReport::passed);
    let out = json!({
        "passed": passed,
        "config": config,
        "variant": args.variant,
        "elapsed_secs": start.elapsed().as_secs_f64(),
        "reports": reports,
    });
    ctx.emit(&out, || {
        let mut text = String::new();
        for r in &reports {
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            text.push_str(&format!(
                "{verdict} {:<12} {} entries, max relative error {:.3e} (tolerance {:.0e})\n",
                r.target, r.checked, r.max_rel_error, r.tolerance
            ));
            for f in r.failures.iter().take(10) {
                text.push_str(&format!(
                    "    {}[{}]: analytic {:.6e}, numeric {:.6e}, relative error {:.3e}\n",
                    f.name, f.index, f.analytic, f.numeric, f.rel_error
                ));
            }
            if r.failures.len() > 10 {
                text.push_str(&format!("    ... {} more\n", r.failures.len() - 10));
            }
        }
        text.trim_end().to_string()
    })?;
    Ok(if passed { Status::Ok } else { Status::CheckFailed })
}

fn load_data(ctx: &Ctx, args: &DataArgs, model: &ModelConfig) -> Result<Dataset> {
    let data = if args.data == "synthetic" {
        let classes = args.classes.unwrap_or(model.num_classes);
        let seed = args.data_seed.unwrap_or(ctx.seed());
        make_synthetic(classes, args.per_class, model.resolution, seed)?
    } else {
        dataset::read(&args.data)?
    };
    if (data.height(), data.width()) != (model.resolution, model.resolution) {
        bail!(
            "dataset images are {}x{} but the model expects {}x{}",
            data.height(),
            data.width(),
            model.resolution,
            model.resolution
        );
    }
    if data.num_classes > model.num_classes {
        bail!("dataset has {} classes but the model predicts {}", data.num_classes, model.num_classes);
    }
    Ok(data)
}

fn train_config(ctx: &Ctx, args: &crate::args::OptimArgs) -> Result<TrainConfig> {
    if args.batch == 0 {
        bail!("--batch must be positive");
    }
    if !(args.lr >= 0.0 && args.weight_decay >= 0.0) {
        bail!("--lr and --weight-decay must be non-negative");
    }
    Ok(TrainConfig {
        steps: args.steps,
        batch_size: args.batch,
        lr: args.lr,
        weight_decay: args.weight_decay,
        seed: ctx.seed(),
    })
}

fn train(ctx: &Ctx, args: &TrainArgs) -> Result<Status> {
    let (name, c) = resolve_model(ctx, &args.model, Preset::Tiny)?;
    let data = load_data(ctx, &args.data, &c)?;
    let tc = train_config(ctx, &args.optim)?;
    let mut model = DualVit::<f32>::build_variant(&c, args.variant)?;

    let mut csv =
        csv::Writer::from_path(&args.loss_csv).with_context(|| format!("creating {}", args.loss_csv.display()))?;
    let mut csv_error = None;
    let every = (tc.steps / 10).max(1);
    let quiet = ctx.json;
    let start = Instant::now();
    let outcome = train_toy(&mut model, &data, &tc, |r: &StepRecord| {
        if csv_error.is_none() {
            csv_error = csv.serialize(r).err();
        }
        if !quiet && (r.step.is_multiple_of(every) || r.step + 1 == tc.steps) {
            eprintln!("step {:>5}  loss {:.5}  lr {:.3e}", r.step, r.loss, r.lr);
        }
    });
    let elapsed = start.elapsed();
    if let Some(e) = csv_error {
        return Err(e).with_context(|| format!("writing {}", args.loss_csv.display()));
    }
    csv.flush().with_context(|| format!("writing {}", args.loss_csv.display()))?;

    let report = match outcome {
        Ok(report) => report,
        Err(TrainError::NonFinite { step, last_good }) => {
            model.params = *last_good;
            checkpoint::save(&model, &args.out)?;
            eprintln!(
                "error: loss became non-finite at step {step}; parameters from step {} saved to {}",
                step.saturating_sub(1),
                args.out.display()
            );
            return Ok(Status::CheckFailed);
        }
        Err(TrainError::Model(e)) => return Err(e.into()),
    };
    checkpoint::save(&model, &args.out)?;

    let final_loss = report.steps.last().map(|r| r.loss);
    let out = json!({
        "model": name,
        "variant": args.variant,
        "samples": data.len(),
        "train": tc,
        "final_loss": final_loss,
        "train_accuracy": report.final_accuracy,
        "checkpoint": args.out,
        "loss_csv": args.loss_csv,
        "elapsed_secs": elapsed.as_secs_f64(),
    });
    ctx.emit(&out, || {
        format!(
            "trained {name} (variant {}) for {} steps on {} samples in {:.1}s\nfinal loss {}, train accuracy {:.2}%\ncheckpoint {}, loss log {}",
            args.variant,
            tc.steps,
            data.len(),
            elapsed.as_secs_f64(),
            final_loss.map_or("n/a".to_string(), |l| format!("{l:.5}")),
            100.0 * report.final_accuracy,
            args.out.display(),
            args.loss_csv.display()
        )
    })?;
    Ok(Status::Ok)
}

fn eval(ctx: &Ctx, args: &EvalArgs) -> Result<Status> {
    if args.batch == 0 {
        bail!("--batch must be positive");
    }
    let model = checkpoint::load(&args.checkpoint)?;
    let data = load_data(ctx, &args.data, &model.config)?;
    let result = evaluate(&model, &data, args.batch)?;
    let out = json!({
        "checkpoint": args.checkpoint,
        "variant": model.variant,
        "samples": data.len(),
        "accuracy": result.accuracy,
        "mean_loss": result.mean_loss,
    });
    ctx.emit(&out, || {
        format!(
            "{}: accuracy {:.2}% on {} samples, mean loss {:.5}",
            args.checkpoint.display(),
            100.0 * result.accuracy,
            data.len(),
            result.mean_loss
        )
    })?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct AblationRow {
    variant: AblationVariant,
    description: &'static str,
    params: u64,
    /// Relative to the full variant (d).
    delta_params: i64,
    macs: u64,
    giga_macs: f64,
    accuracy: Option<f64>,
}

fn ablate(ctx: &Ctx, args: &AblateArgs) -> Result<Status> {
    let (name, c) = resolve_model(ctx, &args.model, Preset::Tiny)?;
    let res = args.res.unwrap_or(c.resolution);
    c.geometry(res)?;
    let data = if args.train_steps > 0 { Some(load_data(ctx, &args.data, &c)?) } else { None };
    let tc = TrainConfig { steps: args.train_steps, seed: ctx.seed(), ..TrainConfig::default() };
    // variants are independent, so they build and train in parallel
    let rows: Vec<(AblationVariant, u64, u64, Option<f64>)> = AblationVariant::ALL
        .par_iter()
        .map(|&v| -> Result<_> {
            let mut model = DualVit::<f32>::build_variant(&c, v)?;
            let cost = count_macs(&model, res)?;
            let accuracy = match &data {
                Some(d) => Some(
                    train_toy(&mut model, d, &tc, |_| {})
                        .map_err(|e| anyhow::anyhow!("variant {v}: {e}"))?
                        .final_accuracy,
                ),
                None => None,
            };
            Ok((v, cost.params, cost.macs, accuracy))
        })
        .collect::<Result<_>>()?;
    let by_variant: BTreeMap<char, u64> = rows.iter().map(|r| (r.0.letter(), r.1)).collect();
    let full = by_variant[&'d'];
    let rows: Vec<AblationRow> = rows
        .into_iter()
        .map(|(variant, params, macs, accuracy)| AblationRow {
            variant,
            description: variant.description(),
            params,
            delta_params: params as i64 - full as i64,
            macs,
            giga_macs: macs as f64 / 1e9,
            accuracy,
        })
        .collect();
    let (a, b, cc, d) = (by_variant[&'a'], by_variant[&'b'], by_variant[&'c'], full);
    let ordering = b < a && a < cc && cc == d;

    let out = json!({
        "model": name,
        "resolution": res,
        "train_steps": args.train_steps,
        "rows": rows,
        "ordering_b_a_c_d": ordering,
    });
    ctx.emit(&out, || {
        let mut header = vec!["variant", "params", "delta", "GMACs", "description"];
        if data.is_some() {
            header.insert(4, "accuracy");
        }
        let table_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.variant.to_string(),
                    r.params.to_string(),
                    format!("{:+}", r.delta_params),
                    format!("{:.4}", r.giga_macs),
                    r.description.to_string(),
                ];
                if let Some(acc) = r.accuracy {
                    row.insert(4, format!("{:.2}%", 100.0 * acc));
                }
                row
            })
            .collect();
        let verdict = if ordering { "holds" } else { "does not hold" };
        format!(
            "{name} at {res}x{res}, stages 1-2 rewritten\n{}\nparameter ordering b < a < c = d {verdict}",
            table::render(&header, &table_rows)
        )
    })?;
    Ok(Status::Ok)
}

fn gen_data(ctx: &Ctx, args: &GenDataArgs) -> Result<Status> {
    let data = make_synthetic(args.classes, args.per_class, args.res, ctx.seed())?;
    dataset::write(&args.out, &data)?;
    let bytes = std::fs::metadata(&args.out).map(|m| m.len()).unwrap_or(0);
    let out = json!({
        "path": args.out,
        "samples": data.len(),
        "classes": data.num_classes,
        "resolution": args.res,
        "bytes": bytes,
    });
    ctx.emit(&out, || {
        format!(
            "wrote {} samples ({} classes, {}x{}) to {} ({bytes} bytes)",
            data.len(),
            data.num_classes,
            args.res,
            args.res,
            args.out.display()
        )
    })?;
    Ok(Status::Ok)
}
