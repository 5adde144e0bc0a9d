use std::fs;
use std::path::{Path, PathBuf};

use ogflow::datagen::{
    gen_scene, list_pairs, load_dir, make_synthetic_pair, read_pair, scene_file_name, write_pair, ScenePair,
};
use ogflow::evalkit::{aggregate, evaluate_sample, flow_metrics, MetricsReport};
use ogflow::network::predict;
use ogflow::trainer::{evaluate, load_checkpoint, save_checkpoint, TrainMode, Trainer};
use ogflow::verify::{gradcheck_suite, selfcheck_suite, CheckOutcome};
use ogflow::Exec;

use crate::cli::{Cli, Command};
use crate::config::RunConfig;
use crate::Failure;

pub fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(&cli.overrides)?;
    let exec = if cfg.deterministic {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let out = cli.overrides.out.clone();
    let name = match &cli.command {
        Command::Gen { .. } => "gen",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Infer { .. } => "infer",
        Command::Gradcheck => "gradcheck",
        Command::Selfcheck { .. } => "selfcheck",
    };
    eprintln!("ogflow {name}\n{}", cfg.to_json());

    match cli.command {
        Command::Gen { scenes, synthetic } => gen(&cfg, exec, scenes, synthetic, &out_dir(out, "scenes")?),
        Command::Train {
            data,
            heldout,
            self_supervised,
            resume,
        } => train(
            &cfg,
            exec,
            &data,
            heldout.as_deref(),
            self_supervised,
            resume.as_deref(),
            &out_dir(out, "run")?,
        ),
        Command::Eval {
            data,
            checkpoint,
            predictions,
        } => eval(
            &cfg,
            exec,
            &data,
            checkpoint.as_deref(),
            predictions.as_deref(),
            out.as_deref(),
        ),
        Command::Infer { checkpoint, pair } => infer(
            &cfg,
            &checkpoint,
            &pair,
            &out.unwrap_or_else(|| "prediction.ogf".into()),
        ),
        Command::Gradcheck => report_checks(gradcheck_suite(cfg.seed)),
        Command::Selfcheck { trials } => report_checks(selfcheck_suite(cfg.seed, trials)),
    }
}

fn out_dir(out: Option<PathBuf>, default: &str) -> Result<PathBuf, Failure> {
    let dir = out.unwrap_or_else(|| default.into());
    fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn require_dir(dir: &Path) -> Result<(), Failure> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Failure::Io(format!("{}: not a directory", dir.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn gen(cfg: &RunConfig, exec: Exec, scenes: usize, synthetic: bool, dir: &Path) -> Result<(), Failure> {
    let pairs = exec.map_range(scenes, |i| -> ogflow::Result<ScenePair> {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let scene = gen_scene(&cfg.scene, seed)?;
        if synthetic {
            Ok(make_synthetic_pair(&scene.source, &cfg.synthetic.with_seed(seed))?.pair)
        } else {
            Ok(scene)
        }
    });
    for (i, pair) in pairs.into_iter().enumerate() {
        write_pair(&pair?, &dir.join(scene_file_name(i)))?;
    }
    write_text(&dir.join("config.json"), &cfg.to_json())?;
    println!("wrote {scenes} pairs to {}", dir.display());
    Ok(())
}

fn train(
    cfg: &RunConfig,
    exec: Exec,
    data: &Path,
    heldout: Option<&Path>,
    self_supervised: bool,
    resume: Option<&Path>,
    dir: &Path,
) -> Result<(), Failure> {
    let mode = if self_supervised {
        TrainMode::SelfSupervised
    } else {
        TrainMode::Supervised
    };
    require_dir(data)?;
    let mut pairs = load_dir(data)?;
    if pairs.is_empty() {
        return Err(Failure::Usage(format!("no .ogf pairs in {}", data.display())));
    }
    if self_supervised {
        pairs = pairs.iter().map(ScenePair::unlabeled).collect();
    }
    log::info!("loaded {} training pairs from {}", pairs.len(), data.display());
    let heldout = match heldout {
        Some(d) => {
            require_dir(d)?;
            load_dir(d)?
        }
        None => Vec::new(),
    };
    let trainer = match resume {
        Some(path) => Trainer::resume(load_checkpoint(path, Some(&cfg.model))?, cfg.train.clone(), mode)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), mode)?,
    };
    let mut trainer = trainer.with_synthetic(cfg.synthetic.clone()).with_exec(exec);
    let trace = trainer.run(&pairs, &heldout, None)?;
    for (epoch, r) in &trace.heldout {
        println!(
            "epoch {epoch}: epe_full {:.6} epe {:.6} occ_accuracy {:.6}",
            r.epe_full,
            r.epe,
            r.occ_accuracy.unwrap_or(f64::NAN)
        );
    }
    if let Some(last) = trace.steps.last() {
        println!("step {} loss {:.6}", last.step + 1, last.loss);
    }
    save_checkpoint(&trainer.checkpoint(), &dir.join("model.ogck"))?;
    let trace_json = serde_json::to_string_pretty(&trace).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_text(&dir.join("trace.json"), &trace_json)?;
    write_text(&dir.join("config.json"), &cfg.to_json())?;
    println!("checkpoint written to {}", dir.join("model.ogck").display());
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    exec: Exec,
    data: &Path,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    require_dir(data)?;
    let report = match (checkpoint, predictions) {
        (Some(path), _) => {
            let ckpt = load_checkpoint(path, None)?;
            evaluate(&ckpt.params, &ckpt.model, &load_dir(data)?, exec)?
        }
        (None, Some(pred_dir)) => {
            let files = list_pairs(data)?;
            let reports = exec.map_slice(&files, |file| -> ogflow::Result<MetricsReport> {
                let pair = read_pair(file)?;
                let name = file.file_name().expect("listed files have names");
                let pred = read_pair(&pred_dir.join(name))?;
                let (gt_flow, gt_occ) = pair.labels()?;
                let flow = pred.gt_flow.as_ref().ok_or(ogflow::Error::MissingGroundTruth)?;
                match &pred.gt_occlusion {
                    Some(occ) => evaluate_sample(flow, occ, gt_flow, gt_occ),
                    None => flow_metrics(flow, gt_flow, gt_occ),
                }
            });
            aggregate(&reports.into_iter().collect::<ogflow::Result<Vec<_>>>()?)?
        }
        (None, None) => return Err(Failure::Usage("eval needs --checkpoint or --predictions".into())),
    };
    print!("{}", report.to_text());
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
        write_text(&dir.join("report.txt"), &report.to_text())?;
        write_text(&dir.join("report.json"), &report.to_json())?;
        write_text(&dir.join("config.json"), &cfg.to_json())?;
    }
    Ok(())
}

fn infer(cfg: &RunConfig, checkpoint: &Path, pair: &Path, out: &Path) -> Result<(), Failure> {
    let ckpt = load_checkpoint(checkpoint, None)?;
    let input = read_pair(pair)?;
    let pred = predict(&input.source, &input.target, &ckpt.params, &ckpt.model)?;
    let result = ScenePair::new(input.source, input.target, Some(pred.flow), Some(pred.occlusion))?;
    write_pair(&result, out)?;
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".config.json");
    write_text(Path::new(&sidecar), &cfg.to_json())?;
    println!("prediction written to {}", out.display());
    Ok(())
}

fn report_checks(checks: Vec<CheckOutcome>) -> Result<(), Failure> {
    let mut failed = Vec::new();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "{} check(s) failed: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}
