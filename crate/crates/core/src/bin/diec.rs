use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diec::config::ExperimentConfig;
use diec::data::image_grid;
use diec::diffusion::sample;
use diec::numeric::Rng;
use diec::pipeline::{
    evaluate_label_files, load_checkpoint, load_data, run_experiment, stage_pretrain, stage_search, stage_train, summarize,
    SearchReport, FINETUNED_CHECKPOINT, PRETRAINED_CHECKPOINT, SEARCH_JSON,
};
use diec::report::{verify_artifacts, ArtifactDir};
use diec::search::SearchResult;
use diec::{DiecError, Result};

#[derive(Parser)]
#[command(name = "diec", version, about = "Diffusion embedded clustering at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Update only the head and centroids during fine-tuning.
    #[arg(long, global = true)]
    freeze_backbone: bool,
    /// Drop the denoising term from the fine-tuning loss.
    #[arg(long, global = true)]
    no_lre: bool,
    /// Also compute the exhaustive labeled layer x timestep grid.
    #[arg(long, global = true)]
    grid_full: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the denoiser and write a checkpoint.
    Pretrain,
    /// Search for the clustering-optimal layer and timestep.
    Search,
    /// Phase-1 initialization and joint fine-tuning.
    Train,
    /// Score predicted labels against ground truth (one integer per line).
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Verify artifact hashes and summarize one or more run directories.
    Report {
        /// Run directories; defaults to `--out`.
        dirs: Vec<PathBuf>,
    },
    /// Draw samples from a checkpoint into a PGM grid.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Every stage end to end.
    Run,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.to_string_lossy().into_owned();
    }
    cfg.diec.freeze_backbone |= cli.freeze_backbone;
    if cli.no_lre {
        cfg.diec.use_lre = false;
    }
    cfg.grid_full |= cli.grid_full;
    cfg.validate()?;
    Ok(cfg)
}

fn open_dir(cfg: &ExperimentConfig) -> Result<ArtifactDir> {
    let mut art = ArtifactDir::open(Path::new(&cfg.output_dir), &cfg.hash()?)?;
    art.write_json("config.json", cfg)?;
    Ok(art)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Eval { truth, pred } = &cli.command {
        return print_json(&evaluate_label_files(truth, pred)?);
    }
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Eval { .. } => unreachable!(),
        Command::Run => print_json(&run_experiment(&cfg)?),
        Command::Pretrain => {
            let mut art = open_dir(&cfg)?;
            let data = load_data(&cfg)?;
            let (_, _, log) = stage_pretrain(&cfg, &data, &mut art)?;
            print_json(&log)
        }
        Command::Search => {
            let mut art = open_dir(&cfg)?;
            let data = load_data(&cfg)?;
            let (model, sched) = load_checkpoint(&art.path(PRETRAINED_CHECKPOINT), art.hash())?;
            let rep = stage_search(&cfg, &model, &sched, &data, &mut art)?;
            print_json(&serde_json::json!({
                "col": rep.result.col,
                "cot": rep.result.cot,
                "layer_scores": rep.result.layer_scores,
                "selected_labeled_acc": rep.selected_acc(),
                "best_labeled_cell": rep.labeled.as_ref().map(|g| g.best()),
            }))
        }
        Command::Train => {
            let mut art = open_dir(&cfg)?;
            let data = load_data(&cfg)?;
            let (mut model, sched) = load_checkpoint(&art.path(PRETRAINED_CHECKPOINT), art.hash())?;
            let text = std::fs::read_to_string(art.path(SEARCH_JSON))?;
            let result: SearchResult = serde_json::from_str(&text).map_err(|e| DiecError::Format(format!("{SEARCH_JSON}: {e}")))?;
            let (state, log) = stage_train(&cfg, &mut model, &sched, &data, result.col, result.cot, &mut art)?;
            let summary = summarize(&data, None, &SearchReport { result, labeled: None }, &state, &log)?;
            art.write_json("metrics.json", &summary)?;
            print_json(&summary)
        }
        Command::Sample { checkpoint, count } => {
            let mut art = open_dir(&cfg)?;
            let path = match checkpoint {
                Some(p) => p.clone(),
                None if art.path(FINETUNED_CHECKPOINT).exists() => art.path(FINETUNED_CHECKPOINT),
                None => art.path(PRETRAINED_CHECKPOINT),
            };
            let (model, sched) = load_checkpoint(&path, art.hash())?;
            let n = count.unwrap_or(cfg.samples).max(1);
            let x = sample(&model, &sched, n, &Rng::new(cfg.seed))?;
            art.write_pnm("samples_cli.pgm", &image_grid(&x, (n as f64).sqrt().ceil() as usize)?)?;
            println!("{}", art.path("samples_cli.pgm").display());
            Ok(())
        }
        Command::Report { dirs } => {
            let dirs = if dirs.is_empty() { vec![PathBuf::from(&cfg.output_dir)] } else { dirs.clone() };
            let mut hash: Option<String> = None;
            let mut rows = String::from("run,col,cot,phase1_acc,acc,nmi,ari,initial_denoise_eval,final_denoise_eval\n");
            for d in &dirs {
                let h = verify_artifacts(d)?;
                if let Some(prev) = &hash {
                    if *prev != h {
                        return Err(DiecError::Config(format!("{} has config hash {h}, expected {prev}", d.display())));
                    }
                }
                hash = Some(h);
                let text = std::fs::read_to_string(d.join("metrics.json"))?;
                let m: serde_json::Value = serde_json::from_str(&text)?;
                let f = |p: &str| m.pointer(p).map_or(String::new(), |v| v.to_string().trim_matches('"').to_string());
                rows.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    d.display(),
                    f("/col"),
                    f("/cot"),
                    f("/phase1/acc"),
                    f("/final_metrics/acc"),
                    f("/final_metrics/nmi"),
                    f("/final_metrics/ari"),
                    f("/initial_denoise_eval"),
                    f("/final_denoise_eval"),
                ));
            }
            let hash = hash.expect("at least one directory");
            let out = cli.out.clone().unwrap_or_else(|| dirs[0].clone());
            let mut art = ArtifactDir::open(&out, &hash)?;
            art.write_csv("report_summary.csv", &rows)?;
            print!("{rows}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
