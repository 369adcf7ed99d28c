//! End-to-end experiment: pretrain, search, Phase 1, joint training, eval.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{image_grid, load_dataset, Dataset};
use crate::diffusion::checkpoint::{read_checkpoint_with_header, write_checkpoint_tagged};
use crate::diffusion::{pretrain, sample, DenoiserModel, NoiseSchedule, PretrainLog, Tap};
use crate::engine::{embed_mean, new_head, train, ClusterState, Readout, TrainLog, TrainSetup};
use crate::error::{DiecError, Result};
use crate::metrics::{evaluate, Metrics};
use crate::numeric::{moving_average_centered, pca_fit_transform, Rng, Tensor};
use crate::report::{heatmap_svg, line_chart_svg, ArtifactDir, Heatmap, LineChart, Series};
use crate::search::{labeled_grid, run_optimal_search, LabeledGrid, SearchConfig, SearchResult};

const MODEL_STREAM: u64 = 100;
const PRETRAIN_STREAM: u64 = 101;
const TRAIN_STREAM: u64 = 103;
const HEAD_STREAM: u64 = 104;
const SAMPLE_STREAM: u64 = 105;
const SCATTER_STREAM: u64 = 106;

pub const PRETRAINED_CHECKPOINT: &str = "checkpoint_pretrained.dck";
pub const FINETUNED_CHECKPOINT: &str = "checkpoint_finetuned.dck";
pub const SEARCH_JSON: &str = "search.json";

/// The search configuration used inside an experiment: the global seed
/// replaces the search's own seed.
pub fn effective_search(cfg: &ExperimentConfig) -> SearchConfig {
    SearchConfig { seed: cfg.seed, ..cfg.search.clone() }
}

fn root(cfg: &ExperimentConfig) -> Rng {
    Rng::new(cfg.seed)
}

fn tag<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    tag("dataset", load_dataset(&cfg.dataset))
}

fn write_samples(art: &mut ArtifactDir, name: &str, model: &DenoiserModel, sched: &NoiseSchedule, cfg: &ExperimentConfig) -> Result<()> {
    if cfg.samples == 0 {
        return Ok(());
    }
    let x = sample(model, sched, cfg.samples, &root(cfg).substream(SAMPLE_STREAM))?;
    let cols = (cfg.samples as f64).sqrt().ceil() as usize;
    art.write_pnm(name, &image_grid(&x, cols)?)
}

pub fn stage_pretrain(
    cfg: &ExperimentConfig,
    data: &Dataset,
    art: &mut ArtifactDir,
) -> Result<(DenoiserModel, NoiseSchedule, PretrainLog)> {
    tag("pretrain", (|| {
        let sched = cfg.backbone.schedule.build()?;
        let mut model = DenoiserModel::new(cfg.backbone.unet.clone(), &mut root(cfg).substream(MODEL_STREAM))?;
        let log = pretrain(&mut model, &data.images, &cfg.backbone.pretrain, &sched, &root(cfg).substream(PRETRAIN_STREAM))?;
        let mut csv = String::from("epoch,loss\n");
        for (e, l) in log.epoch_loss.iter().enumerate() {
            csv.push_str(&format!("{e},{l}\n"));
        }
        art.write_csv("pretrain_log.csv", &csv)?;
        let mut ck = Vec::new();
        write_checkpoint_tagged(&mut ck, &model, &sched, Some(art.hash()))?;
        art.write_bytes(PRETRAINED_CHECKPOINT, &ck)?;
        write_samples(art, "samples_pretrained.pgm", &model, &sched, cfg)?;
        Ok((model, sched, log))
    })())
}

/// Loads a checkpoint written for the config hash `hash`.
pub fn load_checkpoint(path: &Path, hash: &str) -> Result<(DenoiserModel, NoiseSchedule)> {
    let f = std::fs::File::open(path)?;
    let (header, model, sched) = read_checkpoint_with_header(std::io::BufReader::new(f))?;
    match header.config_hash.as_deref() {
        Some(h) if h == hash => Ok((model, sched)),
        other => Err(DiecError::Config(format!(
            "{} was written for config {}, not {hash}",
            path.display(),
            other.unwrap_or("<none>")
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub result: SearchResult,
    pub labeled: Option<LabeledGrid>,
}

impl SearchReport {
    /// Labeled ACC at the selected cell, when the labeled grid was computed.
    pub fn selected_acc(&self) -> Option<f64> {
        self.labeled.as_ref()?.acc_at(self.result.col, self.result.cot)
    }
}

fn tap_labels(taps: &[Tap]) -> Vec<String> {
    taps.iter().map(|t| t.name().to_string()).collect()
}

/// Rows of `values` re-ordered by network position.
fn network_order(taps: &[Tap], values: &[Vec<f64>]) -> (Vec<Tap>, Vec<Vec<f64>>) {
    let mut idx: Vec<usize> = (0..taps.len()).collect();
    idx.sort_by_key(|&i| taps[i].position());
    (idx.iter().map(|&i| taps[i]).collect(), idx.iter().map(|&i| values[i].clone()).collect())
}

pub fn stage_search(
    cfg: &ExperimentConfig,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    data: &Dataset,
    art: &mut ArtifactDir,
) -> Result<SearchReport> {
    tag("search", (|| {
        let scfg = effective_search(cfg);
        let result = run_optimal_search(model, sched, &data.images, data.classes, &scfg)?;
        art.write_json(SEARCH_JSON, &result)?;
        art.write_csv("score_grid.csv", &result.grid.to_csv(true))?;
        art.write_csv("score_grid_raw.csv", &result.grid.to_csv(false))?;
        let (taps, vals) = network_order(&result.grid.taps, &result.grid.smoothed);
        let cols: Vec<String> = result.grid.timesteps.iter().map(|t| t.to_string()).collect();
        let hi_row = taps.iter().position(|&t| t == result.col);
        let hi_col = result.grid.timesteps.iter().position(|&t| t == result.cot);
        art.write_svg(
            "layer_heatmap.svg",
            &heatmap_svg(&Heatmap {
                title: "Smoothed Scott Score by layer and timestep",
                rows: tap_labels(&taps),
                cols: cols.clone(),
                values: &vals,
                highlight: hi_row.zip(hi_col),
            })?,
        )?;
        let tr = &result.trace;
        let mut csv = String::from("t,raw,online,smoothed\n");
        for i in 0..tr.timesteps.len() {
            csv.push_str(&format!("{},{},{},{}\n", tr.timesteps[i], tr.raw[i], tr.online[i], tr.smoothed[i]));
        }
        art.write_csv("cot_trace.csv", &csv)?;

        let labeled = if cfg.grid_full {
            let g = labeled_grid(model, sched, &data.images, &data.labels, data.classes, &scfg)?;
            art.write_csv("labeled_grid.csv", &g.to_csv())?;
            let (taps, vals) = network_order(&g.taps, &g.acc);
            let best = g.best();
            art.write_svg(
                "labeled_heatmap.svg",
                &heatmap_svg(&Heatmap {
                    title: "Labeled k-means ACC by layer and timestep",
                    rows: tap_labels(&taps),
                    cols: g.timesteps.iter().map(|t| t.to_string()).collect(),
                    values: &vals,
                    highlight: taps.iter().position(|&t| t == best.0).zip(g.timesteps.iter().position(|&t| t == best.1)),
                })?,
            )?;
            Some(g)
        } else {
            None
        };

        let pts = |ys: &[f64]| tr.timesteps.iter().zip(ys).map(|(&t, &y)| (t as f64, y)).collect::<Vec<_>>();
        let mut series = vec![
            Series { name: "SS raw".into(), points: pts(&tr.raw), color: "#999999", right_axis: false, dashed: true },
            Series { name: "SS smoothed".into(), points: pts(&tr.smoothed), color: "#d7191c", right_axis: false, dashed: false },
        ];
        let mut y2 = None;
        if let Some(g) = &labeled {
            if let Some(row) = g.taps.iter().position(|&t| t == result.col) {
                let acc = &g.acc[row];
                let sm = moving_average_centered(acc, scfg.window)?;
                let ap = |ys: &[f64]| g.timesteps.iter().zip(ys).map(|(&t, &y)| (t as f64, y)).collect::<Vec<_>>();
                series.push(Series { name: "ACC raw".into(), points: ap(acc), color: "#abd9e9", right_axis: true, dashed: true });
                series.push(Series { name: "ACC smoothed".into(), points: ap(&sm), color: "#2c7bb6", right_axis: true, dashed: false });
                y2 = Some("labeled ACC");
            }
        }
        art.write_svg(
            "cot_curve.svg",
            &line_chart_svg(&LineChart {
                title: &format!("Timestep scan at {}", result.col.name()),
                x_label: "timestep",
                y_label: "Scott Score",
                y2_label: y2,
                series,
                markers: vec![(result.cot as f64, format!("t*={}", result.cot))],
            }),
        )?;
        Ok(SearchReport { result, labeled })
    })())
}

/// Readout and labels persisted next to the DTF1 centroid/assignment files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStateMeta {
    pub readout: Readout,
    pub k: usize,
    pub alpha: f64,
    pub labels: Vec<usize>,
    pub centroids_file: String,
    pub q_file: String,
    pub p_file: String,
}

fn matrix_tensor(m: &crate::numeric::Matrix) -> Result<Tensor> {
    Tensor::new(vec![m.rows(), m.cols()], m.data().iter().map(|&v| v as f32).collect())
}

pub fn stage_train(
    cfg: &ExperimentConfig,
    model: &mut DenoiserModel,
    sched: &NoiseSchedule,
    data: &Dataset,
    col: Tap,
    cot: usize,
    art: &mut ArtifactDir,
) -> Result<(ClusterState, TrainLog)> {
    tag("train", (|| {
        let readout = Readout::new(col, cot, cfg.search.pooling);
        let mut head = new_head(model, readout, &root(cfg).substream(HEAD_STREAM));
        let setup = TrainSetup { data: &data.images, labels: Some(&data.labels), sched, readout, k: data.classes };
        let (state, log) = train(model, &mut head, &setup, &cfg.diec, &root(cfg).substream(TRAIN_STREAM))?;
        art.write_csv("train_log.csv", &log.to_csv())?;

        let epochs: Vec<f64> = log.epochs.iter().map(|r| r.epoch as f64).collect();
        let mut de = vec![(-1.0, log.initial_denoise_eval)];
        de.extend(epochs.iter().zip(&log.epochs).map(|(&e, r)| (e, r.denoise_eval)));
        let base = log.initial_denoise_eval;
        let band = |f: f64| vec![(-1.0, base * f), (epochs.last().copied().unwrap_or(0.0), base * f)];
        art.write_svg(
            "denoise_stability.svg",
            &line_chart_svg(&LineChart {
                title: if cfg.diec.use_lre { "Denoising loss during fine-tuning (with L_Re)" } else { "Denoising loss during fine-tuning (no L_Re)" },
                x_label: "epoch (-1 = before fine-tuning)",
                y_label: "fixed-set denoising MSE",
                y2_label: None,
                series: vec![
                    Series { name: "denoise eval".into(), points: de, color: "#d7191c", right_axis: false, dashed: false },
                    Series { name: "+10%".into(), points: band(1.1), color: "#999999", right_axis: false, dashed: true },
                    Series { name: "-10%".into(), points: band(0.9), color: "#999999", right_axis: false, dashed: true },
                ],
                markers: vec![],
            }),
        )?;

        art.write_bytes("centroids.dtf1", &matrix_tensor(&state.centroids)?.to_dtf1_bytes())?;
        art.write_bytes("soft_assignments.dtf1", &matrix_tensor(&state.q)?.to_dtf1_bytes())?;
        art.write_bytes("target_distribution.dtf1", &matrix_tensor(&state.p)?.to_dtf1_bytes())?;
        art.write_json(
            "cluster_state.json",
            &ClusterStateMeta {
                readout: state.readout,
                k: data.classes,
                alpha: state.alpha,
                labels: state.labels.clone(),
                centroids_file: "centroids.dtf1".into(),
                q_file: "soft_assignments.dtf1".into(),
                p_file: "target_distribution.dtf1".into(),
            },
        )?;

        let z = embed_mean(model, &head, &data.images, state.readout, cfg.diec.trials, sched, &root(cfg).substream(SCATTER_STREAM))?;
        if z.rows() > 2 && z.cols() >= 2 {
            let (_, y) = pca_fit_transform(&z, 2)?;
            let mut csv = String::from("pc1,pc2,label,cluster\n");
            for i in 0..y.rows() {
                csv.push_str(&format!("{},{},{},{}\n", y.row(i)[0], y.row(i)[1], data.labels[i], state.labels[i]));
            }
            art.write_csv("embedding_pca.csv", &csv)?;
        }
        let mut ck = Vec::new();
        write_checkpoint_tagged(&mut ck, model, sched, Some(art.hash()))?;
        art.write_bytes(FINETUNED_CHECKPOINT, &ck)?;
        write_samples(art, "samples_finetuned.pgm", model, sched, cfg)?;
        Ok((state, log))
    })())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub samples: usize,
    pub classes: usize,
    pub col: Tap,
    pub cot: usize,
    pub layer_scores: Vec<(Tap, f64)>,
    pub search_forward_passes: u64,
    pub search_tap_evaluations: u64,
    pub selected_labeled_acc: Option<f64>,
    pub best_labeled_cell: Option<(Tap, usize, f64)>,
    pub pretrain_final_loss: Option<f64>,
    pub phase1: Option<Metrics>,
    pub final_metrics: Metrics,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub initial_denoise_eval: f64,
    pub final_denoise_eval: f64,
    pub events: Vec<String>,
}

pub fn summarize(data: &Dataset, pre: Option<&PretrainLog>, search: &SearchReport, state: &ClusterState, log: &TrainLog) -> Result<RunSummary> {
    let r = &search.result;
    Ok(RunSummary {
        samples: data.labels.len(),
        classes: data.classes,
        col: r.col,
        cot: r.cot,
        layer_scores: r.layer_scores.clone(),
        search_forward_passes: r.counters.forward_passes,
        search_tap_evaluations: r.counters.tap_evaluations,
        selected_labeled_acc: search.selected_acc(),
        best_labeled_cell: search.labeled.as_ref().map(|g| g.best()),
        pretrain_final_loss: pre.and_then(|p| p.epoch_loss.last().copied()),
        phase1: log.phase1,
        final_metrics: tag("eval", evaluate(&data.labels, &state.labels))?,
        epochs_run: log.epochs.len(),
        early_stopped: log.early_stopped,
        initial_denoise_eval: log.initial_denoise_eval,
        final_denoise_eval: log.epochs.last().map_or(log.initial_denoise_eval, |r| r.denoise_eval),
        events: log.events.clone(),
    })
}

/// Runs every stage, writing artifacts into `cfg.output_dir`. Artifacts of
/// completed stages stay on disk when a later stage fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    tag("config", cfg.validate())?;
    let hash = cfg.hash()?;
    let mut art = ArtifactDir::open(Path::new(&cfg.output_dir), &hash)?;
    art.write_json("config.json", cfg)?;
    let data = load_data(cfg)?;
    let (mut model, sched, pre) = stage_pretrain(cfg, &data, &mut art)?;
    let search = stage_search(cfg, &model, &sched, &data, &mut art)?;
    let (state, log) = stage_train(cfg, &mut model, &sched, &data, search.result.col, search.result.cot, &mut art)?;
    let summary = summarize(&data, Some(&pre), &search, &state, &log)?;
    art.write_json("metrics.json", &summary)?;
    Ok(summary)
}

/// Labels from a text file with one non-negative integer per line.
pub fn read_label_file(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| l.parse::<usize>().map_err(|_| DiecError::Format(format!("{} line {}: '{l}' is not a label", path.display(), i + 1))))
        .collect()
}

pub fn evaluate_label_files(truth: &Path, pred: &Path) -> Result<Metrics> {
    evaluate(&read_label_file(truth)?, &read_label_file(pred)?)
}
