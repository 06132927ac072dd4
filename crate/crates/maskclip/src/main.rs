use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use maskclip::error::{Error, Result};
use maskclip::eval::{
    self, flops_baseline, flops_forward, instance_ap, miou, panoptic_quality_dataset,
    vit_l14_640, InstanceGt, InstancePrediction, MetricsReport,
};
use maskclip::io;
use maskclip::mask_tokens::DEFAULT_THRESHOLD;
use maskclip::pipeline::{
    classify, clip_baseline, merge_panoptic, propose_masks, EmbeddingTable, PanopticMap,
    SegmentPrediction, DEFAULT_MIN_AREA, DEFAULT_PROPOSAL_QUANTILE, DEFAULT_TEMPERATURE,
};
use maskclip::rma::{self, RMAParams};
use maskclip::synth;
use maskclip::tensor::Tensor;
use maskclip::training::{fit, LossWeights};
use maskclip::vit::{FrozenWeights, ViTConfig};

/// Open-vocabulary segmentation with mask class tokens on a frozen ViT.
#[derive(Parser)]
#[command(name = "maskclip", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: seeded weights, prototype embedding
    /// table, and per-sample images, GT masks, and coarse proposals.
    GenData {
        /// output directory
        #[arg(long)]
        out: PathBuf,
        /// number of samples (sample 0 is the calibration scene)
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Segment one image: load or propose masks, encode, classify against
    /// the table, and merge into a panoptic map.
    Segment(SegmentArgs),
    /// Per-mask crop-and-encode baseline: one forward pass per mask.
    Baseline {
        #[arg(long)]
        image: PathBuf,
        /// MCM1 file or directory of 8-bit PGM masks
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        temperature: f64,
        #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
        min_area: usize,
    },
    /// Train the relative-mask-attention parameters on a generated dataset
    /// with full-batch gradient descent; the backbone stays frozen.
    TrainToy {
        /// dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
        /// weights file (defaults to <data>/weights.mcw)
        #[arg(long)]
        weights: Option<PathBuf>,
        /// parameters to continue from; fresh identity-initialized ones otherwise
        #[arg(long)]
        init: Option<PathBuf>,
        /// output parameter file
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// comma-separated 1-based layer indices, e.g. 2,4,6,8
        #[arg(long)]
        rma_layers: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        temperature: f64,
    },
    /// Compare a predictions directory against a dataset and emit the
    /// metrics report (pq, sq, rq, pq_th, pq_st, miou, ap, ap50, ap75,
    /// tflops) as JSON.
    Eval {
        /// dataset directory from gen-data (ground truth)
        #[arg(long)]
        data: PathBuf,
        /// directory with sample<k>/panoptic.{pgm,json} predictions
        #[arg(long)]
        pred: PathBuf,
        /// report file; also printed to stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// parameter file whose layer set enters the FLOPs estimate
        #[arg(long)]
        rma: Option<PathBuf>,
    },
    /// Analytic cost model: single-pass vs per-mask-crop FLOPs.
    Flops {
        #[arg(long, default_value_t = vit_l14_640().image_size)]
        image_size: usize,
        #[arg(long, default_value_t = vit_l14_640().patch_size)]
        patch_size: usize,
        #[arg(long, default_value_t = vit_l14_640().depth)]
        depth: usize,
        #[arg(long, default_value_t = vit_l14_640().dim)]
        dim: usize,
        #[arg(long, default_value_t = vit_l14_640().heads)]
        heads: usize,
        #[arg(long, default_value_t = vit_l14_640().mlp_ratio)]
        mlp_ratio: usize,
        #[arg(long, default_value_t = vit_l14_640().out_dim)]
        out_dim: usize,
        /// number of masks
        #[arg(long, default_value_t = 100)]
        masks: usize,
        /// comma-separated 1-based layer indices with relative attention
        #[arg(long)]
        rma_layers: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    image: PathBuf,
    /// MCM1 file or directory of 8-bit PGM masks; omit with --propose
    #[arg(long, conflicts_with = "propose")]
    masks: Option<PathBuf>,
    /// derive class-agnostic proposals from the image itself
    #[arg(long)]
    propose: bool,
    #[arg(long)]
    weights: PathBuf,
    /// trained parameter file; plain mask-class-token forward if omitted
    #[arg(long)]
    rma: Option<PathBuf>,
    #[arg(long)]
    table: PathBuf,
    /// output directory for panoptic.pgm, panoptic.json, scores.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
    min_area: usize,
    #[arg(long, default_value_t = DEFAULT_PROPOSAL_QUANTILE)]
    quantile: f64,
}

fn parse_layer_set(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad layer index {t:?}")))
        })
        .collect()
}

#[derive(Serialize)]
struct MaskScore {
    index: usize,
    category: usize,
    name: String,
    confidence: f64,
    scores: Vec<f64>,
}

#[derive(Serialize)]
struct ScoresFile {
    masks: Vec<MaskScore>,
}

fn write_scores(path: &std::path::Path, scores: &Tensor, table: &EmbeddingTable) -> Result<()> {
    let mut masks = Vec::new();
    for i in 0..scores.shape()[0] {
        let row = scores.row(i);
        let (category, &confidence) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        masks.push(MaskScore {
            index: i,
            category,
            name: table.entries()[category].name.clone(),
            confidence,
            scores: row.to_vec(),
        });
    }
    io::write_atomic(path, &serde_json::to_vec_pretty(&ScoresFile { masks })?)
}

fn predictions_from_scores(
    masks: &maskclip::mask_tokens::MaskSet,
    scores: &Tensor,
) -> Result<Vec<SegmentPrediction>> {
    (0..masks.len())
        .map(|i| {
            let mask = Tensor::from_vec(
                &[masks.height(), masks.width()],
                masks.pixels(i).to_vec(),
            )?;
            SegmentPrediction::from_scores(mask, scores.row(i).to_vec())
        })
        .collect()
}

fn write_panoptic_outputs(
    out: &std::path::Path,
    map: &PanopticMap,
    scores: &Tensor,
    table: &EmbeddingTable,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    io::save_panoptic(&out.join("panoptic.pgm"), &out.join("panoptic.json"), map)?;
    write_scores(&out.join("scores.json"), scores, table)
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let weights = io::load_frozen_weights(&a.weights)?;
    let table = io::load_table(&a.table)?;
    let image = io::load_ppm(&a.image)?;
    let masks = match (&a.masks, a.propose) {
        (Some(path), false) => io::load_mask_set(path)?,
        (None, true) => propose_masks(&image, a.quantile, a.min_area)?,
        _ => return Err(Error::Invalid("need exactly one of --masks or --propose".into())),
    };
    let params = a.rma.as_deref().map(io::load_rma_params).transpose()?;
    let out = rma::forward(
        &image,
        &masks,
        &weights,
        params.as_ref().map(|(_, p)| p),
        false,
    )?;
    let scores = classify(&out.mask_features, &table, a.temperature)?;
    let preds = predictions_from_scores(&out.refined, &scores)?;
    let map = merge_panoptic(&preds, &table, a.min_area)?;
    write_panoptic_outputs(&a.out, &map, &scores, &table)
}

fn load_weights_for(data: &std::path::Path, explicit: &Option<PathBuf>) -> Result<FrozenWeights> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| data.join("weights.mcw"));
    io::load_frozen_weights(&path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, samples, seed } => {
            let weights = FrozenWeights::seeded(ViTConfig::toy(), seed)?;
            synth::generate_dataset(&out, &weights, samples, seed)
        }
        Command::Segment(a) => cmd_segment(a),
        Command::Baseline {
            image,
            masks,
            weights,
            table,
            out,
            temperature,
            min_area,
        } => {
            let weights = io::load_frozen_weights(&weights)?;
            let table = io::load_table(&table)?;
            let image = io::load_ppm(&image)?;
            let masks = io::load_mask_set(&masks)?;
            let scores = clip_baseline(&image, &masks, &weights, &table, temperature)?;
            let preds = predictions_from_scores(&masks, &scores)?;
            let map = merge_panoptic(&preds, &table, min_area)?;
            write_panoptic_outputs(&out, &map, &scores, &table)
        }
        Command::TrainToy {
            data,
            weights,
            init,
            out,
            steps,
            lr,
            rma_layers,
            seed,
            temperature,
        } => {
            let weights = load_weights_for(&data, &weights)?;
            let (samples, table) = io::load_dataset(&data)?;
            let params = match init {
                Some(path) => io::load_rma_params(&path)?.1,
                None => {
                    let layers = match rma_layers {
                        Some(spec) => parse_layer_set(&spec)?,
                        None => RMAParams::default_layer_set(weights.config.depth),
                    };
                    RMAParams::init(&weights, &layers, seed)?
                }
            };
            let report = fit(
                &samples,
                &weights,
                &params,
                &table,
                temperature,
                &LossWeights::default(),
                steps,
                lr,
            )?;
            io::save_rma_params(&out, weights.config, &report.params)?;
            let losses = serde_json::to_vec_pretty(&report.losses)?;
            io::write_atomic(&out.with_extension("losses.json"), &losses)?;
            if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
                println!("loss {first:.6} -> {last:.6} over {steps} steps");
            }
            Ok(())
        }
        Command::Eval { data, pred, out, rma } => {
            let weights = load_weights_for(&data, &None)?;
            let (samples, table) = io::load_dataset(&data)?;
            if samples.is_empty() {
                return Err(Error::Invalid("dataset has no samples".into()));
            }
            let layer_set = rma
                .as_deref()
                .map(io::load_rma_params)
                .transpose()?
                .map(|(_, p)| p.layer_set())
                .unwrap_or_default();
            let report = evaluate(&weights.config, &samples, &table, &pred, &layer_set)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(path) = out {
                io::write_atomic(&path, json.as_bytes())?;
            }
            Ok(())
        }
        Command::Flops {
            image_size,
            patch_size,
            depth,
            dim,
            heads,
            mlp_ratio,
            out_dim,
            masks,
            rma_layers,
            out,
        } => {
            let config = ViTConfig {
                image_size,
                patch_size,
                depth,
                dim,
                heads,
                mlp_ratio,
                out_dim,
            };
            config.validate()?;
            let layers = match rma_layers {
                Some(spec) => parse_layer_set(&spec)?,
                None => Vec::new(),
            };
            let forward = flops_forward(&config, masks, &layers);
            let baseline = flops_baseline(&config, masks);
            #[derive(Serialize)]
            struct FlopsOut {
                forward: eval::FlopsEstimate,
                baseline: eval::FlopsEstimate,
                ratio: f64,
                tflops: f64,
            }
            let report = FlopsOut {
                ratio: baseline.total_flops / forward.total_flops,
                tflops: forward.tflops(),
                forward,
                baseline,
            };
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(path) = out {
                io::write_atomic(&path, json.as_bytes())?;
            }
            Ok(())
        }
    }
}

/// Score a predictions directory against dataset ground truth. PQ sums
/// match statistics per category across samples; mIoU and AP pool pixels
/// and instances over the whole set.
fn evaluate(
    config: &ViTConfig,
    samples: &[maskclip::training::TrainSample],
    table: &EmbeddingTable,
    pred_dir: &std::path::Path,
    rma_layers: &[usize],
) -> Result<MetricsReport> {
    let mut pred_maps = Vec::new();
    let mut gt_maps = Vec::new();
    // categories come from gt.json files the dataset loader already
    // validated; re-derive them from the sample dirs
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.len() != samples.len() {
        return Err(Error::Invalid(format!(
            "{} prediction dirs for {} samples",
            dirs.len(),
            samples.len()
        )));
    }
    for (sample, dir) in samples.iter().zip(&dirs) {
        pred_maps.push(io::load_panoptic(
            &dir.join("panoptic.pgm"),
            &dir.join("panoptic.json"),
        )?);
        gt_maps.push(synth::gt_panoptic(&sample.gt_masks, &sample.gt_categories)?);
    }

    let pairs: Vec<(&PanopticMap, &PanopticMap)> =
        pred_maps.iter().zip(gt_maps.iter().map(|g| g)).map(|(p, g)| (p, g)).collect();
    let pq = panoptic_quality_dataset(&pairs)?;

    // pixel-level labels pooled across samples
    let label_map = |map: &PanopticMap| -> Vec<i64> {
        map.ids
            .iter()
            .map(|&id| {
                if id == 0 {
                    -1
                } else {
                    map.segments[(id - 1) as usize].category as i64
                }
            })
            .collect()
    };
    let mut pred_labels = Vec::new();
    let mut gt_labels = Vec::new();
    for (p, g) in &pairs {
        pred_labels.extend(label_map(p));
        gt_labels.extend(label_map(g));
    }
    let (miou_val, _) = miou(&pred_labels, &gt_labels, table.len())?;

    // instances pooled with per-sample pixel offsets so cross-sample
    // matches are impossible
    let total: usize = pred_maps.iter().map(|m| m.ids.len()).sum();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut offset = 0usize;
    for (p, g) in &pairs {
        for (si, seg) in p.segments.iter().enumerate() {
            if !seg.is_thing {
                continue;
            }
            let mut mask = vec![false; total];
            for (px, &id) in p.ids.iter().enumerate() {
                if id == (si + 1) as u32 {
                    mask[offset + px] = true;
                }
            }
            preds.push(InstancePrediction {
                mask,
                category: seg.category,
                confidence: seg.confidence,
            });
        }
        for (si, seg) in g.segments.iter().enumerate() {
            if !seg.is_thing {
                continue;
            }
            let mut mask = vec![false; total];
            for (px, &id) in g.ids.iter().enumerate() {
                if id == (si + 1) as u32 {
                    mask[offset + px] = true;
                }
            }
            gts.push(InstanceGt {
                mask,
                category: seg.category,
            });
        }
        offset += p.ids.len();
    }
    let ap = instance_ap(&preds, &gts, table.len())?;

    let max_masks = samples.iter().map(|s| s.proposals.len()).max().unwrap_or(0);
    let tflops = flops_forward(config, max_masks, rma_layers).tflops();

    Ok(MetricsReport {
        pq: 100.0 * pq.pq,
        sq: 100.0 * pq.sq,
        rq: 100.0 * pq.rq,
        pq_th: 100.0 * pq.pq_things,
        pq_st: 100.0 * pq.pq_stuff,
        miou: miou_val,
        ap: 100.0 * ap.ap,
        ap50: 100.0 * ap.ap50,
        ap75: 100.0 * ap.ap75,
        tflops,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
