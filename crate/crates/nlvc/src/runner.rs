//! Operator entry points shared by the CLI binary and the test harnesses:
//! train, eval, BD-rate, attention bench, and the noise probe, each with
//! file outputs and a run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::attention::{bench_attention, AttentionMode};
use crate::codec;
use crate::config::{config_hash, TrainConfig};
use crate::error::{Error, Result};
use crate::io::{self, generate, load_sequence, RdRow, RunManifest, Sequence};
use crate::metrics::{bd_rate, RdCurve, RdPoint};
use crate::model::Model;
use crate::params::{load_checkpoint, restore_into, save_checkpoint};
use crate::tensor::Flow;
use crate::training::{self, flows_for, noise_probe, train};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub manifest: PathBuf,
    pub params_hash: String,
    pub final_loss: f64,
}

/// Trains from a config and writes checkpoint, CSV log, and manifest into
/// `out_dir`.
pub fn cmd_train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let (model, outcome) = train(cfg)?;

    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &model.store, cfg)?;

    let log_path = out_dir.join("train_log.csv");
    let mut log = String::from("step,loss,rate,distortion\n");
    for row in &outcome.log {
        log.push_str(&format!(
            "{},{:.9},{:.9},{:.9}\n",
            row.step, row.loss, row.rate, row.distortion
        ));
    }
    write_text(&log_path, &log)?;

    let manifest_path = out_dir.join("train_manifest.json");
    RunManifest::new(
        "train",
        config_hash(cfg),
        cfg.seed,
        vec![ckpt_path.display().to_string(), log_path.display().to_string()],
    )
    .write(&manifest_path)?;

    Ok(TrainReport {
        checkpoint: ckpt_path,
        log: log_path,
        manifest: manifest_path,
        params_hash: model.store.content_hash(),
        final_loss: outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN),
    })
}

/// Loads a checkpoint into a freshly built model.
pub fn load_model(checkpoint: &Path) -> Result<(Model, TrainConfig)> {
    let (entries, cfg) = load_checkpoint(checkpoint)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    restore_into(&mut model.store, &entries)?;
    Ok((model, cfg))
}

/// Where the frames for an eval come from.
pub enum EvalSource {
    /// Use the sequence spec stored in the checkpoint.
    FromCheckpoint,
    /// Load frames from a directory or raw file.
    Path(PathBuf),
}

pub struct EvalReport {
    pub bitstream: PathBuf,
    pub frames_csv: PathBuf,
    pub rd_csv: PathBuf,
    pub manifest: PathBuf,
    pub aggregate_bpp: f64,
    pub mean_psnr: f64,
    pub mean_msssim: f64,
    pub intra_frames: Vec<usize>,
}

fn sequence_for_eval(cfg: &TrainConfig, source: &EvalSource) -> Result<(Sequence, Vec<Flow>)> {
    match source {
        EvalSource::FromCheckpoint => {
            let (seq, exact) = generate(&cfg.sequence)?;
            let flows = flows_for(cfg.flow_source, &seq, &exact);
            Ok((seq.clone(), flows.iter().map(|f| (**f).clone()).collect()))
        }
        EvalSource::Path(p) => {
            let seq = load_sequence(p)?;
            let flows = (0..seq.len()).map(|_| Flow::zero(seq.height(), seq.width())).collect();
            Ok((seq, flows))
        }
    }
}

/// Codes a sequence with a trained model, verifies the bitstream decodes to
/// bit-identical reconstructions, and writes per-frame plus aggregate
/// results.
pub fn cmd_eval(
    checkpoint: &Path,
    source: &EvalSource,
    intra_period: i64,
    label: &str,
    out_dir: &Path,
) -> Result<EvalReport> {
    ensure_dir(out_dir)?;
    let (model, cfg) = load_model(checkpoint)?;
    let (seq, flows) = sequence_for_eval(&cfg, source)?;
    let result = codec::code_sequence(&model, &seq, &flows, intra_period, cfg.intra_q, true)?;

    let bitstream = out_dir.join(format!("{label}.nlvc"));
    fs::write(&bitstream, &result.container)
        .map_err(|e| Error::io(bitstream.display().to_string(), e))?;

    let frames_csv = out_dir.join(format!("{label}_frames.csv"));
    let mut csv = String::from("frame,kind,bits,bits_estimated,bpp,psnr_db,msssim\n");
    for s in &result.stats {
        csv.push_str(&format!(
            "{},{},{:.2},{:.2},{:.8},{:.6},{:.8}\n",
            s.index,
            if s.intra { "intra" } else { "inter" },
            s.bits,
            s.bits_estimated,
            s.bpp,
            s.psnr,
            s.msssim
        ));
    }
    write_text(&frames_csv, &csv)?;

    let rd_csv = out_dir.join("rd.csv");
    io::write_rd_rows(
        &rd_csv,
        &[RdRow {
            label: label.to_string(),
            bpp: result.aggregate_bpp,
            psnr_db: result.mean_psnr,
            msssim: result.mean_msssim,
        }],
        true,
    )?;

    let manifest = out_dir.join(format!("{label}_manifest.json"));
    RunManifest::new(
        "eval",
        config_hash(&cfg),
        cfg.seed,
        vec![
            bitstream.display().to_string(),
            frames_csv.display().to_string(),
            rd_csv.display().to_string(),
        ],
    )
    .write(&manifest)?;

    Ok(EvalReport {
        bitstream,
        frames_csv,
        rd_csv,
        manifest,
        aggregate_bpp: result.aggregate_bpp,
        mean_psnr: result.mean_psnr,
        mean_msssim: result.mean_msssim,
        intra_frames: result
            .stats
            .iter()
            .filter(|s| s.intra)
            .map(|s| s.index)
            .collect(),
    })
}

/// BD-rate of a test RD table against an anchor (PSNR as quality).
pub fn cmd_bdrate(test_csv: &Path, anchor_csv: &Path) -> Result<f64> {
    let to_curve = |path: &Path| -> Result<RdCurve> {
        let rows = io::read_rd_rows(path)?;
        if rows.is_empty() {
            return Err(Error::input(format!("{}: empty RD table", path.display())));
        }
        let label = rows[0].label.clone();
        RdCurve::new(
            label,
            rows.iter().map(|r| RdPoint { bpp: r.bpp, quality: r.psnr_db }).collect(),
        )
    };
    bd_rate(&to_curve(test_csv)?, &to_curve(anchor_csv)?)
}

/// Times both attention routes over a grid of sequence lengths and writes
/// the CSV consumed by plotting tools.
pub fn cmd_bench(lengths: &[usize], d: usize, heads: usize, runs: usize, out: &Path) -> Result<()> {
    let mut file = fs::File::create(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    writeln!(file, "mode,L,d,heads,mul_adds,wall_ns")
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    for &l in lengths {
        for mode in [AttentionMode::Vanilla, AttentionMode::Linear] {
            let rec = bench_attention(mode, l, d, heads, runs);
            writeln!(
                file,
                "{},{},{},{},{},{}",
                rec.mode, rec.l, rec.d, rec.heads, rec.mul_adds, rec.wall_ns
            )
            .map_err(|e| Error::io(out.display().to_string(), e))?;
        }
    }
    Ok(())
}

pub struct ProbeReport {
    pub csv: PathBuf,
    pub rows: Vec<training::ProbeRow>,
}

/// Runs the clean-vs-noisy coding comparison and writes the per-frame CSV.
pub fn cmd_probe(
    checkpoint: &Path,
    inject_at: usize,
    noise_std: f64,
    out_dir: &Path,
) -> Result<ProbeReport> {
    ensure_dir(out_dir)?;
    let (model, cfg) = load_model(checkpoint)?;
    let (seq, exact) = generate(&cfg.sequence)?;
    let flows = flows_for(cfg.flow_source, &seq, &exact);
    let rows = noise_probe(&model, &seq, &flows, cfg.intra_q, inject_at, noise_std, cfg.seed)?;
    let csv_path = out_dir.join("probe.csv");
    let mut csv = String::from("frame,psnr_clean,bpp_clean,psnr_noisy,bpp_noisy,bpp_delta\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.8},{:.6},{:.8},{:.8}\n",
            r.frame,
            r.psnr_clean,
            r.bpp_clean,
            r.psnr_noisy,
            r.bpp_noisy,
            r.bpp_noisy - r.bpp_clean
        ));
    }
    write_text(&csv_path, &csv)?;
    RunManifest::new(
        "probe",
        config_hash(&cfg),
        cfg.seed,
        vec![csv_path.display().to_string()],
    )
    .write(&out_dir.join("probe_manifest.json"))?;
    Ok(ProbeReport { csv: csv_path, rows })
}

/// Exit code mapping shared with the CLI: config/input problems are 2,
/// codec integrity failures 3, file-system problems 4.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Codec(_) => 3,
        Error::Io { .. } => 4,
        _ => 2,
    }
}
