//! Config-driven experiment runs.
//!
//! A run renders a source video with exact depth, warps it onto the target
//! camera path, embeds the result as the trajectory latent and then runs the
//! guided sampler for every seed and ablation cell. Everything lands under
//! `<output_dir>/<hash>/` in four folders: `frames`, `traces`, `metrics` and
//! `manifest`.

pub mod config;
pub mod manifest;
pub mod plots;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

pub use config::{ArtifactConfig, Cell, ComponentSpec, ExperimentConfig, Mechanism, MeanSpec, NamedMean, OracleSpec, ScheduleChoice, ScheduleConfig};
pub use manifest::{CellResult, FileEntry, RunManifest, StageError, TrajectoryResult};
pub use plots::emit_plots;

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::guidance::{guided_sample, sampler_for, GuidanceTrace};
use crate::io::{tensor_bytes, write_atomic};
use crate::mask::ValidityMask;
use crate::oracle::DenoiserOracle;
use crate::rng::{KeyedRng, Purpose};
use crate::sampler::sample;
use crate::scene::{render_at, DepthMap};
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;
use crate::traj_eval::{ate, evaluate, rpe_r, rpe_t, PoseTrajectory};
use crate::trajectory::make_trajectory;
use crate::warp::{embed_latent, warp_sequence};

/// Inputs shared by every chain of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub source_poses: Vec<CameraPose>,
    pub target_poses: Vec<CameraPose>,
    pub source: LatentTensor,
    pub depths: Vec<DepthMap>,
    /// Warped (and possibly corrupted) guidance video in pixel space.
    pub guidance: LatentTensor,
    pub pixel_mask: ValidityMask,
    pub z_traj: LatentTensor,
    /// The trajectory latent before artefacts were added.
    pub z_clean: LatentTensor,
    pub masks: ValidityMask,
    /// Latent of the scene rendered directly from the target cameras.
    pub truth: LatentTensor,
}

fn render_video(cfg: &ExperimentConfig, poses: &[CameraPose]) -> Result<(LatentTensor, Vec<DepthMap>)> {
    let [h, w] = cfg.trajectory.resolution;
    let frames: Vec<(LatentTensor, DepthMap)> = poses
        .par_iter()
        .enumerate()
        .map(|(i, p)| render_at(&cfg.scene, p, (h, w), i as f64))
        .collect::<Result<_>>()?;
    let (images, depths): (Vec<_>, Vec<_>) = frames.into_iter().unzip();
    Ok((LatentTensor::stack_frames(&images)?, depths))
}

fn add_artifacts(video: &LatentTensor, mask: &ValidityMask, a: &ArtifactConfig) -> LatentTensor {
    if a.noise_std == 0.0 {
        return video.clone();
    }
    let noise = KeyedRng::new(a.seed).normal(video.shape(), Purpose::GuidanceArtifacts, 0, 0);
    let hit = |c: usize| a.channels.is_empty() || a.channels.contains(&c);
    let mut out = video.as_array().clone();
    for ((c, t, y, x), v) in out.indexed_iter_mut() {
        if hit(c) && mask.at(0, t, y, x) {
            *v += a.noise_std * noise.get([c, t, y, x]);
        }
    }
    LatentTensor::new(out).expect("finite artefacts")
}

/// Renders, warps and embeds everything the chains need.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let target_poses = make_trajectory(&cfg.trajectory)?;
    let src = match &cfg.source_pose {
        Some(p) => *p,
        None => target_poses[0],
    };
    let source_poses = vec![src; target_poses.len()];
    let (source, depths) = render_video(cfg, &source_poses)?;
    let (truth_pixels, _) = render_video(cfg, &target_poses)?;
    let (warped, pixel_mask) = warp_sequence(&source, &depths, &source_poses, &target_poses)?;
    let guidance = add_artifacts(&warped, &pixel_mask, &cfg.artifacts);
    let (z_traj, masks) = embed_latent(&guidance, &pixel_mask, &cfg.embed)?;
    let (z_clean, _) = embed_latent(&warped, &pixel_mask, &cfg.embed)?;
    let full = ValidityMask::ones(pixel_mask.shape());
    let (truth, _) = embed_latent(&truth_pixels, &full, &cfg.embed)?;
    Ok(Prepared {
        source_poses,
        target_poses,
        source,
        depths,
        guidance,
        pixel_mask,
        z_traj,
        z_clean,
        masks,
        truth,
    })
}

/// Mean `|x - y|` over cells where the shared mask equals `observed`.
pub fn masked_deviation(x: &LatentTensor, y: &LatentTensor, mask: &ValidityMask, observed: bool) -> Option<f64> {
    let (a, b) = (x.as_array(), y.as_array());
    let c_mask = mask.shape()[0];
    let (mut sum, mut n) = (0.0, 0usize);
    for ((c, t, yy, xx), v) in a.indexed_iter() {
        let m = mask.at(if c_mask == 1 { 0 } else { c }, t, yy, xx);
        if m == observed {
            sum += (v - b[[c, t, yy, xx]]).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// The initial noise of the chain run with `seed`.
pub fn initial_noise(shape: [usize; 4], seed: u64) -> LatentTensor {
    KeyedRng::new(seed).normal(shape, Purpose::InitialNoise, 0, 0)
}

fn sha_hex(x: &LatentTensor) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(tensor_bytes(x)?)))
}

/// A finished chain.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub cell: Cell,
    pub seed: u64,
    pub output: LatentTensor,
    pub trace: GuidanceTrace,
}

/// File stem shared by a chain's outputs.
pub fn chain_id(cell: &str, seed: u64) -> String {
    format!("{cell}_s{seed}")
}

/// Runs one cell of the grid on prepared inputs.
pub fn run_chain(
    prep: &Prepared,
    oracle: &DenoiserOracle,
    schedule: &Arc<NoiseSchedule>,
    cfg: &ExperimentConfig,
    cell: Cell,
    seed: u64,
) -> Result<ChainOutput> {
    let x_t = initial_noise(prep.z_traj.shape(), seed);
    let (output, trace) = guided_sample(&x_t, oracle, &prep.z_traj, &prep.masks, &cell.apply(&cfg.guidance), schedule.clone(), seed)?;
    Ok(ChainOutput { cell, seed, output, trace })
}

struct Writer {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl Writer {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.files.push(FileEntry::new(rel, bytes));
        Ok(())
    }

    fn put_file(&mut self, rel: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write(&path)?;
        let bytes = std::fs::read(&path)?;
        self.files.push(FileEntry::new(rel, &bytes));
        Ok(())
    }
}

fn trajectory_result(target: &[CameraPose], recovered: &[CameraPose]) -> Result<TrajectoryResult> {
    let reference = PoseTrajectory::from_cameras(target)?;
    let est = PoseTrajectory::from_cameras(recovered)?;
    match evaluate(&est, &reference) {
        Ok(m) => Ok(TrajectoryResult {
            ate: m.ate,
            rpe_t: m.rpe_t,
            rpe_r_deg: m.rpe_r_deg,
            scale: m.scale,
            aligned: true,
        }),
        Err(Error::AlignmentUnderdetermined(why)) => {
            log::warn!("trajectory metrics computed without alignment: {why}");
            Ok(TrajectoryResult {
                ate: ate(&est, &reference)?.0,
                rpe_t: rpe_t(&est, &reference)?.0,
                rpe_r_deg: rpe_r(&est, &reference)?.0,
                scale: 1.0,
                aligned: false,
            })
        }
        Err(e) => Err(e),
    }
}

fn trace_files(w: &mut Writer, id: &str, trace: &GuidanceTrace) -> Result<()> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    w.put(&format!("traces/{id}.csv"), &buf)?;
    if trace.entries().iter().any(|e| e.scores.is_some()) {
        let mut out = csv::Writer::from_writer(Vec::new());
        out.write_record(["step", "channel", "score", "selected"])?;
        for e in trace.entries() {
            let (Some(scores), Some(sel)) = (&e.scores, &e.selected) else { continue };
            for (c, (s, on)) in scores.iter().zip(sel).enumerate() {
                out.write_record([
                    e.step.to_string(),
                    c.to_string(),
                    s.map(|v| v.to_string()).unwrap_or_default(),
                    u8::from(*on).to_string(),
                ])?;
            }
        }
        let bytes = out.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        w.put(&format!("traces/{id}_scores.csv"), &bytes)?;
    }
    Ok(())
}

fn cells_csv(cells: &[CellResult]) -> Result<Vec<u8>> {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record([
        "cell",
        "seed",
        "irr",
        "flf",
        "dsg",
        "deviation_guidance",
        "deviation_truth",
        "deviation_truth_unobserved",
        "matches_unguided",
        "output_sha256",
    ])?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in cells {
        out.write_record([
            c.cell.clone(),
            c.seed.to_string(),
            c.irr.to_string(),
            c.flf.to_string(),
            c.dsg.to_string(),
            f(c.deviation_guidance),
            f(c.deviation_truth),
            f(c.deviation_truth_unobserved),
            c.matches_unguided.to_string(),
            c.output_sha256.clone(),
        ])?;
    }
    out.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Runs a whole experiment. Invalid configs fail before any work; failures
/// after that are recorded in the manifest, which is always written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let run_dir = cfg.output_dir.join(cfg.short_hash()?);
    std::fs::create_dir_all(&run_dir)?;
    let mut manifest = RunManifest::new(cfg)?;
    let mut w = Writer {
        root: run_dir.clone(),
        files: Vec::new(),
    };
    log::info!("run {} -> {}", manifest.config_hash, run_dir.display());

    let result = run_stages(cfg, &mut manifest, &mut w);
    if let Err(e) = result {
        manifest.record_error("write", e);
    }
    if let Err(e) = plots::emit_plots(&manifest, &run_dir).map(|files| w.files.extend(files)) {
        manifest.record_error("plots", e);
    }
    w.files.sort_by(|a, b| a.path.cmp(&b.path));
    manifest.files = w.files;
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    manifest.write(&run_dir)?;
    Ok(manifest)
}

/// Directory a config's run writes to.
pub fn run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    Ok(cfg.output_dir.join(cfg.short_hash()?))
}

fn run_stages(cfg: &ExperimentConfig, manifest: &mut RunManifest, w: &mut Writer) -> Result<()> {
    let prep = match prepare(cfg) {
        Ok(p) => p,
        Err(e) => {
            manifest.record_error("prepare", e);
            return Ok(());
        }
    };
    manifest.latent_shape = Some(prep.z_traj.shape());
    manifest.mask_coverage = Some(prep.masks.coverage());
    if prep.masks.count() == 0 {
        log::warn!("no latent cell is observed; guidance has nothing to act on");
    }
    w.put("frames/source.tensor", &tensor_bytes(&prep.source)?)?;
    w.put("frames/guidance.tensor", &tensor_bytes(&prep.guidance)?)?;
    w.put_file("frames/guidance_mask.tensor", |p| crate::io::write_mask(p, &prep.pixel_mask))?;
    w.put("frames/z_traj.tensor", &tensor_bytes(&prep.z_traj)?)?;
    w.put_file("frames/latent_mask.tensor", |p| crate::io::write_mask(p, &prep.masks))?;
    w.put("frames/truth.tensor", &tensor_bytes(&prep.truth)?)?;
    for (i, d) in prep.depths.iter().enumerate() {
        w.put_file(&format!("frames/depth_t{i:03}.tensor"), |p| crate::io::write_depth(p, d))?;
    }
    let (lo, hi) = prep.truth.min_max();
    if cfg.write_frames {
        let ext = if prep.guidance.channels() >= 3 { "ppm" } else { "pgm" };
        for t in 0..prep.guidance.frames() {
            w.put_file(&format!("frames/guidance_t{t:03}.{ext}"), |p| crate::io::write_frame(p, &prep.guidance, t, lo, hi))?;
        }
    }

    let poses_text = crate::traj_eval::format_pose_text(&PoseTrajectory::from_cameras(&prep.target_poses)?);
    w.put("metrics/target_poses.txt", poses_text.as_bytes())?;
    // The guidance video is warped to the target cameras exactly, so the
    // recovered path is the target path itself.
    match trajectory_result(&prep.target_poses, &prep.target_poses) {
        Ok(t) => {
            let mut out = csv::Writer::from_writer(Vec::new());
            out.write_record(["ate", "rpe_t", "rpe_r_deg", "scale", "aligned"])?;
            out.write_record([t.ate.to_string(), t.rpe_t.to_string(), t.rpe_r_deg.to_string(), t.scale.to_string(), t.aligned.to_string()])?;
            w.put("metrics/trajectory.csv", &out.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?)?;
            manifest.trajectory = Some(t);
        }
        Err(e) => manifest.record_error("trajectory_metrics", e),
    }

    let schedule = Arc::new(cfg.schedule.build()?);
    let oracle = match cfg.oracle.build(&prep.truth, cfg.convention()) {
        Ok(o) => o,
        Err(e) => {
            manifest.record_error("oracle", e);
            return Ok(());
        }
    };
    let kind = sampler_for(&schedule);
    let unguided: Vec<Result<LatentTensor>> = cfg
        .seeds
        .par_iter()
        .map(|&s| sample(kind, initial_noise(prep.z_traj.shape(), s), schedule.clone(), &oracle, s))
        .collect();
    let unguided_sha: Vec<Option<String>> = unguided
        .iter()
        .zip(&cfg.seeds)
        .map(|(r, s)| match r {
            Ok(x) => sha_hex(x).ok(),
            Err(e) => {
                log::error!("unguided chain for seed {s} failed: {e}");
                None
            }
        })
        .collect();

    let jobs: Vec<(Cell, u64)> = cfg.cells().into_iter().flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    let outputs: Vec<Result<ChainOutput>> = jobs
        .par_iter()
        .map(|&(cell, seed)| run_chain(&prep, &oracle, &schedule, cfg, cell, seed))
        .collect();

    for ((cell, seed), out) in jobs.iter().zip(outputs) {
        let label = cell.label();
        let id = chain_id(&label, *seed);
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                manifest.record_error(&format!("sample:{id}"), e);
                continue;
            }
        };
        let sha = sha_hex(&out.output)?;
        let seed_index = cfg.seeds.iter().position(|s| s == seed).expect("seed from config");
        manifest.cells.push(CellResult {
            cell: label,
            seed: *seed,
            irr: cell.irr,
            flf: cell.flf,
            dsg: cell.dsg,
            matches_unguided: unguided_sha[seed_index].as_deref() == Some(sha.as_str()),
            output_sha256: sha,
            deviation_guidance: masked_deviation(&out.output, &prep.z_traj, &prep.masks, true),
            deviation_truth: masked_deviation(&out.output, &prep.truth, &prep.masks, true),
            deviation_truth_unobserved: masked_deviation(&out.output, &prep.truth, &prep.masks, false),
        });
        w.put(&format!("frames/{id}.tensor"), &tensor_bytes(&out.output)?)?;
        if cfg.write_frames {
            let ext = if out.output.channels() >= 3 { "ppm" } else { "pgm" };
            for t in 0..out.output.frames() {
                w.put_file(&format!("frames/{id}_t{t:03}.{ext}"), |p| crate::io::write_frame(p, &out.output, t, lo, hi))?;
            }
        }
        trace_files(w, &id, &out.trace)?;
    }
    w.put("metrics/cells.csv", &cells_csv(&manifest.cells)?)?;
    Ok(())
}
