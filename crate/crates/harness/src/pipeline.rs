//! End-to-end run: tracking with DSPO, confidence fusion, incremental
//! Gaussian mapping on a second thread, loop closure and global BA, then
//! evaluation against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use fslam_core::backend::{
    denormalize, detect_loop_closures, global_ba, local_loop_ba, normalize_for_ba, POSE_CHANGE_THRESHOLD,
};
use fslam_core::fusion::{
    compute_weights, consistency_count, fuse_proxy_depth, scaled_prior, window_neighbors, ConfidenceMap, ProxyDepth,
};
use fslam_core::geometry::{PixelGrid, Pose, Vec2};
use fslam_core::gsmap::{
    deform_map, init_gaussians, map_loss, optimize_map, render, write_cspl, GaussianMap, PoseUpdates, SupervisionView,
};
use fslam_core::tracking::{
    classify_keyframe, dspo_refine, fit_scale_shift, optimize_window, should_insert_keyframe, FactorGraph, Keyframe,
    KeyframeId, Rgb, TrackingConfig,
};
use serde_json::{Map, Value};

use crate::config::{HarnessConfig, MappingSection};
use crate::error::{HarnessError, Result, StageContext};
use crate::io::{write_counts_png, write_depth_png, write_raw_f32_file, write_rgb_png, write_tum_file};
use crate::metrics::{ate_rmse, depth_l1, depth_l1_many, psnr_capped, ssim, Alignment, PSNR_CAP_DB};
use crate::scene::SyntheticScene;
use crate::sequence::{generate_sequence, Sequence, SequenceSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub ate_rmse: f64,
    pub ate_mean: f64,
    pub ate_median: f64,
    /// ATE RMSE just before the final loop-closure and global BA stage.
    pub ate_rmse_pre_ba: f64,
    pub depth_l1_overall: f64,
    pub depth_l1_near: f64,
    /// Depth L1 of the multi-view depth that entered fusion.
    pub depth_l1_multiview: f64,
    /// Depth L1 of the aligned monocular prior that entered fusion.
    pub depth_l1_prior: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub map_loss_initial: f64,
    pub map_loss_final: f64,
    pub keyframes: usize,
    pub gaussians: usize,
    pub loop_edges: usize,
    /// Seconds per stage.
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    /// Flat key/value JSON object; timings become `time_<stage>` keys.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("ate_rmse", self.ate_rmse.into());
        put("ate_mean", self.ate_mean.into());
        put("ate_median", self.ate_median.into());
        put("ate_rmse_pre_ba", self.ate_rmse_pre_ba.into());
        put("depth_l1_overall", self.depth_l1_overall.into());
        put("depth_l1_near", self.depth_l1_near.into());
        put("depth_l1_multiview", self.depth_l1_multiview.into());
        put("depth_l1_prior", self.depth_l1_prior.into());
        put("psnr", self.psnr.into());
        put("ssim", self.ssim.into());
        put("map_loss_initial", self.map_loss_initial.into());
        put("map_loss_final", self.map_loss_final.into());
        put("keyframes", self.keyframes.into());
        put("gaussians", self.gaussians.into());
        put("loop_edges", self.loop_edges.into());
        for (k, v) in &self.timings {
            put(&format!("time_{k}"), (*v).into());
        }
        Value::Object(m)
    }

    /// Every metric except the timings.
    pub fn metrics(&self) -> [f64; 12] {
        [
            self.ate_rmse,
            self.ate_mean,
            self.ate_median,
            self.ate_rmse_pre_ba,
            self.depth_l1_overall,
            self.depth_l1_near,
            self.depth_l1_multiview,
            self.depth_l1_prior,
            self.psnr,
            self.ssim,
            self.map_loss_initial,
            self.map_loss_final,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.metrics().iter().all(|v| v.is_finite())
    }
}

/// Per-keyframe fusion inputs and output.
#[derive(Debug, Clone)]
pub struct FusedKeyframe {
    pub id: KeyframeId,
    pub mv_depth: PixelGrid<f64>,
    pub prior_depth: PixelGrid<f64>,
    pub proxy: ProxyDepth,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub keyframe_ids: Vec<KeyframeId>,
    pub trajectory: Vec<Pose>,
    pub gt_trajectory: Vec<Pose>,
    pub fused: Vec<FusedKeyframe>,
    pub renders: Vec<PixelGrid<Rgb>>,
    pub map: GaussianMap,
    /// Graph after the backend stage.
    pub graph: FactorGraph,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub artifacts: RunArtifacts,
}

enum MapMsg {
    Keyframe(Box<(Keyframe, ProxyDepth)>),
    Updates(PoseUpdates),
    Finish,
}

struct MapperResult {
    map: GaussianMap,
    poses: BTreeMap<KeyframeId, Pose>,
    loss_initial: f64,
    loss_final: f64,
    seconds: f64,
}

struct MapperKf {
    pose: Pose,
    image: PixelGrid<Rgb>,
    proxy: PixelGrid<f64>,
}

struct Mapper {
    cfg: MappingSection,
    camera: fslam_core::geometry::Camera,
    map: GaussianMap,
    order: Vec<KeyframeId>,
    kfs: BTreeMap<KeyframeId, MapperKf>,
    seconds: f64,
}

fn views<'a>(kfs: &'a BTreeMap<KeyframeId, MapperKf>, ids: &[KeyframeId]) -> Vec<SupervisionView<'a>> {
    ids.iter()
        .map(|id| {
            let k = &kfs[id];
            SupervisionView {
                pose: &k.pose,
                image: &k.image,
                proxy_depth: &k.proxy,
            }
        })
        .collect()
}

impl Mapper {
    fn handle(&mut self, msg: MapMsg) -> Result<()> {
        let t = Instant::now();
        match msg {
            MapMsg::Keyframe(b) => {
                let (kf, proxy) = *b;
                let gs = init_gaussians(&kf, &self.camera, &proxy, self.cfg.stride).stage("map_init")?;
                self.map.extend(gs);
                self.order.push(kf.id);
                self.kfs.insert(
                    kf.id,
                    MapperKf {
                        pose: kf.pose,
                        image: kf.image,
                        proxy: proxy.depth,
                    },
                );
                if self.cfg.iters_per_keyframe > 0 {
                    let start = self.order.len().saturating_sub(self.cfg.window);
                    let ids = self.order[start..].to_vec();
                    let views = views(&self.kfs, &ids);
                    let res = optimize_map(
                        &mut self.map,
                        &self.camera,
                        &views,
                        &self.cfg.loss(),
                        &self.cfg.adam(),
                        self.cfg.iters_per_keyframe,
                    );
                    res.stage("map_optimize")?;
                }
            }
            MapMsg::Updates(updates) => {
                let known: BTreeSet<KeyframeId> = self.kfs.keys().copied().collect();
                deform_map(&mut self.map, &updates, &known).stage("deform")?;
                for (id, (_, new)) in &updates {
                    if let Some(k) = self.kfs.get_mut(id) {
                        k.pose = *new;
                    }
                }
            }
            MapMsg::Finish => unreachable!("finish is handled by the caller"),
        }
        self.seconds += t.elapsed().as_secs_f64();
        Ok(())
    }

    fn finish(mut self) -> Result<MapperResult> {
        let t = Instant::now();
        let ids = self.order.clone();
        let (initial, final_loss) = if ids.is_empty() {
            (0.0, 0.0)
        } else {
            let views = views(&self.kfs, &ids);
            let res = optimize_map(
                &mut self.map,
                &self.camera,
                &views,
                &self.cfg.loss(),
                &self.cfg.adam(),
                self.cfg.final_iters,
            );
            let rep = res.stage("map_optimize")?;
            (rep.losses[0], rep.final_loss.total())
        };
        self.seconds += t.elapsed().as_secs_f64();
        Ok(MapperResult {
            poses: self.kfs.iter().map(|(id, k)| (*id, k.pose)).collect(),
            map: self.map,
            loss_initial: initial,
            loss_final: final_loss,
            seconds: self.seconds,
        })
    }
}

/// Sends to the mapping thread or runs the mapper inline.
enum MapperHandle {
    Inline(Box<Mapper>),
    Thread {
        tx: mpsc::Sender<MapMsg>,
        join: std::thread::JoinHandle<Result<MapperResult>>,
    },
}

impl MapperHandle {
    fn new(mapper: Mapper, sequential: bool) -> Self {
        if sequential {
            return MapperHandle::Inline(Box::new(mapper));
        }
        let (tx, rx) = mpsc::channel::<MapMsg>();
        let join = std::thread::spawn(move || {
            let mut mapper = mapper;
            for msg in rx {
                match msg {
                    MapMsg::Finish => return mapper.finish(),
                    m => mapper.handle(m)?,
                }
            }
            Err(HarnessError::Format("mapping channel closed before finish".into()))
        });
        MapperHandle::Thread { tx, join }
    }

    fn send(&mut self, msg: MapMsg) -> Result<()> {
        match self {
            MapperHandle::Inline(m) => m.handle(msg),
            // a failed send means the mapper already stopped; its error surfaces at join
            MapperHandle::Thread { tx, .. } => {
                let _ = tx.send(msg);
                Ok(())
            }
        }
    }

    fn finish(self) -> Result<MapperResult> {
        match self {
            MapperHandle::Inline(m) => m.finish(),
            MapperHandle::Thread { tx, join } => {
                let _ = tx.send(MapMsg::Finish);
                join.join()
                    .map_err(|_| HarnessError::Format("mapping thread panicked".into()))?
            }
        }
    }
}

struct Tracker<'a> {
    seq: &'a Sequence,
    cfg: &'a HarnessConfig,
    tcfg: TrackingConfig,
    graph: FactorGraph,
    /// Pose of every keyframe as last told to the mapper.
    mapper_poses: BTreeMap<KeyframeId, Pose>,
    fused: BTreeMap<KeyframeId, FusedKeyframe>,
}

impl Tracker<'_> {
    fn flow_field(&self, src: KeyframeId, dst: KeyframeId) -> Option<PixelGrid<Vec2>> {
        let e = self.seq.edge(src, dst)?;
        Some(PixelGrid::from_fn(
            e.flow_target.width(),
            e.flow_target.height(),
            |x, y| {
                if *e.valid.get(x, y) {
                    e.flow_target.get(x, y) - Vec2::new(x as f64, y as f64)
                } else {
                    Vec2::repeat(f64::NAN)
                }
            },
        ))
    }

    fn insert(&mut self, frame: usize, last: Option<KeyframeId>) -> Result<()> {
        let id = frame as KeyframeId;
        let odo = &self.seq.odometry;
        let pose = match last {
            None => odo[frame],
            Some(l) => {
                let rel = odo[l as usize].inverse().compose(&odo[frame]);
                self.graph.keyframe(l).stage("keyframe")?.pose.compose(&rel)
            }
        };
        let f = &self.seq.frames[frame];
        let kf = Keyframe::new(
            id,
            pose,
            f.image.clone(),
            self.seq.mv_depth[frame].map(|d| 1.0 / d),
            self.seq.mono_priors[frame].clone(),
        )
        .stage("keyframe")?;
        self.graph.add_keyframe(kf).stage("keyframe")?;
        let edges: Vec<_> = self
            .seq
            .edges
            .iter()
            .filter(|e| {
                (e.src == id && self.graph.vertices.contains_key(&e.dst))
                    || (e.dst == id && self.graph.vertices.contains_key(&e.src))
            })
            .cloned()
            .collect();
        for e in edges {
            self.graph.add_edge(e).stage("keyframe")?;
        }
        Ok(())
    }

    fn classify_window(&mut self) -> Result<()> {
        for id in self.graph.window.clone() {
            let nb = window_neighbors(&self.graph, id);
            let counts = consistency_count(&self.graph, id, &nb, &self.cfg.fusion.to_core()).stage("classification")?;
            classify_keyframe(&mut self.graph, id, &counts, &self.tcfg).stage("classification")?;
        }
        Ok(())
    }

    fn init_scale_shift(&mut self, id: KeyframeId) -> Result<()> {
        let kf = self.graph.keyframe_mut(id).stage("scale_shift")?;
        let fit = fit_scale_shift(kf);
        if !fit.degenerate && fit.scale > 0.0 {
            kf.scale = fit.scale;
            kf.shift = fit.shift;
        } else {
            kf.shift = fit.shift;
        }
        Ok(())
    }

    fn fuse(&mut self, id: KeyframeId, neighbors: &[KeyframeId]) -> Result<(Keyframe, ProxyDepth)> {
        let fcfg = self.cfg.fusion.to_core();
        let counts = consistency_count(&self.graph, id, neighbors, &fcfg).stage("fusion")?;
        let weights = if self.cfg.fusion.force_multiview {
            ConfidenceMap::multiview_only(counts)
        } else {
            compute_weights(&counts, &fcfg)
        };
        let kf = self.graph.keyframe(id).stage("fusion")?.clone();
        let mv_depth = kf.depth();
        let proxy = fuse_proxy_depth(&mv_depth, &kf.mono_prior, kf.scale, kf.shift, &weights).stage("fusion")?;
        self.fused.insert(
            id,
            FusedKeyframe {
                id,
                mv_depth,
                prior_depth: scaled_prior(&kf.mono_prior, kf.scale, kf.shift),
                proxy: proxy.clone(),
            },
        );
        self.mapper_poses.insert(id, kf.pose);
        Ok((kf, proxy))
    }

    fn pending_updates(&mut self) -> PoseUpdates {
        let mut out = PoseUpdates::new();
        for (id, old) in self.mapper_poses.iter_mut() {
            let new = self.graph.vertices[id].pose;
            if old.rotation_angle_to(&new) > POSE_CHANGE_THRESHOLD
                || old.translation_distance_to(&new) > POSE_CHANGE_THRESHOLD
            {
                out.insert(*id, (*old, new));
                *old = new;
            }
        }
        out
    }

    fn normalized_global_ba(&mut self) -> Result<()> {
        let mut state = normalize_for_ba(&mut self.graph).stage("normalize")?;
        let res = global_ba(&mut self.graph, &self.tcfg, self.cfg.backend.global_ba_iters);
        // restore metric scale even when BA fails
        denormalize(&mut self.graph, &mut state).stage("denormalize")?;
        res.stage("global_ba")?;
        Ok(())
    }
}

fn add_timing(timings: &mut Vec<(String, f64)>, name: &str, since: Instant) -> Instant {
    let now = Instant::now();
    timings.push((name.to_string(), (now - since).as_secs_f64()));
    now
}

/// Generates the sequence and runs the full pipeline on it.
pub fn run_pipeline(scene: &SyntheticScene, spec: &SequenceSpec, cfg: &HarnessConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let seq = generate_sequence(scene, spec)?;
    run_sequence(&seq, cfg)
}

pub fn run_sequence(seq: &Sequence, cfg: &HarnessConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let t_start = Instant::now();
    let mut timings = Vec::new();
    let camera = seq.spec.camera;
    let tcfg = cfg.tracking.to_core();
    let mut mapper = MapperHandle::new(
        Mapper {
            cfg: cfg.mapping.clone(),
            camera,
            map: GaussianMap::default(),
            order: Vec::new(),
            kfs: BTreeMap::new(),
            seconds: 0.0,
        },
        cfg.pipeline.sequential,
    );
    let mut tr = Tracker {
        seq,
        cfg,
        tcfg: tcfg.clone(),
        graph: FactorGraph::new(camera),
        mapper_poses: BTreeMap::new(),
        fused: BTreeMap::new(),
    };

    let mut last: Option<KeyframeId> = None;
    let mut since_global = 0usize;
    for frame in 0..seq.frames.len() {
        let id = frame as KeyframeId;
        if let Some(l) = last {
            if let Some(flow) = tr.flow_field(l, id) {
                if !should_insert_keyframe(&flow, &tcfg) {
                    continue;
                }
            }
        }
        tr.insert(frame, last)?;
        last = Some(id);

        let before = tr.graph.window.clone();
        tr.graph.slide_window(tcfg.window_size);
        let left: Vec<KeyframeId> = before
            .iter()
            .copied()
            .filter(|k| !tr.graph.window.contains(k))
            .collect();
        for leaving in &left {
            let nb: Vec<KeyframeId> = before.iter().copied().filter(|k| k != leaving).collect();
            let (kf, proxy) = tr.fuse(*leaving, &nb)?;
            mapper.send(MapMsg::Keyframe(Box::new((kf, proxy))))?;
        }

        if tr.graph.window.len() >= 2 {
            optimize_window(&mut tr.graph, &tcfg).stage("window")?;
        }
        tr.classify_window()?;
        tr.init_scale_shift(id)?;
        if tr.graph.window.len() >= 2 {
            dspo_refine(&mut tr.graph, &tcfg).stage("dspo")?;
        }

        since_global += 1;
        let every = cfg.backend.global_ba_every;
        if every > 0 && since_global >= every && !tr.graph.edges.is_empty() {
            since_global = 0;
            tr.normalized_global_ba()?;
            let updates = tr.pending_updates();
            if !updates.is_empty() {
                mapper.send(MapMsg::Updates(updates))?;
            }
        }
    }
    if last.is_none() {
        return Err(HarnessError::Format("no keyframes were selected".into()));
    }
    let window = tr.graph.window.clone();
    for id in &window {
        let nb = window_neighbors(&tr.graph, *id);
        let (kf, proxy) = tr.fuse(*id, &nb)?;
        mapper.send(MapMsg::Keyframe(Box::new((kf, proxy))))?;
    }
    let t = add_timing(&mut timings, "tracking", t_start);

    let kf_ids: Vec<KeyframeId> = tr.graph.insertion_order().to_vec();
    let gt_traj: Vec<Pose> = kf_ids.iter().map(|id| seq.frames[*id as usize].gt_pose).collect();
    let alignment: Alignment = cfg.pipeline.ate_alignment.into();
    let est_pre: Vec<Pose> = kf_ids.iter().map(|id| tr.graph.vertices[id].pose).collect();
    let ate_pre = if kf_ids.len() >= 3 {
        ate_rmse(&est_pre, &gt_traj, alignment)?.rmse
    } else {
        0.0
    };

    let mut loop_edges = 0;
    if cfg.loop_closure.enabled && kf_ids.len() >= 2 {
        let pairs = detect_loop_closures(&tr.graph, &cfg.loop_closure.to_core()).stage("loop_closure")?;
        for (i, j) in pairs {
            if tr.graph.has_edge(i, j) || tr.graph.has_edge(j, i) {
                continue;
            }
            for (s, d) in [(i, j), (j, i)] {
                tr.graph.add_edge(seq.oracle_edge(s, d)?).stage("loop_closure")?;
                loop_edges += 1;
            }
            let mut state = normalize_for_ba(&mut tr.graph).stage("normalize")?;
            let res = local_loop_ba(&mut tr.graph, i, j, &tcfg, cfg.loop_closure.local_ba_iters);
            denormalize(&mut tr.graph, &mut state).stage("denormalize")?;
            res.stage("local_ba")?;
        }
    }
    if !tr.graph.edges.is_empty() {
        tr.normalized_global_ba()?;
    }
    let updates = tr.pending_updates();
    if !updates.is_empty() {
        mapper.send(MapMsg::Updates(updates))?;
    }
    add_timing(&mut timings, "backend", t);

    let mapped = mapper.finish()?;
    timings.push(("mapping".to_string(), mapped.seconds));
    let t = Instant::now();

    // evaluation
    let est: Vec<Pose> = kf_ids.iter().map(|id| tr.graph.vertices[id].pose).collect();
    let ate = if kf_ids.len() >= 3 {
        ate_rmse(&est, &gt_traj, alignment)?
    } else {
        crate::metrics::AteStats {
            rmse: 0.0,
            mean: 0.0,
            median: 0.0,
        }
    };
    let fused: Vec<FusedKeyframe> = kf_ids.iter().map(|id| tr.fused[id].clone()).collect();
    let gts: Vec<&PixelGrid<f64>> = kf_ids.iter().map(|id| &seq.frames[*id as usize].gt_depth).collect();
    let proxies: Vec<&PixelGrid<f64>> = fused.iter().map(|f| &f.proxy.depth).collect();
    let mvs: Vec<&PixelGrid<f64>> = fused.iter().map(|f| &f.mv_depth).collect();
    let priors: Vec<&PixelGrid<f64>> = fused.iter().map(|f| &f.prior_depth).collect();
    let near = cfg.pipeline.near_range;
    let depth_l1_near = match depth_l1_many(&proxies, &gts, Some(near)) {
        Err(HarnessError::EmptyMask) => 0.0,
        r => r?,
    };

    let mut renders = Vec::with_capacity(kf_ids.len());
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for id in &kf_ids {
        let pose = mapped.poses.get(id).copied().unwrap_or(tr.graph.vertices[id].pose);
        let out = render(&mapped.map, &camera, &pose);
        let img = &seq.frames[*id as usize].image;
        psnr_sum += psnr_capped(&out.color, img).stage("metrics")?;
        ssim_sum += ssim(&out.color, img).stage("metrics")?;
        renders.push(out.color);
    }
    let n = kf_ids.len() as f64;
    sanity_checks(seq, &gt_traj)?;
    add_timing(&mut timings, "evaluation", t);
    timings.push(("total".to_string(), t_start.elapsed().as_secs_f64()));

    let report = RunReport {
        ate_rmse: ate.rmse,
        ate_mean: ate.mean,
        ate_median: ate.median,
        ate_rmse_pre_ba: ate_pre,
        depth_l1_overall: depth_l1_many(&proxies, &gts, None)?,
        depth_l1_near,
        depth_l1_multiview: depth_l1_many(&mvs, &gts, None)?,
        depth_l1_prior: depth_l1_many(&priors, &gts, None)?,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        map_loss_initial: mapped.loss_initial,
        map_loss_final: mapped.loss_final,
        keyframes: kf_ids.len(),
        gaussians: mapped.map.len(),
        loop_edges,
        timings,
    };
    if !report.is_finite() {
        return Err(HarnessError::Format("run produced non-finite metrics".into()));
    }
    Ok(RunOutput {
        report,
        artifacts: RunArtifacts {
            keyframe_ids: kf_ids,
            trajectory: est,
            gt_trajectory: gt_traj,
            fused,
            renders,
            map: mapped.map,
            graph: tr.graph,
        },
    })
}

/// Metric identities that must hold on every run.
fn sanity_checks(seq: &Sequence, gt: &[Pose]) -> Result<()> {
    let f = &seq.frames[0];
    let ok_psnr = psnr_capped(&f.image, &f.image).stage("metrics")? == PSNR_CAP_DB;
    let ok_ssim = (ssim(&f.image, &f.image).stage("metrics")? - 1.0).abs() < 1e-12;
    let ok_depth = depth_l1(&f.gt_depth, &f.gt_depth, None)? == 0.0;
    let ok_ate = gt.len() < 3 || ate_rmse(gt, gt, Alignment::Rigid)?.rmse < 1e-9;
    if ok_psnr && ok_ssim && ok_depth && ok_ate {
        Ok(())
    } else {
        Err(HarnessError::Format("metric sanity check failed".into()))
    }
}

/// Writes the report, trajectories, fused depths, confidences, renders and
/// the serialized map into `dir`.
pub fn write_artifacts(dir: &Path, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let a = &out.artifacts;
    let json = serde_json::to_string_pretty(&out.report.to_json()).map_err(|e| HarnessError::Format(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    let stamp = |traj: &[Pose]| -> Vec<(f64, Pose)> {
        a.keyframe_ids
            .iter()
            .zip(traj)
            .map(|(id, p)| (*id as f64, *p))
            .collect()
    };
    write_tum_file(&dir.join("trajectory.txt"), &stamp(&a.trajectory))?;
    write_tum_file(&dir.join("groundtruth.txt"), &stamp(&a.gt_trajectory))?;
    for (f, img) in a.fused.iter().zip(&a.renders) {
        write_depth_png(&dir.join(format!("fused_depth_{:04}.png", f.id)), &f.proxy.depth)?;
        write_raw_f32_file(&dir.join(format!("fused_depth_{:04}.f32", f.id)), &f.proxy.depth)?;
        write_counts_png(
            &dir.join(format!("consistency_{:04}.png", f.id)),
            &f.proxy.weights.counts,
        )?;
        write_raw_f32_file(&dir.join(format!("w_mv_{:04}.f32", f.id)), &f.proxy.weights.w_mv)?;
        write_rgb_png(&dir.join(format!("render_{:04}.png", f.id)), img)?;
    }
    let mut buf = Vec::new();
    write_cspl(&a.map, &mut buf)?;
    std::fs::write(dir.join("map.cspl"), buf)?;
    Ok(())
}

/// Loss of `map` over the given keyframe views, for diagnostics.
pub fn supervision_loss(
    map: &GaussianMap,
    camera: &fslam_core::geometry::Camera,
    views: &[SupervisionView<'_>],
    cfg: &MappingSection,
) -> Result<f64> {
    Ok(map_loss(map, camera, views, &cfg.loss()).stage("map_loss")?.0.total())
}
