"""End-to-end driver: enhancement, tracking, refinement, mapping, reporting.

A run replays the sequence in order. Every raw frame is tone-mapped and
tracked against the covisibility graph; frames whose mean flow exceeds the
threshold become keyframes. Batches of new keyframes trigger joint
pose/depth refinement, and a final refinement pass after the last frame
fixes the trajectory. Proxy depth maps are then fused per keyframe and the
Gaussian map is trained on the keyframes that add coverage, followed by a
global refinement over all training views.
"""

import os
import sys

import numpy as np

from . import dso as dso_mod
from . import proxy as proxy_mod
from .config import config_text
from .dataio import write_png, write_tum
from .enhance import fieldscale, naive_rescale
from .errors import ConfigError, TrackingFailureError
from .geometry import PinholeIntrinsics, SE3Pose, bilinear_sample, pixel_grid
from .graph import CovisibilityGraph
from .metrics import Trajectory, ate_rmse, format_report, psnr, select_eval_frames
from .oracles import FileOracle, SyntheticDepthOracle, SyntheticFlowOracle
from .raster import MappingConfig, WindowFrame, optimize_map, render, ssim
from .splat_map import DensifyConfig, GaussianMap
from .synthetic import SceneParams, SyntheticScene

MIN_TRACKED_FRACTION = 0.5  # below this the run counts as a tracking failure


def _log(message):
    print(f"thermosplat: {message}", file=sys.stderr)


# -- image preparation ------------------------------------------------------


def resized_intrinsics(intr, width, height):
    """Intrinsics after a (possibly anisotropic) resample, pixel-center aware."""
    sx = width / intr.width
    sy = height / intr.height
    return PinholeIntrinsics(
        intr.fx * sx,
        intr.fy * sy,
        (intr.cx + 0.5) * sx - 0.5,
        (intr.cy + 0.5) * sy - 0.5,
        width,
        height,
    )


def resize_gray(img, height, width):
    """Bilinear resample of an intensity image to (height, width)."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape == (height, width):
        return img
    sx = img.shape[1] / width
    sy = img.shape[0] / height
    grid = pixel_grid(height, width)
    u = (grid[..., 0] + 0.5) * sx - 0.5
    v = (grid[..., 1] + 0.5) * sy - 0.5
    return bilinear_sample(img, u, v)


def enhance_frame(raw, bit_depth, cfg):
    """Raw counts to [0, 1] intensity using the configured method."""
    if cfg.enhance == "fieldscale":
        return fieldscale(
            raw,
            grid=(cfg.enhance_grid, cfg.enhance_grid),
            percentiles=(cfg.enhance_pct_low, cfg.enhance_pct_high),
            passes=cfg.enhance_passes,
        )
    if cfg.enhance == "naive":
        return naive_rescale(raw, percentiles=(cfg.enhance_pct_low, cfg.enhance_pct_high))
    return np.asarray(raw, dtype=np.float64) / float(2**bit_depth - 1)


def prepare_images(seq, cfg, log=_log):
    """Enhanced, working-resolution intensity images for every frame."""
    images = []
    for k in range(len(seq)):
        gray = enhance_frame(seq.load_raw(k), seq.bit_depth, cfg)
        images.append(resize_gray(gray, cfg.height, cfg.width))
    log(f"enhanced {len(images)} frames ({cfg.enhance}, {cfg.width}x{cfg.height})")
    return images


# -- oracles ------------------------------------------------------------------


def build_oracles(cfg, seq, grid_intr):
    """(flow, depth) prediction sources for the tracker."""
    if cfg.oracle == "file":
        oracle = FileOracle(cfg.oracle_dir)
        return oracle, oracle
    if seq.scene_params is None:
        raise ConfigError(
            "oracle = synthetic needs scene.json in the dataset; generate one with `synth` "
            "or point oracle_dir at exported predictions with oracle = file"
        )
    scene = SyntheticScene(SceneParams.from_json(seq.scene_params))
    flow = SyntheticFlowOracle(scene, grid_intr, sigma=cfg.flow_sigma, seed=cfg.seed)
    depth = SyntheticDepthOracle(
        scene,
        grid_intr,
        theta_true=cfg.mono_theta,
        gamma_true=cfg.mono_gamma,
        sigma=cfg.mono_sigma,
        seed=cfg.seed,
    )
    return flow, depth


# -- tracking -----------------------------------------------------------------


class FrameRecord:
    """Pose bookkeeping for one tracked frame.

    The final pose is reconstructed as kf_pose o rel, so later keyframe
    refinement carries every frame that was tracked against it.
    """

    __slots__ = ("frame_id", "timestamp", "kf_index", "rel")

    def __init__(self, frame_id, timestamp, kf_index, rel):
        self.frame_id = int(frame_id)
        self.timestamp = float(timestamp)
        self.kf_index = int(kf_index)
        self.rel = rel


def _alternate(graph, rounds, dba_steps, dso_steps, cfg):
    graph.refresh_edge_flows()
    return dso_mod.alternate_dba_dso(
        graph,
        rounds=rounds,
        dba_steps=dba_steps,
        dso_steps=dso_steps,
        eta=cfg.dso_eta,
        alpha_high=cfg.alpha1,
        alpha_low=cfg.alpha2,
    )


def track_sequence(seq, images, cfg, grid_intr, log=_log):
    """Run the frontend over every frame; returns (graph, frame records)."""
    flow_oracle, depth_oracle = build_oracles(cfg, seq, grid_intr)
    graph = CovisibilityGraph(
        grid_intr,
        flow_oracle,
        depth_oracle,
        tau=cfg.tau,
        max_edge_age=cfg.max_edge_age,
        temporal_radius=cfg.temporal_radius,
    )
    records = []
    dropped = 0
    new_since_ba = 0
    for k, timestamp in enumerate(seq.timestamps()):
        try:
            pose, mean_flow = graph.track_frame(k, timestamp, images[k])
        except TrackingFailureError as exc:
            dropped += 1
            log(f"frame {k}: dropped ({exc})")
            continue
        if len(graph.keyframes) == 1 and graph.keyframes[0].frame_id == k:
            records.append(FrameRecord(k, timestamp, 0, SE3Pose.identity()))
            continue
        if graph.maybe_promote_keyframe(mean_flow):
            kf_id = len(graph.keyframes) - 1
            graph.build_keyframe_edges(kf_id)
            graph.age_edges()
            graph.prune_edges()
            records.append(FrameRecord(k, timestamp, kf_id, SE3Pose.identity()))
            new_since_ba += 1
            if new_since_ba >= cfg.kf_batch and graph.edges:
                _alternate(graph, cfg.ba_rounds, cfg.dba_steps, cfg.dso_steps, cfg)
                new_since_ba = 0
        else:
            ref = max(graph.keyframes, key=lambda kf: kf.id)
            rel = ref.pose.inverse().compose(pose)
            records.append(FrameRecord(k, timestamp, ref.id, rel))
    n = len(seq)
    if len(records) < max(2, int(np.ceil(MIN_TRACKED_FRACTION * n))):
        raise TrackingFailureError(f"tracked only {len(records)} of {n} frames")
    if graph.edges:
        _alternate(graph, cfg.final_ba_rounds, cfg.final_dba_steps, cfg.final_dso_steps, cfg)
    log(
        f"tracked {len(records)}/{n} frames, {len(graph.keyframes)} keyframes, "
        f"{len(graph.edges)} edges, {dropped} dropped"
    )
    return graph, records, dropped


def assemble_trajectory(graph, records):
    """Per-frame trajectory after refinement, composed through the keyframes."""
    return Trajectory(
        (rec.timestamp, graph.keyframes[rec.kf_index].pose.compose(rec.rel))
        for rec in records
    )


# -- proxy depth --------------------------------------------------------------


def fuse_keyframe_proxies(graph, cfg, full_shape):
    """Dense proxy inverse depth per keyframe id."""
    proxies = {}
    for kf in graph.keyframes:
        mask = dso_mod.classify_pixels(graph, kf.id, cfg.dso_eta)
        low = mask.low
        if low.sum() >= 2:
            fit = proxy_mod.fit_proxy_affine(kf.inv_depth.values, kf.mono_depth, low)
            theta, gamma = fit.theta, fit.gamma
        elif kf.affine is not None:
            theta, gamma = kf.affine
        else:
            theta, gamma = 1.0, 0.0  # prior used as-is when nothing anchors the fit
        proxies[kf.id] = proxy_mod.fuse(
            kf.inv_depth.values, kf.mono_depth, theta, gamma, mask, full_shape=full_shape
        )
    return proxies


# -- mapping ------------------------------------------------------------------


def _world_points(pose, inv_depth, intr):
    grid = pixel_grid(*inv_depth.shape)
    z = 1.0 / inv_depth
    pts = np.stack(
        [
            (grid[..., 0] - intr.cx) / intr.fx * z,
            (grid[..., 1] - intr.cy) / intr.fy * z,
            z,
        ],
        axis=-1,
    )
    return pose.apply(pts.reshape(-1, 3))


def overlap_fraction(points_w, keyframes, intr):
    """Fraction of world points visible in at least one of the keyframes."""
    seen = np.zeros(len(points_w), dtype=bool)
    for kf in keyframes:
        cam = kf.pose.inverse().apply(points_w)
        z = cam[:, 2]
        ok = z > 1e-3
        zs = np.where(ok, z, 1.0)
        u = intr.fx * cam[:, 0] / zs + intr.cx
        v = intr.fy * cam[:, 1] / zs + intr.cy
        seen |= ok & (u >= -0.5) & (u <= intr.width - 0.5) & (v >= -0.5) & (v <= intr.height - 0.5)
        if seen.all():
            break
    return float(seen.mean())


def mapping_config(cfg, extent):
    dens = DensifyConfig(
        grad_threshold=cfg.densify_grad_threshold,
        scale_split_threshold=max(cfg.densify_scale_split * extent, 1e-9),
        split_factor=cfg.densify_split_factor,
        opacity_prune=cfg.prune_opacity,
        extent_prune_scale=max(cfg.prune_extent_scale * extent, 1e-9),
        min_observations=cfg.min_observations,
        observation_grace=cfg.observation_grace,
        interval=cfg.densify_interval,
    )
    return MappingConfig(
        lr_position_scale=cfg.lr_position,
        lr_log_scale=cfg.lr_log_scale,
        lr_rotation=cfg.lr_rotation,
        lr_opacity=cfg.lr_opacity,
        lr_gray=cfg.lr_gray,
        loss_alpha=cfg.loss_alpha,
        loss_beta=cfg.loss_beta,
        densify=dens,
        densify_enabled=cfg.densify_enabled,
    )


def build_map(graph, proxies, images, intr, grid_intr, cfg, log=_log):
    """Spawn and optimize the Gaussian map over coverage-adding keyframes.

    Returns (map, training keyframe ids). A keyframe joins only when less
    than `window_overlap` of its proxy-depth points are already visible from
    the current training set.
    """
    gmap = GaussianMap(seed=cfg.seed)
    training = []
    selected_kfs = []
    extent = None
    map_cfg = None
    for kf in graph.keyframes:
        prox = proxies[kf.id]
        if selected_kfs:
            points = _world_points(kf.pose, prox.grid, grid_intr)
            frac = overlap_fraction(points, selected_kfs, grid_intr)
            if frac >= cfg.window_overlap:
                continue
        image = images[kf.frame_id]
        gmap.spawn_from_keyframe(kf.pose, image, prox, intr, kf.id, stride=cfg.spawn_stride)
        training.append(WindowFrame(kf.id, kf.pose, image, prox))
        selected_kfs.append(kf)
        if extent is None:
            extent = max(gmap.extent(), 1e-6)
            map_cfg = mapping_config(cfg, extent)
        if cfg.mapping_iters:
            window = training[-cfg.mapping_window :]
            optimize_map(gmap, window, intr, cfg.mapping_iters, map_cfg, extent)
    if training and cfg.final_mapping_iters:
        optimize_map(gmap, training, intr, cfg.final_mapping_iters, map_cfg, extent)
    log(
        f"mapped {len(training)}/{len(graph.keyframes)} keyframes, "
        f"{len(gmap)} gaussians"
    )
    return gmap, [graph.keyframes[w.kf_id].frame_id for w in training]


# -- evaluation ---------------------------------------------------------------


def evaluate_run(gmap, trajectory_by_frame, images, intr, training_frames, n_frames, cfg):
    """Held-out view quality; returns (report metrics, renders by frame id)."""
    eval_ids = [
        k
        for k in select_eval_frames(n_frames, training_frames, cfg.eval_step)
        if k in trajectory_by_frame
    ]
    psnrs = []
    ssims = []
    renders = {}
    for k in eval_ids:
        out = render(gmap, trajectory_by_frame[k], intr)
        img = np.clip(out.intensity, 0.0, 1.0)
        psnrs.append(psnr(img, images[k]))
        ssims.append(ssim(img, images[k]))
        renders[k] = img
    values = {}
    if psnrs:
        values["psnr"] = float(np.mean(psnrs))
        values["ssim"] = float(np.mean(ssims))
    values["lpips"] = "unavailable"
    return values, renders


# -- the run ------------------------------------------------------------------


class RunResult:
    __slots__ = ("trajectory", "graph", "gmap", "training_frames", "report", "renders", "dropped")

    def __init__(self, trajectory, graph, gmap, training_frames, report, renders, dropped):
        self.trajectory = trajectory
        self.graph = graph
        self.gmap = gmap
        self.training_frames = training_frames
        self.report = report
        self.renders = renders
        self.dropped = dropped


def run_pipeline(seq, cfg, out_dir=None, log=_log):
    """Execute the full system on a loaded sequence; optionally write artifacts."""
    intr = resized_intrinsics(seq.intrinsics, cfg.width, cfg.height)
    grid_intr = intr.scaled(1.0 / 8.0)
    images = prepare_images(seq, cfg, log)
    graph, records, dropped = track_sequence(seq, images, cfg, grid_intr, log)
    trajectory = assemble_trajectory(graph, records)
    proxies = fuse_keyframe_proxies(graph, cfg, (cfg.height, cfg.width))
    gmap, training_frames = build_map(graph, proxies, images, intr, grid_intr, cfg, log)

    by_frame = {
        rec.frame_id: pose for rec, pose in zip(records, trajectory.poses)
    }
    report, renders = evaluate_run(
        gmap, by_frame, images, intr, training_frames, len(seq), cfg
    )
    if seq.groundtruth:
        ref = Trajectory(seq.groundtruth)
        report = {"ate_rmse": ate_rmse(trajectory, ref, max_dt=cfg.ate_max_dt), **report}
    result = RunResult(trajectory, graph, gmap, training_frames, report, renders, dropped)
    if out_dir is not None:
        write_artifacts(result, seq, cfg, out_dir, log)
    return result


def write_artifacts(result, seq, cfg, out_dir, log=_log):
    """Write every run output under out_dir; layout documented in the README."""
    os.makedirs(out_dir, exist_ok=True)
    write_tum(
        os.path.join(out_dir, "trajectory.txt"),
        list(zip(result.trajectory.timestamps, result.trajectory.poses)),
    )
    write_tum(
        os.path.join(out_dir, "keyframes.txt"),
        [(kf.timestamp, kf.pose) for kf in result.graph.keyframes],
    )
    result.gmap.save_ply(os.path.join(out_dir, "map.ply"))
    np.savez(
        os.path.join(out_dir, "map.npz"),
        positions=result.gmap.mu,
        log_scales=result.gmap.log_scales,
        rotations=result.gmap.rotations,
        opacity_logits=result.gmap.opacity_logits,
        grays=result.gmap.grays,
    )
    with open(os.path.join(out_dir, "training_frames.txt"), "w") as f:
        f.write("".join(f"{k}\n" for k in result.training_frames))
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(config_text(cfg))
    renders_dir = os.path.join(out_dir, "renders")
    os.makedirs(renders_dir, exist_ok=True)
    for k, img in sorted(result.renders.items()):
        path = os.path.join(renders_dir, f"render_{k:06d}.png")
        write_png(path, np.round(img * 255.0).astype(np.uint8))
    sequence = os.path.basename(os.path.normpath(seq.root)) or "sequence"
    with open(os.path.join(out_dir, "metrics.txt"), "w") as f:
        f.write(format_report(sequence, result.report))
    log(f"wrote artifacts to {out_dir}")
