"""Toy-scale ablations: MVS-RoPE vs positional collision, two-stage vs one-stage
training, and cross-modal completion quality.

Every run lives in ``<root>/<variant>-s<seed>-<digest>`` and is resumable;
finished runs are reused. ``collect`` evaluates the runs and writes
``<root>/results.json``.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import numerics as nx
from . import session
from . import toydata as td
from .config import ModelConfig, Phase, RunConfig, SampleSettings, TaskMode, TrainPlan
from .evaluation import attn_diagonal_score, pa_mpjpe, token_times
from .model import DualDiT, join_motion_groups
from .motion import TOKENS_PER_FRAME, clip_to_latent
from .sampling import SampleSpec, generate
from .training import MetricsLog, Trainer, interpolate, make_examples
from .video import patchify

VARIANTS = ("mvs", "collision", "skip")


@dataclass
class AblationSettings:
    root: str = "runs/ablation"
    seeds: tuple = (0, 1, 2)
    train_clips: int = 500
    data_seed: int = 1
    heldout_clips: int = 20
    heldout_seed: int = 7777
    phase1_steps: int = 1000
    phase2_steps: int = 2000
    skip_steps: int = 250
    lr: float = 1e-3
    shift: float = 1.0
    probe_t: float = 0.75
    probe_clips: int = 8
    eval_seeds: int = 5
    loss_window: int = 25  # half width of the window averaged around a step
    late_step: int = 1600
    early_step: int = 200
    model: ModelConfig = field(default_factory=ModelConfig)

    def config(self, seed: int, variant: str) -> RunConfig:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        model = dataclasses.replace(self.model, collision_mode=variant == "collision")
        steps2 = self.skip_steps if variant == "skip" else self.phase2_steps
        plan = TrainPlan(phase1_steps=0 if variant == "skip" else self.phase1_steps, phase2_steps=steps2,
                         lr=self.lr, shift=self.shift)
        sample = SampleSettings(sample_shift=self.shift)
        cfg = RunConfig(model=model, train=plan, sample=sample, seed=seed,
                        dataset=f"toy:{self.train_clips}:{self.data_seed}")
        cfg.out_dir = str(Path(self.root) / f"{variant}-s{seed}-{cfg.digest()}")
        return cfg.validate()


def _log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


_DATA: dict = {}


def training_data(s: AblationSettings, cfg: RunConfig) -> session.PreparedData:
    key = (s.train_clips, s.data_seed, cfg.seed, cfg.model.frames, cfg.model.height)
    if key not in _DATA:
        recs = td.gen_corpus(s.train_clips, s.data_seed, frames=cfg.model.frames, size=cfg.model.height)
        _DATA.clear()
        _DATA[key] = session.prepare(cfg, recs)
    return _DATA[key]


def heldout(s: AblationSettings) -> list:
    return td.gen_corpus(s.heldout_clips, s.heldout_seed, frames=s.model.frames, size=s.model.height)


def _done(out: Path) -> bool:
    return (out / "done.json").exists()


def _trainer_for(cfg: RunConfig, data, out: Path, phase1_from: Path | None) -> Trainer:
    """Fresh, resumed, or seeded-from-phase-1 trainer for a run directory."""
    p2 = session.checkpoint_path(out, Phase.MULTI_TASK)
    p1 = session.checkpoint_path(out, Phase.MOTION_ONLY)
    if p2.exists():
        return session.resume_trainer(cfg, p2, out)
    if p1.exists():
        return session.resume_trainer(cfg, p1, out)
    if phase1_from is not None:
        start = ck.load(phase1_from)
        start.config = cfg
        model = ck.build_model(start)
        tr = Trainer(model, cfg.train, seed=cfg.seed, log=MetricsLog(out))
        tr.phase, tr.step = Phase.MOTION_ONLY, start.step
        return tr
    return Trainer(session.new_model(cfg, data), cfg.train, seed=cfg.seed, log=MetricsLog(out))


def run(s: AblationSettings, seed: int, variant: str) -> Path:
    cfg = s.config(seed, variant)
    out = Path(cfg.out_dir)
    if _done(out):
        return out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    data = training_data(s, cfg)
    phase1_from = None
    if variant == "collision":
        # motion-only attention sees a constant spatial offset, which RoPE cancels,
        # so the collision run continues from the MVS phase-1 weights
        phase1_from = session.checkpoint_path(run_phase1(s, seed), Phase.MOTION_ONLY)
    tr = _trainer_for(cfg, data, out, phase1_from)
    t0 = time.perf_counter()

    def progress(trainer):
        if trainer.step % 100 == 0:
            recent = trainer.log.losses(int(trainer.phase))[-100:]
            _log(f"{out.name} phase={int(trainer.phase)} step={trainer.step} loss100={np.mean(recent):.4f}")

    if variant == "mvs" and tr.phase <= Phase.MOTION_ONLY:
        session.run_phase(cfg, tr, data, Phase.MOTION_ONLY, cfg.train.phase1_steps, out, progress)
    if variant == "skip" and tr.phase == Phase.UNTRAINED:
        tr.model.copy_video_weights_to_motion()
    session.run_phase(cfg, tr, data, Phase.MULTI_TASK, cfg.train.phase2_steps, out, progress)
    (out / "done.json").write_text(json.dumps({"wall_s": time.perf_counter() - t0}))
    return out


def run_phase1(s: AblationSettings, seed: int) -> Path:
    """Directory of the MVS run once its phase-1 checkpoint is final."""
    cfg = s.config(seed, "mvs")
    out = Path(cfg.out_dir)
    p1 = session.checkpoint_path(out, Phase.MOTION_ONLY)
    if p1.exists() and ck.load(p1).step >= cfg.train.phase1_steps:
        return out
    out.mkdir(parents=True, exist_ok=True)
    data = training_data(s, cfg)
    tr = _trainer_for(cfg, data, out, None)
    if tr.phase <= Phase.MOTION_ONLY:
        session.run_phase(cfg, tr, data, Phase.MOTION_ONLY, cfg.train.phase1_steps, out)
    return out


def load_final(s: AblationSettings, seed: int, variant: str) -> DualDiT:
    out = run(s, seed, variant)
    return ck.build_model(ck.load(session.checkpoint_path(out, Phase.MULTI_TASK)))


# -- measurements -------------------------------------------------------------------------


def window_loss(out: Path, step: int, half: int) -> float:
    """Mean phase-2 loss over steps ``step - half + 1 .. step + half``."""
    losses = session.final_losses(out, 2)
    lo, hi = max(step - half, 0), min(step + half, len(losses))
    if hi <= lo:
        raise ValueError(f"no phase-2 losses around step {step} in {out}")
    return float(np.mean(losses[lo:hi]))


def attention_probe(model: DualDiT, records, t: float, seed: int):
    """Joint-mode attention at time ``t`` with fixed noise, scored for temporal alignment."""
    cfg = model.cfg
    examples = make_examples(records, model.motion_stats, cfg.stride, cfg.text_len)
    maps = []
    for ex in examples:
        rng = np.random.default_rng([seed, ex.index, 31])
        x0 = rng.standard_normal(ex.video.shape)
        m0 = rng.standard_normal(ex.motion.shape)
        with nx.no_grad():
            model.forward(interpolate(x0, ex.video, t), interpolate(m0, ex.motion, t), ex.text, t,
                          TaskMode.JOINT, attn_store=maps)
    video_t, motion_t = token_times(*cfg.latent_grid, cfg.frames, TOKENS_PER_FRAME)
    return attn_diagonal_score(maps, video_t, motion_t)


def v2m_errors(model: DualDiT, records, seeds, allow_untrained: bool = False) -> list[float]:
    """Mean PA-MPJPE (mm) over ``records`` for each sampling seed."""
    out = []
    for seed in seeds:
        errs = []
        for r in records:
            spec = SampleSpec.from_settings(_sample_settings(model), mode=TaskMode.VIDEO_TO_MOTION,
                                            video_cond=r.video, seed=seed)
            errs.append(pa_mpjpe(generate(spec, model, allow_untrained).motion, r.motion))
        out.append(float(np.mean(errs)))
    return out


def _sample_settings(model: DualDiT) -> SampleSettings:
    return getattr(model, "sample_settings", SampleSettings())


def m2v_errors(model: DualDiT, records, seed: int) -> dict[str, float]:
    """Centroid-oracle error of motion-conditioned videos and of videos generated
    from the caption alone (no motion), both against the conditioning skeleton."""
    cond, text_only, null = [], [], []
    for r in records:
        style = td.style_from_seed(r.seed)
        settings = _sample_settings(model)
        spec = SampleSpec.from_settings(settings, mode=TaskMode.MOTION_TO_VIDEO, motion_cond=r.motion,
                                        text=r.caption, seed=seed)
        cond.append(td.centroid_error(generate(spec, model).video, r.motion.eta, style))
        spec = SampleSpec.from_settings(settings, mode=TaskMode.JOINT, text=r.caption, seed=seed)
        text_only.append(td.centroid_error(generate(spec, model).video, r.motion.eta, style))
        spec = SampleSpec.from_settings(settings, mode=TaskMode.JOINT, text=None, seed=seed)
        null.append(td.centroid_error(generate(spec, model).video, r.motion.eta, style))
    finite = lambda v: float(np.mean(np.minimum(v, 32.0 * np.sqrt(2))))  # undetectable chains count as the frame diagonal
    return {"m2v": finite(cond), "text_only": finite(text_only), "unconditional": finite(null)}


# -- orchestration ----------------------------------------------------------------------------


def collect(s: AblationSettings, evaluate_samples: bool = True) -> dict:
    """Train (or reuse) every run, measure, and write ``results.json``."""
    root = Path(s.root)
    root.mkdir(parents=True, exist_ok=True)
    cache = root / "results.json"
    results = json.loads(cache.read_text()) if cache.exists() else {}
    results["settings"] = {k: v for k, v in dataclasses.asdict(s).items() if k != "model"}
    probes = heldout(s)[: s.probe_clips]

    for seed in s.seeds:
        for variant in VARIANTS:
            run(s, seed, variant)
    for seed in s.seeds:
        key = f"seed{seed}"
        if key in results.get("runs", {}):
            continue
        row = {}
        for variant in ("mvs", "collision"):
            out = Path(s.config(seed, variant).out_dir)
            model = load_final(s, seed, variant)
            rep = attention_probe(model, probes, s.probe_t, seed)
            losses = session.final_losses(out, 2)
            row[variant] = {
                "attn_mean_offset": rep.mean_offset,
                "attn_diag_mass": rep.diag_mass,
                "attn_per_layer": rep.per_layer,
                "loss_late": window_loss(out, s.late_step, s.loss_window),
                "loss_early": window_loss(out, s.early_step, s.loss_window),
                "loss_first100": float(np.mean(losses[:100])),
                "loss_last100": float(np.mean(losses[-100:])),
                "finite": bool(np.all(np.isfinite(losses))),
            }
        skip_out = Path(s.config(seed, "skip").out_dir)
        row["skip"] = {"loss_early": window_loss(skip_out, s.early_step, s.loss_window)}
        results.setdefault("runs", {})[key] = row
        cache.write_text(json.dumps(results, indent=1))
        _log(f"measured seed {seed}: {json.dumps(row)[:300]}")

    if evaluate_samples and "completion" not in results:
        records = heldout(s)
        seed = s.seeds[0]
        trained = load_final(s, seed, "mvs")
        trained.sample_settings = s.config(seed, "mvs").sample
        untrained = DualDiT(trained.cfg, seed=seed, stats=trained.stats)
        untrained.sample_settings = trained.sample_settings
        seeds = list(range(s.eval_seeds))
        _log("v2m evaluation")
        comp = {"v2m_trained": v2m_errors(trained, records, seeds),
                "v2m_untrained": v2m_errors(untrained, records, seeds, allow_untrained=True)}
        _log("m2v evaluation")
        comp.update({f"centroid_{k}": v for k, v in m2v_errors(trained, records, seed=0).items()})
        results["completion"] = comp
        cache.write_text(json.dumps(results, indent=1))
    return results


def verdicts(results: dict) -> dict[str, tuple[bool, str]]:
    """Pass/fail and a one-line summary for the learned criteria."""
    runs = results["runs"]
    seeds = sorted(runs)
    off = {v: float(np.median([runs[k][v]["attn_mean_offset"] for k in seeds])) for v in ("mvs", "collision")}
    l1600 = {v: float(np.median([runs[k][v]["loss_late"] for k in seeds])) for v in ("mvs", "collision")}
    stable = all(runs[k]["mvs"]["finite"] and runs[k]["mvs"]["loss_last100"] <= runs[k]["mvs"]["loss_first100"]
                 for k in seeds)
    ok6 = off["mvs"] < off["collision"] and stable and l1600["collision"] > l1600["mvs"]
    msg6 = (f"attn offset mvs={off['mvs']:.4f} collision={off['collision']:.4f}; "
            f"late loss mvs={l1600['mvs']:.4f} collision={l1600['collision']:.4f}; mvs non-diverging={stable}")
    wins = sum(runs[k]["mvs"]["loss_early"] < runs[k]["skip"]["loss_early"] for k in seeds)
    msg8 = "; ".join(f"{k}: two-stage={runs[k]['mvs']['loss_early']:.4f} one-stage={runs[k]['skip']['loss_early']:.4f}"
                     for k in seeds)
    out = {"6": (ok6, msg6), "8": (wins >= 2, f"{wins}/{len(seeds)} seeds lower; {msg8}")}
    comp = results.get("completion")
    if comp:
        tr, un = float(np.median(comp["v2m_trained"])), float(np.median(comp["v2m_untrained"]))
        c, u = comp["centroid_m2v"], comp["centroid_text_only"]
        ok7 = tr * 2 <= un and c <= 4.0 and u >= 8.0
        out["7"] = (ok7, f"v2m PA-MPJPE trained={tr:.1f}mm untrained={un:.1f}mm (ratio {un / tr:.2f}); "
                         f"m2v centroid={c:.2f}px motion-free={u:.2f}px (null text {comp['centroid_unconditional']:.2f}px)")
    return out
