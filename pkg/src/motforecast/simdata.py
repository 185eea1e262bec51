"""Deterministic synthetic scenes: ground truth, noisy detections, appearance embeddings.

Random numbers come from a single ``numpy.random.Generator(PCG64(seed))``
stream, consumed in this fixed order:

1. identity embeddings, agents in index order (rejection sampling: draw
   ``emb_dim`` standard normals, normalize, reject if cosine similarity with any
   accepted identity exceeds 0.5);
2. frames ascending; within a frame, alive agents in index order, each drawing
   one uniform (miss test), four normals (box noise), one uniform (confidence)
   and ``emb_dim`` normals (embedding noise). Draws happen even when the
   detection is then dropped, so occlusion edits never shift later draws.

Agent trajectories themselves are parametric and use no randomness.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import BoundingBox, FrameObservations
from .io import MotRecord, write_mot, write_vectors

MOTIONS = ("linear", "sinusoidal", "circular", "stop-and-go")
MAX_IDENTITY_COSINE = 0.5
CONTEXT_DIM = 8


@dataclass
class AgentSpec:
    motion: str = "linear"
    start: tuple[float, float] = (100.0, 100.0)
    velocity: tuple[float, float] = (1.0, 0.0)
    amplitude: float = 0.0
    period: float = 60.0
    phase: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.0
    omega: float = 0.0
    go: int = 0
    dwell: int = 0
    birth: int = 1
    death: int = 100
    size: tuple[float, float] = (30.0, 60.0)
    occlusions: list[tuple[int, int]] = field(default_factory=list)

    def position(self, frame: int) -> tuple[float, float]:
        a = frame - self.birth
        if self.motion == "linear":
            return self.start[0] + self.velocity[0] * a, self.start[1] + self.velocity[1] * a
        if self.motion == "sinusoidal":
            vx, vy = self.velocity
            speed = math.hypot(vx, vy) or 1.0
            nx, ny = -vy / speed, vx / speed
            off = self.amplitude * math.sin(2 * math.pi * a / self.period + self.phase)
            return self.start[0] + vx * a + nx * off, self.start[1] + vy * a + ny * off
        if self.motion == "circular":
            th = self.phase + self.omega * a
            return self.center[0] + self.radius * math.cos(th), self.center[1] + self.radius * math.sin(th)
        if self.motion == "stop-and-go":
            moving = sum(1 for f in range(self.birth, frame) if self.is_moving(f))
            return self.start[0] + self.velocity[0] * moving, self.start[1] + self.velocity[1] * moving
        raise ValueError(f"unknown motion {self.motion!r}")

    def is_moving(self, frame: int) -> bool:
        """Stop-and-go phase on the scene clock: ``go`` frames moving, then ``dwell`` still."""
        cycle = self.go + self.dwell
        return cycle == 0 or (frame + int(self.phase)) % cycle < self.go

    def box(self, frame: int) -> BoundingBox:
        x, y = self.position(frame)
        return BoundingBox(x, y, float(self.size[0]), float(self.size[1]))

    def occluded(self, frame: int) -> bool:
        return any(s <= frame <= e for s, e in self.occlusions)

    def violations(self, n_frames: int) -> list[str]:
        errs = []
        if self.motion not in MOTIONS:
            errs.append(f"unknown motion {self.motion!r}")
        if not 1 <= self.birth < self.death <= n_frames:
            errs.append(f"need 1 <= birth < death <= n_frames, got {self.birth}, {self.death}")
        if self.size[0] <= 0 or self.size[1] <= 0:
            errs.append("agent size must be positive")
        if self.motion == "sinusoidal" and self.period <= 0:
            errs.append("sinusoidal period must be positive")
        if self.motion == "circular" and self.radius <= 0:
            errs.append("circular radius must be positive")
        if self.motion == "stop-and-go" and (self.go < 1 or self.dwell < 0):
            errs.append("stop-and-go needs go >= 1 and dwell >= 0")
        for s, e in self.occlusions:
            if not self.birth <= s <= e <= self.death:
                errs.append(f"occlusion window ({s}, {e}) outside lifetime")
        return errs


@dataclass
class SceneSpec:
    seed: int = 0
    frame_w: float = 1088.0
    frame_h: float = 608.0
    n_frames: int = 100
    agents: list[AgentSpec] = field(default_factory=list)
    det_noise_std: float = 0.0
    miss_rate: float = 0.0
    emb_dim: int = 16
    emb_noise_std: float = 0.0
    context_mode: str = "none"
    signal: tuple[int, int] = (0, 0)
    name: str = ""

    def validate(self) -> "SceneSpec":
        errs = []
        if self.n_frames < 1:
            errs.append("n_frames must be >= 1")
        if not 0 <= self.miss_rate < 1:
            errs.append("miss_rate must lie in [0, 1)")
        if self.det_noise_std < 0 or self.emb_noise_std < 0:
            errs.append("noise levels must be >= 0")
        if self.emb_dim < 2:
            errs.append("emb_dim must be >= 2")
        if self.context_mode not in ("none", "signal"):
            errs.append("context_mode must be 'none' or 'signal'")
        if self.context_mode == "signal" and sum(self.signal) < 1:
            errs.append("signal context needs a (go, dwell) cycle")
        for i, a in enumerate(self.agents):
            errs += [f"agent {i}: {e}" for e in a.violations(self.n_frames)]
        if errs:
            raise ValueError("invalid scene: " + "; ".join(errs))
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        doc = dict(doc)
        doc["agents"] = [AgentSpec(**{k: (tuple(v) if isinstance(v, list) and k != "occlusions" else v)
                                      for k, v in a.items()}) for a in doc.get("agents", [])]
        for a in doc["agents"]:
            a.occlusions = [tuple(o) for o in a.occlusions]
        if "signal" in doc:
            doc["signal"] = tuple(doc["signal"])
        return cls(**doc)


@dataclass
class Scene:
    spec: SceneSpec
    gt: dict[int, list[MotRecord]]
    observations: list[FrameObservations]
    det_ids: dict[int, list[int]]  # ground-truth id behind each detection, per frame

    @property
    def detections(self) -> dict[int, list[MotRecord]]:
        return {o.frame_index: [MotRecord(o.frame_index, -1, b, c) for b, c in zip(o.detections, o.confidences)]
                for o in self.observations if len(o)}

    def contexts(self) -> dict[int, np.ndarray]:
        return {o.frame_index: o.context for o in self.observations if o.context is not None}

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"gt": out / "gt.txt", "det": out / "det.txt", "emb": out / "emb.csv",
                 "scene": out / "scene.json"}
        write_mot([r for f in sorted(self.gt) for r in self.gt[f]], paths["gt"])
        write_mot([r for f in sorted(self.detections) for r in self.detections[f]], paths["det"])
        write_vectors(paths["emb"], ((o.frame_index, i, o.embeddings[i]) for o in self.observations
                                     for i in range(len(o))), self.spec.emb_dim)
        paths["scene"].write_text(self.spec.to_json() + "\n")
        if self.spec.context_mode != "none":
            paths["ctx"] = out / "ctx.csv"
            write_vectors(paths["ctx"], ((f, c) for f, c in sorted(self.contexts().items())),
                          CONTEXT_DIM, key_names=("frame",), prefix="c")
        return paths


def signal_context(frame: int, go: int, dwell: int) -> np.ndarray:
    """Scene-level phase of a synchronized stop-and-go cycle, seen from ``frame``."""
    cycle = go + dwell
    pos = frame % cycle
    moving = pos < go
    to_switch = (go - pos) if moving else (cycle - pos)
    ang = 2 * math.pi * pos / cycle
    ctx = np.zeros(CONTEXT_DIM)
    ctx[:6] = [float(moving), float(not moving), to_switch / cycle, math.sin(ang), math.cos(ang),
               pos / cycle]
    return ctx


def _identities(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    out = []
    for _ in range(n):
        for _attempt in range(10000):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if all(float(v @ u) <= MAX_IDENTITY_COSINE for u in out):
                break
        else:
            raise ValueError("could not draw sufficiently distinct identity embeddings")
        out.append(v)
    return np.asarray(out).reshape(n, dim)


def generate(spec: SceneSpec) -> Scene:
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    ident = _identities(rng, len(spec.agents), spec.emb_dim)
    gt: dict[int, list[MotRecord]] = {}
    observations = []
    det_ids: dict[int, list[int]] = {}
    for f in range(1, spec.n_frames + 1):
        boxes, confs, embs, ids = [], [], [], []
        for k, agent in enumerate(spec.agents):
            if not agent.birth <= f <= agent.death:
                continue
            box = agent.box(f)
            gt.setdefault(f, []).append(MotRecord(f, k + 1, box, 1.0))
            u_miss = rng.random()
            noise = rng.standard_normal(4) * spec.det_noise_std
            conf = 0.5 + 0.5 * rng.random()
            e_noise = rng.standard_normal(spec.emb_dim) * spec.emb_noise_std
            if agent.occluded(f) or u_miss < spec.miss_rate:
                continue
            w = max(box.w + noise[2], 1.0) if spec.det_noise_std else box.w
            h = max(box.h + noise[3], 1.0) if spec.det_noise_std else box.h
            boxes.append(BoundingBox(box.x + noise[0], box.y + noise[1], w, h))
            confs.append(conf)
            e = ident[k] + e_noise
            embs.append(e / np.linalg.norm(e))
            ids.append(k + 1)
        ctx = signal_context(f, *spec.signal) if spec.context_mode == "signal" else None
        observations.append(FrameObservations(f, boxes, confs, np.asarray(embs).reshape(len(boxes), spec.emb_dim), ctx))
        det_ids[f] = ids
    return Scene(spec, gt, observations, det_ids)


# ------------------------------------------------------------------ suites

def _lanes(rng, n, spec_w, spec_h, n_frames, speed=(1.0, 3.0)):
    agents = []
    lane_h = spec_h / (n + 1)
    # values on a 0.01 px grid so every box survives the 6-decimal text format exactly
    for i in range(n):
        v = round(float(rng.uniform(*speed)), 2) * (1 if i % 2 == 0 else -1)
        x0 = 80.0 if v > 0 else spec_w - 80.0
        vy = round(float(rng.uniform(-0.1, 0.1)), 2)
        size = (round(float(rng.uniform(20, 30)), 1), round(float(rng.uniform(40, 55)), 1))
        agents.append(AgentSpec("linear", start=(x0, round(lane_h * (i + 1), 2)), velocity=(v, vy),
                                birth=1, death=n_frames, size=size))
    return agents


def make_suite(name: str, seed: Optional[int] = None) -> SceneSpec:
    """Build a named suite; ``seed`` re-draws agent layout and noise for held-out copies."""
    if name not in SUITE_SEEDS:
        raise KeyError(f"unknown suite {name!r}; available: {', '.join(sorted(SUITE_SEEDS))}")
    seed = SUITE_SEEDS[name] if seed is None else seed
    rng = np.random.default_rng(seed + 7919)
    W, H = 1088.0, 608.0
    if name == "linear-clean":
        n_frames = 150
        return SceneSpec(seed, W, H, n_frames, _lanes(rng, 6, W, H, n_frames), name=name)
    if name == "nonlinear-clean":
        n_frames = 200
        agents = []
        for i in range(12):
            size = (float(rng.uniform(25, 40)), float(rng.uniform(50, 80)))
            if i % 2 == 0:
                speed = float(rng.uniform(0.5, 2.0))
                ang = float(rng.uniform(0, 2 * math.pi))
                v = (speed * math.cos(ang), speed * math.sin(ang))
                start = (W / 2 - v[0] * n_frames / 2 + float(rng.uniform(-150, 150)),
                         H / 2 - v[1] * n_frames / 2 + float(rng.uniform(-100, 100)))
                agents.append(AgentSpec("sinusoidal", start=start, velocity=v,
                                        amplitude=float(rng.uniform(20, 60)), period=float(rng.uniform(50, 120)),
                                        phase=float(rng.uniform(0, 2 * math.pi)), birth=1, death=n_frames, size=size))
            else:
                radius = float(rng.uniform(60, 200))
                speed = float(rng.uniform(1.0, 4.0))
                omega = speed / radius * (1 if rng.random() < 0.5 else -1)
                center = (float(rng.uniform(radius + 20, W - radius - 20)),
                          float(rng.uniform(min(radius + 20, H / 2), max(H - radius - 20, H / 2))))
                agents.append(AgentSpec("circular", center=center, radius=radius, omega=omega,
                                        phase=float(rng.uniform(0, 2 * math.pi)), birth=1, death=n_frames, size=size))
        return SceneSpec(seed, W, H, n_frames, agents, name=name)
    if name == "occlusion-20":
        n_frames = 200
        agents = _lanes(rng, 8, W, H, n_frames, speed=(1.5, 3.0))
        lengths = [20, 20, 15, 10, 20, 12, 18, 8]
        for i, (a, L) in enumerate(zip(agents, lengths)):
            starts = [40 + int(rng.integers(0, 20)), 120 + int(rng.integers(0, 20))]
            a.occlusions = [(s, s + L - 1) for s in starts]
        return SceneSpec(seed, W, H, n_frames, agents, det_noise_std=1.0, emb_dim=16,
                         emb_noise_std=0.35, name=name)
    if name == "crowded-noisy":
        n_frames = 150
        agents = _lanes(rng, 14, W, H, n_frames)
        return SceneSpec(seed, W, H, n_frames, agents, det_noise_std=2.0, miss_rate=0.1, emb_dim=16,
                         emb_noise_std=0.3, name=name)
    if name == "signal-stop-go":
        n_frames = 240
        go, dwell = 30, 25
        agents = []
        for i in range(10):
            speed = float(rng.uniform(1.5, 4.0))
            ang = float(rng.uniform(0, 2 * math.pi))
            v = (speed * math.cos(ang), speed * math.sin(ang))
            start = (W / 2 + float(rng.uniform(-200, 200)) - v[0] * 60, H / 2 + float(rng.uniform(-120, 120)) - v[1] * 60)
            agents.append(AgentSpec("stop-and-go", start=start, velocity=v, go=go, dwell=dwell,
                                    birth=1, death=n_frames,
                                    size=(float(rng.uniform(25, 40)), float(rng.uniform(50, 80)))))
        return SceneSpec(seed, W, H, n_frames, agents, context_mode="signal", signal=(go, dwell), name=name)
    raise AssertionError(name)


SUITE_SEEDS = {
    "linear-clean": 101,
    "nonlinear-clean": 202,
    "occlusion-20": 303,
    "crowded-noisy": 404,
    "signal-stop-go": 505,
}


def standard_suites() -> dict[str, SceneSpec]:
    return {name: make_suite(name) for name in SUITE_SEEDS}
