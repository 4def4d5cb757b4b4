"""Embedding-space attacks: losses, gradient-descent generation (over-the-line)
and particle-swarm generation with a noise-robustness check (over-the-air).

Both generators talk to the recognizer only through a
:class:`~embattack.asr.QueryClient`, so every query lands on the ledger.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import dsp
from .asr import QueryClient, Transcription
from .blurring import BlurParams, blur, freeze_noise, row_scale

log = logging.getLogger(__name__)

# the blur setting used for most reported samples
DEFAULT_BLUR = BlurParams(alpha=0.3, beta=1, gamma=1.0)


def inf_norm(delta) -> float:
    """Largest absolute entry (absolute-value convention)."""
    d = np.asarray(delta, dtype=np.float64)
    return float(np.max(np.abs(d))) if d.size else 0.0


@dataclass(frozen=True)
class PerturbationMatrix:
    delta: np.ndarray
    thr: float

    def __post_init__(self):
        if self.thr < 0:
            raise ValueError("thr must be >= 0")

    @property
    def norm(self) -> float:
        return inf_norm(self.delta)

    @property
    def valid(self) -> bool:
        return self.norm <= self.thr


def _overlap(a: np.ndarray, b: np.ndarray) -> int:
    t = min(a.shape[-1], b.shape[-1])
    if t == 0:
        raise ValueError("no overlapping frames to compare")
    return t


def mel_loss(orig: np.ndarray, adv: np.ndarray) -> float:
    """Negated sum over frames of the per-frame mean squared band difference.

    Frames beyond the shorter spectrogram are ignored. More deformation gives
    a more negative value.
    """
    t = _overlap(orig, adv)
    diff = adv[:, :t] - orig[:, :t]
    return -float(np.sum(np.mean(diff**2, axis=0)))


def mel_loss_grad(orig: np.ndarray, adv: np.ndarray) -> np.ndarray:
    """d mel_loss / d adv (zero on frames outside the overlap)."""
    t = _overlap(orig, adv)
    g = np.zeros_like(adv, dtype=np.float64)
    g[:, :t] = -2.0 / adv.shape[0] * (adv[:, :t] - orig[:, :t])
    return g


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def gate_loss(orig_gate: np.ndarray, adv_gate: np.ndarray) -> float:
    """Summed BCE of sigmoid(adv logits) against sigmoid(orig logits), in the stable logits form."""
    t = _overlap(orig_gate, adv_gate)
    x = np.asarray(adv_gate[:t], dtype=np.float64)
    z = _sigmoid(orig_gate[:t])
    return float(np.sum(np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))))


def gate_loss_grad(orig_gate: np.ndarray, adv_gate: np.ndarray) -> np.ndarray:
    t = _overlap(orig_gate, adv_gate)
    g = np.zeros(len(adv_gate))
    g[:t] = _sigmoid(adv_gate[:t]) - _sigmoid(orig_gate[:t])
    return g


@dataclass(frozen=True)
class LossTerms:
    mel: float
    gate: float

    @property
    def total(self) -> float:
        return self.mel + self.gate


class NoiseBank:
    """Frozen blur-noise layers, one per output shape, all drawn from one seed."""

    def __init__(self, hp: BlurParams, seed: int):
        self.hp, self.seed = hp, seed
        self._layers: dict[tuple, np.ndarray] = {}

    def __call__(self, shape) -> np.ndarray:
        shape = tuple(shape)
        if shape not in self._layers:
            self._layers[shape] = freeze_noise(self.hp, shape, seed=self.seed)
        return self._layers[shape]


class Objective:
    """L_Mel + L_Gate of ``emb + delta`` against the clean decode of ``emb``."""

    def __init__(self, tts, emb, hp: BlurParams, noise: NoiseBank | np.ndarray | None = None, seed: int = 0):
        self.tts = tts
        self.emb = np.asarray(getattr(emb, "tokens", emb), dtype=np.float64)
        self.hp = hp
        if isinstance(noise, np.ndarray):
            fixed = noise
            self.noise = lambda shape: fixed
        else:
            self.noise = noise or NoiseBank(hp, seed)
        self.orig_mel, self.orig_gate = tts.decode(self.emb)

    def adversarial_spec(self, delta) -> tuple[np.ndarray, np.ndarray]:
        mel, gate = self.tts.decode(self.emb + delta)
        return blur(mel, self.hp, self.noise(mel.shape)), gate

    def terms(self, delta) -> tuple[LossTerms, np.ndarray]:
        spec, gate = self.adversarial_spec(delta)
        return LossTerms(mel_loss(self.orig_mel, spec), gate_loss(self.orig_gate, gate)), spec

    def __call__(self, delta) -> float:
        return self.terms(delta)[0].total

    def value_and_grad(self, delta) -> tuple[LossTerms, np.ndarray, np.ndarray]:
        """Loss terms, gradient w.r.t. ``delta`` and the blurred spectrogram."""
        x = self.emb + delta
        mel, gate = self.tts.decode(x)
        spec = blur(mel, self.hp, self.noise(mel.shape))
        terms = LossTerms(mel_loss(self.orig_mel, spec), gate_loss(self.orig_gate, gate))
        g_spec = mel_loss_grad(self.orig_mel, spec)
        g_mel = g_spec * row_scale(self.hp, mel.shape[0])[:, None]
        g_gate = gate_loss_grad(self.orig_gate, gate)
        return terms, self.tts.decode_vjp(x, g_mel, g_gate), spec


def final_loss(tts, emb, delta, hp: BlurParams, frozen_noise: np.ndarray | None = None) -> float:
    if frozen_noise is None:
        frozen_noise = freeze_noise(hp, tts.decode(emb)[0].shape)
    return Objective(tts, emb, hp, frozen_noise)(delta)


def deliver(w: dsp.Waveform) -> dsp.Waveform:
    """Delivery format sent to recognizers and stored on disk: peak 10000, integer samples."""
    return dsp.quantize_pcm16(dsp.mix_noise_and_scale(w, 0.0))


def default_thr(tts, fraction: float = 0.8) -> float:
    """``fraction`` x RMS of the character embedding table."""
    table = getattr(tts, "table", None)
    if table is None:
        raise ValueError("default thr needs a TTS exposing its embedding table; set thr explicitly")
    return float(fraction * np.sqrt(np.mean(np.asarray(table) ** 2)))


def _child_seeds(seed: int, n: int, tag: int) -> list[int]:
    ss = np.random.SeedSequence([int(seed), tag])
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


@dataclass
class AttackResult:
    target: str
    success: bool
    waveform: dsp.Waveform | None
    delta: np.ndarray | None
    final_loss: float
    mel_loss: float
    query_count: int
    budget: int
    transcripts: list[str] = field(default_factory=list)
    candidate: int | None = None
    candidate_queries: list[int] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)

    @property
    def delta_norm(self) -> float:
        return inf_norm(self.delta) if self.delta is not None else 0.0


# ---------------------------------------------------------------- over-the-line


@dataclass(frozen=True)
class OtlConfig:
    epoch_max: int = 50
    num_candidates: int = 10
    learning_rate: float = 0.05
    thr: float | None = None
    query_policy: str = "online"
    blur: BlurParams = DEFAULT_BLUR
    rng_seed: int = 0
    optimizer: str = "gd"
    momentum: float = 0.9

    def __post_init__(self):
        if self.epoch_max < 1:
            raise ValueError("epoch_max must be >= 1")
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if self.thr is not None and self.thr < 0:
            raise ValueError("thr must be >= 0")
        if self.query_policy not in ("online", "offline"):
            raise ValueError("query_policy must be 'online' or 'offline'")
        if self.optimizer not in ("gd", "momentum", "adam"):
            raise ValueError("optimizer must be gd, momentum or adam")

    @property
    def queries_per_candidate(self) -> int:
        return self.epoch_max if self.query_policy == "online" else 1


class _Stepper:
    def __init__(self, cfg: OtlConfig, shape):
        self.cfg = cfg
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def __call__(self, delta, grad):
        c = self.cfg
        if c.optimizer == "gd":
            return delta - c.learning_rate * grad
        if c.optimizer == "momentum":
            self.m = c.momentum * self.m + grad
            return delta - c.learning_rate * self.m
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad**2
        mhat = self.m / (1 - 0.9**self.t)
        vhat = self.v / (1 - 0.999**self.t)
        return delta - c.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)


@dataclass
class _Candidate:
    index: int
    success: bool = False
    audio: dsp.Waveform | None = None
    delta: np.ndarray | None = None
    loss: float = np.inf
    mel: float = 0.0
    best_loss: float = np.inf
    best_mel: float = 0.0
    best_delta: np.ndarray | None = None
    last_spec: np.ndarray | None = None
    queries: int = 0
    transcripts: list = field(default_factory=list)
    losses: list = field(default_factory=list)


def _otl_candidate(index, seed, target, tts, emb, client: QueryClient, cfg: OtlConfig, thr: float) -> _Candidate:
    obj = Objective(tts, emb, cfg.blur, NoiseBank(cfg.blur, seed))
    delta = np.zeros_like(obj.emb)
    step = _Stepper(cfg, delta.shape)
    cand = _Candidate(index)

    def query(spec, d, terms):
        audio = deliver(tts.vocode(spec))
        t: Transcription = client.transcribe(audio)
        cand.transcripts.append(t.raw_text)
        if t.matches(target) and terms.total < cand.loss:
            cand.success, cand.audio, cand.delta = True, audio, d.copy()
            cand.loss, cand.mel = terms.total, terms.mel
        elif cand.audio is None and not cand.success:
            cand.audio, cand.delta = audio, d.copy()

    with client.ledger.budget(cfg.queries_per_candidate) as used:
        for _ in range(cfg.epoch_max):
            terms, grad, spec = obj.value_and_grad(delta)
            queried = delta
            delta = step(delta, grad)
            cand.losses.append(terms.total)
            if terms.total < cand.best_loss:
                cand.best_loss, cand.best_mel = terms.total, terms.mel
                cand.best_delta, cand.last_spec = queried.copy(), spec
                if cfg.query_policy == "online":
                    query(spec, queried, terms)
            if inf_norm(delta) > thr:
                break
        if cfg.query_policy == "offline":
            query(cand.last_spec, cand.best_delta, LossTerms(cand.best_mel, cand.best_loss - cand.best_mel))
        cand.queries = used[0]
    if not cand.success:
        cand.loss, cand.mel = cand.best_loss, cand.best_mel
    return cand


def otl_generate(target_text: str, tts, client: QueryClient, cfg: OtlConfig | None = None) -> AttackResult:
    """Gradient-descent attack with online (query on every improvement) or offline (one query) policy.

    Each of ``num_candidates`` runs starts from a zero perturbation with its
    own frozen blur-noise layer and stops once the perturbation's infinity
    norm exceeds ``thr``. The lowest-loss successful candidate is returned;
    when none succeeds the lowest-loss candidate is returned with
    ``success=False``.
    """
    cfg = cfg or OtlConfig()
    thr = cfg.thr if cfg.thr is not None else default_thr(tts)
    emb = tts.encode(target_text)
    target = emb.token_labels
    seeds = _child_seeds(cfg.rng_seed, cfg.num_candidates, tag=1)
    cands = [
        _otl_candidate(i, s, target, tts, emb, client, cfg, thr) for i, s in enumerate(seeds)
    ]
    wins = [c for c in cands if c.success]
    best = min(wins or cands, key=lambda c: (c.loss, c.index))
    total = sum(c.queries for c in cands)
    log.info("otl %r: %d/%d candidates succeeded, %d queries", target, len(wins), len(cands), total)
    return AttackResult(
        target=target,
        success=best.success,
        waveform=best.audio,
        delta=best.delta,
        final_loss=float(best.loss),
        mel_loss=float(best.mel),
        query_count=total,
        budget=cfg.queries_per_candidate * cfg.num_candidates,
        transcripts=[t for c in cands for t in c.transcripts],
        candidate=best.index,
        candidate_queries=[c.queries for c in cands],
        loss_history=best.losses,
    )


# ---------------------------------------------------------------- particle swarm


@dataclass
class SwarmState:
    positions: np.ndarray
    velocities: np.ndarray
    pbest: np.ndarray
    ploss: np.ndarray
    gbest: np.ndarray
    gloss: float = np.inf

    @classmethod
    def start(cls, k: int, shape, thr: float, rng: np.random.Generator) -> "SwarmState":
        """Zero positions, velocities uniform in [-thr/10, thr/10]."""
        pos = np.zeros((k, *shape))
        vel = rng.uniform(-thr / 10, thr / 10, size=pos.shape) if thr > 0 else np.zeros_like(pos)
        return cls(pos, vel, pos.copy(), np.full(k, np.inf), np.zeros(shape), np.inf)

    def observe(self, i: int, loss: float) -> bool:
        """Fold a particle's loss into pbest/gbest; returns True when gbest improved."""
        if self.ploss[i] > loss:
            self.ploss[i] = loss
            self.pbest[i] = self.positions[i]
        if self.gloss > loss:
            self.gloss = loss
            self.gbest = self.positions[i].copy()
            return True
        return False


def pso_step(swarm: SwarmState, w: float, c1: float, c2: float, thr: float, rng) -> SwarmState:
    """One velocity/position update.

    Each particle draws its own ``r1, r2`` (shared across all its dimensions)
    from ``rng``, either one Generator used in particle order or a sequence of
    per-particle Generators. A position moves to ``x + v`` only when
    ``inf_norm(x + v) < thr``; otherwise it stays put and keeps the new
    velocity.
    """
    k = swarm.positions.shape[0]
    gens = rng if isinstance(rng, (list, tuple)) else [rng] * k
    pos = swarm.positions.copy()
    vel = swarm.velocities.copy()
    for i in range(k):
        r1, r2 = gens[i].random(2)
        vel[i] = w * vel[i] + c1 * r1 * (swarm.pbest[i] - pos[i]) + c2 * r2 * (swarm.gbest - pos[i])
        moved = pos[i] + vel[i]
        if inf_norm(moved) < thr:
            pos[i] = moved
    return replace(swarm, positions=pos, velocities=vel, pbest=swarm.pbest.copy(), ploss=swarm.ploss.copy())


@dataclass(frozen=True)
class OtaConfig:
    k: int = 20
    epoch_max: int = 10
    w: float = 0.5
    c1: float = 2.0
    c2: float = 2.0
    thr: float | None = None
    eta: float = 0.1
    blur: BlurParams = DEFAULT_BLUR
    rng_seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.epoch_max < 1:
            raise ValueError("k and epoch_max must be >= 1")
        if self.w < 0 or self.c1 < 0 or self.c2 < 0:
            raise ValueError("w, c1, c2 must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.thr is not None and self.thr < 0:
            raise ValueError("thr must be >= 0")

    @property
    def budget(self) -> int:
        return 2 * self.k * self.epoch_max


def playback(w: dsp.Waveform, eta: float, seed: int) -> dsp.Waveform:
    """Noisy copy used for the robustness condition: white noise of amplitude eta, peak 10000."""
    return dsp.quantize_pcm16(dsp.mix_noise_and_scale(w, eta, seed))


def ota_generate(target_text: str, tts, client: QueryClient, cfg: OtaConfig | None = None) -> AttackResult:
    """Particle-swarm attack where a position only scores if both the clean and a noisy playback transcribe.

    Positions are perturbation matrices. A particle's loss is L_Mel + L_Gate
    when both queries return the target and ``+inf`` otherwise; the clean
    audio of the global-best particle is returned.
    """
    cfg = cfg or OtaConfig()
    thr = cfg.thr if cfg.thr is not None else default_thr(tts)
    emb = tts.encode(target_text)
    target = emb.token_labels
    blur_seeds = _child_seeds(cfg.rng_seed, cfg.k, tag=2)
    objectives = [Objective(tts, emb, cfg.blur, NoiseBank(cfg.blur, s)) for s in blur_seeds]
    rngs = [np.random.default_rng(s) for s in _child_seeds(cfg.rng_seed, cfg.k, tag=3)]
    swarm = SwarmState.start(cfg.k, emb.tokens.shape, thr, np.random.default_rng(_child_seeds(cfg.rng_seed, 1, tag=4)[0]))

    best_audio, best_mel, transcripts, gloss_history = None, 0.0, [], []
    with client.ledger.budget(cfg.budget) as used:
        for epoch in range(cfg.epoch_max):
            for i in range(cfg.k):
                x = swarm.positions[i]
                terms, spec = objectives[i].terms(x)
                audio = tts.vocode(spec)
                clean = deliver(audio)
                seed = int(np.random.SeedSequence([cfg.rng_seed, 5, epoch, i]).generate_state(1)[0])
                noisy = playback(audio, cfg.eta, seed)
                t1 = client.transcribe(clean)
                t2 = client.transcribe(noisy)
                transcripts.append(t1.raw_text)
                loss = terms.total if (t1.matches(target) and t2.matches(target)) else np.inf
                if swarm.observe(i, loss):
                    best_audio, best_mel = clean, terms.mel
            gloss_history.append(float(swarm.gloss))
            swarm = pso_step(swarm, cfg.w, cfg.c1, cfg.c2, thr, rngs)
        queries = used[0]
    success = bool(np.isfinite(swarm.gloss))
    log.info("ota %r: success=%s, %d queries", target, success, queries)
    return AttackResult(
        target=target,
        success=success,
        waveform=best_audio,
        delta=swarm.gbest.copy() if success else None,
        final_loss=float(swarm.gloss),
        mel_loss=float(best_mel),
        query_count=queries,
        budget=cfg.budget,
        transcripts=transcripts,
        loss_history=gloss_history,
    )
