"""Experiment harness: YAML campaign configs, run directories, re-checks and reports.

A run directory looks like::

    config.yaml        copy of the effective configuration
    manifest.json      results, checksums and re-check history
    ledger.jsonl       one line per oracle request
    wav/<slug>.wav     stored attack audio (wav/hp<i>/<slug>.wav for hp grids)
    reports/           success tables, defense and robustness reports
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__, dsp
from .asr import QueryClient, QueryLedger, mock_build
from .asr.adapters import (
    CREDENTIALS_ENV,
    HttpAdapter,
    HttpAdapterConfig,
    OracleTransportError,
    SubprocessAdapter,
    SubprocessAdapterConfig,
    load_headers,
)
from .attack import OtaConfig, OtlConfig, deliver, default_thr, ota_generate, otl_generate
from .blurring import BlurParams
from .defense import DefenseSpec, evaluate_defense
from .metrics import SuccessTable, wer
from .text import normalize_text, slugify
from .tts import ToyTTS, TtsProfile

log = logging.getLogger(__name__)

BUILTIN_CORPORA = ("corpus12", "corpus32")
DEFAULT_SNRS = (37.0, 25.0, 13.0, 3.0)


class CampaignAborted(RuntimeError):
    """The oracle became unreachable; a partial manifest flagged incomplete was written."""


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class CampaignConfig:
    mode: str = "otl"
    corpus: str = "builtin:corpus12"
    seed: int = 0
    # blur grid: cartesian product of these lists unless hp_grid is given
    alpha: list = field(default_factory=lambda: [0.3])
    beta: list = field(default_factory=lambda: [1])
    gamma: list = field(default_factory=lambda: [1.0])
    hp_grid: list | None = None
    low_band_count: int = 30
    thr: float | None = None
    # over-the-line
    epoch_max: int | None = None
    num_candidates: int = 10
    learning_rate: float = 0.05
    query_policy: str = "online"
    optimizer: str = "gd"
    # over-the-air
    k: int = 20
    w: float = 0.5
    c1: float = 2.0
    c2: float = 2.0
    eta: float = 0.1
    oracle: dict = field(default_factory=lambda: {"kind": "mock"})
    tts: dict = field(default_factory=lambda: {"kind": "toy"})
    workers: int = 1

    def __post_init__(self):
        if self.mode not in ("otl", "ota"):
            raise ValueError("mode must be 'otl' or 'ota'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        for name in ("alpha", "beta", "gamma"):
            setattr(self, name, _as_list(getattr(self, name)))
        self.blur_grid()  # validate early

    @classmethod
    def from_dict(cls, data: dict | None) -> "CampaignConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "CampaignConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def with_overrides(self, **overrides) -> "CampaignConfig":
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return CampaignConfig.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def blur_grid(self) -> list[BlurParams]:
        if self.hp_grid:
            rows = [dict(r) for r in self.hp_grid]
        else:
            rows = [dict(alpha=a, beta=b, gamma=g) for a, b, g in itertools.product(self.alpha, self.beta, self.gamma)]
        return [
            BlurParams(float(r["alpha"]), int(r.get("beta", 0)), float(r.get("gamma", 0.0)), self.low_band_count)
            for r in rows
        ]

    def otl_config(self, hp: BlurParams, thr: float, seed: int) -> OtlConfig:
        return OtlConfig(
            epoch_max=self.epoch_max or 50,
            num_candidates=self.num_candidates,
            learning_rate=self.learning_rate,
            thr=thr,
            query_policy=self.query_policy,
            blur=hp,
            rng_seed=seed,
            optimizer=self.optimizer,
        )

    def ota_config(self, hp: BlurParams, thr: float, seed: int) -> OtaConfig:
        return OtaConfig(
            k=self.k, epoch_max=self.epoch_max or 10, w=self.w, c1=self.c1, c2=self.c2, thr=thr, eta=self.eta, blur=hp, rng_seed=seed
        )


# ---------------------------------------------------------------- corpus, tts, oracle


def read_corpus(spec: str) -> tuple[list[str], bytes]:
    """Commands (one per line, blanks and ``#`` comments skipped) and the raw file bytes."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN_CORPORA:
            raise ValueError(f"unknown builtin corpus {name!r}; choose from {BUILTIN_CORPORA}")
        raw = resources.files("embattack.data").joinpath(f"{name}.txt").read_bytes()
    else:
        raw = Path(spec).read_bytes()
    lines = [ln.strip() for ln in raw.decode("utf-8").splitlines()]
    commands = [ln for ln in lines if ln and not ln.startswith("#")]
    if not commands:
        raise ValueError(f"corpus {spec!r} is empty")
    return commands, raw


def build_tts(spec: dict):
    spec = dict(spec or {})
    kind = spec.pop("kind", "toy")
    if kind == "toy":
        return ToyTTS(TtsProfile(**spec.get("profile", {})))
    if kind == "external":
        from .tts_external import ExternalDecoder, ExternalTTS

        if "argv" in spec:
            dec = ExternalDecoder.spawn(list(spec["argv"]), spec.get("cwd"))
        else:
            dec = ExternalDecoder.connect(spec.get("host", "127.0.0.1"), int(spec["port"]))
        return ExternalTTS(dec, vocoder_iters=int(spec.get("vocoder_iters", 32)), fd_step=float(spec.get("fd_step", 1e-2)))
    raise ValueError(f"unknown tts kind {kind!r}")


def build_oracle(spec: dict, tts, vocabulary: list[str]):
    """Mock ASR, HTTP adapter or subprocess adapter from the ``oracle`` config block."""
    spec = dict(spec or {})
    kind = spec.pop("kind", "mock")
    if kind == "mock":
        vocab = read_corpus(spec["vocabulary"])[0] if spec.get("vocabulary") else vocabulary
        extra = {k: spec[k] for k in ("tau", "robustness_sigma", "tau_fraction", "log_floor") if spec.get(k) is not None}
        return mock_build(vocab, tts, oracle_id=spec.get("oracle_id", "mock"), **extra)
    if kind == "http":
        headers = dict(spec.pop("headers", {}) or {})
        headers.update(load_headers(spec.pop("headers_file", None) or os.environ.get(CREDENTIALS_ENV)))
        return HttpAdapter(HttpAdapterConfig(headers=headers, **spec))
    if kind == "subprocess":
        return SubprocessAdapter(SubprocessAdapterConfig(**spec))
    raise ValueError(f"unknown oracle kind {kind!r}")


# ---------------------------------------------------------------- run


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _command_seed(master: int, hp_index: int, cmd_index: int) -> int:
    return int(np.random.SeedSequence([int(master), hp_index, cmd_index]).generate_state(1)[0])


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(run_dir: str | Path) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text(encoding="utf-8"))


def _wav_rel(hp_index: int, n_hp: int, slug: str) -> str:
    return f"wav/{slug}.wav" if n_hp == 1 else f"wav/hp{hp_index}/{slug}.wav"


def run_campaign(cfg: CampaignConfig | str | Path, run_dir: str | Path, tts=None, oracle=None) -> Path:
    """Attack every corpus command under every blur setting and persist the results.

    ``tts`` and ``oracle`` default to what the config describes. Commands are
    seeded individually from the master seed, so the output does not depend
    on ``workers``. If the oracle becomes unreachable the manifest is
    written with ``complete: false`` and :class:`CampaignAborted` is raised.
    """
    if not isinstance(cfg, CampaignConfig):
        cfg = CampaignConfig.load(cfg)
    run_dir = Path(run_dir)
    (run_dir / "wav").mkdir(parents=True, exist_ok=True)
    (run_dir / "reports").mkdir(exist_ok=True)
    commands, raw = read_corpus(cfg.corpus)
    tts = tts or build_tts(cfg.tts)
    oracle = oracle or build_oracle(cfg.oracle, tts, commands)
    thr = cfg.thr if cfg.thr is not None else default_thr(tts)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    ledger_path = run_dir / "ledger.jsonl"
    ledger_path.unlink(missing_ok=True)
    ledger = QueryLedger(ledger_path)
    grid = cfg.blur_grid()
    jobs = [(h, hp, c, cmd) for h, hp in enumerate(grid) for c, cmd in enumerate(commands)]

    def attack(job):
        h, hp, c, cmd = job
        seed = _command_seed(cfg.seed, h, c)
        client = QueryClient(oracle, ledger)
        if cfg.mode == "otl":
            res = otl_generate(cmd, tts, client, cfg.otl_config(hp, thr, seed))
        else:
            res = ota_generate(cmd, tts, client, cfg.ota_config(hp, thr, seed))
        row = {
            "target": res.target,
            "slug": slugify(cmd),
            "params": hp.label(),
            "hp_index": h,
            "oracle_id": client.oracle_id,
            "success": bool(res.success),
            "final_loss": res.final_loss if np.isfinite(res.final_loss) else None,
            "mel_loss": res.mel_loss,
            "queries": res.query_count,
            "budget": res.budget,
            "delta_inf_norm": res.delta_norm,
            "delta_sha256": _sha256(np.ascontiguousarray(res.delta, dtype="<f8").tobytes()) if res.delta is not None else None,
            "candidate": res.candidate,
            "transcripts": res.transcripts,
            "wav": None,
            "wav_sha256": None,
        }
        if res.waveform is not None:
            rel = _wav_rel(h, len(grid), row["slug"])
            data = dsp.wav_bytes(res.waveform)
            (run_dir / rel).parent.mkdir(parents=True, exist_ok=True)
            (run_dir / rel).write_bytes(data)
            row["wav"], row["wav_sha256"] = rel, _sha256(data)
        return row

    rows, complete, error = [], True, None
    try:
        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                rows = list(pool.map(attack, jobs))
        else:
            for job in jobs:
                rows.append(attack(job))
    except OracleTransportError as exc:
        complete, error = False, str(exc)
        log.error("campaign aborted: %s", exc)

    manifest = {
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "corpus": commands,
        "corpus_sha256": _sha256(raw),
        "tts_fingerprint": getattr(tts, "fingerprint", type(tts).__name__),
        "oracle_id": getattr(oracle, "oracle_id", "oracle"),
        "oracle_tau": getattr(oracle, "tau", None),
        "thr": thr,
        "params": [hp.label() for hp in grid],
        "complete": complete,
        "error": error,
        "results": rows,
        "history": [],
    }
    _dump_json(run_dir / "manifest.json", manifest)
    emit_report(run_dir, "csv")
    emit_report(run_dir, "md")
    if not complete:
        raise CampaignAborted(error)
    return run_dir


# ---------------------------------------------------------------- tables and reports


def manifest_table(manifest: dict) -> SuccessTable:
    table = SuccessTable()
    for r in manifest.get("results", []):
        table.add(r["params"], r["oracle_id"], r["success"], r["queries"])
    return table


def table_csv(table: SuccessTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["params", "oracle_id", "successes", "attempts", "mean_queries"])
    for row in table.to_dict():
        writer.writerow([row["params"], row["oracle_id"], row["successes"], row["attempts"], f"{row['mean_queries']:.2f}"])
    return buf.getvalue()


def table_markdown(table: SuccessTable, title: str = "Attack success") -> str:
    """Rows are blur settings, columns are oracles, cells read ``successes/attempts (mean queries)``."""
    oracles = table.oracles
    lines = [f"# {title}", "", "| params | " + " | ".join(oracles) + " |", "|---|" + "---|" * len(oracles)]
    for p in table.params:
        cells = []
        for o in oracles:
            c = table.cell(p, o)
            cells.append(f"{c.successes}/{c.attempts} ({c.mean_queries:.1f})" if c else "-")
        lines.append(f"| {p} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(run_dir: str | Path, fmt: str = "md") -> Path:
    """Write ``reports/success.csv`` or ``reports/success.md`` from the manifest."""
    run_dir = Path(run_dir)
    table = manifest_table(load_manifest(run_dir))
    out = run_dir / "reports" / ("success.csv" if fmt == "csv" else "success.md")
    if fmt == "csv":
        text = table_csv(table)
    elif fmt in ("md", "markdown"):
        text = table_markdown(table)
    else:
        raise ValueError("format must be 'csv' or 'md'")
    out.parent.mkdir(exist_ok=True)
    out.write_text(text, encoding="utf-8")
    return out


def _samples(manifest: dict, run_dir: Path, only_success: bool):
    for r in manifest["results"]:
        if only_success and not r["success"]:
            continue
        yield r, (run_dir / r["wav"]) if r["wav"] else None


def recheck(run_dir: str | Path, oracle, today: str | None = None) -> SuccessTable:
    """Re-transcribe stored WAVs without regenerating them.

    Rows whose WAV is missing or no longer matches its recorded checksum
    are reported as stale and left out of the table. The dated table is appended to the manifest history.
    """
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    client = QueryClient(oracle, QueryLedger(run_dir / "ledger.jsonl"), use_cache=False)
    table, stale = SuccessTable(), []
    for r, path in _samples(manifest, run_dir, only_success=False):
        if path is None or not path.exists() or _sha256(path.read_bytes()) != r["wav_sha256"]:
            stale.append(r["slug"] if path is None else r["wav"])
            continue
        ok = client.transcribe(dsp.read_wav(path)).matches(r["target"])
        table.add(r["params"], client.oracle_id, ok, 1)
    entry = {
        "date": today or datetime.now(timezone.utc).date().isoformat(),
        "oracle_id": client.oracle_id,
        "table": table.to_dict(),
        "stale": stale,
    }
    manifest.setdefault("history", []).append(entry)
    _dump_json(run_dir / "manifest.json", manifest)
    (run_dir / "reports" / f"recheck-{entry['date']}.md").write_text(
        table_markdown(table, f"Re-check {entry['date']} ({client.oracle_id})")
        + (f"\nStale rows: {', '.join(stale)}\n" if stale else ""),
        encoding="utf-8",
    )
    return table


def eval_defense(run_dir: str | Path, oracle, specs: list[DefenseSpec]) -> dict:
    """Defense report over the run's successful samples; writes ``reports/defense.{csv,md}``."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    samples = [
        (r["target"], dsp.read_wav(p)) for r, p in _samples(manifest, run_dir, only_success=True) if p and p.exists()
    ]
    report = evaluate_defense(samples, oracle, specs)
    rows = [{"defense": "none", "successes": report.before.successes, "attempts": report.before.attempts}]
    for label, t in report.after.items():
        rows.append({"defense": label, "successes": t.successes, "attempts": t.attempts})
    for row in rows:
        row["rate"] = round(row["successes"] / row["attempts"], 6) if row["attempts"] else 0.0
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["defense", "successes", "attempts", "rate"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    (run_dir / "reports" / "defense.csv").write_text(buf.getvalue(), encoding="utf-8")
    md = ["# Defense evaluation", "", "| defense | success | rate |", "|---|---|---|"]
    md += [f"| {r['defense']} | {r['successes']}/{r['attempts']} | {100 * r['rate']:.1f}% |" for r in rows]
    (run_dir / "reports" / "defense.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    return {"before": report.before, "after": report.after, "rows": rows}


# ---------------------------------------------------------------- noise robustness


def mix_at_snr(signal: dsp.Waveform, base_noise: np.ndarray, snr_db: float) -> dsp.Waveform:
    """Add ``base_noise`` scaled so that signal power / noise power equals ``snr_db``."""
    if not np.isfinite(snr_db):
        return signal
    ps = float(np.mean(signal.samples**2))
    pn = float(np.mean(base_noise**2))
    scale = np.sqrt(ps / (pn * 10 ** (snr_db / 10)))
    return dsp.Waveform(signal.samples + scale * base_noise, signal.sample_rate_hz)


def measured_snr_db(mixed: dsp.Waveform, signal: dsp.Waveform) -> float:
    noise = mixed.samples - signal.samples
    pn = float(np.mean(noise**2))
    return float("inf") if pn == 0 else float(10 * np.log10(np.mean(signal.samples**2) / pn))


@dataclass
class RobustnessRow:
    snr_db: float
    wer: float
    delta_wer: float
    achieved_snr_db: float


def noise_robustness_report(oracle, tts, corpus: list[str], snr_list_db=DEFAULT_SNRS, seed: int = 0) -> list[RobustnessRow]:
    """Mean WER of clean renderings mixed with Gaussian noise at each SNR, minus the clean WER.

    Each command gets one fixed Gaussian noise draw that is rescaled per SNR,
    so the rows differ only in noise level.
    """
    renders = [deliver(tts.synthesize(c)) for c in corpus]
    rngs = [np.random.default_rng([seed, i]) for i in range(len(corpus))]
    bases = [rng.standard_normal(len(w)) for rng, w in zip(rngs, renders)]

    def mean_wer(waves):
        return float(np.mean([wer(c, oracle.transcribe(w).raw_text) for c, w in zip(corpus, waves)]))

    clean = mean_wer(renders)
    rows = []
    for snr in snr_list_db:
        mixed = [mix_at_snr(w, b, snr) for w, b in zip(renders, bases)]
        achieved = float(np.mean([measured_snr_db(m, w) for m, w in zip(mixed, renders)]))
        value = mean_wer(mixed)
        rows.append(RobustnessRow(float(snr), value, value - clean, achieved))
    return rows


def robustness_markdown(rows: list[RobustnessRow], oracle_id: str) -> str:
    lines = [f"# Noise robustness ({oracle_id})", "", "| SNR (dB) | WER | delta WER | achieved SNR (dB) |", "|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r.snr_db:g} | {r.wer:.3f} | {r.delta_wer:+.3f} | {r.achieved_snr_db:.2f} |")
    return "\n".join(lines) + "\n"


def synth_corpus(tts, corpus: list[str], out_dir: str | Path) -> list[Path]:
    """Render clean delivered audio for every command into ``out_dir/<slug>.wav``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in corpus:
        p = out_dir / f"{slugify(c)}.wav"
        dsp.write_wav(p, deliver(tts.synthesize(normalize_text(c))))
        paths.append(p)
    return paths
