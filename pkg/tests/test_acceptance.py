"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line; the lines are printed together
when the module finishes, so they show up in ``pytest -v`` output without
``-s``. Run just this file with ``pytest tests/test_acceptance.py -v``.
"""

import itertools
import time

import numpy as np
import pytest

from embattack import dsp
from embattack.asr import HttpAdapter, HttpAdapterConfig, OracleTransportError, QueryClient
from embattack.attack import (
    Objective,
    NoiseBank,
    OtaConfig,
    OtlConfig,
    SwarmState,
    default_thr,
    inf_norm,
    ota_generate,
    otl_generate,
    playback,
    pso_step,
)
from embattack.blurring import BlurParams, blur, freeze_noise
from embattack.campaign import CampaignConfig, run_campaign
from embattack.defense import DefenseSpec, evaluate_defense
from embattack.metrics import edit_distance
from oracles import recursive_edit_distance
from stub_server import StubServer

pytestmark = pytest.mark.slow

LINES: dict[int, str] = {}


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    out = reporter.write_line if reporter else print
    out("")
    out("acceptance summary")
    for k in sorted(LINES):
        out(LINES[k])


def verdict(n: int, ok: bool, detail: str) -> None:
    LINES[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    assert ok, LINES[n]


class FixedDraws:
    def __init__(self, *values):
        self.values = np.array(values)

    def random(self, n):
        return self.values[:n]


@pytest.fixture(scope="module")
def otl_run(tts, mock_asr, corpus12):
    """Default over-the-line attack on all twelve commands, shared by criteria 5, 6 and 9."""
    t0 = time.perf_counter()
    results = [otl_generate(c, tts, QueryClient(mock_asr), OtlConfig()) for c in corpus12]
    return results, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ota_run(tts, mock_asr, corpus12):
    t0 = time.perf_counter()
    results = [ota_generate(c, tts, QueryClient(mock_asr), OtaConfig()) for c in corpus12]
    return results, time.perf_counter() - t0


def test_01_edit_distance_matches_reference():
    t0 = time.perf_counter()
    words = ["".join(p) for n in range(4) for p in itertools.product("abc", repeat=n)]
    mismatches = sum(edit_distance(a, b) != recursive_edit_distance(a, b) for a in words for b in words)
    exhaustive = len(words) ** 2
    r = np.random.default_rng(1)
    for _ in range(10_000):
        a = "".join(r.choice(list("abcd"), r.integers(0, 6)))
        b = "".join(r.choice(list("abcd"), r.integers(0, 6)))
        mismatches += edit_distance(a, b) != recursive_edit_distance(a, b)
    dt = time.perf_counter() - t0
    verdict(1, mismatches == 0 and dt < 10, f"{exhaustive} exhaustive + 10000 random pairs, {mismatches} mismatches, {dt:.1f}s")


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def test_02_gradients_match_finite_differences(tts):
    t0 = time.perf_counter()
    emb = tts.encode("darn it")
    hp = BlurParams(0.3, 1, 1.0)
    worst_vjp = worst_obj = 0.0
    h = 1e-5
    for point in range(20):
        r = np.random.default_rng(point)
        delta = r.uniform(-1, 1, emb.tokens.shape)
        x = emb.tokens + delta
        mel, gate = tts.decode(x)
        cm, cg = r.standard_normal(mel.shape), r.standard_normal(gate.shape)
        obj = Objective(tts, emb, hp, NoiseBank(hp, point))
        _, grad, _ = obj.value_and_grad(delta)
        fd_vjp = np.zeros_like(x)
        fd_obj = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            e = np.zeros_like(x)
            e[idx] = h
            mp, gp = tts.decode(x + e)
            mm, gm = tts.decode(x - e)
            fd_vjp[idx] = (np.sum(cm * (mp - mm)) + np.sum(cg * (gp - gm))) / (2 * h)
            fd_obj[idx] = (obj(delta + e) - obj(delta - e)) / (2 * h)
        worst_vjp = max(worst_vjp, _rel(tts.decode_vjp(x, cm, cg), fd_vjp))
        worst_obj = max(worst_obj, _rel(grad, fd_obj))
    dt = time.perf_counter() - t0
    ok = worst_vjp <= 1e-4 and worst_obj <= 1e-4 and dt < 5
    verdict(2, ok, f"20 points, worst rel. error decoder {worst_vjp:.1e}, objective {worst_obj:.1e}, {dt:.1f}s")


def test_03_blur_semantics(rng):
    m = rng.random((80, 20)) + 1.0
    out = blur(m, BlurParams(alpha=0.25, beta=3, gamma=0.0))
    rows_ok = (out[:3] == 0).all() and np.array_equal(out[3:30], 0.25 * m[3:30]) and np.array_equal(out[30:], m[30:])
    identity_ok = np.array_equal(blur(m, BlurParams()), m)
    noise = freeze_noise(BlurParams(gamma=0.5, rng_seed=7), (80, 1250))
    bound_ok = np.abs(noise).max() <= 0.5
    # uniform on [-g, g]: mean 0, variance g^2 / 3
    mean, var = noise.mean(), noise.var()
    stats_ok = abs(mean) < 0.005 and abs(var - 0.25 / 3) < 0.002
    frozen_ok = np.array_equal(noise, freeze_noise(BlurParams(gamma=0.5, rng_seed=7), (80, 1250)))
    ok = rows_ok and identity_ok and bound_ok and stats_ok and frozen_ok
    verdict(3, ok, f"row pattern {rows_ok}, 1e5 noise samples within bound {bound_ok}, mean {mean:+.4f}, var {var:.4f}")


def test_04_pso_update():
    s = SwarmState(np.array([[1.0]]), np.array([[0.5]]), np.array([[2.0]]), np.array([0.0]), np.array([3.0]), 0.0)
    out = pso_step(s, 0.5, 2.0, 2.0, 4.0, FixedDraws(0.5, 0.25))
    hand_ok = out.velocities[0, 0] == 2.25 and out.positions[0, 0] == 3.25
    target = np.array([0.7, -1.2, 0.4])
    monotone = bounded = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        swarm = SwarmState.start(8, target.shape, 2.0, rng)
        history = []
        for _ in range(20):
            for i in range(8):
                swarm.observe(i, float(np.sum((swarm.positions[i] - target) ** 2)))
            history.append(swarm.gloss)
            swarm = pso_step(swarm, 0.5, 2.0, 2.0, 2.0, rng)
            bounded &= all(inf_norm(p) <= 2.0 for p in swarm.positions)
        monotone &= all(b <= a for a, b in zip(history, history[1:]))
    verdict(4, hand_ok and monotone and bounded, f"hand example {hand_ok}, gbest non-increasing over 100 seeds {monotone}, positions within thr {bounded}")


def test_05_query_budgets(tts, mock_asr, otl_run, ota_run):
    otl, _ = otl_run
    online_max = max(max(r.candidate_queries) for r in otl)
    offline = otl_generate("darn it", tts, QueryClient(mock_asr, use_cache=False), OtlConfig(num_candidates=4, query_policy="offline"))
    ota_max = max(r.query_count for r in ota_run[0])
    ok = online_max <= 50 and offline.candidate_queries == [1, 1, 1, 1] and ota_max <= 400
    verdict(5, ok, f"online max {online_max}/candidate (<= 50), offline {offline.candidate_queries}, swarm max {ota_max} (<= 400)")


def test_06_otl_end_to_end(tts, mock_asr, otl_run):
    results, dt = otl_run
    wins = [r for r in results if r.success]
    deformed = all(abs(r.mel_loss) >= 450 for r in wins)
    fresh = QueryClient(mock_asr, use_cache=False)
    replay = all(fresh.transcribe(r.waveform).matches(r.target) for r in wins)
    norms = all(r.delta_norm <= default_thr(tts) for r in wins)
    ok = len(wins) >= 8 and deformed and replay and norms and dt < 180
    smallest = min((abs(r.mel_loss) for r in wins), default=0.0)
    verdict(6, ok, f"{len(wins)}/12 succeed, min |mel loss| {smallest:.0f} (>= 450), replay {replay}, {dt:.0f}s")


def test_07_ota_end_to_end(mock_asr, ota_run):
    results, dt = ota_run
    passed = 0
    for i, r in enumerate(results):
        if not r.success:
            continue
        # fresh draw, distinct from every seed the swarm used
        clean_ok = mock_asr.transcribe(r.waveform).matches(r.target)
        noisy_ok = mock_asr.transcribe(playback(r.waveform, 0.1, 900_000 + i)).matches(r.target)
        passed += clean_ok and noisy_ok
    ok = passed >= 7 and dt < 600
    verdict(7, ok, f"{passed}/12 pass clean and a fresh 0.1 noise draw ({sum(r.success for r in results)} found), {dt:.0f}s")


def test_08_noise_mixing(rng):
    peaks_ok = True
    for seed in range(20):
        w = dsp.Waveform(rng.standard_normal(5000) * rng.uniform(0.1, 100), 22050)
        peaks_ok &= np.max(np.abs(dsp.mix_noise_and_scale(w, 0.1, seed).samples)) == 10000
    w = dsp.Waveform(rng.standard_normal(5000), 22050)
    exact = np.array_equal(dsp.mix_noise_and_scale(w, 0.0).samples, w.samples / np.max(np.abs(w.samples)) * 10000)
    verdict(8, peaks_ok and exact, f"peak exactly 10000 over 20 draws {peaks_ok}, eta=0 bit-exact {exact}")


def test_09_defenses(mock_asr, otl_run):
    samples = [(r.target, r.waveform) for r in otl_run[0] if r.success]
    specs = [DefenseSpec.parse(s) for s in ("resample:8000", "low_pass:6000", "high_pass:500")]
    rep = evaluate_defense(samples, mock_asr, specs)
    rs, lp, hpf = (rep.drop(s.label) for s in specs)
    ok = rs > 0 and hpf >= lp
    verdict(9, ok, f"before {rep.before.rate:.2f}; drop resample 8k {rs:.2f}, low-pass 6k {lp:.2f}, high-pass 500 {hpf:.2f}")


def test_10_campaign_is_reproducible(tmp_path, tts):
    cfg = CampaignConfig.from_dict({"num_candidates": 1, "epoch_max": 10, "seed": 3})
    a = run_campaign(cfg, tmp_path / "a", tts=tts)
    b = run_campaign(cfg, tmp_path / "b", tts=tts)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "ledger.jsonl")
    same = [f for f in files if (a / f).read_bytes() == (b / f).read_bytes()]
    verdict(10, len(same) == len(files) and len(files) > 12, f"{len(same)}/{len(files)} artifacts byte-identical")


def test_11_http_adapter_against_stub():
    audio = dsp.Waveform(np.round(10000 * np.sin(np.arange(2000) / 7.0)), 22050)

    def adapter(url, **kw):
        return HttpAdapter(HttpAdapterConfig(endpoint=url, backoff_s=0.01, **kw), sleep=lambda s: None)

    with StubServer([(200, {"text": "darn it"})]) as srv:
        client = QueryClient(adapter(srv.url))
        plain = client.transcribe(audio).matches("darn it") and client.ledger.total == 1
    with StubServer([(429, {}), (200, {"text": "darn it"})]) as srv:
        client = QueryClient(adapter(srv.url))
        retried = client.transcribe(audio).matches("darn it") and client.ledger.total == 2
    with StubServer([("sleep", 0.5, 200, {"text": "x"})] * 2) as srv:
        client = QueryClient(adapter(srv.url, timeout_s=0.1, max_retries=1))
        try:
            client.transcribe(audio)
            timed_out = False
        except OracleTransportError:
            timed_out = client.ledger.total == 2
    verdict(11, plain and retried and timed_out, f"200 {plain}, 429 then 200 {retried}, timeout raises after retries {timed_out}")


def test_12_griffin_lim():
    fb = dsp.mel_filterbank()
    monotone = True
    for seed in range(10):
        mel = np.random.default_rng(seed).random((80, 25)) * 3
        history = []
        dsp.griffin_lim(mel, fb, 40, history=history)
        monotone &= all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
    tone = dsp.mel_spectrogram(dsp.sine(440, 1.0), fb)
    again = dsp.mel_spectrogram(dsp.griffin_lim(tone, fb, 60), fb)
    a, b = again.ravel() - again.mean(), tone.ravel() - tone.mean()
    corr = float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))
    verdict(12, monotone and corr >= 0.9, f"error non-increasing on 10 random mels {monotone}, tone correlation {corr:.3f}")
