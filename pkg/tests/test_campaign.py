import hashlib
import json

import numpy as np
import pytest
import yaml

from embattack.campaign import (
    CampaignAborted,
    CampaignConfig,
    emit_report,
    load_manifest,
    manifest_table,
    measured_snr_db,
    mix_at_snr,
    noise_robustness_report,
    read_corpus,
    recheck,
    run_campaign,
    table_markdown,
)
from embattack import dsp
from embattack.asr import OracleTransportError, mock_build
from embattack.metrics import SuccessTable

SMALL = dict(corpus=None, seed=1, num_candidates=1, epoch_max=12)


@pytest.fixture
def small_corpus(tmp_path):
    p = tmp_path / "corpus.txt"
    p.write_text("# three commands\ndarn it\ncall 123\n\nunlock the door\n")
    return str(p)


def small_cfg(corpus, **kw):
    return CampaignConfig.from_dict({**SMALL, "corpus": corpus, **kw})


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_builtin_corpora():
    c12, raw = read_corpus("builtin:corpus12")
    assert len(c12) == 12 and "darn it" in c12
    c32, _ = read_corpus("builtin:corpus32")
    assert len(c32) == 32 and set(c12) <= set(c32)
    with pytest.raises(ValueError):
        read_corpus("builtin:nope")


def test_config_keys_and_grid(tmp_path):
    cfg = CampaignConfig.from_dict({"alpha": [0.25, 0.3], "beta": 0, "gamma": 0})
    assert [hp.label() for hp in cfg.blur_grid()] == ["a=0.25,b=0,g=0", "a=0.3,b=0,g=0"]
    cfg = CampaignConfig.from_dict({"hp_grid": [{"alpha": 0.5, "beta": 2, "gamma": 0.5}]})
    assert cfg.blur_grid()[0].beta == 2
    with pytest.raises(ValueError, match="unknown config keys"):
        CampaignConfig.from_dict({"alpah": 0.3})
    with pytest.raises(ValueError):
        CampaignConfig.from_dict({"alpha": 2.0})
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"mode": "ota", "k": 5, "eta": 0.05}))
    cfg = CampaignConfig.load(p)
    assert cfg.ota_config(cfg.blur_grid()[0], 1.0, 0).k == 5


def test_campaign_layout_determinism_and_conservation(tmp_path, small_corpus, tts):
    cfg = small_cfg(small_corpus, alpha=[0.25, 0.3], beta=0, gamma=0)
    a = run_campaign(cfg, tmp_path / "a", tts=tts)
    b = run_campaign(cfg, tmp_path / "b", tts=tts)
    for name in ("manifest.json", "reports/success.csv", "reports/success.md"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    m = load_manifest(a)
    assert m["complete"] and len(m["results"]) == 6
    for r in m["results"]:
        assert r["wav"].startswith(f"wav/hp{r['hp_index']}/")
        assert digest(a / r["wav"]) == r["wav_sha256"] == digest(b / r["wav"])
    ledger_lines = [json.loads(x) for x in (a / "ledger.jsonl").read_text().splitlines()]
    real = sum(1 for e in ledger_lines if not e["cached"])
    assert real == sum(r["queries"] for r in m["results"])
    md = (a / "reports" / "success.md").read_text()
    assert md.index("a=0.25") < md.index("a=0.3")
    assert "/3 (" in md


def test_workers_do_not_change_results(tmp_path, small_corpus, tts):
    one = run_campaign(small_cfg(small_corpus, workers=1), tmp_path / "w1", tts=tts)
    three = run_campaign(small_cfg(small_corpus, workers=3), tmp_path / "w3", tts=tts)
    assert (one / "manifest.json").read_text().replace("\"workers\": 1", "") == (three / "manifest.json").read_text().replace(
        "\"workers\": 3", ""
    )


def test_recheck_same_oracle_and_stale_row(tmp_path, small_corpus, tts):
    run = run_campaign(small_cfg(small_corpus), tmp_path / "r", tts=tts)
    m = load_manifest(run)
    oracle = mock_build(read_corpus(small_corpus)[0], tts)
    table = recheck(run, oracle, today="2026-01-01")
    originally = sum(r["success"] for r in m["results"])
    assert table.successes == originally
    (run / m["results"][0]["wav"]).unlink()
    table2 = recheck(run, oracle, today="2026-04-01")
    hist = load_manifest(run)["history"]
    assert [h["date"] for h in hist] == ["2026-01-01", "2026-04-01"]
    assert hist[1]["stale"] == [m["results"][0]["wav"]]
    assert table2.attempts == table.attempts - 1
    assert table2.successes == originally - m["results"][0]["success"]


def test_recheck_flags_modified_wav(tmp_path, small_corpus, tts):
    run = run_campaign(small_cfg(small_corpus), tmp_path / "r", tts=tts)
    m = load_manifest(run)
    wav = run / m["results"][1]["wav"]
    data = bytearray(wav.read_bytes())
    data[-2:] = b"\x01\x00" if data[-2:] != b"\x01\x00" else b"\x02\x00"
    wav.write_bytes(bytes(data))
    table = recheck(run, mock_build(read_corpus(small_corpus)[0], tts), today="2026-01-01")
    assert load_manifest(run)["history"][0]["stale"] == [m["results"][1]["wav"]]
    assert table.attempts == len(m["results"]) - 1


def test_recheck_with_other_oracle_records_both(tmp_path, small_corpus, tts):
    run = run_campaign(small_cfg(small_corpus), tmp_path / "r", tts=tts)
    vocab = read_corpus(small_corpus)[0]
    recheck(run, mock_build(vocab, tts), today="2026-01-01")
    recheck(run, mock_build(vocab, tts, robustness_sigma=2.0, oracle_id="mock-smooth"), today="2026-04-01")
    hist = load_manifest(run)["history"]
    assert [h["oracle_id"] for h in hist] == ["mock", "mock-smooth"]


class Unreachable:
    oracle_id = "down"

    def transcribe(self, w):
        raise OracleTransportError("connection refused")


def test_unreachable_oracle_flags_incomplete(tmp_path, small_corpus, tts):
    with pytest.raises(CampaignAborted):
        run_campaign(small_cfg(small_corpus), tmp_path / "x", tts=tts, oracle=Unreachable())
    m = load_manifest(tmp_path / "x")
    assert m["complete"] is False and m["results"] == []


def test_report_formats(tmp_path, small_corpus, tts):
    run = run_campaign(small_cfg(small_corpus), tmp_path / "r", tts=tts)
    first = emit_report(run, "csv").read_bytes()
    assert emit_report(run, "csv").read_bytes() == first
    assert first.decode().splitlines()[0] == "params,oracle_id,successes,attempts,mean_queries"
    with pytest.raises(ValueError):
        emit_report(run, "pdf")


def test_empty_table_is_header_only():
    text = table_markdown(SuccessTable())
    assert text.splitlines()[2] == "| params |  |"
    assert len(text.splitlines()) == 4
    assert manifest_table({"results": []}).to_dict() == []


def test_mix_at_snr_is_accurate(rng):
    w = dsp.Waveform(rng.standard_normal(20000), 22050)
    base = rng.standard_normal(20000)
    for snr in (37, 25, 13, 3):
        assert abs(measured_snr_db(mix_at_snr(w, base, snr), w) - snr) <= 0.5
    assert mix_at_snr(w, base, float("inf")) is w


def test_noise_robustness(tts, mock_asr, corpus12):
    rows = noise_robustness_report(mock_asr, tts, corpus12, [float("inf"), 37, 25, 13, 3, -5])
    assert rows[0].delta_wer == 0.0
    deltas = [r.delta_wer for r in rows]
    assert all(b >= a for a, b in zip(deltas, deltas[1:]))
    assert deltas[-1] > 0
    for r in rows[1:]:
        assert abs(r.achieved_snr_db - r.snr_db) <= 0.5
