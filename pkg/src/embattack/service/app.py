"""HTTP front end over one toy TTS and one mock recognizer.

``POST /transcribe`` accepts a raw WAV body and answers ``{"text": ...}``,
which is the default wire format of :class:`~embattack.asr.HttpAdapter`;
pointing a campaign's ``http`` oracle at this service exercises the whole
network path offline.
"""

from __future__ import annotations

import base64
import math

from fastapi import FastAPI, HTTPException, Request, Response

from .. import __version__, dsp
from ..asr import QueryClient, QueryLedger, mock_build
from ..attack import OtaConfig, OtlConfig, deliver, ota_generate, otl_generate
from ..blurring import BlurParams
from ..campaign import read_corpus
from ..text import normalize_text
from ..tts import ToyTTS
from .schemas import AttackResponse, BlurModel, Health, OtaRequest, OtlRequest, SynthRequest, TranscriptResponse


def _blur(b: BlurModel) -> BlurParams:
    try:
        return BlurParams(b.alpha, b.beta, b.gamma)
    except ValueError as exc:
        raise HTTPException(422, str(exc)) from exc


def _attack_response(res) -> AttackResponse:
    wav = base64.b64encode(dsp.wav_bytes(res.waveform)).decode("ascii") if res.waveform is not None else None
    return AttackResponse(
        target=res.target,
        success=res.success,
        final_loss=res.final_loss if math.isfinite(res.final_loss) else None,
        mel_loss=res.mel_loss,
        query_count=res.query_count,
        budget=res.budget,
        delta_inf_norm=res.delta_norm,
        audio_wav_base64=wav,
    )


def create_app(corpus: str = "builtin:corpus12", tts=None, oracle=None) -> FastAPI:
    tts = tts or ToyTTS()
    if oracle is None:
        oracle = mock_build(read_corpus(corpus)[0], tts)
    ledger = QueryLedger()
    app = FastAPI(title="embattack", version=__version__)
    app.state.tts, app.state.oracle, app.state.ledger = tts, oracle, ledger

    @app.get("/health", response_model=Health)
    def health():
        return Health(
            version=__version__,
            oracle_id=oracle.oracle_id,
            vocabulary_size=len(getattr(oracle, "vocabulary", [])),
            tau=float(getattr(oracle, "tau", 0.0)),
        )

    @app.post("/synth")
    def synth(req: SynthRequest):
        if not normalize_text(req.text):
            raise HTTPException(422, "text is empty after normalization")
        return Response(dsp.wav_bytes(deliver(tts.synthesize(req.text))), media_type="audio/wav")

    @app.post("/transcribe", response_model=TranscriptResponse)
    async def transcribe(request: Request):
        body = await request.body()
        try:
            w = dsp.read_wav(body)
        except Exception as exc:  # wave raises several unrelated types on bad input
            raise HTTPException(400, f"body is not a 16-bit PCM WAV: {exc}") from exc
        if len(w) == 0:
            raise HTTPException(400, "empty audio")
        return TranscriptResponse(text=oracle.transcribe(w).raw_text)

    @app.post("/attack/otl", response_model=AttackResponse)
    def attack_otl(req: OtlRequest):
        cfg = OtlConfig(
            epoch_max=req.epoch_max,
            num_candidates=req.num_candidates,
            learning_rate=req.learning_rate,
            thr=req.thr,
            query_policy=req.query_policy,
            blur=_blur(req.blur),
            rng_seed=req.seed,
        )
        return _attack_response(otl_generate(req.text, tts, QueryClient(oracle, ledger), cfg))

    @app.post("/attack/ota", response_model=AttackResponse)
    def attack_ota(req: OtaRequest):
        cfg = OtaConfig(
            k=req.k, epoch_max=req.epoch_max, w=req.w, c1=req.c1, c2=req.c2, thr=req.thr, eta=req.eta, blur=_blur(req.blur), rng_seed=req.seed
        )
        return _attack_response(ota_generate(req.text, tts, QueryClient(oracle, ledger), cfg))

    return app
