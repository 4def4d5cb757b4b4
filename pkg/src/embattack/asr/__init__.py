from .adapters import (
    HttpAdapter,
    HttpAdapterConfig,
    MalformedResponseError,
    OracleTransportError,
    SubprocessAdapter,
    SubprocessAdapterConfig,
)
from .ledger import NO_MATCH, BudgetExceeded, QueryClient, QueryLedger, Transcription, audio_hash
from .mock import MockAsrModel, calibrate_tau, cepstral_features, dtw_distance, mock_build, self_test

__all__ = [
    "NO_MATCH",
    "BudgetExceeded",
    "HttpAdapter",
    "HttpAdapterConfig",
    "MalformedResponseError",
    "MockAsrModel",
    "OracleTransportError",
    "QueryClient",
    "QueryLedger",
    "SubprocessAdapter",
    "SubprocessAdapterConfig",
    "Transcription",
    "audio_hash",
    "calibrate_tau",
    "cepstral_features",
    "dtw_distance",
    "mock_build",
    "self_test",
]
