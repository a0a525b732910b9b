"""Backends that answer prompt bundles: an HTTP chat-completion adapter and
deterministic mock oracles driven by the injection answer key."""

from __future__ import annotations

import base64
import json
import math
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Optional

import httpx

from .corruption import InjectionLog, diagram_rng
from .grounding import BOX_QA, MISSING_JUDGE, SCHEMA_IDS, PromptBundle
from .imaging import encode_png
from .model import BoundingBox, DetectionSet, Diagram, iou

BACKENDS = ("http", "mock-perfect", "mock-noisy")
API_KEY_ENV = "PIDJUDGE_API_KEY"
DEFAULT_TIGHT_IOU = 0.75


class VlmError(RuntimeError):
    """A backend call failed for good (after retries); carries the prompt's tile_ref."""

    def __init__(self, message: str, tile_ref: Any = None):
        super().__init__(message)
        self.tile_ref = tile_ref


class StructuredResponseError(ValueError):
    kind = "schema-mismatch"


class NoJsonFound(StructuredResponseError):
    kind = "no-json-found"


class SchemaMismatch(StructuredResponseError):
    kind = "schema-mismatch"


class CoordinateOutOfBounds(StructuredResponseError):
    kind = "coordinate-out-of-bounds"


@dataclass(frozen=True)
class NoiseProfile:
    claim_detect_prob: float = 0.9
    spurious_claim_rate: float = 0.5
    verdict_flip_prob: float = 0.0
    jitter_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("claim_detect_prob", "verdict_flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.spurious_claim_rate < 0 or self.jitter_frac < 0:
            raise ValueError("spurious_claim_rate and jitter_frac must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    backend: str = "mock-perfect"
    endpoint_url: Optional[str] = None
    model_name: str = "mock"
    temperature: float = 0.0
    max_output_tokens: int = 1024
    max_retries: int = 3
    timeout: float = 60.0
    max_concurrency: int = 4
    backoff_base: float = 1.0
    noise: NoiseProfile = NoiseProfile()
    tight_iou: float = DEFAULT_TIGHT_IOU

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        if self.backend == "http" and not self.endpoint_url:
            raise ValueError("http backend needs endpoint_url")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        if isinstance(obj.get("noise"), dict):
            obj["noise"] = NoiseProfile(**obj["noise"])
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def label(self) -> str:
        return self.model_name if self.backend == "http" else f"{self.backend}:{self.model_name}"


@dataclass
class VlmResponse:
    raw_text: str
    parsed: Optional[Any] = None
    token_usage: tuple[int, int] = (0, 0)
    error: Optional[str] = None


class UsageMeter:
    """Thread-safe running total of (input, output) tokens and call count."""

    def __init__(self):
        self._lock = threading.Lock()
        self.input_tokens = 0
        self.output_tokens = 0
        self.calls = 0

    def add(self, response: VlmResponse) -> None:
        with self._lock:
            self.input_tokens += response.token_usage[0]
            self.output_tokens += response.token_usage[1]
            self.calls += 1

    def to_dict(self) -> dict:
        return {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens, "calls": self.calls}


@dataclass
class OracleContext:
    """Answer key handed to the mock backends (ignored by the HTTP backend)."""

    diagram: Diagram
    log: InjectionLog
    detections: DetectionSet
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.classes:
            self.classes = sorted({s.class_label for s in self.diagram.symbols})


# --------------------------------------------------------------------------
# token accounting

def estimate_image_tokens(width: int, height: int) -> int:
    return math.ceil(width / 16) * math.ceil(height / 16)


def estimate_text_tokens(text: str) -> int:
    return math.ceil(len(text.encode("utf-8")) / 4)


def estimate_prompt_tokens(bundle: PromptBundle) -> int:
    return estimate_text_tokens(bundle.text) + sum(
        estimate_image_tokens(im.shape[1], im.shape[0]) for im in bundle.images
    )


# --------------------------------------------------------------------------
# structured replies

_FENCE = re.compile(r"```[ \t]*(?:json|JSON)?[ \t]*\n?(.*?)```", re.DOTALL)


def _extract_json(raw_text: str) -> Any:
    blocks = _FENCE.findall(raw_text or "")
    if blocks:
        candidate = blocks[-1]
    else:
        candidate = (raw_text or "").strip()
    try:
        return json.loads(candidate)
    except (json.JSONDecodeError, TypeError):
        raise NoJsonFound("no JSON block found in reply") from None


def _check_box(value: Any, where: str, bounds: Optional[tuple[int, int]]) -> list[int]:
    if not isinstance(value, list) or len(value) != 4:
        raise SchemaMismatch(f"{where}.bbox: expected [x, y, w, h]")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise SchemaMismatch(f"{where}.bbox: non-numeric value {v!r}")
        out.append(int(round(v)))
    x, y, w, h = out
    if w <= 0 or h <= 0:
        raise SchemaMismatch(f"{where}.bbox: width and height must be positive")
    if bounds is not None:
        bw, bh = bounds
        if x < 0 or y < 0 or x + w > bw or y + h > bh:
            raise CoordinateOutOfBounds(f"{where}.bbox {out} outside {bw}x{bh} image")
    return out


def _opt_str(obj: dict, key: str, where: str) -> Optional[str]:
    v = obj.get(key)
    if v is None or v == "":
        return None
    if not isinstance(v, str):
        raise SchemaMismatch(f"{where}.{key}: expected string or null")
    return v


def _items(data: Any, key: str) -> list:
    if isinstance(data, list):
        return data
    if isinstance(data, dict) and isinstance(data.get(key), list):
        return data[key]
    raise SchemaMismatch(f"expected an object with a '{key}' list")


def parse_structured_response(raw_text: str, schema_id: str, bounds: Optional[tuple[int, int]] = None) -> Any:
    """Extract the last fenced JSON block (or bare JSON) and validate it.

    Returns a normalized payload:
      missing-judge -> {"missing": [{"bbox", "class", "tag", "rationale"}]}
      box-qa        -> {"valid", "tight", "class"}
      region-detect -> {"detections": [{"class", "bbox", "score"}]}
    """
    if schema_id not in SCHEMA_IDS:
        raise ValueError(f"unknown schema id {schema_id!r}")
    data = _extract_json(raw_text)
    if schema_id == MISSING_JUDGE:
        claims = []
        for i, c in enumerate(_items(data, "missing")):
            where = f"missing[{i}]"
            if not isinstance(c, dict):
                raise SchemaMismatch(f"{where}: expected object")
            rationale = c.get("rationale") or ""
            if not isinstance(rationale, str):
                raise SchemaMismatch(f"{where}.rationale: expected string")
            claims.append({
                "bbox": _check_box(c.get("bbox"), where, bounds),
                "class": _opt_str(c, "class", where),
                "tag": _opt_str(c, "tag", where),
                "rationale": rationale,
            })
        return {"missing": claims}
    if schema_id == BOX_QA:
        if not isinstance(data, dict):
            raise SchemaMismatch("box-qa: expected object")
        for key in ("valid", "tight"):
            if not isinstance(data.get(key), bool):
                raise SchemaMismatch(f"box-qa.{key}: expected boolean")
        cls = data.get("class")
        if not isinstance(cls, str) or not cls:
            raise SchemaMismatch("box-qa.class: expected non-empty string")
        return {"valid": data["valid"], "tight": data["tight"], "class": cls}
    dets = []
    for i, d in enumerate(_items(data, "detections")):
        where = f"detections[{i}]"
        if not isinstance(d, dict):
            raise SchemaMismatch(f"{where}: expected object")
        cls = d.get("class")
        if not isinstance(cls, str) or not cls:
            raise SchemaMismatch(f"{where}.class: expected non-empty string")
        score = d.get("score")
        if score is not None:
            if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
                raise SchemaMismatch(f"{where}.score: expected number in [0, 1]")
            score = float(score)
        dets.append({"class": cls, "bbox": _check_box(d.get("bbox"), where, bounds), "score": score})
    return {"detections": dets}


def serialize_payload(payload: Any) -> str:
    return "```json\n" + json.dumps(payload, sort_keys=True) + "\n```"


# --------------------------------------------------------------------------
# backends

class Backend:
    config: ModelConfig

    def complete(self, bundle: PromptBundle, context: Optional[OracleContext] = None) -> VlmResponse:
        raise NotImplementedError


def _respond(payload: Any, bundle: PromptBundle) -> VlmResponse:
    raw = "Reasoning omitted (oracle backend).\n" + serialize_payload(payload)
    parsed = parse_structured_response(raw, bundle.response_schema_id, bundle.bounds)
    return VlmResponse(raw, parsed, (estimate_prompt_tokens(bundle), estimate_text_tokens(raw)))


class MockPerfectBackend(Backend):
    """Answers every prompt exactly from the injection log and ground truth."""

    def __init__(self, config: ModelConfig):
        self.config = config

    def complete(self, bundle: PromptBundle, context: Optional[OracleContext] = None) -> VlmResponse:
        if context is None:
            raise VlmError("mock backends need an oracle context", bundle.tile_ref)
        return _respond(self.answer(bundle, context), bundle)

    def answer(self, bundle: PromptBundle, ctx: OracleContext) -> dict:
        if bundle.response_schema_id == MISSING_JUDGE:
            return {"missing": self.missing_claims(bundle, ctx)}
        if bundle.response_schema_id == BOX_QA:
            return self.box_verdict(bundle, ctx)
        return {"detections": self.region_detections(bundle, ctx)}

    def missing_claims(self, bundle: PromptBundle, ctx: OracleContext) -> list[dict]:
        # only fully visible omissions; border-cut symbols are claimed by a neighbouring tile
        win: BoundingBox = bundle.meta["window"]
        symbols = ctx.diagram.symbol_map()
        out = []
        for sid in sorted(ctx.log.omitted):
            s = symbols[sid]
            if win.contains(s.bbox):
                out.append({
                    "bbox": s.bbox.translate(-win.x, -win.y).as_list(),
                    "class": s.class_label,
                    "tag": s.tag,
                    "rationale": "symbol without an outline",
                })
        return out

    def box_verdict(self, bundle: PromptBundle, ctx: OracleContext) -> dict:
        det_id = bundle.meta["detection_id"]
        det = ctx.detections.by_id().get(det_id)
        symbols = ctx.diagram.symbol_map()
        label = det.class_label if det is not None else "unknown"
        if det is None or det_id in ctx.log.false_positives or det_id not in symbols:
            return {"valid": False, "tight": False, "class": label}
        gt = symbols[det_id]
        return {"valid": True, "tight": iou(det.bbox, gt.bbox) >= self.config.tight_iou, "class": gt.class_label}

    def region_detections(self, bundle: PromptBundle, ctx: OracleContext) -> list[dict]:
        win: BoundingBox = bundle.meta["window"]
        return [
            {"class": s.class_label, "bbox": s.bbox.translate(-win.x, -win.y).as_list(), "score": None}
            for s in sorted(ctx.diagram.symbols, key=lambda s: s.id)
            if win.contains(s.bbox)
        ]


def _jitter(box: list[int], frac: float, rng, bounds: tuple[int, int]) -> list[int]:
    x, y, w, h = box
    if frac > 0:
        x += int(round(rng.uniform(-frac, frac) * w))
        y += int(round(rng.uniform(-frac, frac) * h))
    bw, bh = bounds
    w, h = min(w, bw), min(h, bh)
    return [min(max(x, 0), bw - w), min(max(y, 0), bh - h), w, h]


class MockNoisyBackend(MockPerfectBackend):
    """The perfect oracle degraded by a :class:`NoiseProfile`.

    Decisions about a given symbol are drawn from a stream keyed by
    (seed, diagram, symbol), so two overlapping tiles judge it consistently;
    spurious claims use a stream keyed by (seed, diagram, tile).
    """

    @property
    def noise(self) -> NoiseProfile:
        return self.config.noise

    def missing_claims(self, bundle: PromptBundle, ctx: OracleContext) -> list[dict]:
        noise = self.noise
        win: BoundingBox = bundle.meta["window"]
        bounds = (win.w, win.h)
        symbols = ctx.diagram.symbol_map()
        out = []
        for sid in sorted(ctx.log.omitted):
            s = symbols[sid]
            if not win.contains(s.bbox):
                continue
            rng = diagram_rng(noise.seed, ctx.diagram.id, "claim", sid)
            if rng.random() >= noise.claim_detect_prob:
                continue
            local = s.bbox.translate(-win.x, -win.y).as_list()
            out.append({
                "bbox": _jitter(local, noise.jitter_frac, rng, bounds),
                "class": s.class_label,
                "tag": s.tag,
                "rationale": "symbol without an outline",
            })
        if noise.spurious_claim_rate > 0 and ctx.diagram.symbols:
            r, c = bundle.tile_ref[1]
            rng = diagram_rng(noise.seed, ctx.diagram.id, "spurious", f"{r}_{c}")
            ws = [s.bbox.w for s in ctx.diagram.symbols]
            hs = [s.bbox.h for s in ctx.diagram.symbols]
            for _ in range(int(rng.poisson(noise.spurious_claim_rate))):
                w = min(int(rng.integers(min(ws), max(ws) + 1)), win.w)
                h = min(int(rng.integers(min(hs), max(hs) + 1)), win.h)
                x = int(rng.integers(0, win.w - w + 1))
                y = int(rng.integers(0, win.h - h + 1))
                cls = ctx.classes[int(rng.integers(0, len(ctx.classes)))]
                out.append({"bbox": [x, y, w, h], "class": cls, "tag": None, "rationale": "possible symbol"})
        return out

    def box_verdict(self, bundle: PromptBundle, ctx: OracleContext) -> dict:
        verdict = super().box_verdict(bundle, ctx)
        p = self.noise.verdict_flip_prob
        if p <= 0:
            return verdict
        rng = diagram_rng(self.noise.seed, ctx.diagram.id, "qa", bundle.meta["detection_id"])
        flips = rng.random(3) < p
        if flips[0]:
            verdict["valid"] = not verdict["valid"]
        if flips[1]:
            verdict["tight"] = not verdict["tight"]
        if flips[2]:
            others = [c for c in ctx.classes if c != verdict["class"]]
            if others:
                verdict["class"] = others[int(rng.integers(0, len(others)))]
        return verdict

    def region_detections(self, bundle: PromptBundle, ctx: OracleContext) -> list[dict]:
        dets = super().region_detections(bundle, ctx)
        win: BoundingBox = bundle.meta["window"]
        for d in dets:
            rng = diagram_rng(self.noise.seed, ctx.diagram.id, "detect", *map(str, d["bbox"]), str(win.as_list()))
            d["bbox"] = _jitter(d["bbox"], self.noise.jitter_frac, rng, (win.w, win.h))
        return dets


class HttpBackend(Backend):
    """Multimodal chat-completion client (OpenAI-style typed message parts)."""

    def __init__(
        self,
        config: ModelConfig,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
        api_key: Optional[str] = None,
    ):
        self.config = config
        self._sleep = sleep
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._client = httpx.Client(transport=transport, timeout=config.timeout)
        self._slots = threading.BoundedSemaphore(config.max_concurrency)

    def request_body(self, bundle: PromptBundle) -> dict:
        parts: list[dict] = [{"type": "text", "text": bundle.text}]
        for image in bundle.images:
            b64 = base64.b64encode(encode_png(image)).decode("ascii")
            parts.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        return {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": parts}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }

    def _post(self, body: dict, tile_ref: Any) -> dict:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        last = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._client.post(self.config.endpoint_url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last = f"timeout: {exc}"
                continue
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise VlmError(f"HTTP {resp.status_code}: {resp.text[:200]}", tile_ref)
            try:
                return resp.json()
            except ValueError:
                raise VlmError("response body is not JSON", tile_ref) from None
        raise VlmError(f"gave up after {self.config.max_retries + 1} attempts ({last})", tile_ref)

    def complete(self, bundle: PromptBundle, context: Optional[OracleContext] = None) -> VlmResponse:
        data = self._post(self.request_body(bundle), bundle.tile_ref)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise VlmError("unexpected response shape", bundle.tile_ref) from None
        if isinstance(content, list):
            content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
        content = content or ""
        usage = data.get("usage") or {}
        tokens_in = usage.get("prompt_tokens", usage.get("input_tokens"))
        tokens_out = usage.get("completion_tokens", usage.get("output_tokens"))
        if tokens_in is None:
            tokens_in = estimate_prompt_tokens(bundle)
        if tokens_out is None:
            tokens_out = estimate_text_tokens(content)
        response = VlmResponse(content, None, (int(tokens_in), int(tokens_out)))
        try:
            response.parsed = parse_structured_response(content, bundle.response_schema_id, bundle.bounds)
        except StructuredResponseError as exc:
            response.error = f"{exc.kind}: {exc}"
        return response

    def close(self) -> None:
        self._client.close()


def make_backend(config: ModelConfig, **kwargs) -> Backend:
    if config.backend == "mock-perfect":
        return MockPerfectBackend(config)
    if config.backend == "mock-noisy":
        return MockNoisyBackend(config)
    return HttpBackend(config, **kwargs)


def complete(config: ModelConfig, bundle: PromptBundle, context: Optional[OracleContext] = None) -> VlmResponse:
    """One-shot convenience wrapper around :func:`make_backend`."""
    return make_backend(config).complete(bundle, context)
