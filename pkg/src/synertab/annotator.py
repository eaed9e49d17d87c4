"""Everything at the annotator boundary.

Prompt construction, confidence parsing, fan-out annotation, fine-tune
corpus assembly, a chat-completions network client, and a simulated
oracle used for all offline verification.

A provider is anything with ``identity``, ``can_score`` / ``can_finetune``
flags, ``score(prompt, row_id) -> response text``, and (when tunable)
``finetune(corpus) -> new provider``. ``row_id`` exists so simulated
providers can keep per-row randomness deterministic; network providers
ignore it.
"""

from __future__ import annotations

import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, FeatureSchema
from .errors import ConfigError, ParseError, ProviderError, ProviderUnreachable

LIKELIHOOD_SENTENCE = "please give a likelihood between 0 to 1"

FINETUNE_EPOCHS_MAX = 3

# Probability clamp applied before logit conversions.
_LOGIT_EPS = 1e-7


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(p / (1.0 - p))


def build_prompt(raw_row, schema: FeatureSchema) -> str:
    """Render one row as the zero-shot scoring prompt.

    Layout: task preamble, then "[Name] value (unit)" items in schema
    order joined by "; ". Values keep their original cell text. The
    likelihood-request sentence is appended when the task description
    does not already contain it.
    """
    preamble = schema.task_description.rstrip()
    if LIKELIHOOD_SENTENCE not in preamble:
        preamble = "%s, %s of being %s" % (
            preamble.rstrip(".,"),
            LIKELIHOOD_SENTENCE,
            schema.positive_class_name,
        )
    items = []
    for col, value in zip(schema.columns, raw_row):
        if col.unit:
            items.append("[%s] %s (%s)" % (col.name, value, col.unit))
        else:
            items.append("[%s] %s" % (col.name, value))
    return "%s: %s" % (preamble, "; ".join(items))


_NUMBER_RE = re.compile(
    r"(?<![\d.])(\d+(?:\.\d+)?|\.\d+)(?:[eE]([-+]?\d+))?\s*(%?)"
)


def parse_confidence(response: str) -> float:
    """Extract the first decimal literal in [0, 1] from a response.

    Percentages ("73%") are divided by 100. Scientific notation is
    accepted so near-zero confidences round-trip. Raises ParseError when
    nothing qualifies.
    """
    for m in _NUMBER_RE.finditer(response):
        mantissa, exponent, percent = m.groups()
        value = float(mantissa + ("e" + exponent if exponent else ""))
        if percent:
            value = value / 100.0
        if 0.0 <= value <= 1.0:
            return value
    raise ParseError("no likelihood value in response: %r" % response[:120])


@dataclass(frozen=True)
class SoftLabelSet:
    """Per-row class-probability vectors over (negative, positive).

    ``hard_labels[i]`` is the argmax of row i, ties resolved to the lower
    class index. ``failed_ids`` lists rows that fell back to (0.5, 0.5)
    after exhausting retries.
    """

    confidences: np.ndarray  # (N, 2)
    hard_labels: np.ndarray  # (N,)
    source: str
    loop_index: int = 1
    failed_ids: tuple[int, ...] = ()

    def __post_init__(self):
        conf = np.asarray(self.confidences, dtype=np.float64)
        if conf.ndim != 2 or conf.shape[1] != 2:
            raise ValueError("confidences must be (N, 2)")
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("confidences outside [0, 1]")
        if np.max(np.abs(conf.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("confidence rows must sum to 1 within 1e-9")
        conf.setflags(write=False)
        object.__setattr__(self, "confidences", conf)
        hard = np.asarray(self.hard_labels, dtype=np.int64)
        hard.setflags(write=False)
        object.__setattr__(self, "hard_labels", hard)

    def __len__(self):
        return self.confidences.shape[0]

    @property
    def positive(self) -> np.ndarray:
        return self.confidences[:, 1]

    @classmethod
    def from_positive(cls, p, source, loop_index=1, failed_ids=()) -> "SoftLabelSet":
        p = np.asarray(p, dtype=np.float64)
        conf = np.column_stack([1.0 - p, p])
        # np.argmax picks the first maximum, which is the tie rule we want
        hard = np.argmax(conf, axis=1)
        return cls(conf, hard, source, loop_index, tuple(failed_ids))

    def hardened(self) -> "SoftLabelSet":
        """One-hot version of the same labels (soft-label ablation)."""
        conf = np.zeros_like(self.confidences)
        conf[np.arange(len(self)), self.hard_labels] = 1.0
        return SoftLabelSet(conf, self.hard_labels, self.source + "+hardened",
                            self.loop_index, self.failed_ids)

    def to_dict(self) -> dict:
        return {
            "positive": self.positive.tolist(),
            "source": self.source,
            "loop_index": self.loop_index,
            "failed_ids": list(self.failed_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SoftLabelSet":
        return cls.from_positive(
            d["positive"], d["source"], d["loop_index"], tuple(d["failed_ids"])
        )


@dataclass(frozen=True)
class FinetuneCorpus:
    """Prompt/completion records for reverse-tuning the annotator."""

    records: tuple[tuple[str, str], ...]
    epochs_max: int = FINETUNE_EPOCHS_MAX

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"prompt": p, "completion": c}) for p, c in self.records
        ]
        return "\n".join(lines) + ("\n" if lines else "")


def render_likelihood(p: float) -> str:
    return "%.4f" % p


def build_finetune_corpus(ds: Dataset, sharpened) -> FinetuneCorpus:
    """One record per row: scoring prompt plus the sharpened positive
    likelihood rendered as completion text."""
    conf = sharpened.confidences if isinstance(sharpened, SoftLabelSet) else np.asarray(sharpened)
    if conf.shape[0] != ds.n_rows:
        raise ValueError(
            "sharpened labels (%d) do not match dataset rows (%d)" % (conf.shape[0], ds.n_rows)
        )
    records = tuple(
        (build_prompt(ds.raw[i], ds.schema), render_likelihood(conf[i, 1]))
        for i in range(ds.n_rows)
    )
    return FinetuneCorpus(records=records)


def annotate_dataset(
    provider,
    ds: Dataset,
    retry_limit: int = 2,
    max_in_flight: int = 4,
    loop_index: int = 1,
) -> SoftLabelSet:
    """Score every row, assembling results in row order.

    Each row gets ``retry_limit`` attempts; rows still unparsed fall back
    to the maximally uncertain (0.5, 0.5) and are listed in
    ``failed_ids``. A ProviderUnreachable aborts the whole pass, carrying
    the rows completed so far.
    """
    if not provider.can_score:
        raise ProviderError("provider %r cannot score" % provider.identity)
    if retry_limit < 1:
        raise ValueError("retry_limit must be >= 1")
    prompts = [build_prompt(raw, ds.schema) for raw in ds.raw]

    def score_one(pos: int):
        row_id = int(ds.ids[pos])
        last = None
        for _ in range(retry_limit):
            text = provider.score(prompts[pos], row_id)
            try:
                return parse_confidence(text)
            except ParseError as exc:
                last = exc
        raise last

    results = np.full(ds.n_rows, np.nan)
    failed = []
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        futures = {pool.submit(score_one, i): i for i in range(ds.n_rows)}
        for fut, i in futures.items():
            try:
                results[i] = fut.result()
            except ParseError:
                results[i] = 0.5
                failed.append(int(ds.ids[i]))
            except ProviderUnreachable as exc:
                pool.shutdown(wait=False, cancel_futures=True)
                done = {
                    int(ds.ids[j]): results[j]
                    for j in range(ds.n_rows)
                    if not np.isnan(results[j])
                }
                raise ProviderUnreachable(
                    "annotation aborted after %d/%d rows: %s" % (len(done), ds.n_rows, exc),
                    partial=done,
                ) from exc
    return SoftLabelSet.from_positive(
        results, source=provider.identity, loop_index=loop_index,
        failed_ids=sorted(failed),
    )


def finetune(provider, corpus: FinetuneCorpus):
    """Reverse-tune the provider on the corpus; returns the new handle."""
    if not provider.can_finetune:
        raise ProviderError("provider %r cannot fine-tune" % provider.identity)
    return provider.finetune(corpus)


# ---------------------------------------------------------------------------
# Simulated oracle
# ---------------------------------------------------------------------------

_ITEM_RE = re.compile(r"\[([^\]]+)\]\s*([^;]*)")
_UNIT_SUFFIX_RE = re.compile(r"\s*\([^)]*\)\s*$")


def _parse_prompt_features(prompt: str, category_maps=None) -> np.ndarray:
    """Recover the feature vector from a scoring prompt."""
    out = []
    for name, chunk in _ITEM_RE.findall(prompt):
        value = _UNIT_SUFFIX_RE.sub("", chunk).strip()
        try:
            out.append(float(value))
        except ValueError:
            if category_maps and name in category_maps and value in category_maps[name]:
                out.append(float(category_maps[name][value]))
            else:
                raise ProviderError(
                    "oracle cannot interpret feature %r value %r" % (name, value)
                )
    return np.array(out, dtype=np.float64)


@dataclass(frozen=True)
class SimulatedOracleConfig:
    """Logistic ground truth plus controllable annotation pathologies.

    flip_rate inverts the emitted confidence on a per-row subset;
    confidence_noise_sd jitters the pre-sigmoid score; both are
    deterministic per row id. finetune_blend_rate is the convex weight
    each fine-tune moves the emitted score toward the corpus targets.
    """

    weights: tuple[float, ...]
    bias: float = 0.0
    flip_rate: float = 0.0
    confidence_noise_sd: float = 0.0
    finetune_blend_rate: float = 0.5
    finetune_logit_cap: float | None = None
    seed: int = 0
    category_maps: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.flip_rate <= 1.0:
            raise ConfigError("flip_rate must lie in [0, 1]")
        if self.confidence_noise_sd < 0.0:
            raise ConfigError("confidence_noise_sd must be nonnegative")
        if not 0.0 <= self.finetune_blend_rate <= 1.0:
            raise ConfigError("finetune_blend_rate must lie in [0, 1]")
        if self.finetune_logit_cap is not None and self.finetune_logit_cap <= 0:
            raise ConfigError("finetune_logit_cap must be positive when set")

    def to_dict(self) -> dict:
        return {
            "weights": list(self.weights),
            "bias": self.bias,
            "flip_rate": self.flip_rate,
            "confidence_noise_sd": self.confidence_noise_sd,
            "finetune_blend_rate": self.finetune_blend_rate,
            "finetune_logit_cap": self.finetune_logit_cap,
            "seed": self.seed,
            "category_maps": self.category_maps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulatedOracleConfig":
        return cls(
            weights=tuple(d["weights"]),
            bias=d.get("bias", 0.0),
            flip_rate=d.get("flip_rate", 0.0),
            confidence_noise_sd=d.get("confidence_noise_sd", 0.0),
            finetune_blend_rate=d.get("finetune_blend_rate", 0.5),
            finetune_logit_cap=d.get("finetune_logit_cap"),
            seed=d.get("seed", 0),
            category_maps=d.get("category_maps", {}),
        )


def load_oracle_config(path) -> SimulatedOracleConfig:
    if not os.path.exists(path):
        raise ConfigError("oracle config not found: %s" % path)
    with open(path, "r", encoding="utf-8") as fh:
        return SimulatedOracleConfig.from_dict(json.load(fh))


@dataclass(frozen=True)
class _BlendLayer:
    """One fine-tune: corpus features, target score logits, blend weight."""

    corpus_x: np.ndarray  # (M, F)
    corpus_logits: np.ndarray  # (M,)
    beta: float
    scale: np.ndarray  # (F,) per-feature distance normalization

    def nearest(self, x: np.ndarray) -> int:
        d = ((self.corpus_x - x) / self.scale) ** 2
        return int(np.argmin(d.sum(axis=1)))


class SimulatedOracle:
    """Offline stand-in for a network annotator.

    Scores are sigmoid of a noisy logistic score recovered from the
    prompt text; fine-tuning stacks convex blends of the emitted score
    toward corpus targets, matched by nearest corpus row so tuned
    behavior generalizes to unseen rows.
    """

    can_score = True
    can_finetune = True

    def __init__(self, config: SimulatedOracleConfig, layers=()):
        self.config = config
        self._w = np.asarray(config.weights, dtype=np.float64)
        self._layers = tuple(layers)

    @property
    def identity(self) -> str:
        return "sim-oracle-s%d-t%d" % (self.config.seed, len(self._layers))

    def _row_rng(self, row_id: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, int(row_id)])

    def emitted_logit(self, x: np.ndarray, row_id: int) -> float:
        z = float(self._w @ x) + self.config.bias
        rng = self._row_rng(row_id)
        flip = rng.random() < self.config.flip_rate
        if self.config.confidence_noise_sd > 0.0:
            z += rng.normal(0.0, self.config.confidence_noise_sd)
        if flip:
            z = -z
        for layer in self._layers:
            z = (1.0 - layer.beta) * z + layer.beta * layer.corpus_logits[layer.nearest(x)]
        return z

    def score(self, prompt: str, row_id: int) -> str:
        x = _parse_prompt_features(prompt, self.config.category_maps)
        if x.shape[0] != self._w.shape[0]:
            raise ProviderError(
                "prompt carries %d features, oracle expects %d" % (x.shape[0], self._w.shape[0])
            )
        p = float(sigmoid(self.emitted_logit(x, row_id)))
        return repr(p)

    def finetune(self, corpus: FinetuneCorpus) -> "SimulatedOracle":
        """Stack one convex blend toward the corpus targets.

        When ``finetune_logit_cap`` is set, target logits are clipped at
        that magnitude: the provider-side early-stopping analog, the
        oracle only "slightly" fits extreme completions instead of
        reproducing them, keeping a non-zero minimum training loss.
        """
        xs, ls = [], []
        for prompt, completion in corpus.records:
            xs.append(_parse_prompt_features(prompt, self.config.category_maps))
            target = float(logit(parse_confidence(completion)))
            if self.config.finetune_logit_cap is not None:
                cap = self.config.finetune_logit_cap
                target = float(np.clip(target, -cap, cap))
            ls.append(target)
        if xs:
            corpus_x = np.vstack(xs)
            scale = corpus_x.std(axis=0)
            scale[scale < 1e-12] = 1.0
            layer = _BlendLayer(
                corpus_x=corpus_x,
                corpus_logits=np.array(ls),
                beta=self.config.finetune_blend_rate,
                scale=scale,
            )
            layers = self._layers + (layer,)
        else:
            layers = self._layers
        return SimulatedOracle(self.config, layers)

    def state_dict(self) -> dict:
        return {
            "kind": "simulated",
            "config": self.config.to_dict(),
            "layers": [
                {
                    "corpus_x": layer.corpus_x.tolist(),
                    "corpus_logits": layer.corpus_logits.tolist(),
                    "beta": layer.beta,
                    "scale": layer.scale.tolist(),
                }
                for layer in self._layers
            ],
        }

    def with_state(self, state: dict) -> "SimulatedOracle":
        if state.get("kind") != "simulated":
            raise ProviderError("state is not a simulated-oracle state")
        config = SimulatedOracleConfig.from_dict(state["config"])
        layers = tuple(
            _BlendLayer(
                corpus_x=np.array(d["corpus_x"], dtype=np.float64),
                corpus_logits=np.array(d["corpus_logits"], dtype=np.float64),
                beta=d["beta"],
                scale=np.array(d["scale"], dtype=np.float64),
            )
            for d in state["layers"]
        )
        return SimulatedOracle(config, layers)


# ---------------------------------------------------------------------------
# Network provider (chat-completions wire format)
# ---------------------------------------------------------------------------


class NetworkProvider:
    """JSON-over-HTTP chat-completions client with fine-tune job management.

    Scoring posts {model, messages=[single user message], temperature} to
    ``{endpoint}/chat/completions`` and reads the first message text.
    Fine-tuning uploads line-delimited {prompt, completion} records to
    ``{endpoint}/files``, creates a job capped at 3 epochs, and polls it
    to a terminal state. The API key is read from the environment
    variable named by ``key_env``; it never lives in configuration files.
    """

    can_score = True
    can_finetune = True

    TERMINAL_STATES = ("succeeded", "failed", "cancelled")

    def __init__(
        self,
        endpoint: str,
        model: str,
        key_env: str = "SYNERTAB_API_KEY",
        temperature: float = 0.0,
        transport_retries: int = 3,
        backoff_s: float = 0.5,
        poll_interval_s: float = 2.0,
        timeout_s: float = 60.0,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.key_env = key_env
        self.temperature = temperature
        self.transport_retries = transport_retries
        self.backoff_s = backoff_s
        self.poll_interval_s = poll_interval_s
        self.timeout_s = timeout_s

    @property
    def identity(self) -> str:
        return "network:%s" % self.model

    def _headers(self) -> dict:
        key = os.environ.get(self.key_env)
        if not key:
            raise ConfigError("API key environment variable %s is not set" % self.key_env)
        return {"Authorization": "Bearer %s" % key, "Content-Type": "application/json"}

    def _post(self, path: str, payload, raw: bytes | None = None) -> dict:
        import requests

        url = self.endpoint + path
        last = None
        for attempt in range(self.transport_retries):
            try:
                if raw is not None:
                    headers = dict(self._headers())
                    headers["Content-Type"] = "application/jsonl"
                    resp = requests.post(url, data=raw, headers=headers, timeout=self.timeout_s)
                else:
                    resp = requests.post(
                        url, json=payload, headers=self._headers(), timeout=self.timeout_s
                    )
                if resp.status_code >= 500:
                    last = ProviderUnreachable("server error %d from %s" % (resp.status_code, url))
                elif resp.status_code >= 400:
                    raise ProviderError("request to %s rejected: %d %s" % (url, resp.status_code, resp.text[:200]))
                else:
                    return resp.json()
            except requests.RequestException as exc:
                last = ProviderUnreachable("cannot reach %s: %s" % (url, exc))
            time.sleep(self.backoff_s * (2 ** attempt))
        raise last

    def _get(self, path: str) -> dict:
        import requests

        url = self.endpoint + path
        try:
            resp = requests.get(url, headers=self._headers(), timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise ProviderUnreachable("cannot reach %s: %s" % (url, exc))
        if resp.status_code >= 400:
            raise ProviderError("request to %s rejected: %d" % (url, resp.status_code))
        return resp.json()

    def score(self, prompt: str, row_id: int) -> str:
        del row_id  # only simulated providers need per-row determinism
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        data = self._post("/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError("malformed completion response: %s" % exc)

    def finetune(self, corpus: FinetuneCorpus) -> "NetworkProvider":
        upload = self._post("/files", None, raw=corpus.to_jsonl().encode("utf-8"))
        file_id = upload.get("id")
        if not file_id:
            raise ProviderError("file upload returned no id")
        job = self._post(
            "/fine_tuning/jobs",
            {
                "training_file": file_id,
                "model": self.model,
                "hyperparameters": {"n_epochs": corpus.epochs_max},
            },
        )
        job_id = job.get("id")
        if not job_id:
            raise ProviderError("fine-tune job creation returned no id")
        while job.get("status") not in self.TERMINAL_STATES:
            time.sleep(self.poll_interval_s)
            job = self._get("/fine_tuning/jobs/%s" % job_id)
        if job.get("status") != "succeeded":
            raise ProviderError(
                "fine-tune job %s ended as %r: %s" % (job_id, job.get("status"), job.get("error"))
            )
        tuned = job.get("fine_tuned_model")
        if not tuned:
            raise ProviderError("fine-tune job %s reported no tuned model" % job_id)
        clone = NetworkProvider(
            self.endpoint, tuned, self.key_env, self.temperature,
            self.transport_retries, self.backoff_s, self.poll_interval_s, self.timeout_s,
        )
        return clone

    def state_dict(self) -> dict:
        return {"kind": "network", "model": self.model}

    def with_state(self, state: dict) -> "NetworkProvider":
        if state.get("kind") != "network":
            raise ProviderError("state is not a network-provider state")
        return NetworkProvider(
            self.endpoint, state["model"], self.key_env, self.temperature,
            self.transport_retries, self.backoff_s, self.poll_interval_s, self.timeout_s,
        )
