"""Chat-completion backends: the minimal wire contract plus mocks.

Generator and meta-prompter are separate backend instances ("two-LLM"
wiring); each carries its own model and sampling config. The wire contract
is a single request {model, messages, temperature, top_p, max_tokens,
seed?} answered by {text}. The deterministic mocks let the whole loop run
at desk scale: the generation mock emits kernel sources carrying KF-MOCK
directives, the meta mock emits SEARCH/REPLACE diffs.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
import requests


class BackendUnavailable(RuntimeError):
    pass


@dataclass
class ChatRequest:
    messages: list[dict]  # [{"role": ..., "content": ...}]
    model: str = "mock"
    temperature: float = 0.3
    top_p: float = 1.0
    max_tokens: int = 8000
    seed: Optional[int] = None  # deterministic-sampling hint; mocks honor it

    def to_dict(self) -> dict:
        d = {
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            d["seed"] = self.seed
        return d


@dataclass
class ChatResponse:
    text: str


class ChatBackend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class HttpChatBackend:
    """POSTs the wire-contract JSON to a chat-completion endpoint."""

    def __init__(self, endpoint: str, api_key: str = "", timeout_s: float = 120.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout_s = timeout_s

    def complete(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = requests.post(
                self.endpoint,
                data=json.dumps(request.to_dict()),
                headers=headers,
                timeout=self.timeout_s,
            )
            resp.raise_for_status()
        except requests.RequestException as e:
            raise BackendUnavailable(f"chat backend at {self.endpoint}: {e}") from e
        body = resp.json()
        if "text" not in body:
            raise BackendUnavailable("malformed backend response: no 'text' field")
        return ChatResponse(text=body["text"])


def extract_last_code_block(text: str) -> Optional[str]:
    """Last fenced code block wins; None when the response has none."""
    blocks = re.findall(r"```[a-zA-Z+]*\n(.*?)```", text, re.DOTALL)
    if not blocks:
        return None
    return blocks[-1].rstrip("\n")


def _derive_seed(request: ChatRequest) -> int:
    if request.seed is not None:
        return request.seed
    payload = json.dumps(request.to_dict(), sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


_RUNTIME_RE = re.compile(r"Runtime:\s*([0-9.]+)\s*ms")

# Kernel-source bank for the generation mock. Sources carry both the
# KF-MOCK directive driving the closed-form cost model and construct
# tokens the static classifier picks up.
DEFAULT_BANK = [
    # naive elementwise map: coord (0,0,0)
    """// KF-MOCK: compile=ok correct=1.0 time_ms=1.1 base_ms=1.2 sync_ms=0.05 first_iter_mult=10
void kernel_naive(const float* in, float* out, int n) {
    for_each_workitem(i, n) { out[i] = in[i] * 2.0f; }
}
""",
    # vectorized loads: coord (1,0,0)
    """// KF-MOCK: compile=ok correct=1.0 time_ms=0.8 base_ms=1.2 sync_ms=0.05 first_iter_mult=10
void kernel_vec(const float* in, float* out, int n) {
    sycl::vec<float, 4> v;
    for_each_workitem(i, n / 4) { v.load(i, in); v *= 2.0f; v.store(i, out); }
}
""",
    # shared-local-memory tiling, barrier suppressed into d_mem: coord (2,0,0)
    """// KF-MOCK: compile=ok correct=1.0 time_ms=0.6 base_ms=1.2 sync_ms=0.05 first_iter_mult=10
void kernel_tiled(const float* in, float* out, int n) {
    auto tile = local_accessor<float>(TILE_SIZE);
    for_each_workgroup(g) {
        tile[lid] = in[gid];
        group_barrier(g);
        out[gid] = tile[lid] * 2.0f;
    }
}
""",
    # fused single pass: coord (0,1,0)
    """// KF-MOCK: compile=ok correct=1.0 time_ms=0.9 base_ms=1.2 sync_ms=0.05 first_iter_mult=10
void single_pass_scale_bias(const float* in, float* out, int n) {
    for_each_workitem(i, n) { out[i] = in[i] * 2.0f + 1.0f; }
}
""",
    # sub-group reduction: coord (0,0,2)
    """// KF-MOCK: compile=ok correct=1.0 time_ms=0.7 base_ms=1.2 sync_ms=0.05 first_iter_mult=10
void kernel_subgroup(const float* in, float* out, int n) {
    for_each_workitem(i, n) {
        float s = reduce_over_group(sub_group(), in[i], plus<>());
        out[i] = s;
    }
}
""",
    # flash-style reformulation with tiling: coord (2,2,0)
    """// KF-MOCK: compile=ok correct=1.0 time_ms=0.5 base_ms=1.2 sync_ms=0.05 first_iter_mult=10
void kernel_flash(const float* in, float* out, int n) {
    auto tile = local_accessor<float>(TILE_SIZE);
    for_each_workgroup(g) {
        float running_max = online_norm_update(tile, in, g);
        group_barrier(g);
        out[gid] = running_max;
    }
}
""",
    # fast but numerically wrong
    """// KF-MOCK: compile=ok correct=0.97 time_ms=0.3 base_ms=1.2 sync_ms=0.05 first_iter_mult=10
void kernel_sloppy(const float* in, float* out, int n) {
    for_each_workitem(i, n) { out[i] = fast_approx(in[i]); }
}
""",
    # does not compile
    """// KF-MOCK: compile=fail correct=0.0 time_ms=1.0 base_ms=1.2 sync_ms=0.05 first_iter_mult=10
void kernel_broken(const float* in, float* out, int n) {
    out[i] = in[i  // missing bracket
}
""",
]

_TEMPLATED_SOURCE = """\
// KF-MOCK: compile=ok correct=1.0 time_ms={t_default} base_ms=1.2 sync_ms=0.05 first_iter_mult=10 time_ms(16,16)={t0} time_ms(32,8)={t1} time_ms(8,32)={t2}
template <int BLOCK_X, int BLOCK_Y>
void kernel_templated(const float* in, float* out, int n);

torch::Tensor forward_templated_16_16();

torch::Tensor forward(torch::Tensor A, torch::Tensor B, int block_x, int block_y) {{
    if (block_x == 16 && block_y == 16) {{
        return forward_templated<16, 16>(A, B);
    }} else if (block_x == 32 && block_y == 8) {{
        return forward_templated<32, 8>(A, B);
    }} else if (block_x == 8 && block_y == 32) {{
        return forward_templated<8, 32>(A, B);
    }} else {{
        TORCH_CHECK(false, "Unsupported block size combination");
    }}
}}
"""


class MockChatBackend:
    """Deterministic generation mock: picks kernel sources from a bank.

    The choice is a pure function of the request seed (or, absent one, a
    hash of the request), so runs replay bit-identically. When the prompt
    asks for a templated kernel, it answers with a dispatch-style source
    whose per-config times scale the parent runtime by `template_factors`.
    """

    def __init__(
        self,
        bank: Optional[list[str]] = None,
        template_factors: Optional[tuple[float, float, float]] = None,
    ):
        self.bank = bank if bank is not None else list(DEFAULT_BANK)
        self.template_factors = template_factors
        self.call_log: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.call_log.append(request)
        rng = np.random.default_rng(_derive_seed(request))
        prompt = "\n".join(m["content"] for m in request.messages)
        if "templated kernel" in prompt:
            return ChatResponse(text=self._templated_response(prompt, rng))
        source = self.bank[int(rng.integers(len(self.bank)))]
        return ChatResponse(
            text=f"Analysis: picking a strategy from the bank.\n\n```cpp\n{source}```\n"
        )

    def _templated_response(self, prompt: str, rng: np.random.Generator) -> str:
        m = _RUNTIME_RE.search(prompt)
        parent_ms = float(m.group(1)) if m else 1.0
        factors = self.template_factors
        if factors is None:
            factors = tuple(rng.uniform(0.85, 1.15, size=3))
        times = [round(parent_ms * f, 6) for f in factors]
        source = _TEMPLATED_SOURCE.format(
            t_default=times[0], t0=times[0], t1=times[1], t2=times[2]
        )
        return f"Analysis: exposing block sizes as template parameters.\n\n```cpp\n{source}```\n"


class MockMetaBackend:
    """Deterministic meta-prompter mock emitting one SEARCH/REPLACE diff."""

    def __init__(self, diffs_text: Optional[str] = None):
        self.diffs_text = diffs_text
        self.call_log: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.call_log.append(request)
        if self.diffs_text is not None:
            return ChatResponse(text=self.diffs_text)
        # Append one learned pitfall; the search line ships in the seed region.
        text = (
            "The pitfalls guidance missed launch-bounds mistakes.\n"
            "<<<<SEARCH region=pitfalls\n"
            "- Guard boundary work-items; out-of-range accesses often pass small tests.\n"
            "====\n"
            "- Guard boundary work-items; out-of-range accesses often pass small tests.\n"
            "- Check device work-group size limits before launching.\n"
            ">>>>REPLACE\n"
        )
        return ChatResponse(text=text)
