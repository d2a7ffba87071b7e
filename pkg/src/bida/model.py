"""Parameter container tying the tokenizers, branches and head together."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .config import ModelDims
from .diffcore import Tensor
from .encoder import branch_forward, class_token, classify, coupled_branch, init_branch, init_coupled, init_head
from .errors import ContractError
from .tokenizer import SOURCE, TARGET, init_tokenizer, tokenize

PREFIX = {SOURCE: "src", TARGET: "tgt"}


class BidaModel:
    """All trainable tensors, keyed by dotted names (``src.layer0.wq`` ...)."""

    def __init__(self, dims: ModelDims, params: dict[str, Tensor]):
        self.dims = dims
        self.params = params

    @classmethod
    def init(cls, dims: ModelDims, seed: int) -> "BidaModel":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for prefix in ("src", "tgt"):
            params.update(init_tokenizer(dims, rng, prefix))
            params.update(init_branch(dims, rng, prefix))
        params.update(init_coupled(dims, rng))
        params.update(init_head(dims, rng))
        return cls(dims, params)

    def copy(self) -> "BidaModel":
        return BidaModel(self.dims, {k: Tensor(v.data.copy(), True) for k, v in self.params.items()})

    def names(self, prefix: str | None = None) -> list[str]:
        return [k for k in self.params if prefix is None or k.startswith(prefix + ".")]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        if missing:
            raise ContractError(f"state is missing parameters {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ContractError(f"parameter {k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def copy_branch(self, src: str = "src", dst: str = "tgt"):
        """Overwrite one domain's tokenizer and branch with the other's."""
        for k in self.names(src):
            self.params[dst + k[len(src):]].data = self.params[k].data.copy()

    def seed_coupled(self, src: str = "src", prefix: str = "cpl"):
        """Initialise the coupled block from the last encoder layer of a branch.

        Soft labels are constants, so the coupled block is trained only by the
        coupled MMD term; starting it from a trained layer makes its class
        tokens readable by the shared head from the first adaptation step.
        """
        layer = f"{src}.layer{self.dims.depth - 1}"
        for k in self.names(prefix):
            self.params[k].data = self.params[layer + k[len(prefix):]].data.copy()

    # forward pieces
    def encode(self, x, domain: str) -> Tensor:
        prefix = PREFIX[domain]
        tokens = tokenize(x, self.params, prefix, self.dims)
        return branch_forward(tokens, self.params, prefix, self.dims.depth, self.dims.heads)

    def couple(self, t_s: Tensor, t_t: Tensor, mode: str = "cmca"):
        return coupled_branch(t_s, t_t, self.params, self.dims.heads, mode)

    def logits(self, seq: Tensor) -> Tensor:
        return classify(class_token(seq), self.params)

    def predict_proba(self, x, domain: str, batch: int = 128) -> np.ndarray:
        out = []
        with dc.no_grad():
            for i in range(0, len(x), batch):
                lg = self.logits(self.encode(x[i : i + batch], domain)).data
                e = np.exp(lg - lg.max(axis=1, keepdims=True))
                out.append(e / e.sum(axis=1, keepdims=True))
        if not out:
            return np.zeros((0, self.dims.classes))
        return np.concatenate(out)

    def features(self, x, domain: str, batch: int = 128) -> np.ndarray:
        with dc.no_grad():
            return np.concatenate(
                [class_token(self.encode(x[i : i + batch], domain)).data for i in range(0, len(x), batch)]
            )
