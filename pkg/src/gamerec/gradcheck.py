"""Central finite-difference verification of the analytic gradients.

The check instance is intentionally small (5 users, 8 games, d=4) but
exercises every pathway: all five relations populated, social attention over
several friends, and one friendless user hitting the zero-aggregate fallback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .context_graph import RELATION_ORDER, ContextGraph, build_context_graph
from .data import Dataset
from .model import ForwardConfig, FusionWeights, ModelState, SocialGraph, UserItemIndex
from .training import TripletBatch, bpr_loss, gradients

DEFAULT_STEP = 1e-4
REL_TOLERANCE = 1e-4
ABS_TOLERANCE = 1e-8
SMALL_GRADIENT = 1e-6


def build_check_dataset() -> Dataset:
    """Hand-built playtime table: 5 users, 8 games, user 5 friendless."""
    engagements = [
        (1, 101, 120.0),
        (1, 102, 30.0),
        (1, 103, 300.0),
        (2, 101, 60.0),
        (2, 104, 45.0),
        (2, 105, 200.0),
        (3, 102, 90.0),
        (3, 103, 15.0),
        (3, 106, 500.0),
        (4, 104, 75.0),
        (4, 107, 20.0),
        (5, 101, 10.0),
        (5, 105, 150.0),
        (5, 108, 400.0),
    ]
    social = [(1, 2), (2, 3), (1, 4)]
    catalog = [
        (101, {"action"}, "dev_a", "pub_a"),
        (102, {"action", "rpg"}, "dev_a", "pub_b"),
        (103, {"rpg"}, "dev_b", "pub_a"),
        (104, {"strategy"}, "dev_b", "pub_b"),
        (105, {"action"}, "dev_c", "pub_a"),
        (106, {"rpg", "strategy"}, "dev_c", "pub_b"),
        (107, {"strategy"}, "dev_a", "pub_a"),
        (108, {"action"}, "dev_b", "pub_b"),
    ]
    return Dataset.from_rows(engagements, social, catalog)


@dataclass
class CheckInstance:
    state: ModelState
    index: UserItemIndex
    graph: ContextGraph
    social: SocialGraph
    config: ForwardConfig
    batch: TripletBatch
    reg_lambda: float


def build_check_instance(dim: int = 4, seed: int = 7, reg_lambda: float = 1e-4) -> CheckInstance:
    dataset = build_check_dataset()
    graph, relations, _ = build_context_graph(dataset, tau_p=0.1, tau_t=0.3)
    for kind in RELATION_ORDER:
        if not relations[kind]:
            raise RuntimeError(f"check instance relation {kind.value} is empty")
    index = UserItemIndex.build(dataset)
    social = SocialGraph.build(dataset, index.user_ids)
    state = ModelState.init(index.n_users, index.n_games, dim, seed)
    config = ForwardConfig(fusion=FusionWeights(context=0.5, social=0.1))
    # one triplet per user; negatives verified non-engaged by the sampler tests
    triplets = [(1, 101, 106), (2, 104, 108), (3, 106, 101), (4, 107, 103), (5, 108, 102)]
    batch = TripletBatch(
        users=np.array([index.user_index(u) for u, _, _ in triplets], dtype=np.int64),
        pos=np.array([int(np.searchsorted(index.game_ids, np.uint64(g))) for _, g, _ in triplets], dtype=np.int64),
        neg=np.array([int(np.searchsorted(index.game_ids, np.uint64(g))) for _, _, g in triplets], dtype=np.int64),
    )
    return CheckInstance(
        state=state,
        index=index,
        graph=graph,
        social=social,
        config=config,
        batch=batch,
        reg_lambda=reg_lambda,
    )


@dataclass(frozen=True)
class TensorCheck:
    name: str
    size: int
    max_rel_error: float
    max_abs_error: float
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    tensors: list[TensorCheck]

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tensors)

    @property
    def max_rel_error(self) -> float:
        return max(t.max_rel_error for t in self.tensors)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tensors": [
                {
                    "name": t.name,
                    "size": t.size,
                    "max_rel_error": t.max_rel_error,
                    "max_abs_error": t.max_abs_error,
                    "passed": t.passed,
                }
                for t in self.tensors
            ],
        }


def element_ok(analytic: float, numeric: float) -> bool:
    scale = max(abs(analytic), abs(numeric))
    if scale < SMALL_GRADIENT:
        return abs(analytic - numeric) < ABS_TOLERANCE
    return abs(analytic - numeric) / scale < REL_TOLERANCE


def run_gradient_check(inst: CheckInstance | None = None, step: float = DEFAULT_STEP) -> GradCheckReport:
    """Compare analytic gradients against central differences of the loss."""
    inst = inst or build_check_instance()
    state = inst.state

    def loss() -> float:
        return bpr_loss(
            state, inst.index, inst.graph, inst.social, inst.config, inst.batch, inst.reg_lambda
        )

    analytic = gradients(
        state, inst.index, inst.graph, inst.social, inst.config, inst.batch, inst.reg_lambda
    )

    tensors: list[TensorCheck] = []
    for name, param in state.param_items():
        grad = analytic.by_name(name)
        flat_param = param.reshape(-1)
        flat_grad = grad.reshape(-1)
        max_rel = 0.0
        max_abs = 0.0
        ok = True
        for pos in range(flat_param.size):
            original = flat_param[pos]
            flat_param[pos] = original + step
            up = loss()
            flat_param[pos] = original - step
            down = loss()
            flat_param[pos] = original
            numeric = (up - down) / (2.0 * step)
            a = float(flat_grad[pos])
            err = abs(a - numeric)
            scale = max(abs(a), abs(numeric))
            max_abs = max(max_abs, err)
            if scale >= SMALL_GRADIENT:
                max_rel = max(max_rel, err / scale)
            if not element_ok(a, numeric):
                ok = False
        tensors.append(
            TensorCheck(name=name, size=flat_param.size, max_rel_error=max_rel, max_abs_error=max_abs, passed=ok)
        )
    return GradCheckReport(tensors=tensors)
