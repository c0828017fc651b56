from abc import ABC, abstractmethod

from nbfa.config import settings
from nbfa.core.corpus import SparseCountMatrix
from nbfa.core.distributions import RngStream
from nbfa.core.model import ModelKind, ModelState, SamplerKind
from nbfa.errors import ConfigError


class Sampler(ABC):
    kind: SamplerKind
    models: frozenset[ModelKind] = frozenset()

    def __init__(self, model: ModelKind, K_star: int = 20, threads: int | None = None) -> None:
        if model not in self.models:
            raise ConfigError(f"The {self.kind} sampler does not support the {model} model")
        self.model = model
        self.K_star = K_star
        self.threads = max(1, threads if threads is not None else settings.threads)

    def check_state(self, state: ModelState) -> None:
        if state.kind != self.model or state.sampler != self.kind:
            raise ConfigError(
                f"{self.kind}/{self.model} sampler cannot advance a "
                f"{state.sampler}/{state.kind} state"
            )

    @abstractmethod
    def step(self, state: ModelState, corpus: SparseCountMatrix, rng: RngStream) -> int:
        """
        Run one full sweep in place.
        Returns the number of assignment operations performed.
        """
        pass

    @abstractmethod
    def log_joint(self, state: ModelState, corpus: SparseCountMatrix) -> float:
        """Diagnostic log-likelihood surrogate for trace monitoring."""
        pass
