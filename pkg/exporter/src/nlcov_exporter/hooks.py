"""Forward-hook activation capture with channel reduction.

A hook plan lists (module path, reduction) pairs; 4-d feature maps must
use the spatial-mean reduction (one neuron per channel, its output the
spatial mean of the map), matching the engine's neuron convention for
convolutional layers.  Reduction happens here so the engine only ever
sees flat vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np
import torch

REDUCTIONS = ("none", "spatial-mean")


class ExporterError(RuntimeError):
    pass


@dataclass(frozen=True)
class HookSpec:
    module_path: str
    reduction: str = "none"

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise ExporterError(
                f"unknown reduction {self.reduction!r}; expected one of {REDUCTIONS}"
            )


@dataclass
class HookPlan:
    hooks: list[HookSpec]

    @classmethod
    def parse(cls, spec: str) -> "HookPlan":
        """Parse "path:reduction,path2:reduction2" (reduction optional)."""
        hooks = []
        for part in spec.split(","):
            part = part.strip()
            if not part:
                continue
            if ":" in part:
                path, reduction = part.rsplit(":", 1)
                hooks.append(HookSpec(path, reduction))
            else:
                hooks.append(HookSpec(part))
        if not hooks:
            raise ExporterError("hook plan is empty")
        return cls(hooks)


def _reduce(spec: HookSpec, tensor: torch.Tensor) -> torch.Tensor:
    if tensor.dim() == 4:
        if spec.reduction != "spatial-mean":
            raise ExporterError(
                f"module {spec.module_path!r} emits a 4-d feature map; "
                "its hook needs the spatial-mean reduction"
            )
        return tensor.mean(dim=(2, 3))
    if tensor.dim() == 2:
        if spec.reduction == "spatial-mean":
            raise ExporterError(
                f"module {spec.module_path!r} emits a 2-d output; "
                "spatial-mean only applies to 4-d feature maps"
            )
        return tensor
    raise ExporterError(
        f"module {spec.module_path!r} emitted a {tensor.dim()}-d tensor; "
        "only 2-d and 4-d module outputs are supported"
    )


class ActivationCapture:
    """Registers forward hooks per the plan; `run` returns one flat
    float32 vector per hooked module, in plan order."""

    def __init__(self, model: torch.nn.Module, plan: HookPlan):
        self.model = model
        self.plan = plan
        self._records: dict[int, torch.Tensor] = {}
        self._handles = []
        self.widths: list[int] | None = None
        for idx, spec in enumerate(plan.hooks):
            try:
                module = model.get_submodule(spec.module_path)
            except AttributeError as exc:
                raise ExporterError(
                    f"hook path {spec.module_path!r} does not resolve: {exc}"
                ) from exc
            self._handles.append(
                module.register_forward_hook(self._make_hook(idx, spec))
            )

    def _make_hook(self, idx: int, spec: HookSpec):
        def hook(_module, _inputs, output):
            self._records[idx] = _reduce(spec, output.detach())

        return hook

    def layer_names(self) -> list[str]:
        return [spec.module_path for spec in self.plan.hooks]

    def run(self, item: torch.Tensor) -> tuple[int, list[np.ndarray]]:
        """Forward one input (no batch dim); returns (prediction,
        activations)."""
        self._records.clear()
        with torch.no_grad():
            output = self.model(item.unsqueeze(0))
        missing = [
            self.plan.hooks[i].module_path
            for i in range(len(self.plan.hooks))
            if i not in self._records
        ]
        if missing:
            raise ExporterError(f"hooked modules never fired: {missing}")
        vectors = []
        for i in range(len(self.plan.hooks)):
            vec = self._records[i][0].to(torch.float32).cpu().numpy().ravel()
            vectors.append(vec)
        widths = [v.shape[0] for v in vectors]
        if self.widths is None:
            self.widths = widths
        elif widths != self.widths:
            raise ExporterError(
                f"activation shapes changed between inputs: {self.widths} "
                f"then {widths}"
            )
        prediction = int(torch.argmax(output[0]).item())
        return prediction, vectors

    def close(self) -> None:
        for handle in self._handles:
            handle.remove()
        self._handles.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
