"""
Checkpoint container.

Layout: magic line, header length as little-endian uint64, UTF-8 JSON header
(`CheckpointHeader`), then the named arrays back to back as little-endian
float64 or float32 (the header's dtype). Files are written to a temporary
sibling and renamed into place.
"""
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
import torch

from src.config.logging_config import get_logger
from src.models.checkpoint import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ArrayEntry, CheckpointHeader
from src.models.config import LossWeights, TrainConfig
from src.neural.diffcore import named_trainable, optimizer_state_by_name
from src.neural.model import HeadModel
from src.utils.exceptions import DataError

logger = get_logger(__name__)

OPTIM_PREFIX = "optim."
_NUMPY_DTYPES = {"float64": "<f8", "float32": "<f4"}


@dataclass
class LoadedCheckpoint:
    model: HeadModel
    header: CheckpointHeader
    optimizer_state: Dict[str, dict] = field(default_factory=dict)

    @property
    def stage(self) -> int:
        return self.header.stage

    @property
    def step(self) -> int:
        return self.header.step


class CheckpointService:
    def save(
        self,
        path: Union[str, Path],
        model: HeadModel,
        loss_weights: LossWeights,
        step: int = 0,
        train: Optional[TrainConfig] = None,
        optimizer: Optional[torch.optim.Optimizer] = None,
        trainable_groups: Sequence[str] = (),
        dtype: Optional[str] = None,
        trained_identities: Sequence[str] = (),
        total_steps: Optional[int] = None,
    ) -> Path:
        """Serialize model parameters (and Adam moments when given) atomically"""
        path = Path(path)
        dtype = dtype or ("float64" if torch.get_default_dtype() == torch.float64 else "float32")
        np_dtype = _NUMPY_DTYPES[dtype]
        try:
            arrays: Dict[str, torch.Tensor] = dict(model.state_dict())
            optimizer_steps = {}
            if optimizer is not None:
                for name, entry in optimizer_state_by_name(optimizer, named_trainable(model)).items():
                    arrays[f"{OPTIM_PREFIX}{name}.exp_avg"] = entry["exp_avg"]
                    arrays[f"{OPTIM_PREFIX}{name}.exp_avg_sq"] = entry["exp_avg_sq"]
                    optimizer_steps[name] = entry["step"]

            entries, blobs, offset = [], [], 0
            for name, tensor in arrays.items():
                data = np.ascontiguousarray(tensor.detach().cpu().numpy().astype(np_dtype))
                blob = data.tobytes()
                entries.append(ArrayEntry(name=name, shape=list(data.shape), offset=offset, nbytes=len(blob)))
                blobs.append(blob)
                offset += len(blob)

            header = CheckpointHeader(
                stage=model.stage,
                dtype=dtype,
                step=step,
                identity_ids=model.identity_ids,
                code_dim=model.config.code_dim,
                alpha=float(model.density.alpha),
                beta=float(model.density.beta),
                model=model.config,
                loss_weights=loss_weights,
                train=train,
                trainable_groups=list(trainable_groups),
                trained_identities=list(trained_identities),
                total_steps=total_steps,
                optimizer_steps=optimizer_steps,
                arrays=entries,
            )
            header_bytes = header.model_dump_json().encode("utf-8")

            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(CHECKPOINT_MAGIC)
                    f.write(np.uint64(len(header_bytes)).astype("<u8").tobytes())
                    f.write(header_bytes)
                    for blob in blobs:
                        f.write(blob)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.remove(tmp)
                raise
            logger.info(f"Saved stage-{model.stage} checkpoint at step {step} to {path}")
            return path
        except Exception as e:
            logger.error(f"Error saving checkpoint {path}: {e}")
            raise

    def read_header(self, path: Union[str, Path]) -> CheckpointHeader:
        header, _ = self._read(path, with_arrays=False)
        return header

    def load(self, path: Union[str, Path]) -> LoadedCheckpoint:
        """Rebuild the model (and Adam moments by parameter name) from a container"""
        header, arrays = self._read(path, with_arrays=True)
        model = HeadModel(header.model, header.identity_ids, stage=header.stage)
        state = {name: value for name, value in arrays.items() if not name.startswith(OPTIM_PREFIX)}
        reference = model.state_dict()
        missing = set(reference) - set(state)
        unexpected = set(state) - set(reference)
        if missing or unexpected:
            raise DataError(
                f"Checkpoint {path} does not match a stage-{header.stage} model "
                f"(missing {sorted(missing)}, unexpected {sorted(unexpected)})"
            )
        model.load_state_dict({k: v.to(reference[k].dtype) for k, v in state.items()})

        optimizer_state = {}
        for name, step in header.optimizer_steps.items():
            optimizer_state[name] = {
                "step": step,
                "exp_avg": arrays[f"{OPTIM_PREFIX}{name}.exp_avg"],
                "exp_avg_sq": arrays[f"{OPTIM_PREFIX}{name}.exp_avg_sq"],
            }
        logger.info(f"Loaded stage-{header.stage} checkpoint (step {header.step}) from {path}")
        return LoadedCheckpoint(model=model, header=header, optimizer_state=optimizer_state)

    def export(self, source: Union[str, Path], target: Union[str, Path], precision: str = "float32") -> Path:
        """Rewrite a checkpoint at another storage precision, dropping optimizer state"""
        loaded = self.load(source)
        return self.save(
            target,
            loaded.model,
            loaded.header.loss_weights,
            step=loaded.header.step,
            train=loaded.header.train,
            trainable_groups=loaded.header.trainable_groups,
            dtype=precision,
            trained_identities=loaded.header.trained_identities,
            total_steps=loaded.header.total_steps,
        )

    def _read(self, path: Union[str, Path], with_arrays: bool):
        path = Path(path)
        if not path.is_file():
            raise DataError(f"Checkpoint not found: {path}")
        raw = path.read_bytes()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise DataError(f"Not a checkpoint file: {path}")
        cursor = len(CHECKPOINT_MAGIC)
        header_len = int(np.frombuffer(raw[cursor:cursor + 8], dtype="<u8")[0])
        cursor += 8
        try:
            header = CheckpointHeader.model_validate(json.loads(raw[cursor:cursor + header_len].decode("utf-8")))
        except ValueError as e:
            raise DataError(f"Corrupt checkpoint header in {path}: {e}") from e
        if header.format_version != CHECKPOINT_VERSION:
            raise DataError(f"Unsupported checkpoint version {header.format_version} in {path}")
        if not with_arrays:
            return header, {}
        base = cursor + header_len
        np_dtype = _NUMPY_DTYPES[header.dtype]
        arrays = {}
        for entry in header.arrays:
            start = base + entry.offset
            if start + entry.nbytes > len(raw):
                raise DataError(f"Checkpoint {path} is truncated at array {entry.name}")
            data = np.frombuffer(raw[start:start + entry.nbytes], dtype=np_dtype).reshape(entry.shape)
            arrays[entry.name] = torch.from_numpy(data.copy()).to(torch.get_default_dtype())
        return header, arrays
